import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from conftest import random_case
from ipnets.core_data import SparseSeries, ValidationError, collate, densify, make_grid
from ipnets.interp import InterpParams
from ipnets.objective import (LossConfig, MaskAssignment, NonFiniteLossError, composite_loss,
                              reconstruct_heldout, sample_masks, supervised_loss)

T64 = torch.float64


def params1(alpha=1.0):
    return InterpParams(torch.tensor([np.log(alpha)], dtype=T64), torch.ones((1, 1), dtype=T64))


def hold(dense, pairs):
    """MaskAssignment holding out the given (d, u) entries of a single-case batch."""
    held = np.zeros((1,) + dense.observed.shape, dtype=bool)
    for d, u in pairs:
        held[0, d, u] = True
    return MaskAssignment(held, 0.2, 0)


def test_sample_masks_count_and_floor():
    ten = densify(SparseSeries("a", [[(float(t), 1.0) for t in range(10)]]))
    assert sample_masks(ten, 0.2, 1).count == 2
    one = densify(SparseSeries("b", [[(3.0, 1.0)]]))
    assert sample_masks(one, 0.2, 1).count == 0
    empty = densify(SparseSeries("c", [[], []]))
    assert sample_masks(empty, 0.2, 1).count == 0


def test_sample_masks_deterministic_and_subset(rng):
    batch = collate([densify(random_case(rng, 4, max_obs=8)) for _ in range(6)])
    a = sample_masks(batch, 0.3, [5, 1, 2])
    b = sample_masks(batch, 0.3, [5, 1, 2])
    np.testing.assert_array_equal(a.held_out, b.held_out)
    assert not np.any(a.held_out & (batch.observed.numpy() == 0))
    for n in range(batch.B):
        total = int(batch.observed[n].sum())
        assert a.held_out[n].sum() == int(np.floor(0.3 * total))
    c = sample_masks(batch, 0.3, [5, 1, 3])
    assert not np.array_equal(a.held_out, c.held_out)


def test_sample_masks_rejects_bad_fraction():
    with pytest.raises(ValidationError):
        sample_masks(densify(SparseSeries("a", [[]])), 1.0, 0)


def test_reconstruct_only_observation_gives_zero():
    dense = densify(SparseSeries("a", [[(5.0, 3.0)], []]))
    p = InterpParams(torch.zeros(2, dtype=T64), torch.eye(2, dtype=T64))
    rec = reconstruct_heldout(dense, hold(dense, [(0, 0)]), p)
    assert rec.as_list() == [(0, 0, 0, 0.0)]


def test_reconstruct_constant_series():
    dense = densify(SparseSeries("a", [[(0.0, 1.0), (1.0, 1.0), (2.0, 1.0)]]))
    rec = reconstruct_heldout(dense, hold(dense, [(0, 1)]), params1())
    assert rec.prediction[0, 0].item() == pytest.approx(1.0, abs=1e-15)
    assert rec.target[0, 0].item() == 1.0


def test_reconstruct_symmetric_midpoint():
    dense = densify(SparseSeries("a", [[(0.0, 0.0), (1.0, 7.5), (2.0, 2.0)]]))
    rec = reconstruct_heldout(dense, hold(dense, [(0, 1)]), params1(0.7))
    expected = oracles.smooth_at([[(0.0, 0.0), (2.0, 2.0)]], 1.0, 0, [0.7], [[1.0]])
    assert expected == pytest.approx(1.0, abs=1e-15)
    assert rec.prediction[0, 0].item() == pytest.approx(expected, abs=1e-14)


def test_reconstruct_matches_oracle_multidim(rng):
    grid = make_grid()
    for _ in range(10):
        case = random_case(rng, 3, max_obs=6)
        dense = densify(case)
        mask = sample_masks(dense, 0.34, int(rng.integers(1 << 30)))
        p = InterpParams(torch.from_numpy(rng.normal(-1, 0.5, 3)), torch.from_numpy(rng.normal(size=(3, 3))))
        rec = reconstruct_heldout(dense, mask, p)
        kept = [[(t, x) for (t, x) in seq if not mask.held_out[0, d, list(dense.times).index(t)]]
                for d, seq in enumerate(case.dims)]
        for n, u, d, pred in rec.as_list():
            want = oracles.smooth_at(kept, dense.times[u], d, p.alpha1.tolist(), p.rho.tolist())
            assert pred == pytest.approx(want, rel=1e-11, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), value=st.floats(-1e6, 1e6))
def test_heldout_value_never_reaches_interpolant(seed, value):
    rng = np.random.default_rng(seed)
    dense = densify(random_case(rng, 3, max_obs=8))
    mask = sample_masks(dense, 0.3, seed)
    if mask.count == 0:
        return
    p = InterpParams.init(3, make_grid(), rng=rng)
    before = reconstruct_heldout(dense, mask, p)
    d, u = np.argwhere(mask.held_out[0])[0]
    dense.values[d, u] = value
    after = reconstruct_heldout(dense, mask, p)
    assert torch.equal(before.prediction, after.prediction)
    changed = (after.target != before.target).nonzero()
    assert len(changed) <= 1


def test_composite_loss_examples():
    cfg0 = LossConfig(delta=0.0, lambda_I=0.0, lambda_P=0.0)
    th = [torch.tensor([3.0], dtype=T64)]
    assert composite_loss(0.42, [(1.0, 0.0)], th, th, cfg0).total.item() == 0.42
    cfg = LossConfig(delta=1.0, lambda_I=0.0, lambda_P=0.0)
    assert composite_loss(0.0, [(2.0, 2.0)], th, th, cfg).total.item() == 0.0
    cfg = LossConfig(delta=1.0, lambda_I=0.1, lambda_P=0.0)
    bd = composite_loss(0.5, [(1.3, 1.0)], [torch.tensor([2.0], dtype=T64)], th, cfg)
    assert bd.total.item() == pytest.approx(0.99, abs=1e-15)
    assert bd.row() == pytest.approx({"supervised": 0.5, "reconstruction": 0.09, "reg_I": 0.4,
                                      "reg_P": 0.0, "total": 0.99})


def test_composite_loss_non_finite_names_term():
    cfg = LossConfig()
    with pytest.raises(NonFiniteLossError, match="supervised"):
        composite_loss(float("nan"), None, [], [], cfg)
    with pytest.raises(NonFiniteLossError, match="reg_P"):
        composite_loss(0.1, None, [], [torch.tensor([float("inf")])], cfg)


def test_loss_config_validation():
    with pytest.raises(ValidationError):
        LossConfig(delta=-1)
    with pytest.raises(ValidationError):
        LossConfig(task="ranking")


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_composite_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    logits = torch.from_numpy(rng.normal(size=5))
    y = torch.from_numpy(rng.integers(0, 2, 5).astype(float))
    sup = supervised_loss(logits, y, "classification")
    pairs = list(zip(rng.normal(size=3), rng.normal(size=3)))
    cfg = LossConfig(delta=float(rng.uniform(0, 2)), lambda_I=float(rng.uniform(0, 1)),
                     lambda_P=float(rng.uniform(0, 1)))
    assert composite_loss(sup, pairs, [torch.from_numpy(rng.normal(size=4))],
                          [torch.from_numpy(rng.normal(size=2))], cfg).total >= 0


def test_supervised_losses():
    logit = torch.tensor([0.0, 2.0], dtype=T64)
    y = torch.tensor([1.0, 0.0], dtype=T64)
    ce = supervised_loss(logit, y, "classification").item()
    expected = (-np.log(0.5) - np.log(1 - 1 / (1 + np.exp(-2.0)))) / 2
    assert ce == pytest.approx(expected, rel=1e-14)
    assert supervised_loss(torch.tensor([1.0, 3.0], dtype=T64),
                           torch.tensor([0.0, 1.0], dtype=T64), "regression").item() == 2.5
