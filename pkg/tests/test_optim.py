import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import random_case
from ipnets.core_data import Label, densify, make_grid
from ipnets.models import GruBaseline, ProposedModel
from ipnets.objective import LossConfig
from ipnets.optim import (NonFiniteGradientError, ParamStore, adam_step, compute_gradients,
                          finite_diff_check, relative_error)


def sum_sq(params):
    return (params["theta"] ** 2).sum()


def store_with(**arrays):
    s = ParamStore()
    for k, v in arrays.items():
        s.add(k, np.asarray(v, dtype=np.float64))
    return s


def test_gradient_of_sum_of_squares():
    s = store_with(theta=[1.0, -2.0, 0.5])
    g = compute_gradients(sum_sq, s)
    np.testing.assert_array_equal(g["theta"].numpy(), [2.0, -4.0, 1.0])


def test_unused_parameter_gets_zero_gradient():
    s = store_with(theta=[1.0, 2.0], unused=[[3.0]])
    g = compute_gradients(sum_sq, s)
    np.testing.assert_array_equal(g["unused"].numpy(), [[0.0]])


def test_adam_first_step_moves_by_lr():
    # bias correction makes the first step lr * sign(g), up to eps
    s = store_with(theta=[1.0, -3.0])
    compute_gradients(sum_sq, s)
    adam_step(s, lr=1e-3)
    np.testing.assert_allclose(s["theta"].detach().numpy(), [1.0 - 1e-3, -3.0 + 1e-3], atol=1e-10)
    assert s.step == 1


def test_zero_gradient_keeps_params_and_counts_step():
    s = store_with(theta=[0.0, 0.0])
    compute_gradients(sum_sq, s)
    adam_step(s)
    np.testing.assert_array_equal(s["theta"].detach().numpy(), [0.0, 0.0])
    assert s.step == 1


def test_constant_gradient_step_tends_to_lr():
    s = store_with(w=[0.0])
    lin = lambda p: 3.0 * p["w"].sum()
    for _ in range(200):
        compute_gradients(lin, s)
        adam_step(s, lr=1e-3)
    cur = float(s["w"].detach())
    compute_gradients(lin, s)
    adam_step(s, lr=1e-3)
    assert abs((float(s["w"].detach()) - cur) + 1e-3) < 1e-9
    assert cur < -0.19


def test_gradients_cleared_after_step():
    s = store_with(theta=[1.0])
    compute_gradients(sum_sq, s)
    adam_step(s)
    assert float(s.grads["theta"]) == 0.0


def test_non_finite_gradient_raises():
    s = store_with(theta=[0.0])
    with pytest.raises(NonFiniteGradientError, match="theta"):
        compute_gradients(lambda p: torch.sqrt(torch.abs(p["theta"])).sum(), s)


def test_state_arrays_roundtrip():
    s = store_with(a=[1.0, 2.0], b=[[0.5]])
    compute_gradients(lambda p: (p["a"] ** 3).sum() + p["b"].sum(), s)
    adam_step(s)
    r = ParamStore.from_arrays(s.state_arrays())
    assert r.step == 1
    for k in s.names():
        np.testing.assert_array_equal(r[k].detach().numpy(), s[k].detach().numpy())
        np.testing.assert_array_equal(r.m[k].numpy(), s.m[k].numpy())
        np.testing.assert_array_equal(r.v[k].numpy(), s.v[k].numpy())


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0
    assert relative_error(np.array([1e-12]), np.array([0.0]))[0] == pytest.approx(1e-4)
    assert relative_error(np.array([2.0]), np.array([1.0]))[0] == 0.5


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=5), st.lists(st.floats(-3, 3), min_size=1, max_size=5))
def test_finite_diff_on_quadratic(a, b):
    s = store_with(a=a, b=b)
    f = lambda p: (p["a"] ** 2).sum() * 0.5 + (p["b"] ** 2).sum() + p["a"].sum() * p["b"].sum()
    rep = finite_diff_check(f, s, tol=1e-6)
    assert rep.passed, str(rep)


def test_finite_diff_handles_scalar_params():
    s = store_with(c=1.5)
    rep = finite_diff_check(lambda p: p["c"] ** 3, s, tol=1e-6)
    assert rep.passed
    assert rep.worst_index == ()


def test_corrupted_gradient_is_located():
    s = store_with(w=np.arange(6.0).reshape(2, 3) / 5)
    f = lambda p: (p["w"] ** 2).sum()
    g = {"w": compute_gradients(f, s)["w"].clone()}
    g["w"][1, 2] += 0.1
    rep = finite_diff_check(f, s, analytic=g)
    assert not rep.passed
    assert rep.worst_param == "w" and rep.worst_index == (1, 2)
    assert "w[1, 2]" in str(rep)


def tiny_data(rng, n=2, D=3, task="classification"):
    cases = []
    for i in range(n):
        lab = Label(cls=i % 2) if task == "classification" else Label(regression_target=float(rng.normal()))
        c = random_case(rng, D, max_obs=4, window=4.0, cid=f"c{i}", label=lab)
        cases.append(densify(c, 4.0))
    return cases


@pytest.mark.parametrize("task", ["classification", "regression"])
def test_proposed_composite_gradient(rng, task):
    cases = tiny_data(rng, task=task)
    grid = make_grid(4.0, 5)
    m = ProposedModel(3, grid, LossConfig(task=task), hidden_size=4)
    m.init_params(np.random.default_rng(1), 0.3)
    data = m.prepare(cases)
    y = np.array([c.target.value for c in cases])
    f = lambda p: m.loss(p, data, np.arange(2), y, mask_seed=[0, 0, 0]).total
    rep = finite_diff_check(f, m.store)
    assert rep.passed, str(rep)


def test_gru_d_composite_gradient(rng):
    cases = tiny_data(rng)
    m = GruBaseline("D", 3, make_grid(4.0, 5), LossConfig(), hidden_size=4)
    m.init_params(np.random.default_rng(2))
    # push the decay away from its clamp kink at zero
    m.store.load_values({"decay/b_gamma": np.full(3, 0.2)})
    data = m.prepare(cases)
    y = np.array([0.0, 1.0])
    rep = finite_diff_check(lambda p: m.loss(p, data, np.arange(2), y).total, m.store)
    assert rep.passed, str(rep)
