"""Masked-holdout reconstruction loss, supervised losses and the composite objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core_data import DTYPE, PaddedBatch, ValidationError, as_padded
from .interp import InterpParams, smooth_channel


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class MaskAssignment:
    """Held-out observations, as a boolean (B, D, U) array aligned with the batch."""

    held_out: np.ndarray
    holdout_fraction: float
    rng_seed: int | Sequence[int]

    def indices(self, n: int) -> list[tuple[int, int]]:
        """(j, d) pairs held out for case ``n``; j indexes the union timestamps."""
        d_idx, u_idx = np.nonzero(self.held_out[n])
        return sorted(zip(u_idx.tolist(), d_idx.tolist()))

    @property
    def count(self) -> int:
        return int(self.held_out.sum())


@dataclass
class LossConfig:
    delta: float = 1.0
    lambda_I: float = 1e-4
    lambda_P: float = 1e-4
    task: str = "classification"

    def __post_init__(self):
        for name in ("delta", "lambda_I", "lambda_P"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValidationError(f"{name} must be finite and >= 0, got {v}")
        if self.task not in ("classification", "regression"):
            raise ValidationError(f"unknown task {self.task!r}")


def sample_masks(batch, fraction: float, seed) -> MaskAssignment:
    """Hold out floor(fraction * count) observed points per case, uniformly without replacement."""
    if not 0 < fraction < 1:
        raise ValidationError(f"holdout fraction must be in (0, 1), got {fraction}")
    batch = as_padded(batch)
    observed = batch.observed.numpy() > 0
    rng = np.random.default_rng(seed)
    held = np.zeros_like(observed)
    B = observed.shape[0]
    keys = rng.random(observed.shape)
    for n in range(B):
        flat = np.flatnonzero(observed[n])
        k = int(np.floor(fraction * len(flat)))
        if k == 0:
            continue
        chosen = flat[np.argsort(keys[n].ravel()[flat], kind="stable")[:k]]
        held[n].ravel()[chosen] = True
    return MaskAssignment(held, fraction, seed)


@dataclass
class Reconstruction:
    """Held-out targets and their predictions, padded to (B, Q) with a validity mask."""

    target: torch.Tensor
    prediction: torch.Tensor
    valid: torch.Tensor
    dims: torch.Tensor
    u_index: torch.Tensor

    def as_list(self) -> list[tuple[int, int, int, float]]:
        """(case, j, d, prediction) for every held-out point."""
        out = []
        for n, q in zip(*np.nonzero(self.valid.numpy())):
            out.append((int(n), int(self.u_index[n, q]), int(self.dims[n, q]),
                        float(self.prediction[n, q])))
        return out


def reconstruct_heldout(batch, mask: MaskAssignment, params: InterpParams) -> Reconstruction:
    """Predict every held-out value with the smooth channel fed only the retained points."""
    batch = as_padded(batch)
    held = torch.from_numpy(mask.held_out)
    if held.shape != batch.observed.shape:
        raise ValidationError("mask shape does not match batch")
    if torch.any(held & (batch.observed == 0)):
        raise ValidationError("mask holds out unobserved entries")
    B = batch.B
    per_case = held.flatten(1).sum(1)
    Q = max(1, int(per_case.max())) if B else 1
    dims = torch.zeros((B, Q), dtype=torch.long)
    u_index = torch.zeros((B, Q), dtype=torch.long)
    valid = torch.zeros((B, Q), dtype=torch.bool)
    for n in range(B):
        d_idx, u_idx = torch.nonzero(held[n], as_tuple=True)
        q = len(d_idx)
        dims[n, :q], u_index[n, :q], valid[n, :q] = d_idx, u_idx, True
    query_t = torch.gather(batch.times, 1, u_index)
    retained = batch.with_observed(batch.observed * (~held).to(DTYPE))
    smooth = smooth_channel(retained, query_t, params)  # (B, D, Q)
    pred = torch.gather(smooth, 1, dims[:, None, :])[:, 0, :]
    target = batch.values[torch.arange(B)[:, None], dims, u_index]
    zero = torch.zeros((), dtype=DTYPE)
    return Reconstruction(torch.where(valid, target, zero), torch.where(valid, pred, zero),
                          valid, dims, u_index)


def supervised_loss(output: torch.Tensor, y: torch.Tensor, task: str) -> torch.Tensor:
    """Mean per-case loss; ``output`` is a logit for classification, a prediction for regression."""
    y = torch.as_tensor(y, dtype=DTYPE)
    if task == "classification":
        return F.binary_cross_entropy_with_logits(output, y)
    return torch.mean((output - y) ** 2)


def reconstruction_loss(rec: Reconstruction) -> torch.Tensor:
    n = rec.valid.sum()
    if n == 0:
        return torch.zeros((), dtype=DTYPE)
    err = torch.where(rec.valid, rec.prediction - rec.target, torch.zeros((), dtype=DTYPE))
    return (err ** 2).sum() / n


def squared_norm(tensors: Iterable[torch.Tensor]) -> torch.Tensor:
    total = torch.zeros((), dtype=DTYPE)
    for t in tensors:
        total = total + (torch.as_tensor(t, dtype=DTYPE) ** 2).sum()
    return total


@dataclass
class LossBreakdown:
    supervised: torch.Tensor
    reconstruction: torch.Tensor
    reg_I: torch.Tensor
    reg_P: torch.Tensor
    total: torch.Tensor

    def row(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in
                ("supervised", "reconstruction", "reg_I", "reg_P", "total")}


def composite_loss(pred_loss, recon_terms, params_I, params_P, cfg: LossConfig) -> LossBreakdown:
    """Supervised loss + delta * mean squared reconstruction error + L2 penalties.

    ``recon_terms`` is a :class:`Reconstruction`, or a sequence of
    (target, prediction) pairs, or ``None``.
    """
    pred_loss = torch.as_tensor(pred_loss, dtype=DTYPE)
    if recon_terms is None:
        recon = torch.zeros((), dtype=DTYPE)
    elif isinstance(recon_terms, Reconstruction):
        recon = reconstruction_loss(recon_terms)
    else:
        pairs = list(recon_terms)
        recon = torch.zeros((), dtype=DTYPE)
        if pairs:
            err = torch.stack([torch.as_tensor(x, dtype=DTYPE) - torch.as_tensor(p, dtype=DTYPE)
                               for x, p in pairs])
            recon = (err ** 2).mean()
    reg_I = cfg.lambda_I * squared_norm(params_I)
    reg_P = cfg.lambda_P * squared_norm(params_P)
    parts = {"supervised": pred_loss, "reconstruction": cfg.delta * recon,
             "reg_I": reg_I, "reg_P": reg_P}
    for name, v in parts.items():
        if not torch.isfinite(v):
            raise NonFiniteLossError(f"non-finite {name} term: {float(v)}")
    total = pred_loss + cfg.delta * recon + reg_I + reg_P
    return LossBreakdown(pred_loss, cfg.delta * recon, reg_I, reg_P, total)
