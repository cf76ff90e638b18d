"""Two-layer semi-parametric RBF interpolation network.

Layer 1 interpolates each dimension on its own with a normalized Gaussian
kernel; layer 2 mixes the layer-1 interpolants across dimensions, weighted
by the local observation intensity. Three channels come out: a smooth
interpolant, a transient residual (narrower kernel minus the smooth one)
and the intensity itself.

Every function works on padded batches: ``times`` (B, U), ``values`` and
``observed`` (B, D, U). Query points are either a shared grid (T,) or
per-case query times (B, Q).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core_data import DTYPE, PaddedBatch, ReferenceGrid, ValidationError, as_padded

CHANNELS = ("smooth", "transient", "intensity")


@dataclass
class InterpParams:
    log_alpha: torch.Tensor  # (D,)
    rho: torch.Tensor  # (D, D)
    kappa: float = 10.0

    def __post_init__(self):
        if not self.kappa > 1:
            raise ValidationError(f"kappa must be > 1, got {self.kappa}")
        D = self.log_alpha.shape[0]
        if tuple(self.rho.shape) != (D, D):
            raise ValidationError(f"rho must be {D}x{D}, got {tuple(self.rho.shape)}")

    @property
    def alpha1(self) -> torch.Tensor:
        return torch.exp(self.log_alpha)

    @property
    def alpha2(self) -> torch.Tensor:
        return self.kappa * torch.exp(self.log_alpha)

    @classmethod
    def init(cls, D: int, grid: ReferenceGrid, kappa: float = 10.0,
             rng: np.random.Generator | None = None) -> "InterpParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        # kernel length scale of twice the grid spacing
        alpha = 1.0 / (2.0 * grid.spacing) ** 2
        log_alpha = torch.full((D,), float(np.log(alpha)), dtype=DTYPE)
        rho = torch.from_numpy(np.eye(D) + rng.uniform(-0.01, 0.01, size=(D, D)))
        return cls(log_alpha, rho, kappa)


@dataclass
class ChannelGrid:
    smooth: torch.Tensor  # (B, D, T)
    transient: torch.Tensor
    intensity: torch.Tensor

    def stack(self, channels=CHANNELS) -> torch.Tensor:
        """Prediction-network input of shape (B, T, C*D), channel-major in the feature axis."""
        parts = [getattr(self, c) for c in channels]
        return torch.cat(parts, dim=1).transpose(1, 2)


def _query(grid) -> torch.Tensor:
    if isinstance(grid, ReferenceGrid):
        return grid.tensor()
    return torch.as_tensor(grid, dtype=DTYPE)


def _log_kernel(batch: PaddedBatch, query: torch.Tensor, alpha):
    """Log RBF weights (B, D, Q, U) and the matching observed mask."""
    alpha = torch.as_tensor(alpha, dtype=DTYPE)
    if query.dim() == 1:
        diff = query[None, None, :, None] - batch.times[:, None, None, :]
    else:
        diff = query[:, None, :, None] - batch.times[:, None, None, :]
    logw = -alpha[None, :, None, None] * diff ** 2
    valid = (batch.observed > 0)[:, :, None, :].expand_as(logw)
    return logw, valid


def _shifted_weights(logw: torch.Tensor, valid: torch.Tensor, dim: int = -1):
    """exp(logw - max) over valid entries, plus the shift and a has-any flag.

    The largest valid weight becomes exactly 1, so sums are >= 1 wherever any
    entry is valid; nothing underflows in the backward pass.
    """
    masked = logw.masked_fill(~valid, -torch.inf)
    shift = masked.detach().amax(dim=dim, keepdim=True)
    has_any = torch.isfinite(shift)
    shift = shift.masked_fill(~has_any, 0.0)
    w = torch.exp(masked - shift)
    return w, shift.squeeze(dim), has_any.squeeze(dim)


def _rbf_stats(batch: PaddedBatch, query: torch.Tensor, alpha):
    """Layer-1 interpolant, log intensity (-inf on empty dims) and has-observation flag, (B, D, Q)."""
    logw, valid = _log_kernel(batch, query, alpha)
    w, shift, has_obs = _shifted_weights(logw, valid)
    total = w.sum(-1)
    safe_total = torch.where(has_obs, total, torch.ones_like(total))
    weighted = torch.matmul(w, batch.values[..., None])[..., 0]
    x1 = torch.where(has_obs, weighted / safe_total, torch.zeros_like(total))
    log_i = torch.where(has_obs, torch.log(safe_total) + shift, torch.full_like(total, -torch.inf))
    return x1, log_i, has_obs


def layer1_interpolate(batch, grid, alpha) -> torch.Tensor:
    """Normalized kernel average per dimension, (B, D, T); 0 on empty dimensions."""
    return _rbf_stats(as_padded(batch), _query(grid), alpha)[0]


def intensity(batch, grid, alpha) -> torch.Tensor:
    """Unnormalized kernel sum of observation times, (B, D, T)."""
    return torch.exp(_rbf_stats(as_padded(batch), _query(grid), alpha)[1])


def log_intensity(batch, grid, alpha) -> torch.Tensor:
    """Log of :func:`intensity`, -inf on empty dimensions.

    Stays finite far from the observations, where the intensity itself
    underflows to 0 and would read as an empty dimension.
    """
    return _rbf_stats(as_padded(batch), _query(grid), alpha)[1]


def layer2_interpolate(layer1: torch.Tensor, intensities: torch.Tensor | None,
                       rho: torch.Tensor, log_intensities: torch.Tensor | None = None) -> torch.Tensor:
    """Intensity-weighted cross-dimension mix of layer-1 interpolants.

    out[b, d, k] = sum_d' rho[d, d'] i[b, d', k] x1[b, d', k] / sum_d' i[b, d', k],
    and 0 where every intensity at k is 0. Passing ``log_intensities`` instead
    of ``intensities`` gives the same values with gradients that stay finite
    when the intensities are tiny.
    """
    if log_intensities is None:
        if intensities is None or intensities.shape != layer1.shape:
            raise ValidationError("layer1 and intensities must have the same shape")
        log_intensities = torch.log(intensities)
    elif log_intensities.shape != layer1.shape:
        raise ValidationError("layer1 and log_intensities must have the same shape")
    valid = torch.isfinite(log_intensities)
    w, _, has_any = _shifted_weights(log_intensities, valid, dim=1)
    weights = w / torch.where(has_any, w.sum(1), torch.ones_like(w[:, 0]))[:, None, :]
    out = torch.einsum("ij,bjk->bik", rho, weights * layer1)
    return torch.where(has_any[:, None, :], out, torch.zeros_like(out))


def transient_residual(nonsmooth_layer1: torch.Tensor, smooth_layer2: torch.Tensor) -> torch.Tensor:
    if nonsmooth_layer1.shape != smooth_layer2.shape:
        raise ValidationError("shapes of the two interpolants differ")
    return nonsmooth_layer1 - smooth_layer2


def smooth_channel(batch, grid, params: InterpParams) -> torch.Tensor:
    x1, log_i, _ = _rbf_stats(as_padded(batch), _query(grid), params.alpha1)
    return layer2_interpolate(x1, None, params.rho, log_intensities=log_i)


def interpolate_batch(batch, grid, params: InterpParams) -> ChannelGrid:
    batch = as_padded(batch)
    if batch.D != params.log_alpha.shape[0]:
        raise ValidationError(f"batch has D={batch.D}, params expect {params.log_alpha.shape[0]}")
    query = _query(grid)
    x11, log_i, _ = _rbf_stats(batch, query, params.alpha1)
    smooth = layer2_interpolate(x11, None, params.rho, log_intensities=log_i)
    x12 = _rbf_stats(batch, query, params.alpha2)[0]
    return ChannelGrid(smooth=smooth, transient=transient_residual(x12, smooth),
                       intensity=torch.exp(log_i))
