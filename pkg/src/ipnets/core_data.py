"""Sparse time-series data model, reference grid and union-of-timestamps batches."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

DTYPE = torch.float64
DEFAULT_WINDOW = 48.0
DEFAULT_T = 49


class ValidationError(ValueError):
    """Raised for malformed inputs (bad times, shapes, unknown dimensions)."""


@dataclass(frozen=True)
class Label:
    cls: int | None = None
    regression_target: float | None = None

    def __post_init__(self):
        if (self.cls is None) == (self.regression_target is None):
            raise ValidationError("exactly one of cls / regression_target must be set")
        if self.cls is not None and self.cls not in (0, 1):
            raise ValidationError(f"class label must be 0 or 1, got {self.cls}")
        if self.regression_target is not None and not np.isfinite(self.regression_target):
            raise ValidationError("regression target must be finite")

    @property
    def value(self) -> float:
        return float(self.cls if self.cls is not None else self.regression_target)


@dataclass
class SparseSeries:
    """One data case: D lists of (time, value) pairs plus its label."""

    id: str
    dims: list[list[tuple[float, float]]]
    target: Label | None = None

    @property
    def D(self) -> int:
        return len(self.dims)

    @property
    def n_obs(self) -> int:
        return sum(len(d) for d in self.dims)

    def validate(self, window_length: float = DEFAULT_WINDOW) -> "SparseSeries":
        for d, seq in enumerate(self.dims):
            prev = -np.inf
            for t, x in seq:
                if not (0.0 <= t <= window_length):
                    raise ValidationError(
                        f"case {self.id} dim {d}: time {t} outside [0, {window_length}]")
                if t <= prev:
                    raise ValidationError(
                        f"case {self.id} dim {d}: times not strictly increasing at {t}")
                if not np.isfinite(x):
                    raise ValidationError(f"case {self.id} dim {d}: non-finite value at t={t}")
                prev = t
        return self


@dataclass(frozen=True)
class ReferenceGrid:
    points: np.ndarray
    spacing: float

    @property
    def T(self) -> int:
        return len(self.points)

    @property
    def window_length(self) -> float:
        return float(self.points[-1])

    def tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.points, dtype=DTYPE)


def make_grid(window_length: float = DEFAULT_WINDOW, T: int = DEFAULT_T) -> ReferenceGrid:
    if T < 2:
        raise ValidationError(f"grid needs T >= 2 points, got {T}")
    if not window_length > 0:
        raise ValidationError(f"window_length must be positive, got {window_length}")
    spacing = window_length / (T - 1)
    points = np.arange(T, dtype=np.float64) * spacing
    points[-1] = window_length
    return ReferenceGrid(points=points, spacing=spacing)


@dataclass
class DenseBatch:
    """Union-of-timestamps representation of a single case.

    ``values`` is zero wherever ``observed`` is zero.
    """

    times: np.ndarray  # (U,)
    values: np.ndarray  # (D, U)
    observed: np.ndarray  # (D, U) bool
    id: str = ""
    target: Label | None = None

    @property
    def D(self) -> int:
        return self.values.shape[0]

    @property
    def U(self) -> int:
        return len(self.times)


def densify(case: SparseSeries, window_length: float = DEFAULT_WINDOW) -> DenseBatch:
    case.validate(window_length)
    times = np.array(sorted({t for seq in case.dims for t, _ in seq}), dtype=np.float64)
    index = {t: u for u, t in enumerate(times)}
    values = np.zeros((case.D, len(times)))
    observed = np.zeros((case.D, len(times)), dtype=bool)
    for d, seq in enumerate(case.dims):
        for t, x in seq:
            values[d, index[t]] = x
            observed[d, index[t]] = True
    return DenseBatch(times, values, observed, id=case.id, target=case.target)


def sparsify(batch: DenseBatch) -> SparseSeries:
    dims = []
    for d in range(batch.D):
        idx = np.flatnonzero(batch.observed[d])
        dims.append([(float(batch.times[u]), float(batch.values[d, u])) for u in idx])
    return SparseSeries(batch.id, dims, batch.target)


@dataclass
class PaddedBatch:
    """Several cases collated along a leading batch axis, padded to the longest U.

    ``offsets[n]:offsets[n+1]`` is the index range case ``n`` occupies in the
    flat concatenation of union timestamps (``lengths`` are the unpadded U).
    """

    times: torch.Tensor  # (B, U)
    values: torch.Tensor  # (B, D, U)
    observed: torch.Tensor  # (B, D, U) float 0/1
    lengths: np.ndarray  # (B,)
    ids: list[str] = field(default_factory=list)

    @property
    def B(self) -> int:
        return self.times.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.lengths)])

    def with_observed(self, observed: torch.Tensor) -> "PaddedBatch":
        observed = observed.to(DTYPE)
        return PaddedBatch(self.times, self.values * observed, observed, self.lengths, self.ids)

    def case(self, n: int) -> DenseBatch:
        U = int(self.lengths[n])
        return DenseBatch(self.times[n, :U].numpy().copy(),
                          self.values[n, :, :U].detach().numpy().copy(),
                          self.observed[n, :, :U].numpy().astype(bool),
                          id=self.ids[n] if self.ids else "")


def collate(cases: Sequence[DenseBatch]) -> PaddedBatch:
    if not cases:
        raise ValidationError("cannot collate an empty list of cases")
    D = cases[0].D
    if any(c.D != D for c in cases):
        raise ValidationError("all cases must have the same number of dimensions")
    U = max(1, max(c.U for c in cases))
    B = len(cases)
    times = np.zeros((B, U))
    values = np.zeros((B, D, U))
    observed = np.zeros((B, D, U))
    for n, c in enumerate(cases):
        times[n, :c.U] = c.times
        values[n, :, :c.U] = c.values
        observed[n, :, :c.U] = c.observed
    return PaddedBatch(torch.from_numpy(times), torch.from_numpy(values),
                       torch.from_numpy(observed), np.array([c.U for c in cases]),
                       [c.id for c in cases])


def as_padded(batch: DenseBatch | PaddedBatch | Sequence[DenseBatch]) -> PaddedBatch:
    if isinstance(batch, PaddedBatch):
        return batch
    if isinstance(batch, DenseBatch):
        return collate([batch])
    return collate(list(batch))


@dataclass
class Normalizer:
    """Per-dimension z-scoring with statistics from observed training values only."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, cases: Sequence[SparseSeries]) -> "Normalizer":
        D = cases[0].D
        mean, std = np.zeros(D), np.ones(D)
        for d in range(D):
            xs = np.array([x for c in cases for _, x in c.dims[d]])
            if len(xs):
                mean[d] = xs.mean()
                if len(xs) > 1 and xs.std() > 0:
                    std[d] = xs.std()
        return cls(mean, std)

    def transform(self, case: SparseSeries) -> SparseSeries:
        dims = [[(t, (x - self.mean[d]) / self.std[d]) for t, x in seq]
                for d, seq in enumerate(case.dims)]
        return SparseSeries(case.id, dims, case.target)
