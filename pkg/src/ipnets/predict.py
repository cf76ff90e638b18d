"""GRU prediction network, task heads and GRU-M/F/S/D baseline inputs."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch

from .core_data import DTYPE, DenseBatch, Normalizer, ReferenceGrid, ValidationError

REGRESSION_HIDDEN = 50
VARIANTS = ("M", "F", "S", "D")


def _uniform(rng, shape, bound):
    return torch.from_numpy(rng.uniform(-bound, bound, size=shape))


@dataclass
class GruParams:
    w_z: torch.Tensor  # (F, H)
    w_r: torch.Tensor
    w_n: torch.Tensor
    u_z: torch.Tensor  # (H, H)
    u_r: torch.Tensor
    u_n: torch.Tensor
    b_z: torch.Tensor  # (H,)
    b_r: torch.Tensor
    b_n: torch.Tensor

    @property
    def input_size(self) -> int:
        return self.w_z.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.w_z.shape[1]

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: np.random.Generator) -> "GruParams":
        k = 1.0 / np.sqrt(hidden_size)
        ws = {f"w_{g}": _uniform(rng, (input_size, hidden_size), k) for g in "zrn"}
        us = {f"u_{g}": _uniform(rng, (hidden_size, hidden_size), k) for g in "zrn"}
        bs = {f"b_{g}": torch.zeros(hidden_size, dtype=DTYPE) for g in "zrn"}
        return cls(**ws, **us, **bs)

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int) -> "GruParams":
        shapes = {"w": (input_size, hidden_size), "u": (hidden_size, hidden_size), "b": (hidden_size,)}
        return cls(**{f.name: torch.zeros(shapes[f.name[0]], dtype=DTYPE) for f in fields(cls)})

    def named(self) -> dict[str, torch.Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def gru_forward(seq: torch.Tensor, params: GruParams, h0: torch.Tensor | None = None):
    """Run the recurrence over ``seq`` of shape (B, T, F) or (T, F).

    h_t = (1 - z) * h_{t-1} + z * n with update gate z, reset gate r and
    candidate n = tanh(x W_n + (r * h_{t-1}) U_n + b_n).
    Returns (hidden states (B, T, H), final hidden (B, H)).
    """
    squeeze = seq.dim() == 2
    if squeeze:
        seq = seq[None]
    if seq.shape[-1] != params.input_size:
        raise ValidationError(f"input has {seq.shape[-1]} features, GRU expects {params.input_size}")
    if torch.isnan(seq).any():
        step = int(torch.nonzero(torch.isnan(seq))[0, 1])
        raise ValidationError(f"NaN in GRU input at step {step}")
    B, T, _ = seq.shape
    H = params.hidden_size
    xz = seq @ params.w_z + params.b_z
    xr = seq @ params.w_r + params.b_r
    xn = seq @ params.w_n + params.b_n
    u_zr = torch.cat([params.u_z, params.u_r], dim=1)
    h = torch.zeros((B, H), dtype=DTYPE) if h0 is None else h0
    states = []
    for t in range(T):
        hzr = h @ u_zr
        z = torch.sigmoid(xz[:, t] + hzr[:, :H])
        r = torch.sigmoid(xr[:, t] + hzr[:, H:])
        n = torch.tanh(xn[:, t] + (r * h) @ params.u_n)
        h = (1 - z) * h + z * n
        states.append(h)
    hs = torch.stack(states, dim=1) if states else torch.zeros((B, 0, H), dtype=DTYPE)
    if squeeze:
        return hs[0], h[0]
    return hs, h


@dataclass
class HeadParams:
    """Classification: hidden -> 1 score. Regression: hidden -> 50 -> tanh -> 1."""

    task: str
    w_out: torch.Tensor
    b_out: torch.Tensor
    w_hidden: torch.Tensor | None = None
    b_hidden: torch.Tensor | None = None

    @classmethod
    def init(cls, task: str, hidden_size: int, rng: np.random.Generator,
             output_bias: float = 0.0) -> "HeadParams":
        if task == "classification":
            return cls(task, _uniform(rng, (hidden_size,), 1.0 / np.sqrt(hidden_size)),
                       torch.tensor(output_bias, dtype=DTYPE))
        if task == "regression":
            return cls(task,
                       _uniform(rng, (REGRESSION_HIDDEN,), 1.0 / np.sqrt(REGRESSION_HIDDEN)),
                       torch.tensor(output_bias, dtype=DTYPE),
                       _uniform(rng, (hidden_size, REGRESSION_HIDDEN), 1.0 / np.sqrt(hidden_size)),
                       torch.zeros(REGRESSION_HIDDEN, dtype=DTYPE))
        raise ValidationError(f"unknown task {task!r}")

    def named(self) -> dict[str, torch.Tensor]:
        out = {"w_out": self.w_out, "b_out": self.b_out}
        if self.w_hidden is not None:
            out.update(w_hidden=self.w_hidden, b_hidden=self.b_hidden)
        return out


def head_score(hidden: torch.Tensor, head: HeadParams) -> torch.Tensor:
    """Raw head output: the logit for classification, the prediction for regression."""
    if head.task == "regression":
        hidden = torch.tanh(hidden @ head.w_hidden + head.b_hidden)
    return hidden @ head.w_out + head.b_out


def head_forward(hidden: torch.Tensor, head: HeadParams, task: str) -> torch.Tensor:
    if task != head.task:
        raise ValidationError(f"head built for {head.task}, asked for {task}")
    score = head_score(hidden, head)
    return torch.sigmoid(score) if task == "classification" else score


# --- baseline inputs ---------------------------------------------------------

@dataclass
class GridBins:
    """Nearest-grid-point binning of one or more cases; arrays are (N, T, D)."""

    binned: np.ndarray  # value in bin (latest observation), 0 where empty
    observed: np.ndarray  # bin holds an observation
    last: np.ndarray  # most recent observed bin value at or before k
    has_last: np.ndarray  # some bin at or before k was observed
    delta: np.ndarray  # hours since last observed bin (since window start if none), capped


def bin_cases(cases: list[DenseBatch], grid: ReferenceGrid) -> GridBins:
    N, T, D = len(cases), grid.T, cases[0].D if cases else 0
    binned = np.zeros((N, T, D))
    observed = np.zeros((N, T, D), dtype=bool)
    for n, c in enumerate(cases):
        if c.U == 0:
            continue
        k = np.clip(np.rint(c.times / grid.spacing).astype(int), 0, T - 1)
        for d in range(D):
            # times are sorted, so later observations overwrite earlier ones in a bin
            for u in np.flatnonzero(c.observed[d]):
                binned[n, k[u], d] = c.values[d, u]
                observed[n, k[u], d] = True
    last = np.zeros_like(binned)
    has_last = np.zeros_like(observed)
    delta = np.zeros_like(binned)
    last_t = np.full((N, D), np.nan)
    for k in range(T):
        obs = observed[:, k]
        last[:, k] = np.where(obs, binned[:, k], last[:, k - 1] if k else 0.0)
        has_last[:, k] = obs | (has_last[:, k - 1] if k else False)
        last_t = np.where(obs, grid.points[k], last_t)
        since = np.where(np.isnan(last_t), grid.points[k], grid.points[k] - last_t)
        delta[:, k] = np.minimum(since, grid.window_length)
    return GridBins(binned, observed, last, has_last, delta)


@dataclass
class DecayParams:
    w_gamma: torch.Tensor  # (D,)
    b_gamma: torch.Tensor  # (D,)

    @classmethod
    def init(cls, D: int) -> "DecayParams":
        return cls(torch.full((D,), 0.1, dtype=DTYPE), torch.zeros(D, dtype=DTYPE))


def decay_impute(bins: GridBins, mean: np.ndarray, decay: DecayParams) -> torch.Tensor:
    """Observed bins keep their value; gaps decay from the last value toward the mean."""
    delta = torch.from_numpy(bins.delta)
    gamma = torch.exp(-torch.clamp(decay.w_gamma * delta + decay.b_gamma, min=0.0))
    gamma = torch.where(torch.from_numpy(bins.has_last), gamma, torch.zeros((), dtype=DTYPE))
    mu = torch.as_tensor(mean, dtype=DTYPE)
    decayed = gamma * torch.from_numpy(bins.last) + (1 - gamma) * mu
    return torch.where(torch.from_numpy(bins.observed), torch.from_numpy(bins.binned), decayed)


@dataclass
class BaselineInput:
    sequence: torch.Tensor  # (N, T, F) or (T, F) for one case
    variant: str


def baseline_features(bins: GridBins, variant: str, mean: np.ndarray,
                      decay: DecayParams | None = None, window_length: float = 1.0) -> torch.Tensor:
    """Stack the (N, T, F) feature sequence for a baseline variant.

    ``window_length`` rescales the time-since-last channel; pass 1 for raw hours.
    """
    observed = bins.observed
    if variant == "M":
        return torch.from_numpy(np.where(observed, bins.binned, mean))
    ffill = np.where(bins.has_last, bins.last, mean)
    if variant == "F":
        return torch.from_numpy(ffill)
    aux = [torch.from_numpy(observed.astype(np.float64)),
           torch.from_numpy(bins.delta / window_length)]
    if variant == "S":
        return torch.cat([torch.from_numpy(ffill)] + aux, dim=-1)
    if variant == "D":
        if decay is None:
            raise ValidationError("GRU-D input needs decay parameters")
        return torch.cat([decay_impute(bins, mean, decay)] + aux, dim=-1)
    raise ValidationError(f"unknown baseline variant {variant!r}")


def build_baseline_input(batch: DenseBatch | list[DenseBatch], grid: ReferenceGrid, variant: str,
                         train_stats, decay: DecayParams | None = None) -> BaselineInput:
    """``train_stats`` is the per-dimension training mean, or a fitted Normalizer."""
    single = isinstance(batch, DenseBatch)
    cases = [batch] if single else list(batch)
    stats = train_stats.mean if isinstance(train_stats, Normalizer) else train_stats
    mean = np.asarray(stats, dtype=np.float64)
    if variant == "D" and decay is None:
        decay = DecayParams.init(len(mean))
    seq = baseline_features(bin_cases(cases, grid), variant, mean, decay)
    return BaselineInput(seq[0] if single else seq, variant)
