"""Model assembly: interpolation-prediction network, GRU baselines, mean-feature baselines."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from sklearn.linear_model import LinearRegression, LogisticRegression

from .core_data import DTYPE, DenseBatch, PaddedBatch, ReferenceGrid, ValidationError, collate
from .interp import CHANNELS, InterpParams, interpolate_batch
from .objective import (LossBreakdown, LossConfig, composite_loss, reconstruct_heldout,
                        sample_masks, supervised_loss)
from .optim import ParamStore
from .predict import (DecayParams, GridBins, GruParams, HeadParams, baseline_features, bin_cases,
                      gru_forward, head_score)

NEURAL_MODELS = ("proposed", "gru-m", "gru-f", "gru-s", "gru-d")
MEAN_MODELS = ("mean-logreg", "mean-linreg")
MODELS = NEURAL_MODELS + MEAN_MODELS
CHANNEL_CODES = {"SI": "smooth", "T": "transient", "I": "intensity"}


def parse_channels(subset) -> tuple[str, ...]:
    """'SI,T,I' or an iterable of codes/names -> channel names in canonical order."""
    items = subset.split(",") if isinstance(subset, str) else list(subset)
    names = set()
    for item in items:
        item = item.strip()
        if not item:
            continue
        name = CHANNEL_CODES.get(item.upper(), item.lower())
        if name not in CHANNELS:
            raise ValidationError(f"unknown channel {item!r}; use SI, T, I")
        names.add(name)
    if not names:
        raise ValidationError("channel subset must be nonempty")
    return tuple(c for c in CHANNELS if c in names)


def channel_codes(channels: Sequence[str]) -> str:
    inv = {v: k for k, v in CHANNEL_CODES.items()}
    return ",".join(inv[c] for c in channels)


class NeuralModel:
    """Shared GRU + head plumbing; subclasses supply the input sequence."""

    kind = ""

    def __init__(self, D: int, grid: ReferenceGrid, loss_cfg: LossConfig, hidden_size: int = 64):
        self.D, self.grid, self.loss_cfg, self.hidden_size = D, grid, loss_cfg, hidden_size
        self.store = ParamStore()

    @property
    def task(self) -> str:
        return self.loss_cfg.task

    def input_size(self) -> int:
        raise NotImplementedError

    def init_params(self, rng: np.random.Generator, target_mean: float = 0.0) -> None:
        for k, v in GruParams.init(self.input_size(), self.hidden_size, rng).named().items():
            self.store.add(f"gru/{k}", v)
        head = HeadParams.init(self.task, self.hidden_size, rng, output_bias=target_mean)
        for k, v in head.named().items():
            self.store.add(f"head/{k}", v)

    def gru(self, params) -> GruParams:
        return GruParams(**{k[4:]: v for k, v in params.items() if k.startswith("gru/")})

    def head(self, params) -> HeadParams:
        named = {k[5:]: v for k, v in params.items() if k.startswith("head/")}
        return HeadParams(self.task, **named)

    def theta(self, params) -> list[torch.Tensor]:
        return []

    def phi(self, params) -> list[torch.Tensor]:
        # weights only, biases excluded
        return [v for k, v in params.items()
                if k.startswith(("gru/w", "gru/u", "head/w", "decay/w"))]

    def prepare(self, cases: Sequence[DenseBatch]):
        raise NotImplementedError

    def sequence(self, params, data, idx, mask_seed=None):
        """Returns (input sequence (B, T, F), reconstruction or None)."""
        raise NotImplementedError

    def score(self, params, data, idx, mask_seed=None):
        seq, rec = self.sequence(params, data, idx, mask_seed)
        _, h = gru_forward(seq, self.gru(params))
        return head_score(h, self.head(params)), rec

    def loss(self, params, data, idx, y, mask_seed=None) -> LossBreakdown:
        out, rec = self.score(params, data, idx, mask_seed)
        sup = supervised_loss(out, torch.from_numpy(np.asarray(y, dtype=np.float64)), self.task)
        return composite_loss(sup, rec, self.theta(params), self.phi(params), self.loss_cfg)

    def predict(self, data, idx, batch_size: int = 256) -> np.ndarray:
        outs = []
        with torch.no_grad():
            for start in range(0, len(idx), batch_size):
                out, _ = self.score(self.store.params, data, idx[start:start + batch_size])
                outs.append(torch.sigmoid(out) if self.task == "classification" else out)
        return torch.cat(outs).numpy() if outs else np.zeros(0)


class ProposedModel(NeuralModel):
    kind = "proposed"

    def __init__(self, D, grid, loss_cfg, hidden_size=64, kappa=10.0,
                 channels=CHANNELS, holdout_fraction=0.2):
        super().__init__(D, grid, loss_cfg, hidden_size)
        self.kappa = kappa
        self.channels = parse_channels(channels)
        self.holdout_fraction = holdout_fraction

    def input_size(self) -> int:
        return len(self.channels) * self.D

    def init_params(self, rng, target_mean=0.0):
        ip = InterpParams.init(self.D, self.grid, self.kappa, rng)
        self.store.add("interp/log_alpha", ip.log_alpha)
        self.store.add("interp/rho", ip.rho)
        super().init_params(rng, target_mean)

    def interp(self, params) -> InterpParams:
        return InterpParams(params["interp/log_alpha"], params["interp/rho"], self.kappa)

    def theta(self, params):
        return [params["interp/log_alpha"], params["interp/rho"]]

    def prepare(self, cases):
        return collate(list(cases))

    @staticmethod
    def take(data: PaddedBatch, idx) -> PaddedBatch:
        idx = np.asarray(idx)
        U = max(1, int(data.lengths[idx].max()))
        t = torch.from_numpy(idx)
        return PaddedBatch(data.times[t, :U], data.values[t, :, :U], data.observed[t, :, :U],
                           data.lengths[idx], [data.ids[i] for i in idx] if data.ids else [])

    def sequence(self, params, data, idx, mask_seed=None):
        batch = self.take(data, idx)
        ip = self.interp(params)
        rec = None
        if mask_seed is not None:
            mask = sample_masks(batch, self.holdout_fraction, mask_seed)
            rec = reconstruct_heldout(batch, mask, ip)
            batch = batch.with_observed(batch.observed * torch.from_numpy(~mask.held_out).to(DTYPE))
        channels = interpolate_batch(batch, self.grid, ip)
        return channels.stack(self.channels), rec


class GruBaseline(NeuralModel):
    def __init__(self, variant: str, D, grid, loss_cfg, hidden_size=64):
        super().__init__(D, grid, loss_cfg, hidden_size)
        self.variant = variant.upper()
        self.kind = f"gru-{variant.lower()}"
        self.mean = np.zeros(D)  # normalized training mean

    def input_size(self):
        return self.D * (3 if self.variant in ("S", "D") else 1)

    def init_params(self, rng, target_mean=0.0):
        if self.variant == "D":
            dp = DecayParams.init(self.D)
            self.store.add("decay/w_gamma", dp.w_gamma)
            self.store.add("decay/b_gamma", dp.b_gamma)
        super().init_params(rng, target_mean)

    def prepare(self, cases):
        return bin_cases(list(cases), self.grid)

    def sequence(self, params, data: GridBins, idx, mask_seed=None):
        idx = np.asarray(idx)
        bins = GridBins(*(getattr(data, f)[idx] for f in
                          ("binned", "observed", "last", "has_last", "delta")))
        decay = None
        if self.variant == "D":
            decay = DecayParams(params["decay/w_gamma"], params["decay/b_gamma"])
        return baseline_features(bins, self.variant, self.mean, decay, self.grid.window_length), None


class MeanFeatureModel:
    """Logistic / linear regression on per-dimension means of the observed values."""

    def __init__(self, kind: str, D: int, task: str):
        if (kind == "mean-logreg") != (task == "classification"):
            raise ValidationError(f"model {kind} does not match task {task}")
        self.kind, self.D, self.task = kind, D, task
        self.est = LogisticRegression(C=1.0, max_iter=1000) if task == "classification" \
            else LinearRegression()

    def prepare(self, cases):
        X = np.zeros((len(cases), self.D))
        for n, c in enumerate(cases):
            for d in range(self.D):
                obs = c.observed[d]
                X[n, d] = c.values[d, obs].mean() if obs.any() else 0.0
        return X

    def fit(self, X, y):
        self.est.fit(X, y)
        return self

    def predict(self, X, idx=None):
        X = X if idx is None else X[np.asarray(idx)]
        if self.task == "classification":
            return self.est.predict_proba(X)[:, 1]
        return self.est.predict(X)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"mean/coef": np.atleast_1d(np.asarray(self.est.coef_, dtype=np.float64)),
               "mean/intercept": np.atleast_1d(np.asarray(self.est.intercept_, dtype=np.float64))}
        if self.task == "classification":
            out["mean/classes"] = np.asarray(self.est.classes_)
        return out

    def load_arrays(self, arrays):
        self.est.coef_ = arrays["mean/coef"]
        self.est.intercept_ = arrays["mean/intercept"]
        if self.task == "classification":
            self.est.classes_ = arrays["mean/classes"]
            self.est.coef_ = self.est.coef_.reshape(1, -1)
        else:
            self.est.coef_ = self.est.coef_.reshape(-1)
            self.est.intercept_ = float(self.est.intercept_[0])
        self.est.n_features_in_ = self.D


def build_model(kind: str, D: int, grid: ReferenceGrid, loss_cfg: LossConfig, hidden_size=64,
                kappa=10.0, channels=CHANNELS, holdout_fraction=0.2):
    if kind == "proposed":
        return ProposedModel(D, grid, loss_cfg, hidden_size, kappa, channels, holdout_fraction)
    if kind in ("gru-m", "gru-f", "gru-s", "gru-d"):
        return GruBaseline(kind[-1], D, grid, loss_cfg, hidden_size)
    if kind in MEAN_MODELS:
        return MeanFeatureModel(kind, D, loss_cfg.task)
    raise ValidationError(f"unknown model {kind!r}; choose from {', '.join(MODELS)}")
