"""Training loop with early stopping, checkpoints that support exact resume, and the step log."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core_data import Normalizer, ReferenceGrid
from .models import MeanFeatureModel, NeuralModel
from .objective import NonFiniteLossError
from .optim import NonFiniteGradientError, ParamStore, adam_step, compute_gradients

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
LOG_COLUMNS = ("step", "supervised", "reconstruction", "reg_I", "reg_P", "total")
VAL_STREAM = 1_000_003  # seed-sequence tag for the fixed validation masks


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainSettings:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0


@dataclass
class TrainState:
    epoch: int = 0
    best_val: float = float("inf")
    best_epoch: int = -1
    wait: int = 0
    stopped_early: bool = False
    val_history: list[float] = field(default_factory=list)


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model, evaluate it, or resume its training."""

    meta: dict
    normalizer: Normalizer
    grid: ReferenceGrid
    arrays: dict[str, np.ndarray]
    state: TrainState = field(default_factory=TrainState)

    def save(self, path) -> None:
        payload = {
            "format_version": np.array(CHECKPOINT_FORMAT),
            "meta": np.array(json.dumps(self.meta, sort_keys=True)),
            "train_state": np.array(json.dumps(asdict(self.state))),
            "normalizer/mean": self.normalizer.mean,
            "normalizer/std": self.normalizer.std,
            "grid/points": self.grid.points,
            "grid/spacing": np.array(self.grid.spacing),
        }
        payload.update(self.arrays)
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp.npz")
        np.savez(tmp, **payload)
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
        version = int(data.pop("format_version"))
        if version != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {version}")
        meta = json.loads(str(data.pop("meta")))
        state = TrainState(**json.loads(str(data.pop("train_state"))))
        norm = Normalizer(data.pop("normalizer/mean"), data.pop("normalizer/std"))
        grid = ReferenceGrid(data.pop("grid/points"), float(data.pop("grid/spacing")))
        return cls(meta, norm, grid, data, state)

    def best_params(self) -> dict[str, np.ndarray]:
        best = {k[5:]: v for k, v in self.arrays.items() if k.startswith("best/")}
        if best:
            return best
        return {k[6:]: v for k, v in self.arrays.items() if k.startswith("param/")}


class StepLogger:
    def __init__(self, path=None, append=False):
        self.rows: list[dict] = []
        self.fh = None
        if path is not None:
            exists = Path(path).exists() and append
            self.fh = open(path, "a" if exists else "w", newline="")
            self.writer = csv.DictWriter(self.fh, fieldnames=LOG_COLUMNS)
            if not exists:
                self.writer.writeheader()

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self.fh is not None:
            self.writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k]
                                  for k in LOG_COLUMNS})
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def validation_loss(model: NeuralModel, data, y, batch_size: int, seed: int) -> float:
    total, n = 0.0, len(y)
    with torch.no_grad():
        for j, start in enumerate(range(0, n, batch_size)):
            idx = np.arange(start, min(start + batch_size, n))
            bd = model.loss(model.store.params, data, idx, y[idx], mask_seed=[seed, VAL_STREAM, j])
            total += float(bd.total) * len(idx)
    return total / max(n, 1)


def fit(model: NeuralModel, train_data, y_train, val_data, y_val, settings: TrainSettings,
        checkpoint_path=None, log_path=None, meta=None, normalizer=None,
        resume: Checkpoint | None = None) -> TrainState:
    """Train ``model`` in place; its store ends up holding the best-validation parameters.

    One optimizer step per minibatch; minibatch order and holdout masks are
    both drawn from seeds derived from (seed, epoch, step), so a resumed run
    replays exactly the steps an uninterrupted one would take.
    """
    y_train = np.asarray(y_train, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.float64)
    seed = settings.seed
    if resume is not None:
        model.store = ParamStore.from_arrays({k: v for k, v in resume.arrays.items()
                                              if not k.startswith("best/")})
        state = resume.state
        best = resume.best_params() if state.best_epoch >= 0 else None
    else:
        target_mean = float(y_train.mean()) if model.task == "regression" and len(y_train) else 0.0
        model.init_params(np.random.default_rng([seed, 7]), target_mean)
        state, best = TrainState(), None

    logger = StepLogger(log_path, append=resume is not None)
    n = len(y_train)
    try:
        while state.epoch < settings.max_epochs and not state.stopped_early:
            epoch = state.epoch
            order = np.random.default_rng([seed, epoch]).permutation(n)
            for step_i, start in enumerate(range(0, n, settings.batch_size)):
                idx = order[start:start + settings.batch_size]
                parts = {}

                def loss_eval(params):
                    bd = model.loss(params, train_data, idx, y_train[idx],
                                    mask_seed=[seed, epoch, step_i])
                    parts["bd"] = bd
                    return bd.total

                compute_gradients(loss_eval, model.store)
                adam_step(model.store, settings.lr, settings.beta1, settings.beta2, settings.eps)
                logger.write({"step": model.store.step, **parts["bd"].row()})

            val = validation_loss(model, val_data, y_val, settings.batch_size, seed)
            if not np.isfinite(val):
                raise NonFiniteLossError(f"validation loss is {val} at epoch {epoch}")
            state.val_history.append(val)
            if val < state.best_val:
                state.best_val, state.best_epoch, state.wait = val, epoch, 0
                best = model.store.snapshot()
            else:
                state.wait += 1
                if state.wait > settings.patience:
                    state.stopped_early = True
            state.epoch = epoch + 1
            log.debug("epoch %d val %.5f best %.5f", epoch, val, state.best_val)
            if checkpoint_path is not None:
                make_checkpoint(model, state, best, meta or {}, normalizer).save(checkpoint_path)
    except (NonFiniteLossError, NonFiniteGradientError) as e:
        raise DivergenceError(f"training diverged at epoch {state.epoch}: {e}") from e
    finally:
        logger.close()
    if best is not None:
        model.store.load_values(best)
    return state


def make_checkpoint(model, state: TrainState, best, meta: dict, normalizer,
                    grid: ReferenceGrid | None = None) -> Checkpoint:
    if isinstance(model, MeanFeatureModel):
        arrays = model.arrays()
    else:
        arrays = model.store.state_arrays()
        if best is not None:
            arrays.update({f"best/{k}": v for k, v in best.items()})
        grid = model.grid
    return Checkpoint(dict(meta), normalizer, grid, arrays, state)
