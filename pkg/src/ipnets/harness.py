"""Experiment configuration and the train / eval / cv / ablate drivers."""
from __future__ import annotations

import json
import logging
import platform
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.model_selection import train_test_split

from . import __version__
from .core_data import Normalizer, SparseSeries, ValidationError, densify, make_grid
from .data_io import kfold_split, load_dataset
from .metrics import CVReport, EvalReport, evaluate_classification, evaluate_regression
from .models import (MEAN_MODELS, MODELS, MeanFeatureModel, NeuralModel, build_model,
                     channel_codes, parse_channels)
from .objective import LossConfig
from .optim import ParamStore
from .train import CHECKPOINT_FORMAT, Checkpoint, TrainSettings, TrainState, fit, make_checkpoint

log = logging.getLogger(__name__)

MANIFEST_FORMAT = 1


@dataclass
class ExperimentConfig:
    task: str = "classification"
    model: str = "proposed"
    channels: str = "SI,T,I"
    T: int = 49
    window_length: float = 48.0
    kappa: float = 10.0
    delta: float = 1.0
    lambda_I: float = 1e-4
    lambda_P: float = 1e-4
    holdout_fraction: float = 0.2
    hidden_size: int = 64
    lr: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    k: int = 5
    val_fraction: float = 0.2
    obs_path: str = ""
    labels_path: str = ""
    names_path: str = ""
    D: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> "ExperimentConfig":
        if self.task not in ("classification", "regression"):
            raise ValidationError(f"unknown task {self.task!r}")
        if self.model not in MODELS:
            raise ValidationError(f"unknown model {self.model!r}; choose from {', '.join(MODELS)}")
        if self.model in MEAN_MODELS and (self.model == "mean-logreg") != (self.task == "classification"):
            raise ValidationError(f"model {self.model} does not fit task {self.task}")
        if self.model == "proposed":
            parse_channels(self.channels)
        if not self.kappa > 1:
            raise ValidationError(f"kappa must be > 1, got {self.kappa}")
        LossConfig(self.delta, self.lambda_I, self.lambda_P, self.task)
        if self.T < 2 or self.batch_size < 1 or self.max_epochs < 0 or self.patience < 0:
            raise ValidationError("T >= 2, batch_size >= 1, max_epochs >= 0, patience >= 0 required")
        return self

    @classmethod
    def from_mapping(cls, values: dict, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        """Coerce string values (from a config file or CLI) onto the field types."""
        base = base or cls()
        types = {f.name: type(getattr(base, f.name)) for f in fields(cls)}
        updates = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ValidationError(f"unknown config key {key!r}")
            if raw is None:
                continue
            try:
                updates[key] = types[key](raw) if not isinstance(raw, types[key]) else raw
            except ValueError:
                raise ValidationError(f"bad value {raw!r} for {key}") from None
        return replace(base, **updates)

    @classmethod
    def from_file(cls, path, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        values = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
        return cls.from_mapping(values, base)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.delta, self.lambda_I, self.lambda_P, self.task)

    def train_settings(self, seed: int | None = None) -> TrainSettings:
        return TrainSettings(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                             patience=self.patience, seed=self.seed if seed is None else seed)


def manifest(cfg: ExperimentConfig, command: str, **extra) -> dict:
    return {"command": command, "config": asdict(cfg), "manifest_format": MANIFEST_FORMAT,
            "checkpoint_format": CHECKPOINT_FORMAT, "package_version": __version__,
            "torch": torch.__version__, "numpy": np.__version__, "python": platform.python_version(),
            **extra}


def write_manifest(out_dir, cfg: ExperimentConfig, command: str, **extra) -> Path:
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest(cfg, command, **extra), indent=2, sort_keys=True))
    return path


def load_cases(cfg: ExperimentConfig) -> list[SparseSeries]:
    if not cfg.obs_path or not cfg.labels_path:
        raise ValidationError("obs_path and labels_path are required")
    schema = cfg.names_path or cfg.D
    if not schema:
        raise ValidationError("give names_path or D to fix the number of dimensions")
    cases, report = load_dataset(cfg.obs_path, cfg.labels_path, schema, cfg.window_length, cfg.task)
    log.info(report.summary())
    return cases


def _targets(cases: Sequence[SparseSeries]) -> np.ndarray:
    return np.array([c.target.value for c in cases], dtype=np.float64)


@dataclass
class TrainedModel:
    model: NeuralModel | MeanFeatureModel
    normalizer: Normalizer
    checkpoint: Checkpoint

    def predict(self, cases: Sequence[SparseSeries]) -> np.ndarray:
        dense = [densify(self.normalizer.transform(c), self.checkpoint.grid.window_length)
                 for c in cases]
        data = self.model.prepare(dense)
        if isinstance(self.model, MeanFeatureModel):
            return self.model.predict(data)
        return self.model.predict(data, np.arange(len(dense)))


def _build(cfg: ExperimentConfig, D: int, channels=None):
    grid = make_grid(cfg.window_length, cfg.T)
    return build_model(cfg.model, D, grid, cfg.loss_config(), cfg.hidden_size, cfg.kappa,
                       parse_channels(channels or cfg.channels) if cfg.model == "proposed" else
                       ("smooth", "transient", "intensity"), cfg.holdout_fraction), grid


def train_model(cfg: ExperimentConfig, train_cases, val_cases, seed: int | None = None,
                checkpoint_path=None, log_path=None, resume: Checkpoint | None = None) -> TrainedModel:
    """Fit one model on ``train_cases`` with early stopping on ``val_cases``."""
    D = train_cases[0].D
    normalizer = resume.normalizer if resume is not None else \
        Normalizer.fit(list(train_cases) + list(val_cases))
    model, grid = _build(cfg, D)
    prep = lambda cs: [densify(normalizer.transform(c), cfg.window_length) for c in cs]
    meta = {"config": asdict(cfg), "D": D, "seed": cfg.seed if seed is None else seed}
    if isinstance(model, MeanFeatureModel):
        model.fit(model.prepare(prep(train_cases)), _targets(train_cases))
        ckpt = make_checkpoint(model, TrainState(), None, meta, normalizer, grid)
        if checkpoint_path is not None:
            ckpt.save(checkpoint_path)
        return TrainedModel(model, normalizer, ckpt)
    settings = cfg.train_settings(seed)
    train_data = model.prepare(prep(train_cases))
    val_data = model.prepare(prep(val_cases))
    state = fit(model, train_data, _targets(train_cases), val_data, _targets(val_cases), settings,
                checkpoint_path=checkpoint_path, log_path=log_path, meta=meta,
                normalizer=normalizer, resume=resume)
    best = model.store.snapshot()
    ckpt = make_checkpoint(model, state, best, meta, normalizer)
    return TrainedModel(model, normalizer, ckpt)


def load_trained(path) -> TrainedModel:
    ckpt = Checkpoint.load(path)
    cfg = ExperimentConfig.from_mapping(ckpt.meta["config"])
    model, _ = _build(cfg, int(ckpt.meta["D"]))
    if isinstance(model, MeanFeatureModel):
        model.load_arrays(ckpt.arrays)
    else:
        model.store = ParamStore.from_arrays({f"param/{k}": v for k, v in ckpt.best_params().items()})
    return TrainedModel(model, ckpt.normalizer, ckpt)


def evaluate(trained: TrainedModel, cases: Sequence[SparseSeries], fold=None) -> EvalReport:
    pred = trained.predict(cases)
    y = _targets(cases)
    task = trained.model.task
    metrics = evaluate_classification(pred, y) if task == "classification" else evaluate_regression(pred, y)
    return EvalReport(task, metrics, fold, len(cases))


def split_train_val(cases: Sequence[SparseSeries], cfg: ExperimentConfig):
    idx = np.arange(len(cases))
    y = _targets(cases)
    strat = y if cfg.task == "classification" and min(y.sum(), len(y) - y.sum()) >= 2 else None
    tr, va = train_test_split(idx, test_size=cfg.val_fraction, random_state=cfg.seed, stratify=strat)
    return [cases[i] for i in np.sort(tr)], [cases[i] for i in np.sort(va)]


# --- drivers -----------------------------------------------------------------

def run_train(cfg: ExperimentConfig, cases: Sequence[SparseSeries] | None = None,
              resume_path=None) -> TrainedModel:
    """Train on the whole dataset (minus a validation subset); writes checkpoint, log, manifest."""
    cases = load_cases(cfg) if cases is None else list(cases)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path, log_path = out / "checkpoint.npz", out / "train_log.csv"
    write_manifest(out, cfg, "train", resumed_from=str(resume_path) if resume_path else None)
    train, val = split_train_val(cases, cfg)
    resume = Checkpoint.load(resume_path) if resume_path else None
    trained = train_model(cfg, train, val, checkpoint_path=ckpt_path, log_path=log_path, resume=resume)
    return trained


def run_eval(checkpoint_path, cases: Sequence[SparseSeries]) -> EvalReport:
    return evaluate(load_trained(checkpoint_path), cases)


def run_cv(cfg: ExperimentConfig, cases: Sequence[SparseSeries] | None = None, k: int | None = None,
           write: bool = True) -> CVReport:
    """k-fold cross-validation; one EvalReport per held-out fold."""
    cases = load_cases(cfg) if cases is None else list(cases)
    k = k or cfg.k
    folds = kfold_split(cases, k, cfg.seed, cfg.val_fraction,
                        stratify=cfg.task == "classification")
    name = cfg.model if cfg.model != "proposed" else f"proposed[{channel_codes(parse_channels(cfg.channels))}]"
    report = CVReport(cfg.task, name)
    out = Path(cfg.out_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, cfg, "cv", k=k)
    for fold in folds:
        pick = lambda ix: [cases[i] for i in ix]
        try:
            trained = train_model(cfg, pick(fold.train), pick(fold.val), seed=cfg.seed + 1000 * fold.index)
            report.folds.append(evaluate(trained, pick(fold.test), fold=fold.index))
        except Exception as e:
            raise RuntimeError(f"fold {fold.index} failed: {e}") from e
        log.info("%s fold %d: %s", name, fold.index, report.folds[-1].metrics)
    if write:
        (out / "report.json").write_text(report.to_json())
    return report


def run_ablation(cfg: ExperimentConfig, subsets: Sequence[str],
                 cases: Sequence[SparseSeries] | None = None, k: int | None = None,
                 write: bool = True) -> dict[str, CVReport]:
    if cfg.model != "proposed":
        raise ValidationError("ablation applies to the proposed model only")
    cases = load_cases(cfg) if cases is None else list(cases)
    reports = {}
    for subset in subsets:
        channels = parse_channels(subset)
        code = channel_codes(channels)
        sub_cfg = replace(cfg, channels=code, out_dir=str(Path(cfg.out_dir) / code.replace(",", "_")))
        reports[code] = run_cv(sub_cfg, cases, k, write=write)
    if write:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, cfg, "ablate", subsets=list(reports))
        (out / "ablation.json").write_text(json.dumps({c: r.to_dict() for c, r in reports.items()},
                                                      indent=2, sort_keys=True))
    return reports


def ablation_table(reports: dict[str, CVReport]) -> str:
    if not reports:
        return ""
    keys = next(iter(reports.values())).keys()
    lines = [f"{'channels':<10} " + " ".join(f"{k:>18}" for k in keys)]
    for code, rep in reports.items():
        s = rep.summary()
        cells = [f"{s[k]['mean']:.4f}±{s[k]['std']:.4f}" if s[k]["mean"] is not None else "n/a"
                 for k in keys]
        lines.append(f"{code:<10} " + " ".join(f"{c:>18}" for c in cells))
    return "\n".join(lines)
