"""Dataset loading/writing in the long-CSV format, synthetic data, and fold splits."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.model_selection import KFold, StratifiedKFold, train_test_split

from .core_data import DEFAULT_WINDOW, Label, SparseSeries, ValidationError

log = logging.getLogger(__name__)

# Variable order, missing fraction and sampling rate (per hour) of the 12 ICU vitals.
VITALS = (
    ("SpO2", 0.3135, 0.80), ("HR", 0.2323, 0.90), ("RR", 0.5948, 0.48),
    ("SBP", 0.4976, 0.59), ("DBP", 0.4873, 0.60), ("Temp", 0.8380, 0.19),
    ("TGCS", 0.8794, 0.14), ("CRR", 0.9508, 0.06), ("UO", 0.8247, 0.20),
    ("FiO2", 0.9482, 0.06), ("Glucose", 0.9147, 0.10), ("pH", 0.9625, 0.04),
)


@dataclass
class LoadReport:
    n_cases: int = 0
    n_observations: int = 0
    duplicates: int = 0
    unlabeled: list[str] = field(default_factory=list)
    missing_fraction: list[float] = field(default_factory=list)
    task: str = ""

    def summary(self) -> str:
        miss = ", ".join(f"{m:.1%}" for m in self.missing_fraction)
        return (f"{self.n_cases} cases, {self.n_observations} observations, "
                f"{self.duplicates} duplicate rows, {len(self.unlabeled)} unlabeled cases dropped; "
                f"missing per dim: [{miss}]")


def read_dim_names(path) -> list[str]:
    return [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]


def _parse_labels(labels_path, task: str | None) -> tuple[dict[str, Label], str]:
    raw: dict[str, str] = {}
    with open(labels_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["case_id", "label"]:
            raise ValidationError(f"{labels_path}: expected header 'case_id,label', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ValidationError(f"{labels_path}:{lineno}: expected 2 fields, got {len(row)}")
            raw[row[0].strip()] = row[1].strip()
    if task is None:
        task = "classification" if raw and all(v in ("0", "1") for v in raw.values()) else "regression"
    labels = {}
    for cid, v in raw.items():
        try:
            labels[cid] = Label(cls=int(v)) if task == "classification" else Label(regression_target=float(v))
        except ValueError as e:
            raise ValidationError(f"{labels_path}: bad label {v!r} for case {cid}: {e}") from None
    return labels, task


def load_dataset(obs_path, labels_path, schema, window_length: float = DEFAULT_WINDOW,
                 task: str | None = None) -> tuple[list[SparseSeries], LoadReport]:
    """Read ``case_id,dim,time,value`` observations and ``case_id,label`` labels.

    ``schema`` is the number of dimensions, a list of names, or a path to a
    names file (one per line, index order).
    """
    if isinstance(schema, int):
        D = schema
    elif isinstance(schema, (str, Path)):
        D = len(read_dim_names(schema))
    else:
        D = len(schema)
    labels, task = _parse_labels(labels_path, task)
    obs: dict[str, list[dict[float, float]]] = {}
    report = LoadReport(task=task)
    with open(obs_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["case_id", "dim", "time", "value"]:
            raise ValidationError(f"{obs_path}: expected header 'case_id,dim,time,value', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                cid, d, t, x = row[0].strip(), int(row[1]), float(row[2]), float(row[3])
            except (ValueError, IndexError):
                raise ValidationError(f"{obs_path}:{lineno}: malformed row {row}") from None
            if len(row) != 4:
                raise ValidationError(f"{obs_path}:{lineno}: malformed row {row}")
            if not 0 <= d < D:
                raise ValidationError(f"{obs_path}:{lineno}: unknown dim index {d} (D={D})")
            if not np.isfinite(t) or not np.isfinite(x):
                raise ValidationError(f"{obs_path}:{lineno}: non-finite time or value")
            dims = obs.setdefault(cid, [{} for _ in range(D)])
            if t in dims[d]:
                report.duplicates += 1
            dims[d][t] = x
    if report.duplicates:
        log.warning("%d duplicate (case, dim, time) rows; kept the last value", report.duplicates)

    cases = []
    for cid in sorted(set(obs) | set(labels)):
        if cid not in labels:
            report.unlabeled.append(cid)
            continue
        dims = obs.get(cid, [{} for _ in range(D)])
        series = SparseSeries(cid, [sorted(d.items()) for d in dims], labels[cid])
        cases.append(series.validate(window_length))
    if report.unlabeled:
        log.warning("dropped %d cases without labels: %s", len(report.unlabeled),
                    ", ".join(report.unlabeled[:10]))
    report.n_cases = len(cases)
    report.n_observations = sum(c.n_obs for c in cases)
    report.missing_fraction = missing_fractions(cases)
    log.info("loaded %s", report.summary())
    return cases, report


def write_dataset(cases: Sequence[SparseSeries], obs_path, labels_path,
                  dim_names: Sequence[str] | None = None, names_path=None) -> None:
    with open(obs_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "dim", "time", "value"])
        for c in cases:
            for d, seq in enumerate(c.dims):
                for t, x in seq:
                    w.writerow([c.id, d, repr(float(t)), repr(float(x))])
    with open(labels_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "label"])
        for c in cases:
            lab = c.target
            w.writerow([c.id, lab.cls if lab.cls is not None else repr(lab.regression_target)])
    if names_path is not None:
        names = dim_names or [f"dim{d}" for d in range(cases[0].D)]
        Path(names_path).write_text("\n".join(names) + "\n")


def missing_fractions(cases: Sequence[SparseSeries]) -> list[float]:
    """Per-dimension fraction of union timestamps at which the dimension is unobserved."""
    if not cases:
        return []
    D = cases[0].D
    missing = np.zeros(D)
    total = 0
    for c in cases:
        union = {t for seq in c.dims for t, _ in seq}
        total += len(union)
        for d in range(D):
            missing[d] += len(union) - len(c.dims[d])
    return (missing / max(total, 1)).tolist()


# --- synthetic data ----------------------------------------------------------

@dataclass
class SynthConfig:
    """Synthetic cohort with class signal planted in trend, transients and sampling rate.

    Charting times follow an inhomogeneous Poisson process with rate
    ``clock_rate`` per hour, modulated by class; at each charting time every
    dimension is recorded independently. Missingness is counted over the
    timestamps where at least one dimension was recorded, so the recording
    probabilities are solved for to make those fractions match ``missing``.
    """

    n_cases: int = 1000
    D: int = 6
    window_length: float = DEFAULT_WINDOW
    clock_rate: float = 1.17
    missing: tuple[float, ...] | None = None
    prevalence: float = 0.5
    seed: int = 0
    task: str = "classification"
    noise_std: float = 0.5
    trend_shift: float = 0.0  # class difference in latent level (latent-sd units)
    trend_slope: float = 1.0  # class difference in latent change over the window
    bump_effect: float = 1.0  # extra transient bumps per case for the positive class
    bump_amplitude: float = 2.0
    bump_width: float = 1.5  # hours
    intensity_effect: float = 0.6  # class difference in log sampling rate trend
    regression_noise: float = 0.15

    def __post_init__(self):
        if self.missing is None:
            self.missing = tuple(VITALS[d % len(VITALS)][1] for d in range(self.D))
        self.missing = tuple(float(m) for m in self.missing)
        if len(self.missing) != self.D:
            raise ValidationError(f"need {self.D} missing fractions, got {len(self.missing)}")
        if not all(0 <= m < 1 for m in self.missing):
            raise ValidationError("missing fractions must lie in [0, 1)")
        if not self.clock_rate > 0:
            raise ValidationError("clock_rate must be positive")
        if not 0 < self.prevalence < 1:
            raise ValidationError("prevalence must lie in (0, 1)")
        if self.task not in ("classification", "regression"):
            raise ValidationError(f"unknown task {self.task!r}")

    def record_probabilities(self) -> np.ndarray:
        """q_d with q_d / P(any recorded) = 1 - missing[d].

        Writing A = P(any recorded), q_d = (1 - m_d) A and A solves
        A = 1 - prod(1 - (1 - m_d) A); iterating from A = 1 converges to the
        largest root. No positive root exists when sum(1 - m_d) <= 1, and then
        the targets are unreachable; we fall back to q_d = 1 - m_d.
        """
        keep = 1.0 - np.asarray(self.missing)
        A = 1.0
        for _ in range(200):
            A = 1.0 - np.prod(1.0 - keep * A)
        if A < 1e-6:
            log.warning("missing fractions %s cannot all be met; using them per charting time",
                        self.missing)
            return keep
        return keep * A

    @property
    def rates(self) -> tuple[float, ...]:
        return tuple((self.clock_rate * self.record_probabilities()).tolist())

    def without_signal(self) -> "SynthConfig":
        from dataclasses import replace
        return replace(self, trend_shift=0.0, trend_slope=0.0, bump_effect=0.0, intensity_effect=0.0)


def _charting_times(rng, cfg: SynthConfig, s: float) -> np.ndarray:
    """Thinning sampler for rate(t) = clock_rate * exp(s * effect * (2t/W - 1))."""
    W = cfg.window_length
    k = s * cfg.intensity_effect
    peak = cfg.clock_rate * np.exp(abs(k))
    n = rng.poisson(peak * W)
    t = np.sort(rng.uniform(0, W, size=n))
    rate = cfg.clock_rate * np.exp(k * (2 * t / W - 1))
    keep = rng.uniform(0, peak, size=n) < rate
    t = np.unique(np.round(t[keep] * 60.0) / 60.0)  # minute resolution
    return t[(t >= 0) & (t <= W)]


def generate_synthetic(cfg: SynthConfig) -> list[SparseSeries]:
    rng = np.random.default_rng(cfg.seed)
    W, D = cfg.window_length, cfg.D
    record = cfg.record_probabilities()
    offsets = rng.uniform(20, 120, size=D)
    scales = rng.uniform(2, 15, size=D)
    cases = []
    for n in range(cfg.n_cases):
        if cfg.task == "classification":
            y = int(rng.uniform() < cfg.prevalence)
            s = 2.0 * y - 1.0
        else:
            s = float(rng.normal())
        freqs = rng.uniform(0.3, 1.5, size=(D, 3)) / W
        phases = rng.uniform(0, 2 * np.pi, size=(D, 3))
        amps = rng.normal(0, 1 / np.sqrt(3), size=(D, 3))
        level = rng.normal(0, 0.5, size=D)
        n_bumps = rng.poisson(max(0.0, 1.0 + cfg.bump_effect * s))
        bump_t = rng.uniform(0, W, size=n_bumps)
        bump_dims = rng.integers(0, D, size=n_bumps)

        def latent(d, t):
            z = level[d] + (amps[d, :, None] * np.sin(
                2 * np.pi * freqs[d, :, None] * t[None, :] + phases[d, :, None])).sum(0)
            z = z + s * (cfg.trend_shift / 2 + cfg.trend_slope / 2 * (2 * t / W - 1))
            for bt, bd in zip(bump_t, bump_dims):
                if bd == d:
                    z = z + cfg.bump_amplitude * np.exp(-0.5 * ((t - bt) / cfg.bump_width) ** 2)
            return z

        times = _charting_times(rng, cfg, s if cfg.task == "classification" else np.tanh(s))
        dims = []
        for d in range(D):
            t = times[rng.uniform(size=len(times)) < record[d]]
            x = latent(d, t) + rng.normal(0, cfg.noise_std, size=len(t))
            dims.append(list(zip(t.tolist(), (offsets[d] + scales[d] * x).tolist())))
        if cfg.task == "classification":
            label = Label(cls=y)
        else:
            grid = np.linspace(0, W, 97)
            avg0 = float(latent(0, grid).mean())
            log_days = 1.0 + 0.4 * s + 0.2 * avg0 + rng.normal(0, cfg.regression_noise)
            label = Label(regression_target=log_days)
        cases.append(SparseSeries(f"case{n:05d}", dims, label))
    return cases


# --- folds -------------------------------------------------------------------

@dataclass
class Fold:
    index: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def kfold_split(dataset: Sequence[SparseSeries], k: int, seed: int = 0,
                val_fraction: float = 0.2, stratify: bool | None = None) -> list[Fold]:
    """Disjoint, exhaustive test folds; each training split reserves a validation subset."""
    n = len(dataset)
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    if n < k:
        raise ValidationError(f"need at least k={k} cases, got {n}")
    labels = np.array([c.target.value for c in dataset])
    is_cls = dataset[0].target.cls is not None
    stratify = is_cls if stratify is None else stratify
    idx = np.arange(n)
    if stratify:
        n_pos = int(labels.sum())
        if min(n_pos, n - n_pos) < k:
            raise ValidationError(f"stratified {k}-fold needs >= {k} cases per class "
                                  f"(positives {n_pos}, negatives {n - n_pos})")
        splits = StratifiedKFold(k, shuffle=True, random_state=seed).split(idx, labels)
    else:
        splits = KFold(k, shuffle=True, random_state=seed).split(idx)
    folds = []
    for i, (train, test) in enumerate(splits):
        strat = labels[train] if stratify else None
        try:
            tr, va = train_test_split(train, test_size=val_fraction, random_state=seed + i,
                                      stratify=strat)
        except ValueError:
            tr, va = train_test_split(train, test_size=val_fraction, random_state=seed + i)
        folds.append(Fold(i, np.sort(tr), np.sort(va), np.sort(test)))
    return folds
