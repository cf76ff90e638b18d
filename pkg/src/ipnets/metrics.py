"""Classification and regression metrics, and fold aggregation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

CLASSIFICATION_KEYS = ("auc", "auprc", "ce_loss")
REGRESSION_KEYS = ("medae_days", "ev")


def roc_auc(scores, labels) -> float | None:
    """P(random positive outranks random negative), ties counted as one half.

    Returns None when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # average ranks for ties
    wins = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(wins / (n_pos * n_neg))


def average_precision(scores, labels) -> float | None:
    """Step-wise area under the precision-recall curve: sum of precision times recall increment."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        return None
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # one operating point per distinct threshold: the last index of each tie block
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    ap, prev_tp = 0.0, 0
    for i in last:
        t, f = int(tp[i]), int(fp[i])
        if t > prev_tp:
            ap += ((t - prev_tp) / n_pos) * (t / (t + f))
        prev_tp = t
    return float(ap)


def binary_cross_entropy(probs, labels, eps: float = 1e-15) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), eps, 1 - eps)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def evaluate_classification(scores, labels) -> dict[str, float | None]:
    return {"auc": roc_auc(scores, labels),
            "auprc": average_precision(scores, labels),
            "ce_loss": binary_cross_entropy(scores, labels)}


def explained_variance(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    var_t = np.var(target)
    if var_t == 0:
        return 1.0 if np.var(target - pred) == 0 else 0.0
    return float(1.0 - np.var(target - pred) / var_t)


def evaluate_regression(pred_log_days, target_log_days) -> dict[str, float]:
    """MedAE in days (after exponentiating) and explained variance in log-days."""
    pred = np.asarray(pred_log_days, dtype=np.float64)
    target = np.asarray(target_log_days, dtype=np.float64)
    if not (np.isfinite(pred).all() and np.isfinite(target).all()):
        raise ValueError("regression metrics need finite inputs")
    medae = float(np.median(np.abs(np.exp(pred) - np.exp(target))))
    return {"medae_days": medae, "ev": explained_variance(pred, target)}


@dataclass
class EvalReport:
    task: str
    metrics: dict[str, float | None]
    fold: int | str | None = None
    n_cases: int = 0


@dataclass
class CVReport:
    task: str
    model: str
    folds: list[EvalReport] = field(default_factory=list)

    def keys(self) -> tuple[str, ...]:
        return CLASSIFICATION_KEYS if self.task == "classification" else REGRESSION_KEYS

    def summary(self) -> dict[str, dict[str, float | None]]:
        out = {}
        for k in self.keys():
            vals = [f.metrics[k] for f in self.folds if f.metrics.get(k) is not None]
            out[k] = {"mean": float(np.mean(vals)) if vals else None,
                      "std": float(np.std(vals)) if vals else None}
        return out

    def mean(self, key: str) -> float | None:
        return self.summary()[key]["mean"]

    def to_dict(self) -> dict:
        return {"task": self.task, "model": self.model,
                "folds": [asdict(f) for f in self.folds], "summary": self.summary()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        keys = self.keys()
        lines = [f"{'fold':>6} {'n':>6} " + " ".join(f"{k:>16}" for k in keys)]
        for f in self.folds:
            cells = [_fmt(f.metrics.get(k)) for k in keys]
            lines.append(f"{str(f.fold):>6} {f.n_cases:>6} " + " ".join(f"{c:>16}" for c in cells))
        s = self.summary()
        cells = [f"{_fmt(s[k]['mean'])}±{_fmt(s[k]['std'])}" for k in keys]
        lines.append(f"{'mean':>6} {'':>6} " + " ".join(f"{c:>16}" for c in cells))
        return "\n".join(lines)


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"
