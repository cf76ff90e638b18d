"""Parameter storage, gradient computation, Adam and finite-difference checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .core_data import DTYPE

LossFn = Callable[[dict[str, torch.Tensor]], torch.Tensor]


class NonFiniteGradientError(RuntimeError):
    pass


@dataclass
class ParamStore:
    """Named float64 parameters with gradient slots and Adam moments."""

    params: dict[str, torch.Tensor] = field(default_factory=dict)
    grads: dict[str, torch.Tensor] = field(default_factory=dict)
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value) -> torch.Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        t = torch.as_tensor(value, dtype=DTYPE).detach().clone().requires_grad_(True)
        self.params[name] = t
        self.grads[name] = torch.zeros_like(t, requires_grad=False)
        self.m[name] = torch.zeros_like(t, requires_grad=False)
        self.v[name] = torch.zeros_like(t, requires_grad=False)
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"param/{k}"] = self.params[k].detach().numpy().copy()
            out[f"adam_m/{k}"] = self.m[k].numpy().copy()
            out[f"adam_v/{k}"] = self.v[k].numpy().copy()
        out["adam_step"] = np.array(self.step)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ParamStore":
        store = cls()
        for key in arrays:
            if key.startswith("param/"):
                name = key[len("param/"):]
                store.add(name, arrays[key])
                if f"adam_m/{name}" in arrays:
                    store.m[name] = torch.from_numpy(np.array(arrays[f"adam_m/{name}"]))
                    store.v[name] = torch.from_numpy(np.array(arrays[f"adam_v/{name}"]))
        store.step = int(arrays.get("adam_step", 0))
        return store

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        with torch.no_grad():
            for k, v in values.items():
                self.params[k].copy_(torch.as_tensor(v, dtype=DTYPE))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.detach().numpy().copy() for k, p in self.params.items()}


def compute_gradients(loss_eval: LossFn, store: ParamStore) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of the scalar ``loss_eval(params)``; stored in ``store.grads``."""
    for p in store.params.values():
        p.grad = None
    loss = loss_eval(store.params)
    if not torch.isfinite(loss):
        raise NonFiniteGradientError(f"loss is not finite: {float(loss.detach())}")
    names = store.names()
    grads = torch.autograd.grad(loss, [store.params[k] for k in names], allow_unused=True)
    for name, g in zip(names, grads):
        g = torch.zeros_like(store.params[name]) if g is None else g.detach()
        if not torch.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
        store.grads[name] = g
    return store.grads


def adam_step(store: ParamStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    store.step += 1
    bc1 = 1.0 - beta1 ** store.step
    bc2 = 1.0 - beta2 ** store.step
    with torch.no_grad():
        for k, p in store.params.items():
            g = store.grads[k]
            store.m[k] = beta1 * store.m[k] + (1.0 - beta1) * g
            store.v[k] = beta2 * store.v[k] + (1.0 - beta2) * g * g
            m_hat = store.m[k] / bc1
            v_hat = store.v[k] / bc2
            p -= lr * m_hat / (torch.sqrt(v_hat) + eps)
            store.grads[k] = torch.zeros_like(g)


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    worst_param: str
    worst_index: tuple
    worst_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst_error <= self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: worst relative error {self.worst_error:.3e} at "
                f"{self.worst_param}{list(self.worst_index)} (tol {self.tol:.1e})")


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps exact zeros from dividing by 0."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def finite_diff_check(loss_eval: LossFn, store: ParamStore, h: float = 1e-5, tol: float = 1e-4,
                      analytic: dict[str, torch.Tensor] | None = None) -> GradCheckReport:
    """Compare analytic gradients against central differences, coordinate by coordinate.

    ``analytic`` defaults to a fresh :func:`compute_gradients` call; pass a
    dict to check gradients obtained some other way.
    """
    if analytic is None:
        analytic = {k: v.clone() for k, v in compute_gradients(loss_eval, store).items()}
    worst = ("", (), -1.0)
    max_err = {}
    with torch.no_grad():
        for name, p in store.params.items():
            a = analytic[name].numpy().reshape(-1)
            flat = p.view(-1)
            num = np.zeros_like(a)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus = float(loss_eval(store.params))
                flat[i] = orig - h
                f_minus = float(loss_eval(store.params))
                flat[i] = orig
                num[i] = (f_plus - f_minus) / (2 * h)
            err = relative_error(a, num) if a.size else np.zeros(0)
            max_err[name] = float(err.max()) if err.size else 0.0
            if err.size and err.max() > worst[2]:
                idx = np.unravel_index(int(err.argmax()), tuple(p.shape))
                worst = (name, tuple(int(i) for i in idx), float(err.max()))
    return GradCheckReport(max_err, worst[0], worst[1], worst[2], tol)
