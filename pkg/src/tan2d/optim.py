"""Adam, plus a finite-difference gradient checker."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autograd import Tensor
from .errors import TrainingError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, name: str = "param") -> np.ndarray:
    """In-place bias-corrected Adam update of ``param``; returns it."""
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ValueError(f"{name}: gradient/state shape does not match parameter {param.shape}")
    if not np.isfinite(grad).all():
        raise TrainingError(f"non-finite gradient in parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1**state.t)
    v_hat = state.v / (1.0 - b2**state.t)
    param -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.params = dict(params)
        self.lr = lr
        self.state = {
            k: AdamState.like(p.data, lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
            for k, p in self.params.items()
        }

    def step(self) -> None:
        # validate everything first so a bad gradient never leaves params half-updated
        for name, p in self.params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise TrainingError(f"non-finite gradient in parameter {name!r}")
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_step(p.data, g, self.state[name], name)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, s in self.state.items():
            out[f"adam.m.{k}"] = s.m
            out[f"adam.v.{k}"] = s.v
            out[f"adam.t.{k}"] = np.asarray([s.t], dtype=np.float64)
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for k, s in self.state.items():
            s.m[...] = arrays[f"adam.m.{k}"]
            s.v[...] = arrays[f"adam.v.{k}"]
            s.t = int(arrays[f"adam.t.{k}"][0])


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max()) if analytic.size else 0.0


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences of scalar ``f`` at ``x``."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    if out.requires_grad:
        out.backward()
        analytic = xt.grad.copy()
    else:
        analytic = np.zeros_like(base)
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base.copy())).item()
        flat[i] = orig - h
        fm = f(Tensor(base.copy())).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * h)
    return _rel_err(analytic, numeric)


def grad_check_params(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-5) -> dict[str, float]:
    """Per-parameter max relative error for a closure over existing parameter tensors."""
    loss = loss_fn()
    loss.backward()
    analytic = {k: p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for k, p in params.items()}
    report = {}
    for k, p in params.items():
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * h)
        report[k] = _rel_err(analytic[k], numeric)
    return report
