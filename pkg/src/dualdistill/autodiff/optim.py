"""Adam with decoupled weight decay and a warmup / linear-decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_ratio: float = 0.1


def scheduled_lr(base_lr: float, step: int, total_steps: Optional[int], warmup_ratio: float) -> float:
    """Learning rate for 1-indexed ``step``: linear warmup, then linear decay to zero.

    ``total_steps=None`` disables the schedule.
    """
    if total_steps is None:
        return base_lr
    warm = int(round(warmup_ratio * total_steps))
    if warm > 0 and step <= warm:
        return base_lr * step / warm
    if total_steps <= warm:
        return base_lr
    return base_lr * max(0.0, (total_steps - step) / (total_steps - warm))


@dataclass
class AdamState:
    config: AdamConfig
    total_steps: Optional[int] = None
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return scheduled_lr(self.config.lr, self.t, self.total_steps, self.config.warmup_ratio)


def adam_step(state: AdamState, params: Dict[str, Tensor], grads: Optional[Dict[str, np.ndarray]] = None) -> None:
    """Update ``params`` in place.

    Gradients default to each parameter's ``.grad``; parameters without a
    gradient are skipped. Weight decay is applied only to matrices (ndim >= 2).
    """
    if grads is None:
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adam_step aborted: non-finite gradient for '{name}' at step {state.t + 1}")

    cfg = state.config
    state.t += 1
    lr = state.lr
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if cfg.weight_decay and p.data.ndim >= 2:
            update = update + cfg.weight_decay * p.data
        p.data -= (lr * update).astype(p.data.dtype)
