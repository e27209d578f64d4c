"""Central finite-difference gradient checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional

import numpy as np

from .tensor import Tensor, no_grad, precision


@dataclass
class GradCheckReport:
    checked: int = 0
    passed: int = 0
    worst: float = 0.0
    per_param: Dict[str, float] = field(default_factory=dict)

    @property
    def pass_fraction(self) -> float:
        return self.passed / self.checked if self.checked else 1.0

    def ok(self, min_fraction: float = 0.95) -> bool:
        return self.checked > 0 and self.pass_fraction >= min_fraction


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Dict[str, Tensor],
    h: float = 1e-3,
    rtol: float = 1e-3,
    max_coords: int = 256,
    seed: int = 0,
    names: Optional[Iterable[str]] = None,
) -> GradCheckReport:
    """Compare backprop gradients against central differences.

    The check runs in float64 so that the difference quotient is not
    dominated by float32 round-off; parameters are restored afterwards.
    ``loss_fn`` must rebuild its graph from ``params`` on every call.
    """
    rng = np.random.default_rng(seed)
    names = list(params) if names is None else list(names)
    originals = {k: p.data for k, p in params.items()}
    report = GradCheckReport()
    try:
        with precision(np.float64):
            for p in params.values():
                p.data = p.data.astype(np.float64)
                p.grad = None
            loss = loss_fn()
            loss.backward()
            analytic = {k: (params[k].grad if params[k].grad is not None else np.zeros_like(params[k].data)) for k in names}
            with no_grad():
                for k in names:
                    p = params[k]
                    flat = p.data.reshape(-1)
                    n = flat.size
                    idx = rng.choice(n, size=min(n, max_coords), replace=False)
                    num = np.empty(idx.size)
                    for j, i in enumerate(idx):
                        old = flat[i]
                        flat[i] = old + h
                        fp = loss_fn().item()
                        flat[i] = old - h
                        fm = loss_fn().item()
                        flat[i] = old
                        num[j] = (fp - fm) / (2 * h)
                    err = relative_error(analytic[k].reshape(-1)[idx], num)
                    report.checked += idx.size
                    report.passed += int((err < rtol).sum())
                    report.per_param[k] = float(err.max(initial=0.0))
                    report.worst = max(report.worst, report.per_param[k])
    finally:
        for k, p in params.items():
            p.data = originals[k]
            p.grad = None
    return report
