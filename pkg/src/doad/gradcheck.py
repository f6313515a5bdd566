"""Central finite-difference checks against tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError
from .tensor import Tape, Tensor, backward


@dataclass
class GradCheckReport:
    names: list[str]
    max_rel_error: list[float]
    tol: float
    worst: float = field(init=False)

    def __post_init__(self):
        self.worst = max(self.max_rel_error, default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tol

    def table(self) -> str:
        width = max([len(n) for n in self.names] + [6])
        lines = [f"{'tensor':<{width}}  max_rel_err  status"]
        for name, err in zip(self.names, self.max_rel_error):
            lines.append(f"{name:<{width}}  {err:11.3e}  {'ok' if err < self.tol else 'FAIL'}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[[], Tensor], inputs: Tensor | Sequence[Tensor], eps: float = 1e-5,
               tol: float = 1e-4, names: Sequence[str] | None = None,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f()`` with central differences.

    ``f`` closes over ``inputs``; each input is perturbed in place one entry
    at a time. Report holds the max relative error per input tensor.
    """
    xs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for x in xs:
        x.requires_grad = True
        x.grad = None
    with Tape() as tape:
        out = f()
        if not np.all(np.isfinite(out.data)):
            raise DomainError("grad_check: f(x) is not finite")
        backward(out, tape)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]

    def value() -> float:
        v = f().data
        if not np.all(np.isfinite(v)):
            raise DomainError("grad_check: f(x) is not finite under perturbation")
        return float(v)

    errors = []
    for x, ga in zip(xs, analytic):
        flat = x.data.reshape(-1)
        numeric = np.zeros(flat.shape, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * eps)
        err = relative_error(ga.reshape(-1), numeric, floor)
        errors.append(float(err.max()) if err.size else 0.0)
    labels = list(names) if names is not None else [x.name or f"input{i}" for i, x in enumerate(xs)]
    return GradCheckReport(labels, errors, tol)
