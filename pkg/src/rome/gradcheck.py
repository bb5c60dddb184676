"""Central finite-difference check of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import tensor as tn


@dataclass
class ParamCheck:
    name: str
    size: int
    max_rel_error: float
    flagged: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.flagged


@dataclass
class GradCheckReport:
    tol: float
    h: float
    params: list[ParamCheck]

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for p in self.params:
            status = "ok" if p.passed else f"FAIL ({len(p.flagged)} entries)"
            out.append(f"{p.name:<40} n={p.size:<6} max_rel={p.max_rel_error:.3e}  {status}")
        return out


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return np.abs(a - b) / denom


def finite_diff_check(
    f: Callable[[], tn.Tensor],
    params: Mapping[str, tn.Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients of the scalar ``f()`` against central differences.

    ``f`` closes over ``params`` and is re-evaluated with each entry nudged by
    ``±h`` in place. Requires 64-bit mode: in 32-bit the difference quotient is
    dominated by roundoff and the comparison carries no information.
    """
    if tn.get_dtype() is not np.float64 or any(p.data.dtype != np.float64 for p in params.values()):
        raise tn.PrecisionError("finite-difference checks require 64-bit mode (set precision=float64)")

    with tn.Tape() as tape:
        loss = f()
    tape.backward(loss, params.values())
    analytic = {name: p.grad.copy() for name, p in params.items()}

    checks = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        numeric = np.empty_like(flat)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = f().item()
            flat[k] = orig - h
            down = f().item()
            flat[k] = orig
            numeric[k] = (up - down) / (2 * h)
        err = relative_error(analytic[name].reshape(-1), numeric)
        checks.append(ParamCheck(
            name=name,
            size=flat.size,
            max_rel_error=float(err.max()) if err.size else 0.0,
            flagged=[int(i) for i in np.flatnonzero(err > tol)],
        ))
    return GradCheckReport(tol=tol, h=h, params=checks)
