"""Central finite-difference gradient checking for f64 graphs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Graph, Tensor, backward, no_grad

# Relative error uses a floored denominator so near-zero analytic gradients
# are compared against FD noise at a sane scale. Central differences resolve
# gradients only down to ~eps*|loss|/h, so the floor scales with the loss
# magnitude; below it, a "relative error" would measure rounding noise.
_REL_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    h: float
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)
    passed: bool = True

    @property
    def worst(self):
        if not self.per_param:
            return None
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]

    def lines(self):
        for name in self.per_param:
            err = self.per_param[name]
            status = "ok" if err < self.tol else "FAIL"
            yield f"{status}  {name}  max_rel_err={err:.3e}"


def grad_check(f, params: dict[str, Tensor], h=1e-5, tol=1e-4) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued f() against central differences.

    f rebuilds its graph from `params` on every call and must be
    deterministic (verified by evaluating it twice) and f64 throughout.
    Returns the per-parameter max relative error and a pass/fail verdict.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ContractError(f"grad_check requires f64 parameters, '{name}' is {p.data.dtype}")

    with no_grad():
        l1 = float(f().data)
        l2 = float(f().data)
    if l1 != l2 or not np.isfinite(l1):
        raise ContractError(f"f is not deterministic (or not finite): {l1!r} vs {l2!r}")

    for p in params.values():
        p.zero_grad()
    with Graph():
        loss = f()
        backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    floor = _REL_FLOOR * max(1.0, abs(l1))
    report = GradCheckReport(h=h, tol=tol)
    for name, p in params.items():
        a = analytic[name]
        worst = 0.0
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                lp = float(f().data)
            flat[i] = orig - h
            with no_grad():
                lm = float(f().data)
            flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            ai = a.reshape(-1)[i]
            rel = abs(ai - fd) / max(abs(ai), abs(fd), floor)
            if rel > worst:
                worst = rel
        report.per_param[name] = worst
        if worst >= tol:
            report.passed = False
    return report
