"""Central finite-difference checking of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Graph, Tensor, zero_grads


@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error and the overall verdict."""
    tolerance: float
    per_param: dict[str, float] = field(default_factory=dict)
    max_rel_err: float = 0.0
    passed: bool = False


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1.0)


def grad_check(build_loss, params: dict[str, Tensor], tolerance: float,
               h: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of a deterministic scalar loss against
    central finite differences.

    `build_loss` is re-invoked for every perturbed evaluation, so it must
    rebuild the computation from the current parameter values each time.
    """
    zero_grads(params.values())
    with Graph() as g:
        loss = build_loss()
    g.backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}
    zero_grads(params.values())

    report = GradCheckReport(tolerance=tolerance)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        err = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = build_loss().item()
            flat[i] = orig - h
            down = build_loss().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            err = max(err, _rel_err(float(ga[i]), numeric))
        report.per_param[name] = err
        worst = max(worst, err)
    report.max_rel_err = worst
    report.passed = worst <= tolerance
    return report
