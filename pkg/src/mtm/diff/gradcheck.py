"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mtm.diff.array import Tape


class EvaluationError(ValueError):
    pass


@dataclass
class GradCheckReport:
    rtol: float
    step: float
    errors: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(e <= self.rtol for e in self.errors.values())

    @property
    def failures(self):
        return sorted(k for k, e in self.errors.items() if e > self.rtol)

    def to_dict(self):
        return {
            "rtol": self.rtol,
            "step": self.step,
            "passed": self.passed,
            "max_rel_error": {k: float(v) for k, v in self.errors.items()},
            "failures": self.failures,
        }


def _value(f):
    y = float(np.asarray(f().data).reshape(()))
    if not np.isfinite(y):
        raise EvaluationError(f"objective is not finite ({y})")
    return y


def grad_check(f, params, step=1e-5, rtol=1e-4, floor=1e-5, max_elements=None, seed=0):
    """Compare reverse-mode gradients of ``f()`` with central differences.

    ``f`` takes no arguments and returns a scalar DiffArray built from
    ``params`` (a dict name -> DiffArray, or a list). The relative error of
    an element is ``|a - n| / max(|a|, |n|, floor)``; the report keeps the
    maximum per parameter. With ``max_elements`` only that many seeded
    random coordinates of each larger tensor are probed.
    """
    rng = np.random.default_rng(seed)
    if not isinstance(params, dict):
        params = {str(i): p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        y = f()
        if not np.all(np.isfinite(y.data)):
            raise EvaluationError("objective is not finite at the base point")
        tape.backward(y)
    report = GradCheckReport(rtol=rtol, step=step)
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            coords = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        numeric = np.empty(len(coords))
        for q, k in enumerate(coords):
            keep = flat[k]
            flat[k] = keep + step
            hi = _value(f)
            flat[k] = keep - step
            lo = _value(f)
            flat[k] = keep
            numeric[q] = (hi - lo) / (2.0 * step)
        a = analytic.reshape(-1)[coords]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        report.errors[name] = float(np.max(np.abs(a - numeric) / denom)) if len(coords) else 0.0
    return report
