"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from heterrec.errors import ContractError
from heterrec.numerics.tensor import Tape, Tensor, shadow64


@dataclass
class GradCheckReport:
    tol: float
    step: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for name, err in self.errors.items():
            out.append(f"{'ok  ' if err <= self.tol else 'FAIL'} {name}: max rel err {err:.3e}")
        return out


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Mapping[str, Tensor],
    step: float = 1e-5,
    tol: float = 1e-3,
    atol: float = 1e-6,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` with central differences.

    ``fn`` is a closure over the tensors in ``inputs``; both passes run in
    64-bit. The per-element error is ``|a - n| / max(|a|, |n|, atol)`` and the
    report keeps the maximum per input. ``max_elements`` samples coordinates
    of large inputs to bound the cost.
    """
    saved = {k: (t.data, t.grad, t.requires_grad) for k, t in inputs.items()}
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol, step=step)
    try:
        for t in inputs.values():
            t.data = t.data.astype(np.float64)
            t.grad = None
            t.requires_grad = True
        with shadow64():
            with Tape() as tape:
                out = fn()
            if out.data.size != 1:
                raise ContractError(f"grad_check needs a scalar output, got shape {out.shape}")
            tape.backward(out)
            for name, t in inputs.items():
                analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
                flat = t.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_elements is not None and flat.size > max_elements:
                    idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
                worst = 0.0
                for i in idx:
                    orig = flat[i]
                    flat[i] = orig + step
                    fp = float(fn().data.reshape(-1)[0])
                    flat[i] = orig - step
                    fm = float(fn().data.reshape(-1)[0])
                    flat[i] = orig
                    num = (fp - fm) / (2 * step)
                    a = float(analytic.reshape(-1)[i])
                    err = abs(a - num) / max(abs(a), abs(num), atol)
                    worst = max(worst, err)
                report.errors[name] = worst
    finally:
        for k, t in inputs.items():
            t.data, t.grad, t.requires_grad = saved[k]
    return report
