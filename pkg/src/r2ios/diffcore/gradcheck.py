"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    n_checked: int
    n_skipped: int
    per_input: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"grad_check {status}: max rel err {self.max_rel_err:.3e} "
                f"(tol {self.tol:.1e}, {self.n_checked} coords, "
                f"{self.n_skipped} skipped)")


def grad_check(op_closure, inputs: list[Tensor], h: float = 1e-5,
               tol: float = 1e-4, skip_masks=None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``op_closure(inputs, tape)`` must return a scalar Tensor and be pure in
    the input data.  ``skip_masks`` optionally excludes coordinates (e.g.
    those within 1e-6 of a ReLU kink or an argmax tie) per input.

    The relative error per coordinate is |a - n| / max(|a|, |n|, 1e-3); the
    floor keeps finite-difference noise on near-zero gradients from
    registering as disagreement.
    """
    if h <= 0:
        raise ValueError("grad_check requires h > 0")
    for t in inputs:
        t.zero_grad()
    tape = Tape()
    out = op_closure(inputs, tape)
    backward(out, tape)
    analytic = [t.grad.copy() for t in inputs]

    report = GradCheckReport(max_rel_err=0.0, tol=tol, n_checked=0, n_skipped=0)
    for i, t in enumerate(inputs):
        mask = None if skip_masks is None else skip_masks[i]
        flat = t.data.ravel()
        num = np.zeros_like(flat)
        errs = np.zeros_like(flat)
        for j in range(flat.size):
            if mask is not None and mask.ravel()[j]:
                report.n_skipped += 1
                continue
            orig = flat[j]
            flat[j] = orig + h
            f_plus = float(op_closure(inputs, None).data)
            flat[j] = orig - h
            f_minus = float(op_closure(inputs, None).data)
            flat[j] = orig
            num[j] = (f_plus - f_minus) / (2.0 * h)
            a = analytic[i].ravel()[j]
            errs[j] = abs(a - num[j]) / max(abs(a), abs(num[j]), 1e-3)
            report.n_checked += 1
        report.per_input.append((analytic[i], num.reshape(t.data.shape)))
        if report.n_checked:
            report.max_rel_err = max(report.max_rel_err, float(errs.max()))
    return report
