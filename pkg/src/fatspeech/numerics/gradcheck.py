"""Finite-difference verification of taped gradients.

grad_check evaluates a scalar-valued function once under a tape to collect the
reverse-mode gradient, then probes every coordinate of the input with central
differences. The comparison is the per-coordinate error |ad - fd| scaled by
max(1, |ad|, |fd|): pure relative error for large gradients, absolute for
gradients near zero (where relative error is meaningless).

Functions must be deterministic and evaluated in float64; central differences
in float32 drown in rounding noise long before any useful tolerance.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, Tape


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_index: tuple
    passed: bool
    ad_grad: np.ndarray
    fd_grad: np.ndarray

    def __str__(self):
        state = "ok" if self.passed else "FAIL"
        return f"grad_check {state}: max rel err {self.max_rel_err:.3e} at {self.worst_index}"


def grad_check(fn, point, eps=1e-5, tol=1e-4):
    """Compare reverse-mode and central-difference gradients of fn at point.

    fn maps one Tensor to a scalar Tensor and must be deterministic. point is
    taken as float64 regardless of its incoming dtype. eps is the half-width
    of the central difference; values in [1e-6, 1e-4] behave well in float64.
    """
    base = np.asarray(point.data if isinstance(point, Tensor) else point,
                      dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = fn(x)
        tape.backward(y)
    ad = np.zeros_like(base) if x.grad is None else np.asarray(x.grad, dtype=np.float64)

    fd = np.zeros_like(base)
    flat = base.reshape(-1)
    fd_flat = fd.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        hi = fn(Tensor(base.copy())).item()
        flat[i] = saved - eps
        lo = fn(Tensor(base.copy())).item()
        flat[i] = saved
        fd_flat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1.0, np.maximum(np.abs(ad), np.abs(fd)))
    rel = np.abs(ad - fd) / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    max_err = float(rel.reshape(-1)[worst]) if rel.size else 0.0
    index = np.unravel_index(worst, base.shape) if base.shape else ()
    return GradCheckReport(max_rel_err=max_err, worst_index=tuple(int(i) for i in index),
                           passed=bool(max_err < tol), ad_grad=ad, fd_grad=fd)
