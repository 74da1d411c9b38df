"""Central finite-difference verification of taped gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from querystream.autodiff.tensor import Tape, Tensor, backward, no_tape


@dataclass
class GradReport:
    max_rel_err: float
    max_abs_err: float
    passed: bool
    n_coords: int
    worst: tuple[int, int] | None = None  # (input index, flat coordinate)

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return f"{verdict}: max rel err {self.max_rel_err:.3e}, max abs err {self.max_abs_err:.3e} over {self.n_coords} coords"


def finite_diff_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    tol: float = 1e-4,
    atol: float = 1e-7,
) -> GradReport:
    """Compare ``backward`` against central differences for every input coordinate.

    ``f`` is called as ``f(*xs)`` and must return a scalar tensor.  The step
    per coordinate is ``1e-6 * max(1, |x_i|)``.  A coordinate passes when its
    relative error (denominator ``max(|a|, |b|, 1e-8)``) is below ``tol``, or
    its absolute error is below ``atol``; the latter absorbs rounding noise on
    gradients that are analytically zero.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.data = np.ascontiguousarray(t.data)
    try:
        with Tape() as tape:
            loss = f(*xs)
        analytic = backward(loss, tape, xs)
        max_rel = max_abs = 0.0
        worst = None
        passed = True
        n = 0
        for i, t in enumerate(xs):
            ga = analytic[t].reshape(-1)
            flat = t.data.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                h = 1e-6 * max(1.0, abs(orig))
                with no_tape():
                    flat[j] = orig + h
                    fp = float(f(*xs).data)
                    flat[j] = orig - h
                    fm = float(f(*xs).data)
                flat[j] = orig
                gn = (fp - fm) / (2.0 * h)
                a = abs(ga[j] - gn)
                rel = a / max(abs(ga[j]), abs(gn), 1e-8)
                n += 1
                if rel > max_rel:
                    max_rel, worst = rel, (i, j)
                max_abs = max(max_abs, a)
                if rel >= tol and a >= atol:
                    passed = False
        return GradReport(max_rel, max_abs, passed, n, worst)
    finally:
        for t, r in zip(xs, saved):
            t.requires_grad = r
