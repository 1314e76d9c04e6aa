"""Central finite-difference verification of analytic gradients.

The probed graph is evaluated with float64 storage so the only noise floor
is the probe step itself. Small inputs are checked element by element;
larger ones through random directional probes (a dot-product test per
direction). Both compare the *undivided* secant difference against the
analytic inner product with the realized perturbation, which keeps float32
parameter storage from biasing the step size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import NumericError, Tensor, double_precision, watch_kinks


@dataclass
class GradCheckReport:
    max_rel_err: float
    tolerance: float
    step: float
    passed: bool
    kink_margin: float
    per_input: list = field(default_factory=list)

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"grad_check {verdict}: max_rel_err={self.max_rel_err:.3e} "
            f"(tol {self.tolerance:.1e}, step {self.step:.1e}, "
            f"kink_margin {self.kink_margin:.3e})"
        )


def _projection(shape, rng):
    return rng.standard_normal(shape) if shape else np.float64(1.0)


def _rel_err(sa: float, sn: float, floor: float) -> float:
    denom = max(abs(sa), abs(sn), floor)
    return abs(sa - sn) / denom


def grad_check(
    fn,
    wrt,
    tolerance: float = 1e-3,
    step: float = 1e-3,
    max_exhaustive: int = 512,
    directions: int = 8,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of `fn()` against central differences.

    `fn` rebuilds the graph from the tensors in `wrt` (their `.data` is
    perturbed in place and restored). The output is reduced to a scalar by a
    fixed random projection so non-scalar ops are covered too.
    """
    rng = np.random.default_rng(seed)
    wrt = list(wrt)
    with double_precision(), watch_kinks() as margins:
        out0 = fn()
        proj = _projection(out0.data.shape, rng)

        def scalar():
            return float(np.sum(np.asarray(fn().data, dtype=np.float64) * proj))

        s0 = scalar()
        if not np.isfinite(s0):
            raise NumericError("non-finite value under gradient check")
        for t in wrt:
            t.zero_grad()
        out0.backward(np.broadcast_to(np.asarray(proj, dtype=np.float64), out0.data.shape).copy())
        analytic = [
            t.grad.copy() if t.grad is not None else np.zeros(t.data.shape) for t in wrt
        ]
        floor = 1e-7 * (abs(s0) + 1.0) * step

        per_input = []
        for t, a in zip(wrt, analytic):
            base = t.data.copy()
            size = int(np.prod(t.data.shape)) if t.data.shape else 1

            def probe(delta):
                t.data = (base.astype(np.float64) + delta).astype(base.dtype)
                xp = t.data.astype(np.float64).copy()
                sp = scalar()
                t.data = (base.astype(np.float64) - delta).astype(base.dtype)
                xm = t.data.astype(np.float64).copy()
                sm = scalar()
                t.data = base
                return sp - sm, float(np.sum(a * (xp - xm)))

            worst = 0.0
            if size <= max_exhaustive:
                flat_delta = np.zeros(size)
                for i in range(size):
                    flat_delta[i] = step
                    sn, sa = probe(flat_delta.reshape(t.data.shape))
                    worst = max(worst, _rel_err(sa, sn, floor + 1e-300))
                    flat_delta[i] = 0.0
            else:
                for _ in range(directions):
                    v = rng.standard_normal(t.data.shape)
                    v *= step / max(np.abs(v).max(), 1e-300)
                    sn, sa = probe(v)
                    worst = max(worst, _rel_err(sa, sn, floor + 1e-300))
            per_input.append(worst)

        kink_margin = min(margins) if margins else float("inf")
        worst_all = max(per_input) if per_input else 0.0
        return GradCheckReport(
            max_rel_err=worst_all,
            tolerance=tolerance,
            step=step,
            passed=worst_all <= tolerance,
            kink_margin=kink_margin,
            per_input=per_input,
        )
