"""Finite-difference gradient oracle.

Central differences at 64-bit precision validate every backward pass in
the package. The oracle never reuses the reverse-mode path it checks: it
only calls the forward function at perturbed parameter values.

For large parameter sets, a seeded subset of coordinates per tensor is
checked (full sweeps are quadratic in parameter count and pointless for
a spot oracle); pass `samples_per_param=None` to sweep everything.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OracleError
from .rng import Rng
from .tensor import Tensor

# Relative error uses max(|ad|, |fd|, DENOM_FLOOR) as denominator so that
# near-zero gradients are judged against finite-difference roundoff
# (~|f|*eps/h ~ 1e-10) instead of blowing up.
DENOM_FLOOR = 1e-5


@dataclass
class GradCheckReport:
    passed: bool
    tol: float
    max_rel_err: float
    worst_param: str
    worst_index: int
    worst_ad: float
    worst_fd: float
    checked: int
    per_param: dict = field(default_factory=dict)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"grad_check {status}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e}) "
                f"at {self.worst_param}[{self.worst_index}] "
                f"(reverse={self.worst_ad:.6e}, central={self.worst_fd:.6e}, {self.checked} coords)")


def grad_check(f, params: dict[str, Tensor], h: float = 1e-5, tol: float = 1e-4,
               samples_per_param: int | None = 8, sample_seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar f(params) with central differences.

    f must be deterministic: it is evaluated twice up front and an
    OracleError is raised if the two values differ bitwise (fixed Rng draws
    make stochastic paths deterministic). Parameters are perturbed in place
    and restored.
    """
    v1 = float(f(params).data)
    v2 = float(f(params).data)
    if v1 != v2 or not np.isfinite(v1):
        raise OracleError(f"target function is not deterministic or not finite: {v1!r} vs {v2!r}")

    for p in params.values():
        p.zero_grad()
    out = f(params)
    out.backward()
    ad_grads = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    report = GradCheckReport(passed=True, tol=tol, max_rel_err=0.0, worst_param="",
                             worst_index=-1, worst_ad=0.0, worst_fd=0.0, checked=0)
    for pi, name in enumerate(sorted(params)):
        p = params[name]
        flat = p.data.reshape(-1)
        size = flat.shape[0]
        if samples_per_param is None or size <= samples_per_param:
            coords = np.arange(size)
        else:
            coords = Rng(sample_seed, stream=pi).choice(size, samples_per_param)
        ad_flat = ad_grads[name].reshape(-1)
        param_max = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(params).data)
            flat[i] = orig - h
            fm = float(f(params).data)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            ad = float(ad_flat[i])
            rel = abs(ad - fd) / max(abs(ad), abs(fd), DENOM_FLOOR)
            report.checked += 1
            param_max = max(param_max, rel)
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst_param = name
                report.worst_index = int(i)
                report.worst_ad = ad
                report.worst_fd = fd
        report.per_param[name] = param_max
    report.passed = report.max_rel_err <= tol
    return report
