"""Closed-form consistency constants and convergence-rate bounds.

The simulator's schemes each come with a closed-form bound B on the
consistency constant (the worst root-mean-square distance, in units of the
learning rate, between the global parameter and any worker view).  This
module holds those formulas plus the four convergence statements the harness
verifies empirically:

* T1: single-update, smooth non-convex        (alpha = 1/sqrt(T))
* T2: parallel-update, smooth non-convex      (alpha = sqrt(p)/sqrt(T))
* T3: single-update, strongly convex          (alpha = 2 ln T / (c T))
* T4: parallel-update, strongly convex        (alpha = 2 ln(Tp) / (c T))

Each rate carries a minimum-horizon precondition; ``lr_schedule`` refuses to
produce a step size when it is not met.  ``rhs_terms`` returns the four
summands of the corresponding error bound exactly as stated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .objectives import ObjectiveConstants

__all__ = [
    "RATE_TAGS",
    "ConsistencyBound",
    "SchedulePreconditionError",
    "bound_B",
    "lr_schedule",
    "rhs_terms",
    "rhs_bound",
]

RATE_TAGS = ("T1", "T2", "T3", "T4")


class SchedulePreconditionError(ValueError):
    """Raised when a rate schedule's minimum-horizon condition fails."""


@dataclass(frozen=True)
class ConsistencyBound:
    """Closed-form B for one scheme configuration.

    ``value`` is None for schemes whose B is only known empirically
    (norm-thresholded elastic scheduling).
    """

    scheme: str
    value: float | None
    formula: str

    @property
    def closed_form(self) -> bool:
        return self.value is not None


def bound_B(
    scheme: str,
    consts: ObjectiveConstants,
    p: int,
    d: int,
    f: int = 0,
    tau_max: int = 0,
    gamma: float = 0.0,
    b_adv: float = 0.0,
) -> ConsistencyBound:
    """Closed-form consistency constant for one scheme configuration.

    M and sigma are taken from the measured constants; the crash-substitution
    and late-substitution rows additionally require alpha <= 1/(6L) at run
    time, which the kernel validates separately.
    """
    m_bound = math.sqrt(consts.M2)
    sigma = math.sqrt(consts.sigma2)
    if scheme == "exact":
        return ConsistencyBound(scheme, 0.0, "0")
    if scheme == "crash_m2":
        return ConsistencyBound(scheme, f * m_bound / p, "f*M/p")
    if scheme == "omission":
        return ConsistencyBound(scheme, f * m_bound / p, "f*M/p")
    if scheme == "crash_var":
        return ConsistencyBound(scheme, 3.0 * f * sigma / p, "3*f*sigma/p")
    if scheme == "async_mp":
        return ConsistencyBound(scheme, (p - 1) * tau_max * m_bound / p, "(p-1)*tau*M/p")
    if scheme == "shared_mem":
        return ConsistencyBound(scheme, math.sqrt(d) * tau_max * m_bound, "sqrt(d)*tau*M")
    if scheme == "compress_ef":
        if not (0.0 <= gamma < 1.0):
            raise ValueError("compress_ef needs 0 <= gamma < 1")
        factor = math.sqrt((2.0 - gamma) * gamma / (1.0 - gamma) ** 3)
        return ConsistencyBound(scheme, factor * m_bound, "sqrt((2-g)g/(1-g)^3)*M")
    if scheme == "elastic_var":
        return ConsistencyBound(scheme, 3.0 * sigma, "3*sigma")
    if scheme == "elastic_norm":
        return ConsistencyBound(scheme, None, "measured only")
    if scheme == "adversarial":
        return ConsistencyBound(scheme, float(b_adv), "B_adv")
    raise ValueError(f"unknown scheme {scheme!r}")


def lr_schedule(tag: str, T: int, consts: ObjectiveConstants, p: int = 1) -> float:
    """Step size mandated by the named rate, enforcing its horizon condition."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if p < 1:
        raise ValueError("p must be >= 1")
    L = consts.L
    c = consts.c
    if tag == "T1":
        need = 36.0 * L * L
        if T < need:
            raise SchedulePreconditionError(f"T1 needs T >= 36*L^2 = {need:g}, got T = {T}")
        return 1.0 / math.sqrt(T)
    if tag == "T2":
        need = 64.0 * L * L * p
        if T < need:
            raise SchedulePreconditionError(f"T2 needs T >= 64*L^2*p = {need:g}, got T = {T}")
        return math.sqrt(p) / math.sqrt(T)
    if tag == "T3":
        if c <= 0.0:
            raise SchedulePreconditionError("T3 needs strong convexity c > 0")
        need = 144.0 * L * L / (c * c)
        if T < need:
            raise SchedulePreconditionError(f"T3 needs T >= 144*L^2/c^2 = {need:g}, got T = {T}")
        return 2.0 * math.log(T) / (c * T)
    if tag == "T4":
        if c <= 0.0:
            raise SchedulePreconditionError("T4 needs strong convexity c > 0")
        need = 256.0 * L * L * p / (c * c)
        if T < need:
            raise SchedulePreconditionError(f"T4 needs T >= 256*L^2*p/c^2 = {need:g}, got T = {T}")
        return 2.0 * (math.log(T) + math.log(p)) / (c * T)
    raise ValueError(f"unknown rate tag {tag!r} (expected one of {RATE_TAGS})")


def rhs_terms(
    tag: str,
    T: int,
    consts: ObjectiveConstants,
    B: float,
    init: float,
    p: int = 1,
) -> tuple[float, float, float, float]:
    """The four summands of the named rate's error bound.

    ``init`` is f(x0) - f_star for T1/T2 and ||x0 - x*||^2 for T3/T4.  The
    non-convex rates bound the minimum expected squared gradient norm; the
    strongly convex rates bound the expected squared distance at time T.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    L = consts.L
    c = consts.c
    s2 = consts.sigma2
    if tag == "T1":
        rt = math.sqrt(T)
        return (
            4.0 * init / rt,
            2.0 * B * B * L * L / T,
            6.0 * L * s2 / rt,
            6.0 * L**3 * B * B / (T * rt),
        )
    if tag == "T2":
        rtp = math.sqrt(T * p)
        rt = math.sqrt(T)
        return (
            8.0 * init / rtp,
            4.0 * B * B * L * L * p / T,
            8.0 * L * s2 / rtp,
            16.0 * L**3 * B * B * p * math.sqrt(p) / (T * rt),
        )
    if tag == "T3":
        if c <= 0.0:
            raise ValueError("T3 needs c > 0")
        lt = math.log(T)
        return (
            init / T,
            16.0 * lt * lt * L * L * B * B / (c**4 * T * T),
            12.0 * s2 * lt / T,
            48.0 * lt**3 * B * B * L * L / (c**4 * T**3),
        )
    if tag == "T4":
        if c <= 0.0:
            raise ValueError("T4 needs c > 0")
        ltp = math.log(T) + math.log(p)
        return (
            init / (T * p),
            16.0 * ltp * ltp * L * L * B * B / (c**4 * T * T),
            12.0 * s2 * ltp / (T * p),
            48.0 * ltp**3 * B * B * L * L / (c**4 * T**3),
        )
    raise ValueError(f"unknown rate tag {tag!r} (expected one of {RATE_TAGS})")


def rhs_bound(tag: str, T: int, consts: ObjectiveConstants, B: float, init: float, p: int = 1) -> float:
    """Total of the four bound terms for the named rate."""
    return sum(rhs_terms(tag, T, consts, B, init, p=p))
