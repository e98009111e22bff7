"""The consistency-gap state machine.

A run maintains one auxiliary global parameter ``x_t`` (the bookkeeping sum
of every credited gradient) next to per-worker views ``v_t^i`` whose evolution
is delegated to the configured distribution scheme.  Two update modes exist:

* single_step: one acting worker per iteration (round-robin over the alive
  workers); ``x_{t+1} = x_t - alpha * g(v_t)``.
* parallel_step: every alive worker generates a gradient; the scheme decides
  delivery and the credited participant set I_t; then
  ``x_{t+1} = x_t - (alpha/p) * sum_{i in I_t} g_t^i``.

The per-iteration consistency gap ``||x_t - v_t^i||^2`` is the measured
quantity everything else in the package is built around.

Aggregation convention: every sum of per-message vectors is computed by
``np.add.reduce`` over rows stacked in canonical order (pending messages by
(origin iteration, sender), same-iteration messages by sender id).  Schemes
and the kernel share this convention so that degenerate scheme parameters
reproduce the exact scheme bit for bit.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import theory
from .errors import ConfigError, InvariantError
from .objectives import Objective, ObjectiveConstants
from .rng import substream

if TYPE_CHECKING:
    from .relaxations import RelaxationConfig, Scheme, StepReport

__all__ = [
    "WorkerState",
    "SimState",
    "RunConfig",
    "IterationRecord",
    "RunMetrics",
    "StepContext",
    "init_run",
    "step",
    "run_trial",
    "consistency_gap",
    "empirical_B",
    "empirical_B_detail",
    "agg",
]

SINGLE = "single_step"
PARALLEL = "parallel_step"


def agg(rows: np.ndarray) -> np.ndarray:
    """Canonical vector aggregation: add.reduce over rows, in the given order."""
    return np.add.reduce(rows, axis=0)


@dataclass
class WorkerState:
    """One worker: its view row, residual row, pending messages, liveness.

    The inbox maps a due iteration to the scaled-gradient rows releasing
    then, each tagged (origin iteration, sender); rows are appended in
    canonical (origin, sender) order so delivery needs no sorting.
    """

    wid: int
    view: np.ndarray
    error_acc: np.ndarray | None = None
    inbox: dict = field(default_factory=dict)  # due t -> [(origin_t, sender, row)]
    pending_count: int = 0
    alive: bool = True
    last_substitutions: list = field(default_factory=list)  # (sender, iteration)
    subs_count: int = 0
    corr_count: int = 0
    outstanding: int = 0


@dataclass
class RunConfig:
    """Everything one trial needs; alpha may be a schedule tag (T1..T4)."""

    p: int
    T: int
    alpha: float | str
    scheme: "RelaxationConfig"
    mode: str | None = None
    seed_data: int = 0
    seed_sched: int = 0
    trial: int = 0
    constants: ObjectiveConstants | None = None
    keep_event_logs: bool = False
    keep_gradient_log: bool = False
    keep_gap_matrix: bool = True


@dataclass
class IterationRecord:
    t: int
    f_value: float
    grad_norm2: float
    gap2: np.ndarray  # per worker; NaN where the worker held no view this iteration
    i_size: int
    dist2_to_opt: float  # NaN when the optimum is unknown


class StepContext:
    """Per-trial immutable plumbing: objective, streams, resolved alpha."""

    def __init__(
        self,
        objective: Objective,
        config: RunConfig,
        alpha: float,
        mode: str,
        scheme: "Scheme",
    ):
        self.objective = objective
        self.config = config
        self.alpha = alpha
        self.mode = mode
        self.scheme = scheme
        self.p = config.p
        self.d = objective.d
        # Per-node sample indices for the whole horizon, drawn up front from
        # node-private data streams.  Consumption therefore never depends on
        # the schedule: the adversary stays oblivious by construction.
        self.idx_table = np.stack(
            [
                substream(config.seed_data, "trial", config.trial, "node", i).integers(
                    objective.m, size=config.T
                )
                for i in range(config.p)
            ]
        )
        self._sched_cache: dict[str, np.random.Generator] = {}

    def sched_stream(self, tag: str) -> np.random.Generator:
        gen = self._sched_cache.get(tag)
        if gen is None:
            gen = substream(self.config.seed_sched, "trial", self.config.trial, "sched", tag)
            self._sched_cache[tag] = gen
        return gen


@dataclass
class SimState:
    t: int
    global_x: np.ndarray
    views_mat: np.ndarray
    workers: list[WorkerState]
    config: RunConfig
    ctx: StepContext
    audit_x: np.ndarray
    error_mat: np.ndarray | None = None  # residual rows; workers hold views into it
    crash_count: int = 0
    in_flight_omitted: int = 0
    rr_pointer: int = 0
    history: deque | None = None  # x_{t}, x_{t-1}, ... for stale-read schemes
    schedule_log: list = field(default_factory=list)
    sample_log: list = field(default_factory=list)
    gradient_log: list | None = None
    scheme_data: dict = field(default_factory=dict)  # scheme-owned extra state

    def log_event(self, *event) -> None:
        if self.config.keep_event_logs:
            self.schedule_log.append(event)

    def log_samples(self, nodes, idxs) -> None:
        if self.config.keep_event_logs:
            t = self.t
            for n, i in zip(nodes, idxs):
                self.sample_log.append((t, int(n), int(i)))


@dataclass
class RunMetrics:
    """Per-trial output: packed per-iteration columns plus final state."""

    trial: int
    alpha: float
    p: int
    T: int
    scheme: str
    mode: str
    f_value: np.ndarray
    grad_norm2: np.ndarray
    gap2: np.ndarray | None  # (T+1, p), NaN where no view
    gap2_min: np.ndarray
    gap2_mean: np.ndarray
    gap2_max: np.ndarray
    i_size: np.ndarray
    dist2_to_opt: np.ndarray
    final_x: np.ndarray
    max_excursion: float  # max_t ||x_t - x*|| (from origin when x* unknown)
    schedule_log: list
    sample_log: list
    gradient_log: list | None

    def record(self, t: int) -> IterationRecord:
        gaps = self.gap2[t] if self.gap2 is not None else np.array([])
        return IterationRecord(
            t=t,
            f_value=float(self.f_value[t]),
            grad_norm2=float(self.grad_norm2[t]),
            gap2=gaps,
            i_size=int(self.i_size[t]),
            dist2_to_opt=float(self.dist2_to_opt[t]),
        )

    def summary(self) -> dict:
        return {
            "trial": self.trial,
            "alpha": self.alpha,
            "scheme": self.scheme,
            "mode": self.mode,
            "final_f": float(self.f_value[-1]),
            "final_grad_norm2": float(self.grad_norm2[-1]),
            "min_grad_norm2": float(self.grad_norm2.min()),
            "final_dist2_to_opt": float(self.dist2_to_opt[-1]),
            "max_gap2": float(np.nanmax(self.gap2_max)) if len(self.gap2_max) else 0.0,
            "max_excursion": self.max_excursion,
        }


def resolve_alpha(config: RunConfig) -> float:
    a = config.alpha
    if isinstance(a, str):
        tag = a.strip()
        if config.constants is None:
            raise ConfigError(f"alpha tag {tag!r} needs measured objective constants")
        try:
            return theory.lr_schedule(tag, config.T, config.constants, p=config.p)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    a = float(a)
    if not (a > 0.0) or not math.isfinite(a):
        raise ConfigError("alpha must be a positive finite number")
    return a


def init_run(config: RunConfig, objective: Objective) -> SimState:
    """Validate the config, build the scheme, and return the t=0 state.

    All vectors start at zero: x_0 = v_0^i = 0 and all residuals zero.
    """
    from .relaxations import build_scheme

    if config.p < 1:
        raise ConfigError("p must be >= 1")
    if config.T < 1:
        raise ConfigError("T must be >= 1")
    scheme = build_scheme(config.scheme)
    mode = config.mode or scheme.default_mode
    if mode not in (SINGLE, PARALLEL):
        raise ConfigError(f"unknown mode {mode!r}")
    if mode not in scheme.modes:
        raise ConfigError(f"scheme {scheme.name!r} supports modes {scheme.modes}, not {mode!r}")
    alpha = resolve_alpha(config)
    scheme.validate(config, objective, alpha)

    d = objective.d
    p = config.p
    views = np.zeros((p, d))
    err = np.zeros((p, d)) if scheme.needs_error_acc else None
    workers = [
        WorkerState(wid=i, view=views[i], error_acc=(err[i] if err is not None else None))
        for i in range(p)
    ]
    ctx = StepContext(objective, config, alpha=alpha, mode=mode, scheme=scheme)
    state = SimState(
        t=0,
        global_x=np.zeros(d),
        views_mat=views,
        workers=workers,
        config=config,
        ctx=ctx,
        audit_x=np.zeros(d),
        error_mat=err,
        gradient_log=[] if config.keep_gradient_log else None,
    )
    if scheme.needs_history:
        state.history = deque([state.global_x.copy()], maxlen=scheme.needs_history + 1)
    scheme.setup(state, ctx)
    return state


def _next_round_robin(state: SimState) -> int:
    p = state.config.p
    for _ in range(p):
        i = state.rr_pointer % p
        state.rr_pointer += 1
        if state.workers[i].alive:
            return i
    raise InvariantError("no alive worker available for single-step scheduling")


def step(state: SimState) -> "StepReport":
    """Advance one iteration; returns the scheme's step report."""
    ctx = state.ctx
    if state.t >= state.config.T:
        raise InvariantError("step called past the configured horizon T")
    report = ctx.scheme.advance(state, ctx)
    p = ctx.p
    if ctx.mode == PARALLEL:
        credited = report.credited
        if not (math.ceil(p / 2) <= len(credited) <= p):
            raise InvariantError(
                f"participant set size {len(credited)} outside [ceil(p/2), p] at t={state.t}"
            )
        acc = agg(report.scaled[credited])
        np.subtract(state.global_x, acc / p, out=state.global_x)
        acc2 = agg(report.scaled[credited])
        np.subtract(state.audit_x, acc2 / p, out=state.audit_x)
    else:
        np.subtract(state.global_x, report.scaled_acting, out=state.global_x)
        np.subtract(state.audit_x, report.scaled_acting, out=state.audit_x)
    drift = float(np.max(np.abs(state.global_x - state.audit_x)))
    if drift > 1e-12:
        raise InvariantError(f"bookkeeping identity violated at t={state.t}: drift {drift:g}")
    if not np.isfinite(state.global_x).all():
        raise InvariantError(f"non-finite global parameter at t={state.t}")
    if state.history is not None:
        state.history.appendleft(state.global_x.copy())
    ctx.scheme.post_update(state, ctx, report)
    if state.gradient_log is not None:
        raws = {int(i): report.raw[i].copy() for i in report.generated} if report.raw is not None else {
            int(report.acting): report.raw_acting.copy()
        }
        state.gradient_log.append((state.t, list(report.credited), raws))
    state.t += 1
    return report


def consistency_gap(state: SimState, i: int) -> float:
    """||x_t - v_t^i||^2 against the bookkeeping global parameter."""
    diff = state.global_x - state.workers[i].view
    return float(diff @ diff)


def run_trial(config: RunConfig, objective: Objective) -> RunMetrics:
    """Run one seeded trial end to end and pack its per-iteration records."""
    state = init_run(config, objective)
    ctx = state.ctx
    T = config.T
    p = config.p
    x_star = objective.x_star
    parallel = ctx.mode == PARALLEL

    f_vals = np.empty(T + 1)
    grad2 = np.empty(T + 1)
    gaps = np.full((T + 1, p), np.nan)
    i_sizes = np.zeros(T + 1, dtype=np.int64)
    dist2 = np.full(T + 1, np.nan)
    max_exc = 0.0
    exc_center = x_star if x_star is not None else np.zeros(objective.d)

    for t in range(T):
        x = state.global_x
        f_vals[t] = objective.value(x)
        fg = objective.full_gradient(x)
        grad2[t] = fg @ fg
        e = x - exc_center
        exc2 = float(e @ e)
        max_exc = max(max_exc, exc2)
        if x_star is not None:
            dist2[t] = exc2
        if parallel:
            diffs = x - state.views_mat
            row = np.einsum("ij,ij->i", diffs, diffs)
            alive = np.fromiter((w.alive for w in state.workers), dtype=bool, count=p)
            gaps[t, alive] = row[alive]
            report = step(state)
        else:
            report = step(state)
            # The acting view was assembled inside the step; measure it against
            # the pre-update x, which step() already consumed, so recompute from
            # the report's stored pre-step gap.
            gaps[t, report.acting] = report.acting_gap2
        i_sizes[t] = len(report.credited)

    x = state.global_x
    f_vals[T] = objective.value(x)
    fg = objective.full_gradient(x)
    grad2[T] = fg @ fg
    e = x - exc_center
    exc2 = float(e @ e)
    max_exc = max(max_exc, exc2)
    if x_star is not None:
        dist2[T] = exc2
    if parallel:
        diffs = x - state.views_mat
        row = np.einsum("ij,ij->i", diffs, diffs)
        alive = np.fromiter((w.alive for w in state.workers), dtype=bool, count=p)
        gaps[T, alive] = row[alive]
    i_sizes[T] = 0

    # rows with no recorded view (single-step non-actors, the final record)
    # aggregate to 0.0; nan-reductions would warn on them
    have = np.isfinite(gaps).any(axis=1)
    gmin = np.zeros(T + 1)
    gmean = np.zeros(T + 1)
    gmax = np.zeros(T + 1)
    if have.any():
        sub = gaps[have]
        gmin[have] = np.nanmin(sub, axis=1)
        gmean[have] = np.nanmean(sub, axis=1)
        gmax[have] = np.nanmax(sub, axis=1)

    return RunMetrics(
        trial=config.trial,
        alpha=ctx.alpha,
        p=p,
        T=T,
        scheme=ctx.scheme.name,
        mode=ctx.mode,
        f_value=f_vals,
        grad_norm2=grad2,
        gap2=gaps if config.keep_gap_matrix else None,
        gap2_min=gmin,
        gap2_mean=gmean,
        gap2_max=gmax,
        i_size=i_sizes,
        dist2_to_opt=dist2,
        final_x=state.global_x.copy(),
        max_excursion=math.sqrt(max_exc),
        schedule_log=state.schedule_log,
        sample_log=state.sample_log,
        gradient_log=state.gradient_log,
    )


@dataclass(frozen=True)
class EmpiricalB:
    value: float
    se: float  # delta-method standard error on the B estimate
    t: int
    worker: int
    mean_gap2: float
    se_mean_gap2: float  # standard error of the mean gap^2 at the argmax cell


def empirical_B_detail(runs: list[RunMetrics], alpha: float) -> EmpiricalB:
    """Monte-Carlo estimate of the consistency constant with its argmax cell.

    B = sqrt(max over (t, i) of mean-over-runs gap2(t, i)) / alpha.  Cells
    where no run held a view (all NaN) are skipped; dead-worker entries do not
    contribute because a dead worker's view no longer feeds any update.
    """
    if not runs:
        raise ValueError("empirical_B needs at least one run")
    if any(r.gap2 is None for r in runs):
        raise ValueError("empirical_B needs runs recorded with keep_gap_matrix")
    stack = np.stack([r.gap2 for r in runs])  # (n, T+1, p)
    counts = np.sum(~np.isnan(stack), axis=0)
    sums = np.nansum(stack, axis=0)
    flat = np.where(counts > 0, sums / np.maximum(counts, 1), -1.0)
    idx = int(np.argmax(flat))
    t, i = divmod(idx, flat.shape[1])
    peak = float(flat[t, i])
    if peak <= 0.0:
        return EmpiricalB(value=0.0, se=0.0, t=0, worker=0, mean_gap2=0.0, se_mean_gap2=0.0)
    vals = stack[:, t, i]
    vals = vals[~np.isnan(vals)]
    n = len(vals)
    se_mean = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    b = math.sqrt(peak) / alpha
    se_b = se_mean / (2.0 * alpha * alpha * b) if b > 0 else 0.0
    return EmpiricalB(
        value=b, se=se_b, t=int(t), worker=int(i), mean_gap2=peak, se_mean_gap2=se_mean
    )


def empirical_B(runs: list[RunMetrics], alpha: float) -> float:
    return empirical_B_detail(runs, alpha).value
