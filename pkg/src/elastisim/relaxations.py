"""Distribution schemes: who sees which gradients, and when.

Each scheme owns the inter-iteration message flow between workers.  Once per
iteration the kernel hands it the simulation state; the scheme generates
gradients at the current views, decides deliveries, updates the views, and
reports which gradients the global bookkeeping parameter credits.

Two conventions keep everything reproducible:

* Aggregation.  Every view update stacks its delivered rows in
  (origin iteration, sender id) order and folds them with one
  ``np.add.reduce``.  The same multiset of messages therefore always
  produces bit-identical arithmetic, which is what lets the degenerate
  parameterizations (zero fault budget, zero delay bound, identity
  compressor, zero lateness probability) reproduce the exact scheme
  bit for bit.

* Obliviousness.  Randomized schedule decisions come from purpose-tagged
  substreams of the schedule seed, drawn in a fixed data-independent
  layout.  They never see gradient values or sample indices, so swapping
  the data seed cannot move a crash, a withheld message, or a staleness
  draw.

The lateness layout (per iteration: receivers ascending, senders ascending,
sender != receiver) is shared by the omission, elastic_var and elastic_norm
schemes.  Matched probabilities on the shared 'late' substream then yield
matched coin flips, which is what makes the norm-threshold scheme at
beta = 0 coincide exactly with omission under budget p-1 and unit delay.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from typing import TYPE_CHECKING

import numpy as np

from .compression import Compressor, parse_compressor
from .errors import ConfigError, InvariantError

if TYPE_CHECKING:
    from .kernel import SimState, StepContext
    from .objectives import Objective

__all__ = [
    "SCHEME_NAMES",
    "RelaxationConfig",
    "StepReport",
    "Scheme",
    "build_scheme",
    "plan_from_file",
    "plan_from_events",
]

SINGLE = "single_step"
PARALLEL = "parallel_step"

SCHEME_NAMES = (
    "exact",
    "crash_m2",
    "crash_var",
    "omission",
    "async_mp",
    "shared_mem",
    "compress_ef",
    "elastic_var",
    "elastic_norm",
    "adversarial",
)

PLAN_KINDS = ("crash", "omit", "delay")


@dataclass
class RelaxationConfig:
    """Scheme selector plus every scheme knob; unused knobs stay at defaults."""

    scheme: str
    f: int = 0
    tau_max: int = 0
    compressor: str = "identity"
    beta: float = 0.0
    require_full: bool = False
    b_adv: float = 0.0
    late_prob: float = 0.0
    omit_prob: float = 0.0
    release_prob: float = 1.0
    drop_prob: float = 0.0
    plan: tuple = ()

    @classmethod
    def from_dict(cls, spec: dict) -> "RelaxationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(spec) - known
        if unknown:
            raise ConfigError(f"unknown scheme options: {sorted(unknown)}")
        if "scheme" not in spec:
            raise ConfigError("scheme name is required")
        cfg = cls(**spec)
        if isinstance(cfg.plan, list):
            cfg.plan = plan_from_events(cfg.plan)
        return cfg

    def to_dict(self) -> dict:
        out = {}
        for f_ in fields(self):
            v = getattr(self, f_.name)
            if f_.name == "plan":
                v = [dict(ev) for ev in v]
            out[f_.name] = v
        return out


def _check_event(ev: dict) -> dict:
    if not isinstance(ev, dict):
        raise ConfigError("plan events must be objects")
    kind = ev.get("kind")
    if kind not in PLAN_KINDS:
        raise ConfigError(f"unknown plan event kind {kind!r}")
    t = ev.get("t")
    if not isinstance(t, int) or t < 0:
        raise ConfigError("plan event needs an integer t >= 0")
    node = ev.get("node")
    if not isinstance(node, int) or node < 0:
        raise ConfigError("plan event needs an integer node >= 0")
    out = {"kind": kind, "t": t, "node": node}
    if kind == "crash":
        targets = ev.get("targets", [])
        if not isinstance(targets, (list, tuple)) or not all(isinstance(x, int) for x in targets):
            raise ConfigError("crash event targets must be a list of node ids")
        out["targets"] = tuple(sorted(targets))
    else:
        targets = ev.get("targets")
        if not isinstance(targets, (list, tuple)) or not targets:
            raise ConfigError(f"{kind} event needs a nonempty targets list of receivers")
        out["targets"] = tuple(sorted(int(x) for x in targets))
        delay = ev.get("delay", None)
        if kind == "delay":
            if not isinstance(delay, int) or delay < 0:
                raise ConfigError("delay event needs an integer delay >= 0")
        elif delay is not None and (not isinstance(delay, int) or delay < 1):
            raise ConfigError("omit event delay must be an integer >= 1, or null for a drop")
        out["delay"] = delay
    return out


def plan_from_events(events: list) -> tuple:
    """Normalize a list of raw event dicts into a validated plan tuple."""
    return tuple(_check_event(ev) for ev in events)


def plan_from_file(path: str) -> tuple:
    """Load a schedule plan from a JSON file holding a list of events."""
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ConfigError("a plan file must hold a JSON list of events")
    return plan_from_events(data)


@dataclass
class StepReport:
    """What one advance did, in the terms the kernel needs for bookkeeping."""

    credited: np.ndarray
    generated: list
    scaled: np.ndarray | None = None
    raw: np.ndarray | None = None
    acting: int = -1
    acting_gap2: float = float("nan")
    scaled_acting: np.ndarray | None = None
    raw_acting: np.ndarray | None = None


def _reduce(rows: list[np.ndarray]) -> np.ndarray:
    return np.add.reduce(np.stack(rows), axis=0)


def _generate(state: "SimState", ctx: "StepContext", ids: np.ndarray):
    """Scaled-at-generation gradients for the given (ascending) worker ids.

    Rows land in full (p, d) matrices so credited-id indexing works no matter
    who is alive; dead rows stay zero and are never referenced.
    """
    t = state.t
    idx = ctx.idx_table[ids, t]
    raw_rows = ctx.objective.sample_gradient_batch(idx, state.views_mat[ids])
    raw = np.zeros((ctx.p, ctx.d))
    scaled = np.zeros((ctx.p, ctx.d))
    raw[ids] = raw_rows
    scaled[ids] = ctx.alpha * raw_rows
    state.log_samples(ids, idx)
    return raw, scaled


def _draw_late_flags(ctx: "StepContext", prob: float) -> np.ndarray:
    """One Bernoulli(prob) flag per ordered (receiver, sender) pair.

    The flat draw order is receiver-major with both indices ascending, and
    the uniforms come from the shared 'late' substream.  Boolean-mask
    assignment fills True positions in row-major order, which matches that
    draw order exactly.
    """
    p = ctx.p
    u = ctx.sched_stream("late").random(p * (p - 1))
    flags = np.zeros((p, p), dtype=bool)
    flags[~np.eye(p, dtype=bool)] = u < prob
    return flags


def _offdiag_senders(p: int) -> np.ndarray:
    """Row i lists the p-1 sender ids other than i, ascending."""
    base = np.broadcast_to(np.arange(p), (p, p))
    return base[~np.eye(p, dtype=bool)].reshape(p, p - 1)


def _delivered_totals(prior_lists: list, scaled: np.ndarray, fresh: np.ndarray) -> np.ndarray:
    """Per-receiver sums of the rows consumed this iteration.

    ``fresh`` is the (p, p) receive mask for this round's rows; carried-over
    rows come first in each receiver's fold, already in (origin, sender)
    order.  Both queue-style schemes share this helper so equal traffic gives
    bitwise equal arithmetic.
    """
    totals = fresh.astype(np.float64) @ scaled
    for i, prior in enumerate(prior_lists):
        if prior:
            totals[i] = np.add.reduce(np.stack(prior), axis=0) + totals[i]
    return totals


class Scheme:
    """Base class: mode support flags plus the three kernel entry points."""

    name = "base"
    modes: tuple = (PARALLEL,)
    default_mode = PARALLEL
    needs_history = 0
    needs_error_acc = False

    def __init__(self, cfg: RelaxationConfig):
        self.cfg = cfg

    def validate(self, config, objective: "Objective", alpha: float) -> None:
        cfg = self.cfg
        for prob_name in ("late_prob", "omit_prob", "release_prob", "drop_prob"):
            v = getattr(cfg, prob_name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{prob_name} must lie in [0, 1], got {v}")
        if cfg.f < 0:
            raise ConfigError("fault budget f must be >= 0")
        if cfg.tau_max < 0:
            raise ConfigError("tau_max must be >= 0")
        if cfg.beta < 0.0:
            raise ConfigError("beta must be >= 0")
        if cfg.b_adv < 0.0:
            raise ConfigError("b_adv must be >= 0")
        for ev in cfg.plan:
            if ev["t"] >= config.T:
                raise ConfigError(f"plan event at t={ev['t']} beyond horizon T={config.T}")
            if ev["node"] >= config.p:
                raise ConfigError(f"plan event node {ev['node']} out of range for p={config.p}")

    def setup(self, state: "SimState", ctx: "StepContext") -> None:
        pass

    def advance(self, state: "SimState", ctx: "StepContext") -> StepReport:
        raise NotImplementedError

    def post_update(self, state: "SimState", ctx: "StepContext", report: StepReport) -> None:
        pass


def _uniform_update(state: "SimState", ctx: "StepContext", scaled: np.ndarray, ids: np.ndarray):
    """Everyone receives every generated row: one gather, applied to all."""
    gather = np.add.reduce(scaled[ids], axis=0)
    state.views_mat[ids] -= gather / ctx.p


class ExactScheme(Scheme):
    """Fault-free lockstep baseline; every view equals the global parameter."""

    name = "exact"
    modes = (SINGLE, PARALLEL)
    default_mode = PARALLEL

    def advance(self, state, ctx):
        if ctx.mode == PARALLEL:
            ids = np.arange(ctx.p)
            raw, scaled = _generate(state, ctx, ids)
            _uniform_update(state, ctx, scaled, ids)
            return StepReport(credited=ids, generated=list(ids), scaled=scaled, raw=raw)
        from .kernel import _next_round_robin

        i = _next_round_robin(state)
        t = state.t
        np.copyto(state.views_mat[i], state.global_x)
        idx = int(ctx.idx_table[i, t])
        raw_g = ctx.objective.sample_gradient(idx, state.views_mat[i])
        state.log_samples([i], [idx])
        return StepReport(
            credited=np.array([i]),
            generated=[i],
            acting=i,
            acting_gap2=0.0,
            scaled_acting=ctx.alpha * raw_g,
            raw_acting=raw_g,
        )

    def post_update(self, state, ctx, report):
        if ctx.mode == SINGLE:
            state.views_mat[:] = state.global_x


class _CrashBase(Scheme):
    """Fail-stop workers whose last broadcast reaches a random subset.

    A crashing worker still generates its gradient; the gradient is credited
    whenever at least one survivor receives it.  Survivors that miss the
    final message either live with the hole (second-moment variant) or
    substitute their own gradient in its slot (variance variant).
    """

    substitute = False

    def validate(self, config, objective, alpha):
        super().validate(config, objective, alpha)
        cfg = self.cfg
        limit = config.p // 2
        if cfg.f > limit:
            raise ConfigError(
                f"crash budget f={cfg.f} too large for p={config.p}: "
                f"participant sets need at least ceil(p/2) survivors (f <= {limit})"
            )
        if cfg.f > config.T:
            raise ConfigError("crash budget f cannot exceed the horizon T")
        n_planned = sum(1 for ev in cfg.plan if ev["kind"] == "crash")
        if any(ev["kind"] != "crash" for ev in cfg.plan):
            raise ConfigError("crash schemes accept only crash plan events")
        if n_planned > cfg.f:
            raise ConfigError(f"plan schedules {n_planned} crashes but the budget is f={cfg.f}")

    def setup(self, state, ctx):
        cfg = self.cfg
        plan: dict[int, list] = {}
        if cfg.plan:
            for ev in cfg.plan:
                plan.setdefault(ev["t"], []).append((ev["node"], ev["targets"]))
        elif cfg.f > 0:
            rng = ctx.sched_stream("crash")
            times = np.sort(rng.choice(ctx.config.T, size=cfg.f, replace=False))
            victims = rng.choice(ctx.p, size=cfg.f, replace=False)
            for t, v in zip(times, victims):
                plan.setdefault(int(t), []).append((int(v), None))
        state.scheme_data["crash_plan"] = plan

    def advance(self, state, ctx):
        t = state.t
        workers = state.workers
        alive_ids = np.array([w.wid for w in workers if w.alive])
        raw, scaled = _generate(state, ctx, alive_ids)
        events = state.scheme_data["crash_plan"].get(t, [])

        if not events:
            _uniform_update(state, ctx, scaled, alive_ids)
            return StepReport(credited=alive_ids, generated=list(alive_ids), scaled=scaled, raw=raw)

        victims = sorted(events)
        victim_ids = {node for node, _ in victims}
        for node, _ in victims:
            if not workers[node].alive:
                raise InvariantError(f"planned crash of dead node {node} at t={t}")
        survivors = [int(i) for i in alive_ids if i not in victim_ids]
        if not survivors:
            raise InvariantError(f"crash schedule leaves no survivors at t={t}")

        reach_map: dict[int, set] = {}
        for node, reach in victims:
            pool = np.array(survivors)
            if reach is None:
                rng = ctx.sched_stream("crash")
                mask = rng.random(len(pool)) < 0.5
                chosen = pool[mask]
                if self.substitute and len(chosen) == 0:
                    # The substitution ledger only balances when the lost
                    # gradient is credited somewhere, so force one receiver.
                    chosen = pool[[int(rng.integers(len(pool)))]]
                reach_map[node] = {int(x) for x in chosen}
            else:
                bad = set(reach) - set(survivors)
                if bad:
                    raise InvariantError(
                        f"planned reach {sorted(bad)} for crash of {node} at t={t} "
                        f"is not inside the survivor set"
                    )
                reach_map[node] = set(reach)
            workers[node].alive = False
            state.crash_count += 1
            if state.crash_count > self.cfg.f:
                raise InvariantError(f"crash count exceeded budget f={self.cfg.f} at t={t}")
            state.log_event("crash", t, node, tuple(sorted(reach_map[node])))

        gen_ids = [int(i) for i in alive_ids]
        credited = [i for i in gen_ids if i not in victim_ids or reach_map[i]]
        for i in survivors:
            w = workers[i]
            w.last_substitutions = []
            rows = []
            for j in gen_ids:
                if j not in victim_ids or i in reach_map[j]:
                    rows.append(scaled[j])
                elif self.substitute:
                    rows.append(scaled[i])
                    w.subs_count += 1
                    w.last_substitutions.append((j, t))
            state.views_mat[i] -= _reduce(rows) / ctx.p
        return StepReport(
            credited=np.array(credited), generated=gen_ids, scaled=scaled, raw=raw
        )


class CrashM2Scheme(_CrashBase):
    name = "crash_m2"
    substitute = False


class CrashVarScheme(_CrashBase):
    name = "crash_var"
    substitute = True


class OmissionScheme(Scheme):
    """Message withholding under a per-receiver budget of f missing messages.

    A withheld message's fate is fixed the moment it is withheld: dropped
    forever with probability drop_prob, otherwise released after a geometric
    number of iterations.  Dropped messages keep consuming the receiver's
    budget, which is what keeps the view's hole count below f for good.
    """

    name = "omission"

    def validate(self, config, objective, alpha):
        super().validate(config, objective, alpha)
        if any(ev["kind"] != "omit" for ev in self.cfg.plan):
            raise ConfigError("the omission scheme accepts only omit plan events")

    def setup(self, state, ctx):
        plan: dict[int, list] = {}
        for ev in self.cfg.plan:
            plan.setdefault(ev["t"], []).append(ev)
        for evs in plan.values():
            evs.sort(key=lambda e: e["node"])
        state.scheme_data["omit_plan"] = plan
        state.scheme_data["dropped"] = [0] * ctx.p

    def advance(self, state, ctx):
        cfg = self.cfg
        t = state.t
        p = ctx.p
        workers = state.workers
        ids = np.arange(p)
        raw, scaled = _generate(state, ctx, ids)
        dropped = state.scheme_data["dropped"]
        logging = state.config.keep_event_logs

        released = [w.inbox.pop(t, None) for w in workers]
        any_pending = False
        for i, rel in enumerate(released):
            if rel is not None:
                workers[i].pending_count -= len(rel)
                any_pending = True
            elif workers[i].pending_count:
                any_pending = True

        withheld_now = np.zeros((p, p), dtype=bool)
        planned = state.scheme_data["omit_plan"].get(t, [])
        drawing = not cfg.plan and cfg.omit_prob > 0.0 and cfg.f > 0
        if drawing:
            flags = _draw_late_flags(ctx, cfg.omit_prob)
            fate = None
            for i in range(p):
                w = workers[i]
                js = np.flatnonzero(flags[i])
                room = cfg.f - w.pending_count - dropped[i]
                # budget full means the tail of flagged messages goes through
                for j in js[: max(room, 0)]:
                    j = int(j)
                    withheld_now[i, j] = True
                    is_drop = False
                    if cfg.drop_prob > 0.0:
                        if fate is None:
                            fate = ctx.sched_stream("fate")
                        is_drop = fate.random() < cfg.drop_prob
                    if is_drop:
                        dropped[i] += 1
                        if logging:
                            state.log_event("drop", t, i, j)
                    else:
                        if cfg.release_prob >= 1.0:
                            k = 1
                        else:
                            if fate is None:
                                fate = ctx.sched_stream("fate")
                            k = int(fate.geometric(cfg.release_prob))
                        w.inbox.setdefault(t + k, []).append((t, j, scaled[j]))
                        w.pending_count += 1
                        if logging:
                            state.log_event("omit", t, i, j, k)
        for ev in planned:
            j = ev["node"]
            for i in ev["targets"]:
                if i == j or i >= p:
                    raise InvariantError(f"omit event at t={t} has bad receiver {i}")
                w = workers[i]
                if w.pending_count + dropped[i] >= cfg.f:
                    raise InvariantError(
                        f"planned omission at t={t} overflows receiver {i}'s budget f={cfg.f}"
                    )
                withheld_now[i, j] = True
                if ev["delay"] is None:
                    dropped[i] += 1
                    if logging:
                        state.log_event("drop", t, i, j)
                else:
                    w.inbox.setdefault(t + ev["delay"], []).append((t, j, scaled[j]))
                    w.pending_count += 1
                    if logging:
                        state.log_event("omit", t, i, j, ev["delay"])

        if not any_pending and not withheld_now.any():
            _uniform_update(state, ctx, scaled, ids)
        else:
            priors = [[m[2] for m in rel] if rel else [] for rel in released]
            state.views_mat -= _delivered_totals(priors, scaled, ~withheld_now) / p

        max_pending = max(w.pending_count for w in workers)
        state.in_flight_omitted = max(state.in_flight_omitted, max_pending)
        for i in range(p):
            if workers[i].pending_count + dropped[i] > cfg.f:
                raise InvariantError(
                    f"receiver {i} holds {workers[i].pending_count} pending plus "
                    f"{dropped[i]} dropped messages, over budget f={cfg.f}"
                )
        return StepReport(credited=ids, generated=list(ids), scaled=scaled, raw=raw)


class AsyncMPScheme(Scheme):
    """Message passing with per-message uniform delays, all bounded by tau_max."""

    name = "async_mp"

    def validate(self, config, objective, alpha):
        super().validate(config, objective, alpha)
        for ev in self.cfg.plan:
            if ev["kind"] != "delay":
                raise ConfigError("async_mp accepts only delay plan events")
            if ev["delay"] > self.cfg.tau_max:
                raise ConfigError(
                    f"planned delay {ev['delay']} exceeds tau_max={self.cfg.tau_max}"
                )

    def setup(self, state, ctx):
        plan: dict[int, list] = {}
        for ev in self.cfg.plan:
            plan.setdefault(ev["t"], []).append(ev)
        for evs in plan.values():
            evs.sort(key=lambda e: e["node"])
        state.scheme_data["delay_plan"] = plan
        state.scheme_data["senders"] = _offdiag_senders(ctx.p)

    def advance(self, state, ctx):
        cfg = self.cfg
        t = state.t
        p = ctx.p
        workers = state.workers
        ids = np.arange(p)
        raw, scaled = _generate(state, ctx, ids)
        logging = state.config.keep_event_logs

        # Inbox slots hold [message count, running row sum]; the running sum
        # accumulates in arrival order, which matches the canonical
        # (origin, sender) fold because sends happen in exactly that order.
        released = [w.inbox.pop(t, None) for w in workers]
        any_traffic = False
        for i, rel in enumerate(released):
            if rel is not None:
                workers[i].pending_count -= rel[0]
                any_traffic = True

        delayed_now = np.zeros((p, p), dtype=bool)

        def send(w, due, j):
            slot = w.inbox.get(due)
            if slot is None:
                w.inbox[due] = [1, scaled[j].copy()]
            else:
                slot[0] += 1
                slot[1] += scaled[j]
            w.pending_count += 1

        if cfg.plan:
            for ev in state.scheme_data["delay_plan"].get(t, []):
                j = ev["node"]
                k = ev["delay"]
                if k == 0:
                    continue
                for i in ev["targets"]:
                    if i == j or i >= p:
                        raise InvariantError(f"delay event at t={t} has bad receiver {i}")
                    delayed_now[i, j] = True
                    send(workers[i], t + k, j)
                    if logging:
                        state.log_event("delay", t, i, j, k)
        elif cfg.tau_max > 0:
            draws = ctx.sched_stream("delay").integers(0, cfg.tau_max + 1, size=p * (p - 1))
            ks = draws.reshape(p, p - 1)
            senders = state.scheme_data["senders"]
            for i in range(p):
                w = workers[i]
                for n in np.flatnonzero(ks[i]):
                    j = int(senders[i, n])
                    k = int(ks[i, n])
                    delayed_now[i, j] = True
                    send(w, t + k, j)
                    if logging:
                        state.log_event("delay", t, i, j, k)

        if not any_traffic and not delayed_now.any():
            _uniform_update(state, ctx, scaled, ids)
        else:
            totals = (~delayed_now).astype(np.float64) @ scaled
            for i, rel in enumerate(released):
                if rel is not None:
                    totals[i] = rel[1] + totals[i]
            state.views_mat -= totals / p

        limit = (p - 1) * cfg.tau_max
        for w in workers:
            if w.pending_count > limit:
                raise InvariantError(
                    f"receiver {w.wid} backlog {w.pending_count} exceeds (p-1)*tau_max={limit}"
                )
        return StepReport(credited=ids, generated=list(ids), scaled=scaled, raw=raw)


class SharedMemScheme(Scheme):
    """Coordinate-wise stale reads from the recent iterate history."""

    name = "shared_mem"
    modes = (SINGLE,)
    default_mode = SINGLE

    def __init__(self, cfg):
        super().__init__(cfg)
        self.needs_history = cfg.tau_max

    def validate(self, config, objective, alpha):
        super().validate(config, objective, alpha)
        if self.cfg.plan:
            raise ConfigError("shared_mem does not take plan events")

    def advance(self, state, ctx):
        from .kernel import _next_round_robin

        i = _next_round_robin(state)
        t = state.t
        cap = min(t, self.cfg.tau_max)
        if cap > 0:
            tau_vec = ctx.sched_stream("stale").integers(0, cap + 1, size=ctx.d)
            hist = np.stack(list(state.history)[: cap + 1])
            view = hist[tau_vec, np.arange(ctx.d)]
            state.log_event("stale", t, i, tuple(int(x) for x in tau_vec))
        else:
            view = state.global_x.copy()
        state.views_mat[i] = view
        diff = state.global_x - view
        idx = int(ctx.idx_table[i, t])
        raw_g = ctx.objective.sample_gradient(idx, view)
        state.log_samples([i], [idx])
        return StepReport(
            credited=np.array([i]),
            generated=[i],
            acting=i,
            acting_gap2=float(diff @ diff),
            scaled_acting=ctx.alpha * raw_g,
            raw_acting=raw_g,
        )


class CompressEFScheme(Scheme):
    """All workers share one quantized iterate updated with compressed
    error-corrected payloads, while the bookkeeping parameter absorbs the
    true gradients."""

    name = "compress_ef"
    needs_error_acc = True

    def __init__(self, cfg):
        super().__init__(cfg)
        self.comp: Compressor | None = None

    def validate(self, config, objective, alpha):
        super().validate(config, objective, alpha)
        if self.cfg.plan:
            raise ConfigError("compress_ef does not take plan events")
        self.comp = parse_compressor(self.cfg.compressor, objective.d)

    def advance(self, state, ctx):
        p = ctx.p
        ids = np.arange(p)
        raw, scaled = _generate(state, ctx, ids)
        work = state.error_mat + scaled
        payloads = self.comp.compress_batch(work)
        state.error_mat[:] = work - payloads
        gather = np.add.reduce(payloads, axis=0)
        state.views_mat -= gather / p
        return StepReport(credited=ids, generated=list(ids), scaled=scaled, raw=raw)


class ElasticVarScheme(Scheme):
    """Late messages get the receiver's own gradient as a stand-in, repaired
    by an exact correction one iteration later."""

    name = "elastic_var"

    def validate(self, config, objective, alpha):
        super().validate(config, objective, alpha)
        if self.cfg.plan:
            raise ConfigError("elastic_var does not take plan events")

    def setup(self, state, ctx):
        state.scheme_data["pending_corr"] = [[] for _ in range(ctx.p)]

    def advance(self, state, ctx):
        cfg = self.cfg
        t = state.t
        p = ctx.p
        ids = np.arange(p)
        raw, scaled = _generate(state, ctx, ids)
        pending = state.scheme_data["pending_corr"]
        flags = _draw_late_flags(ctx, cfg.late_prob) if cfg.late_prob > 0.0 else None

        if flags is None and not any(pending):
            _uniform_update(state, ctx, scaled, ids)
            return StepReport(credited=ids, generated=list(ids), scaled=scaled, raw=raw)

        new_pending: list[list] = [[] for _ in range(p)]
        logging = state.config.keep_event_logs
        for w in state.workers:
            w.last_substitutions = []

        if flags is None:
            totals = np.broadcast_to(np.add.reduce(scaled, axis=0), (p, ctx.d)).copy()
        else:
            n_late = flags.sum(axis=1)
            totals = (~flags).astype(np.float64) @ scaled + n_late[:, None] * scaled
            r_idx, s_idx = np.nonzero(flags)
            if len(r_idx):
                diff_rows = scaled[s_idx] - scaled[r_idx]
                for n in range(len(r_idx)):
                    i = int(r_idx[n])
                    j = int(s_idx[n])
                    w = state.workers[i]
                    w.subs_count += 1
                    w.last_substitutions.append((j, t))
                    new_pending[i].append((t, j, diff_rows[n]))
                    if logging:
                        state.log_event("late", t, i, j)

        for i in range(p):
            w = state.workers[i]
            prior = [row for (_ot, _s, row) in pending[i]]
            w.corr_count += len(prior)
            if prior:
                totals[i] = np.add.reduce(np.stack(prior), axis=0) + totals[i]
            w.outstanding = w.subs_count - w.corr_count
            if w.outstanding != len(new_pending[i]):
                raise InvariantError(
                    f"substitution ledger off for worker {i} at t={t}: "
                    f"{w.outstanding} outstanding vs {len(new_pending[i])} queued"
                )
        state.views_mat -= totals / p
        state.scheme_data["pending_corr"] = new_pending
        return StepReport(credited=ids, generated=list(ids), scaled=scaled, raw=raw)


class ElasticNormScheme(Scheme):
    """Proceed once the on-time peer mass clears a norm threshold, pulling in
    late senders lowest-id first when it does not; leftovers land next
    iteration."""

    name = "elastic_norm"

    def validate(self, config, objective, alpha):
        super().validate(config, objective, alpha)
        if self.cfg.plan:
            raise ConfigError("elastic_norm does not take plan events")

    def setup(self, state, ctx):
        state.scheme_data["carryover"] = [[] for _ in range(ctx.p)]

    def advance(self, state, ctx):
        cfg = self.cfg
        t = state.t
        p = ctx.p
        ids = np.arange(p)
        raw, scaled = _generate(state, ctx, ids)
        carry = state.scheme_data["carryover"]
        draw = not cfg.require_full and cfg.late_prob > 0.0
        flags = _draw_late_flags(ctx, cfg.late_prob) if draw else None

        if flags is None and not any(carry):
            _uniform_update(state, ctx, scaled, ids)
            return StepReport(credited=ids, generated=list(ids), scaled=scaled, raw=raw)

        beta2 = cfg.beta * cfg.beta
        new_carry: list[list] = [[] for _ in range(p)]
        logging = state.config.keep_event_logs
        fresh = np.ones((p, p), dtype=bool)
        priors = [[row for (_ot, _s, row) in carry[i]] for i in range(p)]
        for i in range(p):
            if flags is None:
                late = []
                n_ontime = p - 1
            else:
                late = [int(j) for j in np.flatnonzero(flags[i])]
                n_ontime = p - 1 - len(late)
            pulled = 0
            if late and beta2 > 0.0:
                own = scaled[i]
                need = beta2 * float(own @ own)
                if n_ontime:
                    ontime_mask = ~flags[i]
                    ontime_mask[i] = False
                    recv = np.add.reduce(scaled[ontime_mask], axis=0)
                else:
                    recv = np.zeros(ctx.d)
                while float(recv @ recv) < need and late:
                    j = late.pop(0)
                    pulled += 1
                    recv = recv + scaled[j]
            if late:
                fresh[i, late] = False
                for j in late:
                    new_carry[i].append((t, j, scaled[j]))
            if logging:
                state.log_event("proceed", t, i, n_ontime, pulled)
        state.views_mat -= _delivered_totals(priors, scaled, fresh) / p
        state.scheme_data["carryover"] = new_carry
        return StepReport(credited=ids, generated=list(ids), scaled=scaled, raw=raw)


class AdversarialScheme(Scheme):
    """Worst-case view perturbation of magnitude alpha*B along the first axis,
    always pushing the next iterate away from the optimum."""

    name = "adversarial"
    modes = (SINGLE,)
    default_mode = SINGLE

    def validate(self, config, objective, alpha):
        super().validate(config, objective, alpha)
        if config.p != 1:
            raise ConfigError("the adversarial scheme runs with a single worker")
        if objective.m != 1:
            raise ConfigError("the adversarial scheme needs a single-sample objective")
        if objective.x_star is None:
            raise ConfigError("the adversarial scheme needs a known optimum")
        if self.cfg.plan:
            raise ConfigError("adversarial does not take plan events")

    def advance(self, state, ctx):
        from .kernel import _next_round_robin

        i = _next_round_robin(state)
        t = state.t
        x = state.global_x
        b = self.cfg.b_adv
        idx = int(ctx.idx_table[i, t])
        if b == 0.0:
            view = x.copy()
            raw_g = ctx.objective.sample_gradient(idx, view)
        else:
            x_star = ctx.objective.x_star
            shift = np.zeros(ctx.d)
            shift[0] = ctx.alpha * b
            best = None
            for sign in (1.0, -1.0):
                cand = x + sign * shift
                g = ctx.objective.sample_gradient(idx, cand)
                nxt = x - ctx.alpha * g
                e = nxt - x_star
                score = float(e @ e)
                # strict comparison keeps the positive direction on ties
                if best is None or score > best[0]:
                    best = (score, cand, g, sign)
            _, view, raw_g, sign = best
            state.log_event("adv", t, i, sign)
        state.views_mat[i] = view
        state.log_samples([i], [idx])
        diff = view - x
        return StepReport(
            credited=np.array([i]),
            generated=[i],
            acting=i,
            acting_gap2=float(diff @ diff),
            scaled_acting=ctx.alpha * raw_g,
            raw_acting=raw_g,
        )


_REGISTRY = {
    cls.name: cls
    for cls in (
        ExactScheme,
        CrashM2Scheme,
        CrashVarScheme,
        OmissionScheme,
        AsyncMPScheme,
        SharedMemScheme,
        CompressEFScheme,
        ElasticVarScheme,
        ElasticNormScheme,
        AdversarialScheme,
    )
}

assert set(_REGISTRY) == set(SCHEME_NAMES)


def build_scheme(cfg: RelaxationConfig) -> Scheme:
    if isinstance(cfg, dict):
        cfg = RelaxationConfig.from_dict(cfg)
    cls = _REGISTRY.get(cfg.scheme)
    if cls is None:
        raise ConfigError(f"unknown scheme {cfg.scheme!r} (expected one of {SCHEME_NAMES})")
    return cls(cfg)
