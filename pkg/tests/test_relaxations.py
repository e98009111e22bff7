import numpy as np
import pytest

from elastisim.errors import ConfigError, InvariantError
from elastisim.kernel import SINGLE, RunConfig, init_run, run_trial, step
from elastisim.objectives import QuadraticObjective, make_quadratic
from elastisim.relaxations import (
    SCHEME_NAMES,
    RelaxationConfig,
    build_scheme,
    plan_from_events,
)


def line_objective():
    """m = 1, A = I, target (2, 0): every gradient is just x - (2, 0).

    All trace numbers below stay dyadic, so the asserts can be exact.
    """
    return QuadraticObjective(
        A=np.eye(2),
        b=np.array([[2.0, 0.0]]),
        eigs=np.array([1.0, 1.0]),
        seed=0,
        spread=0.0,
        center=0.0,
    )


def run_cfg(scheme_kw, p=2, T=2, alpha=0.5, mode=None, **cfg_kw):
    return RunConfig(p=p, T=T, alpha=alpha, scheme=scheme_kw, mode=mode,
                     seed_data=1, seed_sched=2, **cfg_kw)


# -- registry and config ------------------------------------------------------


def test_registry_covers_all_schemes():
    assert SCHEME_NAMES == (
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
    for name in SCHEME_NAMES:
        assert build_scheme({"scheme": name}).name == name


def test_unknown_scheme_and_keys_rejected():
    with pytest.raises(ConfigError):
        build_scheme({"scheme": "gossip"})
    with pytest.raises(ConfigError):
        RelaxationConfig.from_dict({"scheme": "exact", "tau": 3})


def test_config_round_trip():
    cfg = RelaxationConfig.from_dict(
        {"scheme": "omission", "f": 2, "omit_prob": 0.25, "release_prob": 0.5}
    )
    again = RelaxationConfig.from_dict(cfg.to_dict())
    assert again == cfg


@pytest.mark.parametrize(
    "ev",
    [
        {"kind": "vanish", "t": 0, "node": 0},
        {"kind": "crash", "t": -1, "node": 0},
        {"kind": "omit", "t": 0, "node": 0, "targets": []},
        {"kind": "omit", "t": 0, "node": 0, "targets": [1], "delay": 0},
        {"kind": "delay", "t": 0, "node": 0, "targets": [1], "delay": -1},
    ],
)
def test_bad_plan_events(ev):
    with pytest.raises(ConfigError):
        plan_from_events([ev])


# -- crash schemes -------------------------------------------------------------


def test_crash_m2_hand_trace():
    """p=3, crash node 2 at t=0 reaching only worker 0."""
    obj = line_objective()
    plan = [{"kind": "crash", "t": 0, "node": 2, "targets": [0]}]
    state = init_run(run_cfg({"scheme": "crash_m2", "f": 1, "plan": plan}, p=3, T=2), obj)

    rep = step(state)
    # all three were generating, so all three are credited
    assert sorted(int(i) for i in rep.credited) == [0, 1, 2]
    assert not state.workers[2].alive
    assert state.crash_count == 1
    # worker 0 heard everyone; worker 1 lost the victim's row
    assert np.array_equal(state.views_mat[0], np.array([1.0, 0.0]))
    assert np.array_equal(state.views_mat[1], np.array([2.0 / 3.0, 0.0]))
    assert np.array_equal(state.global_x, np.array([1.0, 0.0]))

    step(state)
    assert np.allclose(state.global_x, np.array([25.0 / 18.0, 0.0]), atol=1e-15)
    assert np.allclose(state.views_mat[0], state.global_x, atol=1e-15)


def test_crash_empty_reach_drops_credit():
    obj = line_objective()
    plan = [{"kind": "crash", "t": 0, "node": 2, "targets": []}]
    state = init_run(run_cfg({"scheme": "crash_m2", "f": 1, "plan": plan}, p=3, T=1), obj)
    rep = step(state)
    assert sorted(int(i) for i in rep.credited) == [0, 1]
    # x moved by the two survivors' gradients only
    assert np.array_equal(state.global_x, np.array([2.0 / 3.0, 0.0]))


def test_crash_var_substitutes_own_gradient():
    obj = line_objective()
    plan = [{"kind": "crash", "t": 1, "node": 2, "targets": [0]}]
    m2 = init_run(run_cfg({"scheme": "crash_m2", "f": 1, "plan": plan}, p=3, T=2,
                          keep_gradient_log=True), obj)
    var = init_run(run_cfg({"scheme": "crash_var", "f": 1, "plan": plan}, p=3, T=2), obj)
    for _ in range(2):
        step(m2)
        step(var)
    # the reached worker saw the true row in both schemes
    assert np.array_equal(m2.views_mat[0], var.views_mat[0])
    # the unreached worker substituted its own scaled gradient
    t, credited, raws = m2.gradient_log[1]
    expected = m2.views_mat[1] - 0.5 * raws[1] / 3.0
    assert np.allclose(var.views_mat[1], expected, atol=1e-15)
    assert var.workers[1].subs_count == 1
    assert var.workers[1].last_substitutions == [(2, 1)]
    assert var.workers[0].subs_count == 0


def test_crash_budget_validation():
    with pytest.raises(ConfigError):
        init_run(run_cfg({"scheme": "crash_m2", "f": 2}, p=3, T=10), line_objective())
    plan = [
        {"kind": "crash", "t": 0, "node": 0, "targets": []},
        {"kind": "crash", "t": 1, "node": 1, "targets": []},
    ]
    with pytest.raises(ConfigError):
        init_run(run_cfg({"scheme": "crash_m2", "f": 1, "plan": plan}, p=4, T=10), line_objective())


def test_crash_planned_reach_must_be_alive_survivors():
    obj = line_objective()
    plan = [{"kind": "crash", "t": 0, "node": 2, "targets": [2]}]
    state = init_run(run_cfg({"scheme": "crash_m2", "f": 1, "plan": plan}, p=3, T=1), obj)
    with pytest.raises(InvariantError):
        step(state)


def test_crash_random_mode_respects_budget():
    obj = make_quadratic(d=3, m=16, c=0.5, L=1.0, spread=1.0, seed=8)
    for trial in range(5):
        config = RunConfig(p=5, T=60, alpha=0.05, scheme={"scheme": "crash_m2", "f": 2},
                           seed_data=trial, seed_sched=trial, trial=trial)
        state = init_run(config, obj)
        for _ in range(60):
            step(state)
        assert state.crash_count <= 2
        assert sum(not w.alive for w in state.workers) == state.crash_count


# -- omission ------------------------------------------------------------------


def test_omission_hand_trace_delayed_release():
    """p=2, alpha=1/2: node 1's t=0 row reaches worker 0 at t=2."""
    obj = line_objective()
    plan = [{"kind": "omit", "t": 0, "node": 1, "targets": [0], "delay": 2}]
    state = init_run(run_cfg({"scheme": "omission", "f": 1, "plan": plan}, T=3), obj)

    step(state)
    assert np.array_equal(state.views_mat[0], np.array([0.5, 0.0]))
    assert np.array_equal(state.views_mat[1], np.array([1.0, 0.0]))
    assert np.array_equal(state.global_x, np.array([1.0, 0.0]))
    assert state.workers[0].pending_count == 1
    assert state.in_flight_omitted == 1

    step(state)
    assert np.array_equal(state.views_mat[0], np.array([1.125, 0.0]))
    assert np.array_equal(state.views_mat[1], np.array([1.625, 0.0]))

    step(state)
    # the released row catches worker 0 back up with everyone
    assert np.array_equal(state.views_mat[0], np.array([1.9375, 0.0]))
    assert np.array_equal(state.views_mat[1], np.array([1.9375, 0.0]))
    assert np.array_equal(state.global_x, np.array([1.9375, 0.0]))
    assert state.workers[0].pending_count == 0


def test_omission_permanent_drop_consumes_budget_forever():
    obj = line_objective()
    plan = [
        {"kind": "omit", "t": 0, "node": 1, "targets": [0], "delay": None},
        {"kind": "omit", "t": 5, "node": 1, "targets": [0], "delay": 1},
    ]
    state = init_run(run_cfg({"scheme": "omission", "f": 1, "plan": plan}, T=6), obj)
    for _ in range(5):
        step(state)
    with pytest.raises(InvariantError):
        step(state)


def test_omission_random_budget_never_exceeded():
    obj = make_quadratic(d=3, m=16, c=0.5, L=1.0, spread=1.0, seed=8)
    config = RunConfig(
        p=4, T=150, alpha=0.05,
        scheme={"scheme": "omission", "f": 2, "omit_prob": 1.0, "release_prob": 0.25,
                "drop_prob": 0.05},
        seed_data=3, seed_sched=4,
    )
    state = init_run(config, obj)
    dropped = state.scheme_data["dropped"]
    for _ in range(150):
        step(state)
        for w in state.workers:
            assert w.pending_count + dropped[w.wid] <= 2
    assert state.in_flight_omitted <= 2


def test_omission_trivial_budget_is_exact():
    obj = make_quadratic(d=3, m=16, c=0.5, L=1.0, spread=1.0, seed=8)
    a = run_trial(run_cfg({"scheme": "omission", "f": 0, "omit_prob": 0.7}, p=4, T=40, alpha=0.05), obj)
    b = run_trial(run_cfg({"scheme": "exact"}, p=4, T=40, alpha=0.05), obj)
    assert np.array_equal(a.final_x, b.final_x)


# -- asynchronous message passing ----------------------------------------------


def test_async_hand_trace():
    obj = line_objective()
    plan = [{"kind": "delay", "t": 0, "node": 1, "targets": [0], "delay": 1}]
    state = init_run(run_cfg({"scheme": "async_mp", "tau_max": 1, "plan": plan}, T=2), obj)

    step(state)
    assert np.array_equal(state.views_mat[0], np.array([0.5, 0.0]))
    assert np.array_equal(state.views_mat[1], np.array([1.0, 0.0]))

    step(state)
    # the one-step-late row arrives together with both fresh rows
    assert np.array_equal(state.views_mat[0], np.array([1.625, 0.0]))
    assert np.array_equal(state.views_mat[1], np.array([1.625, 0.0]))
    assert np.array_equal(state.global_x, np.array([1.625, 0.0]))


def test_async_zero_delay_plan_is_exact():
    obj = make_quadratic(d=3, m=16, c=0.5, L=1.0, spread=1.0, seed=8)
    plan = [{"kind": "delay", "t": 2, "node": 1, "targets": [0, 2], "delay": 0}]
    a = run_trial(run_cfg({"scheme": "async_mp", "tau_max": 3, "plan": plan}, p=4, T=30, alpha=0.05), obj)
    b = run_trial(run_cfg({"scheme": "exact"}, p=4, T=30, alpha=0.05), obj)
    assert np.array_equal(a.final_x, b.final_x)


def test_async_plan_delay_bounded_by_tau():
    plan = [{"kind": "delay", "t": 0, "node": 1, "targets": [0], "delay": 5}]
    with pytest.raises(ConfigError):
        init_run(run_cfg({"scheme": "async_mp", "tau_max": 2, "plan": plan}, T=5), line_objective())


def test_async_backlog_stays_bounded():
    obj = make_quadratic(d=3, m=16, c=0.5, L=1.0, spread=1.0, seed=8)
    config = RunConfig(p=4, T=120, alpha=0.05, scheme={"scheme": "async_mp", "tau_max": 3},
                       seed_data=5, seed_sched=6)
    state = init_run(config, obj)
    for _ in range(120):
        step(state)
        for w in state.workers:
            assert w.pending_count <= 3 * 3


# -- shared-memory stale reads ---------------------------------------------------


def test_shared_mem_views_come_from_recent_history():
    obj = make_quadratic(d=5, m=16, c=0.5, L=1.0, spread=1.0, seed=8)
    config = RunConfig(p=1, T=40, alpha=0.05, scheme={"scheme": "shared_mem", "tau_max": 2},
                       mode=SINGLE, seed_data=7, seed_sched=8)
    state = init_run(config, obj)
    for t in range(40):
        hist = np.stack(list(state.history))  # x_t, x_{t-1}, ...
        rep = step(state)
        view = state.views_mat[rep.acting]
        cap = min(t, 2)
        for k in range(5):
            assert any(view[k] == hist[s, k] for s in range(cap + 1)), (t, k)


def test_shared_mem_gap_zero_until_history_exists():
    obj = line_objective()
    config = RunConfig(p=1, T=3, alpha=0.5, scheme={"scheme": "shared_mem", "tau_max": 4},
                       mode=SINGLE, seed_data=1, seed_sched=2)
    m = run_trial(config, obj)
    assert m.gap2[0, 0] == 0.0  # t=0 has no past to be stale against


# -- compressed with error feedback ----------------------------------------------


def test_compress_ef_residual_identity():
    """v^q - x == mean residual, the error-feedback bookkeeping identity."""
    obj = make_quadratic(d=6, m=16, c=0.5, L=1.0, spread=1.0, seed=8)
    config = RunConfig(p=4, T=60, alpha=0.05,
                       scheme={"scheme": "compress_ef", "compressor": "topk:2"},
                       seed_data=9, seed_sched=10)
    state = init_run(config, obj)
    for _ in range(60):
        step(state)
        resid = state.error_mat.mean(axis=0)
        gap = state.views_mat[0] - state.global_x
        assert np.abs(gap - resid).max() <= 1e-12
    # all workers share the one quantized iterate
    assert np.array_equal(state.views_mat[0], state.views_mat[3])


def test_compress_ef_identity_compressor_is_exact():
    obj = make_quadratic(d=6, m=16, c=0.5, L=1.0, spread=1.0, seed=8)
    a = run_trial(run_cfg({"scheme": "compress_ef", "compressor": "identity"}, p=4, T=40, alpha=0.05), obj)
    b = run_trial(run_cfg({"scheme": "exact"}, p=4, T=40, alpha=0.05), obj)
    assert np.array_equal(a.final_x, b.final_x)


# -- elastic scheduling, variance style ------------------------------------------


def test_elastic_var_pending_correction_identity():
    """view - x == (sum of queued corrections) / p at every iteration."""
    obj = make_quadratic(d=4, m=16, c=0.5, L=1.0, spread=1.0, seed=8)
    config = RunConfig(p=4, T=80, alpha=0.05, scheme={"scheme": "elastic_var", "late_prob": 0.4},
                       seed_data=11, seed_sched=12)
    state = init_run(config, obj)
    for _ in range(80):
        step(state)
        pending = state.scheme_data["pending_corr"]
        for i in range(4):
            expect = np.zeros(4)
            for (_t, _j, row) in pending[i]:
                expect = expect + row
            gap = state.views_mat[i] - state.global_x
            assert np.abs(gap - expect / 4.0).max() <= 1e-12
            assert state.workers[i].outstanding == len(pending[i])


def test_elastic_var_counters_balance():
    obj = make_quadratic(d=4, m=16, c=0.5, L=1.0, spread=1.0, seed=8)
    config = RunConfig(p=3, T=50, alpha=0.05, scheme={"scheme": "elastic_var", "late_prob": 1.0},
                       seed_data=13, seed_sched=14)
    state = init_run(config, obj)
    for t in range(50):
        step(state)
        for w in state.workers:
            # every peer is late every iteration; corrections lag one step
            assert w.subs_count == 2 * (t + 1)
            assert w.outstanding == 2


def test_elastic_var_rejects_plans():
    plan = [{"kind": "delay", "t": 0, "node": 1, "targets": [0], "delay": 1}]
    with pytest.raises(ConfigError):
        init_run(run_cfg({"scheme": "elastic_var", "plan": plan}, T=5), line_objective())


# -- elastic scheduling, norm threshold -------------------------------------------


def test_elastic_norm_zero_threshold_carries_all_late_rows():
    obj = line_objective()
    config = RunConfig(p=2, T=2, alpha=0.5,
                       scheme={"scheme": "elastic_norm", "beta": 0.0, "late_prob": 1.0},
                       seed_data=1, seed_sched=2)
    state = init_run(config, obj)
    step(state)
    assert np.array_equal(state.views_mat[0], np.array([0.5, 0.0]))
    assert np.array_equal(state.global_x, np.array([1.0, 0.0]))
    carry = state.scheme_data["carryover"]
    assert len(carry[0]) == 1 and carry[0][0][1] == 1

    step(state)
    assert np.array_equal(state.views_mat[0], np.array([1.375, 0.0]))
    assert np.array_equal(state.global_x, np.array([1.75, 0.0]))


def test_elastic_norm_high_threshold_pulls_all_senders():
    """An unreachable threshold forces pulling every late peer, which makes
    the values match the exact run to rounding error."""
    obj = make_quadratic(d=3, m=16, c=0.5, L=1.0, spread=1.0, seed=8)
    config = RunConfig(p=4, T=30, alpha=0.05,
                       scheme={"scheme": "elastic_norm", "beta": 50.0, "late_prob": 1.0},
                       seed_data=15, seed_sched=16, keep_event_logs=True)
    m = run_trial(config, obj)
    b = run_trial(RunConfig(p=4, T=30, alpha=0.05, scheme={"scheme": "exact"},
                            seed_data=15, seed_sched=16), obj)
    assert np.allclose(m.final_x, b.final_x, rtol=0, atol=1e-12)
    proceeds = [ev for ev in m.schedule_log if ev[0] == "proceed"]
    assert proceeds
    assert all(ev[3] == 0 and ev[4] == 3 for ev in proceeds)  # 0 on time, 3 pulled


def test_elastic_norm_beta_zero_equals_full_omission():
    """With no threshold every late row just waits one step, which is the
    omission scheme at full budget and immediate release."""
    obj = make_quadratic(d=4, m=16, c=0.5, L=1.0, spread=1.0, seed=8)
    en = run_trial(
        RunConfig(p=4, T=200, alpha=0.05,
                  scheme={"scheme": "elastic_norm", "beta": 0.0, "late_prob": 0.35},
                  seed_data=17, seed_sched=18),
        obj,
    )
    om = run_trial(
        RunConfig(p=4, T=200, alpha=0.05,
                  scheme={"scheme": "omission", "f": 3, "omit_prob": 0.35,
                          "release_prob": 1.0, "drop_prob": 0.0},
                  seed_data=17, seed_sched=18),
        obj,
    )
    assert np.array_equal(en.final_x, om.final_x)
    assert np.array_equal(en.gap2, om.gap2, equal_nan=True)


def test_elastic_norm_require_full_is_exact():
    obj = make_quadratic(d=3, m=16, c=0.5, L=1.0, spread=1.0, seed=8)
    a = run_trial(run_cfg({"scheme": "elastic_norm", "beta": 0.7, "require_full": True,
                           "late_prob": 0.5}, p=4, T=40, alpha=0.05), obj)
    b = run_trial(run_cfg({"scheme": "exact"}, p=4, T=40, alpha=0.05), obj)
    assert np.array_equal(a.final_x, b.final_x)


# -- adversarial -----------------------------------------------------------------


def test_adversarial_matches_closed_form_error_recursion():
    """|x_t - x*| follows (1-a)^t |e0| + a B (1 - (1-a)^t) exactly."""
    obj = make_quadratic(d=1, m=1, c=1.0, L=1.0, spread=0.0, seed=0, center=1.0)
    alpha, b_adv, T = 0.25, 2.0, 30
    config = RunConfig(p=1, T=T, alpha=alpha, scheme={"scheme": "adversarial", "b_adv": b_adv},
                       mode=SINGLE, seed_data=1, seed_sched=2)
    m = run_trial(config, obj)
    e0 = abs(float(obj.x_star[0]))
    dist = np.sqrt(m.dist2_to_opt)
    for t in range(T + 1):
        closed = (1 - alpha) ** t * e0 + alpha * b_adv * (1 - (1 - alpha) ** t)
        assert dist[t] == pytest.approx(closed, abs=1e-12), t


def test_adversarial_gap_is_exactly_alpha_B():
    obj = make_quadratic(d=1, m=1, c=1.0, L=1.0, spread=0.0, seed=0, center=1.0)
    config = RunConfig(p=1, T=20, alpha=0.125, scheme={"scheme": "adversarial", "b_adv": 3.0},
                       mode=SINGLE, seed_data=1, seed_sched=2)
    m = run_trial(config, obj)
    gaps = m.gap2[:20, 0]
    assert np.abs(gaps - (0.125 * 3.0) ** 2).max() <= 1e-15


def test_adversarial_needs_single_worker_single_sample():
    obj = line_objective()
    with pytest.raises(ConfigError):
        init_run(run_cfg({"scheme": "adversarial", "b_adv": 1.0}, p=2, T=5), obj)
    multi = make_quadratic(d=2, m=4, c=1.0, L=1.0, spread=1.0, seed=0)
    with pytest.raises(ConfigError):
        init_run(
            RunConfig(p=1, T=5, alpha=0.1, scheme={"scheme": "adversarial", "b_adv": 1.0},
                      mode=SINGLE, seed_data=1, seed_sched=2),
            multi,
        )


# -- schedule obliviousness --------------------------------------------------------


@pytest.mark.parametrize(
    "scheme_kw",
    [
        {"scheme": "crash_m2", "f": 2},
        {"scheme": "omission", "f": 2, "omit_prob": 0.4},
        {"scheme": "async_mp", "tau_max": 2},
        {"scheme": "elastic_var", "late_prob": 0.4},
    ],
)
def test_schedule_log_ignores_data_seed(scheme_kw):
    obj = make_quadratic(d=3, m=16, c=0.5, L=1.0, spread=1.0, seed=8)

    def log(seed_data):
        config = RunConfig(p=4, T=80, alpha=0.05, scheme=scheme_kw,
                           seed_data=seed_data, seed_sched=21, keep_event_logs=True)
        return run_trial(config, obj).schedule_log

    assert log(1) == log(2)


def test_sample_sequence_ignores_schedule_seed():
    obj = make_quadratic(d=3, m=16, c=0.5, L=1.0, spread=1.0, seed=8)

    def samples(seed_sched):
        config = RunConfig(p=4, T=80, alpha=0.05,
                           scheme={"scheme": "async_mp", "tau_max": 2},
                           seed_data=22, seed_sched=seed_sched, keep_event_logs=True)
        return run_trial(config, obj).sample_log

    assert samples(1) == samples(2)
