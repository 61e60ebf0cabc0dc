import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfnet.engine import (
    EngineConfig,
    TimeReversalError,
    advance_to,
    dopamine_fire,
    init_network,
    inject_input_spike,
    next_dopamine_time,
    resolve_firing,
    run_sample,
)
from cfnet.ingest import SpikeSource, to_rate_vector

from stepped_reference import stepped_sample

SMALL = EngineConfig(n_inputs=10, n_neurons=5)


def small_net(seed=0, config=SMALL):
    return init_network(config, np.random.default_rng(seed))


def test_decay_one_time_constant():
    s = small_net()
    s.potentials[:] = 10.0
    advance_to(s, 15.0, SMALL)
    np.testing.assert_allclose(s.potentials, 10 * math.exp(-1), rtol=1e-15)
    assert abs(s.potentials[0] - 3.6788) < 1e-4
    assert s.clock == 15.0


def test_zero_step_identity():
    s = small_net()
    s.potentials[:] = np.arange(5.0)
    before = s.copy()
    advance_to(s, 0.0, SMALL)
    np.testing.assert_array_equal(s.potentials, before.potentials)
    np.testing.assert_array_equal(s.traces, before.traces)


def test_semigroup():
    a, b = small_net(), small_net()
    for s in (a, b):
        s.potentials[:] = [1.0, 2.0, 3.0, 4.0, 5.0]
        inject_input_spike(s, 3, SMALL)
    advance_to(a, 3.7, SMALL)
    advance_to(a, 3.7 + 11.2, SMALL)
    advance_to(b, 3.7 + 11.2, SMALL)
    np.testing.assert_allclose(a.potentials, b.potentials, rtol=1e-12)
    np.testing.assert_allclose(a.traces, b.traces, rtol=1e-12)


def test_trace_decay_visible():
    s = small_net()
    inject_input_spike(s, 2, SMALL)
    advance_to(s, 200.0, SMALL)
    assert abs(s.traces[2] - math.exp(-1)) < 1e-15


def test_time_reversal():
    s = small_net()
    advance_to(s, 5.0, SMALL)
    with pytest.raises(TimeReversalError):
        advance_to(s, 4.0, SMALL)


def test_inject_zero_weights():
    s = small_net()
    s.weights[4, :] = 0.0
    s.potentials[:] = 1.5
    events = inject_input_spike(s, 4, SMALL)
    assert events == []
    np.testing.assert_array_equal(s.potentials, 1.5)
    assert s.traces[4] == 1.0


def test_inject_crosses_threshold():
    s = small_net()
    eps = 1e-9
    s.potentials[2] = s.v_th[2] - s.weights[6, 2] + eps
    events = inject_input_spike(s, 6, SMALL)
    assert [(e.kind, e.index) for e in events] == [("output", 2)]


def test_inject_bad_channel():
    with pytest.raises(IndexError):
        inject_input_spike(small_net(), 10, SMALL)


def test_no_fire_below_threshold():
    s = small_net()
    s.potentials[:] = 13.0
    before = s.copy()
    assert resolve_firing(s, SMALL) == []
    np.testing.assert_array_equal(s.potentials, before.potentials)
    np.testing.assert_array_equal(s.weights, before.weights)


def test_winner_take_all():
    s = small_net()
    inject_input_spike(s, 0, SMALL)
    s.potentials[:] = [14.0, 20.0, 3.0, 19.0, 0.0]
    events = resolve_firing(s, SMALL)
    assert [(e.kind, e.index) for e in events] == [("output", 1)]
    assert np.all(s.potentials == 0)
    assert s.fire_counts.tolist() == [0, 1, 0, 0, 0]


def test_tie_goes_to_lowest_index():
    s = small_net()
    inject_input_spike(s, 0, SMALL)
    s.potentials[:] = [1.0, 15.0, 2.0, 15.0, 15.0]
    assert resolve_firing(s, SMALL)[0].index == 1


def test_fire_sets_deadline():
    s = small_net()
    advance_to(s, 120.0, SMALL)
    inject_input_spike(s, 1, SMALL)
    s.potentials[0] = 50.0
    resolve_firing(s, SMALL)
    assert next_dopamine_time(s) == 320.0


def test_fresh_deadline():
    assert next_dopamine_time(small_net()) == 200.0


def test_silent_input_keeps_deadline():
    s = small_net()
    advance_to(s, 50.0, SMALL)
    inject_input_spike(s, 3, SMALL)
    assert next_dopamine_time(s) == 200.0


def test_dopamine_argmax_fires():
    s = small_net(3)
    k = int(np.argmax(s.dop_weights))
    inject_input_spike(s, 0, SMALL)
    s.potentials[:] = 0.0
    events = dopamine_fire(s, SMALL)
    assert [e.kind for e in events] == ["dopamine", "output"]
    assert events[1].index == k
    assert not s.boost.any()


def test_dopamine_one_shot_adoption():
    cfg = EngineConfig(n_inputs=30, n_neurons=8)
    s = init_network(cfg, np.random.default_rng(1))
    rng = np.random.default_rng(2)
    for t in np.sort(rng.uniform(0, 150, 40)):
        advance_to(s, t, cfg)
        inject_input_spike(s, int(rng.integers(30)), cfg)
    advance_to(s, 200.0, cfg)
    trace = s.traces
    events = dopamine_fire(s, cfg)
    outs = [e for e in events if e.kind == "output"]
    assert len(outs) == 1
    j = outs[0].index
    np.testing.assert_allclose(s.weights[:, j], trace / np.linalg.norm(trace), atol=1e-14)
    assert not s.boost.any()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 13.0))
def test_dopamine_always_fires_exactly_once(seed, level):
    rng = np.random.default_rng(seed)
    s = small_net(seed)
    inject_input_spike(s, int(rng.integers(10)), SMALL)
    s.dop_weights[:] = s.dop_weights * rng.uniform(0.01, 1.0, 5)
    s.dop_weights *= SMALL.dop_target / s.dop_weights.max()
    s.potentials[:] = rng.uniform(0, level, 5)
    events = dopamine_fire(s, SMALL)
    assert sum(e.kind == "output" for e in events) == 1


def _toy_rates(rng, n=10):
    r = rng.uniform(0, 1, n)
    return r / np.linalg.norm(r)


def test_aligned_neuron_recognizes_quickly():
    cfg = EngineConfig(n_inputs=784, n_neurons=10, max_sample_duration=200.0)
    rng = np.random.default_rng(5)
    img = np.zeros(784)
    img[rng.choice(784, 150, replace=False)] = rng.uniform(0.2, 1.0, 150)
    lam = to_rate_vector(img)
    s = init_network(cfg, rng)
    s.weights[:, 4] = lam
    hits = 0
    for _ in range(100):
        r = run_sample(s, lam, "frozen", rng, cfg)
        hits += r.n_spikes >= 5 and not r.capped and r.elapsed <= 200.0
    assert hits >= 95


def test_orthogonal_input_adopted_by_dopamine():
    cfg = EngineConfig(n_inputs=40, n_neurons=6)
    rng = np.random.default_rng(11)
    s = init_network(cfg, rng)
    s.weights[20:, :] = 0.0
    s.weights /= np.linalg.norm(s.weights, axis=0)
    img = np.zeros(40)
    img[20:] = rng.uniform(0.5, 1.0, 20)
    lam = to_rate_vector(img)
    before = s.weights.copy()
    r = run_sample(s, lam, "train", rng, cfg)
    assert r.dopamine_pulses == 1
    assert r.events[0].kind == "dopamine" and r.events[0].time == 200.0
    changed = np.flatnonzero(np.any(s.weights != before, axis=0))
    assert changed.tolist() == [r.first_firing_neuron]
    j = r.first_firing_neuron
    assert np.all(s.weights[:20, j] == 0)
    assert np.dot(s.weights[:, j], lam) > 0.9


def test_frozen_mode_leaves_parameters_alone():
    cfg = EngineConfig(n_inputs=10, n_neurons=5)
    s = small_net(2, cfg)
    lam = _toy_rates(np.random.default_rng(0))
    w, d, c = s.weights.copy(), s.dop_weights.copy(), s.fire_counts.copy()
    for seed in range(5):
        run_sample(s, lam, "frozen", np.random.default_rng(seed), cfg)
    assert s.weights.tobytes() == w.tobytes()
    assert s.dop_weights.tobytes() == d.tobytes()
    assert s.fire_counts.tobytes() == c.tobytes()


def test_learning_disabled_is_pure():
    s = small_net(4)
    s.learning_enabled = False
    lam = _toy_rates(np.random.default_rng(1))
    a = run_sample(s, lam, "train", np.random.default_rng(9), SMALL)
    b = run_sample(s, lam, "train", np.random.default_rng(9), SMALL)
    assert a.events == b.events
    np.testing.assert_array_equal(a.counts, b.counts)
    assert a.dopamine_pulses == 0


def test_potentials_below_threshold_after_each_event():
    cfg = EngineConfig(n_inputs=10, n_neurons=5, v_th=3.0)
    s = small_net(6, cfg)
    src = SpikeSource(_toy_rates(np.random.default_rng(2)), 1.0, np.random.default_rng(3))
    fired = 0
    for _ in range(5):
        times, chans = src.next_chunk(200)
        for t, c in zip(times, chans):
            advance_to(s, t, cfg)
            fired += len(inject_input_spike(s, int(c), cfg))
            assert s.potentials.max() < s.v_th.min()
    assert fired > 10


def _sample_potential(seed, lam, w, cfg, horizon, spacing):
    """Potential seen at regular times under a never-firing neuron."""
    s = init_network(cfg, np.random.default_rng(seed))
    s.weights[:, 0] = w
    s.v_th[:] = np.inf
    src = SpikeSource(lam, 1.0, np.random.default_rng(seed + 1))
    out = []
    next_probe = spacing
    while next_probe <= horizon:
        times, chans = src.next_chunk(4096)
        for t, c in zip(times.tolist(), chans.tolist()):
            while next_probe <= t and next_probe <= horizon:
                advance_to(s, next_probe, cfg)
                out.append(s.potentials[0])
                next_probe += spacing
            advance_to(s, t, cfg)
            inject_input_spike(s, c, cfg)
    return np.array(out)


def test_mean_and_variance_of_free_potential():
    cfg = EngineConfig(n_inputs=12, n_neurons=1)
    rng = np.random.default_rng(30)
    lam = _toy_rates(rng, 12)
    w = rng.uniform(0, 1, 12)
    w /= np.linalg.norm(w)
    v = _sample_potential(31, lam, w, cfg, horizon=60_000.0, spacing=60.0)[5:]
    mean_ref = cfg.tau_mem * w @ lam
    var_ref = 0.5 * cfg.tau_mem * lam @ w**2
    n = len(v)
    assert abs(v.mean() - mean_ref) < 3 * v.std(ddof=1) / math.sqrt(n)
    m4 = np.mean((v - v.mean()) ** 4)
    se_var = math.sqrt((m4 - v.var() ** 2) / n)
    assert abs(v.var(ddof=1) - var_ref) < 3 * se_var


# -- event-driven vs fixed-step reference ------------------------------------------

DT = 2.0**-10  # exactly representable grid step, finer than 1e-3


def quantized_spikes(lam, rng, horizon):
    src = SpikeSource(lam, 1.0, rng, chunk=int(np.sum(lam) * horizon * 1.5) + 100)
    times, chans = src.next_chunk()
    keep = times <= horizon
    steps = np.ceil(times[keep] / DT).astype(np.int64)
    chans = chans[keep]
    order = np.lexsort((chans, steps))
    return steps[order], chans[order]


def compare_with_reference(n_samples=10, seed=0):
    cfg = EngineConfig(n_inputs=10, n_neurons=5, v_th=14.0)
    rng = np.random.default_rng(seed)
    state = init_network(cfg, rng)
    ref_w = state.weights.copy()
    ref_d = state.dop_weights.copy()
    # prototypes on disjoint channel groups, so unfamiliar ones need dopamine
    protos = []
    for group in (slice(0, 4), slice(4, 7), slice(7, 10)):
        img = np.zeros(10)
        img[group] = rng.uniform(0.5, 1.0, len(range(10)[group]))
        protos.append(img / np.linalg.norm(img))
    mismatches = []
    n_dop = n_in = 0
    for s in range(n_samples):
        lam = protos[s % 3]
        steps, chans = quantized_spikes(lam, rng, cfg.max_sample_duration)
        r = run_sample(state, lam, "train", None, cfg, spikes=(steps * DT, chans))
        ev = [(e.time, e.index) for e in r.events if e.kind == "output"]
        ev_dop = [i > 0 and r.events[i - 1].kind == "dopamine"
                  for i, e in enumerate(r.events) if e.kind == "output"]
        ref_steps, ref_j, ref_dop = stepped_sample(
            ref_w, ref_d, state.v_th, steps, chans, DT,
            int(cfg.max_sample_duration / DT), cfg.tau_mem, cfg.tau_pre, int(cfg.t_rec / DT),
            cfg.alpha, cfg.alpha_dop, cfg.dop_beta, cfg.dop_target, cfg.spikes_to_recognize)
        ref_ev = [(st * DT, int(j)) for st, j in zip(ref_steps, ref_j)]
        if ev != ref_ev or ev_dop != ref_dop.tolist():
            mismatches.append((s, ev, ref_ev))
        n_dop += sum(ev_dop)
        n_in += len(ev) - sum(ev_dop)
    w_err = float(np.max(np.abs(state.weights - ref_w)))
    d_err = float(np.max(np.abs(state.dop_weights - ref_d)))
    return mismatches, w_err, d_err, n_dop, n_in


def test_event_driven_matches_time_stepped():
    mismatches, w_err, d_err, n_dop, n_in = compare_with_reference()
    assert not mismatches
    assert w_err < 1e-6 and d_err < 1e-6
    # both kinds of output spike were exercised
    assert n_dop > 0 and n_in > 0
