"""Event-driven simulation of a single CFN layer.

State only changes at event times: input spikes, output spikes and pulses of
the dopaminergic neuron. Between events membrane potentials decay by
``exp(-dt / tau_mem)``. Pre-synaptic traces are decayed lazily per channel
(value plus time of last update) and materialized only when a neuron fires,
which keeps the per-event cost at one pass over the neurons.

The dopaminergic neuron is a countdown: it fires ``t_rec`` after the sample
starts or after the most recent output spike, adds its weights to every
membrane potential and boosts the plasticity of every neuron until the next
output spike.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np
from numba import njit

from .ingest import SpikeEvent, SpikeSource
from .plasticity import dop_depress_inplace, stdp_column_inplace


class TimeReversalError(ValueError):
    pass


@dataclass(frozen=True)
class EngineConfig:
    n_inputs: int = 784
    n_neurons: int = 400
    tau_mem: float = 15.0
    tau_pre: float = 200.0
    v_th: float = 13.5
    t_rec: float = 200.0
    spikes_to_recognize: int = 5
    alpha: float = 0.01
    alpha_dop: float = 1.0
    dop_beta: float = 0.5
    dop_headroom: float = 1.05
    max_sample_duration: float = 1000.0

    def __post_init__(self):
        for name in ("tau_mem", "tau_pre", "v_th", "t_rec", "max_sample_duration"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.spikes_to_recognize < 1:
            raise ValueError("spikes_to_recognize must be >= 1")
        if not 0 < self.alpha <= self.alpha_dop <= 1:
            raise ValueError("need 0 < alpha <= alpha_dop <= 1")
        if self.dop_beta <= 0 or self.dop_headroom <= 1:
            raise ValueError("need dop_beta > 0 and dop_headroom > 1")
        if self.n_inputs < 1 or self.n_neurons < 1:
            raise ValueError("layer sizes must be positive")

    @property
    def dop_target(self) -> float:
        return self.dop_headroom * self.v_th

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class NetworkState:
    weights: np.ndarray  # (n_inputs, n_neurons); column j is neuron j
    potentials: np.ndarray
    trace_values: np.ndarray
    trace_times: np.ndarray
    dop_weights: np.ndarray
    v_th: np.ndarray
    boost: np.ndarray
    fire_counts: np.ndarray
    clock: float = 0.0
    dop_deadline: float = 200.0
    learning_enabled: bool = True

    ARRAYS = ("weights", "potentials", "trace_values", "trace_times", "dop_weights",
              "v_th", "boost", "fire_counts")

    @property
    def n_neurons(self) -> int:
        return self.weights.shape[1]

    @property
    def n_inputs(self) -> int:
        return self.weights.shape[0]

    @property
    def traces(self) -> np.ndarray:
        """Pre-synaptic traces decayed to the current clock."""
        return _materialize_traces(self.trace_values, self.trace_times, self.clock, self._tau_pre)

    _tau_pre: float = field(default=200.0, repr=False)

    def copy(self) -> "NetworkState":
        return replace(self, **{name: getattr(self, name).copy() for name in self.ARRAYS})

    def fingerprint(self) -> bytes:
        """Digest of the learned parameters (weights, dop weights, fire counts)."""
        import hashlib

        h = hashlib.sha256()
        for a in (self.weights, self.dop_weights, self.fire_counts):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.digest()


def init_network(config: EngineConfig, rng: np.random.Generator) -> NetworkState:
    """Uniform random weights, column-normalized; jittered dop weights at max target."""
    w = rng.uniform(0.0, 1.0, size=(config.n_inputs, config.n_neurons))
    w /= np.linalg.norm(w, axis=0, keepdims=True)
    d = rng.uniform(0.99, 1.01, size=config.n_neurons)
    d *= config.dop_target / d.max()
    return NetworkState(
        weights=np.ascontiguousarray(w),
        potentials=np.zeros(config.n_neurons),
        trace_values=np.zeros(config.n_inputs),
        trace_times=np.zeros(config.n_inputs),
        dop_weights=d,
        v_th=np.full(config.n_neurons, config.v_th),
        boost=np.zeros(config.n_neurons, dtype=np.bool_),
        fire_counts=np.zeros(config.n_neurons, dtype=np.int64),
        clock=0.0,
        dop_deadline=config.t_rec,
        _tau_pre=config.tau_pre,
    )


# -- kernels -----------------------------------------------------------------


@njit(cache=True)
def _materialize_traces(values, times, t, tau_pre):
    return values * np.exp(-(t - times) / tau_pre)


@njit(cache=True)
def _resolve(weights, v, v_th, tr_val, tr_time, dop, boost, counts, t,
             learn, alpha, alpha_dop, tau_pre, beta, dop_target):
    """Fire the strongest supra-threshold neuron, if any; returns its index or -1."""
    m = v.shape[0]
    best = -1
    best_v = -np.inf
    for j in range(m):
        if v[j] >= v_th[j] and v[j] > best_v:
            best = j
            best_v = v[j]
    if best < 0:
        return -1
    if learn:
        rate = alpha_dop if boost[best] else alpha
        x = _materialize_traces(tr_val, tr_time, t, tau_pre)
        stdp_column_inplace(weights, best, x, rate, tau_pre)
        counts[best] += 1
        dop_depress_inplace(dop, best, beta, dop_target)
    for j in range(m):
        v[j] = 0.0
        boost[j] = False
    return best


@njit(cache=True)
def _run(weights, v, v_th, tr_val, tr_time, dop, boost, counts,
         times, chans, k0, final, clock, deadline,
         learn, dop_enabled, t_max, need, n_out,
         out_counts, log_t, log_j, log_dop,
         tau_mem, tau_pre, t_rec, alpha, alpha_dop, beta, dop_target):
    """Consume input events from ``times[k0:]`` until ``need`` output spikes.

    Returns (k, clock, deadline, n_out, status) with status 0 = input chunk
    exhausted, 1 = enough output spikes, 2 = ``t_max`` reached.
    """
    m = v.shape[0]
    n = times.shape[0]
    k = k0
    while True:
        if k < n:
            t_in = times[k]
        elif final:
            t_in = np.inf
        else:
            return k, clock, deadline, n_out, 0

        if dop_enabled and deadline <= t_in:
            if deadline > t_max:
                v *= np.exp(-(t_max - clock) / tau_mem)
                return k, t_max, deadline, n_out, 2
            v *= np.exp(-(deadline - clock) / tau_mem)
            clock = deadline
            for j in range(m):
                boost[j] = True
                v[j] += dop[j]
            w = _resolve(weights, v, v_th, tr_val, tr_time, dop, boost, counts, clock,
                         learn, alpha, alpha_dop, tau_pre, beta, dop_target)
            # dop weights are normalized so the pulse always fires someone
            if w >= 0:
                out_counts[w] += 1
                if n_out < log_t.shape[0]:
                    log_t[n_out] = clock
                    log_j[n_out] = w
                    log_dop[n_out] = True
                n_out += 1
            deadline = clock + t_rec
            if n_out >= need:
                return k, clock, deadline, n_out, 1
            continue

        if t_in > t_max:
            v *= np.exp(-(t_max - clock) / tau_mem)
            return k, t_max, deadline, n_out, 2

        f = np.exp(-(t_in - clock) / tau_mem)
        clock = t_in
        i = chans[k]
        k += 1
        if learn:
            tr_val[i] = tr_val[i] * np.exp(-(t_in - tr_time[i]) / tau_pre) + 1.0
            tr_time[i] = t_in
        fire = False
        for j in range(m):
            vj = v[j] * f + weights[i, j]
            v[j] = vj
            if vj >= v_th[j]:
                fire = True
        if fire:
            w = _resolve(weights, v, v_th, tr_val, tr_time, dop, boost, counts, clock,
                         learn, alpha, alpha_dop, tau_pre, beta, dop_target)
            out_counts[w] += 1
            if n_out < log_t.shape[0]:
                log_t[n_out] = clock
                log_j[n_out] = w
                log_dop[n_out] = False
            n_out += 1
            deadline = clock + t_rec
            if n_out >= need:
                return k, clock, deadline, n_out, 1


# -- single-event operations ---------------------------------------------------


def advance_to(state: NetworkState, t_next: float, config: EngineConfig) -> NetworkState:
    if t_next < state.clock:
        raise TimeReversalError(f"cannot move clock from {state.clock} back to {t_next}")
    dt = t_next - state.clock
    state.potentials *= np.exp(-dt / config.tau_mem)
    state.clock = float(t_next)
    return state


def resolve_firing(state: NetworkState, config: EngineConfig) -> list[SpikeEvent]:
    w = _resolve(state.weights, state.potentials, state.v_th, state.trace_values,
                 state.trace_times, state.dop_weights, state.boost, state.fire_counts,
                 state.clock, state.learning_enabled, config.alpha, config.alpha_dop,
                 config.tau_pre, config.dop_beta, config.dop_target)
    if w < 0:
        return []
    state.dop_deadline = state.clock + config.t_rec
    return [SpikeEvent(state.clock, "output", int(w))]


def inject_input_spike(state: NetworkState, channel: int, config: EngineConfig) -> list[SpikeEvent]:
    if not 0 <= channel < state.n_inputs:
        raise IndexError(f"input channel {channel} out of range [0, {state.n_inputs})")
    t = state.clock
    state.trace_values[channel] = (
        state.trace_values[channel] * np.exp(-(t - state.trace_times[channel]) / config.tau_pre) + 1.0
    )
    state.trace_times[channel] = t
    state.potentials += state.weights[channel]
    return resolve_firing(state, config)


def next_dopamine_time(state: NetworkState) -> float:
    return state.dop_deadline


def dopamine_fire(state: NetworkState, config: EngineConfig) -> list[SpikeEvent]:
    """Pulse the dopaminergic neuron at the current clock."""
    state.boost[:] = True
    state.potentials += state.dop_weights
    events = [SpikeEvent(state.clock, "dopamine")]
    events += resolve_firing(state, config)
    state.dop_deadline = state.clock + config.t_rec
    return events


# -- whole-sample simulation ---------------------------------------------------


@dataclass
class SampleResult:
    counts: np.ndarray
    dopamine_pulses: int
    elapsed: float
    first_firing_neuron: int | None
    events: list[SpikeEvent]
    capped: bool = False

    @property
    def dopamine_fired(self) -> bool:
        return self.dopamine_pulses > 0

    @property
    def n_spikes(self) -> int:
        return int(self.counts.sum())


class _Window:
    """Accumulates one kernel-driven stretch of simulation."""

    def __init__(self, state: NetworkState, config: EngineConfig, learn: bool, need: int):
        self.state = state
        self.config = config
        self.learn = learn
        self.need = need
        self.n_out = 0
        self.counts = np.zeros(state.n_neurons, dtype=np.int64)
        self.log_t = np.zeros(need)
        self.log_j = np.zeros(need, dtype=np.int64)
        self.log_dop = np.zeros(need, dtype=np.bool_)

    def run(self, times, chans, final: bool, t_max: float, dop_enabled: bool):
        s, c = self.state, self.config
        k, s.clock, s.dop_deadline, self.n_out, status = _run(
            s.weights, s.potentials, s.v_th, s.trace_values, s.trace_times,
            s.dop_weights, s.boost, s.fire_counts,
            times, chans, 0, final, s.clock, s.dop_deadline,
            self.learn, dop_enabled, t_max, self.need, self.n_out,
            self.counts, self.log_t, self.log_j, self.log_dop,
            c.tau_mem, c.tau_pre, c.t_rec, c.alpha, c.alpha_dop, c.dop_beta, c.dop_target,
        )
        return k, status

    def events(self) -> list[SpikeEvent]:
        out = []
        for t, j, dop in zip(self.log_t[: self.n_out], self.log_j[: self.n_out],
                             self.log_dop[: self.n_out]):
            if dop:
                out.append(SpikeEvent(float(t), "dopamine"))
            out.append(SpikeEvent(float(t), "output", int(j)))
        return out


def reset_for_sample(state: NetworkState, config: EngineConfig) -> None:
    state.potentials[:] = 0.0
    state.trace_values[:] = 0.0
    state.trace_times[:] = 0.0
    state.boost[:] = False
    state.clock = 0.0
    state.dop_deadline = config.t_rec


def run_sample(state: NetworkState, rates, mode: str, rng: np.random.Generator | None,
               config: EngineConfig, rate_scale: float = 1.0, spikes=None) -> SampleResult:
    """Present one sample until ``spikes_to_recognize`` output spikes.

    ``mode`` is ``"train"`` or ``"frozen"``. Frozen runs never touch weights,
    dopaminergic weights, boost flags or fire counts, and the dopaminergic
    neuron stays silent. ``spikes`` optionally supplies the input as a
    ``(times, channels)`` pair instead of drawing it from ``rng``.
    """
    if mode not in ("train", "frozen"):
        raise ValueError(f"unknown mode {mode!r}")
    learn = mode == "train" and state.learning_enabled
    reset_for_sample(state, config)
    win = _Window(state, config, learn, config.spikes_to_recognize)
    t_max = config.max_sample_duration
    if spikes is not None:
        times = np.asarray(spikes[0], dtype=np.float64)
        chans = np.asarray(spikes[1], dtype=np.int64)
        _, status = win.run(times, chans, True, t_max, learn)
    else:
        source = SpikeSource(rates, rate_scale, rng, chunk=source_chunk(rates, rate_scale, config))
        while True:
            times, chans = source.next_chunk()
            _, status = win.run(times, chans, False, t_max, learn)
            if status != 0:
                break
    events = win.events()
    outputs = [e for e in events if e.kind == "output"]
    return SampleResult(
        counts=win.counts,
        dopamine_pulses=sum(e.kind == "dopamine" for e in events),
        elapsed=state.clock,
        first_firing_neuron=outputs[0].index if outputs else None,
        events=events,
        capped=status == 2,
    )


MAX_CHUNK = 1 << 16


def source_chunk(rates, rate_scale: float, config: EngineConfig) -> int:
    """Chunk size covering about one recognition window of input."""
    n = 1.2 * float(np.sum(rates)) * rate_scale * config.t_rec
    return int(min(max(n, 64), MAX_CHUNK))


def frozen_response(state: NetworkState, rates, rng: np.random.Generator, config: EngineConfig,
                    max_doublings: int = 20) -> tuple[np.ndarray, float]:
    """Spike counts of a frozen network, escalating the input rate when silent.

    Runs windows of ``t_rec`` with the rate scale doubling each window until
    ``spikes_to_recognize`` output spikes have accumulated. Returns the counts
    and the final rate scale; counts are all zero if the cap was reached.
    Potentials, traces and clock are restored afterwards.
    """
    if not np.any(np.asarray(rates) @ state.weights > 0):
        # no neuron is reachable from this input at any rate
        return np.zeros(state.n_neurons, dtype=np.int64), float(2 ** max_doublings)
    saved = (state.potentials.copy(), state.trace_values.copy(), state.trace_times.copy(),
             state.boost.copy(), state.clock, state.dop_deadline)
    reset_for_sample(state, config)
    win = _Window(state, config, False, config.spikes_to_recognize)
    scale = 1.0
    try:
        for level in range(max_doublings + 1):
            scale = float(2 ** level)
            t_end = (level + 1) * config.t_rec
            source = SpikeSource(rates, scale, rng, start=state.clock,
                                 chunk=source_chunk(rates, scale, config))
            while True:
                times, chans = source.next_chunk()
                _, status = win.run(times, chans, False, t_end, False)
                if status != 0:
                    break
            if status == 1:
                break
    finally:
        (state.potentials[:], state.trace_values[:], state.trace_times[:],
         state.boost[:], state.clock, state.dop_deadline) = saved
    return win.counts, scale
