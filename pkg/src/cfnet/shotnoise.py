"""Closed-form statistics of the pre-firing membrane potential.

Before a neuron fires, its potential under Poisson input with exponential
leak is a shot-noise process: each spike on channel ``i`` adds
``w_i * exp(-(t - t_k) / tau)``. This module holds the closed forms for its
mean and variance, the distribution of the decayed contribution of the
k-th most recent spike, and Monte Carlo / quadrature routines used to
check them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EPS = 1e-15
MAX_ITER = 10_000


@dataclass(frozen=True)
class ChannelSpec:
    """Rates, weights and membrane time constant for a bank of input channels."""

    lambdas: np.ndarray
    weights: np.ndarray
    tau_mem: float = 15.0

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lambdas, dtype=np.float64))
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        if lam.shape != w.shape:
            raise ValueError("lambdas and weights must have the same shape")
        if np.any(lam < 0):
            raise ValueError("rates must be nonnegative")
        if self.tau_mem <= 0:
            raise ValueError("tau_mem must be positive")
        object.__setattr__(self, "lambdas", lam)
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class MomentEstimate:
    mean: float
    variance: float
    se_mean: float
    se_variance: float
    trials: int


def _saturation(t: float, tau: float) -> float:
    if math.isinf(t):
        return 1.0
    if t < 0:
        raise ValueError("t must be nonnegative")
    return -math.expm1(-t / tau)


def mean_potential(channels: ChannelSpec, t: float = math.inf) -> float:
    """``tau * (w . lambda) * (1 - exp(-t / tau))``."""
    tau = channels.tau_mem
    return tau * float(channels.weights @ channels.lambdas) * _saturation(t, tau)


def variance_potential(channels: ChannelSpec, t: float = math.inf) -> float:
    """``tau / 2 * (lambda . w**2) * (1 - exp(-2 t / tau))``."""
    tau = channels.tau_mem
    return 0.5 * tau * float(channels.lambdas @ channels.weights**2) * _saturation(2.0 * t, tau)


# -- incomplete gamma ------------------------------------------------------------


def _gamma_series(a: float, x: float) -> float:
    term = total = 1.0 / a
    ap = a
    for _ in range(MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cf(a: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gammainc_lower(a: float, x: float) -> float:
    """Regularized lower incomplete gamma ``P(a, x)``."""
    if a <= 0:
        raise ValueError("shape must be positive")
    if x < 0:
        raise ValueError("x must be nonnegative")
    if x == 0:
        return 0.0
    if math.isinf(x):
        return 1.0
    if x < a + 1.0:
        return _gamma_series(a, x)
    return 1.0 - _gamma_cf(a, x)


def gammainc_upper(a: float, x: float) -> float:
    """Regularized upper incomplete gamma ``Q(a, x) = 1 - P(a, x)``."""
    if a <= 0:
        raise ValueError("shape must be positive")
    if x < 0:
        raise ValueError("x must be nonnegative")
    if x == 0:
        return 1.0
    if math.isinf(x):
        return 0.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_cf(a, x)


def _check_k(k) -> int:
    if int(k) != k or k < 1:
        raise ValueError("k must be a positive integer")
    return int(k)


def spike_age_cdf(k: int, lam: float, t: float) -> float:
    """P(age of the k-th most recent spike <= t) for a rate-``lam`` Poisson train."""
    k = _check_k(k)
    if t < 0:
        raise ValueError("t must be nonnegative")
    return gammainc_lower(k, lam * t)


# -- decayed contribution of the k-th most recent spike ------------------------------


def _check_v(v: float) -> None:
    if not 0.0 < v <= 1.0:
        raise ValueError(f"v={v} outside (0, 1]")


def residual_pdf(k: int, lam: float, tau: float, v: float) -> float:
    """Density of ``exp(-T / tau)`` with ``T ~ Gamma(k, lam)``."""
    k = _check_k(k)
    _check_v(v)
    a = lam * tau
    neg_log_v = -math.log(v)
    if neg_log_v == 0.0:
        return a if k == 1 else 0.0
    log_f = (k * math.log(a) + (a - 1.0) * math.log(v)
             + (k - 1) * math.log(neg_log_v) - math.lgamma(k))
    return math.exp(log_f)


def residual_cdf(k: int, lam: float, tau: float, v: float) -> float:
    k = _check_k(k)
    _check_v(v)
    return gammainc_upper(k, -lam * tau * math.log(v))


def residual_mean(k: int, lam: float, tau: float) -> float:
    """``(lam tau / (1 + lam tau)) ** k``."""
    k = _check_k(k)
    a = lam * tau
    return (a / (1.0 + a)) ** k


def default_k_max(lambdas, tau: float, tol: float = 1e-12) -> int:
    """Smallest cutoff with geometric tail below ``tol`` for every channel, at least ``60 lam tau``."""
    a = float(np.max(lambdas)) * tau
    if a == 0:
        return 1
    r = a / (1.0 + a)
    by_tail = math.log(tol / (1.0 + a)) / math.log(r)
    return max(1, math.ceil(60 * a), math.ceil(by_tail))


def steady_state_mean_supp(weights, lambdas, tau: float, k_max: int | None = None) -> float:
    """Partial sum over the ``k_max`` most recent spikes of the expected residuals."""
    w = np.atleast_1d(np.asarray(weights, dtype=np.float64))
    lam = np.atleast_1d(np.asarray(lambdas, dtype=np.float64))
    if k_max is None:
        k_max = default_k_max(lam, tau)
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    r = lam * tau / (1.0 + lam * tau)
    inner = np.zeros_like(r)
    term = np.ones_like(r)
    for _ in range(k_max):
        term = term * r
        inner += term
    return float(w @ inner)


# -- Monte Carlo oracle ---------------------------------------------------------------


def monte_carlo_potential(channels: ChannelSpec, t: float, trials: int,
                          rng: np.random.Generator) -> MomentEstimate:
    """Simulate Poisson arrivals on ``[0, t]`` and summarize ``sum w exp(-(t - t_k)/tau)``."""
    if trials < 100:
        raise ValueError("need at least 100 trials")
    if not 0 <= t < math.inf:
        raise ValueError("t must be finite and nonnegative")
    lam, w, tau = channels.lambdas, channels.weights, channels.tau_mem
    counts = rng.poisson(lam * t, size=(trials, lam.size))
    flat = counts.ravel()
    total = int(flat.sum())
    trial_of = np.repeat(np.arange(trials), counts.sum(axis=1))
    chan_of = np.repeat(np.tile(np.arange(lam.size), trials), flat)
    arrival = rng.random(total) * t
    contrib = w[chan_of] * np.exp(-(t - arrival) / tau)
    values = np.bincount(trial_of, weights=contrib, minlength=trials)
    mean = values.mean()
    var = values.var(ddof=1)
    centered = values - mean
    m4 = np.mean(centered**4)
    se_var = math.sqrt(max(m4 - var**2, 0.0) / trials)
    return MomentEstimate(float(mean), float(var), float(math.sqrt(var / trials)),
                          se_var, trials)


def random_channel_spec(rng: np.random.Generator, n_channels: int = 50,
                        tau_mem: float = 15.0) -> ChannelSpec:
    """A sparse-ish nonnegative rate vector with unit L2 norm and random weights."""
    lam = rng.uniform(0, 1, n_channels) * (rng.random(n_channels) < 0.6)
    if not lam.any():
        lam[0] = 1.0
    lam /= np.linalg.norm(lam)
    w = rng.uniform(0, 1, n_channels)
    w /= np.linalg.norm(w)
    return ChannelSpec(lam, w, tau_mem)


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    reference: float
    tolerance: float

    @property
    def error(self) -> float:
        return abs(self.value - self.reference)

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


def agreement_checks(trials: int = 10_000, seed: int = 0, n_specs: int = 10) -> list[Check]:
    """Analytic vs Monte Carlo vs quadrature agreement table."""
    from scipy import integrate

    rng = np.random.default_rng(seed)
    checks: list[Check] = []
    for s in range(n_specs):
        spec = random_channel_spec(rng, n_channels=int(rng.integers(10, 80)))
        t = float(rng.uniform(5.0, 60.0))
        est = monte_carlo_potential(spec, t, trials, rng)
        checks.append(Check(f"mc_mean[{s}]", est.mean, mean_potential(spec, t), 3 * est.se_mean))
        checks.append(Check(f"mc_var[{s}]", est.variance, variance_potential(spec, t),
                            3 * est.se_variance))
    for k in range(1, 6):
        for a in (0.5, 1.0, 15.0):
            quad, _ = integrate.quad(lambda v: v * residual_pdf(k, a, 1.0, v), 0.0, 1.0,
                                     epsabs=1e-13, epsrel=1e-13, limit=200)
            checks.append(Check(f"residual_mean[k={k},lt={a}]", residual_mean(k, a, 1.0), quad, 1e-8))
    for s in range(3):
        spec = random_channel_spec(rng, n_channels=784)
        checks.append(Check(f"supp_steady_state[{s}]",
                            steady_state_mean_supp(spec.weights, spec.lambdas, spec.tau_mem),
                            mean_potential(spec), 1e-6))
    return checks
