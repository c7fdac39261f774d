"""Poisson estimator of path-integral weights and its tuning machinery.

One grid segment [t0, t1] of a particle trajectory carries the intractable
weight ``exp(-int_{t0}^{t1} rate(X_s) ds)``.  The estimator draws a
Poisson(eta) number of uniform auxiliary times, propagates the state through
them exactly, and returns

    E = exp(-(t1 - t0) * rate(X_{t0}))
        * prod_j [ 1 + ((t1 - t0) / eta) * (rate(X_{t0}) - rate(X_{tau_j})) ]

which is conditionally unbiased for the weight given the segment endpoints.
E can be negative; the probability of that event decays exponentially in
1/Delta and is controlled by the (eta, Delta) design rule ``eta = Delta * l``
with ``l`` an empirical Lipschitz bound of the rate, tracked causally from
the particle cloud.  Closed-form bound evaluators (endpoint-conditioned and
marginal), the step-size chooser, the truncation-bias bound and the
sum-until-positive estimator used for bias demonstrations live here too.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import stats

from . import sde

__all__ = [
    "EstimatorConfig",
    "SegmentEstimate",
    "PESample",
    "BoundValue",
    "poisson_segment_estimate",
    "poisson_segment_estimate_many",
    "neg_prob_bound_endpoint",
    "neg_prob_bound_marginal",
    "choose_step_size",
    "lipschitz_init",
    "lipschitz_update",
    "LipschitzTracker",
    "truncation_bias_bound",
    "wald_estimate",
    "wald_estimate_many",
    "endpoint_conditioned_negative_prob",
]

logger = logging.getLogger(__name__)

LIPSCHITZ_FLOOR = 1e-6
_PAIR_CAP = 1024  # multivariate initial Lipschitz scan caps the pairwise sweep


@dataclass(frozen=True)
class EstimatorConfig:
    """Tuning of the segment estimator.

    ``eta`` is always the product rule ``segment length * lipschitz``;
    ``policy`` decides what a negative estimate becomes in a filter weight:
    ``"truncate"`` clips it to zero, ``"signed"`` keeps the absolute value
    and counts the sign flip for later de-biasing.
    """

    delta: float
    lipschitz: float | None = None
    epsilon: float = 1e-6
    excursion: float = 3.0
    policy: str = "truncate"

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"step bound must be positive, got {self.delta}")
        # delta may be +inf: the grid then refines at observation times only
        if not (0 < self.epsilon <= 1):
            raise ValueError("negative-probability budget must lie in (0, 1]")
        if self.excursion <= 0:
            raise ValueError("excursion constant must be positive")
        if self.policy not in ("truncate", "signed"):
            raise ValueError(f"unknown estimate policy {self.policy!r}")
        if self.lipschitz is not None and self.lipschitz <= 0:
            raise ValueError("Lipschitz seed must be positive")


class BoundValue(NamedTuple):
    """Probability bound carried in both linear and log form."""

    value: float
    log_value: float


class PESample(NamedTuple):
    """Vectorised estimator output for one grid segment.

    ``log_abs`` and ``sign`` factor the (possibly negative) estimate as
    ``E = sign * exp(log_abs)``, which keeps long weight products stable.
    """

    log_abs: np.ndarray
    sign: np.ndarray
    kappa: np.ndarray
    x_end: np.ndarray

    @property
    def value(self) -> np.ndarray:
        return self.sign * np.exp(self.log_abs)


@dataclass(frozen=True)
class SegmentEstimate:
    """One Poisson estimate of ``exp(-int rate)`` over a grid segment."""

    value: float
    kappa: int
    t_prev: float
    t_next: float
    x_end: np.ndarray

    @property
    def is_negative(self) -> bool:
        return self.value < 0


def poisson_segment_estimate_many(
    spec: sde.LinearSdeSpec,
    intensity,
    eta: float,
    t_prev: float,
    t_next: float,
    x_start: np.ndarray,
    rng: np.random.Generator,
    rates_start: np.ndarray | None = None,
) -> PESample:
    """Segment estimates for a whole particle cloud at once.

    ``x_start`` has shape (N, n).  Auxiliary times are sorted per particle
    and the state is propagated through them sequentially and exactly; the
    returned ``x_end`` is an exact draw of the state at ``t_next``.
    """
    if eta <= 0:
        raise ValueError(f"Poisson rate eta must be positive, got {eta}")
    if not t_prev < t_next:
        raise ValueError(f"empty segment [{t_prev}, {t_next}]")
    x_start = np.asarray(x_start, float)
    n_part = x_start.shape[0]
    if n_part * eta > 5e7:
        raise ValueError(
            f"auxiliary-point budget {n_part * eta:.3g} is unreasonable; cap eta"
        )
    dt_seg = t_next - t_prev

    rates0 = intensity.eval_many(x_start) if rates_start is None else rates_start
    kappa = rng.poisson(eta, n_part)
    log_abs = -dt_seg * rates0
    sign = np.ones(n_part, dtype=np.int8)
    x_cur = x_start.copy()
    t_cur = np.full(n_part, t_prev)

    k_max = int(kappa.max()) if n_part else 0
    if k_max > 0:
        taus = rng.uniform(t_prev, t_next, (n_part, k_max))
        taus[np.arange(k_max)[None, :] >= kappa[:, None]] = np.inf
        taus.sort(axis=1)
        for j in range(k_max):
            idx = np.nonzero(kappa > j)[0]
            tau_j = taus[idx, j]
            x_new = sde.sample_transition_many(spec, tau_j - t_cur[idx], x_cur[idx], rng)
            rates_tau = intensity.eval_many(x_new)
            bracket = 1.0 + (dt_seg / eta) * (rates0[idx] - rates_tau)
            sign[idx] = sign[idx] * np.where(bracket < 0, -1, np.where(bracket > 0, 1, 0)).astype(np.int8)
            with np.errstate(divide="ignore"):
                log_abs[idx] += np.log(np.abs(bracket))
            x_cur[idx] = x_new
            t_cur[idx] = tau_j

    x_end = sde.sample_transition_many(spec, t_next - t_cur, x_cur, rng)
    return PESample(log_abs=log_abs, sign=sign, kappa=kappa, x_end=x_end)


def poisson_segment_estimate(
    spec: sde.LinearSdeSpec,
    intensity,
    cfg: EstimatorConfig,
    t_prev: float,
    t_next: float,
    x_start,
    rng: np.random.Generator,
) -> SegmentEstimate:
    """Single-trajectory segment estimate under the ``eta = dt * l`` rule.

    Requires ``cfg.lipschitz`` (the current tracker value or an analytic
    seed).  The segment must respect the step bound ``t_next - t_prev <=
    cfg.delta`` up to round-off.
    """
    if cfg.lipschitz is None:
        raise ValueError("config carries no Lipschitz value to form eta")
    dt = t_next - t_prev
    if dt <= 0 or dt > cfg.delta * (1 + 1e-9):
        raise ValueError(f"segment length {dt} outside (0, {cfg.delta}]")
    x_start = np.atleast_1d(np.asarray(x_start, float))
    batch = poisson_segment_estimate_many(
        spec, intensity, dt * cfg.lipschitz, t_prev, t_next, x_start[None, :], rng
    )
    return SegmentEstimate(
        value=float(batch.value[0]),
        kappa=int(batch.kappa[0]),
        t_prev=t_prev,
        t_next=t_next,
        x_end=batch.x_end[0],
    )


# ---------------------------------------------------------------------------
# Negative-probability bounds and the (eta, Delta) design rule
# ---------------------------------------------------------------------------


def neg_prob_bound_endpoint(eta: float, delta: float, lipschitz: float, gap: float) -> BoundValue:
    """Endpoint-conditioned bound on ``Pr(E < 0 | kappa > 0, X_Delta)``.

    For an ``l``-Lipschitz rate on Brownian motion with endpoint gap
    ``|x_Delta - x_0|``, the bound is
    ``2 exp(-(2 eta / (Delta l)) (eta / (Delta l) - gap) / Delta)``
    whenever ``eta > Delta l gap``, and 1 otherwise.
    """
    if min(eta, delta, lipschitz) <= 0 or gap < 0:
        raise ValueError("eta, delta, lipschitz must be positive and gap non-negative")
    ratio = eta / (delta * lipschitz)
    if ratio <= gap:
        return BoundValue(1.0, 0.0)
    log_val = math.log(2.0) - 2.0 * ratio * (ratio - gap) / delta
    return BoundValue(math.exp(log_val), log_val)


def neg_prob_bound_marginal(eta: float, delta: float, lipschitz: float) -> BoundValue:
    """Bound on ``Pr(E < 0 | kappa > 0)`` averaged over the endpoint.

    Equals ``2 + 4 Phi(2z) - 6 Phi(z)`` with ``z = eta / (Delta^1.5 l)``,
    evaluated as ``6 Phibar(z) - 4 Phibar(2z)`` through log-space
    complementary CDFs so that values far below 1e-300 stay representable
    in the log field.
    """
    if min(eta, delta, lipschitz) <= 0:
        raise ValueError("eta, delta and lipschitz must be positive")
    z = eta / (delta**1.5 * lipschitz)
    log_tail_z = stats.norm.logsf(z)
    log_tail_2z = stats.norm.logsf(2.0 * z)
    log_val = math.log(6.0) + log_tail_z + math.log1p(-(2.0 / 3.0) * math.exp(log_tail_2z - log_tail_z))
    return BoundValue(math.exp(log_val) if log_val > -745 else 0.0, log_val)


def _log_union_budget(n_segments: int, bound: BoundValue) -> float:
    return math.log(n_segments) + bound.log_value


def choose_step_size(
    n_particles: float,
    horizon: float,
    lipschitz: float,
    excursion: float = 3.0,
    epsilon: float = 1e-6,
    lower: float = 1e-8,
    rel_tol: float = 1e-3,
) -> float:
    """Largest step bound keeping the whole-run negative probability under budget.

    With ``eta = Delta * l`` and assumed per-segment endpoint gaps
    ``excursion * sqrt(Delta)``, requires both

        ceil(N T / Delta) * endpoint_bound  <= epsilon
        ceil(N T / Delta) * marginal_bound  <= epsilon

    and bisects on log(Delta) in [lower, T] for the boundary.  Bound
    products are capped at one before comparison, so ``epsilon = 1`` is
    vacuous and returns the window top.
    """
    if n_particles * horizon <= 0:
        raise ValueError("need a positive particle-time budget")
    if not (0 < epsilon <= 1):
        raise ValueError("epsilon must lie in (0, 1]")
    nt = n_particles * horizon
    log_eps = math.log(epsilon)

    def admissible(delta: float) -> bool:
        if epsilon == 1.0:
            return True
        eta = delta * lipschitz
        segments = math.ceil(nt / delta)
        lv1 = _log_union_budget(segments, neg_prob_bound_endpoint(eta, delta, lipschitz, excursion * math.sqrt(delta)))
        lv2 = _log_union_budget(segments, neg_prob_bound_marginal(eta, delta, lipschitz))
        return min(lv1, 0.0) <= log_eps and min(lv2, 0.0) <= log_eps

    upper = horizon
    if admissible(upper):
        return upper
    if not admissible(lower):
        raise ValueError(
            f"no step size in [{lower}, {horizon}] meets the budget epsilon={epsilon}"
        )
    lo, hi = math.log(lower), math.log(upper)
    while hi - lo > rel_tol:
        mid = 0.5 * (lo + hi)
        if admissible(math.exp(mid)):
            lo = mid
        else:
            hi = mid
    delta = math.exp(lo)
    assert admissible(delta)
    return delta


# ---------------------------------------------------------------------------
# Empirical Lipschitz tracking
# ---------------------------------------------------------------------------


def lipschitz_init(intensity, states: np.ndarray) -> float:
    """Initial Lipschitz estimate: max pairwise rate quotient over the cloud.

    1D states use the exact sorted-adjacent reduction (equivalent to the
    full pairwise maximum); higher dimensions sweep a capped subsample.
    Degenerate clouds (all states within 1e-12) fall back to a recorded
    floor of 1e-6.
    """
    states = np.asarray(states, float)
    rates = intensity.eval_many(states)
    if states.shape[0] < 2:
        raise ValueError("need at least two states")
    if states.shape[1] == 1:
        order = np.argsort(states[:, 0])
        dx = np.diff(states[order, 0])
        dr = np.abs(np.diff(rates[order]))
        keep = dx > 1e-12
        if not np.any(keep):
            logger.warning("all initial states coincide; Lipschitz floor %g used", LIPSCHITZ_FLOOR)
            return LIPSCHITZ_FLOOR
        return float(np.max(dr[keep] / dx[keep]))
    if states.shape[0] > _PAIR_CAP:
        pick = np.linspace(0, states.shape[0] - 1, _PAIR_CAP).astype(int)
        states, rates = states[pick], rates[pick]
    diff = states[:, None, :] - states[None, :, :]
    dist = np.sqrt(np.sum(diff**2, axis=-1))
    dr = np.abs(rates[:, None] - rates[None, :])
    mask = dist > 1e-12
    if not np.any(mask):
        logger.warning("all initial states coincide; Lipschitz floor %g used", LIPSCHITZ_FLOOR)
        return LIPSCHITZ_FLOOR
    return float(np.max(dr[mask] / dist[mask]))


def lipschitz_update(
    current: float,
    intensity,
    prev_states: np.ndarray,
    next_states: np.ndarray,
    rates_prev: np.ndarray | None = None,
    rates_next: np.ndarray | None = None,
) -> float:
    """Fold one propagation step into the running Lipschitz maximum.

    Particles are paired by index; zero-displacement pairs are skipped.
    The estimate never decreases.
    """
    prev_states = np.asarray(prev_states, float)
    next_states = np.asarray(next_states, float)
    if prev_states.shape != next_states.shape:
        raise ValueError("state lists must pair up by index")
    r0 = intensity.eval_many(prev_states) if rates_prev is None else rates_prev
    r1 = intensity.eval_many(next_states) if rates_next is None else rates_next
    dist = np.sqrt(np.sum((next_states - prev_states) ** 2, axis=-1))
    mask = dist > 1e-12
    if np.any(mask):
        step_max = float(np.max(np.abs(r1[mask] - r0[mask]) / dist[mask]))
        return max(current, step_max)
    return current


@dataclass
class LipschitzTracker:
    """Causal, non-decreasing empirical Lipschitz estimate of the rate."""

    value: float
    steps: int = 0

    @classmethod
    def from_cloud(cls, intensity, states, seed: float | None = None) -> "LipschitzTracker":
        states = np.asarray(states, float)
        degenerate = np.ptp(states, axis=0).max() <= 1e-12
        if degenerate and seed is not None:
            return cls(value=seed)  # point-mass cloud carries no slope information
        value = lipschitz_init(intensity, states)
        if seed is not None:
            value = max(value, seed)
        return cls(value=value)

    def update(self, intensity, prev_states, next_states, rates_prev=None, rates_next=None):
        self.value = lipschitz_update(
            self.value, intensity, prev_states, next_states, rates_prev, rates_next
        )
        self.steps += 1
        return self.value


# ---------------------------------------------------------------------------
# Truncation bias bound
# ---------------------------------------------------------------------------


def truncation_bias_bound(delta: float, lipschitz: float, horizon: float, m: int) -> BoundValue:
    """Bound on the weight mass lost by clipping negative estimates to zero.

    ``exp(T l / 2) * ((1 + 4 D^2 l)/(1 - 4 D^2 l))^(m/2) * sqrt(m)
    * sqrt(2 exp(-1/(2 D)))`` for ``m = T / Delta`` segments, computed in
    log space.  Requires ``4 Delta^2 l < 1``.
    """
    if min(delta, lipschitz, horizon) <= 0 or m < 1:
        raise ValueError("delta, lipschitz, horizon must be positive and m >= 1")
    if 4.0 * delta**2 * lipschitz >= 1.0:
        raise ValueError("bound invalid: need 4 Delta^2 l < 1")
    if abs(m * delta - horizon) > delta:
        raise ValueError(f"m={m} is not T/Delta within rounding for T={horizon}, Delta={delta}")
    ratio = (1.0 + 4.0 * delta**2 * lipschitz) / (1.0 - 4.0 * delta**2 * lipschitz)
    log_val = (
        0.5 * horizon * lipschitz
        + 0.5 * m * math.log(ratio)
        + 0.5 * math.log(m)
        + 0.5 * (math.log(2.0) - 1.0 / (2.0 * delta))
    )
    return BoundValue(math.exp(log_val) if log_val < 709 else math.inf, log_val)


# ---------------------------------------------------------------------------
# Sum-until-positive (Wald) estimator, kept as a bias demonstrator
# ---------------------------------------------------------------------------


def wald_estimate(spec, intensity, horizon: float, x0, rng, max_draws: int = 10**6):
    """Draw segment estimates over [0, T] until their running sum is positive.

    Returns ``(sum, K)`` where K is the first index with a positive sum.
    The sum is guaranteed positive but is a biased estimate of the path
    integral weight, with bias growing with the state drift; a hard cap
    turns non-termination into an error.
    """
    values, counts = wald_estimate_many(spec, intensity, horizon, x0, 1, rng, max_draws)
    return float(values[0]), int(counts[0])


def wald_estimate_many(spec, intensity, horizon, x0, n: int, rng, max_draws: int = 10**6):
    """Vectorised batch of sum-until-positive estimates (eta = T)."""
    x0 = np.atleast_1d(np.asarray(x0, float))
    totals = np.zeros(n)
    counts = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    draws = 0
    while active.size:
        if draws >= max_draws:
            raise RuntimeError(
                f"{active.size} estimates still non-positive after {max_draws} draws"
            )
        batch = poisson_segment_estimate_many(
            spec, intensity, horizon, 0.0, horizon, np.tile(x0, (active.size, 1)), rng
        )
        totals[active] += batch.value
        counts[active] += 1
        active = active[totals[active] <= 0]
        draws += 1
    return totals, counts


# ---------------------------------------------------------------------------
# Endpoint-conditioned Monte Carlo of the negative-estimate probability
# ---------------------------------------------------------------------------


def endpoint_conditioned_estimates(
    spec: sde.LinearSdeSpec,
    intensity,
    eta: float,
    delta: float,
    x0,
    x_end,
    reps: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Estimate values with auxiliary states drawn from the pinned bridge.

    Conditionally on both endpoints these average to the exact conditional
    weight ``E[exp(-int rate) | X_0, X_Delta]``; the companion of the
    closed-form conditional expectation available for the benchmark model.
    """
    x0 = np.atleast_1d(np.asarray(x0, float))
    x_end = np.atleast_1d(np.asarray(x_end, float))
    kappa = rng.poisson(eta, reps)
    rate0 = intensity.eval_many(x0[None, :])[0]
    values = np.full(reps, -delta * rate0)
    sign = np.ones(reps, dtype=np.int8)
    k_max = int(kappa.max()) if reps else 0
    if k_max > 0:
        taus = rng.uniform(0.0, delta, (reps, k_max))
        taus[np.arange(k_max)[None, :] >= kappa[:, None]] = np.inf
        taus.sort(axis=1)
        x_cur = np.tile(x0, (reps, 1))
        t_cur = np.zeros(reps)
        ends = np.tile(x_end, (reps, 1))
        for j in range(k_max):
            idx = np.nonzero(kappa > j)[0]
            tau_j = taus[idx, j]
            x_new = sde.sample_bridge_many(
                spec, tau_j - t_cur[idx], delta - tau_j, x_cur[idx], ends[idx], rng
            )
            bracket = 1.0 + (delta / eta) * (rate0 - intensity.eval_many(x_new))
            sign[idx] = sign[idx] * np.where(bracket < 0, -1, np.where(bracket > 0, 1, 0)).astype(np.int8)
            with np.errstate(divide="ignore"):
                values[idx] += np.log(np.abs(bracket))
            x_cur[idx] = x_new
            t_cur[idx] = tau_j
    return sign * np.exp(values)


def endpoint_conditioned_negative_prob(
    spec: sde.LinearSdeSpec,
    intensity,
    eta: float,
    delta: float,
    x0,
    x_end,
    reps: int,
    rng: np.random.Generator,
) -> float:
    """Monte Carlo estimate of ``Pr(E < 0 | kappa > 0, X_Delta = x_end)``.

    The companion harness of the endpoint bound: auxiliary counts are
    Poisson(eta) conditioned positive, auxiliary states are drawn from the
    diffusion bridge pinned at both endpoints, and only the sign of the
    bracket product matters (the exponential prefactor is positive).
    """
    if eta <= 0 or delta <= 0:
        raise ValueError("eta and delta must be positive")
    x0 = np.atleast_1d(np.asarray(x0, float))
    x_end = np.atleast_1d(np.asarray(x_end, float))

    kappa = np.empty(reps, dtype=np.int64)
    filled = 0
    while filled < reps:
        block = rng.poisson(eta, max(reps - filled, 1024))
        block = block[block > 0]
        take = min(block.size, reps - filled)
        kappa[filled : filled + take] = block[:take]
        filled += take

    rate0 = intensity.eval_many(x0[None, :])[0]
    k_max = int(kappa.max())
    taus = rng.uniform(0.0, delta, (reps, k_max))
    taus[np.arange(k_max)[None, :] >= kappa[:, None]] = np.inf
    taus.sort(axis=1)

    sign = np.ones(reps, dtype=np.int8)
    x_cur = np.tile(x0, (reps, 1))
    t_cur = np.zeros(reps)
    ends = np.tile(x_end, (reps, 1))
    for j in range(k_max):
        idx = np.nonzero(kappa > j)[0]
        tau_j = taus[idx, j]
        x_new = sde.sample_bridge_many(
            spec, tau_j - t_cur[idx], delta - tau_j, x_cur[idx], ends[idx], rng
        )
        rates_tau = intensity.eval_many(x_new)
        bracket = 1.0 + (delta / eta) * (rate0 - rates_tau)
        sign[idx] = sign[idx] * np.where(bracket < 0, -1, 1).astype(np.int8)
        x_cur[idx] = x_new
        t_cur[idx] = tau_j
    return float(np.mean(sign < 0))
