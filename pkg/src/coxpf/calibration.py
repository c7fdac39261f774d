"""Parameter calibration: PMMH sampling, chain diagnostics and rMSE fits.

The sampler is particle marginal Metropolis-Hastings with a Gaussian
random-walk proposal and running covariance adaptation: a likelihood
*estimate* stands in for the intractable likelihood, a fresh estimate is
drawn for every proposal, and the estimate stored for the current state is
never refreshed.  Any positive unbiased estimator keeps the parameter
posterior exact; a zero estimate (possible under weight truncation) simply
forces rejection.

The error-vs-budget analysis lives here too: least-squares fits of the
empirical relative-MSE laws for the two filters and the implied
budget-optimal step sizes.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

__all__ = [
    "PmmhConfig",
    "Chain",
    "pmmh_run",
    "adapt_proposal_covariance",
    "ess",
    "fit_rmse_model",
    "rmse_cell",
    "fit_cost_model",
    "save_chain",
    "chain_summary",
]

ADAPT_WARMUP = 100
ADAPT_JITTER = 1e-6


@dataclass(frozen=True)
class PmmhConfig:
    """Random-walk PMMH configuration with independent uniform priors."""

    param_names: tuple[str, ...]
    lower: np.ndarray
    upper: np.ndarray
    iterations: int
    burn_in: int = 0
    base_scale: float = 0.1
    adapt: bool = True
    adapt_burnin_only: bool = False

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, float))
        upper = np.atleast_1d(np.asarray(self.upper, float))
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        if len(self.param_names) != lower.size or lower.size != upper.size:
            raise ValueError("parameter names and bounds must align")
        if not np.all(np.isfinite(lower) & np.isfinite(upper) & (lower < upper)):
            raise ValueError("bounds must be finite with lower < upper")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("need iterations > burn_in >= 0")

    @property
    def dim(self) -> int:
        return self.lower.size

    def in_support(self, theta: np.ndarray) -> bool:
        return bool(np.all((theta >= self.lower) & (theta <= self.upper)))


@dataclass
class Chain:
    """PMMH output: one row per iteration (post-move state)."""

    draws: np.ndarray          # (M, d)
    log_liks: np.ndarray       # (M,)
    accepted: np.ndarray       # (M,) bool
    proposal_trace: np.ndarray  # (M, d, d) proposal covariance used at each step
    burn_in: int = 0

    @property
    def acceptance_rate(self) -> float:
        return float(self.accepted.mean())

    def retained(self) -> np.ndarray:
        return self.draws[self.burn_in :]


def adapt_proposal_covariance(draws: np.ndarray, base_scale: float = 0.1) -> np.ndarray:
    """Proposal covariance from the chain so far.

    Below the warm-up length the proposal stays at ``base_scale * I``;
    afterwards it is ``(2.38^2 / d) * (cov(draws) + 1e-6 I)``.
    """
    draws = np.atleast_2d(np.asarray(draws, float))
    n, d = draws.shape
    if n < 2 or n < ADAPT_WARMUP:
        return base_scale * np.eye(d)
    scale = 2.38**2 / d
    centred = draws - draws.mean(axis=0)
    emp = centred.T @ centred / (n - 1)
    return scale * (emp + ADAPT_JITTER * np.eye(d))


def pmmh_run(
    cfg: PmmhConfig,
    log_likelihood: Callable[[np.ndarray, np.random.Generator], float],
    theta0,
    rng: np.random.Generator,
) -> Chain:
    """Run the PMMH chain.

    ``log_likelihood(theta, rng)`` draws a fresh likelihood estimate (in
    log space; ``-inf`` encodes a zero estimate).  Proposals outside the
    prior box are rejected without calling the backend.
    """
    theta = np.atleast_1d(np.asarray(theta0, float))
    if not cfg.in_support(theta):
        raise ValueError(f"initial point {theta} outside the prior support")
    d = cfg.dim
    current_ll = log_likelihood(theta, rng)

    draws = np.empty((cfg.iterations, d))
    log_liks = np.empty(cfg.iterations)
    accepted = np.zeros(cfg.iterations, dtype=bool)
    proposal_trace = np.empty((cfg.iterations, d, d))

    # running moments for O(d^2) covariance adaptation
    run_sum = theta.copy()
    run_outer = np.outer(theta, theta)
    count = 1
    frozen_cov = None

    for i in range(cfg.iterations):
        if not cfg.adapt or count < ADAPT_WARMUP:
            cov = cfg.base_scale * np.eye(d)
        elif cfg.adapt_burnin_only and i >= cfg.burn_in:
            if frozen_cov is None:
                frozen_cov = _running_cov(run_sum, run_outer, count)
            cov = frozen_cov
        else:
            cov = _running_cov(run_sum, run_outer, count)
        proposal_trace[i] = cov

        step = np.linalg.cholesky(cov) @ rng.standard_normal(d)
        proposal = theta + step
        if cfg.in_support(proposal):
            proposal_ll = log_likelihood(proposal, rng)
            if math.log(rng.uniform()) < proposal_ll - current_ll:
                theta = proposal
                current_ll = proposal_ll
                accepted[i] = True
        draws[i] = theta
        log_liks[i] = current_ll
        run_sum += theta
        run_outer += np.outer(theta, theta)
        count += 1

    return Chain(
        draws=draws,
        log_liks=log_liks,
        accepted=accepted,
        proposal_trace=proposal_trace,
        burn_in=cfg.burn_in,
    )


def _running_cov(run_sum, run_outer, count):
    d = run_sum.size
    mean = run_sum / count
    emp = (run_outer - count * np.outer(mean, mean)) / (count - 1)
    return (2.38**2 / d) * (emp + ADAPT_JITTER * np.eye(d))


def ess(series) -> float:
    """Effective sample size via the initial-positive-sequence truncation.

    ``M / (-1 + 2 * sum_{t=0..K} (rho_{2t} + rho_{2t+1}))`` with rho the
    biased-normalisation autocorrelation and K the last index whose paired
    sum is still positive.  A series with no variance has no ESS and
    raises; a non-positive denominator (strong negative correlation)
    returns ``inf``.
    """
    x = np.asarray(series, float)
    m = x.size
    if m < 10:
        raise ValueError("need at least 10 points")
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    x = x - x.mean()
    var = float(x @ x) / m
    if var == 0:
        raise ValueError("zero-variance series: ESS undefined")
    n_fft = 1 << (2 * m - 1).bit_length()
    spectrum = np.fft.rfft(x, n_fft)
    acov = np.fft.irfft(spectrum * np.conj(spectrum), n_fft)[:m].real / m
    rho = acov / var

    total = 0.0
    for t in range(0, m - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        total += pair
    denom = -1.0 + 2.0 * total
    if denom <= 0:
        return math.inf
    return m / denom


# ---------------------------------------------------------------------------
# Empirical rMSE laws and the CPU-cost model
# ---------------------------------------------------------------------------


def fit_rmse_model(deltas, rmses, cpu_budget: float, model: str = "discretised"):
    """Least-squares fit of the budgeted rMSE law; returns (c1, c2, delta*).

    ``discretised`` fits ``c1/(C delta) + c2 delta^2`` with minimiser
    ``(c1/(c2 C))^(1/3)``; ``poisson`` fits the surrogate
    ``c1/(C delta) + c2 exp(-1/(2 delta))`` with minimiser
    ``1 / (2 log(c2 C / (2 c1)))``.  Non-positive fitted coefficients mean
    the data do not follow the law and raise.
    """
    deltas = np.asarray(deltas, float)
    rmses = np.asarray(rmses, float)
    if deltas.size < 4:
        raise ValueError("need at least 4 (delta, rmse) points")
    col_var = 1.0 / (cpu_budget * deltas)
    if model == "discretised":
        col_bias = deltas**2
    elif model == "poisson":
        col_bias = np.exp(-1.0 / (2.0 * deltas))
    else:
        raise ValueError(f"unknown rmse model {model!r}")
    design = np.column_stack([col_var, col_bias])
    (c1, c2), *_ = np.linalg.lstsq(design, rmses, rcond=None)
    if c1 <= 0 or c2 <= 0:
        raise ValueError(f"fitted coefficients not positive (c1={c1:.3g}, c2={c2:.3g}); model mismatch")
    if model == "discretised":
        delta_star = (c1 / (c2 * cpu_budget)) ** (1.0 / 3.0)
    else:
        ratio = c2 * cpu_budget / (2.0 * c1)
        if ratio <= 1.0:
            raise ValueError("budget too small for the surrogate minimiser")
        delta_star = 1.0 / (2.0 * math.log(ratio))
    return float(c1), float(c2), float(delta_star)


def rmse_cell(run_once: Callable[[int], float], truth: float, reps: int):
    """Relative MSE of a likelihood estimator over seeded replicates.

    ``run_once(rep)`` returns one likelihood estimate; wall time is
    averaged over the replicates.  Returns ``(rmse, seconds_per_run)``.
    """
    t0 = time.perf_counter()
    values = np.array([run_once(rep) for rep in range(reps)])
    elapsed = time.perf_counter() - t0
    rmse = float(np.mean((values - truth) ** 2) / truth**2)
    return rmse, elapsed / reps


def fit_cost_model(work_units, seconds):
    """Fit ``log seconds = log k + slope * log work``; returns (slope, k).

    Used to verify that measured filter cost is proportional to
    ``N T / Delta`` before any budget-optimal step size is computed.
    """
    work = np.log(np.asarray(work_units, float))
    secs = np.log(np.asarray(seconds, float))
    slope, intercept = np.polyfit(work, secs, 1)
    return float(slope), float(math.exp(intercept))


# ---------------------------------------------------------------------------
# Chain persistence
# ---------------------------------------------------------------------------


def save_chain(path, chain: Chain, param_names) -> None:
    """Columnar text: iteration, parameters, log-likelihood, accepted."""
    path = Path(path)
    header = "iteration," + ",".join(param_names) + ",log_likelihood,accepted"
    rows = [header]
    for i in range(chain.draws.shape[0]):
        theta = ",".join(f"{v:.17g}" for v in chain.draws[i])
        rows.append(f"{i},{theta},{chain.log_liks[i]:.17g},{int(chain.accepted[i])}")
    path.write_text("\n".join(rows) + "\n")


def chain_summary(chain: Chain, param_names) -> dict:
    """Posterior means, SDs and ESS per parameter over the retained draws."""
    retained = chain.retained()
    summary = {
        "iterations": int(chain.draws.shape[0]),
        "burn_in": int(chain.burn_in),
        "acceptance_rate": chain.acceptance_rate,
        "parameters": {},
    }
    for j, name in enumerate(param_names):
        series = retained[:, j]
        try:
            series_ess = ess(series)
        except ValueError:
            series_ess = float("nan")
        summary["parameters"][name] = {
            "mean": float(series.mean()),
            "sd": float(series.std(ddof=1)),
            "ess": series_ess if math.isfinite(series_ess) else None,
        }
    return summary
