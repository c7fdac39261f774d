"""Exact transition and bridge laws for linear-Gaussian diffusions.

The state model is

    dX_t = (b0 + b1(t) X_t) dt + sigma(t) dW_t,      X_t in R^n,

whose conditional laws are Gaussian at all horizons.  Two specialisations
carry closed forms and are the workhorses of the filters:

* Brownian motion (optionally with constant drift): identity transition,
  variance growing linearly in the interval length.
* Ornstein-Uhlenbeck, per coordinate ``dX_i = -phi_i (X_i - mu_i) dt + dW_i``
  with ``phi_i > 0``: geometric shrinkage towards ``mu`` and variance
  ``(1 - exp(-2 phi dt)) / (2 phi)``.

The generic case integrates the fundamental-matrix ODEs with fixed-step RK4.
All samplers are exact (no Euler steps anywhere) and driven by an explicit
``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "LinearSdeSpec",
    "GaussianTransition",
    "GaussianState",
    "InitialLaw",
    "transition_moments",
    "sample_transition",
    "bridge_moments",
    "sample_bridge",
    "stationary_moments",
    "transition_coeffs_diag",
    "sample_transition_many",
    "sample_bridge_many",
]

# Eigenvalues of a covariance more negative than this signal a genuine
# factorisation failure rather than round-off.
_COV_EIG_FLOOR = -1e-10


@dataclass(frozen=True)
class LinearSdeSpec:
    """Specification of a linear-Gaussian diffusion.

    Attributes
    ----------
    dim : int
        State dimension ``n``.
    kind : str
        ``"brownian"``, ``"ou"`` or ``"generic"``.
    drift_const : ndarray, shape (n,)
        Constant drift ``b0`` (state units per unit time).
    ou_rate, ou_mean : ndarray or None
        Mean-reversion rates ``phi_i > 0`` and levels ``mu_i`` for the
        Ornstein-Uhlenbeck specialisation.
    drift_mat, noise_mat : callable or None
        ``b1(t) -> (n, n)`` and ``sigma(t) -> (n, m)`` for the generic case.
    quad_steps : int
        RK4 steps per interval used by the generic moment integrator.
    """

    dim: int
    kind: str
    drift_const: np.ndarray
    ou_rate: np.ndarray | None = None
    ou_mean: np.ndarray | None = None
    drift_mat: Callable[[float], np.ndarray] | None = None
    noise_mat: Callable[[float], np.ndarray] | None = None
    quad_steps: int = 128

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"state dimension must be >= 1, got {self.dim}")
        if self.kind not in ("brownian", "ou", "generic"):
            raise ValueError(f"unknown SDE kind {self.kind!r}")
        if not np.all(np.isfinite(self.drift_const)):
            raise ValueError("non-finite constant drift")
        if self.kind == "ou":
            if self.ou_rate is None or self.ou_mean is None:
                raise ValueError("OU specialisation needs rates and means")
            if not (np.all(np.isfinite(self.ou_rate)) and np.all(self.ou_rate > 0)):
                raise ValueError("OU rates must be finite and > 0")
            if not np.all(np.isfinite(self.ou_mean)):
                raise ValueError("non-finite OU means")
        if self.kind == "generic" and (self.drift_mat is None or self.noise_mat is None):
            raise ValueError("generic specification needs drift_mat and noise_mat")

    @classmethod
    def brownian(cls, dim: int = 1, drift=None) -> "LinearSdeSpec":
        """Standard Brownian motion, optionally with a constant drift vector."""
        b0 = np.zeros(dim) if drift is None else np.atleast_1d(np.asarray(drift, float))
        if b0.shape != (dim,):
            raise ValueError(f"drift shape {b0.shape} incompatible with dim={dim}")
        return cls(dim=dim, kind="brownian", drift_const=b0)

    @classmethod
    def ornstein_uhlenbeck(cls, rate, mean) -> "LinearSdeSpec":
        """Per-coordinate OU process with unit diffusion."""
        phi = np.atleast_1d(np.asarray(rate, float))
        mu = np.atleast_1d(np.asarray(mean, float))
        if phi.shape != mu.shape:
            raise ValueError("rate and mean must have the same length")
        return cls(dim=phi.size, kind="ou", drift_const=phi * mu, ou_rate=phi, ou_mean=mu)

    @classmethod
    def generic(cls, dim, drift_const, drift_mat, noise_mat, quad_steps: int = 128):
        b0 = np.asarray(drift_const, float).reshape(dim)
        return cls(
            dim=dim,
            kind="generic",
            drift_const=b0,
            drift_mat=drift_mat,
            noise_mat=noise_mat,
            quad_steps=quad_steps,
        )

    @property
    def is_diagonal(self) -> bool:
        return self.kind in ("brownian", "ou")


def _symmetric_sqrt(cov: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root with eigenvalue clamping at zero."""
    cov = 0.5 * (cov + cov.T)
    eigval, eigvec = np.linalg.eigh(cov)
    if eigval.min() < _COV_EIG_FLOOR * max(1.0, abs(eigval.max())):
        raise ValueError(f"covariance not PSD: min eigenvalue {eigval.min():.3e}")
    eigval = np.clip(eigval, 0.0, None)
    return (eigvec * np.sqrt(eigval)) @ eigvec.T


@dataclass(frozen=True)
class GaussianTransition:
    """Gaussian conditional law ``X_t | X_s = x ~ N(phi x + shift, cov)``."""

    s: float
    t: float
    phi: np.ndarray
    shift: np.ndarray
    cov: np.ndarray
    sqrt_cov: np.ndarray

    def mean(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        return x @ self.phi.T + self.shift

    def sample(self, x, rng: np.random.Generator) -> np.ndarray:
        x = np.asarray(x, float)
        z = rng.standard_normal(x.shape)
        return self.mean(x) + z @ self.sqrt_cov.T


@dataclass(frozen=True)
class GaussianState:
    """Plain Gaussian over the state space (bridge and initial laws)."""

    mean: np.ndarray
    cov: np.ndarray
    sqrt_cov: np.ndarray

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        shape = self.mean.shape if size is None else (size,) + self.mean.shape
        z = rng.standard_normal(shape)
        return self.mean + z @ self.sqrt_cov.T


def _check_interval(s: float, t: float):
    if not (np.isfinite(s) and np.isfinite(t)):
        raise ValueError("non-finite interval endpoints")
    if s < 0 or t < s:
        raise ValueError(f"need 0 <= s <= t, got s={s}, t={t}")


def _generic_moments(spec: LinearSdeSpec, s: float, t: float):
    """RK4 integration of the transition-moment ODEs on [s, t].

    d(phi)/du = b1(u) phi,  d(a)/du = b1(u) a + b0,
    d(R)/du = b1(u) R + R b1(u)^T + sigma(u) sigma(u)^T.
    """
    n = spec.dim
    phi = np.eye(n)
    a = np.zeros(n)
    big_r = np.zeros((n, n))
    if t == s:
        return phi, a, big_r
    steps = spec.quad_steps
    h = (t - s) / steps

    def derivs(u, phi, a, big_r):
        b1 = np.asarray(spec.drift_mat(u), float)
        sig = np.asarray(spec.noise_mat(u), float)
        return b1 @ phi, b1 @ a + spec.drift_const, b1 @ big_r + big_r @ b1.T + sig @ sig.T

    u = s
    for _ in range(steps):
        k1 = derivs(u, phi, a, big_r)
        k2 = derivs(u + 0.5 * h, phi + 0.5 * h * k1[0], a + 0.5 * h * k1[1], big_r + 0.5 * h * k1[2])
        k3 = derivs(u + 0.5 * h, phi + 0.5 * h * k2[0], a + 0.5 * h * k2[1], big_r + 0.5 * h * k2[2])
        k4 = derivs(u + h, phi + h * k3[0], a + h * k3[1], big_r + h * k3[2])
        phi = phi + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        a = a + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        big_r = big_r + (h / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        u += h
    return phi, a, big_r


def transition_moments(spec: LinearSdeSpec, s: float, t: float) -> GaussianTransition:
    """Moments of ``X_t | X_s``: mean map ``x -> phi x + shift`` and covariance.

    Brownian and OU use closed forms; the generic case integrates the
    fundamental-matrix ODEs.
    """
    _check_interval(s, t)
    dt = t - s
    if spec.kind == "brownian":
        phi = np.eye(spec.dim)
        shift = spec.drift_const * dt
        cov = dt * np.eye(spec.dim)
    elif spec.kind == "ou":
        decay = np.exp(-spec.ou_rate * dt)
        phi = np.diag(decay)
        shift = spec.ou_mean * (1.0 - decay)
        cov = np.diag(-np.expm1(-2.0 * spec.ou_rate * dt) / (2.0 * spec.ou_rate))
    else:
        phi, shift, cov = _generic_moments(spec, s, t)
    return GaussianTransition(s=s, t=t, phi=phi, shift=shift, cov=cov, sqrt_cov=_symmetric_sqrt(cov))


def sample_transition(spec, s, t, x, rng: np.random.Generator) -> np.ndarray:
    """Exact draw of ``X_t`` given ``X_s = x``."""
    return transition_moments(spec, s, t).sample(x, rng)


def bridge_moments(spec, s: float, tau: float, t: float, x_s, x_t) -> GaussianState:
    """Law of ``X_tau`` conditioned on both endpoints ``X_s = x_s, X_t = x_t``.

    Combines the forward law on [s, tau] with the reversed law on [tau, t]
    (information form): covariance ``(R1^-1 + Rhat^-1)^-1`` with
    ``Rhat = phi^-1 R phi^-T`` and mean mixing the forward mean with the
    pulled-back endpoint ``phi^-1 (x_t - shift)``.
    """
    if not (s < tau < t):
        raise ValueError(f"need s < tau < t, got {s}, {tau}, {t}")
    x_s = np.asarray(x_s, float)
    x_t = np.asarray(x_t, float)
    fwd = transition_moments(spec, s, tau)
    bwd = transition_moments(spec, tau, t)
    r1 = fwd.cov
    phi_inv = np.linalg.inv(bwd.phi)
    r2_hat = phi_inv @ bwd.cov @ phi_inv.T
    mu1 = fwd.mean(x_s)
    mu2_hat = (x_t - bwd.shift) @ phi_inv.T
    total = r1 + r2_hat
    gain = np.linalg.solve(total.T, r1.T).T  # r1 @ total^-1
    mean = mu1 + (mu2_hat - mu1) @ gain.T
    cov = gain @ r2_hat
    return GaussianState(mean=mean, cov=cov, sqrt_cov=_symmetric_sqrt(cov))


def sample_bridge(spec, s, tau, t, x_s, x_t, rng: np.random.Generator) -> np.ndarray:
    """Exact draw of ``X_tau`` given both endpoints."""
    return bridge_moments(spec, s, tau, t, x_s, x_t).sample(rng)


def stationary_moments(spec: LinearSdeSpec):
    """Stationary mean and covariance of the OU specialisation.

    Returns ``(mu, diag(1 / (2 phi)))``; Brownian motion has no stationary
    law and raises.
    """
    if spec.kind != "ou":
        raise ValueError(f"no stationary law for kind {spec.kind!r}")
    return spec.ou_mean.copy(), np.diag(1.0 / (2.0 * spec.ou_rate))


# ---------------------------------------------------------------------------
# Vectorised helpers for the diagonal (Brownian / OU) specialisations.  The
# particle filters and the segment estimator propagate clouds with
# heterogeneous interval lengths, so the coefficients broadcast over dt.
# ---------------------------------------------------------------------------


def transition_coeffs_diag(spec: LinearSdeSpec, dt):
    """Per-coordinate affine coefficients ``x -> mult * x + shift + sd * Z``.

    ``dt`` may be any shape; outputs have shape ``dt.shape + (dim,)``.
    Only valid for the diagonal kinds.
    """
    if not spec.is_diagonal:
        raise ValueError("diagonal coefficients only exist for brownian/ou kinds")
    dt = np.asarray(dt, float)[..., None]
    if np.any(dt < 0):
        raise ValueError("negative interval")
    if spec.kind == "brownian":
        mult = np.ones(dt.shape[:-1] + (spec.dim,))
        shift = spec.drift_const * dt
        sd = np.sqrt(dt) * np.ones(spec.dim)
    else:
        decay = np.exp(-spec.ou_rate * dt)
        mult = decay
        shift = spec.ou_mean * (1.0 - decay)
        sd = np.sqrt(-np.expm1(-2.0 * spec.ou_rate * dt) / (2.0 * spec.ou_rate))
    return mult, shift, sd


def sample_transition_many(spec, dt, x, rng: np.random.Generator) -> np.ndarray:
    """Propagate a batch of states over (possibly per-row) intervals ``dt``.

    ``x`` has shape (N, dim); ``dt`` is scalar or shape (N,).
    """
    x = np.asarray(x, float)
    if spec.is_diagonal:
        mult, shift, sd = transition_coeffs_diag(spec, dt)
        return mult * x + shift + sd * rng.standard_normal(x.shape)
    if np.ndim(dt) != 0:
        raise ValueError("generic specs support only a shared interval length")
    tr = transition_moments(spec, 0.0, float(dt))
    return tr.sample(x, rng)


def sample_bridge_many(spec, dt_left, dt_right, x_left, x_right, rng: np.random.Generator):
    """Batched endpoint-conditioned draws for diagonal specs.

    Draws ``X_tau | X_s = x_left, X_t = x_right`` where ``dt_left = tau - s``
    and ``dt_right = t - tau`` vary per row.
    """
    if not spec.is_diagonal:
        raise ValueError("batched bridge sampling supports brownian/ou kinds only")
    x_left = np.asarray(x_left, float)
    x_right = np.asarray(x_right, float)
    m_l, s_l, sd_l = transition_coeffs_diag(spec, dt_left)
    m_r, s_r, sd_r = transition_coeffs_diag(spec, dt_right)
    var_l = sd_l**2
    var_r_hat = sd_r**2 / m_r**2
    mu_l = m_l * x_left + s_l
    mu_r_hat = (x_right - s_r) / m_r
    total = var_l + var_r_hat
    with np.errstate(invalid="ignore", divide="ignore"):
        weight = np.where(total > 0, var_l / np.where(total > 0, total, 1.0), 0.0)
    mean = mu_l + weight * (mu_r_hat - mu_l)
    var = weight * var_r_hat
    return mean + np.sqrt(var) * rng.standard_normal(x_left.shape)


@dataclass(frozen=True)
class InitialLaw:
    """Initial state distribution: a point mass or a Gaussian."""

    mean: np.ndarray
    cov: np.ndarray | None = None

    @classmethod
    def point(cls, x) -> "InitialLaw":
        return cls(mean=np.atleast_1d(np.asarray(x, float)))

    @classmethod
    def gaussian(cls, mean, cov) -> "InitialLaw":
        mean = np.atleast_1d(np.asarray(mean, float))
        cov = np.atleast_2d(np.asarray(cov, float))
        return cls(mean=mean, cov=cov)

    @classmethod
    def stationary(cls, spec: LinearSdeSpec) -> "InitialLaw":
        mean, cov = stationary_moments(spec)
        return cls(mean=mean, cov=cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, size: int, rng: np.random.Generator) -> np.ndarray:
        if self.cov is None:
            return np.tile(self.mean, (size, 1))
        sqrt = _symmetric_sqrt(self.cov)
        return self.mean + rng.standard_normal((size, self.dim)) @ sqrt.T
