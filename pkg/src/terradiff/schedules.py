"""Variance-preserving noise schedules and parameterization algebra.

Convention: integer diffusion time t in [0, T], t=0 is clean data.  The
marginal of a noised sample is x_t = alpha_t * x + sigma_t * eps with
alpha_t^2 + sigma_t^2 = 1.  The velocity target is v = alpha_t * eps -
sigma_t * x; because (x, eps) -> (x_t, v) is a rotation, it inverts
exactly, which `from_v` exploits.

All schedule tables are float64.  When applied to float32 tensors the
coefficients downcast at the point of use via normal numpy promotion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError

DEFAULT_T = 1000
DEFAULT_BETA_START = 0.00085
DEFAULT_BETA_END = 0.012


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed (alpha_t, sigma_t) tables for t = 0..T.

    Immutable after construction; safe for concurrent reads.
    """

    T: int
    alpha: np.ndarray
    sigma: np.ndarray

    def coeffs(self, t):
        """(alpha_t, sigma_t) for scalar or integer-array ``t``."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ParameterError(f"t must lie in [0, {self.T}]")
        return self.alpha[t], self.sigma[t]


def build_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Build a variance-preserving schedule with scaled-linear betas.

    Betas for t = 1..T interpolate linearly in sqrt(beta) between the two
    endpoints; alpha_t = sqrt(prod_{s<=t} (1 - beta_s)) and
    sigma_t = sqrt(1 - alpha_t^2).
    """
    if T < 1:
        raise ParameterError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )
    betas = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), T, dtype=np.float64) ** 2
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    alpha = np.sqrt(alpha_bar)
    sigma = np.sqrt(1.0 - alpha_bar)
    return NoiseSchedule(T=T, alpha=alpha, sigma=sigma)


def _broadcast_coeff(c: np.ndarray, ndim: int) -> np.ndarray:
    # per-sample coefficients broadcast over trailing tensor axes
    if c.ndim == 0:
        return c
    return c.reshape(c.shape + (1,) * (ndim - 1))


def _check_pair(a: np.ndarray, b: np.ndarray, name_a: str, name_b: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name_a} shape {a.shape} != {name_b} shape {b.shape}")


def noise(x: np.ndarray, eps: np.ndarray, t, sched: NoiseSchedule) -> np.ndarray:
    """Forward-noise: x_t = alpha_t * x + sigma_t * eps.

    ``t`` is a scalar or an integer array matching the leading (batch)
    axis of ``x``.
    """
    x = np.asarray(x)
    eps = np.asarray(eps)
    _check_pair(x, eps, "x", "eps")
    a, s = sched.coeffs(t)
    a = _broadcast_coeff(a, x.ndim)
    s = _broadcast_coeff(s, x.ndim)
    return a * x + s * eps


def to_v(x: np.ndarray, eps: np.ndarray, t, sched: NoiseSchedule) -> np.ndarray:
    """Velocity target: v = alpha_t * eps - sigma_t * x."""
    x = np.asarray(x)
    eps = np.asarray(eps)
    _check_pair(x, eps, "x", "eps")
    a, s = sched.coeffs(t)
    a = _broadcast_coeff(a, x.ndim)
    s = _broadcast_coeff(s, x.ndim)
    return a * eps - s * x


def from_v(x_t: np.ndarray, v: np.ndarray, t, sched: NoiseSchedule):
    """Invert (noise, to_v): returns (x_hat, eps_hat).

    x_hat = alpha_t * x_t - sigma_t * v and eps_hat = sigma_t * x_t +
    alpha_t * v; exact because alpha^2 + sigma^2 = 1.
    """
    x_t = np.asarray(x_t)
    v = np.asarray(v)
    _check_pair(x_t, v, "x_t", "v")
    a, s = sched.coeffs(t)
    a = _broadcast_coeff(a, x_t.ndim)
    s = _broadcast_coeff(s, x_t.ndim)
    x_hat = a * x_t - s * v
    eps_hat = s * x_t + a * v
    return x_hat, eps_hat


def ddpm_sigma(sched: NoiseSchedule, t_from: int, t_to: int) -> float:
    """Posterior noise scale of the ancestral step t_from -> t_to.

    Scales the stochastic part of a partially stochastic DDIM step
    (eta = 1 reproduces the ancestral sampler variance).
    """
    if not (sched.T >= t_from > t_to >= 0):
        raise ParameterError(f"need T >= t_from > t_to >= 0, got {t_from} -> {t_to}")
    a_from, s_from = float(sched.alpha[t_from]), float(sched.sigma[t_from])
    a_to, s_to = float(sched.alpha[t_to]), float(sched.sigma[t_to])
    if s_from == 0.0:
        return 0.0
    ratio = 1.0 - (a_from / a_to) ** 2 if a_to > 0 else 1.0
    return (s_to / s_from) * np.sqrt(max(ratio, 0.0))
