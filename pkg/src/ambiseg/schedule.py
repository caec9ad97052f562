"""Noise schedule and closed-form Gaussian diffusion math.

Masks are diffused in a symmetric [-1, 1] encoding (background -1,
foreground +1).  All schedule quantities are kept in float64; the
operational functions accept either numpy arrays or torch tensors and
either a scalar timestep or one timestep per batch element.

Timesteps are 1-indexed: ``t`` runs from 1 to ``T``.  The cumulative
signal fraction ``gamma_t`` is the running product of ``alpha_i`` for
``i <= t``, with the convention ``gamma_0 = 1`` so the posterior at
``t = 1`` is well defined (degenerate: mean ``x0``, variance 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "NoiseSchedule",
    "PosteriorParams",
    "make_linear_schedule",
    "q_sample",
    "posterior_params",
    "predict_x0_from_eps",
]

# Standard linear-schedule endpoints at the reference length T=1000.
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
REFERENCE_T = 1000


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable per-timestep diffusion coefficients.

    Attributes:
        betas: length-T array of per-step noise variances, each in (0, 1).
        alphas: 1 - betas.
        gammas: running products of alphas (strictly decreasing, in (0, 1)).
    """

    betas: np.ndarray
    alphas: np.ndarray
    gammas: np.ndarray

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.array(betas, dtype=np.float64)  # copy: frozen below
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a nonempty 1-D sequence")
        if not np.all(np.isfinite(betas)):
            raise ValueError("all betas must be finite")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("all betas must lie strictly in (0, 1)")
        alphas = 1.0 - betas
        gammas = np.cumprod(alphas)
        sched = cls(betas=betas, alphas=alphas, gammas=gammas)
        betas.setflags(write=False)
        alphas.setflags(write=False)
        gammas.setflags(write=False)
        return sched

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def _check_t(self, t) -> np.ndarray:
        t_arr = np.asarray(t)
        if not np.issubdtype(t_arr.dtype, np.integer):
            raise ValueError(f"timestep must be integer, got dtype {t_arr.dtype}")
        if np.any(t_arr < 1) or np.any(t_arr > self.T):
            raise ValueError(f"timestep {t} out of range [1, {self.T}]")
        return t_arr

    def beta(self, t):
        return self.betas[self._check_t(t) - 1]

    def alpha(self, t):
        return self.alphas[self._check_t(t) - 1]

    def gamma(self, t):
        return self.gammas[self._check_t(t) - 1]

    def gamma_prev(self, t):
        """gamma_{t-1}, with gamma_0 = 1."""
        t_arr = self._check_t(t)
        return np.where(t_arr > 1, self.gammas[np.maximum(t_arr - 2, 0)], 1.0)

    def posterior_variance(self, t):
        """Variance of q(x_{t-1} | x_t, x_0): (1-gamma_{t-1})(1-alpha_t)/(1-gamma_t)."""
        t_arr = self._check_t(t)
        gp = self.gamma_prev(t_arr)
        return (1.0 - gp) * (1.0 - self.alpha(t_arr)) / (1.0 - self.gamma(t_arr))

    def posterior_log_variance_clipped(self, t):
        """Log posterior variance with the degenerate t=1 value replaced.

        The t=1 posterior variance is exactly zero, so its log is clipped to
        the t=2 value (the smallest nonzero one); for T=1 schedules beta_1 is
        used.  This is the lower endpoint of the learned-variance range.
        """
        t_arr = self._check_t(t)
        if self.T == 1:
            return np.full(t_arr.shape, np.log(self.betas[0]))
        var = np.where(
            t_arr > 1,
            self.posterior_variance(np.maximum(t_arr, 2)),
            self.posterior_variance(2),
        )
        return np.log(var)


@dataclass(frozen=True)
class PosteriorParams:
    """Mean and (scalar per timestep) variance of q(x_{t-1} | x_t, x_0)."""

    mean: object
    variance: object


def make_linear_schedule(T: int, beta_start: float | None = None,
                         beta_end: float | None = None) -> NoiseSchedule:
    """Linear beta schedule over T steps.

    When endpoints are not given, the standard 1e-4 -> 0.02 endpoints are
    scaled by 1000/T so the total injected noise stays comparable across
    schedule lengths.  Explicit endpoints are used as passed.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    scale = REFERENCE_T / T
    scaled_default = beta_start is None or beta_end is None
    if beta_start is None:
        beta_start = DEFAULT_BETA_START * scale
    if beta_end is None:
        beta_end = DEFAULT_BETA_END * scale
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    try:
        return NoiseSchedule.from_betas(betas)
    except ValueError as e:
        if scaled_default and max(beta_start, beta_end) >= 1.0:
            raise ValueError(
                f"default endpoints scaled by 1000/T reach {max(beta_start, beta_end)} "
                f"at T={T}; schedules this short need explicit beta_start/beta_end"
            ) from e
        raise


def _match_coef(coef, like):
    """Format a float64 coefficient (scalar or per-batch vector) to broadcast
    against `like`, converting to a torch tensor when `like` is one."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 1:
        coef = coef.reshape((-1,) + (1,) * (np.ndim(like) - 1))
    if torch.is_tensor(like):
        return torch.as_tensor(coef, dtype=like.dtype, device=like.device)
    if coef.ndim == 0:
        return float(coef)
    return coef


def _check_same_shape(a, b, name_a: str, name_b: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(
            f"{name_a} shape {tuple(a.shape)} does not match {name_b} shape {tuple(b.shape)}"
        )


def q_sample(x0, t, eps, s: NoiseSchedule):
    """Forward marginal draw: x_t = sqrt(gamma_t) x0 + sqrt(1 - gamma_t) eps."""
    _check_same_shape(x0, eps, "x0", "eps")
    g = s.gamma(t)
    c_signal = _match_coef(np.sqrt(g), x0)
    c_noise = _match_coef(np.sqrt(1.0 - g), x0)
    return c_signal * x0 + c_noise * eps


def posterior_params(x0, x_t, t, s: NoiseSchedule) -> PosteriorParams:
    """Closed-form q(x_{t-1} | x_t, x_0) mean and variance (gamma_0 = 1)."""
    _check_same_shape(x0, x_t, "x0", "x_t")
    a = s.alpha(t)
    g = s.gamma(t)
    gp = s.gamma_prev(t)
    coef_x0 = np.sqrt(gp) * (1.0 - a) / (1.0 - g)
    coef_xt = np.sqrt(a) * (1.0 - gp) / (1.0 - g)
    mean = _match_coef(coef_x0, x0) * x0 + _match_coef(coef_xt, x_t) * x_t
    variance = (1.0 - gp) * (1.0 - a) / (1.0 - g)
    return PosteriorParams(mean=mean, variance=variance)


def predict_x0_from_eps(x_t, t, eps_hat, s: NoiseSchedule, clip: bool = True):
    """Invert the forward marginal: x0_hat = (x_t - sqrt(1-gamma_t) eps_hat) / sqrt(gamma_t).

    The reconstruction is clipped to [-1, 1] by default; unclipped values
    blow up at large t (1/sqrt(gamma_t) amplification) and destabilize any
    consumer of x0_hat early in training.
    """
    _check_same_shape(x_t, eps_hat, "x_t", "eps_hat")
    g = s.gamma(t)
    c_noise = _match_coef(np.sqrt(1.0 - g), x_t)
    c_inv = _match_coef(1.0 / np.sqrt(g), x_t)
    x0_hat = (x_t - c_noise * eps_hat) * c_inv
    if clip:
        x0_hat = x0_hat.clip(-1.0, 1.0)
    return x0_hat
