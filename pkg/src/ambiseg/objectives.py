"""Training losses.

Three terms combine into the training objective::

    total = l_simple + lambda_vlb * l_vlb + beta_amb * l_amb

* ``l_simple`` -- mean squared error on the predicted noise.
* ``l_vlb_term`` -- the sampled timestep's variational-bound term, in
  nats per pixel: a Gaussian KL against the analytic posterior for
  t > 1, and a discretized-Gaussian negative log-likelihood of the clean
  mask at t = 1.  The noise prediction is detached inside the mean, so
  this term trains only the variance logits (the standard hybrid-loss
  treatment); the tiny weight keeps it from overwhelming l_simple.
* ``l_amb`` -- KL between the two latent ambiguity Gaussians.

The t = T prior term is constant in the parameters and exposed only as
the diagnostic :func:`l_prior_bits`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .ambiguity import LatentGaussian, kl_divergence
from .denoiser import DenoiserOutput, denoise_forward, interpolate_variance
from .schedule import NoiseSchedule, posterior_params, predict_x0_from_eps, q_sample, _match_coef

__all__ = [
    "LossWeights",
    "LossParts",
    "LossReport",
    "NonFiniteLossError",
    "l_simple",
    "l_vlb_term",
    "l_amb",
    "l_prior_bits",
    "total_loss",
    "vlb_full_sum",
]

# half-width of one quantization bin in the [-1, 1] mask encoding
# (256 levels -> full bin width 1/127.5)
_HALF_BIN = 1.0 / 255.0


class NonFiniteLossError(RuntimeError):
    """A loss term went NaN/inf; the message names the offending term."""


@dataclass(frozen=True)
class LossWeights:
    """Weights of the two regularizers in the total loss."""

    lambda_vlb: float = 0.001
    beta_amb: float = 0.001

    def __post_init__(self):
        for name in ("lambda_vlb", "beta_amb"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {val}")


@dataclass
class LossParts:
    """The three raw terms (tensors during training, floats in tests)."""

    l_simple: object
    l_vlb: object
    l_amb: object = 0.0


@dataclass
class LossReport:
    l_simple: object
    l_vlb: object
    l_amb: object
    total: object
    finite: dict  # per-term finiteness, as logged

    def scalars(self) -> dict:
        """JSON-ready view (used by the newline-delimited training log)."""
        def _f(x):
            return float(x.detach()) if torch.is_tensor(x) else float(x)

        return {
            "l_simple": _f(self.l_simple),
            "l_vlb": _f(self.l_vlb),
            "l_amb": _f(self.l_amb),
            "total": _f(self.total),
            "finite": dict(self.finite),
        }


def l_simple(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared noise-prediction error over batch and pixels."""
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    return ((eps_hat - eps) ** 2).mean()


def _gaussian_kl(mean_q, logvar_q, mean_p, logvar_p):
    """Pointwise KL(N(mean_q, e^logvar_q) || N(mean_p, e^logvar_p)) in nats."""
    return 0.5 * (
        logvar_p
        - logvar_q
        + torch.exp(logvar_q - logvar_p)
        + (mean_q - mean_p) ** 2 * torch.exp(-logvar_p)
        - 1.0
    )


def _discretized_gaussian_nll(x, mean, logvar):
    """-log of the probability mass the Gaussian puts on x's quantization bin.

    Edge bins absorb the full tail, so the masses over all 256 levels sum
    to one.  All tensors are pointwise; result is nats per pixel.
    """
    centered = x - mean
    inv_std = torch.exp(-0.5 * logvar)
    cdf_plus = torch.special.ndtr(inv_std * (centered + _HALF_BIN))
    cdf_min = torch.special.ndtr(inv_std * (centered - _HALF_BIN))
    log_cdf_plus = torch.log(cdf_plus.clamp(min=1e-12))
    log_one_minus_cdf_min = torch.log((1.0 - cdf_min).clamp(min=1e-12))
    log_delta = torch.log((cdf_plus - cdf_min).clamp(min=1e-12))
    log_probs = torch.where(
        x < -0.999,
        log_cdf_plus,
        torch.where(x > 0.999, log_one_minus_cdf_min, log_delta),
    )
    return -log_probs


def l_vlb_term(x0: torch.Tensor, x_t: torch.Tensor, t,
               out: DenoiserOutput, s: NoiseSchedule) -> torch.Tensor:
    """The variational-bound term for the sampled timesteps, nats/pixel.

    `t` may be an int or a (B,) array/tensor; elements with t > 1
    contribute the posterior KL and elements with t = 1 the discretized
    likelihood.  The model mean uses the *detached* noise prediction, so
    gradients reach only the variance logits.
    """
    t_np = np.atleast_1d(np.asarray(t.cpu() if torch.is_tensor(t) else t))
    if t_np.shape[0] == 1 and x0.shape[0] > 1:
        t_np = np.repeat(t_np, x0.shape[0])

    # model p(x_{t-1} | x_t): posterior mean at the detached x0-estimate,
    # learned-range variance
    x0_hat = predict_x0_from_eps(x_t, t_np, out.eps_hat.detach(), s, clip=True)
    mean_p = posterior_params(x0_hat, x_t, t_np, s).mean
    logvar_p = interpolate_variance(out.v, t_np, s)

    per_pixel = torch.empty_like(x0)
    is_first = t_np == 1
    if np.any(~is_first):
        idx = torch.from_numpy(np.nonzero(~is_first)[0])
        ts = t_np[idx.numpy()]
        post = posterior_params(x0[idx], x_t[idx], ts, s)
        logvar_q = _match_coef(s.posterior_log_variance_clipped(ts), x0[idx])
        per_pixel[idx] = _gaussian_kl(post.mean, logvar_q, mean_p[idx], logvar_p[idx])
    if np.any(is_first):
        idx = torch.from_numpy(np.nonzero(is_first)[0])
        per_pixel[idx] = _discretized_gaussian_nll(x0[idx], mean_p[idx], logvar_p[idx])
    return per_pixel.mean()


def l_amb(q: LatentGaussian, p: LatentGaussian) -> torch.Tensor:
    """Batch-mean KL(Q || P) between the ambiguity latents."""
    return kl_divergence(q, p).mean()


def l_prior_bits(x0: torch.Tensor, s: NoiseSchedule) -> float:
    """Diagnostic prior term: KL(q(x_T | x0) || N(0, I)) in bits per dim.

    Constant in the parameters; near zero whenever the schedule ends at
    essentially pure noise.
    """
    g = float(s.gamma(s.T))
    per_dim = 0.5 * (g * (x0.double() ** 2) - g - math.log1p(-g))
    return float(per_dim.mean()) / math.log(2.0)


def _require_finite(name: str, value) -> None:
    v = float(value.detach()) if torch.is_tensor(value) else float(value)
    if not math.isfinite(v):
        raise NonFiniteLossError(f"loss term {name} is non-finite ({v})")


def total_loss(parts: LossParts, w: LossWeights) -> LossReport:
    """Weighted sum of the parts, with per-term finiteness checks.

    Works on tensors (training; `total` stays differentiable) or floats.
    """
    for name in ("l_simple", "l_vlb", "l_amb"):
        _require_finite(name, getattr(parts, name))
    total = parts.l_simple + w.lambda_vlb * parts.l_vlb + w.beta_amb * parts.l_amb
    return LossReport(
        l_simple=parts.l_simple,
        l_vlb=parts.l_vlb,
        l_amb=parts.l_amb,
        total=total,
        finite={"l_simple": True, "l_vlb": True, "l_amb": True},
    )


def vlb_full_sum(denoiser_net, b: torch.Tensor, x0: torch.Tensor,
                 s: NoiseSchedule, generator: Optional[torch.Generator] = None) -> dict:
    """Evaluation-time full variational bound (single-draw estimate).

    Sums the per-timestep terms over t = 1..T (one noise draw each) and
    adds the prior term.  Returned values are nats/pixel except the
    prior, which is bits/dim as in :func:`l_prior_bits`.  Not used during
    training, where one uniformly sampled t per example stands in for
    the sum.
    """
    terms = []
    with torch.no_grad():
        for t in range(1, s.T + 1):
            eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
            x_t = q_sample(x0, t, eps, s)
            out = denoise_forward(denoiser_net, b, x_t, t)
            terms.append(float(l_vlb_term(x0, x_t, t, out, s)))
    return {
        "per_timestep_nats": terms,
        "sum_nats": float(np.sum(terms)),
        "prior_bits_per_dim": l_prior_bits(x0, s),
    }
