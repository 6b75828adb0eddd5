"""Stateless diffusion math on image batches.

Every operation is a pure function of its inputs: randomness always enters
as an explicit noise argument, so seeded callers are bit-reproducible.
Timestep arguments accept either a python int (applied to the whole batch)
or a 1-D long tensor with one timestep per sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .schedule import NoiseSchedule, ScheduleError, WeightKind, WeightScheme


class ShapeError(ValueError):
    """Tensor arguments disagree in shape."""


@dataclass(frozen=True)
class GuidanceShift:
    """A mean-shift direction (an estimate of a noisy-data log-density
    gradient) and its strength. ``scale == 0`` must make every guided
    operation bit-identical to its unguided counterpart, so guided ops skip
    the shift term entirely in that case."""

    grad: torch.Tensor | None
    scale: float = 1.0

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.scale}")

    @property
    def active(self) -> bool:
        return self.scale != 0.0 and self.grad is not None


NO_SHIFT = GuidanceShift(grad=None, scale=0.0)


def _check_shapes(*tensors: torch.Tensor) -> None:
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) > 1:
        raise ShapeError(f"mismatched tensor shapes: {sorted(shapes)}")


def _t_indices(s: NoiseSchedule, t, lo: int = 1) -> np.ndarray:
    """Validate t against [lo, T] and return it as an int array."""
    idx = np.atleast_1d(np.asarray(t.cpu() if torch.is_tensor(t) else t))
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ScheduleError(f"timesteps must be integers, got {idx.dtype}")
    if idx.min() < lo or idx.max() > s.T:
        raise ScheduleError(f"timestep outside [{lo}, {s.T}]: {idx.min()}..{idx.max()}")
    return idx


def _gather(arr: np.ndarray, idx: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    """Schedule constants for each sample, shaped for broadcasting."""
    vals = np.take(arr, idx)
    shape = [-1] + [1] * (like.ndim - 1)
    return torch.as_tensor(vals, dtype=like.dtype, device=like.device).view(shape)


def q_sample(
    x0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule
) -> torch.Tensor:
    """Sample x_t from the forward process: sqrt(ab_t) x0 + sqrt(1-ab_t) eps."""
    _check_shapes(x0, eps)
    idx = _t_indices(s, t)
    ab = _gather(s.alpha_bar, idx, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def true_posterior_mean(
    x0: torch.Tensor, xt: torch.Tensor, t, s: NoiseSchedule
) -> torch.Tensor:
    """Mean of the forward-process posterior q(x_{t-1} | x_t, x_0)."""
    _check_shapes(x0, xt)
    idx = _t_indices(s, t)
    ab_t = _gather(s.alpha_bar, idx, xt)
    ab_prev = _gather(s.alpha_bar, idx - 1, xt)
    beta = _gather(s.beta, idx, xt)
    alpha = _gather(s.alpha, idx, xt)
    coef_x0 = torch.sqrt(ab_prev) * beta / (1.0 - ab_t)
    coef_xt = torch.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab_t)
    return coef_x0 * x0 + coef_xt * xt


def predicted_mean_from_eps(
    xt: torch.Tensor, t, eps_hat: torch.Tensor, s: NoiseSchedule
) -> torch.Tensor:
    """Model-side posterior mean (1/sqrt(a_t)) (x_t - beta_t/sqrt(1-ab_t) eps_hat)."""
    _check_shapes(xt, eps_hat)
    idx = _t_indices(s, t)
    ab = _gather(s.alpha_bar, idx, xt)
    beta = _gather(s.beta, idx, xt)
    alpha = _gather(s.alpha, idx, xt)
    return (xt - beta / torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(alpha)


def ddpm_step(
    xt: torch.Tensor,
    t: int,
    eps_hat: torch.Tensor,
    shift: GuidanceShift,
    noise: torch.Tensor,
    s: NoiseSchedule,
) -> torch.Tensor:
    """One ancestral step x_t -> x_{t-1} with an optional guidance shift.

    x_{t-1} = mu_theta + sigma_t^2 * scale * grad + sigma_t * noise, where
    sigma_t^2 is the untrained forward-posterior variance. The final step
    (t=1) must be noiseless.
    """
    _check_shapes(xt, eps_hat, noise)
    t = s.check_t(t)
    if t == 1 and bool(torch.any(noise != 0)):
        raise ValueError("the t=1 step is deterministic; noise must be zero")
    mean = predicted_mean_from_eps(xt, t, eps_hat, s)
    var = s.posterior_var[t]
    if shift.active:
        _check_shapes(xt, shift.grad)
        mean = mean + var * shift.scale * shift.grad
    if var > 0:
        mean = mean + np.sqrt(var) * noise
    return mean


def _x0_from_eps(xt, ab_from, eps_mod):
    return (xt - np.sqrt(1.0 - ab_from) * eps_mod) / np.sqrt(ab_from)


def ddim_step(
    xt: torch.Tensor,
    t_from: int,
    t_to: int,
    eps_mod: torch.Tensor,
    sigma: float,
    noise: torch.Tensor,
    s: NoiseSchedule,
) -> torch.Tensor:
    """Generalized (possibly strided) generative step t_from -> t_to.

    sigma controls stochasticity; sigma=0 is the deterministic sampler.
    t_to == t_from is permitted (it is the identity when sigma=0).
    """
    _check_shapes(xt, eps_mod, noise)
    t_from = s.check_t(t_from)
    if not 0 <= t_to <= t_from:
        raise ScheduleError(f"need 0 <= t_to <= t_from, got {t_to} > {t_from}")
    ab_to = s.alpha_bar[t_to]
    if not 0.0 <= sigma <= np.sqrt(1.0 - ab_to) + 1e-12:
        raise ValueError(f"sigma {sigma} outside [0, sqrt(1-alpha_bar_to)]")
    x0_hat = _x0_from_eps(xt, s.alpha_bar[t_from], eps_mod)
    out = np.sqrt(ab_to) * x0_hat + np.sqrt(max(1.0 - ab_to - sigma**2, 0.0)) * eps_mod
    if sigma > 0:
        out = out + sigma * noise
    return out


def guided_eps(
    eps_hat: torch.Tensor, t, shift: GuidanceShift, s: NoiseSchedule
) -> torch.Tensor:
    """Fold a guidance gradient into the noise prediction:
    eps_hat - sqrt(1 - ab_t) * scale * grad. Returns eps_hat unchanged when
    the shift is inactive."""
    if not shift.active:
        return eps_hat
    _check_shapes(eps_hat, shift.grad)
    idx = _t_indices(s, t)
    ab = _gather(s.alpha_bar, idx, eps_hat)
    return eps_hat - torch.sqrt(1.0 - ab) * shift.scale * shift.grad


def ddim_sigma(s: NoiseSchedule, t_from: int, t_to: int, eta: float) -> float:
    """Stochasticity for a strided step: eta=1 matches the ancestral
    posterior deviation at stride 1, eta=0 is deterministic."""
    if eta == 0.0:
        return 0.0
    ab_from, ab_to = s.alpha_bar[t_from], s.alpha_bar[t_to]
    return float(
        eta * np.sqrt((1 - ab_to) / (1 - ab_from)) * np.sqrt(1 - ab_from / ab_to)
    )


def ddim_invert_step(
    xt: torch.Tensor, t_from: int, t_to: int, eps_mod: torch.Tensor, s: NoiseSchedule
) -> torch.Tensor:
    """Deterministic generative step run in reverse: t_from -> t_to with
    t_to > t_from. t_from may be 0 (alpha_bar_0 = 1, so x0_hat = x_0)."""
    _check_shapes(xt, eps_mod)
    if not 0 <= t_from < t_to <= s.T:
        raise ScheduleError(f"need 0 <= t_from < t_to <= T, got {t_from}, {t_to}")
    x0_hat = _x0_from_eps(xt, s.alpha_bar[t_from], eps_mod)
    ab_to = s.alpha_bar[t_to]
    return np.sqrt(ab_to) * x0_hat + np.sqrt(1.0 - ab_to) * eps_mod


def one_step_x0(
    xt: torch.Tensor, t, eps_hat: torch.Tensor, s: NoiseSchedule
) -> torch.Tensor:
    """Denoise all the way to x0 in a single step."""
    _check_shapes(xt, eps_hat)
    idx = _t_indices(s, t)
    ab = _gather(s.alpha_bar, idx, xt)
    return (xt - torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(ab)


def simple_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all elements (mean over pixels, then batch)."""
    _check_shapes(eps, eps_hat)
    return torch.mean((eps - eps_hat) ** 2)


def _lambda_weights(w: WeightScheme, s: NoiseSchedule, idx: np.ndarray) -> np.ndarray:
    if w.kind is WeightKind.SIMPLE:
        return np.ones(len(idx))
    ab = np.take(s.alpha_bar, idx)
    snr = ab / (1.0 - ab)
    g = w.gamma
    return (1.0 / (1.0 + snr)) ** (1.0 - g) * (snr / (1.0 + snr)) ** g


def pdae_loss(
    eps: torch.Tensor,
    eps_hat: torch.Tensor,
    g: torch.Tensor,
    t,
    s: NoiseSchedule,
    w: WeightScheme,
) -> torch.Tensor:
    """Weighted gap-filling objective.

    lambda_t * || eps - eps_hat + (sqrt(a_t) sqrt(1-ab_t) / beta_t)
    * sigma_t^2 * g ||^2, reduced as mean over elements then batch. At t=1
    the posterior variance is zero, so the g term vanishes there.
    """
    _check_shapes(eps, eps_hat, g)
    idx = _t_indices(s, t)
    alpha = _gather(s.alpha, idx, eps)
    ab = _gather(s.alpha_bar, idx, eps)
    beta = _gather(s.beta, idx, eps)
    var = _gather(s.posterior_var, idx, eps)
    lam = torch.as_tensor(
        _lambda_weights(w, s, idx), dtype=eps.dtype, device=eps.device
    )
    resid = eps - eps_hat + torch.sqrt(alpha) * torch.sqrt(1.0 - ab) / beta * var * g
    per_sample = torch.mean(resid.reshape(resid.shape[0], -1) ** 2, dim=1)
    return torch.mean(lam * per_sample)
