"""Timestep-indexed constants of the diffusion process and loss weighting.

Arrays are stored 1-based: index ``t`` holds the value for timestep ``t``,
with ``alpha_bar[0] = 1`` by convention so the posterior variance at t=1 is
exactly zero. Everything is precomputed in float64 at construction; training
code may downcast.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np


class ScheduleError(ValueError):
    """Invalid schedule parameters or out-of-range timestep."""


class WeightKind(Enum):
    SIMPLE = "simple"
    PDAE = "pdae"


@dataclass(frozen=True)
class WeightScheme:
    """Loss weighting: SIMPLE is the constant-1 scheme, PDAE down-weights
    both low- and high-SNR timesteps with balance exponent ``gamma``."""

    kind: WeightKind = WeightKind.SIMPLE
    gamma: float = 0.1

    def __post_init__(self):
        if self.kind is WeightKind.PDAE and not 0.0 < self.gamma < 1.0:
            raise ScheduleError(f"gamma must lie in (0,1), got {self.gamma}")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep diffusion constants.

    ``beta``/``alpha``/``posterior_var`` are length T+1 with index 0 unused
    (set to 0, 1, 0 respectively); ``alpha_bar`` is length T+1 with
    ``alpha_bar[0] = 1``. Immutable after construction.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray
    # parameters needed to rebuild the schedule exactly (checkpoint echo)
    kind: str = "linear"
    params: tuple = field(default=())

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar", "posterior_var"):
            getattr(self, name).setflags(write=False)

    def check_t(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [1, {self.T}]")
        return int(t)

    # -- derived scalars ---------------------------------------------------

    def snr(self, t: int) -> float:
        """Signal-to-noise ratio alpha_bar_t / (1 - alpha_bar_t)."""
        t = self.check_t(t)
        ab = self.alpha_bar[t]
        return float(ab / (1.0 - ab))

    def posterior_coefficients(self, t: int) -> tuple[float, float, float]:
        """Coefficients (on x0, on xt) and variance of q(x_{t-1} | x_t, x_0)."""
        t = self.check_t(t)
        ab_t = self.alpha_bar[t]
        ab_prev = self.alpha_bar[t - 1]
        coef_x0 = np.sqrt(ab_prev) * self.beta[t] / (1.0 - ab_t)
        coef_xt = np.sqrt(self.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab_t)
        return float(coef_x0), float(coef_xt), float(self.posterior_var[t])


def _finalize(T: int, beta: np.ndarray, kind: str, params: tuple) -> NoiseSchedule:
    beta = np.concatenate([[0.0], beta]).astype(np.float64)
    alpha = 1.0 - beta
    alpha[0] = 1.0
    alpha_bar = np.cumprod(alpha)
    alpha_bar[0] = 1.0
    posterior_var = np.zeros(T + 1)
    posterior_var[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    return NoiseSchedule(T, beta, alpha, alpha_bar, posterior_var, kind, params)


def make_linear_schedule(
    T: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Linearly spaced beta, inclusive of both endpoints.

    The default endpoints are the conventional ones for T=1000; callers
    using a shorter T should rescale them to keep alpha_bar_T comparable.
    """
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T)
    return _finalize(T, beta, "linear", (float(beta_start), float(beta_end)))


def make_schedule_from_betas(betas) -> NoiseSchedule:
    """Schedule from an explicit per-step beta sequence."""
    beta = np.asarray(betas, dtype=np.float64)
    if beta.ndim != 1 or len(beta) < 1:
        raise ScheduleError("betas must be a nonempty 1-D sequence")
    if beta.min() <= 0.0 or beta.max() >= 1.0:
        raise ScheduleError("every beta must lie in (0,1)")
    return _finalize(len(beta), beta, "custom", tuple(float(b) for b in beta))


def make_constant_schedule(T: int, beta: float = 0.008) -> NoiseSchedule:
    """Constant beta at every step (used by the latent-code denoiser)."""
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not 0.0 < beta < 1.0:
        raise ScheduleError(f"beta must lie in (0,1), got {beta}")
    return _finalize(T, np.full(T, float(beta)), "constant", (float(beta),))


def rebuild_schedule(kind: str, T: int, params: tuple) -> NoiseSchedule:
    """Reconstruct a schedule from its (kind, T, params) echo."""
    if kind == "linear":
        return make_linear_schedule(T, *params)
    if kind == "constant":
        return make_constant_schedule(T, *params)
    if kind == "custom":
        return make_schedule_from_betas(params)
    raise ScheduleError(f"unknown schedule kind {kind!r}")


def loss_weight(w: WeightScheme, s: NoiseSchedule, t: int) -> float:
    """Per-timestep loss weight lambda_t.

    SIMPLE gives 1 for every t. PDAE gives
    (1/(1+SNR))^(1-gamma) * (SNR/(1+SNR))^gamma, which lies strictly in
    (0,1) for finite positive SNR and peaks at SNR = gamma/(1-gamma).
    """
    s.check_t(t)
    if w.kind is WeightKind.SIMPLE:
        return 1.0
    snr = s.snr(t)
    g = w.gamma
    return float((1.0 / (1.0 + snr)) ** (1.0 - g) * (snr / (1.0 + snr)) ** g)


def dump_schedule_csv(s: NoiseSchedule, path: str | Path, gamma: float = 0.1) -> None:
    """Write one row per timestep: both weighting schemes plus a
    max-normalized PDAE column for plotting."""
    pdae = WeightScheme(WeightKind.PDAE, gamma)
    simple = WeightScheme(WeightKind.SIMPLE)
    w_pdae = np.array([loss_weight(pdae, s, t) for t in range(1, s.T + 1)])
    w_norm = w_pdae / w_pdae.max()
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["t", "beta", "alpha_bar", "snr", "weight_simple", "weight_pdae",
             "weight_pdae_maxnorm"]
        )
        for t in range(1, s.T + 1):
            writer.writerow(
                [t, f"{s.beta[t]:.12g}", f"{s.alpha_bar[t]:.12g}",
                 f"{s.snr(t):.12g}", f"{loss_weight(simple, s, t):.12g}",
                 f"{w_pdae[t - 1]:.12g}", f"{w_norm[t - 1]:.12g}"]
            )
