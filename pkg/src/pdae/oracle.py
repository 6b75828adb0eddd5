"""Exact closed-form ground truth for finite datasets.

Under the forward process, a finite dataset is an equal-weight Gaussian
mixture at every noise level: q(x_t) = (1/N) sum_i Normal(sqrt(ab_t) x_i,
(1 - ab_t) I). That makes posterior means, the optimal noise prediction,
Bayes classifier gradients, and the posterior mean gap all computable
without any trained network. This is a verification tool, not a production
path; it refuses datasets past 1024 points.

Squared-norm reductions here are mean-over-elements, matching the loss
convention used by the training objectives.
"""

from __future__ import annotations

import numpy as np

from .schedule import NoiseSchedule

MAX_POINTS = 1024
_CHUNK = 32  # xt rows per pairwise-distance block, bounds peak memory


class OracleError(ValueError):
    """Oracle misuse: too many points, missing labels, bad arguments."""


class MixtureOracle:
    """A finite dataset viewed as an exact Gaussian mixture at every t."""

    def __init__(
        self,
        points: np.ndarray,
        schedule: NoiseSchedule,
        labels: np.ndarray | None = None,
    ):
        points = np.asarray(points, dtype=np.float64)
        if points.shape[0] > MAX_POINTS:
            raise OracleError(
                f"oracle supports at most {MAX_POINTS} points, got {points.shape[0]}"
            )
        if points.shape[0] < 1:
            raise OracleError("need at least one point")
        self.item_shape = points.shape[1:]
        self.points = points.reshape(points.shape[0], -1)
        self.schedule = schedule
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        if self.labels is not None and len(self.labels) != len(self.points):
            raise OracleError("labels length does not match points")

    # -- internals ----------------------------------------------------------

    def _flat(self, xt: np.ndarray) -> np.ndarray:
        xt = np.asarray(xt, dtype=np.float64)
        if xt.shape[1:] != self.item_shape and xt.shape[1:] != (
            self.points.shape[1],
        ):
            raise OracleError(
                f"xt item shape {xt.shape[1:]} does not match dataset {self.item_shape}"
            )
        return xt.reshape(xt.shape[0], -1)

    def _log_weights(self, xt_flat: np.ndarray, t: int) -> np.ndarray:
        """Unnormalized Gaussian log-densities [B, N] at timestep t."""
        t = self.schedule.check_t(t)
        ab = self.schedule.alpha_bar[t]
        means = np.sqrt(ab) * self.points
        var = 1.0 - ab
        out = np.empty((xt_flat.shape[0], len(means)))
        for lo in range(0, xt_flat.shape[0], _CHUNK):
            diff = xt_flat[lo : lo + _CHUNK, None, :] - means[None, :, :]
            out[lo : lo + _CHUNK] = -np.einsum("bnd,bnd->bn", diff, diff) / (2.0 * var)
        return out

    @staticmethod
    def _normalize(log_w: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        """Log-sum-exp stabilized softmax with extended-precision accumulation."""
        if mask is not None:
            log_w = np.where(mask[None, :], log_w, -np.inf)
        shift = log_w.max(axis=1, keepdims=True)
        w = np.exp((log_w - shift).astype(np.longdouble))
        w /= w.sum(axis=1, keepdims=True)
        return w.astype(np.float64)

    def responsibilities(self, xt: np.ndarray, t: int) -> np.ndarray:
        """Posterior probability of each dataset point given x_t: [B, N]."""
        return self._normalize(self._log_weights(self._flat(xt), t))

    # -- exact quantities ----------------------------------------------------

    def posterior_x0(
        self, xt: np.ndarray, t: int, y: int | None = None
    ) -> np.ndarray:
        """E[x0 | xt] (optionally restricted to points of class y)."""
        xt_flat = self._flat(xt)
        mask = self._class_mask(y)
        w = self._normalize(self._log_weights(xt_flat, t), mask)
        return (w @ self.points).reshape((-1,) + self.item_shape)

    def optimal_eps(self, xt: np.ndarray, t: int, y: int | None = None) -> np.ndarray:
        """The exact minimizer of the noise-prediction objective:
        (xt - sqrt(ab_t) E[x0|xt]) / sqrt(1 - ab_t)."""
        xt = np.asarray(xt, dtype=np.float64)
        ab = self.schedule.alpha_bar[self.schedule.check_t(t)]
        ex0 = self.posterior_x0(xt, t, y).reshape(xt.shape)
        return (xt - np.sqrt(ab) * ex0) / np.sqrt(1.0 - ab)

    def exact_posterior_mean(
        self, xt: np.ndarray, t: int, y: int | None = None
    ) -> np.ndarray:
        """Bayes-optimal one-step denoised mean E[x_{t-1} | xt]."""
        xt = np.asarray(xt, dtype=np.float64)
        coef_x0, coef_xt, _ = self.schedule.posterior_coefficients(t)
        ex0 = self.posterior_x0(xt, t, y).reshape(xt.shape)
        return coef_xt * xt + coef_x0 * ex0

    def _class_mask(self, y: int | None) -> np.ndarray | None:
        if y is None:
            return None
        if self.labels is None:
            raise OracleError("dataset has no labels")
        mask = self.labels == y
        if not mask.any():
            raise OracleError(f"no points with label {y}")
        return mask

    def class_gradient(self, xt: np.ndarray, t: int, y: int) -> np.ndarray:
        """Gradient of the exact Bayes classifier: grad_xt log p(y | xt).

        Equals (E[m | xt, y] - E[m | xt]) / (1 - ab_t) where m_i are the
        component means sqrt(ab_t) x_i; the -xt terms of the two mixture
        scores cancel.
        """
        mask = self._class_mask(y)
        xt_flat = self._flat(np.asarray(xt, dtype=np.float64))
        t = self.schedule.check_t(t)
        ab = self.schedule.alpha_bar[t]
        log_w = self._log_weights(xt_flat, t)
        w_all = self._normalize(log_w)
        w_cls = self._normalize(log_w, mask)
        means = np.sqrt(ab) * self.points
        grad = (w_cls @ means - w_all @ means) / (1.0 - ab)
        return grad.reshape((-1,) + self.item_shape)

    def class_log_prob(self, xt: np.ndarray, t: int, y: int) -> np.ndarray:
        """log p(y | xt) under the exact mixture, [B]."""
        mask = self._class_mask(y)
        log_w = self._log_weights(self._flat(xt), t)
        shift = log_w.max(axis=1, keepdims=True)
        w = np.exp(log_w - shift)
        return np.log(w[:, mask].sum(axis=1)) - np.log(w.sum(axis=1))

    # -- Monte-Carlo gap measurement ------------------------------------------

    def _draw(self, t: int, n: int, rng: np.random.Generator):
        idx = rng.integers(0, len(self.points), size=n)
        x0 = self.points[idx]
        eps = rng.standard_normal(x0.shape)
        ab = self.schedule.alpha_bar[t]
        xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
        return idx, x0, eps, xt

    def exact_gap(
        self,
        eps_fn,
        t: int,
        sample_count: int,
        rng: np.random.Generator,
        shift_fn=None,
    ) -> float:
        """Monte-Carlo average of the squared posterior mean gap.

        eps_fn(xt, t) -> predicted noise; when shift_fn(xt, x0, t) -> g is
        given, the predicted mean is corrected by sigma_t^2 * g before
        measuring (the shifted-gap variant).
        """
        t = self.schedule.check_t(t)
        if sample_count < 1:
            raise OracleError("sample_count must be >= 1")
        coef_x0, coef_xt, var = self.schedule.posterior_coefficients(t)
        alpha, beta = self.schedule.alpha[t], self.schedule.beta[t]
        ab = self.schedule.alpha_bar[t]
        _, x0, _, xt = self._draw(t, sample_count, rng)
        shape = (-1,) + self.item_shape
        eps_hat = np.asarray(
            eps_fn(xt.reshape(shape), t), dtype=np.float64
        ).reshape(xt.shape)
        mu_true = coef_x0 * x0 + coef_xt * xt
        mu_pred = (xt - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
        if shift_fn is not None:
            g = np.asarray(
                shift_fn(xt.reshape(shape), x0.reshape(shape), t), dtype=np.float64
            ).reshape(xt.shape)
            mu_pred = mu_pred + var * g
        return float(np.mean((mu_true - mu_pred) ** 2))

    def bayes_gap(
        self,
        t: int,
        sample_count: int,
        rng: np.random.Generator,
        conditional: bool = False,
    ) -> float:
        """The irreducible gap: MC average of ||mu_true - E[x_{t-1}|xt]||^2
        for the Bayes-optimal predictor. With conditional=True the posterior
        is restricted to each draw's true class (requires labels); this is
        never larger in expectation than the unconditional floor."""
        t = self.schedule.check_t(t)
        if conditional and self.labels is None:
            raise OracleError("conditional floor requires labels")
        coef_x0, _, _ = self.schedule.posterior_coefficients(t)
        idx, x0, _, xt = self._draw(t, sample_count, rng)
        if conditional:
            ex0 = np.empty_like(x0)
            for y in np.unique(self.labels[idx]):
                sel = self.labels[idx] == y
                ex0[sel] = self.posterior_x0(xt[sel], t, int(y)).reshape(-1, x0.shape[1])
        else:
            ex0 = self.posterior_x0(xt, t).reshape(x0.shape)
        return float(np.mean((coef_x0 * (x0 - ex0)) ** 2))

    def bayes_eps_loss(
        self,
        t: int,
        sample_count: int,
        rng: np.random.Generator,
        conditional: bool = False,
    ) -> tuple[float, float]:
        """MC estimate (and its standard error) of the lowest achievable
        noise-prediction MSE at timestep t. Returns (loss, stderr)."""
        t = self.schedule.check_t(t)
        if conditional and self.labels is None:
            raise OracleError("conditional loss requires labels")
        ab = self.schedule.alpha_bar[t]
        idx, x0, eps, xt = self._draw(t, sample_count, rng)
        if conditional:
            ex0 = np.empty_like(x0)
            for y in np.unique(self.labels[idx]):
                sel = self.labels[idx] == y
                ex0[sel] = self.posterior_x0(xt[sel], t, int(y)).reshape(-1, x0.shape[1])
        else:
            ex0 = self.posterior_x0(xt, t).reshape(x0.shape)
        eps_opt = (xt - np.sqrt(ab) * ex0) / np.sqrt(1.0 - ab)
        per_draw = np.mean((eps - eps_opt) ** 2, axis=1)
        return float(per_draw.mean()), float(per_draw.std() / np.sqrt(sample_count))
