"""Measurement procedures: per-timestep gap curves, one-step reconstruction
grids, MSE/SSIM reconstruction metrics, the critical-stage grid search, and
conditional-vs-unconditional loss comparison.

All Monte-Carlo procedures draw from an explicit seed and accumulate in
float64, so results are independent of batch partitioning to well below
the stated tolerances.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.signal import convolve2d

from .checkpoint import Checkpoint
from .data import Dataset
from .diffusion import (
    GuidanceShift,
    guided_eps,
    one_step_x0,
    predicted_mean_from_eps,
    q_sample,
    true_posterior_mean,
)
from .pipelines import ModelBundle, SamplerPlan, StageSplit, mixed_stage_sample
from .schedule import NoiseSchedule


class EvalError(ValueError):
    pass


@dataclass
class GapCurve:
    """Averaged squared posterior mean gap per timestep bin, with and
    without the predicted mean shift applied."""

    ts: np.ndarray
    gap_pretrained: np.ndarray
    gap_shifted: np.ndarray
    sample_count: int

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t", "gap_pretrained", "gap_shifted"])
            for t, a, b in zip(self.ts, self.gap_pretrained, self.gap_shifted):
                w.writerow([int(t), f"{a:.10g}", f"{b:.10g}"])


def measure_gap_curve(
    bundle: ModelBundle,
    data: Dataset,
    sample_count: int = 256,
    t_stride: int = 0,
    seed: int = 0,
    batch: int = 64,
) -> GapCurve:
    """Average ||mu_true - mu_pred||^2 and ||mu_true - (mu_pred +
    var * G)||^2 over fixed draws, one bin per strided timestep."""
    if len(data) == 0:
        raise EvalError("empty dataset")
    sched = bundle.sched
    stride = t_stride if t_stride > 0 else max(1, sched.T // 100)
    ts = list(range(1, sched.T + 1, stride))
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(data), size=sample_count)
    eps = torch.as_tensor(
        rng.standard_normal((sample_count,) + data.images.shape[1:]),
        dtype=torch.float32,
    )
    x0 = torch.as_tensor(data.images[idx])
    with torch.no_grad():
        z = bundle.encode(x0) if bundle.condition == "image" else None
        if bundle.condition == "label":
            z = bundle.encode_label(torch.as_tensor(data.labels[idx]))
        has_shift = z is not None and bundle.grad_est is not None
        gap_pre = np.zeros(len(ts))
        gap_shift = np.zeros(len(ts))
        for k, t in enumerate(ts):
            var = sched.posterior_var[t]
            acc_pre = acc_shift = 0.0
            for lo in range(0, sample_count, batch):
                sl = slice(lo, lo + batch)
                xt = q_sample(x0[sl], t, eps[sl], sched)
                mu_true = true_posterior_mean(x0[sl], xt, t, sched).double()
                eps_hat = bundle.eps_net(xt, t)
                mu_pred = predicted_mean_from_eps(xt, t, eps_hat, sched).double()
                acc_pre += float(torch.sum((mu_true - mu_pred) ** 2))
                if has_shift:
                    shift = var * bundle.grad_est(xt, z[sl], t).double()
                    acc_shift += float(torch.sum((mu_true - (mu_pred + shift)) ** 2))
            n_el = sample_count * int(np.prod(data.images.shape[1:]))
            gap_pre[k] = acc_pre / n_el
            gap_shift[k] = acc_shift / n_el if has_shift else gap_pre[k]
    return GapCurve(np.asarray(ts), gap_pre, gap_shift, sample_count)


@dataclass
class OneStepGrid:
    """One-step denoised reconstructions across noise levels: one row group
    from the pretrained model alone, one with the predicted shift."""

    ts: list
    x0: np.ndarray          # [N, C, H, W]
    pretrained: np.ndarray  # [len(ts), N, C, H, W]
    shifted: np.ndarray
    mse_pretrained: np.ndarray  # per t
    mse_shifted: np.ndarray

    def to_image_rows(self) -> np.ndarray:
        """[2N, len(ts), C, H, W]: pretrained rows then shifted rows."""
        pre = self.pretrained.transpose(1, 0, 2, 3, 4)
        shf = self.shifted.transpose(1, 0, 2, 3, 4)
        return np.concatenate([pre, shf], axis=0)


def one_step_grid(
    bundle: ModelBundle, x0: torch.Tensor, ts: list, seed: int = 0
) -> OneStepGrid:
    """Denoise x_t back to x0 in a single step at each requested t, with
    the pretrained prediction and with the shift-corrected prediction."""
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    sched = bundle.sched
    n = len(x0)
    pre = np.empty((len(ts),) + tuple(x0.shape), dtype=np.float32)
    shf = np.empty_like(pre)
    mse_p, mse_s = np.zeros(len(ts)), np.zeros(len(ts))
    with torch.no_grad():
        z = bundle.encode(x0)
        for k, t in enumerate(ts):
            xt = q_sample(x0, t, eps, sched)
            eps_hat = bundle.eps_net(xt, t)
            rec_p = one_step_x0(xt, t, eps_hat, sched)
            shift = GuidanceShift(bundle.grad_est(xt, z, t), 1.0)
            rec_s = one_step_x0(xt, t, guided_eps(eps_hat, t, shift, sched), sched)
            pre[k] = rec_p.numpy()
            shf[k] = rec_s.numpy()
            mse_p[k] = float(torch.mean((rec_p - x0) ** 2))
            mse_s[k] = float(torch.mean((rec_s - x0) ** 2))
    return OneStepGrid(list(ts), x0.numpy(), pre, shf, mse_p, mse_s)


# -- reconstruction metrics ---------------------------------------------------

_SSIM_WIN = 7
_SSIM_SIGMA = 1.5
_C1 = 0.01**2
_C2 = 0.03**2


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r**2) / (2 * sigma**2))
    k /= k.sum()
    return np.outer(k, k)


def _ssim_single(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM for one [H,W] channel pair on [0,1] data. Images
    smaller than the window are scored with whole-image statistics."""
    if min(a.shape) < _SSIM_WIN:
        mu_a, mu_b = a.mean(), b.mean()
        va, vb = a.var(), b.var()
        cov = ((a - mu_a) * (b - mu_b)).mean()
        return float(
            (2 * mu_a * mu_b + _C1)
            * (2 * cov + _C2)
            / ((mu_a**2 + mu_b**2 + _C1) * (va + vb + _C2))
        )
    w = _gaussian_window(_SSIM_WIN, _SSIM_SIGMA)

    def f(x):
        return convolve2d(x, w, mode="valid")

    mu_a, mu_b = f(a), f(b)
    va = f(a * a) - mu_a**2
    vb = f(b * b) - mu_b**2
    cov = f(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + _C1) * (2 * cov + _C2)
    den = (mu_a**2 + mu_b**2 + _C1) * (va + vb + _C2)
    return float((num / den).mean())


def recon_metrics(a, b) -> tuple[float, float]:
    """Mean per-image MSE and mean single-scale SSIM. Inputs are [B,C,H,W]
    in [-1,1]; SSIM is computed after rescaling to [0,1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvalError(f"shape mismatch {a.shape} vs {b.shape}")
    if max(np.abs(a).max(), np.abs(b).max()) > 1.0 + 1e-6:
        raise EvalError("inputs must lie in [-1, 1]")
    mse = float(np.mean((a - b) ** 2))
    a01, b01 = (a + 1) / 2, (b + 1) / 2
    vals = [
        _ssim_single(a01[i, c], b01[i, c])
        for i in range(a.shape[0])
        for c in range(a.shape[1])
    ]
    return mse, float(np.mean(vals))


# -- critical-stage search -----------------------------------------------------


def grid_search_critical_stage(
    bundle: ModelBundle,
    plan: SamplerPlan,
    probe,
    t_grid_stride: int = 50,
    accuracy_threshold: float = 0.9,
    count: int = 24,
    classes: list | None = None,
) -> tuple[StageSplit | None, list]:
    """Find the shortest stage (t1, t2) whose mixed-stage samples match the
    requested class for at least the threshold fraction, ties broken by the
    smaller t1. probe(images [N,C,H,W] tensor) -> predicted labels [N].

    Returns (split-or-None, table of ((t1, t2), accuracy) rows).
    """
    if bundle.condition != "label":
        raise EvalError("stage search needs a label-conditioned bundle")
    T = bundle.sched.T
    classes = list(classes or range(bundle.encoder.num_classes))
    grid = list(range(0, T + 1, t_grid_stride))
    if grid[-1] != T:
        grid.append(T)

    def accuracy(split: StageSplit) -> float:
        hits = total = 0
        for j, y in enumerate(classes):
            job_plan = SamplerPlan(
                plan.method, plan.timesteps, plan.eta, plan.guidance_scale,
                plan.guided_fraction, plan.guided_cutoff,
                seed=plan.seed + 1000 * j,
            )
            per = max(1, count // len(classes))
            imgs = mixed_stage_sample(bundle, y, split, job_plan, per)
            pred = np.asarray(probe(imgs))
            hits += int((pred == y).sum())
            total += per
        return hits / total

    if accuracy_threshold <= 0:
        return StageSplit(0, 0), [((0, 0), 1.0)]

    table = []
    best = None
    for i, t1 in enumerate(grid):
        for t2 in grid[i + 1 :]:
            split = StageSplit(t1, t2)
            acc = accuracy(split)
            table.append(((t1, t2), acc))
            if acc >= accuracy_threshold:
                length = t2 - t1
                key = (length, t1)
                if best is None or key < best[0]:
                    best = (key, split)
    return (best[1] if best else None), table


def eval_gap_objective(
    bundle: ModelBundle,
    data: Dataset,
    scheme,
    sample_count: int = 2048,
    seed: int = 0,
    batch: int = 128,
) -> float:
    """Held-out gap-filling objective under a given weighting, on fixed
    draws. Lets runs trained under different weightings be compared on one
    common metric."""
    from .diffusion import pdae_loss

    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(data), size=sample_count)
    t = torch.as_tensor(rng.integers(1, bundle.sched.T + 1, size=sample_count))
    eps = torch.as_tensor(
        rng.standard_normal((sample_count,) + data.images.shape[1:]),
        dtype=torch.float32,
    )
    x0 = torch.as_tensor(data.images[idx])
    xt = q_sample(x0, t, eps, bundle.sched)
    total = 0.0
    with torch.no_grad():
        z = bundle.encode(x0) if bundle.condition == "image" else None
        if bundle.condition == "label":
            z = bundle.encode_label(torch.as_tensor(data.labels[idx]))
        for lo in range(0, sample_count, batch):
            sl = slice(lo, lo + batch)
            eh = bundle.eps_net(xt[sl], t[sl])
            g = bundle.grad_est(xt[sl], z[sl], t[sl])
            w = len(xt[sl]) / sample_count
            total += float(
                pdae_loss(eps[sl], eh, g, t[sl], bundle.sched, scheme)
            ) * w
    return total


def train_pixel_probe(data: Dataset, steps: int = 400, lr: float = 0.05, seed: int = 0):
    """Multinomial logistic probe on raw pixels; returns a callable
    (images [N,C,H,W] tensor) -> predicted labels. Good enough to grade
    generated samples on the synthetic class patterns."""
    if data.labels is None:
        raise EvalError("probe training needs labels")
    torch.manual_seed(seed)
    model = torch.nn.Linear(int(np.prod(data.images.shape[1:])), data.n_classes)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    x = torch.as_tensor(data.images).flatten(1)
    y = torch.as_tensor(data.labels)
    for _ in range(steps):
        loss = torch.nn.functional.cross_entropy(model(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()

    def probe(images) -> np.ndarray:
        with torch.no_grad():
            t = torch.as_tensor(np.asarray(images), dtype=torch.float32)
            return model(t.flatten(1)).argmax(dim=1).numpy()

    return probe


# -- conditional vs unconditional loss ------------------------------------------


def eval_eps_loss(
    eps_net,
    data: Dataset,
    sched: NoiseSchedule,
    sample_count: int = 512,
    seed: int = 0,
    conditional: bool = False,
    batch: int = 128,
) -> float:
    """Held-out simple loss on fixed draws (mean over elements and draws)."""
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(data), size=sample_count)
    t = torch.as_tensor(rng.integers(1, sched.T + 1, size=sample_count))
    eps = torch.as_tensor(
        rng.standard_normal((sample_count,) + data.images.shape[1:]),
        dtype=torch.float32,
    )
    x0 = torch.as_tensor(data.images[idx])
    xt = q_sample(x0, t, eps, sched)
    y = None
    if conditional:
        if data.labels is None:
            raise EvalError("conditional evaluation needs labels")
        y = torch.as_tensor(data.labels[idx])
    total = 0.0
    with torch.no_grad():
        for lo in range(0, sample_count, batch):
            sl = slice(lo, lo + batch)
            eh = eps_net(xt[sl], t[sl], None if y is None else y[sl])
            total += float(torch.sum(((eps[sl] - eh).double()) ** 2))
    return total / (sample_count * int(np.prod(data.images.shape[1:])))


@dataclass
class LossComparison:
    images_seen: np.ndarray
    uncond: np.ndarray
    cond: np.ndarray
    final_uncond: float
    final_cond: float

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["images_seen", "loss_unconditional", "loss_conditional"])
            for row in zip(self.images_seen, self.uncond, self.cond):
                w.writerow([int(row[0]), f"{row[1]:.8g}", f"{row[2]:.8g}"])


def loss_comparison(
    uncond: Checkpoint,
    cond: Checkpoint,
    data: Dataset,
    sample_count: int = 1024,
    seed: int = 0,
) -> LossComparison:
    """Pair the stored evaluation-loss curves of an unconditional and a
    label-conditioned run (same schedule required) and evaluate both final
    models on common fresh draws."""
    if uncond.schedule != cond.schedule:
        raise EvalError("checkpoints were trained on different schedules")
    cu, cc = uncond.blobs["meta/eval_loss"], cond.blobs["meta/eval_loss"]
    su, sc = uncond.blobs["meta/images_seen"], cond.blobs["meta/images_seen"]
    if len(cu) != len(cc) or not np.array_equal(su, sc):
        raise EvalError("training curves do not cover the same budget")
    from .training import load_eps_net

    sched = ModelBundle.from_pretrained(uncond).sched
    net_u = load_eps_net(uncond)
    net_c = load_eps_net(cond)
    return LossComparison(
        images_seen=np.asarray(su, dtype=np.float64),
        uncond=np.asarray(cu, dtype=np.float64),
        cond=np.asarray(cc, dtype=np.float64),
        final_uncond=eval_eps_loss(
            net_u, data, sched, sample_count, seed,
            conditional=net_u.spec.num_classes > 0,
        ),
        final_cond=eval_eps_loss(
            net_c, data, sched, sample_count, seed,
            conditional=net_c.spec.num_classes > 0,
        ),
    )
