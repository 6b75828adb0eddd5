"""End-to-end generative procedures over a trained model bundle.

Every pipeline draws all of its randomness from a torch generator seeded by
(plan seed, pipeline name, job index), so outputs are bit-reproducible from
(checkpoint, plan, seed). Guidance with scale 0 never evaluates the
gradient estimator at all, which makes the unguided degeneracy exact.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np
import torch

from .checkpoint import Checkpoint, load_module_from_blobs, schedule_from_echo
from .diffusion import (
    NO_SHIFT,
    GuidanceShift,
    ddim_invert_step,
    ddim_sigma,
    ddim_step,
    ddpm_step,
    guided_eps,
)
from .networks import Encoder, EncoderSpec, EpsNet, GradientEstimator, LabelEncoder
from .schedule import NoiseSchedule
from .training import LinearClassifier, load_eps_net


class PlanError(ValueError):
    pass


class FewShotError(RuntimeError):
    """Rejection sampling could not reach the requested acceptance rate."""


def derive_seed(seed: int, *parts) -> int:
    """Stable per-job RNG stream derivation."""
    text = ":".join([str(seed)] + [str(p) for p in parts])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


@dataclass(frozen=True)
class SamplerPlan:
    """How to walk the reverse process.

    timesteps is strictly increasing, starts at 0 and ends at T; the DDPM
    method requires the full sequence. guided_fraction only matters for the
    improved unconditional pipeline: that fraction of steps (counted from
    the noisy end) is guided, the rest fall back to the pretrained model
    alone. guided_cutoff chooses whether the fraction counts sampling steps
    or the timestep range.
    """

    method: str
    timesteps: tuple
    eta: float = 0.0
    guidance_scale: float = 1.0
    guided_fraction: float = 0.7
    guided_cutoff: str = "steps"
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("ddpm", "ddim"):
            raise PlanError(f"unknown method {self.method!r}")
        ts = self.timesteps
        if len(ts) < 2 or ts[0] != 0:
            raise PlanError("timesteps must start at 0 and contain the endpoint")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise PlanError("timesteps must be strictly increasing")
        if self.method == "ddpm" and tuple(ts) != tuple(range(ts[-1] + 1)):
            raise PlanError("the ddpm method requires the full timestep sequence")
        if not 0.0 <= self.guided_fraction <= 1.0:
            raise PlanError("guided_fraction must lie in [0,1]")
        if self.guided_cutoff not in ("steps", "t-range"):
            raise PlanError(f"unknown guided_cutoff {self.guided_cutoff!r}")
        if self.eta < 0:
            raise PlanError("eta must be >= 0")

    @property
    def T(self) -> int:
        return self.timesteps[-1]

    @classmethod
    def from_steps(
        cls, method: str, T: int, n_steps: int, **kwargs
    ) -> "SamplerPlan":
        if method == "ddpm":
            ts = tuple(range(T + 1))
        else:
            ts = tuple(int(round(v)) for v in np.linspace(0, T, n_steps + 1))
            ts = tuple(sorted(set(ts)))
        return cls(method=method, timesteps=ts, **kwargs)

    def pairs(self):
        """(t_from, t_to) pairs walking from T down to 0."""
        ts = self.timesteps
        return [(ts[i], ts[i - 1]) for i in range(len(ts) - 1, 0, -1)]


@dataclass(frozen=True)
class StageSplit:
    """Guidance window in forward-process time: active for t1 < t <= t2.
    t1 == t2 is the empty stage (never guided)."""

    t1: int
    t2: int

    def __post_init__(self):
        if not 0 <= self.t1 <= self.t2:
            raise PlanError(f"need 0 <= t1 <= t2, got ({self.t1}, {self.t2})")

    def contains(self, t: int) -> bool:
        return self.t1 < t <= self.t2


@dataclass
class ModelBundle:
    """Frozen, eval-mode models plus their shared schedule."""

    sched: NoiseSchedule
    eps_net: EpsNet
    encoder: Encoder | LabelEncoder | None = None
    grad_est: GradientEstimator | None = None
    condition: str | None = None  # "image" | "label" | None

    @classmethod
    def from_pretrained(cls, ckpt: Checkpoint, use_ema: bool = True) -> "ModelBundle":
        return cls(
            sched=schedule_from_echo(ckpt.schedule),
            eps_net=load_eps_net(ckpt, use_ema=use_ema),
        )

    @classmethod
    def from_pdae(cls, ckpt: Checkpoint, use_ema: bool = True) -> "ModelBundle":
        if ckpt.kind != "pdae":
            raise PlanError(f"expected a gap-training checkpoint, got {ckpt.kind!r}")
        eps_net = load_eps_net(ckpt, use_ema=True)
        enc_spec = EncoderSpec.from_dict(ckpt.specs["encoder"])
        condition = ckpt.specs.get("condition", "image")
        prefix = "ema" if use_ema else "raw"
        if condition == "label":
            encoder: torch.nn.Module = LabelEncoder(
                int(ckpt.specs["num_classes"]), enc_spec.z_dim
            )
        else:
            encoder = Encoder(enc_spec)
        load_module_from_blobs(encoder, ckpt.blobs, f"encoder/{prefix}")
        encoder.eval()
        grad_est = GradientEstimator(eps_net, enc_spec.z_dim)
        load_module_from_blobs(grad_est, ckpt.blobs, f"grad_est/{prefix}")
        grad_est.eval()
        return cls(
            sched=schedule_from_echo(ckpt.schedule),
            eps_net=eps_net,
            encoder=encoder,
            grad_est=grad_est,
            condition=condition,
        )

    @property
    def z_dim(self) -> int:
        return self.grad_est.z_dim

    def encode(self, x0: torch.Tensor) -> torch.Tensor:
        if self.condition != "image":
            raise PlanError("this bundle does not carry an image encoder")
        with torch.no_grad():
            return self.encoder(x0)

    def encode_label(self, y: torch.Tensor) -> torch.Tensor:
        if self.condition != "label":
            raise PlanError("this bundle is not label-conditioned")
        with torch.no_grad():
            return self.encoder(y)

    def shift_fn(self, z: torch.Tensor):
        """Guidance callback: (x_t, t) -> estimated gradient for a fixed z."""
        if self.grad_est is None:
            raise PlanError("bundle has no gradient estimator")

        def fn(xt, t):
            return self.grad_est(xt, z, t)

        return fn


def encode_dataset(bundle: ModelBundle, images: np.ndarray, batch: int = 256) -> np.ndarray:
    """Semantic codes for a whole image array, [N, z_dim] float64."""
    out = []
    with torch.no_grad():
        for lo in range(0, len(images), batch):
            x = torch.as_tensor(images[lo : lo + batch])
            out.append(bundle.encode(x).double().numpy())
    return np.concatenate(out)


def _generator(plan: SamplerPlan, name: str, job: int = 0) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(plan.seed, name, job))


def _check_plan_matches(plan: SamplerPlan, sched: NoiseSchedule):
    if plan.T != sched.T:
        raise PlanError(f"plan T={plan.T} does not match schedule T={sched.T}")


def _run_guided(
    bundle: ModelBundle,
    xT: torch.Tensor,
    plan: SamplerPlan,
    gen: torch.Generator,
    shift_fn=None,
    guided_at=None,
) -> torch.Tensor:
    """Shared reverse walk. shift_fn(x, t) supplies the guidance gradient;
    guided_at(t_from, step_index) gates it (default: always on)."""
    sched = bundle.sched
    _check_plan_matches(plan, sched)
    scale = plan.guidance_scale
    x = xT
    with torch.no_grad():
        for i, (t_from, t_to) in enumerate(plan.pairs()):
            guided = (
                scale != 0.0
                and shift_fn is not None
                and (guided_at is None or guided_at(t_from, i))
            )
            eps_hat = bundle.eps_net(x, t_from)
            if plan.method == "ddpm":
                shift = GuidanceShift(shift_fn(x, t_from), scale) if guided else NO_SHIFT
                noise = (
                    torch.randn(x.shape, generator=gen, dtype=x.dtype)
                    if t_from > 1
                    else torch.zeros_like(x)
                )
                x = ddpm_step(x, t_from, eps_hat, shift, noise, sched)
            else:
                if guided:
                    shift = GuidanceShift(shift_fn(x, t_from), scale)
                    eps_hat = guided_eps(eps_hat, t_from, shift, sched)
                sigma = ddim_sigma(sched, t_from, t_to, plan.eta)
                noise = (
                    torch.randn(x.shape, generator=gen, dtype=x.dtype)
                    if sigma > 0
                    else torch.zeros_like(x)
                )
                x = ddim_step(x, t_from, t_to, eps_hat, sigma, noise, sched)
    return x


def infer_xT(bundle: ModelBundle, x0: torch.Tensor, plan: SamplerPlan) -> torch.Tensor:
    """Run the deterministic generative process in reverse to find the
    stochastic latent code whose regeneration approximates x0."""
    if plan.method != "ddim":
        raise PlanError("inversion is only defined for the ddim method")
    _check_plan_matches(plan, bundle.sched)
    z = bundle.encode(x0) if bundle.condition == "image" else None
    scale = plan.guidance_scale
    x = x0
    ts = plan.timesteps
    with torch.no_grad():
        for t_from, t_to in zip(ts, ts[1:]):
            t_eval = max(t_from, 1)  # the model has no t=0 step
            eps_hat = bundle.eps_net(x, t_eval)
            if scale != 0.0 and z is not None:
                shift = GuidanceShift(bundle.grad_est(x, z, t_eval), scale)
                eps_hat = guided_eps(eps_hat, t_eval, shift, bundle.sched)
            x = ddim_invert_step(x, t_from, t_to, eps_hat, bundle.sched)
    return x


def autoencode(
    bundle: ModelBundle,
    x0: torch.Tensor,
    plan: SamplerPlan,
    use_inferred_xT: bool = False,
) -> torch.Tensor:
    """Reconstruct images from their semantic code (and, optionally with
    the ddim method, their inferred stochastic code)."""
    if use_inferred_xT and plan.method != "ddim":
        raise PlanError("inferred-x_T reconstruction requires the ddim method")
    z = bundle.encode(x0)
    if use_inferred_xT:
        xT = infer_xT(bundle, x0, plan)
    else:
        gen0 = _generator(plan, "autoencode-xT")
        xT = torch.randn(x0.shape, generator=gen0, dtype=x0.dtype)
    gen = _generator(plan, "autoencode")
    return _run_guided(bundle, xT, plan, gen, bundle.shift_fn(z))


def slerp(a: torch.Tensor, b: torch.Tensor, lam: float) -> torch.Tensor:
    """Per-item spherical interpolation of flattened tensors; zero-angle
    pairs fall back to linear interpolation."""
    flat_a = a.reshape(a.shape[0], -1)
    flat_b = b.reshape(b.shape[0], -1)
    out = torch.empty_like(flat_a)
    for i in range(flat_a.shape[0]):
        va, vb = flat_a[i], flat_b[i]
        cos = torch.dot(va, vb) / (va.norm() * vb.norm())
        omega = torch.arccos(torch.clamp(cos, -1.0, 1.0))
        if float(omega) < 1e-6:
            out[i] = (1 - lam) * va + lam * vb
        else:
            s = torch.sin(omega)
            out[i] = (torch.sin((1 - lam) * omega) * va + torch.sin(lam * omega) * vb) / s
    return out.reshape(a.shape)


def interpolate(
    bundle: ModelBundle,
    xA: torch.Tensor,
    xB: torch.Tensor,
    lam: float,
    mode: str,
    plan: SamplerPlan,
) -> torch.Tensor:
    """Walk between two images: spherical interpolation of their inferred
    stochastic codes, guided either by the interpolated semantic code
    ("latent") or by the interpolation of the two gradient fields
    ("direction")."""
    if not 0.0 <= lam <= 1.0:
        raise PlanError(f"lambda must lie in [0,1], got {lam}")
    if mode not in ("latent", "direction"):
        raise PlanError(f"unknown interpolation mode {mode!r}")
    zA, zB = bundle.encode(xA), bundle.encode(xB)
    xTa = infer_xT(bundle, xA, plan)
    xTb = infer_xT(bundle, xB, plan)
    xT = slerp(xTa, xTb, lam)
    if mode == "latent":
        z_mix = (1 - lam) * zA + lam * zB
        shift_fn = bundle.shift_fn(z_mix)
    else:
        def shift_fn(xt, t):
            ga = bundle.grad_est(xt, zA, t)
            gb = bundle.grad_est(xt, zB, t)
            return (1 - lam) * ga + lam * gb

    gen = _generator(plan, "interpolate")
    return _run_guided(bundle, xT, plan, gen, shift_fn)


def manipulate(
    bundle: ModelBundle,
    x0: torch.Tensor,
    direction: np.ndarray,
    scale: float,
    plan: SamplerPlan,
    z_mean: np.ndarray,
    z_std: np.ndarray,
    use_inferred_xT: bool = True,
) -> torch.Tensor:
    """Move the (normalized) semantic code along a classifier direction and
    decode. The stochastic code is inferred from the input image itself so
    unrelated details stay put."""
    z = bundle.encode(x0)
    direction = torch.as_tensor(np.asarray(direction), dtype=z.dtype)
    if direction.shape != (z.shape[1],):
        raise PlanError(
            f"direction has shape {tuple(direction.shape)}, expected ({z.shape[1]},)"
        )
    mean = torch.as_tensor(np.asarray(z_mean), dtype=z.dtype)
    std = torch.as_tensor(np.asarray(z_std), dtype=z.dtype)
    z_moved = ((z - mean) / std + scale * direction) * std + mean
    if use_inferred_xT:
        if plan.method != "ddim":
            raise PlanError("inferred-x_T manipulation requires the ddim method")
        xT = infer_xT(bundle, x0, plan)
    else:
        xT = torch.randn(
            x0.shape, generator=_generator(plan, "manipulate-xT"), dtype=x0.dtype
        )
    gen = _generator(plan, "manipulate")
    return _run_guided(bundle, xT, plan, gen, bundle.shift_fn(z_moved))


def truncation_sample(
    bundle: ModelBundle,
    label: int,
    scale: float,
    plan: SamplerPlan,
    count: int,
) -> torch.Tensor:
    """Class-guided sampling with a scaled shift (quality/diversity
    trade-off). Requires a label-conditioned gradient estimator."""
    y = torch.full((count,), int(label), dtype=torch.long)
    if bundle.condition != "label":
        raise PlanError("truncation sampling needs a label-conditioned bundle")
    if label < 0 or label >= bundle.encoder.num_classes:
        raise PlanError(f"unknown label {label}")
    z = bundle.encode_label(y)
    spec = bundle.eps_net.spec
    shape = (count, spec.in_channels, spec.image_size, spec.image_size)
    xT = torch.randn(shape, generator=_generator(plan, "truncation-xT"))
    gen = _generator(plan, "truncation")
    plan = replace(plan, guidance_scale=scale)
    return _run_guided(bundle, xT, plan, gen, bundle.shift_fn(z))


def mixed_stage_sample(
    bundle: ModelBundle,
    label: int,
    split: StageSplit,
    plan: SamplerPlan,
    count: int,
) -> torch.Tensor:
    """Unconditional sampling that switches to guided sampling only while
    t lies inside (t1, t2]."""
    if split.t2 > plan.T:
        raise PlanError(f"stage {split} exceeds T={plan.T}")
    y = torch.full((count,), int(label), dtype=torch.long)
    z = bundle.encode_label(y)
    spec = bundle.eps_net.spec
    shape = (count, spec.in_channels, spec.image_size, spec.image_size)
    xT = torch.randn(shape, generator=_generator(plan, "mixed-xT"))
    gen = _generator(plan, "mixed")
    return _run_guided(
        bundle, xT, plan, gen, bundle.shift_fn(z),
        guided_at=lambda t, i: split.contains(t),
    )


def sample_latent_codes(
    denoiser,
    lsched: NoiseSchedule,
    count: int,
    gen: torch.Generator,
    z_mean: np.ndarray,
    z_std: np.ndarray,
) -> torch.Tensor:
    """Ancestral sampling of semantic codes from the latent denoiser,
    denormalized with the stored corpus statistics."""
    z_dim = denoiser.spec.z_dim
    z = torch.randn((count, z_dim), generator=gen)
    with torch.no_grad():
        for t in range(lsched.T, 0, -1):
            eps_hat = denoiser(z, t)
            noise = (
                torch.randn(z.shape, generator=gen)
                if t > 1
                else torch.zeros_like(z)
            )
            z = ddpm_step(z, t, eps_hat, NO_SHIFT, noise, lsched)
    mean = torch.as_tensor(np.asarray(z_mean), dtype=z.dtype)
    std = torch.as_tensor(np.asarray(z_std), dtype=z.dtype)
    return z * std + mean


def improved_unconditional(
    bundle: ModelBundle,
    latent_ckpt: Checkpoint,
    plan: SamplerPlan,
    count: int,
) -> torch.Tensor:
    """Unconditional sampling helped by a latent-code prior: sample z from
    the latent denoiser, guide with the gradient estimator for the leading
    guided_fraction of steps, and let the pretrained model alone finish the
    remaining (final, low-noise) steps."""
    from .training import load_latent_denoiser

    denoiser, lsched, mean, std = load_latent_denoiser(latent_ckpt)
    z = sample_latent_codes(
        denoiser, lsched, count, _generator(plan, "latent-z"), mean, std
    )
    spec = bundle.eps_net.spec
    shape = (count, spec.in_channels, spec.image_size, spec.image_size)
    xT = torch.randn(shape, generator=_generator(plan, "uncond-xT"))
    n_pairs = len(plan.pairs())
    guided_steps = int(round(plan.guided_fraction * n_pairs))
    t_cut = (1.0 - plan.guided_fraction) * plan.T

    def guided_at(t_from, i):
        if plan.guided_cutoff == "steps":
            return i < guided_steps
        return t_from > t_cut

    gen = _generator(plan, "uncond")
    return _run_guided(bundle, xT, plan, gen, bundle.shift_fn(z), guided_at=guided_at)


def rejection_sample_codes(
    latent_ckpt: Checkpoint,
    clf: LinearClassifier,
    label: int,
    count: int,
    seed: int = 0,
    floor: float = 1e-3,
    batch: int = 64,
    min_trials: int = 1000,
) -> tuple[torch.Tensor, dict]:
    """Draw semantic codes from the latent denoiser and keep those the
    latent classifier assigns to the requested class: a draw with
    p(y|z) < 0.5 is always rejected, otherwise it is accepted with
    probability p(y|z). Aborts when the running acceptance rate falls
    below the floor."""
    from .training import load_latent_denoiser

    denoiser, lsched, mean, std = load_latent_denoiser(latent_ckpt)
    gen = torch.Generator().manual_seed(derive_seed(seed, "fewshot-z"))
    urng = np.random.default_rng(derive_seed(seed, "fewshot-u"))
    accepted = []
    trials = 0
    while sum(len(a) for a in accepted) < count:
        z = sample_latent_codes(denoiser, lsched, batch, gen, mean, std)
        z_norm = (z.numpy() - np.asarray(mean)) / np.asarray(std)
        p = clf.predict_proba(z_norm)[:, label]
        u = urng.uniform(size=len(p))
        keep = (p >= 0.5) & (u < p)
        accepted.append(z[torch.as_tensor(keep)])
        trials += len(p)
        n_acc = sum(len(a) for a in accepted)
        if trials >= min_trials and n_acc / trials < floor:
            raise FewShotError(
                f"acceptance rate {n_acc / trials:.2e} below floor {floor:.0e} "
                f"after {trials} trials for class {label}"
            )
    stats = {"trials": trials, "accepted": sum(len(a) for a in accepted)}
    return torch.cat(accepted)[:count], stats


def fewshot_conditional(
    bundle: ModelBundle,
    latent_ckpt: Checkpoint,
    clf: LinearClassifier,
    label: int,
    count: int,
    plan: SamplerPlan,
    floor: float = 1e-3,
) -> tuple[torch.Tensor, dict]:
    """Few-shot conditional generation: rejection-sample codes with the
    latent classifier, then decode them under gradient-estimator guidance."""
    z, stats = rejection_sample_codes(
        latent_ckpt, clf, label, count, seed=plan.seed, floor=floor
    )
    spec = bundle.eps_net.spec
    shape = (count, spec.in_channels, spec.image_size, spec.image_size)
    xT = torch.randn(shape, generator=_generator(plan, "fewshot-xT"))
    gen = _generator(plan, "fewshot")
    images = _run_guided(bundle, xT, plan, gen, bundle.shift_fn(z))
    return images, stats
