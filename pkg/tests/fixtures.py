"""Trained-model fixtures shared across the test suite.

Training on CPU is the slow part of this suite, so every trained artifact
is cached under tests/_cache keyed by name; delete the directory to force
a rebuild. Builders are deterministic (seeded), so a rebuilt cache is
equivalent. `python tests/fixtures.py` prebuilds everything.
"""

from __future__ import annotations

import sys
import time
from pathlib import Path

from pdae.checkpoint import Checkpoint
from pdae.data import make_synthetic_mixture
from pdae.networks import EncoderSpec, EpsNetSpec, LatentDenoiserSpec
from pdae.schedule import (
    WeightKind,
    WeightScheme,
    make_constant_schedule,
    make_linear_schedule,
)
from pdae.training import TrainConfig, pretrain_ddpm, train_latent_dpm, train_pdae

CACHE = Path(__file__).parent / "_cache"

SIMPLE = WeightScheme(WeightKind.SIMPLE)
PDAE_W = WeightScheme(WeightKind.PDAE, 0.1)

# -- the 4-point toy world (T=100) -------------------------------------------

TOY_SCHED = make_linear_schedule(100, 1e-3, 0.2)
TOY_SPEC = EpsNetSpec(
    image_size=8, base_channels=16, channel_multipliers=(1, 2),
    attention_resolutions=(), time_embed_dim=32, groupnorm_groups=8, dropout=0.0,
)
TOY_ENC = EncoderSpec(
    image_size=8, base_channels=8, channel_multipliers=(1, 2),
    z_dim=16, groupnorm_groups=4,
)


def toy4_data():
    return make_synthetic_mixture(4, image_size=8, n_classes=2, seed=1)


def build_toy4_pretrained() -> Checkpoint:
    cfg = TrainConfig(
        batch_size=128, learning_rate=1e-3, total_images=2_000_000,
        ema_decay=0.9995, seed=0, eval_every=250_000, eval_samples=256,
    )
    return pretrain_ddpm(toy4_data(), TOY_SPEC, cfg, TOY_SCHED)


def _toy_pdae_cfg(scheme: WeightScheme) -> TrainConfig:
    return TrainConfig(
        batch_size=128, learning_rate=1e-3, total_images=768_000,
        ema_decay=0.999, weight_scheme=scheme, seed=0,
        eval_every=96_000, eval_samples=256,
    )


def build_toy4_pdae() -> Checkpoint:
    return train_pdae(
        toy4_data(), cached("toy4_pretrained"), _toy_pdae_cfg(PDAE_W), TOY_ENC
    )


def build_toy4_pdae_simple() -> Checkpoint:
    return train_pdae(
        toy4_data(), cached("toy4_pretrained"), _toy_pdae_cfg(SIMPLE), TOY_ENC
    )


def build_toy4_latent() -> Checkpoint:
    from pdae.pipelines import ModelBundle, encode_dataset

    bundle = ModelBundle.from_pdae(cached("toy4_pdae"))
    codes = encode_dataset(bundle, toy4_data().images)
    cfg = TrainConfig(
        batch_size=64, learning_rate=1e-3, total_images=300_000,
        ema_decay=0.999, seed=0, eval_every=300_000, eval_samples=16,
    )
    spec = LatentDenoiserSpec(z_dim=16, hidden=64, n_layers=4, time_embed_dim=32)
    return train_latent_dpm(codes, spec, cfg, make_constant_schedule(1000, 0.008))


# -- richer 64-point toy world: detail beyond what z can memorize -------------
# (used for inversion/reconstruction quality, where the stochastic code has
# to matter; the 4-point world is so memorized that even random-x_T
# reconstruction is near-perfect)


def toy64_data():
    return make_synthetic_mixture(64, image_size=8, n_classes=2, seed=9)


def build_toy64_pretrained() -> Checkpoint:
    cfg = TrainConfig(
        batch_size=128, learning_rate=1e-3, total_images=1_200_000,
        ema_decay=0.9995, seed=0, eval_every=300_000, eval_samples=256,
    )
    return pretrain_ddpm(toy64_data(), TOY_SPEC, cfg, TOY_SCHED)


def build_toy64_pdae() -> Checkpoint:
    cfg = TrainConfig(
        batch_size=128, learning_rate=1e-3, total_images=768_000,
        ema_decay=0.999, weight_scheme=PDAE_W, seed=0,
        eval_every=192_000, eval_samples=256,
    )
    return train_pdae(toy64_data(), cached("toy64_pretrained"), cfg, TOY_ENC)


def build_toy64_latent() -> Checkpoint:
    from pdae.pipelines import ModelBundle, encode_dataset

    bundle = ModelBundle.from_pdae(cached("toy64_pdae"))
    codes = encode_dataset(bundle, toy64_data().images)
    cfg = TrainConfig(
        batch_size=64, learning_rate=1e-3, total_images=400_000,
        ema_decay=0.999, seed=0, eval_every=400_000, eval_samples=16,
    )
    spec = LatentDenoiserSpec(z_dim=16, hidden=128, n_layers=4, time_embed_dim=32)
    return train_latent_dpm(codes, spec, cfg, make_constant_schedule(1000, 0.008))


# -- single-point world: closed-form optima for network-level contracts -------


def single_data():
    return make_synthetic_mixture(1, image_size=8, n_classes=1, seed=11)


def build_single_pretrained() -> Checkpoint:
    cfg = TrainConfig(
        batch_size=128, learning_rate=1e-3, total_images=96_000,
        ema_decay=0.999, seed=0, eval_every=48_000, eval_samples=128,
    )
    return pretrain_ddpm(single_data(), TOY_SPEC, cfg, TOY_SCHED)


def build_single_pdae() -> Checkpoint:
    # the pretrained model is deliberately undertrained, so the gap it
    # leaves is large and structured; the estimator learns to predict it
    cfg = TrainConfig(
        batch_size=128, learning_rate=1e-3, total_images=768_000,
        ema_decay=0.999, weight_scheme=PDAE_W, seed=0,
        eval_every=192_000, eval_samples=128,
    )
    return train_pdae(single_data(), cached("single_pretrained"), cfg, TOY_ENC)


# -- paired conditional / unconditional runs (same seed and budget) -----------


def _fig2_cfg() -> TrainConfig:
    return TrainConfig(
        batch_size=128, learning_rate=1e-3, total_images=512_000,
        ema_decay=0.9995, seed=0, eval_every=64_000, eval_samples=256,
    )


def build_fig2_uncond() -> Checkpoint:
    return pretrain_ddpm(toy4_data(), TOY_SPEC, _fig2_cfg(), TOY_SCHED)


def build_fig2_cond() -> Checkpoint:
    spec = EpsNetSpec(**{**TOY_SPEC.to_dict(), "num_classes": 2})
    return pretrain_ddpm(toy4_data(), spec, _fig2_cfg(), TOY_SCHED)


# -- the 4-class stage world (T=1000, protocol-faithful 50-stride grid) -------

STAGE_SCHED = make_linear_schedule(1000)


def stage_data():
    return make_synthetic_mixture(12, image_size=8, n_classes=4, seed=3)


def build_stage_pretrained() -> Checkpoint:
    cfg = TrainConfig(
        batch_size=128, learning_rate=1e-3, total_images=1_000_000,
        ema_decay=0.9995, seed=0, eval_every=250_000, eval_samples=256,
    )
    return pretrain_ddpm(stage_data(), TOY_SPEC, cfg, STAGE_SCHED)


def build_stage_pdae_label() -> Checkpoint:
    cfg = TrainConfig(
        batch_size=128, learning_rate=1e-3, total_images=1_000_000,
        ema_decay=0.999, weight_scheme=PDAE_W, seed=0,
        eval_every=250_000, eval_samples=256, condition="label",
    )
    return train_pdae(stage_data(), cached("stage_pretrained"), cfg, TOY_ENC)


# -- the 28x28 world (criterion-scale gap filling) ----------------------------

MNIST_SCHED = make_linear_schedule(1000)
MNIST_SPEC = EpsNetSpec(
    image_size=28, base_channels=16, channel_multipliers=(1, 2, 4),
    attention_resolutions=(7,), time_embed_dim=64, groupnorm_groups=8, dropout=0.1,
)
MNIST_ENC = EncoderSpec(
    image_size=28, base_channels=16, channel_multipliers=(1, 2, 4),
    z_dim=64, groupnorm_groups=8,
)


def mnist_scale_data():
    return make_synthetic_mixture(512, image_size=28, n_classes=4, seed=7)


def build_mnist_pretrained() -> Checkpoint:
    cfg = TrainConfig(
        batch_size=64, learning_rate=2e-4, total_images=500_000,
        ema_decay=0.9995, seed=0, eval_every=125_000, eval_samples=256,
    )
    return pretrain_ddpm(mnist_scale_data(), MNIST_SPEC, cfg, MNIST_SCHED)


def build_mnist_pdae() -> Checkpoint:
    cfg = TrainConfig(
        batch_size=64, learning_rate=2e-4, total_images=1_000_000,
        ema_decay=0.9995, weight_scheme=PDAE_W, seed=0,
        eval_every=250_000, eval_samples=256,
    )
    return train_pdae(
        mnist_scale_data(), cached("mnist_pretrained"), cfg, MNIST_ENC
    )


BUILDERS = {
    "toy4_pretrained": build_toy4_pretrained,
    "toy4_pdae": build_toy4_pdae,
    "toy4_pdae_simple": build_toy4_pdae_simple,
    "toy4_latent": build_toy4_latent,
    "toy64_pretrained": build_toy64_pretrained,
    "toy64_pdae": build_toy64_pdae,
    "toy64_latent": build_toy64_latent,
    "single_pretrained": build_single_pretrained,
    "single_pdae": build_single_pdae,
    "fig2_uncond": build_fig2_uncond,
    "fig2_cond": build_fig2_cond,
    "stage_pretrained": build_stage_pretrained,
    "stage_pdae_label": build_stage_pdae_label,
    "mnist_pretrained": build_mnist_pretrained,
    "mnist_pdae": build_mnist_pdae,
}


def cached(name: str) -> Checkpoint:
    path = CACHE / f"{name}.ckpt"
    if path.exists():
        return Checkpoint.load(path)
    t0 = time.time()
    print(f"[fixtures] building {name} (first run only; cached afterwards)...",
          flush=True)
    ckpt = BUILDERS[name]()
    CACHE.mkdir(exist_ok=True)
    ckpt.save(path)
    print(f"[fixtures] built {name} in {time.time() - t0:.0f}s", flush=True)
    return ckpt


def main(argv):
    names = argv[1:] or list(BUILDERS)
    for name in names:
        cached(name)


if __name__ == "__main__":
    main(sys.argv)
