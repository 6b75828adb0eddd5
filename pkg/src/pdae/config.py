"""Flat `key = value` run configuration.

Keys use section dots (e.g. ``train.batch_size``); unknown keys are
rejected. Any key can be overridden through the environment with the
``PDAE_`` prefix (dots become underscores, uppercased: ``train.batch_size``
-> ``PDAE_TRAIN_BATCH_SIZE``). Every run directory stores the fully
resolved configuration.
"""

from __future__ import annotations

import os
from pathlib import Path

ENV_PREFIX = "PDAE_"


class ConfigError(ValueError):
    pass


def _int_list(text: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(v) for v in text.split(","))


# key -> (parser, default)
CONFIG_KEYS = {
    "dataset.kind": (str, "synthetic"),
    "dataset.path": (str, ""),
    "dataset.labels_path": (str, ""),
    "dataset.image_size": (int, 8),
    "dataset.channels": (int, 1),
    "dataset.n_points": (int, 16),
    "dataset.n_classes": (int, 2),
    "dataset.seed": (int, 0),
    "schedule.T": (int, 1000),
    "schedule.beta_start": (float, 1e-4),
    "schedule.beta_end": (float, 0.02),
    "model.base_channels": (int, 32),
    "model.channel_multipliers": (_int_list, (1, 2, 4)),
    "model.attention_resolutions": (_int_list, ()),
    "model.time_embed_dim": (int, 128),
    "model.groupnorm_groups": (int, 8),
    "model.num_res_blocks": (int, 1),
    "model.dropout": (float, 0.1),
    "model.num_classes": (int, 0),
    "encoder.base_channels": (int, 32),
    "encoder.channel_multipliers": (_int_list, (1, 2, 4)),
    "encoder.attention_resolutions": (_int_list, ()),
    "encoder.z_dim": (int, 64),
    "train.batch_size": (int, 128),
    "train.learning_rate": (float, 1e-4),
    "train.total_images": (int, 1_000_000),
    "train.ema_decay": (float, 0.9999),
    "train.weight_scheme": (str, "pdae"),
    "train.gamma": (float, 0.1),
    "train.grad_clip": (float, 1.0),
    "train.seed": (int, 0),
    "train.eval_every": (int, 100_000),
    "train.eval_samples": (int, 256),
    "train.condition": (str, "image"),  # image | label (for gap training)
    "latent.T": (int, 1000),
    "latent.beta": (float, 0.008),
    "latent.hidden": (int, 256),
    "latent.n_layers": (int, 6),
    "latent.time_embed_dim": (int, 64),
    "latent.batch_size": (int, 512),
    "latent.learning_rate": (float, 1e-4),
    "latent.total_codes": (int, 500_000),
    "sampler.method": (str, "ddim"),
    "sampler.steps": (int, 100),
    "sampler.eta": (float, 0.0),
    "sampler.guidance_scale": (float, 1.0),
    "sampler.guided_fraction": (float, 0.7),
    "sampler.guided_cutoff": (str, "steps"),  # steps | t-range
    "sampler.seed": (int, 0),
    "fewshot.floor": (float, 1e-3),
    "eval.gap_samples": (int, 256),
    "eval.t_stride": (int, 0),  # 0 -> max(1, T // 100)
    "eval.stage_threshold": (float, 0.9),
    "eval.stage_stride": (int, 50),
    "eval.stage_samples": (int, 24),
}


class RunConfig:
    """Resolved configuration: defaults, then file, then environment."""

    def __init__(self, values: dict | None = None):
        self.values = {k: default for k, (_, default) in CONFIG_KEYS.items()}
        for key, val in (values or {}).items():
            self._set(key, val, parse=False)

    def _set(self, key: str, value, parse: bool):
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        parser, _ = CONFIG_KEYS[key]
        self.values[key] = parser(value) if parse else value

    def get(self, key: str):
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    @classmethod
    def load(cls, path: str | Path | None = None, apply_env: bool = True) -> "RunConfig":
        cfg = cls()
        if path is not None:
            for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, val = (part.strip() for part in line.split("=", 1))
                try:
                    cfg._set(key, val, parse=True)
                except ConfigError:
                    raise
                except ValueError as e:
                    raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}")
        if apply_env:
            cfg.apply_env()
        return cfg

    def apply_env(self, environ=None) -> None:
        environ = os.environ if environ is None else environ
        for key in CONFIG_KEYS:
            env_key = ENV_PREFIX + key.replace(".", "_").upper()
            if env_key in environ:
                self._set(key, environ[env_key], parse=True)

    def override(self, key: str, value) -> None:
        self._set(key, str(value), parse=True)

    def dump(self, path: str | Path) -> None:
        lines = []
        for key in sorted(self.values):
            val = self.values[key]
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"{key} = {val}")
        Path(path).write_text("\n".join(lines) + "\n")

    def as_dict(self) -> dict:
        return {
            k: (",".join(map(str, v)) if isinstance(v, tuple) else v)
            for k, v in self.values.items()
        }

    # -- object builders ----------------------------------------------------

    def schedule(self):
        from .schedule import make_linear_schedule

        return make_linear_schedule(
            self.get("schedule.T"),
            self.get("schedule.beta_start"),
            self.get("schedule.beta_end"),
        )

    def latent_schedule(self):
        from .schedule import make_constant_schedule

        return make_constant_schedule(self.get("latent.T"), self.get("latent.beta"))

    def eps_spec(self):
        from .networks import EpsNetSpec

        return EpsNetSpec(
            image_size=self.get("dataset.image_size"),
            in_channels=self.get("dataset.channels"),
            base_channels=self.get("model.base_channels"),
            channel_multipliers=self.get("model.channel_multipliers"),
            attention_resolutions=self.get("model.attention_resolutions"),
            time_embed_dim=self.get("model.time_embed_dim"),
            groupnorm_groups=self.get("model.groupnorm_groups"),
            num_res_blocks=self.get("model.num_res_blocks"),
            dropout=self.get("model.dropout"),
            num_classes=self.get("model.num_classes"),
        )

    def encoder_spec(self):
        from .networks import EncoderSpec

        return EncoderSpec(
            image_size=self.get("dataset.image_size"),
            in_channels=self.get("dataset.channels"),
            base_channels=self.get("encoder.base_channels"),
            channel_multipliers=self.get("encoder.channel_multipliers"),
            attention_resolutions=self.get("encoder.attention_resolutions"),
            z_dim=self.get("encoder.z_dim"),
        )

    def latent_spec(self):
        from .networks import LatentDenoiserSpec

        return LatentDenoiserSpec(
            z_dim=self.get("encoder.z_dim"),
            hidden=self.get("latent.hidden"),
            n_layers=self.get("latent.n_layers"),
            time_embed_dim=self.get("latent.time_embed_dim"),
        )

    def train_config(self):
        from .schedule import WeightKind, WeightScheme
        from .training import TrainConfig

        name = self.get("train.weight_scheme").lower()
        if name not in ("simple", "pdae"):
            raise ConfigError(f"unknown weight scheme {name!r}")
        scheme = WeightScheme(
            WeightKind.PDAE if name == "pdae" else WeightKind.SIMPLE,
            self.get("train.gamma"),
        )
        return TrainConfig(
            batch_size=self.get("train.batch_size"),
            learning_rate=self.get("train.learning_rate"),
            total_images=self.get("train.total_images"),
            ema_decay=self.get("train.ema_decay"),
            weight_scheme=scheme,
            seed=self.get("train.seed"),
            grad_clip=self.get("train.grad_clip"),
            eval_every=self.get("train.eval_every"),
            eval_samples=self.get("train.eval_samples"),
            condition=self.get("train.condition"),
        )

    def sampler_plan(self, n_steps: int | None = None, seed: int | None = None):
        from .pipelines import SamplerPlan

        return SamplerPlan.from_steps(
            method=self.get("sampler.method"),
            T=self.get("schedule.T"),
            n_steps=n_steps if n_steps is not None else self.get("sampler.steps"),
            eta=self.get("sampler.eta"),
            guidance_scale=self.get("sampler.guidance_scale"),
            guided_fraction=self.get("sampler.guided_fraction"),
            guided_cutoff=self.get("sampler.guided_cutoff"),
            seed=seed if seed is not None else self.get("sampler.seed"),
        )

    def dataset(self):
        from .data import ingest_dataset

        return ingest_dataset(
            kind=self.get("dataset.kind"),
            path=self.get("dataset.path") or None,
            labels_path=self.get("dataset.labels_path") or None,
            image_size=self.get("dataset.image_size"),
            channels=self.get("dataset.channels"),
            n_points=self.get("dataset.n_points"),
            n_classes=self.get("dataset.n_classes"),
            seed=self.get("dataset.seed"),
        )
