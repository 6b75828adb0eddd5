import pytest

from pdae.config import ConfigError, RunConfig


class TestParsing:
    def test_defaults(self):
        cfg = RunConfig.load(None, apply_env=False)
        assert cfg.get("train.batch_size") == 128
        assert cfg.get("train.learning_rate") == 1e-4
        assert cfg.get("train.ema_decay") == 0.9999
        assert cfg.get("schedule.T") == 1000
        assert cfg.get("schedule.beta_start") == 1e-4
        assert cfg.get("schedule.beta_end") == 0.02
        assert cfg.get("latent.beta") == 0.008
        assert cfg.get("train.gamma") == 0.1

    def test_file_values_and_comments(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text(
            "# a comment\n"
            "train.batch_size = 32\n"
            "model.channel_multipliers = 1,2\n"
            "dataset.kind = synthetic  # trailing comment\n"
            "\n"
        )
        cfg = RunConfig.load(p, apply_env=False)
        assert cfg.get("train.batch_size") == 32
        assert cfg.get("model.channel_multipliers") == (1, 2)
        assert cfg.get("dataset.kind") == "synthetic"

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("train.nonexistent = 3\n")
        with pytest.raises(ConfigError, match="unknown config key"):
            RunConfig.load(p, apply_env=False)

    def test_bad_value_rejected(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("train.batch_size = many\n")
        with pytest.raises(ConfigError):
            RunConfig.load(p, apply_env=False)

    def test_missing_equals_rejected(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("train.batch_size 32\n")
        with pytest.raises(ConfigError):
            RunConfig.load(p, apply_env=False)


class TestEnvOverride:
    def test_env_prefix(self):
        cfg = RunConfig()
        cfg.apply_env({"PDAE_TRAIN_BATCH_SIZE": "64", "PDAE_SAMPLER_ETA": "0.5"})
        assert cfg.get("train.batch_size") == 64
        assert cfg.get("sampler.eta") == 0.5

    def test_unrelated_env_ignored(self):
        cfg = RunConfig()
        cfg.apply_env({"PATH": "/bin", "PDAE": "x"})
        assert cfg.get("train.batch_size") == 128


class TestDumpResolve:
    def test_dump_reload_round_trip(self, tmp_path):
        cfg = RunConfig()
        cfg.override("train.batch_size", 16)
        cfg.override("model.channel_multipliers", "1,2")
        p = tmp_path / "resolved.cfg"
        cfg.dump(p)
        back = RunConfig.load(p, apply_env=False)
        assert back.values == cfg.values


class TestBuilders:
    def test_schedule_builder(self):
        cfg = RunConfig()
        cfg.override("schedule.T", 10)
        s = cfg.schedule()
        assert s.T == 10

    def test_train_config_builder(self):
        from pdae.schedule import WeightKind

        cfg = RunConfig()
        cfg.override("train.weight_scheme", "simple")
        tc = cfg.train_config()
        assert tc.weight_scheme.kind is WeightKind.SIMPLE
        cfg.override("train.weight_scheme", "pdae")
        assert cfg.train_config().weight_scheme.kind is WeightKind.PDAE

    def test_eps_spec_builder(self):
        cfg = RunConfig()
        cfg.override("dataset.image_size", 8)
        cfg.override("model.channel_multipliers", "1,2")
        spec = cfg.eps_spec()
        assert spec.image_size == 8
        assert spec.channel_multipliers == (1, 2)

    def test_plan_builder(self):
        cfg = RunConfig()
        cfg.override("schedule.T", 100)
        plan = cfg.sampler_plan(n_steps=10)
        assert plan.timesteps[0] == 0 and plan.timesteps[-1] == 100
        assert len(plan.timesteps) == 11
