import pytest

from pdae.checkpoint import Checkpoint
from pdae.cli import main
from pdae.data import make_synthetic_mixture
from pdae.networks import EncoderSpec, EpsNetSpec
from pdae.schedule import make_linear_schedule
from pdae.training import TrainConfig, pretrain_ddpm, train_pdae

SCHED = make_linear_schedule(20, 1e-3, 0.2)
TINY = EpsNetSpec(
    image_size=8, base_channels=8, channel_multipliers=(1, 2),
    attention_resolutions=(), time_embed_dim=16, groupnorm_groups=4, dropout=0.0,
)


@pytest.fixture(scope="module")
def tiny_pdae_ckpt(tmp_path_factory):
    """A minimally trained stack so CLI paths exercise real checkpoints."""
    data = make_synthetic_mixture(6, image_size=8, n_classes=2, seed=2)
    cfg = TrainConfig(batch_size=32, learning_rate=2e-3, total_images=1600,
                      ema_decay=0.99, seed=0, eval_every=1600, eval_samples=32)
    pre = pretrain_ddpm(data, TINY, cfg, SCHED)
    enc = EncoderSpec(image_size=8, base_channels=8, channel_multipliers=(1, 2),
                      z_dim=8, groupnorm_groups=4)
    ckpt = train_pdae(data, pre, cfg, enc)
    path = tmp_path_factory.mktemp("ckpt") / "pdae.ckpt"
    ckpt.save(path)
    return path


def base_args(out, extra=()):
    return [
        "--out", str(out),
        "--set", "schedule.T=20",
        "--set", "schedule.beta_start=0.001",
        "--set", "schedule.beta_end=0.2",
        "--set", "dataset.n_points=6",
        "--set", "dataset.n_classes=2",
        "--set", "dataset.seed=2",
        "--set", "sampler.steps=4",
        *extra,
    ]


class TestDumpSchedule:
    def test_emits_t_rows_and_figure(self, tmp_path):
        out = tmp_path / "run"
        assert main(["dump-schedule", *base_args(out)]) == 0
        rows = (out / "schedule.csv").read_text().splitlines()
        assert len(rows) == 21  # header + T rows
        assert (out / "weighting.png").exists()
        assert (out / "manifest.txt").exists()
        assert (out / "config.resolved").exists()
        assert not (out / "FAILED").exists()

    def test_config_file_and_env_override(self, tmp_path, monkeypatch):
        cfgfile = tmp_path / "run.cfg"
        cfgfile.write_text("schedule.T = 10\n")
        monkeypatch.setenv("PDAE_SCHEDULE_T", "5")
        out = tmp_path / "run"
        assert main(["dump-schedule", "--config", str(cfgfile), "--out", str(out)]) == 0
        rows = (out / "schedule.csv").read_text().splitlines()
        assert len(rows) == 6  # env wins over the file


class TestFailureMarker:
    def test_missing_checkpoint_fails_with_marker(self, tmp_path):
        out = tmp_path / "run"
        rc = main(["measure-gap", *base_args(out), "--pdae", "/nonexistent.ckpt"])
        assert rc == 1
        assert (out / "FAILED").exists()

    def test_unknown_config_key_fails(self, tmp_path):
        out = tmp_path / "run"
        rc = main(["dump-schedule", "--out", str(out), "--set", "bogus.key=1"])
        assert rc == 1
        assert (out / "FAILED").exists()


class TestMeasureGap:
    def test_deterministic_csv(self, tmp_path, tiny_pdae_ckpt):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            rc = main([
                "measure-gap", *base_args(out),
                "--pdae", str(tiny_pdae_ckpt),
                "--set", "eval.gap_samples=16",
                "--set", "eval.t_stride=5",
                "--count", "2",
            ])
            assert rc == 0
            outs.append((out / "gap_curve.csv").read_text())
        assert outs[0] == outs[1]
        assert (tmp_path / "a" / "gap_curve.png").exists()
        assert (tmp_path / "a" / "one_step.png").exists()


class TestTrainCommands:
    def test_pretrain_then_pdae_train(self, tmp_path):
        out1 = tmp_path / "pre"
        rc = main([
            "pretrain", *base_args(out1),
            "--set", "model.base_channels=8",
            "--set", "model.channel_multipliers=1,2",
            "--set", "model.attention_resolutions=",
            "--set", "model.time_embed_dim=16",
            "--set", "model.groupnorm_groups=4",
            "--set", "model.dropout=0",
            "--set", "train.batch_size=16",
            "--set", "train.total_images=320",
            "--set", "train.eval_every=320",
            "--set", "train.eval_samples=16",
            "--set", "train.ema_decay=0.99",
        ])
        assert rc == 0
        assert (out1 / "pretrained.ckpt").exists()
        assert (out1 / "loss_curve.csv").exists()
        assert (out1 / "loss_curve.png").exists()

        out2 = tmp_path / "pdae"
        rc = main([
            "pdae-train", *base_args(out2),
            "--pretrained", str(out1 / "pretrained.ckpt"),
            "--set", "encoder.base_channels=8",
            "--set", "encoder.channel_multipliers=1,2",
            "--set", "encoder.z_dim=8",
            "--set", "train.batch_size=16",
            "--set", "train.total_images=320",
            "--set", "train.eval_every=320",
            "--set", "train.eval_samples=16",
            "--set", "train.ema_decay=0.99",
        ])
        assert rc == 0
        assert (out2 / "pdae.ckpt").exists()
        ckpt = Checkpoint.load(out2 / "pdae.ckpt")
        assert ckpt.kind == "pdae"
        assert ckpt.config["train.total_images"] == 320

    def test_pdae_train_refuses_mismatched_image_size(self, tmp_path, tiny_pdae_ckpt):
        out = tmp_path / "bad"
        rc = main([
            "pdae-train", *base_args(out),
            "--pretrained", str(tiny_pdae_ckpt),
            "--set", "dataset.image_size=16",  # checkpoint is 8x8
        ])
        assert rc == 1
        marker = (out / "FAILED").read_text()
        assert "does not match" in marker


class TestSamplingCommands:
    def test_reconstruct(self, tmp_path, tiny_pdae_ckpt):
        out = tmp_path / "rec"
        rc = main([
            "reconstruct", *base_args(out),
            "--pdae", str(tiny_pdae_ckpt), "--count", "2", "--inferred-xt",
        ])
        assert rc == 0
        assert (out / "recon.png").exists()
        text = (out / "metrics.csv").read_text()
        assert "mse" in text and "ssim" in text

    def test_encode_rows(self, tmp_path, tiny_pdae_ckpt):
        out = tmp_path / "enc"
        rc = main(["encode", *base_args(out), "--pdae", str(tiny_pdae_ckpt)])
        assert rc == 0
        rows = (out / "codes.csv").read_text().splitlines()
        assert len(rows) == 7  # header + 6 points
        assert rows[0].endswith("label")

    def test_interpolate(self, tmp_path, tiny_pdae_ckpt):
        out = tmp_path / "interp"
        rc = main([
            "interpolate", *base_args(out),
            "--pdae", str(tiny_pdae_ckpt),
            "--index-a", "0", "--index-b", "1", "--lambdas", "0,0.5,1",
        ])
        assert rc == 0
        assert (out / "interpolation.png").exists()
