"""Training loops: noise-predictor pretraining, gap-filling training with a
frozen pretrained model, the latent-code denoiser, and the latent linear
classifier. Every loop is reproducible from its config seed: batch indices
and timesteps come from a numpy generator, noise from a seeded torch
generator, and model init from torch.manual_seed.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, blobs_from_module, schedule_echo
from .data import Dataset
from .diffusion import pdae_loss, q_sample, simple_loss
from .networks import (
    Encoder,
    EncoderSpec,
    EpsNet,
    EpsNetSpec,
    GradientEstimator,
    LabelEncoder,
    LatentDenoiser,
    LatentDenoiserSpec,
    param_checksum,
)
from .schedule import NoiseSchedule, WeightKind, WeightScheme


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-4
    total_images: int = 1_000_000  # training budget in images seen
    ema_decay: float = 0.9999
    weight_scheme: WeightScheme = field(default_factory=WeightScheme)
    seed: int = 0
    grad_clip: float = 1.0
    eval_every: int = 100_000  # images between held-out evaluations
    eval_samples: int = 256
    condition: str = "image"  # "image" (encoder) or "label" (class table)

    def __post_init__(self):
        if not 0.0 < self.ema_decay <= 1.0:
            raise ValueError(f"ema_decay must lie in (0,1], got {self.ema_decay}")
        if self.total_images < 1 or self.batch_size < 1:
            raise ValueError("budgets must be positive")


def ema_update(raw: dict, ema: dict, decay: float) -> dict:
    """One exponential-moving-average step: decay*ema + (1-decay)*raw."""
    if raw.keys() != ema.keys():
        raise TrainingError("parameter topology mismatch between raw and ema")
    out = {}
    for name, r in raw.items():
        e = ema[name]
        if e.shape != r.shape:
            raise TrainingError(f"shape mismatch for {name}")
        out[name] = decay * e + (1.0 - decay) * r
    return out


class EMA:
    """Shadow copy of a module's parameters, updated after each step."""

    def __init__(self, module: torch.nn.Module, decay: float):
        self.decay = decay
        self.shadow = {
            n: p.detach().clone() for n, p in module.named_parameters()
        }

    def update(self, module: torch.nn.Module) -> None:
        raw = {n: p.detach() for n, p in module.named_parameters()}
        self.shadow = ema_update(raw, self.shadow, self.decay)

    def state_dict_with_buffers(self, module: torch.nn.Module) -> dict:
        """Full state dict with parameters replaced by their EMA shadows."""
        state = {k: v.detach().clone() for k, v in module.state_dict().items()}
        state.update(self.shadow)
        return state


class _Loop:
    """Shared bookkeeping: seeded draws, eval cadence, loss logging."""

    def __init__(self, cfg: TrainConfig, sched: NoiseSchedule, n_items: int):
        self.cfg = cfg
        self.sched = sched
        self.rng = np.random.default_rng(cfg.seed)
        self.gen = torch.Generator().manual_seed(cfg.seed + 1)
        self.n_items = n_items
        self.history = []  # (images_seen, train_loss, eval_loss ...)

    def batches(self):
        seen = 0
        while seen < self.cfg.total_images:
            b = min(self.cfg.batch_size, self.cfg.total_images - seen)
            idx = self.rng.integers(0, self.n_items, size=b)
            t = self.rng.integers(1, self.sched.T + 1, size=b)
            seen += b
            yield seen, idx, torch.as_tensor(t)

    def noise_like(self, x: torch.Tensor) -> torch.Tensor:
        return torch.randn(x.shape, generator=self.gen, dtype=x.dtype)

    def due(self, seen: int) -> bool:
        e = self.cfg.eval_every
        prev = seen - self.cfg.batch_size
        return seen >= self.cfg.total_images or (seen // e) > (prev // e)


def _write_curve(out_dir, name, header, rows):
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / name, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _curve_blobs(history, columns) -> dict:
    arr = np.asarray(history, dtype="<f4").reshape(-1, len(columns))
    return {f"meta/{c}": arr[:, i] for i, c in enumerate(columns)}


def pretrain_ddpm(
    data: Dataset,
    spec: EpsNetSpec,
    cfg: TrainConfig,
    sched: NoiseSchedule,
    out_dir: str | None = None,
) -> Checkpoint:
    """Train a noise predictor with the simple MSE objective.

    A conditional model (spec.num_classes > 0) is trained on the dataset
    labels with the same loop. The held-out evaluation loss (logged per
    eval_every images, using EMA weights) is stored in the checkpoint.
    """
    if spec.num_classes and data.labels is None:
        raise TrainingError("conditional spec but the dataset has no labels")
    if data.image_size != spec.image_size or data.channels != spec.in_channels:
        raise TrainingError(
            f"dataset {data.channels}x{data.image_size} does not match spec "
            f"{spec.in_channels}x{spec.image_size}"
        )
    torch.manual_seed(cfg.seed)
    model = EpsNet(spec)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    ema = EMA(model, cfg.ema_decay)
    loop = _Loop(cfg, sched, len(data))
    images = torch.as_tensor(data.images)
    labels = None if data.labels is None else torch.as_tensor(data.labels)

    # fixed held-out probe for the evaluation-loss curve
    probe_rng = np.random.default_rng(cfg.seed + 17)
    p_idx = probe_rng.integers(0, len(data), size=cfg.eval_samples)
    p_t = torch.as_tensor(probe_rng.integers(1, sched.T + 1, size=cfg.eval_samples))
    p_eps = torch.as_tensor(
        probe_rng.standard_normal((cfg.eval_samples,) + data.images.shape[1:]),
        dtype=torch.float32,
    )
    p_x0 = images[p_idx]
    p_xt = q_sample(p_x0, p_t, p_eps, sched)
    p_y = None if labels is None or not spec.num_classes else labels[p_idx]

    eval_model = EpsNet(spec)
    eval_model.eval()

    def eval_loss() -> float:
        eval_model.load_state_dict(ema.state_dict_with_buffers(model))
        with torch.no_grad():
            total = 0.0
            for lo in range(0, len(p_xt), 128):
                sl = slice(lo, lo + 128)
                y = None if p_y is None else p_y[sl]
                eh = eval_model(p_xt[sl], p_t[sl], y)
                total += float(torch.sum((p_eps[sl] - eh) ** 2) / p_eps[0].numel())
            return total / len(p_xt)

    model.train()
    for seen, idx, t in loop.batches():
        x0 = images[idx]
        y = None if p_y is None else labels[idx]
        eps = loop.noise_like(x0)
        xt = q_sample(x0, t, eps, sched)
        loss = simple_loss(eps, model(xt, t, y))
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        ema.update(model)
        if loop.due(seen):
            loop.history.append((seen, float(loss.detach()), eval_loss()))
            model.train()

    cols = ["images_seen", "train_loss", "eval_loss"]
    _write_curve(out_dir, "loss_curve.csv", cols, loop.history)
    blobs = blobs_from_module(model, "eps/raw")
    blobs.update(
        {
            f"eps/ema/{k}": v.cpu().numpy().astype("<f4")
            for k, v in ema.state_dict_with_buffers(model).items()
        }
    )
    blobs.update(_curve_blobs(loop.history, cols))
    return Checkpoint(
        kind="ddpm",
        schedule=schedule_echo(sched),
        specs={"eps": spec.to_dict()},
        blobs=blobs,
        counters={"images_seen": int(cfg.total_images), "seed": cfg.seed},
    )


def load_eps_net(ckpt: Checkpoint, use_ema: bool = True) -> EpsNet:
    from .checkpoint import load_module_from_blobs

    spec = EpsNetSpec.from_dict(ckpt.specs["eps"])
    net = EpsNet(spec)
    load_module_from_blobs(net, ckpt.blobs, "eps/ema" if use_ema else "eps/raw")
    net.eval()
    return net


def train_pdae(
    data: Dataset,
    pretrained: Checkpoint,
    cfg: TrainConfig,
    encoder_spec: EncoderSpec | None = None,
    out_dir: str | None = None,
) -> Checkpoint:
    """Train the encoder and gradient estimator to fill the posterior mean
    gap left by a frozen pretrained noise predictor.

    With cfg.condition == "label" the encoder is a class-embedding table
    (the dataset must be labeled) and the estimator is guided by the label
    instead of an image code. The frozen predictor is checksummed before
    and after; any drift is a hard failure.

    Two held-out curves are logged: the training objective under this run's
    own weighting, and the same residual under the fixed gap weighting so
    differently-weighted runs stay comparable.
    """
    from .checkpoint import schedule_from_echo

    sched = schedule_from_echo(pretrained.schedule)
    eps_net = load_eps_net(pretrained, use_ema=True)
    spec = eps_net.spec
    if data.image_size != spec.image_size or data.channels != spec.in_channels:
        raise TrainingError(
            "pretrained checkpoint image shape does not match the dataset"
        )
    encoder_spec = encoder_spec or EncoderSpec(
        image_size=spec.image_size, in_channels=spec.in_channels
    )
    torch.manual_seed(cfg.seed)
    if cfg.condition == "label":
        if data.labels is None:
            raise TrainingError("label conditioning needs a labeled dataset")
        encoder: torch.nn.Module = LabelEncoder(data.n_classes, encoder_spec.z_dim)
    elif cfg.condition == "image":
        encoder = Encoder(encoder_spec)
    else:
        raise TrainingError(f"unknown condition {cfg.condition!r}")
    grad_est = GradientEstimator(eps_net, encoder_spec.z_dim)
    frozen_before = param_checksum(eps_net)

    params = list(encoder.parameters()) + list(grad_est.parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    ema_enc, ema_g = EMA(encoder, cfg.ema_decay), EMA(grad_est, cfg.ema_decay)
    loop = _Loop(cfg, sched, len(data))
    images = torch.as_tensor(data.images)
    labels = None if data.labels is None else torch.as_tensor(data.labels)

    def code_for(idx):
        if cfg.condition == "label":
            return encoder(labels[idx])
        return encoder(images[idx])

    probe_rng = np.random.default_rng(cfg.seed + 17)
    p_idx = probe_rng.integers(0, len(data), size=cfg.eval_samples)
    p_t = torch.as_tensor(probe_rng.integers(1, sched.T + 1, size=cfg.eval_samples))
    p_eps = torch.as_tensor(
        probe_rng.standard_normal((cfg.eval_samples,) + data.images.shape[1:]),
        dtype=torch.float32,
    )
    p_x0 = images[p_idx]
    p_xt = q_sample(p_x0, p_t, p_eps, sched)
    gap_scheme = WeightScheme(WeightKind.PDAE, cfg.weight_scheme.gamma)

    def eval_losses() -> tuple[float, float]:
        encoder.eval()
        grad_est.eval()
        with torch.no_grad():
            own = common = 0.0
            for lo in range(0, len(p_xt), 64):
                sl = slice(lo, lo + 64)
                z = code_for(p_idx[sl])
                eh = eps_net(p_xt[sl], p_t[sl])
                g = grad_est(p_xt[sl], z, p_t[sl])
                n = len(p_xt[sl]) / len(p_xt)
                own += float(
                    pdae_loss(p_eps[sl], eh, g, p_t[sl], sched, cfg.weight_scheme) * n
                )
                common += float(
                    pdae_loss(p_eps[sl], eh, g, p_t[sl], sched, gap_scheme) * n
                )
        encoder.train()
        grad_est.train()
        return own, common

    encoder.train()
    grad_est.train()
    for seen, idx, t in loop.batches():
        x0 = images[idx]
        eps = loop.noise_like(x0)
        xt = q_sample(x0, t, eps, sched)
        with torch.no_grad():
            eps_hat = eps_net(xt, t)
        g = grad_est(xt, code_for(idx), t)
        loss = pdae_loss(eps, eps_hat, g, t, sched, cfg.weight_scheme)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        ema_enc.update(encoder)
        ema_g.update(grad_est)
        if loop.due(seen):
            own, common = eval_losses()
            loop.history.append((seen, float(loss.detach()), own, common))

    if param_checksum(eps_net) != frozen_before:
        raise TrainingError("frozen pretrained parameters drifted during training")

    cols = ["images_seen", "train_loss", "eval_loss", "eval_loss_gap_weighted"]
    _write_curve(out_dir, "loss_curve.csv", cols, loop.history)
    blobs = dict(pretrained.blobs)  # carry the frozen predictor along
    blobs.update(blobs_from_module(encoder, "encoder/raw"))
    blobs.update(blobs_from_module(grad_est, "grad_est/raw"))
    for ema_obj, live, prefix in (
        (ema_enc, encoder, "encoder/ema"),
        (ema_g, grad_est, "grad_est/ema"),
    ):
        state = ema_obj.state_dict_with_buffers(live)
        blobs.update(
            {f"{prefix}/{k}": v.cpu().numpy().astype("<f4") for k, v in state.items()}
        )
    blobs.update(_curve_blobs(loop.history, cols))
    return Checkpoint(
        kind="pdae",
        schedule=schedule_echo(sched),
        specs={
            "eps": spec.to_dict(),
            "encoder": encoder_spec.to_dict(),
            "condition": cfg.condition,
            "num_classes": data.n_classes if cfg.condition == "label" else 0,
        },
        blobs=blobs,
        counters={
            "images_seen": int(cfg.total_images),
            "seed": cfg.seed,
            "frozen_checksum_ok": 1,
        },
    )


def normalize_codes(codes: np.ndarray, floor: float = 1e-6):
    """Zero-mean unit-variance per dimension; degenerate dimensions are
    floored and reported. Returns (normalized, mean, std, n_floored)."""
    mean = codes.mean(axis=0)
    std = codes.std(axis=0)
    degenerate = std < floor
    n_floored = int(degenerate.sum())
    if n_floored:
        warnings.warn(f"{n_floored} latent dimensions have (near-)zero variance")
        std = np.where(degenerate, floor, std)
    return (codes - mean) / std, mean, std, n_floored


def train_latent_dpm(
    codes: np.ndarray,
    spec: LatentDenoiserSpec,
    cfg: TrainConfig,
    sched: NoiseSchedule,
    out_dir: str | None = None,
) -> Checkpoint:
    """Train an MLP noise predictor over normalized latent codes with an L1
    objective on its own (constant-beta) schedule. Normalization statistics
    are stored with the checkpoint."""
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim != 2 or codes.shape[1] != spec.z_dim:
        raise TrainingError(f"codes must be [N,{spec.z_dim}], got {codes.shape}")
    normed, mean, std, n_floored = normalize_codes(codes)
    torch.manual_seed(cfg.seed)
    model = LatentDenoiser(spec)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    ema = EMA(model, cfg.ema_decay)
    loop = _Loop(cfg, sched, len(codes))
    z_all = torch.as_tensor(normed, dtype=torch.float32)

    model.train()
    for seen, idx, t in loop.batches():
        z0 = z_all[idx]
        eps = loop.noise_like(z0)
        zt = q_sample(z0, t, eps, sched)
        loss = torch.mean(torch.abs(eps - model(zt, t)))
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        ema.update(model)
        if loop.due(seen):
            loop.history.append((seen, float(loss.detach())))

    cols = ["codes_seen", "train_loss"]
    _write_curve(out_dir, "latent_loss_curve.csv", cols, loop.history)
    blobs = blobs_from_module(model, "latent/raw")
    blobs.update(
        {
            f"latent/ema/{k}": v.cpu().numpy().astype("<f4")
            for k, v in ema.state_dict_with_buffers(model).items()
        }
    )
    blobs["norm/mean"] = mean.astype("<f4")
    blobs["norm/std"] = std.astype("<f4")
    blobs.update(_curve_blobs(loop.history, cols))
    return Checkpoint(
        kind="latent",
        schedule=schedule_echo(sched),
        specs={"latent": spec.to_dict()},
        blobs=blobs,
        counters={
            "codes_seen": int(cfg.total_images),
            "seed": cfg.seed,
            "floored_dims": n_floored,
        },
    )


def load_latent_denoiser(ckpt: Checkpoint, use_ema: bool = True):
    """Returns (denoiser, schedule, mean, std)."""
    from .checkpoint import load_module_from_blobs, schedule_from_echo

    spec = LatentDenoiserSpec.from_dict(ckpt.specs["latent"])
    net = LatentDenoiser(spec)
    load_module_from_blobs(net, ckpt.blobs, "latent/ema" if use_ema else "latent/raw")
    net.eval()
    return net, schedule_from_echo(ckpt.schedule), ckpt.blobs["norm/mean"], ckpt.blobs["norm/std"]


@dataclass
class LinearClassifier:
    """Logistic classifier over normalized latent codes. For the binary
    case the separating hyperplane's unit normal is the manipulation
    direction."""

    weight: np.ndarray  # [n_classes, z_dim] (binary stored as 2 rows)
    bias: np.ndarray
    n_classes: int

    def logits(self, z: np.ndarray) -> np.ndarray:
        return z @ self.weight.T + self.bias

    def predict_proba(self, z: np.ndarray) -> np.ndarray:
        lg = self.logits(z)
        lg = lg - lg.max(axis=1, keepdims=True)
        e = np.exp(lg)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, z: np.ndarray) -> np.ndarray:
        return self.logits(z).argmax(axis=1)

    def direction(self, positive: int = 1, negative: int = 0) -> np.ndarray:
        """Unit normal vector of the separating hyperplane."""
        d = self.weight[positive] - self.weight[negative]
        return d / np.linalg.norm(d)

    def to_blobs(self) -> dict:
        return {"clf/weight": self.weight.astype("<f4"), "clf/bias": self.bias.astype("<f4")}

    @classmethod
    def from_blobs(cls, blobs: dict) -> "LinearClassifier":
        w = np.asarray(blobs["clf/weight"], dtype=np.float64)
        return cls(w, np.asarray(blobs["clf/bias"], dtype=np.float64), w.shape[0])


def train_latent_classifier(
    codes: np.ndarray,
    labels: np.ndarray,
    oversample_positive: bool = False,
    steps: int = 2000,
    lr: float = 0.05,
    batch_size: int = 64,
    seed: int = 0,
) -> LinearClassifier:
    """Logistic regression on (already normalized) codes.

    With oversample_positive=True (the positive/unlabeled setting), each
    batch is balanced by resampling the positively labeled codes, which
    must be class 1.
    """
    codes = np.asarray(codes, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise TrainingError("need at least two classes")
    n_classes = int(labels.max()) + 1
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = torch.nn.Linear(codes.shape[1], n_classes)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    z = torch.as_tensor(codes, dtype=torch.float32)
    y = torch.as_tensor(labels)
    pos_idx = np.flatnonzero(labels == 1)
    neg_idx = np.flatnonzero(labels != 1)
    for _ in range(steps):
        if oversample_positive:
            half = batch_size // 2
            idx = np.concatenate(
                [
                    rng.choice(pos_idx, size=half),
                    rng.choice(neg_idx, size=batch_size - half),
                ]
            )
        else:
            idx = rng.integers(0, len(codes), size=batch_size)
        loss = torch.nn.functional.cross_entropy(model(z[idx]), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    return LinearClassifier(
        model.weight.detach().numpy().astype(np.float64),
        model.bias.detach().numpy().astype(np.float64),
        n_classes,
    )
