"""Trainable function approximators.

Three players: a compact U-Net noise predictor, a convolutional semantic
encoder, and a gradient estimator that reuses the (frozen) downsampling
half and time embedding of a pretrained noise predictor while adding new
middle/decoder/output stacks conditioned on the latent code through AdaGN.
All forward passes are deterministic given parameters and inputs.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class SpecError(ValueError):
    """Inconsistent network specification."""


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10_000.0):
    """Sinusoidal features for integer timesteps, shape [B, dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    )
    angles = t.double()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(angles), torch.sin(angles)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimeEmbed(nn.Module):
    """Sinusoidal features followed by a two-layer projection."""

    def __init__(self, base_dim: int, out_dim: int):
        super().__init__()
        self.base_dim = base_dim
        self.proj = nn.Sequential(
            nn.Linear(base_dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim)
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        w = self.proj[0].weight
        return self.proj(timestep_embedding(t, self.base_dim).to(w.dtype))


class AdaGN(nn.Module):
    """Group normalization modulated twice: first by a time-embedding affine
    pair, then (optionally) by a latent-code affine pair:
    z_s * (t_s * GroupNorm(h) + t_b) + z_b.

    The scale halves of both projections are bias-initialized at 1 so an
    untrained module starts as plain GroupNorm.
    """

    def __init__(self, channels: int, t_dim: int, z_dim: int | None, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels, affine=False)
        self.t_proj = nn.Linear(t_dim, 2 * channels)
        nn.init.zeros_(self.t_proj.weight)
        with torch.no_grad():
            self.t_proj.bias[:channels] = 1.0
            self.t_proj.bias[channels:] = 0.0
        if z_dim is not None:
            self.z_proj = nn.Linear(z_dim, 2 * channels)
            nn.init.zeros_(self.z_proj.weight)
            with torch.no_grad():
                self.z_proj.bias[:channels] = 1.0
                self.z_proj.bias[channels:] = 0.0
        else:
            self.z_proj = None

    def forward(self, h, t_emb, z_emb=None):
        t_s, t_b = self.t_proj(t_emb)[:, :, None, None].chunk(2, dim=1)
        out = t_s * self.norm(h) + t_b
        if self.z_proj is not None:
            if z_emb is None:
                raise SpecError("this AdaGN requires a latent embedding")
            z_s, z_b = self.z_proj(z_emb)[:, :, None, None].chunk(2, dim=1)
            out = z_s * out + z_b
        return out


class ResBlock(nn.Module):
    def __init__(self, ch_in, ch_out, t_dim, groups, dropout=0.0, z_dim=None):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.adagn = AdaGN(ch_out, t_dim, z_dim, groups)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x, t_emb, z_emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.adagn(h, t_emb, z_emb)
        h = self.conv2(self.dropout(F.silu(h)))
        return h + self.skip(x)


class AttnBlock(nn.Module):
    """Single-head self-attention over spatial positions."""

    def __init__(self, channels, groups):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x):
        b, c, hh, ww = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3 * c, hh * ww).chunk(3, dim=1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, hh, ww)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.op = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.op(x)


class Upsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Stage(nn.Module):
    """One U-Net entry: a residual block with optional attention after it."""

    def __init__(self, block: ResBlock, attn: AttnBlock | None):
        super().__init__()
        self.block = block
        self.attn = attn

    def forward(self, x, t_emb, z_emb=None):
        x = self.block(x, t_emb, z_emb)
        return x if self.attn is None else self.attn(x)


@dataclass(frozen=True)
class EpsNetSpec:
    """Compact U-Net configuration. Desk-scale defaults target 28x28 or
    32x32 single-channel inputs on CPU."""

    image_size: int = 28
    in_channels: int = 1
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2, 4)
    attention_resolutions: tuple = ()
    time_embed_dim: int = 128
    groupnorm_groups: int = 8
    num_res_blocks: int = 1
    dropout: float = 0.1
    num_classes: int = 0  # 0 means unconditional

    def __post_init__(self):
        if not self.channel_multipliers:
            raise SpecError("channel_multipliers must be nonempty")
        ladder = {self.image_size // 2**i for i in range(len(self.channel_multipliers))}
        missing = set(self.attention_resolutions) - ladder
        if missing:
            raise SpecError(
                f"attention resolutions {sorted(missing)} not in ladder {sorted(ladder)}"
            )
        if self.image_size % 2 ** (len(self.channel_multipliers) - 1):
            raise SpecError("image_size must halve cleanly at every level")

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "in_channels": self.in_channels,
            "base_channels": self.base_channels,
            "channel_multipliers": list(self.channel_multipliers),
            "attention_resolutions": list(self.attention_resolutions),
            "time_embed_dim": self.time_embed_dim,
            "groupnorm_groups": self.groupnorm_groups,
            "num_res_blocks": self.num_res_blocks,
            "dropout": self.dropout,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpsNetSpec":
        d = dict(d)
        d["channel_multipliers"] = tuple(d["channel_multipliers"])
        d["attention_resolutions"] = tuple(d["attention_resolutions"])
        return cls(**d)


def _down_layout(spec: EpsNetSpec):
    """Entries of the downsampling half plus the skip-channel trail."""
    entries = []  # (kind, ch_in, ch_out, resolution)
    skips = [spec.base_channels]
    ch, res = spec.base_channels, spec.image_size
    for lvl, mult in enumerate(spec.channel_multipliers):
        for _ in range(spec.num_res_blocks):
            entries.append(("res", ch, spec.base_channels * mult, res))
            ch = spec.base_channels * mult
            skips.append(ch)
        if lvl < len(spec.channel_multipliers) - 1:
            entries.append(("down", ch, ch, res))
            res //= 2
            skips.append(ch)
    return entries, skips, ch, res


def _up_layout(spec: EpsNetSpec, skips: list, mid_ch: int, mid_res: int):
    entries = []
    skips = list(skips)
    ch, res = mid_ch, mid_res
    for lvl, mult in reversed(list(enumerate(spec.channel_multipliers))):
        for i in range(spec.num_res_blocks + 1):
            entries.append(("res", ch + skips.pop(), spec.base_channels * mult, res))
            ch = spec.base_channels * mult
            if lvl and i == spec.num_res_blocks:
                entries.append(("up", ch, ch, res))
                res *= 2
    assert not skips
    return entries


def _build_entries(entries, spec: EpsNetSpec, z_dim=None):
    mods = nn.ModuleList()
    for kind, ch_in, ch_out, res in entries:
        if kind == "res":
            attn = (
                AttnBlock(ch_out, spec.groupnorm_groups)
                if res in spec.attention_resolutions
                else None
            )
            mods.append(
                Stage(
                    ResBlock(
                        ch_in, ch_out, spec.time_embed_dim, spec.groupnorm_groups,
                        spec.dropout, z_dim,
                    ),
                    attn,
                )
            )
        elif kind == "down":
            mods.append(Downsample(ch_in))
        else:
            mods.append(Upsample(ch_in))
    return mods


class EpsNet(nn.Module):
    """Noise predictor. Maps [B,C,H,W] -> [B,C,H,W] given per-sample
    timesteps; optionally conditioned on a class label through an embedding
    added to the time embedding."""

    def __init__(self, spec: EpsNetSpec):
        super().__init__()
        self.spec = spec
        self.time_embed = TimeEmbed(spec.base_channels, spec.time_embed_dim)
        self.label_embed = (
            nn.Embedding(spec.num_classes, spec.time_embed_dim)
            if spec.num_classes
            else None
        )
        self.in_conv = nn.Conv2d(spec.in_channels, spec.base_channels, 3, padding=1)
        down_entries, skips, mid_ch, mid_res = _down_layout(spec)
        self.downs = _build_entries(down_entries, spec)
        g = spec.groupnorm_groups
        self.mid1 = ResBlock(mid_ch, mid_ch, spec.time_embed_dim, g, spec.dropout)
        self.mid_attn = AttnBlock(mid_ch, g)
        self.mid2 = ResBlock(mid_ch, mid_ch, spec.time_embed_dim, g, spec.dropout)
        self.ups = _build_entries(_up_layout(spec, skips, mid_ch, mid_res), spec)
        self.out_norm = nn.GroupNorm(g, spec.base_channels)
        self.out_conv = nn.Conv2d(spec.base_channels, spec.in_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def _embed(self, t, y, batch, device):
        if not torch.is_tensor(t):
            t = torch.full((batch,), int(t), dtype=torch.long, device=device)
        emb = self.time_embed(t)
        if y is not None:
            if self.label_embed is None:
                raise SpecError("model is unconditional but a label was given")
            emb = emb + self.label_embed(y)
        return emb

    def encode(self, xt, t, y=None):
        """Run the downsampling half; returns (t_emb, skip activations,
        bottom feature map). This is the part a gradient estimator reuses."""
        if xt.shape[1] != self.spec.in_channels or xt.shape[2] != self.spec.image_size:
            raise SpecError(
                f"input {tuple(xt.shape)} does not match spec "
                f"{self.spec.in_channels}x{self.spec.image_size}"
            )
        emb = self._embed(t, y, xt.shape[0], xt.device)
        h = self.in_conv(xt)
        hs = [h]
        for mod in self.downs:
            h = mod(h, emb) if isinstance(mod, Stage) else mod(h)
            hs.append(h)
        return emb, hs, h

    def forward(self, xt, t, y=None):
        emb, hs, h = self.encode(xt, t, y)
        h = self.mid2(self.mid_attn(self.mid1(h, emb)), emb)
        for mod in self.ups:
            if isinstance(mod, Stage):
                h = mod(torch.cat([h, hs.pop()], dim=1), emb)
            else:
                h = mod(h)
        return self.out_conv(F.silu(self.out_norm(h)))


@dataclass(frozen=True)
class EncoderSpec:
    image_size: int = 28
    in_channels: int = 1
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2, 4)
    attention_resolutions: tuple = ()
    z_dim: int = 64
    groupnorm_groups: int = 8

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "in_channels": self.in_channels,
            "base_channels": self.base_channels,
            "channel_multipliers": list(self.channel_multipliers),
            "attention_resolutions": list(self.attention_resolutions),
            "z_dim": self.z_dim,
            "groupnorm_groups": self.groupnorm_groups,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        d = dict(d)
        d["channel_multipliers"] = tuple(d["channel_multipliers"])
        d["attention_resolutions"] = tuple(d["attention_resolutions"])
        return cls(**d)


class Encoder(nn.Module):
    """Stacked GroupNorm-SiLU-Conv stages (stride 2 each) with optional
    self-attention, flattened into a deterministic z of length z_dim."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        g = spec.groupnorm_groups
        layers = [nn.Conv2d(spec.in_channels, spec.base_channels, 3, padding=1)]
        ch, res = spec.base_channels, spec.image_size
        for mult in spec.channel_multipliers:
            out_ch = spec.base_channels * mult
            layers += [
                nn.GroupNorm(g, ch),
                nn.SiLU(),
                nn.Conv2d(ch, out_ch, 3, stride=2, padding=1),
            ]
            ch, res = out_ch, (res + 1) // 2
            if res in spec.attention_resolutions:
                layers.append(AttnBlock(ch, g))
        layers += [nn.GroupNorm(g, ch), nn.SiLU()]
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(ch * res * res, spec.z_dim)

    def forward(self, x0):
        h = self.body(x0)
        return self.head(h.flatten(1))


class LabelEncoder(nn.Module):
    """Class label in place of an image code: a plain embedding table."""

    def __init__(self, num_classes: int, z_dim: int):
        super().__init__()
        self.num_classes = num_classes
        self.embed = nn.Embedding(num_classes, z_dim)

    def forward(self, y):
        return self.embed(y)


class GradientEstimator(nn.Module):
    """Estimates the latent-code log-density gradient at (x_t, t).

    Reuses the pretrained noise predictor's input conv, downsampling half
    and time embedding (held frozen, outside this module's parameters) and
    adds new middle/decoder/output stacks whose normalization layers are
    modulated by both the time embedding and the projected latent code.
    Skip connections run from the reused encoder to the new decoder. The
    final convolution is zero-initialized so training starts from the
    unguided pretrained model.
    """

    def __init__(self, pretrained: EpsNet, z_dim: int):
        super().__init__()
        self._frozen = (pretrained,)  # tuple hides it from parameters()
        for p in pretrained.parameters():
            p.requires_grad_(False)
        spec = pretrained.spec
        self.z_dim = z_dim
        d = spec.time_embed_dim
        self.z_proj = nn.Sequential(nn.Linear(z_dim, d), nn.SiLU(), nn.Linear(d, d))
        _, skips, mid_ch, mid_res = _down_layout(spec)
        g = spec.groupnorm_groups
        self.mid1 = ResBlock(mid_ch, mid_ch, d, g, spec.dropout, z_dim=d)
        self.mid_attn = AttnBlock(mid_ch, g)
        self.mid2 = ResBlock(mid_ch, mid_ch, d, g, spec.dropout, z_dim=d)
        self.ups = _build_entries(
            _up_layout(spec, skips, mid_ch, mid_res), spec, z_dim=d
        )
        self.out_norm = nn.GroupNorm(g, spec.base_channels)
        self.out_conv = nn.Conv2d(spec.base_channels, spec.in_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    @property
    def pretrained(self) -> EpsNet:
        return self._frozen[0]

    def forward(self, xt, z, t):
        if z.shape[-1] != self.z_dim:
            raise SpecError(f"latent code has length {z.shape[-1]}, expected {self.z_dim}")
        with torch.no_grad():
            emb, hs, h = self.pretrained.encode(xt, t)
        z_emb = self.z_proj(z)
        h = self.mid1(h, emb, z_emb)
        h = self.mid2(self.mid_attn(h), emb, z_emb)
        for mod in self.ups:
            if isinstance(mod, Stage):
                h = mod(torch.cat([h, hs.pop()], dim=1), emb, z_emb)
            else:
                h = mod(h)
        return self.out_conv(F.silu(self.out_norm(h)))


@dataclass(frozen=True)
class LatentDenoiserSpec:
    z_dim: int = 64
    hidden: int = 256
    n_layers: int = 6
    time_embed_dim: int = 64

    def to_dict(self) -> dict:
        return {
            "z_dim": self.z_dim,
            "hidden": self.hidden,
            "n_layers": self.n_layers,
            "time_embed_dim": self.time_embed_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LatentDenoiserSpec":
        return cls(**d)


class LatentDenoiser(nn.Module):
    """MLP noise predictor over normalized latent codes; the time embedding
    is concatenated at every layer."""

    def __init__(self, spec: LatentDenoiserSpec):
        super().__init__()
        self.spec = spec
        self.time_embed = TimeEmbed(spec.time_embed_dim, spec.time_embed_dim)
        dims = [spec.z_dim] + [spec.hidden] * (spec.n_layers - 1)
        self.layers = nn.ModuleList(
            nn.Linear(d + spec.time_embed_dim, spec.hidden) for d in dims
        )
        self.out = nn.Linear(spec.hidden, spec.z_dim)

    def forward(self, zt, t):
        if not torch.is_tensor(t):
            t = torch.full((zt.shape[0],), int(t), dtype=torch.long, device=zt.device)
        emb = self.time_embed(t)
        h = zt
        for layer in self.layers:
            h = F.silu(layer(torch.cat([h, emb], dim=1)))
        return self.out(h)


def param_checksum(module: nn.Module) -> str:
    """SHA-256 over all parameters in named order; bitwise freeze contract."""
    digest = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        digest.update(name.encode())
        digest.update(p.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
