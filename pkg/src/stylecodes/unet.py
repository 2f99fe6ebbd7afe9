"""Prompt-conditioned toy UNet denoiser with decoder-side communication points.

Layout for the default config (widths 32/64/128 at 32/16/8 px)::

    conv_in ----------------------------------------------> s0 (w0 @ 32)
    down0 -> enc1 ----------------------------------------> s1 (w1 @ 16)
    down1 -> enc2 ----------------------------------------> s2 (w2 @ 8)
    mid (block + self-attention)          tap0 (+r0)
    upA                                   tap1 (+r1), + s2
    upsample -> upB                       tap2 (+r2), + s1
    upsample -> upC                       tap3 (+r3), + s0
    norm -> silu -> conv_out -> eps

Each tap records the block output before its residual is added; the skip of
the matching resolution is merged after the residual.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
import hashlib
import json
import math

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError, UsageError
from .numerics import Tensor
from .numerics import rng as rngmod

NULL_PROMPT = -1
CLASSES = ("circle", "square", "triangle", "cross")


@dataclass(frozen=True)
class BaseUNetConfig:
    image_channels: int = 3
    image_size: int = 32
    widths: tuple = (32, 64, 128)
    temb_dim: int = 64
    n_classes: int = 4
    heads: int = 4
    groups: int = 8

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != 3:
            raise ConfigError("widths must list exactly three levels")
        if self.image_size % 4:
            raise ConfigError("image_size must be divisible by 4")
        for w in self.widths:
            if w % self.groups:
                raise ConfigError(f"groups={self.groups} must divide width {w}")
        if self.widths[2] % self.heads:
            raise ConfigError("heads must divide the midblock width")
        if self.temb_dim % 2:
            raise ConfigError("temb_dim must be even")

    @property
    def resolutions(self):
        s = self.image_size
        return (s, s // 2, s // 4)

    @property
    def image_shape(self):
        return (self.image_channels, self.image_size, self.image_size)

    @property
    def mid_shape(self):
        return (self.widths[2], self.resolutions[2], self.resolutions[2])

    def tap_shapes(self):
        """Shapes (without batch) of the four communication points, in generation order."""
        w0, w1, w2 = self.widths
        r0, r1, r2 = self.resolutions
        return [(w2, r2, r2), (w2, r2, r2), (w1, r1, r1), (w0, r0, r0)]

    def to_dict(self):
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


TOY_CONFIG = BaseUNetConfig(image_size=4, widths=(4, 4, 8), temb_dim=8, heads=2, groups=2)


# ---------------------------------------------------------------------------
# Building blocks shared with the control module
# ---------------------------------------------------------------------------


def timestep_embedding(t, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape ``[B, dim]``."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


def block_shapes(prefix: str, cin: int, cout: int, temb_dim: int) -> dict:
    return {
        f"{prefix}.conv.w": (cout, cin, 3, 3),
        f"{prefix}.conv.b": (cout,),
        f"{prefix}.norm.g": (cout,),
        f"{prefix}.norm.b": (cout,),
        f"{prefix}.emb.w": (temb_dim, cout),
        f"{prefix}.emb.b": (cout,),
    }


def block(p: dict, prefix: str, x: Tensor, emb: Tensor, groups: int) -> Tensor:
    """conv3x3 -> groupnorm -> + emb bias -> silu, identity residual when widths match."""
    h = nx.conv2d(x, p[f"{prefix}.conv.w"], p[f"{prefix}.conv.b"], padding=1)
    h = nx.group_norm(h, groups, p[f"{prefix}.norm.g"], p[f"{prefix}.norm.b"])
    e = nx.linear(nx.silu(emb), p[f"{prefix}.emb.w"], p[f"{prefix}.emb.b"])
    h = nx.silu(h + nx.reshape(e, e.shape + (1, 1)))
    if x.shape[1] == h.shape[1]:
        h = h + x
    return h


def attn_shapes(prefix: str, c: int) -> dict:
    return {
        f"{prefix}.norm.g": (c,),
        f"{prefix}.norm.b": (c,),
        f"{prefix}.qkv.w": (c, 3 * c),
        f"{prefix}.qkv.b": (3 * c,),
        f"{prefix}.out.w": (c, c),
        f"{prefix}.out.b": (c,),
    }


def self_attention(p: dict, prefix: str, x: Tensor, heads: int, groups: int) -> Tensor:
    B, C, H, W = x.shape
    h = nx.group_norm(x, groups, p[f"{prefix}.norm.g"], p[f"{prefix}.norm.b"])
    tok = nx.transpose(nx.reshape(h, (B, C, H * W)), (0, 2, 1))
    qkv = nx.linear(tok, p[f"{prefix}.qkv.w"], p[f"{prefix}.qkv.b"])
    q, k, v = qkv[..., :C], qkv[..., C:2 * C], qkv[..., 2 * C:]
    a = nx.linear(nx.attention(q, k, v, heads), p[f"{prefix}.out.w"], p[f"{prefix}.out.b"])
    return x + nx.reshape(nx.transpose(a, (0, 2, 1)), (B, C, H, W))


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def param_shapes(cfg: BaseUNetConfig) -> dict:
    w0, w1, w2 = cfg.widths
    d = cfg.temb_dim
    C = cfg.image_channels
    shapes = {
        "base.temb.w1": (d, d),
        "base.temb.b1": (d,),
        "base.temb.w2": (d, d),
        "base.temb.b2": (d,),
        "base.prompt.table": (cfg.n_classes + 1, d),
        "base.conv_in.w": (w0, C, 3, 3),
        "base.conv_in.b": (w0,),
        "base.down0.w": (w1, w0, 3, 3),
        "base.down0.b": (w1,),
        "base.down1.w": (w2, w1, 3, 3),
        "base.down1.b": (w2,),
    }
    shapes.update(block_shapes("base.enc1", w1, w1, d))
    shapes.update(block_shapes("base.enc2", w2, w2, d))
    shapes.update(block_shapes("base.mid", w2, w2, d))
    shapes.update(attn_shapes("base.mid.attn", w2))
    shapes.update(block_shapes("base.upA", w2, w2, d))
    shapes.update(block_shapes("base.upB", w2, w1, d))
    shapes.update(block_shapes("base.upC", w1, w0, d))
    shapes.update({
        "base.out.norm.g": (w0,),
        "base.out.norm.b": (w0,),
        "base.conv_out.w": (C, w0, 3, 3),
        "base.conv_out.b": (C,),
    })
    return shapes


def _fan_in(shape) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


def init_base(cfg: BaseUNetConfig = BaseUNetConfig(), seed: int = 0, dtype=np.float32) -> dict:
    """Fan-in scaled normal weights, zero biases, unit norm gains, zero output conv."""
    params = {}
    for i, (name, shape) in enumerate(param_shapes(cfg).items()):
        leaf = name.rsplit(".", 1)[1]
        if name.startswith("base.conv_out"):
            arr = np.zeros(shape)
        elif leaf == "g":
            arr = np.ones(shape)
        elif leaf == "b" or leaf.startswith("b"):
            arr = np.zeros(shape)
        elif name == "base.prompt.table":
            arr = rngmod.key(seed, i).standard_normal(shape)
        else:
            arr = rngmod.key(seed, i).standard_normal(shape) / math.sqrt(_fan_in(shape))
        params[name] = Tensor(arr.astype(dtype))
    return params


def count_params(params: dict) -> int:
    return int(sum(p.data.size for p in params.values()))


class FrozenParams(dict):
    """Read-only view over a parameter dict; every tensor is flagged frozen."""

    def __init__(self, params: dict):
        super().__init__(params)
        for t in self.values():
            t.frozen = True
            t.requires_grad = False
            t.grad = None
            t.data.flags.writeable = False

    def __setitem__(self, key, value):
        raise UsageError("frozen parameters cannot be replaced")

    def sha256(self) -> str:
        return nx.params_sha256(self)


def freeze(params: dict) -> FrozenParams:
    """Freeze parameters: gradients may flow through them but they never update."""
    return params if isinstance(params, FrozenParams) else FrozenParams(params)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


@dataclass
class EncoderState:
    emb: Tensor
    temb: Tensor
    skips: tuple
    mid: Tensor


def time_mlp(p: dict, t, dim: int, dtype) -> Tensor:
    s = Tensor(timestep_embedding(t, dim, dtype))
    h = nx.silu(nx.linear(s, p["base.temb.w1"], p["base.temb.b1"]))
    return nx.linear(h, p["base.temb.w2"], p["base.temb.b2"])


def prompt_rows(cfg: BaseUNetConfig, prompts) -> np.ndarray:
    idx = np.asarray(prompts, dtype=np.int64).reshape(-1)
    if np.any((idx < NULL_PROMPT) | (idx >= cfg.n_classes)):
        raise ConfigError(f"prompt class ids must be in -1..{cfg.n_classes - 1}")
    return np.where(idx == NULL_PROMPT, cfg.n_classes, idx)


def base_encode(p: dict, cfg: BaseUNetConfig, z, t, prompts) -> EncoderState:
    """Encoder and midblock; the result is reused by both passes of the control scheme."""
    z = nx.as_tensor(z)
    if z.shape[1:] != cfg.image_shape:
        raise DimensionError(f"z_t has shape {z.shape[1:]}, expected {cfg.image_shape}")
    B = z.shape[0]
    t = np.broadcast_to(np.asarray(t), (B,))
    temb = time_mlp(p, t, cfg.temb_dim, z.dtype)
    emb = temb + nx.take_rows(p["base.prompt.table"], prompt_rows(cfg, np.broadcast_to(prompts, (B,))))
    g = cfg.groups
    s0 = nx.conv2d(z, p["base.conv_in.w"], p["base.conv_in.b"], padding=1)
    h = nx.conv2d(s0, p["base.down0.w"], p["base.down0.b"], stride=2, padding=1)
    s1 = block(p, "base.enc1", h, emb, g)
    h = nx.conv2d(s1, p["base.down1.w"], p["base.down1.b"], stride=2, padding=1)
    s2 = block(p, "base.enc2", h, emb, g)
    mid = block(p, "base.mid", s2, emb, g)
    mid = self_attention(p, "base.mid.attn", mid, cfg.heads, g)
    return EncoderState(emb=emb, temb=temb, skips=(s0, s1, s2), mid=mid)


def check_residuals(cfg: BaseUNetConfig, residuals, batch: int | None = None):
    shapes = cfg.tap_shapes()
    if len(residuals) != len(shapes):
        raise DimensionError(f"expected {len(shapes)} residuals, got {len(residuals)}")
    for i, (r, s) in enumerate(zip(residuals, shapes)):
        if tuple(r.shape[1:]) != s or (batch is not None and r.shape[0] != batch):
            raise DimensionError(f"residual {i} has shape {tuple(r.shape)}, expected (B,)+{s}")


def base_decode(p: dict, cfg: BaseUNetConfig, enc: EncoderState, residuals=None, need_eps: bool = True):
    """Decoder half. Returns ``(eps, taps)``; taps are recorded before residual addition."""
    s0, s1, s2 = enc.skips
    if residuals is not None:
        check_residuals(cfg, residuals, s0.shape[0])
    g = cfg.groups
    taps = []

    def tap(h, i):
        taps.append(h)
        return h if residuals is None else h + residuals[i]

    h = tap(enc.mid, 0)
    h = tap(block(p, "base.upA", h, enc.emb, g), 1) + s2
    h = tap(block(p, "base.upB", nx.upsample2x(h), enc.emb, g), 2) + s1
    h = tap(block(p, "base.upC", nx.upsample2x(h), enc.emb, g), 3) + s0
    if not need_eps:
        return None, taps
    h = nx.silu(nx.group_norm(h, g, p["base.out.norm.g"], p["base.out.norm.b"]))
    eps = nx.conv2d(h, p["base.conv_out.w"], p["base.conv_out.b"], padding=1)
    return eps, taps


def forward_with_taps(p: dict, cfg: BaseUNetConfig, z, t, prompts, residuals=None):
    """Full base forward pass; returns ``(eps_hat, taps)``."""
    enc = base_encode(p, cfg, z, t, prompts)
    return base_decode(p, cfg, enc, residuals)


def base_denoiser(p: dict, cfg: BaseUNetConfig):
    """Adapter to the sampler's denoiser signature (style arguments are ignored)."""

    def model(z, t, prompts, styles=None, style_on=None):
        with nx.no_grad():
            eps, _ = forward_with_taps(p, cfg, z, t, prompts)
        return eps.data

    return model
