"""Frozen patch embedder plus the trainable style encoder and decoder.

The embedder turns an image into an 8x8 grid of 32-wide patch tokens using
fixed statistics. The encoder attends from one learned query over those
tokens and squashes the result into a 20-dim latent in (-1, 1). The decoder
lifts a latent into a single key/value token that a learned grid of queries
attends to, producing a seed with the shape of the base midblock state.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
import math

import numpy as np

from . import numerics as nx
from .codec import LATENT_DIM
from .errors import DimensionError, ValidationError
from .numerics import Tensor
from .numerics import rng as rngmod

TOKEN_WIDTH = 32
N_RANDOM_FEATURES = 10
EMBEDDER_SEED = 20240917


@dataclass(frozen=True)
class StyleConfig:
    width: int = 64
    heads: int = 4
    layers: int = 3
    mlp_hidden: int = 128
    latent_dim: int = LATENT_DIM
    patch: int = 4

    def to_dict(self):
        return asdict(self)


TOY_STYLE = StyleConfig(width=8, heads=2, layers=2, mlp_hidden=8, patch=2)


# ---------------------------------------------------------------------------
# Patch embedder
# ---------------------------------------------------------------------------


def make_projection(patch: int = 4, seed: int = EMBEDDER_SEED) -> np.ndarray:
    n = 3 * patch * patch
    return (rngmod.key(seed).standard_normal((n, N_RANDOM_FEATURES)) / math.sqrt(n)).astype(np.float32)


class PatchEmbedder:
    """Deterministic, parameter-free image -> ``[grid*grid, 32]`` token map.

    Per patch: channel means (3), channel stds (3), fraction of pixels above
    and at-or-below zero per channel (6), mean squared horizontal and
    vertical differences per channel (6), position encoding (4) and a pinned
    random projection of the raw pixels (10).
    """

    def __init__(self, patch: int = 4, proj: np.ndarray | None = None, seed: int = EMBEDDER_SEED):
        self.patch = patch
        self.seed = seed
        self.proj = make_projection(patch, seed) if proj is None else np.asarray(proj, dtype=np.float32)
        if self.proj.shape != (3 * patch * patch, N_RANDOM_FEATURES):
            raise DimensionError(f"embedder projection has shape {self.proj.shape}")

    def __call__(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float32)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected [B, 3, H, W] images, got {x.shape}")
        if not np.all(np.isfinite(x)) or x.min() < -1.0 or x.max() > 1.0:
            raise ValidationError("image values must lie in [-1, 1]")
        B, _, H, W = x.shape
        p = self.patch
        if H % p or W % p:
            raise DimensionError(f"image {H}x{W} not divisible into {p}x{p} patches")
        gh, gw = H // p, W // p
        pt = x.reshape(B, 3, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)  # B, gh, gw, 3, p, p
        flat = pt.reshape(B, gh, gw, 3, p * p)
        mu = flat.mean(axis=-1)
        d = flat - flat[..., :1]
        var = (d * d).mean(axis=-1) - d.mean(axis=-1) ** 2
        std = np.sqrt(np.maximum(var, 0.0))
        hi = (flat > 0).mean(axis=-1)
        lo = 1.0 - hi
        ex = ((pt[..., :, 1:] - pt[..., :, :-1]) ** 2).mean(axis=(-2, -1))
        ey = ((pt[..., 1:, :] - pt[..., :-1, :]) ** 2).mean(axis=(-2, -1))
        rows, cols = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
        pos = np.stack([np.sin(2 * np.pi * rows / gh), np.cos(2 * np.pi * rows / gh),
                        np.sin(2 * np.pi * cols / gw), np.cos(2 * np.pi * cols / gw)], axis=-1)
        pos = np.broadcast_to(pos.astype(np.float32), (B, gh, gw, 4))
        rp = pt.reshape(B, gh, gw, 3 * p * p) @ self.proj
        tok = np.concatenate([mu, std, hi, lo, ex, ey, pos, rp], axis=-1).astype(np.float32)
        tok = tok.reshape(B, gh * gw, TOKEN_WIDTH)
        return tok[0] if single else tok


def embed_image(image, embedder: PatchEmbedder | None = None) -> np.ndarray:
    return (embedder or PatchEmbedder())(image)


def style_features(images, embedder: PatchEmbedder | None = None) -> np.ndarray:
    """Position-invariant style descriptor: mean and std over patch tokens."""
    tok = embed_image(images, embedder)
    return np.concatenate([tok.mean(axis=-2), tok.std(axis=-2)], axis=-1)


# ---------------------------------------------------------------------------
# Encoder / decoder parameters
# ---------------------------------------------------------------------------


def _xattn_shapes(prefix: str, width: int, kv_width: int, hidden: int) -> dict:
    return {
        f"{prefix}.q.w": (width, width), f"{prefix}.q.b": (width,),
        f"{prefix}.k.w": (kv_width, width), f"{prefix}.k.b": (width,),
        f"{prefix}.v.w": (kv_width, width), f"{prefix}.v.b": (width,),
        f"{prefix}.o.w": (width, width), f"{prefix}.o.b": (width,),
        f"{prefix}.ln1.g": (width,), f"{prefix}.ln1.b": (width,),
        f"{prefix}.mlp1.w": (width, hidden), f"{prefix}.mlp1.b": (hidden,),
        f"{prefix}.mlp2.w": (hidden, width), f"{prefix}.mlp2.b": (width,),
        f"{prefix}.ln2.g": (width,), f"{prefix}.ln2.b": (width,),
    }


def encoder_shapes(cfg: StyleConfig = StyleConfig()) -> dict:
    s = {"styleenc.query": (1, cfg.width),
         "styleenc.tok_ln.g": (TOKEN_WIDTH,), "styleenc.tok_ln.b": (TOKEN_WIDTH,)}
    for i in range(cfg.layers):
        s.update(_xattn_shapes(f"styleenc.layer{i}", cfg.width, TOKEN_WIDTH, cfg.mlp_hidden))
    s.update({"styleenc.out.w": (cfg.width, cfg.latent_dim), "styleenc.out.b": (cfg.latent_dim,)})
    return s


def decoder_shapes(mid_shape, cfg: StyleConfig = StyleConfig()) -> dict:
    C, H, W = mid_shape
    s = {"styledec.lift.w": (cfg.latent_dim, cfg.width), "styledec.lift.b": (cfg.width,),
         "styledec.grid": (H * W, cfg.width)}
    for i in range(cfg.layers):
        s.update(_xattn_shapes(f"styledec.layer{i}", cfg.width, cfg.width, cfg.mlp_hidden))
    s.update({"styledec.out.w": (cfg.width, C), "styledec.out.b": (C,)})
    return s


def init_noise(shapes: dict, seed: int, sigma: float = 1e-4, dtype=np.float32, stream: int = 0) -> dict:
    """White-noise init (std ``sigma``) for weights/biases; norm gains 1, norm biases 0."""
    params = {}
    for i, (name, shape) in enumerate(shapes.items()):
        parent, leaf = name.rsplit(".", 1)
        is_norm = parent.endswith(("ln", "ln1", "ln2", "tok_ln")) or parent.endswith(".norm")
        if is_norm:
            arr = np.ones(shape) if leaf == "g" else np.zeros(shape)
        else:
            arr = sigma * rngmod.key(seed, stream, i).standard_normal(shape)
        params[name] = Tensor(arr.astype(dtype))
    return params


def init_style(mid_shape, cfg: StyleConfig = StyleConfig(), seed: int = 0, sigma: float = 1e-4,
               dtype=np.float32) -> dict:
    p = init_noise(encoder_shapes(cfg), seed, sigma, dtype, stream=1)
    p.update(init_noise(decoder_shapes(mid_shape, cfg), seed, sigma, dtype, stream=2))
    return p


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


def _xattn_layer(p: dict, prefix: str, h: Tensor, kv: Tensor, heads: int) -> Tensor:
    q = nx.linear(h, p[f"{prefix}.q.w"], p[f"{prefix}.q.b"])
    k = nx.linear(kv, p[f"{prefix}.k.w"], p[f"{prefix}.k.b"])
    v = nx.linear(kv, p[f"{prefix}.v.w"], p[f"{prefix}.v.b"])
    a = nx.linear(nx.attention(q, k, v, heads), p[f"{prefix}.o.w"], p[f"{prefix}.o.b"])
    h = nx.layer_norm(h + a, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    m = nx.linear(nx.silu(nx.linear(h, p[f"{prefix}.mlp1.w"], p[f"{prefix}.mlp1.b"])),
                  p[f"{prefix}.mlp2.w"], p[f"{prefix}.mlp2.b"])
    return nx.layer_norm(h + m, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])


def encode_style(tokens, p: dict, cfg: StyleConfig = StyleConfig()) -> Tensor:
    """``[B, n, 32]`` patch tokens -> ``[B, 20]`` latent in (-1, 1)."""
    dtype = p["styleenc.query"].dtype
    tok = tokens if isinstance(tokens, Tensor) else Tensor(np.asarray(tokens, dtype=dtype))
    single = tok.ndim == 2
    if single:
        tok = nx.reshape(tok, (1,) + tok.shape)
    if tok.shape[-1] != TOKEN_WIDTH:
        raise DimensionError(f"tokens must be {TOKEN_WIDTH} wide, got {tok.shape}")
    B = tok.shape[0]
    tok = nx.layer_norm(tok, p["styleenc.tok_ln.g"], p["styleenc.tok_ln.b"])
    h = nx.reshape(p["styleenc.query"], (1, 1, cfg.width)) + Tensor(np.zeros((B, 1, cfg.width), tok.dtype))
    for i in range(cfg.layers):
        h = _xattn_layer(p, f"styleenc.layer{i}", h, tok, cfg.heads)
    c = nx.tanh(nx.linear(nx.reshape(h, (B, cfg.width)), p["styleenc.out.w"], p["styleenc.out.b"]))
    return nx.reshape(c, (cfg.latent_dim,)) if single else c


def decode_style(c, p: dict, mid_shape, cfg: StyleConfig = StyleConfig()) -> Tensor:
    """``[B, 20]`` latent -> ``[B, C, H, W]`` seed shaped like the midblock state."""
    if not isinstance(c, Tensor):
        c = Tensor(np.asarray(c, dtype=p["styledec.grid"].dtype))
    if c.shape[-1] != cfg.latent_dim:
        raise DimensionError(f"style latent must be {cfg.latent_dim} wide, got {c.shape}")
    single = c.ndim == 1
    if single:
        c = nx.reshape(c, (1, cfg.latent_dim))
    B = c.shape[0]
    C, H, W = mid_shape
    kv = nx.reshape(nx.linear(c, p["styledec.lift.w"], p["styledec.lift.b"]), (B, 1, cfg.width))
    h = nx.reshape(p["styledec.grid"], (1, H * W, cfg.width)) + Tensor(np.zeros((B, H * W, cfg.width), c.dtype))
    for i in range(cfg.layers):
        h = _xattn_layer(p, f"styledec.layer{i}", h, kv, cfg.heads)
    out = nx.linear(h, p["styledec.out.w"], p["styledec.out.b"])  # B, HW, C
    seed = nx.reshape(nx.transpose(out, (0, 2, 1)), (B, C, H, W))
    return nx.reshape(seed, (C, H, W)) if single else seed


def roundtrip_train_path(images, p: dict, mid_shape, cfg: StyleConfig = StyleConfig(),
                         embedder: PatchEmbedder | None = None) -> Tensor:
    """Embed, encode and decode with no quantization in between (training path)."""
    tokens = embed_image(images, embedder or PatchEmbedder(cfg.patch))
    return decode_style(encode_style(tokens, p, cfg), p, mid_shape, cfg)
