"""Decoder-only residual control module.

The control stream starts from the style decoder's seed (midblock shaped).
At communication point ``i`` it adds a 1x1 projection of the base tap state
to its own hidden state and emits residual ``r_i`` through a zero-initialised
1x1 projection; between points it advances through blocks mirroring the
base decoder (upA, upsample + upB, upsample + upC). Residual ``r_i`` only
depends on taps ``0..i``.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from . import style as stylemod
from . import unet
from .errors import DimensionError
from .numerics import Tensor


def control_shapes(cfg: unet.BaseUNetConfig) -> dict:
    w0, w1, w2 = cfg.widths
    d = cfg.temb_dim
    shapes = {}
    shapes.update(unet.block_shapes("control.blockA", w2, w2, d))
    shapes.update(unet.block_shapes("control.blockB", w2, w1, d))
    shapes.update(unet.block_shapes("control.blockC", w1, w0, d))
    for i, (c, _, _) in enumerate(cfg.tap_shapes()):
        shapes[f"control.in{i}.w"] = (c, c, 1, 1)
        shapes[f"control.in{i}.b"] = (c,)
        shapes[f"control.zero{i}.w"] = (c, c, 1, 1)
        shapes[f"control.zero{i}.b"] = (c,)
    return shapes


def init_control(cfg: unet.BaseUNetConfig = unet.BaseUNetConfig(), seed: int = 0, sigma: float = 1e-4,
                 dtype=np.float32, zero_out: bool = True) -> dict:
    """White noise (std ``sigma``) everywhere except exact-zero output projections."""
    params = stylemod.init_noise(control_shapes(cfg), seed, sigma, dtype, stream=3)
    if zero_out:
        for name, t in params.items():
            if ".zero" in name:
                t.data[...] = 0.0
    return params


def control_forward(seed: Tensor, taps, temb: Tensor, p: dict, cfg: unet.BaseUNetConfig):
    """Residuals ``[r0..r3]`` with the shapes of ``taps``."""
    shapes = cfg.tap_shapes()
    if len(taps) != len(shapes):
        raise DimensionError(f"expected {len(shapes)} taps, got {len(taps)}")
    for i, (tp, s) in enumerate(zip(taps, shapes)):
        if tuple(tp.shape[1:]) != s:
            raise DimensionError(f"tap {i} has shape {tuple(tp.shape)}, expected (B,)+{s}")
    if tuple(seed.shape[1:]) != shapes[0]:
        raise DimensionError(f"seed has shape {tuple(seed.shape)}, expected (B,)+{shapes[0]}")
    g = cfg.groups
    res = []

    def point(h, i):
        h = h + nx.conv2d(nx.as_tensor(taps[i]), p[f"control.in{i}.w"], p[f"control.in{i}.b"])
        res.append(nx.conv2d(h, p[f"control.zero{i}.w"], p[f"control.zero{i}.b"]))
        return h

    h = point(seed, 0)
    h = point(unet.block(p, "control.blockA", h, temb, g), 1)
    h = point(unet.block(p, "control.blockB", nx.upsample2x(h), temb, g), 2)
    point(unet.block(p, "control.blockC", nx.upsample2x(h), temb, g), 3)
    return res


def conditioned_denoise(z, t, prompts, c, base: dict, control: dict, styledec: dict,
                        cfg: unet.BaseUNetConfig, style_cfg: stylemod.StyleConfig = stylemod.StyleConfig(),
                        style_on=None) -> Tensor:
    """Two-pass style-conditioned noise prediction.

    Pass 1 runs the base without residuals to collect taps; the control
    module turns the decoded style seed and those taps into residuals; pass 2
    reruns only the base decoder with residuals added. ``c=None`` (or
    ``style_on`` false for an element) forces that element's residuals to
    zero.
    """
    enc = unet.base_encode(base, cfg, z, t, prompts)
    if c is None:
        eps, _ = unet.base_decode(base, cfg, enc)
        return eps
    with nx.no_grad():
        _, taps = unet.base_decode(base, cfg, enc, need_eps=False)
    taps = [Tensor(tp.data) for tp in taps]
    seed = stylemod.decode_style(c, styledec, cfg.mid_shape, style_cfg)
    res = control_forward(seed, taps, enc.temb, control, cfg)
    if style_on is not None:
        mask = np.asarray(style_on, dtype=res[0].dtype).reshape(-1, 1, 1, 1)
        if not mask.all():
            res = [nx.mul(r, mask) for r in res]
    eps, _ = unet.base_decode(base, cfg, enc, res)
    return eps
