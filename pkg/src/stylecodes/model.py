"""Bundle of schedule, frozen base, style autoencoder and control module.

Also owns SCKP (de)serialisation of the whole pipeline. Parameter names are
prefixed ``base.``, ``styleenc.``, ``styledec.`` and ``control.``; the schedule
is stored as ``sched.beta`` and the embedder projection as ``embedder.proj``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import codec
from . import control as ctrl
from . import diffusion
from . import numerics as nx
from . import style as stylemod
from . import unet
from .errors import CheckpointError, VersionMismatch
from .numerics import Tensor


@dataclass
class StylecodesModel:
    cfg: unet.BaseUNetConfig
    sched: diffusion.NoiseSchedule
    base: dict
    style_cfg: stylemod.StyleConfig = field(default_factory=stylemod.StyleConfig)
    style: dict | None = None
    control: dict | None = None
    embedder: stylemod.PatchEmbedder | None = None
    codec_spec: codec.CodecSpec = codec.CURRENT
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.embedder is None:
            self.embedder = stylemod.PatchEmbedder(self.style_cfg.patch)

    @property
    def has_style(self) -> bool:
        return self.style is not None and self.control is not None

    def init_style_modules(self, seed: int = 0, sigma: float = 1e-4):
        self.style = stylemod.init_style(self.cfg.mid_shape, self.style_cfg, seed, sigma)
        self.control = ctrl.init_control(self.cfg, seed, sigma)

    def trainable(self) -> dict:
        out = {}
        out.update(self.style or {})
        out.update(self.control or {})
        return out

    # -- style path -------------------------------------------------------
    def encode_latent(self, images) -> np.ndarray:
        """Images ``[B, 3, H, W]`` (or one ``[3, H, W]``) -> continuous latents."""
        if self.style is None:
            raise CheckpointError("checkpoint has no style encoder parameters")
        with nx.no_grad():
            tok = self.embedder(images)
            return stylemod.encode_style(tok, self.style, self.style_cfg).data

    def encode_code(self, image) -> str:
        return codec.encode_code(self.encode_latent(image), self.codec_spec)

    def decode_code(self, text: str) -> np.ndarray:
        found = codec.code_version(text)
        if found != self.codec_spec.version:
            raise VersionMismatch(found, self.codec_spec.version)
        return codec.decode_code(text, self.codec_spec)

    # -- denoising --------------------------------------------------------
    def denoise(self, z, t, prompts, styles=None, style_on=None) -> np.ndarray:
        """Sampler-compatible noise prediction (no graph recording)."""
        with nx.no_grad():
            if styles is None or not self.has_style or (style_on is not None and not np.any(style_on)):
                eps, _ = unet.forward_with_taps(self.base, self.cfg, z, t, prompts)
            else:
                eps = ctrl.conditioned_denoise(z, t, prompts, np.asarray(styles, dtype=np.float32),
                                               self.base, self.control, self.style, self.cfg,
                                               self.style_cfg, style_on)
        return eps.data

    def generate(self, prompts, styles, seeds, sampler: diffusion.SamplerConfig, style_scale: float = 1.0):
        return diffusion.sample_batch(self.denoise, prompts, styles, seeds, sampler, self.sched,
                                      self.cfg.image_shape, style_scale)

    # -- persistence ------------------------------------------------------
    def tensors(self) -> dict:
        out = {k: v.data for k, v in self.base.items()}
        for group in (self.style, self.control):
            if group:
                out.update({k: v.data for k, v in group.items()})
        out["sched.beta"] = self.sched.beta.astype(np.float32)
        out["embedder.proj"] = self.embedder.proj
        return out

    def base_sha256(self) -> str:
        return nx.params_sha256(self.base, "base.")

    def checkpoint_meta(self, extra: dict | None = None) -> dict:
        meta = dict(self.meta)
        meta.update({
            "kind": "joint" if self.has_style else "base",
            "base_config": self.cfg.to_dict(),
            "base_config_hash": self.cfg.digest(),
            "style_config": self.style_cfg.to_dict(),
            "codec_version": self.codec_spec.version,
            "embedder_seed": self.embedder.seed,
            "T": self.sched.T,
            "base_sha256": self.base_sha256(),
        })
        if extra:
            meta.update(extra)
        return meta

    def save(self, path, extra: dict | None = None):
        nx.save_checkpoint(path, self.tensors(), self.checkpoint_meta(extra))


def _group(tensors: dict, prefix: str, shapes: dict, path) -> dict:
    got = {k: v for k, v in tensors.items() if k.startswith(prefix)}
    if set(got) != set(shapes):
        missing = sorted(set(shapes) - set(got))
        raise CheckpointError(f"{path}: parameter set {prefix}* incomplete (missing {missing[:3]})")
    for k, s in shapes.items():
        if tuple(got[k].shape) != tuple(s):
            raise CheckpointError(f"{path}: {k} has shape {got[k].shape}, expected {s}")
    return {k: Tensor(got[k].copy()) for k in shapes}


def load_model(path, require_style: bool = False) -> StylecodesModel:
    tensors, meta = nx.load_checkpoint(path)
    if "base_config" not in meta:
        raise CheckpointError(f"{path}: missing metadata")
    bc = dict(meta["base_config"])
    cfg = unet.BaseUNetConfig(**bc)
    if meta.get("base_config_hash") != cfg.digest():
        raise CheckpointError(f"{path}: base config hash mismatch")
    scfg = stylemod.StyleConfig(**meta.get("style_config", {}))
    if "sched.beta" not in tensors:
        raise CheckpointError(f"{path}: missing sched.beta")
    beta = tensors["sched.beta"].astype(np.float64)
    sched = diffusion.schedule_from_betas(beta)
    base = unet.freeze(_group(tensors, "base.", unet.param_shapes(cfg), path))
    proj = tensors.get("embedder.proj")
    embedder = stylemod.PatchEmbedder(scfg.patch, proj, meta.get("embedder_seed", stylemod.EMBEDDER_SEED))
    version = int(meta.get("codec_version", codec.CURRENT.version))
    if version not in codec.REGISTRY:
        raise CheckpointError(f"{path}: unknown codec version {version}")
    model = StylecodesModel(cfg, sched, base, scfg, embedder=embedder, codec_spec=codec.REGISTRY[version],
                            meta={k: v for k, v in meta.items() if k in ("train", "phases")})
    has_style = any(k.startswith("styleenc.") for k in tensors)
    if has_style:
        shapes = stylemod.encoder_shapes(scfg)
        shapes.update(stylemod.decoder_shapes(cfg.mid_shape, scfg))
        model.style = _group(tensors, "style", shapes, path)
        model.control = _group(tensors, "control.", ctrl.control_shapes(cfg), path)
    elif require_style:
        raise CheckpointError(f"{path}: checkpoint has no style/control parameters")
    return model
