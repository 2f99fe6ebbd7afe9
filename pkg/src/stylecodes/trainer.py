"""Two-phase training: base pretraining, then frozen-base style training."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import control as ctrl
from . import diffusion
from . import numerics as nx
from . import style as stylemod
from . import unet
from .datagen import Dataset
from .errors import ConfigError, TrainingAborted, UsageError
from .model import StylecodesModel
from .numerics import Tensor
from .numerics import rng as rngmod

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    batch_size: int = 32
    lr: float = 1e-3
    steps: int = 5000
    init_noise_sigma: float = 1e-4
    prompt_dropout: float = 0.1
    style_dropout: float = 0.1
    seed: int = 0
    T: int = 200
    eval_every: int = 500
    strict_deterministic: bool = False
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def __post_init__(self):
        if self.phase not in ("pretrain", "joint"):
            raise ConfigError(f"phase must be 'pretrain' or 'joint', got {self.phase!r}")
        for name in ("batch_size", "steps", "T", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.lr > 0 or not self.init_noise_sigma > 0:
            raise ConfigError("lr and init_noise_sigma must be positive")
        for name in ("prompt_dropout", "style_dropout"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must be in [0, 1)")

    @classmethod
    def from_json(cls, path, **overrides) -> "TrainConfig":
        data = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def to_dict(self):
        return asdict(self)


def desk_schedule(T: int) -> diffusion.NoiseSchedule:
    """Linear schedule with the T=1000 endpoints rescaled by 1000/T.

    Betas are rounded through float32 so a schedule reloaded from a
    checkpoint is bit-identical to the one used in training.
    """
    k = 1000.0 / T
    s = diffusion.make_schedule(T, 1e-4 * k, min(0.02 * k, 0.999))
    return diffusion.schedule_from_betas(s.beta.astype(np.float32).astype(np.float64))


@dataclass
class Batch:
    x0: np.ndarray
    z: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    prompts: np.ndarray
    style_on: np.ndarray
    idx: np.ndarray


def make_batch(targets, classes, sched, cfg: TrainConfig, step: int) -> Batch:
    """Draw batch indices, timesteps, noise and dropout masks from key (seed, step)."""
    r = rngmod.key(cfg.seed, 100, step)
    B = cfg.batch_size
    idx = r.integers(0, len(targets), B)
    t = r.integers(1, sched.T + 1, B)
    eps = r.standard_normal((B,) + targets.shape[1:]).astype(np.float32)
    prompts = np.where(r.random(B) < cfg.prompt_dropout, unet.NULL_PROMPT, classes[idx])
    style_on = r.random(B) >= cfg.style_dropout
    x0 = targets[idx]
    z = diffusion.q_sample(x0, t, eps, sched).z.astype(np.float32)
    return Batch(x0, z, t, eps, prompts, style_on, idx)


def loss_step(model: StylecodesModel, batch: Batch, phase: str, tokens=None) -> Tensor:
    """epsilon-MSE for one batch; gradients land on whatever requires grad."""
    if phase == "pretrain":
        eps_hat, _ = unet.forward_with_taps(model.base, model.cfg, batch.z, batch.t, batch.prompts)
    else:
        c = stylemod.encode_style(tokens[batch.idx], model.style, model.style_cfg)
        eps_hat = ctrl.conditioned_denoise(batch.z, batch.t, batch.prompts, c, model.base, model.control,
                                           model.style, model.cfg, model.style_cfg, batch.style_on)
    return nx.mse(eps_hat, batch.eps)


def grad_norm(params: dict) -> float:
    return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params.values()))


class _Logger:
    def __init__(self, path, strict: bool):
        self.path = Path(path) if path else None
        self.strict = strict
        self.t0 = time.perf_counter()
        self.records = []
        self.last_step = -1
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, rec: dict):
        if rec["step"] <= self.last_step:
            raise UsageError("log steps must increase strictly")
        self.last_step = rec["step"]
        rec["wall_time"] = None if self.strict else round(time.perf_counter() - self.t0, 3)
        self.records.append(rec)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _train(model, params, cfg: TrainConfig, data: Dataset, out, log_path, tokens=None, base_hash=None,
           on_eval=None):
    _, targets, classes, _ = data.arrays()
    opt = nx.Adam(params, lr=cfg.lr)
    logger = _Logger(log_path, cfg.strict_deterministic)
    out = Path(out) if out else None
    last_good = None
    initial = None
    bad = 0
    for step in range(cfg.steps):
        batch = make_batch(targets, classes, model.sched, cfg, step)
        opt.zero_grad()
        loss = loss_step(model, batch, cfg.phase, tokens)
        lv = float(loss.data)
        if not math.isfinite(lv):
            raise TrainingAborted(f"non-finite loss at step {step}", last_good)
        if initial is None:
            initial = lv
        bad = bad + 1 if lv > cfg.divergence_factor * initial else 0
        if bad >= cfg.divergence_patience:
            raise TrainingAborted(f"loss diverged (> {cfg.divergence_factor}x initial for "
                                  f"{cfg.divergence_patience} steps) at step {step}", last_good)
        nx.backward(loss)
        gn = grad_norm(opt.params)
        opt.step()
        rec = {"step": step, "loss": lv, "grad_norm": gn}
        if cfg.phase == "joint":
            rec["frozen_base_sha256"] = base_hash
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            if cfg.phase == "joint":
                now = model.base_sha256()
                if now != base_hash:
                    raise TrainingAborted(f"frozen base parameters changed at step {step}", last_good)
            if on_eval is not None:
                rec["eval"] = on_eval(model, step)
            if out is not None:
                model.save(out, {"train": cfg.to_dict(), "step": step + 1})
                last_good = str(out)
        logger.write(rec)
        if step % 50 == 0:
            log.info("%s step %d loss %.4f", cfg.phase, step, lv)
    return logger.records


def pretrain_base(data: Dataset, cfg: TrainConfig, out=None, log_path=None,
                  base_cfg: unet.BaseUNetConfig = unet.BaseUNetConfig(), on_eval=None):
    """Train the prompt-conditioned base denoiser on target images."""
    if cfg.phase != "pretrain":
        raise ConfigError("pretrain_base needs phase='pretrain'")
    if len(data) == 0:
        raise ConfigError("dataset is empty")
    base = unet.init_base(base_cfg, cfg.seed)
    model = StylecodesModel(base_cfg, desk_schedule(cfg.T), base, meta={"train": cfg.to_dict()})
    records = _train(model, base, cfg, data, out, log_path, on_eval=on_eval)
    return model, records


def start_joint(base_model: StylecodesModel, cfg: TrainConfig) -> StylecodesModel:
    """Freeze the base and attach freshly initialised style/control modules."""
    model = StylecodesModel(base_model.cfg, base_model.sched, unet.freeze(base_model.base),
                            base_model.style_cfg, embedder=base_model.embedder,
                            meta={"train": cfg.to_dict()})
    model.init_style_modules(cfg.seed, cfg.init_noise_sigma)
    return model


def train_stylecodes(data: Dataset, base_model: StylecodesModel, cfg: TrainConfig, out=None, log_path=None,
                     on_eval=None):
    """Jointly train encoder, decoder and control module against the frozen base."""
    if cfg.phase != "joint":
        raise ConfigError("train_stylecodes needs phase='joint'")
    if base_model is None:
        raise ConfigError("joint phase requires a base checkpoint")
    if cfg.T != base_model.sched.T:
        raise ConfigError(f"config T={cfg.T} differs from checkpoint T={base_model.sched.T}")
    model = start_joint(base_model, cfg)
    style_images, _, _, _ = data.arrays()
    tokens = model.embedder(style_images)
    base_hash = model.base_sha256()
    records = _train(model, model.trainable(), cfg, data, out, log_path, tokens, base_hash, on_eval)
    return model, records
