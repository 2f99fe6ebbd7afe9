"""Noise schedule, forward process, DDPM/DDIM steppers and guidance.

Timesteps run over ``1..T``; ``alpha_bar(0)`` is defined as 1 so the last
reverse step lands on a noise-free sample.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, DimensionError, UsageError
from .numerics import rng as rngmod


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def ab(self, t):
        """``alpha_bar`` at 1-based ``t`` (scalar or array), with ``ab(0) == 1``."""
        t = np.asarray(t)
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]

    def check_t(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise UsageError(f"timestep {t} outside 1..{self.T}")


def schedule_from_betas(beta) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size < 1:
        raise ConfigError("schedule needs at least one beta")
    if np.any(beta <= 0) or np.any(beta >= 1):
        raise ConfigError("every beta must lie in (0, 1)")
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule, endpoints included."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        return schedule_from_betas([beta_start])
    return schedule_from_betas(np.linspace(beta_start, beta_end, T))


@dataclass
class NoisyState:
    z: np.ndarray
    t: int


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddim"
    num_steps: int = 20
    eta: float = 0.0
    guidance_scale: float = 1.0
    seed: int = 0
    clip_x0: bool = False

    def __post_init__(self):
        if self.kind not in ("ddpm", "ddim"):
            raise ConfigError(f"unknown sampler {self.kind!r}")
        if self.num_steps < 1:
            raise ConfigError("num_steps must be >= 1")
        if self.eta < 0 or self.guidance_scale < 0:
            raise ConfigError("eta and guidance_scale must be non-negative")


def _bcast(v, z):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0:
        return float(v)
    return v.reshape(v.shape + (1,) * (z.ndim - v.ndim)).astype(z.dtype)


def q_sample(z0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> NoisyState:
    """Closed-form forward sample ``sqrt(ab) z0 + sqrt(1 - ab) eps``.

    ``t`` may be a scalar or a per-batch-element array.
    """
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise DimensionError(f"q_sample: z0 {z0.shape} vs eps {eps.shape}")
    sched.check_t(t)
    ab = sched.ab(t)
    z = _bcast(np.sqrt(ab), z0) * z0 + _bcast(np.sqrt(1.0 - ab), z0) * eps
    return NoisyState(z=z, t=t)


def clip_eps(z: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule, bound: float = 1.0):
    """Noise estimate consistent with the implied ``z0`` clipped to ``[-bound, bound]``."""
    ab = float(sched.ab(t))
    z0 = np.clip((z - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab), -bound, bound)
    return ((z - np.sqrt(ab) * z0) / np.sqrt(1.0 - ab)).astype(eps_hat.dtype)


def ddpm_step(state: NoisyState, eps_hat: np.ndarray, sched: NoiseSchedule, rng=None,
              t_prev: int | None = None, clip_x0: bool = False) -> NoisyState:
    """Ancestral step from ``t`` to ``t_prev`` (default ``t - 1``).

    For a skipped subsequence the per-step alpha is ``ab(t) / ab(t_prev)``.
    ``clip_x0`` clips the implied ``z0`` to the data range first.
    """
    t = int(state.t)
    if t < 1:
        raise UsageError("ddpm_step needs t >= 1")
    t_prev = t - 1 if t_prev is None else int(t_prev)
    if not 0 <= t_prev < t:
        raise UsageError(f"ddpm_step: t_prev={t_prev} must be in [0, {t})")
    if eps_hat.shape != state.z.shape:
        raise DimensionError(f"eps_hat {eps_hat.shape} vs state {state.z.shape}")
    if clip_x0:
        eps_hat = clip_eps(state.z, eps_hat, t, sched)
    ab_t, ab_p = float(sched.ab(t)), float(sched.ab(t_prev))
    a = ab_t / ab_p
    z = state.z
    mean = (z - ((1.0 - a) / np.sqrt(1.0 - ab_t)) * eps_hat) / np.sqrt(a)
    var = (1.0 - a) * (1.0 - ab_p) / (1.0 - ab_t)
    if t_prev > 0 and var > 0:
        if rng is None:
            raise UsageError("ddpm_step needs an rng for t > 1")
        mean = mean + np.sqrt(var) * rng.standard_normal(z.shape).astype(z.dtype)
    return NoisyState(z=mean.astype(z.dtype), t=t_prev)


def ddpm_sigma(sched: NoiseSchedule, t: int, t_prev: int | None = None) -> float:
    t_prev = t - 1 if t_prev is None else t_prev
    ab_t, ab_p = float(sched.ab(t)), float(sched.ab(t_prev))
    a = ab_t / ab_p
    return float(np.sqrt((1.0 - a) * (1.0 - ab_p) / (1.0 - ab_t)))


def predict_z0(z_t, eps_hat, t, sched: NoiseSchedule):
    ab = sched.ab(t)
    return (z_t - _bcast(np.sqrt(1.0 - ab), z_t) * eps_hat) / _bcast(np.sqrt(ab), z_t)


def ddim_step(state: NoisyState, eps_hat: np.ndarray, t_next: int, sched: NoiseSchedule,
              eta: float = 0.0, rng=None, clip_x0: bool = False) -> NoisyState:
    t = int(state.t)
    t_next = int(t_next)
    if t_next >= t or t_next < 0:
        raise UsageError(f"ddim_step: t_next={t_next} must be in [0, {t})")
    if eps_hat.shape != state.z.shape:
        raise DimensionError(f"eps_hat {eps_hat.shape} vs state {state.z.shape}")
    if clip_x0:
        eps_hat = clip_eps(state.z, eps_hat, t, sched)
    ab_t, ab_n = float(sched.ab(t)), float(sched.ab(t_next))
    z0 = (state.z - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    sigma = eta * np.sqrt((1.0 - ab_n) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_n)
    z = np.sqrt(ab_n) * z0 + np.sqrt(max(1.0 - ab_n - sigma ** 2, 0.0)) * eps_hat
    if sigma > 0:
        if rng is None:
            raise UsageError("ddim_step with eta > 0 needs an rng")
        z = z + sigma * rng.standard_normal(z.shape).astype(state.z.dtype)
    return NoisyState(z=z.astype(state.z.dtype), t=t_next)


def cfg_combine(eps_uncond, eps_cond, s: float):
    """Classifier-free guidance: ``eps_u + s (eps_c - eps_u)``."""
    eps_uncond = np.asarray(eps_uncond)
    eps_cond = np.asarray(eps_cond)
    if eps_uncond.shape != eps_cond.shape:
        raise DimensionError(f"cfg_combine: {eps_uncond.shape} vs {eps_cond.shape}")
    if s == 1:
        return eps_cond
    if s == 0:
        return eps_uncond
    return eps_uncond + s * (eps_cond - eps_uncond)


def timestep_sequence(T: int, num_steps: int) -> list[int]:
    """Uniformly spaced strictly decreasing timesteps from ``T`` down to 1."""
    if num_steps > T:
        raise ConfigError(f"num_steps={num_steps} exceeds T={T}")
    if num_steps == 1:
        return [T]
    return [int(v) for v in np.round(np.linspace(T, 1, num_steps))]


# Denoiser signature: (z [B,C,H,W], t [B], prompts [B] (-1 = null), styles [B,20] or None,
# style_on [B] bool or None) -> eps [B,C,H,W]
Denoiser = Callable[..., np.ndarray]


def guided_eps(model: Denoiser, z, t, prompts, styles, style_on, text_scale: float, style_scale: float):
    """Evaluate the denoiser once per needed branch and apply guidance.

    Result is ``full + (s_t - 1)(full - eps(null prompt, style))
    + (s_s - 1)(full - eps(prompt, null style))``; each scale of exactly 1
    skips its extra evaluation. All branches run as one concatenated batch.
    """
    B = z.shape[0]
    prompts = np.asarray(prompts)
    use_text = text_scale != 1
    use_style = style_scale != 1 and styles is not None and bool(np.any(style_on))
    zs, ts, ps, ss, on = [z], [t], [prompts], [], []
    if styles is not None:
        ss.append(styles)
        on.append(style_on)
    if use_text:
        zs.append(z)
        ts.append(t)
        ps.append(np.full(B, -1))
        if styles is not None:
            ss.append(styles)
            on.append(style_on)
    if use_style:
        zs.append(z)
        ts.append(t)
        ps.append(prompts)
        ss.append(styles)
        on.append(np.zeros(B, dtype=bool))
    eps = model(np.concatenate(zs), np.concatenate(ts), np.concatenate(ps),
                np.concatenate(ss) if ss else None, np.concatenate(on) if on else None)
    full = eps[:B]
    out = full
    k = 1
    if use_text:
        out = cfg_combine(eps[k * B:(k + 1) * B], full, text_scale)
        k += 1
    if use_style:
        out = out + (style_scale - 1.0) * (full - eps[k * B:(k + 1) * B])
    return out


def sample_batch(model: Denoiser, prompts, styles, seeds, cfg: SamplerConfig, sched: NoiseSchedule,
                 shape=(3, 32, 32), style_scale: float = 1.0, dtype=np.float32) -> np.ndarray:
    """Generate one image per seed; element ``i`` draws noise from key ``(seeds[i], ...)``."""
    steps = timestep_sequence(sched.T, cfg.num_steps)
    seeds = [int(s) for s in seeds]
    B = len(seeds)
    prompts = np.asarray(prompts, dtype=np.int64).reshape(B)
    style_on = None
    if styles is not None:
        styles = np.asarray(styles, dtype=dtype).reshape(B, -1)
        style_on = ~np.isnan(styles).any(axis=1)
        styles = np.where(style_on[:, None], styles, 0.0).astype(dtype)
    z = np.stack([rngmod.normal(shape, s, 0, dtype=dtype) for s in seeds])
    for i, t in enumerate(steps):
        t_next = steps[i + 1] if i + 1 < len(steps) else 0
        tb = np.full(B, t)
        eps = guided_eps(model, z, tb, prompts, styles, style_on, cfg.guidance_scale, style_scale)
        nxt = []
        for b in range(B):
            state = NoisyState(z[b], t)
            r = rngmod.key(seeds[b], 1, i)
            if cfg.kind == "ddim":
                nxt.append(ddim_step(state, eps[b], t_next, sched, cfg.eta, r, cfg.clip_x0).z)
            else:
                nxt.append(ddpm_step(state, eps[b], sched, r, t_prev=t_next, clip_x0=cfg.clip_x0).z)
        z = np.stack(nxt)
    return np.clip(z, -1.0, 1.0)


def sample_loop(model: Denoiser, prompt, style, cfg: SamplerConfig, sched: NoiseSchedule,
                shape=(3, 32, 32), style_scale: float = 1.0) -> np.ndarray:
    """Single image from ``z_T ~ N(0, I)`` seeded by ``cfg.seed``; output in [-1, 1]."""
    p = -1 if prompt is None else int(prompt)
    styles = None if style is None else np.asarray(style, dtype=np.float32).reshape(1, -1)
    return sample_batch(model, [p], styles, [cfg.seed], cfg, sched, shape, style_scale)[0]
