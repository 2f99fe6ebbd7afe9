"""Style-retrieval evaluation of generated images on held-out styles.

For every evaluation style the condition image goes through the full
inference path (encode, quantize to a stylecode, decode), images are
generated from that code with random prompts and seeds, and each image's
patch-feature descriptor is matched against the centroids of its true style
plus ``k`` randomly drawn distractor styles.
"""

from __future__ import annotations

import numpy as np

from . import diffusion
from .datagen import ALL_CONTENTS, Dataset, render
from .errors import ConfigError
from .model import StylecodesModel
from .numerics import rng as rngmod
from .style import PatchEmbedder, style_features


def style_centroids(data: Dataset, embedder: PatchEmbedder) -> dict:
    """Mean descriptor of every ground-truth render (condition and target) per style."""
    out = {}
    for sid in data.style_ids:
        imgs = [im for e in data.entries if e.style_index == sid for im in (e.style_image, e.target_image)]
        out[sid] = style_features(np.stack(imgs), embedder).mean(axis=0)
    return out


def retrieval(features: np.ndarray, true_ids, centroids: dict, k: int, seed: int):
    """Nearest-centroid retrieval among the true style and ``k`` distractors.

    Returns per-query correctness plus the distance to the true centroid and
    the mean distance to the distractor centroids.
    """
    ids = sorted(centroids)
    if k < 1 or k > len(ids) - 1:
        raise ConfigError(f"k={k} distractors needs at least {k + 1} evaluation styles, have {len(ids)}")
    correct, intra, inter = [], [], []
    for q, (f, s) in enumerate(zip(features, true_ids)):
        r = rngmod.key(seed, 300, q)
        others = [i for i in ids if i != s]
        distract = [others[j] for j in r.choice(len(others), size=k, replace=False)]
        cands = [s] + distract
        d = np.array([np.linalg.norm(f - centroids[c]) for c in cands])
        correct.append(bool(np.argmin(d) == 0))
        intra.append(float(d[0]))
        inter.append(float(d[1:].mean()))
    return np.array(correct), np.array(intra), np.array(inter)


def eval_style_transfer(model: StylecodesModel, eval_data: Dataset, n_per_style: int = 200,
                        k_distractors: int = 7, seed: int = 0,
                        sampler: diffusion.SamplerConfig | None = None, oracle: bool = False,
                        batch: int = 64, text_scale: float = 1.0, style_scale: float = 1.0) -> dict:
    """Top-1 style retrieval accuracy and intra/inter distance ratio.

    With ``oracle=True`` the generated images are replaced by ground-truth
    renders of the same style, which checks the metric itself.
    """
    sampler = sampler or diffusion.SamplerConfig("ddim", 20, 0.0, text_scale)
    embedder = model.embedder
    centroids = style_centroids(eval_data, embedder)
    sids = eval_data.style_ids
    if k_distractors > len(sids) - 1:
        raise ConfigError(f"k={k_distractors} needs at least {k_distractors + 1} evaluation styles")
    styles = eval_data.styles()
    codes, jobs = {}, []
    for sid in sids:
        r = rngmod.key(seed, 200, sid)
        if not oracle:
            cond = next(e.style_image for e in eval_data.entries if e.style_index == sid)
            codes[sid] = model.encode_code(cond)
            latent = model.decode_code(codes[sid])
        for n in range(n_per_style):
            prompt = int(r.integers(0, model.cfg.n_classes))
            img_seed = int(r.integers(0, 2 ** 31))
            jobs.append((sid, prompt, img_seed, None if oracle else latent))
    feats = []
    for start in range(0, len(jobs), batch):
        chunk = jobs[start:start + batch]
        if oracle:
            imgs = []
            for sid, prompt, img_seed, _ in chunk:
                cands = [c for c in ALL_CONTENTS if c.class_id == prompt]
                content = cands[rngmod.key(img_seed).integers(len(cands))]
                imgs.append(render(styles[sid], content))
            imgs = np.stack(imgs)
        else:
            imgs = model.generate([j[1] for j in chunk], np.stack([j[3] for j in chunk]),
                                  [j[2] for j in chunk], sampler, style_scale)
        feats.append(style_features(imgs, embedder))
    feats = np.concatenate(feats)
    true_ids = [j[0] for j in jobs]
    correct, intra, inter = retrieval(feats, true_ids, centroids, k_distractors, seed)
    per_style = []
    tid = np.array(true_ids)
    for sid in sids:
        m = tid == sid
        per_style.append({"style": int(sid), "code": codes.get(sid), "accuracy": float(correct[m].mean()),
                          "intra": float(intra[m].mean()), "inter": float(inter[m].mean())})
    return {
        "accuracy": float(correct.mean()),
        "ratio": float(intra.mean() / inter.mean()),
        "chance": 1.0 / (k_distractors + 1),
        "k": int(k_distractors),
        "n_per_style": int(n_per_style),
        "n_images": int(len(jobs)),
        "seed": int(seed),
        "oracle": bool(oracle),
        "codec_version": int(model.codec_spec.version),
        "sampler": {"kind": sampler.kind, "num_steps": sampler.num_steps, "eta": sampler.eta,
                    "clip_x0": bool(sampler.clip_x0),
                    "cfg_text": float(sampler.guidance_scale), "cfg_style": float(style_scale)},
        "per_style": per_style,
    }
