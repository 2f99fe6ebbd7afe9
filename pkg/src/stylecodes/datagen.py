"""Procedural (style, content) image corpus.

A style is a palette plus a background texture; content is a single
foreground shape. Every dataset entry pairs two renders that share a style
but differ in content: the first acts as the style condition, the second as
the denoising target whose shape class is the prompt.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .numerics import rng as rngmod
from .unet import CLASSES

SIZE = 32
TEXTURES = ("stripes", "dots", "checker", "gradient", "noise")
ANGLES = (0, 45, 90, 135)
FREQUENCIES = tuple(range(2, 9))
SCALES = ("small", "medium")
CENTERS = (10, 16, 22)
LEVELS = tuple(round(0.2 * i, 1) for i in range(6))
MIN_COLOR_DIST = 0.4

_RADIUS = {"small": 5.0, "medium": 8.0}
_S = float(np.sqrt(0.5))
# exact direction cosines so axis-aligned angles produce exact pixel rows/columns
_DIR = {0: (1.0, 0.0), 45: (_S, _S), 90: (0.0, 1.0), 135: (-_S, _S)}


@dataclass(frozen=True)
class StyleParams:
    palette: tuple  # three (r, g, b) tuples in [0, 1]
    texture: str
    frequency: int
    angle: int

    def __post_init__(self):
        pal = tuple(tuple(float(c) for c in col) for col in self.palette)
        object.__setattr__(self, "palette", pal)
        if len(pal) != 3 or any(len(c) != 3 for c in pal):
            raise ConfigError("palette must hold three RGB colors")
        for a, b in itertools.combinations(pal, 2):
            if max(abs(x - y) for x, y in zip(a, b)) < 0.2:
                raise ConfigError(f"palette colors {a} and {b} are closer than 0.2")
        if self.texture not in TEXTURES:
            raise ConfigError(f"unknown texture {self.texture!r}")
        if self.frequency not in FREQUENCIES:
            raise ConfigError(f"frequency must be in 2..8, got {self.frequency}")
        if self.angle not in ANGLES:
            raise ConfigError(f"angle must be one of {ANGLES}")

    def to_dict(self):
        return {"palette": [list(c) for c in self.palette], "texture": self.texture,
                "frequency": self.frequency, "angle": self.angle}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(tuple(c) for c in d["palette"]), d["texture"], int(d["frequency"]), int(d["angle"]))


@dataclass(frozen=True)
class ContentParams:
    shape: str
    center: tuple  # (row, col)
    scale: str

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(int(c) for c in self.center))
        if self.shape not in CLASSES:
            raise ConfigError(f"unknown shape {self.shape!r}")
        if self.scale not in SCALES:
            raise ConfigError(f"unknown scale {self.scale!r}")
        r = _RADIUS[self.scale]
        if any(c - r < 0 or c + r > SIZE for c in self.center):
            raise ConfigError(f"shape at {self.center} would leave the canvas")

    @property
    def class_id(self) -> int:
        return CLASSES.index(self.shape)

    def to_dict(self):
        return {"shape": self.shape, "center": list(self.center), "scale": self.scale}

    @classmethod
    def from_dict(cls, d):
        return cls(d["shape"], tuple(d["center"]), d["scale"])


ALL_CONTENTS = tuple(ContentParams(s, (r, c), sc) for s in CLASSES for r in CENTERS for c in CENTERS for sc in SCALES)


def _grid():
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    return yy + 0.5, xx + 0.5


def shape_mask(content: ContentParams) -> np.ndarray:
    """Boolean ``[32, 32]`` foreground mask."""
    y, x = _grid()
    cy, cx = content.center
    r = _RADIUS[content.scale]
    dy, dx = y - cy, x - cx
    if content.shape == "circle":
        return dx * dx + dy * dy <= r * r
    if content.shape == "square":
        h = 0.8 * r
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    if content.shape == "triangle":
        top, bottom = -r, 0.8 * r
        frac = (dy - top) / (bottom - top)
        return (dy >= top) & (dy <= bottom) & (np.abs(dx) <= r * frac)
    arm = r / 3.0
    return ((np.abs(dx) <= r) & (np.abs(dy) <= arm)) | ((np.abs(dy) <= r) & (np.abs(dx) <= arm))


def _style_seed(style: StyleParams) -> int:
    blob = json.dumps(style.to_dict(), sort_keys=True).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def background(style: StyleParams) -> np.ndarray:
    """Texture in palette colors 1-2, shape ``[3, 32, 32]`` in [0, 1]."""
    y, x = _grid()
    c, s = _DIR[style.angle]
    u = y * c + x * s
    v = x * c - y * s
    period = SIZE / style.frequency
    if style.texture == "stripes":
        w = (np.floor(2.0 * u / period) % 2).astype(np.float64)
    elif style.texture == "checker":
        w = ((np.floor(2.0 * u / period) + np.floor(2.0 * v / period)) % 2).astype(np.float64)
    elif style.texture == "dots":
        du = np.mod(u, period) - period / 2
        dv = np.mod(v, period) - period / 2
        w = (du * du + dv * dv <= (0.3 * period) ** 2).astype(np.float64)
    elif style.texture == "gradient":
        ph = np.mod(u, period) / period
        w = 1.0 - np.abs(2.0 * ph - 1.0)
    else:
        table = rngmod.key(_style_seed(style)).random((16, 16))
        iu = np.floor(u / period).astype(np.int64) % 16
        iv = np.floor(v / period).astype(np.int64) % 16
        w = table[iu, iv]
    c1 = np.asarray(style.palette[0])[:, None, None]
    c2 = np.asarray(style.palette[1])[:, None, None]
    return c1 * (1.0 - w) + c2 * w


def render(style: StyleParams, content: ContentParams) -> np.ndarray:
    """Deterministic ``[3, 32, 32]`` float32 image in [-1, 1]."""
    img = background(style)
    m = shape_mask(content)
    img = np.where(m[None], np.asarray(style.palette[2])[:, None, None], img)
    return (img * 2.0 - 1.0).astype(np.float32)


@dataclass
class DatasetEntry:
    style_index: int
    entry_index: int
    style: StyleParams
    cond: ContentParams
    target: ContentParams
    style_image: np.ndarray = field(repr=False)
    target_image: np.ndarray = field(repr=False)

    @property
    def prompt(self) -> int:
        return self.target.class_id


@dataclass
class Dataset:
    entries: list
    manifest: dict

    def __len__(self):
        return len(self.entries)

    @property
    def style_ids(self):
        return sorted({e.style_index for e in self.entries})

    def styles(self) -> dict:
        return {e.style_index: e.style for e in self.entries}

    def arrays(self):
        """Stacked ``(style_images, target_images, prompts, style_ids)``."""
        return (np.stack([e.style_image for e in self.entries]),
                np.stack([e.target_image for e in self.entries]),
                np.array([e.prompt for e in self.entries], dtype=np.int64),
                np.array([e.style_index for e in self.entries], dtype=np.int64))

    def subset(self, style_ids) -> "Dataset":
        keep = set(style_ids)
        return Dataset([e for e in self.entries if e.style_index in keep], self.manifest)

    def manifest_bytes(self) -> bytes:
        return manifest_bytes(self.manifest)


def manifest_bytes(manifest: dict) -> bytes:
    return (json.dumps(manifest, sort_keys=True, indent=1) + "\n").encode("utf-8")


def manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(manifest_bytes(manifest)).hexdigest()


def _random_palette(r: np.random.Generator):
    colors = []
    while len(colors) < 3:
        col = tuple(LEVELS[i] for i in r.integers(0, len(LEVELS), 3))
        if all(max(abs(a - b) for a, b in zip(col, o)) >= MIN_COLOR_DIST for o in colors):
            colors.append(col)
    return tuple(colors)


def sample_style(r: np.random.Generator) -> StyleParams:
    return StyleParams(_random_palette(r), TEXTURES[r.integers(len(TEXTURES))],
                       int(FREQUENCIES[r.integers(len(FREQUENCIES))]), int(ANGLES[r.integers(len(ANGLES))]))


def build_dataset(n_styles: int = 64, entries_per_style: int = 64, seed: int = 0,
                  max_attempts: int = 100_000) -> Dataset:
    if n_styles < 2:
        raise ConfigError("need >= 2 styles")
    if entries_per_style < 1:
        raise ConfigError("need >= 1 entry per style")
    r = rngmod.key(seed, 0)
    styles: list = []
    seen = set()
    attempts = 0
    while len(styles) < n_styles:
        attempts += 1
        if attempts > max_attempts:
            raise ConfigError(f"style space exhausted after {max_attempts} draws ({len(styles)} unique styles)")
        s = sample_style(r)
        if s not in seen:
            seen.add(s)
            styles.append(s)
    entries = []
    rows = []
    for si, style in enumerate(styles):
        re = rngmod.key(seed, 1, si)
        for ei in range(entries_per_style):
            a, b = re.choice(len(ALL_CONTENTS), size=2, replace=False)
            ca, cb = ALL_CONTENTS[a], ALL_CONTENTS[b]
            entries.append(DatasetEntry(si, ei, style, ca, cb, render(style, ca), render(style, cb)))
            rows.append({"style": si, "entry": ei, "cond": ca.to_dict(), "target": cb.to_dict(),
                         "prompt": cb.shape})
    manifest = {
        "format": "stylecodes-dataset/1",
        "seed": int(seed),
        "n_styles": n_styles,
        "entries_per_style": entries_per_style,
        "styles": [s.to_dict() for s in styles],
        "entries": rows,
    }
    return Dataset(entries, manifest)


def holdout_split(dataset: Dataset, fraction: float, seed: int = 0):
    """Split by style so evaluation styles are never seen in training."""
    if not 0 < fraction < 1:
        raise ConfigError(f"holdout fraction must be in (0, 1), got {fraction}")
    ids = dataset.style_ids
    n_eval = int(round(fraction * len(ids)))
    if n_eval < 1 or n_eval >= len(ids):
        raise ConfigError(f"{len(ids)} styles cannot be split with fraction {fraction}")
    perm = rngmod.key(seed, 2).permutation(len(ids))
    eval_ids = sorted(ids[i] for i in perm[:n_eval])
    train_ids = sorted(set(ids) - set(eval_ids))
    return dataset.subset(train_ids), dataset.subset(eval_ids)


def attach_holdout(dataset: Dataset, fraction: float, seed: int = 0) -> None:
    train, ev = holdout_split(dataset, fraction, seed)
    dataset.manifest["holdout"] = {"fraction": fraction, "seed": int(seed),
                                   "train_styles": train.style_ids, "eval_styles": ev.style_ids}


def split_from_manifest(dataset: Dataset):
    h = dataset.manifest.get("holdout")
    if not h:
        raise ConfigError("dataset manifest has no holdout information")
    return dataset.subset(h["train_styles"]), dataset.subset(h["eval_styles"])


def to_uint8(img: np.ndarray) -> np.ndarray:
    """``[3, H, W]`` in [-1, 1] -> ``[H, W, 3]`` uint8."""
    return np.clip(np.round((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def write_png(path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(img), "RGB").save(path, format="PNG")


def write_dataset(dataset: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for e in dataset.entries:
        write_png(out / f"{e.style_index:04}_{e.entry_index:04}_cond.png", e.style_image)
        write_png(out / f"{e.style_index:04}_{e.entry_index:04}_target.png", e.target_image)
    (out / "manifest.json").write_bytes(dataset.manifest_bytes())
    return out


def dataset_from_manifest(manifest: dict) -> Dataset:
    styles = [StyleParams.from_dict(s) for s in manifest["styles"]]
    entries = []
    for row in manifest["entries"]:
        st = styles[row["style"]]
        ca, cb = ContentParams.from_dict(row["cond"]), ContentParams.from_dict(row["target"])
        entries.append(DatasetEntry(row["style"], row["entry"], st, ca, cb, render(st, ca), render(st, cb)))
    return Dataset(entries, manifest)


def load_dataset(path) -> Dataset:
    """Rebuild a dataset from its ``manifest.json`` (images are re-rendered exactly)."""
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    return dataset_from_manifest(json.loads(p.read_text()))
