"""Stylecode string format.

A stylecode is 20 base64url symbols (one per latent dimension, each a
64-bin uniform quantization of [-1, 1]) followed by one decimal digit naming
the encoder version: ``^[A-Za-z0-9_-]{20}[0-9]$``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ValidationError, VersionMismatch

ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_"
_INDEX = {ch: i for i, ch in enumerate(ALPHABET)}
LATENT_DIM = 20
CODE_LENGTH = LATENT_DIM + 1
CODE_RE = re.compile(r"^[A-Za-z0-9_-]{20}[0-9]$")


@dataclass(frozen=True)
class CodecSpec:
    version: int = 1
    bins: int = 64
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if not 0 <= self.version <= 9:
            raise ValidationError("version must be a single decimal digit")
        if self.bins != len(ALPHABET):
            raise ValidationError("bins must equal the alphabet size")


REGISTRY = {1: CodecSpec(1)}
CURRENT = REGISTRY[1]


def quantize(x: float, spec: CodecSpec = CURRENT) -> int:
    x = float(x)
    if math.isnan(x):
        raise ValidationError("cannot quantize NaN")
    x = min(max(x, spec.low), spec.high)
    i = math.floor((x - spec.low) / (spec.high - spec.low) * spec.bins)
    return min(spec.bins - 1, i)


def dequantize(i: int, spec: CodecSpec = CURRENT) -> float:
    if not isinstance(i, (int, np.integer)) or not 0 <= i < spec.bins:
        raise ValidationError(f"bin index {i!r} outside 0..{spec.bins - 1}")
    return (int(i) + 0.5) / spec.bins * (spec.high - spec.low) + spec.low


def encode_code(c, spec: CodecSpec = CURRENT) -> str:
    vals = np.asarray(c, dtype=np.float64).reshape(-1)
    if vals.size != LATENT_DIM:
        raise ValidationError(f"style latent must have {LATENT_DIM} values, got {vals.size}")
    if np.isnan(vals).any():
        raise ValidationError("style latent contains NaN")
    # same arithmetic as quantize(), vectorised
    x = np.clip(vals, spec.low, spec.high)
    idx = np.minimum(spec.bins - 1, np.floor((x - spec.low) / (spec.high - spec.low) * spec.bins).astype(np.int64))
    return "".join(ALPHABET[i] for i in idx) + str(spec.version)


def validate_code(text) -> str:
    """Syntax check only; returns the text or raises :class:`FormatError`."""
    if isinstance(text, bytes):
        try:
            text = text.decode("ascii")
        except UnicodeDecodeError as exc:
            raise FormatError(f"non-ASCII byte at position {exc.start}", position=exc.start,
                              char=repr(text[exc.start:exc.start + 1])) from None
    if not isinstance(text, str):
        raise FormatError(f"stylecode must be a string, got {type(text).__name__}", length=None)
    if len(text) != CODE_LENGTH:
        raise FormatError(f"length {len(text)}, expected {CODE_LENGTH}", length=len(text))
    for pos, ch in enumerate(text[:LATENT_DIM]):
        if ch not in _INDEX:
            raise FormatError(f"illegal character {ch!r} at position {pos}", position=pos, char=ch)
    if text[-1] not in "0123456789":
        raise FormatError(f"illegal version character {text[-1]!r} at position {LATENT_DIM}",
                          position=LATENT_DIM, char=text[-1])
    return text


def code_version(text) -> int:
    return int(validate_code(text)[-1])


def decode_code(text, spec: CodecSpec = CURRENT) -> np.ndarray:
    """Validate ``text`` and return the 20 bin-center values."""
    text = validate_code(text)
    found = int(text[-1])
    if found != spec.version:
        raise VersionMismatch(found, spec.version)
    idx = np.array([_INDEX[ch] for ch in text[:LATENT_DIM]], dtype=np.float64)
    return (idx + 0.5) / spec.bins * (spec.high - spec.low) + spec.low


def roundtrip(c, spec: CodecSpec = CURRENT) -> np.ndarray:
    """Quantize then dequantize a latent (the inference-time path)."""
    return decode_code(encode_code(c, spec), spec)
