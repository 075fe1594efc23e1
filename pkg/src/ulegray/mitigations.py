"""Image-space transforms: grayscale, bit-depth reduction, crop/flip, mixup.

All batch transforms take channels-last tensors ``(B, H, W, 3)`` with values
in [0, 1].  Numpy input is accepted and numpy is returned.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
TRANSFORM_KINDS = ("grayscale", "bdr", "random_crop", "random_flip", "mixup")


def _as_tensor(x):
    if isinstance(x, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(x)), True
    return x, False


def _back(x, was_numpy):
    return x.numpy() if was_numpy else x


def grayscale(x):
    """Luminance ``0.299 R + 0.587 G + 0.114 B`` replicated into all three channels.

    The weighted sum is taken in float64 so that already-gray pixels map to
    themselves exactly after casting back.
    """
    t, was_np = _as_tensor(x)
    if t.shape[-1] != 3:
        raise ValueError(f"grayscale expects 3 channels in the last axis, got {t.shape[-1]}")
    w = torch.tensor(LUMA_WEIGHTS, dtype=torch.float64, device=t.device)
    y = (t.to(torch.float64) * w).sum(dim=-1, keepdim=True).to(t.dtype)
    return _back(y.expand_as(t).contiguous(), was_np)


def bit_depth_reduce(x, bits: int):
    """Per-channel quantization to ``2**bits`` evenly spaced levels in [0, 1]."""
    if not isinstance(bits, (int, np.integer)) or not 1 <= bits <= 8:
        raise ValueError(f"bits must be an integer in 1..8, got {bits!r}")
    t, was_np = _as_tensor(x)
    levels = float(2 ** int(bits) - 1)
    return _back(torch.round(t * levels) / levels, was_np)


def random_crop(x, pad: int, rng: np.random.Generator, padding_mode: str = "reflect"):
    """Pad by ``pad`` on each side and take an independent random HxW crop per image."""
    t, was_np = _as_tensor(x)
    if pad < 0:
        raise ValueError("pad must be >= 0")
    if pad == 0:
        return _back(t.clone(), was_np)
    b, h, w, _ = t.shape
    mode = {"reflect": "reflect", "zero": "constant", "constant": "constant"}[padding_mode]
    padded = F.pad(t.permute(0, 3, 1, 2), (pad, pad, pad, pad), mode=mode).permute(0, 2, 3, 1)
    oy = torch.from_numpy(rng.integers(0, 2 * pad + 1, size=b))
    ox = torch.from_numpy(rng.integers(0, 2 * pad + 1, size=b))
    return _back(crop_at(padded, oy, ox, h, w), was_np)


def crop_at(padded, oy, ox, h, w):
    """Crop ``padded[i, oy[i]:oy[i]+h, ox[i]:ox[i]+w]`` for every image at once."""
    b = padded.shape[0]
    rows = (oy.view(b, 1) + torch.arange(h)).view(b, h, 1)
    cols = (ox.view(b, 1) + torch.arange(w)).view(b, 1, w)
    bidx = torch.arange(b).view(b, 1, 1)
    return padded[bidx, rows, cols]


def random_flip(x, p: float, rng: np.random.Generator):
    """Flip each image left-right independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("flip probability must lie in [0, 1]")
    t, was_np = _as_tensor(x)
    mask = torch.from_numpy(rng.random(t.shape[0]) < p)
    out = torch.where(mask.view(-1, 1, 1, 1), t.flip(2), t)
    return _back(out, was_np)


def augment(x, descriptors, rng: np.random.Generator):
    """Apply the crop/flip descriptors of a stack in order; other kinds are ignored."""
    for d in descriptors:
        if d.kind == "random_crop":
            x = random_crop(x, d.pad, rng, d.padding_mode)
        elif d.kind == "random_flip":
            x = random_flip(x, d.p, rng)
    return x


def mixup(x, y, alpha: float, rng: np.random.Generator, lam: Optional[float] = None, perm=None):
    """Mix a batch with a permutation of itself.

    ``y`` holds one-hot (or already soft) labels.  ``lam`` and ``perm`` may be
    forced; otherwise ``lam ~ Beta(alpha, alpha)`` and ``perm`` is random.
    """
    if alpha <= 0:
        raise ValueError(f"mixup alpha must be positive, got {alpha}")
    t, was_np = _as_tensor(x)
    yt, _ = _as_tensor(y)
    if t.shape[0] < 2:
        raise ValueError("mixup needs a batch of at least 2")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    if perm is None:
        perm = rng.permutation(t.shape[0])
    perm = torch.as_tensor(np.asarray(perm), dtype=torch.long)
    xm = lam * t + (1.0 - lam) * t[perm]
    ym = lam * yt + (1.0 - lam) * yt[perm]
    return _back(xm.clamp(0.0, 1.0), was_np), _back(ym, was_np)


@dataclasses.dataclass
class TransformSpec:
    kind: str
    bits: Optional[int] = None
    pad: Optional[int] = None
    padding_mode: str = "reflect"
    p: Optional[float] = None
    alpha: Optional[float] = None

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ConfigError(f"unknown transform kind {self.kind!r}")
        if self.kind == "bdr" and (self.bits is None or not 1 <= self.bits <= 8):
            raise ConfigError(f"bdr bits must be in 1..8, got {self.bits}")
        if self.kind == "random_crop":
            self.pad = 4 if self.pad is None else self.pad
            if self.pad < 0 or self.padding_mode not in ("reflect", "zero", "constant"):
                raise ConfigError("random_crop needs pad >= 0 and padding_mode reflect|zero")
        if self.kind == "random_flip":
            self.p = 0.5 if self.p is None else self.p
            if not 0.0 <= self.p <= 1.0:
                raise ConfigError("random_flip p must lie in [0, 1]")
        if self.kind == "mixup":
            self.alpha = 1.0 if self.alpha is None else self.alpha
            if self.alpha <= 0:
                raise ConfigError("mixup alpha must be positive")

    def label(self):
        return {"bdr": f"bdr{self.bits}", "random_crop": f"crop{self.pad}",
                "random_flip": "flip", "mixup": "mixup"}.get(self.kind, self.kind)


def crop(pad=4, padding_mode="reflect"):
    return TransformSpec("random_crop", pad=pad, padding_mode=padding_mode)


def flip(p=0.5):
    return TransformSpec("random_flip", p=p)


def gray():
    return TransformSpec("grayscale")


def bdr(bits):
    return TransformSpec("bdr", bits=bits)


def mix(alpha=1.0):
    return TransformSpec("mixup", alpha=alpha)


@dataclasses.dataclass
class TransformStack:
    """Ordered transforms for a training pipeline.

    Execution order is fixed regardless of list order: bdr, then crop/flip
    (in list order), then grayscale, then mixup.  ``mixup`` must be listed last.
    """

    transforms: list[TransformSpec] = dataclasses.field(default_factory=list)
    rng_seed: int = 0

    def __post_init__(self):
        self.transforms = [t if isinstance(t, TransformSpec) else TransformSpec(**t) for t in self.transforms]
        kinds = [t.kind for t in self.transforms]
        if "mixup" in kinds and kinds.index("mixup") != len(kinds) - 1:
            raise ConfigError("mixup must be the last transform in a stack")
        if kinds.count("mixup") > 1 or kinds.count("grayscale") > 1 or kinds.count("bdr") > 1:
            raise ConfigError("grayscale, bdr and mixup may appear at most once")

    @classmethod
    def standard(cls, *extra, rng_seed=0):
        return cls([crop(), flip(), *extra], rng_seed)

    def has(self, kind):
        return any(t.kind == kind for t in self.transforms)

    def get(self, kind):
        return next((t for t in self.transforms if t.kind == kind), None)

    @property
    def spatial(self):
        return [t for t in self.transforms if t.kind in ("random_crop", "random_flip")]

    def prefilters(self):
        """Pixel-wise filters that also belong to the model's test-time input stage."""
        out = []
        b = self.get("bdr")
        if b is not None:
            out.append(("bdr", b.bits))
        if self.has("grayscale"):
            out.append(("grayscale",))
        return out

    def apply(self, x, y, rng: np.random.Generator, class_count: int):
        """Returns ``(x, y)``; ``y`` becomes soft labels ``(B, C)`` if mixup is present."""
        b = self.get("bdr")
        if b is not None:
            x = bit_depth_reduce(x, b.bits)
        x = augment(x, self.spatial, rng)
        if self.has("grayscale"):
            x = grayscale(x)
        m = self.get("mixup")
        if m is not None and len(y) >= 2:
            onehot = F.one_hot(torch.as_tensor(y), class_count).to(torch.float32)
            x, y = mixup(x, onehot, m.alpha, rng)
        return x, y

    def describe(self):
        return "+".join(t.label() for t in self.transforms) or "none"


def apply_prefilters(x, filters):
    """Model input stage filters: ``[("bdr", bits), ("grayscale",)]`` in the given order.

    Quantization passes gradients straight through so attacks against a BDR
    model still get a signal.
    """
    for f in filters:
        if f[0] == "grayscale":
            x = grayscale(x)
        elif f[0] == "bdr":
            q = bit_depth_reduce(x, int(f[1]))
            x = x + (q - x).detach() if isinstance(x, torch.Tensor) and x.requires_grad else q
        else:
            raise ConfigError(f"unknown input filter {f!r}")
    return x


def is_gray(x, atol=0.0) -> bool:
    t, _ = _as_tensor(x)
    spread = (t.amax(dim=-1) - t.amin(dim=-1)).abs().max()
    return bool(spread <= atol) or math.isclose(float(spread), 0.0, abs_tol=atol)
