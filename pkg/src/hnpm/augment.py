"""Seeded augmentation pipeline for the teacher view.

Images are float arrays of shape ``(3, H, W)`` with values in ``[0, 1]``.
Every call to :func:`augment_image` draws exactly :data:`DRAWS_PER_IMAGE`
uniforms from the stream, whether or not a step fires, so a seed maps to
one output regardless of earlier outcomes.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError

LUMA = np.array([0.299, 0.587, 0.114])
DRAWS_PER_IMAGE = 11


class RngStream:
    """Counter-based (Philox) random stream with a serialisable state."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        source = self.seed if self.stream == 0 else np.random.SeedSequence([self.seed, self.stream])
        self.gen = np.random.Generator(np.random.Philox(source))

    def uniform(self, size=None):
        return self.gen.random(size)

    def normal(self, scale=1.0, size=None):
        return self.gen.normal(0.0, scale, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def get_state(self) -> dict:
        return _jsonable(self.gen.bit_generator.state)

    def set_state(self, state: dict):
        s = dict(state)
        inner = s["state"]
        s["state"] = {k: np.array(v, dtype=np.uint64) for k, v in inner.items()}
        s["buffer"] = np.array(s["buffer"], dtype=np.uint64)
        self.gen.bit_generator.state = s


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


@dataclass
class AugmentConfig:
    jitter_prob: float = 0.8
    brightness: float = 0.8
    contrast: float = 0.8
    saturation: float = 0.8
    hue: float = 0.2
    grayscale_prob: float = 0.2
    hflip_prob: float = 0.5
    blur_prob: float = 0.1
    blur_kernel: int = 3
    blur_sigma: float = 1.5
    crop_scale_range: tuple = (0.8, 1.0)
    norm_mean: tuple = (0.485, 0.456, 0.406)
    norm_std: tuple = (0.229, 0.224, 0.225)

    def __post_init__(self):
        self.crop_scale_range = tuple(float(v) for v in self.crop_scale_range)
        self.norm_mean = tuple(float(v) for v in self.norm_mean)
        self.norm_std = tuple(float(v) for v in self.norm_std)
        for name in ("jitter_prob", "grayscale_prob", "hflip_prob", "blur_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")
        if not self.blur_sigma > 0:
            raise ConfigError("blur_sigma must be positive")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ConfigError("blur_kernel must be a positive odd size")
        if not 0.0 <= self.hue <= 0.5:
            raise ConfigError("hue must lie in [0, 0.5]")
        if any(s <= 0 for s in self.norm_std):
            raise ConfigError("norm_std components must be positive")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(jitter_prob=0.0, grayscale_prob=0.0, hflip_prob=0.0, blur_prob=0.0, crop_scale_range=(1.0, 1.0))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("crop_scale_range", "norm_mean", "norm_std"):
            d[k] = list(d[k])
        return d


# -- individual transforms -----------------------------------------------------


def _luma(img):
    return np.tensordot(LUMA, img, axes=(0, 0))


def rgb_to_hsv(img):
    r, g, b = img
    mx = img.max(axis=0)
    mn = img.min(axis=0)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0, np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(delta > 0, h / 6.0, 0.0)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx])


def hsv_to_rgb(hsv):
    h, s, v = hsv
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.empty((3,) + h.shape)
    for c in range(3):
        out[c] = np.select([i == k for k in range(6)], [ch[c] for ch in choices])
    return out


def color_jitter(img, brightness=1.0, contrast=1.0, saturation=1.0, hue=0.0):
    """Apply brightness, contrast, saturation, then hue with the given factors."""
    out = np.clip(img * brightness, 0.0, 1.0)
    if contrast != 1.0:
        out = np.clip(contrast * out + (1.0 - contrast) * _luma(out).mean(), 0.0, 1.0)
    if saturation != 1.0:
        out = np.clip(saturation * out + (1.0 - saturation) * _luma(out)[None], 0.0, 1.0)
    if hue != 0.0:
        hsv = rgb_to_hsv(out)
        hsv[0] = (hsv[0] + hue) % 1.0
        out = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    return out


def to_grayscale(img):
    y = _luma(img)
    return np.clip(np.stack([y, y, y]), 0.0, 1.0)


def hflip(img):
    return img[:, :, ::-1].copy()


def gaussian_kernel(size=3, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_blur(img, kernel=3, sigma=1.5):
    """Per-channel convolution with a normalised Gaussian, edges replicated."""
    if not sigma > 0:
        raise ConfigError("sigma must be positive")
    k = gaussian_kernel(kernel, sigma)
    r = kernel // 2
    _, h, w = img.shape
    padded = np.pad(img, ((0, 0), (r, r), (r, r)), mode="edge")
    out = np.zeros_like(img)
    for i in range(kernel):
        for j in range(kernel):
            out += k[i, j] * padded[:, i : i + h, j : j + w]
    return np.clip(out, 0.0, 1.0)


def _bilinear_resize(img, out_h, out_w):
    _, h, w = img.shape

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = coords(out_h, h)
    x0, x1, wx = coords(out_w, w)
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy)[None, :, None] + bot * wy[None, :, None]


def resized_crop(img, scale, u_top, u_left):
    """Crop ``scale`` of the area at the same aspect ratio and resize back.

    ``u_top`` and ``u_left`` in ``[0, 1)`` place the window uniformly over
    the valid offsets.
    """
    _, h, w = img.shape
    side = math.sqrt(scale)
    ch = min(h, max(1, int(round(side * h))))
    cw = min(w, max(1, int(round(side * w))))
    top = min(h - ch, int(u_top * (h - ch + 1)))
    left = min(w - cw, int(u_left * (w - cw + 1)))
    if ch == h and cw == w:
        return img.copy()
    crop = img[:, top : top + ch, left : left + cw]
    return np.clip(_bilinear_resize(crop, h, w), 0.0, 1.0)


def random_resized_crop(img, rng: RngStream, scale_range=(0.8, 1.0)):
    u = rng.uniform(3)
    lo, hi = scale_range
    return resized_crop(img, lo + (hi - lo) * u[0], u[1], u[2])


def normalize_channels(img, mean, std) -> Tensor:
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ConfigError("std components must be positive")
    mean = np.asarray(mean, dtype=np.float64)
    return Tensor((img - mean[:, None, None]) / std[:, None, None])


# -- pipeline ------------------------------------------------------------------


@dataclass
class AugmentPlan:
    """Random decisions for one image, drawn up front."""

    jitter: bool
    factors: tuple
    grayscale: bool
    flip: bool
    blur: bool
    crop_scale: float
    crop_pos: tuple = field(default=(0.0, 0.0))

    @classmethod
    def draw(cls, rng: RngStream, cfg: AugmentConfig) -> "AugmentPlan":
        u = rng.uniform(DRAWS_PER_IMAGE)

        def span(beta, x):
            lo = max(0.0, 1.0 - beta)
            return lo + (1.0 + beta - lo) * x

        factors = (
            span(cfg.brightness, u[1]),
            span(cfg.contrast, u[2]),
            span(cfg.saturation, u[3]),
            -cfg.hue + 2.0 * cfg.hue * u[4],
        )
        lo, hi = cfg.crop_scale_range
        return cls(
            jitter=bool(u[0] < cfg.jitter_prob),
            factors=factors,
            grayscale=bool(u[5] < cfg.grayscale_prob),
            flip=bool(u[6] < cfg.hflip_prob),
            blur=bool(u[7] < cfg.blur_prob),
            crop_scale=lo + (hi - lo) * u[8],
            crop_pos=(u[9], u[10]),
        )

    def apply(self, img, cfg: AugmentConfig):
        out = img
        if self.jitter:
            out = color_jitter(out, *self.factors)
        if self.grayscale:
            out = to_grayscale(out)
        if self.flip:
            out = hflip(out)
        if self.blur:
            out = gaussian_blur(out, cfg.blur_kernel, cfg.blur_sigma)
        return resized_crop(out, self.crop_scale, *self.crop_pos)


def augment_image(img, cfg: AugmentConfig, rng: RngStream):
    """Augmented image before normalisation, still in ``[0, 1]``."""
    return AugmentPlan.draw(rng, cfg).apply(np.asarray(img, dtype=np.float64), cfg)


def augment_pipeline(img, cfg: AugmentConfig, rng: RngStream) -> Tensor:
    return normalize_channels(augment_image(img, cfg, rng), cfg.norm_mean, cfg.norm_std)


def augment_batch(images, cfg: AugmentConfig, rng: RngStream):
    """Augment and normalise an ``(N, 3, H, W)`` array, one plan per row in order."""
    mean = np.asarray(cfg.norm_mean)[:, None, None]
    std = np.asarray(cfg.norm_std)[:, None, None]
    return np.stack([(augment_image(im, cfg, rng) - mean) / std for im in images])


def normalize_batch(images, cfg: AugmentConfig):
    mean = np.asarray(cfg.norm_mean)[None, :, None, None]
    std = np.asarray(cfg.norm_std)[None, :, None, None]
    return (np.asarray(images) - mean) / std


def vector_jitter(x, noise_scale: float, rng: RngStream):
    """``x`` plus i.i.d. Gaussian noise of standard deviation ``noise_scale``."""
    if noise_scale < 0:
        raise ConfigError("noise_scale must be non-negative")
    wrap = isinstance(x, Tensor)
    x = np.asarray(x.values if wrap else x, dtype=np.float64)
    eps = rng.normal(1.0, x.shape)
    out = x.copy() if noise_scale == 0 else x + noise_scale * eps
    return Tensor(out) if wrap else out
