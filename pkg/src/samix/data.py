"""Datasets, two-view augmentation and Beta-distributed mixing ratios."""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .engine import ContractError, bilinear_weights

RECORD_BYTES = 3073
CIFAR_SIDE = 32


class DataFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        self.offset = offset
        super().__init__(f"{msg} (byte offset {offset})")


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    label: int | None = None


# ---------------------------------------------------------------------------
# CIFAR binary


def load_cifar_binary(path: str | os.PathLike) -> list[Sample]:
    """Read CIFAR-10 style records: 1 label byte + 3x32x32 plane-major pixels."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % RECORD_BYTES:
        whole = raw.size // RECORD_BYTES
        raise DataFormatError(
            f"file length {raw.size} is not a multiple of {RECORD_BYTES}", whole * RECORD_BYTES
        )
    recs = raw.reshape(-1, RECORD_BYTES)
    images = recs[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float64) / 255.0
    return [Sample(img, int(lab)) for img, lab in zip(images, recs[:, 0])]


def write_cifar_binary(path: str | os.PathLike, samples: list[Sample]) -> None:
    """Write samples in the CIFAR binary layout (pixels rounded to bytes)."""
    out = bytearray()
    for s in samples:
        if s.image.shape != (3, CIFAR_SIDE, CIFAR_SIDE):
            raise ContractError(f"CIFAR records hold 3x32x32 images, got {s.image.shape}")
        label = 0 if s.label is None else int(s.label)
        if not 0 <= label <= 255:
            raise ContractError(f"label {label} does not fit in a byte")
        out.append(label)
        out += np.round(np.clip(s.image, 0.0, 1.0) * 255.0).astype(np.uint8).tobytes()
    atomic_write_bytes(path, bytes(out))


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray | None]:
    x = np.stack([s.image for s in samples])
    if any(s.label is None for s in samples):
        return x, None
    return x, np.array([s.label for s in samples], dtype=np.int64)


# ---------------------------------------------------------------------------
# synthetic shapes

SHAPES = (
    "disk", "square", "triangle", "plus", "ring", "diamond", "hbar", "vbar",
    "triangle_down", "xcross", "half_disk", "frame", "ell", "two_dots", "ellipse", "chevron",
)  # fmt: skip


def _shape_mask(kind: str, yy: np.ndarray, xx: np.ndarray, r: float) -> np.ndarray:
    ay, ax = np.abs(yy), np.abs(xx)
    t = 0.35 * r
    if kind == "disk":
        return yy**2 + xx**2 <= r**2
    if kind == "square":
        return (ay <= 0.8 * r) & (ax <= 0.8 * r)
    if kind == "triangle":
        return (yy <= 0.8 * r) & (ax <= (yy + r) * 0.55)
    if kind == "triangle_down":
        return (yy >= -0.8 * r) & (ax <= (r - yy) * 0.55)
    if kind == "plus":
        return ((ay <= t) & (ax <= r)) | ((ax <= t) & (ay <= r))
    if kind == "ring":
        d = np.sqrt(yy**2 + xx**2)
        return (d <= r) & (d >= 0.55 * r)
    if kind == "diamond":
        return ay + ax <= r
    if kind == "hbar":
        return (ay <= t) & (ax <= r)
    if kind == "vbar":
        return (ax <= t) & (ay <= r)
    if kind == "xcross":
        return ((np.abs(yy - xx) <= 1.2 * t) | (np.abs(yy + xx) <= 1.2 * t)) & (ay <= 0.8 * r) & (ax <= 0.8 * r)
    if kind == "half_disk":
        return (yy**2 + xx**2 <= r**2) & (yy >= 0)
    if kind == "frame":
        return (ay <= 0.85 * r) & (ax <= 0.85 * r) & ~((ay <= 0.45 * r) & (ax <= 0.45 * r))
    if kind == "ell":
        return ((ax <= r * 0.8) & (yy >= 0.4 * r) & (yy <= 0.8 * r)) | (
            (xx >= -0.8 * r) & (xx <= -0.4 * r) & (ay <= 0.8 * r)
        )
    if kind == "two_dots":
        return ((yy**2 + (xx - 0.5 * r) ** 2) <= (0.4 * r) ** 2) | (
            (yy**2 + (xx + 0.5 * r) ** 2) <= (0.4 * r) ** 2
        )
    if kind == "ellipse":
        return (yy / (0.5 * r)) ** 2 + (xx / r) ** 2 <= 1.0
    if kind == "chevron":
        return (np.abs(yy - 0.6 * ax + 0.3 * r) <= t) & (ax <= r)
    raise ContractError(f"unknown shape kind {kind}")


def synth_shapes(n: int, classes: int, size: int = 32, seed: int = 0) -> list[Sample]:
    """Coloured geometric shapes on textured backgrounds; label = shape kind."""
    if not 2 <= classes <= len(SHAPES):
        raise ContractError(f"classes must lie in [2, {len(SHAPES)}], got {classes}")
    if size < 16:
        raise ContractError(f"size must be >= 16, got {size}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    grid = np.arange(size) + 0.5
    out = []
    for lab in labels:
        bg = rng.random(3)
        fg = rng.random(3)
        while np.abs(fg - bg).sum() < 0.75:
            fg = rng.random(3)
        # background: tilted colour gradient plus fine noise
        angle = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(angle) * grid[None, :] + np.sin(angle) * grid[:, None]) / size
        texture = 0.15 * (ramp - ramp.mean()) + 0.06 * rng.standard_normal((size, size))
        img = bg[:, None, None] + texture[None]
        r = rng.uniform(0.22, 0.34) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        yy = grid[:, None] - cy
        xx = grid[None, :] - cx
        m = _shape_mask(SHAPES[lab], yy, xx, r)
        img = np.where(m[None], fg[:, None, None] + 0.04 * rng.standard_normal((3, size, size)), img)
        out.append(Sample(np.clip(img, 0.0, 1.0), int(lab)))
    return out


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    scale: tuple[float, float] = (0.2, 1.0)
    ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    p_flip: float = 0.5
    p_jitter: float = 0.8
    jitter: float = 0.4
    p_gray: float = 0.2

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(scale=(1.0, 1.0), ratio=(1.0, 1.0), p_flip=0.0, p_jitter=0.0, p_gray=0.0)


@dataclass
class ViewParams:
    """Replayable record of the random choices behind one view."""

    top: int
    left: int
    height: int
    width: int
    flip: bool = False
    brightness: float = 1.0
    contrast: float = 1.0
    gray: bool = False


@dataclass
class ViewPair:
    view_q: np.ndarray
    view_k: np.ndarray
    source_index: int
    params_q: ViewParams | None = None
    params_k: ViewParams | None = None


def sample_view_params(rng: np.random.Generator, h: int, w: int, cfg: AugmentConfig) -> ViewParams:
    area = h * w
    ch, cw = h, w
    for _ in range(10):
        target = area * rng.uniform(*cfg.scale)
        log_r = np.log(cfg.ratio)
        aspect = np.exp(rng.uniform(log_r[0], log_r[1]))
        cw_ = int(round(np.sqrt(target * aspect)))
        ch_ = int(round(np.sqrt(target / aspect)))
        if 0 < cw_ <= w and 0 < ch_ <= h:
            ch, cw = ch_, cw_
            break
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    flip = bool(rng.random() < cfg.p_flip)
    brightness = contrast = 1.0
    if rng.random() < cfg.p_jitter:
        brightness = float(rng.uniform(1 - cfg.jitter, 1 + cfg.jitter))
        contrast = float(rng.uniform(1 - cfg.jitter, 1 + cfg.jitter))
    gray = bool(rng.random() < cfg.p_gray)
    return ViewParams(top, left, ch, cw, flip, brightness, contrast, gray)


def apply_view(image: np.ndarray, p: ViewParams) -> np.ndarray:
    """Deterministically realise a view from its parameters."""
    _, h, w = image.shape
    crop = image[:, p.top : p.top + p.height, p.left : p.left + p.width]
    out = bilinear_weights(p.height, h) @ crop @ bilinear_weights(p.width, w).T
    if p.flip:
        out = out[:, :, ::-1]
    if p.brightness != 1.0:
        out = np.clip(out * p.brightness, 0.0, 1.0)
    if p.contrast != 1.0:
        gray_mean = (0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2]).mean()
        out = np.clip((out - gray_mean) * p.contrast + gray_mean, 0.0, 1.0)
    if p.gray:
        lum = 0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2]
        out = np.repeat(lum[None], 3, axis=0)
    return np.ascontiguousarray(out)


def two_view(
    sample: Sample,
    rng: np.random.Generator,
    cfg: AugmentConfig | None = None,
    index: int = 0,
) -> ViewPair:
    cfg = cfg or AugmentConfig()
    _, h, w = sample.image.shape
    pq = sample_view_params(rng, h, w, cfg)
    pk = sample_view_params(rng, h, w, cfg)
    return ViewPair(apply_view(sample.image, pq), apply_view(sample.image, pk), index, pq, pk)


def two_view_batch(
    images: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig | None = None
) -> tuple[np.ndarray, np.ndarray]:
    cfg = cfg or AugmentConfig()
    q = np.empty_like(images)
    k = np.empty_like(images)
    for i, img in enumerate(images):
        pair = two_view(Sample(img), rng, cfg, i)
        q[i], k[i] = pair.view_q, pair.view_k
    return q, k


# ---------------------------------------------------------------------------
# mixing ratios


@dataclass
class LambdaSampler:
    """Beta(alpha, alpha) sampler built from two Gamma(alpha, 1) draws."""

    alpha: float = 2.0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __post_init__(self):
        if not self.alpha > 0:
            raise ContractError(f"alpha must be positive, got {self.alpha}")

    def sample(self, size=None):
        x = self.rng.gamma(self.alpha, 1.0, size=size)
        y = self.rng.gamma(self.alpha, 1.0, size=size)
        with np.errstate(invalid="ignore"):
            lam = x / (x + y)
        # Gamma underflow for tiny alpha can give exact 0, 1 or 0/0
        tiny = np.finfo(np.float64).tiny
        lam = np.where(np.isfinite(lam), lam, 0.5)
        return np.clip(lam, tiny, np.nextafter(1.0, 0.0))


def sample_lambda(sampler: LambdaSampler) -> float:
    return float(sampler.sample())
