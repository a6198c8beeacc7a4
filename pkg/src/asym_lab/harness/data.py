"""Datasets: class-structured synthetic images and the CIFAR-10 binary format."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..numerics import ConfigError, LabError, RngStream

log = logging.getLogger(__name__)

CIFAR_RECORD = 1 + 3 * 32 * 32


class ParseError(LabError, ValueError):
    pass


@dataclass
class Dataset:
    """Images ``[n, 3, H, W]`` in [0, 1] with integer labels, split into train/eval."""
    train_images: np.ndarray
    train_labels: np.ndarray
    eval_images: np.ndarray
    eval_labels: np.ndarray
    n_classes: int

    @property
    def image_size(self) -> int:
        return self.train_images.shape[-1]


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    n_classes: int = 10
    train_per_class: int = 500
    eval_per_class: int = 100
    image_size: int = 32
    template_seeds: list[int] | None = None
    # per-image nuisance; all zero => every image of a class equals its template
    pixel_noise: float = 0.1
    phase_jitter: float = 1.0
    position_jitter: float = 0.25
    color_cast: float = 0.6
    contrast_jitter: float = 0.7
    distractor: float = 0.0
    path: str = ""

    def __post_init__(self):
        if self.kind not in ("synthetic", "cifar10-binary"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "synthetic":
            if self.n_classes < 1 or self.train_per_class < 0 or self.eval_per_class < 0:
                raise ConfigError("class and image counts must be non-negative")
            if self.template_seeds is not None and len(self.template_seeds) != self.n_classes:
                raise ConfigError("template_seeds needs one entry per class")
            for k in ("pixel_noise", "phase_jitter", "position_jitter", "color_cast", "contrast_jitter",
                      "distractor"):
                if getattr(self, k) < 0:
                    raise ConfigError(f"{k} must be >= 0")

    def seeds(self) -> list[int]:
        return list(self.template_seeds) if self.template_seeds is not None else list(range(self.n_classes))

    def without_nuisance(self) -> "DatasetSpec":
        from dataclasses import replace
        return replace(self, pixel_noise=0.0, phase_jitter=0.0, position_jitter=0.0, color_cast=0.0,
                       contrast_jitter=0.0, distractor=0.0)


# inverse golden ratio: consecutive seeds land far apart on the orientation circle
_SPREAD = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class Template:
    """Class template: an oriented grey grating plus a signed-colour Gaussian blob.

    Orientations lie in [0, pi/2), so a horizontal flip (theta -> pi - theta) never
    maps one class onto another.  Blob colours are signed offsets from mid-grey,
    which gain jitter about mid-grey rescales but never flips.
    """
    theta: float
    freq: float
    blob_xy: tuple
    blob_radius: float
    blob_color: tuple


def class_template(seed: int) -> Template:
    r = RngStream(seed, ("template",))
    frac = (0.5 + seed * _SPREAD) % 1.0
    return Template(
        theta=float(0.5 * np.pi * frac),
        freq=float(r.uniform(2.0, 3.5)),
        blob_xy=tuple(r.uniform(0.3, 0.7, 2)),
        blob_radius=float(r.uniform(0.1, 0.16)),
        blob_color=tuple(np.full(3, 1.0 if r.uniform() < 0.5 else -1.0) * r.uniform(0.5, 1.0, 3)),
    )


def render(t: Template, size: int, n: int, spec: DatasetSpec, rng: RngStream) -> np.ndarray:
    """``n`` images of one class, each with its own nuisance draw."""
    yy, xx = np.meshgrid((np.arange(size) + 0.5) / size, (np.arange(size) + 0.5) / size, indexing="ij")
    phase = rng.uniform(0, 2 * np.pi, n) * spec.phase_jitter
    wave = np.cos(2 * np.pi * t.freq * (xx * np.cos(t.theta) + yy * np.sin(t.theta))[None] + phase[:, None, None])
    d_theta = rng.uniform(0, np.pi, n)
    d_freq = rng.uniform(1.5, 4.0, n)
    d_phase = rng.uniform(0, 2 * np.pi, n)
    distract = np.cos(2 * np.pi * d_freq[:, None, None] * (xx * np.cos(d_theta)[:, None, None]
                                                          + yy * np.sin(d_theta)[:, None, None]) + d_phase[:, None, None])
    shift = rng.normal(0, 1, (n, 2)) * spec.position_jitter
    bx = t.blob_xy[0] + shift[:, 0]
    by = t.blob_xy[1] + shift[:, 1]
    blob = np.exp(-((xx[None] - bx[:, None, None]) ** 2 + (yy[None] - by[:, None, None]) ** 2)
                  / (2 * t.blob_radius ** 2))
    contrast = 1.0 - spec.contrast_jitter * rng.uniform(0, 1, n)
    bc = np.asarray(t.blob_color)[None, :, None, None]
    img = 0.5 + 0.2 * contrast[:, None, None, None] * (wave + spec.distractor * distract)[:, None] \
        + 0.3 * bc * blob[:, None]
    gain = 1.0 + rng.uniform(-1, 1, (n, 3)) * spec.color_cast
    offset = rng.uniform(-1, 1, (n, 3)) * spec.color_cast * 0.1
    img = (img - 0.5) * gain[:, :, None, None] + 0.5 + offset[:, :, None, None]
    img = img + rng.normal(0, 1, img.shape) * spec.pixel_noise
    return np.clip(img, 0.0, 1.0)


def make_synthetic_dataset(spec: DatasetSpec, rng: RngStream) -> Dataset:
    """Pure function of ``(spec, rng seed/path)``; each split is shuffled once so batches mix classes."""
    seeds = spec.seeds()
    tr, te = [], []
    for c, s in enumerate(seeds):
        t = class_template(s)
        tr.append(render(t, spec.image_size, spec.train_per_class, spec, rng.child("train", c)))
        te.append(render(t, spec.image_size, spec.eval_per_class, spec, rng.child("eval", c)))
    size = spec.image_size
    tri = np.concatenate(tr) if tr else np.zeros((0, 3, size, size))
    tei = np.concatenate(te) if te else np.zeros((0, 3, size, size))
    trl = np.repeat(np.arange(len(seeds)), spec.train_per_class)
    tel = np.repeat(np.arange(len(seeds)), spec.eval_per_class)
    # a fixed shuffle so batches mix classes
    p = rng.child("order", "train").permutation(tri.shape[0])
    q = rng.child("order", "eval").permutation(tei.shape[0])
    return Dataset(tri[p], trl[p], tei[q], tel[q], len(seeds))


def clean_templates(spec: DatasetSpec) -> np.ndarray:
    """One nuisance-free image per class, ``[C, 3, H, W]``."""
    quiet = spec.without_nuisance()
    return np.concatenate([render(class_template(s), spec.image_size, 1, quiet, RngStream(0, ("clean",)))
                           for s in spec.seeds()])


def nearest_template_predict(images: np.ndarray, templates: np.ndarray) -> np.ndarray:
    d = ((images.reshape(len(images), -1)[:, None, :] - templates.reshape(len(templates), -1)[None]) ** 2).sum(-1)
    return d.argmin(axis=1)


# ---------------------------------------------------------------------------
# CIFAR-10 binary
# ---------------------------------------------------------------------------


def parse_cifar10_binary(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Records of 1 label byte + 3072 channel-planar pixel bytes (R, G, B planes)."""
    if len(data) % CIFAR_RECORD:
        whole = len(data) // CIFAR_RECORD
        raise ParseError(f"truncated record at byte offset {whole * CIFAR_RECORD} "
                         f"(file length {len(data)} is not a multiple of {CIFAR_RECORD})")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise ParseError(f"label {labels[bad[0]]} > 9 at byte offset {int(bad[0]) * CIFAR_RECORD}")
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def load_cifar10_binary(path, eval_fraction: float = 0.0, rng: RngStream | None = None):
    """Parse one CIFAR-10 ``.bin`` file, or every ``*.bin`` file in a directory.

    With ``eval_fraction == 0`` returns ``(images, labels)``; otherwise a ``Dataset``
    whose eval split is a random ``eval_fraction`` of the records.
    """
    p = Path(path)
    files = sorted(p.glob("*.bin")) if p.is_dir() else [p]
    parts = [parse_cifar10_binary(f.read_bytes()) for f in files]
    images = np.concatenate([a for a, _ in parts]) if parts else np.zeros((0, 3, 32, 32))
    labels = np.concatenate([b for _, b in parts]) if parts else np.zeros(0, dtype=np.int64)
    if not eval_fraction:
        return images, labels
    order = (rng or RngStream(0)).child("cifar_split").permutation(len(labels))
    k = int(round(len(labels) * eval_fraction))
    ev, tr = order[:k], order[k:]
    return Dataset(images[tr], labels[tr], images[ev], labels[ev], 10)


def to_cifar10_binary(images: np.ndarray, labels: np.ndarray) -> bytes:
    if images.shape[1:] != (3, 32, 32):
        raise ConfigError(f"CIFAR-10 records hold 3x32x32 images, got {images.shape[1:]}")
    pix = np.rint(np.clip(images, 0, 1) * 255.0).astype(np.uint8).reshape(len(images), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pix], axis=1)
    return rec.tobytes()


def load_dataset(spec: DatasetSpec, rng: RngStream) -> Dataset:
    if spec.kind == "synthetic":
        return make_synthetic_dataset(spec, rng)
    return load_cifar10_binary(spec.path, eval_fraction=0.1, rng=rng)
