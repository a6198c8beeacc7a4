"""Intra-image variance references, their CDFs, and the cross-image monitor.

Variances use the population convention (divide by the number of samples).
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .augment import Recipe, augment_batch, resize
from .encoder import EncoderParams, mean_encoding
from .numerics import ConfigError, DegenerateInputError, RngStream, l2_normalize


@dataclass
class VarianceReport:
    per_image: list[float]
    r: int
    recipe_id: str = ""
    encoder_id: str = ""
    mean_enc_n: int = 1

    @property
    def v(self) -> float:
        return math.fsum(self.per_image) / len(self.per_image)

    def cdf(self) -> list[tuple[float, float]]:
        return variance_cdf(self)

    def summary(self) -> dict:
        return {"v": self.v, "r": self.r, "recipe": self.recipe_id, "encoder": self.encoder_id,
                "mean_enc_n": self.mean_enc_n, "images": len(self.per_image)}

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["image_index", "variance"])
        for i, val in enumerate(self.per_image):
            w.writerow([i, repr(float(val))])
        return out.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)

    @classmethod
    def from_files(cls, csv_text: str, json_text: str) -> "VarianceReport":
        rows = list(csv.DictReader(io.StringIO(csv_text)))
        meta = json.loads(json_text)
        return cls([float(r["variance"]) for r in rows], int(meta["r"]), meta.get("recipe", ""),
                   meta.get("encoder", ""), int(meta.get("mean_enc_n", 1)))


# An encoder is either EncoderParams (full pipeline, per-batch BN) or a plain
# callable mapping flattened inputs [B, D] to raw encodings [B, d].
Encoder = EncoderParams | Callable[[np.ndarray], np.ndarray]


def _raw_mean_encodings(encoder: Encoder, views: list[np.ndarray], bn_groups: int, shuffle) -> np.ndarray:
    if isinstance(encoder, EncoderParams):
        h, _ = mean_encoding(encoder, views, bn_groups, shuffle, normalize=False)
        return h
    n = len(views)
    B = views[0].shape[0]
    out = np.asarray(encoder(np.concatenate(views, axis=0)), dtype=np.float64)
    return out.reshape(n, B, -1).mean(axis=0)


def population_var(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Divide-by-n variance, shifted by the first sample so equal samples give 0 exactly."""
    d = x - np.take(x, [0], axis=axis)
    return np.mean((d - d.mean(axis=axis, keepdims=True)) ** 2, axis=axis)


def _image_key(img: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(img, dtype="<f8").tobytes(), digest_size=12).hexdigest()


def draw_views(img: np.ndarray, recipe: Recipe, rng: RngStream, count: int, in_size: int) -> np.ndarray:
    """``count`` independent augmented standard views of one image, flattened."""
    vb = augment_batch(np.repeat(img[None], count, axis=0), recipe, rng)
    x = vb.standard if vb.standard.shape[-1] == in_size else resize(vb.standard, in_size)
    return x.reshape(count, -1)


def intra_image_variance(encoder: Encoder, images: np.ndarray, r: int, recipe: Recipe, rng: RngStream,
                         mean_enc_n: int | None = None, batch_size: int = 128, bn_groups: int = 1,
                         normalize: bool = True, in_size: int = 32, encoder_id: str = "") -> VarianceReport:
    """Per-image variance of ``r`` augmented encodings, averaged over dimensions.

    Each batch holds one view of each of ``batch_size`` different images and is
    encoded with online per-batch BN statistics.  View draws are keyed by image
    content and batches are formed in content-hash order, so the result does not
    depend on the order of ``images``.  A short trailing batch wraps around to
    fill up; padded rows are discarded.
    """
    if r < 2:
        raise ConfigError(f"r must be >= 2, got {r}")
    images = np.asarray(images, dtype=np.float64)
    n_img = images.shape[0]
    if n_img == 0:
        raise ConfigError("no images to evaluate")
    n = mean_enc_n or 1
    if n < 1:
        raise ConfigError("mean_enc_n must be >= 1")
    bs = min(batch_size, n_img)
    if bs % bn_groups:
        raise ConfigError(f"batch {bs} not divisible by bn_groups {bn_groups}")
    keys = [_image_key(im) for im in images]
    order = sorted(range(n_img), key=lambda i: (keys[i], i))
    per_image = np.empty(n_img)
    for start in range(0, n_img, bs):
        members = [order[(start + k) % n_img] for k in range(bs)]
        keep = min(bs, n_img - start)
        # [bs, r*n, D]: view t*n + k is the k-th member of the t-th averaged draw
        views = np.stack([draw_views(images[i], recipe, rng.child("image", keys[i]), r * n, in_size)
                          for i in members])
        zs = []
        for t in range(r):
            h = _raw_mean_encodings(encoder, [views[:, t * n + k] for k in range(n)], bn_groups, None)
            zs.append(l2_normalize(h)[0] if normalize else h)
        var = population_var(np.stack(zs)).mean(axis=1)
        per_image[np.asarray(members[:keep])] = var[:keep]
    return VarianceReport([float(v) for v in per_image], r, recipe.name, encoder_id, n)


def cross_image_variance(z: np.ndarray) -> float:
    """Per-channel variance along the batch axis, averaged over channels."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise DegenerateInputError(f"need a [batch>=2, d] array, got shape {z.shape}")
    return float(population_var(z).mean())


def variance_cdf(report: VarianceReport) -> list[tuple[float, float]]:
    vals = np.sort(np.asarray(report.per_image, dtype=np.float64))
    n = vals.size
    return [(float(v), (i + 1) / n) for i, v in enumerate(vals)]


def bootstrap_gap_ci(a: VarianceReport, b: VarianceReport, rng: RngStream, n_boot: int = 2000,
                     level: float = 0.95) -> tuple[float, float, float]:
    """Paired bootstrap over images of ``v(a) - v(b)``: returns (gap, lo, hi)."""
    x = np.asarray(a.per_image)
    y = np.asarray(b.per_image)
    if x.shape != y.shape:
        raise ConfigError("reports must cover the same images for a paired bootstrap")
    d = x - y
    idx = rng.integers(0, d.size, size=(n_boot, d.size))
    means = d[idx].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    return float(d.mean()), float(lo), float(hi)


def bootstrap_ci(report: VarianceReport, rng: RngStream, n_boot: int = 2000, level: float = 0.95):
    x = np.asarray(report.per_image)
    means = x[rng.integers(0, x.size, size=(n_boot, x.size))].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)
