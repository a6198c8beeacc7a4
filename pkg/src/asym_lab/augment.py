"""View generation: crops, photometric jitter, ScaleMix, MultiCrop view sets.

Images are float64 arrays of shape ``(3, H, W)`` with values in [0, 1]; batches
are ``(B, 3, H, W)``.  All randomness comes from labelled ``RngStream``
substreams, and the single-image entry points are the batched code run on a
batch of one, so the two never disagree.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .numerics import ConfigError, RngStream, ShapeError

log = logging.getLogger(__name__)

STANDARD_SIZE = 32
SMALL_SIZE = 16

_BINOMIAL = np.array([1.0, 2.0, 1.0]) / 4.0


@dataclass(frozen=True)
class BoxSpec:
    """Axis-aligned box given by its center and size, in pixel units."""
    x: float
    y: float
    w: float
    h: float

    def bounds(self, H: int, W: int) -> tuple[int, int, int, int]:
        """Integer pixel bounds ``(y1, y2, x1, x2)`` clipped to the image.

        The width and height are rounded once and the left/top edge once, so the
        unclipped pixel area is within half a pixel per side of ``w * h``.
        """
        wi = int(np.floor(self.w + 0.5))
        hi = int(np.floor(self.h + 0.5))
        x1 = int(np.floor(self.x - self.w / 2 + 0.5))
        y1 = int(np.floor(self.y - self.h / 2 + 0.5))
        return (min(max(y1, 0), H), min(max(y1 + hi, 0), H),
                min(max(x1, 0), W), min(max(x1 + wi, 0), W))


@dataclass(frozen=True)
class Recipe:
    """Declarative augmentation chain for one encoder side."""
    name: str = "baseline"
    crop_scale: tuple[float, float] = (0.2, 1.0)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    jitter_gain: float = 0.4
    jitter_bias: float = 0.02
    blur_prob: float = 0.5
    noise_sigma: float = 0.0
    scalemix: bool = False
    multicrop_m: int = 0
    small_size: int = SMALL_SIZE
    small_scale: tuple[float, float] = (0.05, 0.14)
    out_size: int = STANDARD_SIZE
    interpolation: str = "bilinear"

    def __post_init__(self):
        for lo, hi in (self.crop_scale, self.small_scale):
            if not (0 < lo <= hi <= 1):
                raise ConfigError(f"scale range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")
        for k in ("flip_prob", "jitter_prob", "blur_prob"):
            p = getattr(self, k)
            if not 0 <= p <= 1:
                raise ConfigError(f"{k}={p} outside [0, 1]")
        if self.jitter_gain < 0 or self.jitter_bias < 0 or self.noise_sigma < 0:
            raise ConfigError("jitter ranges and noise sigma must be >= 0")
        if self.multicrop_m < 0:
            raise ConfigError("multicrop_m must be >= 0")
        if self.out_size <= 0 or self.small_size <= 0:
            raise ConfigError("output sizes must be positive")
        if self.interpolation not in ("bilinear", "nearest"):
            raise ConfigError(f"unknown interpolation {self.interpolation!r}")

    def replace(self, **kw) -> "Recipe":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(float(t)) for t in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "Recipe":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for key, raw in items.items():
            if key not in kinds:
                raise ConfigError(f"unknown recipe key {key!r}")
            raw = raw.strip()
            default = getattr(cls, key)
            if isinstance(default, tuple):
                parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
                if len(parts) != 2:
                    raise ConfigError(f"{key} needs two comma-separated numbers, got {raw!r}")
                kw[key] = (float(parts[0]), float(parts[1]))
            elif isinstance(default, bool):
                if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ConfigError(f"{key} expects a boolean, got {raw!r}")
                kw[key] = raw.lower() in ("true", "1", "yes")
            elif isinstance(default, int):
                kw[key] = int(raw)
            elif isinstance(default, float):
                kw[key] = float(raw)
            else:
                kw[key] = raw
        return cls(**kw)

    @classmethod
    def from_text(cls, text: str) -> "Recipe":
        items = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"recipe line without '=': {line!r}")
            k, v = line.split("=", 1)
            items[k.strip()] = v
        return cls.from_items(items)


BASELINE = Recipe()
# weaker keeps only the geometric ops; stronger widens the jitter gain and adds
# pixel noise
WEAKER = Recipe(name="weaker", jitter_prob=0.0, jitter_gain=0.0, jitter_bias=0.0, blur_prob=0.0)
STRONGER = Recipe(name="stronger", jitter_gain=0.5, noise_sigma=0.05)

PRESETS = {"baseline": BASELINE, "weaker": WEAKER, "stronger": STRONGER}
PHOTOMETRIC = ("jitter_prob", "jitter_gain", "jitter_bias", "blur_prob", "noise_sigma")


def with_strength(recipe: Recipe, strength: Recipe) -> Recipe:
    """``recipe`` with the photometric settings of ``strength``; geometry is kept."""
    return recipe.replace(name=strength.name, **{k: getattr(strength, k) for k in PHOTOMETRIC})


def preset(name: str) -> Recipe:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown recipe preset {name!r}; choose from {sorted(PRESETS)}") from None


def deterministic_recipe(out_size: int = STANDARD_SIZE) -> Recipe:
    """All ranges degenerate: the standard view reproduces the input."""
    return Recipe(name="identity", crop_scale=(1.0, 1.0), flip_prob=0.0, jitter_prob=0.0,
                  jitter_gain=0.0, jitter_bias=0.0, blur_prob=0.0, out_size=out_size)


@dataclass
class ViewSet:
    standard: list[np.ndarray]
    small: list[np.ndarray] = field(default_factory=list)


@dataclass
class ViewBatch:
    """Batched counterpart of ``ViewSet``: ``standard`` is ``[B,3,S,S]``,
    ``small`` holds ``m`` arrays of shape ``[B,3,s,s]``."""
    standard: np.ndarray
    small: list[np.ndarray] = field(default_factory=list)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def _as_batch(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img[None]
    if img.ndim != 4:
        raise ShapeError(f"expected (C,H,W) or (B,C,H,W) image, got shape {img.shape}")
    return img


def resample(imgs: np.ndarray, top: np.ndarray, left: np.ndarray, height: np.ndarray, width: np.ndarray,
             out_hw: tuple[int, int], mode: str = "bilinear") -> np.ndarray:
    """Resample per-image boxes ``(top, left, height, width)`` to ``out_hw``.

    Output pixel centers are mapped into the box with the half-pixel convention,
    so a box equal to the full image at the same size is the identity.
    """
    imgs = _as_batch(imgs)
    B, C, H, W = imgs.shape
    Ho, Wo = out_hw
    ys = top[:, None] + (np.arange(Ho) + 0.5)[None, :] * (height[:, None] / Ho) - 0.5
    xs = left[:, None] + (np.arange(Wo) + 0.5)[None, :] * (width[:, None] / Wo) - 0.5
    ys = np.clip(ys, 0.0, H - 1)
    xs = np.clip(xs, 0.0, W - 1)
    b = np.arange(B)[:, None, None]
    if mode == "nearest":
        yi = np.floor(ys + 0.5).astype(np.intp).clip(0, H - 1)
        xi = np.floor(xs + 0.5).astype(np.intp).clip(0, W - 1)
        out = imgs.transpose(0, 2, 3, 1)[b, yi[:, :, None], xi[:, None, :]]
        return out.transpose(0, 3, 1, 2)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0)[:, :, None, None]
    wx = (xs - x0)[:, None, :, None]
    hwc = imgs.transpose(0, 2, 3, 1)
    Y0, Y1 = y0[:, :, None], y1[:, :, None]
    X0, X1 = x0[:, None, :], x1[:, None, :]
    top_row = hwc[b, Y0, X0] * (1 - wx) + hwc[b, Y0, X1] * wx
    bot_row = hwc[b, Y1, X0] * (1 - wx) + hwc[b, Y1, X1] * wx
    out = top_row * (1 - wy) + bot_row * wy
    return out.transpose(0, 3, 1, 2)


def resize(imgs: np.ndarray, size: int, mode: str = "bilinear") -> np.ndarray:
    imgs = _as_batch(imgs)
    B, _, H, W = imgs.shape
    if H == size and W == size:
        return imgs
    z = np.zeros(B)
    return resample(imgs, z, z, np.full(B, float(H)), np.full(B, float(W)), (size, size), mode)


def _sample_crop_boxes(B: int, H: int, W: int, scale_range, out_hw, rng: RngStream):
    lo, hi = scale_range
    if not (0 < lo <= hi):
        raise ConfigError(f"invalid scale range {scale_range}")
    ar = out_hw[1] / out_hw[0]
    area = rng.uniform(lo, hi, size=(B, 10)) * (H * W)
    cw = np.sqrt(area * ar)
    ch = np.sqrt(area / ar)
    ok = (cw <= W) & (ch <= H)
    first = np.argmax(ok, axis=1)
    found = ok[np.arange(B), first]
    u = rng.uniform(0.0, 1.0, size=(B, 2))
    cw = cw[np.arange(B), first]
    ch = ch[np.arange(B), first]
    if not found.all():
        log.info("crop fallback to center crop for %d of %d images", int((~found).sum()), B)
        fw = np.minimum(W, H * ar)
        fh = fw / ar
        cw = np.where(found, cw, fw)
        ch = np.where(found, ch, fh)
        u = np.where(found[:, None], u, 0.5)
    top = u[:, 0] * (H - ch)
    left = u[:, 1] * (W - cw)
    return top, left, ch, cw


def random_resized_crop(img: np.ndarray, scale_range, out_size, rng: RngStream, mode: str = "bilinear") -> np.ndarray:
    """Crop a box with area fraction ~ U(scale_range) and the output aspect ratio,
    at a uniform position, and resample it to ``out_size``.

    Accepts a single image or a batch; returns the same rank as the input.
    """
    single = np.asarray(img).ndim == 3
    imgs = _as_batch(img)
    B, _, H, W = imgs.shape
    out_hw = (out_size, out_size) if np.isscalar(out_size) else tuple(out_size)
    if min(out_hw) <= 0:
        raise ConfigError(f"output size must be positive, got {out_hw}")
    top, left, ch, cw = _sample_crop_boxes(B, H, W, scale_range, out_hw, rng)
    out = resample(imgs, top, left, ch, cw, out_hw, mode)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# photometric / flip
# ---------------------------------------------------------------------------


def random_flip(imgs: np.ndarray, prob: float, rng: RngStream) -> np.ndarray:
    flip = rng.uniform(size=imgs.shape[0]) < prob
    if not flip.any():
        return imgs
    out = imgs.copy()
    out[flip] = imgs[flip, :, :, ::-1]
    return out


def color_jitter(imgs: np.ndarray, prob: float, gain: float, bias: float, rng: RngStream) -> np.ndarray:
    """Per-channel affine jitter about mid-grey: ``(x - 0.5) * g + 0.5 + o`` with
    g in [1-gain, 1+gain] and o in [-bias, bias]."""
    B, C = imgs.shape[:2]
    apply = rng.uniform(size=B) < prob
    g = rng.uniform(1.0 - gain, 1.0 + gain, size=(B, C))
    o = rng.uniform(-bias, bias, size=(B, C))
    if not apply.any() or (gain == 0 and bias == 0):
        return imgs
    g = np.where(apply[:, None], g, 1.0)
    o = np.where(apply[:, None], o, 0.0)
    return np.clip((imgs - 0.5) * g[:, :, None, None] + 0.5 + o[:, :, None, None], 0.0, 1.0)


def blur3(imgs: np.ndarray) -> np.ndarray:
    """Separable 3x3 binomial blur with edge replication."""
    p = np.pad(imgs, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    v = _BINOMIAL[0] * p[:, :, :-2] + _BINOMIAL[1] * p[:, :, 1:-1] + _BINOMIAL[2] * p[:, :, 2:]
    return _BINOMIAL[0] * v[..., :-2] + _BINOMIAL[1] * v[..., 1:-1] + _BINOMIAL[2] * v[..., 2:]


def random_blur(imgs: np.ndarray, prob: float, rng: RngStream) -> np.ndarray:
    apply = rng.uniform(size=imgs.shape[0]) < prob
    if not apply.any():
        return imgs
    out = imgs.copy()
    out[apply] = blur3(imgs[apply])
    return out


def additive_noise(imgs: np.ndarray, sigma: float, rng: RngStream) -> np.ndarray:
    if sigma == 0:
        return imgs
    return np.clip(imgs + rng.normal(0.0, sigma, size=imgs.shape), 0.0, 1.0)


def _chain(imgs: np.ndarray, recipe: Recipe, scale_range, size: int, rng: RngStream) -> np.ndarray:
    x = random_resized_crop(imgs, scale_range, size, rng.child("crop"), recipe.interpolation)
    x = random_flip(x, recipe.flip_prob, rng.child("flip"))
    x = color_jitter(x, recipe.jitter_prob, recipe.jitter_gain, recipe.jitter_bias, rng.child("jitter"))
    x = random_blur(x, recipe.blur_prob, rng.child("blur"))
    return additive_noise(x, recipe.noise_sigma, rng.child("noise"))


# ---------------------------------------------------------------------------
# ScaleMix
# ---------------------------------------------------------------------------


def scalemix_box(H: int, W: int, lam: float, center: tuple[float, float]) -> BoxSpec:
    """Box with the view's aspect ratio and area fraction ``lam`` (before clipping)."""
    s = np.sqrt(lam)
    return BoxSpec(x=float(center[0]), y=float(center[1]), w=W * s, h=H * s)


def scalemix_mask(H: int, W: int, box: BoxSpec) -> np.ndarray:
    """Binary mask: 0 inside the (clipped) box, 1 elsewhere."""
    m = np.ones((H, W))
    y1, y2, x1, x2 = box.bounds(H, W)
    m[y1:y2, x1:x2] = 0.0
    return m


def _scalemix_masks(B: int, H: int, W: int, rng: RngStream, lam=None, center=None):
    lam = rng.uniform(0.0, 1.0, size=B) if lam is None else np.broadcast_to(np.asarray(lam, float), (B,))
    c = rng.uniform(0.0, 1.0, size=(B, 2)) * np.array([W, H]) if center is None \
        else np.broadcast_to(np.asarray(center, float), (B, 2))
    masks = np.ones((B, H, W))
    for i in range(B):
        masks[i] = scalemix_mask(H, W, scalemix_box(H, W, lam[i], c[i]))
    return masks, lam


def scalemix(v1: np.ndarray, v2: np.ndarray, rng: RngStream, lam=None, center=None) -> np.ndarray:
    """Mix two same-size views of one image: ``M*v1 + (1-M)*v2`` with a box of v2
    pasted into v1.  ``lam`` and ``center`` override the random draws."""
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    if v1.shape != v2.shape:
        raise ShapeError(f"scalemix views differ in shape: {v1.shape} vs {v2.shape}")
    single = v1.ndim == 3
    a, b = _as_batch(v1), _as_batch(v2)
    B, _, H, W = a.shape
    masks, _ = _scalemix_masks(B, H, W, rng, lam, center)
    out = masks[:, None] * a + (1.0 - masks[:, None]) * b
    return out[0] if single else out


# ---------------------------------------------------------------------------
# recipes
# ---------------------------------------------------------------------------


def augment_batch(imgs: np.ndarray, recipe: Recipe, rng: RngStream, standard_scale=None) -> ViewBatch:
    """Build the standard view (and ``recipe.multicrop_m`` small views) for every image.

    ``standard_scale`` overrides ``recipe.crop_scale`` for the standard view.
    """
    imgs = _as_batch(imgs)
    scale = recipe.crop_scale if standard_scale is None else standard_scale
    if recipe.scalemix:
        a = _chain(imgs, recipe, scale, recipe.out_size, rng.child("standard", "a"))
        b = _chain(imgs, recipe, scale, recipe.out_size, rng.child("standard", "b"))
        std = scalemix(a, b, rng.child("scalemix"))
    else:
        std = _chain(imgs, recipe, scale, recipe.out_size, rng.child("standard"))
    small = [_chain(imgs, recipe, recipe.small_scale, recipe.small_size, rng.child("small", k))
             for k in range(recipe.multicrop_m)]
    return ViewBatch(std, small)


def apply_recipe(img: np.ndarray, recipe: Recipe, rng: RngStream) -> ViewSet:
    vb = augment_batch(img, recipe, rng)
    return ViewSet(standard=[vb.standard[0]], small=[s[0] for s in vb.small])


def small_view_recipe(recipe: Recipe) -> Recipe:
    """Recipe whose standard view is a MultiCrop small crop (for variance references)."""
    return recipe.replace(name=recipe.name + "+smallcrop", crop_scale=recipe.small_scale,
                          out_size=recipe.small_size, scalemix=False, multicrop_m=0)
