"""Affine backbone + 3-layer projector, source/target pair, MeanEnc, checkpoints.

Architecture (widths configurable)::

    flatten -> fc1 -> relu -> fc2 -> relu            backbone (probe features)
            -> proj1 -> group-BN -> relu
            -> proj2 -> relu -> proj3 -> l2-normalize  projector
"""
from __future__ import annotations

import copy
import hashlib
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ConfigError, LabError, RngStream

BN_EPS = 1e-5
BN_RUNNING_MOMENTUM = 0.9
# fixed input standardization of [0, 1] pixels
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25

LAYERS = ("fc1", "fc2", "proj1", "proj2", "proj3")


class IntegrityError(LabError):
    pass


@dataclass
class EncoderParams:
    tensors: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def in_dim(self) -> int:
        return self.tensors["fc1.W"].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.tensors["fc2.W"].shape[0]

    @property
    def out_dim(self) -> int:
        return self.tensors["proj3.W"].shape[0]

    def copy(self) -> "EncoderParams":
        return EncoderParams({k: v.copy() for k, v in self.tensors.items()},
                             {k: v.copy() for k, v in self.buffers.items()})

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in {**self.tensors, **self.buffers}.items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k], dtype="<f8").tobytes())
        for k in sorted(self.buffers):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.buffers[k], dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def init_params(rng: RngStream, in_dim: int = 3072, hidden: int = 128, proj_hidden: int = 64,
                out_dim: int = 32) -> EncoderParams:
    """He-normal weights, zero biases, BN gamma=1 / beta=0."""
    dims = {"fc1": (hidden, in_dim), "fc2": (hidden, hidden), "proj1": (proj_hidden, hidden),
            "proj2": (proj_hidden, proj_hidden), "proj3": (out_dim, proj_hidden)}
    t = {}
    for name in LAYERS:
        o, i = dims[name]
        t[f"{name}.W"] = rng.child(name).normal(0.0, np.sqrt(2.0 / i), size=(o, i))
        t[f"{name}.b"] = np.zeros(o)
    t["bn.gamma"] = np.ones(proj_hidden)
    t["bn.beta"] = np.zeros(proj_hidden)
    buffers = {"bn.running_mean": np.zeros(proj_hidden), "bn.running_var": np.ones(proj_hidden)}
    return EncoderParams(t, buffers)


def features(params: EncoderParams, x: np.ndarray) -> np.ndarray:
    """Backbone (pre-projector) features; no BN involved."""
    p = params.tensors
    x = (np.asarray(x, dtype=np.float64) - PIXEL_MEAN) / PIXEL_STD
    h = np.maximum(x @ p["fc1.W"].T + p["fc1.b"], 0.0)
    return np.maximum(h @ p["fc2.W"].T + p["fc2.b"], 0.0)


def _forward(params: EncoderParams, x: np.ndarray, bn_groups: int, shuffle: RngStream | None,
             update_running: bool):
    p = params.tensors
    B = x.shape[0]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise nx.ShapeError(f"encoder expects [batch, {params.in_dim}], got {x.shape}")
    if bn_groups <= 0 or B % bn_groups:
        raise ConfigError(f"batch {B} not divisible by bn_groups {bn_groups}")
    caches = {}
    x = (x - PIXEL_MEAN) / PIXEL_STD
    h, caches["fc1"] = nx.affine_forward(x, p["fc1.W"], p["fc1.b"])
    h, caches["relu1"] = nx.relu_forward(h)
    h, caches["fc2"] = nx.affine_forward(h, p["fc2.W"], p["fc2.b"])
    h, caches["relu2"] = nx.relu_forward(h)
    h, caches["proj1"] = nx.affine_forward(h, p["proj1.W"], p["proj1.b"])
    h, caches["bn"] = nx.group_bn_forward(h, B // bn_groups, BN_EPS, shuffle, p["bn.gamma"], p["bn.beta"])
    h, caches["relu3"] = nx.relu_forward(h)
    h, caches["proj2"] = nx.affine_forward(h, p["proj2.W"], p["proj2.b"])
    h, caches["relu4"] = nx.relu_forward(h)
    h, caches["proj3"] = nx.affine_forward(h, p["proj3.W"], p["proj3.b"])
    if update_running and params.buffers:
        bn = caches["bn"]
        g = bn.group_size
        unbiased = bn.var.mean(axis=0) * g / (g - 1)
        params.buffers["bn.running_mean"] *= BN_RUNNING_MOMENTUM
        params.buffers["bn.running_mean"] += (1 - BN_RUNNING_MOMENTUM) * bn.mean.mean(axis=0)
        params.buffers["bn.running_var"] *= BN_RUNNING_MOMENTUM
        params.buffers["bn.running_var"] += (1 - BN_RUNNING_MOMENTUM) * unbiased
    return nx.check_finite(h, "encoder output"), caches


def _backward_raw(params: EncoderParams, caches, dh: np.ndarray) -> dict[str, np.ndarray]:
    g = {}
    dh, g["proj3.W"], g["proj3.b"] = nx.affine_backward(caches["proj3"], dh)
    dh = nx.relu_backward(caches["relu4"], dh)
    dh, g["proj2.W"], g["proj2.b"] = nx.affine_backward(caches["proj2"], dh)
    dh = nx.relu_backward(caches["relu3"], dh)
    dh, g["bn.gamma"], g["bn.beta"] = nx.group_bn_backward(caches["bn"], dh)
    dh, g["proj1.W"], g["proj1.b"] = nx.affine_backward(caches["proj1"], dh)
    dh = nx.relu_backward(caches["relu2"], dh)
    dh, g["fc2.W"], g["fc2.b"] = nx.affine_backward(caches["fc2"], dh)
    dh = nx.relu_backward(caches["relu1"], dh)
    _, g["fc1.W"], g["fc1.b"] = nx.affine_backward(caches["fc1"], dh)
    return g


@dataclass
class EncodeCache:
    layers: dict
    norm: tuple | None
    n_views: int = 1
    groups: int = 1


def encode(params: EncoderParams, batch: np.ndarray, bn_groups: int = 1, shuffle: RngStream | None = None,
           normalize: bool = True, update_running: bool = False):
    """Encode a batch of flattened images. Returns ``(z, cache)``; rows of ``z`` are
    unit-norm unless ``normalize=False``."""
    h, caches = _forward(params, np.asarray(batch, dtype=np.float64), bn_groups, shuffle, update_running)
    if not normalize:
        return h, EncodeCache(caches, None)
    z, ncache = nx.l2_normalize(h)
    return z, EncodeCache(caches, ncache)


def encode_backward(params: EncoderParams, cache: EncodeCache, dz: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a downstream scalar wrt every parameter tensor."""
    if cache.norm is not None:
        dz = nx.l2_normalize_backward(cache.norm, dz)
    if cache.n_views > 1:
        dz = _unsplit_mean_grad(dz, cache.n_views, cache.groups)
    return _backward_raw(params, cache.layers, dz)


def _interleave(views: list[np.ndarray], groups: int) -> np.ndarray:
    # [n, G, B/G, D] -> [G, n, B/G, D]: each BN group holds all views of its own images
    n = len(views)
    B, D = views[0].shape
    stacked = np.stack(views).reshape(n, groups, B // groups, D)
    return stacked.transpose(1, 0, 2, 3).reshape(n * B, D)


def _split_mean(h: np.ndarray, n: int, groups: int) -> np.ndarray:
    nB, d = h.shape
    B = nB // n
    return h.reshape(groups, n, B // groups, d).mean(axis=1).reshape(B, d)


def _unsplit_mean_grad(dm: np.ndarray, n: int, groups: int) -> np.ndarray:
    B, d = dm.shape
    g = np.broadcast_to((dm / n).reshape(groups, 1, B // groups, d), (groups, n, B // groups, d))
    return g.reshape(n * B, d)


def mean_encoding(params: EncoderParams, views: list[np.ndarray], bn_groups: int = 1,
                  shuffle: RngStream | None = None, normalize: bool = True, update_running: bool = False):
    """Jointly forward ``n`` view batches, average the un-normalized outputs per image,
    then l2-normalize.  BN groups keep ``bn_groups`` count, so each group sees ``n``x
    as many rows."""
    if not views:
        raise ConfigError("mean_encoding needs at least one view batch")
    shapes = {np.shape(v) for v in views}
    if len(shapes) != 1:
        raise nx.ShapeError(f"view batches differ in shape: {sorted(shapes)}")
    n = len(views)
    B = views[0].shape[0]
    if bn_groups <= 0 or B % bn_groups:
        raise ConfigError(f"batch {B} not divisible by bn_groups {bn_groups}")
    joint = _interleave([np.asarray(v, dtype=np.float64) for v in views], bn_groups)
    h, caches = _forward(params, joint, bn_groups, shuffle, update_running)
    m = _split_mean(h, n, bn_groups)
    if not normalize:
        return m, EncodeCache(caches, None, n, bn_groups)
    z, ncache = nx.l2_normalize(m)
    return z, EncodeCache(caches, ncache, n, bn_groups)


# ---------------------------------------------------------------------------
# source / target pair
# ---------------------------------------------------------------------------


@dataclass
class EncoderPair:
    source: EncoderParams
    target: EncoderParams
    momentum: float = 0.99
    source_groups: int = 8
    target_groups: int = 8
    target_shuffle: bool = True

    def __post_init__(self):
        if not 0 <= self.momentum <= 1:
            raise ConfigError(f"momentum {self.momentum} outside [0, 1]")
        if self.source.shapes() != self.target.shapes():
            raise IntegrityError("source and target parameter shapes differ")

    @classmethod
    def from_source(cls, source: EncoderParams, **kw) -> "EncoderPair":
        return cls(source, source.copy(), **kw)


def momentum_update(pair: EncoderPair) -> EncoderPair:
    """target <- m * target + (1 - m) * source, for weights and BN buffers alike.

    Updates ``pair.target`` in place and returns the pair.
    """
    m = pair.momentum
    src, tgt = pair.source, pair.target
    for store_s, store_t in ((src.tensors, tgt.tensors), (src.buffers, tgt.buffers)):
        if store_s.keys() != store_t.keys():
            raise IntegrityError("source/target parameter names differ")
        for k, theta in store_s.items():
            t = store_t[k]
            if t.shape != theta.shape:
                raise IntegrityError(f"shape drift in {k}: target {t.shape} vs source {theta.shape}")
            t *= m
            t += (1.0 - m) * theta
    return pair


def stop_gradient_check(pair: EncoderPair, loss_step) -> bool:
    """Run ``loss_step(pair)`` (one optimizer step, before any momentum update) and
    report whether the target parameters stayed bit-identical."""
    before = {k: v.copy() for k, v in pair.target.tensors.items()}
    loss_step(pair)
    return all(np.array_equal(before[k], pair.target.tensors[k]) for k in before)


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

MAGIC = b"ASYMCKPT"
VERSION = 1


def save_checkpoint(path, pair: EncoderPair, config_text: str = "") -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(pair, config_text))


def checkpoint_bytes(pair: EncoderPair, config_text: str = "") -> bytes:
    entries = []
    for prefix, p in (("source", pair.source), ("target", pair.target)):
        for kind, store in (("t", p.tensors), ("b", p.buffers)):
            for k in sorted(store):
                entries.append((f"{prefix}.{kind}.{k}", store[k]))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(entries)))
    buf.write(struct.pack("<dII?", pair.momentum, pair.source_groups, pair.target_groups, pair.target_shuffle))
    for name, arr in entries:
        enc = name.encode("utf-8")
        buf.write(struct.pack("<H", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    cfg = config_text.encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    return buf.getvalue()


def load_checkpoint(path) -> tuple[EncoderPair, str]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def parse_checkpoint(data: bytes) -> tuple[EncoderPair, str]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise IntegrityError(f"checkpoint truncated at byte {pos}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(8)) != MAGIC:
        raise IntegrityError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    momentum, sg, tg, shuf = struct.unpack("<dII?", take(17))
    stores = {("source", "t"): {}, ("source", "b"): {}, ("target", "t"): {}, ("target", "b"): {}}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(bytes(take(8 * size)), dtype="<f8").reshape(shape).astype(np.float64)
        side, kind, key = name.split(".", 2)
        stores[(side, kind)][key] = arr
    (clen,) = struct.unpack("<I", take(4))
    config_text = bytes(take(clen)).decode("utf-8")
    pair = EncoderPair(EncoderParams(stores[("source", "t")], stores[("source", "b")]),
                       EncoderParams(stores[("target", "t")], stores[("target", "b")]),
                       momentum, sg, tg, shuf)
    return pair, config_text


def clone_pair(pair: EncoderPair) -> EncoderPair:
    return copy.deepcopy(pair)
