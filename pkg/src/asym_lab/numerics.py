"""Dense float64 layer primitives with exact backward passes.

Every forward returns ``(out, cache)``; every backward consumes the cache and an
upstream gradient.  Arrays are plain ``numpy.ndarray`` of dtype float64, rows are
batch items.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np


class LabError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LabError, ValueError):
    pass


class ConfigError(LabError, ValueError):
    pass


class DegenerateInputError(LabError, ValueError):
    pass


class OracleError(LabError, ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# Deterministic random streams
# ---------------------------------------------------------------------------


def _derive_key(seed: int, path: tuple[str, ...]) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little", signed=False))
    for label in path:
        enc = label.encode("utf-8")
        h.update(len(enc).to_bytes(4, "little"))
        h.update(enc)
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """Counter-based random stream (Philox) with labelled substreams.

    ``child(label)`` derives an independent stream whose key depends only on the
    root seed and the label path, so consuming draws in one substream never shifts
    the draws seen by another.
    """

    def __init__(self, seed: int, path: Iterable[str] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(str(l) for l in path)
        self._bitgen = np.random.Philox(key=_derive_key(self.seed, self.path))
        self.gen = np.random.Generator(self._bitgen)

    def child(self, *labels: str | int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(str(l) for l in labels))

    @property
    def counter(self) -> int:
        ctr = self._bitgen.state["state"]["counter"]
        return int(sum(int(c) << (64 * i) for i, c in enumerate(ctr)))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={'/'.join(self.path)!r}, counter={self.counter})"

    # thin pass-throughs, enough for this package
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def random(self, size=None):
        return self.gen.random(size)


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise DegenerateInputError(f"non-finite value in {where} at index {tuple(bad)}")
    return x


# ---------------------------------------------------------------------------
# l2 normalization
# ---------------------------------------------------------------------------


def l2_normalize(v: np.ndarray, min_norm: float = 1e-12):
    """Scale each row of ``v`` to unit Euclidean norm. Returns ``(out, cache)``."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2:
        raise ShapeError(f"l2_normalize expects [batch, d], got shape {v.shape}")
    # scale before squaring so norms near 1e-160 or 1e160 do not under/overflow
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    small = np.flatnonzero(norms[:, 0] <= min_norm)
    if small.size:
        raise DegenerateInputError(f"row {int(small[0])} has norm {norms[small[0], 0]:.3e} <= {min_norm}")
    out = v / norms
    return out, (out, norms)


def l2_normalize_backward(cache, dout: np.ndarray) -> np.ndarray:
    out, norms = cache
    # d(v/|v|) = (I - u u^T) / |v|
    return (dout - out * np.sum(dout * out, axis=1, keepdims=True)) / norms


# ---------------------------------------------------------------------------
# affine and relu
# ---------------------------------------------------------------------------


def affine_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    """y = x W^T + b with W of shape [out, in]."""
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1 or x.shape[1] != W.shape[1] or b.shape[0] != W.shape[0]:
        raise ShapeError(f"affine shape mismatch: x{tuple(x.shape)} W{tuple(W.shape)} b{tuple(b.shape)}")
    return x @ W.T + b, (x, W)


def affine_backward(cache, dy: np.ndarray):
    x, W = cache
    return dy @ W, dy.T @ x, dy.sum(axis=0)


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(mask, dy: np.ndarray) -> np.ndarray:
    return dy * mask


# ---------------------------------------------------------------------------
# grouped batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BnCache:
    group_size: int
    perm: np.ndarray | None
    xhat: np.ndarray  # permuted order, [G, g, D]
    inv_std: np.ndarray  # [G, 1, D]
    mean: np.ndarray  # [G, D]
    var: np.ndarray  # [G, D]
    gamma: np.ndarray = field(repr=False)


def group_bn_forward(
    x: np.ndarray,
    group_size: int,
    eps: float = 1e-5,
    shuffle: RngStream | None = None,
    gamma: np.ndarray | None = None,
    beta: np.ndarray | None = None,
):
    """Batch normalization with statistics computed within contiguous row groups.

    ``group_size == batch`` is ordinary full-batch BN; smaller groups emulate
    per-device statistics.  With ``shuffle`` the rows are permuted before grouping
    and the outputs are returned in the original order; a single group has nothing
    to shuffle between, so the permutation is skipped and the result is bitwise
    the unshuffled one.
    """
    B, D = x.shape
    if group_size <= 0 or B % group_size:
        raise ConfigError(f"group_size {group_size} does not divide batch {B}")
    if group_size < 2:
        raise DegenerateInputError("batch-norm group of size 1 has undefined variance")
    if eps <= 0:
        raise ConfigError("eps must be > 0")
    gamma = np.ones(D) if gamma is None else gamma
    beta = np.zeros(D) if beta is None else beta

    perm = shuffle.permutation(B) if shuffle is not None and group_size < B else None
    xs = x[perm] if perm is not None else x
    xg = xs.reshape(B // group_size, group_size, D)
    mean = xg.mean(axis=1)
    centered = xg - mean[:, None, :]
    var = np.mean(centered * centered, axis=1)
    inv_std = 1.0 / np.sqrt(var + eps)[:, None, :]
    xhat = centered * inv_std
    y = (xhat * gamma + beta).reshape(B, D)
    if perm is not None:
        out = np.empty_like(y)
        out[perm] = y
        y = out
    return y, BnCache(group_size, perm, xhat, inv_std, mean, var, gamma)


def group_bn_backward(cache: BnCache, dy: np.ndarray):
    """Returns ``(dx, dgamma, dbeta)``."""
    B, D = dy.shape
    g = cache.group_size
    dys = dy[cache.perm] if cache.perm is not None else dy
    dyg = dys.reshape(B // g, g, D)
    xhat = cache.xhat
    dgamma = np.sum(dyg * xhat, axis=(0, 1))
    dbeta = dyg.sum(axis=(0, 1))
    dxhat = dyg * cache.gamma
    dx = cache.inv_std * (dxhat - dxhat.mean(axis=1, keepdims=True)
                          - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True))
    dx = dx.reshape(B, D)
    if cache.perm is not None:
        out = np.empty_like(dx)
        out[cache.perm] = dx
        dx = out
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one element at a time."""
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            idx = tuple(int(k) for k in np.unravel_index(i, x.shape))
            raise OracleError(f"non-finite evaluation at element {idx}: f(+h)={fp}, f(-h)={fm}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8, rel_floor: float = 0.0) -> float:
    """max |a-b| / max(|a|+|b|, floor), the usual gradient-check metric.

    ``rel_floor`` raises the floor to ``rel_floor * max(|a|, |b|)`` so entries far
    below the gradient's own scale are judged on an absolute basis, where central
    differences are dominated by rounding.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if rel_floor:
        floor = max(floor, rel_floor * float(max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0))))
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)))
