"""Monte-Carlo checks of the additive-noise analysis of the last linear layer.

Features follow ``f = f~ + e`` (source) and ``f' = f~ + e'`` (target) with Gaussian
noise.  With the softmax coefficients frozen, the expected weight update is
``(1/tau) W' Sigma_f`` and the residual ``R = -(1/N) sum_i e^_i (f_mean + e_i)^T``
carries all of the intra-image noise, where ``e^_i = sum_j alpha_ij e'_j - e'_i``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .numerics import ConfigError, LabError, RngStream
from .objective import last_layer_grad_flow

CHUNK = 20_000


class ModelError(LabError, ValueError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    f_mean: np.ndarray
    f_cov: np.ndarray
    e_mean: np.ndarray
    e_cov: np.ndarray
    et_mean: np.ndarray
    et_cov: np.ndarray

    def __post_init__(self):
        h = np.shape(self.f_mean)[0]
        for name in ("f_cov", "e_cov", "et_cov"):
            c = np.asarray(getattr(self, name), dtype=np.float64)
            if c.shape != (h, h):
                raise ModelError(f"{name} has shape {c.shape}, expected {(h, h)}")
            if not np.allclose(c, c.T, atol=1e-12):
                raise ModelError(f"{name} is not symmetric")
        for name in ("e_mean", "et_mean"):
            if np.shape(getattr(self, name)) != (h,):
                raise ModelError(f"{name} must have shape {(h,)}")

    @property
    def dim(self) -> int:
        return int(np.shape(self.f_mean)[0])

    def scaled(self, target_cov: float = 1.0, target_mean: float = 1.0, source_cov: float = 1.0,
               source_mean: float = 1.0, feature_mean: float = 1.0) -> "NoiseModel":
        return replace(self, et_cov=self.et_cov * target_cov, et_mean=self.et_mean * target_mean,
                       e_cov=self.e_cov * source_cov, e_mean=self.e_mean * source_mean,
                       f_mean=self.f_mean * feature_mean)

    @classmethod
    def isotropic(cls, h: int, f_mean=0.0, f_var=1.0, e_mean=0.0, e_var=0.0, et_mean=0.0, et_var=0.0):
        def vec(v):
            return np.broadcast_to(np.asarray(v, dtype=np.float64), (h,)).copy()
        eye = np.eye(h)
        return cls(vec(f_mean), f_var * eye, vec(e_mean), e_var * eye, vec(et_mean), et_var * eye)

    @classmethod
    def random(cls, h: int, rng: RngStream, mean_scale: float = 1.0, cov_scale: float = 0.5) -> "NoiseModel":
        def psd(label):
            A = rng.child(label).normal(size=(h, h)) / np.sqrt(h)
            return cov_scale * (A @ A.T)
        return cls(rng.child("f_mean").normal(0, mean_scale, h), psd("f_cov"),
                   rng.child("e_mean").normal(0, mean_scale / 2, h), psd("e_cov"),
                   rng.child("et_mean").normal(0, mean_scale / 2, h), psd("et_cov"))


def psd_factor(cov: np.ndarray) -> np.ndarray:
    """Lower factor L with L L^T = cov (Cholesky, with diagonal jitter on failure)."""
    cov = np.asarray(cov, dtype=np.float64)
    if not cov.any():
        return np.zeros_like(cov)
    scale = float(np.max(np.abs(np.diag(cov)))) or 1.0
    for jitter in (0.0, 1e-12, 1e-10, 1e-8):
        try:
            return np.linalg.cholesky(cov + jitter * scale * np.eye(cov.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise ModelError("covariance is not positive semi-definite even after jitter")


def _gauss(mean, factor, rng: RngStream, shape) -> np.ndarray:
    h = mean.shape[0]
    return mean + rng.normal(size=tuple(shape) + (h,)) @ factor.T


@dataclass
class _Factors:
    f: np.ndarray
    e: np.ndarray
    et: np.ndarray


def _factors(model: NoiseModel) -> _Factors:
    return _Factors(psd_factor(model.f_cov), psd_factor(model.e_cov), psd_factor(model.et_cov))


def sample_features(model: NoiseModel, N: int, K: int, rng: RngStream, trials: int | None = None,
                    factors: _Factors | None = None):
    """Draw ``(F, F_t, F_neg, F_clean)``.

    Each image gets one clean feature; source and target noise are independent.
    Negatives are further images (fresh clean features) seen through the target.
    With ``trials`` a leading trial axis is added to every array.
    """
    fac = factors or _factors(model)
    lead = () if trials is None else (trials,)
    mf, me, met = (np.asarray(a, dtype=np.float64) for a in (model.f_mean, model.e_mean, model.et_mean))
    clean = _gauss(mf, fac.f, rng.child("clean"), lead + (N,))
    F = clean + _gauss(me, fac.e, rng.child("source_noise"), lead + (N,))
    Ft = clean + _gauss(met, fac.et, rng.child("target_noise"), lead + (N,))
    neg_clean = _gauss(mf, fac.f, rng.child("neg_clean"), lead + (N, K))
    Fneg = neg_clean + _gauss(met, fac.et, rng.child("neg_noise"), lead + (N, K))
    return F, Ft, Fneg, clean


def _check_alpha(alpha: np.ndarray) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha < 0):
        raise ConfigError("alpha entries must be >= 0")
    sums = alpha.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise ConfigError(f"alpha rows must sum to 1, got {np.atleast_1d(sums)[:4]}")
    return alpha


def hat_noise_stats(alpha: np.ndarray, target_cov: np.ndarray):
    """Mean and covariance of e^ = sum_j alpha_j e'_j - e'_i: (0, (1 + sum alpha^2) Sigma')."""
    alpha = _check_alpha(alpha)
    if alpha.ndim != 1:
        raise ConfigError("hat_noise_stats takes one row of alpha")
    cov = (1.0 + float(np.sum(alpha ** 2))) * np.asarray(target_cov, dtype=np.float64)
    return np.zeros(cov.shape[0]), cov


def uniform_alpha(K: int) -> np.ndarray:
    return np.full(K, 1.0 / K)


def one_hot_alpha(K: int, j: int = 0) -> np.ndarray:
    a = np.zeros(K)
    a[j] = 1.0
    return a


@dataclass
class TheoryCheckResult:
    """Outcome of one Monte-Carlo comparison.

    ``ci_halfwidth`` is one standard error of the empirical statistic (normal
    approximation); for matrix statistics it is the root-sum-square of the
    element-wise standard errors, and ``abs_error`` is the Frobenius norm of the
    difference.  A check passes when ``abs_error < max(rel_tol * |predicted|,
    3 * ci_halfwidth)``.
    """
    name: str
    empirical: float | list
    predicted: float | list
    abs_error: float
    rel_error: float
    trials: int
    ci_halfwidth: float
    rel_tol: float
    params: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        scale = float(np.linalg.norm(np.asarray(self.predicted, dtype=np.float64)))
        return self.abs_error < max(self.rel_tol * scale, 3.0 * self.ci_halfwidth)

    def to_json(self) -> str:
        d = asdict(self)
        d["passed"] = self.passed
        return json.dumps(d, sort_keys=True, default=float)


def _finish(name, emp, se, pred, trials, rel_tol, params) -> TheoryCheckResult:
    emp = np.asarray(emp, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    abs_err = float(np.linalg.norm(emp - pred))
    scale = float(np.linalg.norm(pred))
    rel = abs_err / scale if scale > 0 else math.inf if abs_err > 0 else 0.0
    ci = float(np.sqrt(np.sum(np.asarray(se) ** 2)))
    tolist = (lambda a: a.tolist()) if emp.ndim else float
    return TheoryCheckResult(name, tolist(emp), tolist(pred), abs_err, rel, trials, ci, rel_tol, params)


def _grad_flow_trials(W_t, F, Ft, Fneg, alpha, tau):
    """Batched ``last_layer_grad_flow`` over a leading trial axis."""
    T, N, h = F.shape
    a = np.broadcast_to(alpha, (N, Fneg.shape[2])) if alpha.ndim == 1 else alpha
    diff = np.einsum("nk,tnkh->tnh", a, Fneg) - a.sum(axis=1)[None, :, None] * Ft
    M = np.einsum("tnh,tng->thg", diff, F)
    return np.einsum("dh,thg->tdg", W_t, M) / (tau * N)


class _Moments:
    """Streaming sums for mean / standard error with chunked accumulation."""

    def __init__(self):
        self.n = 0
        self.s1 = 0.0
        self.s2 = 0.0

    def add(self, x: np.ndarray):
        # numpy reduces each chunk pairwise; chunks are combined in a fixed order
        self.n += x.shape[0]
        self.s1 = self.s1 + x.sum(axis=0)
        self.s2 = self.s2 + (x * x).sum(axis=0)

    @property
    def mean(self):
        return self.s1 / self.n

    @property
    def se(self):
        var = np.maximum(self.s2 / self.n - self.mean ** 2, 0.0)
        return np.sqrt(var / self.n)


def empirical_weight_update(W_t: np.ndarray, model: NoiseModel, alpha: np.ndarray, tau: float, N: int,
                            trials: int, rng: RngStream):
    """Mean and standard error of W_dot = -dL/dW over ``trials`` draws (alpha frozen)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    K = alpha.shape[-1]
    fac = _factors(model)
    acc = _Moments()
    for c, start in enumerate(range(0, trials, CHUNK)):
        t = min(CHUNK, trials - start)
        F, Ft, Fneg, _ = sample_features(model, N, K, rng.child("chunk", c), trials=t, factors=fac)
        acc.add(-_grad_flow_trials(W_t, F, Ft, Fneg, alpha, tau))
    return acc.mean, acc.se


def expected_grad_check(W_t: np.ndarray, model: NoiseModel, alpha_fixed: np.ndarray, tau: float, N: int,
                        trials: int, rng: RngStream, rel_tol: float = 0.03) -> TheoryCheckResult:
    """Compare the Monte-Carlo mean of W_dot with (1/tau) W' Sigma_f."""
    if trials < 100:
        raise ConfigError(f"need at least 100 trials, got {trials}")
    alpha_fixed = _check_alpha(alpha_fixed)
    mean, se = empirical_weight_update(W_t, model, alpha_fixed, tau, N, trials, rng)
    pred = W_t @ model.f_cov / tau
    return _finish("expected_grad", mean, se, pred, trials, rel_tol, {"tau": tau, "N": N})


def mean_shift(a: TheoryCheckResult, b: TheoryCheckResult) -> tuple[float, float]:
    """Frobenius size of the change between two empirical means and its standard error."""
    d = float(np.linalg.norm(np.asarray(a.empirical) - np.asarray(b.empirical)))
    return d, math.hypot(a.ci_halfwidth, b.ci_halfwidth)


def predicted_tr_r_variance(model: NoiseModel, alpha: np.ndarray, N: int, formula: str = "stated") -> float:
    """Variance of tr R.

    ``formula="stated"``: tr[S'(f f^T + e e^T + Sigma)] / N with S' the row-averaged
    hat covariance.  ``formula="exact"``: tr[S'((f + e)(f + e)^T + Sigma)] / N, i.e.
    including the cross terms between feature mean and source-noise mean, which
    the first form drops.
    """
    alpha = _check_alpha(alpha)
    rows = np.atleast_2d(alpha)
    factor = float(np.mean(1.0 + np.sum(rows ** 2, axis=1)))
    S_hat = factor * model.et_cov
    f, e = model.f_mean, model.e_mean
    if formula == "stated":
        M = np.outer(f, f) + np.outer(e, e) + model.e_cov
    elif formula == "exact":
        u = f + e
        M = np.outer(u, u) + model.e_cov
    else:
        raise ConfigError(f"unknown formula {formula!r}")
    return float(np.trace(S_hat @ M)) / N


def sample_tr_r(model: NoiseModel, alpha: np.ndarray, N: int, trials: int, rng: RngStream) -> np.ndarray:
    """``trials`` independent draws of tr R."""
    alpha = np.asarray(alpha, dtype=np.float64)
    K = alpha.shape[-1]
    a = np.broadcast_to(alpha, (N, K))
    fac = _factors(model)
    out = np.empty(trials)
    for c, start in enumerate(range(0, trials, CHUNK)):
        t = min(CHUNK, trials - start)
        r = rng.child("chunk", c)
        e = _gauss(model.e_mean, fac.e, r.child("source_noise"), (t, N))
        et_pos = _gauss(model.et_mean, fac.et, r.child("target_noise"), (t, N))
        et_neg = _gauss(model.et_mean, fac.et, r.child("neg_noise"), (t, N, K))
        e_hat = np.einsum("nk,tnkh->tnh", a, et_neg) - et_pos
        out[start:start + t] = -np.einsum("tnh,tnh->t", e_hat, model.f_mean + e) / N
    return out


def tr_r_variance_check(model: NoiseModel, alpha_fixed: np.ndarray, N: int, trials: int, rng: RngStream,
                        rel_tol: float = 0.05, formula: str = "stated") -> TheoryCheckResult:
    """Compare the sample variance of tr R with the closed form."""
    if trials < 100:
        raise ConfigError(f"need at least 100 trials, got {trials}")
    alpha_fixed = _check_alpha(alpha_fixed)
    x = sample_tr_r(model, alpha_fixed, N, trials, rng)
    c = x - x.mean()
    sq = c * c
    emp = float(sq.mean())
    se = float(sq.std() / np.sqrt(trials))
    pred = predicted_tr_r_variance(model, alpha_fixed, N, formula)
    return _finish(f"tr_r_variance[{formula}]", emp, se, pred, trials, rel_tol, {"N": N, "formula": formula})


def coupled_expected_grad(W: np.ndarray, W_t: np.ndarray, model: NoiseModel, tau: float, N: int, K: int,
                          trials: int, rng: RngStream, epsilon: float = 0.0):
    """Mean W_dot when alpha is the live softmax of the linear-head similarities.

    Diagnostic only: once alpha depends on the features the frozen-alpha
    prediction (1/tau) W' Sigma_f is not expected to hold.
    """
    from .objective import LossConfig, linear_head_alpha

    cfg = LossConfig(tau, epsilon)
    fac = _factors(model)
    acc = _Moments()
    for c, start in enumerate(range(0, trials, CHUNK)):
        t = min(CHUNK, trials - start)
        F, Ft, Fneg, _ = sample_features(model, N, K, rng.child("chunk", c), trials=t, factors=fac)
        g = np.stack([-last_layer_grad_flow(W_t, F[k], Ft[k], Fneg[k],
                                            linear_head_alpha(W, W_t, F[k], Ft[k], Fneg[k], cfg), tau)
                      for k in range(t)])
        acc.add(g)
    return acc.mean, acc.se, W_t @ model.f_cov / tau


def sigma_target_sweep(model: NoiseModel, scales, alpha: np.ndarray, W_t: np.ndarray, tau: float, N: int,
                       trials: int, rng: RngStream, formula: str = "stated") -> list[dict]:
    """One row per target-covariance scale: the gradient-mean and tr R variance checks."""
    rows = []
    for s in scales:
        m = model.scaled(target_cov=float(s))
        g = expected_grad_check(W_t, m, alpha, tau, N, trials, rng.child("grad", repr(float(s))))
        v = tr_r_variance_check(m, alpha, N, trials, rng.child("trr", repr(float(s))), formula=formula)
        rows.append({
            "sigma_target_scale": float(s),
            "grad_mean_rel_error": g.rel_error,
            "grad_mean_pass": g.passed,
            "tr_r_var_empirical": v.empirical,
            "tr_r_var_predicted": v.predicted,
            "tr_r_var_rel_error": v.rel_error,
            "tr_r_var_pass": v.passed,
            "pass": g.passed and v.passed,
        })
    return rows
