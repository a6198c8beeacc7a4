"""Source/target pre-training loop: InfoNCE against a memory bank, SGD on the
source only, EMA update of the target."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..augment import STRONGER, WEAKER, Recipe, augment_batch, resize, with_strength
from ..encoder import (EncoderPair, clone_pair, encode, encode_backward, init_params,
                       mean_encoding, momentum_update, save_checkpoint)
from ..numerics import LabError, RngStream
from ..objective import MemoryBank, bank_enqueue, info_nce_with_grad
from ..variance import cross_image_variance
from .config import TrainConfig, on_source, on_target
from .data import Dataset

log = logging.getLogger(__name__)

MULTICROP_STANDARD_SCALE = (0.14, 1.0)


class TrainingDiverged(LabError):
    def __init__(self, msg, last_good: EncoderPair):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    loss: float
    lr: float
    cross_var: float
    bank_fill: int
    wall_time: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class SideSpec:
    recipe: Recipe
    n_views: int
    small_m: int
    bn_groups: int
    shuffle: bool
    standard_scale: tuple | None


@dataclass
class TrainResult:
    pair: EncoderPair
    metrics: list[MetricsRecord]
    config: TrainConfig
    snapshots: list = field(default_factory=list)

    def metrics_text(self) -> str:
        return "".join(m.to_json() + "\n" for m in self.metrics)


def side_spec(cfg: TrainConfig, side: str) -> SideSpec:
    d = cfg.design
    on = on_source if side == "source" else on_target
    recipe = cfg.source_recipe if side == "source" else cfg.target_recipe
    if on(d.weaker_side):
        recipe = with_strength(recipe, WEAKER)
    if on(d.stronger_side):
        recipe = with_strength(recipe, STRONGER)
    if on(d.scalemix_side):
        recipe = recipe.replace(scalemix=True)
    mc = on(d.multicrop_side)
    return SideSpec(
        recipe=recipe,
        n_views=d.mean_enc_n if on(d.mean_enc_side) else 1,
        small_m=d.multicrop_m if mc else 0,
        bn_groups=1 if on(d.syncbn_side) else cfg.bn_groups,
        shuffle=side == "target" and cfg.target_shuffle,
        standard_scale=MULTICROP_STANDARD_SCALE if mc else None,
    )


def cosine_lr(base: float, step: int, total: int, cosine: bool = True) -> float:
    """Half-cycle cosine decay from ``base`` towards 0 over ``total`` steps."""
    if not cosine or total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


def _flat(x: np.ndarray, size: int) -> np.ndarray:
    if x.shape[-1] != size:
        x = resize(x, size)
    return x.reshape(x.shape[0], -1)


def make_views(x: np.ndarray, spec: SideSpec, rng: RngStream, size: int):
    """Standard views (``n_views`` of them) and small views, flattened for the encoder."""
    std, small = [], []
    for k in range(spec.n_views):
        recipe = spec.recipe.replace(multicrop_m=spec.small_m if k == 0 else 0)
        vb = augment_batch(x, recipe, rng.child("view", k), standard_scale=spec.standard_scale)
        std.append(_flat(vb.standard, size))
        small.extend(_flat(s, size) for s in vb.small)
    return std, small


def _encode_std(params, views, groups, shuffle):
    if len(views) == 1:
        return encode(params, views[0], groups, shuffle, update_running=True)
    return mean_encoding(params, views, groups, shuffle, update_running=True)


def loss_terms(cfg: TrainConfig, m: int) -> list[tuple[str, str, str, float]]:
    """(source key, target key, bank, weight) for every InfoNCE term of one step."""
    placement = cfg.design.multicrop_side
    if m == 0 or placement == "neither":
        return [("std", "std", "main", 1.0)]
    if placement == "source":
        return [("std", "std", "main", 1.0)] + [(f"small{k}", "std", "main", 1.0 / m) for k in range(m)]
    if placement == "target":
        return [("std", "std", "main", 1.0)] + [("std", f"small{k}", "small", 1.0 / m) for k in range(m)]
    return [("std", "std", "main", 0.5)] + [(f"small{k}", f"small{k}", "small", 0.5 / m) for k in range(m)]


def init_pair(cfg: TrainConfig, in_dim: int, rng: RngStream) -> EncoderPair:
    src = init_params(rng.child("init"), in_dim, cfg.hidden, cfg.proj_hidden, cfg.out_dim)
    return EncoderPair.from_source(src, momentum=cfg.ema_momentum, source_groups=cfg.bn_groups,
                                   target_groups=cfg.bn_groups, target_shuffle=cfg.target_shuffle)


class Trainer:
    """Holds the mutable training state; ``step`` runs one iteration."""

    def __init__(self, cfg: TrainConfig, dataset: Dataset, pair: EncoderPair | None = None):
        self.cfg = cfg.validate()
        self.data = dataset
        self.size = dataset.image_size
        self.rng = RngStream(cfg.seed, ("train",))
        in_dim = 3 * self.size * self.size
        self.pair = pair or init_pair(cfg, in_dim, self.rng)
        self.src_spec = side_spec(cfg, "source")
        self.tgt_spec = side_spec(cfg, "target")
        self.pair.source_groups = self.src_spec.bn_groups
        self.pair.target_groups = self.tgt_spec.bn_groups
        self.banks = {"main": MemoryBank.random(cfg.bank_size, cfg.out_dim, self.rng.child("bank", "main"))}
        m = self.src_spec.small_m or self.tgt_spec.small_m
        self.terms = loss_terms(cfg, m)
        if any(b == "small" for _, _, b, _ in self.terms):
            self.banks["small"] = MemoryBank.random(cfg.small_bank_size, cfg.out_dim,
                                                    self.rng.child("bank", "small"))
        self.velocity = {k: np.zeros_like(v) for k, v in self.pair.source.tensors.items()}
        n = dataset.train_images.shape[0]
        self.steps_per_epoch = n // cfg.batch_size
        total = self.steps_per_epoch * cfg.epochs
        self.total_steps = min(total, cfg.max_steps) if cfg.max_steps else total
        self.step_index = 0
        self._order = None

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, pos = divmod(step, self.steps_per_epoch)
        if pos == 0 or self._order is None:
            self._order = self.rng.child("epoch", epoch).permutation(self.data.train_images.shape[0])
        b = self.cfg.batch_size
        return self._order[pos * b:(pos + 1) * b]

    def forward_backward(self, x: np.ndarray, step_rng: RngStream):
        """Loss, source-parameter gradients, target encodings and source std encodings."""
        src, tgt = self.pair.source, self.pair.target
        s_std, s_small = make_views(x, self.src_spec, step_rng.child("source"), self.size)
        t_std, t_small = make_views(x, self.tgt_spec, step_rng.child("target"), self.size)

        s_enc = {"std": _encode_std(src, s_std, self.src_spec.bn_groups, None)}
        for k, v in enumerate(s_small):
            s_enc[f"small{k}"] = encode(src, v, self.src_spec.bn_groups, None, update_running=True)
        shuf = step_rng.child("shuffle") if self.tgt_spec.shuffle else None
        t_z = {"std": _encode_std(tgt, t_std, self.tgt_spec.bn_groups,
                                  shuf.child("std") if shuf else None)[0]}
        for k, v in enumerate(t_small):
            t_z[f"small{k}"] = encode(tgt, v, self.tgt_spec.bn_groups,
                                      shuf.child("small", k) if shuf else None, update_running=True)[0]

        loss = 0.0
        dz = {}
        for skey, tkey, bank, w in self.terms:
            z = s_enc[skey][0]
            li, gi = info_nce_with_grad(z, t_z[tkey], self.banks[bank], self.cfg.loss)
            loss += w * li
            dz[skey] = dz.get(skey, 0.0) + w * gi
        grads = None
        for skey, g in dz.items():
            gk = encode_backward(src, s_enc[skey][1], g)
            grads = gk if grads is None else {k: grads[k] + gk[k] for k in grads}
        return loss, grads, t_z, s_enc["std"][0]

    def sgd_update(self, grads, lr: float):
        cfg = self.cfg
        for k, p in self.pair.source.tensors.items():
            g = grads[k] + cfg.weight_decay * p
            v = self.velocity[k]
            v *= cfg.sgd_momentum
            v += g
            p -= lr * v

    def step(self) -> MetricsRecord:
        t = self.step_index
        t0 = time.perf_counter()
        idx = self.batch_indices(t)
        x = self.data.train_images[idx]
        step_rng = self.rng.child("step", t)
        loss, grads, t_z, z_s = self.forward_backward(x, step_rng)
        if not math.isfinite(loss):
            # nothing has been mutated yet, so the current pair is the last good one
            raise TrainingDiverged(f"non-finite loss at step {t}", clone_pair(self.pair))
        lr = cosine_lr(self.cfg.lr, t, self.total_steps, self.cfg.cosine)
        self.sgd_update(grads, lr)
        momentum_update(self.pair)
        bank_enqueue(self.banks["main"], t_z["std"])
        if "small" in self.banks and "small0" in t_z:
            bank_enqueue(self.banks["small"], t_z["small0"])
        self.step_index += 1
        wall = time.perf_counter() - t0 if self.cfg.log_wall_time else None
        return MetricsRecord(t, t // self.steps_per_epoch, loss, lr, cross_image_variance(z_s),
                             self.banks["main"].fill, wall)

    def run(self, log_fh=None, snapshot_every: int = 0) -> TrainResult:
        metrics, snaps = [], []
        if snapshot_every:
            snaps.append((0, self.pair.source.copy(), self.pair.target.copy()))
        while self.step_index < self.total_steps:
            rec = self.step()
            metrics.append(rec)
            if log_fh is not None:
                log_fh.write(rec.to_json() + "\n")
            if snapshot_every and self.step_index % snapshot_every == 0:
                snaps.append((self.step_index, self.pair.source.copy(), self.pair.target.copy()))
        return TrainResult(self.pair, metrics, self.cfg, snaps)


def train(cfg: TrainConfig, dataset: Dataset, metrics_path=None, checkpoint_path=None,
          snapshot_every: int = 0) -> TrainResult:
    """Run a full pre-training job; optionally write the metrics log and checkpoint."""
    trainer = Trainer(cfg, dataset)
    fh = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        result = trainer.run(fh, snapshot_every)
    except TrainingDiverged as e:
        if checkpoint_path:
            save_checkpoint(checkpoint_path, e.last_good, cfg.to_text())
        raise
    finally:
        if fh:
            fh.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, result.pair, cfg.to_text())
    return result
