"""Placement case studies: train one model per (cell, seed), probe it, compare cells."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from ..augment import STRONGER, WEAKER, Recipe, small_view_recipe, with_strength
from ..encoder import EncoderParams
from ..numerics import ConfigError, RngStream
from ..variance import VarianceReport, intra_image_variance
from .config import SIDES, TrainConfig
from .data import Dataset, load_dataset
from .probe import linear_probe
from .train import train

DESIGNS = ("multicrop", "scalemix", "weakeraug", "strongeraug", "syncbn", "meanenc", "ladder")
HIGH_VARIANCE = ("multicrop", "scalemix", "strongeraug")
LOW_VARIANCE = ("weakeraug", "syncbn", "meanenc")
LADDER = ("none", "+multicrop", "+asymbn", "+meanenc")

# ImageNet linear-probe accuracies (%) reported for the same placements; context only.
REFERENCE_ACCURACY = {
    "multicrop": {"neither": 65.8, "source": 69.9, "target": 57.1, "both": 61.7},
    "scalemix": {"neither": 65.8, "source": 67.3, "target": 52.8, "both": 64.8},
    "weakeraug": {"neither": 65.8, "source": 51.0, "target": 67.2, "both": 46.8},
    "strongeraug": {"neither": 65.8, "source": 66.7, "target": 62.2, "both": 66.2},
    "syncbn": {"neither": 65.8, "source": 64.7, "target": 66.5, "both": 66.0},
    # n_s=1, n_t=2 is the only single-side row reported
    "meanenc": {"neither": 65.8, "target": 67.5},
    "ladder": {"none": 65.8, "+multicrop": 69.9, "+asymbn": 70.4, "+meanenc": 71.3},
}

# reference variance v (x1e-4) measured for each design on the trained baseline
REFERENCE_VARIANCE = {"multicrop": 38.0, "scalemix": 29.5, "strongeraug": 19.7, "baseline": 8.5,
                  "weakeraug": 6.9, "meanenc": 4.2}

_TOGGLE = {"multicrop": "multicrop_side", "scalemix": "scalemix_side", "weakeraug": "weaker_side",
           "strongeraug": "stronger_side", "syncbn": "syncbn_side", "meanenc": "mean_enc_side"}


def design_config(base: TrainConfig, design: str, cell: str) -> TrainConfig:
    """Config for one cell: a placement side, or a rung of the composition ladder."""
    if design == "ladder":
        if cell not in LADDER:
            raise ConfigError(f"unknown ladder rung {cell!r}; expected one of {LADDER}")
        cfg = base
        rungs = LADDER[1:LADDER.index(cell) + 1]
        if "+multicrop" in rungs:
            cfg = cfg.with_design(multicrop_side="source")
        if "+asymbn" in rungs:
            cfg = cfg.with_design(syncbn_side="target")
        if "+meanenc" in rungs:
            cfg = cfg.with_design(mean_enc_side="target")
        return cfg
    if design not in _TOGGLE:
        raise ConfigError(f"unknown design {design!r}; expected one of {DESIGNS}")
    if cell not in SIDES:
        raise ConfigError(f"unknown side {cell!r}; expected one of {SIDES}")
    return base.with_design(**{_TOGGLE[design]: cell})


@dataclass
class RunRecord:
    cell: str
    seed: int
    top1: float
    config_hash: str
    final_loss: float


@dataclass
class Comparison:
    better: str
    worse: str
    mean_diff: float
    t: float
    p: float
    n: int

    @property
    def passed(self) -> bool:
        return self.p < 0.05 and self.mean_diff > 0


@dataclass
class StudyReport:
    design: str
    cells: list[str]
    seeds: list[int]
    runs: list[RunRecord]
    comparisons: list[Comparison] = field(default_factory=list)
    variance: dict | None = None

    def cell_stats(self, cell: str) -> tuple[float, float, int]:
        acc = [r.top1 for r in self.runs if r.cell == cell]
        sd = float(np.std(acc, ddof=1)) if len(acc) > 1 else 0.0
        return (float(np.mean(acc)) if acc else float("nan")), sd, len(acc)

    def matrix(self) -> list[dict]:
        ref = REFERENCE_ACCURACY.get(self.design, {})
        rows = []
        for c in self.cells:
            m, sd, n = self.cell_stats(c)
            rows.append({"design": self.design, "cell": c, "mean": m, "sd": sd, "n": n,
                         "reference": ref.get(c)})
        return rows

    def matrix_csv(self) -> str:
        out = io.StringIO()
        w = csv.DictWriter(out, ["design", "cell", "mean", "sd", "n", "reference"], lineterminator="\n")
        w.writeheader()
        for row in self.matrix():
            w.writerow({**row, "reference": "" if row["reference"] is None else row["reference"]})
        return out.getvalue()

    def runs_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["design", "cell", "seed", "top1", "config_hash", "final_loss"])
        for r in sorted(self.runs, key=lambda r: (self.cells.index(r.cell), r.seed)):
            w.writerow([self.design, r.cell, r.seed, repr(r.top1), r.config_hash, repr(r.final_loss)])
        return out.getvalue()

    def to_json(self) -> str:
        return json.dumps({"design": self.design, "cells": self.cells, "seeds": self.seeds,
                           "runs": [asdict(r) for r in self.runs],
                           "comparisons": [{**asdict(c), "passed": c.passed} for c in self.comparisons],
                           "matrix": self.matrix(), "variance": self.variance}, sort_keys=True, indent=1)

    def to_markdown(self) -> str:
        lines = [f"### {self.design}", "", "| cell | mean top-1 | sd | runs | reference (%) |", "|---|---|---|---|---|"]
        for row in self.matrix():
            ref = "" if row["reference"] is None else f"{row['reference']:.1f}"
            lines.append(f"| {row['cell']} | {row['mean']:.4f} | {row['sd']:.4f} | {row['n']} | {ref} |")
        if self.comparisons:
            lines += ["", "| hypothesis | mean diff | t | p (one-sided) | pass |", "|---|---|---|---|---|"]
            for c in self.comparisons:
                lines.append(f"| {c.better} > {c.worse} | {c.mean_diff:+.4f} | {c.t:.3f} | {c.p:.4g} | "
                             f"{'yes' if c.passed else 'no'} |")
        if self.variance:
            lines += ["", f"variance reference v = {self.variance['v']:.6g} (baseline "
                          f"{self.variance.get('baseline_v', float('nan')):.6g})"]
        return "\n".join(lines) + "\n"


def paired_comparison(report: StudyReport, better: str, worse: str) -> Comparison:
    """One-sided paired t-test that ``better`` beats ``worse``, pairing runs by seed."""
    a = {r.seed: r.top1 for r in report.runs if r.cell == better}
    b = {r.seed: r.top1 for r in report.runs if r.cell == worse}
    seeds = sorted(set(a) & set(b))
    x = np.array([a[s] for s in seeds])
    y = np.array([b[s] for s in seeds])
    if len(seeds) < 2:
        return Comparison(better, worse, float(np.mean(x - y)) if seeds else float("nan"), float("nan"), 1.0,
                          len(seeds))
    d = x - y
    if np.ptp(d) <= 1e-12:
        # zero spread (up to rounding of k/n accuracies): the t statistic is
        # undefined; decide on the sign alone
        m = float(d.mean())
        m = 0.0 if abs(m) <= 1e-12 else m
        p = 0.0 if m > 0 else 1.0
        return Comparison(better, worse, m, math.copysign(math.inf, m) if m else 0.0, p, len(seeds))
    res = stats.ttest_rel(x, y, alternative="greater")
    return Comparison(better, worse, float(d.mean()), float(res.statistic), float(res.pvalue), len(seeds))


def expected_preference(design: str) -> tuple[str, str] | None:
    if design in HIGH_VARIANCE:
        return ("source", "target")
    if design in LOW_VARIANCE:
        return ("target", "source")
    return None


# ---------------------------------------------------------------------------
# variance reference per design
# ---------------------------------------------------------------------------


def design_recipe(design: str, base: Recipe) -> tuple[Recipe, int, int]:
    """(recipe, mean_enc_n, bn_groups multiplier flag) used to measure a design's v."""
    if design == "baseline":
        return base, 1, 0
    if design == "multicrop":
        return small_view_recipe(base), 1, 0
    if design == "scalemix":
        return base.replace(name="scalemix", scalemix=True), 1, 0
    if design == "strongeraug":
        return with_strength(base, STRONGER), 1, 0
    if design == "weakeraug":
        return with_strength(base, WEAKER), 1, 0
    if design == "meanenc":
        return base, 2, 0
    if design == "syncbn":
        return base, 1, 1
    raise ConfigError(f"no variance recipe for design {design!r}")


def design_variance(params: EncoderParams, images: np.ndarray, design: str, cfg: TrainConfig, rng: RngStream,
                    r: int = 32, batch_size: int = 128, encoder_id: str = "") -> VarianceReport:
    """Intra-image variance of ``design``'s views under a frozen encoder.

    Per-device BN is emulated with ``cfg.bn_groups`` groups; the SyncBN design
    measures the same views with a single group.
    """
    recipe, n, sync = design_recipe(design, cfg.source_recipe)
    groups = 1 if sync else cfg.bn_groups
    bs = min(batch_size, len(images))
    while bs % groups:
        bs -= 1
    return intra_image_variance(params, images, r, recipe, rng, mean_enc_n=n, batch_size=bs, bn_groups=groups,
                                in_size=images.shape[-1], encoder_id=encoder_id)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

DATA_SEED = 0


def study_dataset(cfg: TrainConfig) -> Dataset:
    """The dataset is shared by every run of a study; only training draws vary with the seed."""
    return load_dataset(cfg.data, RngStream(DATA_SEED, ("data",)))


def run_one(args) -> RunRecord:
    cfg, cell, probe_epochs, probe_lr = args
    ds = study_dataset(cfg)
    res = train(cfg, ds)
    probe = linear_probe(res.pair.source, ds, probe_epochs, probe_lr, seed=cfg.seed, config_hash=cfg.digest())
    final = res.metrics[-1].loss if res.metrics else float("nan")
    return RunRecord(cell, cfg.seed, probe.top1, cfg.digest(), final)


def max_workers() -> int:
    raw = os.environ.get("ASYM_LAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ASYM_LAB_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def plan_runs(design: str, cells, base: TrainConfig, seeds) -> list[tuple[TrainConfig, str]]:
    return [(design_config(base, design, c).replace(seed=s), c) for c in cells for s in seeds]


def case_study(design: str, sides, base_config: TrainConfig, seeds, probe_epochs: int = 30,
               probe_lr: float = 0.1, workers: int | None = None, variance_images: int = 0,
               variance_r: int = 32, progress=None) -> StudyReport:
    """Train and probe every (cell, seed), then test the design's expected preference.

    ``seeds`` is a count or an explicit list.  With ``variance_images > 0`` a
    baseline model (first seed) is trained and the design's variance reference
    is measured on that many held-out images.
    """
    design = design.lower()
    if design not in DESIGNS:
        raise ConfigError(f"unknown design {design!r}; expected one of {DESIGNS}")
    cells = list(sides) if sides else (list(LADDER) if design == "ladder" else list(SIDES))
    seed_list = list(range(seeds)) if isinstance(seeds, int) else [int(s) for s in seeds]
    plan = plan_runs(design, cells, base_config, seed_list)
    for cfg, _ in plan:
        cfg.validate()
    jobs = [(cfg, cell, probe_epochs, probe_lr) for cfg, cell in plan]
    n_workers = workers or max_workers()
    runs: list[RunRecord] = []
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as ex:
            for rec in ex.map(run_one, jobs):
                runs.append(rec)
                if progress:
                    progress(rec)
    else:
        for job in jobs:
            rec = run_one(job)
            runs.append(rec)
            if progress:
                progress(rec)
    report = StudyReport(design, cells, seed_list, runs)
    pref = expected_preference(design)
    if pref and pref[0] in cells and pref[1] in cells:
        report.comparisons.append(paired_comparison(report, *pref))
    if design == "ladder":
        for lo, hi in zip(cells, cells[1:]):
            report.comparisons.append(paired_comparison(report, hi, lo))
    if variance_images and design != "ladder":
        base = base_config.replace(seed=seed_list[0])
        ds = study_dataset(base)
        pair = train(base, ds).pair
        imgs = ds.eval_images[:variance_images]
        rng = RngStream(base.seed, ("variance",))
        rep = design_variance(pair.source, imgs, design, base, rng.child(design), variance_r)
        ref = design_variance(pair.source, imgs, "baseline", base, rng.child("baseline"), variance_r)
        report.variance = {**rep.summary(), "baseline_v": ref.v}
    return report
