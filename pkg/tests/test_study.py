import csv
import io
import json
import math

import numpy as np
import pytest

from asym_lab.harness.config import TrainConfig
from asym_lab.harness.data import DatasetSpec
from asym_lab.harness.study import (DESIGNS, LADDER, REFERENCE_ACCURACY, REFERENCE_VARIANCE, RunRecord,
                                    StudyReport, case_study, design_config, design_recipe, expected_preference,
                                    max_workers, paired_comparison)
from asym_lab.numerics import ConfigError


def tiny_base(**kw):
    base = dict(epochs=1, max_steps=2, batch_size=16, bn_groups=2, hidden=16, proj_hidden=16, out_dim=8,
                bank_size=64, small_bank_size=32, data=DatasetSpec(n_classes=3, train_per_class=8, eval_per_class=4))
    base.update(kw)
    return TrainConfig(**base)


def report_with(pairs, design="multicrop"):
    runs = [RunRecord(cell, s, acc, "", 0.0) for s, (a, b) in enumerate(pairs)
            for cell, acc in (("source", a), ("target", b))]
    return StudyReport(design, ["source", "target"], list(range(len(pairs))), runs)


# ---------------------------------------------------------------- configuration of cells


@pytest.mark.parametrize("design, field", [("multicrop", "multicrop_side"), ("scalemix", "scalemix_side"),
                                           ("weakeraug", "weaker_side"), ("strongeraug", "stronger_side"),
                                           ("syncbn", "syncbn_side"), ("meanenc", "mean_enc_side")])
def test_design_config_sets_one_toggle(design, field):
    base = TrainConfig()
    for side in ("neither", "source", "target", "both"):
        cfg = design_config(base, design, side)
        assert getattr(cfg.design, field) == side
        others = {k: v for k, v in vars(cfg.design).items() if k.endswith("_side") and k != field}
        assert all(v == "neither" for v in others.values())


def test_ladder_rungs_accumulate():
    base = TrainConfig()
    none, mc, bn, me = (design_config(base, "ladder", r).design for r in LADDER)
    assert none.multicrop_side == "neither"
    assert mc.multicrop_side == "source" and mc.syncbn_side == "neither"
    assert bn.syncbn_side == "target" and bn.mean_enc_side == "neither"
    assert me.multicrop_side == "source" and me.syncbn_side == "target" and me.mean_enc_side == "target"


@pytest.mark.parametrize("design, cell", [("ladder", "source"), ("multicrop", "+meanenc"), ("bogus", "source")])
def test_bad_cells_rejected(design, cell):
    with pytest.raises(ConfigError):
        design_config(TrainConfig(), design, cell)


def test_expected_preferences():
    assert [expected_preference(d) for d in ("multicrop", "scalemix", "strongeraug")] == [("source", "target")] * 3
    assert [expected_preference(d) for d in ("weakeraug", "syncbn", "meanenc")] == [("target", "source")] * 3
    assert expected_preference("ladder") is None


def test_design_recipes():
    base = TrainConfig().source_recipe
    assert design_recipe("baseline", base) == (base, 1, 0)
    assert design_recipe("meanenc", base)[1] == 2 and design_recipe("syncbn", base)[2] == 1
    assert design_recipe("scalemix", base)[0].scalemix
    assert design_recipe("weakeraug", base)[0].jitter_prob < base.jitter_prob
    assert design_recipe("strongeraug", base)[0].noise_sigma > 0
    with pytest.raises(ConfigError):
        design_recipe("ladder", base)


def test_reference_rows():
    assert [REFERENCE_ACCURACY["multicrop"][s] for s in ("neither", "source", "target", "both")] == \
        [65.8, 69.9, 57.1, 61.7]
    assert [REFERENCE_ACCURACY["ladder"][r] for r in LADDER] == [65.8, 69.9, 70.4, 71.3]
    order = sorted(REFERENCE_VARIANCE, key=REFERENCE_VARIANCE.get, reverse=True)
    assert order == ["multicrop", "scalemix", "strongeraug", "baseline", "weakeraug", "meanenc"]


# ---------------------------------------------------------------- paired test


def test_paired_comparison_matches_hand_computed_t():
    pairs = [(0.6, 0.5), (0.7, 0.55), (0.65, 0.6), (0.62, 0.61), (0.58, 0.5)]
    c = paired_comparison(report_with(pairs), "source", "target")
    d = np.array([a - b for a, b in pairs])
    t = d.mean() / (d.std(ddof=1) / math.sqrt(len(d)))
    assert c.t == pytest.approx(t, rel=1e-12) and c.mean_diff == pytest.approx(d.mean())
    assert c.n == 5 and c.passed and c.p < 0.05
    assert not paired_comparison(report_with(pairs), "target", "source").passed


def test_paired_comparison_edge_cases():
    c = paired_comparison(report_with([(0.6, 0.5), (0.7, 0.6)]), "source", "target")
    assert c.p == 0.0 and c.passed  # constant positive difference
    c = paired_comparison(report_with([(0.5, 0.5), (0.6, 0.6)]), "source", "target")
    assert c.p == 1.0 and not c.passed
    assert paired_comparison(report_with([(0.9, 0.1)]), "source", "target").p == 1.0
    # k/n accuracies: equal gaps that differ only by rounding
    c = paired_comparison(report_with([(0.5, 2 / 3), (1 / 3, 0.5)]), "target", "source")
    assert c.p == 0.0 and c.mean_diff == pytest.approx(1 / 6)


def test_thread_cap_from_environment(monkeypatch):
    monkeypatch.delenv("ASYM_LAB_THREADS", raising=False)
    assert max_workers() == 1
    monkeypatch.setenv("ASYM_LAB_THREADS", "3")
    assert max_workers() == 3
    monkeypatch.setenv("ASYM_LAB_THREADS", "many")
    with pytest.raises(ConfigError):
        max_workers()


# ---------------------------------------------------------------- driver


@pytest.fixture(scope="module")
def multicrop_report():
    return case_study("multicrop", None, tiny_base().with_design(multicrop_m=2), 3, probe_epochs=2)


def test_report_bookkeeping(multicrop_report):
    rep = multicrop_report
    assert len(rep.runs) == 12 and len(rep.matrix()) == 4
    assert [r["cell"] for r in rep.matrix()] == ["neither", "source", "target", "both"]
    assert all(r["n"] == 3 for r in rep.matrix())
    assert rep.matrix()[1]["reference"] == 69.9
    assert len(rep.comparisons) == 1 and rep.comparisons[0].better == "source"


def test_report_serializations(multicrop_report):
    rep = multicrop_report
    rows = list(csv.DictReader(io.StringIO(rep.matrix_csv())))
    assert len(rows) == 4 and rows[2]["reference"] == "57.1"
    assert len(rep.runs_csv().splitlines()) == 13
    blob = json.loads(rep.to_json())
    assert len(blob["runs"]) == 12 and blob["comparisons"][0]["better"] == "source"
    md = rep.to_markdown()
    assert "| source > target |" in md and "| both |" in md


def test_case_study_is_deterministic_and_parallel_safe(multicrop_report):
    again = case_study("multicrop", ["source", "target"], tiny_base().with_design(multicrop_m=2), 3,
                       probe_epochs=2, workers=2)
    first = {(r.cell, r.seed): r for r in multicrop_report.runs}
    for r in again.runs:
        assert r == first[(r.cell, r.seed)]


def test_ladder_adds_stepwise_comparisons():
    rep = case_study("ladder", None, tiny_base(max_steps=1), 2, probe_epochs=1)
    assert [c.better for c in rep.comparisons] == list(LADDER[1:])
    assert len(rep.runs) == 8


def test_variance_reference_attached():
    rep = case_study("scalemix", ["source"], tiny_base(max_steps=1), 1, probe_epochs=1, variance_images=6,
                     variance_r=4)
    assert rep.variance["v"] > 0 and rep.variance["baseline_v"] > 0
    assert "variance reference" in rep.to_markdown()


def test_unknown_design():
    with pytest.raises(ConfigError):
        case_study("cutout", None, tiny_base(), 1)
    assert "ladder" in DESIGNS
