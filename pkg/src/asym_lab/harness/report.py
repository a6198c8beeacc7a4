"""Collate CSV/JSON outputs into one markdown summary.

Collation only sorts and tabulates, so the result does not depend on the
order in which inputs are given.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from ..numerics import ConfigError


def _files(paths) -> list[Path]:
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            out += [q for q in p.rglob("*") if q.suffix in (".csv", ".json")]
        elif p.exists():
            out.append(p)
        else:
            raise FileNotFoundError(f"no such input: {p}")
    return sorted(set(out))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return "" if v is None else str(v)


def _table(header: list[str], rows: list[list]) -> list[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(_fmt(v) for v in r) + " |" for r in rows]
    return lines


def collate(paths) -> str:
    matrix, theory, variance, comparisons = [], [], [], []
    for f in _files(paths):
        text = f.read_text(encoding="utf-8")
        if f.suffix == ".csv":
            rows = list(csv.DictReader(io.StringIO(text)))
            if not rows:
                continue
            keys = set(rows[0])
            if {"design", "cell", "mean", "sd", "n"} <= keys:
                matrix += [[r["design"], r["cell"], float(r["mean"]), float(r["sd"]), int(r["n"]), r.get("reference", "")]
                           for r in rows]
            elif "sigma_target_scale" in keys:
                theory += [[float(r["sigma_target_scale"]), float(r["tr_r_var_empirical"]),
                            float(r["tr_r_var_predicted"]), float(r["grad_mean_rel_error"]), r["pass"], f.name]
                           for r in rows]
        else:
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{f}: invalid JSON ({e})") from None
            if isinstance(obj, dict) and "comparisons" in obj:
                comparisons += [[obj["design"], f"{c['better']} > {c['worse']}", c["mean_diff"], c["p"],
                                 "yes" if c["passed"] else "no"] for c in obj["comparisons"]]
            elif isinstance(obj, dict) and {"v", "r"} <= set(obj):
                variance.append([obj.get("recipe", ""), obj["v"], obj["r"], obj.get("images", ""),
                                 obj.get("mean_enc_n", 1), f.name])
    out = ["# Summary", ""]
    if matrix:
        out += ["## Placement matrices", ""]
        out += _table(["design", "cell", "mean top-1", "sd", "runs", "reference (%)"], sorted(matrix, key=str))
        out.append("")
    if comparisons:
        out += ["## Paired tests (one-sided)", ""]
        out += _table(["design", "hypothesis", "mean diff", "p", "pass"], sorted(comparisons, key=str))
        out.append("")
    if variance:
        out += ["## Variance references", ""]
        out += _table(["recipe", "v", "r", "images", "mean_enc_n", "file"], sorted(variance, key=lambda r: -r[1]))
        out.append("")
    if theory:
        out += ["## Theory checks", ""]
        out += _table(["sigma' scale", "V[tr R] empirical", "V[tr R] predicted", "E[W_dot] rel. error", "pass",
                       "file"], sorted(theory, key=str))
        out.append("")
    if len(out) == 2:
        out += ["(no recognised inputs)", ""]
    return "\n".join(out)
