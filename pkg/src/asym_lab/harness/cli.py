"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad flags, config or input),
2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..encoder import encode, load_checkpoint
from ..numerics import ConfigError, LabError, RngStream, l2_normalize
from ..theory import NoiseModel, one_hot_alpha, sigma_target_sweep, uniform_alpha
from ..variance import bootstrap_ci, cross_image_variance
from .config import TrainConfig, config_from_text, load_config
from .data import ParseError
from .probe import linear_probe
from .report import collate
from .study import DESIGNS, case_study, design_variance, study_dataset
from .train import train

log = logging.getLogger("asym_lab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="config file ([section] / key = value)")
    p.add_argument("--seed", type=int, help="overrides the config seed")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="asym-lab", description="Asymmetric source/target contrastive learning lab.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="pre-train a source/target pair")
    _common(p)
    p.add_argument("--out", default="run", help="output directory (metrics.jsonl, checkpoint.bin)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("probe", help="linear probe on frozen backbone features")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--encoder", choices=("source", "target"), default="source")

    p = sub.add_parser("variance-ref", help="intra-image variance reference of one recipe")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--recipe", default="baseline",
                   help="baseline, weaker, stronger, scalemix, multicrop, meanenc or syncbn")
    p.add_argument("--r", type=int, default=32)
    p.add_argument("--images", type=int, default=512)
    p.add_argument("--out", default="variance", help="output prefix (.csv and .json)")

    p = sub.add_parser("cross-var", help="cross-image variance of held-out encodings")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", type=int, default=512)
    p.add_argument("--metrics", help="metrics.jsonl to summarize instead of a fresh measurement")

    p = sub.add_parser("theory-check", help="Monte-Carlo checks over target-noise scales")
    _common(p)
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--sigma-target-scale", default="1,2,4")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--K", type=int, default=8)
    p.add_argument("--N", type=int, default=4)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--alpha", choices=("uniform", "one-hot"), default="uniform")
    p.add_argument("--formula", choices=("stated", "exact"), default="stated")
    p.add_argument("--out", help="CSV path (default: stdout)")

    p = sub.add_parser("case-study", help="placement matrix for one design")
    _common(p)
    p.add_argument("--design", required=True, choices=DESIGNS)
    p.add_argument("--sides", help="comma list of sides (or ladder rungs); default all")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--probe-epochs", type=int, default=30)
    p.add_argument("--variance-images", type=int, default=0)
    p.add_argument("--out", default="study", help="output directory")

    p = sub.add_parser("report", help="collate CSV/JSON outputs into a markdown table")
    _common(p)
    p.add_argument("inputs", nargs="+", help="files or directories")
    p.add_argument("--out", help="markdown path (default: stdout)")
    return ap


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg.validate()


def _cmd_train(args) -> int:
    cfg = _config(args)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    if args.max_steps is not None:
        cfg = cfg.replace(max_steps=args.max_steps)
    cfg.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_text(), encoding="utf-8")
    res = train(cfg, study_dataset(cfg), out / "metrics.jsonl", out / "checkpoint.bin")
    last = res.metrics[-1] if res.metrics else None
    print(json.dumps({"steps": len(res.metrics), "final_loss": last.loss if last else None,
                      "checkpoint": str(out / "checkpoint.bin"), "source_digest": res.pair.source.digest()}))
    return 0


def _checkpoint_config(args):
    pair, text = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = load_config(args.config)
    elif text:
        cfg = config_from_text(text)
    else:
        cfg = TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return pair, cfg


def _cmd_probe(args) -> int:
    pair, cfg = _checkpoint_config(args)
    params = pair.source if args.encoder == "source" else pair.target
    res = linear_probe(params, study_dataset(cfg), args.epochs, args.lr, seed=cfg.seed, config_hash=cfg.digest())
    print(res.to_json())
    return 0


def _cmd_variance(args) -> int:
    pair, cfg = _checkpoint_config(args)
    design = {"stronger": "strongeraug", "weaker": "weakeraug"}.get(args.recipe, args.recipe)
    ds = study_dataset(cfg)
    imgs = ds.eval_images[:args.images]
    rep = design_variance(pair.source, imgs, design, cfg, RngStream(cfg.seed, ("variance", design)), args.r,
                          encoder_id=pair.source.digest())
    lo, hi = bootstrap_ci(rep, RngStream(cfg.seed, ("bootstrap",)))
    Path(args.out + ".csv").write_text(rep.to_csv(), encoding="utf-8")
    summary = {**rep.summary(), "ci95": [lo, hi]}
    Path(args.out + ".json").write_text(json.dumps(summary, sort_keys=True), encoding="utf-8")
    print(json.dumps(summary, sort_keys=True))
    return 0


def _cmd_cross_var(args) -> int:
    pair, cfg = _checkpoint_config(args)
    d = pair.source.out_dim
    if args.metrics:
        recs = [json.loads(line) for line in Path(args.metrics).read_text().splitlines() if line.strip()]
        tail = recs[len(recs) * 3 // 4:]
        vals = [r["cross_var"] for r in tail]
        out = {"d": d, "inv_d": 1.0 / d, "tail_min": min(vals), "tail_max": max(vals),
               "tail_mean": float(np.mean(vals)), "steps": len(recs)}
    else:
        ds = study_dataset(cfg)
        x = ds.eval_images[:args.images]
        x = x.reshape(len(x), -1)
        z, _ = encode(pair.source, x, 1)
        out = {"d": d, "inv_d": 1.0 / d, "cross_var": cross_image_variance(z), "images": len(x)}
    print(json.dumps(out, sort_keys=True))
    return 0


def _cmd_theory(args) -> int:
    try:
        scales = [float(s) for s in args.sigma_target_scale.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad --sigma-target-scale {args.sigma_target_scale!r}") from None
    if not scales:
        raise ConfigError("--sigma-target-scale is empty")
    seed = 0 if args.seed is None else args.seed
    rng = RngStream(seed, ("theory-check",))
    h = args.dim
    model = NoiseModel.random(h, rng.child("model"))
    # unit feature covariance makes the predicted mean update W'/tau
    model = NoiseModel(model.f_mean, np.eye(h), model.e_mean, model.e_cov, model.et_mean, model.et_cov)
    alpha = uniform_alpha(args.K) if args.alpha == "uniform" else one_hot_alpha(args.K)
    rows = sigma_target_sweep(model, scales, alpha, np.eye(h), args.tau, args.N, args.trials, rng.child("sweep"),
                              args.formula)
    buf = io.StringIO()
    w = csv.DictWriter(buf, list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if args.out:
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    sys.stdout.write(buf.getvalue())
    return 0


def _cmd_case_study(args) -> int:
    cfg = _config(args)
    sides = [s.strip() for s in args.sides.split(",")] if args.sides else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep = case_study(args.design, sides, cfg, args.seeds, probe_epochs=args.probe_epochs,
                     variance_images=args.variance_images,
                     progress=lambda r: log.info("run %s seed %d: top1 %.4f", r.cell, r.seed, r.top1))
    stem = out / args.design
    Path(f"{stem}_matrix.csv").write_text(rep.matrix_csv(), encoding="utf-8")
    Path(f"{stem}_runs.csv").write_text(rep.runs_csv(), encoding="utf-8")
    Path(f"{stem}.json").write_text(rep.to_json(), encoding="utf-8")
    md = rep.to_markdown()
    Path(f"{stem}.md").write_text(md, encoding="utf-8")
    sys.stdout.write(md)
    return 0


def _cmd_report(args) -> int:
    md = collate([Path(p) for p in args.inputs])
    if args.out:
        Path(args.out).write_text(md, encoding="utf-8")
    sys.stdout.write(md)
    return 0


COMMANDS = {"train": _cmd_train, "probe": _cmd_probe, "variance-ref": _cmd_variance, "cross-var": _cmd_cross_var,
            "theory-check": _cmd_theory, "case-study": _cmd_case_study, "report": _cmd_report}


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except (ConfigError, ParseError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (LabError, ArithmeticError, OSError, ValueError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
