"""Command-line entry point: one verb per pipeline stage plus sweeps and matrices."""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

from . import data as D
from . import models as M
from . import pipeline as PL
from . import report as R

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

VERB_STAGES = {
    "train-split": "train_split",
    "train-adversary": "train_adversary",
    "gen-delta": "gen_delta",
    "train-protection": "train_protection",
    "eval-inference": "eval_inference",
    "eval-reconstruction": "eval_reconstruction",
    "sweep-pca": "eval_inference",
    "report": "report",
    "run-matrix": None,
}


def _common(defaults: bool) -> argparse.ArgumentParser:
    # flags are accepted before or after the verb; the sub-parser copy must not
    # clobber a value given before the verb, hence SUPPRESS there
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=d(None), help="YAML experiment config")
    p.add_argument("--cache-dir", type=Path, default=d(Path(".adpsplit-cache")), help="artifact store root")
    p.add_argument("--seed", type=int, default=d(None), help="override the config seed")
    p.add_argument("--force", action="store_true", default=d(False), help="recompute the requested stage even on a cache hit")
    p.add_argument("--dump-heatmaps", action="store_true", default=d(False), help="write CAM PNGs while generating delta pairs")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adpsplit", description=__doc__, parents=[_common(True)])
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERB_STAGES:
        sp = sub.add_parser(verb, parents=[_common(False)])
        if verb not in ("report", "run-matrix"):
            sp.add_argument("--split", default="", help="split position (default: every configured split)")
        if verb == "train-adversary":
            sp.add_argument("--role", choices=("offline", "inference", "both"), default="both")
        if verb in ("report", "run-matrix"):
            sp.add_argument("--out", type=Path, default=None, help="copy the report here")
    return parser


def _load(args) -> PL.ExperimentConfig:
    cfg = PL.load_config(args.config) if args.config else PL.ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _say(art: PL.StageArtifact, **extra) -> None:
    rec = {"stage": art.stage, "key": art.input_hash, "path": str(art.path), "cache_hit": art.cache_hit}
    rec.update(extra)
    print(json.dumps(rec, sort_keys=True))


def _dispatch(args) -> None:
    cfg = _load(args)
    verb = args.verb
    stage = VERB_STAGES[verb]
    force = {stage} if (args.force and stage) else set()

    if verb == "run-matrix":
        rows = PL.run_matrix(cfg, args.cache_dir, force=PL.STAGES if args.force else ())
        out = args.out or (args.cache_dir / "matrix" / cfg.digest())
        R.emit_report(rows, out, cfg.thresholds_obj())
        for r in rows:
            print(json.dumps({k: r.get(k) for k in R.METRICS_COLUMNS}, sort_keys=True))
        print(json.dumps({"report": str(out), "rows": len(rows)}))
        return

    if verb == "sweep-pca":
        cfg = cfg.with_overrides(**{"protection.kind": "pca"})
    pipe = PL.Pipeline(cfg, args.cache_dir, force=force, dump_heatmaps=args.dump_heatmaps)

    if verb == "report":
        art = pipe.run("report")
        if args.out:
            shutil.copytree(art.path, args.out, dirs_exist_ok=True)
        _say(art, out=str(args.out) if args.out else None)
        return

    splits = [args.split] if args.split else list(cfg.splits)
    for sp in splits:
        if verb == "train-split":
            _say(pipe.run(stage))
            break
        if verb == "train-adversary":
            roles = ("offline", "inference") if args.role == "both" else (args.role,)
            for role in roles:
                _say(pipe.run(stage, sp, role), split=sp, role=role)
            continue
        art = pipe.run(stage, sp)
        if verb == "sweep-pca":
            for row in R.read_rows(art.file("pca_sweep.csv")):
                print(json.dumps({"split": sp, **row}, sort_keys=True))
        elif verb == "eval-inference":
            _say(art, split=sp, metrics=json.loads(art.file("metrics.json").read_text()))
        else:
            _say(art, split=sp)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except (PL.ConfigError, M.ConfigError, D.DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # any stage failure
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
