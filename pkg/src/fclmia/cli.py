"""Command-line entry point: ``fclmia {train,attack,report,plot}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime
failure.  ``FCLMIA_OUTPUT_ROOT`` overrides the config's output directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import config as config_mod
from . import runs
from .config import ConfigError
from .datasets import DataError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
OUTPUT_ENV = "FCLMIA_OUTPUT_ROOT"

log = logging.getLogger("fclmia")


def output_root(cfg):
    return Path(os.environ.get(OUTPUT_ENV) or cfg.output_dir)


def _presets():
    return {"desk": config_mod.desk_config, "smoke": config_mod.smoke_config}


def _resolve_config(args):
    if args.preset:
        cfg = _presets()[args.preset]()
    else:
        cfg = config_mod.load_config(args.config)
    return cfg


def cmd_train(args):
    cfg = _resolve_config(args)
    run_dir = Path(args.run_dir) if args.run_dir else output_root(cfg) / cfg.name
    _, written = runs.train(cfg, run_dir, resume=not args.no_resume)
    print(run_dir)
    log.info("wrote %d checkpoint(s) to %s", len(written), run_dir)
    return EXIT_OK


def cmd_attack(args):
    rounds = set(args.rounds) if args.rounds else None
    result = runs.attack(args.run_dir, args.kind, args.classifier, args.sweep, args.threshold, rounds)
    if args.kind == "active-in-training":
        result = {k: result[k] for k in ("calibration_member_rate", "nonmember_target_member_rate", "threshold")}
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_report(args):
    summary = runs.report(args.run_dir)
    print(Path(args.run_dir) / "report.md")
    if summary["warnings"]:
        for w in summary["warnings"]:
            print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def cmd_plot(args):
    for path in runs.plot(args.run_dir):
        print(path)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="fclmia", description="Membership inference against federated contrastive learning.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a federated MoCo run and write checkpoints")
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("config", nargs="?", help="experiment config (JSON)")
    src.add_argument("--preset", choices=sorted(_presets()), help="use a built-in config instead of a file")
    t.add_argument("--run-dir", help=f"run directory (default: ${OUTPUT_ENV} or output_dir, plus the config name)")
    t.add_argument("--no-resume", action="store_true", help="ignore existing checkpoints and start from round 0")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", help="run an attack over a run's checkpoints")
    a.add_argument("run_dir")
    a.add_argument("--kind", required=True, choices=runs.ATTACK_KINDS)
    a.add_argument("--classifier", choices=("lda", "logreg", "svm"), help="passive attack classifier (default from config)")
    a.add_argument("--sweep", action="store_true", help="active-static: write the accuracy-vs-threshold curve")
    a.add_argument("--threshold", type=float, help="fixed decision threshold (default: sweep / calibration)")
    a.add_argument("--rounds", type=int, nargs="+", help="restrict to these checkpoint rounds")
    a.set_defaults(func=cmd_attack)

    r = sub.add_parser("report", help="consolidate attack reports into report.json and report.md")
    r.add_argument("run_dir")
    r.set_defaults(func=cmd_report)

    f = sub.add_parser("plot", help="overfitting trace and accuracy-vs-round figures")
    f.add_argument("run_dir")
    f.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except runs.RunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
