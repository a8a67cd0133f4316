"""``cascnn`` command line: synth | ingest | stats | train | eval | predict | compare.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from datetime import datetime
from pathlib import Path

from . import experiments as ex
from .config import describe_keys, load_config
from .data import conservation_violations
from .errors import CasCnnError
from .evaluation import compare_runs
from .odad import compute_odad, sparsity_report, write_sparsity_report

log = logging.getLogger("cascnn")


def _run_dir(args, cfg, command, label=""):
    if args.out:
        path = Path(args.out)
    else:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        path = Path(cfg.runs_root) / f"{command}{'-' + label if label else ''}-{stamp}"
    path.mkdir(parents=True, exist_ok=True)
    _start_log(path, cfg, args)
    return path


def _start_log(run_dir, cfg, args):
    handler = logging.FileHandler(run_dir / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
    log.addHandler(handler)
    log.info("command: %s", " ".join(sys.argv[1:]) or args.command)
    log.info("run directory: %s", run_dir.resolve())
    log.info("seed: %d", cfg.seed)


def cmd_synth(args, cfg):
    out = _run_dir(args, cfg, "synth")
    manifest = ex.synthesize(cfg, out)
    log.info("wrote %d records for %d days to %s", manifest["records"], len(manifest["dates"]), out)
    return out


def cmd_ingest(args, cfg):
    out = _run_dir(args, cfg, "ingest")
    ingested = ex.ingest_dataset(cfg, args.data, out)
    check = conservation_violations(ingested.od, ingested.flows)
    log.info("dataset: %s", Path(args.data).resolve())
    log.info("records %d, rejected %d, dropped (entry) %d, dropped (exit) %d",
             ingested.report["records"], ingested.report["rejected_rows"],
             ingested.report["dropped_entry"], ingested.report["dropped_exit"])
    log.info("conservation: %s", json.dumps(check))
    return out


def cmd_stats(args, cfg):
    out = _run_dir(args, cfg, "stats")
    ingested, prepared = ex.prepare_from(cfg, args.ingest)
    table = compute_odad(ingested.od, prepared.fit_days)
    intervals = [int(t) for t in args.intervals.split(",")] if args.intervals else None
    write_sparsity_report(sparsity_report(ingested.od, table, intervals), out)
    log.info("ingest dir: %s", Path(args.ingest).resolve())
    return out


def cmd_train(args, cfg):
    variant = args.ablation or cfg.ablation
    out = _run_dir(args, cfg, "train", variant)
    log.info("ingest dir: %s", Path(args.ingest).resolve())
    _, state, _ = ex.train_variant(cfg, args.ingest, variant, out)
    log.info("stopped: %s (best epoch %d, val %.6g)", state.stop_reason, state.best_epoch, state.best_val_loss)
    return out


def _parse_pairs(text):
    pairs = []
    for item in text.split(","):
        a, _, b = item.partition("-")
        pairs.append((int(a), int(b)))
    return pairs


def cmd_eval(args, cfg):
    run = Path(args.run)
    _start_log(run, cfg, args)
    if args.out:
        log.warning("eval writes into the run directory; --out is ignored")
    summary = ex.evaluate_run(run, args.per_interval, _parse_pairs(args.pairs) if args.pairs else (), args.interpret)
    o = summary["overall"]
    print(f"{summary['label']}: RMSE {o['RMSE']:.4f}  MAE {o['MAE']:.4f}  WMAPE {o['WMAPE']}")
    if "interpretability" in summary:
        print(f"gate w vs inflow volume: pearson r = {summary['interpretability']['pearson_r']}")
    return run


def cmd_predict(args, cfg):
    out = _run_dir(args, cfg, "predict")
    pred, actual = ex.predict_matrix(args.run, args.day, args.interval)
    with open(out / "prediction.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["origin", "destination", "predicted", "actual"])
        for i in range(pred.shape[0]):
            for j in range(pred.shape[1]):
                writer.writerow([i, j, repr(float(pred[i, j])), int(actual[i, j])])
    log.info("run: %s, day %d, interval %d", Path(args.run).resolve(), args.day, args.interval)
    return out


def cmd_compare(args, cfg):
    out = _run_dir(args, cfg, "compare")
    rows = compare_runs(args.runs, out / "comparison.csv")
    for label, *vals in rows:
        print(label, *vals, sep=",")
    return out


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--out", help="output directory (default: <runs_root>/<command>-<timestamp>)")
    common.add_argument("-v", "--verbose", action="store_true")

    keys = "configuration keys (name = default):\n" + describe_keys()
    parser = argparse.ArgumentParser(
        prog="cascnn",
        description="OD demand prediction with CAS-CNN on AFC data.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=keys,
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    class Sub:
        @staticmethod
        def add_parser(name, **kw):
            return subparsers.add_parser(name, epilog=keys, formatter_class=argparse.RawDescriptionHelpFormatter, **kw)

    sub = Sub

    sub.add_parser("synth", parents=[common], help="generate a synthetic AFC dataset")
    p = sub.add_parser("ingest", parents=[common], help="AFC CSV -> OD tensor and flow series")
    p.add_argument("--data", required=True, help="dataset directory with afc.csv and manifest.json")
    p = sub.add_parser("stats", parents=[common], help="sparsity and ODAD level report")
    p.add_argument("--ingest", required=True, help="ingest output directory")
    p.add_argument("--intervals", help="comma separated interval indices (default: all)")
    p = sub.add_parser("train", parents=[common], help="train one model variant")
    p.add_argument("--ingest", required=True, help="ingest output directory")
    p.add_argument("--ablation", help="full, no_split, no_mask, no_ca, no_inflow, no_outflow or cnn2d")
    p = sub.add_parser("eval", parents=[common], help="test-set metrics for a training run")
    p.add_argument("run", help="training run directory")
    p.add_argument("--per-interval", action="store_true", help="metrics per interval of day")
    p.add_argument("--pairs", help="OD pairs as o-d,o-d for actual/predicted series")
    p.add_argument("--interpret", action="store_true", help="gate vector w against station inflow volume")
    p = sub.add_parser("predict", parents=[common], help="predict one OD matrix")
    p.add_argument("run", help="training run directory")
    p.add_argument("--day", type=int, required=True)
    p.add_argument("--interval", type=int, required=True)
    p = sub.add_parser("compare", parents=[common], help="merge evaluated runs into one table")
    p.add_argument("runs", nargs="+", help="evaluated training run directories")
    return parser


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "stats": cmd_stats, "train": cmd_train,
    "eval": cmd_eval, "predict": cmd_predict, "compare": cmd_compare,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO if args.verbose else logging.WARNING)
    log.addHandler(console)
    log.setLevel(logging.INFO)
    log.propagate = False
    try:
        cfg = load_config(args.config, args.overrides)
        out = COMMANDS[args.command](args, cfg)
        print(out)
        return 0
    except CasCnnError as exc:
        print(f"cascnn {args.command}: {str(exc).splitlines()[0] if exc.exit_code != 2 else exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, KeyError) as exc:
        print(f"cascnn {args.command}: {exc}", file=sys.stderr)
        return 3
    except (FloatingPointError, OverflowError) as exc:
        print(f"cascnn {args.command}: numeric failure: {exc}", file=sys.stderr)
        return 4
    finally:
        for h in list(log.handlers):
            log.removeHandler(h)
            if isinstance(h, logging.FileHandler):
                h.close()


if __name__ == "__main__":
    sys.exit(main())
