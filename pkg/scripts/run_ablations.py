"""Train and evaluate every ablation variant plus the 2-D CNN baseline from one
config file, then write a comparison table (model x RMSE, MAE, WMAPE).

    python3 scripts/run_ablations.py --config ablations.cfg --out runs/ablations

Synthesizes and ingests a dataset first unless --ingest points at one.
"""
import argparse
import logging
import sys
from pathlib import Path

from cascnn import experiments as ex
from cascnn.config import load_config


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", help="flat key = value file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--ingest", help="existing ingest directory (default: synthesize one)")
    parser.add_argument("--out", required=True, help="output root; one sub-directory per variant")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load_config(args.config, args.overrides)
    out = Path(args.out)
    ingest_dir = args.ingest
    if ingest_dir is None:
        ex.synthesize(cfg, out / "data")
        ex.ingest_dataset(cfg, out / "data", out / "ingest")
        ingest_dir = out / "ingest"
    ex.run_ablation_suite(cfg, ingest_dir, out, log_fn=print)
    print((out / "comparison.csv").read_text(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
