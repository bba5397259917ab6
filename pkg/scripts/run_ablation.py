#!/usr/bin/env python3
"""Train and evaluate every ablation variant on the toy dataset, then print the comparison table.

    python3 scripts/run_ablation.py --out runs/ablation
    python3 scripts/run_ablation.py --out runs/ablation --variant no-gan --variant multi-cd --plots
"""
import argparse
import logging
from pathlib import Path

from dasgil.config import RunConfig, apply_overrides, toy_run_config
from dasgil.dataman import generate_toy_dataset, load_manifest
from dasgil.study import ARCH_VARIANTS, RETRIEVAL_VARIANTS, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", required=True)
    ap.add_argument("--data")
    ap.add_argument("--variant", action="append", default=[])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--set", action="append", default=[], metavar="K=V")
    ap.add_argument("--plots", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = RunConfig.from_dict(apply_overrides(toy_run_config(args.seed).to_dict(), args.set)).validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = (load_manifest(Path(args.data) / "manifest.jsonl") if args.data
                else generate_toy_dataset(base.toy, out / "data"))
    run_ablation(base, manifest, args.variant or ARCH_VARIANTS + RETRIEVAL_VARIANTS, out, plots=args.plots)
    print((out / "comparison.md").read_text())


if __name__ == "__main__":
    main()
