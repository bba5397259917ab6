#!/usr/bin/env python3
"""Diagnostics for feature alignment: domain-probe accuracy per pyramid level under config variations.

Each ``--case`` is a ``;``-separated list of overrides applied to the toy config, e.g.

    python3 scripts/probe_sweep.py --out runs/probe \
        --case "train.epochs=10" \
        --case "train.epochs=10;train.weights.lambda_T=0;train.weights.lambda_D=0;train.weights.lambda_S=0" \
        --case "train.epochs=10;toy.real_domain_shift.noise_std=0.0"

Prints the mean of the last epoch's losses, Recall@1 and probe accuracy on all levels, level 1,
the deepest level and the retrieval levels.
"""
import argparse
import json
from pathlib import Path

import numpy as np

from dasgil.config import RunConfig, apply_overrides, toy_run_config
from dasgil.dataman import generate_toy_dataset
from dasgil.study import apply_variant, domain_probe_accuracy, evaluate_localization
from dasgil.trainer import steps_per_epoch, train


def run_case(overrides, out: Path, variants):
    base = RunConfig.from_dict(apply_overrides(toy_run_config(0).to_dict(), overrides)).validate()
    tag = "_".join(o.replace("=", "-").replace(".", "-") for o in overrides) or "default"
    manifest = generate_toy_dataset(base.toy, out / "data" / tag)
    n = base.net.encoder_layers
    rows = []
    for v in variants:
        cfg = apply_variant(base, v)
        state, logs = train(manifest, cfg.net, cfg.train)
        last = logs[-steps_per_epoch(manifest, cfg.train):]
        losses = {k: round(float(np.mean([getattr(l, k) for l in last])), 4)
                  for k in ("L_dis", "L_gen", "L_T", "L_D", "L_S")}
        r1 = evaluate_localization(state.params, manifest, cfg.eval, cfg.net.retrieval_layers).recall(1)
        probes = {name: domain_probe_accuracy(state.params, manifest, 0, layers=layers)
                  for name, layers in (("all", None), ("level1", [1]), (f"level{n}", [n]),
                                       ("retrieval", cfg.net.retrieval_layers))}
        row = {"case": overrides, "variant": v, **losses, "R@1": r1, "probe": probes}
        print(json.dumps(row))
        rows.append(row)
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", required=True)
    ap.add_argument("--case", action="append", default=[])
    ap.add_argument("--variant", action="append", default=[])
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for case in args.case or [""]:
        rows += run_case([c for c in case.split(";") if c], out, args.variant or ["full", "no-gan"])
    (out / "probe_sweep.json").write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
