"""``dasgil`` command line: toygen | train | build-db | query | eval | ablate | viz."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataman
from .config import RunConfig, load_run_config, toy_run_config
from .errors import DasgilError, InvalidConfig

log = logging.getLogger("dasgil")


def _layers(text):
    try:
        return [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad layer list {text!r}") from exc


def _common(p: argparse.ArgumentParser):
    p.add_argument("--preset", choices=["paper", "toy"], default="paper",
                   help="base configuration before --config and --set (default: paper)")
    p.add_argument("--config", help="RunConfig JSON document")
    p.add_argument("--set", action="append", default=[], metavar="K=V", help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, help="seed for all randomness (overrides config)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dasgil", description="Domain-adaptive multi-task place recognition.")
    sub = parser.add_subparsers(dest="command", metavar="{toygen,train,build-db,query,eval,ablate,viz}")
    sub.required = True

    p = sub.add_parser("toygen", help="render the procedural two-domain toy dataset")
    _common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="adversarial multi-task training")
    _common(p)
    p.add_argument("--data", required=True, help="manifest.jsonl or the directory holding it")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="resume from this training checkpoint")
    p.add_argument("--variant", action="append", default=[], help="apply an ablation variant")

    p = sub.add_parser("build-db", help="extract descriptors and write a DGFD feature database")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--db", required=True, help="output database path")
    p.add_argument("--layers", type=_layers)
    p.add_argument("--domain", default="virtual")
    p.add_argument("--environment", default=None)

    p = sub.add_parser("query", help="rank database entries for one image")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--metric", choices=["l1", "cosine"])
    p.add_argument("--k", type=int, default=10)

    p = sub.add_parser("eval", help="localize query records against a database, write an EvalReport")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metric", choices=["l1", "cosine"])
    p.add_argument("--layers", type=_layers)
    p.add_argument("--plots", action="store_true")

    p = sub.add_parser("ablate", help="train and evaluate ablation variants side by side")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", action="append", default=[], help="variant name (repeatable); default: all")
    p.add_argument("--plots", action="store_true")

    p = sub.add_parser("viz", help="write image / feature-PCA / depth / segmentation triptychs")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layers", type=_layers, help="pyramid levels to visualize")
    p.add_argument("--limit", type=int, default=4)
    p.add_argument("--domain", default=None)
    return parser


def _config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides += [f"train.seed={args.seed}", f"toy.seed={args.seed}"]
    base = toy_run_config().to_dict() if args.preset == "toy" else None
    return load_run_config(args.config, overrides, base=base)


def _manifest(path):
    p = Path(path)
    return dataman.load_manifest(p / "manifest.jsonl" if p.is_dir() else p)


def cmd_toygen(args):
    cfg = _config(args)
    m = dataman.generate_toy_dataset(cfg.toy, args.out)
    print(f"wrote {len(m.virtual())} virtual + {len(m.real())} real records to {args.out}")


def cmd_train(args):
    from .study import apply_variant
    from .trainer import load_checkpoint, train

    cfg = _config(args)
    for v in args.variant:
        cfg = apply_variant(cfg, v)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.train.log_path = str(out / "train_log.jsonl")
    cfg.train.checkpoint_path = str(out / "checkpoint.dgck")
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    manifest = _manifest(args.data)
    state = None
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint, expect_config=cfg.net)
        state.config = cfg.train
    else:
        Path(cfg.train.log_path).unlink(missing_ok=True)
    state, logs = train(manifest, cfg.net, cfg.train, state=state)
    last = logs[-1].to_json() if logs else {}
    print(f"trained to step {state.step}; last log {json.dumps(last)}")


def cmd_build_db(args):
    from .retrieval import build_database
    from .trainer import load_model

    params = load_model(args.checkpoint)
    m = _manifest(args.data).subset(domain=args.domain, environment=args.environment)
    H, W = params.config.input_height, params.config.input_width
    items = ((r.id, dataman.crop_to_shape([dataman.load_image(m, r)], H, W)[0]) for r in m.records)
    db = build_database(params, items, args.layers, path=args.db)
    print(f"wrote {len(db)} descriptors (layers {list(db.layers)}) to {args.db}")


def cmd_query(args):
    from PIL import Image

    from .netcore import params_digest
    from .retrieval import extract_descriptor, query, read_database
    from .trainer import load_model

    cfg = _config(args)
    params = load_model(args.checkpoint)
    db = read_database(args.db)
    with Image.open(args.image) as im:
        img = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    img, = dataman.crop_to_shape([img], params.config.input_height, params.config.input_width)
    desc = extract_descriptor(params, img, db.layers, id=args.image, digest=params_digest(params))
    res = query(db, desc, args.metric or cfg.eval.metric, k=args.k)
    for rank, (i, score) in enumerate(res.ranked, start=1):
        print(f"{rank}\t{i}\t{score:.6g}")


def cmd_eval(args):
    from .evalbench import emit_report
    from .study import evaluate_localization
    from .trainer import load_model

    cfg = _config(args)
    if args.metric:
        cfg.eval.metric = args.metric
    params = load_model(args.checkpoint)
    report = evaluate_localization(params, _manifest(args.data), cfg.eval, args.layers)
    written = emit_report(report, args.out, plots=args.plots)
    print(json.dumps(report.to_json()["buckets"]), *map(str, written))


def cmd_ablate(args):
    from .study import ARCH_VARIANTS, RETRIEVAL_VARIANTS, run_ablation

    cfg = _config(args)
    variants = args.variant or (ARCH_VARIANTS + RETRIEVAL_VARIANTS)
    reports = run_ablation(cfg, _manifest(args.data), variants, args.out, plots=args.plots)
    print((Path(args.out) / "comparison.md").read_text())
    return reports


def cmd_viz(args):
    import torch
    from PIL import Image

    from .netcore import decode_depth, decode_seg, encode
    from .retrieval import pca_visualize
    from .trainer import load_model

    params = load_model(args.checkpoint)
    params.eval()
    m = _manifest(args.data)
    recs = [r for r in m.records if args.domain is None or r.domain == args.domain][: args.limit]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    H, W = params.config.input_height, params.config.input_width
    levels = args.layers or list(params.config.retrieval_layers)
    for r in recs:
        img, = dataman.crop_to_shape([dataman.load_image(m, r)], H, W)
        x = torch.from_numpy(img.transpose(2, 0, 1).copy()).float()[None] * 2 - 1
        with torch.no_grad():
            pyr = encode(params, x)
            depth = decode_depth(params, pyr)[min(params.config.depth_output_layers)][0, 0].numpy()
            seg = decode_seg(params, pyr)[0].argmax(0).numpy()
        panels = [np.round(img * 255).astype(np.uint8)]
        for l in levels:
            panels.append(np.asarray(Image.fromarray(pca_visualize(pyr.level(l)[0])).resize((W, H), Image.NEAREST)))
        dn = depth / max(float(depth.max()), 1e-6)
        panels.append(np.asarray(Image.fromarray(np.round(dn * 255).astype(np.uint8)).resize((W, H), Image.NEAREST).convert("RGB")))
        palette = np.random.default_rng(0).integers(0, 256, size=(params.config.class_count, 3)).astype(np.uint8)
        panels.append(palette[seg])
        Image.fromarray(np.concatenate(panels, 1)).save(out / f"{r.id}.png")
    print(f"wrote {len(recs)} panels to {out}")


COMMANDS = {
    "toygen": cmd_toygen, "train": cmd_train, "build-db": cmd_build_db, "query": cmd_query,
    "eval": cmd_eval, "ablate": cmd_ablate, "viz": cmd_viz,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except InvalidConfig as exc:
        print(f"dasgil {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return 1
    except DasgilError as exc:
        print(f"dasgil {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
