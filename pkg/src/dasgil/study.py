"""Toy domain-adaptation study, domain probe and the ablation harness."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .config import EvalOptions, RunConfig
from .dataman import DatasetManifest, crop_to_shape, load_image
from .evalbench import (
    EvalReport,
    emit_report,
    pose_error_from,
    precision_buckets,
    recall_at_n,
    top1_recall_at_d,
)
from .errors import EmptyQuerySet, InvalidConfig
from .netcore import ModelParams, encode, params_digest
from .retrieval import build_database, extract_descriptors, query
from .trainer import train

log = logging.getLogger(__name__)


def manifest_digest(manifest: DatasetManifest) -> str:
    h = hashlib.sha256()
    for r in manifest.records:
        h.update(json.dumps(r.to_json(), sort_keys=True).encode())
    return h.hexdigest()


def _images(manifest, records, config=None):
    """(id, image) pairs, center-cropped to the network input when ``config`` is given."""
    out = []
    for r in records:
        img = load_image(manifest, r)
        if config is not None:
            img, = crop_to_shape([img], config.input_height, config.input_width)
        out.append((r.id, img))
    return out


def split_eval_sets(manifest: DatasetManifest, opts: EvalOptions):
    db = [r for r in manifest.records if r.domain == opts.db_domain
          and (opts.db_environment is None or r.environment == opts.db_environment)]
    queries = [r for r in manifest.records if r.domain == opts.query_domain]
    return db, queries


def evaluate_localization(params: ModelParams, manifest: DatasetManifest, opts: EvalOptions,
                          layers=None, meta: Optional[dict] = None) -> EvalReport:
    """Build a database from ``opts.db_*`` records and localize every query record against it."""
    db_recs, q_recs = split_eval_sets(manifest, opts)
    if not q_recs or not db_recs:
        raise EmptyQuerySet("evaluation needs both database and query records")
    layers = tuple(layers or params.config.retrieval_layers)
    digest = params_digest(params)
    db = build_database(params, _images(manifest, db_recs, params.config), layers, digest=digest)
    pose_of = {r.id: r.pose for r in db_recs}
    q_imgs = _images(manifest, q_recs, params.config)
    descs = extract_descriptors(params, np.stack([im for _, im in q_imgs]), layers, [i for i, _ in q_imgs], digest)
    kmax = max(opts.recall_n)
    cand_positions, gt_positions, top1, errors = [], [], [], []
    for rec, desc in zip(q_recs, descs):
        res = query(db, desc, opts.metric, k=kmax, normalize=opts.normalize_l1, concat_cosine=opts.concat_cosine)
        poses = [pose_of[i] for i in res.ids]
        cand_positions.append(np.stack([p.position for p in poses]))
        gt_positions.append(rec.pose.position)
        top1.append(poses[0].position)
        errors.append(pose_error_from(poses[0], rec.pose))
    report = EvalReport(
        buckets=precision_buckets(errors),
        recall_at_n=recall_at_n(cand_positions, gt_positions, opts.recall_n, opts.radius_m),
        top1_recall_at_d=top1_recall_at_d(top1, gt_positions, opts.d_thresholds),
        meta={
            "checkpoint_digest": digest.hex(),
            "metric": opts.metric,
            "layers": list(layers),
            "dataset_digest": manifest_digest(manifest),
            "radius_m": opts.radius_m,
            "queries": len(q_recs),
            "database": len(db_recs),
            **(meta or {}),
        },
    )
    return report.validate()


# --------------------------------------------------------------------------- domain probe

class ProbeNet(nn.Module):
    """Fresh flatten-style classifier: BatchNorm over concatenated levels, then three linear layers."""

    def __init__(self, dim: int, hidden=(64, 64)):
        super().__init__()
        self.net = nn.Sequential(
            nn.BatchNorm1d(dim),
            nn.Linear(dim, hidden[0]), nn.LeakyReLU(0.2),
            nn.Linear(hidden[0], hidden[1]), nn.LeakyReLU(0.2),
            nn.Linear(hidden[1], 1),
        )

    def forward(self, x):
        return self.net(x).squeeze(1)


def probe_features(params: ModelParams, manifest: DatasetManifest, records, layers=None) -> np.ndarray:
    layers = list(layers or range(1, params.config.encoder_layers + 1))
    params.eval()
    feats = []
    with torch.no_grad():
        for start in range(0, len(records), 32):
            chunk = records[start:start + 32]
            imgs = np.stack([im for _, im in _images(manifest, chunk, params.config)])
            x = torch.from_numpy(imgs.transpose(0, 3, 1, 2).copy()).float() * 2.0 - 1.0
            pyr = encode(params, x)
            feats.append(torch.cat([pyr.level(l).flatten(1) for l in layers], 1).numpy())
    return np.concatenate(feats).astype(np.float32)


def probe_split(manifest: DatasetManifest, seed: int = 0):
    """Balanced virtual/real sets split by sequence: even-indexed sequences train, the rest test."""
    seqs = sorted({r.sequence for r in manifest.records})
    if len(seqs) < 2:
        raise InvalidConfig("domain probe needs at least two sequences")
    train_seqs = set(seqs[0::2])
    rng = np.random.default_rng([seed, 303])
    out = {}
    for part, keep in (("train", lambda s: s in train_seqs), ("test", lambda s: s not in train_seqs)):
        real = [r for r in manifest.records if r.domain == "real" and keep(r.sequence)]
        virt = [r for r in manifest.records if r.domain == "virtual" and keep(r.sequence)]
        pick = rng.choice(len(virt), size=min(len(real), len(virt)), replace=False)
        virt = [virt[i] for i in sorted(pick)]
        out[part] = (virt + real, np.array([0] * len(virt) + [1] * len(real), dtype=np.float32))
    return out


def domain_probe_accuracy(params: ModelParams, manifest: DatasetManifest, seed: int = 0,
                          steps: int = 300, lr: float = 1e-3, layers=None) -> float:
    """Train a fresh domain classifier on frozen features and return held-out accuracy (0..1)."""
    split = probe_split(manifest, seed)
    Xtr = torch.from_numpy(probe_features(params, manifest, split["train"][0], layers))
    ytr = torch.from_numpy(split["train"][1])
    Xte = torch.from_numpy(probe_features(params, manifest, split["test"][0], layers))
    yte = torch.from_numpy(split["test"][1])
    torch.manual_seed(seed)
    probe = ProbeNet(Xtr.shape[1])
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    lossf = nn.BCEWithLogitsLoss()
    gen = torch.Generator().manual_seed(seed)
    for _ in range(steps):
        idx = torch.randperm(len(Xtr), generator=gen)[:32]
        probe.train()
        loss = lossf(probe(Xtr[idx]), ytr[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    probe.eval()
    with torch.no_grad():
        pred = (probe(Xte) > 0).float()
    return float((pred == yte).float().mean())


# --------------------------------------------------------------------------- variants

@dataclass(frozen=True)
class Variant:
    name: str
    description: str


VARIANTS = {
    "full": Variant("full", "depth + segmentation + multi-level flatten discriminator + multi-level triplet"),
    "depth-only": Variant("depth-only", "no segmentation generator loss"),
    "seg-only": Variant("seg-only", "no depth generator loss"),
    "no-gan": Variant("no-gan", "no adversarial training"),
    "single-fd": Variant("single-fd", "flatten discriminator on a single level"),
    "multi-fd": Variant("multi-fd", "flatten discriminator on all levels"),
    "multi-cd": Variant("multi-cd", "cascade discriminator on all levels"),
    "single-triplet": Variant("single-triplet", "triplet loss on a single level"),
    "multi-triplet": Variant("multi-triplet", "triplet loss on the middle levels"),
    "single-layer-retrieval": Variant("single-layer-retrieval", "retrieve with one level"),
    "multi-layer-retrieval": Variant("multi-layer-retrieval", "retrieve with two levels"),
}
ARCH_VARIANTS = ["depth-only", "seg-only", "no-gan", "single-fd", "multi-fd", "multi-cd", "single-triplet", "multi-triplet"]
RETRIEVAL_VARIANTS = ["single-layer-retrieval", "multi-layer-retrieval"]


def single_level(cfg: RunConfig) -> int:
    """The level used by single-level variants: the first configured retrieval level."""
    return cfg.net.retrieval_layers[0]


def apply_variant(base: RunConfig, name: str) -> RunConfig:
    """Training config for a variant, plus the retrieval layers it evaluates with (on ``net``)."""
    if name not in VARIANTS:
        raise InvalidConfig(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    cfg = base.copy()
    net, tr = cfg.net, cfg.train
    one = single_level(base)
    if name == "depth-only":
        tr.weights.lambda_S = 0.0
    elif name == "seg-only":
        tr.weights.lambda_D = 0.0
    elif name == "no-gan":
        tr.use_gan = False
    elif name == "single-fd":
        net.discriminator_kind, net.discriminator_layers = "flatten", [one]
        net.retrieval_layers = [one]
    elif name == "multi-cd":
        net.discriminator_kind, net.discriminator_layers = "cascade", None
        net.retrieval_layers = [one]
    elif name == "single-triplet":
        net.triplet_layers = [one]
    elif name == "single-layer-retrieval":
        net.retrieval_layers = [one]
    return cfg.validate()


def training_key(cfg: RunConfig) -> str:
    """Variants that differ only in retrieval layers share one training run."""
    d = cfg.to_dict()
    d["net"].pop("retrieval_layers")
    d.pop("eval")
    d["train"].pop("log_path", None)
    d["train"].pop("checkpoint_path", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def run_ablation(base: RunConfig, manifest: DatasetManifest, variants, out_dir, plots: bool = False) -> dict:
    """Train every variant with the shared seed, write one report per variant and a comparison table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfgs = {v: apply_variant(base, v) for v in variants}  # reject bad variants before any training
    trained = {}
    reports = {}
    for v, cfg in cfgs.items():
        key = training_key(cfg)
        vdir = out / v
        vdir.mkdir(exist_ok=True)
        if key not in trained:
            cfg.train.log_path = str(vdir / "train_log.jsonl")
            cfg.train.checkpoint_path = str(vdir / "checkpoint.dgck")
            Path(cfg.train.log_path).unlink(missing_ok=True)
            log.info("training variant %s", v)
            state, logs = train(manifest, cfg.net, cfg.train)
            trained[key] = (state.params, v, logs)
        params, trained_as, logs = trained[key]
        rep = evaluate_localization(params, manifest, cfg.eval, cfg.net.retrieval_layers,
                                    meta={"variant": v, "trained_as": trained_as,
                                          "final_step_log": logs[-1].to_json() if logs else None})
        emit_report(rep, vdir / "report.json", plots=plots)
        reports[v] = rep
    write_comparison_table(reports, out / "comparison.md")
    return reports


def write_comparison_table(reports: dict, path) -> None:
    lines = ["| variant | high | medium | coarse | R@1 | R@5 | top1@D(min) | top1@D(max) |",
             "|---|---|---|---|---|---|---|---|"]
    for v, r in reports.items():
        rn = dict(r.recall_at_n)
        lines.append(
            f"| {v} | {r.buckets['high']:.1f} | {r.buckets['medium']:.1f} | {r.buckets['coarse']:.1f} "
            f"| {rn.get(1, float('nan')):.1f} | {rn.get(5, float('nan')):.1f} "
            f"| {r.top1_recall_at_d[0][1]:.1f} | {r.top1_recall_at_d[-1][1]:.1f} |"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------- the domain-adaptation study

@dataclass
class StudyResult:
    seed: int
    recall1_full: float
    recall1_nogan: float
    probe_full: float
    probe_nogan: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


def run_domain_study(base: RunConfig, manifest: DatasetManifest, seed: int) -> StudyResult:
    """Train full DASGIL-FD and the no-GAN ablation with one seed; compare retrieval and probe accuracy."""
    results = {}
    for v in ("full", "no-gan"):
        cfg = apply_variant(base, v)
        cfg.train.seed = seed
        state, _ = train(manifest, cfg.net, cfg.train)
        rep = evaluate_localization(state.params, manifest, cfg.eval, cfg.net.retrieval_layers)
        acc = domain_probe_accuracy(state.params, manifest, seed=seed)
        results[v] = (rep.recall(1), acc)
        log.info("seed %d %s: R@1=%.1f probe=%.3f", seed, v, rep.recall(1), acc)
    return StudyResult(seed, results["full"][0], results["no-gan"][0], results["full"][1], results["no-gan"][1])
