"""Alternating adversarial training: a discriminator step, then a generator step, every iteration."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import dataman
from .dataman import DatasetManifest, augment_pair, crop_to_shape, sample_triplet
from .errors import DasgilIOError, EmptyDomain, InvalidConfig, NonFiniteLoss, NoValidPositive, VersionMismatch
from .losses import (
    LossWeights,
    depth_loss,
    dis_loss,
    gen_loss,
    seg_loss,
    total_gen_objective,
    triplet_loss_multi,
)
from .netcore import (
    FeaturePyramid,
    ModelParams,
    NetConfig,
    decode_depth,
    decode_seg,
    discriminate,
    encode,
    frozen_bn_stats,
    init_params,
    read_checkpoint,
    write_checkpoint,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 0.005
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 5
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    use_gan: bool = True
    random_crop: bool = False
    checkpoint_every: int = 0
    max_steps: Optional[int] = None
    log_path: Optional[str] = None
    checkpoint_path: Optional[str] = None

    def validate(self):
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise InvalidConfig("learning_rate must be >= 0")
        if self.epochs < 1:
            raise InvalidConfig("epochs must be >= 1")
        self.weights.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["weights"]["margins"] = {str(k): v for k, v in self.weights.margins.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            w = dict(d["weights"])
            w["margins"] = {int(k): float(v) for k, v in w.get("margins", {}).items()}
            d["weights"] = LossWeights(**w)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class BatchBundle:
    anchors: torch.Tensor
    positives: torch.Tensor
    negatives: torch.Tensor
    anchor_depth: torch.Tensor
    anchor_seg: torch.Tensor
    real: torch.Tensor
    triplet_ids: list
    real_ids: list

    def __len__(self):
        return self.anchors.shape[0]


@dataclass
class StepLog:
    step: int
    L_dis: float
    L_gen: float
    L_T: float
    L_D: float
    L_S: float
    total: float
    wallclock_ms: float

    def to_json(self) -> dict:
        return asdict(self)


class TrainState:
    def __init__(self, params: ModelParams, config: TrainConfig, step: int = 0):
        self.params = params
        self.config = config
        self.step = step
        self.seed = config.seed
        kw = dict(lr=config.learning_rate, betas=tuple(config.betas), eps=config.eps)
        self.opt_d = torch.optim.Adam(params.discriminator.parameters(), **kw)
        self.opt_g = torch.optim.Adam(params.generator_parameters(), **kw)

    @classmethod
    def fresh(cls, net_config: NetConfig, config: TrainConfig) -> "TrainState":
        return cls(init_params(net_config, config.seed), config)


# --------------------------------------------------------------------------- data

def to_tensor(img: np.ndarray) -> torch.Tensor:
    """(H,W,3) in [0,1] -> (3,H,W) in [-1,1]."""
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)) * 2.0 - 1.0).float()


class SampleStore:
    """In-memory cache of decoded images and ground truth."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache = {}

    def image(self, rid):
        key = ("img", rid)
        if key not in self._cache:
            self._cache[key] = dataman.load_image(self.manifest, self.manifest.by_id[rid])
        return self._cache[key]

    def depth(self, rid):
        key = ("depth", rid)
        if key not in self._cache:
            self._cache[key] = dataman.load_depth(self.manifest, self.manifest.by_id[rid])
        return self._cache[key]

    def seg(self, rid):
        key = ("seg", rid)
        if key not in self._cache:
            self._cache[key] = dataman.load_seg(self.manifest, self.manifest.by_id[rid])
        return self._cache[key]


def _crop(stack, net: NetConfig, rng, random_crop):
    return crop_to_shape(stack, net.input_height, net.input_width, rng if random_crop else None)


def assemble_batch(manifest: DatasetManifest, net_config: NetConfig, config: TrainConfig,
                   rng: np.random.Generator, anchors=None, store: Optional[SampleStore] = None) -> BatchBundle:
    """Sample ``batch_size`` triplets (shared flip on anchor/positive, flipped negative) and real images."""
    real = manifest.real()
    if not real:
        raise EmptyDomain("manifest has no real-domain records")
    store = store or SampleStore(manifest)
    B = config.batch_size
    anchors = list(anchors) if anchors is not None else [None] * B
    A, P, N, D, S, ids = [], [], [], [], [], []
    for anchor in anchors:
        t = sample_triplet(manifest, rng, anchor=anchor)
        a_img = store.image(t.anchor)
        a_stack = np.concatenate([a_img, store.depth(t.anchor)[..., None], store.seg(t.anchor)[..., None].astype(np.float32)], -1)
        a_stack, p_img = augment_pair(a_stack, store.image(t.positive), rng)
        a_stack, = _crop([a_stack], net_config, rng, config.random_crop)
        p_img, = _crop([p_img], net_config, rng, config.random_crop)
        n_img, = _crop([store.image(t.negative)[:, ::-1]], net_config, rng, config.random_crop)
        A.append(to_tensor(a_stack[..., :3]))
        D.append(torch.from_numpy(np.ascontiguousarray(a_stack[..., 3])).float())
        S.append(torch.from_numpy(np.ascontiguousarray(a_stack[..., 4])).long())
        P.append(to_tensor(p_img))
        N.append(to_tensor(n_img))
        ids.append(t)
    R, rids = [], []
    for _ in range(len(anchors)):
        rec = real[int(rng.integers(len(real)))]
        img = store.image(rec.id)
        if rng.random() < 0.5:
            img = img[:, ::-1]
        img, = _crop([img], net_config, rng, config.random_crop)
        R.append(to_tensor(img))
        rids.append(rec.id)
    return BatchBundle(
        anchors=torch.stack(A), positives=torch.stack(P), negatives=torch.stack(N),
        anchor_depth=torch.stack(D).unsqueeze(1), anchor_seg=torch.stack(S),
        real=torch.stack(R), triplet_ids=ids, real_ids=rids,
    )


# --------------------------------------------------------------------------- one step

@dataclass
class EncodedBatch:
    anchor: FeaturePyramid
    positive: FeaturePyramid
    negative: FeaturePyramid
    real: FeaturePyramid


def encode_batch(state: TrainState, batch: BatchBundle) -> EncodedBatch:
    """One encoder pass over all four image groups so BatchNorm sees both domains together."""
    state.params.train()
    B = len(batch)
    images = torch.cat([batch.anchors, batch.positives, batch.negatives, batch.real], 0)
    pyr = encode(state.params, images)
    return EncodedBatch(*(pyr.select(slice(k * B, (k + 1) * B)) for k in range(4)))


def _check_finite(**losses):
    for name, v in losses.items():
        if not math.isfinite(float(v.detach() if torch.is_tensor(v) else v)):
            raise NonFiniteLoss(f"{name} became non-finite ({float(v)}); adversarial training diverged")


def discriminator_phase(state: TrainState, enc: EncodedBatch) -> float:
    """Update only the discriminator on the least-squares domain objective."""
    if not state.config.use_gan:
        return 0.0
    B = enc.anchor.levels[0].shape[0]
    both = FeaturePyramid.cat([enc.anchor.detach(), enc.real.detach()])
    scores = discriminate(state.params, both)
    loss = dis_loss(scores[:B], scores[B:])
    _check_finite(L_dis=loss)
    state.opt_d.zero_grad(set_to_none=True)
    loss.backward()
    state.opt_d.step()
    return float(loss.detach())


def generator_phase(state: TrainState, enc: EncodedBatch, batch: BatchBundle) -> dict:
    """Update only extractor and generators on the weighted generator-side objective."""
    cfg, w, params = state.config, state.config.weights, state.params
    net = params.config
    zero = batch.anchors.new_zeros(())
    B = len(batch)

    # D runs with batch statistics here, but its running buffers must stay untouched
    with frozen_bn_stats(params.discriminator):
        if cfg.use_gan:
            both = FeaturePyramid.cat([enc.anchor, enc.real.detach()])
            l_gen = gen_loss(discriminate(params, both)[:B])
        else:
            l_gen = zero
        l_t = (triplet_loss_multi(enc.anchor, enc.positive, enc.negative, net.triplet_layers,
                                  w.margin_map(net.triplet_layers))
               if w.lambda_T > 0 else zero)
        l_d = depth_loss(decode_depth(params, enc.anchor), batch.anchor_depth) if w.lambda_D > 0 else zero
        l_s = seg_loss(decode_seg(params, enc.anchor), batch.anchor_seg) if w.lambda_S > 0 else zero
        _check_finite(L_gen=l_gen, L_T=l_t, L_D=l_d, L_S=l_s)
        total = total_gen_objective(l_gen, l_t, l_d, l_s, w)
        state.opt_g.zero_grad(set_to_none=True)
        if total.requires_grad:
            total.backward()
        state.opt_g.step()
    # the generator pass also deposits gradients on D; they must not leak into the next D step
    state.opt_d.zero_grad(set_to_none=True)
    return {k: float(v.detach()) for k, v in (("L_gen", l_gen), ("L_T", l_t), ("L_D", l_d), ("L_S", l_s), ("total", total))}


def train_step(state: TrainState, batch: BatchBundle):
    t0 = time.perf_counter()
    enc = encode_batch(state, batch)
    l_dis = discriminator_phase(state, enc)
    g = generator_phase(state, enc, batch)
    state.step += 1
    return state, StepLog(step=state.step, L_dis=l_dis, wallclock_ms=(time.perf_counter() - t0) * 1e3, **g)


# --------------------------------------------------------------------------- loop

def steps_per_epoch(manifest: DatasetManifest, config: TrainConfig) -> int:
    """One epoch is one pass over the virtual anchor candidates."""
    return len(dataman.anchor_candidates(manifest)) // config.batch_size


def epoch_permutation(manifest: DatasetManifest, seed: int, epoch: int) -> list:
    cands = dataman.anchor_candidates(manifest)
    order = np.random.default_rng([seed, 101, epoch]).permutation(len(cands))
    return [cands[i] for i in order]


def total_steps(manifest: DatasetManifest, config: TrainConfig) -> int:
    n = config.epochs * steps_per_epoch(manifest, config)
    return n if config.max_steps is None else min(n, config.max_steps)


def train(manifest: DatasetManifest, net_config: NetConfig, config: TrainConfig,
          state: Optional[TrainState] = None, stop_at: Optional[int] = None, on_step=None):
    """Run (or resume) training; returns (state, list of StepLog)."""
    config.validate()
    net_config.validate()
    if not manifest.real():
        raise EmptyDomain("manifest has no real-domain records")
    if not manifest.virtual():
        raise EmptyDomain("manifest has no virtual-domain records")
    spe = steps_per_epoch(manifest, config)
    if spe == 0:
        raise NoValidPositive("not enough anchor candidates for a single batch")
    state = state or TrainState.fresh(net_config, config)
    n_total = total_steps(manifest, config)
    if stop_at is not None:
        n_total = min(n_total, stop_at)
    store = SampleStore(manifest)
    logs = []
    log_fh = open(config.log_path, "a", encoding="utf-8") if config.log_path else None
    perm_cache = {}
    try:
        while state.step < n_total:
            s = state.step
            epoch, i = divmod(s, spe)
            if epoch not in perm_cache:
                perm_cache = {epoch: epoch_permutation(manifest, config.seed, epoch)}
            anchors = perm_cache[epoch][i * config.batch_size:(i + 1) * config.batch_size]
            rng = np.random.default_rng([config.seed, 202, s])
            batch = assemble_batch(manifest, net_config, config, rng, anchors=anchors, store=store)
            state, entry = train_step(state, batch)
            logs.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry.to_json()) + "\n")
                log_fh.flush()
            if on_step:
                on_step(state, entry)
            if config.checkpoint_path and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_checkpoint(state, config.checkpoint_path)
            if state.step % max(spe, 1) == 0:
                log.info("epoch %d done: total=%.4f", state.step // spe, entry.total)
    finally:
        if log_fh:
            log_fh.close()
    if config.checkpoint_path:
        save_checkpoint(state, config.checkpoint_path)
    return state, logs


# --------------------------------------------------------------------------- checkpoints

def _optimizer_tensors(prefix: str, opt: torch.optim.Optimizer) -> dict:
    out = {}
    sd = opt.state_dict()
    for idx, st in sd["state"].items():
        for key, val in st.items():
            out[f"{prefix}/{idx}/{key}"] = val if torch.is_tensor(val) else torch.tensor(float(val))
    return out


def _load_optimizer(prefix: str, opt: torch.optim.Optimizer, tensors: dict):
    sd = opt.state_dict()
    state = {}
    for name, t in tensors.items():
        if not name.startswith(prefix + "/"):
            continue
        _, idx, key = name.split("/")
        state.setdefault(int(idx), {})[key] = t.clone()
    sd["state"] = state
    opt.load_state_dict(sd)


def state_tensors(state: TrainState) -> dict:
    tensors = {f"model/{k}": v for k, v in state.params.state_dict().items()}
    tensors.update(_optimizer_tensors("opt_d", state.opt_d))
    tensors.update(_optimizer_tensors("opt_g", state.opt_g))
    return tensors


def save_checkpoint(state: TrainState, path) -> None:
    extra = {
        "kind": "train_state",
        "step": state.step,
        "seed": state.seed,
        "version": state.params.version,
        "train_config": state.config.to_dict(),
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            write_checkpoint(fh, state.params.config, state_tensors(state), extra)
        tmp.replace(path)
    except OSError as exc:
        raise DasgilIOError(str(exc)) from exc


def load_checkpoint(path, expect_config: Optional[NetConfig] = None) -> TrainState:
    try:
        with open(path, "rb") as fh:
            net_config, tensors, extra = read_checkpoint(fh)
    except OSError as exc:
        raise DasgilIOError(str(exc)) from exc
    if expect_config is not None and expect_config.to_dict() != net_config.to_dict():
        raise VersionMismatch("checkpoint NetConfig differs from the expected configuration")
    params = ModelParams(net_config, version=int(extra.get("version", 0)))
    model = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")} or tensors
    try:
        params.load_state_dict(model)
    except RuntimeError as exc:
        raise VersionMismatch(str(exc)) from exc
    if extra.get("kind") != "train_state":
        # bare parameter checkpoint: fresh optimizer state
        return TrainState(params, TrainConfig())
    config = TrainConfig.from_dict(extra["train_config"])
    state = TrainState(params, config, step=int(extra["step"]))
    state.seed = int(extra["seed"])
    _load_optimizer("opt_d", state.opt_d, tensors)
    _load_optimizer("opt_g", state.opt_g, tensors)
    return state


def load_model(path) -> ModelParams:
    """Parameters from either a training-state or a bare checkpoint."""
    return load_checkpoint(path).params
