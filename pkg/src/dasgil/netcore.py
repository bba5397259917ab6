"""Encoder, dual U-Net decoders, flatten/cascade discriminators and the DGCK checkpoint format."""
from __future__ import annotations

import io
import json
import math
import struct
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DasgilIOError, InvalidConfig, LayerOutOfRange, ShapeMismatch, VersionMismatch

BASE_CHANNELS = (16, 32, 64, 64, 128, 128, 256, 256)
REFERENCE_FD_INPUT_WIDTH = 1004800  # reference constant for the 256x1024, 8-layer setup
DISCRIMINATOR_KINDS = ("flatten", "cascade")


@dataclass
class NetConfig:
    input_height: int = 256
    input_width: int = 1024
    input_channels: int = 3
    encoder_layers: int = 8
    channels_per_layer: Optional[list] = None
    width_multiplier: float = 1.0
    class_count: int = 6
    depth_output_layers: list = field(default_factory=lambda: [4, 3, 2, 1])
    triplet_layers: list = field(default_factory=lambda: [3, 4, 5, 6])
    retrieval_layers: Optional[list] = None
    discriminator_kind: str = "flatten"
    # levels the discriminator sees; None means all of them
    discriminator_layers: Optional[list] = None
    fd_hidden: tuple = (64, 64)
    cd_final_dim: int = 1536

    def __post_init__(self):
        if self.channels_per_layer is None:
            self.channels_per_layer = [
                max(1, int(round(c * self.width_multiplier))) for c in BASE_CHANNELS[: self.encoder_layers]
            ]
        n = self.encoder_layers
        # layer-indexed defaults written for 8 layers are clipped to what exists
        self.depth_output_layers = [l for l in self.depth_output_layers if l <= n]
        self.triplet_layers = [l for l in self.triplet_layers if l <= n]
        if self.retrieval_layers is None:
            default = [5, 6] if self.discriminator_kind == "flatten" else [5]
            self.retrieval_layers = [l for l in default if l <= n] or [n]
        self.fd_hidden = tuple(self.fd_hidden)
        self.channels_per_layer = list(self.channels_per_layer)

    def validate(self):
        n = self.encoder_layers
        if not 1 <= n <= 8:
            raise InvalidConfig("encoder_layers must be in 1..8")
        if self.input_channels != 3:
            raise InvalidConfig("input_channels must be 3")
        if len(self.channels_per_layer) != n:
            raise InvalidConfig("channels_per_layer must list one width per encoder layer")
        if self.input_height % (2 ** n) or self.input_width % (2 ** n):
            raise InvalidConfig(f"input dims must be divisible by 2^{n}")
        if self.class_count < 2:
            raise InvalidConfig("class_count must be >= 2")
        if self.discriminator_kind not in DISCRIMINATOR_KINDS:
            raise InvalidConfig(f"discriminator_kind must be one of {DISCRIMINATOR_KINDS}")
        for name in ("depth_output_layers", "triplet_layers", "retrieval_layers"):
            layers = getattr(self, name)
            if not layers:
                raise InvalidConfig(f"{name} must not be empty")
            if any(not 1 <= l <= n for l in layers):
                raise InvalidConfig(f"{name} must lie within 1..{n}")
        if self.discriminator_layers is not None:
            dl = list(self.discriminator_layers)
            if not dl or any(not 1 <= l <= n for l in dl) or dl != sorted(set(dl)):
                raise InvalidConfig("discriminator_layers must be sorted, unique, within range")
        return self

    def level_shape(self, i: int) -> tuple:
        """(channels, h, w) of pyramid level i (1-based)."""
        if not 1 <= i <= self.encoder_layers:
            raise LayerOutOfRange(f"layer {i} not in 1..{self.encoder_layers}")
        s = 2 ** i
        return (self.channels_per_layer[i - 1], self.input_height // s, self.input_width // s)

    def disc_levels(self) -> list:
        return list(self.discriminator_layers or range(1, self.encoder_layers + 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fd_hidden"] = list(self.fd_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


def flatten_dim(config: NetConfig, layers=None) -> int:
    layers = config.disc_levels() if layers is None else layers
    return sum(math.prod(config.level_shape(i)) for i in layers)


class FeaturePyramid:
    """Batched encoder outputs; ``level(1)`` is the shallowest, largest map."""

    def __init__(self, levels):
        self.levels = list(levels)

    def __len__(self):
        return len(self.levels)

    def level(self, i: int) -> torch.Tensor:
        if not 1 <= i <= len(self.levels):
            raise LayerOutOfRange(f"layer {i} not in 1..{len(self.levels)}")
        return self.levels[i - 1]

    def detach(self) -> "FeaturePyramid":
        return FeaturePyramid([l.detach() for l in self.levels])

    def select(self, idx) -> "FeaturePyramid":
        return FeaturePyramid([l[idx] for l in self.levels])

    @staticmethod
    def cat(pyramids) -> "FeaturePyramid":
        return FeaturePyramid([torch.cat(ls, 0) for ls in zip(*(p.levels for p in pyramids))])


# --------------------------------------------------------------------------- modules

class Extractor(nn.Module):
    def __init__(self, config: NetConfig):
        super().__init__()
        chans = [config.input_channels] + list(config.channels_per_layer)
        self.layers = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(chans[i], chans[i + 1], 4, stride=2, padding=1),
                nn.BatchNorm2d(chans[i + 1]),
                nn.LeakyReLU(0.2),
            )
            for i in range(config.encoder_layers)
        )

    def forward(self, x):
        levels = []
        for layer in self.layers:
            x = layer(x)
            levels.append(x)
        return levels


class MapGenerator(nn.Module):
    """U-Net decoder: stage k upsamples to the resolution of level k, fusing the level k+1 skip."""

    def __init__(self, config: NetConfig, out_channels: int, head_layers=()):
        super().__init__()
        n = config.encoder_layers
        c = list(config.channels_per_layer)
        self.n = n
        ups = {}
        for k in range(n - 1, -1, -1):
            cin = c[n - 1] if k == n - 1 else c[k] * 2  # decoder width at level k+1 equals c[k]
            cout = c[k - 1] if k >= 1 else max(c[0] // 2, 8)
            ups[str(k)] = nn.Sequential(
                nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1),
                nn.BatchNorm2d(cout),
                nn.ReLU(),
            )
        self.ups = nn.ModuleDict(ups)
        self.heads = nn.ModuleDict(
            {str(i): nn.Conv2d(c[i - 1] * (1 if i == n else 2), out_channels, 1) for i in head_layers}
        )
        self.final = nn.Conv2d(max(c[0] // 2, 8), out_channels, 3, padding=1)

    def forward(self, levels):
        """Returns (per-level head outputs dict, full-resolution output)."""
        x = levels[self.n - 1]
        heads = {}
        if str(self.n) in self.heads:
            heads[self.n] = self.heads[str(self.n)](x)
        for k in range(self.n - 1, -1, -1):
            if k < self.n - 1:
                x = torch.cat([x, levels[k]], 1)
            x = self.ups[str(k)](x)
            if k >= 1 and str(k) in self.heads:
                heads[k] = self.heads[str(k)](torch.cat([x, levels[k - 1]], 1))
        return heads, self.final(x)


class FlattenDiscriminator(nn.Module):
    def __init__(self, config: NetConfig):
        super().__init__()
        self.layers = config.disc_levels()
        dim = flatten_dim(config, self.layers)
        h1, h2 = config.fd_hidden
        self.input_dim = dim
        self.norm = nn.BatchNorm1d(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, h1), nn.LeakyReLU(0.2),
            nn.Linear(h1, h2), nn.LeakyReLU(0.2),
            nn.Linear(h2, 1),
        )

    def forward(self, levels):
        flat = torch.cat([levels[i - 1].flatten(1) for i in self.layers], 1)
        return self.mlp(self.norm(flat)).squeeze(1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, stride=2, padding=1),
            nn.BatchNorm2d(cout),
            nn.LeakyReLU(0.2),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
        )
        self.skip = nn.Conv2d(cin, cout, 1, stride=2)
        self.in_channels, self.out_channels = cin, cout

    def forward(self, x):
        return F.leaky_relu(self.body(x) + self.skip(x), 0.2)


class CascadeDiscriminator(nn.Module):
    """Level 1 -> ResBlock -> concat level 2 -> ResBlock -> ... -> concat level n -> MLP."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.layers = config.disc_levels()
        if any(b - a != 1 for a, b in zip(self.layers, self.layers[1:])):
            raise InvalidConfig("cascade discriminator needs consecutive levels")
        c = config.channels_per_layer
        blocks = []
        for j, lvl in enumerate(self.layers[:-1]):
            cin = c[lvl - 1] * (1 if j == 0 else 2)
            blocks.append(ResBlock(cin, c[lvl]))
        self.blocks = nn.ModuleList(blocks)
        last = self.layers[-1]
        ch, h, w = config.level_shape(last)
        carried = 2 if len(self.layers) > 1 else 1
        self.head = nn.Sequential(
            nn.Linear(carried * ch * h * w, config.cd_final_dim),
            nn.LeakyReLU(0.2),
            nn.Linear(config.cd_final_dim, 1),
        )

    def forward(self, levels):
        x = levels[self.layers[0] - 1]
        for block, lvl in zip(self.blocks, self.layers[1:]):
            x = torch.cat([block(x), levels[lvl - 1]], 1)
        return self.head(x.flatten(1)).squeeze(1)


class ModelParams(nn.Module):
    """Parameter container for extractor, depth generator, segmentation generator and discriminator."""

    def __init__(self, config: NetConfig, version: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        self.version = version
        self.extractor = Extractor(config)
        self.depth_gen = MapGenerator(config, 1, head_layers=config.depth_output_layers)
        self.seg_gen = MapGenerator(config, config.class_count)
        if config.discriminator_kind == "flatten":
            self.discriminator = FlattenDiscriminator(config)
        else:
            self.discriminator = CascadeDiscriminator(config)

    def generator_modules(self):
        return [self.extractor, self.depth_gen, self.seg_gen]

    def generator_parameters(self):
        return [p for m in self.generator_modules() for p in m.parameters()]


COLLECTIONS = ("extractor", "depth_gen", "seg_gen", "discriminator")


def init_params(config: NetConfig, seed: int) -> ModelParams:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)), drawn from a private generator."""
    config.validate()
    gen = torch.Generator().manual_seed(int(seed))
    params = ModelParams(config)
    with torch.no_grad():
        for name, p in params.named_parameters():
            mod_name = name.rsplit(".", 1)[0]
            mod = params.get_submodule(mod_name)
            if isinstance(mod, nn.BatchNorm2d | nn.BatchNorm1d):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
                continue
            if isinstance(mod, nn.ConvTranspose2d):
                fan_in = mod.in_channels * math.prod(mod.kernel_size) // math.prod(mod.stride)
            elif isinstance(mod, nn.Conv2d):
                fan_in = mod.in_channels * math.prod(mod.kernel_size)
            else:
                fan_in = mod.in_features
            bound = 1.0 / math.sqrt(max(fan_in, 1))
            p.copy_(torch.rand(p.shape, generator=gen) * 2 * bound - bound)
    return params


# --------------------------------------------------------------------------- forward API

def _check_images(config: NetConfig, images: torch.Tensor):
    if images.dim() != 4 or tuple(images.shape[1:]) != (config.input_channels, config.input_height, config.input_width):
        raise ShapeMismatch(
            f"expected (B, {config.input_channels}, {config.input_height}, {config.input_width}), got {tuple(images.shape)}"
        )


def _check_pyramid(config: NetConfig, pyr: FeaturePyramid):
    if len(pyr) != config.encoder_layers:
        raise ShapeMismatch(f"pyramid has {len(pyr)} levels, config expects {config.encoder_layers}")
    for i, lvl in enumerate(pyr.levels, start=1):
        if tuple(lvl.shape[1:]) != config.level_shape(i):
            raise ShapeMismatch(f"level {i}: {tuple(lvl.shape[1:])} != {config.level_shape(i)}")


def encode(params: ModelParams, images: torch.Tensor) -> FeaturePyramid:
    _check_images(params.config, images)
    return FeaturePyramid(params.extractor(images))


def decode_depth(params: ModelParams, pyramid: FeaturePyramid) -> dict:
    """Nonnegative depth predictions keyed by layer index, each at that layer's resolution."""
    _check_pyramid(params.config, pyramid)
    heads, _ = params.depth_gen(pyramid.levels)
    return {i: F.softplus(heads[i]) for i in params.config.depth_output_layers}


def decode_seg(params: ModelParams, pyramid: FeaturePyramid) -> torch.Tensor:
    """Raw class scores (B, M, H, W) at full input resolution."""
    _check_pyramid(params.config, pyramid)
    _, scores = params.seg_gen(pyramid.levels)
    return scores


def seg_probabilities(scores: torch.Tensor) -> torch.Tensor:
    return torch.softmax(scores, dim=1)


def discriminate(params: ModelParams, pyramid: FeaturePyramid) -> torch.Tensor:
    _check_pyramid(params.config, pyramid)
    return params.discriminator(pyramid.levels)


def discriminate_flatten(params: ModelParams, pyramid: FeaturePyramid) -> torch.Tensor:
    if not isinstance(params.discriminator, FlattenDiscriminator):
        raise InvalidConfig("model was built with a cascade discriminator")
    return discriminate(params, pyramid)


def discriminate_cascade(params: ModelParams, pyramid: FeaturePyramid) -> torch.Tensor:
    if not isinstance(params.discriminator, CascadeDiscriminator):
        raise InvalidConfig("model was built with a flatten discriminator")
    return discriminate(params, pyramid)


# --------------------------------------------------------------------------- tensor collections

def named_tensors(module: nn.Module) -> dict:
    """Parameters and buffers in registration order (the checkpoint's blob list)."""
    return dict(module.state_dict(keep_vars=False))


def snapshot(module: nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


@contextmanager
def frozen_bn_stats(*modules: nn.Module):
    """Run batch-statistics forwards without letting BatchNorm buffers drift."""
    saved = [snapshot(m) for m in modules]
    try:
        yield
    finally:
        with torch.no_grad():
            for m, snap in zip(modules, saved):
                for k, v in m.state_dict().items():
                    if not torch.equal(v, snap[k]):
                        v.copy_(snap[k])


def same_tensors(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


# --------------------------------------------------------------------------- DGCK checkpoints

CKPT_MAGIC = b"DGCK"
CKPT_VERSION = 1


def write_checkpoint(fh, config: NetConfig, tensors: dict, extra: Optional[dict] = None) -> None:
    """Header: magic, u16 version, u32 header length, JSON header; then raw little-endian blobs.

    Float tensors are stored as float32; integer buffers (BatchNorm counters) as int64.
    """
    entries, blobs = [], []
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.is_floating_point():
            arr = t.to(torch.float32).numpy().astype("<f4")
            dtype = "f4"
        else:
            arr = t.to(torch.int64).numpy().astype("<i8")
            dtype = "i8"
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": dtype, "nbytes": len(raw)})
        blobs.append(raw)
    header = json.dumps(
        {"net_config": config.to_dict(), "entries": entries, "extra": extra or {}}, sort_keys=True
    ).encode("utf-8")
    fh.write(CKPT_MAGIC)
    fh.write(struct.pack("<HI", CKPT_VERSION, len(header)))
    fh.write(header)
    for raw in blobs:
        fh.write(raw)


def read_checkpoint(fh):
    """Returns (NetConfig, tensors dict, extra dict)."""
    magic = fh.read(4)
    if magic != CKPT_MAGIC:
        raise VersionMismatch(f"bad checkpoint magic {magic!r}")
    head = fh.read(6)
    if len(head) != 6:
        raise VersionMismatch("truncated checkpoint header")
    version, hlen = struct.unpack("<HI", head)
    if version != CKPT_VERSION:
        raise VersionMismatch(f"checkpoint format version {version} != {CKPT_VERSION}")
    raw_header = fh.read(hlen)
    if len(raw_header) != hlen:
        raise VersionMismatch("truncated checkpoint header")
    try:
        header = json.loads(raw_header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VersionMismatch("corrupt checkpoint header") from exc
    tensors = {}
    for e in header["entries"]:
        raw = fh.read(e["nbytes"])
        if len(raw) != e["nbytes"]:
            raise VersionMismatch(f"truncated checkpoint blob {e['name']!r}")
        dtype = "<f4" if e["dtype"] == "f4" else "<i8"
        arr = np.frombuffer(raw, dtype=dtype).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(dtype[1:], copy=True))
    if fh.read(1):
        raise VersionMismatch("trailing bytes after checkpoint blobs")
    return NetConfig.from_dict(header["net_config"]), tensors, header.get("extra", {})


def params_to_bytes(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    write_checkpoint(buf, params.config, named_tensors(params), {"version": params.version})
    return buf.getvalue()


def save_params(params: ModelParams, path) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(params_to_bytes(params))
    except OSError as exc:
        raise DasgilIOError(str(exc)) from exc


def load_params(path, expect_config: Optional[NetConfig] = None) -> ModelParams:
    try:
        with open(path, "rb") as fh:
            config, tensors, extra = read_checkpoint(fh)
    except OSError as exc:
        raise DasgilIOError(str(exc)) from exc
    if expect_config is not None and expect_config.to_dict() != config.to_dict():
        raise VersionMismatch("checkpoint NetConfig differs from the expected configuration")
    params = ModelParams(config, version=int(extra.get("version", 0)))
    model_keys = [k for k in named_tensors(params)]
    missing = [k for k in model_keys if k not in tensors]
    if missing:
        raise VersionMismatch(f"checkpoint lacks tensors: {missing[:3]}")
    params.load_state_dict({k: tensors[k] for k in model_keys})
    return params


def params_digest(params: ModelParams) -> bytes:
    import hashlib

    return hashlib.sha256(params_to_bytes(params)).digest()
