"""RunConfig: one JSON document holding network, training, data and evaluation settings."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .dataman import ToyWorldConfig
from .errors import InvalidConfig
from .losses import LossWeights
from .netcore import NetConfig
from .trainer import TrainConfig


@dataclass
class EvalOptions:
    metric: str = "l1"
    db_environment: str = "clone"
    db_domain: str = "virtual"
    query_domain: str = "real"
    recall_n: list = field(default_factory=lambda: [1, 2, 5, 10, 20])
    # scales the 25 m radius and the 15..50 m top-1 thresholds to the world's extent
    distance_scale: float = 1.0
    normalize_l1: bool = False
    concat_cosine: bool = False

    @property
    def radius_m(self) -> float:
        return 25.0 * self.distance_scale

    @property
    def d_thresholds(self) -> list:
        return [d * self.distance_scale for d in range(15, 55, 5)]


@dataclass
class RunConfig:
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    toy: ToyWorldConfig = field(default_factory=ToyWorldConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    paths: dict = field(default_factory=dict)

    def validate(self):
        self.net.validate()
        self.train.validate()
        self.train.weights.validate(self.net.triplet_layers)
        if self.eval.metric not in ("l1", "cosine"):
            raise InvalidConfig(f"unknown metric {self.eval.metric!r}")
        if self.net.discriminator_kind == "cascade" and self.net.discriminator_layers:
            dl = self.net.discriminator_layers
            if any(b - a != 1 for a, b in zip(dl, dl[1:])):
                raise InvalidConfig("cascade discriminator needs consecutive levels")
        toy = self.toy
        if (toy.image_height, toy.image_width) < (self.net.input_height, self.net.input_width):
            raise InvalidConfig("toy images are smaller than the network input")
        if toy.class_count != self.net.class_count:
            raise InvalidConfig("toy class_count must equal net class_count")
        return self

    def to_dict(self) -> dict:
        return {
            "net": self.net.to_dict(),
            "train": self.train.to_dict(),
            "toy": self.toy.to_dict(),
            "eval": asdict(self.eval),
            "paths": dict(self.paths),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        try:
            return cls(
                net=NetConfig.from_dict(d.get("net", {})),
                train=TrainConfig.from_dict(d.get("train", {})),
                toy=ToyWorldConfig.from_dict(d.get("toy", {})),
                eval=EvalOptions(**d.get("eval", {})),
                paths=dict(d.get("paths", {})),
            )
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from exc

    def copy(self) -> "RunConfig":
        return copy.deepcopy(self)


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``key.path=value`` strings; values parse as JSON when possible."""
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        if "=" not in item:
            raise InvalidConfig(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise InvalidConfig(f"cannot descend into {p!r} for override {item!r}")
        node[parts[-1]] = value
    return doc


def _merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_run_config(path=None, overrides=(), base: dict = None) -> RunConfig:
    """``base`` (e.g. a preset) is overlaid by the JSON file at ``path``, then by ``overrides``."""
    doc = copy.deepcopy(base) if base else {}
    if path is not None:
        try:
            doc = _merge(doc, json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(apply_overrides(doc, overrides)).validate()


def toy_run_config(seed: int = 0) -> RunConfig:
    """Desk-scale setup: 64x64 images, five encoder levels, 4 sequences x 16 frames x 3 environments."""
    net = NetConfig(
        input_height=64, input_width=64, encoder_layers=5, width_multiplier=0.5, class_count=6,
        depth_output_layers=[4, 3, 2, 1], triplet_layers=[2, 3, 4, 5], retrieval_layers=[4, 5],
        discriminator_kind="flatten", cd_final_dim=256,
    )
    train = TrainConfig(batch_size=8, epochs=5, seed=seed, weights=LossWeights())
    toy = ToyWorldConfig(image_height=64, image_width=64, sequences=4, frames_per_sequence=16,
                         class_count=6, seed=seed)
    return RunConfig(net=net, train=train, toy=toy, eval=EvalOptions(distance_scale=0.1))
