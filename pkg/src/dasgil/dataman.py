"""Dataset manifests, the procedural two-domain toy world, triplet sampling and augmentation."""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import (
    ClassOutOfRange,
    DasgilIOError,
    DimensionMismatch,
    DuplicateId,
    InvalidConfig,
    MalformedRecord,
    MissingFile,
    NoValidPositive,
    TargetTooLarge,
    VirtualMissingGroundTruth,
)

DOMAINS = ("virtual", "real")
POSITIVE_MAX_FRAME_GAP = 5
POSITIVE_MAX_ANGLE_DEG = 30.0


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    z: float
    qw: float = 1.0
    qx: float = 0.0
    qy: float = 0.0
    qz: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @property
    def quaternion(self) -> np.ndarray:
        return np.array([self.qw, self.qx, self.qy, self.qz], dtype=np.float64)


@dataclass(frozen=True)
class SampleRecord:
    id: str
    domain: str
    sequence: str
    frame: int
    environment: str
    camera_angle_deg: float
    image_path: str
    depth_path: Optional[str]
    seg_path: Optional[str]
    depth_scale: float
    pose: Pose

    def validate(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if self.domain == "virtual" and (not self.depth_path or not self.seg_path):
            raise VirtualMissingGroundTruth(self.id)
        if self.frame < 0:
            raise ValueError("frame must be >= 0")
        if not self.depth_scale > 0:
            raise ValueError("depth_scale must be > 0")
        if abs(float(np.linalg.norm(self.pose.quaternion)) - 1.0) > 1e-6:
            raise ValueError("pose quaternion is not unit norm")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "SampleRecord":
        pose = obj["pose"]
        return cls(
            id=str(obj["id"]),
            domain=str(obj["domain"]),
            sequence=str(obj["sequence"]),
            frame=int(obj["frame"]),
            environment=str(obj["environment"]),
            camera_angle_deg=float(obj["camera_angle_deg"]),
            image_path=str(obj["image_path"]),
            depth_path=obj.get("depth_path"),
            seg_path=obj.get("seg_path"),
            depth_scale=float(obj["depth_scale"]),
            pose=Pose(**{k: float(pose[k]) for k in ("x", "y", "z", "qw", "qx", "qy", "qz")}),
        )


@dataclass
class DatasetManifest:
    records: list
    class_count: int
    class_names: list
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.id in seen:
                raise DuplicateId(rec.id)
            seen.add(rec.id)
        if len(self.class_names) != self.class_count:
            raise InvalidConfig("class_names length must equal class_count")

    @cached_property
    def by_id(self) -> dict:
        return {r.id: r for r in self.records}

    def virtual(self) -> list:
        return [r for r in self.records if r.domain == "virtual"]

    def real(self) -> list:
        return [r for r in self.records if r.domain == "real"]

    def subset(self, domain=None, environment=None) -> "DatasetManifest":
        recs = [
            r for r in self.records
            if (domain is None or r.domain == domain)
            and (environment is None or r.environment == environment)
        ]
        return DatasetManifest(recs, self.class_count, list(self.class_names), self.root)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    @cached_property
    def triplet_index(self) -> "_TripletIndex":
        return _TripletIndex(self)


# --------------------------------------------------------------------------- manifest I/O

def load_manifest(path) -> DatasetManifest:
    """Read a JSON-Lines manifest.

    The first line may be a header object ``{"class_count": M, "class_names": [...]}``;
    every other line is one SampleRecord.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    class_count, class_names = None, None
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(lineno, str(exc)) from exc
            if not isinstance(obj, dict):
                raise MalformedRecord(lineno, "expected a JSON object")
            if "id" not in obj and "class_count" in obj:
                class_count = int(obj["class_count"])
                class_names = [str(n) for n in obj.get("class_names", [])]
                continue
            try:
                rec = SampleRecord.from_json(obj)
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedRecord(lineno, repr(exc)) from exc
            if rec.id in seen:
                raise DuplicateId(rec.id)
            seen.add(rec.id)
            try:
                rec.validate()
            except ValueError as exc:
                raise MalformedRecord(lineno, str(exc)) from exc
            records.append(rec)
    if class_count is None:
        raise MalformedRecord(0, "manifest header with class_count is missing")
    if not class_names:
        class_names = [f"class{i}" for i in range(class_count)]
    return DatasetManifest(records, class_count, class_names, root=path.parent)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    lines = [json.dumps({"class_count": manifest.class_count, "class_names": manifest.class_names})]
    lines += [json.dumps(r.to_json()) for r in manifest.records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_image(manifest: DatasetManifest, rec: SampleRecord) -> np.ndarray:
    """RGB image as float32 (H, W, 3) in [0, 1]."""
    with Image.open(manifest.resolve(rec.image_path)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_depth(manifest: DatasetManifest, rec: SampleRecord) -> np.ndarray:
    """Depth in meters as float32 (H, W); 0 marks invalid pixels."""
    if not rec.depth_path:
        raise VirtualMissingGroundTruth(rec.id)
    with Image.open(manifest.resolve(rec.depth_path)) as im:
        raw = np.asarray(im, dtype=np.uint16)
    return raw.astype(np.float32) * np.float32(rec.depth_scale)


def load_seg(manifest: DatasetManifest, rec: SampleRecord) -> np.ndarray:
    if not rec.seg_path:
        raise VirtualMissingGroundTruth(rec.id)
    with Image.open(manifest.resolve(rec.seg_path)) as im:
        seg = np.asarray(im, dtype=np.int64)
    if seg.size and seg.max() >= manifest.class_count:
        raise ClassOutOfRange(f"{rec.id}: class id {int(seg.max())} >= {manifest.class_count}")
    return seg


# --------------------------------------------------------------------------- triplets

@dataclass(frozen=True)
class TripletSpec:
    anchor: str
    positive: str
    negative: str


def is_positive_pair(a: SampleRecord, b: SampleRecord) -> bool:
    return (
        a.id != b.id
        and a.domain == "virtual"
        and b.domain == "virtual"
        and a.sequence == b.sequence
        and abs(a.frame - b.frame) <= POSITIVE_MAX_FRAME_GAP
        and (a.environment != b.environment or a.camera_angle_deg != b.camera_angle_deg)
        and abs(a.camera_angle_deg - b.camera_angle_deg) <= POSITIVE_MAX_ANGLE_DEG
    )


def is_different_scene(a: SampleRecord, b: SampleRecord) -> bool:
    return a.sequence != b.sequence or abs(a.frame - b.frame) > POSITIVE_MAX_FRAME_GAP


class _TripletIndex:
    def __init__(self, manifest: DatasetManifest):
        self.virtual = manifest.virtual()
        self.positives = {}
        self.negatives = {}
        for a in self.virtual:
            self.positives[a.id] = [b.id for b in self.virtual if is_positive_pair(a, b)]
            self.negatives[a.id] = [
                b.id for b in self.virtual if b.id != a.id and is_different_scene(a, b)
            ]
        self.anchor_candidates = [
            a.id for a in self.virtual if self.positives[a.id] and self.negatives[a.id]
        ]


def anchor_candidates(manifest: DatasetManifest) -> list:
    """Virtual record ids that admit at least one positive and one negative."""
    return list(manifest.triplet_index.anchor_candidates)


def sample_triplet(manifest: DatasetManifest, rng: np.random.Generator, anchor: Optional[str] = None) -> TripletSpec:
    idx = manifest.triplet_index
    if not idx.anchor_candidates:
        raise NoValidPositive("no virtual record has both a valid positive and a negative")
    if anchor is None:
        anchor = idx.anchor_candidates[int(rng.integers(len(idx.anchor_candidates)))]
    elif not idx.positives.get(anchor) or not idx.negatives.get(anchor):
        raise NoValidPositive(f"record {anchor!r} has no valid positive/negative")
    pos = idx.positives[anchor]
    neg = idx.negatives[anchor]
    return TripletSpec(anchor, pos[int(rng.integers(len(pos)))], neg[int(rng.integers(len(neg)))])


# --------------------------------------------------------------------------- augmentation

def augment_pair(a: np.ndarray, b: np.ndarray, rng: np.random.Generator):
    """Mirror both images horizontally with probability 0.5, using a single shared coin."""
    if a.shape[:2] != b.shape[:2]:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    if rng.random() < 0.5:
        return a[:, ::-1].copy(), b[:, ::-1].copy()
    return a, b


def crop_to_shape(stack: Sequence[np.ndarray], target_h: int, target_w: int, rng: Optional[np.random.Generator] = None):
    """Apply one crop window to every aligned map in ``stack``.

    Centered by default; passing ``rng`` draws a uniformly random window instead.
    """
    h, w = stack[0].shape[:2]
    for arr in stack:
        if arr.shape[:2] != (h, w):
            raise DimensionMismatch("stack members must share spatial dims")
    if target_h > h or target_w > w:
        raise TargetTooLarge(f"cannot crop {h}x{w} to {target_h}x{target_w}")
    if rng is None:
        top, left = (h - target_h) // 2, (w - target_w) // 2
    else:
        top = int(rng.integers(h - target_h + 1))
        left = int(rng.integers(w - target_w + 1))
    return [arr[top:top + target_h, left:left + target_w] for arr in stack]


# --------------------------------------------------------------------------- toy world

@dataclass
class AppearanceTransform:
    """Global photometric transform applied to a base render."""
    name: str
    gain: tuple = (1.0, 1.0, 1.0)
    brightness: float = 1.0
    hue_shift_deg: float = 0.0
    noise_std: float = 0.0
    fog_density: float = 0.0
    fog_color: tuple = (0.75, 0.75, 0.78)


DEFAULT_ENVIRONMENTS = (
    AppearanceTransform("clone"),
    AppearanceTransform("fog", brightness=1.05, fog_density=0.08, noise_std=0.01),
    AppearanceTransform("sunset", gain=(1.15, 0.85, 0.6), brightness=0.8, noise_std=0.01),
)

DEFAULT_REAL_SHIFT = AppearanceTransform(
    "real", gain=(0.8, 1.05, 1.2), brightness=0.9, hue_shift_deg=40.0, noise_std=0.04
)

CLASS_NAMES = ("sky", "road", "terrain", "building", "pole", "vegetation", "vehicle", "sign")


@dataclass
class ToyWorldConfig:
    image_height: int = 64
    image_width: int = 64
    sequences: int = 2
    frames_per_sequence: int = 16
    environments: list = field(default_factory=lambda: list(DEFAULT_ENVIRONMENTS))
    real_domain_shift: AppearanceTransform = field(default_factory=lambda: DEFAULT_REAL_SHIFT)
    class_count: int = 6
    seed: int = 0
    camera_angles_deg: list = field(default_factory=lambda: [0.0])
    frame_spacing_m: float = 1.0
    sequence_spacing_m: float = 1000.0
    camera_height_m: float = 1.5
    max_depth_m: float = 60.0
    depth_scale: float = 0.001

    def validate(self):
        if self.image_height < 32 or self.image_width < 32:
            raise InvalidConfig("image dims must be >= 32")
        if self.class_count < 2:
            raise InvalidConfig("class_count must be >= 2")
        if self.frames_per_sequence < 6:
            raise InvalidConfig("frames_per_sequence must be >= 6")
        if self.sequences < 1 or not self.environments:
            raise InvalidConfig("need at least one sequence and one environment")
        if len({e.name for e in self.environments}) != len(self.environments):
            raise InvalidConfig("environment names must be unique")
        if self.max_depth_m / self.depth_scale > 65535:
            raise InvalidConfig("max_depth_m does not fit 16-bit storage at this depth_scale")

    @classmethod
    def from_dict(cls, d: dict) -> "ToyWorldConfig":
        d = dict(d)
        if "environments" in d:
            d["environments"] = [AppearanceTransform(**_tuplify(e)) for e in d["environments"]]
        if "real_domain_shift" in d:
            d["real_domain_shift"] = AppearanceTransform(**_tuplify(d["real_domain_shift"]))
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _tuplify(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


@dataclass(frozen=True)
class Billboard:
    """Axis-aligned rectangle in the plane z = const, facing the -z direction."""
    x0: float
    x1: float
    z: float
    height: float
    class_id: int
    color: tuple
    checker: tuple


@dataclass
class SceneLayout:
    billboards: list
    road_half_width: float = 2.0


def make_layout(config: ToyWorldConfig, seq_index: int) -> SceneLayout:
    rng = np.random.default_rng([config.seed, 1, seq_index])
    M = config.class_count
    route_len = config.frames_per_sequence * config.frame_spacing_m + config.max_depth_m
    billboards = []
    for side in (-1.0, 1.0):
        z = float(rng.uniform(1.0, 3.0))
        while z < route_len:
            width = float(rng.uniform(1.0, 4.0))
            inner = float(rng.uniform(2.5, 6.0))
            x0, x1 = sorted((side * inner, side * (inner + width)))
            kind = 3 + int(rng.integers(4))  # building/pole/vegetation/vehicle
            billboards.append(Billboard(
                x0=x0, x1=x1, z=z,
                height=float(rng.uniform(1.0, 5.0)),
                class_id=kind % M,
                color=tuple(float(c) for c in rng.uniform(0.1, 0.95, size=3)),
                checker=(float(rng.uniform(0.3, 1.5)), float(rng.uniform(0.3, 1.5))),
            ))
            z += float(rng.uniform(1.5, 4.0))
    return SceneLayout(billboards)


def camera_pose(config: ToyWorldConfig, seq_index: int, frame: int, angle_deg: float) -> Pose:
    half = math.radians(angle_deg) / 2.0
    return Pose(
        x=seq_index * config.sequence_spacing_m,
        y=config.camera_height_m,
        z=frame * config.frame_spacing_m,
        qw=math.cos(half), qx=0.0, qy=math.sin(half), qz=0.0,
    )


def render_scene(layout: SceneLayout, cam_z: float, cam_height: float, angle_deg: float,
                 height: int, width: int, max_depth: float, class_count: int):
    """Ray-cast the layout from a camera at local (0, cam_height, cam_z) yawed by angle_deg.

    Returns (rgb float64 HxWx3, depth float64 HxW with 0 = invalid, seg int HxW).
    Depth is the camera-frame z coordinate of the first intersection.
    """
    f = width / 2.0
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    dx = (u + 0.5 - width / 2.0) / f
    dy = -(v + 0.5 - height / 2.0) / f
    # ray direction in camera frame has unit z, so the ray parameter equals camera depth
    th = math.radians(angle_deg)
    wx = math.cos(th) * dx + math.sin(th) * 1.0
    wy = dy
    wz = -math.sin(th) * dx + math.cos(th) * 1.0

    best_t = np.full((height, width), np.inf)
    seg = np.zeros((height, width), dtype=np.int64)
    rgb = np.zeros((height, width, 3))
    sky = np.array([0.55, 0.7, 0.95])
    rgb[:] = sky * (0.85 + 0.15 * (v / height))[..., None]

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(wy < 0, -cam_height / wy, np.inf)
    hit = np.isfinite(t_ground)
    gx = np.where(hit, wx * np.where(hit, t_ground, 0.0), 0.0)
    gz = np.where(hit, cam_z + wz * np.where(hit, t_ground, 0.0), 0.0)
    on_road = np.abs(gx) < layout.road_half_width
    road_class, terrain_class = 1 % class_count, 2 % class_count
    seg = np.where(hit, np.where(on_road, road_class, terrain_class), seg)
    best_t = np.where(hit, t_ground, best_t)
    lane = (np.abs(gx) < 0.08) & (np.floor(gz / 1.5) % 2 == 0)
    road_rgb = np.where(lane[..., None], [0.9, 0.9, 0.85], [0.35, 0.35, 0.37])
    grass_tex = 0.85 + 0.15 * ((np.floor(gx / 0.7) + np.floor(gz / 0.7)) % 2)
    grass_rgb = np.array([0.3, 0.5, 0.2]) * grass_tex[..., None]
    ground_rgb = np.where(on_road[..., None], road_rgb, grass_rgb)
    rgb = np.where(hit[..., None], ground_rgb, rgb)

    for bb in layout.billboards:
        if bb.z <= cam_z:
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(wz > 0, (bb.z - cam_z) / wz, np.inf)
        px = wx * t
        py = cam_height + wy * t
        inside = np.isfinite(t) & (px >= bb.x0) & (px <= bb.x1) & (py >= 0.0) & (py <= bb.height) & (t < best_t)
        if not inside.any():
            continue
        cu, cv = bb.checker
        tex = 0.7 + 0.3 * ((np.floor((px - bb.x0) / cu) + np.floor(py / cv)) % 2)
        best_t = np.where(inside, t, best_t)
        seg = np.where(inside, bb.class_id, seg)
        rgb = np.where(inside[..., None], np.asarray(bb.color) * tex[..., None], rgb)

    depth = np.where(np.isfinite(best_t) & (best_t <= max_depth), best_t, 0.0)
    return rgb, depth, seg


def hue_rotation_matrix(deg: float) -> np.ndarray:
    """Rotation about the gray axis of RGB space."""
    th = math.radians(deg)
    c, s = math.cos(th), math.sin(th)
    k = np.ones((3, 3)) / 3.0
    cross = np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]]) / math.sqrt(3.0)
    return c * np.eye(3) + s * cross + (1 - c) * k


def apply_appearance(rgb: np.ndarray, depth: np.ndarray, tf: AppearanceTransform, rng: np.random.Generator) -> np.ndarray:
    out = rgb * np.asarray(tf.gain) * tf.brightness
    if tf.hue_shift_deg:
        out = out @ hue_rotation_matrix(tf.hue_shift_deg).T
    if tf.fog_density > 0:
        fog = np.where(depth > 0, 1.0 - np.exp(-tf.fog_density * depth), 1.0)[..., None]
        out = out * (1 - fog) + np.asarray(tf.fog_color) * fog
    if tf.noise_std > 0:
        out = out + rng.normal(0.0, tf.noise_std, size=out.shape)
    return np.clip(np.round(out * 255.0), 0, 255).astype(np.uint8)


def _palette() -> list:
    rng = np.random.default_rng(12345)
    cols = rng.integers(0, 256, size=(256, 3), dtype=np.int64)
    return [int(c) for c in cols.ravel()]


def _write_png(arr: np.ndarray, path: Path, mode: Optional[str] = None, palette=None):
    im = Image.fromarray(arr, mode=mode) if mode else Image.fromarray(arr)
    if palette is not None:
        im.putpalette(palette)
    im.save(path, format="PNG", optimize=False)


def generate_toy_dataset(config: ToyWorldConfig, out_dir) -> DatasetManifest:
    """Render every sequence/frame once per environment (virtual) and once under the real shift.

    Output layout: ``images/``, ``depth/``, ``seg/`` and ``manifest.jsonl`` under ``out_dir``.
    """
    config.validate()
    out = Path(out_dir)
    try:
        for sub in ("images", "depth", "seg"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DasgilIOError(str(exc)) from exc

    palette = _palette()
    H, W = config.image_height, config.image_width
    records = []
    for s in range(config.sequences):
        layout = make_layout(config, s)
        seq_name = f"seq{s:02d}"
        for frame in range(config.frames_per_sequence):
            for ai, angle in enumerate(config.camera_angles_deg):
                rgb, depth, seg = render_scene(
                    layout, frame * config.frame_spacing_m, config.camera_height_m, angle,
                    H, W, config.max_depth_m, config.class_count,
                )
                depth_u16 = np.round(depth / config.depth_scale).astype(np.uint16)
                pose = camera_pose(config, s, frame, angle)
                gt_name = f"{seq_name}_f{frame:04d}_a{ai}"
                depth_rel, seg_rel = f"depth/{gt_name}.png", f"seg/{gt_name}.png"
                try:
                    _write_png(depth_u16, out / depth_rel)
                    _write_png(seg.astype(np.uint8), out / seg_rel, mode="P", palette=palette)
                    for ei, env in enumerate(config.environments):
                        rid = f"v_{seq_name}_f{frame:04d}_a{ai}_{env.name}"
                        img = apply_appearance(rgb, depth, env, np.random.default_rng([config.seed, 2, s, frame, ai, ei]))
                        _write_png(img, out / f"images/{rid}.png")
                        records.append(SampleRecord(
                            rid, "virtual", seq_name, frame, env.name, float(angle),
                            f"images/{rid}.png", depth_rel, seg_rel, config.depth_scale, pose,
                        ))
                    if ai == 0:
                        rid = f"r_{seq_name}_f{frame:04d}"
                        img = apply_appearance(rgb, depth, config.real_domain_shift,
                                               np.random.default_rng([config.seed, 3, s, frame]))
                        _write_png(img, out / f"images/{rid}.png")
                        records.append(SampleRecord(
                            rid, "real", seq_name, frame, config.real_domain_shift.name, float(angle),
                            f"images/{rid}.png", None, None, config.depth_scale, pose,
                        ))
                except OSError as exc:
                    raise DasgilIOError(str(exc)) from exc

    names = [CLASS_NAMES[i] if i < len(CLASS_NAMES) else f"class{i}" for i in range(config.class_count)]
    manifest = DatasetManifest(records, config.class_count, names, root=out)
    save_manifest(manifest, out / "manifest.jsonl")
    with open(out / "toy_config.json", "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
    return manifest


def directory_digest(root) -> str:
    """SHA-256 over relative paths and bytes of every file below ``root``."""
    import hashlib

    h = hashlib.sha256()
    root = Path(root)
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for fn in sorted(filenames):
            p = Path(dirpath) / fn
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
