"""Descriptor extraction, the DGFD feature database, nearest-neighbour query and PCA feature views."""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import (
    DasgilIOError,
    EmptyDatabase,
    LayerMismatch,
    LayerOutOfRange,
    TooFewChannels,
    VersionMismatch,
)
from .netcore import ModelParams, encode, params_digest

METRICS = ("l1", "cosine")
DB_MAGIC = b"DGFD"
DB_VERSION = 1


class DigestMismatchWarning(UserWarning):
    """Query descriptor and database come from different checkpoints."""


@dataclass
class Descriptor:
    id: str
    layers: tuple
    vectors: list
    source_digest: Optional[bytes] = None

    @property
    def total_dim(self) -> int:
        return sum(v.size for v in self.vectors)

    def flat(self) -> np.ndarray:
        return np.concatenate(self.vectors)


@dataclass
class FeatureDatabase:
    layers: tuple
    dims: tuple
    ids: list
    matrix: np.ndarray  # (N, sum(dims)) float32
    digest: bytes = b"\0" * 32
    _index: dict = field(default=None, repr=False)

    def __post_init__(self):
        self.layers = tuple(int(l) for l in self.layers)
        self.dims = tuple(int(d) for d in self.dims)
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32).reshape(len(self.ids), sum(self.dims))
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("database ids must be unique")
        if len(self.digest) != 32:
            raise ValueError("digest must be 32 bytes")

    def __len__(self):
        return len(self.ids)

    def slices(self) -> list:
        out, start = [], 0
        for d in self.dims:
            out.append(slice(start, start + d))
            start += d
        return out

    def descriptor(self, i: int) -> Descriptor:
        row = self.matrix[i]
        return Descriptor(self.ids[i], self.layers, [row[s].copy() for s in self.slices()], self.digest)


@dataclass
class QueryResult:
    ranked: list  # [(id, score)]
    metric: str

    @property
    def ids(self) -> list:
        return [r[0] for r in self.ranked]


# --------------------------------------------------------------------------- extraction

def _as_batch(images, config) -> torch.Tensor:
    if isinstance(images, np.ndarray):
        arr = images if images.ndim == 4 else images[None]
        # HWC in [0, 1] -> NCHW in [-1, 1]
        t = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).float() * 2.0 - 1.0
    else:
        t = images if images.dim() == 4 else images.unsqueeze(0)
    return t


def extract_descriptors(params: ModelParams, images, layers: Optional[Sequence[int]] = None,
                        ids: Optional[Sequence[str]] = None, digest: Optional[bytes] = None) -> list:
    layers = tuple(params.config.retrieval_layers if layers is None else layers)
    n = params.config.encoder_layers
    for l in layers:
        if not 1 <= l <= n:
            raise LayerOutOfRange(f"retrieval layer {l} not in 1..{n}")
    batch = _as_batch(images, params.config)
    params.eval()
    with torch.no_grad():
        pyr = encode(params, batch)
    flats = [pyr.level(l).flatten(1).numpy().astype(np.float32) for l in layers]
    ids = list(ids) if ids is not None else [""] * batch.shape[0]
    return [Descriptor(ids[i], layers, [f[i].copy() for f in flats], digest) for i in range(batch.shape[0])]


def extract_descriptor(params: ModelParams, image, retrieval_layers=None, id: str = "", digest=None) -> Descriptor:
    return extract_descriptors(params, image, retrieval_layers, [id], digest)[0]


def build_database(params: ModelParams, images_by_id, layers=None, batch_size: int = 32,
                   path=None, digest: Optional[bytes] = None) -> FeatureDatabase:
    """``images_by_id`` is an ordered iterable of (id, HxWx3 image in [0,1]) pairs."""
    digest = digest if digest is not None else params_digest(params)
    layers = tuple(params.config.retrieval_layers if layers is None else layers)
    items = list(images_by_id)
    rows, ids = [], []
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        descs = extract_descriptors(params, np.stack([im for _, im in chunk]), layers, [i for i, _ in chunk], digest)
        rows.extend(d.flat() for d in descs)
        ids.extend(d.id for d in descs)
    dims = tuple(int(np.prod(params.config.level_shape(l))) for l in layers)
    matrix = np.stack(rows) if rows else np.zeros((0, sum(dims)), np.float32)
    db = FeatureDatabase(layers, dims, ids, matrix, digest)
    if path is not None:
        write_database(db, path)
    return db


def database_from_descriptors(descriptors: Sequence[Descriptor], digest: bytes = b"\0" * 32) -> FeatureDatabase:
    if not descriptors:
        raise EmptyDatabase("no descriptors")
    layers = descriptors[0].layers
    dims = tuple(v.size for v in descriptors[0].vectors)
    for d in descriptors:
        if d.layers != layers or tuple(v.size for v in d.vectors) != dims:
            raise LayerMismatch(f"descriptor {d.id!r} disagrees on layers/dims")
    return FeatureDatabase(layers, dims, [d.id for d in descriptors], np.stack([d.flat() for d in descriptors]), digest)


# --------------------------------------------------------------------------- DGFD I/O

def write_database(db: FeatureDatabase, path) -> None:
    parts = [DB_MAGIC, struct.pack("<H", DB_VERSION), db.digest, struct.pack("<I", len(db.layers))]
    for l, d in zip(db.layers, db.dims):
        parts.append(struct.pack("<II", l, d))
    parts.append(struct.pack("<I", len(db.ids)))
    for i in db.ids:
        raw = i.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    parts.append(db.matrix.astype("<f4").tobytes(order="C"))
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise DasgilIOError(str(exc)) from exc


def read_database(path) -> FeatureDatabase:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DasgilIOError(str(exc)) from exc
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise VersionMismatch("truncated feature database")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != DB_MAGIC:
        raise VersionMismatch("not a DGFD feature database")
    (version,) = struct.unpack("<H", take(2))
    if version != DB_VERSION:
        raise VersionMismatch(f"feature database version {version} != {DB_VERSION}")
    digest = take(32)
    (n_layers,) = struct.unpack("<I", take(4))
    layers, dims = [], []
    for _ in range(n_layers):
        l, d = struct.unpack("<II", take(8))
        layers.append(l)
        dims.append(d)
    (n,) = struct.unpack("<I", take(4))
    ids = []
    for _ in range(n):
        (ln,) = struct.unpack("<I", take(4))
        ids.append(take(ln).decode("utf-8"))
    matrix = np.frombuffer(take(4 * n * sum(dims)), dtype="<f4").astype(np.float32).reshape(n, sum(dims))
    if pos != len(buf):
        raise VersionMismatch("trailing bytes in feature database")
    return FeatureDatabase(tuple(layers), tuple(dims), ids, matrix, digest)


# --------------------------------------------------------------------------- query

def aggregate_scores(db: FeatureDatabase, q: np.ndarray, metric: str = "l1",
                     normalize: bool = False, concat_cosine: bool = False) -> np.ndarray:
    """Per-entry aggregate: summed L1 distance or summed per-layer cosine similarity (float64)."""
    M = db.matrix
    q = q.astype(np.float64)
    if metric == "l1":
        total = np.zeros(len(db))
        for sl, d in zip(db.slices(), db.dims):
            dist = np.abs(M[:, sl].astype(np.float64) - q[sl]).sum(axis=1)
            total += dist / d if normalize else dist
        return total
    if metric == "cosine":
        parts = [slice(0, M.shape[1])] if concat_cosine else db.slices()
        total = np.zeros(len(db))
        for sl in parts:
            X = M[:, sl].astype(np.float64)
            qn = np.linalg.norm(q[sl])
            xn = np.linalg.norm(X, axis=1)
            denom = xn * qn
            dots = X @ q[sl]
            total += np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
        return total
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def query(db: FeatureDatabase, descriptor: Descriptor, metric: str = "l1", k: int = 10,
          normalize: bool = False, concat_cosine: bool = False) -> QueryResult:
    """Top-k entries by least L1 distance or greatest cosine similarity; ties keep insertion order."""
    if len(db) == 0:
        raise EmptyDatabase("feature database is empty")
    if tuple(descriptor.layers) != db.layers or tuple(v.size for v in descriptor.vectors) != db.dims:
        raise LayerMismatch(f"descriptor layers {descriptor.layers} do not match database {db.layers}")
    if descriptor.source_digest is not None and descriptor.source_digest != db.digest:
        warnings.warn("query descriptor was extracted with a different checkpoint than the database",
                      DigestMismatchWarning, stacklevel=2)
    scores = aggregate_scores(db, descriptor.flat(), metric, normalize, concat_cosine)
    key = scores if metric == "l1" else -scores
    order = np.argsort(key, kind="stable")[: max(0, min(k, len(db)))]
    return QueryResult([(db.ids[i], float(scores[i])) for i in order], metric)


# --------------------------------------------------------------------------- PCA views

def pca_project(feature_map) -> np.ndarray:
    """Project per-pixel channel vectors of a (C,h,w) map onto its top-3 principal axes -> (h,w,3)."""
    fm = feature_map.detach().cpu().numpy() if torch.is_tensor(feature_map) else np.asarray(feature_map)
    if fm.ndim != 3 or fm.shape[0] < 3:
        raise TooFewChannels(f"need a (C>=3, h, w) map, got {fm.shape}")
    C, h, w = fm.shape
    X = fm.reshape(C, -1).T.astype(np.float64)
    X = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(X, full_matrices=False)
    comps = np.zeros((3, C))
    comps[: min(3, vt.shape[0])] = vt[:3]
    # sign convention: largest-magnitude loading positive
    signs = np.sign(comps[np.arange(3), np.abs(comps).argmax(axis=1)])
    comps = comps * np.where(signs == 0, 1.0, signs)[:, None]
    return (X @ comps.T).reshape(h, w, 3)


def pca_visualize(feature_map) -> np.ndarray:
    """uint8 RGB image at the map's resolution; zero-variance components render mid-gray."""
    proj = pca_project(feature_map)
    out = np.empty(proj.shape, dtype=np.uint8)
    for c in range(3):
        ch = proj[..., c]
        lo, hi = ch.min(), ch.max()
        if hi - lo <= 1e-12 * max(1.0, abs(hi)):
            out[..., c] = 128
        else:
            out[..., c] = np.round((ch - lo) / (hi - lo) * 255.0).astype(np.uint8)
    return out
