"""Localization metrics (pose-error buckets, Recall@N, top-1 Recall@D) and report emission."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DasgilIOError, EmptyQuerySet, InvalidReport, NonUnitQuaternion

# (meters, degrees), cumulative high -> coarse
PRECISION_BUCKETS = {"high": (0.25, 2.0), "medium": (0.5, 5.0), "coarse": (5.0, 10.0)}
DEFAULT_RADIUS_M = 25.0
DEFAULT_N_LIST = (1, 2, 5, 10, 20)
DEFAULT_D_THRESHOLDS = tuple(float(d) for d in range(15, 55, 5))


@dataclass(frozen=True)
class PoseError:
    translation_m: float
    rotation_deg: float


def _unit(q, tol=1e-6) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > tol:
        raise NonUnitQuaternion(f"quaternion {q} is not unit norm")
    return q


def quat_angle_deg(q1, q2) -> float:
    """Angle of the relative rotation between unit quaternions (w, x, y, z), in [0, 180]."""
    q1, q2 = _unit(q1), _unit(q2)
    w1, v1 = q1[0], q1[1:]
    w2, v2 = q2[0], q2[1:]
    # relative rotation conj(q1) * q2
    w = w1 * w2 + v1 @ v2
    v = w1 * v2 - w2 * v1 - np.cross(v1, v2)
    return math.degrees(2.0 * math.atan2(float(np.linalg.norm(v)), abs(float(w))))


def pose_error(est_position, est_quat, gt_position, gt_quat) -> PoseError:
    t = float(np.linalg.norm(np.asarray(est_position, float) - np.asarray(gt_position, float)))
    return PoseError(t, quat_angle_deg(est_quat, gt_quat))


def pose_error_from(est, gt) -> PoseError:
    """Convenience for objects exposing ``position`` and ``quaternion`` (e.g. dataman.Pose)."""
    return pose_error(est.position, est.quaternion, gt.position, gt.quaternion)


def precision_buckets(errors: Sequence[PoseError]) -> dict:
    if not errors:
        raise EmptyQuerySet("no queries")
    n = len(errors)
    return {
        name: 100.0 * sum(e.translation_m <= t and e.rotation_deg <= r for e in errors) / n
        for name, (t, r) in PRECISION_BUCKETS.items()
    }


def recall_at_n(candidate_positions: Sequence, gt_positions: Sequence, n_list=DEFAULT_N_LIST,
                radius: float = DEFAULT_RADIUS_M) -> list:
    """For each N, percentage of queries with any of their top-N candidates within ``radius``.

    ``candidate_positions[q]`` is the ranked (k, 3) array of retrieved positions for query q.
    """
    if len(candidate_positions) == 0:
        raise EmptyQuerySet("no queries")
    first_hit = []
    for cands, gt in zip(candidate_positions, gt_positions):
        cands = np.asarray(cands, dtype=np.float64).reshape(-1, 3)
        d = np.linalg.norm(cands - np.asarray(gt, dtype=np.float64), axis=1)
        hits = np.nonzero(d <= radius)[0]
        first_hit.append(int(hits[0]) if hits.size else math.inf)
    nq = len(first_hit)
    return [(int(N), 100.0 * sum(h < N for h in first_hit) / nq) for N in sorted(n_list)]


def top1_recall_at_d(top1_positions: Sequence, gt_positions: Sequence,
                     thresholds=DEFAULT_D_THRESHOLDS) -> list:
    if len(top1_positions) == 0:
        raise EmptyQuerySet("no queries")
    d = np.linalg.norm(np.asarray(top1_positions, float).reshape(-1, 3) - np.asarray(gt_positions, float).reshape(-1, 3), axis=1)
    return [(float(D), 100.0 * float(np.mean(d <= D))) for D in sorted(thresholds)]


@dataclass
class EvalReport:
    buckets: dict
    recall_at_n: list  # [(n, recall%)]
    top1_recall_at_d: list  # [(d_m, recall%)]
    meta: dict = field(default_factory=dict)

    def validate(self):
        vals = list(self.buckets.values()) + [r for _, r in self.recall_at_n] + [r for _, r in self.top1_recall_at_d]
        if any(not (0.0 <= v <= 100.0) or math.isnan(v) for v in vals):
            raise InvalidReport("all report values must lie in [0, 100]")
        b = self.buckets
        if set(b) != set(PRECISION_BUCKETS):
            raise InvalidReport(f"buckets must be exactly {sorted(PRECISION_BUCKETS)}")
        if not b["high"] <= b["medium"] <= b["coarse"]:
            raise InvalidReport("precision buckets must be cumulative (high <= medium <= coarse)")
        for name, curve in (("recall_at_n", self.recall_at_n), ("top1_recall_at_d", self.top1_recall_at_d)):
            xs = [x for x, _ in curve]
            ys = [y for _, y in curve]
            if xs != sorted(xs) or any(b < a for a, b in zip(ys, ys[1:])):
                raise InvalidReport(f"{name} must be nondecreasing")
        return self

    def to_json(self) -> dict:
        return {
            "buckets": {k: float(self.buckets[k]) for k in PRECISION_BUCKETS},
            "recall_at_n": [{"n": int(n), "recall": float(r)} for n, r in self.recall_at_n],
            "top1_recall_at_d": [{"d_m": float(d), "recall": float(r)} for d, r in self.top1_recall_at_d],
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        return cls(
            buckets={k: float(v) for k, v in obj["buckets"].items()},
            recall_at_n=[(int(e["n"]), float(e["recall"])) for e in obj["recall_at_n"]],
            top1_recall_at_d=[(float(e["d_m"]), float(e["recall"])) for e in obj["top1_recall_at_d"]],
            meta=dict(obj.get("meta", {})),
        )

    def recall(self, n: int) -> float:
        return dict(self.recall_at_n)[n]


def emit_report(report: EvalReport, path, plots: bool = False) -> list:
    """Write the report JSON (after validation); optionally both recall curves as PNGs.

    Returns the list of written paths.
    """
    report.validate()
    path = Path(path)
    written = []
    try:
        path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True), encoding="utf-8")
        written.append(path)
        if plots:
            written += _plot_curves(report, path.with_suffix(""))
    except OSError as exc:
        raise DasgilIOError(str(exc)) from exc
    return written


def read_report(path) -> EvalReport:
    return EvalReport.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _plot_curves(report: EvalReport, stem: Path) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = []
    for name, curve, xlabel in (
        ("recall_at_n", report.recall_at_n, "N"),
        ("top1_recall_at_d", report.top1_recall_at_d, "D (m)"),
    ):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot([x for x, _ in curve], [y for _, y in curve], marker="o")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("recall (%)")
        ax.set_ylim(0, 100)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        p = Path(f"{stem}_{name}.png")
        fig.savefig(p, dpi=80)
        plt.close(fig)
        out.append(p)
    return out
