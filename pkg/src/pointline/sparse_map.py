"""Sparse map: keyframes, landmarks, observation graph, tiling match index.

The map owns all mutation; landmark records are immutable values replaced on
update, so a solver can snapshot ids and values and work on the side.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import MapConsistencyError
from .geometry import CameraIntrinsics, Se3Pose
from .lines import Line2dParams, LineLandmark, LineObservation
from .point_errors import PointLandmark, PointObservation

MAP_FORMAT_VERSION = 1


@dataclass
class Keyframe:
    id: int
    pose: Se3Pose
    intrinsics: CameraIntrinsics
    point_obs: dict[int, PointObservation] = field(default_factory=dict)
    line_obs: dict[int, LineObservation] = field(default_factory=dict)

    def covisibility_weight(self, other: "Keyframe") -> int:
        shared = len(self.point_obs.keys() & other.point_obs.keys())
        shared += len(self.line_obs.keys() & other.line_obs.keys())
        return shared


class SparseMap:
    """Keyframes + point/line landmarks with a bidirectional observation graph."""

    def __init__(self, intrinsics: CameraIntrinsics):
        self.intrinsics = intrinsics
        self.keyframes: dict[int, Keyframe] = {}
        self.points: dict[int, PointLandmark] = {}
        self.lines: dict[int, LineLandmark] = {}
        self.point_observers: dict[int, set[int]] = {}
        self.line_observers: dict[int, set[int]] = {}
        self._next_id = 0

    def _fresh_id(self, requested: int | None) -> int:
        if requested is None:
            requested = self._next_id
        self._next_id = max(self._next_id, requested + 1)
        return requested

    # -- insertion ---------------------------------------------------------

    def add_keyframe(self, pose: Se3Pose, kf_id: int | None = None) -> Keyframe:
        kf_id = self._fresh_id(kf_id)
        if kf_id in self.keyframes:
            raise MapConsistencyError(f"keyframe {kf_id} already exists")
        kf = Keyframe(kf_id, pose, self.intrinsics)
        self.keyframes[kf_id] = kf
        return kf

    def add_point(self, position, pt_id: int | None = None) -> PointLandmark:
        pt_id = self._fresh_id(pt_id)
        if pt_id in self.points:
            raise MapConsistencyError(f"point {pt_id} already exists")
        lm = PointLandmark(np.asarray(position, dtype=float), id=pt_id)
        self.points[pt_id] = lm
        self.point_observers[pt_id] = set()
        return lm

    def add_line(self, p, q, line_id: int | None = None) -> LineLandmark:
        line_id = self._fresh_id(line_id)
        if line_id in self.lines:
            raise MapConsistencyError(f"line {line_id} already exists")
        lm = LineLandmark(np.asarray(p, dtype=float), np.asarray(q, dtype=float), id=line_id)
        self.lines[line_id] = lm
        self.line_observers[line_id] = set()
        return lm

    def add_point_observation(self, kf_id: int, pt_id: int, obs: PointObservation):
        if kf_id not in self.keyframes or pt_id not in self.points:
            raise MapConsistencyError(f"unknown keyframe {kf_id} or point {pt_id}")
        self.keyframes[kf_id].point_obs[pt_id] = obs
        self.point_observers[pt_id].add(kf_id)

    def add_line_observation(self, kf_id: int, line_id: int, obs: LineObservation):
        if kf_id not in self.keyframes or line_id not in self.lines:
            raise MapConsistencyError(f"unknown keyframe {kf_id} or line {line_id}")
        self.keyframes[kf_id].line_obs[line_id] = obs
        self.line_observers[line_id].add(kf_id)
        lm = self.lines[line_id]
        self.lines[line_id] = dataclasses.replace(lm, n_obs=lm.n_obs + 1)

    # -- removal -----------------------------------------------------------

    def remove_line(self, line_id: int):
        if line_id not in self.lines:
            raise MapConsistencyError(f"unknown line {line_id}")
        for kf_id in self.line_observers.pop(line_id):
            del self.keyframes[kf_id].line_obs[line_id]
        del self.lines[line_id]

    # -- updates -------------------------------------------------------------

    def apply_values(self, values):
        """Write optimized poses/landmark positions back (MapValues-shaped)."""
        for kf_id, pose in values.poses.items():
            self.keyframes[kf_id].pose = pose
        for pt_id, pos in values.points.items():
            self.points[pt_id] = dataclasses.replace(
                self.points[pt_id], position=np.asarray(pos, dtype=float)
            )
        for line_id, (p, q) in values.lines.items():
            self.lines[line_id] = dataclasses.replace(
                self.lines[line_id], p=np.asarray(p, dtype=float), q=np.asarray(q, dtype=float)
            )

    # -- queries -----------------------------------------------------------

    def covisibility(self, kf_id: int) -> dict[int, int]:
        """Shared-landmark counts between a keyframe and every other keyframe."""
        kf = self.keyframes[kf_id]
        weights: dict[int, int] = {}
        for other_id, other in self.keyframes.items():
            if other_id == kf_id:
                continue
            w = kf.covisibility_weight(other)
            if w > 0:
                weights[other_id] = w
        return weights

    def check_consistency(self):
        """Raise unless the observation graph is bidirectional with no dangling ids."""
        for kf_id, kf in self.keyframes.items():
            for pt_id in kf.point_obs:
                if pt_id not in self.points or kf_id not in self.point_observers[pt_id]:
                    raise MapConsistencyError(f"point obs {kf_id}->{pt_id} not mirrored")
            for line_id in kf.line_obs:
                if line_id not in self.lines or kf_id not in self.line_observers[line_id]:
                    raise MapConsistencyError(f"line obs {kf_id}->{line_id} not mirrored")
        for pt_id, observers in self.point_observers.items():
            for kf_id in observers:
                if pt_id not in self.keyframes[kf_id].point_obs:
                    raise MapConsistencyError(f"point mirror {pt_id}->{kf_id} dangling")
        for line_id, observers in self.line_observers.items():
            for kf_id in observers:
                if line_id not in self.keyframes[kf_id].line_obs:
                    raise MapConsistencyError(f"line mirror {line_id}->{kf_id} dangling")

    # -- serialization (versioned text format, see README) -------------------

    def to_text(self) -> str:
        def obs_point(o: PointObservation):
            return {
                "pixel": o.pixel.tolist(),
                "depth": o.depth,
                "right_u": o.right_u,
                "level": o.level,
            }

        def obs_line(o: LineObservation):
            return {
                "p": o.p.tolist(),
                "q": o.q.tolist(),
                "depth_p": o.depth_p,
                "depth_q": o.depth_q,
                "level": o.level,
                "descriptor": None
                if o.descriptor is None
                else np.packbits(o.descriptor).tobytes().hex(),
                "descriptor_bits": None if o.descriptor is None else int(o.descriptor.size),
                "min_length": o.min_length,
            }

        doc = {
            "version": MAP_FORMAT_VERSION,
            "intrinsics": {
                "fx": self.intrinsics.fx,
                "fy": self.intrinsics.fy,
                "cx": self.intrinsics.cx,
                "cy": self.intrinsics.cy,
                "baseline": self.intrinsics.baseline,
            },
            "keyframes": [
                {
                    "id": kf.id,
                    "rotation": kf.pose.rotation.tolist(),
                    "translation": kf.pose.translation.tolist(),
                    "point_obs": {str(k): obs_point(v) for k, v in sorted(kf.point_obs.items())},
                    "line_obs": {str(k): obs_line(v) for k, v in sorted(kf.line_obs.items())},
                }
                for kf in (self.keyframes[k] for k in sorted(self.keyframes))
            ],
            "points": [
                {"id": pid, "position": self.points[pid].position.tolist()}
                for pid in sorted(self.points)
            ],
            "lines": [
                {
                    "id": lid,
                    "p": self.lines[lid].p.tolist(),
                    "q": self.lines[lid].q.tolist(),
                    "n_obs": self.lines[lid].n_obs,
                }
                for lid in sorted(self.lines)
            ],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_text(cls, text: str) -> "SparseMap":
        doc = json.loads(text)
        if doc.get("version") != MAP_FORMAT_VERSION:
            raise MapConsistencyError(f"unsupported map format version {doc.get('version')}")
        intr = doc["intrinsics"]
        m = cls(CameraIntrinsics(intr["fx"], intr["fy"], intr["cx"], intr["cy"], intr["baseline"]))
        for rec in doc["points"]:
            m.add_point(rec["position"], pt_id=rec["id"])
        for rec in doc["lines"]:
            m.add_line(rec["p"], rec["q"], line_id=rec["id"])
        for rec in doc["keyframes"]:
            pose = Se3Pose(np.array(rec["rotation"]), np.array(rec["translation"]))
            m.add_keyframe(pose, kf_id=rec["id"])
            for pt_id, o in rec["point_obs"].items():
                m.add_point_observation(
                    rec["id"],
                    int(pt_id),
                    PointObservation(o["pixel"], o["depth"], o["right_u"], o["level"]),
                )
            for line_id, o in rec["line_obs"].items():
                descriptor = None
                if o["descriptor"] is not None:
                    bits = np.unpackbits(np.frombuffer(bytes.fromhex(o["descriptor"]), np.uint8))
                    descriptor = bits[: o["descriptor_bits"]].astype(bool)
                m.add_line_observation(
                    rec["id"],
                    int(line_id),
                    LineObservation(
                        o["p"], o["q"], o["depth_p"], o["depth_q"], o["level"],
                        descriptor, o["min_length"],
                    ),
                )
        # replace() in add_line_observation recomputed n_obs; trust the rebuild
        return m


# ---------------------------------------------------------------------------
# Tiling match index over the (theta, h) line-parameter manifold


@dataclass(frozen=True)
class TileConfig:
    theta_bins: int = 32
    h_bins: int = 32
    h_min: float = -800.0
    h_max: float = 800.0

    def __post_init__(self):
        if self.theta_bins < 1 or self.h_bins < 1 or self.h_max <= self.h_min:
            raise ValueError("invalid tile configuration")


@dataclass
class TileIndex:
    config: TileConfig
    buckets: dict[tuple[int, int], list[int]]
    size: int

    def bin_of(self, params: Line2dParams) -> tuple[int, int]:
        """Tile of a line; parameters are canonicalized first so the theta
        seam at +-pi maps to a single neighborhood around zero."""
        canon = params.canonical()
        span = 2.0 * np.pi
        ti = int(np.floor((canon.theta + np.pi) / span * self.config.theta_bins))
        ti %= self.config.theta_bins
        width = self.config.h_max - self.config.h_min
        hi = int(np.floor((canon.offset - self.config.h_min) / width * self.config.h_bins))
        hi = min(max(hi, 0), self.config.h_bins - 1)
        return ti, hi


def build_tile_index(
    observations: list[LineObservation],
    config: TileConfig | None = None,
    ids: list[int] | None = None,
) -> TileIndex:
    """Bucket observations by the tile of their (theta, h) line parameters."""
    config = config or TileConfig()
    index = TileIndex(config, {}, 0)
    if ids is None:
        ids = list(range(len(observations)))
    for obs_id, obs in zip(ids, observations):
        key = index.bin_of(obs.line_params())
        index.buckets.setdefault(key, []).append(obs_id)
        index.size += 1
    return index


def candidate_matches(
    index: TileIndex, projected: Line2dParams, neighborhood: str = "8_neighborhood"
) -> list[int]:
    """Observation ids in the tile of the projected line (optionally 8 neighbors).

    Theta neighbors wrap around the bin circle; h neighbors clamp at the
    range boundary.
    """
    if neighborhood not in ("same_tile", "8_neighborhood"):
        raise ValueError(f"unknown neighborhood {neighborhood!r}")
    ti, hi = index.bin_of(projected)
    offsets = [(0, 0)]
    if neighborhood == "8_neighborhood":
        offsets = [(dt, dh) for dt in (-1, 0, 1) for dh in (-1, 0, 1)]
    out: list[int] = []
    seen: set[tuple[int, int]] = set()
    for dt, dh in offsets:
        t = (ti + dt) % index.config.theta_bins
        h = min(max(hi + dh, 0), index.config.h_bins - 1)
        if (t, h) in seen:
            continue
        seen.add((t, h))
        out.extend(index.buckets.get((t, h), []))
    return out


def hamming_distance(a: np.ndarray, b: np.ndarray) -> int:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("descriptors must have equal length")
    return int(np.count_nonzero(a != b))


def line_to_line_distance(query: Line2dParams, candidate: LineObservation) -> float:
    """Perpendicular distance of the candidate segment midpoint from the query line."""
    mid = 0.5 * (candidate.p + candidate.q)
    return float(abs(query.normal @ mid - query.offset))


def match_descriptor(
    query: np.ndarray,
    candidates: list[tuple[int, LineObservation]],
    ratio: float = 0.8,
    max_line_dist: float = 40.0,
    query_params: Line2dParams | None = None,
) -> int | None:
    """Nearest-neighbor descriptor match with ratio test and line-distance gate.

    The nearest candidate by Hamming distance is accepted iff its distance
    ratio to the second-closest is below ``ratio`` (trivially satisfied when
    there is a single candidate) and, when ``query_params`` is given, the
    candidate lies within ``max_line_dist`` pixels of the query line. Ties
    break toward the lower id. Returns None when nothing qualifies.
    """
    scored = sorted(
        (hamming_distance(query, obs.descriptor), cand_id, obs)
        for cand_id, obs in candidates
        if obs.descriptor is not None
    )
    if not scored:
        return None
    best_dist, best_id, best_obs = scored[0]
    if len(scored) > 1:
        second = scored[1][0]
        if second == 0 or best_dist / second >= ratio:
            return None
    if query_params is not None and line_to_line_distance(query_params, best_obs) > max_line_dist:
        return None
    return best_id


# ---------------------------------------------------------------------------
# Line-segment culling


@dataclass(frozen=True)
class CullPolicy:
    """Remove a line matched in fewer than ``min_ratio`` of the last ``window`` keyframes."""

    window: int = 3
    min_ratio: float = 1.0 / 3.0


def cull_line_landmark(sparse_map: SparseMap, line_id: int, policy: CullPolicy) -> bool:
    """Apply the culling policy to one line; returns True when it was removed."""
    if line_id not in sparse_map.lines:
        raise MapConsistencyError(f"unknown line {line_id}")
    recent = sorted(sparse_map.keyframes)[-policy.window :]
    if not recent:
        return False
    matched = sum(1 for kf_id in recent if line_id in sparse_map.keyframes[kf_id].line_obs)
    if matched / len(recent) < policy.min_ratio:
        sparse_map.remove_line(line_id)
        return True
    return False
