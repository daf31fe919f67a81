"""Deterministic synthetic scenes: trajectories, landmarks, noisy observations.

Everything is drawn from one seeded generator in a fixed order, so a config
reproduces its scene byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from ..geometry import CameraIntrinsics, Se3Pose, project, so3_exp
from ..lines import LineObservation
from ..point_errors import PointObservation
from ..noise import DepthNoiseModel, PyramidNoiseTable, sigma_pixel, sigma_z
from ..sparse_map import SparseMap
from .config import HarnessConfig

MIN_VIEW_DEPTH = 0.3
MIN_SEGMENT_PX = 6.0


@dataclass
class GroundTruth:
    """True scene values plus per-observation pre-noise measurements."""

    poses: dict[int, Se3Pose]
    points: dict[int, np.ndarray]
    lines: dict[int, tuple[np.ndarray, np.ndarray]]
    point_pixels: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    point_depths: dict[tuple[int, int], float] = field(default_factory=dict)
    line_pixels: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    line_depths: dict[tuple[int, int], tuple[float, float]] = field(default_factory=dict)
    descriptors: dict[int, np.ndarray] = field(default_factory=dict)


def orbit_pose(index: int, count: int, radius: float) -> Se3Pose:
    """Camera on a circle in the z=0 plane, optical axis toward the origin."""
    ang = 2.0 * np.pi * index / count
    center = np.array([radius * np.cos(ang), radius * np.sin(ang), 0.0])
    z = -center / np.linalg.norm(center)
    x = np.cross(np.array([0.0, 0.0, 1.0]), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r_cw = np.stack([x, y, z], axis=1).T
    return Se3Pose(r_cw, -r_cw @ center)


def corridor_pose(index: int, count: int, length: float) -> Se3Pose:
    """Camera moving along +x, optical axis along the motion direction."""
    x_pos = -length / 2.0 + length * index / max(count - 1, 1)
    center = np.array([x_pos, 0.0, 0.0])
    r_cw = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    return Se3Pose(r_cw, -r_cw @ center)


def _unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _perturbed_pose(pose: Se3Pose, rng: np.random.Generator, trans: float, rot_rad: float) -> Se3Pose:
    d_rot = so3_exp(_unit(rng) * rot_rad)
    d_t = _unit(rng) * trans
    return Se3Pose(d_rot @ pose.rotation, d_rot @ pose.translation + d_t)


def _pixel_in_image(cfg: HarnessConfig, uv: np.ndarray) -> bool:
    return 0.0 <= uv[0] < cfg.image_width and 0.0 <= uv[1] < cfg.image_height


def generate_scene(cfg: HarnessConfig) -> tuple[GroundTruth, SparseMap]:
    """Render a ground-truth scene into a SparseMap with noisy initialization.

    Landmarks that end up observed by fewer than two keyframes are dropped;
    the scene is rejected as infeasible when more than half of either
    landmark class disappears.
    """
    rng = np.random.default_rng(cfg.seed)
    intr = CameraIntrinsics(cfg.fx, cfg.fy, cfg.cx, cfg.cy, baseline=cfg.baseline)
    pixel_table = PyramidNoiseTable(cfg.pixel_sigma, cfg.pyramid_factor, cfg.pyramid_levels)
    depth_model = DepthNoiseModel(cfg.depth_c0, cfg.depth_c1, cfg.depth_zref)

    n_kf = cfg.keyframes
    if cfg.trajectory == "orbit":
        true_poses = [orbit_pose(i, n_kf, cfg.extent / 2.0) for i in range(n_kf)]
        lo = -cfg.extent / 4.0
        hi = cfg.extent / 4.0
        sample_box = lambda: rng.uniform(lo, hi, size=3)
    else:
        true_poses = [corridor_pose(i, n_kf, cfg.extent) for i in range(n_kf)]
        span = cfg.extent

        def sample_box():
            return np.array(
                [
                    rng.uniform(-span / 2.0 + 0.5, span / 2.0 + 3.0),
                    rng.uniform(-span / 4.0, span / 4.0),
                    rng.uniform(-span / 4.0, span / 4.0),
                ]
            )

    true_points = [sample_box() for _ in range(cfg.points)]
    true_lines = []
    for _ in range(cfg.lines):
        center = sample_box()
        direction = _unit(rng)
        length = rng.uniform(0.5, 1.2)
        true_lines.append((center - direction * length / 2.0, center + direction * length / 2.0))

    smap = SparseMap(intr)
    rot_rad = np.deg2rad(cfg.perturb_rotation_deg)
    for i, pose in enumerate(true_poses):
        init = pose if i == 0 else _perturbed_pose(pose, rng, cfg.perturb_translation, rot_rad)
        smap.add_keyframe(init, kf_id=i)

    point_ids = []
    for p in true_points:
        init = p + _unit(rng) * cfg.perturb_points
        point_ids.append(smap.add_point(init).id)
    line_ids = []
    for p, q in true_lines:
        init_p = p + _unit(rng) * cfg.perturb_lines
        init_q = q + _unit(rng) * cfg.perturb_lines
        line_ids.append(smap.add_line(init_p, init_q).id)

    descriptors = {
        lid: rng.random(cfg.descriptor_bits) < 0.5 for lid in line_ids
    }

    truth = GroundTruth(
        poses={i: true_poses[i] for i in range(n_kf)},
        points={pid: true_points[i] for i, pid in enumerate(point_ids)},
        lines={lid: true_lines[i] for i, lid in enumerate(line_ids)},
        descriptors=descriptors,
    )

    scale = cfg.noise_scale
    for kf_id, pose in enumerate(true_poses):
        for idx, pid in enumerate(point_ids):
            x_c = pose.transform(true_points[idx])
            if x_c[2] < MIN_VIEW_DEPTH:
                continue
            uv_true = project(intr, x_c)
            if not _pixel_in_image(cfg, uv_true):
                continue
            level = int(rng.integers(0, cfg.pyramid_levels))
            sig = sigma_pixel(pixel_table, level)
            uv = uv_true + rng.normal(size=2) * sig * scale
            mono = rng.random() < cfg.mono_fraction_points
            depth = None
            right_u = None
            if not mono:
                if cfg.sensor == "stereo":
                    ur_true = uv_true[0] - cfg.baseline * cfg.fx / x_c[2]
                    right_u = float(ur_true + rng.normal() * sig * scale)
                else:
                    depth = float(x_c[2] + rng.normal() * sigma_z(depth_model, x_c[2]) * scale)
                    depth = max(depth, 1e-3)
            truth.point_pixels[(kf_id, pid)] = uv_true
            truth.point_depths[(kf_id, pid)] = float(x_c[2])
            smap.add_point_observation(
                kf_id, pid, PointObservation(uv, depth=depth, right_u=right_u, level=level)
            )

        for idx, lid in enumerate(line_ids):
            p_w, q_w = true_lines[idx]
            if cfg.line_shrink > 0:
                axis = q_w - p_w
                t_p = rng.uniform(0.0, cfg.line_shrink)
                t_q = rng.uniform(0.0, cfg.line_shrink)
                p_obs_w = p_w + t_p * axis
                q_obs_w = q_w - t_q * axis
            else:
                p_obs_w, q_obs_w = p_w, q_w
            p_c = pose.transform(p_obs_w)
            q_c = pose.transform(q_obs_w)
            if min(p_c[2], q_c[2]) < MIN_VIEW_DEPTH:
                continue
            p_true = project(intr, p_c)
            q_true = project(intr, q_c)
            if not (_pixel_in_image(cfg, p_true) and _pixel_in_image(cfg, q_true)):
                continue
            if np.linalg.norm(p_true - q_true) < MIN_SEGMENT_PX:
                continue
            level = int(rng.integers(0, cfg.pyramid_levels))
            sig = sigma_pixel(pixel_table, level)
            p_px = p_true + rng.normal(size=2) * sig * scale
            q_px = q_true + rng.normal(size=2) * sig * scale
            if np.linalg.norm(p_px - q_px) < MIN_SEGMENT_PX - 1:
                continue
            mono = rng.random() < cfg.mono_fraction_lines
            depth_p = depth_q = None
            if not mono:
                depth_p = max(float(p_c[2] + rng.normal() * sigma_z(depth_model, p_c[2]) * scale), 1e-3)
                depth_q = max(float(q_c[2] + rng.normal() * sigma_z(depth_model, q_c[2]) * scale), 1e-3)
            flips = rng.random(cfg.descriptor_bits) < cfg.descriptor_flip_rate
            descriptor = descriptors[lid] ^ flips
            truth.line_pixels[(kf_id, lid)] = (p_true, q_true)
            truth.line_depths[(kf_id, lid)] = (float(p_c[2]), float(q_c[2]))
            smap.add_line_observation(
                kf_id,
                lid,
                LineObservation(
                    p_px, q_px, depth_p=depth_p, depth_q=depth_q,
                    level=level, descriptor=descriptor, min_length=MIN_SEGMENT_PX - 1,
                ),
            )

    # drop landmarks seen from fewer than two keyframes
    dropped_points = [pid for pid in point_ids if len(smap.point_observers[pid]) < 2]
    for pid in dropped_points:
        for kf_id in smap.point_observers.pop(pid):
            del smap.keyframes[kf_id].point_obs[pid]
        del smap.points[pid]
        del truth.points[pid]
    min_views = max(2, cfg.min_line_views)
    dropped_lines = [lid for lid in line_ids if len(smap.line_observers[lid]) < min_views]
    for lid in dropped_lines:
        smap.remove_line(lid)
        del truth.lines[lid]
        del truth.descriptors[lid]

    if len(truth.points) < max(1, cfg.points // 2):
        raise ConfigError("infeasible scene: most points invisible to two keyframes")
    if cfg.lines > 0 and len(truth.lines) < max(1, cfg.lines // 2):
        raise ConfigError("infeasible scene: most lines invisible to two keyframes")
    smap.check_consistency()
    return truth, smap


def noise_models(cfg: HarnessConfig) -> tuple[PyramidNoiseTable, DepthNoiseModel]:
    return (
        PyramidNoiseTable(cfg.pixel_sigma, cfg.pyramid_factor, cfg.pyramid_levels),
        DepthNoiseModel(cfg.depth_c0, cfg.depth_c1, cfg.depth_zref),
    )
