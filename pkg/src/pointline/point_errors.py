"""Point reprojection residuals (mono, binocular, RGB-D virtual-baseline, depth)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidDepthError
from .geometry import (
    CameraIntrinsics,
    Se3Pose,
    left_perturbation_point_jacobian,
    project,
    projection_jacobian,
)
from .noise import DepthNoiseModel, PyramidNoiseTable, sigma_pixel, sigma_z


@dataclass(frozen=True)
class PointObservation:
    """One keypoint measurement.

    ``depth`` carries an RGB-D depth reading, ``right_u`` a binocular
    right-image column; at most one of them may be set. Both absent means
    a mono observation.
    """

    pixel: np.ndarray
    depth: float | None = None
    right_u: float | None = None
    level: int = 0

    def __post_init__(self):
        px = np.asarray(self.pixel, dtype=float)
        if px.shape != (2,):
            raise ValueError("pixel must be a 2-vector")
        if self.depth is not None and self.right_u is not None:
            raise ValueError("at most one of depth / right_u may drive the stereo channel")
        object.__setattr__(self, "pixel", px)

    @property
    def is_mono(self) -> bool:
        return self.depth is None and self.right_u is None


@dataclass(frozen=True)
class PointLandmark:
    position: np.ndarray
    id: int = -1

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float)
        if p.shape != (3,) or not np.all(np.isfinite(p)):
            raise ValueError("position must be a finite 3-vector")
        object.__setattr__(self, "position", p)


def _stereo_prediction(intrinsics: CameraIntrinsics, point_c: np.ndarray) -> np.ndarray:
    """(u, v, u_r) prediction: left projection plus right column at baseline b."""
    if intrinsics.baseline is None:
        raise ValueError("intrinsics carry no baseline")
    u, v = project(intrinsics, point_c)
    x, _, z = point_c
    u_r = intrinsics.fx * (x - intrinsics.baseline) / z + intrinsics.cx
    return np.array([u, v, u_r])


def mono_point_residual(
    obs: PointObservation,
    pose: Se3Pose,
    intrinsics: CameraIntrinsics,
    landmark: PointLandmark,
    pixel_noise: PyramidNoiseTable,
) -> tuple[np.ndarray, np.ndarray]:
    """2D reprojection residual p_i - proj(P) and its isotropic covariance."""
    residual = obs.pixel - project(intrinsics, pose.transform(landmark.position))
    var = sigma_pixel(pixel_noise, obs.level) ** 2
    return residual, var * np.eye(2)


def stereo_point_residual(
    obs: PointObservation,
    pose: Se3Pose,
    intrinsics: CameraIntrinsics,
    landmark: PointLandmark,
    pixel_noise: PyramidNoiseTable,
) -> tuple[np.ndarray, np.ndarray]:
    """Binocular residual (u_l, v_l, u_r) - prediction, covariance sigma^2 I3."""
    if obs.right_u is None:
        raise ValueError("stereo residual needs a right-image measurement")
    point_c = pose.transform(landmark.position)
    measured = np.array([obs.pixel[0], obs.pixel[1], obs.right_u])
    residual = measured - _stereo_prediction(intrinsics, point_c)
    var = sigma_pixel(pixel_noise, obs.level) ** 2
    return residual, var * np.eye(3)


def virtual_right_coordinate(intrinsics: CameraIntrinsics, u: float, depth: float) -> float:
    """Synthesized right-image column u - b fx / depth for an RGB-D measurement."""
    if intrinsics.baseline is None:
        raise ValueError("intrinsics carry no baseline")
    if not (np.isfinite(depth) and depth > 0):
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    return u - intrinsics.baseline * intrinsics.fx / depth


def rgbd_point_residual(
    obs: PointObservation,
    pose: Se3Pose,
    intrinsics: CameraIntrinsics,
    landmark: PointLandmark,
    pixel_noise: PyramidNoiseTable,
    depth_noise: DepthNoiseModel,
    mode: str = "identity_cov",
) -> tuple[np.ndarray, np.ndarray]:
    """Virtual-baseline stereo residual for an RGB-D observation.

    ``mode`` selects the covariance: "identity_cov" uses sigma_pi^2 I3,
    "propagated_cov" propagates (sigma_pi, sigma_pi, sigma_z(depth))
    through the measurement map (u, v, u - b fx / depth).
    """
    if obs.depth is None:
        raise InvalidDepthError("RGB-D residual needs a depth measurement")
    if mode not in ("identity_cov", "propagated_cov"):
        raise ValueError(f"unknown covariance mode {mode!r}")
    point_c = pose.transform(landmark.position)
    u_r = virtual_right_coordinate(intrinsics, obs.pixel[0], obs.depth)
    measured = np.array([obs.pixel[0], obs.pixel[1], u_r])
    residual = measured - _stereo_prediction(intrinsics, point_c)

    var_px = sigma_pixel(pixel_noise, obs.level) ** 2
    if mode == "identity_cov":
        return residual, var_px * np.eye(3)
    # J_S = d(u, v, u - b fx / d)/d(u, v, d) = [[1,0,0],[0,1,0],[1,0,b fx/d^2]]
    gain = intrinsics.baseline * intrinsics.fx / (obs.depth * obs.depth)
    var_z = sigma_z(depth_noise, obs.depth) ** 2
    cov = np.array(
        [
            [var_px, 0.0, var_px],
            [0.0, var_px, 0.0],
            [var_px, 0.0, var_px + gain * gain * var_z],
        ]
    )
    return residual, cov


def depth_point_residual(
    obs: PointObservation,
    pose: Se3Pose,
    intrinsics: CameraIntrinsics,
    landmark: PointLandmark,
    pixel_noise: PyramidNoiseTable,
    depth_noise: DepthNoiseModel,
) -> tuple[np.ndarray, np.ndarray]:
    """RGB-D residual (p_i - proj(P), depth - z_c) with diagonal covariance."""
    if obs.depth is None:
        raise InvalidDepthError("depth residual needs a depth measurement")
    point_c = pose.transform(landmark.position)
    uv = project(intrinsics, point_c)
    residual = np.array(
        [obs.pixel[0] - uv[0], obs.pixel[1] - uv[1], obs.depth - point_c[2]]
    )
    var_px = sigma_pixel(pixel_noise, obs.level) ** 2
    var_z = sigma_z(depth_noise, obs.depth) ** 2
    return residual, np.diag([var_px, var_px, var_z])


def mono_point_jacobians(
    pose: Se3Pose, intrinsics: CameraIntrinsics, landmark: PointLandmark
) -> tuple[np.ndarray, np.ndarray]:
    """d(residual)/d(twist) and d(residual)/d(landmark) for the mono residual."""
    point_c = pose.transform(landmark.position)
    jc = projection_jacobian(intrinsics, point_c)
    return -jc @ left_perturbation_point_jacobian(point_c), -jc @ pose.rotation


def _stereo_point_jacobian_c(
    intrinsics: CameraIntrinsics, point_c: np.ndarray
) -> np.ndarray:
    """d(u, v, u_r)/d(X_c) for the binocular / virtual-baseline prediction."""
    x, _, z = point_c
    jc = projection_jacobian(intrinsics, point_c)
    third = np.array(
        [intrinsics.fx / z, 0.0, -intrinsics.fx * (x - intrinsics.baseline) / (z * z)]
    )
    return np.vstack([jc, third])


def stereo_point_jacobians(
    pose: Se3Pose, intrinsics: CameraIntrinsics, landmark: PointLandmark
) -> tuple[np.ndarray, np.ndarray]:
    """Residual Jacobians for the binocular and virtual-baseline variants."""
    point_c = pose.transform(landmark.position)
    jp = _stereo_point_jacobian_c(intrinsics, point_c)
    return -jp @ left_perturbation_point_jacobian(point_c), -jp @ pose.rotation


def depth_point_jacobians(
    pose: Se3Pose, intrinsics: CameraIntrinsics, landmark: PointLandmark
) -> tuple[np.ndarray, np.ndarray]:
    """Residual Jacobians for the (pixel, depth) RGB-D variant."""
    point_c = pose.transform(landmark.position)
    jp = np.vstack([projection_jacobian(intrinsics, point_c), [0.0, 0.0, 1.0]])
    return -jp @ left_perturbation_point_jacobian(point_c), -jp @ pose.rotation
