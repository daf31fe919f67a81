"""Line-segment geometry: triangulation, 2D/3D distances, covariances, Jacobians.

Image lines are parameterized as ``n . u - h = 0`` with a unit normal n and
signed offset h. A 3D segment landmark is a pair of world endpoints (P, Q);
a stereo observation additionally yields the two endpoints backprojected at
their measured depths, fixed in the camera frame.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateGeometryError,
    SingularJacobianError,
    TriangulationDegeneracyError,
)
from .geometry import (
    CameraIntrinsics,
    Se3Pose,
    backproject,
    hat3,
    left_perturbation_point_jacobian,
    project,
    projection_jacobian,
)
from .noise import DepthNoiseModel, sigma_z

# Degeneracy threshold for triangulation, applied after scaling the line to a
# unit normal part and the pixel to unit homogeneous coordinate.
EPS_DEGENERATE = 1e-8

# Singular-locus guards: |V| = |(X-Bp) x (X-Bq)| in m^2, |X - B| in m.
EPS_V = 1e-9
EPS_ENDPOINT = 1e-9

MIN_SEGMENT_LENGTH_PX = 5.0

# d(l)/d(p, q) for l = (q_v - p_v, p_u - q_u).
_DL_DPQ = np.array([[0.0, -1.0, 0.0, 1.0], [1.0, 0.0, -1.0, 0.0]])
_DP_DPQ = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])


class EndpointPairing(enum.Enum):
    DIRECT = "direct"
    SWAPPED = "swapped"


@dataclass(frozen=True)
class Line2dParams:
    """Image line ``normal . u - offset = 0`` with cached orientation theta."""

    normal: np.ndarray
    offset: float
    theta: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if n.shape != (2,):
            raise ValueError("normal must be a 2-vector")
        if abs(np.linalg.norm(n) - 1.0) > 1e-12:
            raise ValueError("normal must be unit length")
        object.__setattr__(self, "normal", n)

    def as_homogeneous(self) -> np.ndarray:
        """Homogeneous coefficients (n_u, n_v, -h)."""
        return np.array([self.normal[0], self.normal[1], -self.offset])

    def canonical(self) -> "Line2dParams":
        """Resolve the (n, h) vs (-n, -h) ambiguity: n_u >= 0, tie n_v > 0."""
        n_u, n_v = self.normal
        if n_u < 0 or (n_u == 0 and n_v < 0):
            return Line2dParams(-self.normal, -self.offset, np.arctan2(-n_v, -n_u))
        return self


def line_params_from_endpoints(p, q) -> Line2dParams:
    """Unit-normal line parameters through two pixels."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    l = np.array([q[1] - p[1], p[0] - q[0]])
    norm = np.linalg.norm(l)
    if norm == 0.0:
        raise DegenerateGeometryError("coincident endpoints define no line")
    n = l / norm
    return Line2dParams(n, float(n @ p), float(np.arctan2(n[1], n[0])))


def homogeneous_line(p, q) -> np.ndarray:
    """Homogeneous image line through two pixels: cross of their lifted coords."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return np.cross(np.append(p, 1.0), np.append(q, 1.0))


@dataclass(frozen=True)
class LineObservation:
    """Matched image segment (p, q) with optional per-endpoint depths.

    Stereo means both depths exist and are finite; only then can the
    endpoints be backprojected.
    """

    p: np.ndarray
    q: np.ndarray
    depth_p: float | None = None
    depth_q: float | None = None
    level: int = 0
    descriptor: np.ndarray | None = None
    min_length: float = MIN_SEGMENT_LENGTH_PX

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        q = np.asarray(self.q, dtype=float)
        if p.shape != (2,) or q.shape != (2,):
            raise ValueError("endpoints must be 2-vectors")
        if np.linalg.norm(p - q) < self.min_length:
            raise DegenerateGeometryError(
                f"segment shorter than {self.min_length} px"
            )
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        if self.descriptor is not None:
            d = np.asarray(self.descriptor, dtype=bool)
            object.__setattr__(self, "descriptor", d)

    @property
    def is_stereo(self) -> bool:
        return (
            self.depth_p is not None
            and self.depth_q is not None
            and np.isfinite(self.depth_p)
            and np.isfinite(self.depth_q)
        )

    def line_params(self) -> Line2dParams:
        return line_params_from_endpoints(self.p, self.q)


@dataclass(frozen=True)
class LineLandmark:
    """3D segment landmark: world endpoints p and q."""

    p: np.ndarray
    q: np.ndarray
    id: int = -1
    n_obs: int = 0

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        q = np.asarray(self.q, dtype=float)
        if p.shape != (3,) or q.shape != (3,):
            raise ValueError("endpoints must be 3-vectors")
        if np.linalg.norm(p - q) == 0.0:
            raise DegenerateGeometryError("zero-length 3D segment")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    def direction(self) -> np.ndarray:
        d = self.q - self.p
        return d / np.linalg.norm(d)


@dataclass(frozen=True)
class BackprojectedSegment:
    """Observation endpoints cast to 3D at their measured depths (camera frame)."""

    b_p: np.ndarray
    b_q: np.ndarray

    def __post_init__(self):
        b_p = np.asarray(self.b_p, dtype=float)
        b_q = np.asarray(self.b_q, dtype=float)
        if np.linalg.norm(b_p - b_q) == 0.0:
            raise DegenerateGeometryError("zero-length backprojected segment")
        object.__setattr__(self, "b_p", b_p)
        object.__setattr__(self, "b_q", b_q)

    @classmethod
    def from_observation(
        cls, obs: LineObservation, intrinsics: CameraIntrinsics
    ) -> "BackprojectedSegment":
        if not obs.is_stereo:
            raise DegenerateGeometryError("mono observation has no backprojection")
        return cls(
            backproject(intrinsics, obs.p, obs.depth_p),
            backproject(intrinsics, obs.q, obs.depth_q),
        )


# ---------------------------------------------------------------------------
# Triangulation


def _normalize_line_and_pixel(line2, x) -> tuple[np.ndarray, np.ndarray]:
    line2 = np.asarray(line2, dtype=float)
    x = np.asarray(x, dtype=float)
    normal = np.linalg.norm(line2[:2])
    if normal == 0.0:
        raise DegenerateGeometryError("line at infinity")
    if x[2] == 0.0:
        raise DegenerateGeometryError("pixel at infinity")
    return line2 / normal, x / x[2]


def triangulate_line_depth(
    pose1: Se3Pose,
    pose2: Se3Pose,
    intrinsics1: CameraIntrinsics,
    intrinsics2: CameraIntrinsics,
    line2,
    x,
    eps: float = EPS_DEGENERATE,
) -> float:
    """Depth of the image-1 pixel x whose 3D point lies on the plane of line2.

    ``line2`` is the homogeneous 2D line observed in image 2, ``x`` the
    homogeneous pixel in image 1. The depth follows from intersecting the ray
    of x with the plane backprojected from line2:

        depth = -(l2 . e2) / (l2 . H21 x)

    with epipole e2 = K2 t21 and infinite homography H21 = K2 R21 K1^-1.
    The configuration is degenerate when the vanishing point H21 x falls on
    line2; if additionally the epipole lies on line2 the plane coincides
    with the epipolar plane of x and every depth fits.
    """
    l2n, xn = _normalize_line_and_pixel(line2, x)
    r21 = pose2.rotation @ pose1.rotation.T
    t21 = pose2.translation - r21 @ pose1.translation
    k2 = intrinsics2.matrix()
    epipole = k2 @ t21
    h21 = k2 @ r21 @ np.linalg.inv(intrinsics1.matrix())
    denominator = float(l2n @ (h21 @ xn))
    numerator = float(-l2n @ epipole)
    if abs(denominator) <= eps:
        infinite = abs(numerator) <= eps
        raise TriangulationDegeneracyError(
            "epipolar-plane-parallel configuration"
            + (" (infinite solutions)" if infinite else " (no solution)"),
            infinite_solutions=infinite,
        )
    return numerator / denominator


def triangulate_rectified(
    baseline: float, fx: float, line2, x, eps: float = EPS_DEGENERATE
) -> tuple[float, float]:
    """Closed-form depth and disparity for an ideal rectified binocular pair.

    depth = b fx l2_x / (l2 . x) and disparity = (l2 . x) / l2_x, so
    depth * disparity = b fx identically.
    """
    l2n, xn = _normalize_line_and_pixel(line2, x)
    dot = float(l2n @ xn)
    if abs(dot) <= eps:
        # Horizontal epipolar geometry: parallel image lines. Infinite
        # solutions exactly when the line itself is epipolar (horizontal).
        raise TriangulationDegeneracyError(
            "parallel image lines",
            infinite_solutions=abs(l2n[0]) <= eps,
        )
    if abs(l2n[0]) <= eps:
        raise TriangulationDegeneracyError(
            "line is epipolar but the pixel is off it (no solution)",
            infinite_solutions=False,
        )
    return baseline * fx * l2n[0] / dot, dot / l2n[0]


# ---------------------------------------------------------------------------
# Distances


def distance_2d(line: Line2dParams, pose: Se3Pose, intrinsics: CameraIntrinsics, point_w) -> float:
    """Signed image-plane distance of the projected world point from the line."""
    return float(line.normal @ project(intrinsics, pose.transform(point_w)) - line.offset)


def distance_3d(point_c, seg: BackprojectedSegment) -> float:
    """Perpendicular distance of a camera-frame point from the backprojected line."""
    point_c = np.asarray(point_c, dtype=float)
    v = np.cross(point_c - seg.b_p, point_c - seg.b_q)
    return float(np.linalg.norm(v) / np.linalg.norm(seg.b_p - seg.b_q))


def endpoint_distance(point_c, b) -> float:
    """Euclidean distance between a camera-frame point and a backprojected endpoint."""
    return float(np.linalg.norm(np.asarray(point_c, dtype=float) - np.asarray(b, dtype=float)))


def associate_endpoints(seg: BackprojectedSegment, p_c, q_c) -> EndpointPairing:
    """Pairing of (P, Q) with (b_p, b_q) minimizing the summed endpoint distances.

    Ties resolve to DIRECT. Computed once when an optimization is set up and
    held fixed for the whole run.
    """
    p_c = np.asarray(p_c, dtype=float)
    q_c = np.asarray(q_c, dtype=float)
    direct = np.linalg.norm(p_c - seg.b_p) + np.linalg.norm(q_c - seg.b_q)
    swapped = np.linalg.norm(p_c - seg.b_q) + np.linalg.norm(q_c - seg.b_p)
    return EndpointPairing.SWAPPED if swapped < direct else EndpointPairing.DIRECT


def paired_backprojections(
    seg: BackprojectedSegment, association: EndpointPairing
) -> tuple[np.ndarray, np.ndarray]:
    """Backprojected endpoints matched to (P, Q) under the given pairing."""
    if association is EndpointPairing.SWAPPED:
        return seg.b_q, seg.b_p
    return seg.b_p, seg.b_q


def backprojection_distance(
    obs: LineObservation,
    pose: Se3Pose,
    intrinsics: CameraIntrinsics,
    landmark: LineLandmark,
    mu: float,
    association: EndpointPairing,
) -> np.ndarray:
    """Per-endpoint residual d3D + mu * (distance to the paired backprojection)."""
    seg = BackprojectedSegment.from_observation(obs, intrinsics)
    p_c = pose.transform(landmark.p)
    q_c = pose.transform(landmark.q)
    b_for_p, b_for_q = paired_backprojections(seg, association)
    return np.array(
        [
            distance_3d(p_c, seg) + mu * endpoint_distance(p_c, b_for_p),
            distance_3d(q_c, seg) + mu * endpoint_distance(q_c, b_for_q),
        ]
    )


# ---------------------------------------------------------------------------
# Covariances


def _line_param_jacobians(p, q) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """d(n)/d(p,q), d(h)/d(p,q), the unit normal, and |l| for endpoints (p, q)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    l = np.array([q[1] - p[1], p[0] - q[0]])
    norm = np.linalg.norm(l)
    if norm == 0.0:
        raise DegenerateGeometryError("coincident endpoints")
    n = l / norm
    proj = np.eye(2) - np.outer(n, n)
    dn = proj @ _DL_DPQ / norm
    dh = n @ _DP_DPQ + p @ dn
    return dn, dh, n, norm


def normal_covariance(p, q, sigma_li: float) -> np.ndarray:
    """Covariance of the unit line normal under iid endpoint noise."""
    dn, _, _, _ = _line_param_jacobians(p, q)
    return sigma_li * sigma_li * dn @ dn.T


def offset_variance(p, q, sigma_li: float) -> float:
    """Variance of the signed line offset h under iid endpoint noise."""
    _, dh, _, _ = _line_param_jacobians(p, q)
    return float(sigma_li * sigma_li * dh @ dh)


def distance_2d_variance(
    obs: LineObservation,
    pose: Se3Pose,
    intrinsics: CameraIntrinsics,
    point_w,
    sigma_li: float,
) -> float:
    """First-order variance of the signed 2D distance w.r.t. endpoint noise.

    Propagates iid endpoint noise through the full chain (p, q) -> (n, h) ->
    distance, keeping the n-h cross covariance so the result matches direct
    propagation through the four endpoint coordinates.
    """
    dn, dh, n, _ = _line_param_jacobians(obs.p, obs.q)
    uv = project(intrinsics, pose.transform(point_w))
    j_pq = uv @ dn - dh
    return float(sigma_li * sigma_li * j_pq @ j_pq)


def backprojected_point_covariance(
    pixel, depth: float, intrinsics: CameraIntrinsics, sigma_li: float, sigma_depth: float
) -> np.ndarray:
    """Covariance of a backprojected endpoint under pixel and depth noise.

    Closed form of J diag(sigma_li^2, sigma_li^2, sigma_depth^2) J^T with
    J the backprojection Jacobian w.r.t. (u, v, depth); xn, yn below are the
    normalized image coordinates (the backprojected point divided by depth).
    """
    u, v = np.asarray(pixel, dtype=float)
    if not (np.isfinite(depth) and depth > 0):
        raise DegenerateGeometryError(f"invalid depth {depth}")
    xn = (u - intrinsics.cx) / intrinsics.fx
    yn = (v - intrinsics.cy) / intrinsics.fy
    var_li = sigma_li * sigma_li
    var_z = sigma_depth * sigma_depth
    d2 = depth * depth
    return np.array(
        [
            [var_z * xn * xn + d2 * var_li / intrinsics.fx**2, var_z * xn * yn, var_z * xn],
            [var_z * xn * yn, var_z * yn * yn + d2 * var_li / intrinsics.fy**2, var_z * yn],
            [var_z * xn, var_z * yn, var_z],
        ]
    )


def _distance_3d_rows(point_c, seg: BackprojectedSegment) -> tuple[np.ndarray, np.ndarray] | None:
    """d(d3D)/d(b_p) and d(d3D)/d(b_q) at a camera-frame point; None when on-line."""
    x = np.asarray(point_c, dtype=float)
    dp = x - seg.b_p
    dq = x - seg.b_q
    v = np.cross(dp, dq)
    v_norm = np.linalg.norm(v)
    if v_norm < EPS_V:
        return None
    db = seg.b_p - seg.b_q
    db_norm = np.linalg.norm(db)
    row_bp = v @ hat3(dq) / (v_norm * db_norm) - v_norm * db / db_norm**3
    row_bq = -v @ hat3(dp) / (v_norm * db_norm) + v_norm * db / db_norm**3
    return row_bp, row_bq


def backprojection_distance_covariance(
    obs: LineObservation,
    pose: Se3Pose,
    intrinsics: CameraIntrinsics,
    landmark: LineLandmark,
    mu: float,
    association: EndpointPairing,
    sigma_li: float,
    depth_noise: DepthNoiseModel,
) -> np.ndarray:
    """Diagonal 2x2 covariance of the backprojection-distance residual.

    Each diagonal entry propagates the per-endpoint backprojection
    covariances through d3D + mu * dP evaluated at that map endpoint; the
    cross-endpoint coupling is deliberately dropped. When the map endpoint
    sits on the backprojected line the d3D derivative is singular and the
    propagation falls back to the dP part alone; if that also vanishes the
    observation carries no usable information and the call fails.
    """
    seg = BackprojectedSegment.from_observation(obs, intrinsics)
    cov_bp = backprojected_point_covariance(
        obs.p, obs.depth_p, intrinsics, sigma_li, sigma_z(depth_noise, obs.depth_p)
    )
    cov_bq = backprojected_point_covariance(
        obs.q, obs.depth_q, intrinsics, sigma_li, sigma_z(depth_noise, obs.depth_q)
    )
    b_for_p, b_for_q = paired_backprojections(seg, association)
    p_uses_bp = association is EndpointPairing.DIRECT

    variances = []
    for point_w, paired_b, paired_is_bp in (
        (landmark.p, b_for_p, p_uses_bp),
        (landmark.q, b_for_q, not p_uses_bp),
    ):
        x = pose.transform(point_w)
        rows = _distance_3d_rows(x, seg)
        if rows is None:
            row_bp = np.zeros(3)
            row_bq = np.zeros(3)
        else:
            row_bp, row_bq = rows
        delta = x - paired_b
        delta_norm = np.linalg.norm(delta)
        if delta_norm >= EPS_ENDPOINT:
            dp_row = -delta / delta_norm
            if paired_is_bp:
                row_bp = row_bp + mu * dp_row
            else:
                row_bq = row_bq + mu * dp_row
        variances.append(row_bp @ cov_bp @ row_bp + row_bq @ cov_bq @ row_bq)

    variances = np.asarray(variances, dtype=float)
    if np.any(variances <= 0.0):
        raise DegenerateGeometryError(
            "propagated backprojection-distance variance vanished"
        )
    return np.diag(variances)


# ---------------------------------------------------------------------------
# Jacobians of the error terms (twist columns ordered (phi, rho))


def distance_2d_jacobians(
    line: Line2dParams, pose: Se3Pose, intrinsics: CameraIntrinsics, point_w
) -> tuple[np.ndarray, np.ndarray]:
    """Rows d(distance)/d(twist) and d(distance)/d(point) for the 2D term."""
    x_c = pose.transform(point_w)
    row_c = line.normal @ projection_jacobian(intrinsics, x_c)
    return row_c @ left_perturbation_point_jacobian(x_c), row_c @ pose.rotation


def _chain_rows(row_c: np.ndarray, x_c: np.ndarray, pose: Se3Pose):
    return row_c @ left_perturbation_point_jacobian(x_c), row_c @ pose.rotation


def distance_3d_jacobians(
    seg: BackprojectedSegment,
    pose: Se3Pose,
    point_w,
    on_singular: str = "raise",
) -> tuple[np.ndarray, np.ndarray]:
    """Rows of the perpendicular 3D distance w.r.t. twist and world point."""
    x_c = pose.transform(point_w)
    v = np.cross(x_c - seg.b_p, x_c - seg.b_q)
    v_norm = np.linalg.norm(v)
    db = seg.b_p - seg.b_q
    if v_norm < EPS_V:
        if on_singular == "zero":
            return np.zeros(6), np.zeros(3)
        raise SingularJacobianError("point lies on the backprojected line")
    row_c = -v @ hat3(db) / (v_norm * np.linalg.norm(db))
    return _chain_rows(row_c, x_c, pose)


def endpoint_distance_jacobians(
    b, pose: Se3Pose, point_w, on_singular: str = "raise"
) -> tuple[np.ndarray, np.ndarray]:
    """Rows of the endpoint-to-backprojection distance w.r.t. twist and point."""
    x_c = pose.transform(point_w)
    delta = x_c - np.asarray(b, dtype=float)
    norm = np.linalg.norm(delta)
    if norm < EPS_ENDPOINT:
        if on_singular == "zero":
            return np.zeros(6), np.zeros(3)
        raise SingularJacobianError("point coincides with the backprojection")
    return _chain_rows(delta / norm, x_c, pose)


def backprojection_distance_jacobians(
    seg: BackprojectedSegment,
    paired_b,
    pose: Se3Pose,
    point_w,
    mu: float,
    on_singular: str = "raise",
) -> tuple[np.ndarray, np.ndarray]:
    """Rows of d3D + mu * dP for one endpoint, chained once through the pose."""
    x_c = pose.transform(point_w)
    v = np.cross(x_c - seg.b_p, x_c - seg.b_q)
    v_norm = np.linalg.norm(v)
    db = seg.b_p - seg.b_q
    if v_norm < EPS_V:
        if on_singular != "zero":
            raise SingularJacobianError("point lies on the backprojected line")
        row_c = np.zeros(3)
    else:
        row_c = -v @ hat3(db) / (v_norm * np.linalg.norm(db))
    delta = x_c - np.asarray(paired_b, dtype=float)
    norm = np.linalg.norm(delta)
    if norm < EPS_ENDPOINT:
        if on_singular != "zero":
            raise SingularJacobianError("point coincides with the backprojection")
    else:
        row_c = row_c + mu * delta / norm
    return _chain_rows(row_c, x_c, pose)


def line_error_jacobians(term: str, **inputs) -> tuple[np.ndarray, np.ndarray]:
    """Dispatch to the per-term Jacobian functions by tag {d2d, d3d, dp, db}."""
    table = {
        "d2d": distance_2d_jacobians,
        "d3d": distance_3d_jacobians,
        "dp": endpoint_distance_jacobians,
        "db": backprojection_distance_jacobians,
    }
    if term not in table:
        raise ValueError(f"unknown line error term {term!r}")
    return table[term](**inputs)
