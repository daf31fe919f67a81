"""Bundle adjustment: residual-term assembly and Levenberg-Marquardt.

The solver minimizes the robustified sum of point reprojection errors and
line 2D/backprojection errors over keyframe poses (left-multiplicative SE(3)
increments), point positions, and line endpoint pairs. Damped normal
equations follow the augmented form (H + lambda I) dx = -g with IRLS robust
weights folded into the per-term information matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyProblemError, SingularSystemError
from .geometry import Z_MIN, CameraIntrinsics, Se3Pose, se3_exp
from .lines import (
    EPS_ENDPOINT,
    EPS_V,
    BackprojectedSegment,
    EndpointPairing,
    LineLandmark,
    LineObservation,
    associate_endpoints,
    backprojection_distance_covariance,
    distance_2d_variance,
)
from .noise import (
    CHI2_95_2D,
    CHI2_95_3D,
    DepthNoiseModel,
    PyramidNoiseTable,
    RobustKernel,
    robust_weight_batch,
    sigma_pixel,
    sigma_z,
)
from .point_errors import PointObservation
from .sparse_map import SparseMap


@dataclass(frozen=True)
class BaConfig:
    """Problem-assembly options (term selection, noise models, fixing)."""

    pixel_noise: PyramidNoiseTable = PyramidNoiseTable()
    depth_noise: DepthNoiseModel = DepthNoiseModel()
    kernel: str = "huber"  # huber | cauchy | none
    kernel_tau_2d: float = 0.0  # 0 -> 95% chi-square default
    kernel_tau_3d: float = 0.0
    cov_mode: str = "identity_cov"  # identity_cov | propagated_cov
    point_residual: str = "virtual_baseline"  # virtual_baseline | depth
    mu: float = 0.5
    include_line_2d: bool = True
    include_line_3d: bool = True
    min_mono_line_obs: int = 3
    fix_first_pose: bool = True
    fixed_pose_ids: tuple = ()
    fix_all_poses: bool = False
    fix_points: bool = False
    fix_lines: bool = False
    covisibility_threshold: int = 15

    def kernel_for(self, residual_dim: int) -> RobustKernel:
        if self.kernel == "none":
            return RobustKernel("none")
        if residual_dim == 2:
            tau = self.kernel_tau_2d or CHI2_95_2D
        else:
            tau = self.kernel_tau_3d or CHI2_95_3D
        return RobustKernel(self.kernel, tau)


@dataclass(frozen=True)
class LmSchedule:
    """Levenberg-Marquardt iteration policy."""

    max_iters: int = 50
    cost_rel_tol: float = 1e-9
    cost_abs_tol: float = 1e-18
    lambda0: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    lambda_min: float = 1e-12
    lambda_max: float = 1e10
    damping: str = "identity"  # identity | diagonal
    linear_solver: str = "schur"  # schur | dense
    refresh_covariances: bool = False


@dataclass
class ResidualTerm:
    """One error term of the objective; covariances cached at assembly."""

    kind: str  # point_mono | point_stereo | line_2d | line_3d
    keyframe_id: int
    landmark_id: int
    measurement: np.ndarray | None
    covariance: np.ndarray
    kernel: RobustKernel
    variant: str = ""  # point_stereo: binocular | virtual_baseline | depth
    association: EndpointPairing | None = None
    obs: PointObservation | LineObservation | None = None


@dataclass
class State:
    """Mutable optimization state: stacked pose/landmark values."""

    rotations: np.ndarray  # (K, 3, 3)
    translations: np.ndarray  # (K, 3)
    points: np.ndarray  # (P, 3)
    lines: np.ndarray  # (L, 2, 3)

    def copy(self) -> "State":
        return State(
            self.rotations.copy(),
            self.translations.copy(),
            self.points.copy(),
            self.lines.copy(),
        )


@dataclass
class MapValues:
    """Optimized values keyed by map ids, ready to write back into a SparseMap."""

    poses: dict[int, Se3Pose]
    points: dict[int, np.ndarray]
    lines: dict[int, tuple[np.ndarray, np.ndarray]]


@dataclass
class IterationRow:
    iteration: int
    cost: float
    lamda: float
    accepted: bool
    step_norm: float
    breakdown: dict[str, float]


@dataclass
class OptimizationReport:
    rows: list[IterationRow] = field(default_factory=list)
    converged: bool = False
    message: str = ""
    initial_cost: float = 0.0
    final_cost: float = 0.0

    def accepted_costs(self) -> list[float]:
        return [self.initial_cost] + [r.cost for r in self.rows if r.accepted]

    def to_csv(self) -> str:
        kinds = sorted({k for r in self.rows for k in r.breakdown})
        header = ["iteration", "cost", "lambda", "accepted", "step_norm"] + kinds
        lines = [",".join(header)]
        for r in self.rows:
            cells = [
                str(r.iteration),
                f"{r.cost:.9g}",
                f"{r.lamda:.9g}",
                str(int(r.accepted)),
                f"{r.step_norm:.9g}",
            ] + [f"{r.breakdown.get(k, 0.0):.9g}" for k in kinds]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def _batch_hat(v: np.ndarray) -> np.ndarray:
    m = np.zeros(v.shape[:-1] + (3, 3))
    m[..., 0, 1] = -v[..., 2]
    m[..., 0, 2] = v[..., 1]
    m[..., 1, 0] = v[..., 2]
    m[..., 1, 2] = -v[..., 0]
    m[..., 2, 0] = -v[..., 1]
    m[..., 2, 1] = v[..., 0]
    return m


def _pose_chain(row_c: np.ndarray, x_c: np.ndarray) -> np.ndarray:
    """Chain 1x3 rows through d X_c / d xi = [-hat(X_c) | I] (batched)."""
    return np.concatenate([-np.cross(row_c, x_c), row_c], axis=-1)


@dataclass
class _Table:
    """Vectorized view of all terms of one internal kind."""

    kind: str  # point_mono | point_stereo | point_depth | line_2d | line_3d
    term_idx: np.ndarray
    kf_slot: np.ndarray
    lm_slot: np.ndarray
    meas: np.ndarray | None
    info: np.ndarray  # (N, r, r) inverse covariances (robust weights applied later)
    kernel: RobustKernel
    # line_2d payload
    normal: np.ndarray | None = None
    offset: np.ndarray | None = None
    # line_3d payload
    b_p: np.ndarray | None = None
    b_q: np.ndarray | None = None
    swapped: np.ndarray | None = None
    mu: float = 0.0

    def __len__(self):
        return len(self.kf_slot)


class Problem:
    """Assembled BA problem: state snapshot, free-block layout, term tables."""

    def __init__(
        self,
        intrinsics: CameraIntrinsics,
        kf_ids: list[int],
        poses: list[Se3Pose],
        point_ids: list[int],
        point_positions: np.ndarray,
        line_ids: list[int],
        line_endpoints: np.ndarray,
        pose_free: np.ndarray,
        point_free: np.ndarray,
        line_free: np.ndarray,
        terms: list[ResidualTerm],
        config: BaConfig,
    ):
        self.intrinsics = intrinsics
        self.kf_ids = kf_ids
        self.point_ids = point_ids
        self.line_ids = line_ids
        self.config = config
        self.terms = terms
        self.initial_state = State(
            np.stack([p.rotation for p in poses]) if poses else np.zeros((0, 3, 3)),
            np.stack([p.translation for p in poses]) if poses else np.zeros((0, 3)),
            np.asarray(point_positions, dtype=float).reshape(-1, 3),
            np.asarray(line_endpoints, dtype=float).reshape(-1, 2, 3),
        )
        self.pose_free = pose_free
        self.point_free = point_free
        self.line_free = line_free

        # parameter layout: [free poses | free points | free lines]
        self.pose_param = np.where(pose_free, np.cumsum(pose_free) - 1, -1)
        self.point_param = np.where(point_free, np.cumsum(point_free) - 1, -1)
        self.line_param = np.where(line_free, np.cumsum(line_free) - 1, -1)
        self.n_free_poses = int(pose_free.sum())
        self.n_free_points = int(point_free.sum())
        self.n_free_lines = int(line_free.sum())
        self.point_offset = 6 * self.n_free_poses
        self.line_offset = self.point_offset + 3 * self.n_free_points
        self.n_params = self.line_offset + 6 * self.n_free_lines
        if self.n_params == 0:
            raise EmptyProblemError("no free parameter blocks")
        if not terms:
            raise EmptyProblemError("no residual terms")

        self._kf_index = {k: i for i, k in enumerate(kf_ids)}
        self._pt_index = {k: i for i, k in enumerate(point_ids)}
        self._ln_index = {k: i for i, k in enumerate(line_ids)}
        self.tables = self._build_tables(terms)

    # -- table construction --------------------------------------------------

    def _build_tables(self, terms: list[ResidualTerm]) -> list[_Table]:
        grouped: dict[str, list[tuple[int, ResidualTerm]]] = {}
        for idx, t in enumerate(terms):
            key = t.kind
            if t.kind == "point_stereo" and t.variant == "depth":
                key = "point_depth"
            grouped.setdefault(key, []).append((idx, t))
        tables = []
        for key in ("point_mono", "point_stereo", "point_depth", "line_2d", "line_3d"):
            if key not in grouped:
                continue
            idx_terms = grouped[key]
            idx = np.array([i for i, _ in idx_terms])
            ts = [t for _, t in idx_terms]
            kf = np.array([self._kf_index[t.keyframe_id] for t in ts])
            if key.startswith("point"):
                lm = np.array([self._pt_index[t.landmark_id] for t in ts])
                meas = np.stack([t.measurement for t in ts])
                r = meas.shape[1]
                info = np.stack([np.linalg.inv(t.covariance.reshape(r, r)) for t in ts])
                tables.append(_Table(key, idx, kf, lm, meas, info, ts[0].kernel))
            elif key == "line_2d":
                lm = np.array([self._ln_index[t.landmark_id] for t in ts])
                normal = np.stack([t.measurement[:2] for t in ts])
                offset = np.array([t.measurement[2] for t in ts])
                info = np.stack([np.diag(1.0 / np.diag(t.covariance)) for t in ts])
                tables.append(
                    _Table(key, idx, kf, lm, None, info, ts[0].kernel, normal=normal, offset=offset)
                )
            else:  # line_3d
                lm = np.array([self._ln_index[t.landmark_id] for t in ts])
                b_p = np.stack([t.measurement[0] for t in ts])
                b_q = np.stack([t.measurement[1] for t in ts])
                swapped = np.array(
                    [t.association is EndpointPairing.SWAPPED for t in ts], dtype=bool
                )
                info = np.stack([np.diag(1.0 / np.diag(t.covariance)) for t in ts])
                tables.append(
                    _Table(
                        key, idx, kf, lm, None, info, ts[0].kernel,
                        b_p=b_p, b_q=b_q, swapped=swapped, mu=self.config.mu,
                    )
                )
        return tables

    # -- evaluation ------------------------------------------------------------

    def _points_cam(self, state: State, table: _Table) -> np.ndarray:
        x_w = state.points[table.lm_slot]
        r = state.rotations[table.kf_slot]
        return np.einsum("nij,nj->ni", r, x_w) + state.translations[table.kf_slot]

    def _line_endpoints_cam(self, state: State, table: _Table):
        ends = state.lines[table.lm_slot]  # (N, 2, 3)
        r = state.rotations[table.kf_slot]
        t = state.translations[table.kf_slot]
        p_c = np.einsum("nij,nj->ni", r, ends[:, 0]) + t
        q_c = np.einsum("nij,nj->ni", r, ends[:, 1]) + t
        return p_c, q_c

    def _project(self, x_c: np.ndarray) -> np.ndarray:
        k = self.intrinsics
        z = x_c[:, 2]
        return np.stack(
            [k.fx * x_c[:, 0] / z + k.cx, k.fy * x_c[:, 1] / z + k.cy], axis=-1
        )

    def _residuals(self, state: State, table: _Table) -> tuple[np.ndarray, bool]:
        """Residual array (N, r) for one table and a validity flag."""
        k = self.intrinsics
        if table.kind.startswith("point"):
            x_c = self._points_cam(state, table)
            if np.any(x_c[:, 2] <= Z_MIN):
                return np.zeros((len(table), 1)), False
            uv = self._project(x_c)
            if table.kind == "point_mono":
                res = table.meas - uv
            elif table.kind == "point_stereo":
                u_r = k.fx * (x_c[:, 0] - k.baseline) / x_c[:, 2] + k.cx
                res = table.meas - np.concatenate([uv, u_r[:, None]], axis=1)
            else:  # point_depth
                res = table.meas - np.concatenate([uv, x_c[:, 2:3]], axis=1)
            return res, bool(np.all(np.isfinite(res)))
        p_c, q_c = self._line_endpoints_cam(state, table)
        if table.kind == "line_2d":
            if np.any(p_c[:, 2] <= Z_MIN) or np.any(q_c[:, 2] <= Z_MIN):
                return np.zeros((len(table), 2)), False
            res_p = np.einsum("ni,ni->n", table.normal, self._project(p_c)) - table.offset
            res_q = np.einsum("ni,ni->n", table.normal, self._project(q_c)) - table.offset
            res = np.stack([res_p, res_q], axis=-1)
            return res, bool(np.all(np.isfinite(res)))
        # line_3d
        db = table.b_p - table.b_q
        db_norm = np.linalg.norm(db, axis=1)
        b_for_p = np.where(table.swapped[:, None], table.b_q, table.b_p)
        b_for_q = np.where(table.swapped[:, None], table.b_p, table.b_q)
        rows = []
        for x_c, b_paired in ((p_c, b_for_p), (q_c, b_for_q)):
            v = np.cross(x_c - table.b_p, x_c - table.b_q)
            d3 = np.linalg.norm(v, axis=1) / db_norm
            dp = np.linalg.norm(x_c - b_paired, axis=1)
            rows.append(d3 + table.mu * dp)
        res = np.stack(rows, axis=-1)
        return res, bool(np.all(np.isfinite(res)))

    def evaluate(self, state: State) -> tuple[float, dict[str, float]]:
        """Robustified total cost and a per-kind breakdown; inf when any term
        leaves the projection domain."""
        total = 0.0
        breakdown: dict[str, float] = {}
        for table in self.tables:
            res, valid = self._residuals(state, table)
            if not valid:
                return np.inf, {}
            s = np.einsum("ni,nij,nj->n", res, table.info, res)
            cost, _ = robust_weight_batch(table.kernel, s)
            c = float(cost.sum())
            breakdown[table.kind] = breakdown.get(table.kind, 0.0) + c
            total += c
        return total, breakdown

    # -- linearization -----------------------------------------------------------

    def _jacobians(self, state: State, table: _Table):
        """Per-term J wrt twist (N, r, 6) and wrt landmark (N, r, d)."""
        k = self.intrinsics
        rot = state.rotations[table.kf_slot]
        if table.kind.startswith("point"):
            x_c = self._points_cam(state, table)
            x, y, z = x_c[:, 0], x_c[:, 1], x_c[:, 2]
            rows = [
                np.stack([k.fx / z, np.zeros_like(z), -k.fx * x / z**2], axis=-1),
                np.stack([np.zeros_like(z), k.fy / z, -k.fy * y / z**2], axis=-1),
            ]
            if table.kind == "point_stereo":
                rows.append(
                    np.stack(
                        [k.fx / z, np.zeros_like(z), -k.fx * (x - k.baseline) / z**2],
                        axis=-1,
                    )
                )
            elif table.kind == "point_depth":
                third = np.zeros_like(rows[0])
                third[:, 2] = 1.0
                rows.append(third)
            j_pred = np.stack(rows, axis=1)  # (N, r, 3)
            lppj = np.concatenate(
                [-_batch_hat(x_c), np.broadcast_to(np.eye(3), x_c.shape + (3,))], axis=-1
            )
            j_pose = -np.einsum("nrc,ncd->nrd", j_pred, lppj)
            j_lm = -np.einsum("nrc,ncd->nrd", j_pred, rot)
            return j_pose, j_lm
        p_c, q_c = self._line_endpoints_cam(state, table)
        n_terms = len(table)
        j_pose = np.zeros((n_terms, 2, 6))
        j_lm = np.zeros((n_terms, 2, 6))
        if table.kind == "line_2d":
            for row, x_c in enumerate((p_c, q_c)):
                x, y, z = x_c[:, 0], x_c[:, 1], x_c[:, 2]
                n_u, n_v = table.normal[:, 0], table.normal[:, 1]
                row_c = np.stack(
                    [
                        k.fx * n_u / z,
                        k.fy * n_v / z,
                        -(k.fx * n_u * x + k.fy * n_v * y) / z**2,
                    ],
                    axis=-1,
                )
                j_pose[:, row, :] = _pose_chain(row_c, x_c)
                j_lm[:, row, 3 * row : 3 * row + 3] = np.einsum("ni,nij->nj", row_c, rot)
            return j_pose, j_lm
        # line_3d: d3D row is zeroed on the on-line singular locus, dP row on
        # endpoint coincidence (the distances are at their minima there).
        db = table.b_p - table.b_q
        db_norm = np.linalg.norm(db, axis=1)
        b_for_p = np.where(table.swapped[:, None], table.b_q, table.b_p)
        b_for_q = np.where(table.swapped[:, None], table.b_p, table.b_q)
        for row, (x_c, b_paired) in enumerate(((p_c, b_for_p), (q_c, b_for_q))):
            v = np.cross(x_c - table.b_p, x_c - table.b_q)
            v_norm = np.linalg.norm(v, axis=1)
            safe_v = np.maximum(v_norm, EPS_V)
            row_c = -np.cross(v, db) / (safe_v * db_norm)[:, None]
            row_c[v_norm < EPS_V] = 0.0
            delta = x_c - b_paired
            d_norm = np.linalg.norm(delta, axis=1)
            safe_d = np.maximum(d_norm, EPS_ENDPOINT)
            dp_row = np.where((d_norm >= EPS_ENDPOINT)[:, None], delta / safe_d[:, None], 0.0)
            row_c = row_c + table.mu * dp_row
            j_pose[:, row, :] = _pose_chain(row_c, x_c)
            j_lm[:, row, 3 * row : 3 * row + 3] = np.einsum("ni,nij->nj", row_c, rot)
        return j_pose, j_lm

    def linearize(self, state: State) -> tuple[np.ndarray, np.ndarray]:
        """Dense damped-equation ingredients: undamped H = J^T W J and g = J^T W r
        over the free parameters, robust IRLS weights folded into W."""
        n = self.n_params
        h = np.zeros((n, n))
        g = np.zeros(n)
        for table in self.tables:
            res, valid = self._residuals(state, table)
            if not valid:
                raise FloatingPointError("linearization at an invalid state")
            s = np.einsum("ni,nij,nj->n", res, table.info, res)
            _, w = robust_weight_batch(table.kernel, s)
            winfo = w[:, None, None] * table.info
            j_pose, j_lm = self._jacobians(state, table)

            if table.kind.startswith("point"):
                lm_param = self.point_param[table.lm_slot]
                lm_offset = self.point_offset
                d = 3
            else:
                lm_param = self.line_param[table.lm_slot]
                lm_offset = self.line_offset
                d = 6
            pose_param = self.pose_param[table.kf_slot]
            pose_on = pose_param >= 0
            lm_on = lm_param >= 0

            aj_pose = np.einsum("nrs,nsj->nrj", winfo, j_pose)
            aj_lm = np.einsum("nrs,nsj->nrj", winfo, j_lm)

            if np.any(pose_on):
                rows = (6 * pose_param[pose_on, None] + np.arange(6)[None, :])
                blocks = np.einsum("nri,nrj->nij", j_pose[pose_on], aj_pose[pose_on])
                np.add.at(h, (rows[:, :, None], rows[:, None, :]), blocks)
                gp = np.einsum("nri,nr->ni", aj_pose[pose_on], res[pose_on])
                np.add.at(g, rows, gp)
            if np.any(lm_on):
                cols = lm_offset + d * lm_param[lm_on, None] + np.arange(d)[None, :]
                blocks = np.einsum("nri,nrj->nij", j_lm[lm_on], aj_lm[lm_on])
                np.add.at(h, (cols[:, :, None], cols[:, None, :]), blocks)
                gl = np.einsum("nri,nr->ni", aj_lm[lm_on], res[lm_on])
                np.add.at(g, cols, gl)
            both = pose_on & lm_on
            if np.any(both):
                rows = 6 * pose_param[both, None] + np.arange(6)[None, :]
                cols = lm_offset + d * lm_param[both, None] + np.arange(d)[None, :]
                w_blocks = np.einsum("nri,nrj->nij", j_pose[both], aj_lm[both])
                np.add.at(h, (rows[:, :, None], cols[:, None, :]), w_blocks)
                np.add.at(h, (cols[:, :, None], rows[:, None, :]), np.swapaxes(w_blocks, 1, 2))
        return h, g

    # -- state updates ------------------------------------------------------------

    def retract(self, state: State, delta: np.ndarray) -> State:
        """Left-multiplicative pose retraction, additive landmark updates."""
        out = state.copy()
        for slot, param in enumerate(self.pose_param):
            if param < 0:
                continue
            inc = se3_exp(delta[6 * param : 6 * param + 6])
            out.rotations[slot] = inc.rotation @ state.rotations[slot]
            out.translations[slot] = inc.rotation @ state.translations[slot] + inc.translation
        if self.n_free_points:
            free = self.point_free
            d = delta[self.point_offset : self.point_offset + 3 * self.n_free_points]
            out.points[free] += d.reshape(-1, 3)
        if self.n_free_lines:
            free = self.line_free
            d = delta[self.line_offset :]
            out.lines[free] += d.reshape(-1, 2, 3)
        return out

    def values(self, state: State) -> MapValues:
        poses = {
            kf_id: Se3Pose(state.rotations[i], state.translations[i])
            for i, kf_id in enumerate(self.kf_ids)
        }
        points = {pid: state.points[i].copy() for i, pid in enumerate(self.point_ids)}
        lines = {
            lid: (state.lines[i, 0].copy(), state.lines[i, 1].copy())
            for i, lid in enumerate(self.line_ids)
        }
        return MapValues(poses, points, lines)


# ---------------------------------------------------------------------------
# Assembly


def _fallback_variance() -> np.ndarray:
    # Degenerate propagated covariance (noise-free consistent geometry):
    # the residual and its Jacobian vanish there, so any finite weight is
    # inert; unit variance keeps the information matrix finite.
    return np.diag([1.0, 1.0])


def assemble_problem(
    sparse_map: SparseMap,
    config: BaConfig | None = None,
    scope: str = "full",
    reference_kf: int | None = None,
) -> Problem:
    """Build residual terms and parameter blocks from a map snapshot.

    ``scope="full"`` takes every keyframe; ``scope="local"`` frees only the
    reference keyframe and the keyframes covisible with it (at least
    ``config.covisibility_threshold`` shared landmarks), keeps every other
    observer of the involved landmarks fixed, and drops the rest.
    """
    config = config or BaConfig()
    k = sparse_map.intrinsics

    kf_ids = sorted(sparse_map.keyframes)
    if scope == "local":
        if reference_kf is None or reference_kf not in sparse_map.keyframes:
            raise EmptyProblemError("local scope needs a valid reference keyframe")
        weights = sparse_map.covisibility(reference_kf)
        core = {reference_kf} | {
            kid for kid, w in weights.items() if w >= config.covisibility_threshold
        }
        landmarks_pt = set()
        landmarks_ln = set()
        for kid in core:
            landmarks_pt |= sparse_map.keyframes[kid].point_obs.keys()
            landmarks_ln |= sparse_map.keyframes[kid].line_obs.keys()
        involved = set(core)
        for pid in landmarks_pt:
            involved |= sparse_map.point_observers[pid]
        for lid in landmarks_ln:
            involved |= sparse_map.line_observers[lid]
        kf_ids = sorted(involved)
    elif scope != "full":
        raise ValueError(f"unknown scope {scope!r}")

    poses = [sparse_map.keyframes[i].pose for i in kf_ids]
    kf_set = set(kf_ids)

    point_ids = sorted(
        pid for pid, obs in sparse_map.point_observers.items() if obs & kf_set
    )
    line_ids = sorted(
        lid for lid, obs in sparse_map.line_observers.items() if obs & kf_set
    )
    points = np.array([sparse_map.points[p].position for p in point_ids]).reshape(-1, 3)
    lines = np.array(
        [[sparse_map.lines[l].p, sparse_map.lines[l].q] for l in line_ids]
    ).reshape(-1, 2, 3)

    pose_free = np.ones(len(kf_ids), dtype=bool)
    if scope == "local":
        for i, kid in enumerate(kf_ids):
            pose_free[i] = kid in core
    if config.fix_all_poses:
        pose_free[:] = False
    else:
        if config.fix_first_pose and len(kf_ids):
            pose_free[0] = False
        for kid in config.fixed_pose_ids:
            if kid in kf_set:
                pose_free[kf_ids.index(kid)] = False
    point_free = np.full(len(point_ids), not config.fix_points)
    line_free = np.full(len(line_ids), not config.fix_lines)

    kernel2 = config.kernel_for(2)
    kernel3 = config.kernel_for(3)
    terms: list[ResidualTerm] = []

    for kf_id in kf_ids:
        kf = sparse_map.keyframes[kf_id]
        pose = kf.pose
        for pt_id in sorted(kf.point_obs):
            obs = kf.point_obs[pt_id]
            var_px = sigma_pixel(config.pixel_noise, obs.level) ** 2
            if obs.is_mono:
                terms.append(
                    ResidualTerm(
                        "point_mono", kf_id, pt_id, obs.pixel.copy(),
                        var_px * np.eye(2), kernel2, obs=obs,
                    )
                )
                continue
            if obs.right_u is not None:
                meas = np.array([obs.pixel[0], obs.pixel[1], obs.right_u])
                variant = "binocular"
                # depth from disparity feeds the propagated covariance only
                depth = None
                if k.baseline is not None and obs.pixel[0] - obs.right_u > 0:
                    depth = k.baseline * k.fx / (obs.pixel[0] - obs.right_u)
            elif config.point_residual == "depth":
                meas = np.array([obs.pixel[0], obs.pixel[1], obs.depth])
                var_z = sigma_z(config.depth_noise, obs.depth) ** 2
                terms.append(
                    ResidualTerm(
                        "point_stereo", kf_id, pt_id, meas,
                        np.diag([var_px, var_px, var_z]), kernel3,
                        variant="depth", obs=obs,
                    )
                )
                continue
            else:
                u_r = obs.pixel[0] - k.baseline * k.fx / obs.depth
                meas = np.array([obs.pixel[0], obs.pixel[1], u_r])
                variant = "virtual_baseline"
                depth = obs.depth
            if config.cov_mode == "propagated_cov" and depth is not None:
                gain = k.baseline * k.fx / (depth * depth)
                var_z = sigma_z(config.depth_noise, depth) ** 2
                cov = np.array(
                    [
                        [var_px, 0.0, var_px],
                        [0.0, var_px, 0.0],
                        [var_px, 0.0, var_px + gain * gain * var_z],
                    ]
                )
            else:
                cov = var_px * np.eye(3)
            terms.append(
                ResidualTerm(
                    "point_stereo", kf_id, pt_id, meas, cov, kernel3,
                    variant=variant, obs=obs,
                )
            )

        for line_id in sorted(kf.line_obs):
            obs = kf.line_obs[line_id]
            lm = sparse_map.lines[line_id]
            sigma_li = sigma_pixel(config.pixel_noise, obs.level)
            mono = not obs.is_stereo
            if mono and lm.n_obs < config.min_mono_line_obs:
                continue
            if config.include_line_2d:
                params = obs.line_params()
                try:
                    var_p = distance_2d_variance(obs, pose, k, lm.p, sigma_li)
                    var_q = distance_2d_variance(obs, pose, k, lm.q, sigma_li)
                    cov = np.diag([var_p, var_q])
                except Exception:
                    cov = _fallback_variance()
                terms.append(
                    ResidualTerm(
                        "line_2d", kf_id, line_id,
                        np.array([params.normal[0], params.normal[1], params.offset]),
                        cov, kernel2, obs=obs,
                    )
                )
            if obs.is_stereo and config.include_line_3d:
                seg = BackprojectedSegment.from_observation(obs, k)
                assoc = associate_endpoints(
                    seg, pose.transform(lm.p), pose.transform(lm.q)
                )
                try:
                    cov = backprojection_distance_covariance(
                        obs, pose, k, lm, config.mu, assoc, sigma_li, config.depth_noise
                    )
                except Exception:
                    cov = _fallback_variance()
                terms.append(
                    ResidualTerm(
                        "line_3d", kf_id, line_id,
                        np.stack([seg.b_p, seg.b_q]), cov, kernel2,
                        association=assoc, obs=obs,
                    )
                )

    return Problem(
        k, kf_ids, poses, point_ids, points, line_ids, lines,
        pose_free, point_free, line_free, terms, config,
    )


# ---------------------------------------------------------------------------
# Damped solves


def _damping_vector(h: np.ndarray, lamda: float, mode: str) -> np.ndarray:
    if mode == "diagonal":
        return lamda * np.maximum(np.diag(h), 1e-12)
    return np.full(h.shape[0], lamda)


def _solve_dense(h: np.ndarray, g: np.ndarray, damp: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(h + np.diag(damp), -g)
    except np.linalg.LinAlgError as e:
        raise SingularSystemError(f"damped normal equations singular: {e}") from e


def _solve_schur(problem: Problem, h: np.ndarray, g: np.ndarray, damp: np.ndarray) -> np.ndarray:
    """Eliminate landmark blocks, solve the reduced pose system, back-substitute.

    Exact block elimination of the same damped system the dense path solves.
    """
    np_pose = problem.point_offset
    np_point = 3 * problem.n_free_points
    np_line = 6 * problem.n_free_lines
    if np_pose == 0:
        return _solve_dense(h, g, damp)

    h_pp = h[:np_pose, :np_pose] + np.diag(damp[:np_pose])
    rhs = -g[:np_pose].copy()
    s = h_pp.copy()

    pieces = []
    for count, d, offset in (
        (problem.n_free_points, 3, np_pose),
        (problem.n_free_lines, 6, np_pose + np_point),
    ):
        if count == 0:
            pieces.append(None)
            continue
        w = h[:np_pose, offset : offset + count * d].reshape(np_pose, count, d)
        diag = h[offset : offset + count * d, offset : offset + count * d]
        blocks = diag.reshape(count, d, count, d)[np.arange(count), :, np.arange(count), :].copy()
        damp_blocks = damp[offset : offset + count * d].reshape(count, d)
        blocks[:, np.arange(d), np.arange(d)] += damp_blocks
        try:
            inv_blocks = np.linalg.inv(blocks)
        except np.linalg.LinAlgError as e:
            raise SingularSystemError(f"landmark block singular: {e}") from e
        g_l = g[offset : offset + count * d].reshape(count, d)
        w_inv = np.einsum("ind,ndk->ink", w, inv_blocks)
        s -= np.einsum("ink,jnk->ij", w_inv, w)
        rhs += np.einsum("ink,nk->i", w_inv, g_l)
        pieces.append((w, inv_blocks, g_l, offset, count, d))

    try:
        x_pose = np.linalg.solve(s, rhs)
    except np.linalg.LinAlgError as e:
        raise SingularSystemError(f"reduced pose system singular: {e}") from e

    delta = np.zeros(problem.n_params)
    delta[:np_pose] = x_pose
    for piece in pieces:
        if piece is None:
            continue
        w, inv_blocks, g_l, offset, count, d = piece
        rhs_l = -g_l - np.einsum("ind,i->nd", w, x_pose)
        x_l = np.einsum("ndk,nk->nd", inv_blocks, rhs_l)
        delta[offset : offset + count * d] = x_l.reshape(-1)
    return delta


def lm_step(
    problem: Problem,
    lamda: float,
    state: State | None = None,
    schedule: LmSchedule | None = None,
) -> tuple[np.ndarray, float]:
    """One damped normal-equation solve; returns (delta, predicted cost reduction)."""
    if lamda <= 0:
        raise ValueError("damping must be positive")
    schedule = schedule or LmSchedule()
    state = state or problem.initial_state
    h, g = problem.linearize(state)
    damp = _damping_vector(h, lamda, schedule.damping)
    if schedule.linear_solver == "dense":
        delta = _solve_dense(h, g, damp)
    else:
        delta = _solve_schur(problem, h, g, damp)
    predicted = float(delta @ (damp * delta) - delta @ g)
    return delta, predicted


def optimize(
    problem: Problem, schedule: LmSchedule | None = None
) -> tuple[MapValues, OptimizationReport]:
    """Levenberg-Marquardt loop with multiplicative damping policy.

    Accepted iterations never increase the robustified cost; rejected steps
    raise the damping. Non-convergence is reported, not raised.
    """
    schedule = schedule or LmSchedule()
    state = problem.initial_state.copy()
    report = OptimizationReport()
    cost, _ = problem.evaluate(state)
    report.initial_cost = cost
    lamda = schedule.lambda0

    if not np.isfinite(cost):
        report.message = "initial state outside the projection domain"
        report.final_cost = cost
        return problem.values(state), report
    if cost <= schedule.cost_abs_tol:
        report.converged = True
        report.message = "initial cost below absolute tolerance"
        report.final_cost = cost
        return problem.values(state), report

    refresh = schedule.refresh_covariances
    for it in range(schedule.max_iters):
        if refresh and it > 0:
            _refresh_covariances(problem, state)
        try:
            delta, _ = lm_step(problem, lamda, state, schedule)
        except SingularSystemError as e:
            report.message = f"singular system: {e}"
            break
        candidate = problem.retract(state, delta)
        new_cost, breakdown = problem.evaluate(candidate)
        accepted = np.isfinite(new_cost) and new_cost <= cost
        step_norm = float(np.linalg.norm(delta))
        if accepted:
            state = candidate
            decrease = cost - new_cost
            cost = new_cost
            lamda = max(lamda / schedule.lambda_down, schedule.lambda_min)
            report.rows.append(
                IterationRow(it, cost, lamda, True, step_norm, breakdown)
            )
            if cost <= schedule.cost_abs_tol:
                report.converged = True
                report.message = "cost below absolute tolerance"
                break
            if decrease <= schedule.cost_rel_tol * max(cost, 1e-300):
                report.converged = True
                report.message = "relative cost decrease below tolerance"
                break
        else:
            lamda = min(lamda * schedule.lambda_up, schedule.lambda_max)
            report.rows.append(
                IterationRow(it, cost, lamda, False, step_norm, {})
            )
            if lamda >= schedule.lambda_max:
                report.message = "damping limit reached"
                break
    else:
        report.message = "iteration limit reached"
    report.final_cost = cost
    return problem.values(state), report


def _refresh_covariances(problem: Problem, state: State):
    """Re-evaluate cached covariances at the current state (optional slow path)."""
    values = problem.values(state)
    config = problem.config
    k = problem.intrinsics
    for term in problem.terms:
        if term.kind == "line_2d":
            pose = values.poses[term.keyframe_id]
            p_w, q_w = values.lines[term.landmark_id]
            sigma_li = sigma_pixel(config.pixel_noise, term.obs.level)
            try:
                lm = LineLandmark(p_w, q_w)
                var_p = distance_2d_variance(term.obs, pose, k, lm.p, sigma_li)
                var_q = distance_2d_variance(term.obs, pose, k, lm.q, sigma_li)
                term.covariance = np.diag([var_p, var_q])
            except Exception:
                term.covariance = _fallback_variance()
        elif term.kind == "line_3d":
            pose = values.poses[term.keyframe_id]
            p_w, q_w = values.lines[term.landmark_id]
            sigma_li = sigma_pixel(config.pixel_noise, term.obs.level)
            try:
                lm = LineLandmark(p_w, q_w)
                term.covariance = backprojection_distance_covariance(
                    term.obs, pose, k, lm, config.mu, term.association,
                    sigma_li, config.depth_noise,
                )
            except Exception:
                term.covariance = _fallback_variance()
    problem.tables = problem._build_tables(problem.terms)


def hessian_spectrum(
    problem: Problem,
    selection: tuple[str, list[int] | None],
    state: State | None = None,
) -> np.ndarray:
    """Eigenvalues of the selected free diagonal block of the GN matrix J^T W J.

    ``selection`` is ("pose" | "point" | "line", ids or None for all free).
    Fixed blocks have no columns and are excluded.
    """
    state = state or problem.initial_state
    h, _ = problem.linearize(state)
    kind, ids = selection
    if kind == "pose":
        id_list, param, offset, d = problem.kf_ids, problem.pose_param, 0, 6
    elif kind == "point":
        id_list, param, offset, d = (
            problem.point_ids, problem.point_param, problem.point_offset, 3,
        )
    elif kind == "line":
        id_list, param, offset, d = (
            problem.line_ids, problem.line_param, problem.line_offset, 6,
        )
    else:
        raise ValueError(f"unknown block kind {kind!r}")
    if ids is None:
        slots = [i for i in range(len(id_list)) if param[i] >= 0]
    else:
        slots = [id_list.index(i) for i in ids]
    cols: list[int] = []
    for slot in slots:
        p = param[slot]
        if p < 0:
            continue
        cols.extend(range(offset + d * p, offset + d * p + d))
    if not cols:
        raise EmptyProblemError("selection contains no free parameters")
    sub = h[np.ix_(cols, cols)]
    return np.linalg.eigvalsh(sub)
