"""Volumetric mapping: depth-image backprojection, incremental normals, and a
fixed-resolution octree of running centroids (position, color, normal).

Keyframe clouds arrive through a bounded FIFO and are integrated N at a
time; the whole map is rebuilt from the archived clouds whenever keyframe
poses change under a global adjustment.
"""

from __future__ import annotations

import queue
from dataclasses import dataclass

import numpy as np

from .errors import PointlineError
from .geometry import CameraIntrinsics, Se3Pose


@dataclass
class DepthImage:
    """Row-major depth map in meters; NaN marks missing readings."""

    depths: np.ndarray  # (H, W) float
    color: np.ndarray | None = None  # (H, W, 3) uint8

    def __post_init__(self):
        d = np.asarray(self.depths, dtype=float)
        if d.ndim != 2:
            raise ValueError("depths must be a 2D array")
        valid = np.isfinite(d)
        if np.any(d[valid] <= 0):
            raise ValueError("depths must be positive where present")
        self.depths = d
        if self.color is not None:
            c = np.asarray(self.color)
            if c.shape != d.shape + (3,):
                raise ValueError("color must be (H, W, 3)")
            self.color = c

    @property
    def height(self) -> int:
        return self.depths.shape[0]

    @property
    def width(self) -> int:
        return self.depths.shape[1]


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3)
    colors: np.ndarray | None = None  # (N, 3) uint8
    normals: np.ndarray | None = None  # (N, 3) unit vectors

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.points = p
        if self.colors is not None:
            c = np.asarray(self.colors)
            if len(c) != len(p):
                raise ValueError("colors length mismatch")
            self.colors = c.reshape(-1, 3)
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(n) != len(p):
                raise ValueError("normals length mismatch")
            present = np.all(np.isfinite(n), axis=1)
            norms = np.linalg.norm(n[present], axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("normals must be unit length where present")
            self.normals = n

    def __len__(self) -> int:
        return len(self.points)


def backproject_depth_image(
    image: DepthImage, intrinsics: CameraIntrinsics, with_normals: bool = True
) -> PointCloud:
    """One camera-frame point per valid pixel; colors and normals ride along.

    Normal rows are NaN where the 4-neighborhood is incomplete.
    """
    h, w = image.depths.shape
    u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    valid = np.isfinite(image.depths)
    d = image.depths[valid]
    x = (u[valid] - intrinsics.cx) / intrinsics.fx * d
    y = (v[valid] - intrinsics.cy) / intrinsics.fy * d
    points = np.stack([x, y, d], axis=-1)
    colors = image.color[valid] if image.color is not None else None
    normals = estimate_normals(image, intrinsics)[valid] if with_normals else None
    return PointCloud(points, colors, normals)


def estimate_normals(image: DepthImage, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Per-pixel surface normals from central differences on the 4-neighborhood.

    The four triangles spanned by cyclically adjacent neighbor pairs
    (right-up, up-left, left-down, down-right) contribute their cross
    products; since each cross product carries twice the triangle area this
    is the area-weighted average. Normals are oriented toward the camera
    (n . p < 0). Border pixels and pixels with incomplete neighborhoods get
    NaN rows.
    """
    h, w = image.depths.shape
    u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    d = image.depths
    pts = np.stack(
        [(u - intrinsics.cx) / intrinsics.fx * d, (v - intrinsics.cy) / intrinsics.fy * d, d],
        axis=-1,
    )
    out = np.full((h, w, 3), np.nan)
    if h < 3 or w < 3:
        return out
    center = pts[1:-1, 1:-1]
    right = pts[1:-1, 2:]
    left = pts[1:-1, :-2]
    up = pts[:-2, 1:-1]
    down = pts[2:, 1:-1]
    ok = (
        np.isfinite(center[..., 2])
        & np.isfinite(right[..., 2])
        & np.isfinite(left[..., 2])
        & np.isfinite(up[..., 2])
        & np.isfinite(down[..., 2])
    )
    acc = np.zeros_like(center)
    for a, b in ((right, up), (up, left), (left, down), (down, right)):
        acc += np.cross(a - center, b - center)
    norm = np.linalg.norm(acc, axis=-1)
    ok &= norm > 0
    normals = np.where(ok[..., None], acc / np.where(norm[..., None] == 0, 1.0, norm[..., None]), np.nan)
    # orient toward the camera
    flip = np.einsum("ijk,ijk->ij", normals, center) > 0
    normals = np.where((ok & flip)[..., None], -normals, normals)
    out[1:-1, 1:-1] = normals
    return out


class _Branch:
    __slots__ = ("children",)

    def __init__(self):
        self.children: list = [None] * 8


class _Cell:
    __slots__ = ("position_sum", "color_sum", "normal_sum", "count")

    def __init__(self):
        self.position_sum = np.zeros(3)
        self.color_sum = np.zeros(3)
        self.normal_sum = np.zeros(3)
        self.count = 0


class OctreeMap:
    """Sparse octree over a world-origin-anchored grid of half-open cells.

    Cell (i, j, k) covers [i*res, (i+1)*res) x ... ; each stored cell keeps
    running sums of the integrated world positions, colors, and normals.
    """

    def __init__(self, resolution: float, max_extent: float = 64.0):
        if resolution <= 0 or max_extent <= resolution:
            raise ValueError("need resolution > 0 and max_extent > resolution")
        self.resolution = resolution
        self.depth = int(np.ceil(np.log2(2.0 * max_extent / resolution)))
        self.half_cells = 1 << (self.depth - 1)
        self.root = _Branch()
        self.n_cells = 0

    @property
    def root_half_extent(self) -> float:
        """Root cube spans [-h, h) per axis."""
        return self.half_cells * self.resolution

    def cell_index(self, points: np.ndarray) -> np.ndarray:
        idx = np.floor(np.asarray(points, dtype=float) / self.resolution).astype(np.int64)
        if np.any(idx < -self.half_cells) or np.any(idx >= self.half_cells):
            raise PointlineError("point outside the octree root region")
        return idx

    def _leaf(self, index, create: bool) -> _Cell | None:
        o = (
            int(index[0]) + self.half_cells,
            int(index[1]) + self.half_cells,
            int(index[2]) + self.half_cells,
        )
        node = self.root
        for level in range(self.depth - 1, -1, -1):
            child = (
                (((o[0] >> level) & 1) << 2)
                | (((o[1] >> level) & 1) << 1)
                | ((o[2] >> level) & 1)
            )
            nxt = node.children[child]
            if nxt is None:
                if not create:
                    return None
                nxt = _Cell() if level == 0 else _Branch()
                if level == 0:
                    self.n_cells += 1
                node.children[child] = nxt
            node = nxt
        return node

    def cells(self):
        """Yield (index triple, cell) over stored cells, in index order."""
        stack = [(self.root, self.depth - 1, 0, 0, 0)]
        out = []

        def visit(node, level, i, j, k):
            for child in range(8):
                sub = node.children[child]
                if sub is None:
                    continue
                ci = (i << 1) | (child >> 2)
                cj = (j << 1) | ((child >> 1) & 1)
                ck = (k << 1) | (child & 1)
                if level == 0:
                    out.append(((ci - self.half_cells, cj - self.half_cells, ck - self.half_cells), sub))
                else:
                    visit(sub, level - 1, ci, cj, ck)

        visit(self.root, self.depth - 1, 0, 0, 0)
        out.sort(key=lambda item: item[0])
        return out

    def content_key(self) -> bytes:
        """Digest of the stored cells; unchanged by read-only operations."""
        import hashlib

        h = hashlib.sha256()
        for index, cell in self.cells():
            h.update(np.array(index, dtype=np.int64).tobytes())
            h.update(cell.position_sum.tobytes())
            h.update(cell.color_sum.tobytes())
            h.update(cell.normal_sum.tobytes())
            h.update(np.int64(cell.count).tobytes())
        return h.digest()


def integrate_cloud(octree: OctreeMap, cloud: PointCloud, pose: Se3Pose) -> dict[str, int]:
    """Fold a camera-frame cloud into the octree under the keyframe pose.

    ``pose`` is the world->camera transform of the source keyframe; points go
    to the world frame through its inverse. Per-cell aggregation happens
    before tree descent, so centroids are exact means of all integrated
    points regardless of batching. Missing (NaN) normals contribute nothing
    to the normal sums.
    """
    if len(cloud) == 0:
        return {"new_cells": 0, "updated_cells": 0}
    inv = pose.inverse()
    world = cloud.points @ inv.rotation.T + inv.translation
    world_normals = None
    if cloud.normals is not None:
        world_normals = np.where(
            np.isfinite(cloud.normals), cloud.normals, 0.0
        ) @ inv.rotation.T

    idx = octree.cell_index(world)
    unique, inverse = np.unique(idx, axis=0, return_inverse=True)
    n_cells = len(unique)
    pos_sum = np.zeros((n_cells, 3))
    np.add.at(pos_sum, inverse, world)
    counts = np.bincount(inverse, minlength=n_cells)
    color_sum = np.zeros((n_cells, 3))
    if cloud.colors is not None:
        np.add.at(color_sum, inverse, cloud.colors.astype(float))
    normal_sum = np.zeros((n_cells, 3))
    if world_normals is not None:
        np.add.at(normal_sum, inverse, world_normals)

    new_cells = 0
    updated = 0
    for row in range(n_cells):
        cell = octree._leaf(unique[row], create=True)
        if cell.count == 0:
            new_cells += 1
        else:
            updated += 1
        cell.position_sum += pos_sum[row]
        cell.color_sum += color_sum[row]
        cell.normal_sum += normal_sum[row]
        cell.count += int(counts[row])
    return {"new_cells": new_cells, "updated_cells": updated}


def extract_global_cloud(octree: OctreeMap) -> PointCloud:
    """Read-only snapshot: per-cell centroid, mean color (rounded half-up),
    renormalized mean normal."""
    points = []
    colors = []
    normals = []
    for _, cell in octree.cells():
        points.append(cell.position_sum / cell.count)
        colors.append(np.floor(cell.color_sum / cell.count + 0.5).astype(np.uint8))
        norm = np.linalg.norm(cell.normal_sum)
        normals.append(cell.normal_sum / norm if norm > 0 else np.array([0.0, 0.0, -1.0]))
    if not points:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8), np.zeros((0, 3)))
    return PointCloud(np.array(points), np.array(colors), np.array(normals))


@dataclass
class ArchivedKeyframe:
    """Retained integration input, enough to rebuild the map under new poses."""

    keyframe_id: int
    cloud: PointCloud | None
    pose: Se3Pose


def rebuild_on_adjustment(octree: OctreeMap, archive: list[ArchivedKeyframe]) -> OctreeMap:
    """Fresh octree from the archived clouds under their (possibly updated) poses."""
    rebuilt = OctreeMap(octree.resolution, octree.root_half_extent)
    for entry in archive:
        if entry.cloud is None:
            raise PointlineError(f"keyframe {entry.keyframe_id} has no archived cloud")
        integrate_cloud(rebuilt, entry.cloud, entry.pose)
    return rebuilt


def maps_equal(a: OctreeMap, b: OctreeMap, tol: float = 1e-12) -> bool:
    """Cell-by-cell comparison of indices, counts, and running sums."""
    cells_a = a.cells()
    cells_b = b.cells()
    if len(cells_a) != len(cells_b):
        return False
    for (ia, ca), (ib, cb) in zip(cells_a, cells_b):
        if ia != ib or ca.count != cb.count:
            return False
        scale = max(1.0, np.abs(ca.position_sum).max())
        if np.any(np.abs(ca.position_sum - cb.position_sum) > tol * scale):
            return False
        if np.any(np.abs(ca.color_sum - cb.color_sum) > tol * max(1.0, np.abs(ca.color_sum).max())):
            return False
        if np.any(np.abs(ca.normal_sum - cb.normal_sum) > tol * max(1.0, np.abs(ca.normal_sum).max())):
            return False
    return True


class VolumetricMapper:
    """FIFO consumer integrating keyframes into the octree N at a time.

    The bounded queue is the only channel between the producer (SLAM side)
    and this consumer; the archive keeps everything needed for
    ``rebuild_on_adjustment``.
    """

    def __init__(self, octree: OctreeMap, batch_size: int = 1, queue_capacity: int = 256):
        if batch_size < 1:
            raise ValueError("batch size must be >= 1")
        self.octree = octree
        self.batch_size = batch_size
        self._queue: queue.Queue = queue.Queue(maxsize=queue_capacity)
        self.archive: list[ArchivedKeyframe] = []

    def submit(self, keyframe_id: int, cloud: PointCloud, pose: Se3Pose):
        self._queue.put(ArchivedKeyframe(keyframe_id, cloud, pose))

    def pending(self) -> int:
        return self._queue.qsize()

    def process_batches(self, drain: bool = False) -> list[dict[str, int]]:
        """Integrate full batches from the queue (all remaining when draining)."""
        reports = []
        while self._queue.qsize() >= self.batch_size or (drain and not self._queue.empty()):
            batch = []
            for _ in range(min(self.batch_size, self._queue.qsize())):
                batch.append(self._queue.get())
            for entry in batch:
                reports.append(integrate_cloud(self.octree, entry.cloud, entry.pose))
                self.archive.append(entry)
        return reports

    def rebuild(self, updated_poses: dict[int, Se3Pose]) -> OctreeMap:
        """Swap in adjusted poses and rebuild; the result replaces the map."""
        for entry in self.archive:
            if entry.keyframe_id in updated_poses:
                entry.pose = updated_poses[entry.keyframe_id]
        self.octree = rebuild_on_adjustment(self.octree, self.archive)
        return self.octree


# ---------------------------------------------------------------------------
# Export formats: ASCII PLY and CSV, columns x y z r g b nx ny nz


def _format_row(point, color, normal) -> str:
    vals = [f"{v:.9g}" for v in point] + [str(int(c)) for c in color] + [
        f"{v:.9g}" for v in normal
    ]
    return " ".join(vals)


def export_ply(cloud: PointCloud) -> str:
    colors = cloud.colors if cloud.colors is not None else np.zeros((len(cloud), 3), int)
    normals = cloud.normals if cloud.normals is not None else np.zeros((len(cloud), 3))
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property float nx",
        "property float ny",
        "property float nz",
        "end_header",
    ]
    rows = [_format_row(p, c, n) for p, c, n in zip(cloud.points, colors, normals)]
    return "\n".join(header + rows) + "\n"


def export_csv(cloud: PointCloud) -> str:
    colors = cloud.colors if cloud.colors is not None else np.zeros((len(cloud), 3), int)
    normals = cloud.normals if cloud.normals is not None else np.zeros((len(cloud), 3))
    rows = ["x,y,z,r,g,b,nx,ny,nz"]
    for p, c, n in zip(cloud.points, colors, normals):
        cells = [f"{v:.9g}" for v in p] + [str(int(x)) for x in c] + [f"{v:.9g}" for v in n]
        rows.append(",".join(cells))
    return "\n".join(rows) + "\n"
