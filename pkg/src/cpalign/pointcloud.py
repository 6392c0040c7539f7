"""Point clouds, oriented boxes, and proximal hierarchical downsampling.

A point cloud is a float64 array of shape (N, 4): x, y, z, intensity.
The downsampling pass thins points inside selected near-range boxes while
leaving everything else untouched: each kept box is split into a concentric
inner box (dims scaled by alpha) and the remaining outer shell, and each
region is reduced by farthest point sampling with its own keep ratio.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .numerics import ShapeError


def ensure_cloud(points: np.ndarray, name: str = "point cloud") -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise ShapeError(f"{name} must have shape (N, 4), got {pts.shape}")
    if pts.size and not np.all(np.isfinite(pts)):
        raise ShapeError(f"{name} contains non-finite values")
    return np.ascontiguousarray(pts)


def normalize_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.remainder(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    return a


@dataclass
class OrientedBox:
    """Axis box in the ground plane: center, dims, yaw about +z.

    length runs along the box's local x axis (the yaw direction), width
    along local y, height along z. Membership tests are closed: boundary
    points count as inside.
    """

    cx: float
    cy: float
    cz: float
    length: float
    width: float
    height: float
    yaw: float = 0.0

    def __post_init__(self):
        if min(self.length, self.width, self.height) <= 0:
            raise ShapeError(
                f"box dims must be positive: ({self.length}, {self.width}, {self.height})"
            )
        self.yaw = normalize_angle(float(self.yaw))

    def scaled(self, factor: float) -> "OrientedBox":
        if factor <= 0:
            raise ShapeError(f"scale factor must be positive, got {factor}")
        return OrientedBox(self.cx, self.cy, self.cz, self.length * factor,
                           self.width * factor, self.height * factor, self.yaw)

    def to_local(self, xyz: np.ndarray) -> np.ndarray:
        """World points (N, 3) -> box frame."""
        xyz = np.asarray(xyz, dtype=np.float64)
        d = xyz - np.array([self.cx, self.cy, self.cz])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = d.copy()
        local[:, 0] = c * d[:, 0] + s * d[:, 1]
        local[:, 1] = -s * d[:, 0] + c * d[:, 1]
        return local

    def contains(self, xyz: np.ndarray) -> np.ndarray:
        """Closed membership mask for world points (N, 3)."""
        local = self.to_local(xyz)
        return ((np.abs(local[:, 0]) <= self.length / 2.0)
                & (np.abs(local[:, 1]) <= self.width / 2.0)
                & (np.abs(local[:, 2]) <= self.height / 2.0))

    def corners_bev(self) -> np.ndarray:
        """Footprint corners (4, 2) in world coordinates, counter-clockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hx, hy = self.length / 2.0, self.width / 2.0
        local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])


@dataclass
class PhdConfig:
    """Knobs for the proximal downsampling pass."""

    distance_threshold: float = 50.0   # planar metres from the agent
    max_boxes: int = 2                 # proximal boxes processed per frame
    inner_scale: float = 0.5           # alpha, concentric inner box factor
    inner_keep: float = 0.6            # FPS ratio inside the inner box
    outer_keep: float = 0.8            # FPS ratio for the outer shell
    seed: int = 0

    def __post_init__(self):
        if self.distance_threshold <= 0:
            raise ShapeError("distance_threshold must be positive")
        if self.max_boxes < 1:
            raise ShapeError("max_boxes must be at least 1")
        if not 0.0 < self.inner_scale < 1.0:
            raise ShapeError("inner_scale must lie in (0, 1)")
        for r in (self.inner_keep, self.outer_keep):
            if not 0.0 < r <= 1.0:
                raise ShapeError("keep ratios must lie in (0, 1]")


def select_proximal(boxes: list, agent_xy, cfg: PhdConfig,
                    rng: np.random.Generator | None = None) -> list:
    """Indices of boxes within the planar distance threshold, at most
    cfg.max_boxes of them, chosen uniformly without replacement when more
    qualify. Always returned in ascending index order."""
    ax, ay = float(agent_xy[0]), float(agent_xy[1])
    near = [i for i, b in enumerate(boxes)
            if math.hypot(b.cx - ax, b.cy - ay) <= cfg.distance_threshold]
    if len(near) <= cfg.max_boxes:
        return near
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    chosen = rng.choice(len(near), size=cfg.max_boxes, replace=False)
    return sorted(near[int(i)] for i in chosen)


def partition_regions(cloud: np.ndarray, box: OrientedBox,
                      inner_scale: float) -> tuple:
    """Split a box's points into (inner_idx, outer_idx), both ascending.

    inner is the alpha-scaled concentric box; outer is the shell between it
    and the full box. Both tests are closed, and inner wins the shared
    boundary, so the two index sets never overlap.
    """
    cloud = ensure_cloud(cloud)
    if cloud.shape[0] == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    full = box.contains(cloud[:, :3])
    inner = box.scaled(inner_scale).contains(cloud[:, :3])
    inner_idx = np.nonzero(full & inner)[0]
    outer_idx = np.nonzero(full & ~inner)[0]
    return inner_idx.astype(np.int64), outer_idx.astype(np.int64)


def fps(points: np.ndarray, ratio: float) -> np.ndarray:
    """Farthest point sampling on xyz; keeps ceil(ratio * N) points.

    Returns indices into ``points`` in ascending order, so slicing with
    them preserves the original point order. Greedy max-min selection,
    seeded at the point farthest from the centroid, lowest index on ties.
    """
    pts = ensure_cloud(points, "fps input")
    if not 0.0 < ratio <= 1.0:
        raise ShapeError(f"fps ratio must lie in (0, 1], got {ratio}")
    n = pts.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64)
    k = int(math.ceil(ratio * n))
    picks = kernels.fps_order(pts[:, :3], k)
    return np.sort(picks)


def phd_apply(cloud: np.ndarray, boxes: list, agent_xy, cfg: PhdConfig,
              rng: np.random.Generator | None = None) -> np.ndarray:
    """Proximal hierarchical downsampling of one cloud.

    Thins the points of at most cfg.max_boxes near-range boxes (inner and
    outer regions FPS-reduced with their own ratios) and passes every other
    point through untouched, preserving the original ordering. A point that
    falls inside several selected boxes is owned by the first selected box
    that contains it.
    """
    cloud = ensure_cloud(cloud)
    n = cloud.shape[0]
    if n == 0 or not boxes:
        return cloud.copy()
    selected = select_proximal(boxes, agent_xy, cfg, rng)
    keep = np.ones(n, dtype=bool)
    owner = np.full(n, -1, dtype=np.int64)
    for bi in selected:
        mask = boxes[bi].contains(cloud[:, :3]) & (owner < 0)
        owner[mask] = bi
    for bi in selected:
        owned = np.nonzero(owner == bi)[0]
        if owned.size == 0:
            continue
        sub = cloud[owned]
        inner_local, outer_local = partition_regions(sub, boxes[bi], cfg.inner_scale)
        keep[owned] = False
        for local_idx, ratio in ((inner_local, cfg.inner_keep),
                                 (outer_local, cfg.outer_keep)):
            if local_idx.size:
                kept_local = local_idx[fps(sub[local_idx], ratio)]
                keep[owned[kept_local]] = True
    return cloud[keep]


# ---------------------------------------------------------------------------
# io
# ---------------------------------------------------------------------------
# Binary: u32 point count, then x, y, z, intensity as float32 LE per point.
# CSV (debug): header "x,y,z,intensity", one row per point.


def save_cloud(cloud: np.ndarray, path) -> None:
    cloud = ensure_cloud(cloud)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", cloud.shape[0]))
        fh.write(np.ascontiguousarray(cloud, dtype="<f4").tobytes())


def load_cloud(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(4)
        if len(head) != 4:
            raise ShapeError("truncated point cloud file: missing count header")
        (n,) = struct.unpack("<I", head)
        payload = fh.read(16 * n)
        if len(payload) != 16 * n:
            raise ShapeError(
                f"truncated point cloud file: header says {n} points "
                f"({16 * n} bytes), got {len(payload)} bytes"
            )
    return np.frombuffer(payload, dtype="<f4").reshape(n, 4).astype(np.float64)


def save_cloud_csv(cloud: np.ndarray, path) -> None:
    cloud = ensure_cloud(cloud)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "z", "intensity"])
        writer.writerows(cloud.tolist())


def load_cloud_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["x", "y", "z", "intensity"]:
            raise ShapeError(f"unexpected point cloud CSV header: {header}")
        rows = [[float(v) for v in row] for row in reader if row]
    if not rows:
        return np.empty((0, 4))
    return ensure_cloud(np.array(rows))
