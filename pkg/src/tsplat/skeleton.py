"""Deterministic anchor initialization from lidar and camera point clouds.

The lidar cloud provides the main structural skeleton; the camera cloud
augments it around occlusions. Both clouds are partitioned into cylindrical
voxels, the lidar side is subsampled with farthest point sampling, and camera
voxels are kept only where they neither collide with a lidar anchor bin nor
drift beyond a radius of the nearest lidar anchor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CylindricalSpec, cart_to_cyl, cyl_to_cart


@dataclass
class PointCloud:
    """3-D points with an optional per-point source tag ('lidar' / 'camera')."""

    points: np.ndarray
    source: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class VoxelSet:
    """Occupied cylindrical bins with their representative (bin center) points."""

    spec: CylindricalSpec
    occupied: dict = field(default_factory=dict)  # (i_r, i_t, i_z) -> cyl center

    def __len__(self) -> int:
        return len(self.occupied)

    def indices(self) -> list:
        return sorted(self.occupied.keys())

    def centers_cartesian(self) -> np.ndarray:
        """Bin centers in Cartesian coordinates, ordered by sorted bin index."""
        idx = self.indices()
        if not idx:
            return np.zeros((0, 3))
        return np.stack([cyl_to_cart(self.occupied[i]) for i in idx])


def cylindrical_partition(pc: PointCloud, spec: CylindricalSpec) -> VoxelSet:
    """Bin a point cloud into cylindrical voxels; out-of-range points drop.

    All ranges are half-open, so a point exactly at r_max (or z_max, or the
    angle upper bound) is discarded while the lower bounds are included.
    """
    occupied: dict = {}
    for p in pc.points:
        r, theta, z = cart_to_cyl(p)
        index = spec.bin_index(r, theta, z)
        if index is not None and index not in occupied:
            occupied[index] = spec.bin_center(index)
    return VoxelSet(spec=spec, occupied=occupied)


def farthest_point_sampling(points: np.ndarray, k: int, seed_index: int = 0) -> list[int]:
    """Greedy farthest point sampling; returns k point indices.

    Starts at seed_index and repeatedly adds the point with the largest
    minimum Euclidean distance to the selected set. Ties resolve to the
    lowest index, so the output is deterministic.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if k > n:
        raise ValueError(f"cannot sample {k} points from {n}")
    if k < 0:
        raise ValueError("k must be non-negative")
    if k == 0:
        return []
    if not 0 <= seed_index < n:
        raise ValueError(f"seed_index {seed_index} out of range for {n} points")

    selected = [seed_index]
    min_d2 = np.sum((points - points[seed_index]) ** 2, axis=1)
    while len(selected) < k:
        pick = int(np.argmax(min_d2))
        selected.append(pick)
        d2 = np.sum((points - points[pick]) ** 2, axis=1)
        min_d2 = np.minimum(min_d2, d2)
    return selected


@dataclass
class MergeResult:
    """Anchors from a skeleton merge plus bookkeeping for shortfalls."""

    anchors: np.ndarray  # (M + N', 3) Cartesian, lidar anchors first
    lidar_anchors: np.ndarray
    camera_anchors: np.ndarray
    camera_shortfall: int  # requested camera anchors minus survivors used


def skeleton_merge(
    lidar_vox: VoxelSet,
    cam_vox: VoxelSet,
    M: int,
    N: int,
    r_filter: float = 5.0,
    seed_index: int = 0,
) -> MergeResult:
    """Merge lidar and camera voxel sets into M + N anchor positions.

    Lidar bin centers are subsampled to M anchors with farthest point
    sampling. Camera bins sharing an index with a lidar anchor bin are
    removed, as are camera bins whose nearest lidar anchor is farther than
    r_filter. N camera anchors are then sampled from the survivors; if fewer
    than N survive, all survivors are returned and the shortfall reported.
    """
    if M > len(lidar_vox):
        raise ValueError(f"requested {M} lidar anchors from {len(lidar_vox)} occupied bins")
    if M < 0 or N < 0:
        raise ValueError("anchor counts must be non-negative")

    lidar_indices = lidar_vox.indices()
    lidar_centers = lidar_vox.centers_cartesian()
    picks = farthest_point_sampling(lidar_centers, M, seed_index) if M else []
    lidar_anchors = lidar_centers[picks] if picks else np.zeros((0, 3))
    anchor_bins = {lidar_indices[i] for i in picks}

    survivors = []
    for index in cam_vox.indices():
        if index in anchor_bins:
            continue
        center = cyl_to_cart(cam_vox.occupied[index])
        if len(lidar_anchors) == 0:
            continue
        nearest = np.min(np.linalg.norm(lidar_anchors - center, axis=1))
        if nearest > r_filter:
            continue
        survivors.append(center)
    survivors = np.stack(survivors) if survivors else np.zeros((0, 3))

    n_take = min(N, len(survivors))
    cam_picks = farthest_point_sampling(survivors, n_take, seed_index) if n_take else []
    camera_anchors = survivors[cam_picks] if cam_picks else np.zeros((0, 3))

    anchors = (
        np.concatenate([lidar_anchors, camera_anchors])
        if len(lidar_anchors) or len(camera_anchors)
        else np.zeros((0, 3))
    )
    return MergeResult(
        anchors=anchors,
        lidar_anchors=lidar_anchors,
        camera_anchors=camera_anchors,
        camera_shortfall=N - n_take,
    )
