"""Depth-bin maps: projection, multi-modal fusion, downsampling, back-projection.

A depth map discretizes each pixel ray into D bins of fixed metric interval
(0.5 m by default) and stores an independent occupancy probability per bin.
Camera-derived maps are dense and soft; lidar-derived maps are one-hot per
ray. Fusing adds the two and clamps into [0, 1], producing maps that are both
dense and precise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .skeleton import PointCloud

DEFAULT_BIN_INTERVAL = 0.5


@dataclass
class DepthMap:
    """H x W x D per-bin occupancy probabilities in [0, 1]."""

    data: np.ndarray
    bin_interval: float = DEFAULT_BIN_INTERVAL

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("depth map data must be H x W x D")
        if self.bin_interval <= 0.0:
            raise ValueError("bin_interval must be positive")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ValueError("depth probabilities must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def num_bins(self) -> int:
        return self.data.shape[2]


@dataclass
class CameraModel:
    """Pinhole camera: 3x3 intrinsics and a 4x4 world-to-camera transform."""

    intrinsic: np.ndarray
    extrinsic: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.intrinsic = np.asarray(self.intrinsic, dtype=np.float64)
        self.extrinsic = np.asarray(self.extrinsic, dtype=np.float64)
        if self.intrinsic.shape != (3, 3):
            raise ValueError("intrinsic must be 3x3")
        if self.extrinsic.shape != (4, 4):
            raise ValueError("extrinsic must be 4x4")
        if self.intrinsic[0, 0] <= 0.0 or self.intrinsic[1, 1] <= 0.0:
            raise ValueError("focal lengths must positive")
        rot = self.extrinsic[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("extrinsic rotation block must be orthonormal")

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        return pts @ self.extrinsic[:3, :3].T + self.extrinsic[:3, 3]

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        return (pts - self.extrinsic[:3, 3]) @ self.extrinsic[:3, :3]


def project_points_to_depth(
    points: PointCloud,
    cam: CameraModel,
    dims: tuple[int, int, int],
    bin_interval: float = DEFAULT_BIN_INTERVAL,
    one_hot_per_ray: bool = True,
) -> DepthMap:
    """Project a point cloud into a depth-bin map of shape dims = (H, W, D).

    Points behind the camera, outside the image, or beyond the last bin are
    dropped. Depth bins are half-open: bin = floor(depth / interval). In
    one-hot mode (the lidar convention) each ray keeps only its nearest
    point's bin; otherwise every hit bin is set to 1.

    When (H, W) differ from the camera's native resolution, projected pixel
    coordinates are scaled accordingly.
    """
    h, w, d = dims
    if min(h, w, d) < 1:
        raise ValueError("depth map dims must be positive")
    data = np.zeros((h, w, d))

    if len(points) == 0:
        return DepthMap(data, bin_interval)

    cam_pts = cam.world_to_camera(points.points)
    z = cam_pts[:, 2]
    valid = z > 0.0
    if not np.any(valid):
        return DepthMap(data, bin_interval)

    cam_pts = cam_pts[valid]
    z = z[valid]
    uv = cam_pts[:, :2] / z[:, None]
    u = cam.intrinsic[0, 0] * uv[:, 0] + cam.intrinsic[0, 2]
    v = cam.intrinsic[1, 1] * uv[:, 1] + cam.intrinsic[1, 2]
    col = np.floor(u * (w / cam.width)).astype(int)
    row = np.floor(v * (h / cam.height)).astype(int)
    bins = np.floor(z / bin_interval).astype(int)
    ok = (col >= 0) & (col < w) & (row >= 0) & (row < h) & (bins >= 0) & (bins < d)

    if one_hot_per_ray:
        nearest: dict = {}
        for r, c, b, depth in zip(row[ok], col[ok], bins[ok], z[ok]):
            key = (int(r), int(c))
            if key not in nearest or depth < nearest[key][1]:
                nearest[key] = (int(b), depth)
        for (r, c), (b, _) in nearest.items():
            data[r, c, b] = 1.0
    else:
        data[row[ok], col[ok], bins[ok]] = 1.0
    return DepthMap(data, bin_interval)


def fuse_depth(cam_map: DepthMap, lidar_map: DepthMap) -> DepthMap:
    """Elementwise sum of the two maps clamped into [0, 1]."""
    if cam_map.data.shape != lidar_map.data.shape:
        raise ValueError(
            f"depth map shapes differ: {cam_map.data.shape} vs {lidar_map.data.shape}"
        )
    if cam_map.bin_interval != lidar_map.bin_interval:
        raise ValueError("depth maps must share a bin interval")
    fused = np.clip(cam_map.data + lidar_map.data, 0.0, 1.0)
    return DepthMap(fused, cam_map.bin_interval)


def downsample_depth(dmap: DepthMap, factor: float = 0.5) -> DepthMap:
    """Halve the spatial resolution by bilinear interpolation.

    Only a factor of 0.5 is supported. With half-pixel-center alignment the
    output samples land exactly between 2x2 input blocks, so each output
    value is the plain average of its block. Applying this iteratively yields
    the coarser levels of the depth pyramid.
    """
    if factor != 0.5:
        raise ValueError("only a 0.5 downsampling factor is supported")
    h, w = dmap.height, dmap.width
    if h < 2 or w < 2:
        raise ValueError("need at least 2x2 pixels to downsample")
    h2, w2 = h // 2, w // 2
    cropped = dmap.data[: 2 * h2, : 2 * w2, :]
    blocks = cropped.reshape(h2, 2, w2, 2, dmap.num_bins)
    return DepthMap(blocks.mean(axis=(1, 3)), dmap.bin_interval)


def pseudo_pointcloud(dmap: DepthMap, cam: CameraModel, top_k: int = 3) -> PointCloud:
    """Back-project the strongest depth bins of every ray into 3-D points.

    Per ray, up to top_k bins with positive probability are selected in
    descending probability order (ties favor the nearer bin) and placed at
    the bin-center depth along the ray through the pixel center. Rays with no
    positive bins contribute nothing.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    h, w, d = dmap.data.shape
    fx, fy = cam.intrinsic[0, 0], cam.intrinsic[1, 1]
    cx, cy = cam.intrinsic[0, 2], cam.intrinsic[1, 2]
    sx, sy = cam.width / w, cam.height / h

    points = []
    for r in range(h):
        for c in range(w):
            ray = dmap.data[r, c]
            hot = np.nonzero(ray > 0.0)[0]
            if hot.size == 0:
                continue
            # Sort by descending probability, nearer bin first on ties.
            order = hot[np.lexsort((hot, -ray[hot]))]
            for b in order[:top_k]:
                depth = (b + 0.5) * dmap.bin_interval
                x = (sx * (c + 0.5) - cx) / fx * depth
                y = (sy * (r + 0.5) - cy) / fy * depth
                points.append(cam.camera_to_world(np.array([x, y, depth]))[0])
    pts = np.stack(points) if points else np.zeros((0, 3))
    return PointCloud(pts, source=np.full(len(pts), "camera") if len(pts) else None)
