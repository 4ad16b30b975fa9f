"""Camera geometry, 3D position encodings, and top-down (BEV) projection.

Conventions
-----------
Camera frame: +x right, +y down, +z forward (pinhole looking along +z).
World frame: +z up; rooms sit on the z=0 plane.
Pixel (i, j) = (row, column). ``unproject_pixel`` takes *continuous* image
coordinates and applies no offset; the pixel-center convention (rays through
(j+0.5, i+0.5)) lives in ``unproject_frame`` and the renderer, keeping the
two sides of every round trip consistent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

ORTHONORMAL_TOL = 1e-6


@dataclass
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )


@dataclass
class CameraExtrinsics:
    """Camera-to-world rigid transform: rotation (3x3) and translation (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > ORTHONORMAL_TOL:
            raise ValueError(f"rotation not orthonormal (max deviation {err:.3e})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > ORTHONORMAL_TOL:
            raise ValueError(f"rotation determinant {det:.9f} != +1")

    def matrix(self) -> np.ndarray:
        m = np.eye(4, dtype=np.float64)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Camera-frame points (..., 3) -> world frame."""
        return points @ self.rotation.T + self.translation

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) -> camera frame."""
        return (points - self.translation) @ self.rotation


@dataclass
class PointMap:
    """Per-pixel world coordinates with a validity grid (depth > 0)."""

    coords: np.ndarray  # (H, W, 3)
    valid: np.ndarray  # (H, W) bool


@dataclass
class BevConfig:
    """Orthographic top-down projection window."""

    x_range: Tuple[float, float]
    y_range: Tuple[float, float]
    resolution: int
    z_clip: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.x_range[1] <= self.x_range[0] or self.y_range[1] <= self.y_range[0]:
            raise ValueError(f"degenerate BEV ranges x={self.x_range} y={self.y_range}")
        if self.resolution < 8:
            raise ValueError(f"BEV resolution must be >= 8, got {self.resolution}")


def unproject_pixel(i, j, depth, K: CameraIntrinsics, T: CameraExtrinsics):
    """Lift one image coordinate to a world point; None signals invalid depth.

    (i, j) are continuous (row, column) coordinates; depth is the camera-frame
    z of the surface along the ray through (j, i).
    """
    if depth <= 0:
        return None
    x = (j - K.cx) / K.fx * depth
    y = (i - K.cy) / K.fy * depth
    return T.apply(np.array([x, y, depth], dtype=np.float64))


def project_point(point: np.ndarray, K: CameraIntrinsics, T: CameraExtrinsics):
    """Inverse of unproject_pixel: world point -> continuous (i, j, depth)."""
    cam = T.apply_inverse(np.asarray(point, dtype=np.float64))
    z = cam[..., 2]
    j = cam[..., 0] / z * K.fx + K.cx
    i = cam[..., 1] / z * K.fy + K.cy
    return i, j, z


def unproject_frame(frame, K: CameraIntrinsics | None = None, T: CameraExtrinsics | None = None) -> PointMap:
    """Unproject a full depth map through pixel centers (i+0.5, j+0.5).

    Accepts either a PosedFrame-like object (with .depth/.K/.T) or an
    explicit (depth, K, T) triple. Pixels with depth <= 0 are invalid.
    """
    if K is None:
        depth, K, T = frame.depth, frame.K, frame.T
    else:
        depth = frame
    depth = np.asarray(depth)
    if depth.shape != (K.height, K.width):
        raise ValueError(f"depth shape {depth.shape} does not match intrinsics {K.height}x{K.width}")

    ii, jj = np.meshgrid(
        np.arange(K.height, dtype=np.float64) + 0.5,
        np.arange(K.width, dtype=np.float64) + 0.5,
        indexing="ij",
    )
    d = depth.astype(np.float64)
    valid = d > 0
    x = (jj - K.cx) / K.fx * d
    y = (ii - K.cy) / K.fy * d
    cam = np.stack([x, y, d], axis=-1)
    coords = T.apply(cam)
    coords[~valid] = 0.0
    return PointMap(coords=coords, valid=valid)


def sinusoidal_encode(coords: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of absolute 3D coordinates.

    Each axis gets dim/3 channels laid out [sin(f_0 c) .. sin(f_{P-1} c),
    cos(f_0 c) .. cos(f_{P-1} c)] with geometrically spaced frequencies
    1 .. 1/10000, axis blocks concatenated x|y|z.
    """
    if dim % 6 != 0:
        raise ValueError(f"embedding dim must be divisible by 6, got {dim}")
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    pairs = dim // 6
    freqs = 1.0 / (10000.0 ** (np.arange(pairs, dtype=np.float64) / pairs))
    blocks = []
    for axis in range(3):
        ang = coords[:, axis : axis + 1] * freqs[None, :]
        blocks.append(np.concatenate([np.sin(ang), np.cos(ang)], axis=1))
    return np.concatenate(blocks, axis=1)


def position_features(coords: np.ndarray, dim: int) -> np.ndarray:
    """sinusoidal_encode padded with zeros when dim is not a multiple of 6."""
    base = (dim // 6) * 6
    if base == 0:
        raise ValueError(f"dim {dim} too small for a 3-axis sinusoid")
    enc = sinusoidal_encode(coords, base)
    if base == dim:
        return enc
    pad = np.zeros((enc.shape[0], dim - base), dtype=enc.dtype)
    return np.concatenate([enc, pad], axis=1)


def bev_pixel_of(points: np.ndarray, cfg: BevConfig):
    """Map world points (N, 3) to BEV pixel (rows, cols, inside-mask)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    x0, x1 = cfg.x_range
    y0, y1 = cfg.y_range
    res = cfg.resolution
    cols = np.floor((points[:, 0] - x0) / (x1 - x0) * res).astype(np.int64)
    rows = np.floor((points[:, 1] - y0) / (y1 - y0) * res).astype(np.int64)
    inside = (cols >= 0) & (cols < res) & (rows >= 0) & (rows < res)
    if cfg.z_clip is not None:
        inside &= (points[:, 2] >= cfg.z_clip[0]) & (points[:, 2] <= cfg.z_clip[1])
    return rows, cols, inside


def project_to_bev(points: np.ndarray, colors: np.ndarray, cfg: BevConfig):
    """Orthographic top-down splat: highest-z point wins each pixel.

    Ties on z are broken by point index (later point wins), which the
    brute-force oracle mirrors. Returns (image (R,R,3) float32, occupancy
    (R,R) bool); empty input gives a black image and empty mask.
    """
    res = cfg.resolution
    bev = np.zeros((res, res, 3), dtype=np.float32)
    occ = np.zeros((res, res), dtype=bool)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        return bev, occ
    colors = np.asarray(colors, dtype=np.float32).reshape(-1, 3)
    rows, cols, inside = bev_pixel_of(points, cfg)
    if not inside.any():
        return bev, occ
    rows, cols = rows[inside], cols[inside]
    z = points[inside, 2]
    colors = colors[inside]
    idx = np.arange(z.shape[0])
    # descending (z, idx); first occurrence per pixel is the winner
    order = np.lexsort((idx, z))[::-1]
    flat = rows[order] * res + cols[order]
    _, first = np.unique(flat, return_index=True)
    win = order[first]
    bev[rows[win], cols[win]] = colors[win]
    occ[rows[win], cols[win]] = True
    return bev, occ


def blank_mask(bev: np.ndarray, occupancy: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid-reconstruction-target mask at latent-token resolution.

    Validity comes from occupancy (not color thresholding); a token is valid
    when any pixel of its stride x stride patch is occupied.
    """
    bev = np.asarray(bev)
    occupancy = np.asarray(occupancy)
    if bev.shape[:2] != occupancy.shape:
        raise ValueError(f"BEV shape {bev.shape[:2]} does not match occupancy {occupancy.shape}")
    h, w = occupancy.shape
    if h % stride or w % stride:
        raise ValueError(f"occupancy {h}x{w} not divisible by stride {stride}")
    return occupancy.reshape(h // stride, stride, w // stride, stride).any(axis=(1, 3))
