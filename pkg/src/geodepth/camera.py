"""Pinhole conversions between sparse depth maps and 3D point sets.

Pixel convention: ``(u, v) = (column, row)``, origin at the top-left, pixel
centers at integer coordinates. Projection rounds half away from zero. All
functions here are pure and safe to call concurrently on distinct inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataFormatError, EmptyInputError, ShapeError


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ShapeError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (np.isfinite(self.cx) and np.isfinite(self.cy)):
            raise ShapeError("principal point must be finite")


@dataclass
class DepthMap:
    """Dense grid of metric depths with a validity mask.

    Invalid pixels always carry depth 0. Measured maps carry strictly
    positive valid depths; predicted maps may touch 0 (ReLU-clamped head),
    so the constructor only requires finite non-negative values and
    backprojection enforces positivity.
    """

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.depth.ndim != 2 or self.depth.shape != self.valid.shape:
            raise ShapeError(f"depth {self.depth.shape} vs mask {self.valid.shape}")
        on = self.depth[self.valid]
        if on.size and not (np.isfinite(on).all() and (on >= 0).all()):
            raise ShapeError("valid pixels must have finite non-negative depth")
        self.depth = np.where(self.valid, self.depth, 0.0)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def valid_count(self) -> int:
        return int(self.valid.sum())


@dataclass
class PointSet:
    """N camera-frame points with their source-pixel provenance.

    ``depth[i]`` equals ``coords[i, 2]`` exactly; pixel rows are (u, v),
    pairwise distinct, and inside the source map.
    """

    coords: np.ndarray   # [N, 3] (x, y, z) meters
    pixel: np.ndarray    # [N, 2] integer (u, v)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.pixel = np.asarray(self.pixel, dtype=np.int64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ShapeError(f"coords must be [N, 3], got {self.coords.shape}")
        if self.pixel.shape != (self.coords.shape[0], 2):
            raise ShapeError(f"pixel must be [N, 2], got {self.pixel.shape}")

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def depth(self) -> np.ndarray:
        return self.coords[:, 2]


@dataclass
class SparseFeatureMap:
    """Per-pixel feature vectors on a mostly-empty grid.

    Every valid pixel was assigned exactly once; invalid pixels are all-zero
    in every channel. ``values`` may be a plain array or an autodiff tensor
    (the training path keeps the tape alive through it).
    """

    values: object       # [C, H, W]
    valid: np.ndarray    # [H, W] bool

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def backproject(depth_map: DepthMap, intrinsics: CameraIntrinsics) -> PointSet:
    """Lift every valid pixel to a camera-frame 3D point.

    Points come out in raster (row-major) order; N equals the valid count
    and the z channel is a bitwise copy of the source depths.
    """
    rows, cols = np.nonzero(depth_map.valid)
    if rows.size == 0:
        raise EmptyInputError("backproject: depth map has no valid pixels")
    z = depth_map.depth[rows, cols]
    if (z <= 0).any():
        raise ShapeError("backproject: valid pixels must carry strictly positive depth")
    x = (cols - intrinsics.cx) * z / intrinsics.fx
    y = (rows - intrinsics.cy) * z / intrinsics.fy
    coords = np.stack([x, y, z], axis=1)
    pixel = np.stack([cols, rows], axis=1)
    return PointSet(coords, pixel)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def project(points: PointSet, intrinsics: CameraIntrinsics, height: int, width: int):
    """Project points back to pixel indices and depths.

    Returns ``(pixel [M, 2], depth [M], dropped)`` where ``dropped`` counts
    points whose projection fell outside the map. For a set produced by
    ``backproject`` with the same intrinsics, the recovered pixels equal the
    stored provenance exactly and nothing is dropped.
    """
    z = points.coords[:, 2]
    if (z <= 0).any():
        raise ContractError("project: point with z <= 0 is behind the camera")
    u = _round_half_away(points.coords[:, 0] * intrinsics.fx / z + intrinsics.cx).astype(np.int64)
    v = _round_half_away(points.coords[:, 1] * intrinsics.fy / z + intrinsics.cy).astype(np.int64)
    inside = (u >= 0) & (u < width) & (v >= 0) & (v < height)
    dropped = int((~inside).sum())
    return np.stack([u[inside], v[inside]], axis=1), z[inside], dropped


def scatter_features(points: PointSet, feats: np.ndarray, height: int, width: int) -> SparseFeatureMap:
    """Write each point's feature vector at its provenance pixel.

    All other pixels stay zero; the valid mask marks exactly the N targets.
    Duplicate target pixels are a contract violation (cannot happen for
    backprojected provenance; guards sampled or merged inputs).
    """
    feats = np.asarray(feats)
    if feats.ndim != 2 or feats.shape[0] != points.n:
        raise ShapeError(f"scatter_features: {feats.shape} features for {points.n} points")
    u, v = points.pixel[:, 0], points.pixel[:, 1]
    if points.n:
        if u.min() < 0 or u.max() >= width or v.min() < 0 or v.max() >= height:
            raise ShapeError("scatter_features: provenance pixel outside the target map")
        flat = v * width + u
        if np.unique(flat).size != points.n:
            raise ContractError("scatter_features: duplicate target pixels")
    values = np.zeros((feats.shape[1], height, width), dtype=feats.dtype)
    values[:, v, u] = feats.T
    valid = np.zeros((height, width), dtype=bool)
    valid[v, u] = True
    return SparseFeatureMap(values, valid)


def sample_random(points: PointSet, n: int, seed: int) -> PointSet:
    """Uniform sample without replacement, keeping original relative order.

    Returns the input unchanged when it already has at most ``n`` points.
    """
    if n < 1:
        raise ShapeError(f"sample_random: n must be >= 1, got {n}")
    if points.n <= n:
        return points
    rng = np.random.Generator(np.random.PCG64(seed))
    keep = np.sort(rng.choice(points.n, size=n, replace=False))
    return PointSet(points.coords[keep], points.pixel[keep])


def sample_farthest(points: PointSet, n: int, start_index: int = 0) -> PointSet:
    """Greedy farthest point sampling in Euclidean 3D.

    Repeatedly picks the point maximizing the distance to the selected set;
    ties break toward the lower index. Selected points are returned in
    original relative order so downstream scatter stays raster-ordered.
    """
    if n < 1:
        raise ShapeError(f"sample_farthest: n must be >= 1, got {n}")
    if not 0 <= start_index < points.n:
        raise ShapeError(f"sample_farthest: start_index {start_index} out of range")
    if n >= points.n:
        return points
    coords = points.coords
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = start_index
    best = ((coords - coords[start_index]) ** 2).sum(axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(best))  # argmax takes the first (lowest-index) max
        chosen[i] = nxt
        best = np.minimum(best, ((coords - coords[nxt]) ** 2).sum(axis=1))
    keep = np.sort(chosen)
    return PointSet(points.coords[keep], points.pixel[keep])


_INTRINSICS_KEYS = ("fx", "fy", "cx", "cy")


def write_intrinsics(intrinsics: CameraIntrinsics, path) -> None:
    """Plain-text intrinsics: one ``key=value`` line for fx, fy, cx, cy."""
    with open(path, "w") as fh:
        for key in _INTRINSICS_KEYS:
            fh.write(f"{key}={getattr(intrinsics, key)!r}\n")


def read_intrinsics(path) -> CameraIntrinsics:
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            key = key.strip()
            if not sep or key not in _INTRINSICS_KEYS:
                raise DataFormatError(f"{path}:{lineno}: unknown intrinsics key {key!r}")
            try:
                values[key] = float(raw)
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: bad float {raw!r}") from None
    missing = [k for k in _INTRINSICS_KEYS if k not in values]
    if missing:
        raise DataFormatError(f"{path}: missing intrinsics keys {missing}")
    return CameraIntrinsics(**values)
