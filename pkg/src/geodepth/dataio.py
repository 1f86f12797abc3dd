"""Depth-map file I/O, synthetic desk-scale scenes, and corpus manifests.

Depth images follow the 16-bit single-channel convention: stored value is
``round(depth_m * 256)`` and raw 0 marks an invalid pixel, so the format is
lossless for depths that are exact multiples of 1/256 m.

The scene generator is deliberately simple: a tilted ground plane plus a
few frontal boxes composited by z-buffer, with a depth-correlated grayscale
shading tinted by per-box albedo so the color branch carries real signal.
Generation and sparsification are pure functions of the spec/seed, so
corpora can be produced in parallel and train/val splits stay disjoint by
seed range.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraIntrinsics, DepthMap, read_intrinsics, write_intrinsics
from .errors import ConfigError, DataFormatError, ShapeError

_DEPTH_SCALE = 256.0
_RAW_MAX = 65535


def read_depth_png(path) -> DepthMap:
    """Load a 16-bit single-channel depth image (raw/256 m, 0 = invalid)."""
    with Image.open(path) as img:
        if img.mode not in ("I;16", "I;16B", "I"):
            raise DataFormatError(
                f"{path}: expected a 16-bit single-channel image, got mode {img.mode!r}"
            )
        raw = np.asarray(img, dtype=np.int64)
    if raw.ndim != 2:
        raise DataFormatError(f"{path}: expected a single channel, got shape {raw.shape}")
    if raw.min() < 0 or raw.max() > _RAW_MAX:
        raise DataFormatError(f"{path}: raw values outside the 16-bit range")
    return DepthMap(depth=raw / _DEPTH_SCALE, valid=raw > 0)


def write_depth_png(depth_map: DepthMap, path) -> None:
    """Store a depth map in the raw/256 convention; invalid pixels become 0.

    Depths beyond the representable 255.996 m clamp to the max raw value
    with a warning.
    """
    raw = np.round(depth_map.depth * _DEPTH_SCALE)
    over = depth_map.valid & (raw > _RAW_MAX)
    if over.any():
        warnings.warn(
            f"{int(over.sum())} depth value(s) exceed the 16-bit range; clamped", stacklevel=2
        )
        raw = np.minimum(raw, _RAW_MAX)
    raw = np.where(depth_map.valid, raw, 0).astype(np.uint16)
    Image.fromarray(raw).save(path, format="PNG")


def write_rgb_png(rgb: np.ndarray, path) -> None:
    """Store a [3, H, W] float image in [0, 1] as 8-bit RGB."""
    arr = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def read_rgb_png(path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode != "RGB":
            raise DataFormatError(f"{path}: expected an RGB image, got mode {img.mode!r}")
        arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


@dataclass(frozen=True)
class SceneSpec:
    """Layout parameters for one synthetic scene."""

    seed: int
    height: int = 64
    width: int = 64
    ground_range: tuple = (3.0, 9.0)   # plane depth at the image center, m
    tilt_max: float = 1.5              # max depth swing across each image axis, m
    box_count_range: tuple = (1, 5)
    box_size_range: tuple = (0.2, 0.45)  # box extent as a fraction of the image
    box_depth_range: tuple = (1.0, 6.0)
    sparsity: int = 500

    def __post_init__(self):
        if self.height % 8 or self.width % 8:
            raise ConfigError(f"scene extent {self.height}x{self.width} must be divisible by 8")
        if self.sparsity < 1:
            raise ConfigError(f"sparsity must be >= 1, got {self.sparsity}")
        for pair in (self.ground_range, self.box_count_range, self.box_size_range,
                     self.box_depth_range):
            if len(pair) != 2 or not pair[0] <= pair[1]:
                raise ConfigError(f"range {pair} must be (low, high) with low <= high")
        if not (0.5 <= self.box_depth_range[0] and self.ground_range[1] + self.tilt_max <= 80.0):
            raise ConfigError("scene depths must stay within [0.5, 80] m")


def synth_scene(spec: SceneSpec):
    """Render one scene: returns (rgb [3,H,W], gt, sparse, intrinsics).

    Deterministic per seed. Ground truth is valid everywhere; the sparse
    map keeps ``spec.sparsity`` uniformly chosen pixels.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    h, w = spec.height, spec.width
    vs = np.arange(h, dtype=np.float64)[:, None]
    us = np.arange(w, dtype=np.float64)[None, :]

    z0 = rng.uniform(*spec.ground_range)
    tilt_v = rng.uniform(-spec.tilt_max, spec.tilt_max)
    tilt_u = rng.uniform(-spec.tilt_max, spec.tilt_max)
    plane = z0 + tilt_v * (vs - (h - 1) / 2) / (h - 1) + tilt_u * (us - (w - 1) / 2) / (w - 1)
    plane = np.clip(plane, 0.5, 80.0)

    gt = np.broadcast_to(plane, (h, w)).copy()
    boxes = []
    count = int(rng.integers(spec.box_count_range[0], spec.box_count_range[1] + 1))
    for _ in range(count):
        bw = max(2, int(round(rng.uniform(*spec.box_size_range) * w)))
        bh = max(2, int(round(rng.uniform(*spec.box_size_range) * h)))
        u0 = int(rng.integers(0, max(1, w - bw)))
        v0 = int(rng.integers(0, max(1, h - bh)))
        zb = rng.uniform(*spec.box_depth_range)
        albedo = rng.uniform(0.4, 1.0, size=3)
        region = (slice(v0, v0 + bh), slice(u0, u0 + bw))
        gt[region] = np.minimum(gt[region], zb)   # z-buffer composite
        boxes.append((region, zb, albedo))

    zmin, zmax = gt.min(), gt.max()
    shade = 0.25 + 0.7 * (1.0 - (gt - zmin) / max(zmax - zmin, 1e-9))
    rgb = np.repeat(shade[None] * 0.85, 3, axis=0)
    for region, zb, albedo in boxes:
        visible = np.zeros((h, w), dtype=bool)
        visible[region] = gt[region] == zb
        for c in range(3):
            rgb[c][visible] = albedo[c] * shade[visible]

    gt_map = DepthMap(depth=gt, valid=np.ones((h, w), dtype=bool))
    sparse = sparsify(gt_map, spec.sparsity, spec.seed)
    intrinsics = CameraIntrinsics(fx=float(w), fy=float(w), cx=(w - 1) / 2, cy=(h - 1) / 2)
    return rgb, gt_map, sparse, intrinsics


def sparsify(gt: DepthMap, n: int, seed: int) -> DepthMap:
    """Keep a uniform random subset of n valid pixels, invalidating the rest."""
    rows, cols = np.nonzero(gt.valid)
    total = rows.size
    if n > total:
        warnings.warn(f"requested {n} sparse samples but only {total} valid pixels; clamped",
                      stacklevel=2)
        n = total
    if n == total:
        return DepthMap(depth=gt.depth.copy(), valid=gt.valid.copy())
    rng = np.random.Generator(np.random.PCG64(seed))
    keep = rng.choice(total, size=n, replace=False)
    valid = np.zeros_like(gt.valid)
    valid[rows[keep], cols[keep]] = True
    return DepthMap(depth=np.where(valid, gt.depth, 0.0), valid=valid)


def hflip_sample(rgb, sparse: DepthMap, gt: DepthMap, intrinsics: CameraIntrinsics):
    """Mirror a training sample left-right, including the principal point."""
    w = sparse.width
    flipped_k = CameraIntrinsics(
        fx=intrinsics.fx, fy=intrinsics.fy, cx=(w - 1) - intrinsics.cx, cy=intrinsics.cy
    )
    return (
        np.ascontiguousarray(rgb[:, :, ::-1]),
        DepthMap(depth=sparse.depth[:, ::-1].copy(), valid=sparse.valid[:, ::-1].copy()),
        DepthMap(depth=gt.depth[:, ::-1].copy(), valid=gt.valid[:, ::-1].copy()),
        flipped_k,
    )


# ---------------------------------------------------------------------------
# corpus layout: four files per scene plus one manifest line


@dataclass(frozen=True)
class ManifestEntry:
    rgb: Path
    sparse: Path
    gt: Path
    intrinsics: Path


def write_scene(out_dir, index: int, rgb, gt: DepthMap, sparse: DepthMap,
                intrinsics: CameraIntrinsics) -> ManifestEntry:
    out_dir = Path(out_dir)
    stem = f"scene_{index:04d}"
    entry = ManifestEntry(
        rgb=out_dir / f"{stem}_rgb.png",
        sparse=out_dir / f"{stem}_sparse.png",
        gt=out_dir / f"{stem}_gt.png",
        intrinsics=out_dir / f"{stem}_K.txt",
    )
    write_rgb_png(rgb, entry.rgb)
    write_depth_png(sparse, entry.sparse)
    write_depth_png(gt, entry.gt)
    write_intrinsics(intrinsics, entry.intrinsics)
    return entry


def write_manifest(entries, path) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        for e in entries:
            names = (e.rgb.name, e.sparse.name, e.gt.name, e.intrinsics.name)
            fh.write(" ".join(names) + "\n")


def read_manifest(path) -> list:
    """Manifest lines are ``rgb sparse gt intrinsics`` paths relative to it."""
    path = Path(path)
    base = path.parent
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 paths, got {len(parts)}")
            entries.append(ManifestEntry(*(base / p for p in parts)))
    return entries


def load_sample(entry: ManifestEntry):
    """Read one manifest entry back as (rgb, sparse, gt, intrinsics)."""
    rgb = read_rgb_png(entry.rgb)
    sparse = read_depth_png(entry.sparse)
    gt = read_depth_png(entry.gt)
    if rgb.shape[1:] != sparse.depth.shape or sparse.depth.shape != gt.depth.shape:
        raise ShapeError(
            f"{entry.rgb}: sample extents disagree "
            f"({rgb.shape[1:]} rgb, {sparse.depth.shape} sparse, {gt.depth.shape} gt)"
        )
    return rgb, sparse, gt, read_intrinsics(entry.intrinsics)


def generate_corpus(out_dir, count: int, base_seed: int, template: SceneSpec) -> Path:
    """Write ``count`` scenes with sequential seeds and return the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        spec = SceneSpec(
            seed=base_seed + i,
            height=template.height,
            width=template.width,
            ground_range=template.ground_range,
            tilt_max=template.tilt_max,
            box_count_range=template.box_count_range,
            box_size_range=template.box_size_range,
            box_depth_range=template.box_depth_range,
            sparsity=template.sparsity,
        )
        rgb, gt, sparse, intrinsics = synth_scene(spec)
        entries.append(write_scene(out_dir, i, rgb, gt, sparse, intrinsics))
    manifest = out_dir / "manifest.txt"
    write_manifest(entries, manifest)
    return manifest
