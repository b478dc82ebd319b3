"""Pose <-> Gaussian heatmap conversion and the binary heatmap file format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CorruptFile,
    GridTooSmall,
    InvalidSigma,
    NonFiniteHeatmap,
    UnsupportedFormat,
)

HEATMAP_MAGIC = b"PDHM"
HEATMAP_VERSION = 1


@dataclass(frozen=True)
class Pose:
    """K keypoints in heatmap grid units [0, S), with per-keypoint visibility."""

    coordinates: np.ndarray  # (K, 2) float, columns x, y
    visibility: np.ndarray  # (K,) bool

    def __post_init__(self):
        coords = np.asarray(self.coordinates, dtype=np.float64)
        vis = np.asarray(self.visibility, dtype=bool)
        if coords.ndim != 2 or coords.shape[1] != 2 or vis.shape != (coords.shape[0],):
            raise ValueError(f"bad pose shapes: {coords.shape}, {vis.shape}")
        object.__setattr__(self, "coordinates", coords)
        object.__setattr__(self, "visibility", vis)
        coords.setflags(write=False)
        vis.setflags(write=False)

    @property
    def keypoint_count(self) -> int:
        return self.coordinates.shape[0]

    def to_json_dict(self) -> dict:
        return {
            "keypoints": [
                [float(x), float(y), int(v)]
                for (x, y), v in zip(self.coordinates, self.visibility)
            ]
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "Pose":
        kps = data["keypoints"]
        coords = np.array([[k[0], k[1]] for k in kps], dtype=np.float64)
        vis = np.array([bool(k[2]) for k in kps])
        return cls(coords, vis)


def write_pose_json(pose: Pose, path) -> None:
    with open(path, "w") as fh:
        json.dump(pose.to_json_dict(), fh)


def read_pose_json(path) -> Pose:
    with open(path) as fh:
        return Pose.from_json_dict(json.load(fh))


@dataclass(frozen=True)
class HeatmapStack:
    """K stacked S x S heatmaps plus the Gaussian bandwidth used to encode them."""

    values: np.ndarray  # (K, S, S) float32, row-major (y, x)
    sigma: float

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.ndim != 3 or vals.shape[1] != vals.shape[2]:
            raise ValueError(f"bad heatmap shape: {vals.shape}")
        object.__setattr__(self, "values", vals)
        vals.setflags(write=False)

    @property
    def keypoint_count(self) -> int:
        return self.values.shape[0]

    @property
    def grid_size(self) -> int:
        return self.values.shape[1]


def encode_pose(pose: Pose, grid_size: int, sigma: float) -> HeatmapStack:
    """Encode each visible keypoint as an unnormalized Gaussian bump.

    Values are the kernel evaluated at integer pixel centers; the map of an
    invisible keypoint is identically zero.
    """
    if grid_size < 8:
        raise GridTooSmall(f"grid size {grid_size} < 8")
    if sigma <= 0:
        raise InvalidSigma(f"sigma must be positive, got {sigma}")
    k = pose.keypoint_count
    xs = np.arange(grid_size, dtype=np.float64)
    grid_x, grid_y = np.meshgrid(xs, xs)  # both (S, S), row-major (y, x)
    maps = np.zeros((k, grid_size, grid_size), dtype=np.float64)
    for i in range(k):
        if not pose.visibility[i]:
            continue
        mx, my = pose.coordinates[i]
        maps[i] = np.exp(-((grid_x - mx) ** 2 + (grid_y - my) ** 2) / (2.0 * sigma**2))
    return HeatmapStack(maps.astype(np.float32), float(sigma))


def decode_heatmaps(values: np.ndarray, visibility_threshold: float = 0.2) -> Pose:
    """Per-map argmax decoding; a keypoint whose peak falls below the
    threshold is flagged invisible. Argmax ties break at the smallest
    row-major index."""
    values = np.asarray(values)
    if not np.all(np.isfinite(values)):
        raise NonFiniteHeatmap("heatmap stack contains non-finite values")
    k = values.shape[0]
    coords = np.zeros((k, 2), dtype=np.float64)
    vis = np.zeros(k, dtype=bool)
    for i in range(k):
        flat = int(np.argmax(values[i]))
        y, x = divmod(flat, values.shape[2])
        coords[i] = (x, y)
        vis[i] = values[i, y, x] >= visibility_threshold
    return Pose(coords, vis)


def write_heatmap_file(stack: HeatmapStack, path) -> None:
    if not np.all(np.isfinite(stack.values)):
        raise NonFiniteHeatmap("refusing to write non-finite heatmaps")
    k, s = stack.keypoint_count, stack.grid_size
    with open(path, "wb") as fh:
        fh.write(HEATMAP_MAGIC)
        fh.write(struct.pack("<III", HEATMAP_VERSION, k, s))
        fh.write(struct.pack("<f", stack.sigma))
        fh.write(np.ascontiguousarray(stack.values, dtype="<f4").tobytes())


def read_heatmap_file(path) -> HeatmapStack:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != HEATMAP_MAGIC:
        raise UnsupportedFormat(f"bad magic bytes {blob[:4]!r}")
    if len(blob) < 20:
        raise CorruptFile("truncated header")
    version, k, s = struct.unpack_from("<III", blob, 4)
    if version != HEATMAP_VERSION:
        raise UnsupportedFormat(f"unsupported version {version}")
    (sigma,) = struct.unpack_from("<f", blob, 16)
    payload = blob[20:]
    expected = k * s * s * 4
    if len(payload) != expected:
        raise CorruptFile(f"payload holds {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype="<f4").reshape(k, s, s).copy()
    return HeatmapStack(values, float(sigma))


def default_sigma(grid_size: int) -> float:
    """Encoding bandwidth scaled with the grid (2 px at S=64)."""
    return grid_size / 32.0
