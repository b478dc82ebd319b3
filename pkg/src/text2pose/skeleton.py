"""Skeleton graph topology, adjacency normalization, and stick-figure rendering."""

from __future__ import annotations

import json
from dataclasses import dataclass

import cv2
import numpy as np

from .errors import InvalidRenderSize
from .heatmaps import Pose

COCO_KEYPOINT_NAMES = (
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)

# 19-limb COCO skeleton: legs, hip bar, torso sides, shoulder girdle, arms,
# face chain (nose-eyes, eye-eye, eyes-ears), ear-shoulder links.
COCO_EDGES = (
    (15, 13),
    (13, 11),
    (16, 14),
    (14, 12),
    (11, 12),
    (5, 11),
    (6, 12),
    (5, 6),
    (5, 7),
    (6, 8),
    (7, 9),
    (8, 10),
    (1, 2),
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (4, 6),
)

# Rainbow limb/point palette in RGB (OpenPose-style hue wheel).
_RAINBOW = (
    (255, 0, 0),
    (255, 85, 0),
    (255, 170, 0),
    (255, 255, 0),
    (170, 255, 0),
    (85, 255, 0),
    (0, 255, 0),
    (0, 255, 85),
    (0, 255, 170),
    (0, 255, 255),
    (0, 170, 255),
    (0, 85, 255),
    (0, 0, 255),
    (85, 0, 255),
    (170, 0, 255),
    (255, 0, 255),
    (255, 0, 170),
    (255, 0, 85),
    (255, 0, 0),
)


@dataclass(frozen=True)
class SkeletonTopology:
    keypoint_names: tuple
    edges: tuple  # unordered index pairs, 0-based
    limb_colors: tuple  # one RGB triple per edge
    point_colors: tuple  # one RGB triple per keypoint

    def __post_init__(self):
        k = self.keypoint_count
        seen = set()
        for i, j in self.edges:
            if not (0 <= i < k and 0 <= j < k):
                raise ValueError(f"edge ({i},{j}) out of range for K={k}")
            if i == j:
                raise ValueError(f"self-loop at node {i}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)
        if len(self.limb_colors) != len(self.edges):
            raise ValueError("need one limb color per edge")
        if len(self.point_colors) != k:
            raise ValueError("need one point color per keypoint")

    @property
    def keypoint_count(self) -> int:
        return len(self.keypoint_names)

    def index_of(self, name: str) -> int:
        return self.keypoint_names.index(name)

    def to_json_dict(self) -> dict:
        return {
            "keypoints": list(self.keypoint_names),
            "edges": [list(e) for e in self.edges],
            "limb_colors": [list(c) for c in self.limb_colors],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "SkeletonTopology":
        names = tuple(data["keypoints"])
        edges = tuple(tuple(e) for e in data["edges"])
        limb_colors = tuple(tuple(c) for c in data["limb_colors"])
        point_colors = tuple(_RAINBOW[i % len(_RAINBOW)] for i in range(len(names)))
        return cls(names, edges, limb_colors, point_colors)


def build_default_topology() -> SkeletonTopology:
    """The 17-keypoint COCO skeleton with the rainbow rendering palette."""
    limb_colors = tuple(_RAINBOW[i % len(_RAINBOW)] for i in range(len(COCO_EDGES)))
    point_colors = tuple(_RAINBOW[i % len(_RAINBOW)] for i in range(len(COCO_KEYPOINT_NAMES)))
    return SkeletonTopology(COCO_KEYPOINT_NAMES, COCO_EDGES, limb_colors, point_colors)


def adjacency(topology: SkeletonTopology) -> np.ndarray:
    """Binary adjacency matrix A of the skeleton graph."""
    k = topology.keypoint_count
    a = np.zeros((k, k), dtype=np.float64)
    for i, j in topology.edges:
        a[i, j] = a[j, i] = 1.0
    return a


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """Symmetric GCN normalization D^{-1/2} (A + I) D^{-1/2}, with D the
    degree matrix of A + I."""
    a = np.asarray(a, dtype=np.float64)
    a_hat = a + np.eye(a.shape[0])
    d_inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return a_hat * np.outer(d_inv_sqrt, d_inv_sqrt)


def render_pose(pose: Pose, topology: SkeletonTopology, grid_size: int, image_size: int) -> np.ndarray:
    """Draw the pose as colored limbs and discs on black; returns an RGB uint8
    image. Coordinates are scaled from the [0, grid_size) heatmap frame."""
    if image_size < 32:
        raise InvalidRenderSize(f"image size {image_size} < 32")
    img = np.zeros((image_size, image_size, 3), dtype=np.uint8)
    scale = image_size / grid_size
    thickness = max(1, round(image_size / 32))
    pts = np.round(pose.coordinates * scale).astype(int)
    for (i, j), color in zip(topology.edges, topology.limb_colors):
        if pose.visibility[i] and pose.visibility[j]:
            cv2.line(img, tuple(pts[i]), tuple(pts[j]), color, thickness, cv2.LINE_8)
    for idx, color in enumerate(topology.point_colors):
        if pose.visibility[idx]:
            cv2.circle(img, tuple(pts[idx]), thickness + 1, color, -1, cv2.LINE_8)
    return img


def write_topology_json(topology: SkeletonTopology, path) -> None:
    with open(path, "w") as fh:
        json.dump(topology.to_json_dict(), fh, indent=2)


def read_topology_json(path) -> SkeletonTopology:
    with open(path) as fh:
        return SkeletonTopology.from_json_dict(json.load(fh))


def write_png(image: np.ndarray, path) -> None:
    # cv2 writes BGR; flip from the RGB convention used everywhere else
    cv2.imwrite(str(path), image[:, :, ::-1])
