"""Dataset tooling: COCO keypoint ingestion with the single-person /
min-visible filter, train/val splitting, and a synthetic template-pose set
for small-scale convergence checks."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass

import numpy as np

from .errors import EmptyDataset, ParseError
from .heatmaps import Pose

MIN_VISIBLE_KEYPOINTS = 8
TEMPLATE_GRID = 32  # canonical template coordinates live on this grid


@dataclass(frozen=True)
class DatasetRecord:
    record_id: str
    pose: Pose
    caption: str
    source: str  # "coco" or "synthetic"
    template_id: str | None = None

    def to_json_dict(self) -> dict:
        out = {
            "record_id": self.record_id,
            "caption": self.caption,
            "keypoints": self.pose.to_json_dict()["keypoints"],
            "source": self.source,
        }
        if self.template_id is not None:
            out["template_id"] = self.template_id
        return out

    @classmethod
    def from_json_dict(cls, data: dict) -> "DatasetRecord":
        return cls(
            record_id=data["record_id"],
            pose=Pose.from_json_dict(data),
            caption=data["caption"],
            source=data["source"],
            template_id=data.get("template_id"),
        )


@dataclass(frozen=True)
class PoseTemplate:
    template_id: str
    coordinates: np.ndarray  # (17, 2) on the canonical TEMPLATE_GRID
    caption_patterns: tuple
    jitter_scale: float = 1.5

    def __post_init__(self):
        coords = np.asarray(self.coordinates, dtype=np.float64)
        object.__setattr__(self, "coordinates", coords)
        coords.setflags(write=False)

    def canonical_pose(self, grid_size: int) -> Pose:
        coords = self.coordinates * (grid_size / TEMPLATE_GRID)
        return Pose(coords, np.ones(coords.shape[0], dtype=bool))


def _sym(head_y, shoulder, elbow, wrist, hip, knee, ankle):
    """Build 17 COCO-ordered coordinates from one body side; x mirrors about 16."""
    nose = (16.0, head_y)
    pts = [
        nose,
        (17.0, head_y - 0.8),
        (15.0, head_y - 0.8),
        (18.0, head_y),
        (14.0, head_y),
    ]
    for lx, ly in (shoulder, elbow, wrist):
        pts.append((lx, ly))
        pts.append((32.0 - lx, ly))
    for lx, ly in (hip, knee, ankle):
        pts.append((lx, ly))
        pts.append((32.0 - lx, ly))
    return np.array(pts)


def default_templates() -> tuple:
    """Five canonical full-body poses with caption phrasings."""
    t_pose = _sym(4, (20, 8), (25, 8), (29, 8), (18, 16), (18, 22), (18, 28))
    standing = _sym(4, (20, 8), (20, 12), (20, 16), (18, 16), (18, 22), (18, 28))
    arms_up = _sym(6, (20, 10), (22, 6), (23, 2), (18, 17), (18, 23), (18, 29))
    sitting = _sym(8, (20, 12), (21, 16), (21, 20), (18, 20), (22, 24), (22, 29))
    walking = np.array(t_pose)  # start from symmetric layout, then offset limbs
    walking[7] = (22, 11)   # left elbow swings forward
    walking[9] = (24, 14)   # left wrist
    walking[8] = (10, 12)   # right elbow back
    walking[10] = (9, 16)   # right wrist
    walking[13] = (20, 22)  # left knee
    walking[15] = (23, 27)  # left ankle
    walking[14] = (13, 22)  # right knee
    walking[16] = (10, 27)  # right ankle
    return (
        PoseTemplate(
            "t_pose",
            t_pose,
            (
                "t pose",
                "a person in a t pose",
                "person holding both arms straight out to the sides",
            ),
        ),
        PoseTemplate(
            "standing",
            standing,
            (
                "standing",
                "a person standing upright",
                "person standing with arms at their sides",
            ),
        ),
        PoseTemplate(
            "arms_up",
            arms_up,
            (
                "arms up",
                "a person raising both arms overhead",
                "person with hands in the air",
            ),
        ),
        PoseTemplate(
            "sitting",
            sitting,
            (
                "sitting",
                "a person sitting down",
                "person seated with knees apart",
            ),
        ),
        PoseTemplate(
            "walking",
            walking,
            (
                "walking",
                "a person walking forward",
                "person taking a step while swinging the arms",
            ),
        ),
    )


def synthesize(templates, count_per_template: int, seed: int, grid_size: int) -> list:
    """Jittered instances of each template with a caption drawn from its
    patterns. Deterministic under the seed."""
    rng = np.random.default_rng(seed)
    scale = grid_size / TEMPLATE_GRID
    records = []
    for template in templates:
        base = template.coordinates * scale
        for i in range(count_per_template):
            jitter = rng.normal(0.0, template.jitter_scale * scale, size=base.shape)
            coords = np.clip(base + jitter, 0.0, grid_size - 1e-3)
            caption = template.caption_patterns[
                int(rng.integers(len(template.caption_patterns)))
            ]
            records.append(
                DatasetRecord(
                    record_id=f"{template.template_id}_{i:05d}",
                    pose=Pose(coords, np.ones(base.shape[0], dtype=bool)),
                    caption=caption,
                    source="synthetic",
                    template_id=template.template_id,
                )
            )
    return records


def rescale_to_grid(x: float, y: float, width: int, height: int, grid_size: int):
    """Aspect-preserving, centered mapping from image pixels to the grid."""
    scale = grid_size / max(width, height)
    gx = x * scale + (grid_size - width * scale) / 2.0
    gy = y * scale + (grid_size - height * scale) / 2.0
    return gx, gy


def grid_to_image(gx: float, gy: float, width: int, height: int, grid_size: int):
    scale = grid_size / max(width, height)
    x = (gx - (grid_size - width * scale) / 2.0) / scale
    y = (gy - (grid_size - height * scale) / 2.0) / scale
    return x, y


def parse_coco(keypoint_annotations_path, captions_path, grid_size: int, seed: int = 0) -> list:
    """COCO keypoint + caption ingestion.

    Keeps images with exactly one person annotation and at least 8 labeled
    keypoints (COCO visibility 1 or 2 both count as visible); rescales
    coordinates to the grid; pairs each image with one of its captions chosen
    uniformly under the seed."""
    try:
        with open(keypoint_annotations_path) as fh:
            kp_data = json.load(fh)
        with open(captions_path) as fh:
            cap_data = json.load(fh)
        images = {img["id"]: img for img in kp_data["images"]}
        by_image = {}
        for ann in kp_data["annotations"]:
            by_image.setdefault(ann["image_id"], []).append(ann)
        captions = {}
        for ann in cap_data["annotations"]:
            captions.setdefault(ann["image_id"], []).append(ann["caption"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"malformed COCO annotation file: {exc}") from exc

    records = []
    for image_id in sorted(by_image):
        anns = by_image[image_id]
        if len(anns) != 1 or image_id not in images or image_id not in captions:
            continue
        ann = anns[0]
        try:
            kps = np.asarray(ann["keypoints"], dtype=np.float64).reshape(-1, 3)
            width, height = images[image_id]["width"], images[image_id]["height"]
        except (KeyError, ValueError, TypeError) as exc:
            raise ParseError(f"malformed annotation for image {image_id}: {exc}") from exc
        vis = kps[:, 2] >= 1
        if vis.sum() < MIN_VISIBLE_KEYPOINTS:
            continue
        coords = np.zeros((kps.shape[0], 2))
        for i, (x, y, _v) in enumerate(kps):
            gx, gy = rescale_to_grid(x, y, width, height, grid_size)
            coords[i] = (
                min(max(gx, 0.0), grid_size - 1e-3),
                min(max(gy, 0.0), grid_size - 1e-3),
            )
        rng = random.Random(f"{seed}:{image_id}")
        caption = rng.choice(sorted(captions[image_id]))
        records.append(
            DatasetRecord(
                record_id=f"coco_{image_id}",
                pose=Pose(coords, vis),
                caption=caption,
                source="coco",
            )
        )
    if not records:
        raise EmptyDataset("no records survived COCO filtering")
    return records


def split(records, ratio: float = 0.8, seed: int = 0):
    """Deterministic shuffled train/val split; disjoint and exhaustive."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0,1), got {ratio}")
    if not records:
        raise EmptyDataset("cannot split an empty record list")
    order = list(records)
    random.Random(seed).shuffle(order)
    n_train = int(round(ratio * len(order)))
    return order[:n_train], order[n_train:]


def write_manifest(records, path) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record.to_json_dict()) + "\n")


def read_manifest(path) -> list:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(DatasetRecord.from_json_dict(json.loads(line)))
    if not records:
        raise EmptyDataset(f"manifest {path} holds no records")
    return records
