"""On-disk dataset layout and record schemas.

A dataset is a directory:

- ``header.json``: camera intrinsics and image size;
- ``frames.jsonl``: one record per keyframe with its detections;
- ``odometry.jsonl``: one relative-pose record per consecutive frame pair;
- ``gt_objects.jsonl``, ``gt_trajectory.jsonl``, ``gt_association.jsonl``
  (optional): ground truth for evaluation.

Rotations appear on disk as unit quaternions in (w, x, y, z) order.
``ParseError`` carries file and line number; ``SchemaError`` names the
offending field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    BoundingBox2D,
    CameraIntrinsics,
    Pose,
    Quadric,
    matrix_to_quat,
    quat_to_matrix,
)

HEADER_FILE = "header.json"
FRAMES_FILE = "frames.jsonl"
ODOMETRY_FILE = "odometry.jsonl"
GT_OBJECTS_FILE = "gt_objects.jsonl"
GT_TRAJECTORY_FILE = "gt_trajectory.jsonl"
GT_ASSOCIATION_FILE = "gt_association.jsonl"


class ParseError(ValueError):
    """Malformed JSON; message includes file and line number."""


class SchemaError(ValueError):
    """Structurally valid JSON with invalid content; message names the field."""


@dataclass(frozen=True)
class Detection:
    """Single 2D detection: box, class label, confidence, optional depth of
    the box center (meters along the optical axis)."""

    bbox: BoundingBox2D
    label: str
    confidence: float
    center_depth: float | None = None

    def __post_init__(self) -> None:
        if not self.label:
            raise ValueError("detection label must be non-empty")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")
        if self.center_depth is not None and self.center_depth <= 0.0:
            raise ValueError(f"center depth must be positive, got {self.center_depth}")


@dataclass(frozen=True)
class Frame:
    frame_id: int
    detections: tuple[Detection, ...]


@dataclass(frozen=True)
class OdometryEntry:
    from_frame: int
    to_frame: int
    relative: Pose


@dataclass(frozen=True)
class GroundTruthObject:
    label: str
    quadric: Quadric


@dataclass
class Dataset:
    intrinsics: CameraIntrinsics
    image_size: tuple[int, int]
    frames: list[Frame]
    odometry: list[OdometryEntry]
    gt_objects: list[GroundTruthObject] | None = None
    gt_trajectory: list[tuple[int, Pose]] | None = None
    gt_association: dict[int, list[tuple[int, int]]] | None = None

    def odometry_by_pair(self) -> dict[tuple[int, int], Pose]:
        return {(o.from_frame, o.to_frame): o.relative for o in self.odometry}


def _dump_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ": "))


def _quat_list(R: np.ndarray) -> list[float]:
    return [float(v) for v in matrix_to_quat(R)]


def _vec_list(v: np.ndarray) -> list[float]:
    return [float(x) for x in np.asarray(v)]


def detection_to_json(det: Detection) -> dict:
    return {
        "bbox": _vec_list(det.bbox.as_array()),
        "label": det.label,
        "confidence": float(det.confidence),
        "center_depth": None if det.center_depth is None else float(det.center_depth),
    }


def _require(record: dict, key: str, where: str):
    if key not in record:
        raise SchemaError(f"{where}: missing field {key!r}")
    return record[key]


def detection_from_json(record: dict, where: str) -> Detection:
    bbox = _require(record, "bbox", where)
    if not (isinstance(bbox, list) and len(bbox) == 4):
        raise SchemaError(f"{where}: field 'bbox' must be a 4-element list")
    try:
        box = BoundingBox2D(*[float(v) for v in bbox])
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: field 'bbox' invalid: {exc}") from exc
    label = _require(record, "label", where)
    confidence = _require(record, "confidence", where)
    depth = record.get("center_depth")
    try:
        return Detection(
            box, str(label), float(confidence), None if depth is None else float(depth)
        )
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: {exc}") from exc


def _pose_from_record(record: dict, where: str) -> Pose:
    quat = _require(record, "rotation_quaternion", where)
    trans = _require(record, "translation", where)
    if not (isinstance(quat, list) and len(quat) == 4):
        raise SchemaError(f"{where}: field 'rotation_quaternion' must have 4 entries")
    if not (isinstance(trans, list) and len(trans) == 3):
        raise SchemaError(f"{where}: field 'translation' must have 3 entries")
    q = np.array([float(v) for v in quat])
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > 1e-6:
        raise SchemaError(
            f"{where}: field 'rotation_quaternion' must be unit norm, got {norm:.8f}"
        )
    return Pose(quat_to_matrix(q / norm), np.array([float(v) for v in trans]))


def _read_jsonl(path: Path) -> list[dict]:
    records = []
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{line_no}: invalid JSON: {exc.msg}") from exc
    return records


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = {
        "intrinsics": {
            "fx": dataset.intrinsics.fx,
            "fy": dataset.intrinsics.fy,
            "cx": dataset.intrinsics.cx,
            "cy": dataset.intrinsics.cy,
        },
        "image_size": list(dataset.image_size),
    }
    (path / HEADER_FILE).write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")

    with open(path / FRAMES_FILE, "w") as f:
        for frame in dataset.frames:
            f.write(
                _dump_line(
                    {
                        "frame_id": frame.frame_id,
                        "detections": [detection_to_json(d) for d in frame.detections],
                    }
                )
                + "\n"
            )
    with open(path / ODOMETRY_FILE, "w") as f:
        for entry in dataset.odometry:
            f.write(
                _dump_line(
                    {
                        "from_frame": entry.from_frame,
                        "to_frame": entry.to_frame,
                        "rotation_quaternion": _quat_list(entry.relative.rotation),
                        "translation": _vec_list(entry.relative.translation),
                    }
                )
                + "\n"
            )
    if dataset.gt_objects is not None:
        with open(path / GT_OBJECTS_FILE, "w") as f:
            for obj in dataset.gt_objects:
                f.write(
                    _dump_line(
                        {
                            "label": obj.label,
                            "rotation_quaternion": _quat_list(obj.quadric.rotation_matrix()),
                            "center": _vec_list(obj.quadric.t),
                            "half_extents": _vec_list(obj.quadric.s),
                        }
                    )
                    + "\n"
                )
    if dataset.gt_trajectory is not None:
        with open(path / GT_TRAJECTORY_FILE, "w") as f:
            for frame_id, pose in dataset.gt_trajectory:
                f.write(
                    _dump_line(
                        {
                            "frame_id": frame_id,
                            "rotation_quaternion": _quat_list(pose.rotation),
                            "translation": _vec_list(pose.translation),
                        }
                    )
                    + "\n"
                )
    if dataset.gt_association is not None:
        with open(path / GT_ASSOCIATION_FILE, "w") as f:
            for frame_id in sorted(dataset.gt_association):
                pairs = dataset.gt_association[frame_id]
                f.write(
                    _dump_line(
                        {"frame_id": frame_id, "pairs": [list(p) for p in pairs]}
                    )
                    + "\n"
                )


def load_dataset(path: str | Path) -> Dataset:
    """Read and validate a dataset directory.

    Checks strictly increasing frame ids and that every consecutive frame
    pair has exactly one odometry record connecting it.
    """
    path = Path(path)
    header_path = path / HEADER_FILE
    if not header_path.exists():
        raise SchemaError(f"{header_path}: missing dataset header")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{header_path}:1: invalid JSON: {exc.msg}") from exc
    intr = _require(header, "intrinsics", str(header_path))
    for key in ("fx", "fy", "cx", "cy"):
        _require(intr, key, f"{header_path}: intrinsics")
    try:
        intrinsics = CameraIntrinsics(
            float(intr["fx"]), float(intr["fy"]), float(intr["cx"]), float(intr["cy"])
        )
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{header_path}: field 'intrinsics' invalid: {exc}") from exc
    size = _require(header, "image_size", str(header_path))
    if not (isinstance(size, list) and len(size) == 2 and all(v > 0 for v in size)):
        raise SchemaError(f"{header_path}: field 'image_size' must be two positive values")
    image_size = (int(size[0]), int(size[1]))

    frames: list[Frame] = []
    for i, record in enumerate(_read_jsonl(path / FRAMES_FILE), start=1):
        where = f"{path / FRAMES_FILE}:{i}"
        frame_id = _require(record, "frame_id", where)
        if not isinstance(frame_id, int):
            raise SchemaError(f"{where}: field 'frame_id' must be an integer")
        dets = _require(record, "detections", where)
        detections = tuple(detection_from_json(d, where) for d in dets)
        frames.append(Frame(frame_id, detections))
    ids = [f.frame_id for f in frames]
    if any(b <= a for a, b in zip(ids, ids[1:])):
        raise SchemaError(f"{path / FRAMES_FILE}: field 'frame_id' must be strictly increasing")

    odometry: list[OdometryEntry] = []
    odometry_path = path / ODOMETRY_FILE
    if odometry_path.exists():
        for i, record in enumerate(_read_jsonl(odometry_path), start=1):
            where = f"{odometry_path}:{i}"
            a = _require(record, "from_frame", where)
            b = _require(record, "to_frame", where)
            odometry.append(OdometryEntry(int(a), int(b), _pose_from_record(record, where)))
    pairs = {(o.from_frame, o.to_frame) for o in odometry}
    expected = set(zip(ids, ids[1:]))
    missing = expected - pairs
    if missing:
        raise SchemaError(
            f"{odometry_path}: missing odometry for consecutive frame pair(s) "
            f"{sorted(missing)[:3]}"
        )
    extra = pairs - expected
    if extra:
        raise SchemaError(
            f"{odometry_path}: odometry rows for non-consecutive frame pair(s) "
            f"{sorted(extra)[:3]}"
        )
    if len(odometry) != len(pairs):
        raise SchemaError(f"{odometry_path}: duplicate odometry rows")

    gt_objects = None
    if (path / GT_OBJECTS_FILE).exists():
        gt_objects = []
        for i, record in enumerate(_read_jsonl(path / GT_OBJECTS_FILE), start=1):
            where = f"{path / GT_OBJECTS_FILE}:{i}"
            label = str(_require(record, "label", where))
            quat = np.array(_require(record, "rotation_quaternion", where), dtype=np.float64)
            center = np.array(_require(record, "center", where), dtype=np.float64)
            half = np.array(_require(record, "half_extents", where), dtype=np.float64)
            if abs(np.linalg.norm(quat) - 1.0) > 1e-6:
                raise SchemaError(f"{where}: field 'rotation_quaternion' must be unit norm")
            try:
                quadric = Quadric.from_rotation(quat_to_matrix(quat), center, half)
            except ValueError as exc:
                raise SchemaError(f"{where}: {exc}") from exc
            gt_objects.append(GroundTruthObject(label, quadric))

    gt_trajectory = None
    if (path / GT_TRAJECTORY_FILE).exists():
        gt_trajectory = []
        for i, record in enumerate(_read_jsonl(path / GT_TRAJECTORY_FILE), start=1):
            where = f"{path / GT_TRAJECTORY_FILE}:{i}"
            frame_id = int(_require(record, "frame_id", where))
            gt_trajectory.append((frame_id, _pose_from_record(record, where)))

    gt_association = None
    if (path / GT_ASSOCIATION_FILE).exists():
        gt_association = {}
        for i, record in enumerate(_read_jsonl(path / GT_ASSOCIATION_FILE), start=1):
            where = f"{path / GT_ASSOCIATION_FILE}:{i}"
            frame_id = int(_require(record, "frame_id", where))
            pairs_list = _require(record, "pairs", where)
            gt_association[frame_id] = [(int(p[0]), int(p[1])) for p in pairs_list]

    return Dataset(
        intrinsics, image_size, frames, odometry, gt_objects, gt_trajectory, gt_association
    )
