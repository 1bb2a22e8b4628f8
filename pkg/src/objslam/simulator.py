"""Synthetic desk scenes, camera orbits, and noisy measurements.

Stands in for a real detector + visual-odometry front end: ellipsoid
objects are placed on a surface without overlap, a camera orbit looks at
the scene, detections are exact projected boxes corrupted by pixel noise,
border truncation, dropout, and a confidence model, and odometry is the
true relative motion right-composed with Gaussian SE(3) noise. Everything
is deterministic given the config seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import Dataset, Detection, Frame, OdometryEntry, GroundTruthObject
from .geometry import (
    BoundingBox2D,
    CameraIntrinsics,
    Pose,
    Quadric,
    between,
    compose,
    project_bbox_batch,
)
from .priors import OrientationClass, PriorRecord, PriorTable

MIN_VISIBLE_EXTENT_PX = 4.0


class PlacementFailure(RuntimeError):
    """Could not place all objects without overlap within the retry budget."""


def default_label_pool() -> dict[str, PriorRecord]:
    """Desk objects with plausible true dimensions (meters) and orientation
    classes; labels match the bundled embedding vocabulary."""
    rows = [
        # in-plane extents kept distinct so heading is observable from boxes
        ("bottle", 0.085, 0.06, 0.24, OrientationClass.VERTICAL),
        ("can", 0.075, 0.055, 0.12, OrientationClass.VERTICAL),
        ("lamp", 0.17, 0.12, 0.4, OrientationClass.VERTICAL),
        ("plant", 0.21, 0.15, 0.32, OrientationClass.VERTICAL),
        ("keyboard", 0.44, 0.14, 0.035, OrientationClass.HORIZONTAL),
        ("monitor", 0.55, 0.2, 0.35, OrientationClass.HORIZONTAL),
        ("laptop", 0.32, 0.22, 0.025, OrientationClass.HORIZONTAL),
        ("book", 0.24, 0.16, 0.035, OrientationClass.HORIZONTAL),
        ("mouse", 0.11, 0.06, 0.04, OrientationClass.HORIZONTAL),
        ("phone", 0.15, 0.072, 0.012, OrientationClass.HORIZONTAL),
        ("mug", 0.12, 0.085, 0.1, OrientationClass.UNCERTAIN),
        ("cup", 0.105, 0.075, 0.09, OrientationClass.UNCERTAIN),
        ("clock", 0.13, 0.05, 0.11, OrientationClass.UNCERTAIN),
    ]
    return {label: PriorRecord(label, l, w, h, o) for label, l, w, h, o in rows}


@dataclass(frozen=True)
class SceneSpec:
    """Scene recipe: object count, surface area (meters, centered at the
    origin), resting height, and the label pool to draw from."""

    n_objects: int = 10
    area: tuple[float, float] = (2.0, 1.2)
    surface_height: float = 0.0
    label_pool: dict[str, PriorRecord] = field(default_factory=default_label_pool)
    max_retries: int = 200

    def __post_init__(self) -> None:
        if self.n_objects < 0:
            raise ValueError("object count must be non-negative")
        if min(self.area) <= 0.0:
            raise ValueError("area must be positive")
        if self.n_objects > 0 and not self.label_pool:
            raise ValueError("label pool must be non-empty")


@dataclass(frozen=True)
class SceneObject:
    label: str
    quadric: Quadric
    record: PriorRecord


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    spec: SceneSpec

    def prior_table(self) -> PriorTable:
        """True-dimension priors, one record per distinct label."""
        table = PriorTable()
        for obj in self.objects:
            if obj.label not in table:
                table.add(obj.record)
        return table


def _semi_axes_for(record: PriorRecord) -> np.ndarray:
    """Half extents in the object's local frame.

    Scenes use yaw-only rotations, so local z is the world vertical: the
    vertical class puts the largest dimension on z, horizontal puts it on x
    (in-plane), uncertain keeps the listed order.
    """
    dims = np.sort(record.dimensions())
    if record.orientation == OrientationClass.VERTICAL:
        return np.array([dims[0], dims[1], dims[2]]) / 2.0
    if record.orientation == OrientationClass.HORIZONTAL:
        return np.array([dims[2], dims[1], dims[0]]) / 2.0
    return record.dimensions() / 2.0


def generate_scene(spec: SceneSpec, seed: int) -> Scene:
    """Place non-overlapping objects on the surface, deterministically.

    Overlap is judged conservatively: centroid separation must exceed the
    sum of the two maximum semi-axes.
    """
    rng = np.random.default_rng(seed)
    labels = sorted(spec.label_pool)
    half_x, half_y = spec.area[0] / 2.0, spec.area[1] / 2.0
    objects: list[SceneObject] = []
    centers: list[np.ndarray] = []
    radii: list[float] = []
    for i in range(spec.n_objects):
        label = labels[int(rng.integers(0, len(labels)))]
        record = spec.label_pool[label]
        s = _semi_axes_for(record)
        radius = float(np.max(s))
        placed = False
        for _ in range(spec.max_retries):
            # an object wider than the surface can only sit at its center
            x = rng.uniform(-half_x + radius, half_x - radius) if radius < half_x else 0.0
            y = rng.uniform(-half_y + radius, half_y - radius) if radius < half_y else 0.0
            center = np.array([x, y, spec.surface_height + s[2]])
            if all(
                np.linalg.norm(center - c) > radius + r
                for c, r in zip(centers, radii)
            ):
                placed = True
                break
        if not placed:
            raise PlacementFailure(
                f"object {i} ({label}) could not be placed after "
                f"{spec.max_retries} attempts"
            )
        yaw = float(rng.uniform(0.0, 2.0 * np.pi))
        theta = np.array([0.0, 0.0, yaw])
        objects.append(SceneObject(label, Quadric(theta, center, s), record))
        centers.append(center)
        radii.append(radius)
    return Scene(tuple(objects), spec)


def look_at_pose(eye: np.ndarray, target: np.ndarray) -> Pose:
    """Camera pose with the optical (+z) axis pointing at the target."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(z)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    z = z / norm
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(up, z)
    if np.linalg.norm(x) < 1e-9:
        # Looking straight up/down: pick an arbitrary horizontal right axis.
        x = np.array([1.0, 0.0, 0.0])
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.column_stack([x, y, z]), eye)


def orbit_trajectory(
    n_frames: int,
    center: Sequence[float] = (0.0, 0.0, 0.1),
    radius: float = 2.2,
    height: float = 1.2,
    arc: float = 5.2,
    start_angle: float = 0.0,
) -> list[Pose]:
    """Camera poses along a circular arc, all looking at the scene center."""
    if n_frames <= 0:
        return []
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    center = np.asarray(center, dtype=np.float64)
    angles = start_angle + np.linspace(0.0, arc, n_frames)
    poses = []
    for a in angles:
        eye = center + np.array([radius * np.cos(a), radius * np.sin(a), height])
        poses.append(look_at_pose(eye, center))
    return poses


@dataclass(frozen=True)
class SimConfig:
    """Measurement-noise recipe; all randomness derives from `seed`."""

    sigma_rot: float = 0.0
    sigma_trans: float = 0.0
    sigma_px: float = 0.0
    sigma_depth: float = 0.0
    dropout: float = 0.0
    truncation: bool = True
    confidence_floor: float = 0.3
    confidence_ceiling: float = 0.99
    confidence_jitter: float = 0.05
    max_observations_per_object: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("sigma_rot", "sigma_trans", "sigma_px", "sigma_depth",
                     "confidence_jitter"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must lie in [0, 1]")
        if not 0.0 <= self.confidence_floor <= self.confidence_ceiling <= 1.0:
            raise ValueError("confidence clamp bounds must be ordered in [0, 1]")
        if (
            self.max_observations_per_object is not None
            and self.max_observations_per_object <= 0
        ):
            raise ValueError("sparse-mode observation cap must be positive")


@dataclass(frozen=True)
class _Sighting:
    """Noiseless per-object view geometry for one frame."""

    index: int
    full_box: np.ndarray
    clipped_box: np.ndarray
    depth: float
    truncated: bool


def _frame_geometry(
    scene: Scene, x: Pose, K: CameraIntrinsics, image_size: tuple[int, int]
) -> list[_Sighting]:
    n = len(scene.objects)
    if n == 0:
        return []
    W, H = float(image_size[0]), float(image_size[1])
    R_wc = np.tile(x.rotation, (n, 1, 1))
    t_wc = np.tile(x.translation, (n, 1))
    R_q = np.stack([o.quadric.rotation_matrix() for o in scene.objects])
    t_q = np.stack([o.quadric.t for o in scene.objects])
    s = np.stack([o.quadric.s for o in scene.objects])
    boxes, valid = project_bbox_batch(R_wc, t_wc, K, R_q, t_q, s)
    depths = (t_q - x.translation) @ x.rotation[:, 2]
    sightings = []
    for i in range(n):
        if not valid[i]:
            continue
        full = boxes[i]
        clipped = np.array(
            [max(full[0], 0.0), max(full[1], 0.0), min(full[2], W), min(full[3], H)]
        )
        if (
            clipped[2] - clipped[0] < MIN_VISIBLE_EXTENT_PX
            or clipped[3] - clipped[1] < MIN_VISIBLE_EXTENT_PX
        ):
            continue
        truncated = bool(np.any(np.abs(clipped - full) > 1e-9))
        sightings.append(_Sighting(i, full, clipped, float(depths[i]), truncated))
    return sightings


def _render_frame(
    scene: Scene,
    x: Pose,
    K: CameraIntrinsics,
    image_size: tuple[int, int],
    cfg: SimConfig,
    rng: np.random.Generator,
    allowed: set[int] | None = None,
) -> tuple[list[Detection], list[int]]:
    """Noisy detections plus the index of the source object for each."""
    W, H = float(image_size[0]), float(image_size[1])
    detections: list[Detection] = []
    sources: list[int] = []
    for sighting in _frame_geometry(scene, x, K, image_size):
        if allowed is not None and sighting.index not in allowed:
            continue
        if sighting.truncated and not cfg.truncation:
            continue
        if cfg.dropout > 0.0 and rng.uniform() < cfg.dropout:
            continue
        box = sighting.clipped_box.copy()
        if cfg.sigma_px > 0.0:
            box = box + rng.normal(0.0, cfg.sigma_px, size=4)
            box = np.array(
                [max(box[0], 0.0), max(box[1], 0.0), min(box[2], W), min(box[3], H)]
            )
            if box[2] - box[0] < 1.0 or box[3] - box[1] < 1.0:
                continue
        full_area = (sighting.full_box[2] - sighting.full_box[0]) * (
            sighting.full_box[3] - sighting.full_box[1]
        )
        visible_area = (sighting.clipped_box[2] - sighting.clipped_box[0]) * (
            sighting.clipped_box[3] - sighting.clipped_box[1]
        )
        confidence = float(
            np.clip(visible_area / full_area, cfg.confidence_floor, cfg.confidence_ceiling)
        )
        if cfg.confidence_jitter > 0.0:
            confidence = float(
                np.clip(confidence + rng.normal(0.0, cfg.confidence_jitter), 0.0, 1.0)
            )
        depth = sighting.depth
        if cfg.sigma_depth > 0.0:
            depth = max(depth + float(rng.normal(0.0, cfg.sigma_depth)), 0.05)
        detections.append(
            Detection(
                BoundingBox2D(*box),
                scene.objects[sighting.index].label,
                confidence,
                center_depth=depth,
            )
        )
        sources.append(sighting.index)
    return detections, sources


def render_detections(
    scene: Scene,
    x: Pose,
    K: CameraIntrinsics,
    image_size: tuple[int, int],
    cfg: SimConfig,
    rng: np.random.Generator | None = None,
) -> list[Detection]:
    """One frame of noisy detections (see _render_frame for the recipe)."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    detections, _ = _render_frame(scene, x, K, image_size, cfg, rng)
    return detections


def perturb_odometry(
    gt_poses: Sequence[Pose], cfg: SimConfig, rng: np.random.Generator | None = None
) -> list[OdometryEntry]:
    """Relative GT motions right-composed with Gaussian SE(3) noise."""
    if len(gt_poses) < 2:
        return []
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    entries = []
    for i in range(len(gt_poses) - 1):
        u = between(gt_poses[i], gt_poses[i + 1])
        if cfg.sigma_rot > 0.0 or cfg.sigma_trans > 0.0:
            noise = Pose.from_rotvec(
                rng.normal(0.0, cfg.sigma_rot, size=3) if cfg.sigma_rot > 0.0 else np.zeros(3),
                rng.normal(0.0, cfg.sigma_trans, size=3) if cfg.sigma_trans > 0.0 else np.zeros(3),
            )
            u = compose(u, noise)
        entries.append(OdometryEntry(i, i + 1, u))
    return entries


def _sparse_allowance(
    scene: Scene,
    poses: Sequence[Pose],
    K: CameraIntrinsics,
    image_size: tuple[int, int],
    cap: int,
) -> list[set[int]]:
    """Per-frame object whitelists limiting each object to `cap` sightings,
    spread evenly over the frames where it is geometrically visible."""
    visible_frames: dict[int, list[int]] = {i: [] for i in range(len(scene.objects))}
    for f, x in enumerate(poses):
        for sighting in _frame_geometry(scene, x, K, image_size):
            visible_frames[sighting.index].append(f)
    allowed: list[set[int]] = [set() for _ in poses]
    for obj_index, frames in visible_frames.items():
        if not frames:
            continue
        if len(frames) <= cap:
            chosen = frames
        else:
            picks = np.unique(
                np.round(np.linspace(0, len(frames) - 1, cap)).astype(int)
            )
            chosen = [frames[p] for p in picks]
        for f in chosen:
            allowed[f].add(obj_index)
    return allowed


def simulate_dataset(
    spec: SceneSpec,
    n_frames: int,
    K: CameraIntrinsics,
    image_size: tuple[int, int],
    cfg: SimConfig,
    center: Sequence[float] = (0.0, 0.0, 0.1),
    radius: float = 2.2,
    height: float = 1.2,
    arc: float = 5.2,
) -> tuple[Dataset, Scene]:
    """Full synthetic dataset: scene, orbit, noisy detections + odometry,
    ground truth, and the per-frame detection-to-object association."""
    scene = generate_scene(spec, cfg.seed)
    poses = orbit_trajectory(n_frames, center=center, radius=radius, height=height, arc=arc)
    render_rng = np.random.default_rng([cfg.seed, 1])
    odom_rng = np.random.default_rng([cfg.seed, 2])

    allowed: list[set[int]] | None = None
    if cfg.max_observations_per_object is not None:
        allowed = _sparse_allowance(
            scene, poses, K, image_size, cfg.max_observations_per_object
        )

    frames: list[Frame] = []
    gt_association: dict[int, list[tuple[int, int]]] = {}
    for f, x in enumerate(poses):
        detections, sources = _render_frame(
            scene, x, K, image_size, cfg, render_rng,
            allowed[f] if allowed is not None else None,
        )
        frames.append(Frame(f, tuple(detections)))
        if sources:
            gt_association[f] = [(d, o) for d, o in enumerate(sources)]

    dataset = Dataset(
        intrinsics=K,
        image_size=(int(image_size[0]), int(image_size[1])),
        frames=frames,
        odometry=perturb_odometry(poses, cfg, odom_rng),
        gt_objects=[GroundTruthObject(o.label, o.quadric) for o in scene.objects],
        gt_trajectory=[(f, x) for f, x in enumerate(poses)],
        gt_association=gt_association if gt_association else None,
    )
    return dataset, scene
