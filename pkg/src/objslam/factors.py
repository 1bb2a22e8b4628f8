"""Factor types and residuals for the object-level factor graph.

Residual conventions:

- Odometry: split log of the body-frame error pose
  ``between(compose(x_i, u), x_{i+1})`` as a 6-vector (rotation log first,
  then translation).
- Bounding box: measured minus predicted box as (xmin, ymin, xmax, ymax).
  Observations whose projection is behind the camera or has a degenerate
  envelope are skipped, signalled by returning None. When the measured box
  touches the image border the corresponding residual components are zeroed
  so truncated detections do not drag the landmark toward the border.
- Size prior: ascending-sorted semi-axes minus the prior target.
- Orientation prior: SO(3) log of R_target^T R(theta).
- Centroid prior: centroid minus the single-shot measured centroid.

Jacobians are central finite differences with on-manifold perturbations.
The bounding-box factor overrides the generic path with a vectorized batch
evaluation because it dominates solver runtime.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    BoundingBox2D,
    CameraIntrinsics,
    Pose,
    Quadric,
    between,
    compose,
    project_bbox_batch,
    so3_exp,
    so3_log,
)

DEFAULT_JACOBIAN_STEP = 1e-6
# Pixel-noise default for detector boxes; the robust width below cuts the
# influence of outlier boxes at two standard deviations.
DEFAULT_BBOX_SIGMA = 10.0

Variable = Pose | Quadric
VariableKey = tuple[str, int]


class NonFiniteResidual(ValueError):
    """A residual evaluation produced NaN/inf or was skipped mid-differencing."""


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian noise with optional Huber robustification.

    ``huber_width`` is expressed in residual units and requires an isotropic
    diagonal covariance so the whitened threshold is well defined.
    """

    covariance: np.ndarray
    huber_width: float | None = None
    sqrt_information: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        cov = np.array(self.covariance, dtype=np.float64)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError(f"covariance must be square, got {cov.shape}")
        if np.abs(cov - cov.T).max() > 1e-12 * max(1.0, np.abs(cov).max()):
            raise ValueError("covariance must be symmetric")
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance must be positive definite") from exc
        if self.huber_width is not None:
            diag = np.diag(cov)
            if self.huber_width <= 0.0:
                raise ValueError("huber width must be positive")
            if np.abs(cov - np.diag(diag)).max() > 1e-12 or np.ptp(diag) > 1e-12:
                raise ValueError("huber width requires isotropic diagonal covariance")
        cov.setflags(write=False)
        object.__setattr__(self, "covariance", cov)
        sqrt_info = np.linalg.inv(L).copy()
        sqrt_info.setflags(write=False)
        object.__setattr__(self, "sqrt_information", sqrt_info)

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    @staticmethod
    def isotropic(dim: int, sigma: float, huber_width: float | None = None) -> "NoiseModel":
        return NoiseModel(np.eye(dim) * sigma * sigma, huber_width)

    @staticmethod
    def diagonal(variances: np.ndarray, huber_width: float | None = None) -> "NoiseModel":
        return NoiseModel(np.diag(np.asarray(variances, dtype=np.float64)), huber_width)

    def whiten(self, r: np.ndarray) -> np.ndarray:
        return self.sqrt_information @ r

    def whitened_huber_threshold(self) -> float | None:
        if self.huber_width is None:
            return None
        return self.huber_width / float(np.sqrt(self.covariance[0, 0]))

    def cost(self, r: np.ndarray) -> float:
        """Robustified squared Mahalanobis cost of a residual."""
        e2 = float(np.dot(self.whiten(r), self.whiten(r)))
        delta = self.whitened_huber_threshold()
        if delta is None:
            return e2
        e = np.sqrt(e2)
        if e <= delta:
            return e2
        return 2.0 * delta * e - delta * delta

    def robust_sqrt_weight(self, r: np.ndarray) -> float:
        """Square root of the IRLS weight for the current residual."""
        delta = self.whitened_huber_threshold()
        if delta is None:
            return 1.0
        e = float(np.linalg.norm(self.whiten(r)))
        if e <= delta:
            return 1.0
        return float(np.sqrt(delta / e))


def variable_dim(var: Variable) -> int:
    if isinstance(var, Pose):
        return 6
    if isinstance(var, Quadric):
        return 9
    raise TypeError(f"unsupported variable type {type(var)!r}")


def retract_variable(var: Variable, delta: np.ndarray) -> Variable:
    return var.retract(delta)


def odometry_residual(x_i: Pose, x_j: Pose, u: Pose) -> np.ndarray:
    """6-vector error between the odometry prediction and the next pose."""
    err = between(compose(x_i, u), x_j)
    return np.concatenate([so3_log(err.rotation), err.translation])


def _border_mask(
    measurement: BoundingBox2D, image_size: tuple[float, float] | None, tol: float = 1e-6
) -> np.ndarray:
    """Per-component validity mask: False where the box touches the border."""
    if image_size is None:
        return np.ones(4, dtype=bool)
    w, h = image_size
    return np.array(
        [
            measurement.xmin > tol,
            measurement.ymin > tol,
            measurement.xmax < w - tol,
            measurement.ymax < h - tol,
        ]
    )


def bbox_residual(
    x: Pose,
    q: Quadric,
    measurement: BoundingBox2D,
    K: CameraIntrinsics,
    image_size: tuple[float, float] | None = None,
) -> np.ndarray | None:
    """Measured minus predicted box, or None when the projection is invalid."""
    boxes, valid = project_bbox_batch(
        x.rotation[None], x.translation[None], K,
        q.rotation_matrix()[None], q.t[None], q.s[None],
    )
    if not valid[0]:
        return None
    r = measurement.as_array() - boxes[0]
    r[~_border_mask(measurement, image_size)] = 0.0
    return r


def size_prior_residual(q: Quadric, target: np.ndarray) -> np.ndarray:
    """Ascending-sorted semi-axes minus the ascending prior target."""
    return np.sort(q.s) - np.asarray(target, dtype=np.float64)


def orientation_prior_residual(q: Quadric, R_target: np.ndarray) -> np.ndarray:
    """Rotation log of the deviation from the prior rotation."""
    return so3_log(np.asarray(R_target).T @ q.rotation_matrix())


def centroid_residual(q: Quadric, target: np.ndarray) -> np.ndarray:
    return q.t - np.asarray(target, dtype=np.float64)


def numeric_jacobian(
    residual_fn,
    variables: list[Variable] | tuple[Variable, ...],
    step: float = DEFAULT_JACOBIAN_STEP,
) -> list[np.ndarray]:
    """Central-difference Jacobian blocks of a residual function.

    ``residual_fn`` is called with the (perturbed) variables in order and
    must return a fixed-length vector. Perturbations are applied through each
    variable's manifold retraction. Raises NonFiniteResidual when any
    evaluation is skipped or non-finite.
    """

    def evaluate(vars_: list[Variable]) -> np.ndarray:
        r = residual_fn(*vars_)
        if r is None:
            raise NonFiniteResidual("residual skipped during differencing")
        r = np.asarray(r, dtype=np.float64)
        if not np.all(np.isfinite(r)):
            raise NonFiniteResidual("residual is non-finite")
        return r

    variables = list(variables)
    r0 = evaluate(variables)
    blocks: list[np.ndarray] = []
    for vi, var in enumerate(variables):
        dim = variable_dim(var)
        J = np.empty((r0.shape[0], dim))
        for k in range(dim):
            delta = np.zeros(dim)
            delta[k] = step
            plus = list(variables)
            plus[vi] = retract_variable(var, delta)
            minus = list(variables)
            minus[vi] = retract_variable(var, -delta)
            J[:, k] = (evaluate(plus) - evaluate(minus)) / (2.0 * step)
        blocks.append(J)
    return blocks


_PERTURB_CACHE: dict[float, np.ndarray] = {}


def _perturbation_rotations(step: float) -> np.ndarray:
    """Stacked exp(step * e_k) for the three rotation axes."""
    R = _PERTURB_CACHE.get(step)
    if R is None:
        R = np.stack([so3_exp(step * np.eye(3)[k]) for k in range(3)])
        R.setflags(write=False)
        _PERTURB_CACHE[step] = R
    return R


class Factor:
    """Base interface: residual and Jacobians at given variable values."""

    kind: str = "factor"
    noise: NoiseModel

    def variable_keys(self) -> tuple[VariableKey, ...]:
        raise NotImplementedError

    def residual_at(self, *variables: Variable) -> np.ndarray | None:
        raise NotImplementedError

    def jacobian_at(
        self, *variables: Variable, step: float = DEFAULT_JACOBIAN_STEP
    ) -> tuple[np.ndarray, list[np.ndarray]] | None:
        """(residual, Jacobian blocks) or None when the factor is skipped."""
        r = self.residual_at(*variables)
        if r is None:
            return None
        return r, numeric_jacobian(self.residual_at, list(variables), step=step)


@dataclass(frozen=True)
class OdometryFactor(Factor):
    pose_i: int
    pose_j: int
    measurement: Pose
    noise: NoiseModel

    kind = "odometry"

    def variable_keys(self) -> tuple[VariableKey, ...]:
        return (("pose", self.pose_i), ("pose", self.pose_j))

    def residual_at(self, x_i: Pose, x_j: Pose) -> np.ndarray:
        return odometry_residual(x_i, x_j, self.measurement)


@dataclass(frozen=True)
class BBoxFactor(Factor):
    pose_id: int
    quadric_id: int
    measurement: BoundingBox2D
    K: CameraIntrinsics
    noise: NoiseModel
    image_size: tuple[float, float] | None = None

    kind = "bbox"

    def variable_keys(self) -> tuple[VariableKey, ...]:
        return (("pose", self.pose_id), ("quadric", self.quadric_id))

    def residual_at(self, x: Pose, q: Quadric) -> np.ndarray | None:
        return bbox_residual(x, q, self.measurement, self.K, self.image_size)

    def jacobian_at(
        self, x: Pose, q: Quadric, step: float = DEFAULT_JACOBIAN_STEP
    ) -> tuple[np.ndarray, list[np.ndarray]] | None:
        """Batched central differences: all 31 required projections (center
        plus +-step along the 15 tangent directions) in one vectorized call."""
        E = _perturbation_rotations(step)
        n = 31
        R_wc = np.tile(x.rotation, (n, 1, 1))
        t_wc = np.tile(x.translation, (n, 1))
        R_q = np.tile(q.rotation_matrix(), (n, 1, 1))
        t_q = np.tile(q.t, (n, 1))
        s = np.tile(q.s, (n, 1))

        # Row layout: 0 is the unperturbed center; then (+,-) pairs for pose
        # rotation, pose translation, quadric rotation, centroid, semi-axes.
        for k in range(3):
            R_wc[1 + 2 * k] = x.rotation @ E[k]
            R_wc[2 + 2 * k] = x.rotation @ E[k].T
            t_wc[7 + 2 * k, k] += step
            t_wc[8 + 2 * k, k] -= step
            R_q[13 + 2 * k] = R_q[0] @ E[k]
            R_q[14 + 2 * k] = R_q[0] @ E[k].T
            t_q[19 + 2 * k, k] += step
            t_q[20 + 2 * k, k] -= step
            s[25 + 2 * k, k] += step
            s[26 + 2 * k, k] -= step

        boxes, valid = project_bbox_batch(R_wc, t_wc, self.K, R_q, t_q, s)
        if not np.all(valid):
            return None
        mask = _border_mask(self.measurement, self.image_size)
        residuals = self.measurement.as_array()[None, :] - boxes
        residuals[:, ~mask] = 0.0
        diffs = (residuals[1::2] - residuals[2::2]) / (2.0 * step)
        return residuals[0], [diffs[0:6].T.copy(), diffs[6:15].T.copy()]


@dataclass(frozen=True)
class SizePriorFactor(Factor):
    quadric_id: int
    target: np.ndarray
    noise: NoiseModel

    kind = "size_prior"

    def __post_init__(self) -> None:
        target = np.array(self.target, dtype=np.float64).reshape(3)
        if np.any(target <= 0.0) or np.any(np.diff(target) < 0.0):
            raise ValueError(f"size target must be positive and ascending, got {target}")
        target.setflags(write=False)
        object.__setattr__(self, "target", target)

    def variable_keys(self) -> tuple[VariableKey, ...]:
        return (("quadric", self.quadric_id),)

    def residual_at(self, q: Quadric) -> np.ndarray:
        return size_prior_residual(q, self.target)


@dataclass(frozen=True)
class OrientationPriorFactor(Factor):
    quadric_id: int
    target_rotation: np.ndarray
    noise: NoiseModel

    kind = "orientation_prior"

    def __post_init__(self) -> None:
        R = np.array(self.target_rotation, dtype=np.float64)
        if R.shape != (3, 3) or np.abs(R.T @ R - np.eye(3)).max() > 1e-8:
            raise ValueError("orientation target must be a rotation matrix")
        R.setflags(write=False)
        object.__setattr__(self, "target_rotation", R)

    def variable_keys(self) -> tuple[VariableKey, ...]:
        return (("quadric", self.quadric_id),)

    def residual_at(self, q: Quadric) -> np.ndarray:
        return orientation_prior_residual(q, self.target_rotation)


@dataclass(frozen=True)
class CentroidPriorFactor(Factor):
    quadric_id: int
    target: np.ndarray
    noise: NoiseModel

    kind = "centroid"

    def __post_init__(self) -> None:
        target = np.array(self.target, dtype=np.float64).reshape(3)
        target.setflags(write=False)
        object.__setattr__(self, "target", target)

    def variable_keys(self) -> tuple[VariableKey, ...]:
        return (("quadric", self.quadric_id),)

    def residual_at(self, q: Quadric) -> np.ndarray:
        return centroid_residual(q, self.target)
