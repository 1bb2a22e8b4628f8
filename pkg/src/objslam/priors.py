"""Commonsense object priors: dimensions and canonical orientation.

A language model is asked once per vocabulary for typical object dimensions
(meters) and an orientation class: 0 means the object normally stands
vertically (longest axis up), 1 means it lies horizontally (longest axis in
the ground plane), 2 means no preferred orientation. The answers become
unary factors on each landmark:

- size target: half the sorted typical dimensions, blended with the sorted
  measured semi-axes by the detection confidence;
- orientation target: a rotation built from the landmark's initial rotation,
  snapped per class to the gravity direction while keeping the initial
  heading;
- covariances scaled so roll/pitch are trusted, yaw is nearly free, and
  translation/size uncertainty grows with object size.

Responses are cached on disk per vocabulary. Credentials for the hosted
model come from environment variables only.
"""

from __future__ import annotations

import csv
import hashlib
import io
import os
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

WORLD_UP = np.array([0.0, 0.0, 1.0])

PROMPT_TEMPLATE = (
    "Provide commonsense knowledge about the physical dimensions and "
    "orientation of the following objects. Generate a CSV with columns "
    "(object, length, width, height, orientation) where dimensions are in "
    "meters, orientation is coded as 0=vertical, 1=horizontal, 2=uncertain. "
    "Preserve the exact object names from the input list and maintain the "
    "same number of objects."
)

CSV_HEADER = ("object", "length", "width", "height", "orientation")

FALLBACK_DIMS = (0.3, 0.3, 0.3)

ENV_ENDPOINT = "OBJSLAM_LLM_ENDPOINT"
ENV_API_KEY = "OBJSLAM_LLM_API_KEY"
ENV_MODEL = "OBJSLAM_LLM_MODEL"
ENV_PROVIDER = "OBJSLAM_LLM_PROVIDER"


class EmptyVocabulary(ValueError):
    """No labels supplied for prior generation."""


class MalformedResponse(ValueError):
    """Model response could not be parsed as the requested CSV."""


class ConfigOutOfRange(ValueError):
    """A prior scale parameter lies outside its admissible interval."""


class DegenerateAxis(ValueError):
    """Axis to project is parallel to gravity and no fallback axis exists."""


class MissingCredentials(RuntimeError):
    """Hosted-model client constructed without the required environment."""


class LLMRequestError(RuntimeError):
    """Hosted model returned an error response."""


class OrientationClass(IntEnum):
    VERTICAL = 0
    HORIZONTAL = 1
    UNCERTAIN = 2


@dataclass(frozen=True)
class PriorRecord:
    """Typical full dimensions (meters) and orientation class for one label."""

    label: str
    length: float
    width: float
    height: float
    orientation: OrientationClass

    def __post_init__(self) -> None:
        for name in ("length", "width", "height"):
            v = getattr(self, name)
            if not np.isfinite(v) or not (0.0 < v < 20.0):
                raise ValueError(f"{name} must lie in (0, 20) meters, got {v}")
        object.__setattr__(self, "orientation", OrientationClass(self.orientation))

    def dimensions(self) -> np.ndarray:
        return np.array([self.length, self.width, self.height])

    @staticmethod
    def fallback(label: str) -> "PriorRecord":
        return PriorRecord(label, *FALLBACK_DIMS, OrientationClass.UNCERTAIN)


class PriorTable:
    """Per-label prior records plus the set of labels that fell back."""

    def __init__(self) -> None:
        self.records: dict[str, PriorRecord] = {}
        self.flagged: set[str] = set()

    def add(self, record: PriorRecord, flagged: bool = False) -> None:
        self.records[record.label] = record
        if flagged:
            self.flagged.add(record.label)

    def get(self, label: str) -> PriorRecord | None:
        return self.records.get(label)

    def resolve(self, label: str) -> PriorRecord:
        """Record for the label; unknown labels get a flagged fallback."""
        record = self.records.get(label)
        if record is None:
            record = PriorRecord.fallback(label)
            self.add(record, flagged=True)
        return record

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, label: str) -> bool:
        return label in self.records


@dataclass(frozen=True)
class PriorConfig:
    """Scales for prior covariances.

    Roll/pitch deviations kx, ky must lie in (0, pi/16); yaw deviation kz in
    (pi/2, pi) so the heading stays effectively unconstrained; translation
    and size multipliers kt, ks in (0.5, 2).
    """

    kx: float = np.pi / 32.0
    ky: float = np.pi / 32.0
    kz: float = 3.0 * np.pi / 4.0
    kt: float = 1.0
    ks: float = 1.0

    def __post_init__(self) -> None:
        if not (0.0 < self.kx < np.pi / 16.0 and 0.0 < self.ky < np.pi / 16.0):
            raise ConfigOutOfRange(f"kx, ky must lie in (0, pi/16), got {self.kx}, {self.ky}")
        if not (np.pi / 2.0 < self.kz < np.pi):
            raise ConfigOutOfRange(f"kz must lie in (pi/2, pi), got {self.kz}")
        if not (0.5 < self.kt < 2.0 and 0.5 < self.ks < 2.0):
            raise ConfigOutOfRange(f"kt, ks must lie in (0.5, 2), got {self.kt}, {self.ks}")


def dedupe_labels(labels: list[str]) -> list[str]:
    seen: set[str] = set()
    out: list[str] = []
    for label in labels:
        if label not in seen:
            seen.add(label)
            out.append(label)
    return out


def build_prompt(labels: list[str]) -> str:
    """Instruction block followed by one label per line, duplicates removed."""
    unique = dedupe_labels([l for l in labels if l.strip()])
    if not unique:
        raise EmptyVocabulary("prior generation needs at least one label")
    return PROMPT_TEMPLATE + "\n\n" + "\n".join(unique) + "\n"


def vocabulary_hash(labels: list[str]) -> str:
    unique = dedupe_labels(labels)
    return hashlib.sha256("\n".join(unique).encode("utf-8")).hexdigest()


def _strip_code_fences(text: str) -> str:
    lines = [l for l in text.splitlines() if not l.strip().startswith("```")]
    return "\n".join(lines)


def _parse_rows(text: str) -> tuple[list[PriorRecord], list[str]]:
    """Lenient CSV parse: returns (valid records, per-row error messages)."""
    records: list[PriorRecord] = []
    errors: list[str] = []
    reader = csv.reader(io.StringIO(_strip_code_fences(text)))
    for row in reader:
        row = [c.strip() for c in row]
        if not row or all(c == "" for c in row):
            continue
        if tuple(c.lower() for c in row) == CSV_HEADER:
            continue
        if len(row) != 5:
            errors.append(f"expected 5 fields, got {len(row)}: {row!r}")
            continue
        label = row[0]
        try:
            dims = [float(c) for c in row[1:4]]
            orientation = int(row[4])
            if orientation not in (0, 1, 2):
                raise ValueError(f"orientation code {orientation} not in {{0, 1, 2}}")
            records.append(PriorRecord(label, *dims, OrientationClass(orientation)))
        except ValueError as exc:
            errors.append(f"row {row!r}: {exc}")
    return records, errors


def parse_prior_csv(text: str) -> PriorTable:
    """Strict parse of a prior CSV; raises MalformedResponse on any bad row."""
    records, errors = _parse_rows(text)
    if errors:
        raise MalformedResponse("; ".join(errors))
    if not records:
        raise MalformedResponse("no data rows found")
    table = PriorTable()
    for record in records:
        table.add(record)
    return table


def write_prior_csv(table: PriorTable, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for record in table.records.values():
            writer.writerow(
                [record.label, record.length, record.width, record.height,
                 int(record.orientation)]
            )


class LLMClient:
    """Minimal completion interface: one prompt in, one text response out."""

    def complete(self, prompt: str) -> str:
        raise NotImplementedError


class FixtureLLMClient(LLMClient):
    """Canned response client for tests and offline runs. Counts calls."""

    def __init__(self, response: str | None = None, path: str | Path | None = None):
        if (response is None) == (path is None):
            raise ValueError("provide exactly one of response text or path")
        self._response = response if response is not None else Path(path).read_text()
        self.call_count = 0

    def complete(self, prompt: str) -> str:
        self.call_count += 1
        return self._response


class HTTPLLMClient(LLMClient):
    """Hosted-model client configured from the environment.

    OBJSLAM_LLM_ENDPOINT and OBJSLAM_LLM_API_KEY are required;
    OBJSLAM_LLM_MODEL names the model and OBJSLAM_LLM_PROVIDER selects the
    request shape ("openai" chat-completions by default, or "anthropic"
    messages). Temperature is pinned to zero.
    """

    def __init__(self, timeout: float = 60.0):
        self.endpoint = os.environ.get(ENV_ENDPOINT, "")
        self.api_key = os.environ.get(ENV_API_KEY, "")
        self.model = os.environ.get(ENV_MODEL, "")
        self.provider = os.environ.get(ENV_PROVIDER, "openai").lower()
        self.timeout = timeout
        if not self.endpoint or not self.api_key:
            raise MissingCredentials(
                f"set {ENV_ENDPOINT} and {ENV_API_KEY} to use the hosted client"
            )
        if self.provider not in ("openai", "anthropic"):
            raise ValueError(f"unknown provider {self.provider!r}")

    def complete(self, prompt: str) -> str:
        import requests

        if self.provider == "anthropic":
            headers = {"x-api-key": self.api_key, "anthropic-version": "2023-06-01"}
            body = {
                "model": self.model,
                "max_tokens": 2048,
                "temperature": 0,
                "messages": [{"role": "user", "content": prompt}],
            }
        else:
            headers = {"Authorization": f"Bearer {self.api_key}"}
            body = {
                "model": self.model,
                "temperature": 0,
                "messages": [{"role": "user", "content": prompt}],
            }
        resp = requests.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
        if resp.status_code != 200:
            raise LLMRequestError(f"status {resp.status_code}: {resp.text[:500]}")
        data = resp.json()
        if self.provider == "anthropic":
            return data["content"][0]["text"]
        return data["choices"][0]["message"]["content"]


class CachedLLMClient(LLMClient):
    """Disk cache in front of another client, keyed by the vocabulary hash
    embedded in the prompt (identical prompt implies identical vocabulary)."""

    def __init__(self, inner: LLMClient, cache_dir: str | Path):
        self.inner = inner
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)

    def complete(self, prompt: str) -> str:
        key = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
        path = self.cache_dir / f"{key}.txt"
        if path.exists():
            return path.read_text()
        response = self.inner.complete(prompt)
        path.write_text(response)
        return response


def generate_prior_table(
    labels: list[str], client: LLMClient, retries: int = 2
) -> PriorTable:
    """Query the model once for the whole vocabulary and assemble the table.

    Every input label ends up with exactly one record: rows that fail
    validation, and labels the response omitted, fall back to a generic
    0.3 m uncertain-orientation record and are flagged.
    """
    unique = dedupe_labels([l for l in labels if l.strip()])
    if not unique:
        raise EmptyVocabulary("prior generation needs at least one label")
    prompt = build_prompt(unique)

    records: list[PriorRecord] = []
    last_errors: list[str] = []
    for _ in range(retries + 1):
        response = client.complete(prompt)
        records, last_errors = _parse_rows(response)
        if records:
            break
    else:
        pass
    if not records:
        raise MalformedResponse(
            "no parseable rows after retries: " + "; ".join(last_errors[:5])
        )

    by_label = {}
    for record in records:
        by_label.setdefault(record.label, record)
    table = PriorTable()
    for label in unique:
        record = by_label.get(label)
        if record is None:
            table.add(PriorRecord.fallback(label), flagged=True)
        else:
            table.add(record)
    return table


def size_prior_estimate(record: PriorRecord, s_o: np.ndarray, p: float) -> np.ndarray:
    """Blended ascending size target: confidence-weighted mix of half the
    sorted typical dimensions and the sorted observed semi-axes."""
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"confidence must lie in [0, 1], got {p}")
    s_o = np.asarray(s_o, dtype=np.float64)
    if s_o.shape != (3,) or np.any(s_o <= 0.0):
        raise ValueError(f"observed semi-axes must be 3 positive values, got {s_o}")
    s_alpha = np.sort(record.dimensions()) / 2.0
    return p * s_alpha + (1.0 - p) * np.sort(s_o)


def minimal_rotation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smallest rotation taking unit vector a to unit vector b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    v = np.cross(a, b)
    s2 = float(v @ v)
    c = float(a @ b)
    if s2 < 1e-24:
        if c > 0.0:
            return np.eye(3)
        # Antipodal: rotate half a turn about any axis orthogonal to a.
        axis = np.cross(a, WORLD_UP)
        if np.linalg.norm(axis) < 1e-9:
            axis = np.cross(a, np.array([1.0, 0.0, 0.0]))
        axis = axis / np.linalg.norm(axis)
        K = np.array(
            [[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]]
        )
        return np.eye(3) + 2.0 * (K @ K)
    K = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    return np.eye(3) + K + K @ K * ((1.0 - c) / s2)


def gravity_plane_direction(r: np.ndarray, w_z: np.ndarray = WORLD_UP) -> np.ndarray:
    """Unit projection of r onto the plane orthogonal to w_z (Gram-Schmidt).

    Raises DegenerateAxis when r is within 1e-6 of parallel to w_z.
    """
    r = np.asarray(r, dtype=np.float64)
    p = r - (r @ w_z) * w_z
    n = np.linalg.norm(p)
    if n < 1e-6:
        raise DegenerateAxis("axis is parallel to gravity")
    return p / n


def _axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    K = np.array(
        [[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]]
    )
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def orientation_prior_rotation(
    cls: OrientationClass, R_q: np.ndarray, s_o: np.ndarray
) -> np.ndarray:
    """Target rotation for the orientation prior.

    vertical: minimal rotation aligning the longest semi-axis with +-gravity.
    horizontal: minimal rotation bringing the longest semi-axis into the
        ground plane (keeping its heading), then a roll about it so the
        axis closest to gravity aligns with +-gravity exactly.
    uncertain: gravity-aligned frame whose y-axis is the in-plane projection
        of the quadric axis most orthogonal to gravity; columns are
        (y cross gravity is x, projected axis is y, gravity is z).
    """
    R_q = np.asarray(R_q, dtype=np.float64)
    s_o = np.asarray(s_o, dtype=np.float64)
    if R_q.shape != (3, 3) or np.abs(R_q.T @ R_q - np.eye(3)).max() > 1e-8:
        raise ValueError("R_q must be a rotation matrix")
    if s_o.shape != (3,) or np.any(s_o <= 0.0):
        raise ValueError("semi-axes must be 3 positive values")
    cls = OrientationClass(cls)
    w_z = WORLD_UP

    if cls == OrientationClass.UNCERTAIN:
        dots = np.abs(R_q.T @ w_z)
        order = np.argsort(dots, kind="stable")
        r_hat = None
        for idx in order:
            col = R_q[:, idx]
            if np.linalg.norm(col - (col @ w_z) * w_z) >= 1e-6:
                r_hat = col
                break
        if r_hat is None:
            raise DegenerateAxis("all quadric axes are parallel to gravity")
        r_y = gravity_plane_direction(r_hat, w_z)
        r_x = np.cross(r_y, w_z)
        return np.column_stack([r_x, r_y, w_z])

    longest = int(np.argmax(s_o))
    a = R_q[:, longest]

    if cls == OrientationClass.VERTICAL:
        target = w_z if (a @ w_z) >= 0.0 else -w_z
        return minimal_rotation(a, target) @ R_q

    # HORIZONTAL: stage one drops the longest axis into the ground plane.
    try:
        heading = gravity_plane_direction(a, w_z)
    except DegenerateAxis:
        # Longest axis is vertical: borrow the heading of the most
        # ground-parallel axis instead.
        dots = np.abs(R_q.T @ w_z)
        fallback_idx = int(np.argsort(dots, kind="stable")[0])
        heading = gravity_plane_direction(R_q[:, fallback_idx], w_z)
    R1 = minimal_rotation(a, heading)
    F = R1 @ R_q
    others = [i for i in range(3) if i != longest]
    dots = [abs(float(F[:, i] @ w_z)) for i in others]
    c_idx = others[int(np.argmax(dots))]
    c = F[:, c_idx]
    target = w_z if (c @ w_z) >= 0.0 else -w_z
    # c and the target are both orthogonal to the in-plane heading, so the
    # correction is a roll about it.
    angle = float(np.arctan2(np.cross(c, target) @ heading, c @ target))
    R2 = _axis_angle(heading, angle)
    return R2 @ R1 @ R_q


def prior_covariances(
    s_hat: np.ndarray, config: PriorConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(rotation, translation, size) prior covariances for a size target."""
    s_hat = np.asarray(s_hat, dtype=np.float64)
    if s_hat.shape != (3,) or np.any(s_hat <= 0.0):
        raise ValueError(f"size target must be 3 positive values, got {s_hat}")
    if not isinstance(config, PriorConfig):
        config = PriorConfig(**config)
    sigma_theta = np.diag([config.kx**2, config.ky**2, config.kz**2])
    sigma_t = config.kt**2 * np.diag(s_hat**2)
    sigma_s = config.ks**2 * np.diag(s_hat**2)
    return sigma_theta, sigma_t, sigma_s
