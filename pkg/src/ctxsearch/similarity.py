"""Embedding similarity and the single-point matching baseline.

A query person is compared to a gallery image through cosine similarity of
appearance embeddings; the image-level similarity is the best per-person
similarity, and the baseline answer for an image is the person achieving it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .geometry import BBox


class NoCandidatesError(ValueError):
    """Raised when an operation requires a gallery image with detections."""


def _as_embedding(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("embedding must be a non-empty 1-D vector")
    if not np.all(np.isfinite(arr)):
        raise ValueError("embedding components must be finite")
    if np.linalg.norm(arr) == 0.0:
        raise ValueError("embedding must be a non-zero vector")
    return arr


@dataclass(eq=False)
class Detection:
    """One detected person: box, the two head scores, embedding, and the
    ground-truth identity when known (None for distractor/background boxes)."""

    box: BBox
    score_first: float
    score_second: float
    embedding: np.ndarray
    identity: str | None = None

    def __post_init__(self) -> None:
        self.embedding = _as_embedding(self.embedding)
        for name in ("score_first", "score_second"):
            s = getattr(self, name)
            if not isinstance(s, (int, float)) or not math.isfinite(s) or not 0.0 <= s <= 1.0:
                raise ValueError(f"Detection.{name} must be in [0, 1], got {s!r}")

    @cached_property
    def unit_embedding(self) -> np.ndarray:
        u = self.embedding / np.linalg.norm(self.embedding)
        u.flags.writeable = False
        return u


@dataclass(eq=False)
class GalleryImage:
    """An image's full set of detections. Treated as immutable once built."""

    image_id: str
    detections: list[Detection]

    @cached_property
    def unit_matrix(self) -> np.ndarray:
        """(n, D) matrix of L2-normalized detection embeddings."""
        if not self.detections:
            return np.zeros((0, 0), dtype=np.float64)
        return np.stack([d.unit_embedding for d in self.detections])


@dataclass(frozen=True)
class Query:
    """A query person addressed as (image_id, index into that image's detections)."""

    image_id: str
    person_index: int


def cosine_sim(p1, p2) -> float:
    """Cosine similarity between two embedding vectors, clamped into [-1, 1].

    Computed as sign(dot) * sqrt(dot^2 / (|p1|^2 |p2|^2)) so that identical
    inputs return exactly 1.0.
    """
    a = np.asarray(p1, dtype=np.float64)
    b = np.asarray(p2, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"embedding dimension mismatch: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("embedding components must be finite")
    dot = float(np.dot(a, b))
    na2 = float(np.dot(a, a))
    nb2 = float(np.dot(b, b))
    if na2 == 0.0 or nb2 == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    ratio = min(1.0, (dot * dot) / (na2 * nb2))
    return math.copysign(math.sqrt(ratio), dot)


def person_similarities(q: Detection, g: GalleryImage) -> np.ndarray:
    """Cosine similarity between `q` and every detection of `g`, in order."""
    if not g.detections:
        raise NoCandidatesError(f"gallery image {g.image_id!r} has no candidates")
    sims = g.unit_matrix @ q.unit_embedding
    return np.clip(sims, -1.0, 1.0)


def image_similarity(q: Detection, g: GalleryImage) -> float:
    """Similarity between a query person and a whole gallery image: the maximum
    cosine similarity over the image's detections."""
    return float(person_similarities(q, g).max())


def effective_score(d: Detection) -> float:
    """Detection confidence used everywhere downstream.

    The first head's classification score is the reliable one, so this is a
    plain field selection; the second score is never consulted.
    """
    return float(d.score_first)


def single_point_top1(q: Detection, g: GalleryImage) -> tuple[Detection, float]:
    """Baseline answer for one gallery image: the most similar person and its
    similarity. Ties break toward the lowest detection index."""
    sims = person_similarities(q, g)
    j = int(np.argmax(sims))
    return g.detections[j], float(sims[j])
