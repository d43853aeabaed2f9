"""Retrieval metrics (mAP, CMC top-k) and detection metrics (recall, AP).

Protocol conventions, also embedded in every saved report:
  * a search result is a true positive iff its matched box has IoU >= the
    threshold with a ground-truth box of the query identity in that gallery
    image (each ground-truth box creditable once, one result per image);
  * per-query AP sums precision at each true positive's rank and divides by
    the number of gallery images containing the identity;
  * detection metrics use greedy one-to-one matching in descending detection
    score order, and detection AP is the area under the interpolated
    precision-recall curve;
  * a query is never evaluated against its own image;
  * equal similarities rank by gallery image load order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from .cbgm import map_ordered, rank_results
from .geometry import BBox, iou
from .similarity import Detection, Query, effective_score

if TYPE_CHECKING:
    from .cbgm import SearchResult


class ProtocolViolation(ValueError):
    """The evaluation protocol's preconditions do not hold for this input."""


PROTOCOL = {
    "true_positive": (
        "matched box has IoU >= iou_threshold with a ground-truth box of the "
        "query identity in that gallery image"
    ),
    "search_ap": (
        "sum of precision at each true positive's rank, divided by the number "
        "of gallery images containing the query identity"
    ),
    "detection_matching": (
        "greedy one-to-one by descending detection score at iou_threshold"
    ),
    "detection_ap": "area under the interpolated precision-recall curve",
    "self_image": "a query is never evaluated against its own image",
    "tie_break": "equal similarities rank by gallery image load order",
}


@dataclass(eq=False)
class GroundTruth:
    """Labeled annotation boxes per image plus the query book-keeping needed
    to score rankings. Built once per dataset; treated as immutable."""

    boxes_by_image: dict[str, list[tuple[BBox, str]]]
    image_order: dict[str, int]
    queries: list[Query]
    query_identities: list[str | None]
    _identity_images: dict[str, set[str]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        index: dict[str, set[str]] = {}
        for image_id, boxes in self.boxes_by_image.items():
            for _, identity in boxes:
                index.setdefault(identity, set()).add(image_id)
        self._identity_images = index

    def gallery_occurrences(self, identity: str, exclude_image: str | None = None) -> set[str]:
        """Gallery images containing `identity`, optionally minus one image."""
        images = set(self._identity_images.get(identity, ()))
        images.discard(exclude_image)
        return images


def _is_true_positive(
    result: "SearchResult", identity: str, gt: GroundTruth, iou_threshold: float
) -> bool:
    if result.matched is None:
        return False
    boxes = gt.boxes_by_image.get(result.image_id)
    if boxes is None:
        raise ProtocolViolation(f"result references unknown image {result.image_id!r}")
    return any(
        label == identity and iou(result.matched.box, box) >= iou_threshold
        for box, label in boxes
    )


def _query_hit_flags(
    query_index: int,
    results: Sequence["SearchResult"],
    gt: GroundTruth,
    iou_threshold: float,
) -> tuple[list[bool], int]:
    """Ranked true-positive flags for one query plus its occurrence count."""
    identity = gt.query_identities[query_index]
    query = gt.queries[query_index]
    if identity is None:
        raise ProtocolViolation(
            f"query {query_index} points at an unlabeled detection and cannot be scored"
        )
    occurrences = gt.gallery_occurrences(identity, exclude_image=query.image_id)
    if not occurrences:
        raise ProtocolViolation(
            f"identity {identity!r} of query {query_index} appears in no gallery image"
        )
    ranked = rank_results(results, gt.image_order, exclude_image=query.image_id)
    flags = [_is_true_positive(r, identity, gt, iou_threshold) for r in ranked]
    return flags, len(occurrences)


def _average_precision(flags: Sequence[bool], n_occurrences: int) -> float:
    hits = 0
    total = 0.0
    for rank, flag in enumerate(flags, start=1):
        if flag:
            hits += 1
            total += hits / rank
    return total / n_occurrences


def search_map(
    results_by_query: Sequence[Sequence["SearchResult"]],
    gt: GroundTruth,
    iou_threshold: float = 0.5,
    jobs: int = 1,
) -> tuple[list[float], float]:
    """Per-query average precision and its mean over all queries."""
    if len(results_by_query) != len(gt.queries):
        raise ProtocolViolation(
            f"{len(results_by_query)} result lists for {len(gt.queries)} queries"
        )

    def one(qi: int) -> float:
        flags, n_occ = _query_hit_flags(qi, results_by_query[qi], gt, iou_threshold)
        return _average_precision(flags, n_occ)

    per_query = map_ordered(one, range(len(gt.queries)), jobs=jobs)
    mean = float(np.mean(per_query)) if per_query else 0.0
    return per_query, mean


def cmc_topk(
    results_by_query: Sequence[Sequence["SearchResult"]],
    gt: GroundTruth,
    k_values: Sequence[int],
    iou_threshold: float = 0.5,
    jobs: int = 1,
) -> dict[int, float]:
    """Fraction of queries with a true positive among the top-k results, for
    each requested k."""
    ks = sorted(set(int(k) for k in k_values))
    if not ks or ks[0] < 1:
        raise ValueError("CMC k values must be positive integers")
    if len(results_by_query) != len(gt.queries):
        raise ProtocolViolation(
            f"{len(results_by_query)} result lists for {len(gt.queries)} queries"
        )

    def one(qi: int) -> list[bool]:
        flags, _ = _query_hit_flags(qi, results_by_query[qi], gt, iou_threshold)
        return [any(flags[:k]) for k in ks]

    hits = map_ordered(one, range(len(gt.queries)), jobs=jobs)
    if not hits:
        return {k: 0.0 for k in ks}
    return {k: float(np.mean([h[i] for h in hits])) for i, k in enumerate(ks)}


def detection_metrics(
    detections_by_image: Mapping[str, Sequence[Detection]],
    gt: GroundTruth,
    iou_threshold: float = 0.5,
) -> tuple[float, float]:
    """Detector quality against the labeled boxes: (recall, AP).

    Detections are pooled across images and matched greedily to ground-truth
    boxes in descending score order; each ground-truth box is consumed by at
    most one detection. Images absent from `detections_by_image` simply
    contribute misses; images absent from the ground truth are an error.
    """
    unknown = set(detections_by_image) - set(gt.boxes_by_image)
    if unknown:
        raise ProtocolViolation(
            f"detections reference images not in the ground truth: {sorted(unknown)[:5]}"
        )
    total_gt = sum(len(v) for v in gt.boxes_by_image.values())

    pooled = [
        (-effective_score(d), gt.image_order[image_id], di, image_id, d)
        for image_id, dets in detections_by_image.items()
        for di, d in enumerate(dets)
    ]
    pooled.sort(key=lambda t: t[:3])

    free: dict[str, list[bool]] = {
        image_id: [True] * len(boxes) for image_id, boxes in gt.boxes_by_image.items()
    }
    tp_flags: list[bool] = []
    matched = 0
    for _, _, _, image_id, det in pooled:
        boxes = gt.boxes_by_image[image_id]
        best_iou = 0.0
        best_gi = -1
        for gi, (box, _) in enumerate(boxes):
            if not free[image_id][gi]:
                continue
            overlap = iou(det.box, box)
            if overlap >= iou_threshold and overlap > best_iou:
                best_iou = overlap
                best_gi = gi
        if best_gi >= 0:
            free[image_id][best_gi] = False
            matched += 1
            tp_flags.append(True)
        else:
            tp_flags.append(False)

    recall = matched / total_gt if total_gt else 0.0
    if not tp_flags or total_gt == 0:
        return recall, 0.0

    tp_cum = np.cumsum(tp_flags, dtype=np.float64)
    ranks = np.arange(1, len(tp_flags) + 1, dtype=np.float64)
    precision = tp_cum / ranks
    recall_curve = tp_cum / total_gt
    # precision envelope: best precision achievable at this recall or beyond
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate(([0.0], recall_curve[:-1]))
    ap = float(np.sum((recall_curve - prev) * envelope))
    return recall, ap


@dataclass
class EvalReport:
    """Aggregate metrics for one evaluation run."""

    map: float
    cmc: dict[int, float]
    detection_recall: float
    detection_ap: float
    per_query_ap: list[float]

    def __post_init__(self) -> None:
        ks = sorted(self.cmc)
        values = [self.cmc[k] for k in ks]
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("CMC entries must lie in [0, 1]")
        if any(b < a for a, b in zip(values, values[1:])):
            raise ValueError("CMC must be non-decreasing in k")
        if self.per_query_ap:
            if abs(self.map - float(np.mean(self.per_query_ap))) > 1e-9:
                raise ValueError("map must equal the mean of per_query_ap")


def evaluate_search(
    dataset,
    results_by_query: Sequence[Sequence["SearchResult"]],
    iou_threshold: float = 0.5,
    cmc_ks: Sequence[int] = (1, 5, 10),
    jobs: int = 1,
) -> EvalReport:
    """Score per-query rankings against a dataset's ground truth."""
    gt = dataset.ground_truth
    per_query, mean_ap = search_map(results_by_query, gt, iou_threshold, jobs=jobs)
    cmc = cmc_topk(results_by_query, gt, cmc_ks, iou_threshold, jobs=jobs)
    det_recall, det_ap = detection_metrics(
        {img.image_id: img.detections for img in dataset.images}, gt, iou_threshold
    )
    return EvalReport(
        map=mean_ap,
        cmc=cmc,
        detection_recall=det_recall,
        detection_ap=det_ap,
        per_query_ap=per_query,
    )
