"""Dataset schema, ingestion, validation, and result persistence.

A dataset is a line-delimited JSON file with three record kinds:

  meta   {"kind": "meta", "embedding_dim": 256, "name": "..."}
         Optional; extra keys are preserved as free-form metadata. Without a
         meta record the embedding dimension is inferred from the data.
  image  {"kind": "image", "id": "img_0", "detections": [
             {"box": [x1, y1, x2, y2], "score_first": 0.98,
              "score_second": 0.71, "embedding": [...], "identity": "p12"}]}
         `identity` is null (or omitted) for distractor/background boxes. A
         detection with an identity label doubles as the ground-truth
         annotation for that person, so labeled boxes define the ground truth.
  query  {"kind": "query", "image_id": "img_0", "person_index": 0}

Boxes are corner coordinates with continuous (no +1) area semantics.
Loading can optionally apply non-maximum suppression per image, for ingesting
raw exports that were not already suppressed; ground truth is always derived
from the records as written, before any suppression.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

from .cbgm import SearchResult, rank_results
from .evaluation import PROTOCOL, EvalReport, GroundTruth, _is_true_positive
from .geometry import BBox, nms_indices
from .similarity import Detection, GalleryImage, Query

DATASET_FORMAT = "person-search-dataset/v1"
REPORT_FORMAT = "person-search-eval-report/v1"


class DatasetFormatError(ValueError):
    """A dataset or results file violates the record format or an invariant."""


@dataclass(eq=False)
class Dataset:
    """A validated, immutable collection of gallery images and queries."""

    images: list[GalleryImage]
    queries: list[Query]
    embedding_dim: int
    metadata: dict[str, Any] = field(default_factory=dict)
    ground_truth: GroundTruth | None = None

    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._index = {}
        for pos, img in enumerate(self.images):
            if img.image_id in self._index:
                raise DatasetFormatError(f"duplicate image id {img.image_id!r}")
            self._index[img.image_id] = pos
            for d in img.detections:
                if d.embedding.shape[0] != self.embedding_dim:
                    raise DatasetFormatError(
                        f"image {img.image_id!r}: embedding dimension "
                        f"{d.embedding.shape[0]} != declared {self.embedding_dim}"
                    )
        for q in self.queries:
            if q.image_id not in self._index:
                raise DatasetFormatError(f"query references unknown image {q.image_id!r}")
            n = len(self.image_by_id(q.image_id).detections)
            if not 0 <= q.person_index < n:
                raise DatasetFormatError(
                    f"query person_index {q.person_index} out of range for "
                    f"image {q.image_id!r} with {n} detections"
                )
        if self.ground_truth is None:
            self.ground_truth = derive_ground_truth(self.images, self.queries)

    @property
    def image_order(self) -> dict[str, int]:
        return self._index

    def image_by_id(self, image_id: str) -> GalleryImage:
        return self.images[self._index[image_id]]

    def query_detection(self, query: Query) -> Detection:
        return self.image_by_id(query.image_id).detections[query.person_index]


def derive_ground_truth(
    images: Sequence[GalleryImage], queries: Sequence[Query]
) -> GroundTruth:
    """Ground truth from labeled detections: every image gets an entry, every
    query its identity (None when it points at an unlabeled detection)."""
    boxes = {
        img.image_id: [
            (d.box, d.identity) for d in img.detections if d.identity is not None
        ]
        for img in images
    }
    order = {img.image_id: pos for pos, img in enumerate(images)}
    by_id = {img.image_id: img for img in images}
    identities = [
        by_id[q.image_id].detections[q.person_index].identity for q in queries
    ]
    return GroundTruth(
        boxes_by_image=boxes,
        image_order=order,
        queries=list(queries),
        query_identities=identities,
    )


def _require(record: dict, key: str, line_no: int):
    if key not in record:
        raise DatasetFormatError(f"line {line_no}: missing field {key!r}")
    return record[key]


def _parse_detection(obj: dict, line_no: int) -> Detection:
    if not isinstance(obj, dict):
        raise DatasetFormatError(f"line {line_no}: detection must be an object")
    box = _require(obj, "box", line_no)
    if not (isinstance(box, list) and len(box) == 4):
        raise DatasetFormatError(f"line {line_no}: box must be [x1, y1, x2, y2]")
    identity = obj.get("identity")
    if identity is not None and not isinstance(identity, str):
        raise DatasetFormatError(f"line {line_no}: identity must be a string or null")
    try:
        return Detection(
            box=BBox(*[float(v) for v in box]),
            score_first=float(_require(obj, "score_first", line_no)),
            score_second=float(_require(obj, "score_second", line_no)),
            embedding=_require(obj, "embedding", line_no),
            identity=identity,
        )
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(f"line {line_no}: {exc}") from exc


def _apply_ingestion_nms(
    detections: list[Detection],
    nms_first: float | None,
    nms_second: float | None,
) -> list[int]:
    """Kept original indices after the optional suppression passes, in file
    order (the filter never reorders records)."""
    kept = list(range(len(detections)))
    for threshold, score_of in (
        (nms_first, lambda d: d.score_first),
        (nms_second, lambda d: d.score_second),
    ):
        if threshold is None or not kept:
            continue
        boxes = [detections[i].box for i in kept]
        scores = [score_of(detections[i]) for i in kept]
        kept = sorted(kept[i] for i in nms_indices(boxes, scores, threshold))
    return kept


def load_dataset(
    path,
    nms_first: float | None = None,
    nms_second: float | None = None,
) -> Dataset:
    """Parse and validate a dataset file; every error names its line.

    When `nms_first`/`nms_second` are given, per-image NMS keyed by the first
    and/or second score filters the detections after parsing. Queries are
    remapped to the surviving detections; a query whose detection was
    suppressed is an error. Ground truth keeps the pre-suppression boxes.
    """
    raw_images: list[tuple[int, str, list[Detection]]] = []
    raw_queries: list[tuple[int, Query]] = []
    meta_dim: int | None = None
    metadata: dict[str, Any] = {}
    seen_ids: dict[str, int] = {}

    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise DatasetFormatError(f"line {line_no}: record must be a JSON object")
            kind = record.get("kind")
            if kind == "meta":
                dim = record.get("embedding_dim")
                if dim is not None:
                    if not isinstance(dim, int) or dim < 1:
                        raise DatasetFormatError(
                            f"line {line_no}: embedding_dim must be a positive integer"
                        )
                    meta_dim = dim
                metadata.update(
                    {k: v for k, v in record.items() if k not in ("kind", "embedding_dim")}
                )
            elif kind == "image":
                image_id = _require(record, "id", line_no)
                if not isinstance(image_id, str):
                    raise DatasetFormatError(f"line {line_no}: image id must be a string")
                if image_id in seen_ids:
                    raise DatasetFormatError(
                        f"line {line_no}: duplicate image id {image_id!r} "
                        f"(first seen on line {seen_ids[image_id]})"
                    )
                seen_ids[image_id] = line_no
                dets_field = _require(record, "detections", line_no)
                if not isinstance(dets_field, list):
                    raise DatasetFormatError(f"line {line_no}: detections must be a list")
                dets = [_parse_detection(obj, line_no) for obj in dets_field]
                raw_images.append((line_no, image_id, dets))
            elif kind == "query":
                image_id = _require(record, "image_id", line_no)
                person_index = _require(record, "person_index", line_no)
                if not isinstance(person_index, int):
                    raise DatasetFormatError(f"line {line_no}: person_index must be an integer")
                raw_queries.append((line_no, Query(image_id, person_index)))
            else:
                raise DatasetFormatError(f"line {line_no}: unknown record kind {kind!r}")

    dims = {d.embedding.shape[0] for _, _, dets in raw_images for d in dets}
    embedding_dim = meta_dim if meta_dim is not None else (sorted(dims)[0] if dims else 256)
    for line_no, image_id, dets in raw_images:
        for d in dets:
            if d.embedding.shape[0] != embedding_dim:
                raise DatasetFormatError(
                    f"line {line_no}: image {image_id!r} has an embedding of "
                    f"dimension {d.embedding.shape[0]}, expected {embedding_dim}"
                )

    image_pos = {image_id: i for i, (_, image_id, _) in enumerate(raw_images)}
    for line_no, q in raw_queries:
        if q.image_id not in image_pos:
            raise DatasetFormatError(
                f"line {line_no}: query references unknown image {q.image_id!r}"
            )
        n = len(raw_images[image_pos[q.image_id]][2])
        if not 0 <= q.person_index < n:
            raise DatasetFormatError(
                f"line {line_no}: query person_index {q.person_index} out of "
                f"range for image {q.image_id!r} with {n} detections"
            )

    pre_nms = [GalleryImage(image_id, dets) for _, image_id, dets in raw_images]
    gt = derive_ground_truth(pre_nms, [q for _, q in raw_queries])

    if nms_first is None and nms_second is None:
        images = pre_nms
        queries = [q for _, q in raw_queries]
    else:
        images = []
        kept_map: dict[str, dict[int, int]] = {}
        for _, image_id, dets in raw_images:
            kept = _apply_ingestion_nms(dets, nms_first, nms_second)
            kept_map[image_id] = {orig: new for new, orig in enumerate(kept)}
            images.append(GalleryImage(image_id, [dets[i] for i in kept]))
        queries = []
        for line_no, q in raw_queries:
            remap = kept_map[q.image_id]
            if q.person_index not in remap:
                raise DatasetFormatError(
                    f"line {line_no}: query detection {q.person_index} of image "
                    f"{q.image_id!r} was suppressed by ingestion NMS"
                )
            queries.append(Query(q.image_id, remap[q.person_index]))
        gt = GroundTruth(
            boxes_by_image=gt.boxes_by_image,
            image_order=gt.image_order,
            queries=queries,
            query_identities=[
                pre_nms[image_pos[q.image_id]].detections[orig.person_index].identity
                for (_, orig), q in zip(raw_queries, queries)
            ],
        )

    return Dataset(
        images=images,
        queries=queries,
        embedding_dim=embedding_dim,
        metadata=metadata,
        ground_truth=gt,
    )


def _dump(obj: dict) -> str:
    return json.dumps(obj, separators=(", ", ": "))


def save_dataset(dataset: Dataset, path) -> None:
    """Write a dataset in canonical record and field order (byte-stable)."""
    with open(path, "w", encoding="utf-8") as fh:
        meta: dict[str, Any] = {"kind": "meta", "embedding_dim": dataset.embedding_dim}
        for key in sorted(dataset.metadata):
            meta[key] = dataset.metadata[key]
        fh.write(_dump(meta) + "\n")
        for img in dataset.images:
            record = {
                "kind": "image",
                "id": img.image_id,
                "detections": [
                    {
                        "box": d.box.as_list(),
                        "score_first": float(d.score_first),
                        "score_second": float(d.score_second),
                        "embedding": [float(v) for v in d.embedding],
                        "identity": d.identity,
                    }
                    for d in img.detections
                ],
            }
            fh.write(_dump(record) + "\n")
        for q in dataset.queries:
            fh.write(
                _dump({"kind": "query", "image_id": q.image_id, "person_index": q.person_index})
                + "\n"
            )


def save_search_results(
    path,
    results_by_query: Sequence[Sequence[SearchResult]],
    dataset: Dataset,
    meta: dict[str, Any] | None = None,
) -> None:
    """Write per-query ranked results as JSON lines (byte-stable).

    Ranking entries are [image_id, matched_index, similarity, revised].
    """
    header: dict[str, Any] = {"kind": "search_meta"}
    for key, value in (meta or {}).items():
        header[key] = value
    header["images_without_candidates"] = [
        img.image_id for img in dataset.images if not img.detections
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dump(header) + "\n")
        for qi, (query, results) in enumerate(zip(dataset.queries, results_by_query)):
            record = {
                "kind": "search_result",
                "query_index": qi,
                "image_id": query.image_id,
                "person_index": query.person_index,
                "ranking": [
                    [r.image_id, r.matched_index, r.similarity, r.revised]
                    for r in results
                ],
            }
            fh.write(_dump(record) + "\n")


def load_search_results(
    path, dataset: Dataset
) -> tuple[dict[str, Any], list[list[SearchResult]]]:
    """Read a search results file back, resolving matched detections against
    `dataset`. Returns (meta, per-query result lists)."""
    meta: dict[str, Any] = {}
    results_by_query: dict[int, list[SearchResult]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
            kind = record.get("kind")
            if kind == "search_meta":
                meta = {k: v for k, v in record.items() if k != "kind"}
            elif kind == "search_result":
                qi = _require(record, "query_index", line_no)
                if not isinstance(qi, int) or not 0 <= qi < len(dataset.queries):
                    raise DatasetFormatError(f"line {line_no}: bad query_index {qi!r}")
                query = dataset.queries[qi]
                if (record.get("image_id"), record.get("person_index")) != (
                    query.image_id,
                    query.person_index,
                ):
                    raise DatasetFormatError(
                        f"line {line_no}: query_index {qi} does not match the "
                        f"dataset's query list"
                    )
                ranked: list[SearchResult] = []
                for entry in _require(record, "ranking", line_no):
                    try:
                        image_id, matched_index, similarity, revised = entry
                        img = dataset.image_by_id(image_id)
                        matched = img.detections[matched_index]
                    except (TypeError, ValueError, KeyError, IndexError) as exc:
                        raise DatasetFormatError(
                            f"line {line_no}: bad ranking entry {entry!r}"
                        ) from exc
                    ranked.append(
                        SearchResult(
                            image_id=image_id,
                            matched=matched,
                            matched_index=matched_index,
                            similarity=float(similarity),
                            revised=bool(revised),
                        )
                    )
                if qi in results_by_query:
                    raise DatasetFormatError(f"line {line_no}: duplicate query_index {qi}")
                results_by_query[qi] = ranked
            else:
                raise DatasetFormatError(f"line {line_no}: unknown record kind {kind!r}")
    missing = set(range(len(dataset.queries))) - set(results_by_query)
    if missing:
        raise DatasetFormatError(f"results missing for query indices {sorted(missing)[:5]}")
    return meta, [results_by_query[i] for i in range(len(dataset.queries))]


def save_results(
    report: EvalReport,
    results_by_query: Sequence[Sequence[SearchResult]],
    dataset: Dataset,
    path,
    iou_threshold: float = 0.5,
    meta: dict[str, Any] | None = None,
) -> None:
    """Write an evaluation report: a protocol/metrics header plus the ranked
    per-query results with correctness flags. Byte-stable for equal inputs."""
    gt = dataset.ground_truth
    per_query = []
    for qi, (query, results) in enumerate(zip(dataset.queries, results_by_query)):
        identity = gt.query_identities[qi]
        ranked = rank_results(results, gt.image_order, exclude_image=query.image_id)
        per_query.append(
            {
                "query_index": qi,
                "image_id": query.image_id,
                "person_index": query.person_index,
                "identity": identity,
                "ap": report.per_query_ap[qi] if qi < len(report.per_query_ap) else None,
                "ranking": [
                    {
                        "image_id": r.image_id,
                        "matched_index": r.matched_index,
                        "similarity": r.similarity,
                        "revised": r.revised,
                        "correct": _is_true_positive(r, identity, gt, iou_threshold),
                    }
                    for r in ranked
                ],
            }
        )
    doc = {
        "format": REPORT_FORMAT,
        "meta": dict(meta or {}),
        "protocol": {**PROTOCOL, "iou_threshold": iou_threshold, "cmc_k": sorted(report.cmc)},
        "metrics": {
            "map": report.map,
            "cmc": {str(k): report.cmc[k] for k in sorted(report.cmc)},
            "detection_recall": report.detection_recall,
            "detection_ap": report.detection_ap,
        },
        "per_query": per_query,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, indent=2) + "\n")


def load_results(path) -> dict[str, Any]:
    """Parse a saved evaluation report document."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != REPORT_FORMAT:
        raise DatasetFormatError(f"not an evaluation report: {doc.get('format')!r}")
    return doc


def report_from_file(path) -> EvalReport:
    """Rebuild the EvalReport dataclass from a saved report document."""
    doc = load_results(path)
    metrics = doc["metrics"]
    return EvalReport(
        map=float(metrics["map"]),
        cmc={int(k): float(v) for k, v in metrics["cmc"].items()},
        detection_recall=float(metrics["detection_recall"]),
        detection_ap=float(metrics["detection_ap"]),
        per_query_ap=[float(q["ap"]) for q in doc["per_query"]],
    )
