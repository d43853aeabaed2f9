"""Context bipartite graph matching (CBGM) search over gallery images.

The single-point baseline answers each gallery image with the person most
similar to the query. CBGM re-ranks the `k1` most promising gallery images by
matching the query-image people (the query plus up to `k2 - 1` of its
highest-confidence neighbours) against all people of the gallery image with a
maximum-weight bipartite matching; the query's partner in that matching
becomes the answer.

The similarity reported for a re-ranked image is the matching's confidence,
i.e. the largest edge weight in the whole matching. That edge may belong to a
context person rather than the query, so the reported value can exceed the
query's own similarity to its matched partner; this is deliberate, since a
confidently matched neighbour is evidence that the scene is the right one.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Iterable, Sequence

import numpy as np

from .assignment import km_max_weight
from .similarity import Detection, GalleryImage, effective_score, person_similarities

if TYPE_CHECKING:
    from .dataio import Dataset


@dataclass(frozen=True)
class CbgmParams:
    """Re-ranking knobs: `k1` gallery images get the context treatment, using
    at most `k2` query-image people (the query person is always one of them)."""

    k1: int = 10
    k2: int = 3

    def __post_init__(self) -> None:
        if self.k1 < 0:
            raise ValueError(f"k1 must be >= 0, got {self.k1}")
        if self.k2 < 1:
            raise ValueError(f"k2 must be >= 1, got {self.k2}")


@dataclass
class SearchResult:
    """Answer for one (query, gallery image) pair.

    `matched`/`matched_index`/`similarity` are None for a gallery image with
    no detections ("no candidates"); such results are excluded from ranking.
    `revised` is True when context matching changed the single-point answer.
    """

    image_id: str
    matched: Detection | None
    matched_index: int | None
    similarity: float | None
    revised: bool = False

    @property
    def has_candidates(self) -> bool:
        return self.matched is not None


def map_ordered(fn: Callable, items: Iterable, jobs: int = 1) -> list:
    """Apply `fn` over `items`, optionally in a thread pool, preserving order.

    Results are identical for every `jobs` value as long as `fn` is pure.
    """
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _baseline_result(q: Detection, g: GalleryImage) -> SearchResult:
    if not g.detections:
        return SearchResult(g.image_id, None, None, None)
    sims = person_similarities(q, g)
    j = int(np.argmax(sims))
    return SearchResult(g.image_id, g.detections[j], j, float(sims[j]))


def single_point_search(
    query_image: GalleryImage, q_index: int, galleries: Sequence[GalleryImage]
) -> list[SearchResult]:
    """Single-point baseline over every gallery image, in input order."""
    q = _query_person(query_image, q_index)
    return [_baseline_result(q, g) for g in galleries]


def _query_person(query_image: GalleryImage, q_index: int) -> Detection:
    if not query_image.detections:
        raise ValueError(f"query image {query_image.image_id!r} has no detections")
    if not 0 <= q_index < len(query_image.detections):
        raise ValueError(
            f"query index {q_index} out of range for image {query_image.image_id!r}"
        )
    return query_image.detections[q_index]


def _context_set(query_image: GalleryImage, q_index: int, k2: int) -> list[Detection]:
    """The query person plus the top-(k2 - 1) other detections of the query
    image by detection confidence; the query is always included."""
    others = [i for i in range(len(query_image.detections)) if i != q_index]
    others.sort(key=lambda i: -effective_score(query_image.detections[i]))
    chosen = others[: k2 - 1]
    return [query_image.detections[q_index]] + [query_image.detections[i] for i in chosen]


def _context_match(
    qside: list[Detection], g: GalleryImage, baseline: SearchResult
) -> SearchResult | None:
    """Solve the query-side vs gallery-image matching; None means the query
    person lost out to padding (gallery smaller than the context set) and the
    caller should keep the baseline answer."""
    w = np.vstack([person_similarities(v, g) for v in qside])
    m = km_max_weight(w)
    match_col = next((j for i, j in m.edges if i == 0), None)
    if match_col is None:
        return None
    sim = m.confidence
    revised = match_col != baseline.matched_index or sim != baseline.similarity
    return SearchResult(g.image_id, g.detections[match_col], match_col, sim, revised)


def cbgm_search(
    query_image: GalleryImage,
    q_index: int,
    galleries: Sequence[GalleryImage],
    params: CbgmParams,
) -> list[SearchResult]:
    """Context bipartite graph matching search, one result per gallery image.

    Steps:
      1. Compute the single-point baseline for every gallery image.
      2. Rank gallery images by their baseline similarity and select the
         top-k1 (ties keep input order; empty images are never selected).
      3. Build the query-side context set (query person first, then up to
         k2 - 1 neighbours by detection confidence).
      4. For each selected image, solve the maximum-weight matching between
         the context set and the image's people; the query's partner becomes
         the matched person and the matching confidence the similarity.
      5. Every other gallery image keeps its baseline result.
    """
    q = _query_person(query_image, q_index)
    results = [_baseline_result(q, g) for g in galleries]
    if params.k1 == 0:
        return results

    candidates = [idx for idx, r in enumerate(results) if r.has_candidates]
    if not candidates:
        return results
    sims = np.array([results[idx].similarity for idx in candidates], dtype=np.float64)
    order = np.argsort(-sims, kind="stable")
    selected = [candidates[int(t)] for t in order[: params.k1]]

    qside = _context_set(query_image, q_index, params.k2)
    for idx in selected:
        revised = _context_match(qside, galleries[idx], results[idx])
        if revised is not None:
            results[idx] = revised
    return results


def rank_results(
    results: Iterable[SearchResult],
    image_order: dict[str, int],
    exclude_image: str | None = None,
) -> list[SearchResult]:
    """Sort results by descending similarity; ties break by gallery image load
    order. Drops "no candidates" results and the excluded (query's own) image."""
    real = [
        r
        for r in results
        if r.has_candidates and r.image_id != exclude_image
    ]
    return sorted(real, key=lambda r: (-r.similarity, image_order[r.image_id]))


def run_search(
    dataset: "Dataset",
    mode: str = "cbgm",
    params: CbgmParams | None = None,
    jobs: int = 1,
) -> list[list[SearchResult]]:
    """Run every dataset query against all other gallery images.

    Returns one ranked result list per query (the query's own image excluded).
    Output is deterministic and independent of `jobs`.
    """
    if mode not in ("baseline", "cbgm"):
        raise ValueError(f"unknown search mode {mode!r}")
    params = params or CbgmParams()
    image_order = dataset.image_order

    def one(query) -> list[SearchResult]:
        qimg = dataset.image_by_id(query.image_id)
        galleries = [g for g in dataset.images if g.image_id != query.image_id]
        if mode == "baseline":
            res = single_point_search(qimg, query.person_index, galleries)
        else:
            res = cbgm_search(qimg, query.person_index, galleries, params)
        return rank_results(res, image_order)

    return map_ordered(one, dataset.queries, jobs=jobs)


SWEEP_PRESETS = {(10, 3): "small-gallery-default", (30, 4): "large-gallery-default"}


def sweep(
    dataset: "Dataset",
    k1_values: Sequence[int],
    k2_values: Sequence[int],
    iou_threshold: float = 0.5,
    jobs: int = 1,
) -> list[dict]:
    """Evaluate every (k1, k2) cell of the grid with metric (mAP + top-1) / 2.

    Returns the cells sorted by descending metric (ties by k1 then k2); every
    cell achieving the maximum carries `best: True`, and the recommended
    small/large-gallery presets are labelled when present.
    """
    from .evaluation import evaluate_search

    if not k1_values or not k2_values:
        raise ValueError("sweep grid must contain at least one k1 and one k2 value")
    cells: list[dict] = []
    for k1 in k1_values:
        for k2 in k2_values:
            results = run_search(dataset, mode="cbgm", params=CbgmParams(k1, k2), jobs=jobs)
            report = evaluate_search(
                dataset, results, iou_threshold=iou_threshold, cmc_ks=(1,), jobs=jobs
            )
            top1 = report.cmc[1]
            cells.append(
                {
                    "k1": int(k1),
                    "k2": int(k2),
                    "map": report.map,
                    "top1": top1,
                    "metric": (report.map + top1) / 2.0,
                    "preset": SWEEP_PRESETS.get((k1, k2)),
                }
            )
    best = max(c["metric"] for c in cells)
    for c in cells:
        c["best"] = c["metric"] == best
    cells.sort(key=lambda c: (-c["metric"], c["k1"], c["k2"]))
    return cells
