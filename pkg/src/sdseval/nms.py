"""Greedy region non-maximum suppression and the per-category detection cap."""
from __future__ import annotations

from typing import Sequence

from sdseval.dataset import Detection
from sdseval.masks import box_iou, intersection_area, overlap


def rank_key(det: Detection, index: int):
    """Descending score, then ascending source candidate id, then input position."""
    cid = det.source_candidate_id
    return (-det.score, cid is None, cid if cid is not None else 0, index)


def ranked(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: rank_key(dets[i], i))


def _suppresses(a: Detection, b: Detection, threshold: float, mode: str) -> bool:
    if mode == "box":
        return box_iou(a.box, b.box) > threshold
    if threshold <= 0:
        return intersection_area(a.mask, b.mask) > 0
    return overlap(a.mask, b.mask) > threshold


def region_nms(dets: Sequence[Detection], overlap_threshold: float = 0.0, mode: str = "region") -> list[Detection]:
    """Keep a detection iff its overlap with every kept higher-ranked one is <= threshold.

    Intended for detections of one image and one category; with threshold 0 in
    region mode any shared pixel suppresses.
    """
    if mode not in ("region", "box"):
        raise ValueError(f"mode must be region or box, not {mode!r}")
    kept: list[Detection] = []
    for i in ranked(dets):
        d = dets[i]
        if all(d.image_id != k.image_id or not _suppresses(d, k, overlap_threshold, mode) for k in kept):
            kept.append(d)
    return kept


def nms_per_image_category(
    dets: Sequence[Detection], overlap_threshold: float = 0.0, mode: str = "region"
) -> list[Detection]:
    groups: dict[tuple[str, int], list[Detection]] = {}
    for d in dets:
        groups.setdefault((d.image_id, d.category_id), []).append(d)
    out = []
    for key in groups:
        out.extend(region_nms(groups[key], overlap_threshold, mode))
    return out


def cap_top_k(dets: Sequence[Detection], k: int = 20000) -> list[Detection]:
    """The ``k`` highest-scoring detections (earlier input wins ties), in input order."""
    if k < 0:
        raise ValueError("k must be non-negative")
    if len(dets) <= k:
        return list(dets)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    keep = sorted(order[:k])
    return [dets[i] for i in keep]
