"""Detection/ground-truth matching, precision-recall, AP^r, AP^b, volumes and pixel IU."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from sdseval.dataset import BoxDetection, Candidate, Detection, GroundTruthInstance
from sdseval.masks import BinaryMask, bbox, box_iou, overlap, pixel_precision, pixel_recall, rle_decode
from sdseval.nms import ranked

VOL_THRESHOLDS = tuple(k / 10 for k in range(1, 10))
UPPER_BOUND_BOX_OVERLAP = 0.7


def _box_similarity(d: BinaryMask, g: BinaryMask) -> float:
    return box_iou(bbox(d), bbox(g))


SIMILARITY: dict[str, Callable[[BinaryMask, BinaryMask], float]] = {
    "region": overlap,
    "box": _box_similarity,
    "precision": pixel_precision,
    "recall": pixel_recall,
}


@dataclass
class MatchResult:
    """Per-detection outcome, aligned with the input detection list."""

    tp: np.ndarray
    matched: list[Optional[tuple[str, int]]]
    overlaps: np.ndarray
    order: list[int]
    scores: np.ndarray
    num_gt: int

    @property
    def num_tp(self) -> int:
        return int(self.tp.sum())


@dataclass
class PRCurve:
    scores: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    ap: float


def pairwise_similarity(
    dets: Sequence[Detection], gts: Sequence[GroundTruthInstance], kind: str = "region"
) -> list[list[tuple[int, float]]]:
    """For each detection, ``(gt index, similarity)`` for every same-image ground truth."""
    sim = SIMILARITY[kind]
    by_image: dict[str, list[int]] = {}
    for j, g in enumerate(gts):
        by_image.setdefault(g.image_id, []).append(j)
    return [[(j, sim(d.mask, gts[j].mask)) for j in by_image.get(d.image_id, ())] for d in dets]


def match(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthInstance],
    threshold: float = 0.5,
    kind: str = "region",
    pairs: Optional[list[list[tuple[int, float]]]] = None,
) -> MatchResult:
    """Greedy matching in rank order against still-unmatched ground truth.

    A detection takes the available same-image instance of maximum similarity
    (ties to the lower instance id) when that similarity exceeds ``threshold``;
    otherwise, including every later duplicate, it is a false positive.
    """
    if pairs is None:
        pairs = pairwise_similarity(dets, gts, kind)
    order = ranked(dets)
    tp = np.zeros(len(dets), dtype=bool)
    ov = np.zeros(len(dets))
    matched: list[Optional[tuple[str, int]]] = [None] * len(dets)
    taken = np.zeros(len(gts), dtype=bool)
    for i in order:
        best_j, best_v = -1, -np.inf
        for j, v in pairs[i]:
            if taken[j]:
                continue
            if v > best_v or (v == best_v and gts[j].instance_id < gts[best_j].instance_id):
                best_j, best_v = j, v
        if best_j >= 0:
            ov[i] = best_v
            if best_v > threshold:
                tp[i] = True
                taken[best_j] = True
                matched[i] = (gts[best_j].image_id, gts[best_j].instance_id)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    return MatchResult(tp, matched, ov, order, scores, len(gts))


def pr_and_ap(result: MatchResult) -> PRCurve:
    """Ranked precision/recall and the all-points interpolated AP.

    AP is the area under the monotone precision envelope; since recall steps by
    ``1/num_gt`` at each true positive, it equals the mean envelope precision
    over true-positive ranks divided by the recall denominator.
    """
    if result.num_gt < 1:
        raise ValueError("AP is undefined without ground truth")
    tp_ranked = result.tp[result.order].astype(np.float64)
    cum_tp = np.cumsum(tp_ranked)
    ranks = np.arange(1, len(tp_ranked) + 1)
    precision = cum_tp / ranks if len(ranks) else np.zeros(0)
    recall = cum_tp / result.num_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    ap = float(envelope[tp_ranked == 1].sum() / result.num_gt)
    return PRCurve(result.scores[result.order], precision, recall, ap)


@dataclass
class EvalReport:
    kind: str
    thresholds: tuple[float, ...]
    ap: dict[int, dict[float, float]]
    num_gt: dict[int, int]
    num_dets: dict[int, int]
    matches: dict[tuple[int, float], MatchResult] = field(default_factory=dict, repr=False)
    curves: dict[tuple[int, float], PRCurve] = field(default_factory=dict, repr=False)
    detections: dict[int, list[Detection]] = field(default_factory=dict, repr=False)

    @property
    def categories(self) -> list[int]:
        return sorted(self.ap)

    def mean_ap(self, threshold: float) -> float:
        if not self.ap:
            return 0.0
        return float(np.mean([self.ap[c][threshold] for c in self.categories]))

    def ap_vol(self, category: int) -> float:
        return float(np.mean([self.ap[category][t] for t in self.thresholds]))

    @property
    def mean_ap_vol(self) -> float:
        if not self.ap:
            return 0.0
        return float(np.mean([self.ap_vol(c) for c in self.categories]))


def _split_by_category(items, categories):
    out = {c: [] for c in categories}
    for it in items:
        if it.category_id in out:
            out[it.category_id].append(it)
    return out


def evaluate(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthInstance],
    thresholds: Sequence[float] = (0.5,),
    kind: str = "region",
) -> EvalReport:
    """Per-category AP at each threshold; categories are those present in ``gts``."""
    thresholds = tuple(float(t) for t in thresholds)
    categories = sorted({g.category_id for g in gts})
    dets_by_cat = _split_by_category(dets, categories)
    gts_by_cat = _split_by_category(gts, categories)
    report = EvalReport(kind, thresholds, {}, {}, {})
    for c in categories:
        cd, cg = dets_by_cat[c], gts_by_cat[c]
        pairs = pairwise_similarity(cd, cg, kind)
        report.ap[c] = {}
        report.num_gt[c] = len(cg)
        report.num_dets[c] = len(cd)
        report.detections[c] = cd
        for t in thresholds:
            m = match(cd, cg, t, kind, pairs)
            curve = pr_and_ap(m)
            report.matches[(c, t)] = m
            report.curves[(c, t)] = curve
            report.ap[c][t] = curve.ap
    return report


def ap_r(dets, gts, threshold: float = 0.5) -> EvalReport:
    return evaluate(dets, gts, (threshold,), "region")


def ap_b(dets, gts, threshold: float = 0.5) -> EvalReport:
    return evaluate(dets, gts, (threshold,), "box")


def ap_vol(dets, gts, kind: str = "region") -> EvalReport:
    """AP averaged over overlap thresholds 0.1, 0.2, ..., 0.9."""
    return evaluate(dets, gts, VOL_THRESHOLDS, kind)


# --- pixel IU ------------------------------------------------------------------------


@dataclass
class PixelIUResult:
    iu: dict[int, float]
    intersection: dict[int, int]
    union: dict[int, int]
    gt_categories: list[int]

    @property
    def mean(self) -> float:
        if not self.gt_categories:
            return 0.0
        return float(np.mean([self.iu[c] for c in self.gt_categories]))


def paste(dets: Sequence[Detection], width: int, height: int) -> np.ndarray:
    """Label map with higher-ranked detections painted over lower ones; 0 is background."""
    labels = np.zeros((height, width), dtype=np.int64)
    for i in reversed(ranked(dets)):
        labels[rle_decode(dets[i].mask)] = dets[i].category_id
    return labels


def paste_and_pixel_iu(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthInstance],
    image_sizes: Mapping[str, tuple[int, int]],
    score_thresholds: Optional[Mapping[int, float]] = None,
    images: Optional[Sequence[str]] = None,
) -> PixelIUResult:
    """Dataset-wide per-category IU of pasted detections against ground truth.

    Detections scoring below their category's threshold are dropped first.
    ``images`` restricts the evaluation to a subset of images.
    """
    score_thresholds = score_thresholds or {}
    if images is None:
        images = sorted(image_sizes)
    image_set = set(images)
    dets_by_image: dict[str, list[Detection]] = {}
    for d in dets:
        if d.image_id in image_set and d.score >= score_thresholds.get(d.category_id, -np.inf):
            dets_by_image.setdefault(d.image_id, []).append(d)
    gts_by_image: dict[str, list[GroundTruthInstance]] = {}
    for g in gts:
        if g.image_id in image_set:
            gts_by_image.setdefault(g.image_id, []).append(g)

    inter: dict[int, int] = {}
    uni: dict[int, int] = {}
    for image_id in sorted(image_set):
        width, height = image_sizes[image_id]
        pred = paste(dets_by_image.get(image_id, []), width, height)
        truth = np.zeros((height, width), dtype=np.int64)
        for g in gts_by_image.get(image_id, []):
            truth[rle_decode(g.mask)] = g.category_id
        for c in np.union1d(np.unique(pred), np.unique(truth)):
            c = int(c)
            if c == 0:
                continue
            p, t = pred == c, truth == c
            inter[c] = inter.get(c, 0) + int(np.count_nonzero(p & t))
            uni[c] = uni.get(c, 0) + int(np.count_nonzero(p | t))
    gt_categories = sorted({g.category_id for g in gts if g.image_id in image_set})
    for c in gt_categories:
        inter.setdefault(c, 0)
        uni.setdefault(c, 0)
    iu = {c: (inter[c] / uni[c] if uni[c] else 0.0) for c in sorted(uni)}
    return PixelIUResult(iu, inter, uni, gt_categories)


def cross_validate_paste_thresholds(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthInstance],
    image_sizes: Mapping[str, tuple[int, int]],
    images: Sequence[str],
    quantiles: Sequence[float] = tuple(k / 10 for k in range(10)),
) -> dict[int, float]:
    """Per-category score thresholds maximising mean IU on ``images``.

    One coordinate-ascent pass over categories in id order; each category's
    candidates are ``-inf`` and the given quantiles of its detection scores.
    """
    categories = sorted({d.category_id for d in dets})
    chosen: dict[int, float] = {}
    for c in categories:
        scores = np.array([d.score for d in dets if d.category_id == c])
        grid = [-np.inf] + sorted(set(np.quantile(scores, quantiles).tolist()))
        best_t, best_iu = -np.inf, -1.0
        for t in grid:
            mean = paste_and_pixel_iu(dets, gts, image_sizes, {**chosen, c: t}, images).mean
            if mean > best_iu + 1e-15:
                best_t, best_iu = t, mean
        chosen[c] = best_t
    return chosen


# --- box-to-region upper bound ---------------------------------------------------------


def box_to_region_upper_bound(
    box_dets: Sequence[BoxDetection],
    candidates: Sequence[Candidate],
    gts: Sequence[GroundTruthInstance],
    box_overlap: float = UPPER_BOUND_BOX_OVERLAP,
) -> list[Detection]:
    """Give each box the candidate region that best overlaps a same-category ground truth.

    Only candidates whose bounding box overlaps the detection box by more than
    ``box_overlap`` are eligible; boxes with no eligible candidate are dropped.
    """
    cands_by_image: dict[str, list[tuple[Candidate, object]]] = {}
    for c in candidates:
        cands_by_image.setdefault(c.image_id, []).append((c, bbox(c.mask)))
    gts_by_key: dict[tuple[str, int], list[GroundTruthInstance]] = {}
    for g in gts:
        gts_by_key.setdefault((g.image_id, g.category_id), []).append(g)

    out = []
    for det in box_dets:
        pool = [c for c, box in cands_by_image.get(det.image_id, []) if box_iou(box, det.box) > box_overlap]
        if not pool:
            continue
        targets = gts_by_key.get((det.image_id, det.category_id), [])

        def quality(c: Candidate) -> float:
            return max((overlap(c.mask, g.mask) for g in targets), default=0.0)

        best = min(pool, key=lambda c: (-quality(c), c.candidate_id))
        out.append(Detection(det.image_id, det.category_id, det.score, best.mask, best.candidate_id))
    return out

