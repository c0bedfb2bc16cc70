"""False-positive taxonomy and oracle re-evaluations of a detection set.

A strict-threshold false positive is *mislocalized* when it overlaps a
same-category ground truth by more than the lenient threshold; this covers
both lenient-only hits and duplicates.  Remaining false positives are split
into confusions with a similar category (same group) and background.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from sdseval.dataset import Detection, GroundTruthInstance
from sdseval.evaluate import PRCurve, evaluate, match, pairwise_similarity, pr_and_ap

STRICT = 0.5
LENIENT = 0.1
PIXEL_THRESHOLD = 0.67


class FalsePositiveKind(enum.Enum):
    MISLOCALIZED = "mislocalized"
    SIMILAR = "similar"
    BACKGROUND = "background"


@dataclass
class CategoryAnalysis:
    """Strict/lenient outcome of every detection of one category."""

    category_id: int
    dets: list[Detection]
    gts: list[GroundTruthInstance]
    strict_tp: np.ndarray
    kinds: list[Optional[FalsePositiveKind]]
    duplicate: np.ndarray
    correction: list[Optional[GroundTruthInstance]]


def _check_groups(categories, groups: Mapping[int, str]):
    missing = sorted(set(categories) - set(groups))
    if missing:
        raise ValueError(f"category groups missing for categories {missing}")


def analyse_category(
    dets: Sequence[Detection],
    gts_all: Sequence[GroundTruthInstance],
    category: int,
    groups: Mapping[int, str],
    strict: float = STRICT,
    lenient: float = LENIENT,
) -> CategoryAnalysis:
    dets = [d for d in dets if d.category_id == category]
    gts = [g for g in gts_all if g.category_id == category]
    pairs = pairwise_similarity(dets, gts, "region")
    strict_m = match(dets, gts, strict, "region", pairs)
    lenient_m = match(dets, gts, lenient, "region", pairs)
    strict_hits = {key for key in strict_m.matched if key is not None}
    gt_by_key = {(g.image_id, g.instance_id): g for g in gts}

    others = [g for g in gts_all if g.category_id != category and groups.get(g.category_id) == groups.get(category)]
    other_pairs = pairwise_similarity(dets, others, "region")

    kinds: list[Optional[FalsePositiveKind]] = [None] * len(dets)
    duplicate = np.zeros(len(dets), dtype=bool)
    correction: list[Optional[GroundTruthInstance]] = [None] * len(dets)
    for i in range(len(dets)):
        if strict_m.tp[i]:
            continue
        best_same = max((v for _, v in pairs[i]), default=0.0)
        if best_same > lenient:
            kinds[i] = FalsePositiveKind.MISLOCALIZED
            target = lenient_m.matched[i]
            if lenient_m.tp[i] and target not in strict_hits:
                correction[i] = gt_by_key[target]
            else:
                duplicate[i] = True
        elif max((v for _, v in other_pairs[i]), default=0.0) > lenient:
            kinds[i] = FalsePositiveKind.SIMILAR
        else:
            kinds[i] = FalsePositiveKind.BACKGROUND
    return CategoryAnalysis(category, dets, gts, strict_m.tp, kinds, duplicate, correction)


def classify_false_positives(
    dets: Sequence[Detection],
    gts_all: Sequence[GroundTruthInstance],
    groups: Mapping[int, str],
    strict: float = STRICT,
    lenient: float = LENIENT,
) -> list[Optional[FalsePositiveKind]]:
    """Kind of each detection (``None`` for strict true positives), aligned with ``dets``."""
    categories = sorted({d.category_id for d in dets})
    _check_groups(categories, groups)
    out: list[Optional[FalsePositiveKind]] = [None] * len(dets)
    for c in categories:
        idx = [i for i, d in enumerate(dets) if d.category_id == c]
        analysis = analyse_category(dets, gts_all, c, groups, strict, lenient)
        for i, kind in zip(idx, analysis.kinds):
            out[i] = kind
    return out


def _ap(dets, gts, threshold=STRICT) -> PRCurve:
    return pr_and_ap(match(dets, gts, threshold))


def removed(a: CategoryAnalysis, kind: FalsePositiveKind) -> list[Detection]:
    return [d for d, k in zip(a.dets, a.kinds) if k is not kind]


def corrected(a: CategoryAnalysis) -> list[Detection]:
    """Duplicates dropped; other mislocalized detections take their ground truth's mask."""
    out = []
    for i, d in enumerate(a.dets):
        if a.duplicate[i]:
            continue
        gt = a.correction[i]
        out.append(d if gt is None else replace(d, mask=gt.mask))
    return out


def ap_remove_mislocalized(dets, gts_all, category: int, groups=None, strict=STRICT, lenient=LENIENT) -> float:
    a = analyse_category(dets, gts_all, category, groups or {}, strict, lenient)
    return _ap(removed(a, FalsePositiveKind.MISLOCALIZED), a.gts, strict).ap


def ap_correct_mislocalized(dets, gts_all, category: int, groups=None, strict=STRICT, lenient=LENIENT) -> float:
    a = analyse_category(dets, gts_all, category, groups or {}, strict, lenient)
    return _ap(corrected(a), a.gts, strict).ap


def ap_upper_bound(dets, gts_all, category: int, groups=None, strict=STRICT, lenient=LENIENT) -> float:
    """Best AP reachable with perfect localization: the corrected-oracle AP."""
    return ap_correct_mislocalized(dets, gts_all, category, groups, strict, lenient)


def ap_pixelwise(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthInstance],
    criterion: str,
    threshold: float = PIXEL_THRESHOLD,
) -> dict[int, float]:
    """Per-category AP where matches require pixel precision (or recall) above ``threshold``."""
    if criterion not in ("precision", "recall"):
        raise ValueError(f"criterion must be precision or recall, not {criterion!r}")
    report = evaluate(dets, gts, (threshold,), criterion)
    return {c: report.ap[c][threshold] for c in report.categories}


@dataclass
class CategoryDiagnostics:
    category_id: int
    ap: float
    ap_remove: float
    ap_correct: float
    ap_remove_similar: float
    ap_remove_background: float
    ap_pp: float
    ap_pr: float
    n_misloc: int
    n_similar: int
    n_background: int
    curves: dict[str, PRCurve] = field(default_factory=dict, repr=False)

    @property
    def ap_upper(self) -> float:
        return self.ap_correct

    @property
    def loss_misloc(self) -> float:
        return self.ap_upper - self.ap


@dataclass
class DiagnosticReport:
    categories: dict[int, CategoryDiagnostics]

    def mean(self, name: str) -> float:
        if not self.categories:
            return 0.0
        return float(np.mean([getattr(c, name) for c in self.categories.values()]))


def diagnose(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthInstance],
    groups: Mapping[int, str],
    strict: float = STRICT,
    lenient: float = LENIENT,
    pixel_threshold: float = PIXEL_THRESHOLD,
) -> DiagnosticReport:
    """Full per-category diagnostic table over the categories present in ``gts``."""
    categories = sorted({g.category_id for g in gts})
    _check_groups(sorted(set(categories) | {d.category_id for d in dets}), groups)
    pp = ap_pixelwise(dets, gts, "precision", pixel_threshold)
    pr = ap_pixelwise(dets, gts, "recall", pixel_threshold)
    out = {}
    for c in categories:
        a = analyse_category(dets, gts, c, groups, strict, lenient)
        curves = {
            "baseline": _ap(a.dets, a.gts, strict),
            "remove": _ap(removed(a, FalsePositiveKind.MISLOCALIZED), a.gts, strict),
            "correct": _ap(corrected(a), a.gts, strict),
        }
        out[c] = CategoryDiagnostics(
            category_id=c,
            ap=curves["baseline"].ap,
            ap_remove=curves["remove"].ap,
            ap_correct=curves["correct"].ap,
            ap_remove_similar=_ap(removed(a, FalsePositiveKind.SIMILAR), a.gts, strict).ap,
            ap_remove_background=_ap(removed(a, FalsePositiveKind.BACKGROUND), a.gts, strict).ap,
            ap_pp=pp[c],
            ap_pr=pr[c],
            n_misloc=sum(k is FalsePositiveKind.MISLOCALIZED for k in a.kinds),
            n_similar=sum(k is FalsePositiveKind.SIMILAR for k in a.kinds),
            n_background=sum(k is FalsePositiveKind.BACKGROUND for k in a.kinds),
            curves=curves,
        )
    return DiagnosticReport(out)
