"""CSV and record-file writers for evaluation and diagnostic reports."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

from sdseval.dataset import write_records
from sdseval.diagnose import DiagnosticReport, FalsePositiveKind
from sdseval.evaluate import EvalReport, PixelIUResult, PRCurve

DIAGNOSTIC_COLUMNS = (
    "category", "AP", "AP_remove", "AP_correct", "AP_upper", "loss_misloc",
    "AP_pp", "AP_pr", "n_misloc", "n_similar", "n_background",
)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_pr_curve(curve: PRCurve, path) -> None:
    _write_csv(
        Path(path),
        ("score", "precision", "recall"),
        zip(map(float, curve.scores), map(float, curve.precision), map(float, curve.recall)),
    )


def write_eval_report(report: EvalReport, out_dir) -> None:
    """``report.csv`` (category x threshold AP), ``records.jsonl`` and one PR csv per category/threshold."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vol = len(report.thresholds) > 1
    header = ["category"] + [f"AP@{t:g}" for t in report.thresholds]
    if vol:
        header.append("AP_vol")
    header += ["n_gt", "n_dets"]
    rows = []
    for c in report.categories:
        row = [c] + [report.ap[c][t] for t in report.thresholds]
        if vol:
            row.append(report.ap_vol(c))
        rows.append(row + [report.num_gt[c], report.num_dets[c]])
    mean = ["mean"] + [report.mean_ap(t) for t in report.thresholds]
    if vol:
        mean.append(report.mean_ap_vol)
    rows.append(mean + [sum(report.num_gt.values()), sum(report.num_dets.values())])
    _write_csv(out / "report.csv", header, rows)

    records = [{"kind": "summary", "metric": report.kind, "thresholds": list(report.thresholds),
                "mean_ap": {f"{t:g}": report.mean_ap(t) for t in report.thresholds},
                "mean_ap_vol": report.mean_ap_vol}]
    for c in report.categories:
        dets = report.detections[c]
        for t in report.thresholds:
            m = report.matches[(c, t)]
            records.append({
                "kind": "match",
                "category_id": c,
                "threshold": t,
                "ap": report.ap[c][t],
                "num_gt": m.num_gt,
                "detections": [
                    {
                        "image_id": dets[i].image_id,
                        "score": dets[i].score,
                        "source_candidate_id": dets[i].source_candidate_id,
                        "tp": bool(m.tp[i]),
                        "matched_instance_id": m.matched[i][1] if m.matched[i] else None,
                        "overlap": float(m.overlaps[i]),
                    }
                    for i in m.order
                ],
            })
            write_pr_curve(report.curves[(c, t)], out / f"pr_c{c}_t{t:g}.csv")
    write_records(out / "records.jsonl", records)


def write_pixel_iu_report(result: PixelIUResult, thresholds: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [[c, result.iu[c], result.intersection[c], result.union[c]] for c in sorted(result.iu)]
    rows.append(["mean", result.mean, "", ""])
    _write_csv(out / "report.csv", ("category", "IU", "intersection", "union"), rows)
    write_records(out / "records.jsonl", [{
        "kind": "pixel_iu",
        "mean_iu": result.mean,
        "iu": {str(c): v for c, v in sorted(result.iu.items())},
        "score_thresholds": {str(c): (None if t == float("-inf") else t) for c, t in sorted(thresholds.items())},
    }])


def write_diagnostic_report(report: DiagnosticReport, kinds, dets, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for c, d in sorted(report.categories.items()):
        rows.append([c, d.ap, d.ap_remove, d.ap_correct, d.ap_upper, d.loss_misloc,
                     d.ap_pp, d.ap_pr, d.n_misloc, d.n_similar, d.n_background])
        for name, curve in d.curves.items():
            write_pr_curve(curve, out / f"pr_c{c}_{name}.csv")
    if report.categories:
        rows.append(["mean"] + [report.mean(n) for n in ("ap", "ap_remove", "ap_correct", "ap_upper",
                                                          "loss_misloc", "ap_pp", "ap_pr")]
                    + [sum(getattr(d, n) for d in report.categories.values())
                       for n in ("n_misloc", "n_similar", "n_background")])
    _write_csv(out / "diagnostics.csv", DIAGNOSTIC_COLUMNS, rows)
    records = [
        {"kind": "fp", "image_id": d.image_id, "category_id": d.category_id, "score": d.score,
         "source_candidate_id": d.source_candidate_id,
         "fp_kind": k.value if isinstance(k, FalsePositiveKind) else None}
        for d, k in zip(dets, kinds)
    ]
    records += [
        {"kind": "category", "category_id": c, "AP_remove_similar": d.ap_remove_similar,
         "AP_remove_background": d.ap_remove_background}
        for c, d in sorted(report.categories.items())
    ]
    write_records(out / "records.jsonl", records)
