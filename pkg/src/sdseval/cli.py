"""Command-line entry point: ``sdseval <command> [flags]``.

Failures exit non-zero after printing one JSON error record to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from sdseval import classify, diagnose as diag, evaluate as ev, nms, refine, reports, synth
from sdseval.dataset import (
    DatasetError,
    Detection,
    iter_records,
    load_box_detections,
    load_dataset,
    load_detections,
    load_groups,
    save_dataset,
    save_detections,
)
from sdseval.masks import DEFAULT_PADDING

log = logging.getLogger("sdseval")


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", message, 2)


def _fail(kind: str, message: str, code: int):
    sys.stderr.write(json.dumps({"error": kind, "message": message}, sort_keys=True) + "\n")
    sys.exit(code)


def _pmap(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _parse_thresholds(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}")
    if not values or any(not 0 <= v < 1 for v in values):
        raise argparse.ArgumentTypeError("thresholds must lie in [0, 1)")
    return values


def _require_features(ds):
    if ds.features is None:
        raise CLIError("dataset has no feature table")
    return ds.features


def _categories(ds, category):
    cats = ds.categories() if category is None else [category]
    if not cats:
        raise CLIError("dataset has no ground-truth instances")
    return cats


def _train_config(args) -> classify.TrainingConfig:
    neg = args.negative_threshold
    if neg is None:
        neg = 0.5 if args.label_kind == "box" else 0.2
    return classify.TrainingConfig(
        lam=args.lam, max_epochs=args.max_epochs, tolerance=args.tolerance,
        negative_threshold=neg, label_kind=args.label_kind, standardize=args.standardize,
    )


# --- commands ---------------------------------------------------------------------------


def cmd_synth(args):
    if args.scene == "shapes":
        ds = synth.synth_generate(args.seed, args.images, args.shapes, args.categories,
                                  args.width, args.height, args.tile)
    else:
        lo, hi = args.overlap_range
        ds = synth.synth_car_road(args.seed, args.images, (lo, hi), width=args.width,
                                  height=args.height, tile=args.tile)
    save_dataset(ds, args.out, args.feature_format)


def _model_path(out: Path, category: int, many: bool, prefix: str) -> Path:
    if many:
        out.mkdir(parents=True, exist_ok=True)
        return out / f"{prefix}_c{category}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args):
    ds = load_dataset(args.dataset)
    features = _require_features(ds)
    cfg = _train_config(args)
    cats = _categories(ds, args.category)

    def fit(c):
        return c, classify.train_region_classifier(ds.candidates, ds.instances, features, c, cfg)

    out = Path(args.out)
    for c, model in _pmap(fit, cats, args.threads):
        record = dict(model.to_json(), category_id=c)
        path = _model_path(out, c, args.category is None, "model")
        path.write_text(json.dumps(record, sort_keys=True) + "\n", encoding="utf-8")


def cmd_train_refiner(args):
    ds = load_dataset(args.dataset)
    cfg = classify.TrainingConfig(lam=args.lam, max_epochs=args.max_epochs, tolerance=args.tolerance)
    features = None if args.no_features else _require_features(ds)
    cats = _categories(ds, args.category)

    def fit(c):
        return refine.train_refiner(ds.candidates, ds.instances, features, ds.superpixels, c,
                                    cfg, args.padding, args.tau)

    out = Path(args.out)
    for r in _pmap(fit, cats, args.threads):
        r.save(_model_path(out, r.category_id, args.category is None, "refiner"))


def _load_models(path) -> dict[int, classify.LinearModel]:
    path = Path(path)
    files = sorted(path.glob("*.json")) if path.is_dir() else [path]
    if not files:
        raise CLIError(f"no model files in {path}")
    models = {}
    for f in files:
        obj = json.loads(f.read_text(encoding="utf-8"))
        if "category_id" not in obj:
            raise CLIError(f"{f}: model file lacks category_id")
        models[int(obj["category_id"])] = classify.LinearModel.from_json(obj)
    return models


def cmd_score(args):
    ds = load_dataset(args.dataset)
    features = _require_features(ds)
    models = _load_models(args.models)
    X = features.matrix((c.image_id, "candidate", c.candidate_id) for c in ds.candidates)

    def run(category):
        scores = classify.score(models[category], X)
        dets = [
            Detection(c.image_id, category, float(s), c.mask, c.candidate_id)
            for c, s in zip(ds.candidates, scores)
        ]
        kept = nms.nms_per_image_category(dets, args.nms_threshold, args.nms_mode)
        return nms.cap_top_k(kept, args.top_k)

    out = []
    for dets in _pmap(run, sorted(models), args.threads):
        out.extend(dets)
    save_detections(out, args.out)


def cmd_refine(args):
    ds = load_dataset(args.dataset)
    dets = load_detections(args.dets)
    path = Path(args.refiner)
    files = sorted(path.glob("*.json")) if path.is_dir() else [path]
    refiners = {r.category_id: r for r in map(refine.Refiner.load, files)}
    features = None if args.no_features else _require_features(ds)

    def run(d):
        r = refiners.get(d.category_id)
        if r is None:
            return d
        if d.image_id not in ds.superpixels:
            raise CLIError(f"no superpixels for image {d.image_id}")
        if features is None:
            feat = ()
        elif d.source_candidate_id is None:
            raise CLIError(f"detection on {d.image_id} has no source candidate for features")
        else:
            feat = features.candidate(d.image_id, d.source_candidate_id)
        return refine.refine_detection(d, r.coarse, r.stage2, feat, ds.superpixels[d.image_id])

    save_detections(_pmap(run, dets, args.threads), args.out)


def _read_image_list(path) -> list[str]:
    return [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def cmd_eval(args):
    ds = load_dataset(args.dataset)
    dets = load_detections(args.dets)
    if args.metric == "pixeliu":
        sizes = ds.image_sizes()
        images = sorted(sizes)
        if args.val_images:
            val = _read_image_list(args.val_images)
            thresholds = ev.cross_validate_paste_thresholds(dets, ds.instances, sizes, val)
            images = [i for i in images if i not in set(val)]
        else:
            thresholds = {d.category_id: args.score_threshold for d in dets}
        result = ev.paste_and_pixel_iu(dets, ds.instances, sizes, thresholds, images)
        reports.write_pixel_iu_report(result, thresholds, args.out)
        return
    kind = "box" if args.metric.startswith("apb") else "region"
    if args.metric.endswith("vol"):
        thresholds = ev.VOL_THRESHOLDS
    else:
        thresholds = tuple(args.thresholds or (0.5,))
    report = ev.evaluate(dets, ds.instances, thresholds, kind)
    reports.write_eval_report(report, args.out)


def cmd_diagnose(args):
    ds = load_dataset(args.dataset)
    dets = load_detections(args.dets)
    groups = load_groups(args.groups) if args.groups else ds.groups
    report = diag.diagnose(dets, ds.instances, groups, args.strict, args.lenient, args.pixel_threshold)
    kinds = diag.classify_false_positives(dets, ds.instances, groups, args.strict, args.lenient)
    reports.write_diagnostic_report(report, kinds, dets, args.out)


def cmd_upper_bound(args):
    ds = load_dataset(args.dataset)
    boxes = load_box_detections(args.boxdets)
    out = ev.box_to_region_upper_bound(boxes, ds.candidates, ds.instances, args.box_overlap)
    save_detections(out, args.out)


# --- parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="worker threads for per-category work")
    common.add_argument("--config", help="record file of {'kind': 'config', flag: value} lines")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="sdseval", description="Simultaneous detection and segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--images", type=int, required=True)
    p.add_argument("--shapes", type=int, default=3)
    p.add_argument("--categories", type=int, default=3)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--tile", type=int, default=8)
    p.add_argument("--scene", choices=("shapes", "car-road"), default="shapes")
    p.add_argument("--overlap-range", type=float, nargs=2, default=(0.7, 0.8), metavar=("LO", "HI"))
    p.add_argument("--feature-format", choices=("inline", "binary"), default="binary")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    def training_flags(p, lam, epochs, tol):
        p.add_argument("--lam", type=float, default=lam)
        p.add_argument("--max-epochs", type=int, default=epochs)
        p.add_argument("--tolerance", type=float, default=tol)

    p = sub.add_parser("train", parents=[common], help="two-round region classifier training")
    p.add_argument("--dataset", required=True)
    p.add_argument("--category", type=int)
    p.add_argument("--label-kind", choices=("region", "box"), default="region")
    p.add_argument("--negative-threshold", type=float)
    p.add_argument("--standardize", action="store_true")
    training_flags(p, 1e-4, 20000, 1e-7)
    p.add_argument("--out", required=True, help="model file (with --category) or directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-refiner", parents=[common], help="fit coarse-mask and superpixel models")
    p.add_argument("--dataset", required=True)
    p.add_argument("--category", type=int)
    p.add_argument("--padding", type=int, default=DEFAULT_PADDING)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--no-features", action="store_true", help="use only the region grid as coarse input")
    training_flags(p, refine.REFINE_CONFIG.lam, refine.REFINE_CONFIG.max_epochs, refine.REFINE_CONFIG.tolerance)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_refiner)

    p = sub.add_parser("score", parents=[common], help="score candidates, NMS and cap")
    p.add_argument("--dataset", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--nms-threshold", type=float, default=0.0)
    p.add_argument("--nms-mode", choices=("region", "box"), default="region")
    p.add_argument("--top-k", type=int, default=20000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("refine", parents=[common], help="refine detection masks")
    p.add_argument("--dataset", required=True)
    p.add_argument("--dets", required=True)
    p.add_argument("--refiner", required=True)
    p.add_argument("--no-features", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", parents=[common], help="AP^r / AP^b / volumes / pixel IU")
    p.add_argument("--dataset", required=True)
    p.add_argument("--dets", required=True)
    p.add_argument("--metric", choices=("apr", "apb", "aprvol", "apbvol", "pixeliu"), default="apr")
    p.add_argument("--thresholds", type=_parse_thresholds)
    p.add_argument("--val-images", help="pixeliu: image ids for threshold cross-validation")
    p.add_argument("--score-threshold", type=float, default=float("-inf"), help="pixeliu: global score cut")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", parents=[common], help="error-mode analysis")
    p.add_argument("--dataset", required=True)
    p.add_argument("--dets", required=True)
    p.add_argument("--groups")
    p.add_argument("--strict", type=float, default=diag.STRICT)
    p.add_argument("--lenient", type=float, default=diag.LENIENT)
    p.add_argument("--pixel-threshold", type=float, default=diag.PIXEL_THRESHOLD)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("upper-bound", parents=[common], help="box detections to best-case regions")
    p.add_argument("--dataset", required=True)
    p.add_argument("--boxdets", required=True)
    p.add_argument("--box-overlap", type=float, default=ev.UPPER_BOUND_BOX_OVERLAP)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_upper_bound)
    return parser


def _config_defaults(path) -> dict:
    out = {}
    for _, rec in iter_records(path):
        if rec.get("kind") != "config":
            raise DatasetError(f"config file may only contain config records, found {rec.get('kind')!r}", path)
        out.update({k.replace("-", "_"): v for k, v in rec.items() if k != "kind"})
    return out


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Install ``--config`` records as defaults of the chosen subcommand."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    command = next((t for t in argv if not t.startswith("-")), None)
    choices = parser._subparsers._group_actions[0].choices
    if command not in choices:
        return
    sub = choices[command]
    defaults = _config_defaults(known.config)
    actions = {a.dest: a for a in sub._actions}
    unknown = sorted(set(defaults) - set(actions))
    if unknown:
        raise CLIError(f"unknown config keys {unknown}")
    for dest in defaults:
        actions[dest].required = False
    sub.set_defaults(**defaults)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
        if args.threads < 1:
            raise CLIError("--threads must be >= 1")
        args.func(args)
    except (CLIError, DatasetError, ValueError, KeyError, OSError, RuntimeError) as exc:
        _fail(type(exc).__name__, str(exc).replace("\n", " "), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
