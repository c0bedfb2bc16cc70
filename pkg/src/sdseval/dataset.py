"""Records, the line-delimited container format, and the binary feature sidecar.

A dataset directory holds ``dataset.jsonl`` and, optionally, ``features.bin``
plus ``features.idx`` for large feature tables.  Every line of a container is a
JSON object tagged with ``"kind"``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from sdseval.masks import BinaryMask, MaskFormatError, PixelBox, SuperpixelMap, bbox

CONTAINER_NAME = "dataset.jsonl"
FEATURES_BIN = "features.bin"
FEATURES_IDX = "features.idx"
FEATURE_MAGIC = b"SDSF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


class DatasetError(ValueError):
    """Schema or consistency violation, with the offending file and record."""

    def __init__(self, message: str, path=None, line: Optional[int] = None):
        locus = ""
        if path is not None:
            locus = f"{path}"
            if line is not None:
                locus += f":{line}"
            locus += ": "
        super().__init__(locus + message)
        self.path = path
        self.line = line


@dataclass(frozen=True)
class GroundTruthInstance:
    image_id: str
    instance_id: int
    category_id: int
    mask: BinaryMask

    def __post_init__(self):
        if self.category_id < 1:
            raise ValueError(f"category_id must be >= 1, got {self.category_id}")
        if self.mask.area == 0:
            raise ValueError(f"instance {self.image_id}/{self.instance_id} has an empty mask")


@dataclass(frozen=True)
class Candidate:
    image_id: str
    candidate_id: int
    mask: BinaryMask

    def __post_init__(self):
        if self.mask.area == 0:
            raise ValueError(f"candidate {self.image_id}/{self.candidate_id} has an empty mask")


@dataclass(frozen=True)
class Detection:
    image_id: str
    category_id: int
    score: float
    mask: BinaryMask
    source_candidate_id: Optional[int] = None

    def __post_init__(self):
        if self.mask.area == 0:
            raise ValueError(f"detection on {self.image_id} has an empty mask")

    @property
    def box(self) -> PixelBox:
        return bbox(self.mask)


@dataclass(frozen=True)
class BoxDetection:
    """A scored box hypothesis with no segmentation (e.g. from a box detector)."""

    image_id: str
    category_id: int
    score: float
    box: PixelBox


class FeatureTable:
    """Dense feature rows keyed by ``(image_id, "candidate"|"instance", id)``.

    Ground-truth regions are stored under the ``"instance"`` key so they can
    serve as training positives.
    """

    def __init__(self, dim: int):
        self.dim = int(dim)
        self._rows: dict[tuple[str, str, int], np.ndarray] = {}

    def __len__(self):
        return len(self._rows)

    def __contains__(self, key):
        return key in self._rows

    def keys(self):
        return self._rows.keys()

    def add(self, image_id: str, kind: str, ident: int, vector) -> None:
        if kind not in ("candidate", "instance"):
            raise ValueError(f"feature key kind must be candidate or instance, not {kind!r}")
        vec = np.asarray(vector, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise ValueError(
                f"feature row for {kind} {image_id}/{ident} has length {vec.size}, expected {self.dim}"
            )
        vec.flags.writeable = False
        self._rows[(image_id, kind, int(ident))] = vec

    def candidate(self, image_id: str, candidate_id: int) -> np.ndarray:
        return self._rows[(image_id, "candidate", int(candidate_id))]

    def instance(self, image_id: str, instance_id: int) -> np.ndarray:
        return self._rows[(image_id, "instance", int(instance_id))]

    def matrix(self, keys: Iterable[tuple[str, str, int]]) -> np.ndarray:
        rows = [self._rows[k] for k in keys]
        if not rows:
            return np.zeros((0, self.dim))
        return np.vstack(rows)

    def __eq__(self, other):
        if not isinstance(other, FeatureTable):
            return NotImplemented
        return (
            self.dim == other.dim
            and self._rows.keys() == other._rows.keys()
            and all(np.array_equal(v, other._rows[k]) for k, v in self._rows.items())
        )


@dataclass
class Dataset:
    instances: list[GroundTruthInstance] = field(default_factory=list)
    candidates: list[Candidate] = field(default_factory=list)
    detections: list[Detection] = field(default_factory=list)
    superpixels: dict[str, SuperpixelMap] = field(default_factory=dict)
    features: Optional[FeatureTable] = None
    groups: dict[int, str] = field(default_factory=dict)

    def categories(self) -> list[int]:
        return sorted({g.category_id for g in self.instances})

    def image_ids(self) -> list[str]:
        seen = dict.fromkeys(g.image_id for g in self.instances)
        seen.update(dict.fromkeys(c.image_id for c in self.candidates))
        seen.update(dict.fromkeys(self.superpixels))
        return list(seen)

    def image_sizes(self) -> dict[str, tuple[int, int]]:
        """``image_id -> (width, height)`` from any record carrying a mask."""
        sizes: dict[str, tuple[int, int]] = {}
        for rec in (*self.instances, *self.candidates, *self.detections):
            sizes.setdefault(rec.image_id, (rec.mask.width, rec.mask.height))
        for image_id, sp in self.superpixels.items():
            sizes.setdefault(image_id, (sp.width, sp.height))
        return sizes

    def instances_by_image(self) -> dict[str, list[GroundTruthInstance]]:
        out: dict[str, list[GroundTruthInstance]] = {}
        for g in self.instances:
            out.setdefault(g.image_id, []).append(g)
        return out

    def candidates_by_image(self) -> dict[str, list[Candidate]]:
        out: dict[str, list[Candidate]] = {}
        for c in self.candidates:
            out.setdefault(c.image_id, []).append(c)
        return out


# --- record (de)serialization ------------------------------------------------


def dumps_record(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def instance_record(g: GroundTruthInstance) -> dict:
    return {
        "kind": "instance",
        "image_id": g.image_id,
        "instance_id": g.instance_id,
        "category_id": g.category_id,
        "mask": g.mask.to_json(),
    }


def candidate_record(c: Candidate) -> dict:
    return {
        "kind": "candidate",
        "image_id": c.image_id,
        "candidate_id": c.candidate_id,
        "mask": c.mask.to_json(),
    }


def detection_record(d: Detection) -> dict:
    return {
        "kind": "detection",
        "image_id": d.image_id,
        "category_id": d.category_id,
        "score": float(d.score),
        "mask": d.mask.to_json(),
        "source_candidate_id": d.source_candidate_id,
    }


def box_detection_record(d: BoxDetection) -> dict:
    return {
        "kind": "boxdetection",
        "image_id": d.image_id,
        "category_id": d.category_id,
        "score": float(d.score),
        "box": d.box.as_list(),
    }


def superpixel_record(image_id: str, sp: SuperpixelMap) -> dict:
    return {
        "kind": "superpixels",
        "image_id": image_id,
        "w": sp.width,
        "h": sp.height,
        "labels": sp.labels.ravel().tolist(),
    }


def group_record(category_id: int, group: str) -> dict:
    return {"kind": "group", "category_id": category_id, "group": group}


def feature_record(key: tuple[str, str, int], vec: np.ndarray) -> dict:
    image_id, kind, ident = key
    return {"kind": "feature", "image_id": image_id, f"{kind}_id": ident, "x": [float(v) for v in vec]}


def _require(rec: dict, name: str, types):
    if name not in rec:
        raise DatasetError(f"missing field {name!r} in {rec.get('kind')} record")
    value = rec[name]
    if isinstance(value, bool) or not isinstance(value, types):
        raise DatasetError(f"field {name!r} has wrong type {type(value).__name__}")
    return value


def _mask(rec: dict) -> BinaryMask:
    m = _require(rec, "mask", dict)
    try:
        return BinaryMask.from_json(m)
    except MaskFormatError as exc:
        raise DatasetError(f"mask checksum/format error: {exc}") from exc


def parse_record(rec: dict):
    """Turn one container record into its typed value (feature rows stay as dicts)."""
    if not isinstance(rec, dict):
        raise DatasetError("record is not a JSON object")
    kind = rec.get("kind")
    try:
        if kind == "instance":
            return GroundTruthInstance(
                _require(rec, "image_id", str),
                _require(rec, "instance_id", int),
                _require(rec, "category_id", int),
                _mask(rec),
            )
        if kind == "candidate":
            return Candidate(_require(rec, "image_id", str), _require(rec, "candidate_id", int), _mask(rec))
        if kind == "detection":
            source = rec.get("source_candidate_id")
            if source is not None and (isinstance(source, bool) or not isinstance(source, int)):
                raise DatasetError("source_candidate_id must be an integer or null")
            return Detection(
                _require(rec, "image_id", str),
                _require(rec, "category_id", int),
                float(_require(rec, "score", (int, float))),
                _mask(rec),
                source,
            )
        if kind == "boxdetection":
            box = _require(rec, "box", list)
            if len(box) != 4:
                raise DatasetError("box must have 4 coordinates")
            return BoxDetection(
                _require(rec, "image_id", str),
                _require(rec, "category_id", int),
                float(_require(rec, "score", (int, float))),
                PixelBox(*(int(v) for v in box)),
            )
        if kind == "superpixels":
            w, h = _require(rec, "w", int), _require(rec, "h", int)
            labels = _require(rec, "labels", list)
            if len(labels) != w * h:
                raise DatasetError(f"superpixel label count {len(labels)} != {w}x{h}")
            return _require(rec, "image_id", str), SuperpixelMap(np.asarray(labels, dtype=np.int64).reshape(h, w))
        if kind == "group":
            return _require(rec, "category_id", int), _require(rec, "group", str)
        if kind in ("feature", "config"):
            return rec
    except DatasetError:
        raise
    except (ValueError, TypeError) as exc:
        raise DatasetError(str(exc)) from exc
    raise DatasetError(f"unknown record kind {kind!r}")


def iter_records(path) -> Iterator[tuple[int, dict]]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"invalid JSON: {exc.msg}", path, lineno) from exc


def write_records(path, records: Iterable[dict]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps_record(rec))
            fh.write("\n")


# --- containers -----------------------------------------------------------------


def _container_path(path) -> Path:
    path = Path(path)
    return path / CONTAINER_NAME if path.is_dir() else path


def load_container(path) -> Dataset:
    """Load every record of one container file into a :class:`Dataset`."""
    path = _container_path(path)
    if not path.exists():
        raise DatasetError("file not found", path)
    ds = Dataset()
    feature_rows: list[tuple[int, dict]] = []
    seen_instances: set[tuple[str, int]] = set()
    seen_candidates: set[tuple[str, int]] = set()
    for lineno, rec in iter_records(path):
        try:
            value = parse_record(rec)
        except DatasetError as exc:
            raise DatasetError(str(exc), path, lineno) from exc
        kind = rec["kind"]
        if kind == "instance":
            key = (value.image_id, value.instance_id)
            if key in seen_instances:
                raise DatasetError(f"duplicate instance {key}", path, lineno)
            seen_instances.add(key)
            ds.instances.append(value)
        elif kind == "candidate":
            key = (value.image_id, value.candidate_id)
            if key in seen_candidates:
                raise DatasetError(f"duplicate candidate {key}", path, lineno)
            seen_candidates.add(key)
            ds.candidates.append(value)
        elif kind == "detection":
            ds.detections.append(value)
        elif kind == "superpixels":
            image_id, sp = value
            ds.superpixels[image_id] = sp
        elif kind == "group":
            category_id, group = value
            ds.groups[category_id] = group
        elif kind == "feature":
            feature_rows.append((lineno, rec))
    if feature_rows:
        first = feature_rows[0][1].get("x")
        if not isinstance(first, list):
            raise DatasetError("feature record needs a list 'x'", path, feature_rows[0][0])
        ds.features = FeatureTable(len(first))
        for lineno, rec in feature_rows:
            key = _feature_key(rec, path, lineno)
            x = rec.get("x")
            if not isinstance(x, list) or len(x) != ds.features.dim:
                raise DatasetError(
                    f"feature vector for {key[1]} {key[0]}/{key[2]} has length "
                    f"{len(x) if isinstance(x, list) else '?'}, expected {ds.features.dim}",
                    path,
                    lineno,
                )
            ds.features.add(*key, x)
    return ds


def _feature_key(rec: dict, path, lineno) -> tuple[str, str, int]:
    image_id = rec.get("image_id")
    if not isinstance(image_id, str):
        raise DatasetError("feature record needs a string image_id", path, lineno)
    for kind in ("candidate", "instance"):
        ident = rec.get(f"{kind}_id")
        if isinstance(ident, int) and not isinstance(ident, bool):
            return image_id, kind, ident
    raise DatasetError("feature record needs candidate_id or instance_id", path, lineno)


def _check_feature_refs(ds: Dataset, path) -> None:
    if ds.features is None:
        return
    candidates = {(c.image_id, c.candidate_id) for c in ds.candidates}
    instances = {(g.image_id, g.instance_id) for g in ds.instances}
    for image_id, kind, ident in ds.features.keys():
        pool = candidates if kind == "candidate" else instances
        if (image_id, ident) not in pool:
            raise DatasetError(f"feature row references unknown {kind} {image_id}/{ident}", path)


def load_dataset(path) -> Dataset:
    """Load a dataset directory (or a bare container file) and validate it."""
    path = Path(path)
    ds = load_container(path)
    if path.is_dir() and (path / FEATURES_BIN).exists():
        if ds.features is not None:
            raise DatasetError("features given both inline and in a sidecar", path)
        ds.features = load_feature_sidecar(path / FEATURES_BIN, path / FEATURES_IDX)
    _check_feature_refs(ds, path)
    return ds


def dataset_records(ds: Dataset, inline_features: bool = True) -> Iterator[dict]:
    for category_id in sorted(ds.groups):
        yield group_record(category_id, ds.groups[category_id])
    for g in ds.instances:
        yield instance_record(g)
    for c in ds.candidates:
        yield candidate_record(c)
    for d in ds.detections:
        yield detection_record(d)
    for image_id, sp in ds.superpixels.items():
        yield superpixel_record(image_id, sp)
    if inline_features and ds.features is not None:
        for key in ds.features.keys():
            yield feature_record(key, ds.features._rows[key])


def save_dataset(ds: Dataset, path, feature_format: str = "inline") -> None:
    """Write ``ds`` into directory ``path``.

    ``feature_format`` is ``"inline"`` (feature records in the container) or
    ``"binary"`` (float32 sidecar plus index).
    """
    if feature_format not in ("inline", "binary"):
        raise ValueError(f"unknown feature format {feature_format!r}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    inline = feature_format == "inline"
    write_records(path / CONTAINER_NAME, dataset_records(ds, inline_features=inline))
    for name in (FEATURES_BIN, FEATURES_IDX):
        (path / name).unlink(missing_ok=True)
    if not inline and ds.features is not None:
        save_feature_sidecar(ds.features, path / FEATURES_BIN, path / FEATURES_IDX)


def save_feature_sidecar(table: FeatureTable, bin_path, idx_path) -> None:
    keys = list(table.keys())
    with open(bin_path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, table.dim, len(keys)))
        fh.write(table.matrix(keys).astype("<f4").tobytes())
    write_records(
        idx_path,
        ({"image_id": k[0], f"{k[1]}_id": k[2], "row": row} for row, k in enumerate(keys)),
    )


def load_feature_sidecar(bin_path, idx_path) -> FeatureTable:
    data = Path(bin_path).read_bytes()
    if len(data) < _HEADER.size:
        raise DatasetError("truncated feature header", bin_path)
    magic, version, dim, n = _HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC or version != FEATURE_VERSION:
        raise DatasetError(f"bad feature header magic={magic!r} version={version}", bin_path)
    body = data[_HEADER.size :]
    if len(body) != 4 * dim * n:
        raise DatasetError(f"feature body has {len(body)} bytes, expected {4 * dim * n}", bin_path)
    matrix = np.frombuffer(body, dtype="<f4").reshape(n, dim).astype(np.float64)
    table = FeatureTable(dim)
    if not Path(idx_path).exists():
        raise DatasetError("feature index missing", idx_path)
    for lineno, rec in iter_records(idx_path):
        key = _feature_key(rec, idx_path, lineno)
        row = rec.get("row")
        if not isinstance(row, int) or not 0 <= row < n:
            raise DatasetError(f"feature row index {row!r} out of range", idx_path, lineno)
        table.add(*key, matrix[row])
    return table


# --- standalone record files ------------------------------------------------------


def load_detections(path) -> list[Detection]:
    return load_container(path).detections


def save_detections(dets: Iterable[Detection], path) -> None:
    write_records(path, (detection_record(d) for d in dets))


def load_box_detections(path) -> list[BoxDetection]:
    path = Path(path)
    if not path.exists():
        raise DatasetError("file not found", path)
    out = []
    for lineno, rec in iter_records(path):
        try:
            value = parse_record(rec)
        except DatasetError as exc:
            raise DatasetError(str(exc), path, lineno) from exc
        if isinstance(value, BoxDetection):
            out.append(value)
        elif isinstance(value, Detection):
            out.append(BoxDetection(value.image_id, value.category_id, value.score, value.box))
        else:
            raise DatasetError(f"expected box detections, found {rec['kind']!r}", path, lineno)
    return out


def load_groups(path) -> dict[int, str]:
    return load_container(path).groups
