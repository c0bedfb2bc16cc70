"""Category-specific region refinement.

A coarse 10x10 figure-ground grid is predicted over a detection's padded box
by one logistic model per cell.  The grid is averaged into superpixels, and a
second logistic model over (projected value, membership bit) decides which
superpixels make up the refined mask.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit

from sdseval.classify import (
    DegenerateInputError,
    LinearModel,
    TrainingConfig,
    _logistic_unchecked,
    overlap_matrix,
    train_logistic_batch,
)
from sdseval.dataset import Candidate, Detection, FeatureTable, GroundTruthInstance
from sdseval.masks import (
    DEFAULT_PADDING,
    GRID_SIZE,
    BinaryMask,
    SuperpixelMap,
    bbox,
    discretize_to_grid,
    project_to_superpixels,
    superpixels_touching,
)

CELLS = GRID_SIZE * GRID_SIZE
TRAIN_OVERLAP = 0.7
REFINE_CONFIG = TrainingConfig(lam=1e-3, max_epochs=3000, tolerance=1e-6)


@dataclass(frozen=True, eq=False)
class CoarseMaskModel:
    """Per-cell logistic weights stacked as a ``(d + 100, 100)`` matrix, cells row-major."""

    weights: np.ndarray
    biases: np.ndarray
    lam: float
    padding: int = DEFAULT_PADDING

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.biases, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != CELLS or b.shape != (CELLS,):
            raise ValueError(f"coarse model needs {CELLS} cell models")
        if w.shape[0] < CELLS:
            raise ValueError("coarse model input must include the 100 region-grid values")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[0] - CELLS

    def cell(self, i: int, j: int) -> LinearModel:
        k = i * GRID_SIZE + j
        return LinearModel(self.weights[:, k], self.biases[k], self.lam, "logistic")

    @classmethod
    def from_cells(cls, cells: Sequence[LinearModel], padding: int) -> "CoarseMaskModel":
        if len(cells) != CELLS:
            raise ValueError(f"expected {CELLS} cell models, got {len(cells)}")
        dims = {m.dim for m in cells}
        if len(dims) != 1:
            raise ValueError("cell models have different input dimensions")
        return cls(
            np.stack([m.weights for m in cells], axis=1),
            np.array([m.bias for m in cells]),
            cells[0].lam,
            padding,
        )


@dataclass(frozen=True)
class SuperpixelStageModel:
    model: LinearModel
    tau: float = 0.5

    def __post_init__(self):
        if self.model.dim != 2:
            raise ValueError("superpixel stage takes exactly 2 inputs")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")

    def prob(self, projected, membership) -> np.ndarray:
        X = np.column_stack([projected, membership]).astype(np.float64)
        return expit(X @ self.model.weights + self.model.bias)


@dataclass(frozen=True)
class Refiner:
    category_id: int
    coarse: CoarseMaskModel
    stage2: SuperpixelStageModel

    @property
    def padding(self) -> int:
        return self.coarse.padding

    def to_json(self) -> dict:
        cells = [self.coarse.cell(i, j).to_json() for i in range(GRID_SIZE) for j in range(GRID_SIZE)]
        return {
            "category_id": self.category_id,
            "padding": self.padding,
            "tau": self.stage2.tau,
            "coarse": cells,
            "stage2": self.stage2.model.to_json(),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Refiner":
        cells = [LinearModel.from_json(m) for m in obj["coarse"]]
        coarse = CoarseMaskModel.from_cells(cells, int(obj["padding"]))
        stage2 = SuperpixelStageModel(LinearModel.from_json(obj["stage2"]), float(obj["tau"]))
        return cls(int(obj["category_id"]), coarse, stage2)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Refiner":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


# --- coarse stage ----------------------------------------------------------------------


def _qualifying(candidates, instances, category):
    """``(candidate, best same-category ground truth)`` pairs with overlap > 0.7."""
    gts = [g for g in instances if g.category_id == category]
    if not gts:
        return []
    ov = overlap_matrix(candidates, gts)
    out = []
    for i, c in enumerate(candidates):
        j = int(np.argmax(ov[i]))
        if ov[i, j] > TRAIN_OVERLAP:
            out.append((c, gts[j]))
    return out


def coarse_input(feat, mask: BinaryMask, padding: int) -> np.ndarray:
    grid = discretize_to_grid(mask, bbox(mask), padding)
    return np.concatenate([np.asarray(feat, dtype=np.float64).ravel(), grid.ravel()])


def train_coarse_model(
    candidates: Sequence[Candidate],
    instances: Sequence[GroundTruthInstance],
    features: Optional[FeatureTable],
    category: int,
    cfg: TrainingConfig = REFINE_CONFIG,
    padding: int = DEFAULT_PADDING,
) -> CoarseMaskModel:
    """Fit 100 per-cell logistic models on candidates overlapping a ground truth by more than 0.7.

    A cell's label is 1 when at least half its pixels are ground-truth foreground.
    ``features=None`` means no appearance features (input is the region grid only).
    """
    pairs = _qualifying(candidates, instances, category)
    if not pairs:
        raise DegenerateInputError(f"category {category}: no candidate overlaps ground truth by more than 0.7")
    X, Y = [], []
    for c, g in pairs:
        feat = features.candidate(c.image_id, c.candidate_id) if features is not None else ()
        X.append(coarse_input(feat, c.mask, padding))
        Y.append(discretize_to_grid(g.mask, bbox(c.mask), padding).ravel() >= 0.5)
    cells = train_logistic_batch(np.array(X), np.array(Y, dtype=np.float64), cfg)
    return CoarseMaskModel.from_cells(cells, padding)


def predict_coarse(model: CoarseMaskModel, feat, region_grid) -> np.ndarray:
    x = np.concatenate([np.asarray(feat, dtype=np.float64).ravel(), np.asarray(region_grid, dtype=np.float64).ravel()])
    if x.shape[0] != model.weights.shape[0]:
        raise ValueError(f"input dimension {x.shape[0]} does not match model dimension {model.weights.shape[0]}")
    return expit(x @ model.weights + model.biases).reshape(GRID_SIZE, GRID_SIZE)


# --- superpixel stage ---------------------------------------------------------------------


def superpixel_inputs(coarse: CoarseMaskModel, feat, mask: BinaryMask, sp: SuperpixelMap):
    """Stage-two inputs for the superpixels touching the padded box of ``mask``.

    Returns ``(ids, projected, membership)``; membership is 1 when at least half
    of a superpixel lies inside the region.
    """
    box = bbox(mask)
    grid = discretize_to_grid(mask, box, coarse.padding)
    probs = predict_coarse(coarse, feat, grid)
    projected = project_to_superpixels(probs, box, coarse.padding, sp)
    membership = (sp.fraction_inside(mask) >= 0.5).astype(np.float64)
    ids = np.flatnonzero(superpixels_touching(box.padded(coarse.padding, sp.width, sp.height), sp) | (membership > 0))
    return ids, projected[ids], membership[ids]


def train_stage2(
    candidates: Sequence[Candidate],
    instances: Sequence[GroundTruthInstance],
    coarse: CoarseMaskModel,
    features: Optional[FeatureTable],
    superpixels: Mapping[str, SuperpixelMap],
    category: int,
    cfg: TrainingConfig = REFINE_CONFIG,
    tau: float = 0.5,
) -> SuperpixelStageModel:
    """Logistic model over (projected coarse value, membership) per superpixel.

    Trained on the same qualifying regions as the coarse model; a superpixel is
    positive when at least half its pixels are ground-truth foreground.
    """
    pairs = _qualifying(candidates, instances, category)
    if not pairs:
        raise DegenerateInputError(f"category {category}: no candidate overlaps ground truth by more than 0.7")
    X, y = [], []
    for c, g in pairs:
        sp = superpixels[c.image_id]
        feat = features.candidate(c.image_id, c.candidate_id) if features is not None else ()
        ids, projected, membership = superpixel_inputs(coarse, feat, c.mask, sp)
        X.append(np.column_stack([projected, membership]))
        y.append(sp.fraction_inside(g.mask)[ids] >= 0.5)
    return fit_stage2(np.vstack(X), np.concatenate(y), cfg, tau)


def fit_stage2(X, y, cfg: TrainingConfig = REFINE_CONFIG, tau: float = 0.5) -> SuperpixelStageModel:
    """Logistic fit on ``(projected, membership)`` rows with 0/1 superpixel labels."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 2:
        raise ValueError("stage-two inputs must have exactly 2 columns")
    if y.size == 0 or y.min() == y.max():
        raise DegenerateInputError("superpixel labels are all identical")
    return SuperpixelStageModel(_logistic_unchecked(X, y, cfg), tau)


def train_refiner(
    candidates, instances, features, superpixels, category: int,
    cfg: TrainingConfig = REFINE_CONFIG, padding: int = DEFAULT_PADDING, tau: float = 0.5,
) -> Refiner:
    coarse = train_coarse_model(candidates, instances, features, category, cfg, padding)
    stage2 = train_stage2(candidates, instances, coarse, features, superpixels, category, cfg, tau)
    return Refiner(category, coarse, stage2)


def refine_detection(
    det: Detection,
    coarse: CoarseMaskModel,
    stage2: SuperpixelStageModel,
    feat,
    sp: SuperpixelMap,
    padding: Optional[int] = None,
) -> Detection:
    """Replace the detection's mask by the union of superpixels the second stage keeps.

    Only superpixels touching the padded box (or the region) are considered.
    An empty result leaves the original mask in place.
    """
    if (sp.width, sp.height) != (det.mask.width, det.mask.height):
        raise ValueError("superpixel map does not cover the detection's image")
    if padding is not None and padding != coarse.padding:
        coarse = replace(coarse, padding=padding)
    ids, projected, membership = superpixel_inputs(coarse, feat, det.mask, sp)
    keep_ids = ids[stage2.prob(projected, membership) > stage2.tau]
    if keep_ids.size == 0:
        return det
    keep = np.zeros(sp.num_superpixels, dtype=bool)
    keep[keep_ids] = True
    return replace(det, mask=sp.mask_of(keep))
