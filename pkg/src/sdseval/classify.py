"""Linear SVM / logistic regression trainers and two-round region classifier training.

Both trainers run deterministic full-batch accelerated gradient descent with a
fixed step ``1/L`` and a monotone safeguard, so the recorded objective never
increases and the returned iterate is the best one seen.  The SVM minimises a
Huber-smoothed hinge whose gap to the true hinge is at most ``smoothing / 2``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from sdseval.dataset import Candidate, FeatureTable, GroundTruthInstance
from sdseval.masks import bbox, box_iou, overlap

log = logging.getLogger(__name__)

STALL_WINDOW = 50


class DegenerateInputError(ValueError):
    """Training data lacks one of the two classes, or no positives survive."""


@dataclass(frozen=True)
class TrainingConfig:
    lam: float = 1e-4
    max_epochs: int = 20000
    tolerance: float = 1e-7
    seed: int = 0
    positive_threshold: float = 0.5
    negative_threshold: float = 0.2
    label_kind: str = "region"
    smoothing: float = 1e-3
    standardize: bool = False

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if not 0 <= self.negative_threshold <= self.positive_threshold <= 1:
            raise ValueError("need 0 <= negative_threshold <= positive_threshold <= 1")
        if self.label_kind not in ("region", "box"):
            raise ValueError(f"label_kind must be region or box, not {self.label_kind!r}")


@dataclass(frozen=True, eq=False)
class LinearModel:
    weights: np.ndarray
    bias: float
    lam: float
    kind: str = "svm"
    info: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).copy()
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))
        if not (np.all(np.isfinite(w)) and np.isfinite(self.bias)):
            raise ValueError("model has non-finite entries")

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def __eq__(self, other):
        if not isinstance(other, LinearModel):
            return NotImplemented
        return (
            np.array_equal(self.weights, other.weights)
            and self.bias == other.bias
            and self.lam == other.lam
            and self.kind == other.kind
        )

    def to_json(self) -> dict:
        return {"w": self.weights.tolist(), "b": self.bias, "lambda": self.lam, "kind": self.kind}

    @classmethod
    def from_json(cls, obj: dict) -> "LinearModel":
        kind = obj.get("kind", "svm")
        if kind not in ("svm", "logistic"):
            raise ValueError(f"unknown model kind {kind!r}")
        return cls(np.asarray(obj["w"], dtype=np.float64), float(obj["b"]), float(obj["lambda"]), kind)


def score(model: LinearModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.dim:
        raise ValueError(f"feature dimension {X.shape[1]} does not match model dimension {model.dim}")
    return X @ model.weights + model.bias


def predict_prob(model: LinearModel, X) -> np.ndarray:
    return expit(score(model, X))


# --- objectives -------------------------------------------------------------------


def svm_objective(w, b, X, y, lam) -> float:
    """``lam/2 |w|^2 + mean(max(0, 1 - y (Xw + b)))`` with ``y`` in {-1, +1}."""
    margins = y * (X @ w + b)
    return 0.5 * lam * float(w @ w) + float(np.maximum(0.0, 1.0 - margins).mean())


def logistic_objective(w, b, X, y, lam) -> float:
    """``lam/2 |w|^2 + mean log-loss`` with ``y`` in {0, 1}."""
    z = X @ w + b
    loss = np.logaddexp(0.0, z) - y * z
    return 0.5 * lam * float(w @ w) + float(loss.mean())


def logistic_gradient(w, b, X, y, lam) -> tuple[np.ndarray, float]:
    r = expit(X @ w + b) - y
    n = X.shape[0]
    return X.T @ r / n + lam * w, float(r.sum() / n)


def _huber_hinge(margins, mu):
    """Smoothed hinge value and derivative w.r.t. the margin."""
    slack = 1.0 - margins
    value = np.where(slack >= mu, slack - 0.5 * mu, np.where(slack > 0, slack * slack / (2 * mu), 0.0))
    deriv = -np.clip(slack / mu, 0.0, 1.0)
    return value, deriv


# --- batched solver ---------------------------------------------------------------


def _fit_batch(X, Y, lam, cfg: TrainingConfig, loss: str):
    """Fit ``k`` independent linear models sharing design matrix ``X``.

    ``Y`` is ``(n, k)``.  Returns ``(W, b, history)`` with ``W`` of shape
    ``(d, k)`` and ``history`` the per-epoch summed objective.
    """
    n, d = X.shape
    k = Y.shape[1]
    Xa = np.hstack([X, np.ones((n, 1))])
    sigma_max = np.linalg.norm(Xa, 2) if n else 0.0
    if loss == "logistic":
        lipschitz = lam + sigma_max**2 / (4 * n)
    else:
        lipschitz = lam + sigma_max**2 / (cfg.smoothing * n)
    step = 1.0 / lipschitz
    reg = np.full(d + 1, lam)
    reg[-1] = 0.0

    def objective_and_grad(theta):
        z = Xa @ theta
        if loss == "logistic":
            value = (np.logaddexp(0.0, z) - Y * z).mean(axis=0)
            g = Xa.T @ (expit(z) - Y) / n
        else:
            h, dh = _huber_hinge(Y * z, cfg.smoothing)
            value = h.mean(axis=0)
            g = Xa.T @ (dh * Y) / n
        value = value + 0.5 * (reg[:, None] * theta * theta).sum(axis=0)
        return value, g + reg[:, None] * theta

    def objective(theta):
        return objective_and_grad(theta)[0]

    theta = np.zeros((d + 1, k))
    prev = theta.copy()
    fval, _ = objective_and_grad(theta)
    history = [float(fval.sum())]
    t = 1.0
    for epoch in range(cfg.max_epochs):
        t_next = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        momentum = (t - 1) / t_next
        look = theta + momentum * (theta - prev)
        _, g = objective_and_grad(look)
        trial = look - step * g
        ftrial = objective(trial)
        # monotone safeguard: keep the old iterate where the trial is worse
        worse = ftrial > fval
        prev = theta
        theta = np.where(worse[None, :], theta, trial)
        fval = np.where(worse, fval, ftrial)
        if worse.any():
            t = 1.0
        else:
            t = t_next
        history.append(float(fval.sum()))
        if np.abs(g).max() <= cfg.tolerance:
            break
        window = STALL_WINDOW
        if epoch >= window and history[-window - 1] - history[-1] <= cfg.tolerance * max(1.0, abs(history[-1])):
            break
    return theta[:-1], theta[-1], history


def _check_labels(y, values):
    present = set(np.unique(y).tolist())
    if not present <= set(values):
        raise ValueError(f"labels must be in {values}, got {sorted(present)}")
    if len(present) < 2:
        raise DegenerateInputError("training data contains only one class")


def _as_xy(X, y):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"{X.shape[0]} rows but {y.shape[0]} labels")
    return X, y


def train_svm(X, y, cfg: TrainingConfig = TrainingConfig()) -> LinearModel:
    """L2-regularised hinge-loss SVM with an unregularised bias; ``y`` in {-1, +1}."""
    X, y = _as_xy(X, y)
    _check_labels(y, (-1.0, 1.0))
    W, b, history = _fit_batch(X, y[:, None], cfg.lam, cfg, "svm")
    w, b = W[:, 0], float(b[0])
    return LinearModel(
        w, b, cfg.lam, "svm",
        info={"objective_history": history, "objective": svm_objective(w, b, X, y, cfg.lam)},
    )


def train_logistic(X, y, cfg: TrainingConfig = TrainingConfig()) -> LinearModel:
    """L2-regularised logistic regression; ``y`` in {0, 1}."""
    X, y = _as_xy(X, y)
    _check_labels(y, (0.0, 1.0))
    return _logistic_unchecked(X, y, cfg)


def _logistic_unchecked(X, y, cfg):
    W, b, history = _fit_batch(X, y[:, None], cfg.lam, cfg, "logistic")
    w, b = W[:, 0], float(b[0])
    return LinearModel(
        w, b, cfg.lam, "logistic",
        info={"objective_history": history, "objective": logistic_objective(w, b, X, y, cfg.lam)},
    )


def train_logistic_batch(X, Y, cfg: TrainingConfig) -> list[LinearModel]:
    """Independent logistic fits for every column of ``Y``.  Constant columns are allowed."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.asarray(Y, dtype=np.float64)
    W, b, history = _fit_batch(X, Y, cfg.lam, cfg, "logistic")
    return [
        LinearModel(W[:, j], b[j], cfg.lam, "logistic", info={"objective_history": history})
        for j in range(Y.shape[1])
    ]


# --- region classifier ------------------------------------------------------------


def label_overlap(a, b, kind: str) -> float:
    """Region overlap of two masks, or box IoU of their bounding boxes."""
    if kind == "box":
        return box_iou(bbox(a), bbox(b))
    return overlap(a, b)


def overlap_matrix(
    candidates: Sequence[Candidate], instances: Sequence[GroundTruthInstance], kind: str = "region"
) -> np.ndarray:
    """``(n_candidates, n_instances)`` overlaps; zero across different images."""
    out = np.zeros((len(candidates), len(instances)))
    by_image: dict[str, list[int]] = {}
    for j, g in enumerate(instances):
        by_image.setdefault(g.image_id, []).append(j)
    for i, c in enumerate(candidates):
        for j in by_image.get(c.image_id, ()):
            out[i, j] = label_overlap(c.mask, instances[j].mask, kind)
    return out


def train_region_classifier(
    candidates: Sequence[Candidate],
    instances: Sequence[GroundTruthInstance],
    features: FeatureTable,
    category: int,
    cfg: TrainingConfig = TrainingConfig(),
) -> LinearModel:
    """Two-round SVM training for one category.

    Round 1 uses ground-truth regions as positives and candidates whose best
    overlap with a same-category instance is below ``cfg.negative_threshold``
    as negatives.  Round 2 replaces each ground truth by its highest-scoring
    candidate overlapping it by more than ``cfg.positive_threshold`` and
    retrains with the same negatives.
    """
    gts = [g for g in instances if g.category_id == category]
    if not gts:
        raise DegenerateInputError(f"no ground truth for category {category}")
    ov = overlap_matrix(candidates, gts, cfg.label_kind)
    best = ov.max(axis=1) if gts else np.zeros(len(candidates))
    neg_idx = np.flatnonzero(best < cfg.negative_threshold)
    if neg_idx.size == 0:
        raise DegenerateInputError(f"no negatives for category {category}")

    cand_keys = [(c.image_id, "candidate", c.candidate_id) for c in candidates]
    X_all = features.matrix(cand_keys)
    X_neg = X_all[neg_idx]
    X_gt = features.matrix([(g.image_id, "instance", g.instance_id) for g in gts])
    mean, scale = _standardizer(np.vstack([X_gt, X_all]), cfg.standardize)

    def fit(X_pos):
        X = np.vstack([X_pos, X_neg])
        y = np.concatenate([np.ones(len(X_pos)), -np.ones(len(X_neg))])
        return train_svm((X - mean) / scale, y, cfg)

    round1 = fit(X_gt)
    scores = score(round1, (X_all - mean) / scale)

    positives = []
    discarded = []
    for j, g in enumerate(gts):
        eligible = np.flatnonzero(ov[:, j] > cfg.positive_threshold)
        if eligible.size == 0:
            discarded.append((g.image_id, g.instance_id))
            continue
        # highest score, ties to the lowest candidate id
        pick = min(eligible, key=lambda i: (-scores[i], candidates[i].candidate_id))
        positives.append((int(pick), j))
    if not positives:
        raise DegenerateInputError(
            f"category {category}: no ground truth has a candidate overlapping it by more than "
            f"{cfg.positive_threshold}"
        )
    if discarded:
        log.info("category %s: discarded %d ground truths without a positive candidate", category, len(discarded))

    round2 = fit(X_all[[i for i, _ in positives]])
    w = round2.weights / scale
    b = round2.bias - float(w @ mean)
    info = {
        "category_id": category,
        "round1_positives": len(gts),
        "negatives": [(candidates[i].image_id, candidates[i].candidate_id) for i in neg_idx],
        "positives": [
            {
                "image_id": candidates[i].image_id,
                "candidate_id": candidates[i].candidate_id,
                "instance_id": gts[j].instance_id,
                "overlap": float(ov[i, j]),
            }
            for i, j in positives
        ],
        "discarded": discarded,
        "round1_model": round1,
        "objective_history": round2.info["objective_history"],
        "objective": round2.info["objective"],
    }
    return LinearModel(w, b, cfg.lam, "svm", info=info)


def _standardizer(X, enabled: bool):
    d = X.shape[1]
    if not enabled or X.shape[0] == 0:
        return np.zeros(d), np.ones(d)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    return X.mean(axis=0), scale
