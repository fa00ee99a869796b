"""Token-importance classifier: logistic regression on hidden states.

Features come straight from mined mismatch records; which hidden vectors
are used is a two-axis choice (encode the position before the mismatch or
the draft token itself; take the draft model's state, the target's, or
both concatenated).  Training is full-batch gradient descent with a
backtracking line search, the L2 strength is grid-searched on a held-out
task split, and the operating threshold is calibrated to a target recall
on important tokens.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

import numpy as np

from .lm import DataError

C_GRID = tuple(10.0 ** -i for i in range(0, 8))  # 1e0 .. 1e-7

TOKEN_SOURCES = ("prev", "draft_token")
MODEL_SOURCES = ("draft", "target", "both")


class TrainingError(DataError):
    pass


class CalibrationError(DataError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    """Which hidden states feed the classifier."""

    token_source: str = "draft_token"
    model_source: str = "both"

    def __post_init__(self):
        if self.token_source not in TOKEN_SOURCES:
            raise DataError(f"token_source must be one of {TOKEN_SOURCES}")
        if self.model_source not in MODEL_SOURCES:
            raise DataError(f"model_source must be one of {MODEL_SOURCES}")


def assemble_features(record, cfg: FeatureConfig) -> np.ndarray:
    """Feature vector for one mismatch record (draft part first on both)."""
    if cfg.token_source == "prev":
        d, t = record.prev_draft_hidden, record.prev_target_hidden
    else:
        d, t = record.draft_hidden, record.target_hidden
    if cfg.model_source == "draft":
        vec = np.asarray(d, dtype=float)
    elif cfg.model_source == "target":
        vec = np.asarray(t, dtype=float)
    else:
        vec = np.concatenate([d, t]).astype(float)
    if not np.all(np.isfinite(vec)):
        raise DataError("non-finite feature vector")
    return vec


@dataclass
class TrainingExample:
    features: np.ndarray
    label: bool
    task_id: str


def build_examples(records, cfg: FeatureConfig) -> list[TrainingExample]:
    """Assemble examples, insisting on one consistent feature dimension."""
    examples = []
    dim = None
    for r in records:
        vec = assemble_features(r, cfg)
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise DataError(
                f"feature dimension mismatch: {len(vec)} != {dim}; "
                "records come from models with different hidden sizes")
        examples.append(TrainingExample(vec, bool(r.important), r.task_id))
    if not examples:
        raise DataError("no records to build examples from")
    return examples


@dataclass
class JudgeModel:
    """Trained importance classifier plus its operating threshold."""

    weights: np.ndarray
    bias: float
    feature_config: FeatureConfig
    C: float
    threshold: float = 0.5
    dataset_hash: str = ""
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise DataError("threshold must lie strictly inside (0, 1)")

    @property
    def feature_dim(self) -> int:
        return len(self.weights)


def predict_importance(judge: JudgeModel, features) -> float:
    """P(important | features) via the logistic link."""
    x = np.asarray(features, dtype=float)
    if x.shape != (judge.feature_dim,):
        raise DataError(f"expected {judge.feature_dim} features, got {x.shape}")
    z = float(judge.weights @ x + judge.bias)
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


def _loss_grad(X, y, w, b, C):
    z = X @ w + b
    # mean log-loss, numerically stable in both tails
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z)) + 0.5 * C * float(w @ w)
    p = np.empty_like(z)
    pos = z >= 0
    p[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    p[~pos] = e / (1.0 + e)
    diff = p - y
    grad_w = X.T @ diff / len(y) + C * w
    grad_b = float(diff.mean())
    return loss, grad_w, grad_b


def train_logreg(examples, C: float, max_iters: int = 500, tol: float = 1e-8,
                 cfg: FeatureConfig | None = None) -> JudgeModel:
    """Full-batch gradient descent with Armijo backtracking, from zeros.

    Minimizes mean log-loss + C/2 * ||w||^2 (bias unregularized).  The
    whole procedure is deterministic, so retraining on identical inputs
    reproduces identical parameters bit for bit.
    """
    if C < 0:
        raise TrainingError("C must be >= 0")
    X = np.stack([e.features for e in examples]).astype(float)
    y = np.array([1.0 if e.label else 0.0 for e in examples])
    if len(set(int(v) for v in y)) < 2:
        raise TrainingError("training data has a single class")
    cfg = cfg or FeatureConfig()
    w = np.zeros(X.shape[1])
    b = 0.0
    step = 1.0
    loss, gw, gb = _loss_grad(X, y, w, b, C)
    for _ in range(max_iters):
        gnorm2 = float(gw @ gw) + gb * gb
        if np.sqrt(gnorm2) < tol:
            break
        step = min(step * 2.0, 1e6)  # optimistic growth, then backtrack
        improved = False
        while step >= 1e-12:
            w2 = w - step * gw
            b2 = b - step * gb
            loss2, gw2, gb2 = _loss_grad(X, y, w2, b2, C)
            if loss2 <= loss - 1e-4 * step * gnorm2:
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        w, b, loss, gw, gb = w2, b2, loss2, gw2, gb2
    return JudgeModel(weights=w, bias=b, feature_config=cfg, C=C)


def roc_auc(labels, scores) -> float:
    """Area under the ROC curve via the rank statistic (ties averaged)."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=float)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC-AUC needs both classes")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos_rank_sum = float(ranks[labels].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def split_by_task(examples, split_seed: int, val_fraction: float = 0.1):
    """Deterministic 90/10 split on task ids, not individual rows."""
    ids = sorted({e.task_id for e in examples})
    if len(ids) < 2:
        raise TrainingError("need at least 2 tasks for a task-level split")
    rng = random.Random(f"split:{split_seed}")
    rng.shuffle(ids)
    n_val = max(1, int(round(len(ids) * val_fraction)))
    val_ids = set(ids[:n_val])
    train = [e for e in examples if e.task_id not in val_ids]
    val = [e for e in examples if e.task_id in val_ids]
    if not train or not val:
        raise TrainingError("degenerate task split")
    return train, val


@dataclass
class GridSearchResult:
    model: JudgeModel
    C: float
    val_auc: float
    aucs: dict[float, float] = field(default_factory=dict)
    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)


def grid_search_C(examples, split_seed: int = 0, cfg: FeatureConfig | None = None,
                  max_iters: int = 500) -> GridSearchResult:
    """Pick the L2 strength by validation ROC-AUC over the fixed grid.

    Ties go to the larger C (stronger regularization).  The returned
    model is the one fit on the training split at the winning C; the
    validation split is kept for threshold calibration.
    """
    cfg = cfg or FeatureConfig()
    train, val = split_by_task(examples, split_seed)
    val_labels = [e.label for e in val]
    if len(set(val_labels)) < 2:
        raise TrainingError("validation split has a single class")
    best = None
    aucs = {}
    for C in C_GRID:
        model = train_logreg(train, C, max_iters=max_iters, cfg=cfg)
        scores = [predict_importance(model, e.features) for e in val]
        auc = roc_auc(val_labels, scores)
        aucs[C] = auc
        # strict > keeps the earlier (larger) C on ties
        if best is None or auc > best[0]:
            best = (auc, C, model)
    auc, C, model = best
    return GridSearchResult(model=model, C=C, val_auc=auc, aucs=aucs,
                            train=train, validation=val)


def calibrate_threshold(judge: JudgeModel, validation, target_recall: float = 0.90) -> float:
    """Largest threshold keeping recall on important tokens >= target.

    A draft token is accepted iff its importance score falls below the
    threshold, so recall at threshold tau is the fraction of important
    examples scoring >= tau.
    """
    if not 0.0 < target_recall <= 1.0:
        raise CalibrationError("target_recall must be in (0, 1]")
    scores = sorted((predict_importance(judge, e.features) for e in validation
                     if e.label), reverse=True)
    if len(scores) < 10:
        raise CalibrationError(
            f"need >= 10 important validation examples, have {len(scores)}")
    k = int(np.ceil(target_recall * len(scores)))
    tau = scores[k - 1]
    tau = min(max(tau, 1e-12), 1.0 - 1e-12)
    achieved = sum(s >= tau for s in scores) / len(scores)
    if achieved < target_recall:
        raise CalibrationError(
            f"recall {achieved:.3f} below target {target_recall} at tau={tau}")
    return float(tau)


def save_judge(path: str, judge: JudgeModel) -> None:
    with open(path, "w") as f:
        json.dump({
            "feature_config": {"token_source": judge.feature_config.token_source,
                               "model_source": judge.feature_config.model_source},
            "feature_dim": judge.feature_dim,
            "weights": judge.weights.tolist(),
            "bias": judge.bias,
            "C": judge.C,
            "threshold": judge.threshold,
            "dataset_hash": judge.dataset_hash,
            "seed": judge.seed,
        }, f, indent=1)
        f.write("\n")


def load_judge(path: str) -> JudgeModel:
    try:
        with open(path) as f:
            obj = json.load(f)
        cfg = FeatureConfig(**obj["feature_config"])
        weights = np.array(obj["weights"], dtype=float)
        if len(weights) != int(obj["feature_dim"]):
            raise DataError("weight vector does not match feature_dim")
        return JudgeModel(weights=weights, bias=float(obj["bias"]),
                          feature_config=cfg, C=float(obj["C"]),
                          threshold=float(obj["threshold"]),
                          dataset_hash=obj.get("dataset_hash", ""),
                          seed=int(obj.get("seed", 0)))
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as e:
        raise DataError(f"bad judge file {path}: {e}") from e


def expected_feature_dim(cfg: FeatureConfig, draft, target) -> int:
    if cfg.model_source == "draft":
        return draft.hidden_dim
    if cfg.model_source == "target":
        return target.hidden_dim
    return draft.hidden_dim + target.hidden_dim


def check_judge_compatible(judge: JudgeModel, draft, target) -> None:
    """Reject a judge whose feature layout cannot come from these models."""
    want = expected_feature_dim(judge.feature_config, draft, target)
    if judge.feature_dim != want:
        raise DataError(
            f"judge expects {judge.feature_dim} features but models produce {want}")
