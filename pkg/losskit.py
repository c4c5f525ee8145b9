"""
Loss kernels module for the mask-text engine.
Framework-free float64 implementations of the training objectives: the
point-text contrastive loss, mask prediction losses (dice, BCE, objectness),
Hungarian matching and the mask-caption contrastive loss, plus analytic
gradients of the contrastive losses.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit, log_softmax

from errors import ContractError
from scene_model import EmbeddingMatrix, RegionMask3D

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7
DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossWeights:
    """Weights of the mask decoder objective."""
    lambda_obj: float = 2.0
    lambda_dice: float = 5.0
    lambda_bce: float = 2.0
    lambda_cap: float = 1.0

    def __post_init__(self):
        for name in ("lambda_obj", "lambda_dice", "lambda_bce", "lambda_cap"):
            value = getattr(self, name)
            if not (value >= 0 and np.isfinite(value)):
                raise ContractError(f"{name} must be finite and >= 0, got {value}")

    @classmethod
    def from_config(cls, config: Dict[str, Any]) -> "LossWeights":
        """Create loss weights from a configuration dictionary."""
        return cls(
            lambda_obj=float(config.get("lambda_obj", 2.0)),
            lambda_dice=float(config.get("lambda_dice", 5.0)),
            lambda_bce=float(config.get("lambda_bce", 2.0)),
            lambda_cap=float(config.get("lambda_cap", 1.0)),
        )


@dataclass(frozen=True)
class ContrastiveConfig:
    """
    Settings shared by both contrastive losses.

    formula_literal_denominator drops the temperature from the softmax
    denominator of the point loss, reproducing the printed formula.
    """
    temperature: float = 0.07
    normalize_embeddings: bool = True
    per_mask_mean: bool = True
    formula_literal_denominator: bool = False

    def __post_init__(self):
        if not (self.temperature > 0 and np.isfinite(self.temperature)):
            raise ContractError(f"temperature must be positive and finite, got {self.temperature}")

    @classmethod
    def from_config(cls, config: Dict[str, Any]) -> "ContrastiveConfig":
        """Create contrastive settings from a configuration dictionary."""
        return cls(
            temperature=float(config.get("temperature", 0.07)),
            normalize_embeddings=bool(config.get("normalize_embeddings", True)),
            per_mask_mean=bool(config.get("per_mask_mean", True)),
            formula_literal_denominator=bool(config.get("formula_literal_denominator", False)),
        )


@dataclass(frozen=True, eq=False)
class SoftMaskMatrix:
    """Q x N predicted mask probabilities, clamped away from 0 and 1."""
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ContractError(f"soft masks must be Q x N, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ContractError("soft masks contain non-finite values")
        values = np.clip(values, PROB_EPS, 1.0 - PROB_EPS)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def n_queries(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_points(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True, eq=False)
class ObjectnessScores:
    """Q x 2 raw objectness logits (column 1 = object)."""
    logits: np.ndarray

    def __post_init__(self):
        logits = np.array(self.logits, dtype=np.float64)
        if logits.ndim != 2 or logits.shape[1] != 2:
            raise ContractError(f"objectness scores must be Q x 2, got shape {logits.shape}")
        if not np.all(np.isfinite(logits)):
            raise ContractError("objectness scores contain non-finite values")
        logits.flags.writeable = False
        object.__setattr__(self, "logits", logits)


@dataclass(frozen=True)
class LossBreakdown:
    """Components of the mask decoder objective and the matching used."""
    obj: float
    dice: float
    bce: float
    cap: float
    total: float
    matches: List[Tuple[int, int]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "obj": self.obj,
            "dice": self.dice,
            "bce": self.bce,
            "cap": self.cap,
            "total": self.total,
            "matches": [[q, m] for q, m in self.matches],
        }


def _check_dims(a: EmbeddingMatrix, b: EmbeddingMatrix, what: str) -> None:
    if a.dim != b.dim:
        raise ContractError(f"{what}: embedding dims differ ({a.dim} vs {b.dim})")


def _rows(data: np.ndarray, normalize: bool, row_ids: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Return (rows used in dot products, row norms or ones)."""
    if not normalize:
        return data, np.ones(data.shape[0])
    norms = np.linalg.norm(data, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        row = int(zero[0]) if row_ids is None else int(row_ids[zero[0]])
        raise ContractError(f"embedding row {row} has zero norm")
    return data / norms[:, None], norms


def _through_normalization(grad: np.ndarray, unit: np.ndarray, norms: np.ndarray, normalize: bool) -> np.ndarray:
    if not normalize:
        return grad
    radial = np.sum(unit * grad, axis=1, keepdims=True)
    return (grad - unit * radial) / norms[:, None]


def sigmoid_masks(mask_emb: EmbeddingMatrix, point_emb: EmbeddingMatrix) -> SoftMaskMatrix:
    """
    Predicted soft masks S = sigmoid(Z_mask . Z_point^T).

    Args:
        mask_emb (EmbeddingMatrix): Q x D mask embeddings
        point_emb (EmbeddingMatrix): N x D point features

    Returns:
        SoftMaskMatrix: Q x N probabilities clamped to [1e-7, 1 - 1e-7]
    """
    _check_dims(mask_emb, point_emb, "sigmoid_masks")
    return SoftMaskMatrix(expit(mask_emb.data @ point_emb.data.T))


def _validate_regions(regions: Sequence[RegionMask3D], n_points: int, k: int) -> None:
    if k < 1:
        raise ContractError("contrastive loss needs at least one caption")
    if len(regions) != k:
        raise ContractError(f"got {len(regions)} regions for {k} caption embeddings")
    for index, region in enumerate(regions):
        if region.n_points != n_points:
            raise ContractError(f"region {index} refers to a cloud of {region.n_points} points, features have {n_points}")
        if region.is_empty:
            raise ContractError(f"region {index} is empty")


def _point_contrastive_terms(point_emb: EmbeddingMatrix, text_emb: EmbeddingMatrix,
                             regions: Sequence[RegionMask3D], cfg: ContrastiveConfig):
    _check_dims(point_emb, text_emb, "point_contrastive_loss")
    k = text_emb.count
    _validate_regions(regions, point_emb.count, k)

    rows = np.unique(np.concatenate([region.point_indices for region in regions]))
    a, point_norms = _rows(point_emb.data[rows], cfg.normalize_embeddings, rows)
    texts, text_norms = _rows(text_emb.data, cfg.normalize_embeddings)
    dots = a @ texts.T

    # weights[i, k]: contribution of log p(k | point i) to the loss
    weights = np.zeros((rows.size, k))
    for col, region in enumerate(regions):
        scale = 1.0 / region.size if cfg.per_mask_mean else 1.0
        weights[np.searchsorted(rows, region.point_indices), col] += scale / k

    tau = cfg.temperature
    if cfg.formula_literal_denominator:
        log_den = log_softmax(dots, axis=1) - dots
        log_prob = dots / tau + log_den
        probs = np.exp(log_softmax(dots, axis=1))
        grad_dots = weights.sum(axis=1, keepdims=True) * probs - weights / tau
    else:
        log_prob = log_softmax(dots / tau, axis=1)
        probs = np.exp(log_prob)
        grad_dots = (weights.sum(axis=1, keepdims=True) * probs - weights) / tau

    loss = -float(np.sum(weights * log_prob))
    return loss, rows, a, texts, grad_dots, point_norms, text_norms


def point_contrastive_loss(point_emb: EmbeddingMatrix, text_emb: EmbeddingMatrix,
                           regions: Sequence[RegionMask3D], cfg: ContrastiveConfig) -> float:
    """
    Region-weighted point-text contrastive loss.

    Every point of region k is pushed towards caption k against all K
    captions; per-region sums are divided by |s_k| when cfg.per_mask_mean
    and the result is averaged over the K regions.

    Args:
        point_emb (EmbeddingMatrix): N x D per-point features
        text_emb (EmbeddingMatrix): K x D caption embeddings
        regions (Sequence[RegionMask3D]): K non-empty regions aligned with text_emb
        cfg (ContrastiveConfig): Loss settings

    Returns:
        float: Loss value (>= 0 unless the literal denominator form is used)
    """
    return _point_contrastive_terms(point_emb, text_emb, regions, cfg)[0]


def point_contrastive_grad(point_emb: EmbeddingMatrix, text_emb: EmbeddingMatrix,
                           regions: Sequence[RegionMask3D],
                           cfg: ContrastiveConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    Analytic gradient of point_contrastive_loss.

    Returns:
        Tuple[np.ndarray, np.ndarray]: dL/d point_emb (N x D) and dL/d text_emb (K x D)
    """
    _, rows, a, texts, grad_dots, point_norms, text_norms = \
        _point_contrastive_terms(point_emb, text_emb, regions, cfg)

    grad_points = np.zeros(point_emb.data.shape)
    grad_points[rows] = _through_normalization(
        grad_dots @ texts, a, point_norms, cfg.normalize_embeddings)
    grad_texts = _through_normalization(
        grad_dots.T @ a, texts, text_norms, cfg.normalize_embeddings)
    return grad_points, grad_texts


def _indicator(pred_row: np.ndarray, gt: RegionMask3D) -> np.ndarray:
    if pred_row.ndim != 1 or pred_row.size != gt.n_points:
        raise ContractError(f"prediction has {pred_row.size} entries, region expects {gt.n_points}")
    return gt.to_dense().astype(np.float64)


def dice_loss(pred_row: Sequence[float], gt: RegionMask3D) -> float:
    """
    Smoothed dice loss 1 - (2|p.g| + 1) / (|p| + |g| + 1).

    Args:
        pred_row (Sequence[float]): N soft values in [0, 1]
        gt (RegionMask3D): Ground-truth region

    Returns:
        float: Loss in [0, 1]
    """
    pred = np.asarray(pred_row, dtype=np.float64)
    target = _indicator(pred, gt)
    if np.any(pred < 0) or np.any(pred > 1):
        raise ContractError("dice_loss predictions must lie in [0, 1]")
    numerator = 2.0 * float(np.dot(pred, target)) + DICE_SMOOTH
    denominator = float(pred.sum()) + float(target.sum()) + DICE_SMOOTH
    return 1.0 - numerator / denominator


def bce_loss(pred_row: Sequence[float], gt: RegionMask3D) -> float:
    """
    Mean binary cross entropy over the N points (predictions clamped to [1e-7, 1 - 1e-7]).
    """
    pred = np.asarray(pred_row, dtype=np.float64)
    target = _indicator(pred, gt)
    p = np.clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    terms = target * np.log(p) + (1.0 - target) * np.log1p(-p)
    return -float(np.mean(terms))


def objectness_loss(scores: ObjectnessScores, matched: Sequence[bool]) -> float:
    """
    Mean two-class cross entropy of the objectness logits.

    Args:
        scores (ObjectnessScores): Q x 2 logits
        matched (Sequence[bool]): Whether each query was matched to a GT mask

    Returns:
        float: Loss (0.0 when Q = 0)
    """
    flags = np.asarray(matched, dtype=bool)
    if flags.shape != (scores.logits.shape[0],):
        raise ContractError(f"got {flags.size} matched flags for {scores.logits.shape[0]} queries")
    if flags.size == 0:
        return 0.0
    log_probs = log_softmax(scores.logits, axis=1)
    picked = log_probs[np.arange(flags.size), flags.astype(np.int64)]
    return -float(np.mean(picked))


def _optimal_cost(cost: np.ndarray, required: int):
    """Minimal cost of `required` disjoint matches in `cost`, or None if impossible."""
    if required == 0:
        return 0.0
    if min(cost.shape) < required:
        return None
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def hungarian_match(cost: Sequence[Sequence[float]]) -> List[Tuple[int, int]]:
    """
    Minimum-cost assignment between Q predictions and M targets.

    Among co-optimal assignments the lexicographically smallest list of
    sorted (q, m) pairs is returned, so results do not depend on solver
    internals.

    Args:
        cost (Sequence[Sequence[float]]): Q x M finite cost matrix

    Returns:
        List[Tuple[int, int]]: min(Q, M) pairs sorted by q
    """
    matrix = np.asarray(cost, dtype=np.float64)
    if matrix.ndim != 2:
        raise ContractError(f"cost must be a 2D matrix, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise ContractError("cost matrix contains non-finite values")
    n_rows, n_cols = matrix.shape
    need = min(n_rows, n_cols)
    if need == 0:
        return []

    best = _optimal_cost(matrix, need)
    tolerance = 1e-12 * max(1.0, float(np.abs(matrix).max()) * need)

    assignment: List[Tuple[int, int]] = []
    free_cols = list(range(n_cols))
    fixed = 0.0
    for q in range(n_rows):
        if len(assignment) == need:
            break
        for m in free_cols:
            rest_cols = [c for c in free_cols if c != m]
            rest = _optimal_cost(matrix[q + 1:][:, rest_cols], need - len(assignment) - 1)
            if rest is not None and fixed + matrix[q, m] + rest <= best + tolerance:
                assignment.append((q, m))
                fixed += matrix[q, m]
                free_cols.remove(m)
                break
    return assignment


def match_cost(pred: SoftMaskMatrix, gt_regions: Sequence[RegionMask3D], w: LossWeights) -> np.ndarray:
    """
    Matching cost lambda_bce * BCE + lambda_dice * dice for every (query, GT) pair.

    Returns:
        np.ndarray: Q x M cost matrix
    """
    for index, region in enumerate(gt_regions):
        if region.n_points != pred.n_points:
            raise ContractError(f"GT region {index} has {region.n_points} points, predictions have {pred.n_points}")
    if not gt_regions:
        return np.zeros((pred.n_queries, 0))

    p = pred.values
    target = np.stack([region.to_dense() for region in gt_regions]).astype(np.float64)
    n = p.shape[1]

    bce = -(np.log(p) @ target.T + np.log1p(-p) @ (1.0 - target).T) / n
    inter = p @ target.T
    dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / (p.sum(axis=1)[:, None] + target.sum(axis=1)[None, :] + DICE_SMOOTH)
    return w.lambda_bce * bce + w.lambda_dice * dice


def _mask_caption_terms(mask_emb: EmbeddingMatrix, caption_emb: EmbeddingMatrix, cfg: ContrastiveConfig):
    _check_dims(mask_emb, caption_emb, "mask_caption_loss")
    if mask_emb.count != caption_emb.count:
        raise ContractError(f"got {mask_emb.count} mask rows for {caption_emb.count} caption rows")
    if mask_emb.count == 0:
        raise ContractError("mask_caption_loss needs at least one matched pair")

    a, mask_norms = _rows(mask_emb.data, cfg.normalize_embeddings)
    b, caption_norms = _rows(caption_emb.data, cfg.normalize_embeddings)
    m = a.shape[0]
    log_prob = log_softmax(a @ b.T / cfg.temperature, axis=1)
    loss = -float(np.mean(np.diag(log_prob)))
    grad_dots = (np.exp(log_prob) - np.eye(m)) / (m * cfg.temperature)
    return loss, a, b, grad_dots, mask_norms, caption_norms


def mask_caption_loss(mask_emb: EmbeddingMatrix, caption_emb: EmbeddingMatrix, cfg: ContrastiveConfig) -> float:
    """
    Contrastive loss between matched mask embeddings and caption embeddings.

    Row m of mask_emb is the prediction matched to caption m; the other
    captions act as negatives.
    """
    return _mask_caption_terms(mask_emb, caption_emb, cfg)[0]


def mask_caption_grad(mask_emb: EmbeddingMatrix, caption_emb: EmbeddingMatrix,
                      cfg: ContrastiveConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    Analytic gradient of mask_caption_loss.

    Returns:
        Tuple[np.ndarray, np.ndarray]: dL/d mask_emb and dL/d caption_emb (both M x D)
    """
    _, a, b, grad_dots, mask_norms, caption_norms = _mask_caption_terms(mask_emb, caption_emb, cfg)
    grad_masks = _through_normalization(grad_dots @ b, a, mask_norms, cfg.normalize_embeddings)
    grad_captions = _through_normalization(grad_dots.T @ a, b, caption_norms, cfg.normalize_embeddings)
    return grad_masks, grad_captions


def total_mask_loss(scores: ObjectnessScores,
                    pred: SoftMaskMatrix,
                    gt_regions: Sequence[RegionMask3D],
                    mask_emb: EmbeddingMatrix,
                    caption_emb: EmbeddingMatrix,
                    w: LossWeights,
                    cfg: ContrastiveConfig) -> LossBreakdown:
    """
    Full mask decoder objective.

    Queries are matched to GT masks by hungarian_match over match_cost; dice
    and BCE are averaged over matched pairs, objectness covers all queries
    and the caption loss uses the matched mask rows against the caption rows.

    Args:
        scores (ObjectnessScores): Q x 2 objectness logits
        pred (SoftMaskMatrix): Q x N predicted masks
        gt_regions (Sequence[RegionMask3D]): M ground-truth masks
        mask_emb (EmbeddingMatrix): Q x D mask embeddings
        caption_emb (EmbeddingMatrix): M x D caption embeddings (row m for GT m)
        w (LossWeights): Component weights
        cfg (ContrastiveConfig): Caption loss settings

    Returns:
        LossBreakdown: Weighted total and its components
    """
    n_queries = pred.n_queries
    if scores.logits.shape[0] != n_queries or mask_emb.count != n_queries:
        raise ContractError(
            f"inconsistent query counts: {scores.logits.shape[0]} scores, {n_queries} masks, {mask_emb.count} mask embeddings"
        )
    if caption_emb.count != len(gt_regions):
        raise ContractError(f"got {caption_emb.count} caption embeddings for {len(gt_regions)} GT masks")

    if not gt_regions:
        obj = objectness_loss(scores, np.zeros(n_queries, dtype=bool))
        logger.debug("No GT masks; reporting objectness loss only")
        return LossBreakdown(obj=obj, dice=0.0, bce=0.0, cap=0.0, total=w.lambda_obj * obj)

    matches = hungarian_match(match_cost(pred, gt_regions, w))
    matched = np.zeros(n_queries, dtype=bool)
    for q, _ in matches:
        matched[q] = True

    obj = objectness_loss(scores, matched)
    if matches:
        dice = float(np.mean([dice_loss(pred.values[q], gt_regions[m]) for q, m in matches]))
        bce = float(np.mean([bce_loss(pred.values[q], gt_regions[m]) for q, m in matches]))
        by_target = sorted(matches, key=lambda pair: pair[1])
        cap = mask_caption_loss(
            EmbeddingMatrix(mask_emb.data[[q for q, _ in by_target]]),
            EmbeddingMatrix(caption_emb.data[[m for _, m in by_target]]),
            cfg,
        )
    else:
        dice = bce = cap = 0.0

    total = w.lambda_obj * obj + w.lambda_dice * dice + w.lambda_bce * bce + w.lambda_cap * cap
    return LossBreakdown(obj=obj, dice=dice, bce=bce, cap=cap, total=total, matches=list(matches))
