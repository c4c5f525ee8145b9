"""
Metrics module for the mask-text engine.
Dataset quality statistics (coverage, mask entropy, caption token counts)
and benchmark evaluators for open-vocabulary semantic and instance
segmentation.
"""

import logging
import re
import unicodedata
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import entropy

from errors import ContractError
from scene_model import EmbeddingMatrix, MaskTextPair, PointCloud, RegionMask3D, iou_matrix

logger = logging.getLogger(__name__)

AP_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))

_NON_TOKEN_CHARS = re.compile(r"[^\w\s-]|_")


@dataclass(frozen=True)
class LabelClass:
    id: int
    name: str
    background: bool = False


@dataclass(frozen=True)
class LabelSet:
    """
    Benchmark classes. Background classes are excluded from f-metrics.
    """
    classes: Tuple[LabelClass, ...]

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        ids = [c.id for c in self.classes]
        if any(i < 0 for i in ids):
            raise ContractError("class ids must be >= 0")
        if len(set(ids)) != len(ids):
            raise ContractError("class ids must be unique")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ContractError("class names must be unique")
        if not any(not c.background for c in self.classes):
            raise ContractError("label set needs at least one non-background class")

    @property
    def ids(self) -> List[int]:
        return [c.id for c in self.classes]

    @property
    def foreground_ids(self) -> List[int]:
        return [c.id for c in self.classes if not c.background]


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """
    C x C point counts over labeled points, rows = ground truth and
    columns = prediction, in LabelSet order. `unpredicted` counts labeled
    points whose prediction is -1.
    """
    counts: np.ndarray
    unpredicted: np.ndarray

    @classmethod
    def from_labels(cls, pred: Sequence[int], gt: Sequence[int], labels: LabelSet) -> "ConfusionMatrix":
        pred = np.asarray(pred, dtype=np.int64)
        gt = np.asarray(gt, dtype=np.int64)
        if pred.shape != gt.shape or pred.ndim != 1:
            raise ContractError(f"prediction and GT must be equal-length vectors ({pred.shape} vs {gt.shape})")

        lookup = {class_id: index for index, class_id in enumerate(labels.ids)}
        for name, values in (("prediction", pred), ("GT", gt)):
            unknown = sorted(set(np.unique(values).tolist()) - set(lookup) - {-1})
            if unknown:
                raise ContractError(f"{name} contains unknown class id {unknown[0]}")

        n_classes = len(lookup)
        index_of = np.vectorize(lambda v: lookup.get(v, -1), otypes=[np.int64])
        labeled = gt >= 0
        gt_index = index_of(gt[labeled]) if labeled.any() else np.zeros(0, dtype=np.int64)
        pred_index = index_of(pred[labeled]) if labeled.any() else np.zeros(0, dtype=np.int64)

        predicted = pred_index >= 0
        flat = n_classes * gt_index[predicted] + pred_index[predicted]
        counts = np.bincount(flat, minlength=n_classes ** 2).reshape(n_classes, n_classes)
        unpredicted = np.bincount(gt_index[~predicted], minlength=n_classes)
        return cls(counts=counts, unpredicted=unpredicted)

    def class_scores(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return per-class (IoU, accuracy, GT support); NaN where a class has no GT points."""
        tp = np.diag(self.counts).astype(np.float64)
        support = self.counts.sum(axis=1) + self.unpredicted
        predicted = self.counts.sum(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            iou = np.where(support > 0, tp / (support + predicted - tp), np.nan)
            acc = np.where(support > 0, tp / support, np.nan)
        return iou, acc, support


@dataclass(frozen=True, eq=False)
class InstancePrediction:
    """A scored instance mask with its predicted class."""
    region: RegionMask3D
    score: float
    semantic_id: int

    def __post_init__(self):
        if self.region.is_empty:
            raise ContractError("instance prediction has an empty region")
        if not np.isfinite(self.score):
            raise ContractError(f"instance prediction score must be finite, got {self.score}")


@dataclass(frozen=True)
class EntropyReport:
    per_mask: Dict[str, float]
    mean_bits: float
    skipped: int


@dataclass(frozen=True)
class CaptionStats:
    unique_normalized_tokens: int
    total_tokens: int
    vocabulary: List[str] = field(default_factory=list)


@dataclass(frozen=True)
class SemanticScores:
    f_miou: float
    f_macc: float
    miou: float
    macc: float
    per_class_iou: Dict[str, float]
    per_class_acc: Dict[str, float]
    group_miou: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "f_miou": self.f_miou,
            "f_macc": self.f_macc,
            "miou": self.miou,
            "macc": self.macc,
            "per_class_iou": self.per_class_iou,
            "per_class_acc": self.per_class_acc,
            "group_miou": self.group_miou,
        }


@dataclass(frozen=True)
class InstanceScores:
    mAP: float
    AP50: float
    AP25: float
    per_class: Dict[str, Dict[str, float]]

    def to_dict(self) -> dict:
        return {"mAP": self.mAP, "AP50": self.AP50, "AP25": self.AP25, "per_class": self.per_class}


def _check_cloud_size(pairs: Iterable[MaskTextPair], n_points: int) -> None:
    for pair in pairs:
        if pair.region.n_points != n_points:
            raise ContractError(
                f"pair {pair.pair_id} refers to {pair.region.n_points} points, scene has {n_points}"
            )


def coverage(pairs: Sequence[MaskTextPair], n_points: int) -> float:
    """
    Percentage of scene points covered by at least one captioned region.

    Args:
        pairs (Sequence[MaskTextPair]): Pairs of one scene
        n_points (int): Scene point count

    Returns:
        float: Coverage in [0, 100]
    """
    if n_points < 1:
        raise ContractError(f"scene must have at least one point, got {n_points}")
    _check_cloud_size(pairs, n_points)
    covered = np.zeros(n_points, dtype=bool)
    for pair in pairs:
        covered[pair.region.point_indices] = True
    return 100.0 * int(covered.sum()) / n_points


def _entropy_bits(labels: np.ndarray) -> float:
    counts = np.bincount(labels)
    return float(entropy(counts[counts > 0], base=2)) + 0.0


def mask_entropy(pairs: Sequence[MaskTextPair], cloud: PointCloud) -> EntropyReport:
    """
    Shannon entropy (bits) of the GT instance ids inside each mask.

    Unlabeled points (-1) are ignored; masks without labeled points are
    skipped and counted.

    Args:
        pairs (Sequence[MaskTextPair]): Pairs of one scene
        cloud (PointCloud): Scene cloud carrying instance_id

    Returns:
        EntropyReport: Per-mask entropy keyed by pair id, unweighted mean and skip count
    """
    if cloud.instance_id is None:
        raise ContractError("mask entropy needs a cloud with instance labels")
    _check_cloud_size(pairs, cloud.n_points)

    per_mask = {}
    skipped = 0
    for pair in pairs:
        labels = cloud.instance_id[pair.region.point_indices]
        labels = labels[labels >= 0]
        if labels.size == 0:
            skipped += 1
            continue
        per_mask[pair.pair_id] = _entropy_bits(labels)

    mean = float(np.mean(list(per_mask.values()))) if per_mask else 0.0
    return EntropyReport(per_mask=per_mask, mean_bits=mean, skipped=skipped)


def normalize_tokens(text: str) -> List[str]:
    """
    Tokenize a caption: NFC, lowercase, drop characters other than letters,
    digits and internal hyphens, split on whitespace.
    """
    text = unicodedata.normalize("NFC", text).lower()
    text = _NON_TOKEN_CHARS.sub(" ", text)
    tokens = (token.strip("-") for token in text.split())
    return [token for token in tokens if token]


def singularize(token: str) -> str:
    """
    Drop a plural "s" from tokens longer than three characters (not "ss").

    Args:
        token (str): Normalized token

    Returns:
        str: Singular form used for vocabulary counts
    """
    if len(token) > 3 and token.endswith("s") and not token.endswith("ss"):
        return token[:-1]
    return token


def caption_stats(captions: Iterable[str], stopwords: Iterable[str]) -> CaptionStats:
    """
    Count caption tokens and the normalized vocabulary.

    Args:
        captions (Iterable[str]): Caption texts
        stopwords (Iterable[str]): Words dropped before vocabulary counting

    Returns:
        CaptionStats: Unique normalized tokens, total tokens and sorted vocabulary
    """
    stop = {word.lower() for word in stopwords}
    vocabulary = set()
    total = 0
    for caption in captions:
        tokens = normalize_tokens(caption)
        total += len(tokens)
        vocabulary.update(singularize(token) for token in tokens if token not in stop)
    ordered = sorted(vocabulary)
    return CaptionStats(unique_normalized_tokens=len(ordered), total_tokens=total, vocabulary=ordered)


def semantic_predict(point_feats: EmbeddingMatrix, class_emb: EmbeddingMatrix) -> np.ndarray:
    """
    Assign each point the class row with the highest cosine similarity.

    Returns:
        np.ndarray: N row indices into class_emb (lowest index on ties)
    """
    if point_feats.dim != class_emb.dim:
        raise ContractError(f"feature dim {point_feats.dim} differs from class embedding dim {class_emb.dim}")
    if class_emb.count < 1:
        raise ContractError("need at least one class embedding")
    features = point_feats.l2_normalized()
    classes = class_emb.l2_normalized()
    return np.argmax(features @ classes.T, axis=1).astype(np.int64)


def _nanmean_percent(values: np.ndarray) -> float:
    values = values[~np.isnan(values)]
    if values.size == 0:
        return 0.0
    return 100.0 * float(np.mean(values))


def fg_miou_macc(pred: Sequence[int], gt: Sequence[int], labels: LabelSet,
                 groups: Optional[Dict[str, Sequence[int]]] = None) -> SemanticScores:
    """
    Foreground mIoU / mAcc over classes present in GT.

    Args:
        pred (Sequence[int]): Predicted class id per point
        gt (Sequence[int]): GT class id per point, -1 = ignore
        labels (LabelSet): Benchmark classes
        groups (Optional[Dict[str, Sequence[int]]]): Optional class-id groups
            (e.g. head / common / tail) reported as foreground mIoU each

    Returns:
        SemanticScores: f-metrics and all-class metrics (x100), per-class IoU / accuracy as fractions
    """
    confusion = ConfusionMatrix.from_labels(pred, gt, labels)
    iou, acc, support = confusion.class_scores()
    foreground = np.array([not c.background for c in labels.classes])

    if not np.any(foreground & (support > 0)):
        logger.warning("No foreground class is present in GT; f-metrics reported as 0")

    f_iou = np.where(foreground, iou, np.nan)
    f_acc = np.where(foreground, acc, np.nan)

    per_class_iou = {}
    per_class_acc = {}
    for index, c in enumerate(labels.classes):
        if support[index] > 0:
            per_class_iou[c.name] = float(iou[index])
            per_class_acc[c.name] = float(acc[index])

    group_miou = {}
    for group, class_ids in (groups or {}).items():
        members = np.array([class_id in set(class_ids) for class_id in labels.ids])
        group_miou[group] = _nanmean_percent(f_iou[members])

    return SemanticScores(
        f_miou=_nanmean_percent(f_iou),
        f_macc=_nanmean_percent(f_acc),
        miou=_nanmean_percent(iou),
        macc=_nanmean_percent(acc),
        per_class_iou=per_class_iou,
        per_class_acc=per_class_acc,
        group_miou=group_miou,
    )


def average_precision(is_tp: Sequence[bool], n_gt: int) -> float:
    """
    All-point interpolated AP of a score-ordered detection list.

    Args:
        is_tp (Sequence[bool]): True/false positive flag per detection, best score first
        n_gt (int): Number of GT instances

    Returns:
        float: Area under the interpolated precision-recall curve
    """
    if n_gt == 0:
        return 0.0
    flags = np.asarray(is_tp, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _greedy_match(order: np.ndarray, ious: np.ndarray, threshold: float) -> List[bool]:
    matched = np.zeros(ious.shape[1], dtype=bool)
    flags = []
    for p in order:
        candidates = np.where(~matched & (ious[p] >= threshold), ious[p], -1.0)
        best = int(np.argmax(candidates)) if candidates.size else -1
        if best >= 0 and candidates[best] >= 0:
            matched[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def instance_ap(preds: Sequence[InstancePrediction],
                gt: Sequence[Tuple[RegionMask3D, int]],
                labels: LabelSet,
                thresholds: Sequence[float] = AP_THRESHOLDS) -> InstanceScores:
    """
    Instance segmentation AP at IoU thresholds 0.50:0.05:0.95, 0.50 and 0.25.

    Predictions of each class are taken in descending score order and
    greedily matched to the unmatched GT instance of the same class with the
    highest IoU at or above the threshold. Class APs are averaged over the
    non-background classes present in GT.

    Args:
        preds (Sequence[InstancePrediction]): Scored instance predictions
        gt (Sequence[Tuple[RegionMask3D, int]]): GT instance regions with class ids
        labels (LabelSet): Benchmark classes
        thresholds (Sequence[float]): IoU thresholds averaged into mAP

    Returns:
        InstanceScores: mAP, AP50, AP25 and per-class values
    """
    foreground = set(labels.foreground_ids)
    for _, class_id in gt:
        if class_id not in set(labels.ids):
            raise ContractError(f"GT instance has unknown class id {class_id}")

    per_class = {}
    for c in labels.classes:
        if c.id not in foreground:
            continue
        gt_regions = [region for region, class_id in gt if class_id == c.id]
        if not gt_regions:
            continue
        class_preds = [p for p in preds if p.semantic_id == c.id]
        scores = np.array([p.score for p in class_preds], dtype=np.float64)
        order = np.argsort(-scores, kind="stable")
        ious = iou_matrix([p.region for p in class_preds], gt_regions)

        def ap_at(threshold: float) -> float:
            return average_precision(_greedy_match(order, ious, threshold), len(gt_regions))

        per_class[c.name] = {
            "ap": float(np.mean([ap_at(t) for t in thresholds])),
            "ap50": ap_at(0.5),
            "ap25": ap_at(0.25),
        }

    if not per_class:
        logger.warning("No foreground class is present in GT instances; AP reported as 0")
        return InstanceScores(mAP=0.0, AP50=0.0, AP25=0.0, per_class={})

    return InstanceScores(
        mAP=float(np.mean([v["ap"] for v in per_class.values()])),
        AP50=float(np.mean([v["ap50"] for v in per_class.values()])),
        AP25=float(np.mean([v["ap25"] for v in per_class.values()])),
        per_class=per_class,
    )


def gt_instances(cloud: PointCloud) -> List[Tuple[RegionMask3D, int]]:
    """
    Extract GT instances from a labeled cloud.

    Each instance id >= 0 becomes a region; its class is the majority
    semantic id of its labeled points (lowest id on ties). Instances without
    any semantic label are dropped.
    """
    if cloud.instance_id is None or cloud.semantic_id is None:
        raise ContractError("GT instances need a cloud with instance and semantic labels")
    instances = []
    for instance in np.unique(cloud.instance_id[cloud.instance_id >= 0]):
        members = np.flatnonzero(cloud.instance_id == instance)
        semantic = cloud.semantic_id[members]
        semantic = semantic[semantic >= 0]
        if semantic.size == 0:
            logger.debug("Instance %d has no semantic label; dropped", instance)
            continue
        instances.append((RegionMask3D(members, cloud.n_points), int(np.argmax(np.bincount(semantic)))))
    return instances


def dataset_statistics(scenes: Sequence[Tuple[Sequence[MaskTextPair], PointCloud]],
                       stopwords: Iterable[str],
                       entropy_scale: float = 1.0) -> Dict[str, object]:
    """
    Aggregate quality statistics over several scenes.

    Coverage is averaged over scenes; entropy is averaged over all masks
    with labeled points (None when no scene carries instance labels).

    Args:
        scenes (Sequence[Tuple[Sequence[MaskTextPair], PointCloud]]): Pairs and cloud per scene
        stopwords (Iterable[str]): Stopwords for noun counting
        entropy_scale (float): Multiplier applied to reported entropy values

    Returns:
        Dict[str, object]: Dataset-level statistics
    """
    coverages = []
    entropies: List[float] = []
    skipped = 0
    captions = []
    labeled_scenes = 0
    for pairs, cloud in scenes:
        coverages.append(coverage(pairs, cloud.n_points))
        captions.extend(pair.caption for pair in pairs)
        if cloud.instance_id is None:
            logger.warning("Cloud without instance labels; entropy skipped for this scene")
            continue
        labeled_scenes += 1
        report = mask_entropy(pairs, cloud)
        entropies.extend(report.per_mask.values())
        skipped += report.skipped

    text = caption_stats(captions, stopwords)
    if labeled_scenes:
        mean_entropy = entropy_scale * float(np.mean(entropies)) if entropies else 0.0
    else:
        mean_entropy = None
    return {
        "scenes": len(scenes),
        "pairs": len(captions),
        "pairs_per_scene": len(captions) / len(scenes) if scenes else 0.0,
        "coverage": float(np.mean(coverages)) if coverages else 0.0,
        "per_scene_coverage": coverages,
        "mask_entropy": mean_entropy,
        "entropy_masks_skipped": skipped,
        "unique_normalized_tokens": text.unique_normalized_tokens,
        "total_tokens": text.total_tokens,
    }
