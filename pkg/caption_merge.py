"""
Caption merging module for the mask-text engine.
Assigns per-view mask-text pairs to class-agnostic 3D proposals by IoU and
prepares per-proposal caption sets for training-data emission.
"""

import logging
import re
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ContractError
from scene_model import MaskTextPair, MergedProposal, Proposal3D, iou_matrix

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
FNV_OFFSET_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
CAPTION_SEPARATOR = ". "


@dataclass(frozen=True)
class MergeConfig:
    """
    Parameters of caption merging and caption sampling.
    """
    iou_threshold: float = 0.5
    max_captions: int = 8
    shuffle_seed: Optional[int] = None

    def __post_init__(self):
        if not (0 < self.iou_threshold <= 1):
            raise ContractError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")
        if self.max_captions < 1:
            raise ContractError(f"max_captions must be >= 1, got {self.max_captions}")
        if self.shuffle_seed is not None and not (0 <= self.shuffle_seed <= MASK64):
            raise ContractError(f"shuffle_seed must be an unsigned 64-bit integer, got {self.shuffle_seed}")

    @classmethod
    def from_config(cls, config: Dict[str, Any]) -> "MergeConfig":
        """Create merge parameters from a configuration dictionary."""
        seed = config.get("shuffle_seed")
        return cls(
            iou_threshold=float(config.get("iou_threshold", 0.5)),
            max_captions=int(config.get("max_captions", 8)),
            shuffle_seed=None if seed is None else int(seed),
        )


@dataclass(frozen=True)
class MergeReport:
    """Counters describing one merge_captions run."""
    pairs_in: int
    pairs_assigned: int
    pairs_unassigned: int
    proposals_in: int
    proposals_out: int

    def to_dict(self) -> Dict[str, int]:
        return {
            "pairs_in": self.pairs_in,
            "pairs_assigned": self.pairs_assigned,
            "pairs_unassigned": self.pairs_unassigned,
            "proposals_in": self.proposals_in,
            "proposals_out": self.proposals_out,
        }


def merge_captions(pairs: Sequence[MaskTextPair], proposals: Sequence[Proposal3D],
                   cfg: MergeConfig) -> Tuple[List[MergedProposal], MergeReport]:
    """
    Assign every pair to its best-overlapping proposal.

    A pair goes to the proposal with maximal IoU (lowest index on ties) when
    that IoU reaches cfg.iou_threshold; otherwise it stays unassigned.

    Args:
        pairs (Sequence[MaskTextPair]): Fused mask-text pairs of one scene
        proposals (Sequence[Proposal3D]): Class-agnostic proposals of the scene
        cfg (MergeConfig): Merge parameters

    Returns:
        Tuple[List[MergedProposal], MergeReport]: Proposals that received at least
            one caption (in input order) and the run counters
    """
    pair_ids = [pair.pair_id for pair in pairs]
    if len(set(pair_ids)) != len(pair_ids):
        raise ContractError("pair ids must be unique")
    proposal_ids = [proposal.proposal_id for proposal in proposals]
    if len(set(proposal_ids)) != len(proposal_ids):
        raise ContractError("proposal ids must be unique")

    iou = iou_matrix([pair.region for pair in pairs], [proposal.region for proposal in proposals])

    assigned: Dict[int, List[MaskTextPair]] = {}
    n_assigned = 0
    if iou.size:
        best = np.argmax(iou, axis=1)
        best_iou = iou[np.arange(len(pairs)), best]
        for k in np.flatnonzero(best_iou >= cfg.iou_threshold):
            assigned.setdefault(int(best[k]), []).append(pairs[k])
            n_assigned += 1

    merged = []
    for index in sorted(assigned):
        members = sorted(assigned[index], key=lambda pair: pair.sort_key)
        proposal = proposals[index]
        merged.append(MergedProposal(proposal.proposal_id, proposal.region,
                                     tuple(pair.pair_id for pair in members)))

    report = MergeReport(
        pairs_in=len(pairs),
        pairs_assigned=n_assigned,
        pairs_unassigned=len(pairs) - n_assigned,
        proposals_in=len(proposals),
        proposals_out=len(merged),
    )
    return merged, report


def fnv1a_64(text: str) -> int:
    """64-bit FNV-1a hash of the UTF-8 bytes of `text`."""
    value = FNV_OFFSET_BASIS
    for byte in text.encode("utf-8"):
        value ^= byte
        value = (value * FNV_PRIME) & MASK64
    return value


class SplitMix64:
    """splitmix64 generator producing unsigned 64-bit integers."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)


def sample_captions(merged: MergedProposal, cfg: MergeConfig) -> List[str]:
    """
    Pick at most cfg.max_captions caption ids of a merged proposal.

    Without a seed the first max_captions ids are kept. With a seed the ids
    are shuffled by Fisher-Yates (j = next() mod (i + 1), i descending) driven
    by splitmix64 seeded with shuffle_seed XOR fnv1a_64(proposal_id).

    Args:
        merged (MergedProposal): Proposal with its caption set
        cfg (MergeConfig): Sampling parameters

    Returns:
        List[str]: Selected caption ids
    """
    ids = list(merged.caption_ids)
    if len(ids) <= cfg.max_captions:
        return ids
    if cfg.shuffle_seed is None:
        return ids[:cfg.max_captions]

    rng = SplitMix64(cfg.shuffle_seed ^ fnv1a_64(merged.proposal_id))
    for i in range(len(ids) - 1, 0, -1):
        j = rng.next() % (i + 1)
        ids[i], ids[j] = ids[j], ids[i]
    return ids[:cfg.max_captions]


def _trim_caption(text: str) -> str:
    return re.sub(r"[\s.]+$", "", text)


def concat_captions(merged: MergedProposal, captions: Dict[str, str],
                    cfg: Optional[MergeConfig] = None) -> str:
    """
    Join the sampled captions of a proposal into a single caption.

    Each text loses its trailing periods and whitespace; texts are joined
    with ". " in sample_captions order.

    Args:
        merged (MergedProposal): Proposal with its caption set
        captions (Dict[str, str]): pair id -> caption text
        cfg (Optional[MergeConfig]): Sampling parameters (defaults apply when None)

    Returns:
        str: Concatenated caption
    """
    if not merged.caption_ids:
        raise ContractError(f"merged proposal {merged.proposal_id} has no captions")
    selected = sample_captions(merged, cfg or MergeConfig())
    missing = [caption_id for caption_id in selected if caption_id not in captions]
    if missing:
        raise ContractError(f"merged proposal {merged.proposal_id}: unknown caption id {missing[0]}")
    return CAPTION_SEPARATOR.join(_trim_caption(captions[caption_id]) for caption_id in selected)
