"""
Scene model module for the mask-text engine.
Defines the immutable domain types shared by every module and the
binary-mask primitives (RLE codec, sparse region set algebra, IoU).
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from errors import ContractError, FormatError

ROTATION_TOLERANCE = 1e-6
NORM_TOLERANCE = 1e-5


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class PointCloud:
    """
    N points in world coordinates (meters) with optional GT labels.
    Label value -1 marks an unlabeled point.
    """
    points: np.ndarray
    instance_id: Optional[np.ndarray] = None
    semantic_id: Optional[np.ndarray] = None

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ContractError(f"point cloud must be N x 3, got shape {points.shape}")
        if points.shape[0] < 1:
            raise ContractError("point cloud must contain at least one point")
        if not np.all(np.isfinite(points)):
            raise ContractError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", _frozen(points))

        for name in ("instance_id", "semantic_id"):
            labels = getattr(self, name)
            if labels is None:
                continue
            labels = np.array(labels, dtype=np.int64)
            if labels.shape != (points.shape[0],):
                raise ContractError(f"{name} has length {labels.size}, expected {points.shape[0]}")
            if np.any(labels < -1):
                raise ContractError(f"{name} contains values below -1")
            object.__setattr__(self, name, _frozen(labels))

    @property
    def n_points(self) -> int:
        return int(self.points.shape[0])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; the pixel domain is [0, width) x [0, height)."""
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ContractError(f"image size must be positive, got {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        for name in ("fx", "fy", "cx", "cy"):
            if not np.isfinite(getattr(self, name)):
                raise ContractError(f"intrinsic {name} is not finite")


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Rigid world-to-camera transform stored as a 4x4 row-major matrix."""
    world_to_camera: np.ndarray

    def __post_init__(self):
        matrix = np.array(self.world_to_camera, dtype=np.float64)
        if matrix.size == 16:
            matrix = matrix.reshape(4, 4)
        if matrix.shape != (4, 4) or not np.all(np.isfinite(matrix)):
            raise ContractError("world_to_camera must be a finite 4x4 matrix")
        if not np.array_equal(matrix[3], np.array([0.0, 0.0, 0.0, 1.0])):
            raise ContractError(f"world_to_camera bottom row must be [0,0,0,1], got {matrix[3].tolist()}")
        rotation = matrix[:3, :3]
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > ROTATION_TOLERANCE:
            raise ContractError("world_to_camera rotation block is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ROTATION_TOLERANCE:
            raise ContractError("world_to_camera rotation block is not a proper rotation")
        object.__setattr__(self, "world_to_camera", _frozen(matrix))


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel depth in meters, row-major H x W; 0.0 marks an invalid pixel."""
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ContractError(f"depth map must be a non-empty H x W grid, got shape {values.shape}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ContractError("depth values must be finite and non-negative")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class Mask2D:
    """
    Binary image mask in uncompressed row-major RLE.
    Counts alternate zeros-run, ones-run, ... starting with zeros.
    """
    height: int
    width: int
    rle_counts: Tuple[int, ...]
    mask_id: str
    source: str = ""

    def __post_init__(self):
        object.__setattr__(self, "rle_counts", tuple(int(c) for c in self.rle_counts))
        if self.height < 1 or self.width < 1:
            raise FormatError(f"mask {self.mask_id}: size must be positive, got {self.height}x{self.width}")
        if any(c < 0 for c in self.rle_counts):
            raise FormatError(f"mask {self.mask_id}: negative run length")

    @classmethod
    def from_dense(cls, grid: np.ndarray, mask_id: str, source: str = "") -> "Mask2D":
        """Build a mask from a dense binary grid (see rle_encode)."""
        return rle_encode(grid, mask_id, source)


def rle_encode(grid: np.ndarray, mask_id: str, source: str = "") -> Mask2D:
    """
    Encode a dense binary grid as row-major, zeros-first RLE.

    Args:
        grid (np.ndarray): H x W array, nonzero entries are foreground
        mask_id (str): Identifier carried by the mask
        source (str): Source tag (e.g. "gsam", "seem")

    Returns:
        Mask2D: Encoded mask
    """
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ContractError(f"mask {mask_id}: expected a 2D grid, got shape {grid.shape}")
    flat = (grid.ravel() != 0).astype(np.int8)
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    counts = np.diff(edges).tolist()
    if flat.size and flat[0] == 1:
        counts.insert(0, 0)
    return Mask2D(grid.shape[0], grid.shape[1], tuple(counts), mask_id, source)


def rle_decode(mask: Mask2D) -> np.ndarray:
    """
    Decode an RLE mask into a dense H x W grid of 0/1 (uint8).

    Raises:
        FormatError: If the counts do not cover exactly H*W pixels or
            contain an empty run after the first position.
    """
    counts = np.asarray(mask.rle_counts, dtype=np.int64)
    total = int(counts.sum()) if counts.size else 0
    if total != mask.height * mask.width:
        raise FormatError(
            f"mask {mask.mask_id}: RLE counts sum to {total}, expected {mask.height * mask.width}"
        )
    if counts.size > 1 and np.any(counts[1:] == 0):
        raise FormatError(f"mask {mask.mask_id}: RLE contains an empty interior run")
    values = (np.arange(counts.size) % 2).astype(np.uint8)
    return np.repeat(values, counts).reshape(mask.height, mask.width)


@dataclass(frozen=True, eq=False)
class RegionMask3D:
    """Sparse 3D binary mask: sorted point indices into a cloud of n_points."""
    point_indices: np.ndarray
    n_points: int

    def __post_init__(self):
        indices = np.array(self.point_indices, dtype=np.int64).reshape(-1)
        if self.n_points < 0:
            raise ContractError(f"n_points must be non-negative, got {self.n_points}")
        if indices.size:
            if np.any(np.diff(indices) <= 0):
                raise ContractError("region point indices must be strictly increasing")
            if indices[0] < 0 or indices[-1] >= self.n_points:
                raise ContractError(f"region point indices must lie in [0, {self.n_points})")
        object.__setattr__(self, "point_indices", _frozen(indices))

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "RegionMask3D":
        dense = np.asarray(dense).reshape(-1)
        return cls(np.flatnonzero(dense), int(dense.size))

    @classmethod
    def from_unsorted(cls, indices: Sequence[int], n_points: int) -> "RegionMask3D":
        """Build a region from an arbitrary index collection (duplicates dropped)."""
        return cls(np.unique(np.asarray(indices, dtype=np.int64)), n_points)

    @property
    def size(self) -> int:
        return int(self.point_indices.size)

    @property
    def is_empty(self) -> bool:
        return self.point_indices.size == 0

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.n_points, dtype=bool)
        dense[self.point_indices] = True
        return dense

    def _check_same_cloud(self, other: "RegionMask3D") -> None:
        if self.n_points != other.n_points:
            raise ContractError(
                f"regions refer to clouds of different sizes ({self.n_points} vs {other.n_points})"
            )

    def union(self, other: "RegionMask3D") -> "RegionMask3D":
        self._check_same_cloud(other)
        return RegionMask3D(np.union1d(self.point_indices, other.point_indices), self.n_points)

    def intersection(self, other: "RegionMask3D") -> "RegionMask3D":
        self._check_same_cloud(other)
        common = np.intersect1d(self.point_indices, other.point_indices, assume_unique=True)
        return RegionMask3D(common, self.n_points)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RegionMask3D):
            return NotImplemented
        return self.n_points == other.n_points and np.array_equal(self.point_indices, other.point_indices)

    def __hash__(self) -> int:
        return hash((self.n_points, self.point_indices.tobytes()))

    def __repr__(self) -> str:
        return f"RegionMask3D(size={self.size}, n_points={self.n_points})"


def mask3d_iou(a: RegionMask3D, b: RegionMask3D) -> float:
    """
    Intersection over union of two sparse regions on the same cloud.

    Returns:
        float: |a & b| / |a | b|, or 0.0 when both regions are empty
    """
    if a.n_points != b.n_points:
        raise ContractError(f"IoU of regions on different clouds ({a.n_points} vs {b.n_points})")
    inter = np.intersect1d(a.point_indices, b.point_indices, assume_unique=True).size
    union = a.size + b.size - inter
    if union == 0:
        return 0.0
    return inter / union


def _incidence(regions: Sequence[RegionMask3D], n_points: int) -> sparse.csr_matrix:
    indptr = np.zeros(len(regions) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([region.size for region in regions])
    if regions:
        indices = np.concatenate([region.point_indices for region in regions])
    else:
        indices = np.zeros(0, dtype=np.int64)
    data = np.ones(indices.size, dtype=np.int64)
    return sparse.csr_matrix((data, indices, indptr), shape=(len(regions), n_points))


def iou_matrix(regions_a: Sequence[RegionMask3D], regions_b: Sequence[RegionMask3D]) -> np.ndarray:
    """
    Pairwise IoU between two region lists on the same cloud.

    Returns:
        np.ndarray: len(a) x len(b) matrix; 0 where a union is empty
    """
    sizes = {region.n_points for region in regions_a} | {region.n_points for region in regions_b}
    if len(sizes) > 1:
        raise ContractError(f"regions refer to clouds of different sizes: {sorted(sizes)}")
    if not regions_a or not regions_b:
        return np.zeros((len(regions_a), len(regions_b)))
    n_points = sizes.pop()

    inter = (_incidence(regions_a, n_points) @ _incidence(regions_b, n_points).T).toarray()
    size_a = np.array([region.size for region in regions_a], dtype=np.int64)
    size_b = np.array([region.size for region in regions_b], dtype=np.int64)
    union = size_a[:, None] + size_b[None, :] - inter
    iou = np.zeros(inter.shape, dtype=np.float64)
    np.divide(inter, union, out=iou, where=union > 0)
    return iou


@dataclass(frozen=True, eq=False)
class MaskTextPair:
    """A 3D region with the caption of the 2D mask it was lifted from."""
    region: RegionMask3D
    caption: str
    frame_id: str
    mask_id: str

    def __post_init__(self):
        if not self.caption.strip():
            raise ContractError(f"pair ({self.frame_id}, {self.mask_id}) has an empty caption")

    @property
    def pair_id(self) -> str:
        return f"{self.frame_id}:{self.mask_id}"

    @property
    def sort_key(self) -> Tuple[str, str]:
        return (self.frame_id, self.mask_id)

    def to_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "frame_id": self.frame_id,
            "mask_id": self.mask_id,
            "point_indices": self.region.point_indices.tolist(),
            "caption": self.caption,
        }


@dataclass(frozen=True, eq=False)
class Proposal3D:
    """Class-agnostic 3D instance proposal."""
    proposal_id: str
    region: RegionMask3D

    def __post_init__(self):
        if self.region.is_empty:
            raise ContractError(f"proposal {self.proposal_id} has an empty region")


@dataclass(frozen=True, eq=False)
class MergedProposal:
    """A proposal together with the ordered ids of the captions assigned to it."""
    proposal_id: str
    region: RegionMask3D
    caption_ids: Tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "caption_ids", tuple(self.caption_ids))
        if self.region.is_empty:
            raise ContractError(f"merged proposal {self.proposal_id} has an empty region")
        if len(set(self.caption_ids)) != len(self.caption_ids):
            raise ContractError(f"merged proposal {self.proposal_id} has duplicate caption ids")


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """
    Row-major count x dim matrix of embeddings (points, texts or masks).
    When `normalized` is set every row must have unit L2 norm.
    """
    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] < 1:
            raise ContractError(f"embedding matrix must be count x dim with dim >= 1, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ContractError("embedding matrix contains non-finite values")
        if self.normalized and data.shape[0]:
            norms = np.linalg.norm(data, axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOLERANCE)
            if bad.size:
                raise ContractError(f"embedding row {int(bad[0])} is flagged normalized but has norm {norms[bad[0]]:.8f}")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def count(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def l2_normalized(self) -> np.ndarray:
        """
        Return a row-normalized copy of the data.

        Raises:
            ContractError: If any row has zero norm
        """
        norms = np.linalg.norm(self.data, axis=1)
        zero = np.flatnonzero(norms == 0)
        if zero.size:
            raise ContractError(f"embedding row {int(zero[0])} has zero norm")
        return self.data / norms[:, None]
