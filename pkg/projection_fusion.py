"""
Projection and fusion module for the mask-text engine.
Projects point clouds into posed depth frames, applies the depth-consistency
inclusion test, and lifts per-frame 2D masks into 3D mask-text pairs.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import DATASET_FRAME_STRIDES
from errors import ContractError, FormatError
from scene_model import (
    CameraIntrinsics,
    CameraPose,
    DepthMap,
    Mask2D,
    MaskTextPair,
    PointCloud,
    RegionMask3D,
    rle_decode,
)
from scheduler import Scheduler

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CameraFrame:
    """A posed depth frame."""
    frame_id: str
    intrinsics: CameraIntrinsics
    pose: CameraPose
    depth: DepthMap

    def __post_init__(self):
        if (self.depth.height, self.depth.width) != (self.intrinsics.height, self.intrinsics.width):
            raise ContractError(
                f"frame {self.frame_id}: depth is {self.depth.height}x{self.depth.width}, "
                f"intrinsics expect {self.intrinsics.height}x{self.intrinsics.width}"
            )


@dataclass(frozen=True)
class FusionConfig:
    """
    Parameters of the 2D-to-3D association.

    epsilon is the depth tolerance in meters; only frames whose manifest
    ordinal is divisible by frame_stride are processed.
    """
    epsilon: float = 0.05
    frame_stride: int = 1
    pixel_rounding: str = "nearest"

    def __post_init__(self):
        if not (self.epsilon > 0 and np.isfinite(self.epsilon)):
            raise ContractError(f"epsilon must be positive and finite, got {self.epsilon}")
        if self.frame_stride < 1:
            raise ContractError(f"frame_stride must be >= 1, got {self.frame_stride}")
        if self.pixel_rounding != "nearest":
            raise ContractError(f"unsupported pixel rounding '{self.pixel_rounding}'")

    @classmethod
    def from_config(cls, config: Dict[str, Any]) -> "FusionConfig":
        """Create fusion parameters from a configuration dictionary."""
        stride = config.get("frame_stride")
        if stride is None:
            dataset = config.get("dataset")
            if dataset is not None and dataset not in DATASET_FRAME_STRIDES:
                raise ContractError(f"unknown dataset preset '{dataset}'")
            stride = DATASET_FRAME_STRIDES.get(dataset, 1)
        return cls(epsilon=float(config.get("epsilon", 0.05)), frame_stride=int(stride))


@dataclass(frozen=True)
class FusionReport:
    """Counters describing one fuse_scene run."""
    frames_processed: int
    masks_in: int
    pairs_out: int
    empty_regions_skipped: int

    def to_dict(self) -> Dict[str, int]:
        return {
            "frames_processed": self.frames_processed,
            "masks_in": self.masks_in,
            "pairs_out": self.pairs_out,
            "empty_regions_skipped": self.empty_regions_skipped,
        }


def camera_coordinates(points: np.ndarray, pose: CameraPose) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Transform world points into the camera frame.

    Evaluated per element (no BLAS matmul) so a single point and a whole
    cloud produce bit-identical coordinates.

    Args:
        points (np.ndarray): N x 3 world coordinates
        pose (CameraPose): World-to-camera transform

    Returns:
        Tuple[np.ndarray, np.ndarray, np.ndarray]: x_c, y_c, z_c arrays of length N
    """
    m = pose.world_to_camera
    px, py, pz = points[:, 0], points[:, 1], points[:, 2]
    xc = m[0, 0] * px + m[0, 1] * py + m[0, 2] * pz + m[0, 3]
    yc = m[1, 0] * px + m[1, 1] * py + m[1, 2] * pz + m[1, 3]
    zc = m[2, 0] * px + m[2, 1] * py + m[2, 2] * pz + m[2, 3]
    return xc, yc, zc


def project_points(points: np.ndarray, frame: CameraFrame) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Project world points to integer pixels of a frame.

    Args:
        points (np.ndarray): N x 3 world coordinates
        frame (CameraFrame): Target frame

    Returns:
        Tuple: (visible, u, v, depth) where visible is an N boolean mask and
            u, v, depth are defined for the visible points only
    """
    intr = frame.intrinsics
    xc, yc, zc = camera_coordinates(points, frame.pose)
    visible = zc > 0

    with np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore"):
        u_f = np.floor(intr.fx * xc / zc + intr.cx + 0.5)
        v_f = np.floor(intr.fy * yc / zc + intr.cy + 0.5)
    visible &= (u_f >= 0) & (u_f < intr.width) & (v_f >= 0) & (v_f < intr.height)

    u = u_f[visible].astype(np.int64)
    v = v_f[visible].astype(np.int64)
    return visible, u, v, zc[visible]


def project_point(p: Sequence[float], frame: CameraFrame) -> Optional[Tuple[int, int, float]]:
    """
    Project one world point into a frame.

    Args:
        p (Sequence[float]): World coordinates (x, y, z)
        frame (CameraFrame): Target frame

    Returns:
        Optional[Tuple[int, int, float]]: (u column, v row, camera depth) or
            None when the point is behind the camera or outside the image
    """
    visible, u, v, depth = project_points(np.asarray(p, dtype=np.float64).reshape(1, 3), frame)
    if not visible[0]:
        return None
    return int(u[0]), int(v[0]), float(depth[0])


def depth_consistent_points(cloud: PointCloud, frame: CameraFrame,
                            epsilon: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Find the points that pass the inclusion test of a frame.

    A point passes when it projects inside the image, the depth pixel is
    valid (> 0) and |d - D(v, u)| < epsilon.

    Returns:
        Tuple[np.ndarray, np.ndarray, np.ndarray]: ascending point indices and their (u, v)
    """
    visible, u, v, depth = project_points(cloud.points, frame)
    indices = np.flatnonzero(visible)
    observed = frame.depth.values[v, u]
    passing = (observed > 0) & (np.abs(depth - observed) < epsilon)
    return indices[passing], u[passing], v[passing]


def associate_frame(cloud: PointCloud, frame: CameraFrame, masks: Sequence[Mask2D],
                    cfg: FusionConfig) -> List[RegionMask3D]:
    """
    Lift the 2D masks of one frame to 3D regions.

    Args:
        cloud (PointCloud): Scene point cloud
        frame (CameraFrame): Posed depth frame
        masks (Sequence[Mask2D]): Masks drawn on this frame
        cfg (FusionConfig): Association parameters

    Returns:
        List[RegionMask3D]: One region per mask, aligned by index; may be empty
    """
    intr = frame.intrinsics
    for mask in masks:
        if (mask.height, mask.width) != (intr.height, intr.width):
            raise ContractError(
                f"frame {frame.frame_id}: mask {mask.mask_id} is {mask.height}x{mask.width}, "
                f"frame is {intr.height}x{intr.width}"
            )

    indices, u, v = depth_consistent_points(cloud, frame, cfg.epsilon)
    regions = []
    for mask in masks:
        grid = rle_decode(mask)
        hit = grid[v, u] == 1
        regions.append(RegionMask3D(indices[hit], cloud.n_points))
    return regions


def select_frames(n_frames: int, frame_stride: int) -> List[int]:
    """Ordinals of the frames processed under a stride."""
    return list(range(0, n_frames, frame_stride))


def fuse_scene(cloud: PointCloud,
               frames: Sequence[CameraFrame],
               frame_masks: Sequence[Sequence[Mask2D]],
               frame_captions: Sequence[Dict[str, str]],
               cfg: FusionConfig,
               threads: int = 1) -> Tuple[List[MaskTextPair], FusionReport]:
    """
    Build the mask-text pairs of a scene from all of its frames.

    Args:
        cloud (PointCloud): Scene point cloud
        frames (Sequence[CameraFrame]): Frames in manifest order
        frame_masks (Sequence[Sequence[Mask2D]]): Masks per frame
        frame_captions (Sequence[Dict[str, str]]): mask_id -> caption text per frame
        cfg (FusionConfig): Association parameters
        threads (int): Worker threads for per-frame association

    Returns:
        Tuple[List[MaskTextPair], FusionReport]: Pairs sorted by (frame_id, mask_id)
            and the run counters
    """
    if not (len(frames) == len(frame_masks) == len(frame_captions)):
        raise ContractError(
            f"got {len(frames)} frames, {len(frame_masks)} mask lists and {len(frame_captions)} caption maps"
        )
    frame_ids = [frame.frame_id for frame in frames]
    if len(set(frame_ids)) != len(frame_ids):
        raise ContractError("frame ids must be unique within a scene")

    selected = select_frames(len(frames), cfg.frame_stride)

    # Resolve every caption before any geometry work
    jobs = []
    for ordinal in selected:
        frame, masks, captions = frames[ordinal], frame_masks[ordinal], frame_captions[ordinal]
        seen = set()
        texts = []
        for mask in masks:
            if mask.mask_id in seen:
                raise FormatError(f"frame {frame.frame_id}: duplicate mask id {mask.mask_id}")
            seen.add(mask.mask_id)
            text = captions.get(mask.mask_id)
            if text is None or not text.strip():
                raise FormatError(f"missing caption for (frame {frame.frame_id}, mask {mask.mask_id})")
            texts.append(text)
        jobs.append((frame, masks, texts))

    def run_job(job):
        frame, masks, _ = job
        return associate_frame(cloud, frame, masks, cfg)

    results = Scheduler(threads).run(run_job, jobs)

    pairs = []
    masks_in = 0
    skipped = 0
    for (frame, masks, texts), regions in zip(jobs, results):
        masks_in += len(masks)
        for mask, text, region in zip(masks, texts, regions):
            if region.is_empty:
                skipped += 1
                logger.debug("Frame %s mask %s projects to an empty region", frame.frame_id, mask.mask_id)
                continue
            pairs.append(MaskTextPair(region, text, frame.frame_id, mask.mask_id))

    pairs.sort(key=lambda pair: pair.sort_key)
    report = FusionReport(
        frames_processed=len(jobs),
        masks_in=masks_in,
        pairs_out=len(pairs),
        empty_regions_skipped=skipped,
    )
    return pairs, report
