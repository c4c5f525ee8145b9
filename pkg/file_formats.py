"""
File formats module for the mask-text engine.
Readers and writers for point clouds (PLY), depth maps (MSDEPTH1),
embedding matrices (MSEMB001), per-frame camera/mask/caption files,
scene manifests and the JSONL record streams produced by the CLI.
"""

import logging
import os
import struct
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from errors import FormatError
from metrics import InstancePrediction, LabelClass, LabelSet
from projection_fusion import CameraFrame
from scene_model import (
    CameraIntrinsics,
    CameraPose,
    DepthMap,
    EmbeddingMatrix,
    Mask2D,
    MaskTextPair,
    MergedProposal,
    PointCloud,
    Proposal3D,
    RegionMask3D,
)
from utils import (
    iter_jsonl,
    read_json,
    require_fields,
    require_float,
    require_int,
    require_list,
    write_jsonl,
)

logger = logging.getLogger(__name__)

DEPTH_MAGIC = b"MSDEPTH1"
DEPTH_HEADER = struct.Struct("<8sIIf")
EMBEDDING_MAGIC = b"MSEMB001"
EMBEDDING_HEADER = struct.Struct("<8sIIB3s")

PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2",
    "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4",
    "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
}
LABEL_PROPERTIES = ("instance_id", "semantic_id")


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except FileNotFoundError:
        raise FormatError(f"file not found: {path}")
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}")


def _write_bytes(path: str, payload: bytes) -> None:
    with open(path, "wb") as f:
        f.write(payload)


def _check_payload_size(actual: int, expected: int, start: int, what: str) -> None:
    if actual < expected:
        raise FormatError(f"{what}: truncated payload, expected {expected} bytes, got {actual}", offset=start + actual)
    if actual > expected:
        raise FormatError(f"{what}: {actual - expected} bytes of trailing data", offset=start + expected)


# Point clouds

def _parse_ply_header(data: bytes, what: str) -> Tuple[str, int, List[Tuple[str, str]], int]:
    marker = data.find(b"end_header")
    if not data.startswith(b"ply") or marker < 0:
        raise FormatError(f"{what}: not a PLY file (missing 'ply' magic or end_header)", offset=0)
    header_end = data.find(b"\n", marker)
    if header_end < 0:
        raise FormatError(f"{what}: header is not newline-terminated", offset=marker)
    header_end += 1

    try:
        lines = data[:header_end].decode("ascii").splitlines()
    except UnicodeDecodeError as e:
        raise FormatError(f"{what}: header is not ASCII", offset=e.start)

    fmt = None
    count = None
    properties: List[Tuple[str, str]] = []
    offset = 0
    for line in lines:
        words = line.split()
        line_offset = offset
        offset += len(line) + 1
        if not words or words[0] in ("ply", "comment", "obj_info", "end_header"):
            continue
        if words[0] == "format":
            if len(words) != 3 or words[1] not in ("ascii", "binary_little_endian"):
                raise FormatError(f"{what}: unsupported PLY format '{line.strip()}'", offset=line_offset)
            fmt = words[1]
        elif words[0] == "element":
            if count is not None or len(words) != 3 or words[1] != "vertex":
                raise FormatError(f"{what}: only a single 'vertex' element is supported", offset=line_offset)
            try:
                count = int(words[2])
            except ValueError:
                raise FormatError(f"{what}: invalid vertex count '{words[2]}'", offset=line_offset)
            if count < 0:
                raise FormatError(f"{what}: negative vertex count", offset=line_offset)
        elif words[0] == "property":
            if count is None:
                raise FormatError(f"{what}: property before element declaration", offset=line_offset)
            if len(words) != 3 or words[1] not in PLY_TYPES:
                raise FormatError(f"{what}: unsupported property declaration '{line.strip()}'", offset=line_offset)
            properties.append((words[2], PLY_TYPES[words[1]]))
        else:
            raise FormatError(f"{what}: unexpected header line '{line.strip()}'", offset=line_offset)

    if fmt is None or count is None:
        raise FormatError(f"{what}: header lacks format or element declaration", offset=0)
    names = [name for name, _ in properties]
    if len(set(names)) != len(names):
        raise FormatError(f"{what}: duplicate property names", offset=0)
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise FormatError(f"{what}: missing '{axis}' property", offset=0)
        if dict(properties)[axis][-2] != "f":
            raise FormatError(f"{what}: property '{axis}' must be floating point", offset=0)
    for label in LABEL_PROPERTIES:
        if label in names and dict(properties)[label][-2] not in "iu":
            raise FormatError(f"{what}: property '{label}' must be an integer", offset=0)
    return fmt, count, properties, header_end


def decode_ply(data: bytes, what: str = "PLY") -> PointCloud:
    """
    Parse an ASCII or binary little-endian PLY point cloud.

    Args:
        data (bytes): File contents
        what (str): Name used in error messages

    Returns:
        PointCloud: Points and optional instance_id / semantic_id labels
    """
    fmt, count, properties, header_end = _parse_ply_header(data, what)
    if count == 0:
        raise FormatError(f"{what}: point cloud has no vertices", offset=header_end)
    dtype = np.dtype([(name, code) for name, code in properties])
    payload = data[header_end:]

    if fmt == "binary_little_endian":
        _check_payload_size(len(payload), count * dtype.itemsize, header_end, what)
        table = np.frombuffer(payload, dtype=dtype, count=count)
        columns = {name: table[name] for name, _ in properties}
    else:
        tokens = payload.split()
        expected = count * len(properties)
        if len(tokens) < expected:
            raise FormatError(f"{what}: truncated ASCII payload, expected {expected} values, got {len(tokens)}",
                              offset=len(data))
        if len(tokens) > expected:
            raise FormatError(f"{what}: trailing data after {count} vertices", offset=header_end)
        grid = np.array(tokens, dtype=object).reshape(count, len(properties))
        columns = {}
        for column, (name, code) in enumerate(properties):
            try:
                if code[-2] == "f":
                    columns[name] = np.array([float(v) for v in grid[:, column]], dtype=np.float64)
                else:
                    columns[name] = np.array([int(v) for v in grid[:, column]], dtype=np.int64)
            except ValueError:
                raise FormatError(f"{what}: non-numeric value in property '{name}'", offset=header_end)

    points = np.stack([columns["x"], columns["y"], columns["z"]], axis=1).astype(np.float32).astype(np.float64)
    labels = {name: columns[name].astype(np.int64) for name in LABEL_PROPERTIES if name in columns}
    return PointCloud(points, instance_id=labels.get("instance_id"), semantic_id=labels.get("semantic_id"))


def encode_ply(cloud: PointCloud, binary: bool = True) -> bytes:
    """
    Serialize a cloud in canonical PLY form: float32 x, y, z followed by
    int32 instance_id / semantic_id when present.
    """
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    columns = [cloud.points[:, 0], cloud.points[:, 1], cloud.points[:, 2]]
    for name in LABEL_PROPERTIES:
        labels = getattr(cloud, name)
        if labels is not None:
            fields.append((name, "<i4"))
            columns.append(labels)

    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {cloud.n_points}"]
    header += [f"property {'float32' if code == '<f4' else 'int32'} {name}" for name, code in fields]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    table = np.empty(cloud.n_points, dtype=np.dtype(fields))
    for (name, _), column in zip(fields, columns):
        table[name] = column
    if binary:
        return head + table.tobytes()

    lines = []
    for row in table:
        values = [f"{float(row[name]):.9g}" if code == "<f4" else str(int(row[name])) for name, code in fields]
        lines.append(" ".join(values))
    return head + ("\n".join(lines) + "\n").encode("ascii")


def load_pointcloud(path: str) -> PointCloud:
    """Load a PLY point cloud from disk."""
    cloud = decode_ply(_read_bytes(path), what=path)
    logger.debug("Loaded %d points from %s", cloud.n_points, path)
    return cloud


def write_pointcloud(path: str, cloud: PointCloud, binary: bool = True) -> None:
    """
    Write a point cloud as PLY.

    Args:
        path (str): Destination file
        cloud (PointCloud): Points and optional labels
        binary (bool): Binary little-endian when True, ASCII otherwise
    """
    _write_bytes(path, encode_ply(cloud, binary))


# Depth maps

def decode_depth(data: bytes, what: str = "depth") -> DepthMap:
    """
    Parse an MSDEPTH1 container: magic | u32 H | u32 W | f32 scale | H*W u16 raw.
    Raw 0 marks an invalid pixel; meters = raw * scale.
    """
    if len(data) < DEPTH_HEADER.size:
        raise FormatError(f"{what}: truncated header", offset=len(data))
    magic, height, width, scale = DEPTH_HEADER.unpack_from(data, 0)
    if magic != DEPTH_MAGIC:
        raise FormatError(f"{what}: bad magic {magic!r}", offset=0)
    if height < 1 or width < 1:
        raise FormatError(f"{what}: invalid size {height}x{width}", offset=8)
    if not (np.isfinite(scale) and scale > 0):
        raise FormatError(f"{what}: depth scale must be positive, got {scale}", offset=16)
    _check_payload_size(len(data) - DEPTH_HEADER.size, height * width * 2, DEPTH_HEADER.size, what)
    raw = np.frombuffer(data, dtype="<u2", count=height * width, offset=DEPTH_HEADER.size)
    return DepthMap(raw.reshape(height, width).astype(np.float64) * np.float64(np.float32(scale)))


def encode_depth(depth: DepthMap, depth_scale: float) -> bytes:
    """Quantize a depth map to u16 units of `depth_scale` meters and serialize it."""
    scale = np.float64(np.float32(depth_scale))
    if not scale > 0:
        raise FormatError(f"depth scale must be positive, got {depth_scale}")
    raw = np.rint(depth.values / scale)
    if np.any(raw > np.iinfo(np.uint16).max):
        raise FormatError(f"depth exceeds the range representable with scale {depth_scale}")
    header = DEPTH_HEADER.pack(DEPTH_MAGIC, depth.height, depth.width, float(scale))
    return header + raw.astype("<u2").tobytes()


def load_depth(path: str) -> DepthMap:
    """
    Load an MSDEPTH1 depth file.

    Args:
        path (str): Depth file

    Returns:
        DepthMap: Depth in meters, 0 where no depth was observed
    """
    return decode_depth(_read_bytes(path), what=path)


def write_depth(path: str, depth: DepthMap, depth_scale: float) -> None:
    """
    Write a depth map as MSDEPTH1.

    Args:
        path (str): Destination file
        depth (DepthMap): Depth in meters
        depth_scale (float): Meters per stored u16 unit
    """
    _write_bytes(path, encode_depth(depth, depth_scale))


# Embeddings

def decode_embeddings(data: bytes, what: str = "embeddings") -> EmbeddingMatrix:
    """
    Parse an MSEMB001 container: magic | u32 count | u32 dim | u8 normalized |
    3 zero pad bytes | count*dim f32 row-major.
    """
    if len(data) < EMBEDDING_HEADER.size:
        raise FormatError(f"{what}: truncated header", offset=len(data))
    magic, count, dim, flag, pad = EMBEDDING_HEADER.unpack_from(data, 0)
    if magic != EMBEDDING_MAGIC:
        raise FormatError(f"{what}: bad magic {magic!r}", offset=0)
    if dim < 1:
        raise FormatError(f"{what}: dim must be >= 1", offset=12)
    if flag not in (0, 1):
        raise FormatError(f"{what}: normalized flag must be 0 or 1, got {flag}", offset=16)
    if pad != b"\x00\x00\x00":
        raise FormatError(f"{what}: non-zero padding", offset=17)
    _check_payload_size(len(data) - EMBEDDING_HEADER.size, count * dim * 4, EMBEDDING_HEADER.size, what)
    values = np.frombuffer(data, dtype="<f4", count=count * dim, offset=EMBEDDING_HEADER.size)
    return EmbeddingMatrix(values.reshape(count, dim).astype(np.float64), normalized=bool(flag))


def encode_embeddings(matrix: EmbeddingMatrix) -> bytes:
    """
    Serialize an embedding matrix as MSEMB001 (little-endian float32 rows).

    Args:
        matrix (EmbeddingMatrix): Rows to serialize

    Returns:
        bytes: Header followed by the row-major payload
    """
    header = EMBEDDING_HEADER.pack(EMBEDDING_MAGIC, matrix.count, matrix.dim, int(matrix.normalized), b"\x00" * 3)
    return header + matrix.data.astype("<f4").tobytes()


def load_embeddings(path: str) -> EmbeddingMatrix:
    """Load an MSEMB001 embedding file."""
    matrix = decode_embeddings(_read_bytes(path), what=path)
    logger.debug("Loaded %dx%d embeddings from %s", matrix.count, matrix.dim, path)
    return matrix


def write_embeddings(path: str, matrix: EmbeddingMatrix) -> None:
    """
    Write an embedding matrix as MSEMB001.

    Args:
        path (str): Destination file
        matrix (EmbeddingMatrix): Rows to write
    """
    _write_bytes(path, encode_embeddings(matrix))


# Per-frame inputs

def load_camera(path: str) -> Tuple[str, CameraIntrinsics, CameraPose]:
    """
    Load a camera JSON {frame_id, width, height, fx, fy, cx, cy, world_to_camera[16]}.
    """
    record = read_json(path)
    if not isinstance(record, dict):
        raise FormatError(f"{path}: camera file must hold a JSON object")
    require_fields(record, ["frame_id", "width", "height", "fx", "fy", "cx", "cy", "world_to_camera"], path)
    matrix = record["world_to_camera"]
    if not isinstance(matrix, list) or len(matrix) != 16:
        raise FormatError(f"{path}: world_to_camera must list 16 numbers")
    intrinsics = CameraIntrinsics(
        require_int(record["width"], path, "width"), require_int(record["height"], path, "height"),
        *(require_float(record[name], path, name) for name in ("fx", "fy", "cx", "cy")),
    )
    pose = CameraPose(np.array([require_float(v, path, "world_to_camera") for v in matrix]).reshape(4, 4))
    return str(record["frame_id"]), intrinsics, pose


def load_masks(path: str) -> Tuple[str, List[Mask2D]]:
    """
    Load a masks JSON {frame_id, masks:[{mask_id, source, rle:{size:[H,W], counts:[...]}}]}.
    """
    record = read_json(path)
    if not isinstance(record, dict):
        raise FormatError(f"{path}: masks file must hold a JSON object")
    require_fields(record, ["frame_id", "masks"], path)
    frame_id = str(record["frame_id"])
    masks = []
    for index, entry in enumerate(require_list(record["masks"], path, "masks")):
        where = f"{path}: frame {frame_id} mask #{index}"
        require_fields(entry, ["mask_id", "rle"], where)
        rle = entry["rle"]
        if not isinstance(rle, dict) or "size" not in rle or "counts" not in rle:
            raise FormatError(f"{where}: rle needs 'size' and 'counts'")
        if isinstance(rle["counts"], str):
            raise FormatError(f"{where}: compressed RLE strings are not supported")
        size = require_list(rle["size"], where, "rle.size")
        if len(size) != 2:
            raise FormatError(f"{where}: rle size must be [H, W]")
        height, width = (require_int(v, where, "rle.size") for v in size)
        counts = tuple(require_int(c, where, "rle.counts") for c in require_list(rle["counts"], where, "rle.counts"))
        mask = Mask2D(height, width, counts, str(entry["mask_id"]), str(entry.get("source", "")))
        if sum(counts) != height * width:
            raise FormatError(f"frame {frame_id}: mask {mask.mask_id} RLE counts sum to {sum(counts)}, "
                              f"expected {height * width}")
        masks.append(mask)
    return frame_id, masks


def load_captions(path: str, frame_id: str) -> Dict[str, str]:
    """
    Load the captions of one frame from JSONL {frame_id, mask_id, text}.

    Returns:
        Dict[str, str]: mask_id -> caption text
    """
    captions: Dict[str, str] = {}
    for lineno, record in iter_jsonl(path):
        where = f"{path}:{lineno}"
        require_fields(record, ["frame_id", "mask_id", "text"], where)
        if str(record["frame_id"]) != frame_id:
            raise FormatError(f"{where}: caption for frame {record['frame_id']} in file of frame {frame_id}")
        mask_id = str(record["mask_id"])
        if mask_id in captions:
            raise FormatError(f"{where}: duplicate caption for (frame {frame_id}, mask {mask_id})")
        captions[mask_id] = str(record["text"])
    return captions


def load_label_set(path: str) -> LabelSet:
    """Load a label-set JSON {classes:[{id, name, background}]}."""
    record = read_json(path)
    if not isinstance(record, dict) or not isinstance(record.get("classes"), list):
        raise FormatError(f"{path}: label set must hold a 'classes' list")
    classes = []
    for index, entry in enumerate(record["classes"]):
        where = f"{path}: class #{index}"
        require_fields(entry, ["id", "name"], where)
        background = entry.get("background", False)
        if not isinstance(background, bool):
            raise FormatError(f"{where}: field 'background' must be true or false")
        classes.append(LabelClass(require_int(entry["id"], where, "id"), str(entry["name"]), background))
    return LabelSet(tuple(classes))


def load_class_groups(path: str) -> Dict[str, List[int]]:
    """Load a class-group JSON {group_name: [class ids]} (e.g. head / common / tail)."""
    record = read_json(path)
    if not isinstance(record, dict) or not all(isinstance(v, list) for v in record.values()):
        raise FormatError(f"{path}: class groups must map names to id lists")
    return {str(name): [require_int(v, f"{path}: group {name}", "ids") for v in ids]
            for name, ids in record.items()}


def load_wordlist(path: str) -> List[str]:
    """Load a newline-separated word list (blank lines and '#' comments skipped)."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            words = [line.strip() for line in f]
    except FileNotFoundError:
        raise FormatError(f"file not found: {path}")
    return [word for word in words if word and not word.startswith("#")]


# Scene manifests

@dataclass(frozen=True)
class FrameEntry:
    frame_id: str
    camera_json_path: str
    depth_path: str
    masks_json_path: str
    captions_jsonl_path: str


@dataclass(frozen=True)
class SceneManifest:
    """A scene: its point cloud and ordered frames. Paths are absolute."""
    scene_id: str
    pointcloud_path: str
    n_points: int
    frames: Tuple[FrameEntry, ...]


def load_manifest(path: str) -> SceneManifest:
    """
    Load a scene manifest JSON; relative paths resolve against the manifest directory.
    """
    record = read_json(path)
    if not isinstance(record, dict):
        raise FormatError(f"{path}: manifest must hold a JSON object")
    require_fields(record, ["scene_id", "pointcloud_path", "n_points", "frames"], path)
    base = os.path.dirname(os.path.abspath(path))

    def resolve(value, where: str) -> str:
        if not isinstance(value, str) or not value:
            raise FormatError(f"{where}: path must be a non-empty string")
        return os.path.normpath(os.path.join(base, value))

    scene_id = str(record["scene_id"])
    frames = []
    seen = set()
    for index, entry in enumerate(require_list(record["frames"], path, "frames")):
        where = f"{path}: scene {scene_id} frame #{index}"
        require_fields(entry, ["frame_id", "camera_json_path", "depth_path", "masks_json_path",
                               "captions_jsonl_path"], where)
        frame_id = str(entry["frame_id"])
        if frame_id in seen:
            raise FormatError(f"{path}: scene {scene_id} lists frame {frame_id} twice")
        seen.add(frame_id)
        frames.append(FrameEntry(
            frame_id=frame_id,
            camera_json_path=resolve(entry["camera_json_path"], where),
            depth_path=resolve(entry["depth_path"], where),
            masks_json_path=resolve(entry["masks_json_path"], where),
            captions_jsonl_path=resolve(entry["captions_jsonl_path"], where),
        ))
    return SceneManifest(
        scene_id=scene_id,
        pointcloud_path=resolve(record["pointcloud_path"], path),
        n_points=require_int(record["n_points"], path, "n_points"),
        frames=tuple(frames),
    )


def load_scene_cloud(manifest: SceneManifest) -> PointCloud:
    """Load the cloud of a manifest and check its declared point count."""
    cloud = load_pointcloud(manifest.pointcloud_path)
    if cloud.n_points != manifest.n_points:
        raise FormatError(f"scene {manifest.scene_id}: manifest declares {manifest.n_points} points, "
                          f"cloud has {cloud.n_points}")
    return cloud


def load_frame(entry: FrameEntry) -> Tuple[CameraFrame, List[Mask2D], Dict[str, str]]:
    """
    Load camera, depth, masks and captions of one manifest frame.
    """
    for label, path in (("camera", entry.camera_json_path), ("depth", entry.depth_path),
                        ("masks", entry.masks_json_path), ("captions", entry.captions_jsonl_path)):
        if not os.path.exists(path):
            raise FormatError(f"frame {entry.frame_id}: {label} file not found: {path}")

    camera_frame_id, intrinsics, pose = load_camera(entry.camera_json_path)
    masks_frame_id, masks = load_masks(entry.masks_json_path)
    for source, found in (("camera", camera_frame_id), ("masks", masks_frame_id)):
        if found != entry.frame_id:
            raise FormatError(f"frame {entry.frame_id}: {source} file belongs to frame {found}")
    frame = CameraFrame(entry.frame_id, intrinsics, pose, load_depth(entry.depth_path))
    captions = load_captions(entry.captions_jsonl_path, entry.frame_id)
    return frame, masks, captions


# Record streams

def _region_from_record(record: Dict, n_points: int, where: str) -> RegionMask3D:
    indices = record["point_indices"]
    if not isinstance(indices, list):
        raise FormatError(f"{where}: point_indices must be a list")
    array = np.array([require_int(v, where, "point_indices") for v in indices], dtype=np.int64)
    if array.size and (np.any(np.diff(array) <= 0) or array[0] < 0 or array[-1] >= n_points):
        raise FormatError(f"{where}: point_indices must be strictly increasing within [0, {n_points})")
    return RegionMask3D(array, n_points)


def write_pairs(path: str, pairs: Sequence[MaskTextPair]) -> int:
    """
    Write pairs.jsonl, one canonical record per pair in the given order.

    Args:
        path (str): Destination file
        pairs (Sequence[MaskTextPair]): Fused pairs

    Returns:
        int: Number of records written
    """
    return write_jsonl(path, (pair.to_dict() for pair in pairs))


def read_pairs(path: str, n_points: int) -> List[MaskTextPair]:
    """Read pairs.jsonl records {pair_id, frame_id, mask_id, point_indices, caption}."""
    pairs = []
    for lineno, record in iter_jsonl(path):
        where = f"{path}:{lineno}"
        require_fields(record, ["pair_id", "frame_id", "mask_id", "point_indices", "caption"], where)
        if not str(record["caption"]).strip():
            raise FormatError(f"{where}: empty caption")
        pair = MaskTextPair(_region_from_record(record, n_points, where), str(record["caption"]),
                            str(record["frame_id"]), str(record["mask_id"]))
        if pair.pair_id != record["pair_id"]:
            raise FormatError(f"{where}: pair_id {record['pair_id']} does not match {pair.pair_id}")
        pairs.append(pair)
    return pairs


def read_proposals(path: str, n_points: int) -> List[Proposal3D]:
    """Read proposal records {proposal_id, point_indices}."""
    proposals = []
    for lineno, record in iter_jsonl(path):
        where = f"{path}:{lineno}"
        require_fields(record, ["proposal_id", "point_indices"], where)
        region = _region_from_record(record, n_points, where)
        if region.is_empty:
            raise FormatError(f"{where}: proposal {record['proposal_id']} is empty")
        proposals.append(Proposal3D(str(record["proposal_id"]), region))
    return proposals


def read_regions(path: str, n_points: int) -> List[RegionMask3D]:
    """Read the point_indices of every record (merged.jsonl or proposals compatible)."""
    regions = []
    for lineno, record in iter_jsonl(path):
        where = f"{path}:{lineno}"
        require_fields(record, ["point_indices"], where)
        regions.append(_region_from_record(record, n_points, where))
    return regions


def read_instance_predictions(path: str, n_points: int) -> List[InstancePrediction]:
    """Read instance prediction records {point_indices, score, semantic_id}."""
    predictions = []
    for lineno, record in iter_jsonl(path):
        where = f"{path}:{lineno}"
        require_fields(record, ["point_indices", "score", "semantic_id"], where)
        region = _region_from_record(record, n_points, where)
        if region.is_empty:
            raise FormatError(f"{where}: prediction has no points")
        predictions.append(InstancePrediction(region, require_float(record["score"], where, "score"),
                                               require_int(record["semantic_id"], where, "semantic_id")))
    return predictions


def write_merged(path: str, merged: Sequence[MergedProposal], concatenated: Sequence[str]) -> int:
    """Write merged.jsonl records {proposal_id, point_indices, caption_ids, concatenated_caption}."""
    records = (
        {
            "proposal_id": proposal.proposal_id,
            "point_indices": proposal.region.point_indices.tolist(),
            "caption_ids": list(proposal.caption_ids),
            "concatenated_caption": caption,
        }
        for proposal, caption in zip(merged, concatenated)
    )
    return write_jsonl(path, records)


