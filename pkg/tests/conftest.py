import math
from types import SimpleNamespace

import hypothesis
import numpy as np
import pytest

from projection_fusion import CameraFrame
from scene_model import CameraIntrinsics, CameraPose, DepthMap, PointCloud, rle_encode

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False)

INTRINSICS = CameraIntrinsics(width=32, height=32, fx=32.0, fy=32.0, cx=16.0, cy=16.0)

# (name, caption, x range, y range) of the box fronts at z = 2
OBJECTS = [
    ("box-a", "a red box.", (-0.8, -0.4), (-0.7, -0.3)),
    ("box-b", "a small green crate", (0.1, 0.5), (0.2, 0.6)),
    ("box-c", "a blue storage bin", (0.3, 0.7), (-0.7, -0.3)),
]


def oracle_project(point, matrix, intr):
    """Scalar reference projection: (u, v, depth) or None."""
    x, y, z = (float(c) for c in point)
    xc = matrix[0][0] * x + matrix[0][1] * y + matrix[0][2] * z + matrix[0][3]
    yc = matrix[1][0] * x + matrix[1][1] * y + matrix[1][2] * z + matrix[1][3]
    zc = matrix[2][0] * x + matrix[2][1] * y + matrix[2][2] * z + matrix[2][3]
    if zc <= 0:
        return None
    u = math.floor(intr.fx * xc / zc + intr.cx + 0.5)
    v = math.floor(intr.fy * yc / zc + intr.cy + 0.5)
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        return None
    return u, v, zc


def oracle_associate(points, matrix, intr, depth, grid, epsilon):
    """Brute-force inclusion test over every point."""
    members = []
    for i, point in enumerate(points):
        hit = oracle_project(point, matrix, intr)
        if hit is None:
            continue
        u, v, d = hit
        observed = depth[v][u]
        if observed > 0 and abs(d - observed) < epsilon and grid[v][u]:
            members.append(i)
    return members


def _pose(yaw_degrees, translation):
    angle = math.radians(yaw_degrees)
    matrix = np.eye(4)
    matrix[0, 0] = math.cos(angle)
    matrix[0, 2] = math.sin(angle)
    matrix[2, 0] = -math.sin(angle)
    matrix[2, 2] = math.cos(angle)
    matrix[:3, 3] = translation
    return matrix


def build_cube_room():
    """
    Back wall at z = 4 with three box fronts at z = 2, seen by two cameras.
    Depth maps are z-buffered from the points; masks cover each box's pixels.
    """
    points = []
    labels = []
    for x in np.arange(-1.9, 1.91, 0.1):
        for y in np.arange(-1.9, 1.91, 0.1):
            points.append((x, y, 4.0))
            labels.append(-1)
    for index, (_, _, (x0, x1), (y0, y1)) in enumerate(OBJECTS):
        for x in np.linspace(x0, x1, 9):
            for y in np.linspace(y0, y1, 9):
                points.append((x, y, 2.0))
                labels.append(index)
    points.extend([(0.0, 0.0, -1.0), (0.3, 0.2, -2.0)])
    labels.extend([-1, -1])
    points = np.array(points)
    labels = np.array(labels)

    frames, frame_masks, frame_captions, grids = [], [], [], []
    for frame_id, matrix in (("frame-000", _pose(0.0, (0.0, 0.0, 0.0))),
                             ("frame-001", _pose(5.0, (-0.1, 0.05, 0.0)))):
        depth = np.zeros((INTRINSICS.height, INTRINSICS.width))
        object_grids = [np.zeros_like(depth, dtype=np.uint8) for _ in OBJECTS]
        for point, label in zip(points, labels):
            hit = oracle_project(point, matrix, INTRINSICS)
            if hit is None:
                continue
            u, v, d = hit
            if depth[v, u] == 0 or d < depth[v, u]:
                depth[v, u] = d
            if label >= 0:
                object_grids[label][v, u] = 1
        frames.append(CameraFrame(frame_id, INTRINSICS, CameraPose(matrix), DepthMap(depth)))
        frame_masks.append([rle_encode(grid, name, "gsam") for grid, (name, _, _, _) in zip(object_grids, OBJECTS)])
        frame_captions.append({name: caption for name, caption, _, _ in OBJECTS})
        grids.append(object_grids)

    instance_id = np.where(labels >= 0, labels, -1)
    cloud = PointCloud(points, instance_id=instance_id, semantic_id=np.where(labels >= 0, labels + 1, -1))
    return SimpleNamespace(cloud=cloud, frames=frames, frame_masks=frame_masks,
                           frame_captions=frame_captions, grids=grids)


@pytest.fixture
def cube_room():
    return build_cube_room()
