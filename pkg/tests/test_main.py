import json
import os

import numpy as np
import pytest

from file_formats import write_depth, write_embeddings, write_pointcloud
from main import main
from scene_model import EmbeddingMatrix, PointCloud


def write_scene(tmp_path, scene, drop_captions_for=None):
    """Write a scene built by the cube_room fixture as a manifest tree."""
    root = tmp_path / "scene"
    root.mkdir()
    write_pointcloud(str(root / "cloud.ply"), scene.cloud)
    frames = []
    for frame, masks, captions in zip(scene.frames, scene.frame_masks, scene.frame_captions):
        folder = root / frame.frame_id
        folder.mkdir()
        intr = frame.intrinsics
        (folder / "camera.json").write_text(json.dumps({
            "frame_id": frame.frame_id, "width": intr.width, "height": intr.height,
            "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
            "world_to_camera": frame.pose.world_to_camera.ravel().tolist(),
        }))
        write_depth(str(folder / "depth.bin"), frame.depth, 0.001)
        (folder / "masks.json").write_text(json.dumps({"frame_id": frame.frame_id, "masks": [
            {"mask_id": m.mask_id, "source": m.source,
             "rle": {"size": [m.height, m.width], "counts": list(m.rle_counts)}} for m in masks]}))
        if frame.frame_id != drop_captions_for:
            (folder / "captions.jsonl").write_text("".join(
                json.dumps({"frame_id": frame.frame_id, "mask_id": k, "text": v}) + "\n"
                for k, v in captions.items()))
        frames.append({
            "frame_id": frame.frame_id,
            "camera_json_path": f"{frame.frame_id}/camera.json",
            "depth_path": f"{frame.frame_id}/depth.bin",
            "masks_json_path": f"{frame.frame_id}/masks.json",
            "captions_jsonl_path": f"{frame.frame_id}/captions.jsonl",
        })
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps({"scene_id": "cube-room", "pointcloud_path": "cloud.ply",
                                    "n_points": scene.cloud.n_points, "frames": frames}))
    return str(manifest)


def read_jsonl(path):
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f]


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


def run(*args):
    return main(["--quiet", *args])


def test_fuse_is_identical_across_thread_counts(tmp_path, cube_room):
    manifest = write_scene(tmp_path, cube_room)
    out1, out4 = str(tmp_path / "t1"), str(tmp_path / "t4")
    assert run("--threads", "1", "fuse", "--manifest", manifest, "--out", out1) == 0
    assert run("--threads", "4", "fuse", "--manifest", manifest, "--out", out4) == 0
    for name in ("pairs.jsonl", "fuse_report.json"):
        with open(os.path.join(out1, name), "rb") as a, open(os.path.join(out4, name), "rb") as b:
            assert a.read() == b.read()

    pairs = read_jsonl(os.path.join(out1, "pairs.jsonl"))
    assert len(pairs) == 6
    assert [(p["frame_id"], p["mask_id"]) for p in pairs] == sorted((p["frame_id"], p["mask_id"]) for p in pairs)
    for record in pairs:
        assert len(set(cube_room.cloud.instance_id[record["point_indices"]].tolist())) == 1
    with open(os.path.join(out1, "fuse_report.json"), encoding="utf-8") as f:
        assert json.load(f)["frames_processed"] == 2


def test_fuse_dataset_stride(tmp_path, cube_room):
    manifest = write_scene(tmp_path, cube_room)
    out = str(tmp_path / "out")
    assert run("fuse", "--manifest", manifest, "--out", out, "--dataset", "scannet") == 0
    pairs = read_jsonl(os.path.join(out, "pairs.jsonl"))
    assert {p["frame_id"] for p in pairs} == {"frame-000"}


def test_fuse_missing_captions_exits_2(tmp_path, cube_room):
    manifest = write_scene(tmp_path, cube_room, drop_captions_for="frame-001")
    assert run("fuse", "--manifest", manifest, "--out", str(tmp_path / "out")) == 2


def test_fuse_invalid_epsilon_exits_3(tmp_path, cube_room):
    manifest = write_scene(tmp_path, cube_room)
    assert run("fuse", "--manifest", manifest, "--out", str(tmp_path / "out"), "--epsilon", "-1") == 3


def test_merge_identity_fixture(tmp_path):
    pairs = tmp_path / "pairs.jsonl"
    pairs.write_text('{"caption": "a red chair.", "frame_id": "f0", "mask_id": "m0", '
                     '"pair_id": "f0:m0", "point_indices": [2, 3, 5]}\n')
    proposals = tmp_path / "proposals.jsonl"
    proposals.write_text('{"proposal_id": "p0", "point_indices": [2, 3, 5]}\n'
                         '{"proposal_id": "p1", "point_indices": [7]}\n')
    out = str(tmp_path / "merged")
    assert run("merge", "--pairs", str(pairs), "--proposals", str(proposals), "--n-points", "10", "--out", out) == 0
    merged = read_jsonl(os.path.join(out, "merged.jsonl"))
    assert merged == [{"proposal_id": "p0", "point_indices": [2, 3, 5], "caption_ids": ["f0:m0"],
                       "concatenated_caption": "a red chair"}]
    with open(os.path.join(out, "merge_report.json"), encoding="utf-8") as f:
        assert json.load(f)["proposals_out"] == 1


def test_merge_rejects_out_of_range_indices(tmp_path):
    pairs = tmp_path / "pairs.jsonl"
    pairs.write_text('{"caption": "a", "frame_id": "f0", "mask_id": "m0", "pair_id": "f0:m0", "point_indices": [12]}\n')
    proposals = tmp_path / "proposals.jsonl"
    proposals.write_text('{"proposal_id": "p0", "point_indices": [1]}\n')
    code = run("merge", "--pairs", str(pairs), "--proposals", str(proposals), "--n-points", "10",
               "--out", str(tmp_path / "out"))
    assert code == 2


def test_stats_two_instance_fixture(tmp_path):
    root = tmp_path / "scene"
    root.mkdir()
    cloud = PointCloud(np.zeros((4, 3)), instance_id=[0, 0, 1, 1])
    write_pointcloud(str(root / "cloud.ply"), cloud)
    (root / "manifest.json").write_text(json.dumps(
        {"scene_id": "s0", "pointcloud_path": "cloud.ply", "n_points": 4, "frames": []}))
    (root / "pairs.jsonl").write_text('{"caption": "two chairs", "frame_id": "f0", "mask_id": "m0", '
                                      '"pair_id": "f0:m0", "point_indices": [0, 1, 2, 3]}\n')
    out = str(tmp_path / "stats.json")
    assert run("stats", "--scene", str(root / "manifest.json"), str(root / "pairs.jsonl"), "--out", out) == 0
    with open(out, encoding="utf-8") as f:
        stats = json.load(f)
    assert stats["mask_entropy"] == 1.0
    assert stats["coverage"] == 100.0


def test_loss_perfect_prediction(tmp_path):
    gt = [0, 2, 3]
    point_rows = np.array([[1.0, 0.0] if i in gt else [-1.0, 0.0] for i in range(5)])
    paths = {}
    for name, data in (("mask", [[40.0, 0.0]]), ("point", point_rows), ("caption", [[40.0, 0.0]]),
                       ("scores", [[-50.0, 50.0]])):
        paths[name] = str(tmp_path / f"{name}.emb")
        write_embeddings(paths[name], EmbeddingMatrix(np.array(data)))
    (tmp_path / "gt.jsonl").write_text('{"point_indices": [0, 2, 3]}\n')
    out = str(tmp_path / "loss.json")
    assert run("loss", "--mask-emb", paths["mask"], "--point-emb", paths["point"],
               "--caption-emb", paths["caption"], "--scores", paths["scores"],
               "--gt", str(tmp_path / "gt.jsonl"), "--out", out) == 0
    with open(out, encoding="utf-8") as f:
        result = json.load(f)
    assert result["total"] <= 1e-5
    assert result["matches"] == [[0, 0]]


def test_loss_dim_mismatch_exits_3(tmp_path):
    for name, data in (("mask", [[1.0, 0.0]]), ("point", [[1.0, 0.0, 0.0]]), ("caption", [[1.0, 0.0]]),
                       ("scores", [[0.0, 0.0]])):
        write_embeddings(str(tmp_path / f"{name}.emb"), EmbeddingMatrix(np.array(data)))
    (tmp_path / "gt.jsonl").write_text('{"point_indices": [0]}\n')
    code = run("loss", "--mask-emb", str(tmp_path / "mask.emb"), "--point-emb", str(tmp_path / "point.emb"),
               "--caption-emb", str(tmp_path / "caption.emb"), "--scores", str(tmp_path / "scores.emb"),
               "--gt", str(tmp_path / "gt.jsonl"), "--out", str(tmp_path / "loss.json"))
    assert code == 3


def write_labels(tmp_path):
    path = tmp_path / "labels.json"
    path.write_text(json.dumps({"classes": [
        {"id": 0, "name": "floor", "background": True},
        {"id": 1, "name": "chair", "background": False},
        {"id": 2, "name": "table", "background": False}]}))
    return str(path)


def test_eval_sem_and_inst(tmp_path):
    semantic = np.array([1, 1, 2, 2, 0, 0])
    instance = np.array([0, 0, 1, 1, -1, -1])
    cloud_path = str(tmp_path / "cloud.ply")
    write_pointcloud(cloud_path, PointCloud(np.zeros((6, 3)), instance_id=instance, semantic_id=semantic),
                     binary=False)
    classes = np.eye(3)
    write_embeddings(str(tmp_path / "classes.emb"), EmbeddingMatrix(classes, normalized=True))
    write_embeddings(str(tmp_path / "feats.emb"), EmbeddingMatrix(classes[semantic]))
    labels = write_labels(tmp_path)

    out = str(tmp_path / "sem.json")
    assert run("eval-sem", "--point-feats", str(tmp_path / "feats.emb"), "--class-emb", str(tmp_path / "classes.emb"),
               "--cloud", cloud_path, "--labels", labels, "--out", out) == 0
    with open(out, encoding="utf-8") as f:
        assert json.load(f)["f_miou"] == 100.0

    (tmp_path / "preds.jsonl").write_text('{"point_indices": [0, 1], "score": 0.9, "semantic_id": 1}\n'
                                          '{"point_indices": [2], "score": 0.8, "semantic_id": 2}\n')
    out = str(tmp_path / "inst.json")
    assert run("eval-inst", "--predictions", str(tmp_path / "preds.jsonl"), "--cloud", cloud_path,
               "--labels", labels, "--out", out) == 0
    with open(out, encoding="utf-8") as f:
        scores = json.load(f)
    assert scores["per_class"]["chair"]["ap"] == 1.0
    assert scores["per_class"]["table"]["ap50"] == 1.0
    assert scores["mAP"] == pytest.approx((1.0 + 0.1) / 2)


def test_bad_config_file_exits_2(tmp_path):
    config = tmp_path / "config.json"
    config.write_text("{not json")
    assert run("--config", str(config), "merge", "--pairs", "x", "--proposals", "y", "--n-points", "1",
               "--out", str(tmp_path)) == 2


def write_labeled_cloud(tmp_path):
    path = str(tmp_path / "cloud.ply")
    write_pointcloud(path, PointCloud(np.zeros((4, 3)), instance_id=[0, 0, 1, 1], semantic_id=[1, 1, 2, 2]))
    return path


def test_eval_inst_non_numeric_score_exits_2(tmp_path):
    (tmp_path / "preds.jsonl").write_text('{"point_indices": [0, 1], "score": "high", "semantic_id": 1}\n')
    code = run("eval-inst", "--predictions", str(tmp_path / "preds.jsonl"), "--cloud", write_labeled_cloud(tmp_path),
               "--labels", write_labels(tmp_path), "--out", str(tmp_path / "inst.json"))
    assert code == 2


def test_eval_inst_non_integer_indices_exit_2(tmp_path):
    (tmp_path / "preds.jsonl").write_text('{"point_indices": [0, "1"], "score": 0.5, "semantic_id": 1}\n')
    code = run("eval-inst", "--predictions", str(tmp_path / "preds.jsonl"), "--cloud", write_labeled_cloud(tmp_path),
               "--labels", write_labels(tmp_path), "--out", str(tmp_path / "inst.json"))
    assert code == 2


@pytest.mark.parametrize("classes", [
    [{"id": "chair", "name": "chair"}],
    ["chair"],
    [{"id": 1, "name": "chair", "background": "no"}],
])
def test_malformed_label_set_exits_2(tmp_path, classes):
    (tmp_path / "preds.jsonl").write_text('{"point_indices": [0, 1], "score": 0.9, "semantic_id": 1}\n')
    labels = tmp_path / "bad_labels.json"
    labels.write_text(json.dumps({"classes": classes}))
    code = run("eval-inst", "--predictions", str(tmp_path / "preds.jsonl"), "--cloud", write_labeled_cloud(tmp_path),
               "--labels", str(labels), "--out", str(tmp_path / "inst.json"))
    assert code == 2


@pytest.mark.parametrize("field, value", [
    ("n_points", "many"),
    ("frames", {"frame_id": "frame-000"}),
    ("frames", ["frame-000"]),
])
def test_fuse_malformed_manifest_exits_2(tmp_path, cube_room, field, value):
    manifest = write_scene(tmp_path, cube_room)
    with open(manifest, encoding="utf-8") as f:
        record = json.load(f)
    record[field] = value
    with open(manifest, "w", encoding="utf-8") as f:
        json.dump(record, f)
    assert run("fuse", "--manifest", manifest, "--out", str(tmp_path / "out")) == 2


@pytest.mark.parametrize("masks", [{"mask_id": "m0"}, ["m0"], [{"mask_id": "m0", "rle": {"size": [2, "x"], "counts": [4]}}]])
def test_fuse_malformed_masks_exits_2(tmp_path, cube_room, masks):
    manifest = write_scene(tmp_path, cube_room)
    masks_path = tmp_path / "scene" / "frame-000" / "masks.json"
    masks_path.write_text(json.dumps({"frame_id": "frame-000", "masks": masks}))
    assert run("fuse", "--manifest", manifest, "--out", str(tmp_path / "out")) == 2


def test_fuse_non_numeric_camera_value_exits_2(tmp_path, cube_room):
    manifest = write_scene(tmp_path, cube_room)
    camera_path = tmp_path / "scene" / "frame-001" / "camera.json"
    record = json.loads(camera_path.read_text())
    record["fx"] = "wide"
    camera_path.write_text(json.dumps(record))
    assert run("fuse", "--manifest", manifest, "--out", str(tmp_path / "out")) == 2


def test_config_value_of_wrong_type_exits_2(tmp_path, cube_room):
    manifest = write_scene(tmp_path, cube_room)
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"epsilon": "tight"}))
    assert run("--config", str(config), "fuse", "--manifest", manifest, "--out", str(tmp_path / "out")) == 2


def test_merge_and_stats_are_identical_across_thread_counts(tmp_path, cube_room):
    manifest = write_scene(tmp_path, cube_room)
    fused = str(tmp_path / "fused")
    assert run("fuse", "--manifest", manifest, "--out", fused) == 0
    pairs = os.path.join(fused, "pairs.jsonl")
    instance = cube_room.cloud.instance_id
    proposals = tmp_path / "proposals.jsonl"
    proposals.write_text("".join(
        json.dumps({"proposal_id": f"p{i}", "point_indices": np.flatnonzero(instance == i).tolist()}) + "\n"
        for i in sorted(set(instance.tolist()) - {-1})))

    outputs = {}
    for threads in ("1", "8"):
        merged = str(tmp_path / f"merged-{threads}")
        stats = str(tmp_path / f"stats-{threads}.json")
        assert run("--threads", threads, "merge", "--pairs", pairs, "--proposals", str(proposals),
                   "--n-points", str(cube_room.cloud.n_points), "--out", merged, "--seed", "3") == 0
        assert run("--threads", threads, "stats", "--scene", manifest, pairs, "--out", stats) == 0
        outputs[threads] = [read_bytes(path) for path in (
            os.path.join(merged, "merged.jsonl"), os.path.join(merged, "merge_report.json"), stats)]
    assert outputs["1"] == outputs["8"]
    assert len(read_jsonl(os.path.join(str(tmp_path / "merged-1"), "merged.jsonl"))) == 3
