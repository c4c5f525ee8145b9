import itertools
import math

import numpy as np
import pytest

from errors import ContractError
from losskit import (
    ContrastiveConfig,
    LossWeights,
    ObjectnessScores,
    SoftMaskMatrix,
    bce_loss,
    dice_loss,
    hungarian_match,
    mask_caption_grad,
    mask_caption_loss,
    match_cost,
    objectness_loss,
    point_contrastive_grad,
    point_contrastive_loss,
    sigmoid_masks,
    total_mask_loss,
)
from scene_model import EmbeddingMatrix, RegionMask3D

TWO_WAY = -math.log(math.e / (math.e + 1))


def emb(data):
    return EmbeddingMatrix(np.asarray(data, dtype=np.float64))


def region(indices, n_points):
    return RegionMask3D(np.array(sorted(indices), dtype=np.int64), n_points)


def random_regions(rng, n_points, k):
    return [region(rng.choice(n_points, size=rng.integers(1, 8), replace=False), n_points) for _ in range(k)]


def unit(x):
    return x / np.linalg.norm(x)


def oracle_point_loss(points, texts, regions, tau, literal=False):
    k = len(regions)
    total = 0.0
    for j, reg in enumerate(regions):
        inner = 0.0
        for i in reg.point_indices:
            f = unit(points[i])
            dots = [float(np.dot(f, unit(t))) for t in texts]
            scale = 1.0 if literal else tau
            den = sum(math.exp(d / scale) for d in dots)
            inner += -math.log(math.exp(dots[j] / tau) / den)
        total += inner / reg.size
    return total / k


def oracle_caption_loss(masks, captions, tau):
    m = len(masks)
    total = 0.0
    for i in range(m):
        dots = [float(np.dot(unit(masks[i]), unit(c))) / tau for c in captions]
        total += -(dots[i] - math.log(sum(math.exp(d) for d in dots)))
    return total / m


def brute_force_assignment(cost):
    q, m = cost.shape
    if q <= m:
        return min(sum(cost[i, cols[i]] for i in range(q)) for cols in itertools.permutations(range(m), q))
    return min(sum(cost[rows[j], j] for j in range(m)) for rows in itertools.permutations(range(q), m))


def numeric_grad(f, x, h=1e-6):
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[index] += h
        minus[index] -= h
        grad[index] = (f(plus) - f(minus)) / (2 * h)
    return grad


def test_sigmoid_masks_closed_forms():
    assert np.all(sigmoid_masks(emb(np.zeros((2, 3))), emb(np.zeros((4, 3)))).values == 0.5)
    z = math.sqrt(math.log(3))
    assert sigmoid_masks(emb([[z]]), emb([[z]])).values[0, 0] == pytest.approx(0.75, abs=1e-15)


def test_sigmoid_masks_elementwise_oracle():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 8)), rng.normal(size=(6, 8))
    values = sigmoid_masks(emb(a), emb(b)).values
    for q in range(4):
        for n in range(6):
            expected = 1 / (1 + math.exp(-float(np.dot(a[q], b[n]))))
            assert values[q, n] == pytest.approx(expected, abs=1e-12)


def test_sigmoid_masks_dim_mismatch():
    with pytest.raises(ContractError):
        sigmoid_masks(emb(np.zeros((1, 2))), emb(np.zeros((1, 3))))


def test_point_loss_single_caption_is_zero():
    rng = np.random.default_rng(0)
    points = emb(rng.normal(size=(10, 4)))
    loss = point_contrastive_loss(points, emb(rng.normal(size=(1, 4))), [region([1, 2, 5], 10)], ContrastiveConfig())
    assert abs(loss) <= 1e-12


def test_point_loss_orthonormal_two_way():
    texts = np.eye(2)
    points = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    regions = [region([0, 1], 3), region([2], 3)]
    loss = point_contrastive_loss(emb(points), emb(texts), regions, ContrastiveConfig(temperature=1.0))
    assert loss == pytest.approx(0.313262, abs=1e-6)
    assert loss == pytest.approx(TWO_WAY, abs=1e-12)


@pytest.mark.parametrize("literal", [False, True])
def test_point_loss_matches_direct_formula(literal):
    rng = np.random.default_rng(7)
    points, texts = rng.normal(size=(50, 16)), rng.normal(size=(5, 16))
    regions = random_regions(rng, 50, 5)
    cfg = ContrastiveConfig(temperature=0.07, formula_literal_denominator=literal)
    loss = point_contrastive_loss(emb(points), emb(texts), regions, cfg)
    expected = oracle_point_loss(points, texts, regions, 0.07, literal)
    assert loss == pytest.approx(expected, rel=1e-9)


def test_point_loss_rejects_empty_region_and_no_captions():
    with pytest.raises(ContractError):
        point_contrastive_loss(emb(np.ones((3, 2))), emb(np.ones((1, 2))), [region([], 3)], ContrastiveConfig())
    with pytest.raises(ContractError):
        point_contrastive_loss(emb(np.ones((3, 2))), emb(np.zeros((0, 2))), [], ContrastiveConfig())


def test_point_loss_ignores_zero_rows_outside_regions():
    points = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    loss = point_contrastive_loss(emb(points), emb(np.eye(2)), [region([0], 3), region([2], 3)],
                                  ContrastiveConfig(temperature=1.0))
    assert loss == pytest.approx(TWO_WAY, abs=1e-12)


@pytest.mark.parametrize("normalize", [True, False])
def test_point_grad_matches_finite_differences(normalize):
    rng = np.random.default_rng(11)
    points, texts = rng.normal(size=(12, 4)), rng.normal(size=(3, 4))
    regions = random_regions(rng, 12, 3)
    cfg = ContrastiveConfig(temperature=0.5, normalize_embeddings=normalize)
    grad_points, grad_texts = point_contrastive_grad(emb(points), emb(texts), regions, cfg)

    def loss_of_points(x):
        return point_contrastive_loss(emb(x), emb(texts), regions, cfg)

    def loss_of_texts(x):
        return point_contrastive_loss(emb(points), emb(x), regions, cfg)

    np.testing.assert_allclose(grad_points, numeric_grad(loss_of_points, points), atol=1e-6)
    np.testing.assert_allclose(grad_texts, numeric_grad(loss_of_texts, texts), atol=1e-6)


def test_dice_closed_forms():
    gt = region(range(10), 20)
    assert dice_loss(gt.to_dense().astype(float), gt) == pytest.approx(0.0, abs=1e-15)
    assert dice_loss(np.zeros(20), gt) == pytest.approx(1 - 1 / 11, abs=1e-12)


def test_dice_and_bce_match_direct_formulas():
    rng = np.random.default_rng(5)
    pred = rng.uniform(size=100)
    gt = region(rng.choice(100, size=30, replace=False), 100)
    g = gt.to_dense().astype(float)
    expected_dice = 1 - (2 * np.sum(pred * g) + 1) / (np.sum(pred) + np.sum(g) + 1)
    assert dice_loss(pred, gt) == pytest.approx(expected_dice, abs=1e-12)
    p = np.clip(pred, 1e-7, 1 - 1e-7)
    expected_bce = -sum(gi * math.log(pi) + (1 - gi) * math.log(1 - pi) for gi, pi in zip(g, p)) / 100
    assert bce_loss(pred, gt) == pytest.approx(expected_bce, abs=1e-12)


def test_bce_closed_forms():
    gt = region([0, 3], 6)
    assert bce_loss(np.full(6, 0.5), gt) == pytest.approx(math.log(2), abs=1e-12)
    assert bce_loss(gt.to_dense().astype(float), gt) == pytest.approx(-math.log1p(-1e-7), rel=1e-6)


def test_objectness_closed_forms():
    scores = ObjectnessScores(np.zeros((4, 2)))
    assert objectness_loss(scores, [True, False, False, True]) == pytest.approx(math.log(2), abs=1e-15)
    assert objectness_loss(ObjectnessScores([[-50.0, 50.0]]), [True]) <= 1e-20


def test_objectness_matches_direct_formula():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(8, 2))
    matched = rng.uniform(size=8) > 0.5
    expected = 0.0
    for row, flag in zip(logits, matched):
        expected -= row[int(flag)] - math.log(math.exp(row[0]) + math.exp(row[1]))
    assert objectness_loss(ObjectnessScores(logits), matched) == pytest.approx(expected / 8, abs=1e-12)


def test_hungarian_small_cases():
    cost = 1.0 - np.eye(3)
    assert hungarian_match(cost) == [(0, 0), (1, 1), (2, 2)]
    assert hungarian_match([[7.5]]) == [(0, 0)]
    assert hungarian_match(np.zeros((0, 3))) == []


def test_hungarian_prefers_lexicographically_smallest_optimum():
    assert hungarian_match(np.zeros((2, 2))) == [(0, 0), (1, 1)]
    assert hungarian_match(np.zeros((3, 2))) == [(0, 0), (1, 1)]
    assert hungarian_match(np.ones((2, 3))) == [(0, 0), (1, 1)]


def test_hungarian_matches_exhaustive_search():
    rng = np.random.default_rng(2024)
    for _ in range(300):
        shape = (int(rng.integers(1, 7)), int(rng.integers(1, 7)))
        cost = rng.integers(0, 4, size=shape).astype(float) if rng.uniform() < 0.3 else rng.uniform(size=shape)
        matches = hungarian_match(cost)
        assert len(matches) == min(shape)
        assert len({q for q, _ in matches}) == len({m for _, m in matches}) == len(matches)
        total = sum(cost[q, m] for q, m in matches)
        assert total == pytest.approx(brute_force_assignment(cost), abs=1e-9)


def test_hungarian_rejects_non_finite():
    with pytest.raises(ContractError):
        hungarian_match([[1.0, float("nan")]])


def test_match_cost_is_weighted_composition():
    rng = np.random.default_rng(9)
    pred = SoftMaskMatrix(rng.uniform(size=(3, 40)))
    gts = random_regions(rng, 40, 4)
    w = LossWeights(lambda_dice=5.0, lambda_bce=2.0)
    cost = match_cost(pred, gts, w)
    assert cost.shape == (3, 4)
    for q in range(3):
        for m in range(4):
            expected = 2.0 * bce_loss(pred.values[q], gts[m]) + 5.0 * dice_loss(pred.values[q], gts[m])
            assert cost[q, m] == pytest.approx(expected, abs=1e-12)


def test_match_cost_perfect_prediction_is_near_zero():
    gt = region([1, 2, 3], 8)
    cost = match_cost(SoftMaskMatrix(gt.to_dense()[None, :].astype(float)), [gt], LossWeights())
    assert cost[0, 0] == pytest.approx(2.0 * 1e-7, abs=2e-6)


def test_mask_caption_closed_forms():
    cfg = ContrastiveConfig(temperature=1.0)
    assert mask_caption_loss(emb([[0.3, -2.0]]), emb([[1.0, 1.0]]), cfg) == pytest.approx(0.0, abs=1e-15)
    assert mask_caption_loss(emb(np.eye(2)), emb(np.eye(2)), cfg) == pytest.approx(TWO_WAY, abs=1e-12)
    with pytest.raises(ContractError):
        mask_caption_loss(emb(np.zeros((0, 2))), emb(np.zeros((0, 2))), cfg)


def test_mask_caption_matches_direct_formula():
    rng = np.random.default_rng(4)
    masks, captions = rng.normal(size=(6, 16)), rng.normal(size=(6, 16))
    loss = mask_caption_loss(emb(masks), emb(captions), ContrastiveConfig())
    assert loss == pytest.approx(oracle_caption_loss(masks, captions, 0.07), rel=1e-9)


def test_mask_caption_grad_matches_finite_differences():
    rng = np.random.default_rng(8)
    masks, captions = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    cfg = ContrastiveConfig(temperature=0.3)
    grad_masks, grad_captions = mask_caption_grad(emb(masks), emb(captions), cfg)
    np.testing.assert_allclose(
        grad_masks, numeric_grad(lambda x: mask_caption_loss(emb(x), emb(captions), cfg), masks), atol=1e-6)
    np.testing.assert_allclose(
        grad_captions, numeric_grad(lambda x: mask_caption_loss(emb(masks), emb(x), cfg), captions), atol=1e-6)


def perfect_fixture():
    gt = region([0, 2, 3], 6)
    pred = SoftMaskMatrix(gt.to_dense()[None, :].astype(float))
    scores = ObjectnessScores([[-50.0, 50.0]])
    caption = emb([[0.6, 0.8]])
    return scores, pred, [gt], caption, caption


def test_total_loss_perfect_prediction():
    breakdown = total_mask_loss(*perfect_fixture(), LossWeights(), ContrastiveConfig())
    assert breakdown.total <= 1e-5
    assert breakdown.matches == [(0, 0)]
    recombined = 2 * breakdown.obj + 5 * breakdown.dice + 2 * breakdown.bce + 1 * breakdown.cap
    assert breakdown.total == pytest.approx(recombined, abs=1e-12)


def test_total_loss_zero_weights():
    rng = np.random.default_rng(1)
    scores = ObjectnessScores(rng.normal(size=(3, 2)))
    pred = SoftMaskMatrix(rng.uniform(size=(3, 10)))
    w = LossWeights(0.0, 0.0, 0.0, 0.0)
    breakdown = total_mask_loss(scores, pred, random_regions(rng, 10, 2), emb(rng.normal(size=(3, 4))),
                                emb(rng.normal(size=(2, 4))), w, ContrastiveConfig())
    assert breakdown.total == 0.0


def test_total_loss_matches_component_composition():
    rng = np.random.default_rng(6)
    q, m, n, d = 6, 4, 30, 8
    scores = ObjectnessScores(rng.normal(size=(q, 2)))
    pred = SoftMaskMatrix(rng.uniform(size=(q, n)))
    gts = random_regions(rng, n, m)
    mask_emb, caption_emb = emb(rng.normal(size=(q, d))), emb(rng.normal(size=(m, d)))
    w, cfg = LossWeights(), ContrastiveConfig()
    breakdown = total_mask_loss(scores, pred, gts, mask_emb, caption_emb, w, cfg)

    matches = hungarian_match(match_cost(pred, gts, w))
    matched = [any(qq == i for qq, _ in matches) for i in range(q)]
    by_target = sorted(matches, key=lambda pair: pair[1])
    expected = (
        2.0 * objectness_loss(scores, matched)
        + 5.0 * np.mean([dice_loss(pred.values[i], gts[j]) for i, j in matches])
        + 2.0 * np.mean([bce_loss(pred.values[i], gts[j]) for i, j in matches])
        + 1.0 * oracle_caption_loss(mask_emb.data[[i for i, _ in by_target]],
                                    caption_emb.data[[j for _, j in by_target]], 0.07)
    )
    assert breakdown.total == pytest.approx(expected, rel=1e-9)


def test_total_loss_without_gt_reports_objectness_only():
    scores = ObjectnessScores(np.zeros((2, 2)))
    breakdown = total_mask_loss(scores, SoftMaskMatrix(np.full((2, 5), 0.3)), [], emb(np.ones((2, 3))),
                                emb(np.zeros((0, 3))), LossWeights(), ContrastiveConfig())
    assert breakdown.obj == pytest.approx(math.log(2))
    assert breakdown.dice == breakdown.bce == breakdown.cap == 0.0
    assert breakdown.total == pytest.approx(2 * math.log(2))


def test_total_loss_is_equivariant_under_gt_and_query_permutation():
    rng = np.random.default_rng(17)
    n_points, w, cfg = 12, LossWeights(), ContrastiveConfig(temperature=0.1)
    for _ in range(30):
        scores = rng.normal(size=(6, 2))
        masks = rng.random((6, n_points))
        mask_emb, caption_emb = rng.normal(size=(6, 5)), rng.normal(size=(4, 5))
        gt = random_regions(rng, n_points, 4)
        if len({tuple(r.point_indices.tolist()) for r in gt}) < 4:
            continue
        base = total_mask_loss(ObjectnessScores(scores), SoftMaskMatrix(masks), gt, emb(mask_emb), emb(caption_emb),
                               w, cfg)

        perm = rng.permutation(4)
        swapped_gt = total_mask_loss(ObjectnessScores(scores), SoftMaskMatrix(masks), [gt[m] for m in perm],
                                     emb(mask_emb), emb(caption_emb[perm]), w, cfg)
        assert swapped_gt.total == pytest.approx(base.total, abs=1e-10)
        assert sorted((q, int(perm[m])) for q, m in swapped_gt.matches) == sorted(base.matches)

        rows = rng.permutation(6)
        swapped_queries = total_mask_loss(ObjectnessScores(scores[rows]), SoftMaskMatrix(masks[rows]), gt,
                                          emb(mask_emb[rows]), emb(caption_emb), w, cfg)
        assert swapped_queries.total == pytest.approx(base.total, abs=1e-10)


def test_point_loss_ignores_positive_text_scaling():
    rng = np.random.default_rng(8)
    points, texts = rng.normal(size=(15, 6)), rng.normal(size=(3, 6))
    regions = random_regions(rng, 15, 3)
    cfg = ContrastiveConfig(temperature=0.2)
    scaled = texts * rng.uniform(0.1, 10.0, size=(3, 1))

    assert point_contrastive_loss(emb(points), emb(scaled), regions, cfg) == pytest.approx(
        point_contrastive_loss(emb(points), emb(texts), regions, cfg), rel=1e-12)
    cosine = np.array([[unit(p) @ unit(t) for t in texts] for p in points])
    scaled_cosine = np.array([[unit(p) @ unit(t) for t in scaled] for p in points])
    np.testing.assert_array_equal(np.argmax(cosine, axis=1), np.argmax(scaled_cosine, axis=1))
