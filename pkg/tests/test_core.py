"""Tensor-primitive tests: oracle equivalence plus shape/validity contracts."""

from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lfss.core import (EmptyMaskError, FeatureMap, Mask, ShapeMismatchError,
                       ZeroPrototypeError, binarize, cosine_map,
                       masked_average_pool, mean_iou, pairwise_cosine,
                       pixel_accuracy, resample_mask)

from .helpers import rand_binary, rand_feats, rand_soft
from .oracles import (cosine_map_oracle, map_oracle, miou_oracle,
                      pairwise_cosine_oracle)


# ---------------------------------------------------------------------------
# masked average pool


@pytest.mark.parametrize("seed", range(8))
def test_masked_average_pool_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    c, h, w = rng.integers(1, 9), rng.integers(1, 13), rng.integers(1, 13)
    feats = rand_feats(rng, c, h, w, dtype=torch.float64)
    mask = rand_binary(rng, h, w)
    got = masked_average_pool(feats, mask.values.double())
    want = map_oracle(feats.numpy(), mask.values.numpy().astype(np.float64))
    np.testing.assert_allclose(got.numpy(), want, atol=1e-10)


def test_masked_average_pool_soft_weights():
    rng = np.random.default_rng(3)
    feats = rand_feats(rng, 3, 5, 5, dtype=torch.float64)
    soft = torch.tensor(rng.random((5, 5)))
    got = masked_average_pool(feats, soft)
    want = map_oracle(feats.numpy(), soft.numpy())
    np.testing.assert_allclose(got.numpy(), want, atol=1e-10)


def test_masked_average_pool_rejects_empty_mask():
    feats = torch.ones(2, 4, 4)
    with pytest.raises(EmptyMaskError):
        masked_average_pool(feats, torch.zeros(4, 4))


def test_masked_average_pool_rejects_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        masked_average_pool(torch.ones(2, 4, 4), torch.ones(4, 5))


def test_masked_average_pool_single_pixel_identity():
    feats = torch.arange(12, dtype=torch.float32).reshape(3, 2, 2)
    mask = torch.zeros(2, 2)
    mask[1, 0] = 1.0
    torch.testing.assert_close(masked_average_pool(feats, mask), feats[:, 1, 0])


# ---------------------------------------------------------------------------
# cosine maps


@pytest.mark.parametrize("seed", range(8))
def test_cosine_map_matches_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    c, h, w = rng.integers(1, 9), rng.integers(1, 13), rng.integers(1, 13)
    feats = rand_feats(rng, c, h, w, dtype=torch.float64)
    proto = torch.tensor(rng.normal(size=c))
    got = cosine_map(feats, proto)
    want = cosine_map_oracle(feats.numpy(), proto.numpy())
    np.testing.assert_allclose(got.numpy(), want, atol=1e-10)


def test_cosine_map_zero_feature_pixel_is_zero():
    feats = torch.ones(3, 2, 2)
    feats[:, 0, 1] = 0.0
    out = cosine_map(feats, torch.tensor([1.0, 2.0, 3.0]))
    assert out[0, 1] == 0.0
    assert torch.isfinite(out).all()


def test_cosine_map_zero_prototype_raises():
    with pytest.raises(ZeroPrototypeError):
        cosine_map(torch.ones(3, 2, 2), torch.zeros(3))


def test_cosine_map_channel_mismatch():
    with pytest.raises(ShapeMismatchError):
        cosine_map(torch.ones(3, 2, 2), torch.ones(4))


def test_cosine_map_range():
    rng = np.random.default_rng(7)
    feats = rand_feats(rng, 6, 9, 9)
    out = cosine_map(feats, torch.tensor(rng.normal(size=6), dtype=torch.float32))
    assert float(out.min()) >= -1.0 - 1e-6
    assert float(out.max()) <= 1.0 + 1e-6


@pytest.mark.parametrize("seed", range(6))
def test_pairwise_cosine_matches_oracle(seed):
    rng = np.random.default_rng(200 + seed)
    n, m, c = rng.integers(1, 10), rng.integers(1, 10), rng.integers(1, 7)
    rows = torch.tensor(rng.normal(size=(n, c)))
    cols = torch.tensor(rng.normal(size=(m, c)))
    got = pairwise_cosine(rows, cols)
    want = pairwise_cosine_oracle(rows.numpy(), cols.numpy())
    np.testing.assert_allclose(got.numpy(), want, atol=1e-10)


def test_pairwise_cosine_zero_rows_give_zero():
    rows = torch.zeros(2, 3)
    cols = torch.ones(4, 3)
    out = pairwise_cosine(rows, cols)
    assert torch.equal(out, torch.zeros(2, 4))


# ---------------------------------------------------------------------------
# mask resampling


def test_resample_same_size_is_identity_copy():
    m = Mask(torch.eye(4), kind="binary")
    out = resample_mask(m, (4, 4))
    assert torch.equal(out.values, m.values)
    assert out.values is not m.values


def test_resample_binary_preserves_value_set():
    rng = np.random.default_rng(11)
    m = rand_binary(rng, 6, 10)
    out = resample_mask(m, (13, 7))
    assert out.kind == "binary"
    assert set(out.values.unique().tolist()) <= {0.0, 1.0}


def test_resample_binary_upsample_replicates_blocks():
    m = Mask(torch.tensor([[1.0, 0.0], [0.0, 1.0]]), kind="binary")
    out = resample_mask(m, (4, 4))
    want = torch.tensor([[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]],
                        dtype=torch.float32)
    assert torch.equal(out.values, want)


def test_resample_soft_stays_in_unit_interval():
    rng = np.random.default_rng(13)
    m = rand_soft(rng, 5, 5)
    out = resample_mask(m, (16, 16))
    assert out.kind == "soft"
    assert float(out.values.min()) >= 0.0
    assert float(out.values.max()) <= 1.0


def test_resample_constant_soft_mask_is_constant():
    m = Mask(torch.full((3, 3), 0.25), kind="soft")
    out = resample_mask(m, (9, 9))
    torch.testing.assert_close(out.values, torch.full((9, 9), 0.25))


# ---------------------------------------------------------------------------
# mask / feature-map validation


def test_mask_rejects_non_binary_values():
    with pytest.raises(ValueError):
        Mask(torch.tensor([[0.5, 0.0]]), kind="binary")


def test_mask_rejects_out_of_range_soft():
    with pytest.raises(ValueError):
        Mask(torch.tensor([[1.5, 0.0]]), kind="soft")


def test_mask_rejects_bad_rank():
    with pytest.raises(ShapeMismatchError):
        Mask(torch.zeros(2, 2, 2))


def test_mask_rejects_unknown_kind():
    with pytest.raises(ValueError):
        Mask(torch.zeros(2, 2), kind="fuzzy")


def test_mask_complement_and_count():
    m = Mask(torch.tensor([[1.0, 0.0], [1.0, 1.0]]))
    assert m.foreground_count() == 3.0
    assert m.complement().foreground_count() == 1.0


def test_feature_map_contracts():
    fm = FeatureMap(torch.zeros(5, 3, 4), stride=2)
    assert fm.channels == 5
    assert fm.spatial == (3, 4)
    with pytest.raises(ShapeMismatchError):
        FeatureMap(torch.zeros(3, 4))
    with pytest.raises(ValueError):
        FeatureMap(torch.tensor([[[float("nan")]]]))


# ---------------------------------------------------------------------------
# binarize


def test_binarize_is_strict_at_threshold():
    m = Mask(torch.tensor([[0.5, 0.5001], [0.0, 1.0]]), kind="soft")
    out = binarize(m)
    assert out.kind == "binary"
    assert torch.equal(out.values, torch.tensor([[0.0, 1.0], [0.0, 1.0]]))


def test_binarize_custom_threshold():
    m = Mask(torch.tensor([[0.2, 0.8]]), kind="soft")
    assert torch.equal(binarize(m, threshold=0.1).values, torch.tensor([[1.0, 1.0]]))


# ---------------------------------------------------------------------------
# mean IoU / pixel accuracy


def _random_eval_instance(seed, n_eps=6, n_classes=3, h=7, w=7):
    rng = np.random.default_rng(seed)
    preds, gts, cids = [], [], []
    for _ in range(n_eps):
        preds.append(rand_binary(rng, h, w, p=0.4, ensure_fg=False))
        gts.append(rand_binary(rng, h, w, p=0.4, ensure_fg=False))
        cids.append(int(rng.integers(1, n_classes + 1)))
    return preds, gts, cids


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("include_background", [False, True])
@pytest.mark.parametrize("per_episode", [False, True])
def test_mean_iou_matches_oracle(seed, include_background, per_episode):
    preds, gts, cids = _random_eval_instance(300 + seed)
    got = mean_iou(preds, gts, cids, include_background=include_background,
                   per_episode=per_episode)
    want = miou_oracle([p.values.numpy() for p in preds],
                       [g.values.numpy() for g in gts], cids,
                       include_background=include_background,
                       per_episode=per_episode)
    assert got.mean == pytest.approx(want, abs=1e-12)


def test_mean_iou_perfect_prediction_is_one():
    rng = np.random.default_rng(1)
    gts = [rand_binary(rng, 5, 5) for _ in range(4)]
    report = mean_iou(gts, gts, [1, 1, 2, 2], include_background=True)
    assert report.mean == 1.0
    assert set(report.per_class) == {1, 2, "background"}


def test_mean_iou_skips_empty_union_class():
    z = Mask(torch.zeros(4, 4))
    o = Mask(torch.ones(4, 4))
    report = mean_iou([z, o], [z, o], [1, 2])
    # class 1 never appears in prediction or truth, so only class 2 counts
    assert set(report.per_class) == {2}
    assert report.mean == 1.0


def test_mean_iou_accumulates_before_dividing():
    # one episode with IoU 1 and one with IoU 0 for the same class:
    # pooled counts give 1/3 (intersection 2, union 6), not the 0.5 episode mean
    a = Mask(torch.tensor([[1.0, 1.0], [0.0, 0.0]]))
    b = Mask(torch.tensor([[0.0, 0.0], [1.0, 1.0]]))
    pooled = mean_iou([a, a], [a, b], [1, 1])
    episodic = mean_iou([a, a], [a, b], [1, 1], per_episode=True)
    assert pooled.mean == pytest.approx(1.0 / 3.0)
    assert episodic.mean == pytest.approx(0.5)


def test_mean_iou_alignment_errors():
    m = Mask(torch.zeros(2, 2))
    with pytest.raises(ShapeMismatchError):
        mean_iou([m], [m, m], [1, 2])
    with pytest.raises(ShapeMismatchError):
        mean_iou([m], [Mask(torch.zeros(3, 3))], [1])


def test_pixel_accuracy_counts_agreement():
    p = Mask(torch.tensor([[1.0, 0.0], [1.0, 0.0]]))
    g = Mask(torch.tensor([[1.0, 1.0], [0.0, 0.0]]))
    assert pixel_accuracy([p], [g]) == pytest.approx(0.5)
    assert pixel_accuracy([g], [g]) == 1.0


# ---------------------------------------------------------------------------
# property tests


@settings(deadline=None, max_examples=40)
@given(st.integers(0, 10_000))
def test_cosine_map_self_prototype_hits_one(seed):
    rng = np.random.default_rng(seed)
    feats = rand_feats(rng, 4, 3, 3, dtype=torch.float64)
    i, j = int(rng.integers(3)), int(rng.integers(3))
    out = cosine_map(feats, feats[:, i, j].clone())
    assert out[i, j].item() == pytest.approx(1.0, abs=1e-9)


@settings(deadline=None, max_examples=40)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_cosine_map_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    feats = rand_feats(rng, 5, 4, 4, dtype=torch.float64)
    proto = torch.tensor(rng.normal(size=5))
    a = cosine_map(feats, proto)
    b = cosine_map(feats * scale, proto * scale)
    torch.testing.assert_close(a, b, atol=1e-8, rtol=1e-8)


@settings(deadline=None, max_examples=30)
@given(st.integers(0, 10_000))
def test_mean_iou_bounded(seed):
    preds, gts, cids = _random_eval_instance(seed, n_eps=4, h=5, w=5)
    report = mean_iou(preds, gts, cids)
    assert 0.0 <= report.mean <= 1.0
    for v in report.per_class.values():
        assert 0.0 <= v <= 1.0
