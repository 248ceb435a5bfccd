"""Pipeline orchestration tests: guidance assembly, the training circle,
training/evaluation loops, and fallbacks."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from lfss.ccm import AttentionConfig
from lfss.core import Mask
from lfss.dps import ClusterConfig
from lfss.model import BackboneConfig, Decoder, DecoderConfig, ToyConvBackbone, \
    load_checkpoint, parameter_fingerprint
from lfss.pipeline import (EvalResult, Pipeline, TrainConfig, Trainer,
                           VariantConfig, _fallback_mask, evaluate)
from lfss.vlmd import MissingGroundTruthError, RefinerConfig, SourceConfig

from .helpers import toy_episode

C = 6


def make_pipeline(variant=None, rho=0.0, morph=0, n_sp=3, omit=0,
                  backbone=None) -> Pipeline:
    bb = backbone or ToyConvBackbone(BackboneConfig(in_channels=C, out_channels=C))
    return Pipeline(
        backbone=bb,
        source=SourceConfig(rho=rho, morph_radius=morph, omit_query_components=omit),
        refiner=RefinerConfig(),
        cluster=ClusterConfig(n_sp=n_sp),
        attention=AttentionConfig(),
        variant=variant or VariantConfig(),
    )


def episodes_for(n, seed=0, k_shot=1, size=8):
    rng = np.random.default_rng(seed)
    return [toy_episode(rng, episode_id=i, class_id=1 + i % 3, k_shot=k_shot,
                        channels=C, size=size) for i in range(n)]


# ---------------------------------------------------------------------------
# variant labels and channel algebra


def test_variant_labels():
    assert VariantConfig(False, False, False).label() == "baseline"
    assert VariantConfig(True, False, False).label() == "dps"
    assert VariantConfig(True, True, False).label() == "dps+refine"
    assert VariantConfig(True, True, True).label() == "dps+refine+ccm"


@pytest.mark.parametrize("variant,expected", [
    (VariantConfig(False, False, False), C + C + 1),          # tiled prototype + rcm
    (VariantConfig(True, False, False), C + 1 + 1),           # assoc + rcm
    (VariantConfig(True, True, False), C + 1 + 1),
    (VariantConfig(True, True, True), C + 1 + 1 + 1),         # assoc + rcm + fcm
    (VariantConfig(False, False, True), C + C + 1 + 1),
])
def test_guidance_channels_match_stack(variant, expected):
    pipe = make_pipeline(variant=variant)
    assert pipe.guidance_channels() == expected
    ctx = pipe.prepare(episodes_for(1)[0])
    stack, _ = pipe.build_guidance(ctx)
    assert stack.shape[0] == expected
    assert stack.shape[1:] == ctx.feat_q.values.shape[1:]


def test_full_stack_layout_and_aux():
    pipe = make_pipeline()
    ctx = pipe.prepare(episodes_for(1, seed=3)[0])
    stack, aux = pipe.build_guidance(ctx)
    torch.testing.assert_close(stack[:C], ctx.feat_q.values)
    torch.testing.assert_close(stack[C], aux["assoc"])
    torch.testing.assert_close(stack[C + 1], aux["rcm"])
    torch.testing.assert_close(stack[C + 2], aux["fcm"])


def test_baseline_tiles_global_prototype():
    pipe = make_pipeline(variant=VariantConfig(False, False, False))
    ctx = pipe.prepare(episodes_for(1, seed=4)[0])
    stack, aux = pipe.build_guidance(ctx)
    glob = aux["global_prototype"]
    assert glob.shape == (C,)
    # every spatial position of the prior block carries the same vector
    torch.testing.assert_close(stack[C:2 * C, 0, 0], glob)
    torch.testing.assert_close(stack[C:2 * C, 3, 5], glob)
    assert "fcm" not in aux


def test_build_guidance_is_deterministic():
    pipe = make_pipeline()
    ctx = pipe.prepare(episodes_for(1, seed=5)[0])
    a, _ = pipe.build_guidance(ctx)
    b, _ = pipe.build_guidance(ctx)
    assert torch.equal(a, b)


def test_rcm_is_zero_off_the_query_mask():
    pipe = make_pipeline()
    ctx = pipe.prepare(episodes_for(1, seed=6)[0])
    _, aux = pipe.build_guidance(ctx)
    off = aux["rcm"][ctx.ref_q.values == 0]
    assert torch.equal(off, torch.zeros_like(off))


# ---------------------------------------------------------------------------
# prepare and fallbacks


def test_prepare_uncorrupted_unrefined_masks_equal_ground_truth():
    pipe = make_pipeline(variant=VariantConfig(True, False, True))
    ep = episodes_for(1, seed=7)[0]
    ctx = pipe.prepare(ep)
    assert torch.equal(ctx.init_q.values, ep.query.gt_mask.values)
    assert torch.equal(ctx.ref_q.values, ep.query.gt_mask.values)
    assert ctx.query_fallback == "none"
    assert len(ctx.feat_s) == 1
    assert ctx.feat_q.values.shape == ep.query.image.shape


def test_prepare_k_shot_carries_all_shots():
    pipe = make_pipeline()
    ep = episodes_for(1, seed=8, k_shot=3)[0]
    ctx = pipe.prepare(ep)
    assert len(ctx.feat_s) == 3
    assert len(ctx.init_s) == 3
    assert len(ctx.ref_s) == 3


def test_fallback_mask_chain():
    ones = Mask(torch.ones(3, 3))
    empty = Mask(torch.zeros(3, 3))
    m, tag = _fallback_mask(ones, empty, "x")
    assert tag == "none" and m is ones
    m, tag = _fallback_mask(empty, ones, "x")
    assert tag == "initial" and m is ones
    m, tag = _fallback_mask(empty, empty, "x")
    assert tag == "ones"
    assert m.foreground_count() == 9.0


def test_prepare_falls_back_when_refinement_empties_mask():
    # constant features make every refinement comparison a tie, emptying the
    # masks; prepare must fall back to the initial pseudo masks
    pipe = make_pipeline()
    ep = episodes_for(1, seed=9)[0]
    for s in [*ep.support, ep.query]:
        s.image = torch.ones_like(s.image)
    ctx = pipe.prepare(ep)
    assert ctx.query_fallback == "initial"
    assert torch.equal(ctx.ref_q.values, ctx.init_q.values)
    assert ctx.ref_q.foreground_count() > 0


def test_association_clamps_seed_count_to_foreground():
    pipe = make_pipeline(variant=VariantConfig(True, False, False), n_sp=5)
    ep = episodes_for(1, seed=10)[0]
    tiny = torch.zeros(8, 8)
    tiny[2, 2] = 1.0
    tiny[5, 6] = 1.0
    for s in [*ep.support, ep.query]:
        s.gt_mask = Mask(tiny.clone())
    ctx = pipe.prepare(ep)
    stack, aux = pipe.build_guidance(ctx)   # must not raise
    assert torch.isfinite(aux["assoc"]).all()


# ---------------------------------------------------------------------------
# the circle


def test_circle_step_produces_differentiable_loss():
    pipe = make_pipeline()
    decoder = Decoder(pipe.guidance_channels())
    ctx = pipe.prepare(episodes_for(1, seed=11)[0])
    loss, details = pipe.circle_step(ctx, decoder)
    assert loss.requires_grad
    assert torch.isfinite(loss)
    loss.backward()
    assert all(p.grad is not None for p in decoder.parameters())
    assert details["pred_s"].shape == details["pred_q"].shape
    assert details["circle_mask"].kind == "binary"


def test_circle_mask_feeds_second_pass():
    pipe = make_pipeline()
    decoder = Decoder(pipe.guidance_channels())
    ctx = pipe.prepare(episodes_for(1, seed=12)[0])
    _, details = pipe.circle_step(ctx, decoder)
    circle = details["circle_mask"]
    area = circle.foreground_count()
    if 0 < area < circle.values.numel():
        expect = binarized = (details["pred_s"].detach() > 0.5).float()
        assert torch.equal(circle.values, expect)


def test_circle_degenerate_prediction_reuses_support_mask():
    pipe = make_pipeline()
    decoder = Decoder(pipe.guidance_channels())
    with torch.no_grad():
        decoder.head.bias.fill_(-50.0)   # sigmoid ~ 0 everywhere
    ctx = pipe.prepare(episodes_for(1, seed=13)[0])
    _, details = pipe.circle_step(ctx, decoder)
    assert torch.equal(details["circle_mask"].values, ctx.ref_s[0].values)
    with torch.no_grad():
        decoder.head.bias.fill_(50.0)    # sigmoid ~ 1 everywhere
    _, details = pipe.circle_step(ctx, decoder)
    assert torch.equal(details["circle_mask"].values, ctx.ref_s[0].values)


def test_targets_pseudo_vs_ground_truth():
    pipe = make_pipeline(rho=0.3)   # corrupted pseudo masks differ from gt
    ep = episodes_for(1, seed=14)[0]
    ctx = pipe.prepare(ep)
    t_s, t_q = pipe._targets(ctx, "pseudo")
    assert t_q.shape == ep.query.image.shape[-2:]
    g_s, g_q = pipe._targets(ctx, "ground_truth")
    assert torch.equal(g_q, ep.query.gt_mask.values)
    assert not torch.equal(t_q, g_q)
    with pytest.raises(ValueError):
        pipe._targets(ctx, "oracle")


def test_ground_truth_supervision_requires_labels():
    pipe = make_pipeline()
    ep = episodes_for(1, seed=15)[0]
    ctx = pipe.prepare(ep)
    ctx.episode.query.gt_mask = None
    with pytest.raises(MissingGroundTruthError):
        pipe._targets(ctx, "ground_truth")


def test_predict_returns_binary_mask_at_image_resolution():
    pipe = make_pipeline()
    decoder = Decoder(pipe.guidance_channels())
    ep = episodes_for(1, seed=16)[0]
    ctx = pipe.prepare(ep)
    pred = pipe.predict(ctx, decoder)
    assert pred.kind == "binary"
    assert pred.spatial == tuple(ep.query.image.shape[-2:])
    assert set(pred.values.unique().tolist()) <= {0.0, 1.0}


def test_pseudo_prediction_is_refined_query_mask():
    pipe = make_pipeline(variant=VariantConfig(True, False, True))
    ep = episodes_for(1, seed=17)[0]
    ctx = pipe.prepare(ep)
    pred = pipe.pseudo_prediction(ctx)
    assert torch.equal(pred.values, ep.query.gt_mask.values)


# ---------------------------------------------------------------------------
# training


def test_trainer_runs_and_logs(tmp_path):
    pipe = make_pipeline()
    decoder = Decoder(pipe.guidance_channels())
    eps = episodes_for(5, seed=18)
    trainer = Trainer(pipe, decoder, TrainConfig(steps=5, grad_norm_every=2))
    history = trainer.run(lambda i: eps[i], log_path=tmp_path / "loss.jsonl")
    assert len(history) == 5
    assert [h["step"] for h in history] == list(range(5))
    assert all(np.isfinite(h["loss"]) for h in history)
    assert "grad_norms" in history[0]
    assert "grad_norms" not in history[1]
    lines = (tmp_path / "loss.jsonl").read_text().splitlines()
    assert len(lines) == 5


def test_trainer_freezes_backbone(tmp_path):
    bb = ToyConvBackbone(BackboneConfig(in_channels=C, out_channels=C, n_layers=2))
    before = parameter_fingerprint(bb)
    pipe = make_pipeline(backbone=bb)
    decoder = Decoder(pipe.guidance_channels())
    eps = episodes_for(3, seed=19)
    Trainer(pipe, decoder, TrainConfig(steps=3)).run(lambda i: eps[i])
    assert parameter_fingerprint(bb) == before


def test_trainer_resume_reproduces_straight_run(tmp_path):
    eps = episodes_for(6, seed=20)
    episode_at = lambda i: eps[i]

    pipe = make_pipeline()
    straight = Decoder(pipe.guidance_channels())
    Trainer(pipe, straight, TrainConfig(steps=6), cfg_hash="h").run(episode_at)

    # train 3 steps, checkpoint, restore into a fresh decoder, finish
    first = Decoder(pipe.guidance_channels())
    t1 = Trainer(pipe, first, TrainConfig(steps=3), cfg_hash="h")
    t1.run(episode_at)
    ckpt = tmp_path / "mid.pt"
    t1.save(ckpt)

    second = Decoder(pipe.guidance_channels())
    t2 = Trainer(pipe, second, TrainConfig(steps=6), cfg_hash="h")
    payload = load_checkpoint(ckpt, second, t2.optimizer, cfg_hash="h")
    t2.step = payload["step"]
    t2.run(episode_at)

    assert parameter_fingerprint(second) == parameter_fingerprint(straight)


# ---------------------------------------------------------------------------
# evaluation


def test_evaluate_pseudo_stub_perfect_on_clean_masks():
    pipe = make_pipeline(variant=VariantConfig(True, False, True))
    result = evaluate(pipe, None, episodes_for(6, seed=21))
    assert isinstance(result, EvalResult)
    assert result.report.mean == 1.0
    assert result.n_episodes == 6
    assert result.fallbacks == 0


def test_evaluate_thread_workers_match_serial():
    pipe = make_pipeline(rho=0.1)
    eps = episodes_for(8, seed=22)
    serial = evaluate(pipe, None, eps, workers=1)
    threaded = evaluate(pipe, None, eps, workers=4)
    assert serial.report.mean == threaded.report.mean
    assert serial.report.per_class == threaded.report.per_class


def test_evaluate_with_decoder_is_deterministic():
    pipe = make_pipeline()
    decoder = Decoder(pipe.guidance_channels())
    eps = episodes_for(4, seed=23)
    a = evaluate(pipe, decoder, eps)
    b = evaluate(pipe, decoder, eps)
    assert a.report.per_class == b.report.per_class
    assert a.report.mean == b.report.mean


def test_evaluate_requires_query_ground_truth():
    pipe = make_pipeline()
    eps = episodes_for(1, seed=24)
    eps[0].query.gt_mask = None
    with pytest.raises(MissingGroundTruthError):
        evaluate(pipe, None, eps)


def test_evaluate_include_background_adds_class():
    pipe = make_pipeline(variant=VariantConfig(True, False, True))
    result = evaluate(pipe, None, episodes_for(4, seed=25),
                      include_background=True)
    assert "background" in result.report.per_class
