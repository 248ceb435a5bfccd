"""End-to-end orchestration: prepare an episode's features and pseudo masks,
assemble guidance stacks, run the two-pass training circle, predict, train and
evaluate. Feature extraction and mask generation run without gradients; only
the decoder learns.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .ccm import (AttentionConfig, CorrelationStack, cross_attention,
                  focused_prototype, full_correlation_map, roi_correlation_map)
from .core import (FeatureMap, IoUReport, Mask, binarize, masked_average_pool,
                   mean_iou, resample_mask)
from .dps import ClusterConfig, association_map, cluster_superpixels, place_seeds, rectify_seeds
from .episodes import Episode
from .model import Decoder, assemble_guidance, bce_loss, save_checkpoint
from .vlmd import MissingGroundTruthError, RefinerConfig, SourceConfig, \
    generate_initial_masks, refine_masks

logger = logging.getLogger(__name__)


@dataclass
class VariantConfig:
    """Which pipeline stages are active; the full model enables all three."""
    use_dps: bool = True
    use_refine: bool = True
    use_ccm: bool = True

    def label(self) -> str:
        bits = []
        if self.use_dps:
            bits.append("dps")
        if self.use_refine:
            bits.append("refine")
        if self.use_ccm:
            bits.append("ccm")
        return "+".join(bits) if bits else "baseline"


@dataclass
class EpisodeContext:
    """Everything extracted from one episode before guidance assembly."""
    episode: Episode
    feat_s: list
    feat_q: FeatureMap
    init_s: list
    init_q: Mask
    ref_s: list
    ref_q: Mask
    query_fallback: str = "none"     # none | initial | ones


def _fallback_mask(refined: Mask, initial: Mask, what: str) -> tuple[Mask, str]:
    if refined.foreground_count() > 0:
        return refined, "none"
    if initial.foreground_count() > 0:
        logger.warning("%s refined mask empty; falling back to initial mask", what)
        return initial, "initial"
    logger.warning("%s masks empty at every stage; falling back to all-foreground", what)
    return Mask(torch.ones_like(initial.values)), "ones"


class Pipeline:
    """Owns the frozen backbone and all stage configuration.

    The decoder is deliberately not owned here: training, evaluation and
    checkpointing manage decoder instances separately so one pipeline can
    serve several ablation variants.
    """

    def __init__(self, backbone, source: SourceConfig, refiner: RefinerConfig,
                 cluster: ClusterConfig, attention: AttentionConfig,
                 variant: VariantConfig | None = None, scorer=None):
        self.backbone = backbone
        self.source = source
        self.refiner = refiner
        self.cluster = cluster
        self.attention = attention
        self.variant = variant or VariantConfig()
        self.scorer = scorer

    # -- stage 1: features + masks -------------------------------------

    def prepare(self, episode: Episode) -> EpisodeContext:
        with torch.no_grad():
            feat_s = [self.backbone(s.image) for s in episode.support]
            feat_q = self.backbone(episode.query.image)
        init_s, init_q = generate_initial_masks(episode, self.source, self.scorer)

        if self.variant.use_refine:
            ref_s, ref_q = [], init_q
            for fs, ms in zip(feat_s, init_s):
                new_s, ref_q = refine_masks(fs.values, feat_q.values, ms, ref_q,
                                            self.refiner)
                ref_s.append(new_s)
        else:
            ref_s, ref_q = list(init_s), init_q

        ref_s = [_fallback_mask(m, i, f"support[{n}]")[0]
                 for n, (m, i) in enumerate(zip(ref_s, init_s))]
        ref_q, q_fb = _fallback_mask(ref_q, init_q, "query")
        return EpisodeContext(episode, feat_s, feat_q, init_s, init_q,
                              ref_s, ref_q, query_fallback=q_fb)

    # -- stage 2: guidance ----------------------------------------------

    def guidance_channels(self) -> int:
        c = self.backbone.feature_channels
        n = c + (1 if self.variant.use_dps else c) + 1
        return n + (1 if self.variant.use_ccm else 0)

    def _association(self, feat_s: FeatureMap, mask_s: Mask,
                     feat_q: FeatureMap, mask_q: Mask) -> torch.Tensor:
        n_eff = min(self.cluster.n_sp, int(mask_s.foreground_count()))
        cfg = dataclasses.replace(self.cluster, n_sp=n_eff)
        seeds = place_seeds(mask_s, n_eff)
        p_q_f = masked_average_pool(feat_q.values, mask_q.values)
        seeds = rectify_seeds(seeds, feat_s.values, p_q_f, mask_s,
                              grid_n=cfg.grid_n)
        cents = cluster_superpixels(feat_s.values, mask_s, seeds, cfg)
        target = feat_q if cfg.assoc_target == "decoded" else feat_s
        return association_map(cents, target.values, normalize=cfg.normalize_assoc)

    def build_guidance(self, ctx: EpisodeContext, query_feat: FeatureMap | None = None,
                       query_mask: Mask | None = None,
                       support_masks: list | None = None):
        """Assemble the decoder input stack.

        ``query_feat``/``query_mask`` default to the episode's query; the
        circle's first pass swaps in support shot 0. ``support_masks``
        overrides the refined support masks (circle pass 2).
        Returns ``(stack, aux)`` where aux holds the individual channels for
        inspection and rendering.
        """
        feat_q = query_feat if query_feat is not None else ctx.feat_q
        mask_q = query_mask if query_mask is not None else ctx.ref_q
        masks_s = support_masks if support_masks is not None else ctx.ref_s
        aux: dict = {}

        if self.variant.use_dps:
            assocs = [self._association(fs, ms, feat_q, mask_q)
                      for fs, ms in zip(ctx.feat_s, masks_s)]
            prior = torch.stack(assocs).mean(dim=0)
            aux["assoc"] = prior
            prior_channels = prior.unsqueeze(0)
        else:
            protos = [masked_average_pool(fs.values, ms.values)
                      for fs, ms in zip(ctx.feat_s, masks_s)]
            glob = torch.stack(protos).mean(dim=0)
            h, w = feat_q.spatial
            prior_channels = glob.view(-1, 1, 1).expand(-1, h, w)
            aux["global_prototype"] = glob

        if self.variant.use_ccm:
            p_list = []
            for fs, ms in zip(ctx.feat_s, masks_s):
                attn = cross_attention(feat_q.values, fs.values, mask_q, ms)
                p_list.append(focused_prototype(attn, fs.values, ms,
                                                self.attention.reduction))
            p_corr = torch.stack(p_list).mean(dim=0)
        else:
            p_corr = aux.get("global_prototype")
            if p_corr is None:
                protos = [masked_average_pool(fs.values, ms.values)
                          for fs, ms in zip(ctx.feat_s, masks_s)]
                p_corr = torch.stack(protos).mean(dim=0)

        rcm = roi_correlation_map(p_corr, feat_q.values, mask_q)
        aux["rcm"] = rcm
        channels = [feat_q.values, prior_channels, rcm.unsqueeze(0)]
        if self.variant.use_ccm:
            fcm = full_correlation_map(p_corr, feat_q.values)
            aux["fcm"] = fcm
            stack = assemble_guidance(feat_q.values, aux["assoc"],
                                      CorrelationStack(rcm=rcm, fcm=fcm)) \
                if self.variant.use_dps else torch.cat(
                    channels + [fcm.unsqueeze(0)], dim=0)
        else:
            stack = torch.cat(channels, dim=0)
        return stack, aux

    # -- stage 3: the circle ---------------------------------------------

    def circle_step(self, ctx: EpisodeContext, decoder: Decoder,
                    beta: float = 0.5, supervision: str = "pseudo"):
        """Two-pass step: predict the support mask from support-side guidance,
        feed the binarized prediction back as the support mask, then predict
        the query. Returns (loss, details).
        """
        dtype = next(decoder.parameters()).dtype
        stack_s, _ = self.build_guidance(
            ctx, query_feat=ctx.feat_s[0], query_mask=ctx.ref_s[0])
        pred_s = decoder(stack_s.to(dtype))

        circle = binarize(Mask(pred_s.detach().float(), kind="soft"))
        area = circle.foreground_count()
        if area == 0 or area == circle.values.numel():
            logger.debug("circle mask degenerate (area %d); reusing refined support mask", area)
            circle = ctx.ref_s[0]
        masks_s = [circle] + list(ctx.ref_s[1:])

        stack_q, aux = self.build_guidance(ctx, support_masks=masks_s)
        pred_q = decoder(stack_q.to(dtype))

        t_s, t_q = self._targets(ctx, supervision)
        size = ctx.episode.query.image.shape[-2:]
        up_s = _to_image_res(pred_s, size)
        up_q = _to_image_res(pred_q, size)
        loss = beta * bce_loss(up_s, t_s.to(dtype)) \
            + (1.0 - beta) * bce_loss(up_q, t_q.to(dtype))
        details = {"pred_s": pred_s, "pred_q": pred_q, "aux": aux,
                   "circle_mask": circle}
        return loss, details

    def _targets(self, ctx: EpisodeContext, supervision: str):
        size = ctx.episode.query.image.shape[-2:]
        if supervision == "pseudo":
            t_s = resample_mask(ctx.ref_s[0], size).values
            t_q = resample_mask(ctx.ref_q, size).values
        elif supervision == "ground_truth":
            if ctx.episode.support[0].gt_mask is None or ctx.episode.query.gt_mask is None:
                raise MissingGroundTruthError("ground-truth supervision needs labelled episodes")
            t_s = ctx.episode.support[0].gt_mask.values
            t_q = ctx.episode.query.gt_mask.values
        else:
            raise ValueError(f"unknown supervision mode {supervision!r}")
        return t_s, t_q

    # -- stage 4: inference ----------------------------------------------

    def predict(self, ctx: EpisodeContext, decoder: Decoder) -> Mask:
        """Binary query prediction at image resolution (runs the circle)."""
        with torch.no_grad():
            dtype = next(decoder.parameters()).dtype
            stack_s, _ = self.build_guidance(
                ctx, query_feat=ctx.feat_s[0], query_mask=ctx.ref_s[0])
            circle = binarize(Mask(decoder(stack_s.to(dtype)).float(), kind="soft"))
            area = circle.foreground_count()
            if area == 0 or area == circle.values.numel():
                circle = ctx.ref_s[0]
            stack_q, _ = self.build_guidance(
                ctx, support_masks=[circle] + list(ctx.ref_s[1:]))
            pred_q = decoder(stack_q.to(dtype))
            size = ctx.episode.query.image.shape[-2:]
            soft = _to_image_res(pred_q, size)
        return binarize(Mask(soft.float(), kind="soft"))

    def pseudo_prediction(self, ctx: EpisodeContext) -> Mask:
        """Decoder-free stub: the refined query pseudo mask as the prediction."""
        size = ctx.episode.query.image.shape[-2:]
        return binarize(resample_mask(ctx.ref_q, size))


def _to_image_res(pred: torch.Tensor, size) -> torch.Tensor:
    if tuple(pred.shape) == tuple(size):
        return pred
    return torch.nn.functional.interpolate(
        pred.unsqueeze(0).unsqueeze(0), size=tuple(size),
        mode="bilinear", align_corners=False)[0, 0]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 1e-3
    beta: float = 0.5
    supervision: str = "pseudo"
    log_every: int = 10
    checkpoint_every: int = 100
    grad_norm_every: int = 50


class Trainer:
    """Adam over the decoder, one episode per step, JSONL loss log."""

    def __init__(self, pipeline: Pipeline, decoder: Decoder, cfg: TrainConfig,
                 cfg_hash: str = "", out_dir: Path | str | None = None):
        self.pipeline = pipeline
        self.decoder = decoder
        self.cfg = cfg
        self.cfg_hash = cfg_hash
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.optimizer = torch.optim.Adam(decoder.parameters(), lr=cfg.lr)
        self.step = 0
        self.history: list[dict] = []

    def train_step(self, episode: Episode) -> dict:
        ctx = self.pipeline.prepare(episode)
        loss, _ = self.pipeline.circle_step(
            ctx, self.decoder, beta=self.cfg.beta, supervision=self.cfg.supervision)
        self.optimizer.zero_grad()
        loss.backward()
        record = {"step": self.step, "episode_id": episode.episode_id,
                  "class_id": episode.class_id, "loss": float(loss.item()),
                  "query_fallback": ctx.query_fallback}
        if self.cfg.grad_norm_every and self.step % self.cfg.grad_norm_every == 0:
            record["grad_norms"] = _grad_norms(self.decoder)
        self.optimizer.step()
        self.step += 1
        self.history.append(record)
        return record

    def run(self, episode_at, log_path: Path | str | None = None,
            checkpoint_dir: Path | str | None = None) -> list[dict]:
        """Train until ``cfg.steps``; ``episode_at(index)`` supplies episodes.

        Resuming is just constructing the trainer, loading a checkpoint that
        restores ``step``/optimizer state, and calling ``run`` again: episode
        ``index`` only depends on the step counter, so the stream continues
        exactly where it stopped.
        """
        log_f = open(log_path, "a") if log_path is not None else None
        try:
            while self.step < self.cfg.steps:
                record = self.train_step(episode_at(self.step))
                if log_f is not None:
                    log_f.write(json.dumps(record) + "\n")
                    log_f.flush()
                if self.cfg.log_every and record["step"] % self.cfg.log_every == 0:
                    logger.info("step %d loss %.4f", record["step"], record["loss"])
                if checkpoint_dir is not None and self.cfg.checkpoint_every \
                        and self.step % self.cfg.checkpoint_every == 0:
                    self.save(Path(checkpoint_dir) / f"step_{self.step:06d}.pt")
            if checkpoint_dir is not None:
                self.save(Path(checkpoint_dir) / "final.pt")
        finally:
            if log_f is not None:
                log_f.close()
        return self.history

    def save(self, path: Path | str):
        save_checkpoint(path, self.decoder, self.optimizer, self.step, self.cfg_hash)


def _grad_norms(decoder: Decoder) -> dict:
    groups = {"branches": decoder.branches, "fuse": decoder.fuse,
              "blocks": decoder.blocks, "head": decoder.head}
    out = {}
    for name, module in groups.items():
        total = 0.0
        for p in module.parameters():
            if p.grad is not None:
                total += float(p.grad.pow(2).sum())
        out[name] = total ** 0.5
    return out


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    report: IoUReport
    n_episodes: int
    seconds: float
    fallbacks: int = 0


def evaluate(pipeline: Pipeline, decoder: Decoder | None, episodes,
             include_background: bool = False, per_episode: bool = False,
             workers: int = 1) -> EvalResult:
    """Run prediction over an episode iterable and accumulate IoU per class.

    With ``decoder=None`` the refined pseudo masks stand in as predictions,
    which exercises the mask-generation half of the pipeline alone.
    """
    episodes = list(episodes)

    def one(episode: Episode):
        ctx = pipeline.prepare(episode)
        if decoder is None:
            pred = pipeline.pseudo_prediction(ctx)
        else:
            pred = pipeline.predict(ctx, decoder)
        if episode.query.gt_mask is None:
            raise MissingGroundTruthError(
                f"episode {episode.episode_id} has no query ground truth")
        return pred, episode.query.gt_mask, episode.class_id, ctx.query_fallback

    start = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, episodes))
    else:
        rows = [one(e) for e in episodes]
    seconds = time.perf_counter() - start

    preds = [r[0] for r in rows]
    gts = [r[1] for r in rows]
    cids = [r[2] for r in rows]
    fallbacks = sum(1 for r in rows if r[3] != "none")
    report = mean_iou(preds, gts, cids, include_background=include_background,
                      per_episode=per_episode)
    return EvalResult(report=report, n_episodes=len(episodes), seconds=seconds,
                      fallbacks=fallbacks)
