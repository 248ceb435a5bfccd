"""Command-line entry points.

Subcommands: ``synth`` (write a synthetic benchmark dataset), ``refine``
(initial- vs refined-mask quality report), ``train`` (fit the decoder),
``eval`` (per-fold mIoU), ``ablate`` (stage table plus a prototype-count /
mixing-weight sensitivity grid) and ``visualize`` (five-panel episode strips).

Configuration precedence: built-in defaults, then ``--config`` file, then
``--set section.key=value`` overrides. Every command writes its resolved
configuration next to its outputs and exits 0 only when those outputs exist.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import torch

from .ccm import AttentionConfig
from .config import ConfigError, RunConfig, resolve_config, write_resolved
from .core import EmptyMaskError, binarize, mean_iou, pixel_accuracy, resample_mask
from .dps import InsufficientForegroundError
from .episodes import (BadClassCountError, MissingFileError, SegmentationDataset,
                       build_episode, episode_spec_at, generate_synthetic,
                       sample_episodes, separability_accuracy, split_folds)
from .model import (ConfigHashMismatchError, Decoder, build_backbone,
                    load_checkpoint)
from .pipeline import Pipeline, Trainer, VariantConfig, evaluate
from .reports import fold_table, format_table, write_jsonl
from .viz import episode_panels, save_episode
from .vlmd import ScorerUnavailableError

logger = logging.getLogger(__name__)

KNOWN_ERRORS = (ConfigError, MissingFileError, BadClassCountError,
                ConfigHashMismatchError, ScorerUnavailableError,
                InsufficientForegroundError, EmptyMaskError,
                FileNotFoundError, ValueError)


# ---------------------------------------------------------------------------
# shared plumbing


def _load_cfg(args) -> RunConfig:
    cfg = resolve_config(args.config, args.overrides)
    if args.output_dir is not None:
        cfg.output_dir = str(args.output_dir)
    return cfg


def _input_size(cfg: RunConfig):
    if cfg.data.input_size is None:
        return None
    return (cfg.data.input_size, cfg.data.input_size)


def _ensure_dataset(cfg: RunConfig, out_dir: Path) -> SegmentationDataset:
    root = Path(cfg.data.root) if cfg.data.root else out_dir / "dataset"
    if not (root / "manifest.jsonl").exists():
        if cfg.data.kind != "synthetic":
            raise MissingFileError(f"no dataset at {root}")
        logger.info("generating synthetic dataset at %s", root)
        generate_synthetic(cfg.synth, root)
    return SegmentationDataset(root, kind=cfg.data.kind)


def _make_pipeline(cfg: RunConfig, variant: VariantConfig | None = None,
                   source=None, refiner=None, dps=None) -> Pipeline:
    backbone = build_backbone(cfg.backbone)
    src = dataclasses.replace(source or cfg.source,
                              feature_stride=cfg.backbone.stride)
    return Pipeline(backbone, src, refiner or cfg.refiner, dps or cfg.dps,
                    cfg.ccm, variant or cfg.variant)


def _load_decoder(cfg: RunConfig, pipeline: Pipeline, checkpoint) -> Decoder:
    decoder = Decoder(pipeline.guidance_channels(), cfg.decoder)
    load_checkpoint(checkpoint, decoder, cfg_hash=cfg.hash())
    return decoder


def _episodes(cfg: RunConfig, dataset, classes, count: int, start: int = 0):
    return sample_episodes(dataset, classes, count, k_shot=cfg.data.k_shot,
                           seed=cfg.seed, start=start,
                           input_size=_input_size(cfg))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> list:
    cfg = _load_cfg(args)
    out_dir = cfg.resolved_output_dir()
    root = Path(args.out) if args.out else out_dir / "dataset"
    dataset = generate_synthetic(cfg.synth, root)
    acc = separability_accuracy(dataset, cfg.synth)
    print(f"wrote {len(dataset.records)} images over {len(dataset.classes)} "
          f"classes to {root}")
    print(f"nearest-mean separability: {acc:.4f} "
          f"(delta/sigma = {cfg.synth.delta / cfg.synth.sigma:.1f})")
    write_resolved(cfg, root)
    return [root / "manifest.jsonl", root / "classes.txt"]


def cmd_refine(args) -> list:
    cfg = _load_cfg(args)
    out_dir = cfg.resolved_output_dir()
    dataset = _ensure_dataset(cfg, out_dir)
    pipeline = _make_pipeline(cfg)
    count = args.episodes or cfg.eval.episodes

    rows = {"initial": ([], []), "refined": ([], [])}
    cids, records = [], []
    for episode in _episodes(cfg, dataset, dataset.class_list(), count):
        ctx = pipeline.prepare(episode)
        size = episode.query.image.shape[-2:]
        gt = episode.query.gt_mask
        pred_i = binarize(resample_mask(ctx.init_q, size))
        pred_r = pipeline.pseudo_prediction(ctx)
        rows["initial"][0].append(pred_i)
        rows["initial"][1].append(gt)
        rows["refined"][0].append(pred_r)
        rows["refined"][1].append(gt)
        cids.append(episode.class_id)
        records.append({"episode_id": episode.episode_id,
                        "class_id": episode.class_id,
                        "query_fallback": ctx.query_fallback})

    table_rows = []
    summary = {}
    for name in ("initial", "refined"):
        preds, gts = rows[name]
        report = mean_iou(preds, gts, cids,
                          include_background=cfg.eval.include_background,
                          per_episode=cfg.eval.per_episode)
        acc = pixel_accuracy(preds, gts)
        table_rows.append([name, report.mean, acc])
        summary[name] = {"miou": report.mean, "pixel_accuracy": acc,
                         "per_class": report.per_class}
    table = format_table(["masks", "mIoU", "pixel_acc"], table_rows,
                         title=f"pseudo-mask quality over {count} episodes")
    print(table)

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "refine_report.txt").write_text(table + "\n")
    write_jsonl(out_dir / "refine_report.jsonl",
                [{"summary": summary}] + records)
    write_resolved(cfg, out_dir)
    return [out_dir / "refine_report.txt", out_dir / "refine_report.jsonl"]


def cmd_train(args) -> list:
    cfg = _load_cfg(args)
    out_dir = cfg.resolved_output_dir()
    dataset = _ensure_dataset(cfg, out_dir)
    split = split_folds(dataset.class_list(), cfg.data.fold)
    pipeline = _make_pipeline(cfg)
    decoder = Decoder(pipeline.guidance_channels(), cfg.decoder)
    trainer = Trainer(pipeline, decoder, cfg.train, cfg_hash=cfg.hash(),
                      out_dir=out_dir)
    if args.resume:
        payload = load_checkpoint(args.resume, decoder, trainer.optimizer,
                                  cfg_hash=cfg.hash())
        trainer.step = payload["step"]
        logger.info("resumed from %s at step %d", args.resume, trainer.step)

    def episode_at(index: int):
        spec = episode_spec_at(dataset, split.train_classes, cfg.seed, index,
                               cfg.data.k_shot)
        return build_episode(dataset, spec["episode_id"], spec["class_id"],
                             spec["support_ids"], spec["query_id"],
                             _input_size(cfg))

    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoints"
    history = trainer.run(episode_at, log_path=out_dir / "loss.jsonl",
                          checkpoint_dir=ckpt_dir)
    if history:
        print(f"trained to step {trainer.step}; "
              f"final loss {history[-1]['loss']:.4f}")
    write_resolved(cfg, out_dir)
    return [out_dir / "loss.jsonl", ckpt_dir / "final.pt"]


def cmd_eval(args) -> list:
    cfg = _load_cfg(args)
    if args.episodes:
        cfg.eval.episodes = args.episodes
    out_dir = cfg.resolved_output_dir()
    dataset = _ensure_dataset(cfg, out_dir)
    pipeline = _make_pipeline(cfg)
    decoder = _load_decoder(cfg, pipeline, args.checkpoint) if args.checkpoint else None
    if decoder is None:
        logger.info("no checkpoint given: refined pseudo masks act as predictions")

    folds = [0, 1, 2, 3] if args.all_folds else [cfg.data.fold]
    per_fold, details = {}, []
    for fold in folds:
        split = split_folds(dataset.class_list(), fold)
        episodes = _episodes(cfg, dataset, split.test_classes, cfg.eval.episodes)
        result = evaluate(pipeline, decoder, episodes,
                          include_background=cfg.eval.include_background,
                          per_episode=cfg.eval.per_episode,
                          workers=cfg.workers)
        per_fold[fold] = result.report.mean
        details.append({"fold": fold, "miou": result.report.mean,
                        "per_class": result.report.per_class,
                        "episodes": result.n_episodes,
                        "seconds": result.seconds,
                        "fallbacks": result.fallbacks})
        logger.info("fold %d: mIoU %.4f over %d episodes (%.1fs)",
                    fold, result.report.mean, result.n_episodes, result.seconds)

    mode = "decoder" if decoder is not None else "pseudo-mask stub"
    table = fold_table(per_fold, title=f"evaluation ({mode}, "
                                       f"{cfg.eval.episodes} episodes/fold)")
    print(table)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval_report.txt").write_text(table + "\n")
    write_jsonl(out_dir / "eval_report.jsonl", details)
    write_resolved(cfg, out_dir)
    return [out_dir / "eval_report.txt", out_dir / "eval_report.jsonl"]


ABLATION_ROWS = (
    ("baseline", VariantConfig(use_dps=False, use_refine=False, use_ccm=False)),
    ("+prototype association", VariantConfig(use_dps=True, use_refine=False, use_ccm=False)),
    ("+mask refinement", VariantConfig(use_dps=True, use_refine=True, use_ccm=False)),
    ("+correlation matching", VariantConfig(use_dps=True, use_refine=True, use_ccm=True)),
)


def cmd_ablate(args) -> list:
    cfg = _load_cfg(args)
    if args.steps:
        cfg.train.steps = args.steps
    if args.episodes:
        cfg.eval.episodes = args.episodes
    out_dir = cfg.resolved_output_dir()
    dataset = _ensure_dataset(cfg, out_dir)
    split = split_folds(dataset.class_list(), cfg.data.fold)

    # Rows train on clean-query episodes and are scored on episodes whose
    # query-side initial mask lost one labelled component, so the full-map
    # correlation channel has something to recover.
    train_source = dataclasses.replace(cfg.source, omit_query_components=0)
    eval_source = dataclasses.replace(
        cfg.source, omit_query_components=max(1, cfg.source.omit_query_components))

    def episode_at_factory(classes):
        def episode_at(index: int):
            spec = episode_spec_at(dataset, classes, cfg.seed, index,
                                   cfg.data.k_shot)
            return build_episode(dataset, spec["episode_id"], spec["class_id"],
                                 spec["support_ids"], spec["query_id"],
                                 _input_size(cfg))
        return episode_at

    rows, records, full_decoder = [], [], None
    for label, variant in ABLATION_ROWS:
        pipeline = _make_pipeline(cfg, variant=variant, source=train_source)
        decoder = Decoder(pipeline.guidance_channels(), cfg.decoder)
        trainer = Trainer(pipeline, decoder, cfg.train, cfg_hash=cfg.hash())
        trainer.run(episode_at_factory(split.train_classes))
        eval_pipe = _make_pipeline(cfg, variant=variant, source=eval_source)
        episodes = _episodes(cfg, dataset, split.test_classes, cfg.eval.episodes)
        result = evaluate(eval_pipe, decoder, episodes, workers=cfg.workers)
        rows.append([label, pipeline.guidance_channels(), result.report.mean])
        records.append({"row": label, "variant": dataclasses.asdict(variant),
                        "guidance_channels": pipeline.guidance_channels(),
                        "miou": result.report.mean})
        logger.info("%-24s mIoU %.4f", label, result.report.mean)
        if variant.use_ccm:
            full_decoder = decoder
    stage_table = format_table(["configuration", "channels", "mIoU"], rows,
                               title="stage ablation (omitted-component queries)")
    print(stage_table)

    # Sensitivity of the full model to prototype count and mixing weight,
    # evaluated with the trained full-stack decoder.
    ns = (1, 3, 5)
    alphas = (0.1, 0.3, 0.5)
    grid_rows = []
    for n in ns:
        row = [n]
        for alpha in alphas:
            pipe = _make_pipeline(
                cfg, variant=VariantConfig(), source=eval_source,
                refiner=dataclasses.replace(cfg.refiner, alpha=alpha),
                dps=dataclasses.replace(cfg.dps, n_sp=n))
            episodes = _episodes(cfg, dataset, split.test_classes,
                                 cfg.eval.episodes)
            result = evaluate(pipe, full_decoder, episodes, workers=cfg.workers)
            row.append(result.report.mean)
            records.append({"grid": {"n_sp": n, "alpha": alpha,
                                     "miou": result.report.mean}})
        grid_rows.append(row)
    grid_table = format_table(["n_sp \\ alpha"] + [str(a) for a in alphas],
                              grid_rows,
                              title="prototype count vs mixing weight (mIoU)")
    print(grid_table)

    out_dir.mkdir(parents=True, exist_ok=True)
    text = stage_table + "\n\n" + grid_table + "\n"
    (out_dir / "ablate_report.txt").write_text(text)
    write_jsonl(out_dir / "ablate_report.jsonl", records)
    write_resolved(cfg, out_dir)
    return [out_dir / "ablate_report.txt", out_dir / "ablate_report.jsonl"]


def cmd_visualize(args) -> list:
    cfg = _load_cfg(args)
    out_dir = cfg.resolved_output_dir()
    dataset = _ensure_dataset(cfg, out_dir)
    split = split_folds(dataset.class_list(), cfg.data.fold)
    pipeline = _make_pipeline(cfg)
    decoder = _load_decoder(cfg, pipeline, args.checkpoint) if args.checkpoint else None

    viz_dir = Path(args.out) if args.out else out_dir / "viz"
    written = []
    for episode in _episodes(cfg, dataset, split.test_classes, args.episodes):
        ctx = pipeline.prepare(episode)
        panels = episode_panels(pipeline, ctx, decoder)
        written += save_episode(panels, viz_dir, episode.episode_id)
    print(f"wrote {len(written)} files to {viz_dir}")
    write_resolved(cfg, viz_dir)
    return written


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lfss",
        description="language-guided few-shot segmentation experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None,
                       help="YAML or JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="dotted override, e.g. --set dps.n_sp=7")
        p.add_argument("--output-dir", type=Path, default=None)

    p = sub.add_parser("synth", help="write a synthetic benchmark dataset")
    common(p)
    p.add_argument("--out", type=Path, default=None, help="dataset directory")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("refine", help="initial vs refined pseudo-mask quality")
    common(p)
    p.add_argument("--episodes", type=int, default=None)
    p.set_defaults(fn=cmd_refine)

    p = sub.add_parser("train", help="fit the decoder on one fold")
    common(p)
    p.add_argument("--resume", type=Path, default=None, metavar="CHECKPOINT")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="episodic mIoU on held-out classes")
    common(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--all-folds", action="store_true")
    p.add_argument("--episodes", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="stage table and sensitivity grid")
    common(p)
    p.add_argument("--steps", type=int, default=None,
                   help="training steps per ablation row")
    p.add_argument("--episodes", type=int, default=None)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("visualize", help="five-panel episode strips")
    common(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--episodes", type=int, default=4)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(fn=cmd_visualize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        written = args.fn(args)
    except KNOWN_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    missing = [p for p in written if not Path(p).exists()]
    if missing:
        print(f"error: expected outputs missing: {missing}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
