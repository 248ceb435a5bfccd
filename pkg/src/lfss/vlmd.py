"""Pseudo-mask generation and self-supported refinement.

Initial masks come either from a seeded corruption of ground truth (the
offline oracle used by the synthetic benchmark) or from an external dense
scorer queried with prompt-expanded class names. Refinement then re-decides
every pixel by comparing its similarity to a mixed foreground prototype
against a per-position attention-built background prototype.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
from scipy import ndimage

from .core import (EmptyMaskError, Mask, ShapeMismatchError, cosine_map,
                   masked_average_pool, resample_mask)
from .episodes import Episode
from .prompts import DEFAULT_PROMPT_TEMPLATES

log = logging.getLogger(__name__)


class MissingGroundTruthError(ValueError):
    """Oracle mask source needs ground truth the episode does not carry."""


class ScorerUnavailableError(RuntimeError):
    """External scorer cannot serve a request."""


# ---------------------------------------------------------------------------
# initial mask sources


@dataclass
class SourceConfig:
    """Where initial pseudo masks come from.

    ``oracle_corruptor`` perturbs ground truth with a seeded RNG: an optional
    morphological step of radius ``morph_radius`` (mode "dilate", "erode" or
    "random"), then independent pixel flips at rate ``rho``.
    ``omit_query_components`` drops whole connected components from the query
    mask first, simulating a detector that misses an object entirely.

    ``external_scorer`` sends prompt-expanded class names to a dense scorer
    and takes the argmax channel of the returned score grid.
    """

    backend: str = "oracle_corruptor"
    rho: float = 0.2
    morph_radius: int = 1
    morph_mode: str = "dilate"
    omit_query_components: int = 0
    seed: int = 0
    feature_stride: int = 1
    fixture_dir: str = ""
    classes: tuple = ()          # ((id, name), ...) ordering for the scorer
    prompt_templates: tuple = tuple(DEFAULT_PROMPT_TEMPLATES)


@dataclass
class ScoreRequest:
    """One scorer call: raw image bytes plus per-class prompt expansions."""

    image_id: str
    image_bytes: bytes
    class_prompts: list          # list (per class) of lists of prompt strings


class ExternalScorer(Protocol):
    def score(self, request: ScoreRequest) -> np.ndarray:
        """Return a (n_classes, h, w) per-pixel class-score grid."""
        ...


class RecordedScorer:
    """Scorer backed by a directory of recorded score grids keyed by image id.

    The fixture layout is one ``<image_id>.npy`` array of shape
    (n_classes, h, w) per image, with rows following the configured class
    order. Used for offline tests of the external path.
    """

    def __init__(self, fixture_dir):
        self.fixture_dir = Path(fixture_dir)
        if not self.fixture_dir.is_dir():
            raise ScorerUnavailableError(f"no fixture directory {fixture_dir}")

    def score(self, request: ScoreRequest) -> np.ndarray:
        path = self.fixture_dir / f"{request.image_id}.npy"
        if not path.exists():
            raise ScorerUnavailableError(f"no recorded response for {request.image_id!r}")
        return np.load(path)


def expand_prompts(class_names: Sequence[str], templates: Sequence[str]) -> list:
    return [[t.format(name) for t in templates] for name in class_names]


def _corrupt(mask: np.ndarray, rng: np.random.Generator, rho: float,
             morph_radius: int, morph_mode: str, omit_components: int) -> np.ndarray:
    out = mask.astype(bool)
    if omit_components > 0 and out.any():
        labels, n = ndimage.label(out)
        if n > 1:
            drop = rng.choice(np.arange(1, n + 1), size=min(omit_components, n - 1),
                              replace=False)
            for d in drop:
                out[labels == d] = False
    if morph_radius > 0 and out.any():
        mode = morph_mode
        if mode == "random":
            mode = "dilate" if rng.random() < 0.5 else "erode"
        structure = ndimage.generate_binary_structure(2, 1)
        if mode == "dilate":
            out = ndimage.binary_dilation(out, structure, iterations=morph_radius)
        elif mode == "erode":
            out = ndimage.binary_erosion(out, structure, iterations=morph_radius)
        else:
            raise ValueError(f"unknown morph mode {morph_mode!r}")
    if rho > 0:
        flips = rng.random(out.shape) < rho
        out = out ^ flips
    return out.astype(np.float32)


def _image_bytes(sample_image: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    np.save(buf, sample_image.numpy())
    return buf.getvalue()


def generate_initial_masks(episode: Episode, src: SourceConfig,
                           scorer: ExternalScorer | None = None):
    """Initial pseudo masks for every episode image, at feature resolution.

    Returns (support_masks, query_mask) where ``support_masks`` has one entry
    per shot. Feature resolution is the image size divided by
    ``src.feature_stride``.
    """
    if src.backend == "oracle_corruptor":
        return _oracle_masks(episode, src)
    if src.backend == "external_scorer":
        return _external_masks(episode, src, scorer)
    raise ValueError(f"unknown mask source backend {src.backend!r}")


def _feature_size(image: torch.Tensor, stride: int) -> tuple[int, int]:
    return image.shape[-2] // stride, image.shape[-1] // stride


def _oracle_masks(episode: Episode, src: SourceConfig):
    def one(sample, index: int, omit: int) -> Mask:
        if sample.gt_mask is None:
            raise MissingGroundTruthError(
                f"sample {sample.image_id!r} has no ground truth for the oracle source")
        size = _feature_size(sample.image, src.feature_stride)
        base = resample_mask(sample.gt_mask, size).values.numpy()
        rng = np.random.default_rng([src.seed, episode.episode_id, index])
        corrupted = _corrupt(base, rng, src.rho, src.morph_radius,
                             src.morph_mode, omit)
        return Mask(torch.from_numpy(corrupted), kind="binary")

    support = [one(s, i + 1, 0) for i, s in enumerate(episode.support)]
    query = one(episode.query, 0, src.omit_query_components)
    return support, query


def _external_masks(episode: Episode, src: SourceConfig,
                    scorer: ExternalScorer | None):
    if scorer is None:
        if not src.fixture_dir:
            raise ScorerUnavailableError("external backend needs a scorer or fixture_dir")
        scorer = RecordedScorer(src.fixture_dir)
    if not src.classes:
        raise ScorerUnavailableError("external backend needs the class list")
    ids = [cid for cid, _ in src.classes]
    names = [name for _, name in src.classes]
    try:
        row = ids.index(episode.class_id)
    except ValueError:
        raise ScorerUnavailableError(
            f"episode class {episode.class_id} missing from scorer class list")
    prompts = expand_prompts(names, src.prompt_templates)

    def one(sample) -> Mask:
        scores = scorer.score(ScoreRequest(
            image_id=sample.image_id,
            image_bytes=_image_bytes(sample.image),
            class_prompts=prompts,
        ))
        if scores.ndim != 3 or scores.shape[0] != len(ids):
            raise ScorerUnavailableError(
                f"scorer returned shape {scores.shape}, wanted ({len(ids)}, h, w)")
        hard = (scores.argmax(axis=0) == row).astype(np.float32)
        mask = Mask(torch.from_numpy(hard), kind="binary")
        return resample_mask(mask, _feature_size(sample.image, src.feature_stride))

    return [one(s) for s in episode.support], one(episode.query)


# ---------------------------------------------------------------------------
# refinement


@dataclass
class RefinerConfig:
    alpha: float = 0.5                  # support/query share in the mixed prototype
    binarize_rule: str = "argmax_fg_bg"
    # Each round re-estimates the prototypes from the previous round's output,
    # which keeps stripping false positives as the foreground prototype
    # purifies; a single round leaves heavily corrupted masks far from clean.
    # Rounds stop early once the masks reach a fixed point.
    iterations: int = 5


def mix_foreground_prototypes(p_support: torch.Tensor, p_query: torch.Tensor,
                              alpha: float) -> torch.Tensor:
    """Convex blend of the two foreground prototypes."""
    if p_support.shape != p_query.shape:
        raise ShapeMismatchError("prototype shapes differ")
    return alpha * p_support + (1.0 - alpha) * p_query


def background_prototype_field(feats: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-position background prototype, shape (h, w, C).

    Background-masked features attend over the full feature grid with raw
    dot-product logits; each row of the attention is a distribution over all
    positions and mixes the background-masked features. Rows belonging to
    foreground positions carry zero queries, so they receive the uniform
    average of the background features.
    """
    c, h, w = feats.shape
    if mask.shape != (h, w):
        raise ShapeMismatchError("background_prototype_field: mask/feature size mismatch")
    flat = feats.reshape(c, -1).T                      # (N, C)
    bg = flat * (1.0 - mask).reshape(-1, 1)            # foreground rows zeroed
    logits = bg @ flat.T                               # (N, N)
    attn = torch.softmax(logits, dim=1)
    out = attn @ bg                                    # (N, C)
    return out.reshape(h, w, c)


def _rowwise_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine between matching rows of two (N, C) stacks; zero rows give 0."""
    an = torch.linalg.vector_norm(a, dim=1)
    bn = torch.linalg.vector_norm(b, dim=1)
    asafe = torch.where(an == 0, torch.ones_like(an), an)
    bsafe = torch.where(bn == 0, torch.ones_like(bn), bn)
    return (a * b).sum(dim=1) / (asafe * bsafe)


def refine_masks(feat_s: torch.Tensor, feat_q: torch.Tensor,
                 m_s_init: Mask, m_q_init: Mask,
                 cfg: RefinerConfig) -> tuple[Mask, Mask]:
    """Re-decide both pseudo masks against prototype evidence.

    Every pixel becomes foreground iff its cosine to the mixed foreground
    prototype strictly exceeds its cosine to the per-position background
    prototype; ties go to background. A mask with empty foreground or empty
    background is degenerate: it passes through unchanged (and when either
    foreground is empty the mixed prototype is undefined, so both masks pass
    through). Runs up to ``cfg.iterations`` rounds, re-estimating prototypes
    from the previous round's output, and stops early at a fixed point.
    """
    m_s, m_q = m_s_init, m_q_init
    for _ in range(max(1, cfg.iterations)):
        fg_s = m_s.foreground_count()
        fg_q = m_q.foreground_count()
        if fg_s == 0 or fg_q == 0:
            log.warning("refine_masks: empty foreground, passing masks through")
            return m_s, m_q
        p_s = masked_average_pool(feat_s, m_s.values)
        p_q = masked_average_pool(feat_q, m_q.values)
        p_m = mix_foreground_prototypes(p_s, p_q, cfg.alpha)

        def one(feats: torch.Tensor, mask: Mask) -> Mask:
            if float((1.0 - mask.values).sum()) == 0.0:
                log.warning("refine_masks: mask has no background, passing through")
                return mask
            s_fg = cosine_map(feats, p_m)
            field = background_prototype_field(feats, mask.values)
            flat = feats.reshape(feats.shape[0], -1).T
            s_bg = _rowwise_cosine(flat, field.reshape(-1, feats.shape[0]))
            s_bg = s_bg.reshape(mask.values.shape)
            return Mask((s_fg > s_bg).to(feats.dtype), kind="binary")

        new_s, new_q = one(feat_s, m_s), one(feat_q, m_q)
        if torch.equal(new_s.values, m_s.values) and torch.equal(new_q.values, m_q.values):
            return new_s, new_q
        m_s, m_q = new_s, new_q
    return m_s, m_q
