"""Shared tensor types and dense-similarity primitives used across the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F


class EmptyMaskError(ValueError):
    """Mask has no foreground where foreground is required."""


class ZeroPrototypeError(ValueError):
    """Prototype vector has zero norm, cosine against it is undefined."""


class ShapeMismatchError(ValueError):
    """Operands disagree on spatial or channel shape."""


@dataclass
class FeatureMap:
    """Dense feature grid of shape (C, h, w).

    ``stride`` records the spatial reduction relative to the input image,
    so a (C, h, w) map with stride 8 describes an (8h, 8w) image.
    """

    values: torch.Tensor
    stride: int = 1

    def __post_init__(self):
        if self.values.dim() != 3:
            raise ShapeMismatchError(f"feature map must be (C,h,w), got {tuple(self.values.shape)}")
        if not torch.isfinite(self.values).all():
            raise ValueError("feature map contains non-finite entries")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]


@dataclass
class Mask:
    """Single-channel mask of shape (h, w).

    ``kind`` is "binary" (entries in {0,1}) or "soft" (entries in [0,1]).
    """

    values: torch.Tensor
    kind: str = "binary"

    def __post_init__(self):
        if self.values.dim() != 2:
            raise ShapeMismatchError(f"mask must be (h,w), got {tuple(self.values.shape)}")
        if self.kind not in ("binary", "soft"):
            raise ValueError(f"unknown mask kind {self.kind!r}")
        v = self.values
        if self.kind == "binary":
            if not bool(((v == 0) | (v == 1)).all()):
                raise ValueError("binary mask entries must be 0 or 1")
        else:
            if not bool(((v >= 0) & (v <= 1)).all()):
                raise ValueError("soft mask entries must lie in [0,1]")

    @property
    def spatial(self) -> tuple[int, int]:
        return self.values.shape[0], self.values.shape[1]

    def foreground_count(self) -> float:
        return float(self.values.sum())

    def complement(self) -> "Mask":
        return Mask(1.0 - self.values, kind=self.kind)


def _check_same_spatial(feats: torch.Tensor, mask: torch.Tensor):
    if feats.shape[-2:] != mask.shape[-2:]:
        raise ShapeMismatchError(
            f"feature grid {tuple(feats.shape[-2:])} vs mask {tuple(mask.shape[-2:])}")


def masked_average_pool(feats: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mask-weighted mean feature: sum(F * M) / sum(M), per channel.

    ``feats`` is (C, h, w), ``mask`` is (h, w) with weights in [0,1].
    Raises EmptyMaskError when the mask weight sum is zero.
    """
    _check_same_spatial(feats, mask)
    denom = mask.sum()
    if float(denom) == 0.0:
        raise EmptyMaskError("masked_average_pool: mask selects no pixels")
    return (feats * mask.unsqueeze(0)).sum(dim=(1, 2)) / denom


def cosine_map(feats: torch.Tensor, proto: torch.Tensor) -> torch.Tensor:
    """Per-pixel cosine similarity between a (C,h,w) grid and a (C,) prototype.

    Pixels with a zero feature vector map to similarity 0; a zero-norm
    prototype raises ZeroPrototypeError.
    """
    if proto.dim() != 1 or proto.shape[0] != feats.shape[0]:
        raise ShapeMismatchError(
            f"prototype ({tuple(proto.shape)}) does not match {feats.shape[0]} channels")
    pnorm = torch.linalg.vector_norm(proto)
    if float(pnorm) == 0.0:
        raise ZeroPrototypeError("cosine_map: prototype has zero norm")
    fnorm = torch.linalg.vector_norm(feats, dim=0)
    dots = (feats * proto.view(-1, 1, 1)).sum(dim=0)
    # zero feature vectors produce dot 0; dividing by 1 keeps the result exactly 0
    safe = torch.where(fnorm == 0, torch.ones_like(fnorm), fnorm)
    return dots / (safe * pnorm)


def pairwise_cosine(rows: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
    """Cosine similarity matrix between row vectors of two (N,C)/(M,C) stacks.

    Zero vectors on either side yield similarity exactly 0 rather than NaN.
    """
    if rows.shape[1] != cols.shape[1]:
        raise ShapeMismatchError("pairwise_cosine: channel mismatch")
    rn = torch.linalg.vector_norm(rows, dim=1)
    cn = torch.linalg.vector_norm(cols, dim=1)
    rs = torch.where(rn == 0, torch.ones_like(rn), rn)
    cs = torch.where(cn == 0, torch.ones_like(cn), cn)
    return (rows @ cols.T) / (rs.unsqueeze(1) * cs.unsqueeze(0))


def resample_mask(mask: Mask, size: tuple[int, int]) -> Mask:
    """Resample a mask to ``size`` = (h, w).

    Binary masks use nearest-neighbour so the value set {0,1} is preserved;
    soft masks use bilinear interpolation with half-pixel centres. Resampling
    to the same size returns an identical copy.
    """
    h, w = size
    if (h, w) == mask.spatial:
        return Mask(mask.values.clone(), kind=mask.kind)
    x = mask.values.unsqueeze(0).unsqueeze(0)
    if mask.kind == "binary":
        out = F.interpolate(x, size=(h, w), mode="nearest")
    else:
        out = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
        out = out.clamp(0.0, 1.0)
    return Mask(out[0, 0], kind=mask.kind)


@dataclass
class IoUReport:
    """Per-class IoU plus the mean over classes that appeared."""

    per_class: dict = field(default_factory=dict)
    mean: float = 0.0


def mean_iou(
    preds: Sequence[Mask],
    gts: Sequence[Mask],
    class_ids: Sequence[int],
    include_background: bool = False,
    per_episode: bool = False,
) -> IoUReport:
    """Mean intersection-over-union across episodes.

    Default behaviour accumulates intersections and unions per class over all
    episodes and divides once at the end; ``per_episode=True`` instead averages
    per-episode IoU within each class. Classes whose accumulated union is zero
    are excluded from the mean. ``include_background`` adds one extra class
    built from the complemented masks.
    """
    if not (len(preds) == len(gts) == len(class_ids)):
        raise ShapeMismatchError("mean_iou: preds, gts and class_ids must align")
    inter: dict = {}
    union: dict = {}
    ep_scores: dict = {}
    BACKGROUND = "background"

    def _accumulate(key, p: torch.Tensor, g: torch.Tensor):
        i = float(((p > 0.5) & (g > 0.5)).sum())
        u = float(((p > 0.5) | (g > 0.5)).sum())
        inter[key] = inter.get(key, 0.0) + i
        union[key] = union.get(key, 0.0) + u
        if u > 0:
            ep_scores.setdefault(key, []).append(i / u)

    for pred, gt, cid in zip(preds, gts, class_ids):
        if pred.spatial != gt.spatial:
            raise ShapeMismatchError("mean_iou: prediction/ground-truth size mismatch")
        _accumulate(cid, pred.values, gt.values)
        if include_background:
            _accumulate(BACKGROUND, 1.0 - pred.values, 1.0 - gt.values)

    per_class = {}
    for key in inter:
        if per_episode:
            if key in ep_scores:
                per_class[key] = sum(ep_scores[key]) / len(ep_scores[key])
        elif union[key] > 0:
            per_class[key] = inter[key] / union[key]
    mean = sum(per_class.values()) / len(per_class) if per_class else 0.0
    return IoUReport(per_class=per_class, mean=mean)


def pixel_accuracy(preds: Sequence[Mask], gts: Sequence[Mask]) -> float:
    """Fraction of pixels agreeing with ground truth, pooled over episodes."""
    if len(preds) != len(gts):
        raise ShapeMismatchError("pixel_accuracy: preds and gts must align")
    agree = 0.0
    total = 0.0
    for pred, gt in zip(preds, gts):
        if pred.spatial != gt.spatial:
            raise ShapeMismatchError("pixel_accuracy: size mismatch")
        agree += float(((pred.values > 0.5) == (gt.values > 0.5)).sum())
        total += float(gt.values.numel())
    return agree / total if total else 0.0


def binarize(mask: Mask, threshold: float = 0.5) -> Mask:
    """Threshold a soft mask; values strictly above ``threshold`` become 1."""
    return Mask((mask.values > threshold).to(mask.values.dtype), kind="binary")


def as_tensor(x, dtype=torch.float32) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(x, dtype=dtype)
