"""Support/query correlation: masked cross-attention, a focused support
prototype, and the pair of correlation maps handed to the decoder.

The mask-restricted map (RCM) is precise but blind to anything the query
pseudo mask missed; the unrestricted map (FCM) answers everywhere and can
flag objects the pseudo mask omitted. They are complementary and always
travel as a fixed-order pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .core import (EmptyMaskError, Mask, ShapeMismatchError, cosine_map,
                   pairwise_cosine)


@dataclass
class AttentionConfig:
    # how attention collapses over query rows to weight support positions
    reduction: str = "sum"        # sum | mean | max


@dataclass
class CorrelationStack:
    """The (rcm, fcm) pair; stacking order is fixed."""

    rcm: torch.Tensor   # (h, w)
    fcm: torch.Tensor   # (h, w)

    def stacked(self) -> torch.Tensor:
        if self.rcm.shape != self.fcm.shape:
            raise ShapeMismatchError("correlation maps disagree on shape")
        return torch.stack([self.rcm, self.fcm], dim=0)

    @classmethod
    def unstack(cls, stacked: torch.Tensor) -> "CorrelationStack":
        if stacked.dim() != 3 or stacked.shape[0] != 2:
            raise ShapeMismatchError(f"expected (2,h,w), got {tuple(stacked.shape)}")
        return cls(rcm=stacked[0], fcm=stacked[1])


def cross_attention(feat_q: torch.Tensor, feat_s: torch.Tensor,
                    m_q: Mask, m_s: Mask) -> torch.Tensor:
    """Row-stochastic attention from masked query pixels to masked support pixels.

    Logits are cosine similarities between mask-weighted feature vectors;
    pixels zeroed by either mask contribute logit 0 (not -inf), so every row
    is still a softmax over all support positions and sums to 1.
    Returns (h_q * w_q, h_s * w_s).
    """
    if feat_q.shape[0] != feat_s.shape[0]:
        raise ShapeMismatchError("cross_attention: channel mismatch")
    rows = (feat_q * m_q.values.unsqueeze(0)).reshape(feat_q.shape[0], -1).T
    cols = (feat_s * m_s.values.unsqueeze(0)).reshape(feat_s.shape[0], -1).T
    logits = pairwise_cosine(rows, cols)
    return torch.softmax(logits, dim=1)


def focused_prototype(attn: torch.Tensor, feat_s: torch.Tensor, m_s: Mask,
                      reduction: str = "sum") -> torch.Tensor:
    """Attention-weighted support prototype over the support pseudo mask.

    Attention is reduced over query rows ("sum" by default; "mean"/"max" are
    ablation variants) to one weight per support position; the prototype is
    the weighted sum of mask-gated support features divided by the mask area.
    """
    c, h, w = feat_s.shape
    if attn.shape[1] != h * w:
        raise ShapeMismatchError("focused_prototype: attention/support size mismatch")
    area = m_s.values.sum()
    if float(area) == 0.0:
        raise EmptyMaskError("focused_prototype: support mask is empty")
    if reduction == "sum":
        weights = attn.sum(dim=0)
    elif reduction == "mean":
        weights = attn.mean(dim=0)
    elif reduction == "max":
        weights = attn.amax(dim=0)
    else:
        raise ValueError(f"unknown attention reduction {reduction!r}")
    gated = (feat_s * m_s.values.unsqueeze(0)).reshape(c, -1)
    return (gated * weights.unsqueeze(0)).sum(dim=1) / area


def roi_correlation_map(p_a: torch.Tensor, feat_q: torch.Tensor, m_q: Mask) -> torch.Tensor:
    """Cosine between the focused prototype and mask-gated query features.

    Positions outside the query pseudo mask have a zero feature vector and
    therefore a similarity of exactly 0.
    """
    gated = feat_q * m_q.values.unsqueeze(0)
    return cosine_map(gated, p_a)


def full_correlation_map(p_a: torch.Tensor, feat_q: torch.Tensor) -> torch.Tensor:
    """Cosine between the focused prototype and the unmasked query features."""
    return cosine_map(feat_q, p_a)


def correlation_stack(p_a: torch.Tensor, feat_q: torch.Tensor, m_q: Mask) -> CorrelationStack:
    return CorrelationStack(
        rcm=roi_correlation_map(p_a, feat_q, m_q),
        fcm=full_correlation_map(p_a, feat_q),
    )
