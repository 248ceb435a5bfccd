"""Part-level prototype supervision: seed placement, rectification, clustering.

Seeds are spread over the pseudo-mask foreground by iterative farthest-point
selection, nudged toward prototype-like features, then used to initialise a
small fixed-iteration feature+coordinate clustering whose centroids act as
part prototypes. Their summed cosine response forms the association map.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from .core import (EmptyMaskError, Mask, ShapeMismatchError,
                   ZeroPrototypeError, cosine_map)

log = logging.getLogger(__name__)


class InsufficientForegroundError(ValueError):
    """Mask has fewer foreground pixels than requested seeds."""


@dataclass
class ClusterConfig:
    n_sp: int = 5                  # part prototypes per mask
    grid_n: int = 3                # rectification window side
    r: float = 1.0                 # spatial-distance weight in the cluster metric
    iters: int = 5                 # fixed clustering iterations
    normalize_assoc: bool = False  # divide association map by n_sp
    assoc_target: str = "decoded"  # or "literal_support"


@dataclass
class SuperpixelCentroids:
    features: torch.Tensor   # (n_sp, C)
    coords: torch.Tensor     # (n_sp, 2) normalised (row, col)
    iteration: int = 0


def _initial_sqdist(fg: np.ndarray) -> np.ndarray:
    """Exact integer squared distance from each pixel to the background set.

    All-foreground masks have no background, so every distance is "infinite";
    a large sentinel keeps the arithmetic in int64.
    """
    h, w = fg.shape
    if fg.all():
        return np.full((h, w), np.iinfo(np.int64).max // 4, dtype=np.int64)
    # nearest-background indices give squared distances with no float rounding
    idx = ndimage.distance_transform_edt(fg, return_distances=False,
                                         return_indices=True)
    rr, cc = np.mgrid[0:h, 0:w]
    d2 = (rr - idx[0]) ** 2 + (cc - idx[1]) ** 2
    return d2.astype(np.int64)


def _farthest_rounds(fg: np.ndarray, d2: np.ndarray, n_rounds: int) -> list:
    """Pick ``n_rounds`` foreground pixels maximising distance to the landmark set.

    ``d2`` holds squared distance to the current landmarks and is updated in
    place as picks are added. Ties break in row-major order.
    """
    h, w = fg.shape
    rr, cc = np.mgrid[0:h, 0:w]
    picks = []
    masked = np.where(fg, d2, -1)
    for _ in range(n_rounds):
        flat = int(np.argmax(masked))          # first maximum in row-major order
        r, c = divmod(flat, w)
        picks.append((int(r), int(c)))
        upd = (rr - r) ** 2 + (cc - c) ** 2
        np.minimum(d2, upd, out=d2)
        masked = np.where(fg, d2, -1)
    return picks


def place_seeds(mask: Mask, n_sp: int) -> list:
    """Farthest-point seed positions on the mask foreground.

    The landmark set starts as the background pixel set; each round adds the
    foreground pixel with the largest Euclidean distance to the nearest
    landmark (row-major tie-break), so seeds stay interior and mutually far.
    An all-foreground mask makes the first distance unbounded everywhere and
    the first seed lands at (0, 0).
    """
    fg = (mask.values > 0.5).cpu().numpy()
    n_fg = int(fg.sum())
    if n_fg == 0:
        raise EmptyMaskError("place_seeds: mask has no foreground")
    if n_fg < n_sp:
        raise InsufficientForegroundError(
            f"place_seeds: {n_fg} foreground pixels < n_sp={n_sp}")
    d2 = _initial_sqdist(fg)
    return _farthest_rounds(fg, d2, n_sp)


def rectify_seeds(seeds: Sequence, feat_s: torch.Tensor, p_q_f: torch.Tensor,
                  mask: Mask, grid_n: int = 3) -> list:
    """Move each seed to the most prototype-like cell of its local window.

    The window is ``grid_n`` x ``grid_n`` centred on the seed, clipped at the
    borders and restricted to mask foreground so seeds never leave the pseudo
    mask; ties break in row-major order. Seeds that collapse onto the same
    cell are deduplicated and replaced by extra farthest-point rounds so the
    seed count is preserved.
    """
    if float(torch.linalg.vector_norm(p_q_f)) == 0.0:
        raise ZeroPrototypeError("rectify_seeds: query prototype has zero norm")
    fg = (mask.values > 0.5).cpu().numpy()
    h, w = fg.shape
    sims = cosine_map(feat_s, p_q_f)
    lo = (grid_n - 1) // 2
    hi = grid_n // 2

    moved = []
    for (r, c) in seeds:
        best = None
        best_sim = None
        for wr in range(max(0, r - lo), min(h, r + hi + 1)):
            for wc in range(max(0, c - lo), min(w, c + hi + 1)):
                if not fg[wr, wc]:
                    continue
                s = float(sims[wr, wc])
                if best_sim is None or s > best_sim:
                    best, best_sim = (wr, wc), s
        moved.append(best if best is not None else (r, c))

    # collapse duplicates, then restore the count with farthest-point rounds
    kept = []
    for pos in moved:
        if pos not in kept:
            kept.append(pos)
    if len(kept) < len(seeds):
        d2 = _initial_sqdist(fg)
        rr, cc = np.mgrid[0:h, 0:w]
        for (r, c) in kept:
            np.minimum(d2, (rr - r) ** 2 + (cc - c) ** 2, out=d2)
        kept.extend(_farthest_rounds(fg, d2, len(seeds) - len(kept)))
    return kept


def _norm_coords(rows: torch.Tensor, cols: torch.Tensor, h: int, w: int):
    """Pixel coordinates scaled into [0, 1] per axis."""
    ry = max(h - 1, 1)
    rx = max(w - 1, 1)
    return torch.stack([rows / ry, cols / rx], dim=-1)


def cluster_superpixels(feats: torch.Tensor, mask: Mask, seeds: Sequence,
                        cfg: ClusterConfig) -> SuperpixelCentroids:
    """Soft-assignment clustering of foreground pixels around the seeds.

    Pixels carry their features plus [0,1]-normalised coordinates. Assignment
    strength between pixel p and centroid i is exp(-Q) with
    Q = sqrt(|feature diff|^2 + (|coord diff| / r)^2); centroids are the
    assignment-weighted means of the augmented vectors, updated for a fixed
    ``cfg.iters`` iterations (no convergence test).
    """
    c, h, w = feats.shape
    fg = mask.values > 0.5
    if not bool(fg.any()):
        raise EmptyMaskError("cluster_superpixels: mask has no foreground")
    idx = fg.reshape(-1).nonzero(as_tuple=True)[0]
    rows = (idx // w).to(feats.dtype)
    cols = (idx % w).to(feats.dtype)
    pix_feat = feats.reshape(c, -1).T[idx]                       # (N_f, C)
    pix_coord = _norm_coords(rows, cols, h, w)                    # (N_f, 2)
    aug = torch.cat([pix_feat, pix_coord], dim=1)

    srows = torch.tensor([s[0] for s in seeds], dtype=feats.dtype)
    scols = torch.tensor([s[1] for s in seeds], dtype=feats.dtype)
    cent_feat = torch.stack([feats[:, int(r), int(cl)] for r, cl in seeds])
    cent = torch.cat([cent_feat, _norm_coords(srows, scols, h, w)], dim=1)

    for it in range(cfg.iters):
        d_f = torch.cdist(pix_feat, cent[:, :c])
        d_s = torch.cdist(pix_coord, cent[:, c:])
        q = torch.sqrt(d_f ** 2 + (d_s / cfg.r) ** 2)
        strength = torch.exp(-q)                                  # (N_f, n_sp)
        denom = strength.sum(dim=0)
        new = (strength.T @ aug) / denom.unsqueeze(1)
        log.debug("cluster_superpixels iter %d drift %.3e", it,
                  float(torch.linalg.vector_norm(new - cent)))
        cent = new

    return SuperpixelCentroids(features=cent[:, :c], coords=cent[:, c:],
                               iteration=cfg.iters)


def association_map(centroids: SuperpixelCentroids, feat_target: torch.Tensor,
                    normalize: bool = False) -> torch.Tensor:
    """Summed cosine response of every part prototype over a feature grid.

    Values lie in [-n_sp, n_sp], or [-1, 1] with ``normalize``. Target pixels
    with zero features contribute 0 per prototype; a zero-norm prototype is an
    error.
    """
    n_sp = centroids.features.shape[0]
    if centroids.features.shape[1] != feat_target.shape[0]:
        raise ShapeMismatchError("association_map: channel mismatch")
    total = torch.zeros(feat_target.shape[1:], dtype=feat_target.dtype)
    for i in range(n_sp):
        total = total + cosine_map(feat_target, centroids.features[i])
    return total / n_sp if normalize else total
