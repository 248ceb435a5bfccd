"""Small generators shared by the test modules."""

from __future__ import annotations

import numpy as np
import torch

from lfss.core import Mask
from lfss.episodes import Episode, EpisodeSample


def rand_feats(rng: np.random.Generator, c: int, h: int, w: int,
               dtype=torch.float32) -> torch.Tensor:
    return torch.tensor(rng.normal(size=(c, h, w)), dtype=dtype)


def rand_binary(rng: np.random.Generator, h: int, w: int, p: float = 0.5,
                ensure_fg: bool = True, ensure_bg: bool = False) -> Mask:
    grid = (rng.random((h, w)) < p).astype(np.float32)
    if ensure_fg and grid.sum() == 0:
        grid[rng.integers(h), rng.integers(w)] = 1.0
    if ensure_bg and grid.sum() == grid.size:
        grid[rng.integers(h), rng.integers(w)] = 0.0
    return Mask(torch.tensor(grid), kind="binary")


def rand_soft(rng: np.random.Generator, h: int, w: int) -> Mask:
    return Mask(torch.tensor(rng.random((h, w)), dtype=torch.float32), kind="soft")


def toy_episode(rng: np.random.Generator, episode_id: int = 0, class_id: int = 1,
                k_shot: int = 1, channels: int = 4, size: int = 8,
                with_gt: bool = True) -> Episode:
    def sample(tag: str) -> EpisodeSample:
        image = rand_feats(rng, channels, size, size)
        gt = rand_binary(rng, size, size, p=0.3, ensure_bg=True) if with_gt else None
        return EpisodeSample(image_id=tag, image=image, gt_mask=gt)

    return Episode(
        episode_id=episode_id,
        class_id=class_id,
        class_name=f"class-{class_id}",
        support=[sample(f"s{i}") for i in range(k_shot)],
        query=sample("q"),
    )
