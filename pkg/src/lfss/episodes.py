"""Dataset indexing, fold splits, episodic sampling and the synthetic benchmark generator."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from .core import Mask


class BadClassCountError(ValueError):
    """Class count does not divide evenly into four folds."""


class ExhaustedClassError(RuntimeError):
    """A class lacks enough distinct images for the requested shot count."""


class MissingFileError(FileNotFoundError):
    """A dataset file referenced by the index is absent."""


class CorruptMaskError(ValueError):
    """A mask file contains labels outside the declared class set."""


class IoFailureError(RuntimeError):
    """A dataset file could not be parsed."""


# ---------------------------------------------------------------------------
# fold protocol


@dataclass(frozen=True)
class FoldSplit:
    fold: int
    test_classes: tuple
    train_classes: tuple


def split_folds(class_ids: Sequence[int], fold: int) -> FoldSplit:
    """Carve a contiguous quarter of the class list out as the test split.

    ``class_ids`` is the ordered class list; fold i tests classes
    [i*q, (i+1)*q) where q = len/4, and trains on the rest.
    """
    n = len(class_ids)
    if n < 4 or n % 4 != 0:
        raise BadClassCountError(f"class count {n} does not split into 4 folds")
    if not 0 <= fold <= 3:
        raise ValueError(f"fold must be in 0..3, got {fold}")
    q = n // 4
    test = tuple(class_ids[fold * q:(fold + 1) * q])
    train = tuple(c for c in class_ids if c not in test)
    return FoldSplit(fold=fold, test_classes=test, train_classes=train)


# ---------------------------------------------------------------------------
# dataset layout: images/, masks/ (indexed-palette PNG), classes.txt, manifest.jsonl


@dataclass
class ImageRecord:
    image_id: str
    image_path: Path
    mask_path: Path
    class_ids: tuple


class SegmentationDataset:
    """Index over an on-disk dataset.

    Layout: ``images/`` (``.npy`` feature grids for synthetic data, ordinary
    image files otherwise), ``masks/`` with indexed-palette PNGs whose pixel
    value is the class id, ``classes.txt`` with ``<id> <name>`` lines, and a
    line-delimited ``manifest.jsonl`` naming every record.
    """

    def __init__(self, root, kind: str = "synthetic"):
        self.root = Path(root)
        self.kind = kind
        self.classes = self._read_classes()
        self.records = self._read_manifest()
        self.by_class: dict = {}
        for idx, rec in enumerate(self.records):
            for cid in rec.class_ids:
                self.by_class.setdefault(cid, []).append(idx)

    def _read_classes(self) -> dict:
        path = self.root / "classes.txt"
        if not path.exists():
            raise MissingFileError(f"missing {path}")
        classes = {}
        for line in path.read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            try:
                cid, name = line.split(maxsplit=1)
                classes[int(cid)] = name
            except ValueError as e:
                raise IoFailureError(f"bad line in {path}: {line!r}") from e
        return classes

    def _read_manifest(self) -> list:
        path = self.root / "manifest.jsonl"
        if not path.exists():
            raise MissingFileError(f"missing {path}")
        records = []
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise IoFailureError(f"bad manifest line: {line[:80]!r}") from e
            records.append(ImageRecord(
                image_id=row["id"],
                image_path=self.root / row["image"],
                mask_path=self.root / row["mask"],
                class_ids=tuple(row["class_ids"]),
            ))
        return records

    def class_list(self) -> list:
        return sorted(self.classes)

    def record_for(self, image_id: str) -> ImageRecord:
        for rec in self.records:
            if rec.image_id == image_id:
                return rec
        raise MissingFileError(f"no record with id {image_id!r}")

    def load_image(self, rec: ImageRecord) -> torch.Tensor:
        """Image as a float32 (C, H, W) tensor. Synthetic grids load verbatim."""
        if not rec.image_path.exists():
            raise MissingFileError(f"missing {rec.image_path}")
        if rec.image_path.suffix == ".npy":
            arr = np.load(rec.image_path)
            if arr.ndim != 3:
                raise IoFailureError(f"{rec.image_path} is not a (C,H,W) grid")
            return torch.from_numpy(np.ascontiguousarray(arr)).float()
        img = Image.open(rec.image_path).convert("RGB")
        arr = np.asarray(img, dtype=np.float32) / 255.0
        return torch.from_numpy(arr.transpose(2, 0, 1).copy())

    def load_class_mask(self, rec: ImageRecord, class_id: int) -> Mask:
        """Binary mask for one class from the indexed-palette PNG."""
        if not rec.mask_path.exists():
            raise MissingFileError(f"missing {rec.mask_path}")
        arr = np.asarray(Image.open(rec.mask_path), dtype=np.int64)
        legal = set(self.classes) | {0}
        present = set(np.unique(arr).tolist())
        if not present <= legal:
            raise CorruptMaskError(
                f"{rec.mask_path} holds labels {sorted(present - legal)} outside the class set")
        binary = (arr == class_id).astype(np.float32)
        return Mask(torch.from_numpy(binary), kind="binary")


# ---------------------------------------------------------------------------
# episodes


@dataclass
class EpisodeSample:
    image_id: str
    image: torch.Tensor           # (C, H, W) float32
    gt_mask: Mask | None = None   # at image resolution


@dataclass
class Episode:
    episode_id: int
    class_id: int
    class_name: str
    support: list
    query: EpisodeSample

    @property
    def k_shot(self) -> int:
        return len(self.support)


def _resize_sample(image: torch.Tensor, mask: Mask | None, size: tuple[int, int]):
    import torch.nn.functional as F
    if image.shape[-2:] == size:
        return image, mask
    image = F.interpolate(image.unsqueeze(0), size=size, mode="bilinear",
                          align_corners=False)[0]
    if mask is not None:
        from .core import resample_mask
        mask = resample_mask(mask, size)
    return image, mask


def build_episode(dataset: SegmentationDataset, episode_id: int, class_id: int,
                  support_ids: Sequence[str], query_id: str,
                  input_size: tuple[int, int] | None = None) -> Episode:
    def _sample(image_id: str) -> EpisodeSample:
        rec = dataset.record_for(image_id)
        image = dataset.load_image(rec)
        mask = dataset.load_class_mask(rec, class_id)
        if input_size is not None and dataset.kind != "synthetic":
            image, mask = _resize_sample(image, mask, tuple(input_size))
        return EpisodeSample(image_id=image_id, image=image, gt_mask=mask)

    return Episode(
        episode_id=episode_id,
        class_id=class_id,
        class_name=dataset.classes.get(class_id, str(class_id)),
        support=[_sample(i) for i in support_ids],
        query=_sample(query_id),
    )


def episode_spec_at(dataset: SegmentationDataset, classes: Sequence[int],
                    seed: int, index: int, k_shot: int = 1) -> dict:
    """Deterministic episode description for stream position ``index``.

    Each index owns an independent RNG stream, so workers can take disjoint
    index ranges and reproduce the exact same episodes.
    """
    rng = np.random.default_rng([int(seed), int(index)])
    class_id = int(rng.choice(np.asarray(sorted(classes))))
    pool = dataset.by_class.get(class_id, [])
    if len(pool) < k_shot + 1:
        raise ExhaustedClassError(
            f"class {class_id} has {len(pool)} images, needs {k_shot + 1}")
    picks = rng.choice(len(pool), size=k_shot + 1, replace=False)
    ids = [dataset.records[pool[j]].image_id for j in picks]
    return {
        "episode_id": index,
        "class_id": class_id,
        "support_ids": ids[:k_shot],
        "query_id": ids[k_shot],
        "seed": int(seed),
    }


def sample_episodes(dataset: SegmentationDataset, classes: Sequence[int],
                    count: int, k_shot: int = 1, seed: int = 0,
                    start: int = 0,
                    input_size: tuple[int, int] | None = None) -> Iterator[Episode]:
    """Yield ``count - start`` reproducible episodes over the given classes."""
    for index in range(start, count):
        spec = episode_spec_at(dataset, classes, seed, index, k_shot)
        yield build_episode(dataset, spec["episode_id"], spec["class_id"],
                            spec["support_ids"], spec["query_id"], input_size)


def write_episode_manifest(path, specs: Sequence[dict]):
    path = Path(path)
    with path.open("w") as fh:
        for spec in specs:
            fh.write(json.dumps(spec) + "\n")


def read_episode_manifest(path) -> list:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing {path}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass
class SyntheticSpec:
    """Controls for the synthetic separability benchmark.

    Foreground features for class c are drawn as ``mu_c + sigma * noise`` with
    the class means mutually orthogonal. The background mean is re-drawn *per
    image* from the subspace orthogonal to every class mean (same norm as the
    class means), so ``|mu_c - mu_b| = delta`` always holds and delta/sigma
    sets separability — but no fixed "background direction" exists for a
    model to latch onto: telling foreground from background in a new image
    genuinely requires the support guidance. ``rho``/``morph_radius`` record
    the corruption level the benchmark is meant to be run with (the
    pseudo-mask source owns the live values).
    """

    n_classes: int = 8
    images_per_class: int = 12
    image_size: int = 32
    channels: int = 12
    shapes_per_image: int = 2
    shape_radius: tuple = (2, 4)
    delta: float = 4.0
    sigma: float = 1.0
    rho: float = 0.2
    morph_radius: int = 1
    seed: int = 0


def class_means(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal mean directions: returns (bg_basis, per-class means).

    Gram-Schmidt over seeded random vectors yields a full orthonormal basis;
    the first ``n_classes`` directions (scaled to ``delta / sqrt(2)``) are the
    class means and the remaining unit vectors span the background subspace
    from which each image draws its own background mean. Requires
    channels >= n_classes + 1 so that subspace is non-empty; separation
    between any class mean and any background mean is then exactly ``delta``.
    """
    if spec.channels < spec.n_classes + 1:
        raise ValueError("channels must be >= n_classes + 1 for orthogonal class means")
    rng = np.random.default_rng([spec.seed, 1001])
    raw = rng.normal(size=(spec.channels, spec.channels))
    basis = []
    for v in raw:
        for b in basis:
            v = v - np.dot(v, b) * b
        norm = np.linalg.norm(v)
        if norm < 1e-8:   # pathologically collinear draw; nudge deterministically
            v = v + 1.0
            for b in basis:
                v = v - np.dot(v, b) * b
            norm = np.linalg.norm(v)
        basis.append(v / norm)
    basis = np.stack(basis)
    scale = spec.delta / math.sqrt(2.0)
    return basis[spec.n_classes:], scale * basis[:spec.n_classes]


def background_mean(spec: SyntheticSpec, bg_basis: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    """One image's background mean: a random unit mix of the background basis
    scaled like a class mean, hence exactly ``delta`` from every class mean."""
    coef = rng.normal(size=bg_basis.shape[0])
    norm = np.linalg.norm(coef)
    if norm < 1e-8:
        coef = np.ones(bg_basis.shape[0])
        norm = np.linalg.norm(coef)
    return (spec.delta / math.sqrt(2.0)) * (coef / norm) @ bg_basis


def _draw_shapes(rng: np.random.Generator, size: int, n_shapes: int,
                 radius: tuple) -> np.ndarray:
    """Union of ellipses/rectangles, placed so components stay separated."""
    mask = np.zeros((size, size), dtype=bool)
    placed = []
    lo, hi = radius
    for _ in range(n_shapes):
        for _attempt in range(40):
            ry = rng.integers(lo, hi + 1)
            rx = rng.integers(lo, hi + 1)
            cy = rng.integers(ry + 1, size - ry - 1)
            cx = rng.integers(rx + 1, size - rx - 1)
            # keep bounding boxes two pixels apart so components stay disjoint
            box = (cy - ry - 2, cy + ry + 2, cx - rx - 2, cx + rx + 2)
            if all(box[1] < b[0] or box[0] > b[1] or box[3] < b[2] or box[2] > b[3]
                   for b in placed):
                break
        placed.append(box)
        yy, xx = np.mgrid[0:size, 0:size]
        if rng.random() < 0.5:
            shape = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            shape = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        mask |= shape
    return mask


def _palette() -> list:
    pal = [0, 0, 0]
    for i in range(1, 256):
        pal += [(37 * i) % 256, (97 * i) % 256, (173 * i) % 256]
    return pal


def generate_synthetic(spec: SyntheticSpec, root) -> SegmentationDataset:
    """Write a synthetic dataset to ``root`` and return its index.

    Images are (C, H, W) float32 grids saved as ``.npy``; masks are
    indexed-palette PNGs with the class id as pixel value.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    bg_basis, mu_c = class_means(spec)
    palette = _palette()

    lines = []
    manifest = []
    for c in range(1, spec.n_classes + 1):
        lines.append(f"{c} shape-{c:02d}")
        for j in range(spec.images_per_class):
            image_id = f"{c:02d}_{j:03d}"
            rng = np.random.default_rng([spec.seed, 2000 + c, j])
            gt = _draw_shapes(rng, spec.image_size, spec.shapes_per_image,
                              spec.shape_radius)
            mu_b = background_mean(spec, bg_basis, rng)
            noise = rng.normal(scale=spec.sigma,
                               size=(spec.channels, spec.image_size, spec.image_size))
            image = np.where(gt[None], mu_c[c - 1][:, None, None],
                             mu_b[:, None, None]) + noise
            np.save(root / "images" / f"{image_id}.npy", image.astype(np.float32))
            mask_img = Image.fromarray((gt * c).astype(np.uint8), mode="P")
            mask_img.putpalette(palette)
            mask_img.save(root / "masks" / f"{image_id}.png")
            manifest.append({
                "id": image_id,
                "image": f"images/{image_id}.npy",
                "mask": f"masks/{image_id}.png",
                "class_ids": [c],
            })

    (root / "classes.txt").write_text("\n".join(lines) + "\n")
    with (root / "manifest.jsonl").open("w") as fh:
        for row in manifest:
            fh.write(json.dumps(row) + "\n")
    meta = {k: (list(v) if isinstance(v, tuple) else v)
            for k, v in vars(spec).items()}
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return SegmentationDataset(root, kind="synthetic")


def separability_accuracy(dataset: SegmentationDataset, spec: SyntheticSpec,
                          limit: int = 32) -> float:
    """Pixel accuracy of a nearest-mean classifier on raw features.

    Sanity oracle for the benchmark: classify each pixel by distance to the
    known class mean versus the image's background mean (estimated from
    ground-truth background pixels, since each image draws its own). With
    delta/sigma around 10 this should be essentially 1.0, confirming the
    generator produced separable data.
    """
    _, mu_c = class_means(spec)
    correct = 0
    total = 0
    for rec in dataset.records[:limit]:
        image = dataset.load_image(rec).numpy()
        cid = rec.class_ids[0]
        gt = dataset.load_class_mask(rec, cid).values.numpy() > 0.5
        mu_b = image[:, ~gt].mean(axis=1)
        d_fg = ((image - mu_c[cid - 1][:, None, None]) ** 2).sum(axis=0)
        d_bg = ((image - mu_b[:, None, None]) ** 2).sum(axis=0)
        pred = d_fg < d_bg
        correct += int((pred == gt).sum())
        total += gt.size
    return correct / max(total, 1)
