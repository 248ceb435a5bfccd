"""Episode rendering: a five-panel strip (initial mask, refined mask, the two
correlation maps, final prediction) saved as PNG with raw ``.npy`` sidecars.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

PANELS = ("initial", "refined", "rcm", "fcm", "prediction")
_SCALE = 4          # nearest-neighbour upscale so small grids are legible
_GAP = 2


def episode_panels(pipeline, ctx, decoder=None) -> dict:
    """Raw panel arrays for one prepared episode.

    Correlation maps come from the full guidance build; the prediction panel
    uses the decoder when given and the refined pseudo mask otherwise.
    """
    _, aux = pipeline.build_guidance(ctx)
    if decoder is not None:
        pred = pipeline.predict(ctx, decoder)
    else:
        pred = pipeline.pseudo_prediction(ctx)
    panels = {
        "initial": ctx.init_q.values.detach().cpu().numpy(),
        "refined": ctx.ref_q.values.detach().cpu().numpy(),
        "rcm": aux["rcm"].detach().cpu().numpy(),
        "fcm": aux["fcm"].detach().cpu().numpy() if "fcm" in aux
               else np.zeros(tuple(ctx.feat_q.spatial), dtype=np.float32),
        "prediction": pred.values.detach().cpu().numpy(),
    }
    return panels


def _to_gray(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo < 1e-12:
        return np.full(arr.shape, 127, dtype=np.uint8)
    return np.round((arr - lo) / (hi - lo) * 255.0).astype(np.uint8)


def render_strip(panels: dict) -> Image.Image:
    tiles = []
    for name in PANELS:
        gray = _to_gray(panels[name])
        img = Image.fromarray(gray, mode="L")
        img = img.resize((img.width * _SCALE, img.height * _SCALE), Image.NEAREST)
        tiles.append(img)
    height = max(t.height for t in tiles)
    width = sum(t.width for t in tiles) + _GAP * (len(tiles) - 1)
    strip = Image.new("L", (width, height), color=64)
    x = 0
    for tile in tiles:
        strip.paste(tile, (x, 0))
        x += tile.width + _GAP
    return strip


def save_episode(panels: dict, out_dir: Path | str, episode_id: int) -> list:
    """Write ``episode_{id}.png`` plus one ``.npy`` sidecar per panel."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    png = out_dir / f"episode_{episode_id:05d}.png"
    render_strip(panels).save(png)
    written.append(png)
    for name in PANELS:
        side = out_dir / f"episode_{episode_id:05d}_{name}.npy"
        np.save(side, np.asarray(panels[name], dtype=np.float32))
        written.append(side)
    return written
