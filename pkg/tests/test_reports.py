"""Text tables, JSONL helpers, and episode rendering tests."""

from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from lfss.reports import fold_table, format_table, read_jsonl, write_jsonl
from lfss.viz import PANELS, episode_panels, render_strip, save_episode


def test_format_table_alignment_and_floats():
    out = format_table(["name", "score"], [["alpha", 0.123456], ["b", 2]],
                       title="demo")
    lines = out.splitlines()
    assert lines[0] == "demo"
    assert lines[1].split() == ["name", "score"]
    assert set(lines[2]) <= {"-", " "}
    assert "0.1235" in lines[3]
    assert lines[4].split() == ["b", "2"]
    # all rows align on the same column width
    assert len({len(l) for l in lines[1:] if l.strip()}) <= 2


def test_fold_table_layout():
    out = fold_table({0: 0.5, 1: 0.7, 2: 0.9, 3: 0.3})
    lines = out.splitlines()
    assert lines[1].split() == ["metric", "fold0", "fold1", "fold2", "fold3", "mean"]
    row = lines[3].split()
    assert row[0] == "mIoU"
    assert row[1:5] == ["0.5000", "0.7000", "0.9000", "0.3000"]
    assert row[5] == "0.6000"


def test_jsonl_roundtrip(tmp_path):
    records = [{"a": 1}, {"b": [1, 2]}, {"c": "x"}]
    path = write_jsonl(tmp_path / "sub" / "r.jsonl", records)
    assert read_jsonl(path) == records


# ---------------------------------------------------------------------------
# rendering


@pytest.fixture()
def prepared():
    from .test_pipeline import episodes_for, make_pipeline
    pipe = make_pipeline(rho=0.1)
    ctx = pipe.prepare(episodes_for(1, seed=30)[0])
    return pipe, ctx


def test_episode_panels_keys_and_shapes(prepared):
    pipe, ctx = prepared
    panels = episode_panels(pipe, ctx)
    assert set(panels) == set(PANELS)
    for name in PANELS:
        assert panels[name].shape == tuple(ctx.feat_q.spatial)
    np.testing.assert_array_equal(panels["refined"], ctx.ref_q.values.numpy())


def test_episode_panels_fcm_zero_without_ccm():
    from .test_pipeline import episodes_for, make_pipeline
    from lfss.pipeline import VariantConfig
    pipe = make_pipeline(variant=VariantConfig(True, True, False))
    ctx = pipe.prepare(episodes_for(1, seed=31)[0])
    panels = episode_panels(pipe, ctx)
    assert not panels["fcm"].any()


def test_episode_panels_with_decoder(prepared):
    pipe, ctx = prepared
    from lfss.model import Decoder
    panels = episode_panels(pipe, ctx, Decoder(pipe.guidance_channels()))
    assert set(np.unique(panels["prediction"])) <= {0.0, 1.0}


def test_render_strip_geometry(prepared):
    pipe, ctx = prepared
    panels = episode_panels(pipe, ctx)
    strip = render_strip(panels)
    h, w = ctx.feat_q.spatial
    assert strip.height == h * 4
    assert strip.width == 5 * w * 4 + 4 * 2


def test_save_episode_files(tmp_path, prepared):
    pipe, ctx = prepared
    panels = episode_panels(pipe, ctx)
    written = save_episode(panels, tmp_path, 7)
    assert len(written) == 1 + len(PANELS)
    assert all(p.exists() for p in written)
    assert written[0].name == "episode_00007.png"
    img = Image.open(written[0])
    assert img.mode == "L"
    back = np.load(tmp_path / "episode_00007_rcm.npy")
    np.testing.assert_allclose(back, panels["rcm"], atol=1e-6)


def test_constant_panel_renders_mid_gray():
    from lfss.viz import _to_gray
    out = _to_gray(np.zeros((4, 4)))
    assert (out == 127).all()
    ramp = _to_gray(np.array([[0.0, 1.0]]))
    assert ramp[0, 0] == 0 and ramp[0, 1] == 255
