import numpy as np
from PIL import Image

from opcrl.layout import Layout, MaskState
from opcrl.litho import LithoConfig
from opcrl.render import GAP, panel_from_png, render

from conftest import via_layout


def test_empty_layout_renders_blank(tmp_path):
    out = tmp_path / "e.png"
    r = render(Layout(200, 100, "via", ()), out)
    img = np.asarray(Image.open(out))
    assert img.shape == (50, 4 * 100 + 3 * GAP, 3)
    for name in ("target", "mask", "contour", "pvband"):
        assert not panel_from_png(out, name, 100).any()
    assert r.pvb == 0


def test_pv_band_pixels_match_reported_area(tmp_path):
    layout = via_layout((300, 300), (700, 600), size=1000)
    out = tmp_path / "v.png"
    r = render(layout, out, mask=MaskState.initial(layout, 3))
    band = panel_from_png(out, "pvband", 500)
    assert band.sum() * 4 == r.pvb > 0
    target = panel_from_png(out, "target", 500)
    assert target.sum() * 4 == 2 * 70 * 70


def test_render_is_deterministic(tmp_path):
    layout = via_layout((300, 300), size=1000)
    render(layout, tmp_path / "a.png", LithoConfig())
    render(layout, tmp_path / "b.png", LithoConfig())
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
