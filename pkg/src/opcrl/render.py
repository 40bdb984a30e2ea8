"""Four-panel raster view of a correction result: target, mask, nominal contour, PV band."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .layout import Layout, MaskState, mask_polygons
from .litho import LithoConfig, LithoResult, measure_geometry, rasterize, simulate_polygons

PANELS = ("target", "mask", "contour", "pvband")
GAP = 4  # separator columns between panels

_FG = {
    "target": (40, 40, 40),
    "mask": (30, 90, 200),
    "contour": (200, 40, 40),
    "pvband": (230, 150, 20),
}
_BG = (255, 255, 255)
_SEP = (160, 160, 160)


def contour(printed: np.ndarray) -> np.ndarray:
    """Boundary pixels of a printed image: printed pixels with an unprinted 4-neighbour."""
    p = np.pad(printed.astype(bool), 1, constant_values=False)
    inner = p[1:-1, 1:-1]
    all_nb = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return inner & ~all_nb


def panels(targets, mask_polys, result: LithoResult, shape, pixel_nm: int) -> dict[str, np.ndarray]:
    """Boolean (h, w) image per panel, row 0 at y = 0."""
    inner, outer = result.printed["inner"], result.printed["outer"]
    return {
        "target": rasterize(targets, shape, pixel_nm) > 0,
        "mask": rasterize(mask_polys, shape, pixel_nm) > 0,
        "contour": contour(result.printed["nominal"]),
        "pvband": np.logical_xor(inner, outer),
    }


def compose(images: dict[str, np.ndarray]) -> np.ndarray:
    """Side-by-side RGB image, flipped so that y grows upwards."""
    h, w = images[PANELS[0]].shape
    out = np.empty((h, 4 * w + 3 * GAP, 3), dtype=np.uint8)
    out[:] = _SEP
    for k, name in enumerate(PANELS):
        tile = np.empty((h, w, 3), dtype=np.uint8)
        tile[:] = _BG
        tile[images[name]] = _FG[name]
        x0 = k * (w + GAP)
        out[:, x0:x0 + w] = tile[::-1]
    return out


def panel_from_png(path, name: str, width_px: int) -> np.ndarray:
    """Recover one panel's foreground pixels from a written image (row 0 at y = 0)."""
    rgb = np.asarray(Image.open(path).convert("RGB"))
    k = PANELS.index(name)
    x0 = k * (width_px + GAP)
    tile = rgb[::-1, x0:x0 + width_px]
    return np.all(tile == np.array(_FG[name], dtype=np.uint8), axis=2)


def render(layout: Layout, out_path, config: LithoConfig | None = None,
           mask: MaskState | Layout | None = None) -> LithoResult:
    """Write the four-panel PNG and return the simulation it shows.

    ``mask`` may be a mask state, a mask layout file, or None to image the
    targets (plus SRAFs) unchanged.
    """
    config = config or LithoConfig()
    if mask is None:
        mask_polys = list(layout.targets) + list(layout.srafs)
    elif isinstance(mask, MaskState):
        mask_polys = mask_polygons(mask)
    else:
        mask_polys = list(mask.targets) + list(mask.srafs)
    pts, nrm = measure_geometry(MaskState.initial(layout))
    result = simulate_polygons(mask_polys, layout.width, layout.height, pts, nrm, config)
    shape = config.grid_shape(layout.width, layout.height)
    rgb = compose(panels(layout.targets, mask_polys, result, shape, config.pixel_nm))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb, "RGB").save(out_path, format="PNG")
    return result
