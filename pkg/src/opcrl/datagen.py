"""Synthetic via and metal clips.

All coordinates are even so that target edges sit on the 2nm simulation grid.
"""

from __future__ import annotations

import numpy as np

from .errors import GenerationError
from .layout import VIA_SIZE, Layout, Polygon

VIA_CLIP = 2000
METAL_CLIP = 1500
VIA_PITCH = 200
METAL_SPACING = 60
MARGIN = 150
MAX_TRIES = 2000


def _even(rng, lo, hi) -> int:
    return 2 * int(rng.integers(lo // 2, hi // 2 + 1))


def via_clip(rng: np.random.Generator, count: int | None = None) -> Layout:
    count = int(rng.integers(2, 7)) if count is None else count
    if not 1 <= count:
        raise GenerationError("via count must be positive")
    centres: list[tuple[int, int]] = []
    tries = 0
    while len(centres) < count:
        tries += 1
        if tries > MAX_TRIES:
            raise GenerationError(f"could not place {count} vias at {VIA_PITCH}nm pitch")
        x = _even(rng, MARGIN, VIA_CLIP - MARGIN - VIA_SIZE)
        y = _even(rng, MARGIN, VIA_CLIP - MARGIN - VIA_SIZE)
        if all((x - a) ** 2 + (y - b) ** 2 >= VIA_PITCH**2 for a, b in centres):
            centres.append((x, y))
    targets = tuple(Polygon.rect(x, y, x + VIA_SIZE, y + VIA_SIZE) for x, y in centres)
    return Layout(VIA_CLIP, VIA_CLIP, "via", targets)


def _wire_rects(rng) -> list[tuple[int, int, int, int]]:
    w = _even(rng, 50, 70)
    length = _even(rng, 200, 800)
    x = _even(rng, MARGIN, METAL_CLIP - MARGIN - length)
    y = _even(rng, MARGIN, METAL_CLIP - MARGIN - length)
    horizontal = bool(rng.integers(2))
    bar = (x, y, x + length, y + w) if horizontal else (x, y, x + w, y + length)
    if rng.random() < 0.3:
        # L-shape: a perpendicular stub at one end of the bar
        stub = _even(rng, 120, 300)
        if horizontal:
            x0 = bar[2] - w if rng.integers(2) else bar[0]
            return [bar, (x0, bar[3], x0 + w, bar[3] + stub)]
        y0 = bar[3] - w if rng.integers(2) else bar[1]
        return [bar, (bar[2], y0, bar[2] + stub, y0 + w)]
    return [bar]


def _rects_polygon(rects) -> Polygon:
    if len(rects) == 1:
        return Polygon.rect(*rects[0])
    (ax0, ay0, ax1, ay1), (bx0, by0, bx1, by1) = rects
    if by0 == ay1:  # stub on top of a horizontal bar
        if bx0 == ax0:
            pts = [(ax0, ay0), (ax1, ay0), (ax1, ay1), (bx1, ay1), (bx1, by1), (bx0, by1)]
        else:
            pts = [(ax0, ay0), (ax1, ay0), (ax1, by1), (bx0, by1), (bx0, ay1), (ax0, ay1)]
    else:  # stub to the right of a vertical bar
        if by0 == ay0:
            pts = [(ax0, ay0), (bx1, by0), (bx1, by1), (ax1, by1), (ax1, ay1), (ax0, ay1)]
        else:
            pts = [(ax0, ay0), (ax1, ay0), (ax1, by0), (bx1, by0), (bx1, by1), (ax0, by1)]
    return Polygon.from_points(pts)


def _separated(a, b, gap) -> bool:
    return (a[2] + gap <= b[0] or b[2] + gap <= a[0]
            or a[3] + gap <= b[1] or b[3] + gap <= a[1])


def metal_clip(rng: np.random.Generator, count: int | None = None) -> Layout:
    count = int(rng.integers(2, 7)) if count is None else count
    placed: list[list[tuple[int, int, int, int]]] = []
    tries = 0
    while len(placed) < count:
        tries += 1
        if tries > MAX_TRIES:
            raise GenerationError(f"could not place {count} wires at {METAL_SPACING}nm spacing")
        rects = _wire_rects(rng)
        if any(r[2] > METAL_CLIP - MARGIN // 2 or r[3] > METAL_CLIP - MARGIN // 2 for r in rects):
            continue
        if all(_separated(r, q, METAL_SPACING) for other in placed for q in other for r in rects):
            placed.append(rects)
    return Layout(METAL_CLIP, METAL_CLIP, "metal", tuple(_rects_polygon(r) for r in placed))


def generate(count: int, layer_kind: str, seed: int) -> list[Layout]:
    rng = np.random.default_rng(seed)
    make = via_clip if layer_kind == "via" else metal_clip
    return [make(rng) for _ in range(count)]
