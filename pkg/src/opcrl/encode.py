"""Squish-pattern encoding of the neighbourhood around each control point.

A window is cut into a non-uniform grid by scanlines at every geometry edge;
the occupancy matrix plus the row/column spacings describe the geometry
exactly. ``adapt`` pastes that description into a fixed-size tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EncodingError
from .layout import MaskState, Polygon, Segment, mask_polygons, occupancy

WINDOW_NM = 500
FEATURE_SIZE = {"via": 128, "metal": 64}


@dataclass(frozen=True)
class SquishEncoding:
    M: np.ndarray  # rows follow y upwards, columns follow x
    delta_x: np.ndarray
    delta_y: np.ndarray

    @property
    def scanlines_x(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.delta_x)])

    @property
    def scanlines_y(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.delta_y)])


def _edge_lines(polygons, x0, y0, size):
    """Local x of vertical edges and y of horizontal edges that cross the window interior."""
    xs, ys = set(), set()
    x1, y1 = x0 + size, y0 + size
    for poly in polygons:
        v = poly.vertices
        for i in range(len(v)):
            (ax, ay), (bx, by) = v[i], v[(i + 1) % len(v)]
            if ax == bx:
                if x0 < ax < x1 and min(ay, by) < y1 and max(ay, by) > y0:
                    xs.add(ax - x0)
            elif y0 < ay < y1 and min(ax, bx) < x1 and max(ax, bx) > x0:
                ys.add(ay - y0)
    return xs, ys


def _in_window(polygons, x0, y0, size):
    out = []
    for poly in polygons:
        bx0, by0, bx1, by1 = poly.bbox
        if bx1 > x0 and bx0 < x0 + size and by1 > y0 and by0 < y0 + size:
            out.append(poly)
    return out


def squish(polygons, origin: tuple[float, float], size: float = WINDOW_NM,
           extra_lines=None) -> SquishEncoding:
    """Encode the geometry inside the square window [origin, origin + size].

    ``extra_lines`` adds scanlines from another polygon set (edges that cross
    the window) without adding its geometry.
    """
    x0, y0 = origin
    local = _in_window(polygons, x0, y0, size)
    xs, ys = _edge_lines(local, x0, y0, size)
    if extra_lines:
        ex, ey = _edge_lines(_in_window(extra_lines, x0, y0, size), x0, y0, size)
        xs |= ex
        ys |= ey
    sx = np.array(sorted(xs | {0.0, float(size)}), dtype=float)
    sy = np.array(sorted(ys | {0.0, float(size)}), dtype=float)
    cx = x0 + (sx[:-1] + sx[1:]) / 2
    cy = y0 + (sy[:-1] + sy[1:]) / 2
    M = occupancy(local, cx, cy).astype(np.uint8)
    return SquishEncoding(M, np.diff(sx), np.diff(sy))


def reconstruct(enc: SquishEncoding) -> list[tuple[float, float, float, float]]:
    """Occupied cells as (x0, y0, x1, y1) rectangles in window-local coordinates."""
    sx, sy = enc.scanlines_x, enc.scanlines_y
    rows, cols = np.nonzero(enc.M)
    return [(sx[c], sy[r], sx[c + 1], sy[r + 1]) for r, c in zip(rows, cols)]


def adapt(enc: SquishEncoding, dx: int, dy: int, size: float = WINDOW_NM) -> np.ndarray:
    """Centre the squish matrix on a (dy, dx, 3) canvas.

    Channel 0 is occupancy, channel 1 carries each row's height and channel 2
    each column's width, both divided by the window size and broadcast over
    the occupied block only.
    """
    rows, cols = enc.M.shape
    if rows > dy or cols > dx:
        raise EncodingError(f"squish grid {rows}x{cols} exceeds feature size {dy}x{dx}")
    out = np.zeros((dy, dx, 3))
    r0, c0 = (dy - rows) // 2, (dx - cols) // 2
    out[r0:r0 + rows, c0:c0 + cols, 0] = enc.M
    out[r0:r0 + rows, c0:c0 + cols, 1] = (enc.delta_y / size)[:, None]
    out[r0:r0 + rows, c0:c0 + cols, 2] = (enc.delta_x / size)[None, :]
    return out


def window_origin(segment: Segment, size: float = WINDOW_NM) -> tuple[float, float]:
    cx, cy = segment.control_point
    return cx - size / 2, cy - size / 2


def node_features(mask: MaskState, segment: Segment, feature_size: int | None = None,
                  polygons: list[Polygon] | None = None) -> np.ndarray:
    """Six-channel feature tensor of one segment.

    Channels 0-2 encode the mask (moved targets plus SRAFs); channels 3-5
    encode the same geometry with extra scanlines at the target edges, so a
    moved edge shows up as a thin cell next to its original position.
    """
    size = feature_size or FEATURE_SIZE[mask.layout.layer_kind]
    if polygons is None:
        polygons = mask_polygons(mask)
    origin = window_origin(segment)
    plain = squish(polygons, origin)
    marked = squish(polygons, origin, extra_lines=mask.layout.targets)
    return np.concatenate([adapt(plain, size, size), adapt(marked, size, size)], axis=2)


def encode_all(mask: MaskState, feature_size: int | None = None) -> np.ndarray:
    """Stack of node features for every segment, shape (n, size, size, 6)."""
    size = feature_size or FEATURE_SIZE[mask.layout.layer_kind]
    polygons = mask_polygons(mask)
    out = np.empty((len(mask.segments), size, size, 6))
    for i, seg in enumerate(mask.segments):
        out[i] = node_features(mask, seg, size, polygons)
    return out
