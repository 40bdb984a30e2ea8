"""Rectilinear layout model: polygons, fragmentation, mask materialization, file IO.

Coordinates are integer nanometers. Control points and measure points may sit on
half-integers (midpoints of odd-length spans), so they are stored as floats.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import GeometryError, LayoutParseError, SelfIntersectionError

LAYER_KINDS = ("via", "metal")
VIA_SIZE = 70
MEASURE_PITCH = 60
MIN_EDGE = 4
OFFSET_BOUND = 40
INT32_MAX = 2**31 - 1


# ---------------------------------------------------------------------------
# polygon primitives
# ---------------------------------------------------------------------------

def signed_area2(vertices: Sequence[tuple[int, int]]) -> int:
    """Twice the signed shoelace area; positive for counter-clockwise."""
    total = 0
    n = len(vertices)
    for i in range(n):
        x0, y0 = vertices[i]
        x1, y1 = vertices[(i + 1) % n]
        total += x0 * y1 - x1 * y0
    return total


def _drop_redundant(vertices):
    """Remove repeated and collinear vertices.

    A collinear vertex where the boundary doubles back on itself is a spike and
    is reported as a self-intersection instead of being silently removed.
    """
    pts = list(vertices)
    changed = True
    while changed and len(pts) >= 3:
        changed = False
        out = []
        n = len(pts)
        for i in range(n):
            if pts[i] != pts[i - 1]:
                out.append(pts[i])
        if len(out) != n:
            changed = True
        pts = out
        n = len(pts)
        if n < 3:
            break
        keep = []
        for i in range(n):
            p, c, q = pts[i - 1], pts[i], pts[(i + 1) % n]
            d1 = (c[0] - p[0], c[1] - p[1])
            d2 = (q[0] - c[0], q[1] - c[1])
            if d1[0] * d2[1] - d1[1] * d2[0] == 0:
                if d1[0] * d2[0] + d1[1] * d2[1] < 0:
                    raise SelfIntersectionError(f"boundary doubles back at vertex {c}")
                changed = True
                continue
            keep.append(c)
        pts = keep
    return pts


def _rotate_to_leftmost_lowest(pts):
    start = min(range(len(pts)), key=lambda i: (pts[i][0], pts[i][1]))
    return pts[start:] + pts[:start]


def check_simple(vertices: Sequence[tuple[int, int]]) -> None:
    """Raise SelfIntersectionError unless the rectilinear ring is simple.

    Non-adjacent edges may not touch at all; adjacent edges share exactly their
    common vertex. Expects redundant vertices to be removed already.
    """
    n = len(vertices)
    if n < 4 or n % 2:
        raise SelfIntersectionError(f"rectilinear ring needs an even vertex count >= 4, got {n}")
    v = np.asarray(vertices, dtype=np.int64)
    w = np.roll(v, -1, axis=0)
    horiz = v[:, 1] == w[:, 1]
    idx = np.arange(n)
    h_idx, v_idx = idx[horiz], idx[~horiz]
    if len(h_idx) != len(v_idx):
        raise SelfIntersectionError("edges do not alternate between horizontal and vertical")

    hy = v[h_idx, 1]
    hx0 = np.minimum(v[h_idx, 0], w[h_idx, 0])
    hx1 = np.maximum(v[h_idx, 0], w[h_idx, 0])
    vx = v[v_idx, 0]
    vy0 = np.minimum(v[v_idx, 1], w[v_idx, 1])
    vy1 = np.maximum(v[v_idx, 1], w[v_idx, 1])

    # horizontal x vertical crossings, excluding the two neighbours of each edge
    hit = ((hx0[:, None] <= vx[None, :]) & (vx[None, :] <= hx1[:, None])
           & (vy0[None, :] <= hy[:, None]) & (hy[:, None] <= vy1[None, :]))
    gap = np.abs(h_idx[:, None] - v_idx[None, :])
    adjacent = (gap == 1) | (gap == n - 1)
    if np.any(hit & ~adjacent):
        raise SelfIntersectionError("polygon edges cross or touch")

    # parallel edges on the same line must not overlap or touch
    for ys, lo, hi in ((hy, hx0, hx1), (vx, vy0, vy1)):
        same = ys[:, None] == ys[None, :]
        overlap = (lo[:, None] <= hi[None, :]) & (lo[None, :] <= hi[:, None])
        bad = same & overlap
        np.fill_diagonal(bad, False)
        if np.any(bad):
            raise SelfIntersectionError("collinear polygon edges overlap")


def occupancy(polygons, xs, ys) -> np.ndarray:
    """Boolean grid: entry [r, c] is True iff point (xs[c], ys[r]) is inside a polygon.

    Inclusion is half-open (left and bottom edges inside, right and top edges
    outside), so a point exactly on a shared boundary belongs to one side only.
    ``xs`` and ``ys`` must be sorted ascending.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    diff = np.zeros((len(ys), len(xs) + 1), dtype=np.int32)
    for poly in polygons:
        v = poly.vertices
        for i in range(len(v)):
            (x0, y0), (x1, y1) = v[i], v[(i + 1) % len(v)]
            if x0 != x1 or y0 == y1:
                continue
            lo, hi = (y1, y0) if y1 < y0 else (y0, y1)
            r0 = np.searchsorted(ys, lo, "left")
            r1 = np.searchsorted(ys, hi, "left")
            if r0 == r1:
                continue
            col = np.searchsorted(xs, x0, "left")
            diff[r0:r1, col] += 1 if y1 < y0 else -1
    return np.cumsum(diff[:, :-1], axis=1) > 0


@dataclass(frozen=True)
class Polygon:
    """Rectilinear simple polygon, counter-clockwise from its leftmost-lowest vertex."""

    vertices: tuple[tuple[int, int], ...]

    @classmethod
    def from_points(cls, points) -> "Polygon":
        pts = [(int(x), int(y)) for x, y in points]
        for i in range(len(pts)):
            a, b = pts[i], pts[(i + 1) % len(pts)]
            if a[0] != b[0] and a[1] != b[1]:
                raise GeometryError(f"edge {a}->{b} is not axis-parallel")
        pts = _drop_redundant(pts)
        if len(pts) < 4:
            raise GeometryError("polygon has zero area")
        area2 = signed_area2(pts)
        if area2 == 0:
            raise GeometryError("polygon has zero area")
        if area2 < 0:
            pts = pts[::-1]
        check_simple(pts)
        return cls(tuple(_rotate_to_leftmost_lowest(pts)))

    @classmethod
    def rect(cls, x0: int, y0: int, x1: int, y1: int) -> "Polygon":
        return cls.from_points([(x0, y0), (x1, y0), (x1, y1), (x0, y1)])

    @property
    def area(self) -> int:
        return signed_area2(self.vertices) // 2

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        xs = [p[0] for p in self.vertices]
        ys = [p[1] for p in self.vertices]
        return min(xs), min(ys), max(xs), max(ys)

    def edges(self):
        n = len(self.vertices)
        return [(self.vertices[i], self.vertices[(i + 1) % n]) for i in range(n)]


def _check_disjoint(polys) -> None:
    boxes = [p.bbox for p in polys]
    for i in range(len(polys)):
        for j in range(i + 1, len(polys)):
            a, b = boxes[i], boxes[j]
            if a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]:
                continue
            xs = sorted({v[0] for v in polys[i].vertices + polys[j].vertices})
            ys = sorted({v[1] for v in polys[i].vertices + polys[j].vertices})
            cx = [(xs[k] + xs[k + 1]) / 2 for k in range(len(xs) - 1)]
            cy = [(ys[k] + ys[k + 1]) / 2 for k in range(len(ys) - 1)]
            if np.any(occupancy([polys[i]], cx, cy) & occupancy([polys[j]], cx, cy)):
                raise GeometryError(f"targets[{i}] and targets[{j}] overlap")


@dataclass(frozen=True)
class Layout:
    width: int
    height: int
    layer_kind: str
    targets: tuple[Polygon, ...]
    srafs: tuple[Polygon, ...] = ()
    mask: bool = False  # corrected mask: via size and disjointness are not enforced

    def __post_init__(self):
        if self.layer_kind not in LAYER_KINDS:
            raise GeometryError(f"unknown layer kind {self.layer_kind!r}")
        if not (0 < self.width <= INT32_MAX and 0 < self.height <= INT32_MAX):
            raise GeometryError("clip size must be positive and fit in 32 bits")
        for name, polys in (("targets", self.targets), ("srafs", self.srafs)):
            for i, poly in enumerate(polys):
                x0, y0, x1, y1 = poly.bbox
                if x0 < 0 or y0 < 0 or x1 > self.width or y1 > self.height:
                    raise GeometryError(f"{name}[{i}] lies outside the clip")
        if self.mask:
            return
        _check_disjoint(self.targets)
        if self.layer_kind == "via":
            for i, poly in enumerate(self.targets):
                x0, y0, x1, y1 = poly.bbox
                if len(poly.vertices) != 4 or x1 - x0 != VIA_SIZE or y1 - y0 != VIA_SIZE:
                    raise GeometryError(f"targets[{i}] is not a {VIA_SIZE}x{VIA_SIZE} via")

    @property
    def n_targets(self) -> int:
        return len(self.targets)

    def canonical(self) -> "Layout":
        """Same clip with polygons sorted by their leftmost-lowest vertex, so file order does not matter."""
        key = lambda p: (p.vertices[0], p.vertices)
        return Layout(self.width, self.height, self.layer_kind, tuple(sorted(self.targets, key=key)),
                      tuple(sorted(self.srafs, key=key)), self.mask)


# ---------------------------------------------------------------------------
# fragmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    id: int
    polygon_id: int
    axis: str  # "h" or "v"
    start: tuple[int, int]  # span endpoints in clockwise traversal order
    end: tuple[int, int]
    normal: tuple[int, int]  # outward unit normal
    measure_point: tuple[float, float] | None = None

    @property
    def control_point(self) -> tuple[float, float]:
        return ((self.start[0] + self.end[0]) / 2.0, (self.start[1] + self.end[1]) / 2.0)

    @property
    def length(self) -> int:
        return abs(self.end[0] - self.start[0]) + abs(self.end[1] - self.start[1])


def _clockwise(poly: Polygon):
    v = list(poly.vertices)
    return [v[0]] + v[:0:-1]


def primary_axis(poly: Polygon) -> str:
    x0, y0, x1, y1 = poly.bbox
    return "h" if x1 - x0 >= y1 - y0 else "v"


def metal_pieces(length: int, pitch: int = MEASURE_PITCH):
    """Split an edge of the primary direction into (lo, hi, measure) pieces.

    Positions are measured from the low-coordinate end. Measure points sit at
    the pitch, symmetric about the edge midpoint. Interior pieces are one pitch
    long; the two end pieces share the remainder, the low end taking the odd
    nanometer, so with an odd remainder each piece is 0.5nm off its point.
    """
    n = max(length // pitch, 1)
    if n == 1:
        return [(0, length, length / 2.0)]
    rem = length - n * pitch
    first = pitch + (rem + 1) // 2
    bounds = [0] + [first + j * pitch for j in range(n - 1)] + [length]
    start = (length - (n - 1) * pitch) / 2.0
    return [(bounds[j], bounds[j + 1], start + j * pitch) for j in range(n)]


def fragment(layout: Layout, pitch: int = MEASURE_PITCH) -> list[Segment]:
    """Split every target boundary into movable segments.

    Polygons are visited in file order, each boundary clockwise from its
    leftmost-lowest vertex. Via edges are single segments measured at their
    centre; metal edges along the primary direction are cut at the measure
    pitch, the other edges stay whole and carry no measure point.
    """
    segments: list[Segment] = []
    for pid, poly in enumerate(layout.targets):
        primary = primary_axis(poly)
        ring = _clockwise(poly)
        for i, a in enumerate(ring):
            b = ring[(i + 1) % len(ring)]
            length = abs(b[0] - a[0]) + abs(b[1] - a[1])
            if length < MIN_EDGE:
                raise GeometryError(
                    f"polygon {pid} edge {a}->{b} is {length}nm, shorter than {MIN_EDGE}nm")
            axis = "h" if a[1] == b[1] else "v"
            d = ((b[0] - a[0]) // length, (b[1] - a[1]) // length)
            normal = (-d[1], d[0])
            if layout.layer_kind == "via":
                pieces = [(0, length, length / 2.0)]
            elif axis == primary:
                pieces = metal_pieces(length, pitch)
            else:
                pieces = [(0, length, None)]

            k = 0 if axis == "h" else 1
            lo = min(a[k], b[k])
            forward = b[k] > a[k]
            spans = []
            for p_lo, p_hi, mp in pieces:
                def at(u, _k=k):
                    p = list(a)
                    p[_k] = lo + u
                    return p
                s, e = at(p_lo), at(p_hi)
                m = None
                if mp is not None:
                    m = [float(a[0]), float(a[1])]
                    m[k] = lo + mp
                    m = (m[0], m[1])
                if forward:
                    spans.append((tuple(s), tuple(e), m))
                else:
                    spans.append((tuple(e), tuple(s), m))
            if not forward:
                spans.reverse()
            for s, e, m in spans:
                segments.append(Segment(len(segments), pid, axis, s, e, normal, m))
    return segments


# ---------------------------------------------------------------------------
# mask state and materialization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskState:
    layout: Layout
    segments: tuple[Segment, ...]
    offsets: np.ndarray = field(compare=False)

    def __post_init__(self):
        offsets = np.array(self.offsets, dtype=np.int64)  # private copy
        if offsets.shape != (len(self.segments),):
            raise GeometryError(
                f"offsets length {offsets.shape} does not match {len(self.segments)} segments")
        offsets.setflags(write=False)
        object.__setattr__(self, "offsets", offsets)

    @classmethod
    def initial(cls, layout: Layout, offset: int = 0, segments=None) -> "MaskState":
        segs = tuple(fragment(layout) if segments is None else segments)
        return cls(layout, segs, np.full(len(segs), offset, dtype=np.int64))

    def with_offsets(self, offsets) -> "MaskState":
        return MaskState(self.layout, self.segments, offsets)


def _materialize_polygon(segs: Sequence[Segment], offsets: Sequence[int]) -> Polygon:
    ring = []
    n = len(segs)
    for i in range(n):
        s, t = segs[i], segs[(i + 1) % n]
        o1, o2 = int(offsets[i]), int(offsets[(i + 1) % n])
        if s.axis == t.axis:
            if o1 != o2:
                ring.append((s.end[0] + o1 * s.normal[0], s.end[1] + o1 * s.normal[1]))
                ring.append((t.start[0] + o2 * t.normal[0], t.start[1] + o2 * t.normal[1]))
        else:
            c = s.end
            ring.append((c[0] + o1 * s.normal[0] + o2 * t.normal[0],
                         c[1] + o1 * s.normal[1] + o2 * t.normal[1]))
    pts = _drop_redundant(ring)
    if len(pts) < 4:
        raise SelfIntersectionError("offsets collapse the polygon")
    # clockwise traversal must stay clockwise
    if signed_area2(pts) >= 0:
        raise SelfIntersectionError("offsets invert the polygon")
    pts = pts[::-1]
    check_simple(pts)
    return Polygon(tuple(_rotate_to_leftmost_lowest(pts)))


def materialize_polygon(mask: MaskState, pid: int) -> Polygon:
    idx = [i for i, s in enumerate(mask.segments) if s.polygon_id == pid]
    return _materialize_polygon([mask.segments[i] for i in idx], mask.offsets[idx])


def materialize(mask: MaskState, bound: int = OFFSET_BOUND) -> list[Polygon]:
    """Move every segment along its normal and stitch the result back into polygons.

    Unequal offsets on one edge are joined by jogs at the shared endpoint; at a
    corner the two moved lines are intersected. SRAFs are not part of the
    returned list (see ``mask_polygons``).
    """
    if np.any(np.abs(mask.offsets) > bound):
        raise GeometryError(f"offsets exceed the +/-{bound}nm bound")
    by_poly: dict[int, list[int]] = {}
    for i, s in enumerate(mask.segments):
        by_poly.setdefault(s.polygon_id, []).append(i)
    out = []
    for pid in range(len(mask.layout.targets)):
        idx = by_poly[pid]
        try:
            out.append(_materialize_polygon([mask.segments[i] for i in idx], mask.offsets[idx]))
        except SelfIntersectionError as exc:
            raise SelfIntersectionError(f"polygon {pid}: {exc}") from None
    return out


def mask_polygons(mask: MaskState) -> list[Polygon]:
    """Materialized targets followed by the static SRAFs."""
    return materialize(mask) + list(mask.layout.srafs)


def nearest_measure_index(segments: Sequence[Segment]) -> np.ndarray:
    """For each segment, the index (into the measure-point list) whose EPE it uses.

    Segments with their own measure point use it; the rest borrow the nearest
    measure point of the same polygon. -1 if the polygon has none.
    """
    mp_seg = [i for i, s in enumerate(segments) if s.measure_point is not None]
    order = {seg: k for k, seg in enumerate(mp_seg)}
    out = np.full(len(segments), -1, dtype=np.int64)
    for i, s in enumerate(segments):
        if i in order:
            out[i] = order[i]
            continue
        cx, cy = s.control_point
        best, best_d = -1, np.inf
        for j in mp_seg:
            t = segments[j]
            if t.polygon_id != s.polygon_id:
                continue
            mx, my = t.measure_point
            d = (mx - cx) ** 2 + (my - cy) ** 2
            if d < best_d:
                best, best_d = order[j], d
        out[i] = best
    return out


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------

def _poly_json(poly: Polygon) -> str:
    return json.dumps([list(p) for p in poly.vertices], separators=(", ", ": "))


def dumps_layout(layout: Layout) -> str:
    lines = ["{",
             f'  "width_nm": {layout.width},',
             f'  "height_nm": {layout.height},',
             f'  "layer": "{layout.layer_kind}",']
    if layout.mask:
        lines.append('  "mask": true,')
    for name, polys, last in (("targets", layout.targets, False), ("srafs", layout.srafs, True)):
        tail = "" if last else ","
        if not polys:
            lines.append(f'  "{name}": []{tail}')
            continue
        lines.append(f'  "{name}": [')
        for i, p in enumerate(polys):
            lines.append("    " + _poly_json(p) + ("," if i < len(polys) - 1 else ""))
        lines.append(f"  ]{tail}")
    lines.append("}")
    return "\n".join(lines) + "\n"


def write_layout(layout: Layout, path) -> None:
    Path(path).write_text(dumps_layout(layout))


def _field_line(text: str, key: str) -> int:
    for no, line in enumerate(text.splitlines(), 1):
        if f'"{key}"' in line:
            return no
    return 0


def loads_layout(text: str, source: str = "<string>") -> Layout:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LayoutParseError(f"{source}:{exc.lineno}: malformed layout file: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise LayoutParseError(f"{source}:1: top level must be an object")

    def fail(key, msg):
        raise LayoutParseError(f"{source}:{_field_line(text, key)}: field {key!r}: {msg}")

    for key in ("width_nm", "height_nm", "layer", "targets"):
        if key not in doc:
            fail(key, "missing")
    width, height = doc["width_nm"], doc["height_nm"]
    for key, val in (("width_nm", width), ("height_nm", height)):
        if not isinstance(val, int) or isinstance(val, bool) or val <= 0:
            fail(key, "must be a positive integer")
    if doc["layer"] not in LAYER_KINDS:
        fail("layer", f"must be one of {LAYER_KINDS}")
    is_mask = doc.get("mask", False)
    if not isinstance(is_mask, bool):
        fail("mask", "must be true or false")

    polys = {}
    for key in ("targets", "srafs"):
        raw = doc.get(key, [])
        if not isinstance(raw, list):
            fail(key, "must be a list of vertex lists")
        out = []
        for i, verts in enumerate(raw):
            where = f"{key}[{i}]"
            if not isinstance(verts, list) or not all(
                    isinstance(p, list) and len(p) == 2
                    and all(isinstance(c, int) and not isinstance(c, bool) for c in p)
                    for p in verts):
                fail(key, f"{where} must be a list of [x, y] integer pairs")
            for x, y in verts:
                if not (0 <= x <= width and 0 <= y <= height):
                    fail(key, f"{where} vertex ({x}, {y}) is out of bounds")
            try:
                out.append(Polygon.from_points(verts))
            except GeometryError as exc:
                fail(key, f"{where}: {exc}")
        polys[key] = tuple(out)
    try:
        return Layout(width, height, doc["layer"], polys["targets"], polys["srafs"], is_mask)
    except GeometryError as exc:
        raise LayoutParseError(f"{source}: {exc}") from None


def read_layout(path) -> Layout:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise LayoutParseError(f"{path}: cannot read layout file: {exc.strerror}") from None
    return loads_layout(text, str(path))


def mask_layout(mask: MaskState) -> Layout:
    """The corrected mask as a layout file: moved targets plus unchanged SRAFs."""
    layout = mask.layout
    return Layout(layout.width, layout.height, layout.layer_kind,
                  tuple(materialize(mask)), layout.srafs, mask=True)
