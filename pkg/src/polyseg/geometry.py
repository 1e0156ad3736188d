"""Polygon primitives, segment-pair intersection analysis, discrete
differential quantities and even-odd rasterization of curve sets."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

MIN_EDGE = 1e-9
DEFAULT_TAU_REL = 1e-8


class GeometryError(ValueError):
    pass


def signed_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


@dataclass(frozen=True)
class Polygon:
    """Closed polyline; edge ``j`` runs from vertex ``j`` to vertex ``j+1 mod n``.

    ``orientation`` is +1 for counterclockwise (positive shoelace area in the
    x/y frame) and -1 for clockwise. It is fixed at construction so that a
    curve keeps its notion of "outward" even if it later self-intersects.
    """

    vertices: np.ndarray
    orientation: int = 0

    def __post_init__(self):
        pts = np.array(self.vertices, dtype=float).reshape(-1, 2)
        if len(pts) < 3:
            raise GeometryError(f"polygon needs at least 3 vertices, got {len(pts)}")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("polygon has non-finite coordinates")
        lengths = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
        if lengths.min() <= MIN_EDGE:
            j = int(lengths.argmin())
            raise GeometryError(f"consecutive vertices {j} and {(j + 1) % len(pts)} coincide")
        pts.setflags(write=False)
        object.__setattr__(self, "vertices", pts)
        orient = self.orientation
        if orient == 0:
            orient = 1 if signed_area(pts) >= 0 else -1
        elif orient not in (1, -1):
            raise GeometryError(f"orientation must be +1 or -1, got {orient}")
        object.__setattr__(self, "orientation", int(orient))

    def __len__(self) -> int:
        return len(self.vertices)

    def with_vertices(self, vertices: np.ndarray) -> "Polygon":
        return Polygon(vertices, self.orientation)

    @property
    def perimeter(self) -> float:
        return float(edge_lengths(self.vertices).sum())

    @property
    def area(self) -> float:
        return signed_area(self.vertices)


@dataclass(frozen=True)
class CurveSet:
    curves: tuple[Polygon, ...] = field(default_factory=tuple)

    def __post_init__(self):
        curves = tuple(c if isinstance(c, Polygon) else Polygon(c) for c in self.curves)
        if not curves:
            raise GeometryError("curve set is empty")
        object.__setattr__(self, "curves", curves)

    def __len__(self) -> int:
        return len(self.curves)

    def __iter__(self):
        return iter(self.curves)

    def __getitem__(self, k: int) -> Polygon:
        return self.curves[k]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([len(c) for c in self.curves])])

    @property
    def n_vertices(self) -> int:
        return int(sum(len(c) for c in self.curves))

    def stacked(self) -> np.ndarray:
        return np.concatenate([c.vertices for c in self.curves], axis=0)

    def with_stacked(self, pts: np.ndarray) -> "CurveSet":
        off = self.offsets
        return CurveSet(tuple(c.with_vertices(pts[off[k]:off[k + 1]])
                              for k, c in enumerate(self.curves)))

    def to_json(self) -> list:
        return [c.vertices.tolist() for c in self.curves]

    @classmethod
    def from_json(cls, data: Sequence) -> "CurveSet":
        if not isinstance(data, list) or not data:
            raise GeometryError("polygon JSON must be a non-empty array of curves")
        return cls(tuple(Polygon(np.asarray(c, dtype=float)) for c in data))


def load_polygons(path) -> CurveSet:
    with open(path) as fh:
        return CurveSet.from_json(json.load(fh))


def save_polygons(cs: CurveSet, path) -> None:
    Path(path).write_text(json.dumps(cs.to_json()))


@dataclass(frozen=True)
class EdgeRef:
    curve_index: int
    edge_index: int


class IntersectionKind(enum.Enum):
    UNIQUE = "unique"
    PARALLEL_OR_DEGENERATE = "parallel_or_degenerate"


@dataclass(frozen=True)
class IntersectionParams:
    delta: float
    mu: float
    lam: float
    kind: IntersectionKind


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def default_tau(d1: np.ndarray, d2: np.ndarray, rel: float = DEFAULT_TAU_REL):
    """Parallel threshold on |delta|, scaled by the squared longer segment."""
    l1 = np.einsum("...i,...i->...", d1, d1)
    l2 = np.einsum("...i,...i->...", d2, d2)
    return rel * np.maximum(l1, l2)


def segment_intersection_params(A, B, A2, B2, tau_parallel: float | None = None) -> IntersectionParams:
    """Solve ``A + lam (B - A) = A2 + mu (B2 - A2)``.

    ``lam`` parameterizes the first segment and ``mu`` the second. The
    determinant ``delta = (x4-x3)(y1-y2) - (x1-x2)(y4-y3)`` equals
    ``cross(B - A, B2 - A2)``.
    """
    A, B, A2, B2 = (np.asarray(p, dtype=float) for p in (A, B, A2, B2))
    d1, d2 = B - A, B2 - A2
    if np.hypot(*d1) <= MIN_EDGE or np.hypot(*d2) <= MIN_EDGE:
        raise GeometryError("segment endpoints coincide")
    if tau_parallel is None:
        tau_parallel = float(default_tau(d1, d2))
    delta = float(_cross(d1, d2))
    if abs(delta) <= tau_parallel:
        return IntersectionParams(delta, math.nan, math.nan, IntersectionKind.PARALLEL_OR_DEGENERATE)
    w = A2 - A
    lam = float(_cross(w, d2)) / delta
    mu = float(_cross(w, d1)) / delta
    return IntersectionParams(delta, mu, lam, IntersectionKind.UNIQUE)


def segments_properly_intersect(p: IntersectionParams) -> bool:
    return (p.kind is IntersectionKind.UNIQUE
            and 0.0 <= p.mu <= 1.0 and 0.0 <= p.lam <= 1.0)


# -- global edge bookkeeping -------------------------------------------------

def edge_topology(cs: CurveSet):
    """Global per-vertex arrays: curve id, previous and next vertex ids.

    Edge ``g`` is the segment from vertex ``g`` to ``nxt[g]``.
    """
    off = cs.offsets
    n = int(off[-1])
    curve = np.empty(n, dtype=int)
    nxt = np.empty(n, dtype=int)
    prv = np.empty(n, dtype=int)
    for k in range(len(cs)):
        idx = np.arange(off[k], off[k + 1])
        curve[idx] = k
        nxt[idx] = np.roll(idx, -1)
        prv[idx] = np.roll(idx, 1)
    return curve, prv, nxt


def edge_to_ref(cs: CurveSet, g: int) -> EdgeRef:
    off = cs.offsets
    k = int(np.searchsorted(off, g, side="right") - 1)
    return EdgeRef(k, int(g - off[k]))


def ref_to_edge(cs: CurveSet, ref: EdgeRef) -> int:
    return int(cs.offsets[ref.curve_index] + ref.edge_index)


def _proper_crossings(P0, P1, Q0, Q1):
    d1, d2 = P1 - P0, Q1 - Q0
    delta = _cross(d1, d2)
    tau = default_tau(d1, d2)
    ok = np.abs(delta) > tau
    safe = np.where(ok, delta, 1.0)
    w = Q0 - P0
    lam = _cross(w, d2) / safe
    mu = _cross(w, d1) / safe
    return ok & (lam >= 0) & (lam <= 1) & (mu >= 0) & (mu <= 1)


def nonadjacent_edge_pairs(cs: CurveSet) -> np.ndarray:
    """All unordered edge pairs that do not share a vertex, shape (M, 2)."""
    curve, prv, nxt = edge_topology(cs)
    n = len(curve)
    i, j = np.triu_indices(n, k=1)
    adjacent = (curve[i] == curve[j]) & ((nxt[i] == j) | (nxt[j] == i))
    return np.stack([i[~adjacent], j[~adjacent]], axis=1)


def count_proper_intersections(cs: CurveSet) -> int:
    pts = cs.stacked()
    _, _, nxt = edge_topology(cs)
    pairs = nonadjacent_edge_pairs(cs)
    if len(pairs) == 0:
        return 0
    a, b = pairs[:, 0], pairs[:, 1]
    hits = _proper_crossings(pts[a], pts[nxt[a]], pts[b], pts[nxt[b]])
    return int(hits.sum())


# -- differential quantities ---------------------------------------------

def edge_lengths(pts: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)


def edge_normals(poly: Polygon) -> np.ndarray:
    """Outward unit normal of every edge."""
    pts = poly.vertices
    d = np.roll(pts, -1, axis=0) - pts
    d /= np.linalg.norm(d, axis=1)[:, None]
    return poly.orientation * np.stack([d[:, 1], -d[:, 0]], axis=1)


def vertex_normals(poly: Polygon) -> np.ndarray:
    en = edge_normals(poly)
    prev_n = np.roll(en, 1, axis=0)
    s = prev_n + en
    norm = np.linalg.norm(s, axis=1)
    lengths = edge_lengths(poly.vertices)
    prev_len = np.roll(lengths, 1)
    # spike of angle 0: incident normals cancel, take the longer edge's normal
    spike = norm < 1e-12
    fallback = np.where((prev_len >= lengths)[:, None], prev_n, en)
    out = np.where(spike[:, None], fallback, s / np.where(spike, 1.0, norm)[:, None])
    return out


def vertex_normal(poly: Polygon, i: int) -> np.ndarray:
    return vertex_normals(poly)[i % len(poly)]


def turning_angles(poly: Polygon) -> np.ndarray:
    """Signed exterior angle at each vertex, positive where locally convex."""
    pts = poly.vertices
    e_in = pts - np.roll(pts, 1, axis=0)
    e_out = np.roll(pts, -1, axis=0) - pts
    ang = np.arctan2(_cross(e_in, e_out), np.einsum("ij,ij->i", e_in, e_out))
    return poly.orientation * ang


def vertex_length_shares(poly: Polygon) -> np.ndarray:
    """Half the sum of the two incident edge lengths."""
    lengths = edge_lengths(poly.vertices)
    return 0.5 * (lengths + np.roll(lengths, 1))


def vertex_curvatures(poly: Polygon) -> np.ndarray:
    return turning_angles(poly) / vertex_length_shares(poly)


def vertex_curvature(poly: Polygon, i: int) -> float:
    return float(vertex_curvatures(poly)[i % len(poly)])


def perimeter_gradient(poly: Polygon) -> np.ndarray:
    """Exact gradient of the perimeter w.r.t. each vertex."""
    pts = poly.vertices
    to_prev = np.roll(pts, 1, axis=0) - pts
    to_next = np.roll(pts, -1, axis=0) - pts
    to_prev /= np.linalg.norm(to_prev, axis=1)[:, None]
    to_next /= np.linalg.norm(to_next, axis=1)[:, None]
    return -(to_prev + to_next)


# -- h-neighbourhoods ------------------------------------------------------

def vertex_radii(cs: CurveSet) -> np.ndarray:
    """h_i: the longer of the two edges incident to each vertex."""
    out = []
    for c in cs:
        lengths = edge_lengths(c.vertices)
        out.append(np.maximum(lengths, np.roll(lengths, 1)))
    return np.concatenate(out)


def neighbourhood_edge_pairs(cs: CurveSet, g: int, pts=None, radii=None, topo=None) -> list[tuple[int, int]]:
    """(incident, candidate) global edge pairs for global vertex ``g``."""
    if pts is None:
        pts = cs.stacked()
    if radii is None:
        radii = vertex_radii(cs)
    curve, prv, nxt = topo if topo is not None else edge_topology(cs)
    dist = np.linalg.norm(pts - pts[g], axis=1)
    near = np.flatnonzero(dist <= radii[g])
    incident = (int(prv[g]), g)
    excluded = {incident[0], incident[1], int(prv[incident[0]]), int(nxt[g])}
    candidates = set()
    for v in near:
        candidates.add(int(prv[v]))
        candidates.add(int(v))
    candidates -= excluded
    return [(e, c) for e in incident for c in sorted(candidates)]


def h_neighborhood_pairs(cs: CurveSet, c: int, i: int) -> list[tuple[EdgeRef, EdgeRef]]:
    g = int(cs.offsets[c] + (i % len(cs[c])))
    return [(edge_to_ref(cs, e), edge_to_ref(cs, f)) for e, f in neighbourhood_edge_pairs(cs, g)]


def all_neighbourhood_pairs(cs: CurveSet) -> np.ndarray:
    """Union over every vertex of its h-neighbourhood pairs, as unordered
    global edge pairs ``(e, f)`` with ``e < f``, shape (M, 2)."""
    pts = cs.stacked()
    radii = vertex_radii(cs)
    curve, prv, nxt = edge_topology(cs)
    n = len(pts)
    diff = pts[:, None, :] - pts[None, :, :]
    near = np.einsum("ijk,ijk->ij", diff, diff) <= (radii ** 2)[:, None]
    # candidate edges of vertex g: edges starting or ending at a near vertex
    cand = near | near[:, nxt]
    out = set()
    for g in range(n):
        inc = (int(prv[g]), g)
        excl = [inc[0], g, int(prv[inc[0]]), int(nxt[g])]
        row = cand[g].copy()
        row[excl] = False
        for f in np.flatnonzero(row):
            for e in inc:
                out.add((min(e, int(f)), max(e, int(f))))
    if not out:
        return np.empty((0, 2), dtype=int)
    return np.array(sorted(out), dtype=int)


# -- rasterization -----------------------------------------------------------

def even_odd_mask(cs: CurveSet, width: int, height: int, scale: int = 1) -> np.ndarray:
    """Boolean mask of sample points inside an odd number of curves.

    Samples sit at ``(c + 0.5) / scale`` in curve coordinates, i.e. pixel
    centres when ``scale == 1``. Crossings are found per scanline with the
    half-open rule on edge y-extents; a crossing at ``x`` toggles every
    sample strictly left of it, which matches a +x ray-casting test.
    """
    if width <= 0 or height <= 0:
        raise GeometryError("image dimensions must be positive")
    W, H = width * scale, height * scale
    pts = cs.stacked() * scale
    _, _, nxt = edge_topology(cs)
    p0, p1 = pts, pts[nxt]
    ys = np.arange(H) + 0.5
    y0, y1 = p0[:, 1][:, None], p1[:, 1][:, None]
    straddle = (y0 <= ys) != (y1 <= ys)
    e_idx, r_idx = np.nonzero(straddle)
    if len(e_idx) == 0:
        return np.zeros((height * scale, width * scale), dtype=bool)
    yy = ys[r_idx]
    a, b = p0[e_idx], p1[e_idx]
    x = a[:, 0] + (yy - a[:, 1]) * (b[:, 0] - a[:, 0]) / (b[:, 1] - a[:, 1])
    # samples with centre < x are toggled: columns [0, k) with k = ceil(x - 0.5)
    k = np.clip(np.ceil(x - 0.5), 0, W).astype(int)
    toggles = np.zeros((H, W + 1), dtype=np.int64)
    np.add.at(toggles, (r_idx, np.zeros_like(k)), 1)
    np.add.at(toggles, (r_idx, k), 1)
    return (np.cumsum(toggles, axis=1)[:, :W] % 2).astype(bool)


_FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def rasterize_labels(cs: CurveSet, width: int, height: int, scale: int = 1) -> np.ndarray:
    """Even-odd foreground split into 4-connected components 1..N; 0 is
    background. ``scale > 1`` labels a finer sample grid."""
    mask = even_odd_mask(cs, width, height, scale)
    labels, _ = ndimage.label(mask, structure=_FOUR)
    return labels


def mask_topology(mask: np.ndarray) -> tuple[int, int]:
    """``(components, holes)`` of a boolean mask: 4-connected foreground
    components and 8-connected background components not touching the
    border."""
    mask = np.asarray(mask, dtype=bool)
    _, n_fg = ndimage.label(mask, structure=_FOUR)
    bg = np.pad(~mask, 1, constant_values=True)
    _, n_bg = ndimage.label(bg, structure=np.ones((3, 3)))
    return int(n_fg), int(n_bg) - 1


def edge_pixel_pieces(cs: CurveSet, offset: float = 0.0):
    """Split every edge at the grid lines ``x = k + offset`` and
    ``y = k + offset``.

    Returns ``(edge, t0, t1, p0, p1, ix, iy)``: the global edge id and the
    parameter interval of each piece, its end points and the grid cell
    holding it (cell ``ix`` spans ``[ix + offset, ix + 1 + offset)``).
    """
    pts = cs.stacked()
    _, _, nxt = edge_topology(cs)
    a, d = pts - offset, pts[nxt] - pts
    n = len(pts)
    cols = [np.zeros(n), np.ones(n)]
    for ax in (0, 1):
        lo = np.minimum(a[:, ax], a[:, ax] + d[:, ax])
        hi = np.maximum(a[:, ax], a[:, ax] + d[:, ax])
        first = np.floor(lo) + 1
        count = (np.ceil(hi) - first).astype(int)
        safe = np.where(d[:, ax] == 0, 1.0, d[:, ax])
        for j in range(int(count.max(initial=0))):
            t = (first + j - a[:, ax]) / safe
            cols.append(np.where(j < count, t, 1.0))
    T = np.sort(np.clip(np.stack(cols, axis=1), 0.0, 1.0), axis=1)
    t0, t1 = T[:, :-1], T[:, 1:]
    keep = t1 > t0
    edge = np.broadcast_to(np.arange(n)[:, None], t0.shape)[keep]
    t0, t1 = t0[keep], t1[keep]
    p0 = a[edge] + t0[:, None] * d[edge]
    p1 = a[edge] + t1[:, None] * d[edge]
    mid = 0.5 * (p0 + p1)
    ix = np.floor(mid[:, 0]).astype(int)
    iy = np.floor(mid[:, 1]).astype(int)
    return edge, t0, t1, p0 + offset, p1 + offset, ix, iy


def region_structure(cs: CurveSet):
    """Per curve: ``(sign, component)``.

    ``sign`` is +1 when the curve's interior side is foreground under the
    even-odd rule (even nesting depth) and -1 for holes. Components are
    numbered 1..N; a hole joins the component of its innermost enclosing
    curve and outer curves that cross each other are merged.
    """
    n = len(cs)
    inside = np.zeros((n, n), dtype=bool)      # inside[i, j]: curve i within curve j
    for i, c in enumerate(cs):
        p = c.vertices[0]
        for j, d in enumerate(cs):
            if i != j:
                inside[i, j] = point_in_curves(CurveSet((d,)), p[0], p[1])
    depth = inside.sum(axis=1)
    sign = np.where(depth % 2 == 0, 1, -1)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        if sign[i] < 0:
            enclosing = np.flatnonzero(inside[i])
            if len(enclosing):
                parent[find(i)] = find(int(enclosing[np.argmax(depth[enclosing])]))
    if n > 1:
        curve, _, nxt = edge_topology(cs)
        pts = cs.stacked()
        pairs = nonadjacent_edge_pairs(cs)
        pairs = pairs[curve[pairs[:, 0]] != curve[pairs[:, 1]]]
        if len(pairs):
            a, b = pairs[:, 0], pairs[:, 1]
            hit = _proper_crossings(pts[a], pts[nxt[a]], pts[b], pts[nxt[b]])
            for e, f in pairs[hit]:
                parent[find(int(curve[f]))] = find(int(curve[e]))
    roots = sorted({find(i) for i in range(n)})
    comp = np.array([roots.index(find(i)) + 1 for i in range(n)])
    return sign, comp


def point_in_curves(cs: CurveSet, x: float, y: float) -> bool:
    inside = False
    for c in cs:
        pts = c.vertices
        for (x0, y0), (x1, y1) in zip(pts, np.roll(pts, -1, axis=0)):
            if (y0 <= y) != (y1 <= y):
                xi = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
                if xi > x:
                    inside = not inside
    return inside


# -- resampling ---------------------------------------------------------------

def resample_uniform(poly: Polygon, n: int) -> Polygon:
    """``n`` vertices at equal arc length along the closed polyline,
    starting at vertex 0."""
    if n < 3:
        raise GeometryError("resample needs n >= 3")
    pts = poly.vertices
    closed = np.vstack([pts, pts[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    total = seg.sum()
    if total < 1e-6:
        raise GeometryError("polygon perimeter too small to resample")
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.arange(n) * (total / n)
    j = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(seg) - 1)
    t = (targets - cum[j]) / seg[j]
    new = closed[j] + t[:, None] * (closed[j + 1] - closed[j])
    return Polygon(new, poly.orientation)


def regular_polygon(cx: float, cy: float, r: float, n: int, phase: float = 0.0) -> Polygon:
    t = phase + 2 * np.pi * np.arange(n) / n
    return Polygon(np.stack([cx + r * np.cos(t), cy + r * np.sin(t)], axis=1))


def as_curveset(curves: Iterable) -> CurveSet:
    return curves if isinstance(curves, CurveSet) else CurveSet(tuple(curves))
