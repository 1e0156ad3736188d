"""Gradient-descent evolution of a set of closed polygonal boundaries."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np

from . import geometry as geo
from .geometry import CurveSet, GeometryError, Polygon
from .image import (ImageField, RegionStats, curve_moments, image_moments, sampled_statistics,
                    stats_from_moments)
from .region_energy import (DEFAULT_E2_FORM, E2_FORMS, MIN_REGION_AREA, EnergyBreakdown, EnergyWeights,
                            VanishedRegionError, energy_E1, energy_E2, energy_E3,
                            shape_gradient_E1, shape_gradient_E2, shape_gradient_E3)
from .repulsion import RepulsionField, RepulsionParams, repulsion_field

log = logging.getLogger(__name__)

class EvolutionError(RuntimeError):
    pass


REGION_GRADIENTS = ("edge", "vertex")


@dataclass(frozen=True)
class EvolutionConfig:
    step_size: float = 200.0
    max_iters: int = 1000
    rel_energy_tol: float = 1e-6
    snapshot_every: int = 0
    max_displacement: float = 0.5
    resample_every: int = 0
    repulsion_enabled: bool = True
    e2_form: str = DEFAULT_E2_FORM
    # "edge": exact integral of the region densities along the edges;
    # "vertex": density at the vertex times its length share
    region_gradient: str = "edge"
    window: int = 10

    def __post_init__(self):
        if not (self.step_size > 0 and math.isfinite(self.step_size)):
            raise ValueError("step_size must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if not self.max_displacement > 0:
            raise ValueError("max_displacement must be positive")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.region_gradient not in REGION_GRADIENTS:
            raise ValueError(f"region_gradient must be one of {REGION_GRADIENTS}")
        if self.e2_form not in E2_FORMS:
            raise ValueError(f"e2_form must be one of {E2_FORMS}")


# sampling factor for region integrals of crossing curve sets
FALLBACK_SUPERSAMPLE = 4
# distances (px) probed along -normal to find the foreground side of an edge
_SIDE_PROBES = (1.5, 0.75, 0.3)


@dataclass
class Snapshot:
    """Everything computed from one frozen configuration.

    ``edge_side`` is +1 where the curve's inside is the foreground it
    bounds, -1 on hole boundaries and 0 where no foreground was found;
    ``edge_component`` names that foreground component.
    """

    curves: CurveSet
    edge_side: np.ndarray
    edge_component: np.ndarray
    stats: list[RegionStats]          # entry 0 is the background
    repulsion: RepulsionField
    energy: EnergyBreakdown
    intersections: int
    shape: tuple[int, int]            # image (height, width)
    exact: bool = True                # False: sampled even-odd integrals

    def pixel_labels(self) -> np.ndarray:
        """Even-odd component labels at pixel centres (0 = background)."""
        return geo.rasterize_labels(self.curves, self.shape[1], self.shape[0])

    def mask(self) -> np.ndarray:
        return geo.even_odd_mask(self.curves, self.shape[1], self.shape[0])


@dataclass
class EvolutionState:
    curves: CurveSet
    iteration: int = 0
    energy_history: list[EnergyBreakdown] = field(default_factory=list)
    intersection_history: list[int] = field(default_factory=list)
    stop_reason: str | None = None
    snapshot: Snapshot | None = field(default=None, repr=False, compare=False)


def region_stats(img: ImageField, cs: CurveSet):
    """Exact statistics of the bilinear image over every foreground
    component and the background, for curve sets without crossings.

    Returns ``(stats, sign, component)`` with the per-curve sign (+1 outer
    boundary, -1 hole) and component id used to assemble them.
    """
    sign, comp = geo.region_structure(cs)
    m = curve_moments(img, cs) * sign[:, None]
    n = int(comp.max())
    per = np.zeros((n + 1, m.shape[1]))
    np.add.at(per, comp, m)
    per[0] = image_moments(img) - per[1:].sum(axis=0)
    return [stats_from_moments(k, per[k]) for k in range(n + 1)], sign, comp


def _probe_sides(cs: CurveSet, fine: np.ndarray, scale: int):
    """Foreground side and component of every edge from the even-odd
    labels sampled just inside (then just outside) its midpoint."""
    pts = cs.stacked()
    _, _, nxt = geo.edge_topology(cs)
    mid = 0.5 * (pts + pts[nxt])
    normals = np.concatenate([geo.edge_normals(c) for c in cs])
    H, W = fine.shape

    def label_at(p):
        ix = np.clip(np.floor(p[:, 0] * scale).astype(int), 0, W - 1)
        iy = np.clip(np.floor(p[:, 1] * scale).astype(int), 0, H - 1)
        return fine[iy, ix]

    side = np.zeros(len(pts), dtype=int)
    comp = np.zeros(len(pts), dtype=int)
    todo = np.ones(len(pts), dtype=bool)
    for d in _SIDE_PROBES:
        for sgn in (1, -1):
            lab = label_at(mid - sgn * d * normals)
            hit = todo & (lab > 0)
            side[hit] = sgn
            comp[hit] = lab[hit]
            todo &= ~hit
    return side, comp


def analyze(img: ImageField | None, cs: CurveSet, weights: EnergyWeights, rep: RepulsionParams,
            frozen: RepulsionField | None = None) -> Snapshot:
    """Energies, region statistics and the repulsion field of ``cs``.

    ``img=None`` evaluates the curve-only terms (region energies reported
    as 0); it requires ``alpha == beta == 0``.
    """
    crossings = geo.count_proper_intersections(cs)
    curve, _, _ = geo.edge_topology(cs)
    if img is None:
        if weights.alpha or weights.beta:
            raise ValueError("region weights need an image")
        stats, e1, e2 = [], 0.0, 0.0
        edge_side = np.zeros(len(curve), dtype=int)
        edge_comp = np.zeros(len(curve), dtype=int)
        shape = (0, 0)
    else:
        if crossings == 0:
            stats, sign, comp = region_stats(img, cs)
            edge_side, edge_comp = sign[curve], comp[curve]
        else:
            scale = FALLBACK_SUPERSAMPLE
            fine = geo.rasterize_labels(cs, img.width, img.height, scale)
            stats = sampled_statistics(img, fine, scale)
            edge_side, edge_comp = _probe_sides(cs, fine, scale)
        # slivers cut off by crossings that no edge reads are left alone
        used = {0, *np.unique(edge_comp).tolist()}
        for s in stats:
            if s.label in used and s.area < MIN_REGION_AREA:
                what = "background" if s.label == 0 else f"region {s.label}"
                owners = list(range(len(cs))) if s.label == 0 else np.unique(curve[edge_comp == s.label]).tolist()
                raise VanishedRegionError(
                    f"{what} vanished (area {s.area:.3g} px) near curve(s) {owners}")
        e1 = sum(energy_E1(s) for s in stats[1:] if s.label in used)
        e2 = energy_E2(stats[0])
        shape = (img.height, img.width)
    e3 = energy_E3(cs)
    if frozen is not None:
        rf = repulsion_field(cs, rep, pairs=frozen.pairs)
    else:
        rf = repulsion_field(cs, rep)
    energy = EnergyBreakdown.assemble(weights, e1, e2, e3, rf.energy)
    return Snapshot(cs, edge_side, edge_comp, stats, rf, energy, crossings, shape, exact=crossings == 0)


def total_energy(img: ImageField, cs: CurveSet, weights: EnergyWeights, rep: RepulsionParams,
                 frozen: RepulsionField | None = None) -> EnergyBreakdown:
    return analyze(img, cs, weights, rep, frozen).energy


def _region_density(f, snap: Snapshot, k: int, weights: EnergyWeights, form: str):
    d = np.zeros(len(f))
    if weights.alpha > 0:
        d += weights.alpha * shape_gradient_E1(f, snap.stats[k])
    if weights.beta > 0:
        d += weights.beta * shape_gradient_E2(f, snap.stats[0], form)
    return d


_GX, _GW = np.polynomial.legendre.leggauss(3)
_GX, _GW = 0.5 * (_GX + 1.0), 0.5 * _GW


def _edge_region_gradient(img, snap, weights, form) -> np.ndarray:
    """Exact gradient of the region terms: the densities are integrated
    along every edge against the linear hat weights of its two end
    vertices. Edges are split at the bilinear cell lines and each piece
    uses three-point Gauss quadrature, which is exact there."""
    cs = snap.curves
    curve, _, nxt = geo.edge_topology(cs)
    edge, t0, t1, _, _, _, _ = geo.edge_pixel_pieces(cs, offset=0.5)
    pts = cs.stacked()
    d = pts[nxt] - pts
    tq = (t0[:, None] + _GX[None, :] * (t1 - t0)[:, None]).ravel()
    eq = np.repeat(edge, len(_GX))
    wq = (np.broadcast_to(_GW, (len(edge), len(_GX))) * (t1 - t0)[:, None]).ravel()
    f = img.sample(pts[eq] + tq[:, None] * d[eq])
    comp = snap.edge_component[eq]
    dens = np.zeros(len(eq))
    for k in np.unique(comp[comp > 0]):
        sel = comp == k
        dens[sel] = _region_density(f[sel], snap, int(k), weights, form)
    normals = snap.edge_side[:, None] * np.concatenate([geo.edge_normals(c) for c in cs])
    length = np.linalg.norm(d, axis=1)
    base = (dens * wq * length[eq])[:, None] * normals[eq]
    grad = np.zeros_like(pts)
    np.add.at(grad, eq, base * (1.0 - tq)[:, None])
    np.add.at(grad, nxt[eq], base * tq[:, None])
    return grad


def _vertex_region_gradient(img, snap, weights, form) -> np.ndarray:
    """Density at each vertex times its length share along the vertex
    normal; side and component are read from the outgoing edge."""
    cs = snap.curves
    pts = cs.stacked()
    normals = np.concatenate([geo.vertex_normals(c) for c in cs])
    share = np.concatenate([geo.vertex_length_shares(c) for c in cs])
    f = img.sample(pts)
    dens = np.zeros(len(pts))
    for k in np.unique(snap.edge_component[snap.edge_component > 0]):
        sel = snap.edge_component == k
        dens[sel] = _region_density(f[sel], snap, int(k), weights, form)
    return (snap.edge_side * dens * share)[:, None] * normals


def energy_gradient(img: ImageField, snap: Snapshot, weights: EnergyWeights, rep: RepulsionParams,
                    config: EvolutionConfig) -> np.ndarray:
    """Discrete energy gradient per vertex, stacked over all curves. Every
    quantity is read from ``snap`` so the result is order independent."""
    cs = snap.curves
    grad = np.zeros((cs.n_vertices, 2))
    if img is not None and (weights.alpha > 0 or weights.beta > 0):
        if config.region_gradient == "edge":
            grad += _edge_region_gradient(img, snap, weights, config.e2_form)
        else:
            grad += _vertex_region_gradient(img, snap, weights, config.e2_form)
    if weights.eta > 0:
        parts = []
        for poly in cs:
            kappa = geo.vertex_curvatures(poly)
            share = geo.vertex_length_shares(poly)
            parts.append((weights.eta * shape_gradient_E3(kappa) * share)[:, None] * geo.vertex_normals(poly))
        grad += np.concatenate(parts, axis=0)
    if config.repulsion_enabled and weights.lambda_rep > 0:
        grad += weights.lambda_rep * snap.repulsion.gradient
    return grad


def _effective_weights(weights: EnergyWeights, config: EvolutionConfig) -> EnergyWeights:
    if not config.repulsion_enabled and weights.lambda_rep != 0:
        return replace(weights, lambda_rep=0.0)
    return weights


def initial_state(img, curves: CurveSet, weights, rep, config) -> EvolutionState:
    weights = _effective_weights(weights, config)
    snap = analyze(img, curves, weights, rep)
    return EvolutionState(curves, 0, [snap.energy], [snap.intersections], snapshot=snap)


def step(state: EvolutionState, img: ImageField, weights: EnergyWeights, rep: RepulsionParams,
         config: EvolutionConfig) -> EvolutionState:
    weights = _effective_weights(weights, config)
    snap = state.snapshot
    if snap is None or snap.curves is not state.curves:
        snap = analyze(img, state.curves, weights, rep)
    grad = energy_gradient(img, snap, weights, rep, config)
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(grad), axis=1))[0])
        raise EvolutionError(f"non-finite velocity at vertex {geo.edge_to_ref(state.curves, bad)}")
    disp = -config.step_size * grad
    norm = np.linalg.norm(disp, axis=1)
    over = norm > config.max_displacement
    disp[over] *= (config.max_displacement / norm[over])[:, None]
    pts = state.curves.stacked() + disp
    if img is not None:
        # keep vertices on the image domain
        np.clip(pts[:, 0], 0.0, img.width, out=pts[:, 0])
        np.clip(pts[:, 1], 0.0, img.height, out=pts[:, 1])
    try:
        curves = state.curves.with_stacked(pts)
        it = state.iteration + 1
        if config.resample_every and it % config.resample_every == 0:
            curves = CurveSet(tuple(geo.resample_uniform(c, len(c)) for c in curves))
    except GeometryError as exc:
        raise EvolutionError(f"iteration {state.iteration + 1}: {exc}") from exc
    new = analyze(img, curves, weights, rep)
    return EvolutionState(curves, state.iteration + 1,
                          state.energy_history + [new.energy],
                          state.intersection_history + [new.intersections],
                          snapshot=new)


def converged(history: Sequence[EnergyBreakdown], window: int, tol: float) -> bool:
    if len(history) <= window:
        return False
    now, then = history[-1].total, history[-1 - window].total
    scale = max(abs(now), 1e-300)
    return abs(now - then) / window / scale < tol


class Sink(Protocol):
    def on_energy(self, iteration: int, energy: EnergyBreakdown, intersections: int) -> None: ...
    def on_snapshot(self, iteration: int, curves: CurveSet) -> None: ...
    def flush(self) -> None: ...


def run(img: ImageField, initial: CurveSet, weights: EnergyWeights, rep: RepulsionParams,
        config: EvolutionConfig, sinks: Sequence[Sink] = (), stop_on_vanish: bool = False) -> EvolutionState:
    """Iterate :func:`step` until converged or ``max_iters``.

    With ``stop_on_vanish`` a vanishing region ends the run, keeping the
    last valid state (``stop_reason == "vanished_region"``), instead of
    raising :class:`VanishedRegionError`.
    """
    if img is not None:
        _check_inside(initial, img)
    state = initial_state(img, initial, weights, rep, config)
    try:
        _emit(sinks, state, config, force_snapshot=True)
        while state.iteration < config.max_iters:
            try:
                nxt = step(state, img, weights, rep, config)
            except VanishedRegionError as exc:
                if not stop_on_vanish:
                    raise
                log.warning("iteration %d: %s", state.iteration + 1, exc)
                state.stop_reason = "vanished_region"
                break
            state = nxt
            _emit(sinks, state, config)
            if converged(state.energy_history, config.window, config.rel_energy_tol):
                state.stop_reason = "converged"
                break
        else:
            state.stop_reason = "max_iters"
        # the final configuration is always snapshotted
        if state.iteration and (not config.snapshot_every or state.iteration % config.snapshot_every):
            for s in sinks:
                s.on_snapshot(state.iteration, state.curves)
    finally:
        for s in sinks:
            s.flush()
    log.info("stopped after %d iterations (%s), total energy %.6g",
             state.iteration, state.stop_reason, state.energy_history[-1].total)
    return state


def _emit(sinks, state, config, force_snapshot=False):
    for s in sinks:
        s.on_energy(state.iteration, state.energy_history[-1], state.intersection_history[-1])
        if force_snapshot or (config.snapshot_every and state.iteration % config.snapshot_every == 0):
            s.on_snapshot(state.iteration, state.curves)


def _check_inside(cs: CurveSet, img: ImageField) -> None:
    pts = cs.stacked()
    if (pts[:, 0].min() < 0 or pts[:, 1].min() < 0
            or pts[:, 0].max() > img.width or pts[:, 1].max() > img.height):
        raise EvolutionError("initial curves must lie inside the image")


def make_initial_circles(specs, width: float | None = None, height: float | None = None) -> CurveSet:
    """Regular CCW n-gons inscribed in circles ``(cx, cy, r, n)``."""
    curves = []
    for cx, cy, r, n in specs:
        if r <= 0 or n < 3:
            raise ValueError(f"circle needs r > 0 and n >= 3, got r={r}, n={n}")
        if width is not None and not (0 <= cx <= width and 0 <= cy <= height):
            raise ValueError(f"circle centre ({cx}, {cy}) outside the {width}x{height} image")
        curves.append(geo.regular_polygon(cx, cy, r, int(n)))
    return CurveSet(tuple(curves))


def make_initial_ellipses(specs, width: float | None = None, height: float | None = None) -> CurveSet:
    """CCW n-gons on axis-aligned ellipses ``(cx, cy, a, b, n)``, semi-axis
    ``a`` along x."""
    curves = []
    for cx, cy, a, b, n in specs:
        if a <= 0 or b <= 0 or n < 3:
            raise ValueError(f"ellipse needs a, b > 0 and n >= 3, got a={a}, b={b}, n={n}")
        if width is not None and not (0 <= cx <= width and 0 <= cy <= height):
            raise ValueError(f"ellipse centre ({cx}, {cy}) outside the {width}x{height} image")
        t = 2.0 * np.pi * np.arange(int(n)) / int(n)
        curves.append(Polygon(np.stack([cx + a * np.cos(t), cy + b * np.sin(t)], axis=1)))
    return CurveSet(tuple(curves))


def finite_difference_energy_gradient(img: ImageField, cs: CurveSet, weights: EnergyWeights,
                                      rep: RepulsionParams, vertex: tuple[int, int], h: float,
                                      freeze_repulsion: bool = True) -> np.ndarray:
    """Central difference of the total energy under moving one vertex.

    Region terms are re-integrated at every probe. With
    ``freeze_repulsion`` the h-neighbourhood pair set of the base
    configuration is kept, matching the definition the analytic gradient
    differentiates.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    c, i = vertex
    g = int(cs.offsets[c] + (i % len(cs[c])))
    base = repulsion_field(cs, rep) if freeze_repulsion else None
    pts = cs.stacked()
    out = np.zeros(2)
    for d in range(2):
        vals = []
        for s in (1, -1):
            p = pts.copy()
            p[g, d] += s * h
            vals.append(total_energy(img, cs.with_stacked(p), weights, rep, base).total)
        out[d] = (vals[0] - vals[1]) / (2 * h)
    return out
