"""Repulsive energy between boundary edges.

Two smooth barriers are combined. ``E_s`` is an arctan approximation of the
indicator that two segments cross at interior parameters; ``E_theta`` is an
arctan band on the dot product of two edge vectors. A pair of edges uses
``E_s / epsilon`` unless the segments are (numerically) parallel, in which
case the ``E_theta`` band on the pair's direction vectors is used instead.
Every vertex additionally carries an ``E_theta`` self-term on its own two
edges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import CurveSet, GeometryError, DEFAULT_TAU_REL, all_neighbourhood_pairs, edge_topology

ENDPOINTS = ("A", "B", "A2", "B2")


@dataclass(frozen=True)
class RepulsionParams:
    epsilon: float = 0.05
    sigma: float = 0.4
    tau_parallel: float = DEFAULT_TAU_REL
    epsilon_theta: float = 0.15
    # amplitude of the crossing branch; None -> 1/epsilon
    epsilon_amplitude: float | None = None
    normalize_d: bool = True

    def __post_init__(self):
        for name in ("epsilon", "sigma", "tau_parallel", "epsilon_theta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")
        v = self.epsilon_amplitude
        if v is not None and not (math.isfinite(v) and v > 0):
            raise ValueError(f"epsilon_amplitude must be positive and finite, got {v}")

    @property
    def amplitude(self) -> float:
        return 1.0 / (self.epsilon if self.epsilon_amplitude is None else self.epsilon_amplitude)


@dataclass(frozen=True)
class RepulsionForce:
    fx: float
    fy: float
    es_contrib: float
    etheta_contrib: float
    pair_count: int


# -- scalar kernels ---------------------------------------------------------

def indicator_smooth_F(t, epsilon):
    return np.arctan(t / epsilon) - np.arctan((t - 1.0) / epsilon)


def indicator_smooth_dF(t, epsilon):
    return (1.0 / (1.0 + (t / epsilon) ** 2) - 1.0 / (1.0 + ((t - 1.0) / epsilon) ** 2)) / epsilon


def energy_Es(mu, lam, epsilon):
    return indicator_smooth_F(mu, epsilon) * indicator_smooth_F(lam, epsilon) / math.pi ** 2


def dot_product_D(v_prev, v, v_next):
    v_prev, v, v_next = (np.asarray(p, dtype=float) for p in (v_prev, v, v_next))
    return float(np.dot(v_prev - v, v_next - v))


def energy_Etheta(D, sigma, epsilon_theta):
    return (np.arctan((D + sigma) / epsilon_theta) - np.arctan((D - sigma) / epsilon_theta)) / math.pi


def energy_Etheta_dD(D, sigma, epsilon_theta):
    e = epsilon_theta
    return (1.0 / (1.0 + ((D + sigma) / e) ** 2) - 1.0 / (1.0 + ((D - sigma) / e) ** 2)) / (math.pi * e)


def grad_Etheta(v_prev, v, v_next, sigma, epsilon_theta, normalize: bool = False) -> np.ndarray:
    """Gradient with respect to ``v`` of the angle barrier at ``v``."""
    v_prev, v, v_next = (np.asarray(p, dtype=float) for p in (v_prev, v, v_next))
    D, da, db = band_D(v_prev - v, v_next - v, normalize)
    return -energy_Etheta_dD(D, sigma, epsilon_theta) * (da + db)


def es_and_gradients(A, B, A2, B2, epsilon):
    """Vectorised ``E_s`` and its gradient w.r.t. the four endpoints.

    Inputs broadcast to (..., 2). Returns ``(E, grads, delta, mu, lam)`` with
    ``grads`` of shape (..., 4, 2) ordered A, B, A2, B2.

    With ``d1 = B - A``, ``d2 = B2 - A2``, ``w = A2 - A`` and
    ``c = cross(d1, d2)``: ``lam = cross(w, d2) / c``, ``mu = cross(w, d1) / c``.
    Partials follow from the quotient rule on those cross products.
    """
    A, B, A2, B2 = (np.asarray(p, dtype=float) for p in (A, B, A2, B2))
    d1, d2, w = B - A, B2 - A2, A2 - A
    cross = lambda a, b: a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    c = cross(d1, d2)
    p = cross(w, d2)
    q = cross(w, d1)
    lam = p / c
    mu = q / c

    # d cross(a, b)/da = (b_y, -b_x) ; d cross(a, b)/db = (-a_y, a_x)
    da = lambda b: np.stack([b[..., 1], -b[..., 0]], axis=-1)
    db = lambda a: np.stack([-a[..., 1], a[..., 0]], axis=-1)
    zero = np.zeros_like(A)
    # dw/dA = -I, dd1/dA = -I, dd1/dB = I, dw/dA2 = I, dd2/dA2 = -I, dd2/dB2 = I
    dc = [-da(d2), da(d2), -db(d1), db(d1)]
    dp = [-da(d2), zero, da(d2) - db(w), db(w)]
    dq = [-da(d1) - db(w), db(w), da(d1), zero]
    c2 = (c * c)[..., None]
    dlam = np.stack([(dp[k] * c[..., None] - p[..., None] * dc[k]) / c2 for k in range(4)], axis=-2)
    dmu = np.stack([(dq[k] * c[..., None] - q[..., None] * dc[k]) / c2 for k in range(4)], axis=-2)

    Fm, Fl = indicator_smooth_F(mu, epsilon), indicator_smooth_F(lam, epsilon)
    dFm, dFl = indicator_smooth_dF(mu, epsilon), indicator_smooth_dF(lam, epsilon)
    E = Fm * Fl / math.pi ** 2
    grads = ((dFm * Fl)[..., None, None] * dmu + (Fm * dFl)[..., None, None] * dlam) / math.pi ** 2
    return E, grads, c, mu, lam


def grad_Es_wrt_endpoint(A, B, A2, B2, endpoint: str, epsilon: float,
                         tau_parallel: float | None = None) -> np.ndarray:
    A, B, A2, B2 = (np.asarray(p, dtype=float) for p in (A, B, A2, B2))
    d1, d2 = B - A, B2 - A2
    delta = d1[0] * d2[1] - d1[1] * d2[0]
    if tau_parallel is None:
        tau_parallel = DEFAULT_TAU_REL * max(d1 @ d1, d2 @ d2)
    if abs(delta) <= tau_parallel:
        raise GeometryError("segments are parallel; the E_s branch does not apply")
    _, grads, *_ = es_and_gradients(A, B, A2, B2, epsilon)
    return grads[ENDPOINTS.index(endpoint)]


def energy_ER_pair(A, B, A2, B2, params: RepulsionParams) -> float:
    """Pair repulsion: ``E_s / epsilon`` for a unique line crossing, otherwise
    the ``E_theta`` band on the direction vectors ``(B - A) . (B2 - A2)``."""
    A, B, A2, B2 = (np.asarray(p, dtype=float) for p in (A, B, A2, B2))
    d1, d2 = B - A, B2 - A2
    delta = d1[0] * d2[1] - d1[1] * d2[0]
    tau = params.tau_parallel * max(d1 @ d1, d2 @ d2)
    if abs(delta) > tau:
        E, *_ = es_and_gradients(A, B, A2, B2, params.epsilon)
        return float(params.amplitude * E)
    D, _, _ = band_D(d1, d2, params.normalize_d)
    return float(energy_Etheta(D, params.sigma, params.epsilon_theta))


# -- assembly over a curve set ---------------------------------------------------

@dataclass
class RepulsionField:
    """Total repulsive energy of a curve set and its gradient per vertex."""

    energy: float
    es_energy: float
    etheta_energy: float
    gradient: np.ndarray          # (n_vertices, 2)
    pairs: np.ndarray             # (M, 2) global edge ids
    pair_energy: np.ndarray       # (M,)
    self_energy: np.ndarray       # (n_vertices,)


def band_D(a: np.ndarray, b: np.ndarray, normalize: bool):
    """``D = a . b`` and its partials with respect to ``a`` and ``b``.

    Normalised mode divides by the mean squared length ``(|a|^2 + |b|^2) / 2``
    so that ``|D| <= 1`` and ``sigma`` is scale free. Shapes (..., 2).
    """
    P = np.einsum("...i,...i->...", a, b)
    if not normalize:
        return P, b.copy(), a.copy()
    m = 0.5 * (np.einsum("...i,...i->...", a, a) + np.einsum("...i,...i->...", b, b))
    D = P / m
    Dk, mk = D[..., None], m[..., None]
    return D, (b - Dk * a) / mk, (a - Dk * b) / mk


def vertex_Etheta(v_prev, v, v_next, params: RepulsionParams) -> float:
    """Angle barrier at ``v`` on its two edge vectors."""
    v_prev, v, v_next = (np.asarray(p, dtype=float) for p in (v_prev, v, v_next))
    D, _, _ = band_D(v_prev - v, v_next - v, params.normalize_d)
    return float(energy_Etheta(D, params.sigma, params.epsilon_theta))


def repulsion_field(cs: CurveSet, params: RepulsionParams, pairs: np.ndarray | None = None) -> RepulsionField:
    """Evaluate ``E_R`` over the union of all h-neighbourhood pairs (each
    unordered pair once) plus every vertex's angle self-term, with its exact
    gradient per vertex.

    The pair set is a discrete function of the configuration; passing
    ``pairs`` from an earlier snapshot evaluates that snapshot's pair set at
    moved vertices.
    """
    pts = cs.stacked()
    n = len(pts)
    _, prv, nxt = edge_topology(cs)
    if pairs is None:
        pairs = all_neighbourhood_pairs(cs)
    grad = np.zeros((n, 2))
    es_total = 0.0
    th_total = 0.0
    pair_energy = np.zeros(len(pairs))
    sig, et = params.sigma, params.epsilon_theta

    if len(pairs):
        e, f = pairs[:, 0], pairs[:, 1]
        A, B, A2, B2 = pts[e], pts[nxt[e]], pts[f], pts[nxt[f]]
        d1, d2 = B - A, B2 - A2
        l1 = np.einsum("ij,ij->i", d1, d1)
        l2 = np.einsum("ij,ij->i", d2, d2)
        delta = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        unique = np.abs(delta) > params.tau_parallel * np.maximum(l1, l2)
        if unique.any():
            u = np.flatnonzero(unique)
            E, g, *_ = es_and_gradients(A[u], B[u], A2[u], B2[u], params.epsilon)
            amp = params.amplitude
            pair_energy[u] = amp * E
            es_total = float(pair_energy[u].sum())
            for k, owner in enumerate((e[u], nxt[e[u]], f[u], nxt[f[u]])):
                np.add.at(grad, owner, amp * g[:, k, :])
        par = np.flatnonzero(~unique)
        if len(par):
            D, da, db = band_D(d1[par], d2[par], params.normalize_d)
            pair_energy[par] = energy_Etheta(D, sig, et)
            th_total += float(pair_energy[par].sum())
            dE = energy_Etheta_dD(D, sig, et)[:, None]
            np.add.at(grad, e[par], -dE * da)
            np.add.at(grad, nxt[e[par]], dE * da)
            np.add.at(grad, f[par], -dE * db)
            np.add.at(grad, nxt[f[par]], dE * db)

    # per-vertex angle barrier on (v_prev - v) . (v_next - v)
    D, da, db = band_D(pts[prv] - pts, pts[nxt] - pts, params.normalize_d)
    self_energy = energy_Etheta(D, sig, et)
    th_total += float(self_energy.sum())
    dE = energy_Etheta_dD(D, sig, et)[:, None]
    grad -= dE * (da + db)
    np.add.at(grad, prv, dE * da)
    np.add.at(grad, nxt, dE * db)

    return RepulsionField(es_total + th_total, es_total, th_total, grad, pairs, pair_energy, self_energy)


def repulsion_energy(cs: CurveSet, params: RepulsionParams) -> float:
    return repulsion_field(cs, params).energy


def vertex_repulsion_force(cs: CurveSet, c: int, i: int, params: RepulsionParams,
                           field: RepulsionField | None = None) -> RepulsionForce:
    """Gradient of the total ``E_R`` with respect to vertex ``i`` of curve ``c``.

    The contributing terms are all neighbourhood pairs that contain an edge
    incident to the vertex, and the angle self-terms of the vertex and its
    two neighbours. ``es_contrib``/``etheta_contrib`` report the energy of
    those terms. The returned ``(fx, fy)`` is the gradient (descent moves
    along its negative).
    """
    if field is None:
        field = repulsion_field(cs, params)
    g = int(cs.offsets[c] + (i % len(cs[c])))
    _, prv, nxt = edge_topology(cs)
    inc = {int(prv[g]), g}
    es = th = 0.0
    count = 0
    if len(field.pairs):
        touch = np.isin(field.pairs[:, 0], list(inc)) | np.isin(field.pairs[:, 1], list(inc))
        count = int(touch.sum())
        sel = field.pair_energy[touch]
        # classify each touching pair by branch via its stored energy origin
        pts = cs.stacked()
        for (e, f), val in zip(field.pairs[touch], sel):
            d1 = pts[nxt[e]] - pts[e]
            d2 = pts[nxt[f]] - pts[f]
            delta = d1[0] * d2[1] - d1[1] * d2[0]
            if abs(delta) > params.tau_parallel * max(d1 @ d1, d2 @ d2):
                es += float(val)
            else:
                th += float(val)
    th += float(field.self_energy[[int(prv[g]), g, int(nxt[g])]].sum())
    fx, fy = field.gradient[g]
    return RepulsionForce(float(fx), float(fy), es, th, count)

