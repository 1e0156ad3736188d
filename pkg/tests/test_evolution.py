import math

import numpy as np
import pytest

from polyseg import geometry as geo
from polyseg.evolution import (EvolutionConfig, EvolutionError, analyze, energy_gradient,
                               finite_difference_energy_gradient, initial_state, make_initial_circles,
                               make_initial_ellipses, run, step)
from polyseg.geometry import CurveSet, Polygon
from polyseg.image import ImageField, generate_synthetic
from polyseg.io import EnergyCsvSink
from polyseg.region_energy import EnergyWeights, VanishedRegionError, parse_energy_csv
from polyseg.repulsion import RepulsionParams, repulsion_field, vertex_repulsion_force

REP = RepulsionParams()


def smooth_image(n=64):
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    return ImageField(0.15 + 0.7 * np.exp(-((xx - 0.55 * n) ** 2 + (yy - 0.45 * n) ** 2) / (2 * (0.22 * n) ** 2)))


def wobbly(cx, cy, r, n, seed):
    rng = np.random.default_rng(seed)
    t = 2 * np.pi * np.arange(n) / n
    rr = r * (1 + 0.08 * rng.uniform(-1, 1, n))
    return Polygon(np.stack([cx + rr * np.cos(t), cy + rr * np.sin(t)], axis=1))


# -- finite-difference oracle ----------------------------------------------------------------

def test_fd_matches_repulsion_force():
    rng = np.random.default_rng(3)
    cs = CurveSet((Polygon(rng.uniform(0, 3, size=(8, 2))),))
    w = EnergyWeights(alpha=0, beta=0, eta=0, lambda_rep=1.0)
    field = repulsion_field(cs, REP)
    for i in range(8):
        fd = finite_difference_energy_gradient(None, cs, w, REP, (0, i), 1e-6)
        f = vertex_repulsion_force(cs, 0, i, REP, field)
        an = np.array([f.fx, f.fy])
        assert np.linalg.norm(fd - an) <= 1e-5 * max(np.linalg.norm(an), 1e-3)


def test_fd_matches_perimeter_gradient():
    poly = wobbly(30, 30, 12, 17, 0)
    cs = CurveSet((poly,))
    w = EnergyWeights(alpha=0, beta=0, eta=1.0, lambda_rep=0)
    exact = geo.perimeter_gradient(poly)
    for i in range(0, 17, 3):
        fd = finite_difference_energy_gradient(None, cs, w, REP, (0, i), 1e-5)
        assert np.allclose(fd, exact[i], atol=1e-6)


def test_fd_constant_image_region_only_vanishes():
    img = ImageField(np.full((40, 40), 0.37))
    cs = CurveSet((wobbly(20, 20, 10, 24, 1),))
    w = EnergyWeights(alpha=1, beta=1, eta=0, lambda_rep=0)
    for i in (0, 7, 13):
        fd = finite_difference_energy_gradient(img, cs, w, REP, (0, i), 1e-3)
        assert np.linalg.norm(fd) < 1e-9


@pytest.mark.parametrize("alpha, beta", [(1, 0), (0, 1), (1, 1)])
def test_edge_region_gradient_matches_fd(alpha, beta):
    img = smooth_image()
    cs = CurveSet((wobbly(34, 30, 14, 32, 2),))
    w = EnergyWeights(alpha=alpha, beta=beta, eta=0, lambda_rep=0)
    cfg = EvolutionConfig()
    snap = analyze(img, cs, w, REP)
    g = energy_gradient(img, snap, w, REP, cfg)
    for i in range(0, 32, 4):
        fd = finite_difference_energy_gradient(img, cs, w, REP, (0, i), 1e-4)
        assert np.linalg.norm(g[i] - fd) <= 1e-3 * np.linalg.norm(fd) + 1e-10


def test_vertex_region_gradient_is_first_order():
    img = smooth_image()
    cs = CurveSet((geo.regular_polygon(34, 30, 14, 64),))
    w = EnergyWeights(alpha=1, beta=1, eta=0, lambda_rep=0)
    snap = analyze(img, cs, w, REP)
    g = energy_gradient(img, snap, w, REP, EvolutionConfig(region_gradient="vertex"))
    cos = []
    for i in range(0, 64, 4):
        fd = finite_difference_energy_gradient(img, cs, w, REP, (0, i), 1e-4)
        cos.append(g[i] @ fd / (np.linalg.norm(g[i]) * np.linalg.norm(fd)))
    assert min(cos) > 0.9


# -- step -----------------------------------------------------------------------------------------

def test_jacobi_order_independence():
    img = smooth_image()
    a = wobbly(20, 22, 9, 20, 4)
    b = wobbly(44, 40, 10, 25, 5)
    w = EnergyWeights()
    cfg = EvolutionConfig()
    s1 = step(initial_state(img, CurveSet((a, b)), w, REP, cfg), img, w, REP, cfg)
    s2 = step(initial_state(img, CurveSet((b, a)), w, REP, cfg), img, w, REP, cfg)
    assert np.allclose(s1.curves[0].vertices, s2.curves[1].vertices, atol=1e-12)
    assert np.allclose(s1.curves[1].vertices, s2.curves[0].vertices, atol=1e-12)
    # starting each polygon at a different vertex gives the same moves
    ra = Polygon(np.roll(a.vertices, 7, axis=0))
    s3 = step(initial_state(img, CurveSet((ra, b)), w, REP, cfg), img, w, REP, cfg)
    assert np.allclose(np.roll(s3.curves[0].vertices, -7, axis=0), s1.curves[0].vertices, atol=1e-12)


def test_displacement_clamp_and_history_lengths():
    img, _ = generate_synthetic("two_disks", 64, 64)
    cs = make_initial_circles([(20, 32, 14, 30), (44, 32, 14, 30)])
    w = EnergyWeights()
    cfg = EvolutionConfig(step_size=5000.0, max_displacement=0.3)
    state = initial_state(img, cs, w, REP, cfg)
    for _ in range(8):
        nxt = step(state, img, w, REP, cfg)
        moved = np.linalg.norm(nxt.curves.stacked() - state.curves.stacked(), axis=1)
        assert moved.max() <= 0.3 + 1e-12
        state = nxt
        assert len(state.energy_history) == len(state.intersection_history) == state.iteration + 1


def test_curve_shortening():
    cs = CurveSet((geo.regular_polygon(0, 0, 20, 40),))
    w = EnergyWeights(alpha=0, beta=0, eta=1.0, lambda_rep=0)
    cfg = EvolutionConfig(step_size=0.5, repulsion_enabled=False)
    state = initial_state(None, cs, w, REP, cfg)
    per = [cs[0].perimeter]
    for _ in range(10):
        state = step(state, None, w, REP, cfg)
        per.append(state.curves[0].perimeter)
    assert all(b < a for a, b in zip(per, per[1:]))


def test_zero_gradient_configuration():
    img = ImageField(np.full((60, 60), 0.5))
    cs = CurveSet((geo.regular_polygon(30, 30, 15, 24),))
    w = EnergyWeights(alpha=1, beta=1, eta=0, lambda_rep=1e-2)
    cfg = EvolutionConfig()
    nxt = step(initial_state(img, cs, w, REP, cfg), img, w, REP, cfg)
    assert np.abs(nxt.curves.stacked() - cs.stacked()).max() < 1e-9


def test_vanished_region_names_curve():
    img = smooth_image()
    cs = make_initial_circles([(20, 20, 8, 30), (45, 45, 1.0, 12)])
    with pytest.raises(VanishedRegionError, match=r"curve\(s\) \[1\]"):
        initial_state(img, cs, EnergyWeights(), REP, EvolutionConfig())


def test_stop_on_vanish_keeps_last_state():
    img = ImageField(np.zeros((40, 40)))
    img.values[18:22, 18:22] = 1.0
    cs = make_initial_circles([(20, 20, 2.0, 12)])
    cfg = EvolutionConfig(step_size=1e4, max_iters=50)
    w = EnergyWeights(eta=1.0, lambda_rep=0)
    state = run(img, cs, w, REP, cfg, stop_on_vanish=True)
    assert state.stop_reason == "vanished_region"
    with pytest.raises(VanishedRegionError):
        run(img, cs, w, REP, cfg)


def test_non_finite_velocity_raises(monkeypatch):
    from polyseg import evolution

    cs = CurveSet((geo.regular_polygon(0, 0, 5, 6),))
    w = EnergyWeights(alpha=0, beta=0, eta=1.0, lambda_rep=0)
    cfg = EvolutionConfig()
    state = initial_state(None, cs, w, REP, cfg)
    monkeypatch.setattr(evolution, "energy_gradient", lambda *a, **k: np.full((6, 2), np.nan))
    with pytest.raises(EvolutionError, match="non-finite"):
        step(state, None, w, REP, cfg)


def test_bow_tie_untangles_with_repulsion_only():
    # no non-adjacent pair survives on a quad; the angle self-terms alone fold
    # it flat onto a segment, which has no proper crossing left
    cs = CurveSet((Polygon(np.array([[0, 0], [10, 10], [10, 0], [0, 10]], float)),))
    w = EnergyWeights(alpha=0, beta=0, eta=0, lambda_rep=1.0)
    cfg = EvolutionConfig()
    state = initial_state(None, cs, w, REP, cfg)
    assert state.intersection_history[-1] == 1
    for _ in range(200):
        state = step(state, None, w, REP, cfg)
        if state.intersection_history[-1] == 0:
            break
    assert state.intersection_history[-1] == 0


# -- run ------------------------------------------------------------------------------------------

def test_max_iters_zero():
    img, _ = generate_synthetic("two_disks", 64, 64)
    cs = make_initial_circles([(20, 32, 10, 20)])
    state = run(img, cs, EnergyWeights(), REP, EvolutionConfig(max_iters=0))
    assert state.iteration == 0 and len(state.energy_history) == 1
    assert state.curves is cs
    assert state.stop_reason == "max_iters"


def test_run_deterministic_and_csv_rows(tmp_path):
    img, _ = generate_synthetic("two_disks", 64, 64, noise_sigma=0.1, seed=1)
    cs = make_initial_circles([(20, 32, 9, 30), (44, 32, 9, 30)])
    cfg = EvolutionConfig(max_iters=25)
    logs = []
    for k in range(2):
        sink = EnergyCsvSink(tmp_path / f"e{k}.csv")
        state = run(img, cs, EnergyWeights(), REP, cfg, [sink])
        logs.append((tmp_path / f"e{k}.csv").read_bytes())
        assert len(parse_energy_csv(logs[-1].decode())) == len(state.energy_history)
    assert logs[0] == logs[1]


def test_run_rejects_curves_outside_image():
    img = smooth_image()
    with pytest.raises(EvolutionError, match="inside"):
        run(img, make_initial_circles([(60, 32, 10, 20)]), EnergyWeights(), REP, EvolutionConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        EvolutionConfig(step_size=0)
    with pytest.raises(ValueError):
        EvolutionConfig(max_displacement=-1)
    with pytest.raises(ValueError):
        EvolutionConfig(region_gradient="pixel")
    with pytest.raises(ValueError):
        EvolutionConfig(e2_form="other")


# -- initial curves ---------------------------------------------------------------------------------

def test_initial_square():
    cs = make_initial_circles([(50, 50, 10, 4)])
    v = cs[0].vertices
    assert np.allclose(np.hypot(v[:, 0] - 50, v[:, 1] - 50), 10)
    assert np.allclose(v[0], [60, 50])
    assert geo.signed_area(v) > 0


def test_initial_200_perimeter():
    cs = make_initial_circles([(64, 64, 30, 200)])
    assert cs[0].perimeter == pytest.approx(2 * math.pi * 30, rel=1e-3)
    assert cs[0].perimeter == pytest.approx(2 * 200 * 30 * math.sin(math.pi / 200), rel=1e-12)


def test_initial_overlap_allowed_and_errors():
    cs = make_initial_circles([(30, 30, 10, 20), (38, 30, 10, 20)], 64, 64)
    assert geo.count_proper_intersections(cs) > 0
    with pytest.raises(ValueError):
        make_initial_circles([(70, 30, 10, 20)], 64, 64)
    with pytest.raises(ValueError):
        make_initial_circles([(30, 30, 0, 20)])
    with pytest.raises(ValueError):
        make_initial_circles([(30, 30, 5, 2)])


def test_initial_ellipse():
    cs = make_initial_ellipses([(64, 64, 50, 25, 100)], 128, 128)
    v = cs[0].vertices
    assert np.allclose(((v[:, 0] - 64) / 50) ** 2 + ((v[:, 1] - 64) / 25) ** 2, 1.0)
    assert geo.signed_area(v) > 0
    assert cs[0].area == pytest.approx(math.pi * 50 * 25, rel=2e-3)
    with pytest.raises(ValueError):
        make_initial_ellipses([(64, 64, 50, -1, 100)])
