import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyseg import geometry as geo
from polyseg.evolution import make_initial_circles
from polyseg.geometry import CurveSet, Polygon
from polyseg.image import ImageField, RegionStats, generate_synthetic, region_statistics
from polyseg.region_energy import (EnergyBreakdown, EnergyWeights, VanishedRegionError, energy_E1, energy_E2,
                                   energy_E3, format_energy_csv, parse_energy_csv, shape_gradient_E1,
                                   shape_gradient_E2, shape_gradient_E3, total_energy, write_energy_csv)
from polyseg.repulsion import RepulsionParams


def stats_of(values, label=1):
    v = np.asarray(values, dtype=float).reshape(-1, 1)
    return RegionStats(label, float(len(v)), v.sum(axis=0), (v ** 2).sum(axis=0))


# -- energies ----------------------------------------------------------------------------

def test_e1_constant_zero():
    assert energy_E1(stats_of([0.7] * 10)) == pytest.approx(0.0, abs=1e-15)


def test_e1_area_normalisation():
    # the module's vanished-region threshold needs 4 px; two copies of (0, 1)
    assert energy_E1(stats_of([0.0, 1.0, 0.0, 1.0])) == pytest.approx(0.25)
    s = RegionStats(1, 2.0, np.array([1.0]), np.array([1.0]))
    with pytest.raises(VanishedRegionError):
        energy_E1(s)


def test_e1_two_pixel_formula():
    # (1/2)(1 - 1**2/2) once the area check is out of the way
    A, S, Q = 2.0, 1.0, 1.0
    assert (Q - S * S / A) / A == 0.25


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 3.0), st.floats(-0.5, 0.5))
def test_e1_homogeneity_and_shift(seed, c, shift):
    v = np.random.default_rng(seed).uniform(0.2, 0.6, 20)
    e = energy_E1(stats_of(v))
    assert energy_E1(stats_of(c * v)) == pytest.approx(c * c * e, rel=1e-9, abs=1e-15)
    assert abs(energy_E1(stats_of(v + shift)) - e) < 1e-9


def test_e2_cases():
    assert energy_E2(stats_of([0.3] * 9, label=0)) == pytest.approx(0.0, abs=1e-15)
    # whole image foreground except a small constant patch
    vals = np.random.default_rng(0).uniform(0, 1, size=(8, 8))
    vals[0, :4] = 0.42
    labels = np.ones((8, 8), int)
    labels[0, :4] = 0
    bg = region_statistics(ImageField(vals), labels)[0]
    assert energy_E2(bg) == pytest.approx(0.0, abs=1e-15)


def test_e2_is_e1_of_complement():
    rng = np.random.default_rng(1)
    img = ImageField(rng.uniform(0, 1, size=(16, 16)))
    labels = (rng.uniform(size=(16, 16)) > 0.5).astype(int)
    bg, fg = region_statistics(img, labels)
    flipped = region_statistics(img, 1 - labels)[1]
    assert energy_E2(bg) == pytest.approx(energy_E1(flipped), rel=1e-12)


def test_e3_perimeters():
    unit = Polygon(np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float))
    two = CurveSet((unit, Polygon(unit.vertices + 5)))
    assert energy_E3(CurveSet((unit,))) == pytest.approx(4.0)
    assert energy_E3(two) == pytest.approx(8.0)
    ngon = CurveSet((geo.regular_polygon(0, 0, 50, 64),))
    assert energy_E3(ngon) == pytest.approx(64 * 2 * 50 * math.sin(math.pi / 64), rel=1e-12)
    assert energy_E3(ngon) == pytest.approx(314.0331157, abs=1e-6)


# -- shape-gradient densities ---------------------------------------------------------------

values = st.lists(st.floats(0, 1), min_size=4, max_size=40)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.integers(4, 500), st.integers(1, 3))
def test_e1_density_zero_on_constant_image(c, area, channels):
    s = RegionStats(1, float(area), np.full(channels, c * area), np.full(channels, c * c * area))
    scale = c * c / area + 1e-300
    assert abs(shape_gradient_E1(np.full(channels, c), s)) <= 1e-10 * max(scale, 1e-300) + 1e-300


@settings(max_examples=100, deadline=None)
@given(values)
def test_e1_density_at_mean_is_minus_var_over_area(v):
    s = stats_of(v)
    mu = s.mean
    expect = -(s.sum_sq / s.area - mu ** 2)[0] / s.area
    assert shape_gradient_E1(mu, s) == pytest.approx(expect, abs=1e-12)
    assert shape_gradient_E1(mu, s) <= 1e-15


def test_e2_constant_image_forms():
    c, A = 0.6, 50.0
    s = RegionStats(0, A, np.array([c * A]), np.array([c * c * A]))
    assert shape_gradient_E2([c], s, "printed") == pytest.approx(-2 * c * c / A)
    assert shape_gradient_E2([c], s, "mirror") == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        shape_gradient_E2([c], s, "other")


@settings(max_examples=100, deadline=None)
@given(values, st.floats(0, 1))
def test_mirror_e2_is_negated_e1_on_same_content(v, f):
    s = stats_of(v)
    bg = RegionStats(0, s.area, s.sum, s.sum_sq)
    assert shape_gradient_E2([f], bg, "mirror") == pytest.approx(-shape_gradient_E1([f], s), abs=1e-12)


def test_e3_density_is_curvature():
    assert shape_gradient_E3(0.0) == 0.0
    assert shape_gradient_E3(1 / 7) == pytest.approx(1 / 7)


def _exact_region_e1(img, cs):
    from polyseg.evolution import region_stats
    stats, _, _ = region_stats(img, cs)
    return energy_E1(stats[1])


def test_e1_density_predicts_normal_fd():
    # smooth image, 64-vertex curve, one vertex moved by +-h along its normal
    yy, xx = np.mgrid[0:128, 0:128] + 0.5
    img = ImageField(0.2 + 0.6 * np.exp(-((xx - 70) ** 2 + (yy - 58) ** 2) / (2 * 30.0 ** 2)))
    poly = geo.regular_polygon(64, 64, 28, 64)
    cs = CurveSet((poly,))
    from polyseg.evolution import region_stats
    stats, _, _ = region_stats(img, cs)
    nrm = geo.vertex_normals(poly)
    share = geo.vertex_length_shares(poly)
    dens = shape_gradient_E1(img.sample(poly.vertices), stats[1])
    h = 0.25
    agree = 0
    for i in range(64):
        vals = []
        for s in (1, -1):
            p = poly.vertices.copy()
            p[i] += s * h * nrm[i]
            vals.append(_exact_region_e1(img, CurveSet((Polygon(p),))))
        fd = (vals[0] - vals[1]) / (2 * h)
        pred = dens[i] * share[i]
        agree += np.sign(fd) == np.sign(pred) and abs(fd - pred) <= 0.1 * abs(fd)
    assert agree / 64 >= 0.95


# -- total energy ------------------------------------------------------------------------------

def test_total_on_true_boundaries_near_zero():
    img, _ = generate_synthetic("two_disks", 128, 128)
    w = EnergyWeights(eta=0.0, lambda_rep=0.0)
    on = total_energy(img, make_initial_circles([(38.4, 64, 19.2, 200), (89.6, 64, 19.2, 200)]), w, RepulsionParams())
    off = total_energy(img, make_initial_circles([(38.4, 64, 25, 200), (89.6, 64, 25, 200)]), w, RepulsionParams())
    # the bilinear image blurs the disk edge over one pixel, so "zero" is the
    # residual of that band
    assert on.total < 0.02
    assert on.total < 0.05 * off.total


def test_total_linearity_and_lambda_zero():
    img, _ = generate_synthetic("two_disks", 64, 64, noise_sigma=0.1, seed=3)
    cs = make_initial_circles([(20, 32, 9, 40), (44, 32, 9, 40)])
    rep = RepulsionParams()
    base = total_energy(img, cs, EnergyWeights(alpha=1, beta=1, eta=1e-3, lambda_rep=0.0), rep)
    assert base.er > 0
    assert base.total == pytest.approx(base.e1 + base.e2 + 1e-3 * base.e3, rel=1e-12)
    double = total_energy(img, cs, EnergyWeights(alpha=2, beta=1, eta=1e-3, lambda_rep=0.0), rep)
    assert double.total - base.total == pytest.approx(base.e1, rel=1e-9)
    w = EnergyWeights(alpha=0.5, beta=2, eta=1e-3, lambda_rep=0.1)
    e = total_energy(img, cs, w, rep)
    assert e.total == pytest.approx(0.5 * e.e1 + 2 * e.e2 + 1e-3 * e.e3 + 0.1 * e.er, abs=1e-9)
    assert min(e.e1, e.e2, e.e3, e.er) >= 0


def test_weights_validation():
    with pytest.raises(ValueError, match="alpha"):
        EnergyWeights(alpha=-1)
    with pytest.raises(ValueError, match="eta"):
        EnergyWeights(eta=float("nan"))


# -- energy log -----------------------------------------------------------------------------------

def test_energy_csv_roundtrip(tmp_path):
    rows = [(0, EnergyBreakdown(0.1, 0.2, 30.0, 1.5, 0.35)), (1, EnergyBreakdown(0.09, 0.19, 29.9, 1.4, 0.33))]
    text = format_energy_csv(rows)
    assert text.splitlines()[0] == "iteration,e1,e2,e3,er,total"
    assert parse_energy_csv(text) == rows
    p = tmp_path / "e.csv"
    write_energy_csv(rows, p)
    assert p.read_text() == text
    with pytest.raises(ValueError):
        parse_energy_csv("a,b\n1,2\n")
