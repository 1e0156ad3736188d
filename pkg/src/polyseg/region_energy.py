"""Area-normalised piecewise-constant region energies and their
shape-gradient densities.

For a region with area ``A``, intensity sum ``S`` and squared sum ``Q``
the energy is its variance ``Q/A - (S/A)**2``. Multichannel images sum the
per-channel terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .image import RegionStats

MIN_REGION_AREA = 4.0

E2_FORMS = ("mirror", "printed")
# Selected by the finite-difference oracle (tests/test_acceptance.py).
DEFAULT_E2_FORM = "mirror"


class VanishedRegionError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnergyWeights:
    alpha: float = 1.0
    beta: float = 1.0
    eta: float = 1e-4
    lambda_rep: float = 1e-2

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"weight {k} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class EnergyBreakdown:
    e1: float
    e2: float
    e3: float
    er: float
    total: float

    @classmethod
    def assemble(cls, w: EnergyWeights, e1, e2, e3, er) -> "EnergyBreakdown":
        return cls(e1, e2, e3, er, w.alpha * e1 + w.beta * e2 + w.eta * e3 + w.lambda_rep * er)


def _check_area(stats: RegionStats, what: str) -> float:
    if stats.area < MIN_REGION_AREA:
        raise VanishedRegionError(f"{what} {stats.label} has area {stats.area:.3g} < {MIN_REGION_AREA}")
    return stats.area


def _variance(stats: RegionStats, A: float) -> float:
    # clamp the cancellation round-off of a constant region
    return max(0.0, float(np.sum(stats.sum_sq - stats.sum ** 2 / A) / A))


def energy_E1(stats: RegionStats) -> float:
    return _variance(stats, _check_area(stats, "region"))


def energy_E2(stats_background: RegionStats) -> float:
    return _variance(stats_background, _check_area(stats_background, "background"))


def energy_E3(cs) -> float:
    return float(sum(c.perimeter for c in cs))


def shape_gradient_E1(f_at_x, stats: RegionStats) -> np.ndarray:
    """Density of dE1 for outward normal motion of the region boundary.

    ``f_at_x`` has shape (channels,) or (n, channels); returns a float or
    an (n,) array.
    """
    A = _check_area(stats, "region")
    f = np.asarray(f_at_x, dtype=float)
    S, Q = stats.sum, stats.sum_sq
    dens = f * f / A - (Q + 2 * f * S - 2 * S * S / A) / A ** 2
    return dens.sum(axis=-1)


def shape_gradient_E2(f_at_x, stats_background: RegionStats, form: str = DEFAULT_E2_FORM) -> np.ndarray:
    """Density of dE2 for outward normal motion of the *foreground* boundary.

    ``form="mirror"`` is the negated E1 density of the background (growing
    the foreground shrinks the background); ``form="printed"`` omits the
    ``2 f S`` cross term.
    """
    A = _check_area(stats_background, "background")
    f = np.asarray(f_at_x, dtype=float)
    S, Q = stats_background.sum, stats_background.sum_sq
    if form == "mirror":
        dens = -(f * f / A - (Q + 2 * f * S - 2 * S * S / A) / A ** 2)
    elif form == "printed":
        dens = -f * f / A + (Q - 2 * S * S / A) / A ** 2
    else:
        raise ValueError(f"unknown E2 form {form!r}; expected one of {E2_FORMS}")
    return dens.sum(axis=-1)


def shape_gradient_E3(kappa):
    return kappa


def region_energies(stats: list[RegionStats]) -> tuple[float, float]:
    """``(sum of E1 over foreground components, E2 of background)``; entry 0
    of ``stats`` must be the background."""
    bg = stats[0]
    e1 = sum(energy_E1(s) for s in stats[1:])
    return e1, energy_E2(bg)


ENERGY_CSV_HEADER = "iteration,e1,e2,e3,er,total"


def format_energy_csv(rows) -> str:
    """``rows`` are ``(iteration, EnergyBreakdown)`` pairs."""
    lines = [ENERGY_CSV_HEADER]
    for it, b in rows:
        lines.append(f"{it},{b.e1!r},{b.e2!r},{b.e3!r},{b.er!r},{b.total!r}")
    return "\n".join(lines) + "\n"


def parse_energy_csv(text: str) -> list[tuple[int, EnergyBreakdown]]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != ENERGY_CSV_HEADER:
        raise ValueError(f"energy CSV must start with {ENERGY_CSV_HEADER!r}")
    out = []
    for line in lines[1:]:
        if line.strip():
            it, *vals = line.split(",")
            out.append((int(it), EnergyBreakdown(*map(float, vals))))
    return out


def write_energy_csv(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_energy_csv(rows))


def total_energy(img, cs, weights: EnergyWeights, rep) -> EnergyBreakdown:
    """``alpha*E1 + beta*E2 + eta*E3 + lambda_rep*E_R`` of a curve set, with
    the region terms integrated exactly over the bilinear image."""
    from .evolution import analyze

    return analyze(img, cs, weights, rep).energy
