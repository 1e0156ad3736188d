"""Multi-region image segmentation with evolving polygonal contours and a
repulsive energy that keeps the contours free of self-intersections."""

from .evolution import (EvolutionConfig, EvolutionError, EvolutionState, make_initial_circles,
                        make_initial_ellipses, run, step)
from .geometry import CurveSet, GeometryError, Polygon, load_polygons, save_polygons
from .image import ImageField, generate_synthetic, load_image, to_cielab
from .region_energy import EnergyBreakdown, EnergyWeights, VanishedRegionError
from .repulsion import RepulsionParams

__version__ = "0.1.0"

__all__ = [
    "CurveSet", "EnergyBreakdown", "EnergyWeights", "EvolutionConfig", "EvolutionError",
    "EvolutionState", "GeometryError", "ImageField", "Polygon", "RepulsionParams",
    "VanishedRegionError", "generate_synthetic", "load_image", "load_polygons",
    "make_initial_circles", "make_initial_ellipses", "run", "save_polygons", "step", "to_cielab",
]
