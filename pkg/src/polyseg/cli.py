"""Command-line front end: ``polyseg segment | ablation | untangle``.

A run is described by a JSON config (see README) with optional flag
overrides. The fully resolved config is written next to the outputs and
reproduces the run on its own.

Exit codes: 0 success, 1 config error, 2 runtime/numeric error,
3 non-convergence.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io as out
from .evolution import (EvolutionConfig, EvolutionError, EvolutionState, initial_state,
                        make_initial_circles, make_initial_ellipses, run, step)
from .geometry import CurveSet, GeometryError, load_polygons, mask_topology
from .image import SYNTHETIC_KINDS, ImageField, ImageLoadError, generate_synthetic, load_image, to_cielab
from .region_energy import EnergyWeights, VanishedRegionError
from .repulsion import RepulsionParams

log = logging.getLogger("polyseg")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_NONCONVERGED = 0, 1, 2, 3
COLOR_MODES = ("gray", "cielab")
INIT_KINDS = ("circles", "ellipses", "polygon_file")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "two_disks"
    width: int = 128
    height: int = 128
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SYNTHETIC_KINDS:
            raise ValueError(f"kind must be one of {SYNTHETIC_KINDS}, got {self.kind!r}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("width and height must be positive")
        if not (math.isfinite(self.noise_sigma) and self.noise_sigma >= 0):
            raise ValueError("noise_sigma must be non-negative")


@dataclass(frozen=True)
class RunConfig:
    image_path: str | None
    scene: SceneSpec | None
    color_mode: str
    weights: EnergyWeights
    repulsion: RepulsionParams
    evolution: EvolutionConfig
    initial_curves: dict
    output_dir: str
    truth_path: str | None = None

    def to_json(self) -> dict:
        return {
            "image_path": self.image_path,
            "scene": None if self.scene is None else dataclasses.asdict(self.scene),
            "truth_path": self.truth_path,
            "color_mode": self.color_mode,
            "weights": dataclasses.asdict(self.weights),
            "repulsion": dataclasses.asdict(self.repulsion),
            "evolution": dataclasses.asdict(self.evolution),
            "initial_curves": copy.deepcopy(self.initial_curves),
            "output_dir": self.output_dir,
        }


# Scenes for the synthetic experiments. Parameters not listed take the
# module defaults.
PRESETS = {
    "two_disks": {
        "scene": {"kind": "two_disks", "width": 128, "height": 128},
        "initial_curves": {"circles": [[38.4, 64.0, 24.0, 60], [89.6, 64.0, 24.0, 60]]},
    },
    "two_disks_noisy": {
        "scene": {"kind": "two_disks", "width": 128, "height": 128, "noise_sigma": 0.1, "seed": 0},
        "initial_curves": {"circles": [[38.4, 64.0, 24.0, 60], [89.6, 64.0, 24.0, 60]]},
    },
    "annulus": {
        "scene": {"kind": "annulus", "width": 128, "height": 128},
        "initial_curves": {"circles": [[64.0, 64.0, 46.0, 80], [64.0, 64.0, 14.0, 40]]},
    },
    # one curve around both disks; its waist must pinch off to split
    "ablation": {
        "scene": {"kind": "two_disks", "width": 128, "height": 128},
        "initial_curves": {"ellipses": [[64.0, 64.0, 50.0, 25.0, 100]]},
    },
}

_TOP_KEYS = ("preset", "image_path", "scene", "truth_path", "color_mode", "weights", "repulsion",
             "evolution", "initial_curves", "output_dir")


# -- config parsing ------------------------------------------------------------

def _coerce(section: str, f: dataclasses.Field, value):
    name = f"{section}.{f.name}"
    default = f.default
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not (isinstance(value, int) or (isinstance(value, float) and value.is_integer())):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float) or default is None:
        if value is None and default is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, section: str, data):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")
    kwargs = {k: _coerce(section, fields[k], v) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def _deep_merge(base: dict, over: dict) -> dict:
    res = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(res.get(k), dict) and k != "initial_curves":
            res[k] = _deep_merge(res[k], v)
        else:
            res[k] = copy.deepcopy(v)
    return res


def _check_specs(specs, width: int, name: str):
    if not isinstance(specs, list) or not specs:
        raise ConfigError(f"initial_curves.{name}: expected a non-empty list")
    for s in specs:
        if (not isinstance(s, list) or len(s) != width
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in s)):
            raise ConfigError(f"initial_curves.{name}: each entry must be {width} numbers, got {s!r}")


def _resolve_path(p, base: Path, name: str) -> str:
    if not isinstance(p, str):
        raise ConfigError(f"{name}: expected a path string")
    path = Path(p)
    if not path.is_absolute():
        path = base / path
    if not path.exists():
        raise ConfigError(f"{name}: {path} does not exist")
    return str(path.resolve())


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


FLAG_TARGETS = {
    "alpha": ("weights", "alpha"),
    "beta": ("weights", "beta"),
    "eta": ("weights", "eta"),
    "lambda_rep": ("weights", "lambda_rep"),
    "epsilon": ("repulsion", "epsilon"),
    "sigma": ("repulsion", "sigma"),
    "step": ("evolution", "step_size"),
    "iters": ("evolution", "max_iters"),
    "color_mode": ("color_mode", None),
    "output_dir": ("output_dir", None),
}


def parse_config(data: dict | None = None, overrides: dict | None = None, base_dir=".",
                 no_repulsion: bool = False) -> RunConfig:
    """Resolve a config dict plus flag ``overrides`` (keys of
    :data:`FLAG_TARGETS`, ``None`` meaning unset) into a :class:`RunConfig`.
    Relative paths are taken relative to ``base_dir``."""
    data = dict(data or {})
    unknown = sorted(set(data) - set(_TOP_KEYS))
    if unknown:
        raise ConfigError(f"unknown keys {unknown}")
    preset = data.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        data = _deep_merge(PRESETS[preset], data)
    for flag, value in (overrides or {}).items():
        if value is None:
            continue
        if flag not in FLAG_TARGETS:
            raise ConfigError(f"unknown override {flag!r}")
        sec, key = FLAG_TARGETS[flag]
        if key is None:
            data[sec] = value
        else:
            data[sec] = dict(data.get(sec) or {}, **{key: value})
    if no_repulsion:
        data["evolution"] = dict(data.get("evolution") or {}, repulsion_enabled=False)
        data["weights"] = dict(data.get("weights") or {}, lambda_rep=0.0)

    base = Path(base_dir)
    image_path, scene = data.get("image_path"), data.get("scene")
    if (image_path is None) == (scene is None):
        raise ConfigError("exactly one of image_path or scene must be given")
    if image_path is not None:
        image_path = _resolve_path(image_path, base, "image_path")
    else:
        scene = _build(SceneSpec, "scene", scene)
    truth_path = data.get("truth_path")
    if truth_path is not None:
        truth_path = _resolve_path(truth_path, base, "truth_path")

    color_mode = data.get("color_mode", "gray")
    if color_mode not in COLOR_MODES:
        raise ConfigError(f"color_mode: expected one of {COLOR_MODES}, got {color_mode!r}")

    weights = _build(EnergyWeights, "weights", data.get("weights"))
    repulsion = _build(RepulsionParams, "repulsion", data.get("repulsion"))
    evolution = _build(EvolutionConfig, "evolution", data.get("evolution"))
    if not evolution.repulsion_enabled and weights.lambda_rep != 0:
        weights = dataclasses.replace(weights, lambda_rep=0.0)

    init = data.get("initial_curves")
    if not isinstance(init, dict) or len(init) != 1 or next(iter(init)) not in INIT_KINDS:
        raise ConfigError(f"initial_curves: expected an object with exactly one of {list(INIT_KINDS)}")
    kind, val = next(iter(init.items()))
    if kind == "circles":
        _check_specs(val, 4, kind)
    elif kind == "ellipses":
        _check_specs(val, 5, kind)
    else:
        val = _resolve_path(val, base, "initial_curves.polygon_file")
    init = {kind: copy.deepcopy(val)}

    output_dir = data.get("output_dir", "polyseg_out")
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("output_dir: expected a non-empty path string")
    output_dir = str((base / output_dir).resolve()) if not Path(output_dir).is_absolute() else output_dir

    return RunConfig(image_path, scene, color_mode, weights, repulsion, evolution, init, output_dir, truth_path)


# -- pipeline ------------------------------------------------------------------

def load_inputs(cfg: RunConfig) -> tuple[ImageField, np.ndarray | None]:
    """Image (converted per ``color_mode``) and optional truth mask."""
    truth = None
    if cfg.scene is not None:
        s = cfg.scene
        img, truth = generate_synthetic(s.kind, s.width, s.height, s.noise_sigma, s.seed)
    else:
        img = load_image(cfg.image_path)
    if cfg.truth_path is not None:
        t = load_image(cfg.truth_path)
        truth = t.values[..., 0] > 0.5
        if truth.shape != (img.height, img.width):
            raise ConfigError("truth_path: mask size differs from the image")
    if cfg.color_mode == "cielab":
        img = to_cielab(img)
    elif img.channels > 1:
        # luminance, Rec. 601 weights
        img = ImageField(img.values @ np.array([0.299, 0.587, 0.114]))
    return img, truth


def initial_curves(cfg: RunConfig, img: ImageField) -> CurveSet:
    kind, val = next(iter(cfg.initial_curves.items()))
    try:
        if kind == "circles":
            return make_initial_circles(val, img.width, img.height)
        if kind == "ellipses":
            return make_initial_ellipses(val, img.width, img.height)
        return load_polygons(val)
    except (ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"initial_curves.{kind}: {exc}") from exc


def jaccard(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def _energy_json(e) -> dict:
    return dataclasses.asdict(e)


def run_summary(state: EvolutionState, truth: np.ndarray | None) -> tuple[dict, np.ndarray]:
    snap = state.snapshot
    labels = snap.pixel_labels()
    mask = labels > 0
    comps, holes = mask_topology(mask)
    summary = {
        "iterations": state.iteration,
        "stop_reason": state.stop_reason,
        "converged": state.stop_reason == "converged",
        "final_energy": _energy_json(state.energy_history[-1]),
        "intersections": state.intersection_history[-1],
        "max_intersections": max(state.intersection_history),
        "intersection_history": list(state.intersection_history),
        "regions": [{"label": s.label, "area": s.area, "mean": s.mean.tolist()} for s in snap.stats],
        "mask": {"components": comps, "holes": holes, "foreground_pixels": int(mask.sum())},
    }
    if truth is not None:
        summary["jaccard"] = jaccard(mask, truth)
    return summary, labels


def _segment_into(cfg: RunConfig, img, truth, out_dir: Path, evo: EvolutionConfig,
                  weights: EnergyWeights, stop_on_vanish: bool = False):
    out_dir.mkdir(parents=True, exist_ok=True)
    cs = initial_curves(cfg, img)
    energy = out.EnergyCsvSink(out_dir / "energy.csv")
    snaps = out.SnapshotSink(out_dir, img, cs)
    state = run(img, cs, weights, cfg.repulsion, evo, sinks=(energy, snaps), stop_on_vanish=stop_on_vanish)
    summary, labels = run_summary(state, truth)
    out.save_label_mask(labels, out_dir / "mask.png")
    out.write_json(out_dir / "summary.json", summary)
    return state, summary


def _status(state: EvolutionState) -> int:
    return EXIT_NONCONVERGED if state.stop_reason == "max_iters" else EXIT_OK


def cmd_segment(cfg: RunConfig) -> int:
    img, truth = load_inputs(cfg)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out.write_json(out_dir / "config.resolved.json", cfg.to_json())
    state, summary = _segment_into(cfg, img, truth, out_dir, cfg.evolution, cfg.weights)
    log.info("segment: %d iterations (%s)", state.iteration, state.stop_reason)
    return _status(state)


def cmd_ablation(cfg: RunConfig) -> int:
    """Same scene with and without repulsion. The off-run ends early if a
    region vanishes, which is reported rather than treated as an error."""
    if cfg.weights.lambda_rep <= 0 or not cfg.evolution.repulsion_enabled:
        raise ConfigError("ablation needs repulsion enabled with lambda_rep > 0 for the on-run")
    img, truth = load_inputs(cfg)
    root = Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    out.write_json(root / "config.resolved.json", cfg.to_json())
    on, s_on = _segment_into(cfg, img, truth, root / "with_repulsion", cfg.evolution, cfg.weights)
    off_evo = dataclasses.replace(cfg.evolution, repulsion_enabled=False)
    off_w = dataclasses.replace(cfg.weights, lambda_rep=0.0)
    off, s_off = _segment_into(cfg, img, truth, root / "without_repulsion", off_evo, off_w, stop_on_vanish=True)

    n = max(len(on.energy_history), len(off.energy_history))
    lines = ["iteration,total_with,total_without"]
    for it in range(n):
        a = repr(on.energy_history[it].total) if it < len(on.energy_history) else ""
        b = repr(off.energy_history[it].total) if it < len(off.energy_history) else ""
        lines.append(f"{it},{a},{b}")
    out.atomic_write_text(root / "ablation_energy.csv", "\n".join(lines) + "\n")
    out.write_json(root / "ablation_summary.json", {"with_repulsion": s_on, "without_repulsion": s_off})
    return _status(on)


# with alpha = beta = eta = 0, lambda_rep only rescales the step; the
# displacement clamp is the effective speed limit
UNTANGLE_DEFAULTS = {"step_size": 200.0, "max_iters": 200, "lambda_rep": 1.0}


def untangle(cs: CurveSet, rep: RepulsionParams, lambda_rep: float, config: EvolutionConfig,
             until_simple: bool = True) -> EvolutionState:
    """Repulsion-only descent on the bare curves (no image)."""
    weights = EnergyWeights(alpha=0.0, beta=0.0, eta=0.0, lambda_rep=lambda_rep)
    state = initial_state(None, cs, weights, rep, config)
    while state.iteration < config.max_iters:
        if until_simple and state.intersection_history[-1] == 0:
            state.stop_reason = "simple"
            return state
        state = step(state, None, weights, rep, config)
    state.stop_reason = "simple" if state.intersection_history[-1] == 0 else "max_iters"
    return state


def untangle_csv(state: EvolutionState) -> str:
    lines = ["iteration,intersections,er"]
    for it, (e, n) in enumerate(zip(state.energy_history, state.intersection_history)):
        lines.append(f"{it},{n},{e.er!r}")
    return "\n".join(lines) + "\n"


def cmd_untangle(polygon_path, rep: RepulsionParams, lambda_rep: float, config: EvolutionConfig,
                 output=None, until_simple: bool = True) -> int:
    if lambda_rep <= 0:
        raise ConfigError("untangle needs lambda_rep > 0")
    try:
        cs = load_polygons(polygon_path)
    except FileNotFoundError as exc:
        raise ConfigError(f"{polygon_path}: file not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{polygon_path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    except GeometryError as exc:
        raise ConfigError(f"{polygon_path}: {exc}") from exc
    state = untangle(cs, rep, lambda_rep, config, until_simple)
    text = untangle_csv(state)
    if output is None or output == "-":
        sys.stdout.write(text)
    else:
        out.atomic_write_text(output, text)
    final = state.intersection_history[-1]
    if final:
        print(f"untangle: {final} proper intersections remain after {state.iteration} iterations",
              file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------

def _add_overrides(p: argparse.ArgumentParser, image_flags: bool = True):
    g = p.add_argument_group("overrides")
    if image_flags:
        g.add_argument("--alpha", type=float)
        g.add_argument("--beta", type=float)
        g.add_argument("--eta", type=float)
        g.add_argument("--color-mode", choices=COLOR_MODES)
        g.add_argument("--output-dir")
    g.add_argument("--lambda-rep", type=float)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--sigma", type=float)
    g.add_argument("--step", type=float)
    g.add_argument("--iters", type=int)
    if image_flags:
        g.add_argument("--no-repulsion", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polyseg", description="Multi-region polygonal active contours.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("segment", "segment an image"),
                        ("ablation", "run a scene with and without repulsion")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", nargs="?", help="JSON run config")
        p.add_argument("--preset", choices=sorted(PRESETS))
        _add_overrides(p)
    p = sub.add_parser("untangle", help="repulsion-only descent of a polygon file")
    p.add_argument("polygons", help="polygon JSON: array of curves, each an array of [x, y]")
    p.add_argument("--output", "-o", help="CSV destination (default stdout)")
    p.add_argument("--full", action="store_true", help="keep iterating after the curves become simple")
    _add_overrides(p, image_flags=False)
    return parser


def _overrides(args) -> dict:
    return {k: getattr(args, k, None) for k in FLAG_TARGETS}


def _config_from_args(args) -> RunConfig:
    if args.config is None and args.preset is None:
        raise ConfigError("give a config file or --preset")
    data, base = {}, Path.cwd()
    if args.config is not None:
        data = load_config_file(args.config)
        base = Path(args.config).resolve().parent
    if args.preset is not None:
        data = dict(data, preset=args.preset)
    return parse_config(data, _overrides(args), base_dir=base, no_repulsion=args.no_repulsion)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "untangle":
            try:
                rep = RepulsionParams(**{k: v for k, v in (("epsilon", args.epsilon), ("sigma", args.sigma))
                                         if v is not None})
                evo = EvolutionConfig(step_size=args.step or UNTANGLE_DEFAULTS["step_size"],
                                      max_iters=UNTANGLE_DEFAULTS["max_iters"] if args.iters is None else args.iters)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            lam = UNTANGLE_DEFAULTS["lambda_rep"] if args.lambda_rep is None else args.lambda_rep
            return cmd_untangle(args.polygons, rep, lam, evo, args.output, until_simple=not args.full)
        cfg = _config_from_args(args)
        return cmd_segment(cfg) if args.command == "segment" else cmd_ablation(cfg)
    except (ConfigError, ImageLoadError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EvolutionError, VanishedRegionError, GeometryError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
