"""Run outputs: energy log, contour snapshots, overlays and masks.

Every file is written to a temporary sibling first and renamed into place,
so a re-run never leaves a half-written artifact behind.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .geometry import CurveSet
from .image import ImageField, image_to_uint8
from .region_energy import EnergyBreakdown, format_energy_csv, parse_energy_csv

INITIAL_COLOR = (255, 0, 0)
CURRENT_COLOR = (0, 255, 0)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2) + "\n")


def _png_bytes(im: Image.Image) -> bytes:
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    return buf.getvalue()


def read_energy_csv(path) -> list[tuple[int, EnergyBreakdown]]:
    return parse_energy_csv(Path(path).read_text())


def render_overlay(img: ImageField, initial: CurveSet | None, current: CurveSet) -> Image.Image:
    """Curves drawn with 1-px closed polylines over the (RGB-promoted) input."""
    base = image_to_uint8(img)
    if base.ndim == 2:
        base = np.repeat(base[:, :, None], 3, axis=2)
    im = Image.fromarray(base, mode="RGB")
    draw = ImageDraw.Draw(im)
    for cs, color in ((initial, INITIAL_COLOR), (current, CURRENT_COLOR)):
        if cs is None:
            continue
        for c in cs:
            pts = [tuple(p) for p in c.vertices.tolist()]
            draw.line(pts + pts[:1], fill=color, width=1)
    return im


def label_mask_image(labels: np.ndarray) -> Image.Image:
    """One gray level per label, spread over 0..255 (background 0)."""
    n = int(labels.max())
    if n == 0:
        gray = np.zeros(labels.shape, dtype=np.uint8)
    else:
        gray = np.round(labels * (255.0 / n)).astype(np.uint8)
    return Image.fromarray(gray, mode="L")


def save_label_mask(labels: np.ndarray, path) -> None:
    atomic_write_bytes(path, _png_bytes(label_mask_image(labels)))


class EnergyCsvSink:
    """Collects energy rows; the whole CSV is rewritten on every flush."""

    def __init__(self, path):
        self.path = Path(path)
        self.rows: list[tuple[int, EnergyBreakdown]] = []
        self.intersections: list[int] = []

    def on_energy(self, iteration, energy, intersections):
        self.rows.append((iteration, energy))
        self.intersections.append(int(intersections))

    def on_snapshot(self, iteration, curves):
        pass

    def flush(self):
        atomic_write_text(self.path, format_energy_csv(self.rows))


class SnapshotSink:
    """Writes ``contours_<iter>.json`` and, given an image,
    ``overlay_<iter>.png`` into ``out_dir``."""

    def __init__(self, out_dir, img: ImageField | None = None, initial: CurveSet | None = None):
        self.out_dir = Path(out_dir)
        self.img = img
        self.initial = initial
        self.written: list[int] = []

    def on_energy(self, iteration, energy, intersections):
        pass

    def on_snapshot(self, iteration, curves):
        if self.initial is None:
            self.initial = curves
        write_json_compact(self.out_dir / f"contours_{iteration:05d}.json", curves.to_json())
        if self.img is not None:
            im = render_overlay(self.img, self.initial, curves)
            atomic_write_bytes(self.out_dir / f"overlay_{iteration:05d}.png", _png_bytes(im))
        self.written.append(iteration)

    def flush(self):
        pass


def write_json_compact(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj))
