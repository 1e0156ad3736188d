"""Image ingestion, colour conversion, synthetic scenes and region statistics."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .geometry import CurveSet, Polygon, edge_pixel_pieces, edge_topology

# D65 reference white, CIE 1931 2-degree observer
_WHITE = np.array([0.95047, 1.0, 1.08883])
_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])


class ImageLoadError(OSError):
    pass


@dataclass
class ImageField:
    """Pixel values in [0, 1], shape (height, width, channels)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[2] not in (1, 3):
            raise ValueError(f"expected (H, W, 1|3) values, got shape {v.shape}")
        if v.shape[0] <= 0 or v.shape[1] <= 0:
            raise ValueError("image dimensions must be positive")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @cached_property
    def _moment_tables(self):
        return _moment_tables(self.values)

    def fine_values(self, scale: int) -> np.ndarray:
        """Bilinear image at the sample centres of a ``scale``-times finer
        grid, shape (H*scale, W*scale, C)."""
        cache = self.__dict__.setdefault("_fine_cache", {})
        if scale not in cache:
            ys = (np.arange(self.height * scale) + 0.5) / scale
            xs = (np.arange(self.width * scale) + 0.5) / scale
            gx, gy = np.meshgrid(xs, ys)
            v = self.sample(np.stack([gx.ravel(), gy.ravel()], axis=1))
            cache[scale] = v.reshape(len(ys), len(xs), self.channels)
        return cache[scale]

    def sample(self, xy: np.ndarray) -> np.ndarray:
        """Bilinear samples at continuous points (pixel centres at +0.5),
        clamped to the image. Returns shape (n, channels)."""
        xy = np.atleast_2d(xy)
        x = np.clip(xy[:, 0] - 0.5, 0.0, self.width - 1.0)
        y = np.clip(xy[:, 1] - 0.5, 0.0, self.height - 1.0)
        x0 = np.minimum(np.floor(x).astype(int), self.width - 2) if self.width > 1 else np.zeros(len(x), int)
        y0 = np.minimum(np.floor(y).astype(int), self.height - 2) if self.height > 1 else np.zeros(len(y), int)
        x1 = np.minimum(x0 + 1, self.width - 1)
        y1 = np.minimum(y0 + 1, self.height - 1)
        tx = (x - x0)[:, None]
        ty = (y - y0)[:, None]
        v = self.values
        top = v[y0, x0] * (1 - tx) + v[y0, x1] * tx
        bot = v[y1, x0] * (1 - tx) + v[y1, x1] * tx
        return top * (1 - ty) + bot * ty


def load_image(path) -> ImageField:
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("1", "L", "LA"):
                arr = np.asarray(im.convert("L"), dtype=float) / 255.0
            elif mode.startswith("I"):
                # 16-bit PGM/PNG
                arr = np.asarray(im, dtype=float)
                arr = arr / (65535.0 if arr.max() > 255 else 255.0)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=float) / 255.0
    except FileNotFoundError as exc:
        raise ImageLoadError(f"{path}: file not found") from exc
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageLoadError(f"{path}: cannot decode image ({exc})") from exc
    return ImageField(np.clip(arr, 0.0, 1.0))


def save_gray_png(arr: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path, format="PNG")


def image_to_uint8(img: ImageField) -> np.ndarray:
    v = np.round(img.values * 255.0).astype(np.uint8)
    return v[:, :, 0] if img.channels == 1 else v


def srgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0,1] -> (L*, a*, b*), D65."""
    rgb = np.asarray(rgb, dtype=float)
    lin = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _RGB_TO_XYZ.T / _WHITE
    eps, kappa = 216.0 / 24389.0, 24389.0 / 27.0
    f = np.where(xyz > eps, np.cbrt(xyz), (kappa * xyz + 16.0) / 116.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def to_cielab(img: ImageField) -> ImageField:
    """CIELAB rescaled into [0,1]: (L/100, (a+128)/255, (b+128)/255).
    Single-channel images pass through unchanged."""
    if img.channels == 1:
        return img
    lab = srgb_to_lab(img.values)
    scaled = np.stack([lab[..., 0] / 100.0,
                       (lab[..., 1] + 128.0) / 255.0,
                       (lab[..., 2] + 128.0) / 255.0], axis=-1)
    return ImageField(np.clip(scaled, 0.0, 1.0))


# -- synthetic scenes -------------------------------------------------------

SYNTHETIC_KINDS = ("two_disks", "annulus", "bars")


def synthetic_mask(kind: str, width: int, height: int) -> np.ndarray:
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    yy, xx = np.mgrid[0:height, 0:width] + 0.5
    s = min(width, height)
    cx, cy = width / 2.0, height / 2.0
    if kind == "two_disks":
        r = 0.15 * s
        d = 0.2 * width
        m = ((xx - (cx - d)) ** 2 + (yy - cy) ** 2 <= r * r) | ((xx - (cx + d)) ** 2 + (yy - cy) ** 2 <= r * r)
    elif kind == "annulus":
        rho2 = (xx - cx) ** 2 + (yy - cy) ** 2
        m = (rho2 <= (0.32 * s) ** 2) & (rho2 >= (0.14 * s) ** 2)
    elif kind == "bars":
        bw = max(2, int(round(0.12 * width)))
        m = np.zeros((height, width), dtype=bool)
        top, bottom = int(0.2 * height), int(0.8 * height)
        for x0 in (int(0.22 * width), int(0.66 * width) - bw // 2):
            m[top:bottom, x0:x0 + bw] = True
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    return m


def generate_synthetic(kind: str, width: int, height: int, noise_sigma: float = 0.0, seed: int = 0):
    """Binary scene (foreground 1, background 0) plus clamped Gaussian noise.

    Returns ``(image, truth)`` where ``truth`` is the noise-free boolean mask.
    """
    truth = synthetic_mask(kind, width, height)
    vals = truth.astype(float)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        vals = vals + rng.normal(0.0, noise_sigma, size=vals.shape)
    return ImageField(np.clip(vals, 0.0, 1.0)), truth


# -- statistics ------------------------------------------------------------------

@dataclass(frozen=True)
class RegionStats:
    label: int
    area: float
    sum: np.ndarray
    sum_sq: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.sum / self.area

    @property
    def variance(self) -> np.ndarray:
        return self.sum_sq / self.area - self.mean ** 2


def region_statistics(img: ImageField, labels: np.ndarray) -> list[RegionStats]:
    """Exact per-label sums over an integer label mask. Labels with no
    pixels are left out."""
    labels = np.asarray(labels)
    if labels.shape != (img.height, img.width):
        raise ValueError(f"mask shape {labels.shape} does not match image {(img.height, img.width)}")
    flat = labels.ravel()
    n = int(flat.max()) + 1 if flat.size else 1
    v = img.values.reshape(-1, img.channels)
    area = np.bincount(flat, minlength=n).astype(float)
    s = np.stack([np.bincount(flat, weights=v[:, c], minlength=n) for c in range(img.channels)], axis=1)
    q = np.stack([np.bincount(flat, weights=v[:, c] ** 2, minlength=n) for c in range(img.channels)], axis=1)
    return [RegionStats(k, area[k], s[k], q[k]) for k in range(n) if area[k] > 0]


# -- exact integrals of the bilinear image over polygons ---------------------

_GX, _GW = np.polynomial.legendre.leggauss(3)
_GX, _GW = 0.5 * (_GX + 1.0), 0.5 * _GW


def _moment_tables(values: np.ndarray):
    """Per bilinear cell, the s-antiderivative of the integrands
    ``1, f_c, f_c**2`` as monomial coefficients ``[i, j]`` of ``s**i t**j``,
    and its row-wise prefix sums over whole cells.

    Cells have corners at pixel centres; the image is extended by edge
    replication so that cell ``(I, J)`` spans ``x in [J - 0.5, J + 0.5]``.
    """
    P = np.pad(values, ((1, 1), (1, 1), (0, 0)), mode="edge")
    H1, W1, C = P.shape[0] - 1, P.shape[1] - 1, P.shape[2]
    lin = np.zeros((H1, W1, C, 3, 3))
    p00, p01, p10, p11 = P[:-1, :-1], P[:-1, 1:], P[1:, :-1], P[1:, 1:]
    lin[..., 0, 0] = p00
    lin[..., 1, 0] = p01 - p00
    lin[..., 0, 1] = p10 - p00
    lin[..., 1, 1] = p11 - p10 - p01 + p00
    sq = np.zeros_like(lin)
    for i1 in (0, 1):
        for j1 in (0, 1):
            for i2 in (0, 1):
                for j2 in (0, 1):
                    sq[..., i1 + i2, j1 + j2] += lin[..., i1, j1] * lin[..., i2, j2]
    one = np.zeros((H1, W1, 1, 3, 3))
    one[..., 0, 0] = 1.0
    coef = np.concatenate([one, lin, sq], axis=2)            # (H1, W1, K, 3, 3)
    anti = np.zeros(coef.shape[:-2] + (4, 3))
    anti[..., 1:, :] = coef / np.arange(1, 4)[:, None]
    full = anti.sum(axis=-2)                                   # integral over s in [0, 1]
    prefix = np.cumsum(full, axis=1) - full
    return anti, prefix


def curve_moments(img: ImageField, cs: CurveSet) -> np.ndarray:
    """Exact integrals of ``1, f_c, f_c**2`` of the bilinear image over the
    interior of every curve, shape (n_curves, 1 + 2C). The sign follows
    each curve's orientation, so a positively oriented loop gives its area.
    """
    anti, prefix = img._moment_tables
    H1, W1 = prefix.shape[:2]
    edge, _, _, p0, p1, ix, iy = edge_pixel_pieces(cs, offset=0.5)
    I = np.clip(iy + 1, 0, H1 - 1)
    J = np.clip(ix + 1, 0, W1 - 1)
    A = anti[I, J]                                             # (m, K, 4, 3)
    R = prefix[I, J]                                           # (m, K, 3)
    # local cell coordinates at the quadrature nodes
    q = p0[:, None, :] + _GX[None, :, None] * (p1 - p0)[:, None, :]
    s = q[..., 0] - (J - 0.5)[:, None]
    t = q[..., 1] - (I - 0.5)[:, None]
    sp = s[..., None] ** np.arange(4)
    tp = t[..., None] ** np.arange(3)
    val = np.einsum("mkij,mqi,mqj->mqk", A, sp, tp) + np.einsum("mkj,mqj->mqk", R, tp)
    piece = (val * _GW[None, :, None]).sum(axis=1) * (p1[:, 1] - p0[:, 1])[:, None]
    curve, _, _ = edge_topology(cs)
    out = np.zeros((len(cs), piece.shape[1]))
    np.add.at(out, curve[edge], piece)
    return out * np.array([c.orientation for c in cs])[:, None]


def image_moments(img: ImageField) -> np.ndarray:
    W, H = img.width, img.height
    rect = Polygon(np.array([[0.0, 0.0], [W, 0.0], [W, H], [0.0, H]]))
    return curve_moments(img, CurveSet((rect,)))[0]


def stats_from_moments(label: int, m: np.ndarray) -> RegionStats:
    C = (len(m) - 1) // 2
    return RegionStats(label, float(m[0]), m[1:1 + C].copy(), m[1 + C:].copy())


def sampled_statistics(img: ImageField, fine_labels: np.ndarray, scale: int) -> list[RegionStats]:
    """Statistics of the bilinear image over a label grid ``scale`` times
    finer than the image; every sample carries area ``1 / scale**2``.
    Entry ``k`` is label ``k``, empty labels included."""
    v = img.fine_values(scale).reshape(-1, img.channels)
    flat = fine_labels.ravel()
    n = int(flat.max()) + 1
    cell = 1.0 / (scale * scale)
    area = np.bincount(flat, minlength=n) * cell
    s = np.stack([np.bincount(flat, weights=v[:, c], minlength=n) for c in range(img.channels)], axis=1) * cell
    q = np.stack([np.bincount(flat, weights=v[:, c] ** 2, minlength=n) for c in range(img.channels)], axis=1) * cell
    return [RegionStats(k, float(area[k]), s[k], q[k]) for k in range(n)]
