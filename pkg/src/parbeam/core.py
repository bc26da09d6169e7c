"""Scan geometry, pixel grid, Hounsfield scaling and procedural phantoms.

Images are plain ``(N, N)`` float64 arrays with ``N = 2q + 1``.  Array index
``[k + q, l + q]`` holds the pixel centred at ``(k*ds, l*ds)``, so the first
axis runs along the first spatial coordinate and the origin is the centre
pixel.  Sinograms are ``(p, 2q + 1)`` arrays indexed ``[j, l + q]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidArgument, SupportViolation

__all__ = [
    "Geometry",
    "HuScale",
    "Ellipse",
    "Phantom",
    "make_geometry",
    "hu_to_mu",
    "mu_to_hu",
    "rasterize_phantom",
    "shift_image",
    "gaussian_blob",
    "disk_phantom",
    "shepp_logan",
    "random_phantom",
    "check_image",
    "check_sinogram",
]


@dataclass(frozen=True)
class Geometry:
    """Parallel-beam scan: ``p`` angles over ``[0, pi)``, ``2q+1`` bins over ``[-rho, rho]``."""

    p: int
    q: int
    rho: float = 1.0

    def __post_init__(self):
        if int(self.p) != self.p or self.p < 1:
            raise InvalidArgument(f"number of angles must be a positive integer, got {self.p!r}")
        if int(self.q) != self.q or self.q < 1:
            raise InvalidArgument(f"half bin count must be a positive integer, got {self.q!r}")
        if not (math.isfinite(self.rho) and self.rho > 0):
            raise InvalidArgument(f"radius must be positive and finite, got {self.rho!r}")
        object.__setattr__(self, "p", int(self.p))
        object.__setattr__(self, "q", int(self.q))
        object.__setattr__(self, "rho", float(self.rho))

    @property
    def n(self) -> int:
        return 2 * self.q + 1

    @property
    def dphi(self) -> float:
        return math.pi / self.p

    @property
    def ds(self) -> float:
        return self.rho / self.q

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.p) * self.dphi

    @property
    def directions(self) -> np.ndarray:
        """Unit vectors ``(cos phi_j, sin phi_j)``, shape ``(p, 2)``."""
        phi = self.angles
        return np.stack([np.cos(phi), np.sin(phi)], axis=1)

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(-self.q, self.q + 1) * self.ds

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.n, self.n)

    @property
    def sino_shape(self) -> tuple[int, int]:
        return (self.p, self.n)

    def pixel_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Centre coordinates ``(x1, x2)`` of every pixel, each ``(N, N)``."""
        c = self.offsets
        return np.meshgrid(c, c, indexing="ij")

    def disk_mask(self) -> np.ndarray:
        """True for pixels whose centre lies within ``rho`` of the origin."""
        k = np.arange(-self.q, self.q + 1)
        return (k[:, None] ** 2 + k[None, :] ** 2) <= self.q ** 2

    def to_dict(self) -> dict:
        return {"p": self.p, "q": self.q, "rho": self.rho}


def make_geometry(p: int, q: int, rho: float = 1.0) -> Geometry:
    return Geometry(p, q, rho)


def check_image(img, geom: Geometry) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape != geom.image_shape:
        raise InvalidArgument(f"image shape {img.shape} does not match geometry {geom.image_shape}")
    return img


def check_sinogram(sino, geom: Geometry) -> np.ndarray:
    sino = np.asarray(sino, dtype=np.float64)
    if sino.shape != geom.sino_shape:
        raise InvalidArgument(f"sinogram shape {sino.shape} does not match geometry {geom.sino_shape}")
    return sino


# --------------------------------------------------------------------------
# Hounsfield units
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class HuScale:
    mu_water: float = 0.2

    def __post_init__(self):
        if not (math.isfinite(self.mu_water) and self.mu_water > 0):
            raise InvalidArgument(f"mu_water must be positive, got {self.mu_water!r}")


def hu_to_mu(hu, scale: HuScale = HuScale()):
    """Linear HU map: air (-1000) -> 0, water (0) -> ``mu_water``."""
    return scale.mu_water * (1.0 + np.asarray(hu, dtype=np.float64) / 1000.0)


def mu_to_hu(mu, scale: HuScale = HuScale()):
    return 1000.0 * (np.asarray(mu, dtype=np.float64) / scale.mu_water - 1.0)


# --------------------------------------------------------------------------
# Phantoms
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]
    axes: tuple[float, float]
    angle: float = 0.0
    value: float = 1.0

    def contains(self, x1, x2):
        c, s = math.cos(self.angle), math.sin(self.angle)
        d1 = x1 - self.center[0]
        d2 = x2 - self.center[1]
        u = (c * d1 + s * d2) / self.axes[0]
        v = (-s * d1 + c * d2) / self.axes[1]
        return u * u + v * v <= 1.0

    def max_radius(self, samples: int = 4096) -> float:
        """Largest distance from the origin reached by the ellipse boundary."""
        t = np.linspace(0.0, 2 * math.pi, samples, endpoint=False)
        c, s = math.cos(self.angle), math.sin(self.angle)
        bx = self.axes[0] * np.cos(t)
        by = self.axes[1] * np.sin(t)
        x = self.center[0] + c * bx - s * by
        y = self.center[1] + s * bx + c * by
        return float(np.sqrt(x * x + y * y).max())


@dataclass(frozen=True)
class Phantom:
    ellipses: tuple[Ellipse, ...] = field(default_factory=tuple)
    background: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "ellipses", tuple(self.ellipses))


def rasterize_phantom(ph: Phantom, geom: Geometry) -> np.ndarray:
    """Sample the phantom at pixel centres; pixels outside the disk are zero."""
    for e in ph.ellipses:
        if min(e.axes) <= 0:
            raise InvalidArgument(f"ellipse semi-axes must be positive: {e}")
        if e.max_radius() > geom.rho * (1 + 1e-12):
            raise InvalidArgument(f"ellipse {e} extends past the reconstruction radius {geom.rho}")
    x1, x2 = geom.pixel_coords()
    img = np.full(geom.image_shape, float(ph.background))
    for e in ph.ellipses:
        img[e.contains(x1, x2)] += e.value
    img[~geom.disk_mask()] = 0.0
    return img


def disk_phantom(geom: Geometry, radius: float, value: float = 1.0) -> Phantom:
    return Phantom((Ellipse((0.0, 0.0), (radius, radius), 0.0, value),))


def shepp_logan(geom: Geometry, scale: HuScale | None = None) -> Phantom:
    """Modified Shepp-Logan head scaled into the reconstruction disk.

    With ``scale`` given, intensities are mapped to attenuation so that the
    skull is bone-like and the brain is close to water.
    """
    # (value, a, b, x0, y0, phi_deg), modified intensities
    table = [
        (1.0, 0.69, 0.92, 0.0, 0.0, 0),
        (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0),
        (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18),
        (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18),
        (0.1, 0.2100, 0.2500, 0.0, 0.35, 0),
        (0.1, 0.0460, 0.0460, 0.0, 0.1, 0),
        (0.1, 0.0460, 0.0460, 0.0, -0.1, 0),
        (0.1, 0.0460, 0.0230, -0.08, -0.605, 0),
        (0.1, 0.0230, 0.0230, 0.0, -0.606, 0),
        (0.1, 0.0230, 0.0460, 0.06, -0.605, 0),
    ]
    r = 0.98 * geom.rho
    factor = scale.mu_water / 0.2 if scale is not None else 1.0
    ellipses = tuple(
        Ellipse((x0 * r, y0 * r), (a * r, b * r), math.radians(deg), v * factor)
        for v, a, b, x0, y0, deg in table
    )
    return Phantom(ellipses)


def random_phantom(rng: np.random.Generator, geom: Geometry, n_inner: int = 5,
                   scale: HuScale = HuScale()) -> Phantom:
    """A water-filled body ellipse with random inserts, in attenuation units.

    Insert values are drawn as HU offsets from water in ``[-800, 800]`` so the
    images resemble soft tissue, lung and bone contrasts.
    """
    rho = geom.rho
    a = rng.uniform(0.70, 0.85) * rho
    b = rng.uniform(0.55, 0.80) * rho
    body = Ellipse((0.0, 0.0), (a, b), rng.uniform(0, math.pi), scale.mu_water)
    ellipses = [body]
    for _ in range(n_inner):
        for _attempt in range(50):
            ax = rng.uniform(0.08, 0.3) * rho
            by = rng.uniform(0.08, 0.3) * rho
            r = rng.uniform(0.0, 0.45) * rho
            t = rng.uniform(0, 2 * math.pi)
            e = Ellipse((r * math.cos(t), r * math.sin(t)), (ax, by), rng.uniform(0, math.pi),
                        scale.mu_water * rng.uniform(-0.8, 0.8))
            if e.max_radius(256) < 0.9 * min(a, b) + 0.1 * rho:
                ellipses.append(e)
                break
    return Phantom(tuple(ellipses))


def gaussian_blob(geom: Geometry, sigma: float, center: Sequence[float] = (0.0, 0.0),
                  amplitude: float = 1.0, cutoff: float | None = None) -> np.ndarray:
    """Isotropic Gaussian sampled on the grid and cut to the disk.

    With ``cutoff`` set, pixels farther than ``cutoff`` from the centre are
    zeroed, which gives the blob a compact support that can be shifted.
    """
    x1, x2 = geom.pixel_coords()
    r2 = (x1 - center[0]) ** 2 + (x2 - center[1]) ** 2
    img = amplitude * np.exp(-r2 / (2.0 * sigma * sigma))
    if cutoff is not None:
        img[r2 > cutoff * cutoff] = 0.0
    img[~geom.disk_mask()] = 0.0
    return img


def shift_image(img, a: int, b: int) -> np.ndarray:
    """Translate by ``(a, b)`` pixels: ``out[k, l] = img[k - a, l - b]``.

    Raises ``SupportViolation`` if a nonzero pixel would leave the disk.
    """
    img = np.asarray(img, dtype=np.float64)
    n = img.shape[0]
    if img.ndim != 2 or img.shape[1] != n or n % 2 == 0:
        raise InvalidArgument(f"expected a square odd-sized image, got shape {img.shape}")
    a, b = int(a), int(b)
    q = n // 2
    k, l = np.nonzero(img)
    k = k - q + a
    l = l - q + b
    if np.any(k * k + l * l > q * q):
        raise SupportViolation(f"shift ({a}, {b}) moves nonzero pixels outside the reconstruction disk")
    out = np.zeros_like(img)
    out[k + q, l + q] = img[k - a + q, l - b + q]
    return out
