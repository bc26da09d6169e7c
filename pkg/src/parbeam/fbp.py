"""Filtered backprojection for the parallel geometry.

Rows are filtered by direct discrete convolution with band-limited taps and
then backprojected with linear interpolation and weight ``2*pi/p`` per
angle, the half-range trapezoidal rule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Geometry, check_image, check_sinogram, shift_image
from .errors import InvalidArgument
from .radon import Projector, _interp_backproject

__all__ = ["Filter", "FbpPlan", "ramlak_value", "ramlak_taps", "ramlak_filter", "make_plan",
           "filter_projections", "reconstruct_fbp", "shift_invariance_defect", "fbp"]


def ramlak_value(s, omega: float):
    """Continuous Ram-Lak kernel ``Omega^2/(4 pi^2) (sinc(Omega s) - sinc^2(Omega s / 2) / 2)``."""
    if omega <= 0:
        raise InvalidArgument(f"band limit must be positive, got {omega}")
    x = omega * np.asarray(s, dtype=np.float64)
    # np.sinc is the normalised sinc, sin(pi t)/(pi t)
    return omega ** 2 / (4 * math.pi ** 2) * (np.sinc(x / math.pi) - 0.5 * np.sinc(x / (2 * math.pi)) ** 2)


def ramlak_taps(omega: float, L: int) -> np.ndarray:
    """Ram-Lak samples at ``s = pi*l/Omega`` for ``l = -L..L``."""
    if not omega > 0:
        raise InvalidArgument(f"band limit must be positive, got {omega}")
    if L < 1:
        raise InvalidArgument(f"tap half-length must be >= 1, got {L}")
    l = np.arange(-L, L + 1)
    base = np.zeros(2 * L + 1)
    base[L] = 0.25
    odd = (l % 2) != 0
    base[odd] = -1.0 / (math.pi ** 2 * l[odd].astype(np.float64) ** 2)
    return (omega ** 2 / (2 * math.pi ** 2)) * base


@dataclass(frozen=True)
class Filter:
    """Filter taps sampled on the detector grid, ``taps[m + L] = v(m * ds)``."""

    omega: float
    taps: np.ndarray
    kind: str = "ramlak"

    @property
    def half_length(self) -> int:
        return (len(self.taps) - 1) // 2


def ramlak_filter(geom: Geometry, omega: float | None = None) -> Filter:
    omega = math.pi / geom.ds if omega is None else float(omega)
    L = 2 * geom.q
    if math.isclose(omega * geom.ds, math.pi, rel_tol=1e-12):
        taps = ramlak_taps(omega, L)
    else:
        taps = ramlak_value(np.arange(-L, L + 1) * geom.ds, omega)
    return Filter(omega, taps, "ramlak")


@dataclass(frozen=True)
class FbpPlan:
    geometry: Geometry
    filter: Filter

    @property
    def q_ok(self) -> bool:
        return self.geometry.ds <= math.pi / self.filter.omega * (1 + 1e-12)

    @property
    def p_ok(self) -> bool:
        return self.geometry.p >= self.filter.omega * self.geometry.rho * (1 - 1e-12)


def make_plan(geom: Geometry, omega: float | None = None, filt: Filter | None = None) -> FbpPlan:
    return FbpPlan(geom, filt if filt is not None else ramlak_filter(geom, omega))


def filter_projections(sino, filt: Filter, geom: Geometry | None = None, ds: float | None = None) -> np.ndarray:
    """``h[j, k] = ds * sum_l v((k - l) ds) g[j, l]`` for each row independently."""
    g = np.asarray(sino, dtype=np.float64) if geom is None else check_sinogram(sino, geom)
    if g.ndim != 2:
        raise InvalidArgument(f"sinogram must be 2-D, got shape {g.shape}")
    n = g.shape[1]
    L = filt.half_length
    if L < n - 1:
        raise InvalidArgument(f"filter half-length {L} does not cover the detector span {n - 1}")
    if ds is None:
        if geom is None:
            raise InvalidArgument("either geom or ds is required")
        ds = geom.ds
    k = np.arange(n)
    toeplitz = filt.taps[L + k[:, None] - k[None, :]]
    return ds * (g @ toeplitz.T)


def reconstruct_fbp(sino, plan: FbpPlan) -> np.ndarray:
    geom = plan.geometry
    g = check_sinogram(sino, geom)
    h = filter_projections(g, plan.filter, geom)
    img = _interp_backproject(h, geom, 2 * math.pi / geom.p)
    img[~geom.disk_mask()] = 0.0
    return img


def fbp(sino, geom: Geometry, omega: float | None = None) -> np.ndarray:
    return reconstruct_fbp(sino, make_plan(geom, omega))


def _translate(img, a, b):
    out = np.zeros_like(img)
    n = img.shape[0]
    src = img[max(0, -a):n - max(0, a), max(0, -b):n - max(0, b)]
    out[max(0, a):max(0, a) + src.shape[0], max(0, b):max(0, b) + src.shape[1]] = src
    return out


def shift_invariance_defect(img, a: int, b: int, geom: Geometry, op=None) -> float:
    """Relative defect ``||W(L f) - L(W f)|| / ||W f||`` of a translation ``L``.

    ``op`` defaults to filtered backprojection of the forward projection.  The
    comparison is restricted to pixels that lie inside the disk both before
    and after the shift, since ``W f`` is not compactly supported.
    """
    f = check_image(img, geom)
    if op is None:
        proj = Projector(geom)
        plan = make_plan(geom)
        op = lambda x: reconstruct_fbp(proj.forward(x), plan)  # noqa: E731
    shifted = shift_image(f, a, b)
    wf = op(f)
    lhs = op(shifted)
    rhs = _translate(wf, a, b)
    mask = geom.disk_mask() & _translate(geom.disk_mask().astype(float), a, b).astype(bool)
    denom = np.linalg.norm(wf[mask])
    if denom == 0:
        return 0.0
    return float(np.linalg.norm((lhs - rhs)[mask]) / denom)
