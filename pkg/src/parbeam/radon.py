"""Discrete parallel-beam Radon transform with bilinear line sampling.

The ray for angle ``phi_j`` and bin ``s_l`` is sampled at
``s_l * theta_j + k * ds * theta_perp_j`` for ``|k| <= q + 1``; each sample
bilinearly interpolates the pixel grid and the samples are summed with the
quadrature weight ``ds``.  The map is assembled once per angle as a sparse
row block, which makes ``forward``, its exact transpose and the dense
oracle share one set of weights.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .core import Geometry, check_image, check_sinogram
from .errors import ResourceLimit

log = logging.getLogger(__name__)

__all__ = ["Projector", "DenseOperator", "forward", "backproject", "adjoint_backproject", "materialize",
           "DEFAULT_MATERIALIZE_CAP"]

DEFAULT_MATERIALIZE_CAP = 2 ** 26
# blocks are kept in memory while their combined nonzero count stays below this
_CACHE_NNZ = 6_000_000


def _angle_block(geom: Geometry, j: int) -> sp.csr_matrix:
    q, n = geom.q, geom.n
    phi = j * geom.dphi
    c, s = np.cos(phi), np.sin(phi)
    l = np.arange(-q, q + 1, dtype=np.float64)
    k = np.arange(-(q + 1), q + 2, dtype=np.float64)
    # sample positions in pixel units; theta = (c, s), theta_perp = (-s, c)
    u1 = l[:, None] * c - k[None, :] * s
    u2 = l[:, None] * s + k[None, :] * c
    i0 = np.floor(u1)
    j0 = np.floor(u2)
    f1 = u1 - i0
    f2 = u2 - j0
    i0 = i0.astype(np.int64) + q
    j0 = j0.astype(np.int64) + q
    rows = np.broadcast_to(np.arange(n)[:, None], u1.shape)
    rr, cc, ww = [], [], []
    for di, dj, w in ((0, 0, (1 - f1) * (1 - f2)), (1, 0, f1 * (1 - f2)),
                      (0, 1, (1 - f1) * f2), (1, 1, f1 * f2)):
        ii = i0 + di
        jj = j0 + dj
        ok = (ii >= 0) & (ii < n) & (jj >= 0) & (jj < n) & (w != 0)
        rr.append(rows[ok])
        cc.append(ii[ok] * n + jj[ok])
        ww.append(w[ok])
    block = sp.coo_matrix((np.concatenate(ww) * geom.ds, (np.concatenate(rr), np.concatenate(cc))),
                          shape=(n, n * n)).tocsr()
    block.sum_duplicates()
    block.sort_indices()
    block.eliminate_zeros()
    return block


@dataclass
class Projector:
    """Bilinear line-sampling projector for one geometry.

    ``forward`` maps an ``(N, N)`` image to a ``(p, N)`` sinogram,
    ``adjoint_backproject`` is its exact transpose and ``backproject`` is the
    quadrature backprojection with weight ``2*pi/p`` per angle.
    """

    geometry: Geometry
    _blocks: list | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        g = self.geometry
        est = g.p * g.n * (2 * g.q + 3) * 3
        if est <= _CACHE_NNZ:
            self._blocks = [_angle_block(g, j) for j in range(g.p)]

    @property
    def shape(self) -> tuple[int, int]:
        g = self.geometry
        return (g.p * g.n, g.n * g.n)

    def block(self, j: int) -> sp.csr_matrix:
        if self._blocks is not None:
            return self._blocks[j]
        return _angle_block(self.geometry, j)

    def blocks(self):
        for j in range(self.geometry.p):
            yield self.block(j)

    @property
    def matrix(self) -> sp.csr_matrix:
        """Full sparse system matrix, rows ordered angle-major."""
        return sp.vstack(list(self.blocks()), format="csr")

    def forward(self, img) -> np.ndarray:
        f = check_image(img, self.geometry).ravel()
        return np.stack([b @ f for b in self.blocks()])

    def adjoint_backproject(self, sino) -> np.ndarray:
        g = check_sinogram(sino, self.geometry)
        out = np.zeros(self.geometry.n ** 2)
        for j, b in enumerate(self.blocks()):
            out += b.T @ g[j]
        return out.reshape(self.geometry.image_shape)

    def backproject(self, sino, weight: float | None = None) -> np.ndarray:
        """Quadrature backprojection: ``sum_j w * interp(row_j, <x, theta_j>)``."""
        geom = self.geometry
        g = check_sinogram(sino, geom)
        w = 2 * np.pi / geom.p if weight is None else weight
        return _interp_backproject(g, geom, w)

    # vector interface used by the solvers
    def matvec(self, x) -> np.ndarray:
        return self.forward(np.reshape(x, self.geometry.image_shape)).ravel()

    def rmatvec(self, y) -> np.ndarray:
        return self.adjoint_backproject(np.reshape(y, self.geometry.sino_shape)).ravel()


def _interp_backproject(h: np.ndarray, geom: Geometry, weight: float) -> np.ndarray:
    q, n = geom.q, geom.n
    kk = np.arange(-q, q + 1, dtype=np.float64)
    x1, x2 = kk[:, None], kk[None, :]
    padded = np.zeros((geom.p, n + 2))
    padded[:, 1:-1] = h
    out = np.zeros((n, n))
    for j, (c, s) in enumerate(geom.directions):
        t = x1 * c + x2 * s
        k = np.floor(t)
        nu = t - k
        idx = k.astype(np.int64) + q + 1
        lo = np.clip(idx, 0, n + 1)
        hi = np.clip(idx + 1, 0, n + 1)
        row = padded[j]
        out += weight * ((1 - nu) * row[lo] + nu * row[hi])
    return out


@dataclass
class DenseOperator:
    """Materialised system matrix; rows ``p*(2q+1)``, columns ``N*N``."""

    matrix: np.ndarray
    geometry: Geometry

    def __post_init__(self):
        g = self.geometry
        self._csr_blocks = [sp.csr_matrix(self.matrix[j * g.n:(j + 1) * g.n]) for j in range(g.p)]
        for b in self._csr_blocks:
            b.sort_indices()

    @property
    def shape(self):
        return self.matrix.shape

    def apply(self, img) -> np.ndarray:
        f = check_image(img, self.geometry).ravel()
        return np.stack([b @ f for b in self._csr_blocks])

    def apply_transpose(self, sino) -> np.ndarray:
        g = check_sinogram(sino, self.geometry)
        out = np.zeros(self.geometry.n ** 2)
        for j, b in enumerate(self._csr_blocks):
            out += b.T @ g[j]
        return out.reshape(self.geometry.image_shape)

    def matvec(self, x):
        return self.apply(np.reshape(x, self.geometry.image_shape)).ravel()

    def rmatvec(self, y):
        return self.apply_transpose(np.reshape(y, self.geometry.sino_shape)).ravel()


def forward(proj: Projector, img) -> np.ndarray:
    return proj.forward(img)


def backproject(proj: Projector, sino) -> np.ndarray:
    return proj.backproject(sino)


def adjoint_backproject(proj: Projector, sino) -> np.ndarray:
    return proj.adjoint_backproject(sino)


def materialize(proj: Projector, cap: int = DEFAULT_MATERIALIZE_CAP) -> DenseOperator:
    m, n = proj.shape
    if m * n > cap:
        raise ResourceLimit(f"dense operator would have {m * n} entries, cap is {cap}")
    return DenseOperator(proj.matrix.toarray(), proj.geometry)
