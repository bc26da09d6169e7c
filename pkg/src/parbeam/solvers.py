"""Algebraic reconstruction: Landweber, Kaczmarz, Cimmino and their oracles.

All solvers work on flattened vectors through any object exposing
``shape``, ``matvec`` and ``rmatvec`` (a :class:`~parbeam.radon.Projector`,
a dense or sparse matrix).  Row-action methods additionally need explicit
rows and accept matrices or objects with a ``matrix`` attribute.
"""
from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .core import HuScale, mu_to_hu
from .errors import InvalidArgument, ResourceLimit
from .io import write_rows

log = logging.getLogger(__name__)

__all__ = [
    "as_operator", "LinearProblem", "IterationTrace", "PowerResult", "SvdOracle",
    "power_method_norm", "landweber", "landweber_step", "kaczmarz", "cimmino", "jacobi_svd",
    "svd_oracle", "semi_convergence_sweep", "SweepResult", "InconsistentRowWarning",
]

SVD_CAP = 4096
TRACE_HEADER = ("k", "residual", "error", "mae_hu", "ms")


class InconsistentRowWarning(UserWarning):
    pass


class _MatrixOp:
    def __init__(self, a):
        self.a = a
        self.shape = a.shape

    def matvec(self, x):
        return self.a @ x

    def rmatvec(self, y):
        return self.a.T @ y


def as_operator(op):
    if isinstance(op, np.ndarray) or sp.issparse(op):
        return _MatrixOp(op)
    if hasattr(op, "matvec") and hasattr(op, "rmatvec"):
        return op
    raise InvalidArgument(f"cannot use {type(op).__name__} as a linear operator")


def _rows_of(op):
    if isinstance(op, np.ndarray) or sp.issparse(op):
        return op
    if isinstance(op, _MatrixOp):
        return op.a
    m = getattr(op, "matrix", None)
    if m is None:
        raise InvalidArgument(f"{type(op).__name__} does not expose explicit rows")
    return m


@dataclass
class LinearProblem:
    """``op f = g`` with optional ground truth and starting guess (flat vectors)."""

    op: object
    g: np.ndarray
    truth: np.ndarray | None = None
    f0: np.ndarray | None = None
    image_shape: tuple | None = None
    check_adjoint: bool = True

    def __post_init__(self):
        self.op = as_operator(self.op)
        m, n = self.op.shape
        self.g = np.asarray(self.g, dtype=np.float64).ravel()
        if self.g.size != m:
            raise InvalidArgument(f"data has {self.g.size} entries, operator has {m} rows")
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=np.float64).ravel()
            if self.truth.size != n:
                raise InvalidArgument("ground truth size does not match operator columns")
        self.f0 = np.zeros(n) if self.f0 is None else np.asarray(self.f0, dtype=np.float64).ravel().copy()
        if self.f0.size != n:
            raise InvalidArgument("initial guess size does not match operator columns")
        if self.image_shape is None:
            geom = getattr(self.op, "geometry", None)
            self.image_shape = geom.image_shape if geom is not None else (n,)
        if self.check_adjoint:
            rng = np.random.default_rng(12345)
            for _ in range(3):
                x = rng.standard_normal(n)
                y = rng.standard_normal(m)
                lhs = float(self.op.matvec(x) @ y)
                rhs = float(x @ self.op.rmatvec(y))
                scale = np.linalg.norm(self.op.matvec(x)) * np.linalg.norm(y) + np.linalg.norm(x) * np.linalg.norm(
                    self.op.rmatvec(y))
                if abs(lhs - rhs) > 1e-8 * max(scale, 1e-300):
                    raise InvalidArgument(f"operator pair is not adjoint: <Ax,y>={lhs}, <x,A*y>={rhs}")

    @property
    def n(self) -> int:
        return self.op.shape[1]

    def residual(self, f) -> float:
        return float(np.linalg.norm(self.op.matvec(f) - self.g))

    def shaped(self, f):
        return np.reshape(f, self.image_shape)


@dataclass
class IterationTrace:
    hu_scale: HuScale | None = None
    records: list = field(default_factory=list)
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    def log(self, k: int, problem: LinearProblem, f: np.ndarray, residual: float | None = None):
        if self.records and k <= self.records[-1][0]:
            raise InvalidArgument("trace iteration counter must increase")
        res = problem.residual(f) if residual is None else residual
        err = mae = float("nan")
        if problem.truth is not None:
            err = float(np.linalg.norm(f - problem.truth))
            if self.hu_scale is not None:
                mae = float(np.mean(np.abs(mu_to_hu(f, self.hu_scale) - mu_to_hu(problem.truth, self.hu_scale))))
        ms = (time.perf_counter() - self._t0) * 1e3
        self.records.append((k, res, err, mae, ms))

    @property
    def k(self):
        return np.array([r[0] for r in self.records])

    @property
    def residuals(self):
        return np.array([r[1] for r in self.records])

    @property
    def errors(self):
        return np.array([r[2] for r in self.records])

    def to_csv(self, path):
        write_rows(path, TRACE_HEADER, self.records)


# --------------------------------------------------------------------------
# spectral norm
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PowerResult:
    sigma: float
    increment: float
    zero: bool = False


def power_method_norm(op, iters: int = 200, seed: int = 0) -> PowerResult:
    """Largest singular value via power iteration on ``A^T A``."""
    if iters < 1:
        raise InvalidArgument("power method needs at least one iteration")
    op = as_operator(op)
    x = np.random.default_rng(seed).standard_normal(op.shape[1])
    x /= np.linalg.norm(x)
    lam = 0.0
    inc = float("inf")
    for _ in range(iters):
        y = op.rmatvec(op.matvec(x))
        new = float(np.linalg.norm(y))
        if new == 0.0:
            return PowerResult(0.0, 0.0, True)
        x = y / new
        inc = abs(new - lam) / new
        lam = new
    return PowerResult(math.sqrt(lam), inc)


def _sigma_max(problem: LinearProblem, sigma_max):
    if sigma_max is not None:
        return float(sigma_max)
    return power_method_norm(problem.op, 200, 0).sigma


def auto_omega(sigma_max: float, fraction: float = 0.9) -> float:
    """``fraction * 2 / sigma_max**2``."""
    return fraction * 2.0 / sigma_max ** 2


# --------------------------------------------------------------------------
# Landweber
# --------------------------------------------------------------------------

def landweber_step(op, f, g, omega):
    return f + omega * op.rmatvec(g - op.matvec(f))


def landweber(problem: LinearProblem, omega: float | str = "auto", iters: int = 100, trace: bool = True,
              override: bool = False, sigma_max: float | None = None, hu_scale: HuScale | None = None,
              callback: Callable | None = None):
    """Landweber iteration ``f <- f + omega A^T (g - A f)``.

    ``omega`` must lie in ``(0, 2/sigma_max^2)`` unless ``override`` is set.
    Returns ``(image, trace)``; the trace is ``None`` when disabled.
    """
    if omega == "auto":
        omega = auto_omega(_sigma_max(problem, sigma_max))
        log.info("landweber: omega set to %.6g (0.9 * 2 / sigma_max^2)", omega)
    omega = float(omega)
    if not override:
        smax = _sigma_max(problem, sigma_max)
        if not 0.0 < omega < 2.0 / smax ** 2:
            raise InvalidArgument(f"omega={omega} outside (0, 2/sigma_max^2) = (0, {2.0 / smax ** 2})")
    if iters < 0:
        raise InvalidArgument("iters must be >= 0")
    op, g = problem.op, problem.g
    f = problem.f0.copy()
    tr = IterationTrace(hu_scale) if trace else None
    if tr is not None:
        tr.log(0, problem, f)
    for k in range(1, iters + 1):
        f = landweber_step(op, f, g, omega)
        if tr is not None:
            tr.log(k, problem, f)
        if callback is not None:
            callback(k, f)
    return problem.shaped(f), tr


# --------------------------------------------------------------------------
# Kaczmarz / Cimmino
# --------------------------------------------------------------------------

def _normalise_blocks(blocks, m):
    if blocks is None:
        return [np.array([i]) for i in range(m)]
    if isinstance(blocks, str):
        raise InvalidArgument(f"unknown block spec {blocks!r}")
    out = []
    for b in blocks:
        b = np.asarray(b, dtype=np.int64).ravel()
        if b.size == 0:
            raise InvalidArgument("empty block")
        out.append(b)
    seen = np.concatenate(out)
    if seen.size != m or np.unique(seen).size != m or seen.min() < 0 or seen.max() >= m:
        raise InvalidArgument("blocks must partition the operator rows")
    return out


def angle_blocks(geom) -> list:
    """One block per projection angle."""
    return [np.arange(j * geom.n, (j + 1) * geom.n) for j in range(geom.p)]


class _Block:
    """Row block with its ``C_j^{-1}`` application."""

    def __init__(self, rows, a, mode, col_mass=None):
        self.rows = rows
        self.a = a[rows] if not sp.issparse(a) else a[rows].tocsr()
        dense = self.a.toarray() if sp.issparse(self.a) else np.asarray(self.a)
        self.zero = np.linalg.norm(dense, axis=1) == 0
        if mode == "exact":
            if len(rows) == 1:
                nrm = float(dense[0] @ dense[0])
                self.cinv = lambda r: r / nrm if nrm > 0 else np.zeros_like(r)
            else:
                gram = dense @ dense.T
                pinv = np.linalg.pinv(gram)
                self.cinv = lambda r: pinv @ r
        elif mode == "bound":
            gamma = 1.05 * power_method_norm(self.a, 200, 0).sigma ** 2
            self.cinv = (lambda r: r / gamma) if gamma > 0 else (lambda r: np.zeros_like(r))
            self.gamma = gamma
        elif mode == "rowsum":
            rs = np.abs(dense).sum(axis=1) * col_mass
            w = np.divide(1.0, rs, out=np.zeros_like(rs), where=rs > 0)
            self.cinv = lambda r: w * r
        else:
            raise InvalidArgument(f"unknown C_j mode {mode!r}")

    def apply(self, f):
        return self.a @ f

    def adjoint(self, y):
        return self.a.T @ y


def _prepare(problem, blocks, mode):
    a = _rows_of(problem.op)
    m = a.shape[0]
    blocks = _normalise_blocks(blocks, m)
    col_mass = None
    if mode == "rowsum":
        col_mass = float(np.abs(a).sum(axis=0).max()) if not sp.issparse(a) else float(
            abs(a).sum(axis=0).max())
    return [_Block(b, a, mode, col_mass) for b in blocks]


def _flag_inconsistent(block, g_j):
    bad = block.zero & (g_j != 0)
    if np.any(bad):
        warnings.warn(f"rows {block.rows[bad].tolist()} are zero but carry nonzero data; skipped",
                      InconsistentRowWarning, stacklevel=3)
    return bad


def kaczmarz(problem: LinearProblem, blocks=None, omega: float = 1.0, sweeps: int = 10, mode: str = "exact",
             trace: bool = True, override: bool = False, hu_scale: HuScale | None = None):
    """Sequential block projections ``f <- f + omega A_j^T C_j^{-1} (g_j - A_j f)``.

    ``blocks`` defaults to single rows.  ``mode`` selects ``C_j``: ``exact``
    (``A_j A_j^T``), ``bound`` (``gamma_j I`` with ``gamma_j`` a 5% padded
    power-method bound) or ``rowsum`` (diagonal row sums, SART-like).
    """
    if not override and not 0.0 <= omega < 2.0:
        raise InvalidArgument(f"relaxation omega={omega} outside [0, 2)")
    blks = _prepare(problem, blocks, mode)
    g = problem.g
    f = problem.f0.copy()
    tr = IterationTrace(hu_scale) if trace else None
    if tr is not None:
        tr.log(0, problem, f)
    skipped = [_flag_inconsistent(b, g[b.rows]) for b in blks]
    for k in range(1, sweeps + 1):
        for b, bad in zip(blks, skipped):
            if bad.all():
                continue
            r = g[b.rows] - b.apply(f)
            r[b.zero] = 0.0
            f = f + omega * b.adjoint(b.cinv(r))
        if tr is not None:
            tr.log(k, problem, f)
    return problem.shaped(f), tr


def cimmino(problem: LinearProblem, blocks=None, omega: float = 1.0, iters: int = 10, mode: str = "exact",
            trace: bool = True, override: bool = False, hu_scale: HuScale | None = None,
            gamma: float | None = None):
    """Simultaneous update ``f <- f + omega sum_j A_j^T C_j^{-1} (g_j - A_j f)``.

    Blocks are summed in ascending order of their first row, so the result
    does not depend on the order in which blocks are listed.  A single
    block with ``C = gamma I`` (pass ``gamma``) runs exactly as Landweber with
    step ``omega / gamma``.
    """
    if not override and not 0.0 <= omega < 2.0:
        raise InvalidArgument(f"relaxation omega={omega} outside [0, 2)")
    m = problem.op.shape[0]
    g = problem.g
    f = problem.f0.copy()
    tr = IterationTrace(hu_scale) if trace else None
    if tr is not None:
        tr.log(0, problem, f)
    blist = _normalise_blocks(blocks, m)
    if gamma is not None:
        if len(blist) != 1:
            raise InvalidArgument("a scalar gamma is only meaningful for a single block")
        step = omega / gamma
        for k in range(1, iters + 1):
            f = landweber_step(problem.op, f, g, step)
            if tr is not None:
                tr.log(k, problem, f)
        return problem.shaped(f), tr
    blks = sorted(_prepare(problem, blist, mode), key=lambda b: int(b.rows.min()))
    for b in blks:
        _flag_inconsistent(b, g[b.rows])
    for k in range(1, iters + 1):
        upd = np.zeros_like(f)
        for b in blks:
            r = g[b.rows] - b.apply(f)
            r[b.zero] = 0.0
            upd += b.adjoint(b.cinv(r))
        f = f + omega * upd
        if tr is not None:
            tr.log(k, problem, f)
    return problem.shaped(f), tr


# --------------------------------------------------------------------------
# SVD oracle
# --------------------------------------------------------------------------

def jacobi_svd(a, tol: float = 1e-15, max_sweeps: int = 80):
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns ``(U, s, V)`` with ``a = U diag(s) V^T``, ``s`` descending and
    zero singular values dropped.
    """
    a = np.array(a, dtype=np.float64)
    transposed = a.shape[1] > a.shape[0]
    if transposed:
        a = a.T
    m, n = a.shape
    w = a.copy()
    v = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                wi, wj = w[:, i], w[:, j]
                alpha = wi @ wi
                beta = wj @ wj
                gamma = wi @ wj
                if abs(gamma) <= tol * math.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                w[:, i], w[:, j] = c * wi - s * wj, s * wi + c * wj
                vi, vj = v[:, i].copy(), v[:, j]
                v[:, i], v[:, j] = c * vi - s * vj, s * vi + c * vj
        if not rotated:
            break
    sig = np.linalg.norm(w, axis=0)
    order = np.argsort(-sig, kind="stable")
    sig = sig[order]
    w = w[:, order]
    v = v[:, order]
    smax = sig[0] if sig.size else 0.0
    keep = sig > max(m, n) * np.finfo(float).eps * smax
    sig, w, v = sig[keep], w[:, keep], v[:, keep]
    u = w / sig
    if transposed:
        return v, sig, u
    return u, sig, v


@dataclass
class SvdOracle:
    U: np.ndarray
    s: np.ndarray
    V: np.ndarray

    @property
    def rank(self) -> int:
        return self.s.size

    def proj_support(self, x):
        return self.V @ (self.V.T @ x)

    def proj_ker(self, x):
        return x - self.proj_support(x)

    def pinv_apply(self, g):
        return self.V @ ((self.U.T @ g) / self.s)

    def landweber_iterate(self, g, omega: float, k: int, f0=None):
        """Closed form ``sum_i (1 - (1 - omega s_i^2)^k) <u_i, g>/s_i v_i`` plus the decayed start."""
        phi = 1.0 - (1.0 - omega * self.s ** 2) ** k
        out = self.V @ (phi * (self.U.T @ g) / self.s)
        if f0 is not None:
            decay = (1.0 - omega * self.s ** 2) ** k
            out = out + self.V @ (decay * (self.V.T @ f0)) + self.proj_ker(f0)
        return out


def svd_oracle(dense, cap: int = SVD_CAP) -> SvdOracle:
    a = dense.matrix if hasattr(dense, "matrix") and not sp.issparse(dense) else dense
    if sp.issparse(a):
        a = a.toarray()
    a = np.asarray(a, dtype=np.float64)
    if max(a.shape) > cap:
        raise ResourceLimit(f"SVD oracle limited to {cap}x{cap}, got {a.shape}")
    return SvdOracle(*jacobi_svd(a))


# --------------------------------------------------------------------------
# semi-convergence
# --------------------------------------------------------------------------

@dataclass
class SweepResult:
    mean_error: np.ndarray
    std_error: np.ndarray
    mean_residual: np.ndarray
    trial_argmins: np.ndarray
    snr_db: np.ndarray

    @property
    def iters(self) -> int:
        return self.mean_error.size

    @property
    def argmin(self) -> int:
        return int(np.argmin(self.mean_error)) + 1

    def interior_fraction(self) -> float:
        a = self.trial_argmins
        return float(np.mean((a > 1) & (a < self.iters)))

    def rows(self):
        return [(k + 1, float(self.mean_error[k]), float(self.std_error[k]), float(self.mean_residual[k]))
                for k in range(self.iters)]

    def to_csv(self, path):
        write_rows(path, ("k", "mean_error", "std_error", "mean_residual"), self.rows())


def semi_convergence_sweep(truth, op, clean_sino, iters: int, trials: int, noise=None, method: str = "landweber",
                           omega: float | str = "auto", seed: int = 0, sigma_max: float | None = None,
                           relative: bool = True) -> SweepResult:
    """Per-iteration error statistics of an ART method on noisy data.

    ``noise`` is a callable ``(clean, rng) -> noisy`` (see
    :mod:`parbeam.simulate`); ``None`` runs on clean data.  Errors are
    ``||f_k - truth|| / ||truth||`` when ``relative`` is set.
    """
    truth = np.asarray(truth, dtype=np.float64).ravel()
    clean = np.asarray(clean_sino, dtype=np.float64)
    op = as_operator(op)
    if sigma_max is None:
        sigma_max = power_method_norm(op, 200, 0).sigma
    if omega == "auto":
        omega = auto_omega(sigma_max)
    errs = np.zeros((trials, iters))
    ress = np.zeros((trials, iters))
    snrs = np.zeros(trials)
    norm = np.linalg.norm(truth) if relative else 1.0
    ss = np.random.SeedSequence(seed)
    for t, child in enumerate(ss.spawn(trials)):
        rng = np.random.default_rng(child)
        noisy = clean if noise is None else noise(clean, rng)
        snrs[t] = _snr(clean, noisy)
        problem = LinearProblem(op, noisy, truth=truth, check_adjoint=False)
        if method == "landweber":
            _, tr = landweber(problem, omega, iters, sigma_max=sigma_max)
        elif method == "cimmino":
            _, tr = cimmino(problem, omega=min(float(omega) * sigma_max ** 2 / 1.05, 1.9), iters=iters,
                            mode="rowsum")
        elif method == "kaczmarz":
            _, tr = kaczmarz(problem, omega=0.5, sweeps=iters)
        else:
            raise InvalidArgument(f"unknown method {method!r}")
        errs[t] = tr.errors[1:] / norm
        ress[t] = tr.residuals[1:]
    return SweepResult(errs.mean(axis=0), errs.std(axis=0), ress.mean(axis=0),
                       np.argmin(errs, axis=1) + 1, snrs)


def _snr(clean, noisy):
    d = np.linalg.norm(np.ravel(clean) - np.ravel(noisy))
    if d == 0:
        return 300.0
    return float(min(300.0, 20 * np.log10(np.linalg.norm(clean) / d)))
