"""Sparsity functionals and the classical regularised reconstructions.

The discrete TV field of an ``M x N`` image is the ``(M-1) x (N-1)`` array of
forward-difference magnitudes.  Besides the functionals this module holds
the dual projected-gradient TV prox, a FISTA driver for TV-regularised least
squares and the three-step NLTV/RWL1 scheme.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import InvalidArgument
from .solvers import IterationTrace, LinearProblem, power_method_norm

log = logging.getLogger(__name__)

__all__ = [
    "tv_map", "tv_l1", "tv_map_vjp", "log_sparsity", "log_sparsity_grad", "rwl1", "NltvConfig",
    "nltv_weights", "nltv_norm", "prox_tv", "prox_objective", "fista_tv", "accelerated_landweber",
    "nltv_scheme",
]


def _check_2d(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 2:
        raise InvalidArgument(f"TV needs an image of at least 2x2, got shape {img.shape}")
    return img


def _diffs(x):
    d1 = x[:-1, :-1] - x[1:, :-1]
    d2 = x[:-1, :-1] - x[:-1, 1:]
    return d1, d2


def tv_map(img) -> np.ndarray:
    x = _check_2d(img)
    d1, d2 = _diffs(x)
    return np.sqrt(d1 * d1 + d2 * d2)


def tv_l1(img) -> float:
    return float(tv_map(img).sum())


def tv_map_vjp(img, upstream) -> np.ndarray:
    """Gradient of ``sum(upstream * tv_map(img))``; zero-magnitude entries use subgradient 0."""
    x = _check_2d(img)
    d1, d2 = _diffs(x)
    mag = np.sqrt(d1 * d1 + d2 * d2)
    scale = np.divide(upstream, mag, out=np.zeros_like(mag), where=mag > 0)
    a, b = scale * d1, scale * d2
    out = np.zeros_like(x)
    out[:-1, :-1] += a + b
    out[1:, :-1] -= a
    out[:-1, 1:] -= b
    return out


def log_sparsity(img, eps: float) -> float:
    """Mean of ``ln(TV_ij + eps)`` over the TV field."""
    if not eps > 0:
        raise InvalidArgument(f"eps must be positive, got {eps}")
    return float(np.mean(np.log(tv_map(img) + eps)))


def log_sparsity_grad(img, eps: float) -> np.ndarray:
    field = tv_map(img)
    return tv_map_vjp(img, 1.0 / (field.size * (field + eps)))


def rwl1(x, delta: float) -> float:
    """Reweighted-L1 surrogate ``sum x_i / (x_i + delta)`` of the L0 count."""
    x = np.asarray(x, dtype=np.float64)
    if not delta > 0:
        raise InvalidArgument(f"delta must be positive, got {delta}")
    if np.any(x < 0):
        raise InvalidArgument("reweighted L1 is defined for nonnegative entries")
    return float(np.sum(x / (x + delta)))


# --------------------------------------------------------------------------
# non-local TV
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NltvConfig:
    window: int = 2        # w: search window is (2w+1)^2
    patch: int = 1         # a: patch is (2a+1)^2
    h0: float = 0.05
    eps: float = 1e-8

    def __post_init__(self):
        if self.window < 1 or self.patch < 0 or not self.h0 > 0 or not self.eps > 0:
            raise InvalidArgument(f"invalid NLTV configuration {self}")

    def offsets(self):
        w = self.window
        return [(di, dj) for di in range(-w, w + 1) for dj in range(-w, w + 1) if (di, dj) != (0, 0)]

    def kernel(self) -> np.ndarray:
        a = self.patch
        k = np.arange(-a, a + 1, dtype=np.float64)
        sd = (2 * a + 1) / 4.0
        g = np.exp(-k * k / (2 * sd * sd))
        return g / g.sum()


def _shifted(x, di, dj):
    """``x[i + di, j + dj]`` with a validity mask."""
    m, n = x.shape
    out = np.zeros_like(x)
    valid = np.zeros(x.shape, dtype=bool)
    i0, i1 = max(0, -di), min(m, m - di)
    j0, j1 = max(0, -dj), min(n, n - dj)
    out[i0:i1, j0:j1] = x[i0 + di:i1 + di, j0 + dj:j1 + dj]
    valid[i0:i1, j0:j1] = True
    return out, valid


def nltv_weights(img, cfg: NltvConfig):
    """Patch-similarity weights, shape ``(len(offsets), M, N)``, zero for out-of-image neighbours."""
    u = np.asarray(img, dtype=np.float64)
    if u.ndim != 2 or 2 * cfg.window + 1 > min(u.shape) or 2 * cfg.patch + 1 > min(u.shape):
        raise InvalidArgument(f"NLTV window/patch does not fit an image of shape {u.shape}")
    pad = cfg.patch
    up = np.pad(u, pad, mode="reflect") if pad else u
    g = cfg.kernel()
    weights = []
    for di, dj in cfg.offsets():
        sh, _ = _shifted(np.pad(u, pad + cfg.window, mode="reflect"), di, dj)
        sh = sh[cfg.window:cfg.window + up.shape[0], cfg.window:cfg.window + up.shape[1]]
        d2 = (up - sh) ** 2
        if pad:
            d2 = correlate1d(correlate1d(d2, g, axis=0, mode="nearest"), g, axis=1, mode="nearest")
            d2 = d2[pad:-pad, pad:-pad]
        w = np.exp(-d2 / (2.0 * cfg.h0 ** 2))
        _, valid = _shifted(u, di, dj)
        weights.append(np.where(valid, w, 0.0))
    return np.stack(weights)


def _nltv_mag(u, weights, cfg):
    acc = np.full(u.shape, cfg.eps)
    for w, (di, dj) in zip(weights, cfg.offsets()):
        sh, _ = _shifted(u, di, dj)
        acc += w * (sh - u) ** 2
    return np.sqrt(acc)


def nltv_norm(img, cfg: NltvConfig, weights=None) -> float:
    u = np.asarray(img, dtype=np.float64)
    if weights is None:
        weights = nltv_weights(u, cfg)
    return float(_nltv_mag(u, weights, cfg).sum())


def _nltv_rwl1_value_grad(u, weights, cfg, delta):
    mag = _nltv_mag(u, weights, cfg)
    value = float(np.sum(mag / (mag + delta)))
    coef = delta / (mag + delta) ** 2 / mag
    grad = np.zeros_like(u)
    for w, (di, dj) in zip(weights, cfg.offsets()):
        sh, _ = _shifted(u, di, dj)
        t = coef * w * (sh - u)
        grad -= t
        # neighbour j = i + d receives +t at its own location
        back, _ = _shifted(t, -di, -dj)
        grad += back
    return value, grad


# --------------------------------------------------------------------------
# TV prox and FISTA
# --------------------------------------------------------------------------

def _grad_op(u):
    d1, d2 = _diffs(u)
    return np.stack([d1, d2])


def _grad_adj(p):
    a, b = p
    m, n = a.shape[0] + 1, a.shape[1] + 1
    out = np.zeros((m, n))
    out[:-1, :-1] += a + b
    out[1:, :-1] -= a
    out[:-1, 1:] -= b
    return out


def prox_objective(u, x, t) -> float:
    return tv_l1(u) + 0.5 / t * float(np.sum((u - x) ** 2))


def prox_tv(img, t: float, inner_iters: int = 30) -> np.ndarray:
    """Approximate ``argmin_u TV_l1(u) + ||u - x||^2 / (2t)``.

    Fast dual gradient projection with step ``1/(8t)``; the best primal
    iterate seen (including ``u = x``) is returned, so the objective never
    exceeds its value at the input.
    """
    x = _check_2d(img)
    if not t > 0:
        raise InvalidArgument(f"prox scale must be positive, got {t}")
    p = np.zeros((2, x.shape[0] - 1, x.shape[1] - 1))
    r = p.copy()
    s = 1.0
    best, best_val = x, prox_objective(x, x, t)
    for _ in range(inner_iters):
        u = x - t * _grad_adj(r)
        pn = r + _grad_op(u) / (8.0 * t)
        nrm = np.maximum(1.0, np.sqrt(pn[0] ** 2 + pn[1] ** 2))
        pn = pn / nrm
        sn = (1 + math.sqrt(1 + 4 * s * s)) / 2
        r = pn + (s - 1) / sn * (pn - p)
        p, s = pn, sn
        u = x - t * _grad_adj(p)
        val = prox_objective(u, x, t)
        if val < best_val:
            best, best_val = u, val
    return best


def _composite(problem, f, lam):
    r = problem.op.matvec(f) - problem.g
    return 0.5 * float(r @ r) + lam * tv_l1(problem.shaped(f))


def fista_tv(problem: LinearProblem, lam: float, iters: int = 100, step: float | None = None,
             inner_iters: int = 30, override: bool = False, sigma_max: float | None = None):
    """FISTA for ``0.5 ||A f - g||^2 + lam TV_l1(f)``.

    Returns ``(image, trace, objective values)``; the trace's ``residual``
    column is the data residual and the objective list has one value per
    iterate, starting with the initial guess.
    """
    if lam < 0:
        raise InvalidArgument("lambda must be >= 0")
    if sigma_max is None:
        sigma_max = power_method_norm(problem.op, 200, 0).sigma
    limit = 1.0 / sigma_max ** 2
    if step is None:
        step = limit
    elif step > limit * (1 + 1e-12) and not override:
        raise InvalidArgument(f"step {step} exceeds 1/sigma_max^2 = {limit}")
    op, g = problem.op, problem.g
    x = problem.f0.copy()
    y = x.copy()
    s = 1.0
    tr = IterationTrace()
    tr.log(0, problem, x)
    objective = [_composite(problem, x, lam)]
    for k in range(1, iters + 1):
        z = y - step * op.rmatvec(op.matvec(y) - g)
        if lam > 0:
            xn = prox_tv(problem.shaped(z), lam * step, inner_iters).ravel()
        else:
            xn = z
        sn = (1 + math.sqrt(1 + 4 * s * s)) / 2
        y = xn + ((s - 1) / sn) * (xn - x)
        x, s = xn, sn
        tr.log(k, problem, x)
        objective.append(_composite(problem, x, lam))
    return problem.shaped(x), tr, np.array(objective)


def accelerated_landweber(problem: LinearProblem, step: float, iters: int):
    """Landweber with Nesterov momentum (the ``lam = 0`` case of :func:`fista_tv`)."""
    op, g = problem.op, problem.g
    x = problem.f0.copy()
    y = x.copy()
    s = 1.0
    for _ in range(iters):
        xn = y - step * op.rmatvec(op.matvec(y) - g)
        sn = (1 + math.sqrt(1 + 4 * s * s)) / 2
        y = xn + ((s - 1) / sn) * (xn - x)
        x, s = xn, sn
    return problem.shaped(x)


# --------------------------------------------------------------------------
# NLTV three-step scheme
# --------------------------------------------------------------------------

def _nltv_prox(f, cfg, gamma, delta, steps, step):
    """Backtracking gradient descent on ``gamma RWL1(NLTV(u)) + 0.5 ||u - f||^2``.

    Weights are frozen at ``f``.  Returns ``(u, objective per sub-step)``.
    """
    weights = nltv_weights(f, cfg)
    u = f.copy()
    val, grad = _nltv_rwl1_value_grad(u, weights, cfg, delta)
    obj = gamma * val
    values = [obj]
    for _ in range(steps):
        full = gamma * grad + (u - f)
        h = step
        while True:
            cand = u - h * full
            cval, cgrad = _nltv_rwl1_value_grad(cand, weights, cfg, delta)
            cobj = gamma * cval + 0.5 * float(np.sum((cand - f) ** 2))
            if cobj <= obj - 1e-4 * h * float(np.sum(full * full)) or h < 1e-12:
                break
            h *= 0.5
        if cobj <= obj:
            u, val, grad, obj = cand, cval, cgrad, cobj
        values.append(obj)
    return u, values


def nltv_scheme(problem: LinearProblem, cfg: NltvConfig, gamma: float, outer_iters: int = 20,
                omega: float | None = None, delta: float = 0.02, prox_steps: int = 5, prox_step: float = 1e-2,
                sigma_max: float | None = None, art_steps: int = 1):
    """Alternate an ART update, an RWL1-NLTV prox and a data-residual refresh.

    The ART step uses ``omega A^T`` in place of the pseudo-inverse.  Returns
    ``(image, trace, prox objective values per outer iteration)``.
    """
    if omega is None:
        smax = power_method_norm(problem.op, 200, 0).sigma if sigma_max is None else sigma_max
        omega = 1.0 / smax ** 2
    op, g = problem.op, problem.g
    f = problem.f0.copy()
    u = f.copy()
    gk = g.copy()
    tr = IterationTrace()
    tr.log(0, problem, u)
    prox_log = []
    for k in range(1, outer_iters + 1):
        f = u
        for _ in range(art_steps):
            f = f + omega * op.rmatvec(gk - op.matvec(f))
        if gamma > 0:
            uu, values = _nltv_prox(problem.shaped(f), cfg, gamma, delta, prox_steps, prox_step)
            u = uu.ravel()
        else:
            u, values = f.copy(), []
        prox_log.append(values)
        gk = gk + (g - op.matvec(u))
        tr.log(k, problem, u)
    return problem.shaped(u), tr, prox_log
