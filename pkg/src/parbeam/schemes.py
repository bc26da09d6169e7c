"""Learned reconstruction schemes.

Postprocess scheme: a residual network maps an FBP input to the
reconstruction and is trained on a loss mixing image fidelity, TV of the
error, Radon-domain consistency, log-sparsity and an L2 kernel penalty.

Unrolled scheme: ``f <- F(L^s f)`` with ``s`` Landweber steps ``L`` between
network calls, trained on amplified per-depth fidelity, a support-leakage
penalty ``|R C(.)|^2`` and a directional input-gradient penalty computed by
forward-mode differentiation along ``(f_bar - f) / |f_bar - f|``.

All ``|.|`` mean terms are means over entries, not sums.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import Geometry, HuScale
from .errors import InvalidArgument, TrainingDiverged
from .io import write_rows
from .metrics import mae_hu, rel_error, ssim
from .nn import Conv1x1, Conv3x3, Network, TConv2x2s2, adam_init, adam_step, piecewise_lr, save_checkpoint
from .radon import Projector
from .regularizers import log_sparsity, log_sparsity_grad, tv_map, tv_map_vjp
from .solvers import auto_omega, power_method_norm

log = logging.getLogger(__name__)

__all__ = ["PostLossConfig", "UnrolledConfig", "SchemeState", "LossValue", "post_loss", "kernel_mask",
           "kernel_term", "apply_net", "train_postprocess", "LandweberMap", "unrolled_apply", "unrolled_loss",
           "train_unrolled", "semi_convergence_eval", "lipschitz_probe", "support_leakage", "POST_LOG_HEADER",
           "unrolled_log_header", "EVAL_HEADER", "evaluate_post", "train_single_sample", "depth_curve"]

POST_LOG_HEADER = ("step", "epoch", "total", "fid", "tvdiff", "radon", "logsp", "kernel")
EVAL_HEADER = ("depth", "mae_hu", "rel_error", "ssim")


def unrolled_log_header(depth: int):
    return ("step", "epoch", "total") + tuple(f"fid_k{k}" for k in range(depth)) + ("support", "inputgrad")


# --------------------------------------------------------------------------
# network plumbing
# --------------------------------------------------------------------------

def _padded_size(n, net: Network):
    m = 2 ** int(net.config.get("levels", 0))
    return int(math.ceil(n / m) * m)


def _pad(imgs, size):
    b, n, _ = imgs.shape
    out = np.zeros((b, 1, size, size))
    out[:, 0, :n, :n] = imgs
    return out


def apply_net(net: Network, imgs, tangents=None, train=False):
    """Run ``net`` on a stack of ``(B, N, N)`` images, zero-padding to the pooling multiple.

    Returns ``(y, yd, tape, size)`` with ``y`` and ``yd`` cropped back to ``N x N``.
    """
    imgs = np.asarray(imgs, dtype=np.float64)
    if imgs.ndim == 2:
        imgs = imgs[None]
    n = imgs.shape[-1]
    size = _padded_size(n, net)
    xd = _pad(np.asarray(tangents).reshape(imgs.shape), size) if tangents is not None else None
    y, yd, tape = net.forward(_pad(imgs, size), xd, train)
    yd = yd[:, 0, :n, :n] if yd is not None else None
    return y[:, 0, :n, :n], yd, tape, size


def _net_backward(net, tape, size, gy, gyd=None):
    n = gy.shape[-1]
    gyp = _pad(gy, size)
    gydp = _pad(gyd, size) if gyd is not None else None
    gx, gxd, gp = net.backward(gyp, gydp, tape)
    return gx[:, 0, :n, :n], (gxd[:, 0, :n, :n] if gxd is not None else None), gp


def kernel_mask(net: Network) -> np.ndarray:
    """Boolean mask over the flat parameter vector selecting convolution kernels."""
    grads = [{k: np.full(v.shape, isinstance(l, (Conv3x3, Conv1x1, TConv2x2s2)) and k == "w") for k, v in p.items()}
             for l, p in zip(net.layers, net.params)]
    return net.flatten(grads).astype(bool)


def kernel_term(net: Network, mask=None):
    """Mean squared kernel weight and its flat gradient."""
    mask = kernel_mask(net) if mask is None else mask
    w = net.flatten()
    k = int(mask.sum())
    if k == 0:
        return 0.0, np.zeros_like(w)
    grad = np.zeros_like(w)
    grad[mask] = 2.0 * w[mask] / k
    return float(np.sum(w[mask] ** 2) / k), grad


# --------------------------------------------------------------------------
# postprocess scheme
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PostLossConfig:
    tau1: float = 100.0
    tau2: float | None = None      # None -> 1 / image side
    tau3: float = 1.0
    tau4: float = 1e-3
    gamma: float = 1.0
    eps: float = 1e-2

    def __post_init__(self):
        vals = [self.tau1, self.tau3, self.tau4, self.gamma] + ([self.tau2] if self.tau2 is not None else [])
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise InvalidArgument(f"loss weights must be finite and >= 0: {self}")
        if not self.eps > 0:
            raise InvalidArgument("eps must be positive")

    def resolved_tau2(self, n: int) -> float:
        return 1.0 / n if self.tau2 is None else self.tau2


@dataclass
class LossValue:
    total: float
    components: dict
    grad: np.ndarray | None = None


def post_loss(f_tilde, f_bar, g_expected, projector: Projector, cfg: PostLossConfig,
              kernel_value: float = 0.0) -> LossValue:
    """Postprocess loss of one reconstruction; ``grad`` is with respect to ``f_tilde``."""
    ft = np.asarray(f_tilde, dtype=np.float64)
    fb = np.asarray(f_bar, dtype=np.float64)
    ge = np.asarray(g_expected, dtype=np.float64)
    if ft.shape != fb.shape or ft.ndim != 2:
        raise InvalidArgument(f"image shape mismatch {ft.shape} vs {fb.shape}")
    if ge.shape != projector.geometry.sino_shape:
        raise InvalidArgument(f"sinogram shape {ge.shape} does not match {projector.geometry.sino_shape}")
    tau2 = cfg.resolved_tau2(ft.shape[0])
    d = ft - fb
    field = tv_map(d)
    rd = projector.forward(ft) - ge
    comps = {
        "fid": cfg.tau1 * float(np.mean(d * d)),
        "tvdiff": cfg.tau1 * cfg.gamma * float(np.mean(field)),
        "radon": tau2 * float(np.mean(rd * rd)),
        "logsp": cfg.tau3 * log_sparsity(ft, cfg.eps) if cfg.tau3 else 0.0,
        "kernel": cfg.tau4 * kernel_value,
    }
    grad = cfg.tau1 * 2.0 * d / d.size
    if cfg.gamma and cfg.tau1:
        grad = grad + cfg.tau1 * cfg.gamma * tv_map_vjp(d, np.full(field.shape, 1.0 / field.size))
    if tau2:
        grad = grad + tau2 * 2.0 / rd.size * projector.adjoint_backproject(rd)
    if cfg.tau3:
        grad = grad + cfg.tau3 * log_sparsity_grad(ft, cfg.eps)
    return LossValue(float(sum(comps.values())), comps, grad)


@dataclass
class SchemeState:
    net: Network
    opt: object
    step: int = 0
    epoch: int = 0
    trace: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    best_val: float = float("inf")
    best_path: Path | None = None


def _batches(n, batch, rng):
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def _post_batch_grad(net, samples, projector, cfg, mask, train):
    imgs = np.stack([s.f_in for s in samples])
    y, _, tape, size = apply_net(net, imgs, train=train)
    kval, kgrad = kernel_term(net, mask)
    comps = dict.fromkeys(("fid", "tvdiff", "radon", "logsp"), 0.0)
    gy = np.zeros_like(y)
    for i, s in enumerate(samples):
        lv = post_loss(y[i], s.truth, s.gbar, projector, cfg, 0.0)
        for k in comps:
            comps[k] += lv.components[k] / len(samples)
        gy[i] = lv.grad / len(samples)
    comps["kernel"] = cfg.tau4 * kval
    _, _, gp = _net_backward(net, tape, size, gy)
    return float(sum(comps.values())), comps, gp + cfg.tau4 * kgrad, y


def evaluate_post(net: Network, samples, scale: HuScale = HuScale(), batch: int = 16):
    """Mean MAE-HU of the network outputs and of the inputs over ``samples``."""
    out, inp = [], []
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        y = apply_net(net, np.stack([s.f_in for s in chunk]))[0]
        for s, yi in zip(chunk, y):
            out.append(mae_hu(yi, s.truth, scale))
            inp.append(mae_hu(s.f_in, s.truth, scale))
    return float(np.mean(out)), float(np.mean(inp))


def train_postprocess(train_set, val_set, net: Network, geom: Geometry, cfg: PostLossConfig = PostLossConfig(),
                      epochs: int = 30, batch_size: int = 8, lr_start: float = 1e-3, lr_end: float = 1e-5,
                      seed: int = 0, out_dir=None, log_path=None, scale: HuScale = HuScale(),
                      max_steps: int | None = None) -> SchemeState:
    """Minibatch Adam on the postprocess loss with per-epoch validation MAE-HU.

    The best checkpoint by validation MAE-HU is written to ``out_dir/best.pbtk``
    when ``out_dir`` is given.
    """
    if not train_set:
        raise InvalidArgument("empty training set")
    projector = Projector(geom)
    rng = np.random.default_rng(seed)
    mask = kernel_mask(net)
    state = SchemeState(net, adam_init(net.n_params, lr_start))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    steps_per_epoch = math.ceil(len(train_set) / batch_size)
    total_steps = epochs * steps_per_epoch if max_steps is None else min(max_steps, epochs * steps_per_epoch)
    last_good = net.flatten()
    for epoch in range(1, epochs + 1):
        state.epoch = epoch
        for idx in _batches(len(train_set), batch_size, rng):
            if max_steps is not None and state.step >= max_steps:
                break
            total, comps, grad, _ = _post_batch_grad(net, [train_set[i] for i in idx], projector, cfg, mask, True)
            if not math.isfinite(total):
                raise TrainingDiverged(f"loss became {total} at step {state.step}", last_good=state.best_path)
            lr = piecewise_lr(state.step, total_steps, lr_start, lr_end)
            try:
                w = adam_step(state.opt, net.flatten(), grad, lr)
            except TrainingDiverged as exc:
                raise TrainingDiverged(str(exc), last_good=state.best_path) from exc
            last_good = net.flatten()
            net.unflatten(w)
            state.step += 1
            state.trace.append((state.step, epoch, total, comps["fid"], comps["tvdiff"], comps["radon"],
                                comps["logsp"], comps["kernel"]))
        if val_set:
            val, _ = evaluate_post(net, val_set, scale)
            state.val_history.append(val)
            log.info("epoch %d: validation MAE %.3f HU", epoch, val)
            if val < state.best_val:
                state.best_val = val
                if out_dir is not None:
                    state.best_path = save_checkpoint(out_dir / "best.pbtk", net, {"epoch": epoch, "val_mae_hu": val})
        if max_steps is not None and state.step >= max_steps:
            break
    if out_dir is not None:
        save_checkpoint(out_dir / "last.pbtk", net, {"epoch": state.epoch})
        if state.best_path is None:
            state.best_path = save_checkpoint(out_dir / "best.pbtk", net, {"epoch": state.epoch})
    if log_path is not None:
        write_rows(log_path, POST_LOG_HEADER, state.trace)
    del last_good
    return state


def train_single_sample(net: Network, sample, geom: Geometry, cfg: PostLossConfig, steps: int = 2000,
                        lr: float = 1e-3, stop_ratio: float | None = None):
    """Overfit one sample; returns the loss before every step plus the final loss.

    With ``stop_ratio`` set, training stops once the loss falls below
    ``stop_ratio`` times the initial loss.
    """
    projector = Projector(geom)
    mask = kernel_mask(net)
    opt = adam_init(net.n_params, lr)
    losses = []
    for _ in range(steps):
        total, _, grad, _ = _post_batch_grad(net, [sample], projector, cfg, mask, True)
        losses.append(total)
        if stop_ratio is not None and total <= stop_ratio * losses[0]:
            return np.array(losses)
        net.unflatten(adam_step(opt, net.flatten(), grad))
    losses.append(_post_batch_grad(net, [sample], projector, cfg, mask, False)[0])
    return np.array(losses)


# --------------------------------------------------------------------------
# unrolled scheme
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class UnrolledConfig:
    s: int = 4
    D: int = 4
    p: int = 6
    gamma_a: float = 2.0
    gamma_s: float = 0.01
    gamma_g: float = 0.03
    omega: float | None = None

    def __post_init__(self):
        if self.D < 1 or self.s < 1 or self.p < 0:
            raise InvalidArgument(f"need D >= 1, s >= 1, p >= 0: {self}")
        if self.gamma_a < 1 or self.gamma_s < 0 or self.gamma_g < 0:
            raise InvalidArgument(f"need gamma_a >= 1 and gamma_s, gamma_g >= 0: {self}")

    def to_dict(self):
        return asdict(self)


class LandweberMap:
    """``L f = f + omega R^T (g - R f)``; its linear part is ``Q = I - omega R^T R``."""

    def __init__(self, geom: Geometry, omega: float | None = None, projector: Projector | None = None):
        self.geom = geom
        self.proj = projector or Projector(geom)
        sigma = power_method_norm(self.proj, 200, 0).sigma
        self.bound = 2.0 / sigma ** 2
        self.omega = auto_omega(sigma) if omega is None else float(omega)
        if not 0 < self.omega < self.bound:
            raise InvalidArgument(f"omega={self.omega} outside (0, {self.bound})")

    def step(self, f, g, n=1):
        for _ in range(n):
            f = f + self.omega * self.proj.adjoint_backproject(g - self.proj.forward(f))
        return f

    def q(self, e, n=1):
        for _ in range(n):
            e = e - self.omega * self.proj.adjoint_backproject(self.proj.forward(e))
        return e

    def init(self, g, p):
        return self.step(np.zeros(self.geom.image_shape), g, p)


def unrolled_apply(cfg: UnrolledConfig, net: Network, g, lmap: LandweberMap, f0=None, K: int | None = None):
    """Iterates ``f^(1) .. f^(K)`` of ``f <- F(L^s f)``; ``f0`` defaults to ``L^p(0)``."""
    K = cfg.D if K is None else K
    if K < 0:
        raise InvalidArgument("K must be >= 0")
    g = np.asarray(g, dtype=np.float64)
    f = lmap.init(g, cfg.p) if f0 is None else np.asarray(f0, dtype=np.float64)
    out = []
    for _ in range(K):
        z = lmap.step(f, g, cfg.s)
        f = apply_net(net, z)[0][0]
        out.append(f)
    return out


def unrolled_loss(g, f_bar, net: Network, cfg: UnrolledConfig, lmap: LandweberMap, f0=None, with_grad=True):
    """Unrolled objective for one sample.

    Returns a :class:`LossValue` whose components hold ``fid_k`` (amplified),
    ``support`` and ``inputgrad`` and whose ``grad`` is the flat parameter
    gradient, back-propagated through every depth.
    """
    g = np.asarray(g, dtype=np.float64)
    fb = np.asarray(f_bar, dtype=np.float64)
    proj = lmap.proj
    f = lmap.init(g, cfg.p) if f0 is None else np.asarray(f0, dtype=np.float64)
    n = fb.size
    m = proj.geometry.p * proj.geometry.n
    tapes = []
    comps = {f"fid_k{k}": 0.0 for k in range(cfg.D)}
    comps["support"] = 0.0
    comps["inputgrad"] = 0.0
    for k in range(cfg.D):
        z = lmap.step(f, g, cfg.s)
        d = fb - f
        dn = float(np.linalg.norm(d))
        use_dir = cfg.gamma_g > 0 and dn >= 1e-12
        ehat = d / dn if use_dir else None
        t = lmap.q(ehat, cfg.s) if use_dir else None
        y, yd, tape, size = apply_net(net, z, t[None] if use_dir else None)
        y = y[0]
        yd = yd[0] if use_dir else None
        rc = proj.forward(y - z)
        amp = cfg.gamma_a ** k
        comps[f"fid_k{k}"] = amp * float(np.mean((y - fb) ** 2))
        comps["support"] += cfg.gamma_s * float(np.mean(rc * rc))
        if use_dir:
            comps["inputgrad"] += cfg.gamma_g * float(np.mean(yd * yd))
        tapes.append((f, z, y, yd, rc, ehat, dn, tape, size, amp))
        f = y
    total = float(sum(comps.values()))
    if not with_grad:
        return LossValue(total, comps, None)
    gp_total = np.zeros(net.n_params)
    gf_next = np.zeros_like(fb)
    for k in range(cfg.D - 1, -1, -1):
        f, z, y, yd, rc, ehat, dn, tape, size, amp = tapes[k]
        rtr = proj.adjoint_backproject(rc) * (2.0 * cfg.gamma_s / m)
        gy = amp * 2.0 * (y - fb) / n + rtr + gf_next
        gyd = cfg.gamma_g * 2.0 * yd / n if yd is not None else None
        gz, gt, gp = _net_backward(net, tape, size, gy[None], gyd[None] if gyd is not None else None)
        gp_total += gp
        gz = gz[0] - rtr
        gf = lmap.q(gz, cfg.s)
        if yd is not None:
            ge = lmap.q(gt[0], cfg.s)
            gd = (ge - ehat * float(np.sum(ehat * ge))) / dn
            gf = gf - gd
        gf_next = gf
    return LossValue(total, comps, gp_total)


def train_unrolled(train_set, val_set, net: Network, geom: Geometry, cfg: UnrolledConfig = UnrolledConfig(),
                   epochs: int = 10, batch_size: int = 4, lr_start: float = 1e-3, lr_end: float = 1e-5,
                   seed: int = 0, out_dir=None, log_path=None, lmap: LandweberMap | None = None,
                   scale: HuScale = HuScale()) -> SchemeState:
    """Adam on the unrolled objective; samples need ``ghat`` (data) and ``truth``.

    Checkpoint selection uses the validation MAE-HU at depth ``D``.
    """
    if not train_set:
        raise InvalidArgument("empty training set")
    if not net.supports_second_order and cfg.gamma_g > 0:
        raise InvalidArgument("the input-gradient term needs a network without train-mode batchnorm")
    lmap = lmap or LandweberMap(geom, cfg.omega)
    rng = np.random.default_rng(seed)
    state = SchemeState(net, adam_init(net.n_params, lr_start))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    total_steps = epochs * math.ceil(len(train_set) / batch_size)
    for epoch in range(1, epochs + 1):
        state.epoch = epoch
        for idx in _batches(len(train_set), batch_size, rng):
            comps = None
            grad = np.zeros(net.n_params)
            total = 0.0
            for i in idx:
                s = train_set[i]
                lv = unrolled_loss(s.ghat, s.truth, net, cfg, lmap, s.f_in)
                total += lv.total / len(idx)
                grad += lv.grad / len(idx)
                comps = {k: (comps[k] if comps else 0.0) + v / len(idx) for k, v in lv.components.items()}
            if not math.isfinite(total):
                raise TrainingDiverged(f"loss became {total} at step {state.step}", last_good=state.best_path)
            lr = piecewise_lr(state.step, total_steps, lr_start, lr_end)
            try:
                net.unflatten(adam_step(state.opt, net.flatten(), grad, lr))
            except TrainingDiverged as exc:
                raise TrainingDiverged(str(exc), last_good=state.best_path) from exc
            state.step += 1
            state.trace.append((state.step, epoch, total) + tuple(comps[f"fid_k{k}"] for k in range(cfg.D))
                               + (comps["support"], comps["inputgrad"]))
        if val_set:
            curve = depth_curve(net, cfg, val_set, lmap, cfg.D, scale)
            val = float(curve[-1][1])
            state.val_history.append(val)
            log.info("epoch %d: validation MAE at depth %d = %.3f HU", epoch, cfg.D, val)
            if val < state.best_val:
                state.best_val = val
                if out_dir is not None:
                    state.best_path = save_checkpoint(out_dir / "best.pbtk", net,
                                                      {"epoch": epoch, "val_mae_hu": val, "unrolled": cfg.to_dict()})
    if out_dir is not None:
        save_checkpoint(out_dir / "last.pbtk", net, {"epoch": state.epoch, "unrolled": cfg.to_dict()})
        if state.best_path is None:
            state.best_path = save_checkpoint(out_dir / "best.pbtk", net, {"epoch": state.epoch})
    if log_path is not None:
        write_rows(log_path, unrolled_log_header(cfg.D), state.trace)
    return state


def depth_curve(net: Network, cfg: UnrolledConfig, samples, lmap: LandweberMap, K: int,
                scale: HuScale = HuScale()):
    """Rows ``(depth, mean MAE-HU, mean RelError, mean SSIM)`` for depths ``1..K``."""
    acc = np.zeros((K, 3))
    for s in samples:
        its = unrolled_apply(cfg, net, s.ghat, lmap, s.f_in, K)
        for k, f in enumerate(its):
            acc[k] += (mae_hu(f, s.truth, scale), rel_error(f, s.truth), ssim(f, s.truth))
    acc /= len(samples)
    return [(k + 1, *map(float, acc[k])) for k in range(K)]


def semi_convergence_eval(net: Network, cfg: UnrolledConfig, samples, K_max: int, lmap: LandweberMap,
                          out_csv=None, scale: HuScale = HuScale()):
    """Per-depth mean metrics over ``samples``; optionally written as CSV."""
    if K_max < cfg.D:
        raise InvalidArgument(f"K_max={K_max} must be >= D={cfg.D}")
    if not samples:
        raise InvalidArgument("empty evaluation set")
    rows = depth_curve(net, cfg, samples, lmap, K_max, scale)
    if out_csv is not None:
        write_rows(out_csv, EVAL_HEADER, rows)
    return rows


def lipschitz_probe(net: Network, cfg: UnrolledConfig, samples, lmap: LandweberMap, n_dirs: int = 4,
                    eps: float = 1e-3, seed: int = 0):
    """Median over samples, depths and random directions of ``|H(f + eps e) - H(f)| / (eps |e|)``."""
    rng = np.random.default_rng(seed)
    vals = []
    for s in samples:
        f = s.f_in
        for _ in range(cfg.D):
            h0 = apply_net(net, lmap.step(f, s.ghat, cfg.s))[0][0]
            for _ in range(n_dirs):
                e = rng.standard_normal(f.shape)
                e /= np.linalg.norm(e)
                h1 = apply_net(net, lmap.step(f + eps * e, s.ghat, cfg.s))[0][0]
                vals.append(float(np.linalg.norm(h1 - h0) / eps))
            f = h0
    return float(np.median(vals))


def support_leakage(net: Network, cfg: UnrolledConfig, samples, lmap: LandweberMap):
    """Mean of ``mean((R C(L^s f^(k)))^2)`` over samples and depths."""
    vals = []
    for s in samples:
        f = s.f_in
        for _ in range(cfg.D):
            z = lmap.step(f, s.ghat, cfg.s)
            y = apply_net(net, z)[0][0]
            rc = lmap.proj.forward(y - z)
            vals.append(float(np.mean(rc * rc)))
            f = y
    return float(np.mean(vals))
