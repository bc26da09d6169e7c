"""Command-line entry point: ``parbeam {simulate,reconstruct,train,eval,sweep}``.

Every command logs its fully resolved configuration as JSON.  Saving that
JSON and passing it back with ``--config`` reproduces the run.  Exit codes:
0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .core import Geometry, HuScale, disk_phantom, gaussian_blob, random_phantom, rasterize_phantom, shepp_logan
from .errors import InvalidArgument, ParbeamError
from .io import KIND_IMAGE, KIND_SINOGRAM, data_dir, load_array, save_array, save_pgm, write_rows

log = logging.getLogger("parbeam")

METHODS = ("fbp", "landweber", "kaczmarz", "cimmino", "fista-tv", "nltv")


class UsageError(Exception):
    pass


def _dataset_default():
    return str(data_dir("parbeam_data") / "dataset")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="parbeam", description="Parallel-beam CT reconstruction toolkit")
    ap.add_argument("--config", help="JSON file with a resolved configuration (as echoed by a previous run)")
    ap.add_argument("--log-level", default="INFO")
    sub = ap.add_subparsers(dest="command", required=True)

    def geom_args(p, p_default=40, q_default=16):
        p.add_argument("--p", type=int, default=p_default, help="number of projection angles")
        p.add_argument("--q", type=int, default=q_default, help="detector half-width in bins")
        p.add_argument("--rho", type=float, default=1.0)

    s = sub.add_parser("simulate", help="generate a phantom dataset")
    geom_args(s)
    s.add_argument("--phantoms", type=int, default=8)
    s.add_argument("--snr-db", type=float, default=40.0)
    s.add_argument("--i0", type=float, default=None, help="fixed source intensity (skips calibration)")
    s.add_argument("--sigma-th", type=float, default=0.01)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--input-mode", choices=("fbp", "artp"), default="fbp")
    s.add_argument("--p-init", type=int, default=6)
    s.add_argument("--mu-water", type=float, default=0.2)
    s.add_argument("--out", default=None)

    r = sub.add_parser("reconstruct", help="reconstruct one sinogram")
    r.add_argument("--sino", help="PBTK1 sinogram; alternatively --dataset/--index")
    r.add_argument("--dataset", default=None)
    r.add_argument("--index", type=int, default=0)
    r.add_argument("--noisy", action=argparse.BooleanOptionalAction, default=True,
                   help="use the noisy sinogram of a dataset sample")
    r.add_argument("--truth", default=None, help="PBTK1 ground-truth image for metrics")
    r.add_argument("--rho", type=float, default=1.0)
    r.add_argument("--method", default="fbp")
    r.add_argument("--omega", default="auto")
    r.add_argument("--iters", type=int, default=50)
    r.add_argument("--lambda", dest="lam", type=float, default=1e-3)
    r.add_argument("--gamma", type=float, default=0.03)
    r.add_argument("--art-steps", type=int, default=5)
    r.add_argument("--prox-steps", type=int, default=20)
    r.add_argument("--prox-step", type=float, default=1.0)
    r.add_argument("--out", default="recon.pbtk")
    r.add_argument("--preview", default=None, help="PGM preview path (default: next to --out)")
    r.add_argument("--metrics", default=None, help="metric CSV path (default: next to --out)")
    r.add_argument("--mu-water", type=float, default=0.2)

    t = sub.add_parser("train", help="train a learned scheme")
    t.add_argument("--scheme", choices=("post", "unrolled"), required=True)
    t.add_argument("--dataset", default=None)
    t.add_argument("--samples", type=int, default=0, help="use the first N samples (0 = all)")
    t.add_argument("--val-frac", type=float, default=0.2)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--lr-end", type=float, default=1e-5)
    t.add_argument("--levels", type=int, default=2)
    t.add_argument("--base", type=int, default=8)
    t.add_argument("--batchnorm", action=argparse.BooleanOptionalAction, default=None,
                   help="default: on for post, off for unrolled")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--tau1", type=float, default=100.0)
    t.add_argument("--tau2", type=float, default=None)
    t.add_argument("--tau3", type=float, default=1.0)
    t.add_argument("--tau4", type=float, default=1e-3)
    t.add_argument("--tv-gamma", type=float, default=1.0)
    t.add_argument("--eps", type=float, default=1e-2)
    _unrolled_args(t)
    t.add_argument("--out", default="run")

    e = sub.add_parser("eval", help="per-depth evaluation of a learned scheme")
    e.add_argument("--scheme", choices=("post", "unrolled"), required=True)
    e.add_argument("--checkpoint", default=None, help="omitted: identity network")
    e.add_argument("--dataset", default=None)
    e.add_argument("--samples", type=int, default=0)
    e.add_argument("--depths", type=int, default=6)
    _unrolled_args(e)
    e.add_argument("--out", default="eval.csv")

    w = sub.add_parser("sweep", help="semi-convergence sweep of a classical solver")
    geom_args(w, 40, 16)
    w.add_argument("--method", choices=("landweber", "kaczmarz", "cimmino"), default="landweber")
    w.add_argument("--iters", type=int, default=60)
    w.add_argument("--trials", type=int, default=10)
    w.add_argument("--snr-db", type=float, default=40.0)
    w.add_argument("--sigma-th", type=float, default=0.01)
    w.add_argument("--phantom", choices=("blob", "disk", "random", "shepp"), default="blob")
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--out", default="sweep.csv")
    for sp in (s, r, t, e, w):
        sp.add_argument("--config", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    return ap


def _unrolled_args(p):
    p.add_argument("--s", type=int, default=4, help="ART steps per network call")
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--p-init", type=int, default=6)
    p.add_argument("--gamma-a", type=float, default=2.0)
    p.add_argument("--gamma-s", type=float, default=0.01)
    p.add_argument("--gamma-g", type=float, default=0.03)


def resolve(argv, parser=None):
    """Parse ``argv``, applying ``--config`` values as defaults; returns the namespace."""
    parser = parser or build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if cfg.get("command") not in (None, args.command):
            raise UsageError(f"config is for command {cfg.get('command')!r}, not {args.command!r}")
        known = set(vars(args))
        unknown = set(cfg) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        explicit = {a.split("=")[0] for a in argv if a.startswith("--")}
        for k, v in cfg.items():
            flag = "--" + k.replace("_", "-")
            if k in ("command", "config") or flag in explicit:
                continue
            setattr(args, k, v)
    return args


def resolved_config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("config", "log_level")}


def _writable_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise UsageError(f"output directory {path} is not writable")
    return path


def _parent_dir(path) -> Path:
    path = Path(path)
    _writable_dir(path.parent if str(path.parent) else Path("."))
    return path


def _load_dataset(root):
    from .simulate import load_dataset

    root = Path(root or _dataset_default())
    if not (root / "manifest.csv").exists():
        raise UsageError(f"no dataset at {root}; create one with `parbeam simulate --out {root}`")
    return load_dataset(root)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    from .simulate import make_dataset

    geom = Geometry(args.p, args.q, args.rho)
    out = _writable_dir(args.out or _dataset_default())
    samples = make_dataset(out, geom, args.phantoms, args.seed, args.input_mode, args.snr_db, args.i0,
                           args.sigma_th, args.p_init, HuScale(args.mu_water))
    snrs = np.array([s.snr_db for s in samples])
    print(f"wrote {len(samples)} samples to {out}; SNR mean {snrs.mean():.2f} dB "
          f"(min {snrs.min():.2f}, max {snrs.max():.2f})")
    return 0


def _reconstruct(method, sino, geom, args):
    from .fbp import fbp
    from .radon import Projector
    from .regularizers import NltvConfig, fista_tv, nltv_scheme
    from .solvers import LinearProblem, auto_omega, cimmino, kaczmarz, landweber, power_method_norm

    if method == "fbp":
        return fbp(sino, geom)
    proj = Projector(geom)
    problem = LinearProblem(proj, sino, check_adjoint=False)
    sigma = power_method_norm(proj, 200, 0).sigma
    if method == "landweber":
        omega = auto_omega(sigma) if args.omega == "auto" else float(args.omega)
        log.info("landweber omega = %.17g (bound 2/sigma_max^2 = %.17g)", omega, 2 / sigma ** 2)
        return landweber(problem, omega, args.iters, trace=False, sigma_max=sigma)[0]
    if method == "kaczmarz":
        omega = 1.0 if args.omega == "auto" else float(args.omega)
        return kaczmarz(problem, omega=omega, sweeps=args.iters)[0]
    if method == "cimmino":
        omega = 1.0 if args.omega == "auto" else float(args.omega)
        return cimmino(problem, omega=omega, iters=args.iters, mode="rowsum")[0]
    if method == "fista-tv":
        step = None if args.omega == "auto" else float(args.omega)
        return fista_tv(problem, args.lam, args.iters, step=step, sigma_max=sigma)[0]
    if method == "nltv":
        return nltv_scheme(problem, NltvConfig(), args.gamma, args.iters, art_steps=args.art_steps,
                           prox_steps=args.prox_steps, prox_step=args.prox_step, sigma_max=sigma)[0]
    raise UsageError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def cmd_reconstruct(args) -> int:
    from .metrics import report
    from .radon import Projector

    if args.method not in METHODS:
        raise UsageError(f"unknown method {args.method!r}; choose from {', '.join(METHODS)}")
    truth = None
    if args.sino:
        try:
            sino = load_array(args.sino, KIND_SINOGRAM)
        except FileNotFoundError as exc:
            raise UsageError(f"sinogram {args.sino} not found") from exc
        p, n = sino.shape
        if n % 2 == 0:
            raise UsageError(f"sinogram has an even number of bins ({n})")
        geom = Geometry(p, n // 2, args.rho)
    else:
        geom, samples = _load_dataset(args.dataset)
        if not 0 <= args.index < len(samples):
            raise UsageError(f"index {args.index} out of range for {len(samples)} samples")
        smp = samples[args.index]
        sino = smp.ghat if args.noisy else smp.gbar
        truth = smp.truth
    if args.truth:
        truth = load_array(args.truth, KIND_IMAGE)
    img = _reconstruct(args.method, sino, geom, args)
    out = _parent_dir(args.out)
    save_array(out, img, KIND_IMAGE)
    ref = truth if truth is not None else img
    save_pgm(args.preview or out.with_suffix(".pgm"), img, float(ref.min()), float(ref.max()))
    if truth is not None:
        rep = report(img, truth, Projector(geom), HuScale(args.mu_water))
        rep.to_csv(args.metrics or out.with_suffix(".csv"))
        print(f"{args.method}: MAE {rep.mae_hu:.3f} HU, SSIM {rep.ssim:.4f}, RelError {rep.rel_error:.4g}")
    else:
        print(f"{args.method}: wrote {out}")
    return 0


def _split(samples, args):
    if args.samples:
        samples = samples[:args.samples]
    n_val = max(1, int(round(len(samples) * getattr(args, "val_frac", 0.0)))) if len(samples) > 1 else 0
    return samples[:len(samples) - n_val], samples[len(samples) - n_val:]


def _unrolled_cfg(args):
    from .schemes import UnrolledConfig

    return UnrolledConfig(args.s, args.depth, args.p_init, args.gamma_a, args.gamma_s, args.gamma_g)


def cmd_train(args) -> int:
    from .nn import build_mini_unet
    from .schemes import PostLossConfig, train_postprocess, train_unrolled

    geom, samples = _load_dataset(args.dataset)
    train, val = _split(samples, args)
    out = _writable_dir(args.out)
    bn = args.batchnorm if args.batchnorm is not None else args.scheme == "post"
    net = build_mini_unet(args.levels, args.base, bn, seed=args.seed)
    if args.scheme == "post":
        cfg = PostLossConfig(args.tau1, args.tau2, args.tau3, args.tau4, args.tv_gamma, args.eps)
        st = train_postprocess(train, val, net, geom, cfg, args.epochs, args.batch, args.lr, args.lr_end, args.seed,
                               out, out / "train_log.csv")
    else:
        st = train_unrolled(train, val, net, geom, _unrolled_cfg(args), args.epochs, args.batch, args.lr,
                            args.lr_end, args.seed, out, out / "train_log.csv")
    print(f"trained {st.step} steps; best validation MAE {st.best_val:.3f} HU; checkpoint {st.best_path}")
    return 0


def cmd_eval(args) -> int:
    from .nn import build_mini_unet, load_checkpoint
    from .schemes import EVAL_HEADER, LandweberMap, apply_net, semi_convergence_eval
    from .metrics import mae_hu, rel_error, ssim

    geom, samples = _load_dataset(args.dataset)
    if args.samples:
        samples = samples[:args.samples]
    if args.checkpoint:
        try:
            net = load_checkpoint(args.checkpoint)
        except FileNotFoundError as exc:
            raise UsageError(f"checkpoint {args.checkpoint} not found") from exc
    else:
        log.warning("no checkpoint given; evaluating the identity network")
        net = build_mini_unet(1, 1, False)
    out = _parent_dir(args.out)
    if args.scheme == "unrolled":
        cfg = _unrolled_cfg(args)
        if args.depths < cfg.D:
            cfg = type(cfg)(cfg.s, args.depths, cfg.p, cfg.gamma_a, cfg.gamma_s, cfg.gamma_g)
        rows = semi_convergence_eval(net, cfg, samples, args.depths, LandweberMap(geom), out)
        best = min(rows, key=lambda r: r[1])
        print(f"wrote {len(rows)} depths to {out}; minimum MAE at depth {best[0]}")
    else:
        rows = []
        for s in samples:
            y = apply_net(net, s.f_in)[0][0]
            rows.append((1, mae_hu(y, s.truth), rel_error(y, s.truth), ssim(y, s.truth)))
        row = (1,) + tuple(float(np.mean([r[i] for r in rows])) for i in (1, 2, 3))
        write_rows(out, EVAL_HEADER, [row])
        print(f"post: MAE {row[1]:.3f} HU over {len(samples)} samples")
    return 0


def _sweep_truth(kind, geom, seed):
    if kind == "blob":
        return gaussian_blob(geom, 0.3 * geom.rho, amplitude=0.2)
    if kind == "disk":
        return rasterize_phantom(disk_phantom(geom, 0.6 * geom.rho, 0.2), geom)
    if kind == "shepp":
        return rasterize_phantom(shepp_logan(geom, HuScale()), geom)
    return rasterize_phantom(random_phantom(np.random.default_rng(seed), geom), geom)


def cmd_sweep(args) -> int:
    from .radon import Projector
    from .simulate import NoiseModel, apply_noise, calibrate_snr
    from .solvers import semi_convergence_sweep

    geom = Geometry(args.p, args.q, args.rho)
    truth = _sweep_truth(args.phantom, geom, args.seed)
    proj = Projector(geom)
    clean = proj.forward(truth)
    I0 = calibrate_snr(clean, args.snr_db, args.sigma_th)
    nm = NoiseModel(I0, args.sigma_th, args.seed)
    res = semi_convergence_sweep(truth, proj, clean, args.iters, args.trials,
                                 noise=lambda c, rng: apply_noise(c, nm, rng)[0], method=args.method, seed=args.seed)
    out = _parent_dir(args.out)
    res.to_csv(out)
    print(f"wrote {res.iters} rows to {out}; mean-error argmin at iteration {res.argmin}, "
          f"interior in {100 * res.interior_fraction():.0f}% of trials")
    return 0


COMMANDS = {"simulate": cmd_simulate, "reconstruct": cmd_reconstruct, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep}


def _thread_limit():
    raw = os.environ.get("PARBEAM_THREADS", "0")
    try:
        n = int(raw)
    except ValueError as exc:
        raise UsageError(f"PARBEAM_THREADS must be an integer, got {raw!r}") from exc
    if n < 0:
        raise UsageError("PARBEAM_THREADS must be >= 0")
    return n or None


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = resolve(argv, parser)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"parbeam: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = resolved_config(args)
    log.info("config %s", json.dumps(cfg, sort_keys=True))
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=_thread_limit()):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"parbeam: error: {exc}", file=sys.stderr)
        return 2
    except InvalidArgument as exc:
        print(f"parbeam: invalid argument: {exc}", file=sys.stderr)
        return 2
    except (ParbeamError, OSError, ValueError, ArithmeticError) as exc:
        print(f"parbeam: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
