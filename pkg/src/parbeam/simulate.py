"""Sinogram noise model and dataset generation.

Counts follow ``I = Poisson(I0 exp(-g) + N(0, sigma_th I0))`` where the
second argument of the normal law is its variance.  Counts are clamped to at
least one photon before the log transform ``g_hat = -ln(I / I0)``.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Geometry, HuScale, mu_to_hu, random_phantom, rasterize_phantom
from .errors import CalibrationFailed, InvalidArgument
from .fbp import make_plan, reconstruct_fbp
from .io import KIND_IMAGE, KIND_SINOGRAM, save_array, write_rows, load_array
from .radon import Projector
from .solvers import LinearProblem, auto_omega, landweber, power_method_norm

log = logging.getLogger(__name__)

__all__ = ["NoiseModel", "Sample", "sample_counts", "apply_noise", "snr_db", "calibrate_snr",
           "generate_sample", "make_dataset", "load_dataset", "MANIFEST_HEADER"]

MANIFEST_HEADER = ("idx", "seed", "snr_db", "input_mode", "mae_hu_input", "f_path", "gbar_path", "ghat_path",
                   "fin_path")


@dataclass(frozen=True)
class NoiseModel:
    I0: float
    sigma_th: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not self.I0 > 0:
            raise InvalidArgument(f"source intensity must be positive, got {self.I0}")
        if not self.sigma_th >= 0:
            raise InvalidArgument(f"thermal noise scale must be >= 0, got {self.sigma_th}")


def snr_db(clean, noisy) -> float:
    """``10 log10(||clean||^2 / ||clean - noisy||^2)``, capped at 300 dB."""
    d = float(np.sum((np.asarray(clean) - np.asarray(noisy)) ** 2))
    c = float(np.sum(np.asarray(clean) ** 2))
    if d == 0.0:
        return 300.0
    return min(300.0, 10.0 * math.log10(c / d)) if c > 0 else -300.0


def sample_counts(gbar, nm: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    """Detected photon counts before the log transform (no clamping)."""
    expected = nm.I0 * np.exp(-gbar)
    if nm.sigma_th > 0:
        expected = expected + rng.normal(0.0, math.sqrt(nm.sigma_th * nm.I0), size=np.shape(gbar))
    return rng.poisson(np.maximum(expected, 0.0)).astype(np.float64)


def apply_noise(gbar, nm: NoiseModel, rng: np.random.Generator | None = None):
    """Return ``(noisy sinogram, achieved SNR in dB)``."""
    gbar = np.asarray(gbar, dtype=np.float64)
    if not np.all(np.isfinite(gbar)):
        raise InvalidArgument("sinogram contains non-finite values")
    if rng is None:
        rng = np.random.default_rng(nm.seed)
    counts = np.maximum(sample_counts(gbar, nm, rng), 1.0)
    ghat = -np.log(counts / nm.I0)
    return ghat, snr_db(gbar, ghat)


def _mean_snr(gbar, I0, sigma_th, seeds):
    return float(np.mean([apply_noise(gbar, NoiseModel(I0, sigma_th, s))[1] for s in seeds]))


def calibrate_snr(gbar, target_db: float, sigma_th: float = 0.01, lo: float = 1e1, hi: float = 1e13,
                  n_seeds: int = 10, tol_db: float = 0.25, max_iter: int = 80) -> float:
    """Bisect ``log I0`` until the mean SNR over ``n_seeds`` seeds is within ``tol_db``."""
    seeds = range(n_seeds)
    s_lo = _mean_snr(gbar, lo, sigma_th, seeds)
    s_hi = _mean_snr(gbar, hi, sigma_th, seeds)
    if not s_lo <= target_db <= s_hi:
        raise CalibrationFailed(
            f"target {target_db} dB outside bracket [{s_lo:.2f}, {s_hi:.2f}] dB for I0 in [{lo:g}, {hi:g}]",
            {"lo": lo, "hi": hi, "snr_lo": s_lo, "snr_hi": s_hi})
    a, b = math.log(lo), math.log(hi)
    for _ in range(max_iter):
        mid = 0.5 * (a + b)
        s = _mean_snr(gbar, math.exp(mid), sigma_th, seeds)
        if abs(s - target_db) <= tol_db:
            return math.exp(mid)
        if s < target_db:
            a = mid
        else:
            b = mid
    raise CalibrationFailed(f"bisection did not reach {target_db} +/- {tol_db} dB",
                            {"I0": math.exp(0.5 * (a + b))})


@dataclass
class Sample:
    truth: np.ndarray
    gbar: np.ndarray
    ghat: np.ndarray
    f_in: np.ndarray
    snr_db: float
    seed: int = 0
    input_mode: str = "fbp"
    I0: float = float("nan")


@dataclass
class _Ctx:
    geom: Geometry
    proj: Projector = field(init=False)
    omega: float = field(init=False)

    def __post_init__(self):
        self.proj = Projector(self.geom)
        self.omega = auto_omega(power_method_norm(self.proj, 200, 0).sigma)


_CTX: dict = {}


def _ctx(geom):
    if geom not in _CTX:
        _CTX[geom] = _Ctx(geom)
    return _CTX[geom]


def input_reconstruction(ghat, geom: Geometry, mode: str, p_init: int = 6, omega: float | None = None):
    ctx = _ctx(geom)
    if mode == "fbp":
        return reconstruct_fbp(ghat, make_plan(geom))
    if mode == "artp":
        problem = LinearProblem(ctx.proj, ghat, check_adjoint=False)
        f, _ = landweber(problem, ctx.omega if omega is None else omega, p_init, trace=False, override=True)
        return f
    raise InvalidArgument(f"unknown input mode {mode!r}")


def generate_sample(geom: Geometry, idx: int, master_seed: int = 0, snr_target: float | None = 40.0,
                    I0: float | None = None, sigma_th: float = 0.01, input_mode: str = "fbp", p_init: int = 6,
                    scale: HuScale = HuScale(), phantom_fn=None) -> Sample:
    """One phantom, its clean and noisy sinograms and the input reconstruction.

    The random stream is derived from ``(master_seed, idx)`` only.
    """
    ss = np.random.SeedSequence([master_seed, idx])
    seed = int(ss.generate_state(1)[0])
    rng = np.random.default_rng(ss)
    ph = (phantom_fn or random_phantom)(rng, geom, scale=scale)
    truth = rasterize_phantom(ph, geom)
    ctx = _ctx(geom)
    gbar = ctx.proj.forward(truth)
    if I0 is None:
        if snr_target is None:
            raise InvalidArgument("either I0 or an SNR target is required")
        I0 = calibrate_snr(gbar, snr_target, sigma_th)
    ghat, snr = apply_noise(gbar, NoiseModel(I0, sigma_th, seed), rng)
    f_in = input_reconstruction(ghat, geom, input_mode, p_init)
    return Sample(truth, gbar, ghat, f_in, snr, seed, input_mode, I0)


def make_dataset(out_dir, geom: Geometry, count: int, master_seed: int = 0, input_mode: str = "fbp",
                 snr_target: float | None = 40.0, I0: float | None = None, sigma_th: float = 0.01,
                 p_init: int = 6, scale: HuScale = HuScale()) -> list:
    """Write ``count`` samples as PBTK1 files plus ``manifest.csv``."""
    if count < 1:
        raise InvalidArgument("count must be >= 1")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    rows, samples = [], []
    for idx in range(count):
        s = generate_sample(geom, idx, master_seed, snr_target, I0, sigma_th, input_mode, p_init, scale)
        names = {}
        for key, arr, kind in (("f", s.truth, KIND_IMAGE), ("gbar", s.gbar, KIND_SINOGRAM),
                               ("ghat", s.ghat, KIND_SINOGRAM), ("fin", s.f_in, KIND_IMAGE)):
            name = f"{idx:05d}_{key}.pbtk"
            path = out / name
            try:
                save_array(path, arr, kind)
            except OSError as exc:
                raise OSError(f"failed writing {path}: {exc}") from exc
            names[key] = name
        mae = float(np.mean(np.abs(mu_to_hu(s.f_in, scale) - mu_to_hu(s.truth, scale))))
        rows.append((idx, s.seed, s.snr_db, input_mode, mae, names["f"], names["gbar"], names["ghat"], names["fin"]))
        samples.append(s)
    write_rows(out / "manifest.csv", MANIFEST_HEADER, rows)
    (out / "geometry.txt").write_text(f"p={geom.p}\nq={geom.q}\nrho={geom.rho!r}\n")
    return samples


def load_dataset(root) -> tuple[Geometry, list]:
    import csv

    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.csv in {root}")
    kv = dict(line.split("=", 1) for line in (root / "geometry.txt").read_text().split())
    geom = Geometry(int(kv["p"]), int(kv["q"]), float(kv["rho"]))
    samples = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            samples.append(Sample(
                load_array(root / row["f_path"], KIND_IMAGE), load_array(root / row["gbar_path"], KIND_SINOGRAM),
                load_array(root / row["ghat_path"], KIND_SINOGRAM), load_array(root / row["fin_path"], KIND_IMAGE),
                float(row["snr_db"]), int(row["seed"]), row["input_mode"]))
    return geom, samples


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
