import csv

import numpy as np
import pytest

from parbeam.core import Geometry, disk_phantom, rasterize_phantom
from parbeam.errors import CalibrationFailed, InvalidArgument
from parbeam.radon import Projector
from parbeam.simulate import (NoiseModel, apply_noise, calibrate_snr, file_digest, generate_sample, load_dataset,
                              make_dataset, sample_counts)
from parbeam.solvers import LinearProblem, auto_omega, landweber, power_method_norm


@pytest.fixture(scope="module")
def disk40():
    g = Geometry(40, 16)
    return g, Projector(g).forward(rasterize_phantom(disk_phantom(g, 0.6, 0.2), g))


def test_noise_model_validation():
    with pytest.raises(InvalidArgument):
        NoiseModel(0.0)
    with pytest.raises(InvalidArgument):
        NoiseModel(1e3, -0.1)


def test_high_dose_limit(disk40):
    _, gbar = disk40
    ghat, _ = apply_noise(gbar, NoiseModel(1e12, 0.0, 3))
    assert np.linalg.norm(ghat - gbar) <= 1e-4 * np.linalg.norm(gbar)


def test_deterministic(disk40):
    _, gbar = disk40
    a, sa = apply_noise(gbar, NoiseModel(1e5, 0.01, 9))
    b, sb = apply_noise(gbar, NoiseModel(1e5, 0.01, 9))
    assert np.array_equal(a, b) and sa == sb


def test_nan_rejected():
    with pytest.raises(InvalidArgument):
        apply_noise(np.array([[0.1, np.nan]]), NoiseModel(1e4))


def test_clamp_keeps_output_finite():
    ghat, _ = apply_noise(np.full((3, 3), 30.0), NoiseModel(10.0, 0.5, 0))
    assert np.all(np.isfinite(ghat))
    assert ghat.max() <= np.log(10.0) + 1e-12


def test_intensity_unbiased():
    rng = np.random.default_rng(21)
    gbar = rng.uniform(0.0, 2.0, (5, 5))
    nm = NoiseModel(1e4, 0.01)
    n = 10_000
    draws = np.stack([sample_counts(gbar, nm, rng) for _ in range(n)])
    expected = nm.I0 * np.exp(-gbar)
    se = draws.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(draws.mean(axis=0) - expected) <= 3 * se)


def test_snr_monotone_in_dose(disk40):
    _, gbar = disk40
    means = [np.mean([apply_noise(gbar, NoiseModel(i0, 0.01, s))[1] for s in range(10)])
             for i0 in (1e3, 1e4, 1e5, 1e6)]
    assert all(a < b for a, b in zip(means, means[1:]))


def test_calibration_hits_target(disk40):
    _, gbar = disk40
    I0 = calibrate_snr(gbar, 40.0, 0.01)
    snr = np.mean([apply_noise(gbar, NoiseModel(I0, 0.01, 100 + s))[1] for s in range(20)])
    assert 39.5 <= snr <= 40.5


def test_calibration_monotone(disk40):
    _, gbar = disk40
    assert calibrate_snr(gbar, 10.0, 0.01) < calibrate_snr(gbar, 40.0, 0.01)
    assert calibrate_snr(gbar, 40.0, 0.001) < calibrate_snr(gbar, 40.0, 0.05)


def test_calibration_bracket_failure(disk40):
    _, gbar = disk40
    with pytest.raises(CalibrationFailed) as exc:
        calibrate_snr(gbar, 40.0, 0.01, hi=1e2)
    assert "snr_hi" in exc.value.diagnostics


def test_generate_sample_fields():
    g = Geometry(12, 8)
    s = generate_sample(g, 0, 5)
    assert s.truth.shape == g.image_shape and s.f_in.shape == g.image_shape
    assert s.gbar.shape == g.sino_shape and s.ghat.shape == g.sino_shape
    assert 38 <= s.snr_db <= 42


def test_dataset_structure(tmp_path):
    g = Geometry(8, 6)
    make_dataset(tmp_path / "d", g, 1, master_seed=3)
    files = sorted(p.name for p in (tmp_path / "d").glob("*.pbtk"))
    assert len(files) == 4
    rows = list(csv.reader(open(tmp_path / "d" / "manifest.csv")))
    assert rows[0] == ["idx", "seed", "snr_db", "input_mode", "mae_hu_input", "f_path", "gbar_path", "ghat_path",
                       "fin_path"]
    assert len(rows) == 2
    geom, samples = load_dataset(tmp_path / "d")
    assert geom == g and len(samples) == 1


def test_artp_input_is_landweber():
    g = Geometry(10, 8)
    s = generate_sample(g, 2, 1, input_mode="artp", p_init=6)
    P = Projector(g)
    omega = auto_omega(power_method_norm(P, 200, 0).sigma)
    f, _ = landweber(LinearProblem(P, s.ghat, check_adjoint=False), omega, 6, trace=False, override=True)
    assert np.array_equal(f, s.f_in)


def test_dataset_reproducible(tmp_path):
    g = Geometry(8, 6)
    make_dataset(tmp_path / "a", g, 2, master_seed=4)
    make_dataset(tmp_path / "b", g, 2, master_seed=4)
    for p in sorted((tmp_path / "a").iterdir()):
        assert file_digest(p) == file_digest(tmp_path / "b" / p.name)


def test_dataset_env_override(tmp_path, monkeypatch):
    from parbeam.io import data_dir

    monkeypatch.setenv("PARBEAM_DATA_DIR", str(tmp_path / "env"))
    assert data_dir("elsewhere") == tmp_path / "env"


def test_dataset_count_check(tmp_path):
    with pytest.raises(InvalidArgument):
        make_dataset(tmp_path, Geometry(4, 4), 0)
