import math

import numpy as np
import pytest

import ulcerforge as uf


def test_schedule_endpoints():
    s = uf.build_linear_schedule()
    assert s.steps == 1000
    assert s.beta(1) == np.float32(1e-4)
    assert s.beta(1000) == np.float32(0.02)
    bars = np.asarray(s.alpha_bars)
    assert np.all(np.diff(bars) < 0)
    betas = np.linspace(1e-4, 0.02, 1000)
    assert bars[-1] == pytest.approx(np.prod(1.0 - betas), rel=1e-5)
    with pytest.raises(uf.IndexError):
        s.beta(0)


def test_forward_diffuse_matches_closed_form():
    s = uf.build_linear_schedule()
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, size=(2, 1, 4, 4)).astype(np.float32)
    eps = rng.standard_normal(size=x0.shape).astype(np.float32)
    ab = float(s.alpha_bar(300))
    expect = math.sqrt(ab) * x0 + math.sqrt(1 - ab) * eps
    np.testing.assert_allclose(uf.forward_diffuse(x0, 300, eps, s), expect, atol=1e-6)
    with pytest.raises(uf.DimensionError):
        uf.forward_diffuse(x0, 3, eps[:1], s)


def test_denoiser_shapes_and_zero_start():
    d = uf.init_denoiser({"base_channels": 8, "res_blocks": 1}, seed=1)
    assert d.parameter_count == sum(d.parameter(n).size for n in d.names())
    x = np.zeros((3, 1, 8, 8), dtype=np.float32)
    out = d.predict_noise(x, 10)
    assert out.shape == x.shape
    assert not out.any()
    with pytest.raises(uf.ConfigError):
        uf.init_denoiser({"base_channels": 8, "groups_for_norm": 3})


def test_fit_and_sample_are_seeded():
    data = uf.make_blob_dataset(8, 8, 2)
    assert data.shape == (8, 1, 8, 8)
    assert data.min() >= -1 and data.max() <= 1
    s = uf.build_linear_schedule(50)
    model = {"base_channels": 8, "res_blocks": 1}
    train = {"batch_size": 4, "epochs": 1, "seed": 5}
    d1, losses1 = uf.fit(data, model, train, s)
    d2, losses2 = uf.fit(data, model, train, s)
    assert len(losses1) == 2 and losses1 == losses2
    a, b = uf.sample(d1, s, 2, seed=3), uf.sample(d2, s, 2, seed=3)
    assert a.shape == (2, 1, 8, 8)
    assert np.array_equal(a, b)


def test_fid_and_kid_examples():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((30, 3))
    assert uf.fid(x, x) <= 1e-10
    assert uf.fid(x, x + 1.0) == pytest.approx(3.0, abs=1e-9)
    eye = np.eye(2)
    assert uf.kid(eye, eye, subset_size=2, subsets=1)[0] == pytest.approx(-2.375, abs=1e-9)
    same = np.full((4, 3), 0.5)
    assert uf.mmd2_unbiased(same, same) == 0.0


def test_statistics():
    r = uf.t_test_summary(2.52, 0.70, 50, 2.10, 0.88, 50)
    assert r["df"] == 98
    assert 0.005 <= r["p"] <= 0.015
    scipy_stats = pytest.importorskip("scipy.stats")
    a, b = [1.0, 2.0, 3.0, 5.0], [2.0, 4.0, 4.5, 7.0, 8.0]
    ref = scipy_stats.ttest_ind(a, b)
    got = uf.t_test_samples(a, b)
    assert got["t"] == pytest.approx(ref.statistic, rel=1e-10)
    assert got["p"] == pytest.approx(ref.pvalue, rel=1e-8)
    welch = scipy_stats.ttest_ind(a, b, equal_var=False)
    assert uf.t_test_samples(a, b, "welch")["p"] == pytest.approx(welch.pvalue, rel=1e-8)
    assert uf.pearson_r([1, 2, 3], [2, 4, 7]) == pytest.approx(np.corrcoef([1, 2, 3], [2, 4, 7])[0, 1])


def test_fixture_report():
    r = uf.fixture_report()
    assert r["fraction_marked_real"] == pytest.approx(0.77)
    assert r["real_accuracy"] == pytest.approx(0.84)
    assert r["synthetic_accuracy"] == pytest.approx(0.30)
    assert r["fooling_rate"] == pytest.approx(0.70)
    assert r["classes"]["real"]["marked_real"]["mean"] == pytest.approx(2.52)
    assert r["classes"]["synthetic"]["marked_real"]["mean"] == pytest.approx(2.10)


def test_gradchecks():
    errors = dict(uf.gradcheck_ops(1))
    assert errors and all(e <= 1e-3 for e in errors.values())
    assert uf.gradcheck_denoiser({"base_channels": 8, "res_blocks": 1}, 2) <= 1e-2


def test_cli_exit_codes(tmp_path):
    code, out, err = uf.run_command(["gradcheck", "--no-such-flag"])
    assert code == 2
    code, out, err = uf.run_command(["--config", str(tmp_path / "missing.json"), "gradcheck"])
    assert code == 1 and err.startswith("error: io: ") and err.count("\n") == 1
    code, out, _ = uf.run_command(["fixture", "paper-aggregates", "--out", str(tmp_path)])
    assert code == 0 and "fooling_rate 0.70" in out
    assert (tmp_path / "run.json").exists()
