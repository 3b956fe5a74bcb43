"""Noise models: closed forms, fitting, and serialization."""

import math

import numpy as np
import pytest
import torch

from divnoise import noise_models as nm
from divnoise.errors import DimensionError, DomainError, FormatError, InputError


def _gaussian_logpdf(x, mean, var):
    return -0.5 * np.log(2 * np.pi * var) - (x - mean) ** 2 / (2 * var)


def _make_gmm(seed=0):
    rng = np.random.default_rng(seed)
    weights = rng.normal(0, 0.5, (3, 2))
    means = np.zeros((3, 2))
    means[:, 0] = [0.0, 15.0, -12.0]
    means[:, 1] = [255.0, 250.0, 260.0]  # roughly identity in t
    variances = np.stack([[np.log(80.0), 0.4], [np.log(160.0), -0.3], [np.log(50.0), 0.8]])
    return nm.GmmNoiseModel(weights, means, variances, (0.0, 255.0), var_floor=1e-4)


class TestPolyEval:
    def test_matches_polyval(self):
        rng = np.random.default_rng(1)
        coeffs = rng.normal(size=(4, 3))
        t = rng.uniform(-2, 2, size=50)
        out = nm._poly_eval(torch.from_numpy(coeffs), torch.from_numpy(t)).numpy()
        for c in range(4):
            # coefficients are stored lowest order first
            expected = np.polyval(coeffs[c][::-1], t)
            np.testing.assert_allclose(out[c], expected, rtol=1e-12)

    def test_single_coeff_is_constant(self):
        coeffs = torch.tensor([[3.5]])
        t = torch.linspace(-1, 1, 7)
        np.testing.assert_allclose(nm._poly_eval(coeffs, t).numpy(), 3.5)


class TestGaussianNoiseModel:
    def test_log_prob_closed_form(self):
        rng = np.random.default_rng(2)
        model = nm.GaussianNoiseModel(sigma=17.0)
        x = torch.from_numpy(rng.normal(100, 40, 200))
        s = torch.from_numpy(rng.normal(100, 40, 200))
        got = model.log_prob(x, s).numpy()
        want = _gaussian_logpdf(x.numpy(), s.numpy(), 17.0**2)
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_requires_positive_sigma(self):
        with pytest.raises(DomainError):
            nm.GaussianNoiseModel(0.0)


class TestLinearVarianceModel:
    def test_variance_clamp(self):
        model = nm.LinearVarianceModel(a=2.0, b=-50.0, sigma_min=5.0)
        s = np.array([0.0, 10.0, 37.5, 100.0])
        # 2s - 50 clamped below at 25
        np.testing.assert_allclose(model.variance(s), [25.0, 25.0, 25.0, 150.0])

    def test_log_prob_matches_variance(self):
        rng = np.random.default_rng(3)
        model = nm.LinearVarianceModel(a=1.5, b=30.0, sigma_min=2.0)
        s = rng.uniform(0, 200, 100)
        x = rng.normal(s, 10.0)
        got = model.log_prob(torch.from_numpy(x), torch.from_numpy(s)).numpy()
        want = _gaussian_logpdf(x, s, model.variance(s))
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_sigma_min_positive(self):
        with pytest.raises(DomainError):
            nm.LinearVarianceModel(1.0, 1.0, 0.0)


class TestGmmNoiseModel:
    def test_density_normalizes(self):
        # trapezoid integral of p(x | s) over a wide grid must be ~1
        model = _make_gmm()
        xs = np.linspace(-400, 700, 30001)
        for s in (10.0, 80.0, 200.0):
            lp = model.log_prob(
                torch.from_numpy(xs), torch.full((xs.size,), s, dtype=torch.float64)
            ).numpy()
            integral = np.trapezoid(np.exp(lp), xs)
            assert integral == pytest.approx(1.0, abs=2e-3)

    def test_weights_softmax_normalized(self):
        model = _make_gmm()
        weights, _, _ = model.component_curves(np.linspace(0, 255, 20))
        np.testing.assert_allclose(weights.sum(axis=0), 1.0, rtol=1e-9)

    def test_continuity_in_signal(self):
        model = _make_gmm()
        x = torch.full((200,), 120.0, dtype=torch.float64)
        s = torch.from_numpy(np.linspace(50, 51, 200))
        lp = model.log_prob(x, s).numpy()
        steps = np.abs(np.diff(lp))
        assert steps.max() < 1e-2

    def test_variance_floor_applied(self):
        variances = np.full((2, 1), np.log(1e-12))
        model = nm.GmmNoiseModel(
            np.zeros((2, 1)), np.array([[50.0], [60.0]]), variances, (0, 255), var_floor=4.0
        )
        _, _, var = model.component_curves(np.array([100.0]))
        np.testing.assert_allclose(var, 4.0)

    def test_shape_validation(self):
        with pytest.raises(DimensionError):
            nm.GmmNoiseModel(np.zeros((2, 2)), np.zeros((3, 2)), np.zeros((2, 2)), (0, 1), 1.0)
        with pytest.raises(DomainError):
            nm.GmmNoiseModel(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)), (1, 1), 1.0)


class TestCalibration:
    def test_signal_estimate_is_frame_mean(self):
        rng = np.random.default_rng(4)
        frames = rng.normal(100, 5, (8, 6, 7)).astype(np.float32)
        calib = nm.CalibrationStack(frames)
        est = nm.estimate_signal(calib)
        np.testing.assert_allclose(est, frames.astype(np.float64).mean(axis=0), rtol=1e-6)
        assert calib.signal_estimate is est

    def test_estimate_error_shrinks_like_inverse_sqrt_m(self):
        # std of (mean-of-M - truth) over many pixels ~ sigma / sqrt(M)
        rng = np.random.default_rng(5)
        sigma, m = 20.0, 16
        truth = np.full((200, 200), 77.0)
        frames = rng.normal(truth, sigma, (m, 200, 200)).astype(np.float32)
        est = nm.estimate_signal(nm.CalibrationStack(frames))
        err_std = float((est - truth).std())
        assert err_std == pytest.approx(sigma / math.sqrt(m), rel=0.05)

    def test_single_frame_rejected(self):
        with pytest.raises(InputError):
            nm.CalibrationStack(np.zeros((1, 4, 4)))

    def test_non_3d_rejected(self):
        with pytest.raises(DimensionError):
            nm.CalibrationStack(np.zeros((4, 4)))


class TestGmmFit:
    def test_recovers_signal_dependent_gaussian(self):
        # single-component generator: sigma^2(s) = 1.5 s + 40
        rng = np.random.default_rng(6)
        s = rng.uniform(10, 240, 200_000)
        x = rng.normal(s, np.sqrt(1.5 * s + 40.0))
        cfg = nm.GmmFitConfig(n_components=2, n_coeffs=2, iterations=400, seed=0)
        model = nm.fit_gmm_pixels(x, s, cfg)
        holdout_s = rng.uniform(20, 230, 50_000)
        holdout_x = rng.normal(holdout_s, np.sqrt(1.5 * holdout_s + 40.0))
        fit_ll = nm.log_likelihood(model, holdout_x, holdout_s).mean()
        true_ll = _gaussian_logpdf(holdout_x, holdout_s, 1.5 * holdout_s + 40.0).mean()
        assert fit_ll > true_ll - 0.1

    def test_loss_trace_attached_and_improving(self):
        # bimodal residuals: the single-lobe initialization is clearly
        # suboptimal, so the trace must show real progress
        rng = np.random.default_rng(7)
        s = rng.uniform(0, 255, 50_000)
        x = s + rng.choice([-20.0, 20.0], s.size) + rng.normal(0, 5.0, s.size)
        cfg = nm.GmmFitConfig(iterations=300, seed=1)
        model = nm.fit_gmm_pixels(x, s, cfg)
        trace = model.fit_loss_trace
        assert trace.shape == (300,)
        assert trace[-50:].mean() < trace[:50].mean() - 0.05

    def test_fit_is_seed_deterministic(self):
        rng = np.random.default_rng(8)
        s = rng.uniform(0, 255, 20_000)
        x = rng.normal(s, 9.0)
        cfg = nm.GmmFitConfig(iterations=50, seed=3)
        a = nm.fit_gmm_pixels(x, s, cfg)
        b = nm.fit_gmm_pixels(x, s, cfg)
        np.testing.assert_array_equal(a.weight_coeffs, b.weight_coeffs)
        np.testing.assert_array_equal(a.mean_coeffs, b.mean_coeffs)
        np.testing.assert_array_equal(a.var_coeffs, b.var_coeffs)

    def test_fit_gmm_uses_all_observations(self):
        rng = np.random.default_rng(9)
        truth = rng.uniform(30, 220, (12, 12))
        frames = rng.normal(truth, 8.0, (4, 12, 12)).astype(np.float32)
        calib = nm.CalibrationStack(frames)
        cfg = nm.GmmFitConfig(iterations=30, seed=0)
        model = nm.fit_gmm(calib, cfg)
        assert model.metadata["fitted_pixels"] == 4 * 144

    def test_degenerate_signal_range_rejected(self):
        with pytest.raises(DomainError):
            nm.fit_gmm_pixels(
                np.ones(100), np.ones(100), nm.GmmFitConfig(iterations=5, seed=0)
            )

    def test_noise_free_data_warns(self):
        rng = np.random.default_rng(10)
        s = rng.uniform(0, 255, 20_000)
        cfg = nm.GmmFitConfig(iterations=20, seed=0)
        with pytest.warns(UserWarning):
            nm.fit_gmm_pixels(s.copy(), s, cfg)


class TestColearnedVariance:
    def test_matches_model_variance(self):
        model = nm.LinearVarianceModel(a=3.0, b=10.0, sigma_min=1.0)
        s = np.linspace(0, 100, 11)
        np.testing.assert_allclose(nm.colearned_variance(s, model), model.variance(s))


class TestLogLikelihoodWrapper:
    def test_float64_and_shape(self):
        model = nm.GaussianNoiseModel(5.0)
        x = np.random.default_rng(11).normal(0, 5, (3, 4)).astype(np.float32)
        s = np.zeros((3, 4), dtype=np.float32)
        out = nm.log_likelihood(model, x, s)
        assert out.dtype == np.float64
        assert out.shape == (3, 4)
        np.testing.assert_allclose(
            out, _gaussian_logpdf(x.astype(np.float64), 0.0, 25.0), rtol=1e-6
        )

    def test_shape_mismatch(self):
        model = nm.GaussianNoiseModel(5.0)
        with pytest.raises(DimensionError):
            nm.log_likelihood(model, np.zeros((2, 2)), np.zeros((3, 3)))


class TestSerialization:
    def test_gaussian_round_trip(self, tmp_path):
        model = nm.GaussianNoiseModel(140.0, metadata={"note": "flat"})
        path = tmp_path / "g.dnnm"
        nm.save_noise_model(path, model)
        loaded = nm.load_noise_model(path)
        assert isinstance(loaded, nm.GaussianNoiseModel)
        assert loaded.sigma == 140.0
        assert loaded.metadata == {"note": "flat"}

    def test_linear_round_trip(self, tmp_path):
        model = nm.LinearVarianceModel(2.5, -30.0, 50.0)
        path = tmp_path / "l.dnnm"
        nm.save_noise_model(path, model)
        loaded = nm.load_noise_model(path)
        assert (loaded.a, loaded.b, loaded.sigma_min) == (2.5, -30.0, 50.0)

    def test_gmm_round_trip_exact(self, tmp_path):
        model = _make_gmm(seed=12)
        path = tmp_path / "m.dnnm"
        nm.save_noise_model(path, model)
        loaded = nm.load_noise_model(path)
        np.testing.assert_array_equal(loaded.weight_coeffs, model.weight_coeffs)
        np.testing.assert_array_equal(loaded.mean_coeffs, model.mean_coeffs)
        np.testing.assert_array_equal(loaded.var_coeffs, model.var_coeffs)
        assert loaded.signal_range == model.signal_range
        assert loaded.var_floor == model.var_floor

    def test_gmm_value_count(self):
        # 3 polynomial families x C x P coefficients plus range and floor
        model = _make_gmm()
        blob = nm.serialize_noise_model(model)
        count = int.from_bytes(blob[7:11], "little")
        assert count == 3 * 3 * 2 + 3

    def test_bad_magic_rejected(self, tmp_path):
        model = nm.GaussianNoiseModel(1.0)
        blob = bytearray(nm.serialize_noise_model(model))
        blob[0] = ord(b"X")
        path = tmp_path / "bad.dnnm"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            nm.load_noise_model(path)

    def test_truncated_rejected(self, tmp_path):
        model = nm.GaussianNoiseModel(1.0)
        path = tmp_path / "trunc.dnnm"
        path.write_bytes(nm.serialize_noise_model(model)[:-3])
        with pytest.raises(FormatError):
            nm.load_noise_model(path)

    def test_unknown_version_rejected(self, tmp_path):
        model = nm.GaussianNoiseModel(1.0)
        blob = bytearray(nm.serialize_noise_model(model))
        blob[4] = 0xFF
        path = tmp_path / "ver.dnnm"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            nm.load_noise_model(path)
