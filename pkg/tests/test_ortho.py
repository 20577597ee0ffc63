"""Regularizer math: coefficients, penalties, spectra, and gradients."""
import numpy as np
import pytest

from orthoprune import engine as en
from orthoprune.engine import Tensor, finite_difference_check
from orthoprune.models import build_model
from orthoprune.ortho import (
    OrthoConfig,
    OrthoError,
    default_lambda,
    filter_cosine_stats,
    gram_penalty,
    layer_coefficients,
    ortho_loss,
    penalty_report,
    penalty_value,
    resolve_lambda,
    singular_spectrum,
    spectrum_stats,
)


class TestConfig:
    def test_range_enforced(self):
        OrthoConfig(0.001)
        OrthoConfig(0.1)
        with pytest.raises(OrthoError, match="0.0005"):
            OrthoConfig(0.0005)
        with pytest.raises(OrthoError):
            OrthoConfig(0.5)

    def test_disabled_skips_range_check(self):
        OrthoConfig(0.0, enabled=False)

    def test_family_defaults(self):
        assert default_lambda("plain") == 0.01
        assert default_lambda("residual") == 0.01
        assert default_lambda("depthsep") == 0.001

    def test_resolve_auto(self):
        assert resolve_lambda("auto", "depthsep") == 0.001
        assert resolve_lambda(0.02, "plain") == 0.02
        with pytest.raises(OrthoError, match="auto"):
            resolve_lambda("big", "plain")


class TestCoefficients:
    def test_sqrt_weighting_two_layers(self):
        m = build_model("plain", [16, 64], classes=4)
        alphas = layer_coefficients(m)
        assert alphas["conv0_0"] == pytest.approx(1.0 / 3.0, abs=1e-15)
        assert alphas["conv1_0"] == pytest.approx(2.0 / 3.0, abs=1e-15)

    def test_sum_to_one(self):
        for family, widths in [
            ("plain", [8, 16]),
            ("residual", [8, 16]),
            ("depthsep", [8, 16, 24]),
        ]:
            m = build_model(family, widths, classes=4)
            assert sum(layer_coefficients(m).values()) == pytest.approx(1.0, abs=1e-12)

    def test_head_excluded_projection_included(self):
        m = build_model("residual", [8, 16], classes=4)
        names = set(layer_coefficients(m))
        assert "head" not in names
        assert "b1_begin_proj" in names
        assert "stem" in names


class TestGramPenalty:
    def test_orthonormal_rows_score_zero(self):
        rng = np.random.default_rng(0)
        q, _ = np.linalg.qr(rng.normal(size=(9, 9)))
        w = q[:4].reshape(4, 1, 3, 3).astype(np.float32)
        assert gram_penalty(Tensor(w)).item() < 1e-5

    def test_matches_float64_reference(self):
        rng = np.random.default_rng(1)
        for shape in [(4, 3, 3, 3), (8, 1, 2, 2), (12, 2, 1, 1), (5, 5, 1, 1)]:
            w = rng.normal(size=shape).astype(np.float32)
            taped = gram_penalty(Tensor(w)).item()
            assert taped == pytest.approx(penalty_value(w), rel=1e-5)

    def test_fat_fallback_uses_smaller_gram(self):
        # 8 filters of 4 weights each: rows cannot be orthonormal, so the
        # penalty must work on the 4x4 column Gram instead of the 8x8 one
        rng = np.random.default_rng(2)
        w = rng.normal(size=(8, 1, 2, 2)).astype(np.float32)
        mat = w.reshape(8, 4).astype(np.float64)
        fat = np.abs(mat.T @ mat - np.eye(4)).sum()
        tall = np.abs(mat @ mat.T - np.eye(8)).sum()
        got = gram_penalty(Tensor(w)).item()
        assert got == pytest.approx(fat, rel=1e-5)
        assert abs(got - tall) > 1e-3

    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(3)
        for shape in [(4, 2, 2, 2), (6, 1, 2, 2)]:
            w = Tensor(rng.normal(size=shape) * 0.5, dtype=np.float64, requires_grad=True)
            rel = finite_difference_check(lambda: gram_penalty(w), [w])
            assert rel < 1e-3

    def test_group_sum_bounded_by_gram_mass(self):
        # |sum of filters|^2 = sum of all Gram entries <= entrywise L1 of Gram
        rng = np.random.default_rng(4)
        for _ in range(20):
            m, q = rng.integers(2, 10), rng.integers(2, 12)
            w = rng.normal(size=(m, q))
            lhs = float(np.sum(w.sum(axis=0) ** 2))
            gram_l1 = float(np.abs(w @ w.T).sum())
            assert lhs <= gram_l1 + 1e-9


class TestOrthoLoss:
    def test_weighted_sum_of_layer_penalties(self):
        m = build_model("plain", [6, 12], classes=3, seed=7)
        total = ortho_loss(m).item()
        alphas = layer_coefficients(m)
        expect = sum(alphas[n] * p for n, p in penalty_report(m).items())
        assert total == pytest.approx(expect, rel=1e-5)

    def test_backward_scales_layer_gradients(self):
        m = build_model("plain", [6, 12], classes=3, seed=8)
        with en.GradTape():
            loss = ortho_loss(m)
        en.backward(loss)
        g_model = m.nodes[0].weight.grad.copy()
        m.zero_grads()
        with en.GradTape():
            p = gram_penalty(m.nodes[0].weight)
        en.backward(p)
        alpha = layer_coefficients(m)["conv0_0"]
        np.testing.assert_allclose(g_model, alpha * m.nodes[0].weight.grad, rtol=1e-5, atol=1e-7)

    def test_gradient_is_zero_at_exactly_orthonormal_point(self):
        # subgradient convention: d|0|/dx = 0. This only fires when the Gram
        # residual is exactly zero, which the identity matrix guarantees even
        # in float32; an approximately orthonormal matrix would still see
        # +-1 sized subgradients on every tiny residual entry.
        w = Tensor(np.eye(4, dtype=np.float32).reshape(4, 4, 1, 1), requires_grad=True)
        with en.GradTape():
            p = gram_penalty(w)
        en.backward(p)
        assert p.item() == 0.0
        assert np.abs(w.grad).max() == 0.0


class TestSpectrum:
    def test_matches_eigendecomposition_oracle(self):
        rng = np.random.default_rng(6)
        w = rng.normal(size=(6, 3, 3, 3))
        s = singular_spectrum(w)
        mat = w.reshape(6, -1)
        ev = np.linalg.eigvalsh(mat @ mat.T)
        oracle = np.sqrt(np.clip(ev, 0.0, None))[::-1]
        np.testing.assert_allclose(s, oracle, atol=1e-8)

    def test_orthonormal_rows_have_unit_spectrum(self):
        rng = np.random.default_rng(7)
        q, _ = np.linalg.qr(rng.normal(size=(9, 9)))
        w = q[:5].reshape(5, 1, 3, 3)
        np.testing.assert_allclose(singular_spectrum(w), np.ones(5), atol=1e-12)

    def test_stats_cover_regularized_layers(self):
        m = build_model("residual", [6, 8], classes=3, seed=1)
        stats = spectrum_stats(m)
        assert set(stats) == {n for n, _ in m.regularized_layers()}
        for entry in stats.values():
            assert entry["min"] <= entry["median"] <= entry["max"]


class TestCosineStats:
    def test_orthogonal_filters_have_zero_offdiag(self):
        w = np.eye(4, dtype=np.float32).reshape(4, 4, 1, 1) * 3.0
        mean, mx = filter_cosine_stats(w)
        assert mean == pytest.approx(0.0, abs=1e-12)
        assert mx == pytest.approx(0.0, abs=1e-12)

    def test_duplicated_filter_hits_one(self):
        rng = np.random.default_rng(8)
        w = rng.normal(size=(4, 2, 2, 2))
        w[1] = w[0]
        mean, mx = filter_cosine_stats(w)
        assert mx == pytest.approx(1.0, abs=1e-12)
        assert 0.0 < mean <= 1.0

    def test_single_filter_degenerates_to_zero(self):
        assert filter_cosine_stats(np.ones((1, 2, 2, 2))) == (0.0, 0.0)
