"""Correlation machinery and dependence measurements."""
import numpy as np
import pytest

from orthoprune.data import SyntheticSpec, generate_synthetic
from orthoprune.experiments import (
    ExperimentError,
    gram_experiment,
    partial_correlation_stats,
    partial_correlations,
    pearson,
    reliability_experiment,
)
from orthoprune.models import build_model
from orthoprune.ortho import filter_cosine_stats


class TestPearson:
    def test_matches_library_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.normal(size=50)
            y = rng.normal(size=50) + 0.5 * x
            assert pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], rel=1e-12)

    def test_perfect_linear_relationships(self):
        x = np.arange(10.0)
        assert pearson(x, 3 * x + 1) == pytest.approx(1.0, abs=1e-12)
        assert pearson(x, -2 * x + 5) == pytest.approx(-1.0, abs=1e-12)

    def test_zero_variance_raises(self):
        with pytest.raises(ExperimentError, match="zero variance"):
            pearson(np.ones(5), np.arange(5.0))

    def test_shape_validation(self):
        with pytest.raises(ExperimentError):
            pearson(np.arange(3.0), np.arange(4.0))
        with pytest.raises(ExperimentError):
            pearson(np.array([1.0]), np.array([2.0]))


def small_case(seed=0):
    ds = generate_synthetic(
        SyntheticSpec(classes=3, train_per_class=10, val_per_class=8, image_hw=8, seed=seed)
    )
    model = build_model("plain", [6], classes=3, seed=seed)
    return model, ds


class TestReliability:
    def test_structure_and_determinism(self):
        model, ds = small_case(1)
        a = reliability_experiment(model, ds.val_images, ds.val_labels, 3, 8, seed=5)
        b = reliability_experiment(model, ds.val_images, ds.val_labels, 3, 8, seed=5)
        assert a.estimates.shape == (8,)
        assert a.truths.shape == (8,)
        np.testing.assert_array_equal(a.estimates, b.estimates)
        np.testing.assert_array_equal(a.truths, b.truths)
        assert a.r == b.r
        assert not a.degenerate
        assert -1.0 <= a.r <= 1.0
        assert np.all(a.estimates >= 0.0) and np.all(a.truths >= 0.0)

    def test_different_seed_changes_groups(self):
        model, ds = small_case(2)
        a = reliability_experiment(model, ds.val_images, ds.val_labels, 3, 8, seed=1)
        b = reliability_experiment(model, ds.val_images, ds.val_labels, 3, 8, seed=2)
        assert not np.array_equal(a.truths, b.truths)

    def test_degenerate_inputs_flagged(self):
        model, ds = small_case(3)
        # zeroed conv weights and affines give exactly zero scores each group
        for node in model.nodes:
            if node.weight is not None:
                node.weight.data[...] = 0.0
            if node.scale is not None:
                node.scale.data[...] = 0.0
        res = reliability_experiment(model, ds.val_images, ds.val_labels, 2, 4, seed=0)
        assert res.degenerate
        assert np.isnan(res.r)

    def test_parameter_validation(self):
        model, ds = small_case(4)
        with pytest.raises(ExperimentError, match="groups"):
            reliability_experiment(model, ds.val_images, ds.val_labels, 2, 1)
        with pytest.raises(ExperimentError, match="group_size"):
            reliability_experiment(model, ds.val_images, ds.val_labels, 999, 4)

    def test_groups_draw_from_convolutional_units_only(self):
        # the [6]-plain model has 6 conv units plus 3 classifier rows; the
        # sampling pool must stop at the conv units
        model, ds = small_case(5)
        res = reliability_experiment(model, ds.val_images, ds.val_labels, 6, 2, seed=0)
        assert res.group_size == 6
        with pytest.raises(ExperimentError, match="outside"):
            reliability_experiment(model, ds.val_images, ds.val_labels, 7, 2, seed=0)


class TestPartialCorrelations:
    def test_independent_columns_stay_small(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4000, 6))
        partial = partial_correlations(x)
        iu = np.triu_indices(6, k=1)
        assert np.median(np.abs(partial[iu])) < 0.15
        assert np.abs(partial[iu]).max() < 0.3

    def test_duplicated_column_saturates(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(500, 4))
        x[:, 1] = x[:, 0]
        partial = partial_correlations(x)
        assert abs(partial[0, 1]) > 0.99

    def test_conditioning_removes_chain_links(self):
        # x2 = x1 + noise, x3 = x2 + noise: marginally x1 and x3 correlate
        # strongly, but given x2 almost nothing remains
        rng = np.random.default_rng(7)
        x1 = rng.normal(size=8000)
        x2 = x1 + 0.3 * rng.normal(size=8000)
        x3 = x2 + 0.3 * rng.normal(size=8000)
        feats = np.stack([x1, x2, x3], axis=1)
        marginal = np.corrcoef(feats, rowvar=False)[0, 2]
        partial = partial_correlations(feats)[0, 2]
        assert marginal > 0.8
        assert abs(partial) < 0.2

    def test_symmetry_and_unit_diagonal(self):
        rng = np.random.default_rng(8)
        partial = partial_correlations(rng.normal(size=(200, 5)))
        np.testing.assert_allclose(partial, partial.T, atol=1e-12)
        np.testing.assert_allclose(np.diag(partial), 1.0, atol=1e-12)

    def test_validation(self):
        with pytest.raises(ExperimentError):
            partial_correlations(np.zeros((10, 1)))
        with pytest.raises(ExperimentError):
            partial_correlations(np.zeros((10, 3)), ridge=-1.0)


class TestModelLevelStats:
    def test_covers_regularized_layers_only(self):
        model, ds = small_case(9)
        stats = partial_correlation_stats(model, ds.val_images)
        assert set(stats) == {"conv0_0"}
        entry = stats["conv0_0"]
        assert entry["channels"] == 6
        assert entry["dropped_constant"] == 0
        assert 0.0 <= entry["median_abs"] <= entry["max_abs"] <= 1.0 + 1e-9

    def test_duplicated_filter_saturates_through_the_model(self):
        model, ds = small_case(10)
        model.nodes[0].weight.data[1] = model.nodes[0].weight.data[0]
        stats = partial_correlation_stats(model, ds.val_images)
        assert stats["conv0_0"]["max_abs"] > 0.99

    def test_masked_channel_dropped_as_constant(self):
        model, ds = small_case(11)
        model.nodes[0].weight.data[2] = 0.0
        model.nodes[1].scale.data[2] = 0.0
        model.nodes[1].shift.data[2] = 0.0
        stats = partial_correlation_stats(model, ds.val_images)
        assert stats["conv0_0"]["dropped_constant"] == 1
        assert stats["conv0_0"]["channels"] == 5

    def test_gram_experiment_matches_cosine_stats(self):
        model, _ = small_case(12)
        stats = gram_experiment(model)
        names = {n for n, _ in model.regularized_layers()}
        assert set(stats) == names
        mean_abs, max_abs = filter_cosine_stats(model.nodes[0].weight.data)
        assert stats["conv0_0"]["mean_abs"] == pytest.approx(mean_abs)
        assert stats["conv0_0"]["max_abs"] == pytest.approx(max_abs)
        assert stats["conv0_0"]["filters"] == 6
