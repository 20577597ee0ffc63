"""Schedules, victim selection, surgery equivalence, and compression math."""
import numpy as np
import pytest

from orthoprune.engine import Tensor
from orthoprune.importance import ImportanceTable, l1_importance
from orthoprune.models import (
    FilterRef,
    build_model,
    enumerate_prunable,
    evaluate_loss,
    load_model,
    param_count,
    save_model,
)
from orthoprune.pruning import (
    CompressionReport,
    PrunePlan,
    PruningError,
    _layer_cap,
    apply_plan,
    compression_report,
    efficiency_score,
    make_plan,
    model_signature,
    schedule_ratios,
    select_victims,
)


def random_table(model, seed) -> ImportanceTable:
    rng = np.random.default_rng(seed)
    scores = {ref: float(rng.random()) for ref in enumerate_prunable(model)}
    return ImportanceTable("random", scores)


def rand_input(seed, n=4, c=3, hw=16):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, c, hw, hw)).astype(np.float32)


class TestSchedule:
    def test_worked_example(self):
        ratios = schedule_ratios(0.8, 2)
        assert ratios[0] == pytest.approx(2.0 / 3.0, abs=1e-12)
        assert ratios[1] == pytest.approx(0.4, abs=1e-12)

    def test_survival_product_telescopes_exactly(self):
        for target in np.arange(0.05, 0.96, 0.1):
            for rounds in range(1, 11):
                ratios = schedule_ratios(float(target), rounds)
                survived = 1.0
                for r in ratios:
                    survived *= 1.0 - r
                assert survived == pytest.approx(1.0 - target, abs=1e-12)

    def test_ratios_decrease(self):
        for rounds in (2, 5, 9):
            ratios = schedule_ratios(0.7, rounds)
            assert all(a > b for a, b in zip(ratios, ratios[1:]))
            assert all(0.0 < r < 1.0 for r in ratios)

    def test_validation(self):
        with pytest.raises(PruningError):
            schedule_ratios(0.0, 3)
        with pytest.raises(PruningError):
            schedule_ratios(1.0, 3)
        with pytest.raises(PruningError):
            schedule_ratios(0.5, 0)


class TestSelection:
    def test_takes_lowest_scores_first(self):
        m = build_model("plain", [4, 4], classes=3, seed=0)
        refs = enumerate_prunable(m)
        scores = {ref: float(i) for i, ref in enumerate(refs)}
        table = ImportanceTable("t", scores)
        victims = select_victims(m, table, 0.3)  # 11 units -> 3 victims
        assert victims == refs[:3]

    def test_zero_fraction_selects_nothing(self):
        m = build_model("plain", [4], classes=3)
        assert select_victims(m, random_table(m, 0), 0.0) == []

    def test_tiny_fraction_still_takes_one(self):
        m = build_model("plain", [4], classes=3)
        assert len(select_victims(m, random_table(m, 1), 0.01)) == 1

    def test_layer_cap_redirects_selection(self):
        m = build_model("plain", [4, 4], classes=3, seed=0)
        refs = enumerate_prunable(m)
        # make the first layer's 4 units the cheapest; its cap is 3
        scores = {ref: (float(ref.filter) if ref.layer == 0 else 10.0 + ref.filter + ref.layer) for ref in refs}
        table = ImportanceTable("t", scores)
        victims = select_victims(m, table, 5 / 11)  # want 5
        from_first = [v for v in victims if v.layer == 0]
        assert len(from_first) == 3
        assert len(victims) == 5

    def test_caps_by_family(self):
        plain = build_model("plain", [24], classes=3)
        res = build_model("residual", [24], classes=3)
        conv_p = plain.prunable_layers()[0]
        conv_r = [i for i in res.prunable_layers() if res.nodes[i].kind == "conv"][0]
        assert _layer_cap(plain, conv_p) == 22  # floor(0.95 * 24)
        assert _layer_cap(res, conv_r) == 23  # may shrink to a single filter

    def test_unattainable_fraction_raises(self):
        m = build_model("plain", [24], classes=3)
        with pytest.raises(PruningError, match="caps"):
            select_victims(m, random_table(m, 2), 0.93)

    def test_fraction_range_validated(self):
        m = build_model("plain", [4], classes=3)
        with pytest.raises(PruningError):
            select_victims(m, random_table(m, 3), 1.0)
        with pytest.raises(PruningError):
            select_victims(m, random_table(m, 3), -0.1)


class TestPlanIntegrity:
    def test_signature_mismatch_rejected(self):
        m1 = build_model("plain", [4], classes=3, seed=0)
        m2 = build_model("plain", [6], classes=3, seed=0)
        plan = make_plan(m1, random_table(m1, 0), 0.2)
        with pytest.raises(PruningError, match="different topology"):
            apply_plan(m2, plan)

    def test_signature_survives_weight_changes_only(self):
        m = build_model("plain", [4], classes=3, seed=0)
        sig = model_signature(m)
        m.nodes[0].weight.data += 1.0
        assert model_signature(m) == sig
        pruned = apply_plan(m, make_plan(m, random_table(m, 0), 0.2))
        assert model_signature(pruned) != sig

    def test_duplicate_victims_rejected(self):
        m = build_model("plain", [4], classes=3)
        plan = PrunePlan(model_signature(m), (FilterRef(0, 1), FilterRef(0, 1)))
        with pytest.raises(PruningError, match="duplicate"):
            apply_plan(m, plan)

    def test_emptying_a_layer_rejected(self):
        m = build_model("plain", [4], classes=3)
        plan = PrunePlan(model_signature(m), tuple(FilterRef(0, f) for f in range(4)))
        with pytest.raises(PruningError, match="empty"):
            apply_plan(m, plan)

    def test_round_trip_dict(self):
        m = build_model("plain", [4], classes=3)
        plan = make_plan(m, random_table(m, 4), 0.3)
        assert PrunePlan.from_dict(plan.to_dict()) == plan

    def test_empty_plan_is_identity(self):
        m = build_model("residual", [6, 8], classes=4, seed=1)
        plan = PrunePlan(model_signature(m), ())
        out = apply_plan(m, plan)
        s1, s2 = m.state_dict(), out.state_dict()
        assert set(s1) == set(s2)
        for k in s1:
            np.testing.assert_array_equal(s1[k], s2[k])

    def test_original_model_untouched(self):
        m = build_model("depthsep", [6, 8, 10], classes=4, seed=2)
        before = {k: v.copy() for k, v in m.state_dict().items()}
        apply_plan(m, make_plan(m, random_table(m, 5), 0.3))
        after = m.state_dict()
        assert set(before) == set(after)
        for k in before:
            np.testing.assert_array_equal(before[k], after[k])


FAMILY_SPECS = {
    "plain": dict(widths=[6, 8], blocks_per_stage=[2, 1], classes=5),
    "residual": dict(widths=[6, 8], blocks_per_stage=[1, 2], classes=5),
    "depthsep": dict(widths=[6, 8, 10], blocks_per_stage=[1, 1, 2], classes=5),
}


def assert_mask_equivalence(model, victims, x, tol=1e-5):
    mask = model.mask_for_units(victims)
    masked = model.forward(Tensor(x), mask=mask).data
    plan = PrunePlan(model_signature(model), tuple(victims))
    pruned = apply_plan(model, plan)
    direct = pruned.forward(Tensor(x)).data
    np.testing.assert_allclose(direct, masked, atol=tol)
    return pruned


class TestSurgeryEquivalence:
    """Structural removal must match activation masking on the same units."""

    @pytest.mark.parametrize("family", sorted(FAMILY_SPECS))
    @pytest.mark.parametrize("seed", range(8))
    def test_random_plans(self, family, seed):
        model = build_model(family, seed=seed, **FAMILY_SPECS[family])
        rng = np.random.default_rng(100 + seed)
        fraction = float(rng.uniform(0.05, 0.45))
        victims = select_victims(model, random_table(model, seed), fraction)
        assert_mask_equivalence(model, victims, rand_input(seed))

    @pytest.mark.parametrize("family", sorted(FAMILY_SPECS))
    def test_train_mode_equivalence(self, family):
        model = build_model(family, seed=3, **FAMILY_SPECS[family])
        victims = select_victims(model, random_table(model, 7), 0.25)
        x = rand_input(11)
        mask = model.mask_for_units(victims)
        masked = model.forward(Tensor(x), training=True, mask=mask).data
        pruned = apply_plan(model, PrunePlan(model_signature(model), tuple(victims)))
        direct = pruned.forward(Tensor(x), training=True).data
        np.testing.assert_allclose(direct, masked, atol=1e-5)

    def test_residual_every_removal_pattern(self):
        model = build_model("residual", [6, 8], blocks_per_stage=[1, 1], classes=5, seed=4)
        nodes = model.nodes
        stem = 0
        begins = [i for i, n in enumerate(nodes) if n.kind == "residual_begin"]
        conv1s = [b + 1 for b in begins]
        conv2s = [b + 4 for b in begins]
        head = model.prunable_layers()[-1]
        victims = [
            FilterRef(stem, 1),
            FilterRef(stem, 4),
            FilterRef(begins[0], 0),
            FilterRef(begins[1], 3),
            FilterRef(conv1s[0], 2),
            FilterRef(conv1s[1], 5),
            FilterRef(conv2s[0], 1),
            FilterRef(conv2s[1], 6),
            FilterRef(head, 2),
        ]
        pruned = assert_mask_equivalence(model, victims, rand_input(5))
        # the pruned logits keep all five classes, with class 2 pinned to zero
        out = pruned.forward(Tensor(rand_input(6))).data
        assert out.shape[1] == 5
        assert np.all(out[:, 2] == 0.0)

    def test_depthsep_couples_partner_depthwise(self):
        model = build_model("depthsep", [6, 8, 10], classes=4, seed=5)
        pws = [i for i, n in enumerate(model.nodes) if n.kind == "pointwise"]
        victims = [FilterRef(pws[0], 2), FilterRef(pws[0], 5)]
        pruned = assert_mask_equivalence(model, victims, rand_input(7))
        dw = model.next_depthwise(pws[0])
        assert pruned.nodes[pws[0]].weight.shape[0] == 6
        assert pruned.nodes[dw].weight.shape[0] == 6
        # the pointwise conv after the partner depthwise lost input slices
        nxt = [i for i, n in enumerate(pruned.nodes) if n.kind == "pointwise"][1]
        assert pruned.nodes[nxt].weight.shape[1] == 6

    def test_repeated_rounds_compose(self):
        model = build_model("residual", [6, 8], blocks_per_stage=[1, 1], classes=5, seed=6)
        counts = [len(enumerate_prunable(model))]
        for k, ratio in enumerate(schedule_ratios(0.5, 3)):
            victims = select_victims(model, random_table(model, 20 + k), ratio)
            model = assert_mask_equivalence(model, victims, rand_input(20 + k))
            counts.append(len(enumerate_prunable(model)))
        assert all(a > b for a, b in zip(counts, counts[1:]))
        assert counts[-1] <= int(np.ceil(counts[0] * 0.55))

    def test_unit_count_decreases_exactly(self):
        for family in sorted(FAMILY_SPECS):
            model = build_model(family, seed=8, **FAMILY_SPECS[family])
            before = len(enumerate_prunable(model))
            victims = select_victims(model, random_table(model, 9), 0.3)
            pruned = apply_plan(model, PrunePlan(model_signature(model), tuple(victims)))
            assert len(enumerate_prunable(pruned)) == before - len(victims)

    def test_survivor_weights_preserved(self):
        model = build_model("plain", [6, 8], classes=4, seed=9)
        victims = [FilterRef(0, 1), FilterRef(0, 4)]
        pruned = apply_plan(model, PrunePlan(model_signature(model), tuple(victims)))
        keep = [0, 2, 3, 5]
        np.testing.assert_array_equal(
            pruned.nodes[0].weight.data, model.nodes[0].weight.data[keep]
        )
        np.testing.assert_array_equal(
            pruned.nodes[1].scale.data, model.nodes[1].scale.data[keep]
        )
        consumer = next(i for i, n in enumerate(model.nodes[1:], start=1) if n.kind == "conv")
        np.testing.assert_array_equal(
            pruned.nodes[consumer].weight.data,
            model.nodes[consumer].weight.data[:, keep],
        )

    def test_pruned_model_serializes(self, tmp_path):
        model = build_model("residual", [6, 8], classes=4, seed=10)
        victims = select_victims(model, random_table(model, 11), 0.35)
        pruned = apply_plan(model, PrunePlan(model_signature(model), tuple(victims)))
        path = tmp_path / "pruned.bin"
        save_model(path, pruned)
        loaded, _, _ = load_model(path)
        x = rand_input(12)
        np.testing.assert_array_equal(
            pruned.forward(Tensor(x)).data, loaded.forward(Tensor(x)).data
        )


class TestCompression:
    def test_figure_of_merit_reference_points(self):
        assert efficiency_score(15.7, 0.835) == pytest.approx(13.1, abs=0.05)
        assert efficiency_score(14.6, 0.724) == pytest.approx(10.6, abs=0.05)
        assert efficiency_score(27.3, 0.807) == pytest.approx(22.0, abs=0.05)

    def test_report_by_hand(self):
        model = build_model("plain", [4], classes=3, seed=0)
        victims = [FilterRef(0, 0), FilterRef(0, 3), FilterRef(model.prunable_layers()[-1], 1)]
        pruned = apply_plan(model, PrunePlan(model_signature(model), tuple(victims)))
        rep = compression_report(model, pruned, (8, 8))
        assert rep.params_original == 108 + 8 + 12
        assert rep.params_pruned == (2 * 27) + 4 + (2 * 2)
        assert rep.flops_original == 8 * 8 * 9 * 3 * 4 + 8 * 8 * 4 * 3
        assert rep.flops_pruned == 8 * 8 * 9 * 3 * 2 + 8 * 8 * 2 * 2
        assert rep.compression_ratio == pytest.approx(128 / 62)
        assert rep.flops_reduction == pytest.approx(1.0 - rep.flops_pruned / rep.flops_original)
        assert rep.efficiency == pytest.approx(rep.compression_ratio * rep.flops_reduction)

    def test_report_round_trips_to_dict(self):
        rep = CompressionReport(100, 50, 1000, 400)
        d = rep.to_dict()
        assert d["compression_ratio"] == pytest.approx(2.0)
        assert d["flops_reduction"] == pytest.approx(0.6)
        assert d["efficiency"] == pytest.approx(1.2)
