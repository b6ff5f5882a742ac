import csv
import json
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from featregen.evaluation import (
    SCENARIOS,
    AssetError,
    ScenarioAssets,
    UndefinedMetricError,
    accuracy_pair,
    evaluate,
    pooled_perturbed_top1,
    restoration_accuracy,
    restoration_from_accuracies,
    run_scenario,
    write_reports_csv,
    write_reports_json,
)
from featregen.uap_attacks import ThreatSpec


class Sign1D(torch.nn.Module):
    """Class 1 when x > 0 else class 0."""

    content_hash = "toy"

    def forward(self, x):
        s = x.reshape(len(x), -1).sum(1)
        return torch.stack([-s, s], dim=1)


def toy_split(values, lo=-10.0, hi=10.0):
    x = torch.tensor(values, dtype=torch.float32).reshape(-1, 1)
    y = (x[:, 0] > 0).long()
    return SimpleNamespace(images=x, labels=y, value_range=(lo, hi))


class TestRestoration:
    def test_known_pair(self):
        assert restoration_from_accuracies(0.8, 0.4) == pytest.approx(0.75)

    def test_unaffected_is_one(self):
        assert restoration_from_accuracies(0.63, 0.63) == pytest.approx(1.0)

    def test_undefined(self):
        with pytest.raises(UndefinedMetricError):
            restoration_from_accuracies(0.0, 0.0)
        assert issubclass(UndefinedMetricError, ZeroDivisionError)

    @given(st.floats(0.01, 1.0), st.floats(0.0, 1.0))
    def test_identity(self, c, p):
        assert restoration_from_accuracies(c, p) == pytest.approx(0.5 + p / (2 * c))


class TestAccuracy:
    def test_mod_k_assignment(self):
        vals = [0.5, 1.5, 2.5, 0.5, 1.5, 2.5]
        split = toy_split(vals)
        # member 0 subtracts 1, member 1 subtracts 2: image i gets member i % 2
        clean, pert = accuracy_pair(Sign1D(), split, [torch.tensor([-1.0]), torch.tensor([-2.0])])
        shifted = [v - (1.0 if i % 2 == 0 else 2.0) for i, v in enumerate(vals)]
        assert clean == 1.0
        assert pert == pytest.approx(np.mean(np.array(shifted) > 0))

    def test_clamped(self):
        split = toy_split([0.5, 0.5], lo=0.2, hi=1.0)
        _, pert = accuracy_pair(Sign1D(), split, [torch.tensor([-5.0])])
        assert pert == 1.0

    def test_restoration_accuracy(self):
        split = toy_split([1.0, 2.0, 3.0, -1.0])
        # shift -1.5 flips 1.0 to negative (wrong) and -1.0 stays negative (right)
        r = restoration_accuracy(Sign1D(), split, [torch.tensor([-1.5])])
        assert r == pytest.approx((1.0 + 0.75) / 2)

    def test_pooled_applies_every_member_to_every_image(self):
        vals = [0.5, 1.5, 2.5, 0.5, 1.5, 2.5]
        # -1 leaves 4 of 6 positive, -2 leaves 2 of 6: pooled (4 + 2) / 12
        got = pooled_perturbed_top1(Sign1D(), toy_split(vals), [torch.tensor([-1.0]), torch.tensor([-2.0])])
        assert got == 6 / 12

    @given(st.lists(st.integers(0, 7), min_size=1, max_size=6))
    def test_pooled_equal_members_average_exactly(self, shifts):
        # identical members give exactly the single-member accuracy, with no float drift
        split = toy_split([0.5 + i for i in range(7)])
        members = [torch.tensor([-float(shifts[0])])] * len(shifts)
        assert pooled_perturbed_top1(Sign1D(), split, members) == accuracy_pair(Sign1D(), split, members[:1])[1]

    def test_errors(self):
        with pytest.raises(ValueError):
            pooled_perturbed_top1(Sign1D(), toy_split([1.0]), [])
        split = toy_split([1.0])
        with pytest.raises(ValueError):
            accuracy_pair(Sign1D(), split, [])
        with pytest.raises(ValueError):
            accuracy_pair(Sign1D(), split, [torch.zeros(2)])
        with pytest.raises(ValueError):
            accuracy_pair(Sign1D(), toy_split([]), [torch.zeros(1)])


def assets_for(split):
    return ScenarioAssets(val=split, heldout=split, same_norm=[torch.tensor([-1.5])],
                          cross_norm=[torch.tensor([-0.5])],
                          stronger_xi={1.0: [torch.tensor([-1.0])], 2.0: [torch.tensor([-2.0])]},
                          cross_model=[torch.tensor([-3.0])], heldout_attack=[torch.tensor([0.5])],
                          whitebox_spec=ThreatSpec("inf", xi=1.5, target_fooling_ratio=0.9, max_epochs=3),
                          config={"k": 1})


class TestScenarios:
    def test_every_scenario_reports_both_models(self):
        split = toy_split([1.0, 2.0, 3.0, -1.0, -2.5, 0.7])
        a = assets_for(split)
        for sc in SCENARIOS:
            reps = run_scenario(sc, Sign1D(), Sign1D(), a)
            tags = [r.scenario_id.split("/")[-1] for r in reps]
            assert tags.count("defended") == tags.count("baseline") >= 1
            for r in reps:
                assert r.scenario_id.startswith(sc + "/")
                assert r.restoration_accuracy == pytest.approx(
                    restoration_from_accuracies(r.clean_top1, r.perturbed_top1))
                assert r.config_snapshot["scenario"] == sc

    def test_stronger_xi_conditions(self):
        reps = run_scenario("stronger_xi", Sign1D(), Sign1D(), assets_for(toy_split([1.0, -1.0])))
        assert [r.scenario_id for r in reps] == [
            "stronger_xi/xi_x1/defended", "stronger_xi/xi_x1/baseline",
            "stronger_xi/xi_x2/defended", "stronger_xi/xi_x2/baseline"]

    def test_whitebox_curve_recorded(self):
        reps = run_scenario("whitebox_secondary", Sign1D(), Sign1D(), assets_for(toy_split([1.0, 2.0, -1.0])))
        for r in reps:
            assert len(r.extra["attacker_curve"]) >= 1
            assert r.extra["attacker_plateau"] == r.extra["attacker_curve"][-1]

    def test_missing_asset(self):
        with pytest.raises(AssetError):
            run_scenario("cross_norm", Sign1D(), Sign1D(), ScenarioAssets(val=toy_split([1.0])))
        with pytest.raises(AssetError):
            run_scenario("same_norm", Sign1D(), Sign1D(), ScenarioAssets())

    def test_unknown_scenario(self):
        with pytest.raises(ValueError):
            run_scenario("nope", Sign1D(), Sign1D(), assets_for(toy_split([1.0])))

    def test_deterministic(self):
        split = toy_split([1.0, 2.0, 3.0, -1.0])
        a = evaluate("x", Sign1D(), split, [torch.tensor([-1.5])])
        b = evaluate("x", Sign1D(), split, [torch.tensor([-1.5])])
        assert a.numbers() == b.numbers()


class TestOutputs:
    def test_json_and_csv(self, tmp_path):
        split = toy_split([1.0, 2.0, -1.0])
        reps = run_scenario("same_norm", Sign1D(), Sign1D(), assets_for(split))
        write_reports_json(reps, tmp_path / "r.json")
        write_reports_csv(reps, tmp_path / "r.csv")
        back = json.loads((tmp_path / "r.json").read_text())
        assert [d["scenario_id"] for d in back] == [r.scenario_id for r in reps]
        rows = list(csv.DictReader((tmp_path / "r.csv").open()))
        assert len(rows) == len(reps)
        assert float(rows[0]["restoration_accuracy"]) == pytest.approx(reps[0].restoration_accuracy, abs=1e-4)
