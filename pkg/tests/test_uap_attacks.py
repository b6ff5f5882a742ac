import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from featregen.uap_attacks import (
    AttackError,
    DiversityExhaustedError,
    PerturbationSet,
    ThreatSpec,
    UniversalPerturbation,
    build_perturbation_set,
    cosine,
    derived_seeds,
    fooling_ratio,
    generate_universal,
    linf_budget,
    load_perturbation,
    project,
    save_perturbation,
    scaled_l2_budget,
)


class Linear2(torch.nn.Module):
    """Two-class linear toy: logits (w.x + b, -(w.x + b))."""

    def __init__(self, w=(1.0, -2.0), b=0.0):
        super().__init__()
        self.w = torch.tensor(w)
        self.b = b

    def forward(self, x):
        s = x.reshape(len(x), -1) @ self.w + self.b
        return torch.stack([s, -s], dim=1)


class Poison(torch.nn.Module):
    def forward(self, x):
        return (x.reshape(len(x), -1).sum(1, keepdim=True) * torch.tensor([[math.nan, 1.0]]))


def split(x, lo=-100.0, hi=100.0):
    return SimpleNamespace(images=x, value_range=(lo, hi))


def grid_points():
    g = torch.linspace(-1, 1, 21)
    return torch.cartesian_prod(g, g) + 0.013


class TestBudgets:
    def test_linf(self):
        assert linf_budget() == pytest.approx(10 / 255)

    def test_scaled_l2(self):
        expected = 2000 * math.sqrt(3 * 32 * 32 / (3 * 224 * 224)) / 255
        assert scaled_l2_budget((3, 32, 32)) == pytest.approx(expected, rel=1e-12)
        assert scaled_l2_budget((3, 224, 224)) == pytest.approx(2000 / 255)

    @given(st.integers(0, 10_000), st.floats(0.01, 3.0))
    def test_projection(self, seed, xi):
        v = torch.randn(3, 4, 4, generator=torch.Generator().manual_seed(seed)) * 3
        assert float(project(v, "inf", xi).abs().max()) <= xi + 1e-6
        assert float(torch.linalg.vector_norm(project(v, 2, xi))) <= xi * (1 + 1e-6)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ThreatSpec(norm_type=1)
        with pytest.raises(ValueError):
            ThreatSpec(target_fooling_ratio=1.0)
        with pytest.raises(ValueError):
            ThreatSpec(update="adam")
        assert ThreatSpec(norm_type="l2").update_rule == "normalized"
        assert ThreatSpec().update_rule == "sign"


class TestFoolingRatio:
    def test_zero_perturbation(self):
        assert fooling_ratio(Linear2(), split(grid_points()), torch.zeros(2)) == 0.0

    @pytest.mark.parametrize("xi", [0.05, 0.2, 0.5])
    def test_toy_matches_enumeration(self, xi):
        x = grid_points()
        w = np.array([1.0, -2.0])
        v = -xi * np.sign(w)
        xs = x.numpy().astype(np.float64)
        before = np.sign(xs @ w)
        after = np.sign((xs + v) @ w)
        expected = float(np.mean(before != after))
        got = fooling_ratio(Linear2(), split(x), torch.tensor(v, dtype=torch.float32))
        assert got == expected

    def test_clipping_applied(self):
        x = torch.full((4, 2), 0.9)
        # clipped at 1.0 the score reaches only -0.2; unclipped it would reach +0.6
        m = Linear2((1.0, 1.0), -2.2)
        assert fooling_ratio(m, split(x, 0.0, 1.0), torch.tensor([0.5, 0.5])) == 0.0
        assert fooling_ratio(m, split(x), torch.tensor([0.5, 0.5])) == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            fooling_ratio(Linear2(), split(torch.zeros(0, 2)), torch.zeros(2))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            fooling_ratio(Linear2(), split(grid_points()), torch.zeros(3))


class TestGenerate:
    def test_linf_postcondition_and_target(self):
        spec = ThreatSpec("inf", xi=0.3, target_fooling_ratio=0.2, max_epochs=20, batch_size=50)
        p = generate_universal(Linear2(), split(grid_points()), spec, seed=0)
        assert p.norm("inf") <= 0.3 + 1e-6
        assert p.achieved_fooling_ratio >= 0.2 and not p.below_target
        assert p.achieved_fooling_ratio == fooling_ratio(Linear2(), split(grid_points()), p.v)

    def test_l2_postcondition(self):
        spec = ThreatSpec(2, xi=0.25, target_fooling_ratio=0.5, max_epochs=5, batch_size=64)
        p = generate_universal(Linear2(), split(grid_points()), spec, seed=1)
        assert p.norm(2) <= 0.25 * (1 + 1e-6)

    def test_unreachable_target_is_flagged(self):
        spec = ThreatSpec("inf", xi=0.01, target_fooling_ratio=0.9, max_epochs=3)
        p = generate_universal(Linear2(), split(grid_points()), spec, seed=0)
        assert p.below_target
        assert p.meta["epochs"] == 3

    def test_direction_is_against_weight(self):
        # the best universal push on a linear model opposes the majority side
        spec = ThreatSpec("inf", xi=0.4, target_fooling_ratio=0.99, max_epochs=10, batch_size=441)
        x = grid_points() + torch.tensor([0.5, 0.0])  # mostly positive w.x
        p = generate_universal(Linear2(), split(x), spec, seed=0)
        assert torch.equal(torch.sign(p.v), torch.tensor([-1.0, 1.0]))

    def test_seeded(self):
        spec = ThreatSpec("inf", xi=0.1, max_epochs=3)
        a = generate_universal(Linear2(), split(grid_points()), spec, seed=4)
        b = generate_universal(Linear2(), split(grid_points()), spec, seed=4)
        assert torch.equal(a.v, b.v)

    def test_nan_gradient(self):
        with pytest.raises(AttackError):
            generate_universal(Poison(), split(grid_points()), ThreatSpec("inf", xi=0.1, max_epochs=2), seed=0)

    def test_callback(self):
        seen = []
        generate_universal(Linear2(), split(grid_points()), ThreatSpec("inf", xi=0.01, max_epochs=4),
                           callback=lambda e, r: seen.append(e))
        assert seen == [1, 2, 3, 4]


class TestSets:
    def test_count_one(self):
        s = build_perturbation_set(Linear2(), split(grid_points()), ThreatSpec("inf", xi=0.2, max_epochs=2),
                                   1, require_target=False)
        assert len(s) == 1

    def test_pairwise_cosines_checked_directly(self):
        torch.manual_seed(0)
        x = torch.rand(200, 3, 4, 4)
        model = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(48, 5))
        spec = ThreatSpec("inf", xi=0.05, max_epochs=1, init_scale=1.0)
        s = build_perturbation_set(model, split(x), spec, 3, max_cosine=0.5, require_target=False, seed=3)
        for i in range(3):
            for j in range(i + 1, 3):
                a, b = s[i].v.double().flatten(), s[j].v.double().flatten()
                c = float(a @ b / (a.norm() * b.norm()))
                assert abs(c) <= 0.5

    def test_exhaustion(self):
        # in two dimensions every l-inf attack on this model lands on the same corner
        spec = ThreatSpec("inf", xi=0.5, max_epochs=3, target_fooling_ratio=0.9)
        with pytest.raises(DiversityExhaustedError):
            build_perturbation_set(Linear2(), split(grid_points() + torch.tensor([0.5, 0.0])), spec, 2,
                                   max_cosine=0.1, require_target=False, max_attempts=3)

    def test_cosine(self):
        assert cosine(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 2.0])) == 0.0
        assert cosine(torch.tensor([1.0, 1.0]), torch.tensor([-2.0, -2.0])) == pytest.approx(-1.0)
        assert cosine(torch.zeros(2), torch.ones(2)) == 0.0

    def test_derived_seeds(self):
        a = derived_seeds(5, 4)
        assert a == derived_seeds(5, 4) and len(set(a)) == 4
        assert derived_seeds(5, 2) == a[:2]

    def test_digest_changes(self):
        u = UniversalPerturbation(torch.zeros(2), "inf", 0.1)
        s1 = PerturbationSet([u])
        s2 = PerturbationSet([UniversalPerturbation(torch.ones(2) * 0.1, "inf", 0.1)])
        assert s1.digest() != s2.digest()


class TestFiles:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(["inf", 2]))
    def test_round_trip(self, seed, norm):
        import tempfile
        from pathlib import Path
        v = torch.randn(3, 5, 7, generator=torch.Generator().manual_seed(seed))
        p = UniversalPerturbation(v, norm, 0.3, "abc", 0.81, "spgd", seed, {"below_target": False, "epochs": 3})
        with tempfile.TemporaryDirectory() as d:
            path = Path(d) / "v.uap"
            save_perturbation(p, path, {"role": "test"})
            back = load_perturbation(path)
        assert torch.equal(back.v, p.v)
        assert (back.norm_type, back.xi, back.seed, back.attack_id) == (p.norm_type, 0.3, seed, "spgd")
        assert back.achieved_fooling_ratio == 0.81 and back.meta["extra"] == {"role": "test"}

    def test_layout(self, tmp_path):
        import json
        import struct
        p = UniversalPerturbation(torch.arange(6.0).reshape(1, 2, 3), "inf", 0.5)
        save_perturbation(p, tmp_path / "v.uap")
        raw = (tmp_path / "v.uap").read_bytes()
        (n,) = struct.unpack("<I", raw[:4])
        head = json.loads(raw[4:4 + n])
        assert head["shape"] == [1, 2, 3] and head["norm_type"] == "inf"
        np.testing.assert_array_equal(np.frombuffer(raw[4 + n:], "<f4"), np.arange(6.0))

    def test_truncated(self, tmp_path):
        p = UniversalPerturbation(torch.ones(4), "inf", 0.5)
        save_perturbation(p, tmp_path / "v.uap")
        data = (tmp_path / "v.uap").read_bytes()
        (tmp_path / "v.uap").write_bytes(data[:-3])
        with pytest.raises(ValueError):
            load_perturbation(tmp_path / "v.uap")
