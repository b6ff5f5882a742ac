import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from featregen.synth_perturb import (
    NonTerminationError,
    SynthConfig,
    default_threshold,
    synthesize,
    synthesize_pool,
)
from featregen.uap_attacks import PerturbationSet, UniversalPerturbation


def up(arr, xi=1.0):
    return UniversalPerturbation(torch.as_tensor(np.asarray(arr, np.float32)), "inf", xi)


def closed_form(members, seed, eta, limit=500):
    """Replay the draws: v_n = sum_k a_k prod_{j>k}(1 - a_j) V[i_k]."""
    rng = np.random.default_rng(seed)
    draws = []
    for _ in range(limit):
        a = rng.random()
        while a == 0.0:
            a = rng.random()
        draws.append((a, int(rng.integers(len(members)))))
    stack = [np.asarray(m.v, np.float64) for m in members]
    for n in range(1, limit + 1):
        total = np.zeros_like(stack[0])
        for k in range(n):
            a, i = draws[k]
            weight = a * np.prod([1 - draws[j][0] for j in range(k + 1, n)])
            total = total + weight * stack[i]
        if np.linalg.norm(total) > eta:
            return total, n
    raise AssertionError("oracle did not terminate")


class TestThreshold:
    def test_min_norm(self):
        assert default_threshold([up([3.0, 0.0]), up([0.0, 5.0])]) == pytest.approx(3.0)

    def test_singleton(self):
        assert default_threshold([up([1.5, 2.0])]) == pytest.approx(2.5)

    def test_recomputed(self):
        rng = np.random.default_rng(0)
        vs = [up(rng.normal(size=(3, 4, 4))) for _ in range(4)]
        expected = min(np.linalg.norm(np.asarray(v.v, np.float64)) for v in vs)
        assert default_threshold(PerturbationSet(vs)) == pytest.approx(expected, abs=1e-6)

    def test_empty(self):
        with pytest.raises(ValueError):
            default_threshold([])


class TestSynthesize:
    def test_reference_trace(self):
        v1 = up([0.6, 0.8, 0.0])        # norm 1
        v2 = up([0.0, 1.2, 1.6])        # norm 2
        for seed in (0, 1, 2, 17, 123):
            out = synthesize([v1, v2], SynthConfig(eta=1.0, seed=seed))
            ref, n = closed_form([v1, v2], seed, 1.0)
            assert out.meta["iterations"] == n
            np.testing.assert_allclose(out.v.numpy(), ref, atol=1e-6)
            assert 1.0 < float(np.linalg.norm(out.v.numpy())) <= 2.0 + 1e-6

    def test_singleton_equal_norm_does_not_terminate(self):
        # eta is the member's own (float32) norm, so no iterate can exceed it
        v = up([0.3, -0.4])
        with pytest.raises(NonTerminationError):
            synthesize([v], SynthConfig(eta=default_threshold([v]), max_iters=200, seed=0))

    def test_bad_config(self):
        with pytest.raises(ValueError):
            SynthConfig(eta=0.0)
        with pytest.raises(ValueError):
            SynthConfig(eta=1.0, max_iters=0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            synthesize([up([1.0, 0.0]), up([1.0, 0.0, 0.0])], SynthConfig(0.5))

    def test_metadata(self):
        V = PerturbationSet([up([0.1, 0.2]), up([0.3, -0.1])])
        out = synthesize(V, SynthConfig(eta=default_threshold(V), seed=4))
        assert out.attack_id == "synthetic"
        assert out.meta["source_set_digest"]

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(2, 6), st.integers(0, 10_000))
    def test_properties(self, seed, k, data_seed):
        rng = np.random.default_rng(data_seed)
        xi = 10 / 255
        members = [up(rng.uniform(-xi, xi, size=(3, 4, 4)) * rng.uniform(0.3, 1.0), xi) for _ in range(k)]
        eta = default_threshold(members)
        out = synthesize(members, SynthConfig(eta, seed=seed)).v.numpy().astype(np.float64)
        stack = np.stack([np.asarray(m.v, np.float64) for m in members])
        assert np.linalg.norm(out) > eta
        lo = np.minimum(stack.min(axis=0), 0)
        hi = np.maximum(stack.max(axis=0), 0)
        assert np.all(out >= lo - 1e-7) and np.all(out <= hi + 1e-7)
        assert np.abs(out).max() <= np.abs(stack).max() + 1e-7

    def test_pool(self):
        V = [up([0.1, 0.2, 0.0]), up([0.0, -0.2, 0.25])]
        pool = synthesize_pool(V, 10, seed=3)
        assert len(pool) == 10
        assert len({p.digest() for p in pool}) == 10
        again = synthesize_pool(V, 10, seed=3)
        assert [p.digest() for p in pool] == [p.digest() for p in again]
