import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sobolev_ipm.autodiff import Tensor
from sobolev_ipm.autodiff.nets import ConvGenerator
from sobolev_ipm.seqgen import (
    AnnealSchedule,
    CharCorpus,
    TextGanConfig,
    anneal,
    generate_text,
    js4,
    markov_chain,
    ngram_counts,
    onehot,
    smooth_onehot,
    train_text_gan,
)


def js_by_hand(a, b):
    """Direct recomputation from counted 4-gram tuples."""
    def counts(c):
        out = {}
        for row in c:
            for i in range(len(row) - 3):
                k = tuple(row[i : i + 4])
                out[k] = out.get(k, 0) + 1
        return out

    ca, cb = counts(a), counts(b)
    na, nb = sum(ca.values()), sum(cb.values())
    total = 0.0
    for k in set(ca) | set(cb):
        p, q = ca.get(k, 0) / na, cb.get(k, 0) / nb
        m = 0.5 * (p + q)
        if p:
            total += 0.5 * p * np.log(p / m)
        if q:
            total += 0.5 * q * np.log(q / m)
    return total


class TestSmoothOnehot:
    def test_zero_sigma_row(self):
        row = smooth_onehot(np.array([2]), 5, 0.0)[0]
        np.testing.assert_allclose(row, [0.025, 0.025, 0.9, 0.025, 0.025], rtol=1e-14)

    @given(st.floats(0.0, 20.0), st.integers(0, 2**31))
    @settings(max_examples=30, deadline=None)
    def test_rows_on_simplex(self, sigma, seed):
        rng = np.random.default_rng(seed)
        rows = smooth_onehot(rng.integers(0, 7, size=(4, 6)), 7, sigma, rng)
        assert rows.shape == (4, 6, 7)
        assert np.all(rows >= 0)
        np.testing.assert_allclose(rows.sum(axis=-1), 1.0, atol=1e-12)

    def test_retention_matches_simulation(self):
        # fraction of rows whose argmax is still the token, against an independent simulation
        n, v, sigma = 100_000, 5, 1.0
        tokens = np.zeros(n, dtype=int)
        got = np.mean(smooth_onehot(tokens, v, sigma, np.random.default_rng(0)).argmax(axis=-1) == 0)
        logp = np.log(np.r_[0.9, np.full(v - 1, 0.1 / (v - 1))])
        sim = logp + sigma * np.random.default_rng(1).standard_normal((n, v))
        expected = np.mean(sim.argmax(axis=1) == 0)
        se = np.sqrt(expected * (1 - expected) / n)
        assert abs(got - expected) <= 4 * np.sqrt(2) * se

    def test_large_sigma_near_chance(self):
        rows = smooth_onehot(np.zeros(20_000, dtype=int), 5, 10.0, np.random.default_rng(2))
        keep = np.mean(rows.argmax(axis=-1) == 0)
        assert 0.2 < keep < 0.35

    def test_requires_rng_for_noise(self):
        with pytest.raises(ValueError):
            smooth_onehot(np.array([0]), 3, 0.5)

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            smooth_onehot(np.array([0]), 3, -0.1, np.random.default_rng(0))

    def test_onehot(self):
        np.testing.assert_array_equal(onehot([1, 0], 3), [[0, 1, 0], [1, 0, 0]])


class TestAnneal:
    def test_endpoints_and_midpoint(self):
        s = AnnealSchedule(1.5, 10000)
        assert anneal(s, 0) == 1.5
        assert anneal(s, 10000) == 0.0
        assert anneal(s, 5000) == pytest.approx(0.75)

    def test_nonincreasing(self):
        s = AnnealSchedule(2.0, 37)
        vals = [anneal(s, i) for i in range(38)]
        assert np.all(np.diff(vals) <= 0)

    @pytest.mark.parametrize("i", [-1, 11])
    def test_out_of_range(self, i):
        with pytest.raises(ValueError):
            anneal(AnnealSchedule(1.0, 10), i)

    def test_bad_schedule(self):
        with pytest.raises(ValueError):
            AnnealSchedule(1.0, 0)


class TestJs4:
    def test_identical(self):
        c = np.random.default_rng(0).integers(0, 4, (50, 8))
        assert js4(c, c) == 0.0

    def test_disjoint(self):
        a = np.zeros((5, 6), dtype=int)
        b = np.ones((7, 6), dtype=int)
        assert js4(a, b) == pytest.approx(np.log(2), abs=1e-15)

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(1)
        a, b = rng.integers(0, 3, (40, 6)), rng.integers(0, 3, (30, 6))
        assert js4(a, b) == pytest.approx(js4(b, a), abs=1e-15)
        assert 0 <= js4(a, b) <= np.log(2)

    def test_same_chain_matches_counting(self):
        rng = np.random.default_rng(2)
        corpus = markov_chain(5, 8, 10_000, rng)
        other = corpus.sample(10_000, rng)
        got = js4(corpus.sequences, other)
        assert 0 < got < 0.05
        assert got == pytest.approx(js_by_hand(corpus.sequences, other), rel=1e-10)

    def test_counts(self):
        c = ngram_counts(np.array([[0, 1, 2, 3, 0]]), 4)
        assert c == {(0, 1, 2, 3): 1, (1, 2, 3, 0): 1}

    def test_short_sequences_rejected(self):
        with pytest.raises(ValueError):
            js4(np.zeros((2, 3), dtype=int), np.zeros((2, 3), dtype=int))


class TestCorpus:
    def test_chain_shapes(self):
        c = markov_chain(6, 9, 100, np.random.default_rng(0))
        assert c.sequences.shape == (100, 9)
        np.testing.assert_allclose(c.transition.sum(axis=1), 1.0)
        assert c.sequences.min() >= 0 and c.sequences.max() < 6

    def test_transition_frequencies(self):
        rng = np.random.default_rng(3)
        c = markov_chain(4, 50, 2000, rng)
        s = c.sequences
        counts = np.zeros((4, 4))
        np.add.at(counts, (s[:, :-1].ravel(), s[:, 1:].ravel()), 1)
        n = counts.sum(axis=1, keepdims=True)
        p = c.transition
        se = np.sqrt(p * (1 - p) / n)
        assert np.all(np.abs(counts / n - p) <= 5 * se + 1e-3)

    def test_rejects_bad_tokens(self):
        with pytest.raises(ValueError):
            CharCorpus(3, 2, np.eye(3), np.ones(3) / 3, np.array([[0, 3]]))


class TestTextGan:
    def test_generator_rows_on_simplex(self):
        g = ConvGenerator(4, 8, 5, 8, 2, seed=0)
        rows = g(Tensor(np.random.default_rng(0).standard_normal((3, 4)))).data
        np.testing.assert_allclose(rows.sum(axis=-1), 1.0, atol=1e-12)
        assert generate_text(g, 3, np.random.default_rng(1)).shape == (3, 8)

    def test_debug_copy_floor(self):
        res = train_text_gan(TextGanConfig(seed=0, debug_copy=True))
        assert res["final"] < 0.1

    def test_short_run(self):
        cfg = TextGanConfig(seed=1, iters=20, eval_every=10, eval_samples=200, corpus_size=500, n_critic=1)
        res = train_text_gan(cfg)
        assert res["iter"] == [0, 10, 20]
        assert all(0 <= v <= np.log(2) for v in res["js4"])

    def test_short_run_deterministic(self):
        cfg = TextGanConfig(seed=2, kind="fisher", rule="average", iters=10, eval_every=5, eval_samples=200,
                            corpus_size=500, n_critic=1)
        assert train_text_gan(cfg)["js4"] == train_text_gan(cfg)["js4"]

    @pytest.mark.parametrize("kw", [dict(kind="mmd"), dict(rule="smoothed"), dict(length=3)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            TextGanConfig(seed=0, **kw)
