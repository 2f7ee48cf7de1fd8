import itertools
import json
import math

import numpy as np
import pytest
import scipy.special
import scipy.stats

from cdprompt.embedding_store import CandidatePool, ConceptCandidate, FileEncoder, LabeledText
from cdprompt.errors import BudgetError, EmptyClass, InvalidInput
from cdprompt.submodular import (
    SelectedSet,
    SelectionConfig,
    SimilarityCache,
    brute_force_opt,
    concept_diversity,
    coverage_score,
    diversity_score,
    greedy_lazy,
    greedy_naive,
    greedy_select,
    objective,
)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_cache(rng, n, d=6, n_classes=3):
    emb = unit_rows(rng, n, d)
    cls = unit_rows(rng, n_classes, d)
    return SimilarityCache.from_embeddings([f"c{i:02d}" for i in range(n)], emb, cls)


def oracle_F(chosen, cache, lam=1.0, T=1.0):
    """Straight-line recomputation: entropy of softmax(Sim/T) plus facility location."""
    if not chosen:
        return 0.0
    p = scipy.special.softmax(cache.class_concept / T, axis=0)
    div = sum(scipy.stats.entropy(p[:, j]) for j in chosen)
    cov = sum(max(cache.concept_concept[i, j] for j in chosen) for i in range(cache.size))
    return lam * div + cov


class TestScores:
    def test_empty(self, rng):
        cache, cfg = random_cache(rng, 5), SelectionConfig()
        assert diversity_score([], cache, cfg) == 0.0
        assert coverage_score([], cache, cfg) == 0.0
        assert objective([], cache, cfg) == 0.0

    def test_uniform_entropy(self):
        cache = SimilarityCache(["a"], np.array([[0.3], [0.3]]), np.ones((1, 1)))
        assert diversity_score([0], cache, SelectionConfig()) == pytest.approx(math.log(2), abs=1e-12)

    def test_concentrated_entropy(self):
        cache = SimilarityCache(["a"], np.array([[1.0], [-1.0]]), np.ones((1, 1)))
        cfg = SelectionConfig(temperature=0.01)
        assert diversity_score([0], cache, cfg) == pytest.approx(0.0, abs=1e-80)

    def test_literal_sign(self):
        cache = SimilarityCache(["a"], np.array([[0.3], [0.3]]), np.ones((1, 1)))
        cfg = SelectionConfig(signed_entropy=True)
        assert concept_diversity(cache, cfg)[0] == pytest.approx(-math.log(2))

    def test_psi(self):
        cache = SimilarityCache(["a"], np.array([[0.3], [0.3]]), np.ones((1, 1)))
        assert diversity_score([0], cache, SelectionConfig(psi="sqrt")) == \
            pytest.approx(math.sqrt(math.log(2)))

    def test_self_coverage(self, rng):
        cache = random_cache(rng, 7)
        assert coverage_score(range(7), cache, SelectionConfig()) == pytest.approx(7.0)

    def test_single_coverage(self, rng):
        cache = random_cache(rng, 7)
        assert coverage_score([3], cache, SelectionConfig()) == \
            pytest.approx(cache.concept_concept[:, 3].sum())

    def test_pairwise_mode(self, rng):
        cache = random_cache(rng, 5)
        cfg = SelectionConfig(coverage_mode="pairwise_sum")
        assert coverage_score([1, 3], cache, cfg) == \
            pytest.approx(cache.concept_concept[:, [1, 3]].sum())

    def test_modular_diversity(self, rng):
        cache, cfg = random_cache(rng, 8), SelectionConfig()
        a, b = [0, 2, 5], [1, 7]
        assert diversity_score(a + b, cache, cfg) == pytest.approx(
            diversity_score(a, cache, cfg) + diversity_score(b, cache, cfg), abs=1e-15)

    def test_matches_oracle(self, rng):
        for _ in range(20):
            cache = random_cache(rng, 6)
            for lam, T in [(0.0, 1.0), (1.0, 1.0), (2.5, 0.3)]:
                cfg = SelectionConfig(lam=lam, temperature=T)
                chosen = sorted(rng.choice(6, size=3, replace=False))
                assert objective(chosen, cache, cfg) == pytest.approx(
                    oracle_F(chosen, cache, lam, T), abs=1e-12)
        cfg0 = SelectionConfig(lam=0.0)
        assert objective([1, 2], cache, cfg0) == coverage_score([1, 2], cache, cfg0)

    def test_cache_invariants(self, rng):
        cache = random_cache(rng, 9)
        phi = cache.concept_concept
        np.testing.assert_allclose(phi, phi.T, atol=1e-12)
        np.testing.assert_allclose(np.diag(phi), 1.0)
        assert phi.min() >= 0.0 and phi.max() <= 1.0
        assert np.abs(cache.class_concept).max() <= 1.0


class TestMedoidToy:
    # clusters {a, b, c} (b central) and {d}; the medoids are b and d
    PHI = np.array([[1.0, 0.9, 0.6, 0.1],
                    [0.9, 1.0, 0.9, 0.1],
                    [0.6, 0.9, 1.0, 0.1],
                    [0.1, 0.1, 0.1, 1.0]])

    def cache(self):
        return SimilarityCache(["a", "b", "c", "d"], np.zeros((2, 4)), self.PHI)

    def test_best_pair_is_medoids(self):
        cache, cfg = self.cache(), SelectionConfig(k=2, lam=0.0)
        vals = {pair: coverage_score(pair, cache, cfg) for pair in itertools.combinations(range(4), 2)}
        # b covers a and c at 0.9 each: 0.9 + 1 + 0.9 + 1
        assert max(vals, key=vals.get) == (1, 3)
        assert vals[(1, 3)] == pytest.approx(3.8)
        assert sorted(vals.values())[-2] == pytest.approx(3.5)
        assert brute_force_opt(cache, "y", cfg).ids == ["b", "d"]

    def test_lambda_one(self):
        cache, cfg = self.cache(), SelectionConfig(k=2, lam=1.0)
        # zero similarities -> uniform p over 2 classes -> log 2 per concept
        assert objective([1, 3], cache, cfg) == pytest.approx(3.8 + 2 * math.log(2))


class TestGreedy:
    def test_saturation(self, rng):
        cache = random_cache(rng, 5)
        sel = greedy_select(cache, "y", SelectionConfig(k=9))
        assert sorted(sel.ids) == cache.ids

    def test_duplicates(self):
        emb = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        cache = SimilarityCache.from_embeddings(["a", "b", "c", "d"], emb, np.eye(2))
        sel = greedy_naive(cache, SelectionConfig(k=3, lam=0.0))
        assert not {"a", "b"} <= set(sel.ids)
        assert len(set(sel.ids) & {"c", "d"}) == 2

    def test_tie_break_smallest_id(self):
        cache = SimilarityCache(["x1", "x2", "x3"], np.zeros((2, 3)), np.eye(3))
        for fn in (greedy_naive, greedy_lazy):
            assert fn(cache, SelectionConfig(k=2)).ids == ["x1", "x2"]

    def test_gains_non_increasing(self, rng):
        for _ in range(30):
            sel = greedy_lazy(random_cache(rng, 12), SelectionConfig(k=6))
            assert np.all(np.diff(sel.gains) <= 1e-12)
            assert sel.objective == pytest.approx(sum(sel.gains))

    def test_lazy_equals_naive(self, rng):
        for _ in range(100):
            cache = random_cache(rng, int(rng.integers(2, 15)))
            cfg = SelectionConfig(k=int(rng.integers(1, 8)), lam=float(rng.uniform(0, 3)))
            assert greedy_lazy(cache, cfg).ids == greedy_naive(cache, cfg).ids

    def test_approximation_bound(self, rng):
        for _ in range(100):
            cache = random_cache(rng, 10)
            cfg = SelectionConfig(k=3)
            opt = brute_force_opt(cache, "y", cfg)
            greedy = greedy_select(cache, "y", cfg)
            assert greedy.objective >= (1 - 1 / math.e) * opt.objective - 1e-9
            assert opt.objective >= greedy.objective - 1e-12

    def test_empty(self):
        cache = SimilarityCache([], np.zeros((2, 0)), np.zeros((0, 0)))
        with pytest.raises(EmptyClass):
            greedy_lazy(cache, SelectionConfig())

    def test_pool_path(self):
        texts = {"alpha": [1.0, 0.1], "beta": [0.1, 1.0], "gamma": [0.7, 0.7],
                 "doc1": [1.0, 0.0], "doc2": [0.0, 1.0]}
        enc = FileEncoder(list(texts), np.array(list(texts.values())))
        cands = [ConceptCandidate(f"p-{i}", "p", t) for i, t in enumerate(["alpha", "beta", "gamma"])]
        pool = CandidatePool.from_candidates(["p", "n"], cands, enc)
        data = [LabeledText("doc1", "p"), LabeledText("doc2", "n")]
        sel = greedy_select(pool, "p", SelectionConfig(k=2), data)
        assert len(sel.ids) == 2 and set(sel.ids) <= {"p-0", "p-1", "p-2"}


class TestBruteForce:
    def test_k1_matches_greedy_first(self, rng):
        for _ in range(20):
            cache = random_cache(rng, 8)
            cfg = SelectionConfig(k=1)
            assert brute_force_opt(cache, "y", cfg).ids == greedy_naive(cache, cfg).ids

    def test_full_set(self, rng):
        cache = random_cache(rng, 6)
        assert sorted(brute_force_opt(cache, "y", SelectionConfig(k=6)).ids) == cache.ids

    def test_budget(self, rng):
        cache = random_cache(rng, 40)
        with pytest.raises(BudgetError):
            brute_force_opt(cache, "y", SelectionConfig(k=10))


class TestProperties:
    def test_monotone_and_diminishing(self, rng):
        cfg = SelectionConfig()
        for _ in range(200):
            n = int(rng.integers(3, 10))
            cache = random_cache(rng, n)
            perm = rng.permutation(n)
            b_size = int(rng.integers(1, n))
            B = list(perm[:b_size])
            A = list(perm[:int(rng.integers(0, b_size + 1))])
            x = int(perm[b_size])
            assert objective(A, cache, cfg) <= objective(B, cache, cfg) + 1e-12
            gain_a = objective(A + [x], cache, cfg) - objective(A, cache, cfg)
            gain_b = objective(B + [x], cache, cfg) - objective(B, cache, cfg)
            assert gain_a >= gain_b - 1e-9


class TestConfig:
    def test_from_dict(self):
        cfg = SelectionConfig.from_dict({"k": 4, "lambda": 0.5})
        assert cfg.k == 4 and cfg.lam == 0.5

    @pytest.mark.parametrize("kw", [{"k": 0}, {"temperature": 0.0}, {"lam": math.inf},
                                    {"coverage_mode": "max"}, {"psi": "cube"},
                                    {"signed_entropy": True, "psi": "sqrt"}])
    def test_invalid(self, kw):
        with pytest.raises(InvalidInput):
            SelectionConfig(**kw)

    def test_selected_json(self):
        s = SelectedSet("pos", 2, ["a", "b"], [1.5, 0.5], 2.0)
        obj = json.loads(json.dumps(s.to_json()))
        assert obj == {"class": "pos", "k": 2, "ids": ["a", "b"], "gains": [1.5, 0.5], "objective": 2.0}
        assert SelectedSet.from_json(obj).ids == ["a", "b"]
