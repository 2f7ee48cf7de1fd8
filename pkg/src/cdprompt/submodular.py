"""Concept subset selection: F(A) = lambda * diversity(A) + coverage(A).

Diversity is modular: each concept contributes psi(H(p(.|c))) where p(.|c)
is a temperature softmax over classes of Sim(y, c). Coverage is a facility
location term over the class's candidate set. Greedy maximisation comes in a
naive and a lazy (priority queue) flavour that return identical selections.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .embedding_store import mean_class_embedding
from .errors import BudgetError, EmptyClass, InvalidInput
from .numerics import softmax

PSI = {
    "identity": lambda x: x,
    "sqrt": lambda x: math.sqrt(max(x, 0.0)),
    "log1p": lambda x: math.log1p(max(x, 0.0)),
}

BRUTE_FORCE_BUDGET = 10**6


@dataclass
class SelectionConfig:
    k: int = 10
    lam: float = 1.0
    temperature: float = 1.0
    coverage_mode: str = "facility_location"
    psi: str = "identity"
    similarity: str = "shifted"  # "shifted" -> (1+cos)/2, "cosine" -> raw cos
    signed_entropy: bool = False
    lazy: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise InvalidInput("k must be >= 1")
        if not math.isfinite(self.lam):
            raise InvalidInput("lambda must be finite")
        if not self.temperature > 0:
            raise InvalidInput("temperature must be positive")
        if self.coverage_mode not in ("facility_location", "pairwise_sum"):
            raise InvalidInput(f"unknown coverage_mode {self.coverage_mode!r}")
        if self.psi not in PSI:
            raise InvalidInput(f"unknown psi {self.psi!r}")
        if self.similarity not in ("shifted", "cosine"):
            raise InvalidInput(f"unknown similarity {self.similarity!r}")
        if self.signed_entropy and self.psi != "identity":
            raise InvalidInput("signed_entropy yields negative scores; use psi='identity'")

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass
class SimilarityCache:
    """Precomputed similarities for one class's candidate set S_y.

    ``class_concept[y', j]`` is Sim(y', c_j); ``concept_concept[i, j]`` is phi(c_i, c_j).
    """

    ids: list
    class_concept: np.ndarray
    concept_concept: np.ndarray

    @classmethod
    def from_embeddings(cls, ids, concept_emb, class_emb, similarity="shifted"):
        concept_emb = np.asarray(concept_emb, dtype=np.float64)
        class_emb = np.asarray(class_emb, dtype=np.float64)
        cos = np.clip(concept_emb @ concept_emb.T, -1.0, 1.0)
        cos = 0.5 * (cos + cos.T)
        np.fill_diagonal(cos, 1.0)
        phi = (1.0 + cos) / 2.0 if similarity == "shifted" else cos
        sim = np.clip(class_emb @ concept_emb.T, -1.0, 1.0)
        return cls(list(ids), sim, phi)

    @property
    def size(self):
        return len(self.ids)


@dataclass
class SelectedSet:
    label: str
    k: int
    ids: list
    gains: list = field(default_factory=list)
    objective: float = 0.0
    indices: list = field(default_factory=list)

    def to_json(self):
        return {"class": self.label, "k": self.k, "ids": list(self.ids),
                "gains": [float(g) for g in self.gains], "objective": float(self.objective)}

    @classmethod
    def from_json(cls, obj):
        return cls(str(obj["class"]), int(obj["k"]), [str(i) for i in obj["ids"]],
                   [float(g) for g in obj.get("gains", [])], float(obj.get("objective", 0.0)))


def build_cache(pool, texts, y, cfg):
    """SimilarityCache for class ``y`` from the pool's encoder and labelled texts."""
    cands = pool.candidates(y)
    if not cands:
        raise EmptyClass(f"class {y!r} has no candidates")
    concept_emb = pool.embeddings(y)
    class_emb = np.stack([mean_class_embedding(pool.encoder, texts, c) for c in pool.classes])
    return SimilarityCache.from_embeddings([c.id for c in cands], concept_emb, class_emb,
                                           cfg.similarity)


def concept_diversity(cache, cfg):
    """Per-concept psi(H(p(.|c))); the literal variant returns sum p log p instead."""
    p = softmax(cache.class_concept.T, cfg.temperature, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)
    if cfg.signed_entropy:
        return plogp
    psi = PSI[cfg.psi]
    return np.array([psi(-v) for v in plogp])


def diversity_score(chosen, cache, cfg, _div=None):
    div = concept_diversity(cache, cfg) if _div is None else _div
    total = 0.0
    for j in sorted(chosen):
        total += div[j]
    return float(total)


def coverage_score(chosen, cache, cfg):
    chosen = sorted(chosen)
    if not chosen:
        return 0.0
    phi = cache.concept_concept[:, chosen]
    if cfg.coverage_mode == "facility_location":
        return float(phi.max(axis=1).sum())
    return float(phi.sum())


def objective(chosen, cache, cfg):
    return cfg.lam * diversity_score(chosen, cache, cfg) + coverage_score(chosen, cache, cfg)


class _GainOracle:
    """Incremental marginal gains for the current chosen set.

    Gains are evaluated as lam*div[x] + sum_i max(0, phi[i, x] - cover[i]);
    cover only grows, so stale gains are exact upper bounds even in floating
    point (rounding is monotone), which keeps lazy and naive greedy identical.
    """

    def __init__(self, cache, cfg):
        self.cfg = cfg
        self.phi = cache.concept_concept
        self.div = concept_diversity(cache, cfg)
        self.n = cache.size
        self.cover = None

    def gain(self, x):
        g = self.cfg.lam * self.div[x]
        col = self.phi[:, x]
        if self.cfg.coverage_mode == "pairwise_sum":
            return g + float(col.sum())
        if self.cover is None:
            return g + float(col.sum())
        return g + float(np.maximum(col - self.cover, 0.0).sum())

    def add(self, x):
        col = self.phi[:, x]
        self.cover = col.copy() if self.cover is None else np.maximum(self.cover, col)


def _finish(label, cfg, cache, chosen, gains):
    return SelectedSet(label, cfg.k, [cache.ids[j] for j in chosen], gains,
                       objective(chosen, cache, cfg), list(chosen))


def greedy_naive(cache, cfg, label=""):
    if cache.size == 0:
        raise EmptyClass(f"class {label!r} has no candidates")
    oracle = _GainOracle(cache, cfg)
    chosen, gains = [], []
    remaining = list(range(cache.size))
    while len(chosen) < cfg.k and remaining:
        best, best_gain = None, -math.inf
        for x in remaining:
            g = oracle.gain(x)
            if g > best_gain:
                best, best_gain = x, g
        if best_gain <= 0:
            break
        chosen.append(best)
        gains.append(best_gain)
        oracle.add(best)
        remaining.remove(best)
    return _finish(label, cfg, cache, chosen, gains)


def greedy_lazy(cache, cfg, label=""):
    if cache.size == 0:
        raise EmptyClass(f"class {label!r} has no candidates")
    oracle = _GainOracle(cache, cfg)
    heap = [(-oracle.gain(x), x, 0) for x in range(cache.size)]
    heapq.heapify(heap)
    chosen, gains = [], []
    while len(chosen) < cfg.k and heap:
        neg, x, stamp = heapq.heappop(heap)
        if stamp == len(chosen):
            if -neg <= 0:
                break
            chosen.append(x)
            gains.append(-neg)
            oracle.add(x)
            continue
        heapq.heappush(heap, (-oracle.gain(x), x, len(chosen)))
    return _finish(label, cfg, cache, chosen, gains)


def greedy_select(pool_or_cache, y, cfg, texts=None):
    """Greedy maximisation of F over S_y under |A| <= k.

    Accepts either a prepared :class:`SimilarityCache` or a pool plus the
    labelled texts needed to compute Sim(y, c).
    """
    cache = pool_or_cache if isinstance(pool_or_cache, SimilarityCache) else \
        build_cache(pool_or_cache, texts, y, cfg)
    run = greedy_lazy if cfg.lazy else greedy_naive
    return run(cache, cfg, str(y))


def brute_force_opt(pool_or_cache, y, cfg, texts=None, budget=BRUTE_FORCE_BUDGET):
    """Exact maximiser over all subsets of size <= k (ties -> first in lexicographic order)."""
    cache = pool_or_cache if isinstance(pool_or_cache, SimilarityCache) else \
        build_cache(pool_or_cache, texts, y, cfg)
    n = cache.size
    if n == 0:
        raise EmptyClass(f"class {y!r} has no candidates")
    kmax = min(cfg.k, n)
    count = sum(math.comb(n, j) for j in range(kmax + 1))
    if count > budget:
        raise BudgetError(f"{count} subsets exceed the enumeration budget of {budget}")
    order = sorted(range(n), key=lambda j: cache.ids[j])
    div = concept_diversity(cache, cfg)
    best, best_val = (), 0.0
    for size in range(1, kmax + 1):
        for combo in itertools.combinations(order, size):
            val = cfg.lam * diversity_score(combo, cache, cfg, div) + \
                coverage_score(combo, cache, cfg)
            if val > best_val:
                best, best_val = combo, val
    gains, prev = [], 0.0
    for j in range(1, len(best) + 1):
        cur = objective(best[:j], cache, cfg)
        gains.append(cur - prev)
        prev = cur
    return SelectedSet(str(y), cfg.k, [cache.ids[j] for j in best], gains, best_val, list(best))


def select_all(pool, texts, cfg):
    """Run greedy selection for every class; returns ``{label: SelectedSet}``."""
    return {y: greedy_select(pool, y, cfg, texts) for y in pool.classes}
