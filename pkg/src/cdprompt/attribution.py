"""Evaluation: accuracy, concept attributions and concept correlation.

Attributions score each concept (row of Q) for the predicted-class logit.
A *scorer* is any object with ``value(Q) -> float`` and ``grad(Q) -> dQ``;
:class:`ConceptScorer` wraps the toy transformer, but tests and callers can
plug in closed-form scorers. Removing a concept means zeroing its Q row.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .decomposer import Decomposition, concept_keys, rank_concepts
from .errors import BudgetError, DegenerateInput, InvalidInput
from .numerics import pearson
from .toy_transformer import Batch

EXACT_SHAPLEY_MAX = 12


def accuracy(model, prompt, batch):
    """Fraction of ``batch`` predicted correctly with ``prompt`` (matrix or Decomposition)."""
    if len(batch) == 0:
        raise InvalidInput("accuracy of an empty dataset")
    P = prompt.prompt if isinstance(prompt, Decomposition) else prompt
    return float(np.mean(model.predict(P, batch) == batch.labels))


@dataclass
class AttributionScores:
    method: str
    scores: np.ndarray
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(self.scores)):
            raise InvalidInput(f"{self.method} produced non-finite scores")

    def to_json(self):
        return {"method": self.method, "scores": [float(s) for s in self.scores],
                "params": self.params}


class ConceptScorer:
    """Predicted-class logit of one input as a function of Q (C held fixed).

    The target class is fixed at construction (argmax under the full Q) so
    that every coalition and path point scores the same logit.
    """

    def __init__(self, model, C, text, target=None):
        self.model = model
        self.C = np.asarray(C, dtype=np.float64)
        self.batch = text if isinstance(text, Batch) else model.encode([text])
        self.target = target

    def _ensure_target(self, Q):
        if self.target is None:
            self.target = int(np.argmax(self.model.logits(self.C @ Q, self.batch)[0]))

    def value(self, Q):
        self._ensure_target(Q)
        return float(self.model.logits(self.C @ Q, self.batch)[0, self.target])

    def grad(self, Q):
        self._ensure_target(Q)
        y = self.target

        def pick(logits, _labels):
            d = np.zeros_like(logits)
            d[0, y] = 1.0
            return float(logits[0, y]), d

        _, dP = self.model.prompt_loss_and_grad(self.C @ Q, self.batch, pick)
        return self.C.T @ dP


def grad_attribution(scorer, Q):
    """grad x input: score_p = sum_q Q[p, q] * d f / d Q[p, q]."""
    Q = np.asarray(Q, dtype=np.float64)
    return AttributionScores("grad", (scorer.grad(Q) * Q).sum(axis=1))


def integrated_gradients(scorer, Q, steps=64):
    """IG from the zero-coefficient baseline with a midpoint Riemann sum."""
    if steps < 1:
        raise InvalidInput("steps must be >= 1")
    Q = np.asarray(Q, dtype=np.float64)
    acc = np.zeros_like(Q)
    for m in range(steps):
        acc += scorer.grad(((m + 0.5) / steps) * Q)
    return AttributionScores("ig", (Q * acc / steps).sum(axis=1),
                             {"steps": steps, "baseline": "zero"})


def coalition_q(Q, mask):
    """Q with rows outside the coalition bitmask zeroed."""
    keep = np.array([(mask >> p) & 1 for p in range(Q.shape[0])], dtype=bool)
    out = np.zeros_like(Q)
    out[keep] = Q[keep]
    return out


class _CoalitionCache:
    def __init__(self, value_fn):
        self.value_fn = value_fn
        self.values = {}

    def __call__(self, mask):
        v = self.values.get(mask)
        if v is None:
            v = float(self.value_fn(mask))
            self.values[mask] = v
        return v


def shapley_exact(value_fn, n):
    """Exact Shapley values of the game ``value_fn(bitmask)`` over ``n`` players.

    Marginals are grouped by coalition size and summed with ``math.fsum``,
    which is order independent, so symmetric players get identical values.
    """
    if n > EXACT_SHAPLEY_MAX:
        raise BudgetError(f"exact Shapley over {n} players exceeds the limit of {EXACT_SHAPLEY_MAX}")
    if n < 1:
        raise InvalidInput("need at least one player")
    v = _CoalitionCache(value_fn)
    weights = [math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)]
    phi = np.zeros(n)
    for i in range(n):
        by_size = [[] for _ in range(n)]
        others = [p for p in range(n) if p != i]
        for s in range(n):
            for combo in itertools.combinations(others, s):
                mask = 0
                for p in combo:
                    mask |= 1 << p
                by_size[s].append(v(mask | (1 << i)) - v(mask))
        phi[i] = math.fsum(weights[s] * math.fsum(by_size[s]) for s in range(n))
    return phi


def shapley_monte_carlo(value_fn, n, samples=10000, seed=0):
    """Permutation-sampling Shapley with antithetic (reversed) pairs.

    ``samples`` counts permutations, so ``samples // 2`` pairs are drawn.
    Returns ``(phi, half_width)`` where ``half_width`` is a 95% normal CI per
    player computed from the pair means.
    """
    if samples < 2:
        raise InvalidInput("need at least two permutation samples")
    v = _CoalitionCache(value_fn)
    rng = np.random.default_rng(seed)
    pairs = samples // 2
    contrib = np.zeros((pairs, n))
    for k in range(pairs):
        perm = rng.permutation(n)
        for order in (perm, perm[::-1]):
            mask, prev = 0, v(0)
            for p in order:
                mask |= 1 << int(p)
                cur = v(mask)
                contrib[k, p] += 0.5 * (cur - prev)
                prev = cur
    phi = contrib.mean(axis=0)
    half = 1.96 * contrib.std(axis=0, ddof=1) / math.sqrt(pairs) if pairs > 1 else np.full(n, np.inf)
    return phi, half


def shapley_attribution(scorer, Q, mode="exact", samples=10000, seed=0):
    Q = np.asarray(Q, dtype=np.float64)
    n = Q.shape[0]

    def value(mask):
        return scorer.value(coalition_q(Q, mask))

    if mode == "exact":
        return AttributionScores("shapley", shapley_exact(value, n), {"mode": "exact"})
    if mode == "monte_carlo":
        phi, half = shapley_monte_carlo(value, n, samples, seed)
        return AttributionScores("shapley", phi, {"mode": "monte_carlo", "samples": samples,
                                                  "seed": seed, "ci95": [float(h) for h in half]})
    raise InvalidInput(f"unknown Shapley mode {mode!r}")


def attribute(model, dec, text, method, **params):
    """Convenience wrapper: score every concept of ``dec`` for one input."""
    scorer = ConceptScorer(model, dec.C, text)
    if method == "grad":
        return grad_attribution(scorer, dec.Q)
    if method == "ig":
        return integrated_gradients(scorer, dec.Q, params.get("steps", 64))
    if method == "shapley":
        return shapley_attribution(scorer, dec.Q, params.get("mode", "exact"),
                                   params.get("samples", 10000), params.get("seed", 0))
    raise InvalidInput(f"unknown attribution method {method!r}")


def concept_correlation(dec_or_keys, scores, top_k=None):
    """Pearson rho between keys and scores over the top-k concepts by key.

    Returns None when rho is undefined: a single concept or a constant slice.
    """
    keys = concept_keys(dec_or_keys) if isinstance(dec_or_keys, Decomposition) else \
        np.asarray(dec_or_keys, dtype=np.float64)
    s = scores.scores if isinstance(scores, AttributionScores) else np.asarray(scores, float)
    if len(s) != len(keys):
        raise InvalidInput("scores must align with concepts")
    k = len(keys) if top_k is None else top_k
    if not 1 <= k <= len(keys):
        raise InvalidInput(f"top_k must lie in [1, {len(keys)}]")
    if k < 2:
        return None
    idx = rank_concepts(keys, range(len(keys)))[:k]
    try:
        return pearson(keys[idx], s[idx])
    except DegenerateInput:
        return None


def vocab_baseline(encoder, labels, vocab, n):
    """Top-n vocabulary tokens by max cosine to any label embedding (ties keep vocab order)."""
    if not vocab:
        raise InvalidInput("empty vocabulary")
    if not 0 <= n <= len(vocab):
        raise InvalidInput(f"n must lie in [0, {len(vocab)}]")
    L = encoder.embed_many(list(labels))
    V = encoder.embed_many(list(vocab))
    sims = (V @ L.T).max(axis=1)
    order = sorted(range(len(vocab)), key=lambda i: (-sims[i], i))
    return [vocab[i] for i in order[:n]]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class CorrelationRow:
    dataset: str
    method: str
    top_k: int
    values: list

    @property
    def defined(self):
        return [v for v in self.values if v is not None]

    @property
    def rho(self):
        return float(np.mean(self.defined)) if self.defined else None

    @property
    def variance(self):
        return float(np.var(self.defined)) if self.defined else None


CSV_COLUMNS = ["dataset", "method", "top_k", "rho", "variance", "n_seeds"]


def _fmt(x):
    return "n/a" if x is None else f"{x:.6f}"


def write_correlation_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r.dataset, r.method, r.top_k, _fmt(r.rho), _fmt(r.variance), len(r.defined)])


def write_correlation_json(path, rows):
    out = [{"dataset": r.dataset, "method": r.method, "top_k": r.top_k, "rho": r.rho,
            "variance": r.variance, "per_seed": r.values} for r in rows]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
