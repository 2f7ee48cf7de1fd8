"""Decompose a continuous prompt P into concept embeddings C and coefficients Q.

* :func:`frobenius_fit` - pure matrix fitting of CQ to P (SVD or frozen-C least squares).
* :func:`cd_tune` - tune (C, Q) against the model with mu * KL(teacher || CQ) + CE.
* :func:`concept_keys`, :func:`explain` - rank concepts by summed coefficients.
* :func:`causal_attack` - swap in another class's top concepts and compare similarity.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .embedding_store import LabeledText, load_embeddings, save_embeddings
from .errors import EmptyReport, FormatError, InvalidInput, TrainingError
from .numerics import as_matrix, cosine, kl_rows, softmax, svd, tail_energy
from .optim import TrainConfig, train_loop
from .toy_transformer import cross_entropy

logger = logging.getLogger(__name__)


@dataclass
class Decomposition:
    C: np.ndarray
    Q: np.ndarray
    concept_ids: list
    provenance: str = "frobenius_fit"
    classes: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=np.float64)
        self.Q = np.asarray(self.Q, dtype=np.float64)
        if self.C.shape[1] != self.Q.shape[0]:
            raise InvalidInput(f"C {self.C.shape} and Q {self.Q.shape} do not chain")
        if len(self.concept_ids) != self.C.shape[1]:
            raise InvalidInput("one concept id per column of C is required")

    @property
    def prompt(self):
        return self.C @ self.Q

    @property
    def n_concepts(self):
        return self.C.shape[1]

    def residual(self, P):
        return float(np.linalg.norm(self.prompt - P))

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_embeddings(directory / "C.cdem", self.C)
        save_embeddings(directory / "Q.cdem", self.Q)
        manifest = {"concept_ids": list(self.concept_ids), "provenance": self.provenance,
                    "classes": list(self.classes), "meta": self.meta,
                    "tensors": {"C": "C.cdem", "Q": "Q.cdem"}}
        (directory / "decomposition.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        try:
            manifest = json.loads((directory / "decomposition.json").read_text())
            C = load_embeddings(directory / manifest["tensors"]["C"])
            Q = load_embeddings(directory / manifest["tensors"]["Q"])
        except (KeyError, ValueError, OSError) as exc:
            raise FormatError(f"bad decomposition in {directory}: {exc}") from exc
        return cls(C, Q, manifest["concept_ids"], manifest["provenance"],
                   manifest.get("classes", []), manifest.get("meta", {}))


# ---------------------------------------------------------------------------
# Matrix fitting
# ---------------------------------------------------------------------------

def frobenius_fit(P, n_concepts, epsilon=1e-10, init="svd", concept_matrix=None,
                  concept_ids=None):
    """Find C (d x N_c), Q (N_c x N_q) with ||CQ - P||_F^2 small.

    ``init="svd"`` uses the truncated SVD, which is optimal for every N_c
    (exact once N_c >= rank P). ``init="concepts"`` freezes C to
    ``concept_matrix`` and solves the convex least-squares problem for Q, so the
    residual is that of projecting P onto span(C). ``meta["within_epsilon"]``
    reports whether the squared residual met ``epsilon``.
    """
    P = as_matrix(P, "P")
    if n_concepts < 1:
        raise InvalidInput("n_concepts must be >= 1")
    if not epsilon > 0:
        raise InvalidInput("epsilon must be positive")
    d, nq = P.shape
    if init == "svd":
        res = svd(P)
        r = min(n_concepts, len(res.singular_values))
        C = np.zeros((d, n_concepts))
        Q = np.zeros((n_concepts, nq))
        C[:, :r] = res.u[:, :r] * res.singular_values[:r]
        Q[:r] = res.v_t[:r]
        bound = tail_energy(res.singular_values, r)
    elif init == "concepts":
        if concept_matrix is None:
            raise InvalidInput("init='concepts' needs concept_matrix")
        C = as_matrix(concept_matrix, "concept_matrix")
        if C.shape != (d, n_concepts):
            raise InvalidInput(f"concept_matrix must be ({d}, {n_concepts}), got {C.shape}")
        Q = np.linalg.lstsq(C, P, rcond=None)[0]
        bound = tail_energy(svd(P).singular_values, min(n_concepts, nq, d))
    else:
        raise InvalidInput(f"unknown init {init!r}")
    ids = list(concept_ids) if concept_ids is not None else [f"c{i}" for i in range(n_concepts)]
    resid = float(np.linalg.norm(C @ Q - P))
    meta = {"residual": resid, "residual_sq": resid ** 2, "eckart_young": bound,
            "epsilon": epsilon, "within_epsilon": resid ** 2 <= epsilon, "init": init}
    if not meta["within_epsilon"]:
        logger.info("frobenius_fit: residual^2 %.3g exceeds epsilon %.3g", resid ** 2, epsilon)
    return Decomposition(C, Q, ids, "frobenius_fit", meta=meta)


def solve_coefficients_gd(C, P, Q0, max_iter=20000, tol=1e-12):
    """Gradient descent on h(Q) = ||CQ - P||_F^2 with step 1/L (C frozen).

    h is a convex quadratic, so every start reaches the same minimum value.
    Returns ``(Q, residual)``.
    """
    C = as_matrix(C, "C")
    P = as_matrix(P, "P")
    Q = np.array(Q0, dtype=np.float64)
    G = C.T @ C
    L = 2.0 * np.linalg.eigvalsh(G)[-1]
    if L == 0.0:
        return Q, float(np.linalg.norm(P))
    CtP = C.T @ P
    for _ in range(max_iter):
        grad = 2.0 * (G @ Q - CtP)
        Q = Q - grad / L
        if np.linalg.norm(grad) < tol:
            break
    return Q, float(np.linalg.norm(C @ Q - P))


# ---------------------------------------------------------------------------
# Concept-decomposition tuning
# ---------------------------------------------------------------------------

@dataclass
class TuneConfig(TrainConfig):
    mu: float = 0.5
    freeze_C: bool = False

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise InvalidInput("mu must lie in [0, 1]")
        if not self.lr >= 0:
            raise InvalidInput("lr must be non-negative")


def cd_objective(logits, labels, teacher, mu):
    """Mean of mu * KL(teacher || softmax(logits)) + CE, with d/dlogits."""
    if not np.all(np.isfinite(logits)):
        return math.nan, np.zeros_like(logits), math.nan
    q = softmax(logits)
    B = len(labels)
    kl = kl_rows(teacher, q)
    ce, dce = cross_entropy(logits, labels)
    kl_mean = max(float(kl.mean()), 0.0)  # rounding can leave a tiny negative
    return mu * kl_mean + ce, mu * (q - teacher) / B + dce, kl_mean


def concept_matrix(selected, pool, classes):
    """Stack encoder embeddings of the selected concepts, class-major, greedy order."""
    ids, cols = [], []
    for y in classes:
        for cid in selected[y].ids:
            ids.append(cid)
            cand = pool[cid]
            if cand.embedding is None:
                cand.embedding = pool.encoder.embed(cand.text)
            cols.append(cand.embedding)
    if not ids:
        raise InvalidInput("selected sets are empty")
    return np.stack(cols, axis=1), ids


def cd_tune(model, P_star, C_init, concept_ids, train, cfg=None, val=None, classes=()):
    """Tune C and Q so the model prompted with CQ matches the model prompted with P*.

    Q starts at the least-squares fit to P* for the encoder-initialised C.
    Returns ``(Decomposition, history)``; ``history`` also carries the total
    loss on ``train`` before and after, and the final KL term.
    """
    cfg = cfg or TuneConfig()
    P_star = as_matrix(P_star, "P_star")
    C0 = as_matrix(C_init, "C_init")
    if C0.shape[1] == 0:
        raise InvalidInput("no concepts to tune")
    if C0.shape[0] != P_star.shape[0]:
        raise InvalidInput("C and P* must share the embedding dimension")
    val = train if val is None else val
    Q0 = np.linalg.lstsq(C0, P_star, rcond=None)[0]
    for b in (train, val):
        b.input_kv(model.weights)
    t_train = softmax(model.logits(P_star, train))
    t_val = t_train if val is train else softmax(model.logits(P_star, val))

    def total(params, batch, teacher):
        logits = model.logits(params["C"] @ params["Q"], batch)
        loss, _, kl = cd_objective(logits, batch.labels, teacher, cfg.mu)
        return loss, kl

    def loss_grad(params, idx):
        sub = train.take(idx)
        teacher = t_train[idx]
        C, Q = params["C"], params["Q"]
        loss, dP = model.prompt_loss_and_grad(
            C @ Q, sub, lambda lg, y: cd_objective(lg, y, teacher, cfg.mu)[:2])
        return loss, {"C": dP @ Q.T, "Q": C.T @ dP}

    trainable = ["Q"] if cfg.freeze_C else ["C", "Q"]
    init = {"C": C0, "Q": Q0}
    start_loss, start_kl = total(init, train, t_train)
    best, hist = train_loop(init, trainable, len(train), loss_grad,
                            lambda p: total(p, val, t_val)[0], cfg)
    end_loss, end_kl = total(best, train, t_train)
    if not math.isfinite(end_loss):
        raise TrainingError("non-finite loss after tuning")
    meta = {"mu": cfg.mu, "freeze_C": cfg.freeze_C, "seed": cfg.seed,
            "initial_loss": start_loss, "final_loss": end_loss,
            "initial_kl": start_kl, "final_kl": end_kl, "best_step": hist.best_step}
    dec = Decomposition(best["C"], best["Q"], list(concept_ids), "cd_tuned", list(classes), meta)
    return dec, hist


# ---------------------------------------------------------------------------
# Explanations
# ---------------------------------------------------------------------------

def concept_keys(dec_or_Q):
    """key(p) = sum over prompt positions of Q[p, q], accumulated left to right."""
    Q = dec_or_Q.Q if isinstance(dec_or_Q, Decomposition) else np.asarray(dec_or_Q, float)
    keys = Q[:, 0].copy()
    for q in range(1, Q.shape[1]):
        keys = keys + Q[:, q]
    return keys


def rank_concepts(keys, indices):
    """Indices sorted by key descending; equal keys keep the lower concept index first."""
    return sorted(indices, key=lambda i: (-keys[i], i))


@dataclass
class ExplainedConcept:
    id: str
    text: str
    key: float
    cosine: float | None


@dataclass
class ExplanationReport:
    input_id: str
    text: str
    predicted: str
    label: str | None
    concepts: list
    truncated: bool = False
    attack: dict | None = None

    @property
    def keys(self):
        return [c.key for c in self.concepts]

    def to_json(self):
        out = asdict(self)
        if out["attack"] is None:
            del out["attack"]
        return out


def _input_vector(pool, example):
    enc = pool.encoder
    try:
        return enc.embed(example.text)
    except Exception as exc:  # encoder-specific lookup failures
        logger.debug("no input embedding for %r: %s", example.text[:40], exc)
        return None


def _concept_cos(pool, cid, xvec):
    if xvec is None:
        return None
    cand = pool[cid]
    if cand.embedding is None:
        cand.embedding = pool.encoder.embed(cand.text)
    return cosine(xvec, cand.embedding)


def _class_indices(dec, selected, label):
    wanted = set(selected[label].ids)
    return [i for i, cid in enumerate(dec.concept_ids) if cid in wanted]


def explain(model, dec, example, selected, pool, k=3, input_id="0", classes=None):
    """Top-k concepts of the predicted class, ranked by their coefficient keys."""
    classes = list(classes or dec.classes)
    if isinstance(example, str):
        example = LabeledText(example, "")
    batch = model.encode([example.text])
    logits = model.logits(dec.prompt, batch)[0]
    pred = classes[int(np.argmax(logits))]
    keys = concept_keys(dec)
    idx = _class_indices(dec, selected, pred)
    truncated = k > len(idx)
    if truncated:
        logger.warning("k=%d exceeds |C_y|=%d for class %s; truncating", k, len(idx), pred)
    xvec = _input_vector(pool, example)
    top = rank_concepts(keys, idx)[:k]
    concepts = [ExplainedConcept(dec.concept_ids[i], pool[dec.concept_ids[i]].text,
                                 float(keys[i]), _concept_cos(pool, dec.concept_ids[i], xvec))
                for i in top]
    return ExplanationReport(str(input_id), example.text, pred, example.label or None,
                             concepts, truncated)


# ---------------------------------------------------------------------------
# Causal attack
# ---------------------------------------------------------------------------

@dataclass
class AttackCase:
    input_id: str
    label: str
    predicted: str
    attacked_class: str
    attacked_prediction: str
    pre_similarity: float
    post_similarity: float
    pre_concepts: list
    post_concepts: list


@dataclass
class AttackReport:
    cases: list
    rule: str
    k: int

    @property
    def mean_pre(self):
        return float(np.mean([c.pre_similarity for c in self.cases]))

    @property
    def mean_post(self):
        return float(np.mean([c.post_similarity for c in self.cases]))

    @property
    def delta(self):
        return self.mean_post - self.mean_pre

    def to_json(self):
        return {"rule": self.rule, "k": self.k, "n_cases": len(self.cases),
                "mean_pre_similarity": self.mean_pre, "mean_post_similarity": self.mean_post,
                "delta": self.delta,
                "flipped": sum(c.attacked_prediction != c.predicted for c in self.cases),
                "cases": [asdict(c) for c in self.cases]}


def find_bad_cases(model, dec, examples, classes=None):
    """Examples whose CQ-prompted prediction disagrees with their label."""
    classes = list(classes or dec.classes)
    if not examples:
        return []
    preds = model.predict(dec.prompt, model.encode([e.text for e in examples]))
    return [(str(i), e) for i, (e, p) in enumerate(zip(examples, preds)) if classes[p] != e.label]


def _pick_target(logits, pred_idx, rule, label_idx):
    if rule == "runner_up":
        order = np.argsort(-logits, kind="stable")
        return int(order[1]) if len(order) > 1 else pred_idx
    if rule == "label":
        return label_idx if label_idx is not None else pred_idx
    if rule == "identity":
        return pred_idx
    raise InvalidInput(f"unknown y' rule {rule!r}")


def _mean_cos(pool, ids, xvec):
    vals = [_concept_cos(pool, cid, xvec) for cid in ids]
    return float(np.mean(vals)) if vals else float("nan")


def causal_attack(model, dec, bad_cases, selected, pool, rule="runner_up", k=3, classes=None):
    """Rebuild the prompt from the top-k concepts of another class y' and compare
    the input-explanation cosine before and after.

    ``bad_cases`` holds ``(input_id, LabeledText)`` pairs. ``rule`` picks y':
    ``runner_up`` (second most probable class), ``label`` (the gold label) or
    ``identity`` (y' = y; a no-op control).
    """
    if not bad_cases:
        raise EmptyReport("no bad cases to attack")
    classes = list(classes or dec.classes)
    keys = concept_keys(dec)
    batch = model.encode([e.text for _, e in bad_cases])
    all_logits = model.logits(dec.prompt, batch)
    cases = []
    for (iid, ex), logits in zip(bad_cases, all_logits):
        y = int(np.argmax(logits))
        label_idx = classes.index(ex.label) if ex.label in classes else None
        y2 = _pick_target(logits, y, rule, label_idx)
        xvec = _input_vector(pool, ex)
        pre = rank_concepts(keys, _class_indices(dec, selected, classes[y]))[:k]
        post = rank_concepts(keys, _class_indices(dec, selected, classes[y2]))[:k]
        P_att = dec.C[:, post] @ dec.Q[post]
        att_pred = int(np.argmax(model.logits(P_att, model.encode([ex.text]))[0]))
        pre_ids = [dec.concept_ids[i] for i in pre]
        post_ids = [dec.concept_ids[i] for i in post]
        cases.append(AttackCase(iid, ex.label, classes[y], classes[y2], classes[att_pred],
                                _mean_cos(pool, pre_ids, xvec), _mean_cos(pool, post_ids, xvec),
                                pre_ids, post_ids))
    return AttackReport(cases, rule, k)
