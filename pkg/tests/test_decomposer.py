import json

import numpy as np
import pytest
import scipy.linalg

from cdprompt.candidate_gen import DEFAULT_TEMPLATES, StubClient, generate_candidates
from cdprompt.decomposer import (
    Decomposition,
    TuneConfig,
    causal_attack,
    cd_tune,
    concept_keys,
    concept_matrix,
    explain,
    find_bad_cases,
    frobenius_fit,
    solve_coefficients_gd,
)
from cdprompt.embedding_store import (
    CandidatePool,
    ConceptCandidate,
    HashEncoder,
    LabeledText,
    ModelEncoder,
)
from cdprompt.errors import EmptyReport, FormatError, InvalidInput, TrainingError
from cdprompt.optim import TrainConfig
from cdprompt.submodular import SelectedSet, SelectionConfig, select_all
from cdprompt.synthetic import CLASSES, flipped_cases
from cdprompt.toy_transformer import ModelConfig, ToyTransformer, accuracy_of, p_tune


@pytest.fixture(scope="module")
def pipeline(fixture_suite, suite_batches, tmp_path_factory):
    """Pool, selection and a P-tuned prompt on the synthetic suite."""
    stub = tmp_path_factory.mktemp("stub") / "stub.jsonl"
    stub.write_text("".join(json.dumps(r) + "\n" for r in fixture_suite.stub))
    m = fixture_suite.model
    pool = generate_candidates(StubClient(stub, 6), DEFAULT_TEMPLATES, CLASSES, encoder=ModelEncoder(m))
    selected = select_all(pool, fixture_suite.train, SelectionConfig(k=10))
    train, test = suite_batches
    P, _ = p_tune(m, train, 1, TrainConfig(lr=0.03, max_steps=600, eval_every=5, seed=1))
    C0, ids = concept_matrix(selected, pool, CLASSES)
    return {"model": m, "pool": pool, "selected": selected, "P": P, "C0": C0, "ids": ids,
            "train": train, "test": test}


def tune_cfg(**kw):
    base = dict(lr=0.01, max_steps=400, eval_every=5, seed=1)
    base.update(kw)
    return TuneConfig(**base)


class TestFrobeniusFit:
    def test_trivial_square(self, rng):
        P = rng.standard_normal((8, 3))
        dec = frobenius_fit(P, 3)
        assert dec.meta["residual"] < 1e-12 and dec.meta["within_epsilon"]
        assert dec.provenance == "frobenius_fit"

    def test_rank_deficient_tail(self, rng):
        P = rng.standard_normal((16, 4))
        s = scipy.linalg.svdvals(P)
        dec = frobenius_fit(P, 2)
        assert abs(dec.meta["residual_sq"] - (s[2] ** 2 + s[3] ** 2)) < 1e-6
        assert not dec.meta["within_epsilon"]
        np.testing.assert_allclose(np.linalg.norm(dec.prompt - P) ** 2, dec.meta["residual_sq"])

    def test_more_concepts_than_columns(self, rng):
        P = rng.standard_normal((6, 2))
        dec = frobenius_fit(P, 5)
        assert dec.C.shape == (6, 5) and dec.Q.shape == (5, 2)
        assert dec.meta["residual"] <= 1e-10

    def test_frozen_orthonormal_span(self, rng):
        basis = scipy.linalg.orth(rng.standard_normal((16, 3)))
        P = basis @ rng.standard_normal((3, 4))
        dec = frobenius_fit(P, 3, init="concepts", concept_matrix=basis)
        assert dec.meta["residual"] < 1e-9
        np.testing.assert_array_equal(dec.C, basis)

    def test_frozen_projection_residual(self, rng):
        C = rng.standard_normal((10, 3))
        P = rng.standard_normal((10, 2))
        proj = C @ np.linalg.inv(C.T @ C) @ C.T
        expected = np.linalg.norm(P - proj @ P)
        dec = frobenius_fit(P, 3, init="concepts", concept_matrix=C)
        assert dec.meta["residual"] == pytest.approx(expected, abs=1e-10)
        assert not dec.meta["within_epsilon"]

    @pytest.mark.parametrize("kw", [{"n_concepts": 0}, {"n_concepts": 2, "epsilon": 0.0},
                                    {"n_concepts": 2, "init": "random"},
                                    {"n_concepts": 2, "init": "concepts"}])
    def test_invalid(self, kw):
        with pytest.raises(InvalidInput):
            frobenius_fit(np.ones((4, 2)), **kw)

    def test_convex_subproblem(self, rng):
        C = rng.standard_normal((12, 4))
        P = rng.standard_normal((12, 3))
        residuals = [solve_coefficients_gd(C, P, rng.standard_normal((4, 3)) * 10)[1] for _ in range(50)]
        assert max(residuals) - min(residuals) < 1e-6
        best = frobenius_fit(P, 4, init="concepts", concept_matrix=C).meta["residual"]
        assert abs(min(residuals) - best) < 1e-6


class TestKeys:
    def test_row_sums(self):
        np.testing.assert_array_equal(concept_keys(np.array([[1.0, 2.0], [3.0, 4.0]])), [3.0, 7.0])

    def test_single_column(self, rng):
        Q = rng.standard_normal((5, 1))
        np.testing.assert_array_equal(concept_keys(Q), Q[:, 0])

    def test_random_against_loop(self, rng):
        Q = rng.standard_normal((5, 3))
        expected = [sum(Q[p, q] for q in range(3)) for p in range(5)]
        np.testing.assert_array_equal(concept_keys(Q), expected)

    def test_permutation_equivariant(self, rng):
        Q = rng.standard_normal((7, 4))
        perm = rng.permutation(7)
        np.testing.assert_array_equal(concept_keys(Q[perm]), concept_keys(Q)[perm])


class TestDecompositionIO:
    def test_round_trip(self, tmp_path, rng):
        C = rng.standard_normal((4, 3)).astype(np.float32)
        Q = rng.standard_normal((3, 2)).astype(np.float32)
        dec = Decomposition(C, Q, ["a", "b", "c"], "cd_tuned", ["x", "y"], {"mu": 0.5})
        dec.save(tmp_path / "d")
        back = Decomposition.load(tmp_path / "d")
        np.testing.assert_array_equal(back.C, C)
        np.testing.assert_array_equal(back.Q, Q)
        assert back.concept_ids == ["a", "b", "c"] and back.meta == {"mu": 0.5}

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FormatError):
            Decomposition.load(tmp_path)

    def test_shape_checks(self):
        with pytest.raises(InvalidInput):
            Decomposition(np.ones((4, 3)), np.ones((2, 1)), ["a", "b", "c"])
        with pytest.raises(InvalidInput):
            Decomposition(np.ones((4, 2)), np.ones((2, 1)), ["a"])


class TestCdTune:
    def test_exact_init_has_zero_fidelity(self, pipeline):
        P = pipeline["P"]
        C0 = np.concatenate([P, pipeline["C0"][:, :3]], axis=1)
        dec, hist = cd_tune(pipeline["model"], P, C0, ["p", "a", "b", "c"], pipeline["train"],
                            tune_cfg(mu=1.0, max_steps=0))
        assert dec.meta["initial_kl"] <= 1e-6 and dec.meta["final_kl"] <= 1e-6
        assert hist.best_step == 0

    def test_mu_zero_is_task_loss(self, pipeline):
        dec, _ = cd_tune(pipeline["model"], pipeline["P"], pipeline["C0"], pipeline["ids"],
                         pipeline["train"], tune_cfg(mu=0.0))
        assert accuracy_of(pipeline["model"], dec.prompt, pipeline["test"]) >= 0.95

    def test_matches_prompt_tuning(self, pipeline):
        m = pipeline["model"]
        dec, hist = cd_tune(m, pipeline["P"], pipeline["C0"], pipeline["ids"], pipeline["train"],
                            tune_cfg(mu=0.5), classes=CLASSES)
        acc_p = accuracy_of(m, pipeline["P"], pipeline["test"])
        acc_cd = accuracy_of(m, dec.prompt, pipeline["test"])
        assert abs(acc_cd - acc_p) <= 0.05
        assert dec.meta["final_loss"] <= dec.meta["initial_loss"]
        assert dec.provenance == "cd_tuned" and dec.classes == CLASSES
        assert dec.concept_ids == pipeline["ids"] and dec.n_concepts == 20

    def test_freeze_c(self, pipeline):
        dec, _ = cd_tune(pipeline["model"], pipeline["P"], pipeline["C0"], pipeline["ids"],
                         pipeline["train"], tune_cfg(freeze_C=True, max_steps=50))
        np.testing.assert_array_equal(dec.C, pipeline["C0"])

    def test_infinite_capacity_fidelity(self, fixture_suite, suite_batches):
        m, (train, _) = fixture_suite.model, suite_batches
        # a converged teacher: the mu=1 optimum sits at (p* + onehot) / 2, so
        # the attainable KL shrinks with the teacher's remaining uncertainty
        P, _ = p_tune(m, train, 1, TrainConfig(lr=0.05, max_steps=2000, eval_every=5, seed=1))
        rng = np.random.default_rng(0)
        C0 = np.concatenate([P, rng.standard_normal((64, 6)) * 0.1], axis=1)
        dec, _ = cd_tune(m, P, C0, [f"c{i}" for i in range(7)], train, tune_cfg(mu=1.0, max_steps=500))
        assert dec.meta["final_kl"] < 1e-3

    def test_invalid(self, pipeline):
        with pytest.raises(InvalidInput):
            TuneConfig(mu=1.5)
        with pytest.raises(InvalidInput):
            cd_tune(pipeline["model"], pipeline["P"], np.zeros((64, 0)), [], pipeline["train"])
        with pytest.raises(InvalidInput):
            concept_matrix({y: SelectedSet(y, 1, []) for y in CLASSES}, pipeline["pool"], CLASSES)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, pipeline):
        with pytest.raises(TrainingError):
            cd_tune(pipeline["model"], pipeline["P"], pipeline["C0"] * 1e200, pipeline["ids"],
                    pipeline["train"], tune_cfg(lr=1e300, max_steps=5))


def _toy_explain_setup(keys_by_class, n_classes=2, d=8):
    """Decomposition with chosen keys; model with heads biased to class 0."""
    model = ToyTransformer(ModelConfig(d=d, heads=2, ffn_dim=4, vocab_size=17, n_classes=n_classes))
    model.weights.head[:] = 0.0
    model.weights.head_bias[:] = -np.arange(n_classes, dtype=float)
    classes = [f"k{i}" for i in range(n_classes)]
    cands, sel, qrows = [], {}, []
    for ci, y in enumerate(classes):
        ids = []
        for j, key in enumerate(keys_by_class[ci]):
            cid = f"{y}-{j:02d}"
            cands.append(ConceptCandidate(cid, y, f"{y} word{j}"))
            ids.append(cid)
            qrows.append([key])
        sel[y] = SelectedSet(y, len(ids), ids)
    pool = CandidatePool.from_candidates(classes, cands, HashEncoder(d))
    C, ids = concept_matrix(sel, pool, classes)
    return model, Decomposition(C, np.array(qrows), ids, "cd_tuned", classes), sel, pool


class TestExplain:
    def test_all_concepts_sorted(self):
        model, dec, sel, pool = _toy_explain_setup([[0.1, 0.9, 0.5], [1.0, 2.0]])
        rep = explain(model, dec, LabeledText("some input", "k0"), sel, pool, k=3)
        assert rep.predicted == "k0"
        assert [c.id for c in rep.concepts] == ["k0-01", "k0-02", "k0-00"]
        assert rep.keys == sorted(rep.keys, reverse=True) and not rep.truncated
        assert all(-1.0 <= c.cosine <= 1.0 for c in rep.concepts)

    def test_equal_keys_lower_id_first(self):
        model, dec, sel, pool = _toy_explain_setup([[0.5, 0.5, 0.5], [1.0]])
        rep = explain(model, dec, "text", sel, pool, k=2)
        assert [c.id for c in rep.concepts] == ["k0-00", "k0-01"]

    def test_truncation_flag(self):
        model, dec, sel, pool = _toy_explain_setup([[0.3, 0.2], [1.0]])
        rep = explain(model, dec, "text", sel, pool, k=5)
        assert rep.truncated and len(rep.concepts) == 2

    def test_four_class_report_layout(self):
        classes = ["world", "sports", "business", "sci/tech"]
        model, dec, sel, pool = _toy_explain_setup([[0.4, 0.1, 0.9, 0.2]] * 4, n_classes=4)
        rep = explain(model, dec, LabeledText("stocks rally", "k2"), sel, pool, k=3, input_id="7")
        obj = rep.to_json()
        assert set(obj) == {"input_id", "text", "predicted", "label", "concepts", "truncated"}
        assert obj["input_id"] == "7" and obj["label"] == "k2"
        assert [c["key"] for c in obj["concepts"]] == [0.9, 0.4, 0.2]
        assert len(classes) == len(dec.classes)

    def test_deterministic(self, pipeline):
        dec, _ = cd_tune(pipeline["model"], pipeline["P"], pipeline["C0"], pipeline["ids"],
                         pipeline["train"], tune_cfg(max_steps=20), classes=CLASSES)
        text = LabeledText("zeguvi sarile noso", "positive")
        a = explain(pipeline["model"], dec, text, pipeline["selected"], pipeline["pool"])
        b = explain(pipeline["model"], dec, text, pipeline["selected"], pipeline["pool"])
        assert a.to_json() == b.to_json() and len(a.concepts) == 3


@pytest.fixture(scope="module")
def tuned(pipeline):
    dec, _ = cd_tune(pipeline["model"], pipeline["P"], pipeline["C0"], pipeline["ids"],
                     pipeline["train"], tune_cfg(), classes=CLASSES)
    return dec


class TestCausalAttack:
    def test_identity_attack_is_noop(self, pipeline, tuned, fixture_suite):
        cases = flipped_cases(fixture_suite.vocab, 6, seed=5)
        rep = causal_attack(pipeline["model"], tuned, cases, pipeline["selected"], pipeline["pool"],
                            rule="identity")
        assert rep.delta == 0.0
        assert all(c.pre_concepts == c.post_concepts for c in rep.cases)

    def test_empty(self, pipeline, tuned):
        assert find_bad_cases(pipeline["model"], tuned, [], CLASSES) == []
        with pytest.raises(EmptyReport):
            causal_attack(pipeline["model"], tuned, [], pipeline["selected"], pipeline["pool"])

    def test_flipped_cases_are_bad(self, pipeline, tuned, fixture_suite):
        cases = [r for _, r in flipped_cases(fixture_suite.vocab, 20, seed=5)]
        assert len(find_bad_cases(pipeline["model"], tuned, cases, CLASSES)) == 20

    def test_similarity_drops(self, pipeline, tuned, fixture_suite):
        cases = flipped_cases(fixture_suite.vocab, 24, seed=5)
        rep = causal_attack(pipeline["model"], tuned, cases, pipeline["selected"], pipeline["pool"])
        assert len(rep.cases) == 24
        assert rep.mean_post < rep.mean_pre
        assert all(c.attacked_class != c.predicted for c in rep.cases)
        obj = rep.to_json()
        assert obj["n_cases"] == 24 and obj["delta"] == pytest.approx(rep.mean_post - rep.mean_pre)

    def test_unknown_rule(self, pipeline, tuned, fixture_suite):
        with pytest.raises(InvalidInput):
            causal_attack(pipeline["model"], tuned, flipped_cases(fixture_suite.vocab, 2),
                          pipeline["selected"], pipeline["pool"], rule="random")
