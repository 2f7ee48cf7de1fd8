"""Deterministic synthetic suite for the toy transformer.

The fixture is derived from the frozen toy backbone: pseudo-words are scored
by the logit margin they produce with an empty prompt, the highest-scoring
words become the "positive" vocabulary and a band further down the ranking
becomes the "negative" one. Texts are bags of class words, so the classes
are separable by a threshold on the zero-prompt margin, but a prompt has to
learn where that threshold lies. Concept texts for the stub generator are
short phrases from the same vocabularies.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .decomposer import Decomposition
from .embedding_store import LabeledText, save_dataset
from .candidate_gen import DEFAULT_TEMPLATES
from .toy_transformer import ModelConfig, ToyTransformer

CLASSES = ["negative", "positive"]
_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"

DATA_DIR = Path(__file__).parent / "data"


@dataclass
class FixtureSpec:
    word_seed: int = 7
    n_words: int = 600
    vocab_size: int = 40
    negative_offset: int = 120
    text_len: int = 8
    n_train: int = 200
    n_test: int = 100
    concepts_per_template: int = 6
    concept_len: int = 5
    leak_every: int = 4


def pseudo_words(n, seed):
    """Sorted distinct 2-3 syllable CV words."""
    sylls = [c + v for c in _CONSONANTS for v in _VOWELS]
    rng = np.random.default_rng(seed)
    words = set()
    while len(words) < n:
        words.add("".join(rng.choice(sylls, size=int(rng.integers(2, 4)))))
    return sorted(words)


def class_vocabularies(model, spec):
    """Rank words by their zero-prompt margin logit[1] - logit[0]."""
    words = pseudo_words(spec.n_words, spec.word_seed)
    batch = model.encode(words)
    lg = model.logits(np.zeros((model.config.d, 1)), batch)
    margin = lg[:, 1] - lg[:, 0]
    order = sorted(range(len(words)), key=lambda i: (-margin[i], i))
    pos = [words[i] for i in order[:spec.vocab_size]]
    neg = [words[i] for i in order[spec.negative_offset:spec.negative_offset + spec.vocab_size]]
    return {"negative": neg, "positive": pos}


def _texts(rng, vocab, n, length):
    return [" ".join(rng.choice(vocab, size=length)) for _ in range(n)]


def _split(rng, vocab, n, length):
    half = n // 2
    recs = [LabeledText(t, "positive") for t in _texts(rng, vocab["positive"], half, length)]
    recs += [LabeledText(t, "negative") for t in _texts(rng, vocab["negative"], n - half, length)]
    return [recs[i] for i in rng.permutation(len(recs))]


def stub_records(vocab, spec, seed):
    """Generator stub lines; every ``leak_every``-th text mentions its class name."""
    rng = np.random.default_rng(seed)
    out, leaks = [], 0
    for y in CLASSES:
        for t in range(len(DEFAULT_TEMPLATES)):
            for j in range(spec.concepts_per_template):
                words = list(rng.choice(vocab[y], size=spec.concept_len, replace=False))
                if (t * spec.concepts_per_template + j) % spec.leak_every == 0:
                    # alternate case so the filter is exercised case-insensitively
                    words.insert(int(rng.integers(0, len(words) + 1)), y.upper() if leaks % 2 else y)
                    leaks += 1
                out.append({"class": y, "template_id": t + 1, "text": " ".join(words)})
    return out


@dataclass
class Fixture:
    model: ToyTransformer
    vocab: dict
    train: list
    test: list
    stub: list


def build_fixture(model_config=None, spec=None, seed=0):
    spec = spec or FixtureSpec()
    model = ToyTransformer(model_config or ModelConfig())
    vocab = class_vocabularies(model, spec)
    rng = np.random.default_rng(seed)
    train = _split(rng, vocab, spec.n_train, spec.text_len)
    test = _split(rng, vocab, spec.n_test, spec.text_len)
    return Fixture(model, vocab, train, test, stub_records(vocab, spec, seed + 1))


FIXTURE_CONFIG = {
    "name": "synthetic",
    "out": "runs",
    "classes": CLASSES,
    "train": "train.jsonl",
    "test": "test.jsonl",
    "generator": {"kind": "stub", "stub": "stub.jsonl", "samples_per_prompt": 6},
    "encoder": {"mode": "model"},
    "model": asdict(ModelConfig()),
    "selection": {"k": 10, "lambda": 1.0, "temperature": 1.0},
    "ptune": {"lr": 0.03, "max_steps": 600, "patience": 100, "eval_every": 5, "batch_size": 32},
    "tune": {"mu": 0.5, "lr": 0.01, "max_steps": 1000, "patience": 100, "eval_every": 5,
             "batch_size": 32, "freeze_C": False},
    "n_prompt": 1,
    "shots": ["full"],
    "seeds": [1, 42, 100, 999, 1756],
    "explain": {"k": 3},
    "attack": {"rule": "runner_up", "k": 3, "probes": "probes.jsonl"},
    "attribution": {"methods": ["grad", "ig"], "ig_steps": 32, "top_k": [3, 5, 10],
                    "max_inputs": 20},
    "sweep_k": [1, 5, 10, 15, 20],
}


def write_fixture(out_dir, spec=None, seed=0):
    """Write train/test/stub/probe JSONL and a runnable config.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fx = build_fixture(spec=spec, seed=seed)
    save_dataset(out / "train.jsonl", fx.train)
    save_dataset(out / "test.jsonl", fx.test)
    with open(out / "stub.jsonl", "w", encoding="utf-8") as fh:
        for rec in fx.stub:
            fh.write(json.dumps(rec) + "\n")
    save_dataset(out / "probes.jsonl", [r for _, r in flipped_cases(fx.vocab, 30, seed + 2)])
    (out / "config.json").write_text(json.dumps(FIXTURE_CONFIG, indent=2, sort_keys=True) + "\n")
    return fx


def flipped_cases(vocab, n, seed=0, length=8):
    """Inputs written with one class's words but labelled as the other class.

    A model that reads the words predicts the writing class, so each of these
    is a bad case whose explanation concepts share vocabulary with the input.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        src = CLASSES[i % 2]
        dst = CLASSES[1 - i % 2]
        out.append((f"flip-{i:03d}", LabeledText(_texts(rng, vocab[src], 1, length)[0], dst)))
    return out


def noisy_tail_instance(n_concepts=20, n_q=2, seed=0, head_noise=0.01, tail_noise=2.0):
    """Keys that decrease with rank and scores equal to keys plus noise whose
    scale grows linearly from the top-ranked concept to the last one.

    Returns ``(Decomposition, scores)``.
    """
    rng = np.random.default_rng(seed)
    keys = np.linspace(float(n_concepts), 1.0, n_concepts)
    Q = np.tile((keys / n_q)[:, None], (1, n_q))
    sigma = np.linspace(head_noise, tail_noise, n_concepts)
    scores = keys + sigma * rng.standard_normal(n_concepts)
    C = np.eye(n_concepts)[:max(n_concepts, 1)]
    dec = Decomposition(C, Q, [f"c{i:02d}" for i in range(n_concepts)], "frobenius_fit")
    return dec, scores
