"""Text encoders, dataset ingestion, candidate pools and the CDEM tensor format."""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateInput,
    EmptyClass,
    FormatError,
    InvalidInput,
    MissingEmbedding,
    ParseError,
    SchemaError,
)
from .numerics import normalize

CDEM_MAGIC = b"CDEM"
CDEM_VERSION = 1
_HEADER = struct.Struct("<4sIII")

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:['/-][a-z0-9]+)*")


def tokenize(text):
    return _TOKEN_RE.findall(text.lower())


def stable_hash(key: str, salt: int = 0) -> int:
    digest = hashlib.blake2b(f"{salt}:{key}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


# ---------------------------------------------------------------------------
# CDEM binary format
# ---------------------------------------------------------------------------

def save_embeddings(path, matrix):
    """Write ``matrix`` as CDEM: magic, u32 version, u32 rows, u32 cols, f32 LE payload."""
    m = np.asarray(matrix)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise FormatError(f"CDEM holds 2-D matrices, got shape {m.shape}")
    rows, cols = m.shape
    payload = np.ascontiguousarray(m, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CDEM_MAGIC, CDEM_VERSION, rows, cols))
        fh.write(payload)


def load_embeddings(path) -> np.ndarray:
    """Read a CDEM file; values come back as float64 holding the exact float32 payload."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, rows, cols = _HEADER.unpack_from(data)
    if magic != CDEM_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CDEM_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = rows * cols * 4
    body = data[_HEADER.size:]
    if len(body) != expected:
        raise FormatError(
            f"{path}: header declares {rows}x{cols} ({expected} bytes), payload has {len(body)}"
        )
    out = np.frombuffer(body, dtype="<f4").reshape(rows, cols)
    return out.astype(np.float64)


def to_f32_grid(a):
    """Round to the nearest float32 so values survive a CDEM round trip unchanged."""
    return np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabeledText:
    text: str
    label: str


@dataclass
class ConceptCandidate:
    id: str
    class_label: str
    text: str
    embedding: np.ndarray | None = None

    def to_json(self):
        return {"id": self.id, "class": self.class_label, "text": self.text}


def _read_jsonl(path, required):
    path = Path(path)
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(obj, dict):
                raise ParseError(f"{path}: expected a JSON object", lineno)
            for key in required:
                if key not in obj:
                    raise ParseError(f"{path}: missing field {key!r}", lineno)
                if not isinstance(obj[key], (str, int)) or isinstance(obj[key], bool):
                    raise ParseError(f"{path}: field {key!r} has wrong type", lineno)
            records.append((lineno, obj))
    return records


def load_dataset(path, labels=None):
    """Load ``{"text", "label"}`` JSON-lines, validating labels against ``labels`` if given."""
    allowed = None if labels is None else {str(x) for x in labels}
    out = []
    for lineno, obj in _read_jsonl(path, ("text", "label")):
        text = str(obj["text"])
        label = str(obj["label"])
        if not text.strip():
            raise ParseError(f"{path}: empty text", lineno)
        if allowed is not None and label not in allowed:
            raise SchemaError(f"{path}: line {lineno}: unknown label {label!r}")
        out.append(LabeledText(text, label))
    return out


def save_dataset(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"text": r.text, "label": r.label}) + "\n")


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------

class Encoder:
    """Maps text to a unit vector in R^dim. Subclasses implement ``_raw``."""

    mode = "abstract"

    def __init__(self, dim):
        if dim < 1:
            raise InvalidInput("encoder dim must be positive")
        self.dim = int(dim)

    def _raw(self, text):
        raise NotImplementedError

    def embed(self, text):
        return normalize(self._raw(text))

    def embed_many(self, texts):
        if not texts:
            return np.zeros((0, self.dim))
        return np.stack([self.embed(t) for t in texts])


class HashEncoder(Encoder):
    """Seeded token n-gram hashing encoder; no model files needed.

    Each unigram/bigram feature draws a Gaussian vector from a PCG64 stream
    keyed by a blake2b digest of the feature, so vectors are identical across
    processes and platforms.
    """

    mode = "hash"

    def __init__(self, dim=64, seed=0, ngram=2):
        super().__init__(dim)
        self.seed = int(seed)
        self.ngram = int(ngram)
        self._cache = {}

    def _feature(self, feat):
        v = self._cache.get(feat)
        if v is None:
            rng = np.random.default_rng(stable_hash(feat, self.seed))
            v = rng.standard_normal(self.dim)
            self._cache[feat] = v
        return v

    def _raw(self, text):
        toks = tokenize(text)
        if not toks:
            toks = [text]
        acc = np.zeros(self.dim)
        for n in range(1, self.ngram + 1):
            for i in range(len(toks) - n + 1):
                acc = acc + self._feature(" ".join(toks[i:i + n]))
        return acc


class FileEncoder(Encoder):
    """Lookup table of precomputed vectors; unknown text is an error, never hashed."""

    mode = "file"

    def __init__(self, texts, matrix):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(texts):
            raise InvalidInput("embedding rows must align with texts")
        super().__init__(matrix.shape[1])
        self._table = {}
        for t, row in zip(texts, matrix):
            self._table[t] = row

    @classmethod
    def from_files(cls, matrix_path, texts_path):
        texts = [str(obj["text"]) for _, obj in _read_jsonl(texts_path, ("text",))]
        return cls(texts, load_embeddings(matrix_path))

    def _raw(self, text):
        try:
            return self._table[text]
        except KeyError:
            raise MissingEmbedding(f"no embedding stored for text {text[:60]!r}") from None


class ModelEncoder(Encoder):
    """Mean of the toy transformer's token-embedding rows for the text's tokens.

    Puts concept vectors in the same space the model reads prompts from, so
    ``C`` initialised from this encoder is directly usable as a prompt basis.
    """

    mode = "model"

    def __init__(self, model):
        super().__init__(model.config.d)
        self.model = model

    def _raw(self, text):
        ids = self.model.token_ids(text)
        return self.model.weights.embedding[ids].mean(axis=0)


def make_encoder(spec, model=None, base_dir="."):
    """Build an encoder from a config dict ``{"mode": ..., ...}``."""
    mode = spec.get("mode", "hash")
    if mode == "hash":
        return HashEncoder(spec.get("dim", 64), spec.get("seed", 0), spec.get("ngram", 2))
    if mode == "file":
        base = Path(base_dir)
        return FileEncoder.from_files(base / spec["path"], base / spec["texts"])
    if mode == "model":
        if model is None:
            raise InvalidInput("model encoder requires a model")
        return ModelEncoder(model)
    raise InvalidInput(f"unknown encoder mode {mode!r}")


# ---------------------------------------------------------------------------
# Candidate pool
# ---------------------------------------------------------------------------

@dataclass
class CandidatePool:
    classes: list
    by_class: dict
    encoder: Encoder | None = None
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.classes = [str(c) for c in self.classes]
        seen = {}
        for y, cands in self.by_class.items():
            if y not in self.classes:
                raise SchemaError(f"candidate class {y!r} not in class set")
            for c in cands:
                if c.class_label != y:
                    raise SchemaError(f"candidate {c.id} filed under {y!r} but labelled {c.class_label!r}")
                if c.id in seen:
                    raise SchemaError(f"duplicate candidate id {c.id!r}")
                seen[c.id] = c
        for y in self.classes:
            self.by_class[y] = sorted(self.by_class.get(y, []), key=lambda c: c.id)
        self._index = seen

    @classmethod
    def from_candidates(cls, classes, candidates, encoder=None):
        by_class = {str(y): [] for y in classes}
        for c in candidates:
            if c.class_label not in by_class:
                raise SchemaError(f"candidate {c.id}: unknown class {c.class_label!r}")
            by_class[c.class_label].append(c)
        return cls(list(classes), by_class, encoder)

    def __len__(self):
        return len(self._index)

    def __getitem__(self, cid):
        return self._index[cid]

    def candidates(self, y=None):
        if y is None:
            return [c for cls in self.classes for c in self.by_class[cls]]
        return self.by_class[str(y)]

    def embed_all(self, encoder=None):
        enc = encoder or self.encoder
        if enc is None:
            raise InvalidInput("pool has no encoder")
        for c in self.candidates():
            if c.embedding is None:
                c.embedding = enc.embed(c.text)
        return self

    def embeddings(self, y):
        self.embed_all()
        cands = self.by_class[str(y)]
        if not cands:
            return np.zeros((0, self.encoder.dim))
        return np.stack([c.embedding for c in cands])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for c in self.candidates():
                fh.write(json.dumps(c.to_json()) + "\n")

    @classmethod
    def load(cls, path, classes, encoder=None):
        cands = []
        for lineno, obj in _read_jsonl(path, ("id", "class", "text")):
            if str(obj["class"]) not in {str(c) for c in classes}:
                raise SchemaError(f"{path}: line {lineno}: unknown class {obj['class']!r}")
            cands.append(ConceptCandidate(str(obj["id"]), str(obj["class"]), str(obj["text"])))
        return cls.from_candidates(classes, cands, encoder)


def mean_class_embedding(encoder, texts, y):
    """Normalised mean of the encoder vectors of texts labelled ``y``."""
    vecs = [encoder.embed(t.text) for t in texts if t.label == str(y)]
    if not vecs:
        raise EmptyClass(f"no texts with label {y!r}")
    mean = np.mean(np.stack(vecs), axis=0)
    try:
        return normalize(mean)
    except DegenerateInput:
        raise DegenerateInput(f"mean embedding of class {y!r} is the zero vector") from None
