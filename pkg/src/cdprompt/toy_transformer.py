"""A single transformer block (multi-head attention + FFN, residuals, no layer norm)
with a linear classifier head, written directly in numpy with explicit backprop.

Sequences are stored row-major as ``(positions, d)``; the continuous prompt
``P`` is ``(d, N_q)`` and is prepended column by column. Weights are frozen:
gradients flow only to the token sequence, which is all prompt tuning,
decomposition tuning and attribution need.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .embedding_store import load_embeddings, save_embeddings, stable_hash, tokenize
from .errors import FormatError, InvalidInput, ShapeError
from .numerics import log_softmax, softmax
from .optim import TrainConfig, train_loop

_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class ModelConfig:
    d: int = 64
    heads: int = 4
    ffn_dim: int = 128
    activation: str = "gelu"
    vocab_size: int = 2048
    n_classes: int = 2
    readout: str = "first"  # "first" prompt position, or "mask" token after the prompt
    init: str = "scaled"    # "scaled": N(0, 1/fan_in), unit-variance embeddings; "fixed": N(0, init_std)
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise InvalidInput(f"heads ({self.heads}) must divide d ({self.d})")
        if self.ffn_dim < 1:
            raise InvalidInput("ffn_dim must be >= 1")
        if self.activation not in ("identity", "relu", "gelu"):
            raise InvalidInput(f"unknown activation {self.activation!r}")
        if self.readout not in ("first", "mask"):
            raise InvalidInput(f"unknown readout {self.readout!r}")
        if self.init not in ("scaled", "fixed"):
            raise InvalidInput(f"unknown init {self.init!r}")

    @property
    def d_head(self):
        return self.d // self.heads

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in (d or {}).items() if k in known})


@dataclass
class BlockWeights:
    embedding: np.ndarray   # (vocab, d)
    mask_token: np.ndarray  # (d,)
    w_q: np.ndarray         # (H, d_h, d)
    w_k: np.ndarray         # (H, d_h, d)
    w_v: np.ndarray         # (H, d_h, d)   W_V^h
    w_o: np.ndarray         # (H, d, d_h)   W_O^h
    w1: np.ndarray          # (d, M)  inner, columns r_m
    w2: np.ndarray          # (d, M)  outer, columns p_m
    head: np.ndarray        # (N, d)
    head_bias: np.ndarray   # (N,)

    NAMES = ("embedding", "mask_token", "w_q", "w_k", "w_v", "w_o", "w1", "w2",
             "head", "head_bias")

    @classmethod
    def init(cls, cfg: ModelConfig):
        rng = np.random.default_rng(cfg.seed)
        H, dh, d, M, N = cfg.heads, cfg.d_head, cfg.d, cfg.ffn_dim, cfg.n_classes

        def g(shape, fan_in):
            std = cfg.init_std if cfg.init == "fixed" else 1.0 / math.sqrt(fan_in)
            # float32-representable so CDEM checkpoints are exact
            return (rng.standard_normal(shape) * std).astype(np.float32).astype(np.float64)

        return cls(
            embedding=g((cfg.vocab_size, d), 1), mask_token=g((d,), 1),
            w_q=g((H, dh, d), d), w_k=g((H, dh, d), d), w_v=g((H, dh, d), d),
            w_o=g((H, d, dh), d), w1=g((d, M), d), w2=g((d, M), M), head=g((N, d), d),
            head_bias=np.zeros(N),
        )

    def zeros_like(self):
        return BlockWeights(**{n: np.zeros_like(getattr(self, n)) for n in self.NAMES})


@dataclass
class AttentionTrace:
    tokens: np.ndarray       # (n, d) prompt-augmented sequence t_j
    attention: np.ndarray    # (H, n, n)  A^h_{i,j}
    z: np.ndarray            # (n, H, d_h)
    attn_out: np.ndarray     # (n, d)   sum_h W_O^h z_i^h
    u: np.ndarray            # (n, d)   t_i + attn_out_i
    hidden_pre: np.ndarray   # (n, M)   r_m^T u_i
    hidden: np.ndarray       # (n, M)   phi(r_m^T u_i)
    ffn_out: np.ndarray      # (n, d)
    y: np.ndarray            # (n, d)   block output
    readout: int


@dataclass
class Batch:
    """Padded input embeddings ``x`` (B, n, d), validity ``mask`` (B, n), int ``labels``."""

    x: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    _kv: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return self.x.shape[0]

    def take(self, idx):
        sub = Batch(self.x[idx], self.mask[idx], self.labels[idx])
        sub._kv = {key: (k[idx], v[idx]) for key, (k, v) in self._kv.items()}
        return sub

    def input_kv(self, weights):
        """Per-head keys and values of the input tokens, (B, H, n, d_h) each.

        They do not depend on the prompt, so they are computed once per weight set.
        """
        key = id(weights)
        hit = self._kv.get(key)
        if hit is None:
            B, n, d = self.x.shape
            H, dh = weights.w_k.shape[:2]
            flat = self.x.reshape(B * n, d)
            k = (flat @ weights.w_k.reshape(H * dh, d).T).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
            v = (flat @ weights.w_v.reshape(H * dh, d).T).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
            hit = self._kv[key] = (np.ascontiguousarray(k), np.ascontiguousarray(v))
        return hit


def _act(name, h):
    if name == "identity":
        return h
    if name == "relu":
        return np.maximum(h, 0.0)
    return 0.5 * h * (1.0 + erf(h / _SQRT2))


def _act_grad(name, h):
    if name == "identity":
        return np.ones_like(h)
    if name == "relu":
        return (h > 0).astype(np.float64)
    return 0.5 * (1.0 + erf(h / _SQRT2)) + h * _INV_SQRT2PI * np.exp(-0.5 * h * h)


class ToyTransformer:
    def __init__(self, config: ModelConfig, weights: BlockWeights | None = None):
        self.config = config
        self.weights = weights if weights is not None else BlockWeights.init(config)
        self._check_shapes()

    def _check_shapes(self):
        c, w = self.config, self.weights
        H, dh, d, M, N = c.heads, c.d_head, c.d, c.ffn_dim, c.n_classes
        expected = {"embedding": (c.vocab_size, d), "mask_token": (d,), "w_q": (H, dh, d),
                    "w_k": (H, dh, d), "w_v": (H, dh, d), "w_o": (H, d, dh), "w1": (d, M),
                    "w2": (d, M), "head": (N, d), "head_bias": (N,)}
        for name, shape in expected.items():
            got = getattr(w, name).shape
            if got != shape:
                raise ShapeError(f"{name}: expected {shape}, got {got}")

    # -- tokens --------------------------------------------------------------

    def token_ids(self, text):
        toks = tokenize(text) or [text]
        return np.array([stable_hash(t, self.config.seed) % self.config.vocab_size for t in toks])

    def embed_text(self, text):
        return self.weights.embedding[self.token_ids(text)]

    def encode(self, texts, labels=None, label_index=None):
        """Pad a list of texts (or ``LabeledText``) into a :class:`Batch`."""
        seqs, ys = [], []
        for i, t in enumerate(texts):
            if hasattr(t, "text"):
                seqs.append(self.embed_text(t.text))
                ys.append(label_index[t.label] if label_index is not None else -1)
            else:
                seqs.append(self.embed_text(t))
                ys.append(-1 if labels is None else labels[i])
        return batch_from_sequences(seqs, ys, self.config.d)

    # -- forward / backward ----------------------------------------------------

    def _assemble(self, prompt, batch):
        P = np.asarray(prompt, dtype=np.float64)
        d = self.config.d
        if P.ndim != 2 or P.shape[0] != d:
            raise ShapeError(f"prompt must be (d={d}, N_q), got {P.shape}")
        if batch.x.shape[-1] != d:
            raise ShapeError(f"input embeddings must have dim {d}, got {batch.x.shape[-1]}")
        B = len(batch)
        nq = P.shape[1]
        parts = [np.broadcast_to(P.T, (B, nq, d))]
        masks = [np.ones((B, nq), dtype=bool)]
        if self.config.readout == "mask":
            parts.append(np.broadcast_to(self.weights.mask_token, (B, 1, d)))
            masks.append(np.ones((B, 1), dtype=bool))
        parts.append(batch.x)
        masks.append(batch.mask)
        readout = 0 if self.config.readout == "first" else nq
        return np.concatenate(parts, axis=1), np.concatenate(masks, axis=1), readout

    def forward_tokens(self, T, mask, readout, full=False):
        """Forward over full sequences ``T`` (B, n, d). Returns logits and a cache.

        Only the readout position feeds the classifier, so by default attention
        and the FFN are evaluated for that query row alone; ``full=True``
        computes every position (for traces).
        """
        w, c = self.weights, self.config
        B, n, d = T.shape
        H, dh = c.heads, c.d_head
        scale = 1.0 / math.sqrt(dh)
        Tq = T if full else T[:, readout:readout + 1]
        nq = Tq.shape[1]
        q = (Tq @ w.w_q.reshape(H * dh, d).T).reshape(B, nq, H, dh).transpose(0, 2, 1, 3)
        k = (T @ w.w_k.reshape(H * dh, d).T).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
        v = (T @ w.w_v.reshape(H * dh, d).T).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
        s = (q @ k.transpose(0, 1, 3, 2)) * scale
        s = np.where(mask[:, None, None, :], s, -np.inf)
        s = s - s.max(axis=-1, keepdims=True)
        a = np.exp(s)
        a = a / a.sum(axis=-1, keepdims=True)
        z = a @ v                                                 # (B, H, nq, dh)
        w_o = w.w_o.transpose(1, 0, 2).reshape(d, H * dh)         # [W_O^1 ... W_O^H]
        attn = z.transpose(0, 2, 1, 3).reshape(B, nq, H * dh) @ w_o.T
        u = Tq + attn
        hpre = u @ w.w1
        hact = _act(c.activation, hpre)
        f = hact @ w.w2.T
        y = u + f
        rr = readout if full else 0
        logits = y[:, rr] @ w.head.T + w.head_bias
        cache = dict(T=T, mask=mask, readout=readout, row=rr, q=q, k=k, v=v, a=a, z=z,
                     attn=attn, u=u, hpre=hpre, hact=hact, f=f, y=y, scale=scale, w_o=w_o)
        return logits, cache

    def backward_tokens(self, cache, dlogits):
        """Gradient of ``sum(dlogits * logits)`` with respect to the sequence ``T``."""
        w, c = self.weights, self.config
        r, rr = cache["readout"], cache["row"]
        B, n, d = cache["T"].shape
        H, dh = c.heads, c.d_head
        dy_r = dlogits @ w.head                                   # (B, d)
        dh_r = (dy_r @ w.w2) * _act_grad(c.activation, cache["hpre"][:, rr])
        du_r = dy_r + dh_r @ w.w1.T                               # (B, d)
        dz_r = (du_r @ cache["w_o"]).reshape(B, H, 1, dh)
        a_r = cache["a"][:, :, rr:rr + 1]                         # (B, H, 1, n)
        q_r = cache["q"][:, :, rr:rr + 1]                         # (B, H, 1, dh)
        da_r = dz_r @ cache["v"].transpose(0, 1, 3, 2)            # (B, H, 1, n)
        dv = a_r.transpose(0, 1, 3, 2) @ dz_r                     # (B, H, n, dh)
        ds_r = a_r * (da_r - (da_r * a_r).sum(axis=-1, keepdims=True)) * cache["scale"]
        dq_r = ds_r @ cache["k"]                                  # (B, H, 1, dh)
        dk = ds_r.transpose(0, 1, 3, 2) @ q_r                     # (B, H, n, dh)
        dk = dk.transpose(0, 2, 1, 3).reshape(B, n, H * dh)
        dv = dv.transpose(0, 2, 1, 3).reshape(B, n, H * dh)
        dT = dk @ w.w_k.reshape(H * dh, d) + dv @ w.w_v.reshape(H * dh, d)
        dT[:, r] += du_r + dq_r.reshape(B, H * dh) @ w.w_q.reshape(H * dh, d)
        return dT

    def _prefix(self, prompt):
        P = np.asarray(prompt, dtype=np.float64)
        d = self.config.d
        if P.ndim != 2 or P.shape[0] != d:
            raise ShapeError(f"prompt must be (d={d}, N_q), got {P.shape}")
        rows = [P.T]
        if self.config.readout == "mask":
            rows.append(self.weights.mask_token[None, :])
        readout = 0 if self.config.readout == "first" else P.shape[1]
        return np.concatenate(rows, axis=0), readout

    def _forward_prefix(self, prefix, readout, batch):
        """Readout-row forward where every example shares the same prefix tokens."""
        w, c = self.weights, self.config
        if batch.x.shape[-1] != c.d:
            raise ShapeError(f"input embeddings must have dim {c.d}, got {batch.x.shape[-1]}")
        H, dh, d = c.heads, c.d_head, c.d
        B = len(batch)
        m = prefix.shape[0]
        scale = 1.0 / math.sqrt(dh)
        kx, vx = batch.input_kv(w)
        kp = (prefix @ w.w_k.reshape(H * dh, d).T).reshape(m, H, dh)
        vp = (prefix @ w.w_v.reshape(H * dh, d).T).reshape(m, H, dh)
        q = (w.w_q.reshape(H * dh, d) @ prefix[readout]).reshape(H, dh)
        s_p = np.einsum("hk,mhk->hm", q, kp) * scale                      # (H, m)
        s_x = (kx @ q[:, :, None])[..., 0] * scale                        # (B, H, n)
        s_x = np.where(batch.mask[:, None, :], s_x, -np.inf)
        s = np.concatenate([np.broadcast_to(s_p, (B, H, m)), s_x], axis=2)
        s = s - s.max(axis=-1, keepdims=True)
        a = np.exp(s)
        a = a / a.sum(axis=-1, keepdims=True)
        a_p, a_x = a[:, :, :m], a[:, :, m:]
        z = np.einsum("bhm,mhk->bhk", a_p, vp) + (a_x[:, :, None, :] @ vx)[:, :, 0]
        w_o = w.w_o.transpose(1, 0, 2).reshape(d, H * dh)
        u = prefix[readout] + z.reshape(B, H * dh) @ w_o.T
        hpre = u @ w.w1
        y = u + _act(c.activation, hpre) @ w.w2.T
        logits = y @ w.head.T + w.head_bias
        cache = dict(prefix=prefix, readout=readout, kp=kp, vp=vp, kx=kx, vx=vx, q=q,
                     a_p=a_p, a_x=a_x, hpre=hpre, w_o=w_o, scale=scale, m=m)
        return logits, cache

    def _backward_prefix(self, cache, dlogits):
        w, c = self.weights, self.config
        H, dh, d = c.heads, c.d_head, c.d
        B = dlogits.shape[0]
        dy = dlogits @ w.head
        du = dy + ((dy @ w.w2) * _act_grad(c.activation, cache["hpre"])) @ w.w1.T
        dz = (du @ cache["w_o"]).reshape(B, H, dh)
        a_p, a_x = cache["a_p"], cache["a_x"]
        da_p = np.einsum("bhk,mhk->bhm", dz, cache["vp"])
        da_x = (cache["vx"] @ dz[:, :, :, None])[..., 0]
        dot = (da_p * a_p).sum(-1, keepdims=True) + (da_x * a_x).sum(-1, keepdims=True)
        ds_p = a_p * (da_p - dot) * cache["scale"]
        ds_x = a_x * (da_x - dot) * cache["scale"]
        dq = np.einsum("bhm,mhk->hk", ds_p, cache["kp"]) + \
            (ds_x[:, :, None, :] @ cache["kx"])[:, :, 0].sum(axis=0)
        dkp = np.einsum("bhm,hk->mhk", ds_p, cache["q"])
        dvp = np.einsum("bhm,bhk->mhk", a_p, dz)
        m = cache["m"]
        dprefix = dkp.reshape(m, H * dh) @ w.w_k.reshape(H * dh, d) + \
            dvp.reshape(m, H * dh) @ w.w_v.reshape(H * dh, d)
        dprefix[cache["readout"]] += du.sum(axis=0) + dq.reshape(H * dh) @ w.w_q.reshape(H * dh, d)
        return dprefix

    def logits(self, prompt, batch):
        prefix, r = self._prefix(prompt)
        return self._forward_prefix(prefix, r, batch)[0]

    def predict(self, prompt, batch):
        return np.argmax(self.logits(prompt, batch), axis=1)

    def prompt_loss_and_grad(self, prompt, batch, dlogits_fn=None):
        """Mean cross-entropy (or a custom objective) and its gradient w.r.t. ``P``.

        ``dlogits_fn(logits, labels)`` may return ``(loss, dlogits)`` to replace
        cross-entropy; dlogits must already include the batch mean.
        """
        prefix, r = self._prefix(prompt)
        logits, cache = self._forward_prefix(prefix, r, batch)
        fn = dlogits_fn or cross_entropy
        loss, dlogits = fn(logits, batch.labels)
        dprefix = self._backward_prefix(cache, dlogits)
        return loss, dprefix[:np.asarray(prompt).shape[1]].T.copy()

    def loss_and_grads(self, prompt, batch, dlogits_fn=None):
        """Full-sequence path: loss plus gradients for ``P`` and the input embeddings."""
        T, mask, r = self._assemble(prompt, batch)
        logits, cache = self.forward_tokens(T, mask, r)
        fn = dlogits_fn or cross_entropy
        loss, dlogits = fn(logits, batch.labels)
        dT = self.backward_tokens(cache, dlogits)
        nq = np.asarray(prompt).shape[1]
        dP = dT[:, :nq].sum(axis=0).T
        offset = nq + (1 if self.config.readout == "mask" else 0)
        dx = dT[:, offset:] * batch.mask[..., None]
        return loss, dP, dx

    # -- checkpoints ---------------------------------------------------------

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tensors = []
        for name in BlockWeights.NAMES:
            arr = getattr(self.weights, name)
            fname = f"{name}.cdem"
            save_embeddings(directory / fname, arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr[None])
            tensors.append({"name": name, "shape": list(arr.shape), "file": fname})
        manifest = {"format": "cdprompt-toy-transformer", "version": 1,
                    "config": asdict(self.config), "tensors": tensors}
        (directory / "model.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        try:
            manifest = json.loads((directory / "model.json").read_text())
            cfg = ModelConfig.from_dict(manifest["config"])
            arrays = {}
            for t in manifest["tensors"]:
                arr = load_embeddings(directory / t["file"]).reshape(t["shape"])
                arrays[t["name"]] = arr
            weights = BlockWeights(**{n: arrays[n] for n in BlockWeights.NAMES})
        except (KeyError, ValueError, OSError) as exc:
            raise FormatError(f"bad model checkpoint in {directory}: {exc}") from exc
        return cls(cfg, weights)


def batch_from_sequences(seqs, labels, d):
    if not seqs:
        raise InvalidInput("empty batch")
    n = max(len(s) for s in seqs)
    x = np.zeros((len(seqs), n, d))
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        s = np.asarray(s, dtype=np.float64)
        if s.ndim != 2 or s.shape[1] != d or len(s) < 1:
            raise ShapeError(f"sequence {i} must be (n >= 1, {d}), got {s.shape}")
        x[i, :len(s)] = s
        mask[i, :len(s)] = True
    return Batch(x, mask, np.asarray(labels, dtype=int))


def cross_entropy(logits, labels):
    """Mean CE and its gradient (already divided by the batch size).

    Non-finite logits give a NaN loss so training loops can report divergence.
    """
    if not np.all(np.isfinite(logits)):
        return math.nan, np.zeros_like(logits)
    lp = log_softmax(logits)
    B = len(labels)
    loss = -lp[np.arange(B), labels].mean()
    d = softmax(logits)
    d[np.arange(B), labels] -= 1.0
    return float(loss), d / B


# ---------------------------------------------------------------------------
# Single-example API and structural checks
# ---------------------------------------------------------------------------

def forward(model, prompt, tokens):
    """Run one example. ``tokens`` is text, token embeddings (n, d) or a 1-row Batch."""
    if isinstance(tokens, str):
        x = model.embed_text(tokens)
    else:
        x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError("input must be a non-empty (n, d) token sequence")
    batch = batch_from_sequences([x], [0], model.config.d)
    T, mask, r = model._assemble(prompt, batch)
    logits, c = model.forward_tokens(T, mask, r, full=True)
    trace = AttentionTrace(tokens=c["T"][0], attention=c["a"][0],
                           z=c["z"][0].transpose(1, 0, 2), attn_out=c["attn"][0], u=c["u"][0], hidden_pre=c["hpre"][0],
                           hidden=c["hact"][0], ffn_out=c["f"][0], y=c["y"][0], readout=r)
    return logits[0], trace


def verify_span_membership(trace, weights):
    """Largest distance between the FFN output and sum_m phi(r_m^T u_i) p_m over positions."""
    worst = 0.0
    for i in range(trace.ffn_out.shape[0]):
        recon = np.zeros(weights.w2.shape[0])
        for m in range(weights.w2.shape[1]):
            recon = recon + trace.hidden[i, m] * weights.w2[:, m]
        worst = max(worst, float(np.linalg.norm(recon - trace.ffn_out[i])))
    return worst


def attention_residual_split(trace, weights):
    """For identity activation: split the FFN output at every position into
    the attention-routed term and the residual term.

    attention term_i = sum_h sum_j A^h_ij sum_m (r_m^T W_O^h W_V^h t_j) p_m
    residual term_i  = sum_m (r_m^T t_i) p_m

    The residual term uses only position i (a standard residual connection);
    summing it over heads and all positions would count the skip path H*n times.
    """
    H = weights.w_v.shape[0]
    n = trace.tokens.shape[0]
    M = weights.w1.shape[1]
    attn_term = np.zeros((n, weights.w2.shape[0]))
    resid_term = np.zeros_like(attn_term)
    for i in range(n):
        for h in range(H):
            ov = weights.w_o[h] @ weights.w_v[h]
            for j in range(n):
                coeff = weights.w1.T @ (ov @ trace.tokens[j])
                attn_term[i] += trace.attention[h, i, j] * (weights.w2 @ coeff)
        for m in range(M):
            resid_term[i] += float(weights.w1[:, m] @ trace.tokens[i]) * weights.w2[:, m]
    return attn_term, resid_term


def gradient_check(model, prompt, tokens, label=0, h=1e-5):
    """Max |analytic - central difference| over all prompt and input-embedding
    entries, relative to the largest gradient magnitude."""
    x = model.embed_text(tokens) if isinstance(tokens, str) else np.asarray(tokens, float)
    P = np.asarray(prompt, dtype=np.float64)
    batch = batch_from_sequences([x], [label], model.config.d)
    _, dP, dx = model.loss_and_grads(P, batch)
    dx = dx[0]

    def loss_at(P_, x_):
        b = batch_from_sequences([x_], [label], model.config.d)
        T, mask, r = model._assemble(P_, b)
        return cross_entropy(model.forward_tokens(T, mask, r, full=True)[0], b.labels)[0]

    num_P = np.zeros_like(P)
    for idx in np.ndindex(P.shape):
        Pp, Pm = P.copy(), P.copy()
        Pp[idx] += h
        Pm[idx] -= h
        num_P[idx] = (loss_at(Pp, x) - loss_at(Pm, x)) / (2 * h)
    num_x = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num_x[idx] = (loss_at(P, xp) - loss_at(P, xm)) / (2 * h)
    analytic = np.concatenate([dP.ravel(), dx.ravel()])
    numeric = np.concatenate([num_P.ravel(), num_x.ravel()])
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-300)
    return float(np.abs(analytic - numeric).max() / scale)


# ---------------------------------------------------------------------------
# Prompt tuning
# ---------------------------------------------------------------------------

def init_prompt(d, n_prompt, seed=0, std=0.02):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((d, n_prompt)) * std


def p_tune(model, train, n_prompt, cfg: TrainConfig | None = None, val=None, init=None):
    """Train a continuous prompt with frozen weights by AdamW on cross-entropy.

    ``train``/``val`` are :class:`Batch` objects (val defaults to train).
    Returns ``(P, history)`` with the best-validation prompt.
    """
    cfg = cfg or TrainConfig()
    val = train if val is None else val
    if init is None:
        init = init_prompt(model.config.d, n_prompt, cfg.seed)
    init = np.asarray(init, dtype=np.float64)
    if init.shape != (model.config.d, n_prompt):
        raise ShapeError(f"initial prompt must be ({model.config.d}, {n_prompt})")

    train.input_kv(model.weights)
    val.input_kv(model.weights)

    def loss_grad(params, idx):
        loss, dP = model.prompt_loss_and_grad(params["P"], train.take(idx))
        return loss, {"P": dP}

    def val_loss(params):
        return cross_entropy(model.logits(params["P"], val), val.labels)[0]

    best, hist = train_loop({"P": init}, ["P"], len(train), loss_grad, val_loss, cfg)
    return best["P"], hist


def accuracy_of(model, prompt, batch):
    return float(np.mean(model.predict(prompt, batch) == batch.labels))
