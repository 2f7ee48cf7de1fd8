"""AdamW and an early-stopping minibatch loop over named numpy parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingError


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_steps: int = 2000
    patience: int = 100
    eval_every: int = 1
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in (d or {}).items() if k in known})


class AdamW:
    """Adam with decoupled weight decay (Loshchilov & Hutter)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k in sorted(grads):
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + self.eps)
            params[k] = params[k] - self.lr * (update + self.weight_decay * params[k])


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_step: int = 0
    best_val: float = math.inf
    stopped_early: bool = False

    def to_json(self):
        return {"train_loss": [float(x) for x in self.train_loss],
                "val_loss": [float(x) for x in self.val_loss],
                "best_step": self.best_step, "best_val": float(self.best_val),
                "stopped_early": self.stopped_early}


def train_loop(params, trainable, n_examples, loss_grad, val_loss, cfg):
    """Minimise with AdamW over shuffled minibatches, keeping the best-validation params.

    ``loss_grad(params, idx)`` returns ``(loss, {name: grad})`` for the minibatch
    ``idx``; ``val_loss(params)`` scores the full validation set. Step 0 (the
    initial params) is a candidate, so the returned params never validate worse
    than the starting point.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    opt = AdamW({k: params[k] for k in trainable}, cfg.lr, cfg.beta1, cfg.beta2,
                cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    hist = TrainHistory()
    best = {k: v.copy() for k, v in params.items()}
    hist.best_val = float(val_loss(params))
    hist.val_loss.append(hist.best_val)
    if not math.isfinite(hist.best_val):
        raise TrainingError("initial validation loss is not finite")
    bs = max(1, min(cfg.batch_size, n_examples))
    order = np.array([], dtype=int)
    since_best = 0
    for step in range(1, cfg.max_steps + 1):
        if len(order) < bs:
            order = np.concatenate([order, rng.permutation(n_examples)])
        idx, order = order[:bs], order[bs:]
        loss, grads = loss_grad(params, idx)
        if not math.isfinite(loss):
            raise TrainingError(f"loss diverged at step {step}")
        hist.train_loss.append(float(loss))
        opt.step(params, {k: grads[k] for k in trainable})
        if step % cfg.eval_every:
            continue
        v = float(val_loss(params))
        if not math.isfinite(v):
            raise TrainingError(f"validation loss diverged at step {step}")
        hist.val_loss.append(v)
        if v < hist.best_val:
            hist.best_val, hist.best_step = v, step
            best = {k: p.copy() for k, p in params.items()}
            since_best = 0
        else:
            since_best += cfg.eval_every
            if since_best >= cfg.patience:
                hist.stopped_early = True
                break
    return best, hist
