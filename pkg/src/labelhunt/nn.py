"""Small numeric helpers shared by the hand-differentiated models."""

from __future__ import annotations

import hashlib
from typing import Dict, Iterable, Tuple

import numpy as np

Params = Dict[str, np.ndarray]


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def bce_with_logits(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Elementwise binary cross-entropy of sigmoid(logits) against y."""
    return softplus(logits) - y * logits


def he_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / max(fan_in, 1)), size=(fan_out, fan_in))


def glorot_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / max(fan_in + fan_out, 1))
    return rng.uniform(-lim, lim, size=(fan_out, fan_in))


class Momentum:
    """Plain SGD with (heavy-ball) momentum and optional L2 weight decay."""

    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 clip: float = 5.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip = clip
        self.velocity: Params = {}

    def step(self, params: Params, grads: Params) -> None:
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        scale = self.clip / norm if self.clip and norm > self.clip else 1.0
        for k, g in grads.items():
            g = g * scale
            if self.weight_decay and k.split(".")[-1].startswith("W"):
                g = g + self.weight_decay * params[k]
            v = self.velocity.get(k)
            v = g if v is None else self.momentum * v + g
            self.velocity[k] = v
            params[k] -= self.lr * v


def params_to_json(params: Params) -> dict:
    return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in params.items()}


def params_from_json(data: dict) -> Params:
    return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in data.items()}


def params_hash(params: Params) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype=np.float64).tobytes())
    return h.hexdigest()


def flatten(params: Params, keys: Iterable[str]) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in keys])


def unflatten(vector: np.ndarray, like: Params, keys: Iterable[str]) -> Params:
    out = {}
    pos = 0
    for k in keys:
        n = like[k].size
        out[k] = vector[pos:pos + n].reshape(like[k].shape).copy()
        pos += n
    return out


def f1_score(pred: np.ndarray, truth: np.ndarray) -> float:
    """F1 of boolean predictions; 1.0 when both are empty."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def precision_recall(pred: np.ndarray, truth: np.ndarray) -> Tuple[float, float]:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    tp = int((pred & truth).sum())
    p = tp / int(pred.sum()) if pred.any() else 1.0
    r = tp / int(truth.sum()) if truth.any() else 1.0
    return p, r
