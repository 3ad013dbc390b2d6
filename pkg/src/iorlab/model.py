"""Mean bag-of-embeddings classifier with a tanh hidden layer and hand-written backprop.

Shapes: E [V, d], W1 [d, h], b1 [h], W2 [h, C], b2 [C].  Everything is float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    EmptyDataset,
    EmptyInput,
    IdOutOfRange,
    InvalidDims,
    LabelOutOfRange,
    NonPositiveTemperature,
)
from .textcore import Dataset, Vocab, encode, tokenize

PARAM_NAMES = ("E", "W1", "b1", "W2", "b2")


@dataclass
class ModelParams:
    E: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        V, d = self.E.shape
        h = self.b1.shape[0]
        C = self.b2.shape[0]
        if self.W1.shape != (d, h) or self.W2.shape != (h, C):
            raise InvalidDims(f"inconsistent shapes for V={V}, d={d}, h={h}, C={C}")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.E.shape[0], self.E.shape[1], self.b1.shape[0], self.b2.shape[0]

    @property
    def num_classes(self) -> int:
        return self.b2.shape[0]

    def arrays(self):
        return [getattr(self, n) for n in PARAM_NAMES]

    def copy(self) -> "ModelParams":
        return ModelParams(*(a.copy() for a in self.arrays()), seed=self.seed)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "ModelParams":
        out, start = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[start:start + a.size], dtype=np.float64).reshape(a.shape))
            start += a.size
        return ModelParams(*out, seed=self.seed)

    def scaled(self, temperature: float) -> "ModelParams":
        """Same classifier with every logit divided by ``temperature``."""
        check_temperature(temperature)
        return ModelParams(
            self.E.copy(), self.W1.copy(), self.b1.copy(),
            self.W2 / temperature, self.b2 / temperature, seed=self.seed,
        )


def init_params(V: int, d: int = 16, h: int = 32, C: int = 2, seed: int = 0) -> ModelParams:
    if min(V, d, h, C) < 1:
        raise InvalidDims(f"all dimensions must be >= 1, got V={V} d={d} h={h} C={C}")
    rng = np.random.default_rng(seed)
    return ModelParams(
        E=rng.uniform(-0.1, 0.1, size=(V, d)),
        W1=rng.uniform(-0.1, 0.1, size=(d, h)),
        b1=np.zeros(h),
        W2=rng.uniform(-0.1, 0.1, size=(h, C)),
        b2=np.zeros(C),
        seed=seed,
    )


@dataclass
class ForwardTrace:
    params: ModelParams = field(repr=False)
    ids: np.ndarray
    token_emb: np.ndarray
    pooled: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray
    logits: np.ndarray


def _check_ids(params, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise EmptyInput("input must be a non-empty id sequence")
    V = params.E.shape[0]
    if ids.min() < 0 or ids.max() >= V:
        raise IdOutOfRange(f"token ids must lie in [0, {V})")
    return ids


def forward(params: ModelParams, ids, delta: np.ndarray | None = None) -> ForwardTrace:
    """``delta`` optionally perturbs each token embedding (shape [n, d])."""
    ids = _check_ids(params, ids)
    token_emb = params.E[ids]
    if delta is not None:
        token_emb = token_emb + delta
    pooled = token_emb.mean(axis=0)
    pre = pooled @ params.W1 + params.b1
    hidden = np.tanh(pre)
    logits = hidden @ params.W2 + params.b2
    return ForwardTrace(params, ids, token_emb, pooled, pre, hidden, logits)


def batch_logits(params: ModelParams, seqs: Sequence[Sequence[int]]) -> np.ndarray:
    """Logits for many sequences at once, shape [B, C]."""
    if len(seqs) == 0:
        return np.zeros((0, params.num_classes))
    lengths = np.fromiter((len(s) for s in seqs), dtype=np.int64, count=len(seqs))
    if lengths.min() == 0:
        raise EmptyInput("every sequence must be non-empty")
    flat = np.fromiter((t for s in seqs for t in s), dtype=np.int64, count=int(lengths.sum()))
    if flat.min() < 0 or flat.max() >= params.E.shape[0]:
        raise IdOutOfRange("token id out of range")
    starts = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    pooled = np.add.reduceat(params.E[flat], starts, axis=0) / lengths[:, None]
    hidden = np.tanh(pooled @ params.W1 + params.b1)
    return hidden @ params.W2 + params.b2


def check_temperature(T):
    if not (T > 0) or not np.isfinite(T):
        raise NonPositiveTemperature(f"temperature must be positive and finite, got {T}")


def softmax_t(logits, T: float = 1.0) -> np.ndarray:
    """Temperature softmax over the last axis, max-subtracted."""
    check_temperature(T)
    z = np.asarray(logits, dtype=np.float64)
    z = (z - z.max(axis=-1, keepdims=True)) / T
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_t(logits, T: float = 1.0) -> np.ndarray:
    check_temperature(T)
    z = np.asarray(logits, dtype=np.float64)
    z = (z - z.max(axis=-1, keepdims=True)) / T
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class PredictionOutput:
    pred: int
    probs: np.ndarray
    confidence: float


def predict_logits(logits, T: float = 1.0) -> PredictionOutput:
    logits = np.asarray(logits, dtype=np.float64)
    pred = int(np.argmax(logits))  # first maximum wins ties
    probs = softmax_t(logits, T)
    return PredictionOutput(pred, probs, float(probs[pred]))


def predict(params: ModelParams, ids, T: float = 1.0) -> PredictionOutput:
    return predict_logits(forward(params, ids).logits, T)


def cross_entropy_t(logits, label: int, T: float = 1.0) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise LabelOutOfRange(f"label {label} outside [0, {logits.shape[-1]})")
    return float(-log_softmax_t(logits, T)[label])


@dataclass
class Gradients:
    E: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    tokens: np.ndarray | None = None  # per-token input-embedding gradients

    def arrays(self):
        return [getattr(self, n) for n in PARAM_NAMES]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.arrays())))

    def scale(self, s: float) -> "Gradients":
        if self.tokens is None:
            tokens = None
        elif isinstance(self.tokens, list):
            tokens = [t * s for t in self.tokens]
        else:
            tokens = self.tokens * s
        return Gradients(*(a * s for a in self.arrays()), tokens=tokens)

    @classmethod
    def from_flat(cls, vec, like: ModelParams) -> "Gradients":
        p = like.with_flat(vec)
        return cls(*p.arrays())


def backward(trace: ForwardTrace, label: int, T: float = 1.0) -> Gradients:
    """Gradients of ``cross_entropy_t(trace.logits, label, T)``."""
    params = trace.params
    C = params.num_classes
    if not 0 <= label < C:
        raise LabelOutOfRange(f"label {label} outside [0, {C})")
    dlogits = softmax_t(trace.logits, T)
    dlogits[label] -= 1.0
    dlogits /= T
    dW2 = np.outer(trace.hidden, dlogits)
    db2 = dlogits
    dpre = (params.W2 @ dlogits) * (1.0 - trace.hidden ** 2)
    dW1 = np.outer(trace.pooled, dpre)
    db1 = dpre
    dpooled = params.W1 @ dpre
    n = trace.ids.size
    dtokens = np.tile(dpooled / n, (n, 1))
    dE = np.zeros_like(params.E)
    np.add.at(dE, trace.ids, dtokens)
    return Gradients(dE, dW1, db1, dW2, db2, tokens=dtokens)


def batch_loss_and_grads(
    params: ModelParams,
    seqs: Sequence[np.ndarray],
    labels: Sequence[int],
    T: float = 1.0,
    deltas: Sequence[np.ndarray] | None = None,
) -> tuple[float, Gradients]:
    """Mean loss and mean gradients over a batch.

    ``Gradients.tokens`` is a list of per-example token gradients of the
    *per-example* loss (not divided by the batch size).
    """
    check_temperature(T)
    B = len(seqs)
    if B == 0:
        raise EmptyInput("empty batch")
    labels = np.asarray(labels, dtype=np.int64)
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    flat = np.concatenate([np.asarray(s, dtype=np.int64) for s in seqs])
    starts = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    tok = params.E[flat]
    if deltas is not None:
        tok = tok + np.concatenate(deltas, axis=0)
    pooled = np.add.reduceat(tok, starts, axis=0) / lengths[:, None]
    hidden = np.tanh(pooled @ params.W1 + params.b1)
    logits = hidden @ params.W2 + params.b2
    logp = log_softmax_t(logits, T)
    loss = float(-logp[np.arange(B), labels].mean())

    dlogits = np.exp(logp)
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= T  # per-example gradients
    dpre = (dlogits @ params.W2.T) * (1.0 - hidden ** 2)
    dpooled = dpre @ params.W1.T
    per_token = np.repeat(dpooled / lengths[:, None], lengths, axis=0)
    dE = np.zeros_like(params.E)
    np.add.at(dE, flat, per_token)
    grads = Gradients(
        dE / B,
        pooled.T @ dpre / B,
        dpre.sum(axis=0) / B,
        hidden.T @ dlogits / B,
        dlogits.sum(axis=0) / B,
    )
    grads.tokens = np.split(per_token, np.cumsum(lengths)[:-1])
    return loss, grads


@dataclass(frozen=True)
class GradTransform:
    mode: str = "none"
    threshold: float = 1.0

    def __post_init__(self):
        if self.mode not in ("none", "clip", "normalize"):
            raise ValueError(f"unknown gradient transform {self.mode!r}")
        if self.mode == "clip" and not self.threshold > 0:
            raise ValueError("clip threshold must be positive")


def apply_grad_transform(grads: Gradients, transform: GradTransform) -> Gradients:
    if transform.mode == "none":
        return grads
    g = grads.global_norm()
    if transform.mode == "normalize":
        return grads if g < 1e-12 else grads.scale(1.0 / g)
    if g > transform.threshold:
        return grads.scale(transform.threshold / g)
    return grads


@dataclass(frozen=True)
class TextClassifier:
    """Parameters plus the vocabulary that maps text onto them."""

    params: ModelParams
    vocab: Vocab

    @property
    def num_classes(self) -> int:
        return self.params.num_classes

    def encode(self, text_or_tokens) -> list[int]:
        tokens = tokenize(text_or_tokens) if isinstance(text_or_tokens, str) else text_or_tokens
        return encode(tokens, self.vocab)

    def logits(self, seqs) -> np.ndarray:
        return batch_logits(self.params, seqs)

    def predict_ids(self, ids, T: float = 1.0) -> PredictionOutput:
        return predict(self.params, ids, T)

    def scaled(self, temperature: float) -> "TextClassifier":
        return TextClassifier(self.params.scaled(temperature), self.vocab)

    def dataset_logits(self, dataset: Dataset) -> np.ndarray:
        return self.logits([self.encode(ex.text) for ex in dataset])


def logit_range_stats(model: TextClassifier, dataset: Dataset, bin_width: float = 1.0) -> dict:
    """Per-example max-min logit spread: mean, std and a histogram."""
    if len(dataset) == 0:
        raise EmptyDataset("logit range needs at least one example")
    logits = model.dataset_logits(dataset)
    ranges = logits.max(axis=1) - logits.min(axis=1)
    top = max(float(ranges.max()), bin_width)
    edges = np.arange(0.0, top + bin_width, bin_width)
    if edges.size < 2:
        edges = np.array([0.0, bin_width])
    counts, edges = np.histogram(ranges, bins=edges)
    return {
        "mean": float(ranges.mean()),
        "std": float(ranges.std()),
        "ranges": ranges,
        "hist_counts": counts,
        "hist_edges": edges,
    }


# --- checkpoints ---------------------------------------------------------------

def params_to_dict(params: ModelParams, vocab: Vocab | None = None) -> dict:
    V, d, h, C = params.dims
    out = {
        "dims": {"V": V, "d": d, "h": h, "C": C},
        "seed": params.seed,
        "tensors": {n: [float(x) for x in getattr(params, n).ravel()] for n in PARAM_NAMES},
    }
    if vocab is not None:
        out["vocab"] = list(vocab.itos)
    return out


def params_from_dict(obj: dict) -> tuple[ModelParams, Vocab | None]:
    dims = obj["dims"]
    V, d, h, C = dims["V"], dims["d"], dims["h"], dims["C"]
    shapes = {"E": (V, d), "W1": (d, h), "b1": (h,), "W2": (h, C), "b2": (C,)}
    arrays = {
        n: np.asarray(obj["tensors"][n], dtype=np.float64).reshape(shapes[n]) for n in PARAM_NAMES
    }
    vocab = Vocab.from_tokens(obj["vocab"][2:]) if "vocab" in obj else None
    return ModelParams(**arrays, seed=obj.get("seed")), vocab


def save_checkpoint(path, params: ModelParams, vocab: Vocab | None = None) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params, vocab)), encoding="utf-8")


def load_checkpoint(path) -> tuple[ModelParams, Vocab | None]:
    return params_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
