"""Training engines: standard (optionally hot), PGD-K embedding AT, DDi-AT, augmentation AT.

All engines use plain minibatch SGD with seeded shuffling, so every run is
bit-reproducible from its config.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .attacks import AttackConfig, AttackFn
from .errors import DegenerateGradient, EmptyDataset, EmptyInput, ValidationError
from .model import (
    GradTransform,
    Gradients,
    ModelParams,
    TextClassifier,
    apply_grad_transform,
    batch_loss_and_grads,
    check_temperature,
    forward,
    backward,
    init_params,
    softmax_t,
)
from .textcore import Dataset, Example, Vocab, build_vocab


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    batch_size: int = 8
    epochs: int = 20
    seed: int = 0
    temperature: float = 1.0
    grad_transform: GradTransform = field(default_factory=GradTransform)
    embed_dim: int = 16
    hidden_dim: int = 32
    min_freq: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValidationError("learning rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        check_temperature(self.temperature)


@dataclass(frozen=True)
class PgdConfig:
    steps: int = 5
    adv_lr: float = 0.03
    init_mag: float = 0.05
    max_norm: float = 1.0

    def __post_init__(self):
        if self.steps < 1 or not self.max_norm > 0:
            raise ValidationError("PGD needs steps >= 1 and max_norm > 0")


@dataclass(frozen=True)
class DDiConfig:
    M: int = 3
    K: int = 3
    tol: float = 1e-10
    # "exact" enumerates simplex faces; "pgd" runs simplex_min_norm
    solver: str = "exact"
    # how the combined gradient G @ alpha is turned into an update
    update: str = "normalize"

    def __post_init__(self):
        if self.M < 1 or self.K < 1:
            raise ValidationError("DDi needs M >= 1 and K >= 1")
        if self.solver not in ("exact", "pgd"):
            raise ValidationError(f"unknown simplex solver {self.solver!r}")
        if self.update not in ("normalize", "clip", "none"):
            raise ValidationError(f"unknown DDi update {self.update!r}")


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_acc", "mean_confidence"])
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: row[k] for k in writer.fieldnames})


def _encode_all(vocab: Vocab, data: Dataset) -> list[np.ndarray]:
    from .textcore import encode, tokenize

    seqs = []
    for ex in data:
        ids = encode(tokenize(ex.text), vocab)
        if not ids:
            raise EmptyInput(f"example {ex.id} has no tokens")
        seqs.append(np.asarray(ids, dtype=np.int64))
    return seqs


def _val_metrics(model: TextClassifier, val: Dataset | None, T: float) -> tuple[float, float]:
    if val is None or len(val) == 0:
        return float("nan"), float("nan")
    logits = model.dataset_logits(val)
    pred = logits.argmax(axis=1)
    conf = softmax_t(logits, 1.0).max(axis=1)
    return float((pred == val.labels).mean()), float(conf.mean())


StepFn = Callable[[ModelParams, list, np.ndarray, np.random.Generator], tuple[float, ModelParams]]


def _fit(
    config: TrainConfig,
    train: Dataset,
    val: Dataset | None,
    step: StepFn,
    vocab: Vocab | None = None,
    init: TextClassifier | None = None,
) -> tuple[TextClassifier, TrainHistory]:
    if len(train) == 0:
        raise EmptyDataset("training set is empty")
    if val is not None and len(val) == 0:
        raise EmptyDataset("validation set is empty")
    if init is not None:
        # fine-tune: start from the given model and keep its vocabulary
        vocab, params = init.vocab, init.params.copy()
    else:
        vocab = vocab or build_vocab(train, config.min_freq)
        params = init_params(len(vocab), config.embed_dim, config.hidden_dim, train.num_classes, config.seed)
    seqs = _encode_all(vocab, train)
    labels = train.labels
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(seqs))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, params = step(params, [seqs[i] for i in idx], labels[idx], rng)
            losses.append(loss)
        model = TextClassifier(params, vocab)
        val_acc, conf = _val_metrics(model, val, config.temperature)
        history.append(epoch=epoch, train_loss=float(np.mean(losses)), val_acc=val_acc, mean_confidence=conf)
    return TextClassifier(params, vocab), history


def _sgd(params: ModelParams, grads: Gradients, lr: float) -> ModelParams:
    return ModelParams(
        *(p - lr * g for p, g in zip(params.arrays(), grads.arrays())), seed=params.seed
    )


def train_standard(
    config: TrainConfig, train: Dataset, val: Dataset | None = None, vocab: Vocab | None = None,
    init: TextClassifier | None = None,
) -> tuple[TextClassifier, TrainHistory]:
    """Minibatch SGD on the temperature-scaled cross entropy."""

    def step(params, seqs, labels, rng):
        loss, grads = batch_loss_and_grads(params, seqs, labels, config.temperature)
        grads = apply_grad_transform(grads, config.grad_transform)
        return loss, _sgd(params, grads, config.lr)

    return _fit(config, train, val, step, vocab, init)


# --- PGD in embedding space ---------------------------------------------------------

def _pgd_init(rng: np.random.Generator, lengths, d: int, init_mag: float) -> list[np.ndarray]:
    out = []
    for n in lengths:
        delta = rng.uniform(-1.0, 1.0, size=(n, d))
        out.append(delta * (init_mag / np.sqrt(n * d)))
    return out


def _project(delta: np.ndarray, max_norm: float) -> np.ndarray:
    norm = np.linalg.norm(delta)
    if norm > max_norm:
        return delta * (max_norm / norm)
    return delta


def _pgd_batch(
    params: ModelParams,
    seqs: list,
    labels: np.ndarray,
    pgd: PgdConfig,
    steps: int,
    T: float,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    d = params.E.shape[1]
    deltas = [_project(x, pgd.max_norm) for x in _pgd_init(rng, [len(s) for s in seqs], d, pgd.init_mag)]
    for _ in range(steps):
        _, grads = batch_loss_and_grads(params, seqs, labels, T, deltas)
        new = []
        for delta, g in zip(deltas, grads.tokens):
            gnorm = np.linalg.norm(g)
            if gnorm > 0:
                delta = delta + pgd.adv_lr * g / gnorm
            new.append(_project(delta, pgd.max_norm))
        deltas = new
    return deltas


def pgd_attack_embedding(
    params: ModelParams,
    ids,
    label: int,
    pgd: PgdConfig,
    T: float = 1.0,
    rng: np.random.Generator | int | None = 0,
) -> np.ndarray:
    """L2 PGD ascent on the loss w.r.t. the token embeddings; returns delta [n, d]."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise EmptyInput("cannot perturb an empty sequence")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return _pgd_batch(params, [ids], np.array([label]), pgd, pgd.steps, T, rng)[0]


def train_pgd_at(
    config: TrainConfig, pgd: PgdConfig, train: Dataset, val: Dataset | None = None,
    vocab: Vocab | None = None, init: TextClassifier | None = None,
) -> tuple[TextClassifier, TrainHistory]:
    """Train on PGD-perturbed embeddings (robust loss)."""

    def step(params, seqs, labels, rng):
        deltas = _pgd_batch(params, seqs, labels, pgd, pgd.steps, config.temperature, rng)
        loss, grads = batch_loss_and_grads(params, seqs, labels, config.temperature, deltas)
        grads = apply_grad_transform(grads, config.grad_transform)
        return loss, _sgd(params, grads, config.lr)

    return _fit(config, train, val, step, vocab, init)


# --- DDi: min-norm point in the convex hull of gradients ------------------------------

def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def _project_simplex_small(v: list[float]) -> list[float]:
    # pure-Python twin of project_simplex; far cheaper per call for M <= ~10
    css, theta = 0.0, 0.0
    for k, x in enumerate(sorted(v, reverse=True), start=1):
        css += x
        t = (css - 1.0) / k
        if x - t > 0:
            theta = t
    return [max(x - theta, 0.0) for x in v]


def simplex_min_norm(G: np.ndarray, tol: float = 1e-10, max_steps: int = 10_000) -> np.ndarray:
    """argmin over the simplex of ||G alpha||^2 by projected gradient descent.

    Starts from uniform weights with step 1/L (L = 2 * largest eigenvalue of
    G^T G) and stops once ||alpha_new - alpha|| < tol.  The minimiser is not
    unique when columns are collinear; the iterate reached is returned.
    """
    G = np.asarray(G, dtype=np.float64)
    if G.ndim == 1:
        G = G[:, None]
    M = G.shape[1]
    if M == 1:
        return np.ones(1)
    Q = G.T @ G
    L = 2.0 * float(np.linalg.eigvalsh(Q)[-1])
    alpha = [1.0 / M] * M
    if L <= 0:
        return np.array(alpha)
    Ql = (2.0 * Q / L).tolist()
    for _ in range(max_steps):
        step = [alpha[i] - sum(q * a for q, a in zip(Ql[i], alpha)) for i in range(M)]
        nxt = _project_simplex_small(step)
        moved = sum((x - y) ** 2 for x, y in zip(nxt, alpha)) ** 0.5
        alpha = nxt
        if moved < tol:
            break
    return np.array(alpha)


def simplex_min_norm_exact(G: np.ndarray) -> np.ndarray:
    """Same problem solved by enumerating simplex faces (practical for M <= ~8).

    On each face the affine-constrained minimiser comes from the KKT system;
    the best feasible one is the global minimiser.
    """
    G = np.asarray(G, dtype=np.float64)
    if G.ndim == 1:
        G = G[:, None]
    M = G.shape[1]
    Q = G.T @ G
    best, best_val = None, np.inf
    for size in range(1, M + 1):
        for face in itertools.combinations(range(M), size):
            idx = list(face)
            kkt = np.zeros((size + 1, size + 1))
            kkt[:size, :size] = 2.0 * Q[np.ix_(idx, idx)]
            kkt[:size, size] = 1.0
            kkt[size, :size] = 1.0
            rhs = np.zeros(size + 1)
            rhs[size] = 1.0
            sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:size]
            if sol.min() < -1e-12 or abs(sol.sum() - 1.0) > 1e-9:
                continue
            alpha = np.zeros(M)
            alpha[idx] = np.maximum(sol, 0.0)
            alpha /= alpha.sum()
            val = float(alpha @ Q @ alpha)
            if val < best_val - 1e-15:
                best, best_val = alpha, val
    return best


def ddi_direction(G: np.ndarray, alpha: np.ndarray | None = None) -> np.ndarray:
    """Unit descent direction -G alpha / ||G alpha||.

    Falls back to the normalised negative first column (with a
    ``DegenerateGradient`` warning) when the combination vanishes.
    """
    G = np.asarray(G, dtype=np.float64)
    if G.ndim == 1:
        G = G[:, None]
    if alpha is None:
        alpha = simplex_min_norm(G)
    v = G @ alpha
    norm = np.linalg.norm(v)
    if norm > 1e-12:
        return -v / norm
    warnings.warn("min-norm gradient combination vanished; using first column", DegenerateGradient)
    g0 = G[:, 0]
    n0 = np.linalg.norm(g0)
    return -g0 / n0 if n0 > 0 else np.zeros_like(g0)


def train_ddi_at(
    config: TrainConfig, ddi: DDiConfig, pgd: PgdConfig, train: Dataset,
    val: Dataset | None = None, vocab: Vocab | None = None, init: TextClassifier | None = None,
) -> tuple[TextClassifier, TrainHistory]:
    """PGD-AT whose update is the DDi direction over M differently-initialised attacks."""

    def step(params, seqs, labels, rng):
        columns, losses = [], []
        for _ in range(ddi.M):
            deltas = _pgd_batch(params, seqs, labels, pgd, ddi.K, config.temperature, rng)
            loss, grads = batch_loss_and_grads(params, seqs, labels, config.temperature, deltas)
            columns.append(grads.flat())
            losses.append(loss)
        G = np.stack(columns, axis=1)
        if ddi.solver == "pgd":
            alpha = simplex_min_norm(G, ddi.tol)
        else:
            alpha = simplex_min_norm_exact(G)
        combined = G @ alpha
        if ddi.update == "normalize":
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DegenerateGradient)
                direction = ddi_direction(G, alpha)
            new = params.with_flat(params.flat() + config.lr * direction)
        else:
            grads = Gradients.from_flat(combined, params)
            if ddi.update == "clip":
                grads = apply_grad_transform(grads, GradTransform("clip", config.grad_transform.threshold))
            new = _sgd(params, grads, config.lr)
        return float(np.max(losses)), new

    return _fit(config, train, val, step, vocab, init)


# --- augmentation AT ---------------------------------------------------------------

def augment_dataset(
    model: TextClassifier, data: Dataset, attack: AttackFn, config: AttackConfig
) -> Dataset:
    """Original examples followed by one attacked copy of each (labels kept)."""
    if len(data) == 0:
        raise EmptyDataset("nothing to augment")
    extra = []
    for k, ex in enumerate(data):
        res = attack(model, ex, config)
        text = " ".join(res.adv_tokens) if res.success else ex.text
        extra.append(Example(text, ex.label, len(data) + k))
    return Dataset(tuple(data.examples) + tuple(extra), data.num_classes, data.split_tag)


def single_step_reference(params: ModelParams, ids, label: int, lr: float, T: float = 1.0) -> ModelParams:
    """One plain SGD step on a single example via the per-example backward pass."""
    g = backward(forward(params, ids), label, T)
    return _sgd(params, g, lr)
