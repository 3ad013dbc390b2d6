"""Post-hoc calibration: NLL temperature fitting, vector Platt scaling, ECE/MCE."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyDataset, EmptyInput, EmptyLogitSet, LabelOutOfRange, ValidationError
from .model import TextClassifier, check_temperature, log_softmax_t, softmax_t
from .textcore import Dataset

T_MIN, T_MAX = 1e-6, 1e9


@dataclass(frozen=True)
class LogitSet:
    logits: np.ndarray
    labels: np.ndarray
    ids: tuple[int, ...] = ()
    tag: str = ""

    def __post_init__(self):
        logits = np.atleast_2d(np.asarray(self.logits, dtype=np.float64))
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if logits.size == 0 or labels.size == 0:
            logits = logits.reshape(0, logits.shape[-1] if logits.ndim == 2 else 0)
        if logits.shape[0] != labels.size:
            raise ValidationError(f"{logits.shape[0]} logit rows but {labels.size} labels")
        if not np.all(np.isfinite(logits)):
            raise ValidationError("logits must be finite")
        if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
            raise LabelOutOfRange("label outside [0, C)")
        ids = tuple(int(i) for i in self.ids) if len(self.ids) else tuple(range(labels.size))
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return int(self.labels.size)

    @property
    def num_classes(self) -> int:
        return int(self.logits.shape[1])

    @classmethod
    def from_model(cls, model: TextClassifier, dataset: Dataset, tag: str = "") -> "LogitSet":
        if len(dataset) == 0:
            raise EmptyDataset("cannot collect logits from an empty dataset")
        return cls(model.dataset_logits(dataset), dataset.labels, [ex.id for ex in dataset], tag)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, row, y in zip(self.ids, self.logits, self.labels):
                fh.write(json.dumps({"id": i, "logits": row.tolist(), "label": int(y)}) + "\n")

    @classmethod
    def load(cls, path, tag: str | None = None) -> "LogitSet":
        rows = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
        if not rows:
            raise EmptyLogitSet(f"{path} holds no logits")
        return cls(
            np.array([r["logits"] for r in rows], dtype=np.float64),
            np.array([r["label"] for r in rows]),
            [r["id"] for r in rows],
            tag if tag is not None else Path(path).stem,
        )


def _require(logit_set: LogitSet):
    if len(logit_set) == 0:
        raise EmptyLogitSet("logit set is empty")


def nll(logit_set: LogitSet, T: float = 1.0) -> float:
    """Mean negative log likelihood of the true labels at temperature T."""
    check_temperature(T)
    _require(logit_set)
    logp = log_softmax_t(logit_set.logits, T)
    return float(-logp[np.arange(len(logit_set)), logit_set.labels].mean())


def _nll_grad_logT(logit_set: LogitSet, T: float) -> float:
    # d NLL / d log T = T * mean(z_y - E_p[z]) / T^2
    z = logit_set.logits
    p = softmax_t(z, T)
    zy = z[np.arange(len(logit_set)), logit_set.labels]
    return float(np.mean(zy - (p * z).sum(axis=1)) / T)


def calibrate_temperature(
    logit_set: LogitSet, lr: float = 0.01, max_iters: int = 5000, tol: float = 1e-10
) -> float:
    """Fit one temperature by gradient descent on log T, starting from T = 1.

    The step is enlarged after every accepted move and halved after a move
    that would raise the NLL, so the NLL never increases.
    """
    _require(logit_set)
    u, step = 0.0, lr
    cur = nll(logit_set, 1.0)
    for _ in range(max_iters):
        g = _nll_grad_logT(logit_set, float(np.exp(u)))
        if g == 0.0:
            break
        cand = float(np.clip(u - step * g, np.log(T_MIN), np.log(T_MAX)))
        new = nll(logit_set, float(np.exp(cand)))
        if new <= cur:
            done = cur - new < tol
            u, cur, step = cand, new, step * 1.5
            if done:
                break
        else:
            step *= 0.5
            if step < 1e-16:
                break
    return float(np.clip(np.exp(u), T_MIN, T_MAX))


@dataclass(frozen=True)
class PlattParams:
    scale: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.scale)) and np.all(np.isfinite(self.bias))):
            raise ValidationError("Platt parameters must be finite")

    def apply(self, logits) -> np.ndarray:
        return np.asarray(logits, dtype=np.float64) * self.scale + self.bias

    def transform(self, logit_set: LogitSet) -> LogitSet:
        return LogitSet(self.apply(logit_set.logits), logit_set.labels, logit_set.ids, logit_set.tag)


def _platt_nll(z, labels, scale, bias) -> float:
    logp = log_softmax_t(z * scale + bias)
    return float(-logp[np.arange(labels.size), labels].mean())


def platt_scale(logit_set: LogitSet, lr: float = 0.01, max_iters: int = 5000, tol: float = 1e-12) -> PlattParams:
    """Per-class scale and bias on the logits, fitted by gradient descent on the NLL.

    Steps that would raise the NLL are rejected and the step halved.
    """
    _require(logit_set)
    z, y = logit_set.logits, logit_set.labels
    N, C = z.shape
    onehot = np.eye(C)[y]
    scale, bias = np.ones(C), np.zeros(C)
    cur = _platt_nll(z, y, scale, bias)
    step = lr
    for _ in range(max_iters):
        r = (softmax_t(z * scale + bias) - onehot) / N
        g_scale, g_bias = (r * z).sum(axis=0), r.sum(axis=0)
        s_new, b_new = scale - step * g_scale, bias - step * g_bias
        new = _platt_nll(z, y, s_new, b_new)
        if new <= cur:
            done = cur - new < tol
            scale, bias, cur = s_new, b_new, new
            if done:
                break
        else:
            step *= 0.5
            if step < 1e-16:
                break
    return PlattParams(scale, bias)


def ece_mce(confidences, correct, num_bins: int = 10) -> tuple[float, float]:
    """Expected and maximum calibration error over equal-width bins on [0, 1].

    Bin k holds confidences in [k/B, (k+1)/B); a confidence of exactly 1
    falls in the last bin.
    """
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    corr = np.asarray(correct, dtype=np.float64).ravel()
    if conf.size == 0:
        raise EmptyInput("no confidences given")
    if conf.size != corr.size:
        raise ValidationError("confidences and correctness flags differ in length")
    if num_bins < 1:
        raise ValidationError("num_bins must be >= 1")
    if conf.min() < 0 or conf.max() > 1:
        raise ValidationError("confidences must lie in [0, 1]")
    idx = np.minimum((conf * num_bins).astype(np.int64), num_bins - 1)
    counts = np.bincount(idx, minlength=num_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=num_bins)
    acc_sum = np.bincount(idx, weights=corr, minlength=num_bins)
    full = counts > 0
    gaps = np.abs(acc_sum[full] - conf_sum[full]) / counts[full]
    ece = float((counts[full] / conf.size * gaps).sum())
    return ece, float(gaps.max())


@dataclass(frozen=True)
class ConfidenceStats:
    clean_mean: float
    clean_var: float
    adv_mean: float | None = None
    adv_var: float | None = None


def confidence_stats(model: TextClassifier, dataset: Dataset, T: float = 1.0, attack=None, attack_config=None) -> ConfidenceStats:
    """Mean and variance of the predicted-class probability at temperature T.

    With an attack, adversarial inputs are generated once against the model
    seen at T and their confidences reported at the same T.
    """
    check_temperature(T)
    if len(dataset) == 0:
        raise EmptyDataset("confidence statistics need at least one example")
    conf = softmax_t(model.dataset_logits(dataset), T).max(axis=1)
    if attack is None:
        return ConfidenceStats(float(conf.mean()), float(conf.var()))
    from .attacks import AttackConfig

    config = (attack_config or AttackConfig()).with_temperature(T)
    adv = [attack(model, ex, config).adv_tokens for ex in dataset]
    adv_conf = softmax_t(model.logits([model.encode(t) for t in adv]), T).max(axis=1)
    return ConfidenceStats(float(conf.mean()), float(conf.var()), float(adv_conf.mean()), float(adv_conf.var()))


@dataclass(frozen=True)
class CalibrationReport:
    temperature: float
    nll_before: float
    nll_after: float
    ece: float
    mce: float
    ece_after: float
    mce_after: float
    conf_mean: float
    conf_var: float
    conf_mean_after: float
    conf_var_after: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def calibration_report(
    logit_set: LogitSet, num_bins: int = 10, lr: float = 0.01, max_iters: int = 5000
) -> CalibrationReport:
    """Fit T_a and report NLL, ECE/MCE and confidence moments before and after."""
    _require(logit_set)
    T = calibrate_temperature(logit_set, lr, max_iters)
    correct = logit_set.logits.argmax(axis=1) == logit_set.labels
    before = softmax_t(logit_set.logits, 1.0).max(axis=1)
    after = softmax_t(logit_set.logits, T).max(axis=1)
    ece, mce = ece_mce(before, correct, num_bins)
    ece_a, mce_a = ece_mce(after, correct, num_bins)
    return CalibrationReport(
        T, nll(logit_set, 1.0), nll(logit_set, T), ece, mce, ece_a, mce_a,
        float(before.mean()), float(before.var()), float(after.mean()), float(after.var()),
    )
