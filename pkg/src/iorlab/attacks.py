"""Score-based greedy substitution attacks and adversarial-accuracy evaluation.

All attacks are black-box with respect to the probabilities they observe:
they see ``softmax(logits / config.T)`` of the model they are handed,
evaluated in ``config.precision`` (float32 by default, as a typical deep
learning model would report it), rank
token positions by importance, then greedily substitute one position at a
time.  A substitution is kept only if it strictly lowers the confidence in
the originally predicted class (or flips the prediction).  When the
confidence is saturated at 1.0 every candidate scores zero and the search
stalls, which is the masking effect this lab studies.
"""

from __future__ import annotations

import json
import math
import string
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from typing import Callable, Sequence

import numpy as np

from .errors import EmptyDataset, EmptyInput, ValidationError
from .model import TextClassifier, check_temperature
from .textcore import UNK, Dataset, Example, SynonymLexicon, tokenize


@dataclass(frozen=True)
class AttackConfig:
    max_perturb_fraction: float = 0.25
    max_candidates_per_position: int = 50
    query_budget: int = 2000
    T: float = 1.0
    sim_threshold: float = 0.0  # textfooler only
    # dtype of the probabilities the attack observes
    precision: str = "float32"

    def __post_init__(self):
        if not 0 < self.max_perturb_fraction <= 1:
            raise ValidationError("max_perturb_fraction must lie in (0, 1]")
        if self.max_candidates_per_position < 1 or self.query_budget < 1:
            raise ValidationError("budgets must be >= 1")
        check_temperature(self.T)
        if self.precision not in ("float32", "float64"):
            raise ValidationError(f"precision must be float32 or float64, got {self.precision!r}")

    def with_temperature(self, T: float) -> "AttackConfig":
        return replace(self, T=T)

    def max_positions(self, length: int) -> int:
        return math.ceil(self.max_perturb_fraction * length)


@dataclass(frozen=True)
class ImportanceRanking:
    scores: np.ndarray
    order: tuple[int, ...]


@dataclass
class AttackResult:
    id: int
    label: int
    orig_tokens: list[str]
    adv_tokens: list[str]
    success: bool
    queries: int
    perturbed_positions: list[int]
    orig_pred: int
    adv_pred: int
    orig_conf: float
    adv_conf: float
    attempted: bool = True

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "AttackResult":
        return cls(**json.loads(line))


@dataclass
class AdvEvalReport:
    clean_accuracy: float
    adversarial_accuracy: float
    indicators: np.ndarray
    mean_queries: float
    mean_perturbed_fraction: float
    results: list[AttackResult] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {
            "clean_accuracy": self.clean_accuracy,
            "adversarial_accuracy": self.adversarial_accuracy,
            "mean_queries": self.mean_queries,
            "mean_perturbed_fraction": self.mean_perturbed_fraction,
            "n": int(self.indicators.size),
        }


def write_results(results: Sequence[AttackResult], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(r.to_json() + "\n")


def read_results(path) -> list[AttackResult]:
    with open(path, encoding="utf-8") as fh:
        return [AttackResult.from_json(line) for line in fh if line.strip()]


def _rank(scores: np.ndarray) -> tuple[int, ...]:
    # stable sort: equal scores keep ascending position order
    return tuple(int(i) for i in np.argsort(-scores, kind="stable"))


class _BudgetExhausted(Exception):
    pass


class _Oracle:
    """Query-counting, caching view of a model at a fixed temperature.

    A query is one distinct id sequence sent to the model.
    """

    def __init__(
        self, model: TextClassifier, T: float, budget: int | None = None, precision: str = "float64"
    ):
        self.model = model
        self.T = T
        self.dtype = np.dtype(precision)
        self.budget = budget
        self.queries = 0
        self._cache: dict[tuple[int, ...], np.ndarray] = {}

    def logits(self, seqs: Sequence[Sequence[int]]) -> np.ndarray:
        keys = [tuple(s) for s in seqs]
        missing = list(dict.fromkeys(k for k in keys if k not in self._cache))
        if missing:
            if self.budget is not None and self.queries + len(missing) > self.budget:
                raise _BudgetExhausted
            out = self.model.logits(missing)
            self.queries += len(missing)
            self._cache.update(zip(missing, out))
        return np.array([self._cache[k] for k in keys]).reshape(len(keys), -1)

    def new_keys(self, seqs) -> int:
        return len({tuple(s) for s in seqs if tuple(s) not in self._cache})

    def probs(self, seqs) -> np.ndarray:
        return observed_probs(self.logits(seqs), self.T, self.dtype)


def observed_probs(logits, T: float, dtype=np.float64) -> np.ndarray:
    """Temperature softmax evaluated entirely in ``dtype``, as an attack would see it."""
    check_temperature(T)
    z = np.asarray(logits, dtype=np.float64) / T
    z = z.astype(dtype)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float64)


def _importance(oracle: _Oracle, ids: list[int], pred: int, method: str) -> np.ndarray:
    n = len(ids)
    base = oracle.probs([ids])[0, pred]
    if method == "unk_saliency":
        variants = [ids[:i] + [UNK] + ids[i + 1:] for i in range(n)]
    elif method == "deletion":
        if n == 1:
            # nothing left after deletion: treat as an uninformative (uniform) input
            return np.array([base - 1.0 / oracle.model.num_classes])
        variants = [ids[:i] + ids[i + 1:] for i in range(n)]
    else:
        raise ValueError(f"unknown importance method {method!r}")
    return base - oracle.probs(variants)[:, pred]


def token_importance(
    model: TextClassifier, example, T: float = 1.0, method: str = "unk_saliency", precision: str = "float32"
) -> ImportanceRanking:
    """Confidence lost in the predicted class when each token is masked/deleted."""
    check_temperature(T)
    tokens = _tokens_of(example)
    if not tokens:
        raise EmptyInput("example has no tokens")
    ids = model.encode(tokens)
    oracle = _Oracle(model, T, precision=precision)
    pred = int(np.argmax(oracle.logits([ids])[0]))
    scores = _importance(oracle, ids, pred, method)
    return ImportanceRanking(scores, _rank(scores))


def _tokens_of(example) -> list[str]:
    if isinstance(example, Example):
        return tokenize(example.text)
    if isinstance(example, str):
        return tokenize(example)
    return list(example)


def char_transforms(word: str) -> list[str]:
    """Adjacent swaps, single substitutions/deletions/insertions (a-z), sorted."""
    letters = string.ascii_lowercase
    out = set()
    n = len(word)
    for i in range(n - 1):
        out.add(word[:i] + word[i + 1] + word[i] + word[i + 2:])
    for i in range(n):
        for ch in letters:
            out.add(word[:i] + ch + word[i + 1:])
        out.add(word[:i] + word[i + 1:])
    for i in range(n + 1):
        for ch in letters:
            out.add(word[:i] + ch + word[i:])
    out.discard(word)
    out.discard("")
    return sorted(out)


CandidateFn = Callable[[list[str], list[int], int], list[str]]


def _greedy_search(
    model: TextClassifier,
    example: Example,
    config: AttackConfig,
    rank_fn: Callable[[_Oracle, list[int], int], np.ndarray],
    candidate_fn: CandidateFn,
) -> AttackResult:
    tokens = _tokens_of(example)
    if not tokens:
        raise EmptyInput(f"example {example.id} has no tokens")
    oracle = _Oracle(model, config.T, config.query_budget, config.precision)
    ids = model.encode(tokens)
    logits0 = oracle.logits([ids])[0]
    pred = int(np.argmax(logits0))
    conf0 = float(oracle.probs([ids])[0, pred])

    def result(adv_tokens, success, positions, adv_pred, adv_conf, attempted=True):
        return AttackResult(
            example.id, example.label, list(tokens), list(adv_tokens), success,
            oracle.queries, sorted(positions), pred, adv_pred, conf0, adv_conf, attempted,
        )

    if pred != example.label:
        return result(tokens, False, [], pred, conf0, attempted=False)

    try:
        scores = rank_fn(oracle, ids, pred)
    except _BudgetExhausted:
        return result(tokens, False, [], pred, conf0)
    order = _rank(scores)
    cur_tokens, cur_ids, cur_conf = list(tokens), list(ids), conf0
    perturbed: list[int] = []
    max_pos = config.max_positions(len(tokens))

    for pos in order:
        if len(perturbed) >= max_pos:
            break
        cands = candidate_fn(cur_tokens, cur_ids, pos)[: config.max_candidates_per_position]
        if not cands:
            continue
        seqs = [cur_ids[:pos] + [model.vocab.id(w)] + cur_ids[pos + 1:] for w in cands]
        remaining = config.query_budget - oracle.queries
        if oracle.new_keys(seqs) > remaining:
            # keep the prefix of candidates the budget can still pay for
            kept, seen = [], set()
            for w, s in zip(cands, seqs):
                key = tuple(s)
                if key not in oracle._cache and key not in seen:
                    if len(seen) == remaining:
                        break
                    seen.add(key)
                kept.append((w, s))
            if not kept:
                break
            cands, seqs = [w for w, _ in kept], [s for _, s in kept]
        logits = oracle.logits(seqs)
        probs = observed_probs(logits, config.T, oracle.dtype)[:, pred]
        drops = cur_conf - probs
        best = int(np.argmax(drops))  # candidates are sorted, so ties go lexicographic
        flipped = int(np.argmax(logits[best])) != pred
        if flipped or drops[best] > 0:
            cur_tokens[pos] = cands[best]
            cur_ids = seqs[best]
            cur_conf = float(probs[best])
            perturbed.append(pos)
        if flipped:
            return result(cur_tokens, True, perturbed, int(np.argmax(logits[best])), cur_conf)
        if oracle.queries >= config.query_budget:
            break

    final_logits = oracle.logits([cur_ids])[0]
    return result(cur_tokens, False, perturbed, int(np.argmax(final_logits)), cur_conf)


def _lexicon_candidates(lexicon: SynonymLexicon, vocab, tokens, ids, pos) -> list[str]:
    word = tokens[pos]
    return [w for w in sorted(lexicon.candidates(word)) if vocab.id(w) != ids[pos]]


def pwws_lite(
    model: TextClassifier, example: Example, lexicon: SynonymLexicon, config: AttackConfig
) -> AttackResult:
    """Word saliency (softmax-normalised) weighted by the best synonym's drop."""
    cand = partial(_lexicon_candidates, lexicon, model.vocab)
    tokens = _tokens_of(example)

    def rank(oracle, ids, pred):
        sal = _importance(oracle, ids, pred, "unk_saliency")
        w = np.exp(sal - sal.max())
        w /= w.sum()
        base = oracle.probs([ids])[0, pred]
        best_drop = np.zeros(len(ids))
        for i in range(len(ids)):
            words = cand(tokens, ids, i)[: config.max_candidates_per_position]
            if words:
                seqs = [ids[:i] + [model.vocab.id(x)] + ids[i + 1:] for x in words]
                best_drop[i] = float(np.max(base - oracle.probs(seqs)[:, pred]))
        return w * best_drop

    return _greedy_search(model, example, config, rank, cand)


def textfooler_lite(
    model: TextClassifier, example: Example, lexicon: SynonymLexicon, config: AttackConfig
) -> AttackResult:
    """Deletion importance; synonyms filtered by embedding cosine similarity."""
    E = model.params.E
    norms = np.linalg.norm(E, axis=1)

    def cand(tokens, ids, pos):
        out = []
        for w in _lexicon_candidates(lexicon, model.vocab, tokens, ids, pos):
            a, b = ids[pos], model.vocab.id(w)
            denom = norms[a] * norms[b]
            cos = float(E[a] @ E[b] / denom) if denom > 0 else 0.0
            if cos >= config.sim_threshold:
                out.append(w)
        return out

    def rank(oracle, ids, pred):
        return _importance(oracle, ids, pred, "deletion")

    return _greedy_search(model, example, config, rank, cand)


def deepwordbug_lite(model: TextClassifier, example: Example, config: AttackConfig) -> AttackResult:
    """Character edits on the most salient words; edited words usually become UNK."""

    def cand(tokens, ids, pos):
        word = tokens[pos]
        if not any(ch.isalpha() for ch in word):
            return []
        out, seen = [], {ids[pos]}
        for w in char_transforms(word):
            wid = model.vocab.id(w)
            if wid not in seen:  # one representative per distinct encoding
                seen.add(wid)
                out.append(w)
        return out

    def rank(oracle, ids, pred):
        return _importance(oracle, ids, pred, "unk_saliency")

    return _greedy_search(model, example, config, rank, cand)


AttackFn = Callable[[TextClassifier, Example, AttackConfig], AttackResult]
ATTACK_NAMES = ("pwws", "textfooler", "deepwordbug")


def make_attack(name: str, lexicon: SynonymLexicon | None = None) -> AttackFn:
    if name in ("pwws", "pwws_lite"):
        return partial(_with_lexicon, pwws_lite, lexicon or SynonymLexicon())
    if name in ("textfooler", "tf", "textfooler_lite"):
        return partial(_with_lexicon, textfooler_lite, lexicon or SynonymLexicon())
    if name in ("deepwordbug", "dg", "deepwordbug_lite"):
        return deepwordbug_lite
    raise ValidationError(f"unknown attack {name!r}")


def _with_lexicon(fn, lexicon, model, example, config):
    return fn(model, example, lexicon, config)


def evaluate_attack(
    model: TextClassifier, dataset: Dataset, attack: AttackFn, config: AttackConfig
) -> AdvEvalReport:
    """Attack the model seen at ``config.T``; score the examples at T=1.

    Examples the model already gets wrong are not attacked and count as 0.
    """
    if len(dataset) == 0:
        raise EmptyDataset("cannot evaluate an attack on an empty dataset")
    results = [attack(model, ex, config) for ex in dataset]
    return _report(model, results)


def _report(model: TextClassifier, results: list[AttackResult]) -> AdvEvalReport:
    clean_seqs = [model.encode(r.orig_tokens) for r in results]
    adv_seqs = [model.encode(r.adv_tokens) for r in results]
    labels = np.array([r.label for r in results])
    clean_pred = np.argmax(model.logits(clean_seqs), axis=1)
    adv_pred = np.argmax(model.logits(adv_seqs), axis=1)
    clean_ok = clean_pred == labels
    indicators = ((adv_pred == labels) & clean_ok).astype(np.int64)
    attempted = [r for r in results if r.attempted]
    mean_q = float(np.mean([r.queries for r in attempted])) if attempted else 0.0
    mean_frac = (
        float(np.mean([len(r.perturbed_positions) / len(r.orig_tokens) for r in attempted]))
        if attempted else 0.0
    )
    return AdvEvalReport(
        float(clean_ok.mean()), float(indicators.mean()), indicators, mean_q, mean_frac, results
    )


def transfer_evaluate(source_results: Sequence[AttackResult], target: TextClassifier) -> AdvEvalReport:
    """Re-score adversarial token sequences found elsewhere on ``target`` at T=1."""
    results = list(source_results)
    if not results:
        raise EmptyDataset("no attack results to transfer")
    labels = np.array([r.label for r in results])
    clean_pred = np.argmax(target.logits([target.encode(r.orig_tokens) for r in results]), axis=1)
    adv_pred = np.argmax(target.logits([target.encode(r.adv_tokens) for r in results]), axis=1)
    indicators = (adv_pred == labels).astype(np.int64)
    mean_frac = float(np.mean([len(r.perturbed_positions) / len(r.orig_tokens) for r in results]))
    return AdvEvalReport(
        float((clean_pred == labels).mean()),
        float(indicators.mean()),
        indicators,
        float(np.mean([r.queries for r in results])),
        mean_frac,
        results,
    )
