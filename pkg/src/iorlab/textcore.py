"""Text ingestion: tokenizer, vocabulary, synonym lexicon, datasets and splits."""

from __future__ import annotations

import csv
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    EmptyDataset,
    InvalidRatios,
    LabelOutOfRange,
    MissingClass,
    ParseError,
)

UNK, PAD = 0, 1
UNK_TOKEN, PAD_TOKEN = "<unk>", "<pad>"
SPLIT_TAGS = ("train", "val", "test")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and detach punctuation.

    >>> tokenize("Good movie!")
    ['good', 'movie', '!']
    """
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Example:
    text: str
    label: int
    id: int

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"example {self.id}: empty text")
        if self.label < 0:
            raise LabelOutOfRange(f"example {self.id}: negative label {self.label}")


@dataclass(frozen=True)
class Dataset:
    examples: tuple[Example, ...]
    num_classes: int
    split_tag: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))
        if self.split_tag not in SPLIT_TAGS:
            raise ValueError(f"unknown split tag {self.split_tag!r}")
        for ex in self.examples:
            if ex.label >= self.num_classes:
                raise LabelOutOfRange(
                    f"example {ex.id}: label {ex.label} >= num_classes {self.num_classes}"
                )

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([ex.label for ex in self.examples], dtype=np.int64)

    def subset(self, indices: Iterable[int], split_tag: str | None = None) -> "Dataset":
        return Dataset(
            tuple(self.examples[i] for i in indices),
            self.num_classes,
            split_tag or self.split_tag,
        )


@dataclass(frozen=True)
class Vocab:
    itos: tuple[str, ...]
    stoi: dict = field(compare=False, repr=False)

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocab":
        itos = (UNK_TOKEN, PAD_TOKEN, *tokens)
        stoi = {tok: i for i, tok in enumerate(itos)}
        if len(stoi) != len(itos):
            raise ValueError("duplicate tokens in vocabulary")
        return cls(itos, stoi)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]


def build_vocab(train: Dataset, min_freq: int = 1) -> Vocab:
    if len(train) == 0:
        raise EmptyDataset("cannot build a vocabulary from an empty dataset")
    counts = Counter(tok for ex in train for tok in tokenize(ex.text))
    counts.pop(UNK_TOKEN, None)
    counts.pop(PAD_TOKEN, None)
    kept = [tok for tok, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    return Vocab.from_tokens(kept)


def encode(tokens: Sequence[str], vocab: Vocab) -> list[int]:
    return [vocab.id(tok) for tok in tokens]


def decode(ids: Sequence[int], vocab: Vocab) -> list[str]:
    return [vocab.token(i) for i in ids]


def _check_record(obj, line, num_classes):
    if not isinstance(obj, dict) or "text" not in obj or "label" not in obj:
        raise ParseError(line, "expected an object with 'text' and 'label'")
    text, label = obj["text"], obj["label"]
    if not isinstance(text, str) or not text.strip():
        raise ParseError(line, "'text' must be a non-empty string")
    if isinstance(label, str) and label.strip().isdigit():
        label = int(label)
    if isinstance(label, bool) or not isinstance(label, int) or label < 0:
        raise ParseError(line, "'label' must be a non-negative integer")
    if num_classes is not None and label >= num_classes:
        raise LabelOutOfRange(f"line {line}: label {label} >= num_classes {num_classes}")
    return text, label


def load_dataset(
    path, format: str | None = None, num_classes: int | None = None, split_tag: str = "train"
) -> Dataset:
    """Read a JSONL or CSV dataset; ids follow file order starting at 0.

    ``num_classes`` defaults to ``max(label) + 1``.
    """
    path = Path(path)
    fmt = format or path.suffix.lstrip(".").lower()
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        if fmt == "jsonl":
            for lineno, raw in enumerate(fh, start=1):
                if not raw.strip():
                    continue
                try:
                    obj = json.loads(raw)
                except json.JSONDecodeError as exc:
                    raise ParseError(lineno, str(exc)) from None
                records.append(_check_record(obj, lineno, num_classes))
        elif fmt == "csv":
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                header = []
            if [h.strip() for h in header] != ["text", "label"]:
                raise ParseError(1, "header must be 'text,label'")
            for row in reader:
                lineno = reader.line_num
                if not row:
                    continue
                if len(row) != 2:
                    raise ParseError(lineno, f"expected 2 fields, got {len(row)}")
                records.append(
                    _check_record({"text": row[0], "label": row[1]}, lineno, num_classes)
                )
        else:
            raise ValueError(f"unsupported dataset format {fmt!r}")
    if num_classes is None:
        num_classes = max((lab for _, lab in records), default=0) + 1
    examples = tuple(Example(text, label, i) for i, (text, label) in enumerate(records))
    return Dataset(examples, num_classes, split_tag)


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in dataset:
            fh.write(json.dumps({"text": ex.text, "label": ex.label}) + "\n")


class SynonymLexicon(dict):
    """word -> tuple of substitute words (lowercase, never the word itself)."""

    def candidates(self, word: str) -> tuple[str, ...]:
        return self.get(word, ())


def parse_lexicon(lines: Iterable[str]) -> SynonymLexicon:
    entries: dict[str, list[str]] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "\t" not in line:
            raise ParseError(lineno, "expected 'word<TAB>syn1,syn2,...'")
        word, syns = line.split("\t", 1)
        word = word.strip().lower()
        if not word:
            raise ParseError(lineno, "empty head word")
        bucket = entries.setdefault(word, [])
        for syn in syns.split(","):
            syn = syn.strip().lower()
            if syn and syn != word and syn not in bucket:
                bucket.append(syn)
    return SynonymLexicon({w: tuple(s) for w, s in entries.items() if s})


def load_lexicon(path) -> SynonymLexicon:
    with open(path, encoding="utf-8") as fh:
        return parse_lexicon(fh)


def bundled_lexicon() -> SynonymLexicon:
    text = resources.files("iorlab.data").joinpath("lexicon.tsv").read_text(encoding="utf-8")
    return parse_lexicon(text.splitlines())


def _largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    raw = [n * r for r in ratios]
    sizes = [int(np.floor(x)) for x in raw]
    short = n - sum(sizes)
    # ties in the fractional part go to the earlier split
    order = sorted(range(len(ratios)), key=lambda k: (-(raw[k] - sizes[k]), k))
    for k in order[:short]:
        sizes[k] += 1
    return sizes


def split(dataset: Dataset, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Stratified (train, val, test) partition with per-class largest-remainder rounding."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidRatios(f"ratios must be three non-negative fractions summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    labels = dataset.labels
    parts: list[list[int]] = [[], [], []]
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        idx = idx[rng.permutation(idx.size)]
        start = 0
        for k, size in enumerate(_largest_remainder(idx.size, ratios)):
            parts[k].extend(idx[start:start + size].tolist())
            start += size
    train, val, test = (
        dataset.subset(sorted(p), tag) for p, tag in zip(parts, SPLIT_TAGS)
    )
    present = set(labels.tolist())
    missing = present - set(train.labels.tolist())
    if missing and len(train):
        raise MissingClass(f"classes {sorted(missing)} absent from the train split")
    return train, val, test


# --- bundled toy corpus -------------------------------------------------------

POSITIVE = (
    "good great excellent wonderful superb brilliant enjoyable delightful "
    "charming moving clever fresh beautiful funny"
).split()
NEGATIVE = (
    "bad awful terrible boring dull poor weak tedious clumsy bland messy lame "
    "stale ugly"
).split()
FILLER = (
    "the a movie film story plot acting cast director script scenes this it "
    "was is and with of in very quite really its characters ending music pace "
    "overall feels seems at times but also just some an entire whole experience"
).split()
# mild words: appear in both classes, serve as substitution targets
MILD = (
    "decent fine okay fair modest average plain ordinary passable routine "
    "standard usual typical simple unusual odd mixed uneven"
).split()


def make_toy_corpus(
    n: int = 3000,
    seed: int = 0,
    label_noise: float = 0.08,
    min_len: int = 8,
    max_len: int = 14,
) -> Dataset:
    """Two-class keyword sentiment corpus (1 = positive).

    Each sentence carries a few sentiment keywords for its class and fewer for
    the other, padded with neutral and mild filler words.
    """
    rng = np.random.default_rng(seed)
    examples = []
    for i in range(n):
        label = int(rng.integers(2))
        n_for = int(rng.integers(2, 5))
        n_against = int(rng.integers(0, n_for - 1)) if n_for > 1 else 0
        length = int(rng.integers(min_len, max_len + 1))
        pos_pool, neg_pool = (POSITIVE, NEGATIVE) if label == 1 else (NEGATIVE, POSITIVE)
        words = list(rng.choice(pos_pool, n_for, replace=False))
        words += list(rng.choice(neg_pool, n_against, replace=False))
        n_fill = max(length - len(words), 0)
        n_mild = int(rng.binomial(n_fill, 0.15))
        words += list(rng.choice(MILD, n_mild))
        words += list(rng.choice(FILLER, n_fill - n_mild))
        words = [str(words[k]) for k in rng.permutation(len(words))]
        punct = "!" if rng.random() < 0.3 else "."
        text = " ".join(words).capitalize() + punct
        if rng.random() < label_noise:
            label = 1 - label
        examples.append(Example(text, label, i))
    return Dataset(tuple(examples), 2, "train")
