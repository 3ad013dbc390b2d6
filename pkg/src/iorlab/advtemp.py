"""Adversarial accuracy as a function of attack temperature, and its minimisation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .attacks import AttackConfig, AttackFn, evaluate_attack
from .errors import EmptyDataset, InvalidBracket, ParseError, ValidationError
from .model import TextClassifier, check_temperature
from .textcore import Dataset

CGOLD = 0.3819660112501051  # 2 - golden ratio


@dataclass
class QCurve:
    points: list[tuple[float, float]] = field(default_factory=list)
    attack: str = ""
    J: int = 0

    def __post_init__(self):
        for T, q in self.points:
            if not T > 0 or not 0 <= q <= 1:
                raise ValidationError(f"bad curve point ({T}, {q})")

    def add(self, T: float, q: float) -> None:
        check_temperature(T)
        if not 0 <= q <= 1:
            raise ValidationError(f"Q must lie in [0, 1], got {q}")
        self.points.append((float(T), float(q)))

    @property
    def temperatures(self) -> np.ndarray:
        return np.array([t for t, _ in self.points])

    @property
    def values(self) -> np.ndarray:
        return np.array([q for _, q in self.points])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["T", "Q", "J", "attack"])
            for T, q in self.points:
                w.writerow([repr(T), repr(q), self.J, self.attack])

    @classmethod
    def from_csv(cls, path) -> "QCurve":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["T", "Q", "J", "attack"]:
            raise ParseError(1, "header must be 'T,Q,J,attack'")
        curve = cls()
        for lineno, row in enumerate(rows[1:], start=2):
            if len(row) != 4:
                raise ParseError(lineno, "expected 4 fields")
            curve.add(float(row[0]), float(row[1]))
            curve.J, curve.attack = int(row[2]), row[3]
        return curve


@dataclass(frozen=True)
class BracketSpec:
    left: float = 1e-10
    mid: float = 0.5
    right: float = 1.0
    factor: float = 10.0

    def __post_init__(self):
        if not self.left < self.mid < self.right:
            raise InvalidBracket(f"need left < mid < right, got {self.left}, {self.mid}, {self.right}")
        if not self.factor > 1:
            raise InvalidBracket("probe factor must exceed 1")


class QFunction:
    """Cached Q(T) for one model, evaluation set, attack and base config."""

    def __init__(
        self,
        model: TextClassifier,
        valset: Dataset,
        attack: AttackFn,
        config: AttackConfig | None = None,
        name: str = "",
    ):
        if len(valset) == 0:
            raise EmptyDataset("Q(T) needs a non-empty evaluation set")
        self.model, self.valset, self.attack = model, valset, attack
        self.config = config or AttackConfig()
        self.curve = QCurve(attack=name, J=len(valset))
        self.cache: dict[float, float] = {}
        self.attack_runs = 0

    def __call__(self, T: float) -> float:
        T = float(T)
        check_temperature(T)
        if T not in self.cache:
            report = evaluate_attack(self.model, self.valset, self.attack, self.config.with_temperature(T))
            self.attack_runs += len(self.valset)
            self.cache[T] = report.adversarial_accuracy
            self.curve.add(T, report.adversarial_accuracy)
        return self.cache[T]


def q_of_t(
    model: TextClassifier, valset: Dataset, attack: AttackFn, T: float, config: AttackConfig | None = None
) -> float:
    """Adversarial accuracy when the attack sees the model at temperature T."""
    check_temperature(T)
    return QFunction(model, valset, attack, config)(T)


def brent_min(
    f: Callable[[float], float],
    bracket: BracketSpec,
    tol: float = 1.48e-8,
    max_iters: int = 500,
    check_bracket: bool = True,
) -> tuple[float, float]:
    """Brent's parabolic/golden-section minimiser on [left, right] starting at mid.

    Returns the best point evaluated (ties keep the earliest).  With
    ``check_bracket`` the end points are evaluated and ``f(mid)`` must not
    exceed either of them.
    """
    if not tol > 0:
        raise ValidationError("tol must be positive")
    a, x, b = bracket.left, bracket.mid, bracket.right
    fx = f(x)
    best = (x, fx)
    if check_bracket:
        fa, fb = f(a), f(b)
        if fx > min(fa, fb):
            raise InvalidBracket(f"f(mid)={fx} exceeds an end value ({fa}, {fb})")
    w = v = x
    fw = fv = fx
    d = e = 0.0
    for _ in range(max_iters):
        xm = 0.5 * (a + b)
        tol1 = tol * abs(x) + 1e-11
        tol2 = 2.0 * tol1
        if abs(x - xm) <= tol2 - 0.5 * (b - a):
            break
        golden = True
        if abs(e) > tol1:
            r = (x - w) * (fx - fv)
            q = (x - v) * (fx - fw)
            p = (x - v) * q - (x - w) * r
            q = 2.0 * (q - r)
            if q > 0:
                p = -p
            q = abs(q)
            e_prev, e = e, d
            if abs(p) < abs(0.5 * q * e_prev) and q * (a - x) < p < q * (b - x):
                d = p / q
                u = x + d
                if u - a < tol2 or b - u < tol2:
                    d = math.copysign(tol1, xm - x)
                golden = False
        if golden:
            e = (a - x) if x >= xm else (b - x)
            d = CGOLD * e
        u = x + d if abs(d) >= tol1 else x + math.copysign(tol1, d)
        fu = f(u)
        if fu < best[1]:
            best = (u, fu)
        if fu <= fx:
            if u >= x:
                a = x
            else:
                b = x
            v, w, x = w, x, u
            fv, fw, fx = fw, fx, fu
        else:
            if u < x:
                a = u
            else:
                b = u
            if fu <= fw or w == x:
                v, w, fv, fw = w, u, fw, fu
            elif fu <= fv or v == x or v == w:
                v, fv = u, fu
    return best


@dataclass(frozen=True)
class OptResult:
    temperature: float
    q: float
    q_at_one: float
    curve: QCurve
    attack_runs: int


def optimize_adv_temperature(
    model: TextClassifier,
    valset: Dataset,
    attack: AttackFn,
    config: AttackConfig | None = None,
    factor: float = 10.0,
    t_min: float = 1e-10,
    t_max: float = 1e6,
    max_iters: int = 10,
    subsample: int | None = None,
    seed: int = 0,
    name: str = "",
) -> OptResult:
    """Search the attack temperature that minimises adversarial accuracy.

    Probes Q(1) and Q(factor) to pick the branch (1, t_max) or (t_min, 1),
    then runs Brent from the branch midpoint for ``max_iters`` iterations.
    The end points are not evaluated (Brent only needs the interval), so at
    most ``max_iters + 3`` temperatures are attacked.  Returns the best
    temperature seen, Q(1) included.
    """
    if len(valset) == 0:
        raise EmptyDataset("temperature optimisation needs a validation set")
    if subsample is not None and subsample < len(valset):
        rng = np.random.default_rng(seed)
        valset = valset.subset(sorted(rng.choice(len(valset), subsample, replace=False).tolist()))
    Q = QFunction(model, valset, attack, config, name)
    q1 = Q(1.0)
    if Q(factor) < q1:
        left, right = 1.0, t_max
    else:
        left, right = t_min, 1.0
    bracket = BracketSpec(left, 0.5 * (left + right), right, factor)
    brent_min(Q, bracket, max_iters=max_iters, check_bracket=False)
    # earliest evaluated temperature wins ties, so T=1 is kept unless beaten
    T_best, q_best = min(Q.curve.points, key=lambda p: p[1])
    return OptResult(T_best, q_best, q1, Q.curve, Q.attack_runs)


def sweep_temperatures(
    model: TextClassifier,
    valset: Dataset,
    attack: AttackFn,
    temperatures,
    config: AttackConfig | None = None,
    name: str = "",
) -> QCurve:
    """Q(T) on a given temperature grid, in grid order."""
    Q = QFunction(model, valset, attack, config, name)
    for T in temperatures:
        Q(T)
    return Q.curve
