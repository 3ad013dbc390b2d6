"""Experiment runners that compose training, attacks and calibration into reports.

Every experiment runs once per seed.  A seed fixes the toy corpus, the split,
the model initialisation and the batch order, so a (config, seeds) pair
determines every output byte.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .advtemp import QCurve, optimize_adv_temperature, sweep_temperatures
from .attacks import AttackConfig, evaluate_attack, make_attack, token_importance, transfer_evaluate
from .calibrate import LogitSet, calibrate_temperature
from .errors import DegenerateInput, EmptyDataset, LengthMismatch, UnknownExperiment, ValidationError
from .model import GradTransform, TextClassifier, logit_range_stats, softmax_t
from .textcore import Dataset, bundled_lexicon, load_dataset, load_lexicon, make_toy_corpus, split, tokenize
from .train import DDiConfig, PgdConfig, TrainConfig, train_ddi_at, train_standard

EXPERIMENTS = (
    "ior-demo", "pierce", "sweep-temp", "high-t-train", "transfer", "importance-corr", "logit-range",
)

DEFAULT_SEEDS = (0, 1, 2)

DEFAULT_CONFIG = {
    "dataset": None,  # JSONL/CSV path; the bundled toy corpus when null
    "lexicon": None,  # synonym TSV path; the bundled lexicon when null
    "corpus_size": 3000,
    "ratios": [0.7, 0.1, 0.2],
    "test_size": 500,
    "attacks": ["pwws", "deepwordbug", "textfooler"],
    "attack_config": {},
    "train": {"lr": 0.1, "batch_size": 8, "epochs": 20},
    "down_T": 100.0,
    "up_T": 0.01,
    "opt_attack": "deepwordbug",
    "sweep_temperatures": [0.01, 0.0316, 0.1, 0.316, 1.0, 3.16, 10.0, 31.6, 100.0],
    "sweep_models": ["baseline", "up_conf"],
    "high_t": {"temperatures": [1.0, 5.0, 20.0, 50.0], "lr": 0.01, "grad_transform": "normalize"},
    "held_out_attack": "textfooler",
    "ddi": {"lr": 0.3, "M": 3, "K": 3, "warm_start": True},
    "pgd": {"steps": 5, "adv_lr": 0.03, "init_mag": 0.05, "max_norm": 1.0},
    "transfer_attacks": ["pwws", "deepwordbug"],
    "T_extreme": 0.01,
    "importance_attacks": {"pwws": "unk_saliency", "textfooler": "deletion"},
    "logit_range": {"temperatures": [1.0, 50.0], "lr": 0.1, "bin_width": 5.0},
}


def merge_config(overrides: dict | None) -> dict:
    """Defaults updated by ``overrides`` (nested dicts merged one level deep)."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    for key, value in (overrides or {}).items():
        if key not in cfg:
            raise ValidationError(f"unknown config key {key!r}")
        if isinstance(cfg[key], dict) and isinstance(value, dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def config_hash(name: str, config: dict) -> str:
    blob = json.dumps({"experiment": name, "config": config}, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    config: dict = field(default_factory=dict)
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    out_dir: Path | None = None

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise UnknownExperiment(f"unknown experiment {self.name!r}; choose from {', '.join(EXPERIMENTS)}")
        if len(self.seeds) < 1:
            raise ValidationError("at least one seed is required")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "config", merge_config(self.config))


@dataclass
class RunReport:
    experiment: str
    seeds: tuple[int, ...]
    config: dict
    config_hash: str
    per_seed: dict[str, list[float]] = field(default_factory=dict)
    curves: dict[str, QCurve] = field(default_factory=dict)
    plots: dict[str, list[dict]] = field(default_factory=dict)

    def mean(self, key: str) -> float:
        return float(np.mean(self.per_seed[key]))

    def std(self, key: str) -> float:
        return float(np.std(self.per_seed[key]))

    def to_dict(self) -> dict:
        out = {
            "experiment": self.experiment,
            "provenance": {"config_hash": self.config_hash, "seeds": list(self.seeds), "config": self.config},
        }
        if self.per_seed:
            out["metrics"] = {
                k: {"per_seed": v, "mean": self.mean(k), "std": self.std(k)}
                for k, v in sorted(self.per_seed.items())
            }
        return out


# --- shared setup ---------------------------------------------------------------

@dataclass
class _Context:
    seed: int
    cfg: dict
    train: Dataset
    val: Dataset
    test: Dataset
    lexicon: dict
    attack_config: AttackConfig
    models: dict = field(default_factory=dict)

    def attack(self, name):
        return make_attack(name, self.lexicon)

    def train_config(self, **kw) -> TrainConfig:
        base = dict(self.cfg["train"])
        base.update(kw)
        return TrainConfig(seed=self.seed, **base)

    def baseline(self) -> TextClassifier:
        return self._model("baseline", lambda: train_standard(self.train_config(), self.train, self.val)[0])

    def normalized(self, mode="normalize") -> TextClassifier:
        cfg = self.train_config(grad_transform=GradTransform(mode))
        return self._model(f"baseline_{mode}", lambda: train_standard(cfg, self.train, self.val)[0])

    def _model(self, key, build):
        if key not in self.models:
            self.models[key] = build()
        return self.models[key]


def _context(cfg: dict, seed: int) -> _Context:
    if cfg["dataset"]:
        data = load_dataset(cfg["dataset"])
    else:
        data = make_toy_corpus(cfg["corpus_size"], seed=seed)
    train, val, test = split(data, cfg["ratios"], seed=seed)
    if len(train) == 0 or len(val) == 0 or len(test) == 0:
        raise EmptyDataset("every split must be non-empty; adjust 'ratios' or the corpus size")
    if cfg["test_size"] is not None and cfg["test_size"] < len(test):
        test = test.subset(range(cfg["test_size"]))
    lexicon = load_lexicon(cfg["lexicon"]) if cfg["lexicon"] else bundled_lexicon()
    return _Context(seed, cfg, train, val, test, lexicon, AttackConfig(**cfg["attack_config"]))


def _clean_and_conf(model: TextClassifier, data: Dataset, T: float = 1.0) -> tuple[float, float]:
    logits = model.dataset_logits(data)
    acc = float((logits.argmax(axis=1) == data.labels).mean())
    return acc, float(softmax_t(logits, T).max(axis=1).mean())


# --- experiments ------------------------------------------------------------------

def _ior_demo(ctx: _Context, out: dict, curves: dict, plots: dict) -> None:
    base = ctx.baseline()
    rows = {
        "baseline": base,
        "down_conf": base.scaled(ctx.cfg["down_T"]),
        "up_conf": base.scaled(ctx.cfg["up_T"]),
        "baseline_clip": ctx.normalized("clip"),
        "baseline_normalize": ctx.normalized("normalize"),
    }
    for row, model in rows.items():
        acc, conf = _clean_and_conf(model, ctx.test)
        out[f"ior:{row}:clean"] = acc
        out[f"ior:{row}:confidence"] = conf
        for name in ctx.cfg["attacks"]:
            rep = evaluate_attack(model, ctx.test, ctx.attack(name), ctx.attack_config)
            out[f"ior:{row}:{name}"] = rep.adversarial_accuracy


def _pierce(ctx: _Context, out: dict, curves: dict, plots: dict) -> None:
    base = ctx.baseline()
    targets = {
        "baseline": base,
        "down_conf": base.scaled(ctx.cfg["down_T"]),
        "up_conf": base.scaled(ctx.cfg["up_T"]),
        "baseline_normalize": ctx.normalized("normalize"),
    }
    opt_attack = ctx.attack(ctx.cfg["opt_attack"])
    for row, model in targets.items():
        T_cal = calibrate_temperature(LogitSet.from_model(model, ctx.val))
        opt = optimize_adv_temperature(model, ctx.val, opt_attack, ctx.attack_config, name=ctx.cfg["opt_attack"])
        out[f"pierce:{row}:T_cal"] = T_cal
        out[f"pierce:{row}:T_opt"] = opt.temperature
        for mode, T in (("plain", 1.0), ("cal", T_cal), ("opt", opt.temperature)):
            for name in ctx.cfg["attacks"]:
                rep = evaluate_attack(model, ctx.test, ctx.attack(name), ctx.attack_config.with_temperature(T))
                # adversarial examples are always scored on the unscaled model
                scored = transfer_evaluate(rep.results, base if row != "baseline_normalize" else model)
                out[f"pierce:{row}_{mode}:{name}"] = scored.adversarial_accuracy


def _sweep_temp(ctx: _Context, out: dict, curves: dict, plots: dict) -> None:
    base = ctx.baseline()
    models = {"baseline": base, "up_conf": base.scaled(ctx.cfg["up_T"]), "down_conf": base.scaled(ctx.cfg["down_T"])}
    for mname in ctx.cfg["sweep_models"]:
        if mname not in models:
            raise ValidationError(f"unknown sweep model {mname!r}")
        for name in ctx.cfg["attacks"]:
            curve = sweep_temperatures(
                models[mname], ctx.test, ctx.attack(name), ctx.cfg["sweep_temperatures"], ctx.attack_config, name
            )
            curves[f"{mname}_{name}_seed{ctx.seed}"] = curve
            for T, q in curve.points:
                out[f"sweep:{mname}_{name}:T={T:g}"] = q


def _high_t_train(ctx: _Context, out: dict, curves: dict, plots: dict) -> None:
    ht = ctx.cfg["high_t"]
    attacks = list(dict.fromkeys(ctx.cfg["attacks"] + [ctx.cfg["held_out_attack"]]))
    for T in ht["temperatures"]:
        cfg = ctx.train_config(lr=ht["lr"], temperature=float(T), grad_transform=GradTransform(ht["grad_transform"]))
        model, _ = train_standard(cfg, ctx.train, ctx.val)
        row = f"T={float(T):g}"
        T_cal = calibrate_temperature(LogitSet.from_model(model, ctx.val))
        out[f"high_t:{row}:clean"] = _clean_and_conf(model, ctx.test)[0]
        out[f"high_t:{row}:T_cal"] = T_cal
        out[f"high_t:{row}:logit_range"] = logit_range_stats(model, ctx.test)["mean"]
        for name in attacks:
            rep = evaluate_attack(model, ctx.test, ctx.attack(name), ctx.attack_config.with_temperature(T_cal))
            out[f"high_t:{row}:{name}"] = rep.adversarial_accuracy


def _transfer(ctx: _Context, out: dict, curves: dict, plots: dict) -> None:
    base = ctx.baseline()
    d = ctx.cfg["ddi"]
    ddi_model, _ = train_ddi_at(
        ctx.train_config(lr=d["lr"]), DDiConfig(M=d["M"], K=d["K"]), PgdConfig(**ctx.cfg["pgd"]),
        ctx.train, ctx.val, init=base if d["warm_start"] else None,
    )
    out["transfer:ddi:clean"], out["transfer:ddi:confidence"] = _clean_and_conf(ddi_model, ctx.test)
    T_cal = calibrate_temperature(LogitSet.from_model(ddi_model, ctx.val))
    out["transfer:ddi:T_cal"] = T_cal
    for name in ctx.cfg["transfer_attacks"]:
        attack = ctx.attack(name)
        source = evaluate_attack(base, ctx.test, attack, ctx.attack_config)
        self_rep = evaluate_attack(ddi_model, ctx.test, attack, ctx.attack_config)
        cal_rep = evaluate_attack(ddi_model, ctx.test, attack, ctx.attack_config.with_temperature(T_cal))
        out[f"transfer:baseline_self:{name}"] = source.adversarial_accuracy
        out[f"transfer:ddi_self:{name}"] = self_rep.adversarial_accuracy
        out[f"transfer:ddi_cal:{name}"] = cal_rep.adversarial_accuracy
        out[f"transfer:ddi_transfer:{name}"] = transfer_evaluate(source.results, ddi_model).adversarial_accuracy


def _importance_corr(ctx: _Context, out: dict, curves: dict, plots: dict) -> None:
    base = ctx.baseline()
    for name, method in ctx.cfg["importance_attacks"].items():
        for T in (1.0, ctx.cfg["T_extreme"]):
            res = importance_correlation(base, ctx.test, T, method, ctx.attack_config.precision)
            key = f"importance:{name}_T={float(T):g}"
            out[f"{key}:mean_rho"] = res.mean
            out[f"{key}:std_rho"] = res.std
            out[f"{key}:excluded"] = float(res.excluded)
            out[f"{key}:n"] = float(res.n)


def _logit_range(ctx: _Context, out: dict, curves: dict, plots: dict) -> None:
    lr_cfg = ctx.cfg["logit_range"]
    for T in lr_cfg["temperatures"]:
        cfg = ctx.train_config(lr=lr_cfg["lr"], temperature=float(T), grad_transform=GradTransform("normalize"))
        model, _ = train_standard(cfg, ctx.train, ctx.val)
        stats = logit_range_stats(model, ctx.test, lr_cfg["bin_width"])
        row = f"T={float(T):g}"
        out[f"logit_range:{row}:mean"] = stats["mean"]
        out[f"logit_range:{row}:std"] = stats["std"]
        edges, counts = stats["hist_edges"], stats["hist_counts"]
        plots[f"logit_range_{row}_seed{ctx.seed}"] = [
            {"left": float(edges[i]), "right": float(edges[i + 1]), "count": int(counts[i])}
            for i in range(counts.size)
        ]


_RUNNERS = {
    "ior-demo": _ior_demo,
    "pierce": _pierce,
    "sweep-temp": _sweep_temp,
    "high-t-train": _high_t_train,
    "transfer": _transfer,
    "importance-corr": _importance_corr,
    "logit-range": _logit_range,
}


def run_experiment(spec: ExperimentSpec) -> RunReport:
    """Run the named pipeline once per seed and aggregate the metrics."""
    report = RunReport(spec.name, spec.seeds, spec.config, config_hash(spec.name, spec.config))
    runner = _RUNNERS[spec.name]
    for seed in spec.seeds:
        metrics: dict[str, float] = {}
        try:
            runner(_context(spec.config, seed), metrics, report.curves, report.plots)
        except ValidationError as exc:
            raise type(exc)(f"{spec.name} (seed {seed}): {exc}") from exc
        for key, value in metrics.items():
            report.per_seed.setdefault(key, []).append(float(value))
    if spec.out_dir is not None:
        emit_report(report, spec.out_dir)
    return report


# --- rank correlation -------------------------------------------------------------

def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    sorted_x = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(a, b) -> float:
    """Pearson correlation of average ranks."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise LengthMismatch(f"score lists differ in length ({a.size} vs {b.size})")
    if a.size < 2:
        raise DegenerateInput("need at least two scores")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise DegenerateInput("constant scores have no ranking")
    ra, rb = _average_ranks(a), _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    rho = float(ra @ rb / np.sqrt((ra @ ra) * (rb @ rb)))
    return min(1.0, max(-1.0, rho))


@dataclass(frozen=True)
class CorrelationResult:
    mean: float
    std: float
    n: int
    excluded: int
    rhos: tuple[float, ...]


def importance_correlation(
    model: TextClassifier, dataset: Dataset, T_extreme: float, method: str = "unk_saliency",
    precision: str = "float32",
) -> CorrelationResult:
    """Per-example Spearman correlation of token importance at T=1 and at T_extreme.

    Examples with fewer than two tokens or constant scores are excluded and
    counted; the mean is nan when nothing remains.
    """
    if len(dataset) == 0:
        raise EmptyDataset("importance correlation needs examples")
    rhos, excluded = [], 0
    for ex in dataset:
        if len(tokenize(ex.text)) < 2:
            excluded += 1
            continue
        s1 = token_importance(model, ex, 1.0, method, precision).scores
        s2 = token_importance(model, ex, T_extreme, method, precision).scores
        try:
            rhos.append(spearman(s1, s2))
        except DegenerateInput:
            excluded += 1
    if not rhos:
        return CorrelationResult(float("nan"), float("nan"), len(dataset), excluded, ())
    return CorrelationResult(float(np.mean(rhos)), float(np.std(rhos)), len(dataset), excluded, tuple(rhos))


# --- output -----------------------------------------------------------------------

def _table_rows(report: RunReport) -> dict[str, list[list]]:
    tables: dict[str, list[list]] = {}
    for key in sorted(report.per_seed):
        table, row, column = key.split(":", 2)
        values = report.per_seed[key]
        tables.setdefault(table, []).append(
            [row, column, repr(report.mean(key)), repr(report.std(key)), *map(repr, values)]
        )
    return tables


def emit_report(report: RunReport, out_dir) -> list[Path]:
    """Write report.json, tables/<table>.csv, curves/<name>.csv and plots/<name>.csv.

    Returns the written paths in a stable order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    path = out / "report.json"
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(path)
    header = ["row", "column", "mean", "std", *[f"seed_{s}" for s in report.seeds]]
    for table, rows in _table_rows(report).items():
        (out / "tables").mkdir(exist_ok=True)
        path = out / "tables" / f"{table}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        written.append(path)
    for name in sorted(report.curves):
        (out / "curves").mkdir(exist_ok=True)
        path = out / "curves" / f"{name}.csv"
        report.curves[name].to_csv(path)
        written.append(path)
    for name in sorted(report.plots):
        (out / "plots").mkdir(exist_ok=True)
        path = out / "plots" / f"{name}.csv"
        rows = report.plots[name]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fields = list(rows[0]) if rows else []
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)
        written.append(path)
    return written


def load_report(out_dir) -> dict:
    return json.loads((Path(out_dir) / "report.json").read_text(encoding="utf-8"))
