"""Command line entry point: ``iorlab <command> [options]``.

Global flags may also come from the environment: ``IORLAB_CONFIG``,
``IORLAB_SEED`` and ``IORLAB_OUT``.  Exit status is 0 on success, 2 on
invalid input and 1 on any other failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import ValidationError

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


def _load_json(path) -> dict:
    if not path:
        return {}
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return obj


def _seeds(text) -> tuple[int, ...] | None:
    if text is None or text == "":
        return None
    try:
        return tuple(int(s) for s in str(text).split(","))
    except ValueError:
        raise ValidationError(f"seed must be an integer or comma-separated integers, got {text!r}") from None


def _out(args) -> Path:
    out = Path(args.out or "iorlab_out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(args, split_tag="train"):
    from .textcore import load_dataset, make_toy_corpus

    if args.data:
        return load_dataset(args.data, num_classes=getattr(args, "num_classes", None), split_tag=split_tag)
    return make_toy_corpus(seed=_first_seed(args))


def _first_seed(args) -> int:
    seeds = _seeds(args.seed)
    return seeds[0] if seeds else 0


def _model(args):
    from .model import TextClassifier, load_checkpoint

    params, vocab = load_checkpoint(args.checkpoint)
    if vocab is None:
        raise ValidationError(f"{args.checkpoint} carries no vocabulary")
    return TextClassifier(params, vocab)


def _attack(name, args):
    from .attacks import make_attack
    from .textcore import bundled_lexicon, load_lexicon

    lexicon = load_lexicon(args.lexicon) if getattr(args, "lexicon", None) else bundled_lexicon()
    return make_attack(name, lexicon)


def _attack_config(args, T=1.0):
    from .attacks import AttackConfig

    return AttackConfig(**_load_json(args.config).get("attack_config", {})).with_temperature(T)


def cmd_train(args) -> int:
    from .model import GradTransform, save_checkpoint
    from .textcore import split
    from .train import DDiConfig, PgdConfig, TrainConfig, train_ddi_at, train_pgd_at, train_standard

    cfg = _load_json(args.config)
    data = _dataset(args)
    train, val, _ = split(data, cfg.get("ratios", (0.8, 0.1, 0.1)), seed=_first_seed(args))
    tc = TrainConfig(
        lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=_first_seed(args),
        temperature=args.temperature, grad_transform=GradTransform(args.grad_transform),
    )
    if args.method == "standard":
        model, history = train_standard(tc, train, val)
    elif args.method == "pgd":
        model, history = train_pgd_at(tc, PgdConfig(**cfg.get("pgd", {})), train, val)
    else:
        ddi = cfg.get("ddi", {})
        model, history = train_ddi_at(
            tc, DDiConfig(M=ddi.get("M", 3), K=ddi.get("K", 3)), PgdConfig(**cfg.get("pgd", {})), train, val
        )
    out = _out(args)
    save_checkpoint(out / "checkpoint.json", model.params, model.vocab)
    history.to_csv(out / "history.csv")
    print(json.dumps(history.rows[-1]))
    return EXIT_OK


def cmd_attack(args) -> int:
    from .attacks import evaluate_attack, write_results

    model = _model(args)
    data = _dataset(args, "test")
    report = evaluate_attack(model, data, _attack(args.attack, args), _attack_config(args, args.temperature))
    out = _out(args)
    write_results(report.results, out / f"attack_{args.attack}.jsonl")
    print(json.dumps(report.summary()))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from .calibrate import LogitSet, calibration_report, platt_scale, nll

    if args.logits:
        logit_set = LogitSet.load(args.logits)
    else:
        if not args.checkpoint:
            raise ValidationError("calibrate needs --logits or --checkpoint")
        logit_set = LogitSet.from_model(_model(args), _dataset(args, "val"))
    report = calibration_report(logit_set, num_bins=args.bins)
    result = report.to_dict()
    if args.platt:
        params = platt_scale(logit_set)
        result["platt"] = {
            "scale": params.scale.tolist(), "bias": params.bias.tolist(),
            "nll_after": nll(params.transform(logit_set)),
        }
    (_out(args) / "calibration.json").write_text(json.dumps(result, indent=2, sort_keys=True), encoding="utf-8")
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_opt_temp(args) -> int:
    from .advtemp import optimize_adv_temperature

    res = optimize_adv_temperature(
        _model(args), _dataset(args, "val"), _attack(args.attack, args), _attack_config(args),
        max_iters=args.max_iters, subsample=args.subsample, seed=_first_seed(args), name=args.attack,
    )
    res.curve.to_csv(_out(args) / "opt_curve.csv")
    print(json.dumps({"T_a": res.temperature, "Q": res.q, "Q_at_1": res.q_at_one, "attack_runs": res.attack_runs}))
    return EXIT_OK


def cmd_sweep_temp(args) -> int:
    from .advtemp import sweep_temperatures

    temps = [float(t) for t in args.temperatures.split(",")]
    curve = sweep_temperatures(_model(args), _dataset(args, "test"), _attack(args.attack, args), temps,
                               _attack_config(args), args.attack)
    curve.to_csv(_out(args) / f"qcurve_{args.attack}.csv")
    for T, q in curve.points:
        print(f"{T:g}\t{q:.4f}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .harness import DEFAULT_SEEDS, ExperimentSpec, run_experiment

    spec = ExperimentSpec(
        args.name, _load_json(args.config), _seeds(args.seed) or DEFAULT_SEEDS, Path(args.out or f"results/{args.name}")
    )
    report = run_experiment(spec)
    _print_metrics(report.to_dict())
    return EXIT_OK


def _print_metrics(obj: dict) -> None:
    prov = obj["provenance"]
    print(f"{obj['experiment']}  config={prov['config_hash']}  seeds={prov['seeds']}")
    for key, m in obj.get("metrics", {}).items():
        print(f"  {key:<48} {m['mean']:.4f} ± {m['std']:.4f}")


def cmd_report(args) -> int:
    from .harness import load_report

    path = Path(args.dir)
    if not (path / "report.json").exists():
        raise ValidationError(f"no report.json under {path}")
    _print_metrics(load_report(path))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    env = os.environ

    def global_flags(parser, top):
        # on subcommands the flags are suppressed unless given, so they never mask the top-level value
        def default(name):
            return env.get(name) if top else argparse.SUPPRESS

        parser.add_argument("--config", default=default("IORLAB_CONFIG"), help="JSON config file")
        parser.add_argument("--seed", default=default("IORLAB_SEED"), help="seed or comma-separated seeds")
        parser.add_argument("--out", default=default("IORLAB_OUT"), help="output directory")

    common = argparse.ArgumentParser(add_help=False)
    global_flags(common, top=False)
    parser = argparse.ArgumentParser(prog="iorlab", description="Illusion-of-robustness lab.")
    global_flags(parser, top=True)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, parents=[common])
        p.set_defaults(func=func)
        return p

    def data_opts(p):
        p.add_argument("--data", help="JSONL or CSV dataset (default: bundled toy corpus)")
        p.add_argument("--num-classes", type=int, default=None)

    p = add("train", cmd_train, "train a classifier")
    data_opts(p)
    p.add_argument("--method", choices=["standard", "pgd", "ddi"], default="standard")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--grad-transform", choices=["none", "clip", "normalize"], default="none")
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=8)

    for name, func, help_ in (
        ("attack", cmd_attack, "attack a checkpoint and report adversarial accuracy"),
        ("opt-temp", cmd_opt_temp, "search the attack temperature minimising adversarial accuracy"),
        ("sweep-temp", cmd_sweep_temp, "adversarial accuracy over a temperature grid"),
    ):
        p = add(name, func, help_)
        data_opts(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--attack", default="deepwordbug")
        p.add_argument("--lexicon")
        if name == "attack":
            p.add_argument("--temperature", type=float, default=1.0)
        if name == "opt-temp":
            p.add_argument("--max-iters", type=int, default=10)
            p.add_argument("--subsample", type=int, default=None)
        if name == "sweep-temp":
            p.add_argument("--temperatures", default="0.01,0.1,1,10,100")

    p = add("calibrate", cmd_calibrate, "fit a calibration temperature")
    data_opts(p)
    p.add_argument("--logits", help="JSONL logit set (id, logits, label)")
    p.add_argument("--checkpoint")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--platt", action="store_true", help="also fit vector Platt scaling")

    p = add("experiment", cmd_experiment, "run a named experiment")
    p.add_argument("name")

    p = add("report", cmd_report, "print a saved experiment report")
    p.add_argument("dir")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"iorlab: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, KeyError) as exc:
        print(f"iorlab: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"iorlab: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
