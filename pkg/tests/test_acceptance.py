"""Acceptance suite: the twelve criteria at their stated tolerances and runtime limits.

Each test prints one ``[PASS]``/``[FAIL]`` line (run with ``-s`` to see them
live); all lines are repeated in an "acceptance criteria" section of the
terminal summary.
Criteria 6-11 use the three default seeds of the experiment harness.
"""

import math
import time

import numpy as np

from conftest import ACCEPTANCE
from iorlab.advtemp import BracketSpec, brent_min
from iorlab.calibrate import LogitSet, calibrate_temperature, ece_mce, nll
from iorlab.harness import EXPERIMENTS, ExperimentSpec, run_experiment
from iorlab.model import backward, cross_entropy_t, forward, init_params
from iorlab.train import simplex_min_norm

# textfooler is only needed as the held-out attack of criterion 9
DESK = {"attacks": ["pwws", "deepwordbug"]}
ATTACKS = ("pwws", "deepwordbug")


def record(number, name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {name} - {detail}"
    ACCEPTANCE[number] = line
    print(line)
    assert ok, line


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


_reports = {}


def report(name):
    """3-seed harness run, timed and cached for the session."""
    if name not in _reports:
        with Timer() as t:
            rep = run_experiment(ExperimentSpec(name, DESK))
        _reports[name] = (rep, t.seconds)
    return _reports[name]


# --- property criteria ---------------------------------------------------------------

def test_c01_gradient_correctness():
    rng = np.random.default_rng(2024)
    h = 1e-6
    worst = 0.0
    with Timer() as t:
        for _ in range(100):
            V, d, hid, C = (int(x) for x in rng.integers([3, 2, 2, 2], [9, 5, 6, 5]))
            params = init_params(V, d, hid, C).with_flat(rng.normal(0, 0.5, V * d + d * hid + hid + hid * C + C))
            ids = rng.integers(0, V, size=int(rng.integers(1, 6)))
            label = int(rng.integers(C))
            T = float(rng.choice([0.5, 1.0, 2.0]))
            analytic = backward(forward(params, ids), label, T).flat()
            flat = params.flat()
            numeric = np.empty_like(flat)
            for k in range(flat.size):
                up, dn = flat.copy(), flat.copy()
                up[k] += h
                dn[k] -= h
                numeric[k] = (
                    cross_entropy_t(forward(params.with_flat(up), ids).logits, label, T)
                    - cross_entropy_t(forward(params.with_flat(dn), ids).logits, label, T)
                ) / (2 * h)
            # relative error with an absolute floor for entries that are exactly zero (unused embeddings)
            rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
            worst = max(worst, float(rel.max()))
    record(1, "gradient correctness", worst < 1e-4 and t.seconds < 10,
           f"max rel err {worst:.2e} (< 1e-4), {t.seconds:.1f}s (< 10s)")


def _grid_min(G, step=0.01):
    ticks = np.round(np.arange(0, 1 + step / 2, step), 10)
    if G.shape[1] == 2:
        A = np.stack([ticks, 1 - ticks], axis=1)
    else:
        a, b = np.meshgrid(ticks, ticks, indexing="ij")
        keep = a + b <= 1 + 1e-12
        A = np.stack([a[keep], b[keep], np.maximum(1 - a[keep] - b[keep], 0.0)], axis=1)
    return float(np.min(np.sum((A @ G.T) ** 2, axis=1)))


def test_c02_simplex_oracle():
    rng = np.random.default_rng(7)
    worst_gap, worst_feas = -np.inf, 0.0
    with Timer() as t:
        for i in range(200):
            M = 2 + i % 2
            G = rng.normal(size=(int(rng.integers(2, 12)), M))
            if i % 5 == 0:
                # nearly collinear columns, as produced by PGD restarts
                G[:, 1:] = G[:, :1] * rng.uniform(0.5, 2, size=M - 1) + 1e-3 * rng.normal(size=(G.shape[0], M - 1))
            alpha = simplex_min_norm(G)
            worst_gap = max(worst_gap, float(np.sum((G @ alpha) ** 2)) - _grid_min(G))
            worst_feas = max(worst_feas, abs(alpha.sum() - 1.0), float(max(0.0, -alpha.min())))
    record(2, "simplex QP vs grid oracle", worst_gap <= 1e-6 and worst_feas <= 1e-9 and t.seconds < 30,
           f"max(obj - grid) {worst_gap:.2e} (<= 1e-6), feasibility {worst_feas:.1e} (<= 1e-9), {t.seconds:.1f}s (< 30s)")


def test_c03_temperature_recovery():
    rng = np.random.default_rng(11)
    details, ok = [], True
    with Timer() as t:
        z = rng.normal(0, 3.0, size=(20000, 3))
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        labels = (rng.random((20000, 1)) > np.cumsum(p, axis=1)).sum(axis=1)
        grid = np.logspace(-3, 3, 10_000)
        for s in (0.05, 0.2, 5.0, 20.0):
            ls = LogitSet(z * s, labels)
            T = calibrate_temperature(ls)
            # grid oracle evaluated near its optimum (coarse pass then the full log grid around it)
            coarse = grid[::100]
            i = int(np.argmin([nll(ls, g) for g in coarse])) * 100
            window = grid[max(i - 150, 0): i + 150]
            T_grid = window[int(np.argmin([nll(ls, g) for g in window]))]
            good = abs(T - s) <= 0.05 * s and abs(T - T_grid) <= 0.05 * T_grid and nll(ls, T) <= nll(ls, 1.0)
            ok &= good
            details.append(f"s={s:g}: T_a={T:.4g} grid={T_grid:.4g}")
    record(3, "temperature recovery", ok and t.seconds < 10, "; ".join(details) + f"; {t.seconds:.1f}s (< 10s)")


def test_c04_brent():
    def step_fn(x):
        return math.floor(abs(x - 3.7) * 4) / 4

    with Timer() as t:
        T_star, _ = brent_min(lambda x: (x - 3.0) ** 2, BracketSpec(0.0, 1.0, 10.0))
        _, pc_val = brent_min(step_fn, BracketSpec(0.0, 1.0, 10.0))
    grid_val = min(step_fn(x) for x in np.linspace(0.0, 10.0, 100_001))
    ok = abs(T_star - 3.0) <= 1e-6 and pc_val == grid_val and t.seconds < 1
    record(4, "Brent correctness", ok,
           f"|T*-3| = {abs(T_star - 3):.1e} (<= 1e-6), piecewise min {pc_val} vs grid {grid_val}, {t.seconds:.3f}s (< 1s)")


def test_c05_ece():
    rng = np.random.default_rng(5)
    with Timer() as t:
        conf = rng.uniform(1 / 3, 1.0, size=10_000)
        correct = rng.random(10_000) < conf
        ece, _ = ece_mce(conf, correct, 10)
        violations = 0
        for _ in range(1000):
            n = int(rng.integers(1, 200))
            e, m = ece_mce(rng.random(n), rng.random(n) < 0.5, int(rng.integers(1, 20)))
            violations += e > m + 1e-12
    record(5, "ECE sanity", ece <= 0.02 and violations == 0 and t.seconds < 5,
           f"calibrated ECE {ece:.4f} (<= 0.02), ECE > MCE in {violations}/1000, {t.seconds:.2f}s (< 5s)")


# --- desk-scale reproductions --------------------------------------------------------

def test_c06_ior_reproduction():
    rep, secs = report("ior-demo")
    gaps = {a: rep.mean(f"ior:up_conf:{a}") - rep.mean(f"ior:baseline:{a}") for a in ATTACKS}
    up = rep.mean("ior:up_conf:confidence")
    down = rep.mean("ior:down_conf:confidence")
    ok = all(g >= 0.10 for g in gaps.values()) and up > 0.99 and down < 0.5 + 0.01 and secs < 300
    detail = ", ".join(
        f"{a} {rep.mean(f'ior:baseline:{a}'):.3f}->{rep.mean(f'ior:up_conf:{a}'):.3f} (+{100 * g:.1f}pt)"
        for a, g in gaps.items()
    )
    record(6, "IOR reproduction", ok,
           f"{detail} (>= +10pt); conf T=0.01 {up:.4f} (> 0.99), T=100 {down:.4f} (< 0.51); {secs:.0f}s (< 300s)")


def test_c07_piercing():
    rep, secs = report("pierce")
    cal_gap = max(abs(rep.mean(f"pierce:up_conf_cal:{a}") - rep.mean(f"pierce:baseline_plain:{a}")) for a in ATTACKS)
    opt_gap = max(abs(rep.mean(f"pierce:down_conf_opt:{a}") - rep.mean(f"pierce:baseline_plain:{a}")) for a in ATTACKS)
    ok = cal_gap <= 0.03 and opt_gap <= 0.03 and secs < 600
    record(7, "piercing", ok,
           f"up_conf cal gap {100 * cal_gap:.2f}pt (<= 3), down_conf opt gap {100 * opt_gap:.2f}pt (<= 3), "
           f"T_cal(up)={rep.mean('pierce:up_conf:T_cal'):.1f}, T_opt(down)={rep.mean('pierce:down_conf:T_opt'):g}; "
           f"{secs:.0f}s (< 600s)")


def test_c08_implicit_overconfidence():
    ior, s1 = report("ior-demo")
    pierce, s2 = report("pierce")
    conf = {m: ior.mean(f"ior:{m}:confidence") for m in ("baseline", "baseline_clip", "baseline_normalize")}
    gap = max(
        abs(pierce.mean(f"pierce:baseline_normalize_cal:{a}") - pierce.mean(f"pierce:baseline_plain:{a}"))
        for a in ATTACKS
    )
    ok = (
        conf["baseline_normalize"] >= 0.95 and conf["baseline"] <= 0.93 and conf["baseline_clip"] <= 0.93
        and gap <= 0.03 and s1 + s2 < 600
    )
    record(8, "implicit overconfidence", ok,
           f"conf normalize {conf['baseline_normalize']:.4f} (>= 0.95), none {conf['baseline']:.4f}, "
           f"clip {conf['baseline_clip']:.4f} (<= 0.93); post-cal gap {100 * gap:.2f}pt (<= 3); {s1 + s2:.0f}s (< 600s)")


def test_c09_high_temperature_training():
    rep, secs = report("high-t-train")
    held = rep.config["held_out_attack"]
    base_q = rep.mean(f"high_t:T=1:{held}")
    base_clean = rep.mean("high_t:T=1:clean")
    base_range = rep.mean("high_t:T=1:logit_range")
    winners = []
    for T in rep.config["high_t"]["temperatures"]:
        if T <= 1:
            continue
        row = f"T={float(T):g}"
        gain = rep.mean(f"high_t:{row}:{held}") - base_q
        drop = base_clean - rep.mean(f"high_t:{row}:clean")
        wider = rep.mean(f"high_t:{row}:logit_range") > base_range
        if gain >= 0.03 and drop <= 0.02 and wider:
            winners.append(f"{row} +{100 * gain:.1f}pt, clean drop {100 * drop:.1f}pt, "
                           f"range {base_range:.1f}->{rep.mean(f'high_t:{row}:logit_range'):.1f}")
    record(9, "high-temperature training", bool(winners) and secs < 1200,
           f"held-out {held}, T=1 post-cal {base_q:.3f}; " + ("; ".join(winners) or "no T qualifies")
           + f"; {secs:.0f}s (< 1200s)")


def test_c10_importance_disruption():
    rep, _ = report("importance-corr")
    parts, ok = [], True
    for name in rep.config["importance_attacks"]:
        rho_ext = rep.mean(f"importance:{name}_T=0.01:mean_rho")
        rho_one = rep.per_seed[f"importance:{name}_T=1:mean_rho"]
        excluded = rep.mean(f"importance:{name}_T=0.01:excluded")
        ok &= rho_ext < 0.9 and all(r == 1.0 for r in rho_one)
        parts.append(f"{name}: rho(T=0.01) {rho_ext:.3f} (< 0.9, {excluded:.0f} degenerate excluded), "
                     f"rho(T=1) {rho_one}")
    record(10, "importance-rank disruption", ok, "; ".join(parts))


def test_c11_transferability():
    rep, _ = report("transfer")
    parts, ok = [], True
    for a in rep.config["transfer_attacks"]:
        for i, seed in enumerate(rep.seeds):
            cal = rep.per_seed[f"transfer:ddi_cal:{a}"][i]
            tr = rep.per_seed[f"transfer:ddi_transfer:{a}"][i]
            own = rep.per_seed[f"transfer:ddi_self:{a}"][i]
            ok &= cal < tr < own
        parts.append(f"{a}: cal {rep.mean(f'transfer:ddi_cal:{a}'):.3f} < transfer "
                     f"{rep.mean(f'transfer:ddi_transfer:{a}'):.3f} < self {rep.mean(f'transfer:ddi_self:{a}'):.3f}")
    record(11, "transferability", ok, "; ".join(parts) + " (strict, every seed)")


SMALL = {
    "corpus_size": 300,
    "test_size": 30,
    "attacks": ["pwws", "deepwordbug"],
    "train": {"epochs": 5},
    "sweep_temperatures": [0.01, 1.0, 100.0],
    "high_t": {"temperatures": [1.0, 5.0]},
    "ddi": {"M": 2, "K": 2},
}


def test_c12_determinism(tmp_path):
    mismatched, files = [], 0
    for name in EXPERIMENTS:
        for run in ("a", "b"):
            run_experiment(ExperimentSpec(name, SMALL, seeds=(0, 1), out_dir=tmp_path / run / name))
        for path in sorted((tmp_path / "a" / name).rglob("*.csv")):
            files += 1
            twin = tmp_path / "b" / path.relative_to(tmp_path / "a")
            if not twin.exists() or twin.read_bytes() != path.read_bytes():
                mismatched.append(str(path.relative_to(tmp_path / "a")))
    record(12, "determinism", not mismatched and files > 0,
           f"{files} CSV files across {len(EXPERIMENTS)} experiments, {len(mismatched)} differ")
