"""Executable acceptance suite.

Each criterion returns a :class:`Result`; :func:`run_acceptance` prints a
matrix keyed by module and reports overall success.
"""

from __future__ import annotations

import contextlib
import dataclasses
import json
import sys
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from m4fuse import bridge as bridge_mod
from m4fuse import mixer as mixer_mod
from m4fuse import oracles
from m4fuse.bench import ATTENTION_MIN_RATIO, SCAN_RATIO_RANGE, bench_complexity
from m4fuse.gradcheck import REL_TOL, audit_model
from m4fuse.metrics import dice, hd95
from m4fuse.network import NetworkConfig, build, param_report

# reference figures for the structural calibration
B_TOTAL_M1 = 1.11e6
B_INCREMENT_M2 = 0.12e6
SPLIT_M2 = {"encoder": 47.9, "decoder": 30.0, "else": 21.1}
L_OVER_B = 2.45 / 1.11


@dataclass
class Result:
    criterion: int
    title: str
    modules: tuple[str, ...]
    passed: bool
    checks: int
    failures: int
    seconds: float = 0.0
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.criterion}. {self.title}: {self.checks - self.failures}/{self.checks} "
                f"checks, {self.seconds:.1f}s")


def _timed(limit: float | None):
    def wrap(fn: Callable[..., Result]) -> Callable[..., Result]:
        def run(*args, **kwargs) -> Result:
            t0 = time.perf_counter()
            res = fn(*args, **kwargs)
            res.seconds = time.perf_counter() - t0
            if limit is not None:
                res.detail["time_limit_s"] = limit
                if res.seconds >= limit:
                    res.passed = False
                    res.detail["over_time"] = True
            return res

        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run

    return wrap


@_timed(10.0)
def oracle_equivalence(seed: int = 0, instances: int = 100) -> Result:
    """Scan against the dense recursion; discretization against quadrature."""
    rng = np.random.default_rng(seed)
    scan_err = disc_err = 0.0
    failures = 0
    for _ in range(instances):
        length, d, w = int(rng.integers(1, 65)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
        a = -rng.uniform(0.05, 4.0, d)
        delta = float(rng.uniform(1e-3, 1.0))
        b_in = rng.normal(size=(d, w))
        c_out = rng.normal(size=(w, d))
        x = rng.normal(size=(int(rng.integers(1, 3)), length, w))

        abar, bbar = mixer_mod.discretize(torch.from_numpy(a), delta, torch.from_numpy(b_in))
        qa, qb = oracles.discretize_quadrature(a, delta, b_in)
        e_disc = max(np.abs(abar.numpy() - qa).max(), np.abs(bbar.numpy() - qb).max())

        y = mixer_mod.ssm_scan(torch.from_numpy(x), abar, bbar, torch.from_numpy(c_out)).numpy()
        e_scan = np.abs(y - oracles.scan_dense(x, abar.numpy(), bbar.numpy(), c_out)).max()

        disc_err, scan_err = max(disc_err, e_disc), max(scan_err, e_scan)
        failures += int(e_disc > 1e-8) + int(e_scan > 1e-6)
    return Result(1, "oracle equivalence", ("pom-mixer",), failures == 0, 2 * instances, failures,
                  detail={"max_scan_abs_err": float(scan_err), "max_discretize_abs_err": float(disc_err)})


# the bounds are exact inequalities; this slack only absorbs float64 rounding
_REL_SLACK = 1e-12
_ABS_SLACK = 1e-9


def _within(lhs, rhs):
    return lhs <= rhs * (1 + _REL_SLACK) + _ABS_SLACK


@_timed(30.0)
def norm_bounds(seed: int = 0, mixer_trials: int = 200, bridge_trials: int = 1000) -> Result:
    """Sup-norm gain bound of each mixer group and the pointwise bridge bound."""
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    mixer_bad = 0
    worst = 0.0
    for _ in range(mixer_trials):
        length, d, w = int(rng.integers(1, 65)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        a = -rng.uniform(0.01, 4.0, d)
        delta = float(rng.uniform(1e-3, 1.0))
        s = float(rng.uniform(0.0, 2.0))
        abar, bbar = mixer_mod.discretize(torch.from_numpy(a), delta, torch.from_numpy(rng.normal(size=(d, w))))
        c_out = torch.from_numpy(rng.normal(size=(w, d)))
        x = torch.from_numpy(rng.normal(size=(1, length, w)) * rng.uniform(0.1, 10.0))
        z = mixer_mod.ssm_scan(x, abar, bbar, c_out) + s * x
        kappa = mixer_mod.kappa_bound(abar.numpy(), bbar.numpy(), c_out.numpy(), length)
        lhs = float(z.norm(dim=-1).max())
        rhs = (kappa + s) * float(x.norm(dim=-1).max())
        worst = max(worst, lhs / rhs)
        mixer_bad += int(not _within(lhs, rhs))

    bridge_bad = 0
    for _ in range(bridge_trials):
        channels = [int(c) for c in rng.integers(1, 5, size=int(rng.integers(1, 4)))]
        br = bridge_mod.CSBridge(channels, "full", gen).double()
        with torch.no_grad():
            br.alpha_raw.fill_(float(rng.normal()))
            br.beta_raw.fill_(float(rng.normal()))
            br.spatial_kernel.mul_(float(rng.uniform(1.0, 20.0)))
        scales = [torch.randn(1, c, n, n, n, generator=gen, dtype=torch.float64) * float(rng.uniform(0.1, 10))
                  for c, n in zip(channels, (4, 2, 1))]
        with torch.no_grad():
            out = br(scales)
            bound = 1 + br.alpha + br.beta
        ok = all(_within(float((o.abs() - bound * t.abs()).max()), 0.0) for o, t in zip(out, scales))
        bridge_bad += int(not ok)
    failures = mixer_bad + bridge_bad
    return Result(2, "norm bounds", ("pom-mixer", "cs-bridge"), failures == 0, mixer_trials + bridge_trials,
                  failures, detail={"mixer_violations": mixer_bad, "bridge_violations": bridge_bad,
                                    "mixer_tightest_ratio": worst})


@_timed(120.0)
def gradient_audit(seed: int = 0) -> Result:
    """Finite-difference audit of every trainable tensor of a tiny model."""
    records = audit_model(seed=seed)
    bad = [r for r in records if r["rel_error"] >= REL_TOL]
    return Result(3, "gradient audit", ("autodiff-train", "network-assembly"), not bad, len(records), len(bad),
                  detail={"max_rel_error": max(r["rel_error"] for r in records),
                          "reduced_step": sum(r["step"] < 1e-3 for r in records),
                          "failed": [r["name"] for r in bad]})


@_timed(180.0)
def complexity_scaling(seed: int = 0) -> Result:
    report = bench_complexity(seed=seed)
    lo, hi = SCAN_RATIO_RANGE
    checks = {f"scan@{k}": lo <= v <= hi for k, v in report["scan"]["ratios"].items() if k >= 4096}
    checks.update({f"attention@{k}": v >= ATTENTION_MIN_RATIO
                   for k, v in report["attention"]["ratios"].items() if k >= 1024})
    failures = sum(not ok for ok in checks.values())
    return Result(4, "complexity scaling", ("harness-cli", "pom-mixer"), failures == 0, len(checks), failures,
                  detail={"scan_ratios": report["scan"]["ratios"],
                          "attention_ratios": report["attention"]["ratios"]})


def _total(**kw) -> int:
    return param_report(build(NetworkConfig(**kw)))["total"]


def _table(m: int) -> dict:
    return {f"site_{i}": i for i in range(1, m + 1)} if m > 1 else {}


@_timed(None)
def parameter_accounting() -> Result:
    totals = {m: _total(num_experts=m, id_table=_table(m)) for m in range(0, 5)}
    step = totals[1] - totals[0]
    linear = all(totals[m] == totals[0] + m * step for m in totals)
    b1, b2 = totals[1], totals[2]
    report = param_report(build(NetworkConfig(num_experts=2, id_table=_table(2))))
    split = {k: report[k]["percent"] for k in SPLIT_M2}
    ratio = _total(variant="L") / b1
    checks = {
        "linear_in_M": linear,
        "B_total": abs(b1 - B_TOTAL_M1) <= 0.15 * B_TOTAL_M1,
        "M2_increment": abs((b2 - b1) - B_INCREMENT_M2) <= 0.20 * B_INCREMENT_M2,
        **{f"split_{k}": abs(split[k] - SPLIT_M2[k]) <= 8.0 for k in SPLIT_M2},
        "L_over_B": abs(ratio - L_OVER_B) <= 0.20 * L_OVER_B,
    }
    failures = sum(not ok for ok in checks.values())
    return Result(5, "parameter accounting", ("network-assembly", "peu-routing"), failures == 0, len(checks),
                  failures, detail={"totals_by_M": totals, "split_M2": split, "L_over_B": ratio,
                                    "failed": [k for k, ok in checks.items() if not ok]})


@_timed(None)
def forward_contracts(seed: int = 0) -> Result:
    cfg = NetworkConfig(seed=seed)
    model = build(cfg)
    gen = torch.Generator().manual_seed(seed)
    checks = {}
    for shape in ((1, 4, 32, 32, 32), (1, 4, 32, 64, 64)):
        x = torch.randn(shape, generator=gen)
        model.reset_counters()
        with torch.no_grad():
            out = model(x)
        key = "x".join(map(str, shape[2:]))
        checks[f"shape_{key}"] = tuple(out.shape) == (shape[0], cfg.num_classes) + shape[2:]
        checks[f"bridge_once_{key}"] = model.bridge.calls == 1
        checks[f"mixer_thrice_{key}"] = sum(m.calls for m in model.mixers) == 3
    x = torch.randn(1, 4, 32, 32, 32, generator=gen)
    with torch.no_grad():
        first = build(NetworkConfig(seed=seed))(x)
        second = build(NetworkConfig(seed=seed))(x)
    checks["bitwise_deterministic"] = torch.equal(first, second)
    failures = sum(not ok for ok in checks.values())
    return Result(6, "forward contracts", ("network-assembly", "tensor-ops"), failures == 0, len(checks), failures,
                  detail={"failed": [k for k, ok in checks.items() if not ok]})


@_timed(None)
def metric_oracles(seed: int = 0, trials: int = 60) -> Result:
    rng = np.random.default_rng(seed)
    failures = checks = 0
    worst = 0.0
    for _ in range(trials):
        shape = tuple(int(s) for s in rng.integers(1, 13, size=3))
        a = rng.random(shape) < rng.uniform(0.05, 0.6)
        b = rng.random(shape) < rng.uniform(0.05, 0.6)
        err = abs(dice(a, b) - oracles.dice_bruteforce(a, b))
        checks += 1
        if a.any() and b.any():
            err = max(err, abs(hd95(a, b) - oracles.hd95_bruteforce(a, b)))
            checks += 1
        worst = max(worst, err)
        failures += int(err > 1e-6)

    a = np.zeros((4, 4, 4), bool)
    b = np.zeros((4, 4, 4), bool)
    a[0, 0, 0:2] = True
    b[0, 0, 1:3] = True
    p = np.zeros((8, 8, 8), bool)
    q = np.zeros((8, 8, 8), bool)
    p[2, 2, 2] = True
    q[2, 2, 5] = True
    hand = {"dice_half": dice(a, b) == 0.5, "hd95_three": hd95(p, q) == 3.0}
    checks += len(hand)
    failures += sum(not ok for ok in hand.values())
    return Result(7, "metric oracles", ("metrics",), failures == 0, checks, failures,
                  detail={"max_abs_err": worst, "hand_cases": hand})


@_timed(1800.0)
def toy_convergence(epochs: int = 40, seed: int = 0) -> Result:
    """Full bridge must reach 0.90 mean Dice; the bridge-off run must end strictly lower."""
    from m4fuse.synthetic import generate
    from m4fuse.train import ToyConfig, toy_network, train_toy

    cfg = ToyConfig(seed=seed)
    cfg.network.seed = cfg.data.seed = seed
    data = generate(cfg.data)
    _, full = train_toy(cfg, data, epochs)
    off_cfg = dataclasses.replace(cfg, network=toy_network(bridge_mode="off", seed=seed))
    _, off = train_toy(off_cfg, data, epochs)
    best_full = max(h["val_dice"] for h in full)
    checks = {
        "reaches_0.90": best_full >= 0.90,
        "bridge_off_lower": off[-1]["val_dice"] < full[-1]["val_dice"],
    }
    failures = sum(not ok for ok in checks.values())
    return Result(8, "toy convergence", ("autodiff-train", "cs-bridge", "peu-routing"), failures == 0,
                  len(checks), failures,
                  detail={"full_final": full[-1]["val_dice"], "full_best": best_full, "full_epochs": len(full),
                          "off_final": off[-1]["val_dice"], "off_best": max(h["val_dice"] for h in off),
                          "off_epochs": len(off), "failed": [k for k, ok in checks.items() if not ok]})


_original_discretize = mixer_mod.discretize


def _wrong_discretize(a, delta, b_in):
    _, bbar = _original_discretize(a, delta, b_in)
    return 1.0 + a * torch.as_tensor(delta, dtype=a.dtype), bbar  # forward-Euler state matrix


@contextlib.contextmanager
def _patched(module, name, replacement):
    original = getattr(module, name)
    setattr(module, name, replacement)
    try:
        yield
    finally:
        setattr(module, name, original)


@_timed(None)
def mutation_sanity(seed: int = 0) -> Result:
    """Corrupt the state-matrix formula and the gate squashing; some suite must notice."""
    with _patched(mixer_mod, "discretize", _wrong_discretize):
        disc = oracle_equivalence(seed)
    with _patched(bridge_mod, "gate", lambda x: 2.0 * torch.sigmoid(x)):
        gate = norm_bounds(seed, mixer_trials=0)
    checks = {"wrong_abar_caught": not disc.passed, "wrong_gate_caught": not gate.passed}
    failures = sum(not ok for ok in checks.values())
    return Result(9, "mutation sanity", ("harness-cli",), failures == 0, len(checks), failures,
                  detail={"abar_failures": disc.failures, "gate_failures": gate.failures})


CRITERIA = {
    1: oracle_equivalence,
    2: norm_bounds,
    3: gradient_audit,
    4: complexity_scaling,
    5: parameter_accounting,
    6: forward_contracts,
    7: metric_oracles,
    8: toy_convergence,
    9: mutation_sanity,
}


def print_matrix(results: list[Result], stream=None) -> None:
    stream = stream or sys.stderr
    modules = sorted({m for r in results for m in r.modules})
    width = max(len(m) for m in modules)
    print("module".ljust(width) + "  " + " ".join(f"{r.criterion:>4}" for r in results), file=stream)
    for m in modules:
        cells = []
        for r in results:
            cells.append(("pass" if r.passed else "FAIL") if m in r.modules else "   .")
        print(m.ljust(width) + "  " + " ".join(f"{c:>4}" for c in cells), file=stream)
    for r in results:
        print(r.line(), file=stream)


def run_acceptance(only: list[int] | None = None, stream=None) -> tuple[bool, list[Result]]:
    """Run the selected criteria, emit one JSON line each, print the matrix to stderr."""
    stream = stream or sys.stdout
    results = []
    for k in only or sorted(CRITERIA):
        res = CRITERIA[k]()
        results.append(res)
        print(json.dumps({"criterion": res.criterion, "title": res.title, "pass": res.passed,
                          "checks": res.checks, "failures": res.failures, "seconds": round(res.seconds, 3),
                          "detail": res.detail}, default=str), file=stream, flush=True)
    print_matrix(results)
    return all(r.passed for r in results), results
