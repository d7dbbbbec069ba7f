"""Desk-scale acceptance checks.

Each ``criterion_*`` function runs one check end to end and returns a
:class:`CriterionResult`; :func:`run_all` runs them in order. Seeds,
configurations and calibrated constants are pinned below so every outcome is
reproducible.
"""
from __future__ import annotations

import itertools
import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .attacks import AttackSpec
from .config import ExperimentConfig
from .defenses import DefenseSpec, coordinate_median, geometric_medoid, krum, theoretical_threshold
from .report import write_trace
from .simulator import run, run_coupled_escape, theorem_params

SEEDS = range(20)
CALIBRATION_SEEDS = range(1000, 1010)
BYZ = (0, 1, 2, 3)

# Saddle start for the theoretical-threshold runs: the escape coordinate starts at 0.
SIGNFLIP_X0 = (0.0,) + (4.0,) * 9
RESCALE_X0 = (0.0,) + (2.0,) * 9
RESCALE_SWEEP = (0.7, 0.8, 0.9, 1.0, 1.2, 1.5, 2.0)

# Empirical-threshold windows for the variance attack (one epoch = 400 iterations).
VARIANCE_EPOCH = 400
VARIANCE_T0, VARIANCE_T1 = VARIANCE_EPOCH, 6 * VARIANCE_EPOCH

TRANSIENT_T0, TRANSIENT_T1, TRANSIENT_T = 100, 300, 1500

# Step-size and window constants turning the theorem's rates into a desk-scale run,
# and the escape radius calibrated against the delta = 0 control.
ESCAPE_CONSTANTS = dict(c_eta=140.0, c1=5.0)
ESCAPE_R = 3.8

# max_t ||sigma_0 + ... + sigma_{t-1}||^2 * m / (t ln(t/p)) over SEEDS, T = 500.
SIGMA_CONSTANT = 0.33526233496290475
SIGMA_T = 500


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float
    budget: float | None

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        budget = f"/{self.budget:.0f}s" if self.budget else ""
        return f"[{status}] {self.number:>2}. {self.name} ({self.seconds:.1f}s{budget}): {self.detail}"


def _timed(number: int, name: str, budget: float | None, fn: Callable[[], tuple[bool, str]]) -> CriterionResult:
    start = time.perf_counter()
    ok, detail = fn()
    secs = time.perf_counter() - start
    if budget is not None and secs > budget:
        ok = False
        detail += f"; runtime {secs:.1f}s exceeds {budget:.0f}s"
    return CriterionResult(number, name, ok, detail, secs, budget)


def _saddle(**kw) -> ExperimentConfig:
    base = dict(objective="quadratic_saddle", objective_params=(("delta", 0.1),), d=10, m=10, eta=0.05,
                metrics_cadence=10)
    base.update(kw)
    return ExperimentConfig(**base)


# -- 1. aggregator oracles --------------------------------------------------

def _ref_dist(u, v) -> float:
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(u, v)))


def _ref_argmin(costs: list[float]) -> int:
    # Exact ties are only exact up to summation order, hence the relative slack.
    lo = min(costs)
    return next(i for i, c in enumerate(costs) if c <= lo + 1e-12 * abs(lo))


def ref_medoid(points: list[list[float]]) -> list[float]:
    return points[_ref_argmin([math.fsum(_ref_dist(y, z) for z in points) for y in points])]


def ref_coordinate_median(points: list[list[float]]) -> list[float]:
    n = len(points)
    return [sorted(p[k] for p in points)[(n - 1) // 2] for k in range(len(points[0]))]


def ref_krum(points: list[list[float]], b: int) -> list[float]:
    m = len(points)
    scores = []
    for i, y in enumerate(points):
        # Every (m-b-2)-subset of the others; the smallest sum is over the nearest neighbours.
        others = [math.fsum((a - c) ** 2 for a, c in zip(y, z)) for j, z in enumerate(points) if j != i]
        scores.append(min(math.fsum(s) for s in itertools.combinations(others, m - b - 2)))
    return points[_ref_argmin(scores)]


def _instances(rng: np.random.Generator, count: int):
    for k in range(count):
        m = int(rng.integers(1, 9))
        d = int(rng.integers(1, 5))
        if k % 2:
            Y = rng.integers(-3, 4, size=(m, d)).astype(float)
        else:
            Y = rng.standard_normal((m, d))
        yield Y


def criterion_1() -> CriterionResult:
    def check():
        rng = np.random.default_rng(20240601)
        mismatches = {"medoid": 0, "coord_median": 0, "krum": 0}
        n_krum = 0
        for Y in _instances(rng, 200):
            pts = Y.tolist()
            if list(geometric_medoid(Y)) != ref_medoid(pts):
                mismatches["medoid"] += 1
            if list(coordinate_median(Y)) != ref_coordinate_median(pts):
                mismatches["coord_median"] += 1
        while n_krum < 200:
            for Y in _instances(rng, 50):
                for b in (0, 1, 2):
                    if 2 * b + 2 < Y.shape[0] and n_krum < 200:
                        n_krum += 1
                        if list(krum(Y, b)) != ref_krum(Y.tolist(), b):
                            mismatches["krum"] += 1
        ok = not any(mismatches.values())
        return ok, f"mismatches over 200 instances each: {mismatches}"

    return _timed(1, "aggregator oracle equivalence", 5, check)


# -- 2. honest safety -------------------------------------------------------

def criterion_2(threshold_scale: float = 1.0) -> CriterionResult:
    def check():
        bad = 0
        fallbacks = 0
        for s in SEEDS:
            cfg = _saddle(T=200, p=0.01, seed=s, x0=SIGNFLIP_X0,
                          defense=DefenseSpec("safeguard_double", threshold_mode="theoretical",
                                              threshold_scale=threshold_scale))
            summ = run(cfg).summary
            bad += bool(summ["ejections"])
            fallbacks += summ["safeguard"]["median_fallbacks"]
        return bad == 0, f"runs with ejections: {bad}/20, median fallbacks: {fallbacks}"

    return _timed(2, "honest safety (theoretical thresholds)", 10, check)


# -- 3. variance attack -----------------------------------------------------

def _variance_cfg(seed: int, attack: AttackSpec, floor: float, floor_long: float, eject: bool = True):
    return _saddle(T=2 * VARIANCE_T0, seed=seed, iterations_per_epoch=VARIANCE_EPOCH, attack=attack,
                   defense=DefenseSpec("safeguard_double", threshold_mode="empirical", T0=VARIANCE_T0,
                                       T1=VARIANCE_T1, floor=floor, floor_long=floor_long, eject=eject))


def calibrate_floors(make_cfg: Callable[[int, float, float], ExperimentConfig]) -> tuple[float, float]:
    """Largest honest deviation from the median accumulator over all-honest calibration runs."""
    short, long_ = 0.0, 0.0
    for s in CALIBRATION_SEEDS:
        recs = run(make_cfg(s, math.inf, math.inf)).records
        short = max(short, max(np.nanmax(r.dev_B) for r in recs))
        if recs[0].dev_A is not None:
            long_ = max(long_, max(np.nanmax(r.dev_A) for r in recs))
    return short, long_


def criterion_3(eject: bool = True) -> CriterionResult:
    def check():
        fb, fa = calibrate_floors(lambda s, f1, f2: _variance_cfg(s, AttackSpec(), f1, f2))
        attack = AttackSpec("variance", BYZ, z_max=0.3)
        good = 0
        ratios = []
        for s in SEEDS:
            summ = run(_variance_cfg(s, attack, fb, fa, eject=eject)).summary
            caught = sorted(i for t, i in summ["ejections"] if t < 2 * VARIANCE_T0)
            # Deviation statistic at the end of the first window, with ejection switched off.
            rec = run(_variance_cfg(s, attack, fb, fa, eject=False)).records[VARIANCE_T0 - 1]
            ratio = float(np.min(rec.dev_B[list(BYZ)]) / np.median(np.delete(rec.dev_B, list(BYZ))))
            ratios.append(ratio)
            good += caught == list(BYZ) and not summ["honest_ejected"] and ratio >= 3
        return good >= 18, (f"seeds passing: {good}/20 (floors {fb:.3f}/{fa:.3f}, "
                            f"min deviation ratio {min(ratios):.2f})")

    return _timed(3, "variance-attack detection (empirical thresholds)", 30, check)


# -- 4. sign flip -----------------------------------------------------------

def criterion_4(threshold_scale: float = 1.0) -> CriterionResult:
    def check():
        base = [run(_saddle(T=300, seed=s, x0=SIGNFLIP_X0)).summary["final_grad_norm"] for s in SEEDS]
        baseline = float(np.median(base))
        attack = AttackSpec("sign_flip", BYZ)
        caught = 0
        finals = []
        for s in SEEDS:
            summ = run(_saddle(T=300, seed=s, x0=SIGNFLIP_X0, attack=attack,
                               defense=DefenseSpec("safeguard_double", threshold_mode="theoretical",
                                                   threshold_scale=threshold_scale))).summary
            T0 = summ["safeguard"]["T0"]
            early = sorted(i for t, i in summ["ejections"] if t < T0)
            caught += early == list(BYZ) and not summ["honest_ejected"]
            finals.append(summ["final_grad_norm"])
        sg_ratio = float(np.median(finals)) / baseline
        mean_runs = [run(_saddle(T=300, seed=s, x0=SIGNFLIP_X0, attack=attack)).summary for s in SEEDS]
        diverged = sum(r["diverged"] for r in mean_runs)
        finite = [r["final_grad_norm"] for r in mean_runs if not r["diverged"]]
        mean_ratio = math.inf if diverged > len(mean_runs) // 2 else float(np.median(finite)) / baseline
        ok = caught >= 18 and sg_ratio <= 1.5 and mean_ratio >= 3
        return ok, (f"caught within T0 in {caught}/20, safeguard/baseline {sg_ratio:.2f}, "
                    f"mean/baseline {mean_ratio:.2f}")

    return _timed(4, "sign-flip resilience (theoretical thresholds)", 30, check)


# -- 5. saddle escape -------------------------------------------------------

def escape_config(seed: int) -> ExperimentConfig:
    tp = theorem_params(0.1, 0.0, 10, 10, 0.01, delta=0.1, **ESCAPE_CONSTANTS)
    return ExperimentConfig(objective="quadratic_saddle", d=10, m=10, eta=tp.eta, nu=tp.nu, T=tp.T1,
                            seed=seed, metrics_cadence=10**9)


def criterion_5() -> CriterionResult:
    def check():
        esc = sum(run_coupled_escape(escape_config(s), 0.1, ESCAPE_R).escaped for s in range(100))
        ctl = sum(run_coupled_escape(escape_config(s), 0.0, ESCAPE_R).escaped for s in range(100))
        return esc >= 90 and ctl <= 5, f"escaped {esc}/100 at delta=0.1, {ctl}/100 at delta=0 (R={ESCAPE_R})"

    return _timed(5, "coupled saddle escape", 60, check)


# -- 6. ground-truth bounds ---------------------------------------------------

def criterion_6() -> CriterionResult:
    def check():
        worst_delta = 0.0
        alpha = len(BYZ) / 10
        for s in SEEDS:
            recs = run(_saddle(T=200, seed=s, x0=SIGNFLIP_X0, wlog_clip=True,
                               attack=AttackSpec("sign_flip", BYZ))).records
            worst_delta = max(worst_delta, max(r.delta_norm for r in recs))
        ratio = 0.0
        for s in SEEDS:
            c = run(_saddle(T=SIGMA_T, seed=s, x0=0.0)).sigma_cum_sq
            t = np.arange(1, len(c))
            ratio = max(ratio, float(np.max(c[1:] * 10 / (t * np.log(t / 0.01)))))
        ok = worst_delta <= alpha * (1 + 1e-12) and abs(ratio / SIGMA_CONSTANT - 1) <= 0.2
        return ok, (f"max ||Delta_t|| {worst_delta:.6f} (alpha {alpha}), sigma-sum constant {ratio:.4f} "
                    f"(pinned {SIGMA_CONSTANT:.4f} +-20%)")

    return _timed(6, "ground-truth concentration bounds", 10, check)


# -- 7. safeguard (rescale) attack -------------------------------------------

def criterion_7() -> CriterionResult:
    def cfg(seed, attack=AttackSpec(), defense=DefenseSpec("safeguard_double")):
        return _saddle(T=300, seed=seed, x0=RESCALE_X0, attack=attack, defense=defense)

    def check():
        baseline = float(np.median([run(cfg(s, defense=DefenseSpec())).summary["final_grad_norm"] for s in SEEDS]))
        low = [run(cfg(s, AttackSpec("rescale", BYZ, factor=0.6))).summary for s in SEEDS]
        evaded = sum(not r["ejections"] for r in low)
        ratio = float(np.median([r["final_grad_norm"] for r in low])) / baseline
        crossing = None
        for c in RESCALE_SWEEP:
            hits = sum(run(cfg(s, AttackSpec("rescale", BYZ, factor=c))).summary["caught_count"] == 4 for s in SEEDS)
            if hits >= 18:
                crossing = c
                break
        ok = evaded == 20 and ratio <= 3 and crossing is not None
        return ok, (f"factor 0.6 uncaught in {evaded}/20 with final/baseline {ratio:.2f}; "
                    f"smallest swept factor caught in >=18/20: {crossing}")

    return _timed(7, "rescale attack caught/uncaught dichotomy", 60, check)


# -- 8. transient attack with resets ------------------------------------------

def _transient_cfg(seed, attack, floor, floor_long):
    return ExperimentConfig(objective="double_well", d=10, m=10, T=TRANSIENT_T, seed=seed, x0=2.0, eta=0.05,
                            attack=attack,
                            defense=DefenseSpec("safeguard_double", threshold_mode="empirical", T0=TRANSIENT_T0,
                                                T1=TRANSIENT_T1, floor=floor, floor_long=floor_long,
                                                reset_every=TRANSIENT_T1))


def criterion_8() -> CriterionResult:
    def check():
        fb, fa = calibrate_floors(lambda s, f1, f2: _transient_cfg(s, AttackSpec(), f1, f2))
        baseline = float(np.median([
            run(ExperimentConfig(objective="double_well", d=10, m=10, T=TRANSIENT_T, seed=s, x0=2.0,
                                 eta=0.05)).summary["final_grad_norm"] for s in SEEDS]))
        stop = 3 * TRANSIENT_T1
        attack = AttackSpec("transient", BYZ, start_iter=0, stop_iter=stop, inner=AttackSpec("variance", BYZ))
        good = 0
        for s in SEEDS:
            summ = run(_transient_cfg(s, attack, fb, fa)).summary
            ej = summ["ejections"]
            per_window = all(sorted(i for t, i in ej if w * TRANSIENT_T1 <= t < (w + 1) * TRANSIENT_T1) == list(BYZ)
                             for w in range(3))
            post = [e for e in ej if e[0] >= stop]
            good += (per_window and not post and summ["final_good"] == list(range(10))
                     and summ["final_grad_norm"] <= 1.5 * baseline)
        return good >= 18, f"seeds passing: {good}/20 (floors {fb:.3f}/{fa:.3f})"

    return _timed(8, "transient attack with periodic reset", 30, check)


# -- 9. determinism -----------------------------------------------------------

def criterion_9() -> CriterionResult:
    def check():
        cfg = _variance_cfg(3, AttackSpec("variance", BYZ), 4.0, 5.0).replace(T=300)
        with tempfile.TemporaryDirectory() as tmp:
            blobs = []
            for k, threads in enumerate((1, 1, 4)):
                path = Path(tmp) / f"trace{k}.csv"
                write_trace(path, run(cfg, threads=threads).records, cfg.m)
                blobs.append(path.read_bytes())
        same = blobs[0] == blobs[1] == blobs[2]
        return same, "traces byte-identical across repeat and 1 vs 4 threads" if same else "traces differ"

    return _timed(9, "determinism", 5, check)


# -- 10. formula regression ---------------------------------------------------

def criterion_10() -> CriterionResult:
    def check():
        worst = 0.0

        def rel(a, b):
            return abs(a - b) / abs(b)

        thr_cases = [(100, 10, 0.01, None), (1, 1, 0.5, None), (400, 10, 0.01, None),
                     (20, 10, 0.01, 64), (2400, 10, 0.05, None)]
        for T, m, p, lt in thr_cases:
            n = lt or T
            expect = 8 * (T * math.log(16 * m * n / p)) ** 0.5
            worst = max(worst, rel(theoretical_threshold(T, m, p, log_T=lt), expect))
        anchor = theoretical_threshold(100, 10, 0.01)

        for eps, alpha, m, d, p in [(0.1, 0.2, 10, 10, 0.01), (0.1, 0.0, 10, 10, 0.01), (0.05, 0.3, 20, 5, 0.001),
                                    (0.2, 0.1, 4, 2, 0.1), (0.1, 0.4, 10, 10, 0.01)]:
            tp = theorem_params(eps, alpha, m, d, p)
            C3 = alpha * alpha + 1 / m
            T = math.ceil(d * C3 / eps**4)
            C1 = math.log(T) - math.log(p)
            eta = eps**2 / (d * C3 * C1)
            T0 = math.ceil(1 / eta)
            T1 = max(T0, math.ceil(1 / (eta * eps**0.5)))
            worst = max(worst, rel(tp.C3, C3), rel(tp.C1, C1), rel(tp.eta, eta), rel(tp.nu, C3**0.5),
                        rel(tp.C2, alpha**2 * math.log(m * T / p) + C1 / m),
                        rel(tp.threshold1, 8 * (T1 * math.log(16 * m * T1 / p)) ** 0.5),
                        rel(tp.threshold0, 8 * (T0 * math.log(16 * m * T1 / p)) ** 0.5))
            if (tp.T, tp.T0, tp.T1) != (T, T0, T1):
                worst = math.inf
        ok = worst <= 1e-9 and abs(anchor - 302.4) < 0.05
        return ok, f"max relative error {worst:.2e}; threshold(T=100, m=10, p=0.01) = {anchor:.2f}"

    return _timed(10, "formula regression", 5, check)


CRITERIA = (criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7,
            criterion_8, criterion_9, criterion_10)


def run_all(echo: Callable[[str], None] | None = print) -> list[CriterionResult]:
    results = []
    for fn in CRITERIA:
        res = fn()
        results.append(res)
        if echo is not None:
            echo(res.line())
    return results
