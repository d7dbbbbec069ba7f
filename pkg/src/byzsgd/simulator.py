"""Synchronous master loop, parameter recipe and coupled saddle-escape harness."""
from __future__ import annotations

import math
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attacks import RoundContext, byzantine_report
from .config import ExperimentConfig, render_dict
from .defenses import (
    DefenseError,
    SafeguardState,
    aggregate_mean,
    coordinate_median,
    geometric_medoid,
    krum,
    reset_good,
    safeguard_step,
    theoretical_threshold,
    zeno,
)
from .objectives import Objective, QuadraticSaddle, hessian_min_eig, make_objective
from .vecmath import HONEST, MASTER, PERTURB, ZENO, RngStream, gaussian_vector, norm

DIVERGENCE_LIMIT = 1e12


@dataclass(frozen=True)
class TheoremParams:
    C1: float
    C2: float
    C3: float
    T0: int
    T1: int
    threshold0: float
    threshold1: float
    eta: float
    nu: float
    T: int


def theorem_params(epsilon: float, alpha: float, m: int, d: int, p: float, *,
                   delta: float | None = None, c_nu: float = 1.0, c_eta: float = 1.0,
                   c0: float = 1.0, c1: float = 1.0, c_T: float = 1.0) -> TheoremParams:
    """Step size, noise level, horizon, windows and thresholds with explicit constants.

    ``T = ceil(c_T d C3 / eps^4)``, ``eta = c_eta eps^2 / (d C3 C1)``,
    ``nu^2 = c_nu C3``, ``T0 = ceil(c0/eta)``, ``T1 = max(T0, ceil(c1/(eta delta)))``
    with ``delta = sqrt(eps)`` unless given.
    """
    if not 0 <= alpha < 0.5:
        raise ValueError(f"alpha must lie in [0, 0.5), got {alpha}")
    if epsilon <= 0 or m < 1 or d < 1:
        raise ValueError("epsilon, m and d must be positive")
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    C3 = alpha**2 + 1.0 / m
    T = math.ceil(c_T * d * C3 / epsilon**4)
    C1 = math.log(T / p)
    C2 = alpha**2 * math.log(m * T / p) + math.log(T / p) / m
    eta = c_eta * epsilon**2 / (d * C3 * C1)
    nu = math.sqrt(c_nu * C3)
    dl = math.sqrt(epsilon) if delta is None else delta
    if dl <= 0:
        raise ValueError("delta must be positive")
    T0 = math.ceil(c0 / eta)
    T1 = max(T0, math.ceil(c1 / (eta * dl)))
    return TheoremParams(C1, C2, C3, T0, T1,
                         theoretical_threshold(T0, m, p, log_T=T1),
                         theoretical_threshold(T1, m, p), eta, nu, T)


@dataclass
class IterationRecord:
    t: int
    f: float
    grad_norm: float
    hess_min_eig: float | None
    good_count: int
    ejected: tuple[int, ...]
    sigma_norm: float
    delta_norm: float
    dev_A: np.ndarray
    dev_B: np.ndarray


@dataclass
class RunResult:
    records: list[IterationRecord]
    summary: dict
    x_final: np.ndarray
    sigma_cum_sq: np.ndarray = field(repr=False, default=None)


def ground_truth_diagnostics(reports: dict[int, np.ndarray], honest: set[int],
                             true_grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(sigma_t, Delta_t)``: honest and Byzantine deviations averaged over the current good set."""
    n = len(reports)
    sigma = np.zeros_like(true_grad)
    delta = np.zeros_like(true_grad)
    for i, r in reports.items():
        if i in honest:
            sigma += r - true_grad
        else:
            delta += r - true_grad
    return sigma / n, delta / n


def safeguard_windows(cfg: ExperimentConfig) -> tuple[int, int]:
    """Window lengths ``(T0, T1)``; single safeguard uses ``T0`` only."""
    spec = cfg.defense
    ipe = cfg.iterations_per_epoch
    if spec.kind == "safeguard_single":
        if spec.T is not None:
            return spec.T, spec.T
        w = 3 * ipe if spec.threshold_mode == "empirical" else math.ceil(1 / cfg.eta)
        return w, w
    if spec.threshold_mode == "empirical":
        T0 = spec.T0 if spec.T0 is not None else ipe
        T1 = spec.T1 if spec.T1 is not None else 6 * ipe
    else:
        T0 = spec.T0 if spec.T0 is not None else math.ceil(1 / cfg.eta)
        T1 = spec.T1 if spec.T1 is not None else max(T0, math.ceil(1 / (cfg.eta * math.sqrt(cfg.epsilon))))
    return T0, T1


def build_safeguard(cfg: ExperimentConfig) -> SafeguardState:
    """Safeguard state for ``cfg``.

    Accumulators hold reports divided by ``|good_k|`` (about ``m``), so the
    theoretical thresholds, stated for raw sums, are divided by ``m``.
    """
    spec = cfg.defense
    T0, T1 = safeguard_windows(cfg)
    double = spec.kind == "safeguard_double"
    thr0 = thr1 = math.inf
    if spec.threshold_mode == "theoretical":
        long_T = T1 if double else T0
        thr0 = spec.threshold_scale * theoretical_threshold(T0, cfg.m, cfg.p, log_T=long_T) / cfg.m
        thr1 = spec.threshold_scale * theoretical_threshold(T1, cfg.m, cfg.p) / cfg.m
    return SafeguardState(
        m=cfg.m, d=cfg.d, T0=T0, T1=T1, double=double, mode=spec.threshold_mode,
        threshold_short=thr0, threshold_long=thr1, floor_short=spec.floor,
        floor_long=spec.floor if spec.floor_long is None else spec.floor_long,
        multiplier=spec.multiplier, eject=spec.eject,
    )


def initial_point(cfg: ExperimentConfig) -> np.ndarray:
    if isinstance(cfg.x0, tuple):
        return np.array(cfg.x0, dtype=np.float64)
    return np.full(cfg.d, float(cfg.x0))


def step_size(cfg: ExperimentConfig, t: int) -> float:
    epoch = t // cfg.iterations_per_epoch
    eta = cfg.eta
    for at, factor in cfg.schedule:
        if epoch >= at:
            eta *= factor
    return eta


class Simulation:
    """One experiment advanced a round at a time.

    ``perturb_sign`` multiplies the first coordinate of the Gaussian
    perturbation (the coupled-escape harness runs a ``-1`` twin).
    """

    def __init__(self, cfg: ExperimentConfig, threads: int = 1, objective: Objective | None = None,
                 perturb_sign: float = 1.0):
        self.cfg = cfg
        self.obj = objective or make_objective(cfg.objective, cfg.d, cfg.V, **cfg.objective_kwargs())
        if self.obj.d != cfg.d:
            raise ValueError("objective dimension does not match config")
        self.threads = threads
        self.perturb_sign = perturb_sign
        self.x = initial_point(cfg)
        self.history = deque([self.x.copy()], maxlen=cfg.attack.max_delay + 1)
        self.honest = set(cfg.honest_ids)
        self.byz = list(cfg.byzantine_ids)
        self.state = build_safeguard(cfg) if cfg.defense.is_safeguard else None
        self.t = 0
        self.sigma_sum = np.zeros(cfg.d)
        self.sigma_cum_sq: list[float] = []
        self.records: list[IterationRecord] = []
        self.diverged = False
        self.ejections: list[tuple[int, int]] = []
        self._pool = ThreadPoolExecutor(threads) if threads > 1 else None

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    @property
    def good(self) -> tuple[int, ...]:
        return self.state.good if self.state is not None else tuple(range(self.cfg.m))

    def worker_noise(self, t: int, workers) -> dict[int, np.ndarray]:
        """Oracle noise of each worker at round ``t`` from its own keyed stream."""
        seed, obj = self.cfg.seed, self.obj

        def draw(i: int) -> np.ndarray:
            if obj.V == 0:
                return np.zeros(obj.d)
            return obj.noise(RngStream(seed, i, t, HONEST).generator())

        workers = list(workers)
        if self._pool is not None:
            return dict(zip(workers, self._pool.map(draw, workers)))
        return {i: draw(i) for i in workers}

    def perturbation(self, t: int) -> np.ndarray:
        xi = gaussian_vector(self.cfg.d, self.cfg.nu, RngStream(self.cfg.seed, MASTER, t, PERTURB))
        xi[0] *= self.perturb_sign
        return xi

    def step(self, noise: dict[int, np.ndarray] | None = None, xi: np.ndarray | None = None) -> IterationRecord:
        cfg, obj, t, x = self.cfg, self.obj, self.t, self.x
        if self.state is not None and cfg.defense.reset_every and t > 0 and t % cfg.defense.reset_every == 0:
            self.state = reset_good(self.state)
        good = self.good
        if noise is None:
            noise = self.worker_noise(t, good)
        g = obj.grad(x)
        own = {i: g + noise[i] for i in good}
        honest_reports = [own[i] for i in good if i in self.honest]
        ctx = RoundContext(t, x, self.history, honest_reports, wlog_clip=cfg.wlog_clip)
        reports: dict[int, np.ndarray] = {}
        for i in good:
            if i in self.honest:
                reports[i] = own[i]
            else:
                ctx.own_gradient = own[i]
                reports[i] = byzantine_report(cfg.attack, ctx, i, obj, RngStream(cfg.seed, i, t, HONEST))

        sigma, delta = ground_truth_diagnostics(reports, self.honest, g)
        eta = step_size(cfg, t)
        ejected: tuple[int, ...] = ()
        dev_A = dev_B = None
        spec = cfg.defense
        Y = [reports[i] for i in good]
        if spec.kind == "mean":
            direction = aggregate_mean(Y)
        elif spec.kind == "geomed":
            direction = geometric_medoid(Y)
        elif spec.kind == "coord_median":
            direction = coordinate_median(Y)
        elif spec.kind == "krum":
            direction = krum(Y, spec.b)
        elif spec.kind == "zeno":
            f_r = obj.minibatch_estimator(RngStream(cfg.seed, MASTER, t, ZENO), spec.n_r)
            direction = zeno(Y, spec.b, spec.rho, x, eta, f_r)
        else:
            before = len(self.state.ejections)
            direction, self.state = safeguard_step(self.state, reports, t)
            new = self.state.ejections[before:]
            self.ejections.extend(new)
            ejected = tuple(i for _, i in new)
            dev_A = self.state.dev_A.copy() if self.state.double else None
            dev_B = self.state.dev_B.copy()

        if xi is None:
            xi = self.perturbation(t)
        lam = None
        if t % cfg.metrics_cadence == 0:
            lam = hessian_min_eig(obj, x)
        rec = IterationRecord(t, obj.value(x), norm(g), lam, len(good), ejected, norm(sigma), norm(delta),
                              dev_A, dev_B)
        self.records.append(rec)
        self.sigma_cum_sq.append(float(np.dot(self.sigma_sum, self.sigma_sum)))
        self.sigma_sum = self.sigma_sum + sigma

        x_new = x - eta * (xi + direction)
        if not np.all(np.isfinite(x_new)) or norm(x_new) > DIVERGENCE_LIMIT:
            self.diverged = True
        else:
            fx = obj.value(x_new)
            if not math.isfinite(fx) or abs(fx) > DIVERGENCE_LIMIT:
                self.diverged = True
        self.x = x_new
        self.history.append(x_new)
        self.t += 1
        return rec

    def summary(self, wall_time: float) -> dict:
        cfg, obj = self.cfg, self.obj
        finite = not self.diverged
        byz = set(cfg.byzantine_ids)
        caught = sorted({i for _, i in self.ejections if i in byz})
        wrongly = sorted({i for _, i in self.ejections if i not in byz})
        certs = [r for r in self.records if r.hess_min_eig is not None]
        sosp = [r.grad_norm <= cfg.epsilon and r.hess_min_eig >= -math.sqrt(cfg.epsilon) for r in certs]
        out = {
            "config": render_dict(cfg),
            "status": "diverged" if self.diverged else "completed",
            "diverged": self.diverged,
            "iterations": self.t,
            "final_grad_norm": norm(obj.grad(self.x)) if finite else None,
            "final_f": obj.value(self.x) if finite else None,
            "sosp_fraction": float(np.mean(sosp)) if sosp else 0.0,
            "alpha": cfg.alpha,
            "ejections": [[t, i] for t, i in self.ejections],
            "caught_count": len(caught),
            "honest_ejected": wrongly,
            "final_good": list(self.good),
        }
        if self.state is not None:
            s = self.state
            out["safeguard"] = {
                "T0": s.T0, "T1": s.T1 if s.double else None, "mode": s.mode,
                "threshold_short": s.threshold_short if s.mode == "theoretical" else None,
                "threshold_long": s.threshold_long if s.mode == "theoretical" and s.double else None,
                "median_fallbacks": len(s.events),
            }
        out["wall_time"] = wall_time
        return out


def run(cfg: ExperimentConfig, threads: int = 1) -> RunResult:
    """Run ``cfg`` to completion (or divergence)."""
    try:
        cfg.defense.validate_for(cfg.m)
    except DefenseError as exc:
        raise ValueError(str(exc)) from None
    start = time.perf_counter()
    sim = Simulation(cfg, threads=threads)
    try:
        while sim.t < cfg.T and not sim.diverged:
            sim.step()
    finally:
        sim.close()
    summary = sim.summary(time.perf_counter() - start)
    return RunResult(sim.records, summary, sim.x, np.array(sim.sigma_cum_sq))


@dataclass
class EscapeResult:
    escaped: bool
    t_escape: int | None
    dist_a: np.ndarray
    dist_b: np.ndarray


def run_coupled_escape(cfg: ExperimentConfig, delta: float, R: float) -> EscapeResult:
    """Two runs from the same point sharing all randomness except the sign of
    the perturbation's first coordinate; escape when either leaves the
    ``R``-ball around the start within ``cfg.T`` rounds.
    """
    if cfg.nu <= 0:
        raise ValueError("coupled escape needs a positive perturbation nu")
    if R <= 0:
        raise ValueError("R must be positive")
    obj = QuadraticSaddle(delta=delta, d=cfg.d, V=cfg.V)
    a = Simulation(cfg, objective=obj)
    b = Simulation(cfg, objective=obj, perturb_sign=-1.0)
    w0 = a.x.copy()
    da, db = [], []
    t_escape = None
    for t in range(cfg.T):
        workers = sorted(set(a.good) | set(b.good))
        noise = a.worker_noise(t, workers)
        xi = a.perturbation(t)
        xi_b = xi.copy()
        xi_b[0] = -xi_b[0]
        a.step(noise, xi)
        b.step(noise, xi_b)
        da.append(norm(a.x - w0))
        db.append(norm(b.x - w0))
        if a.diverged or b.diverged or da[-1] > R or db[-1] > R:
            t_escape = t + 1
            break
    return EscapeResult(t_escape is not None, t_escape, np.array(da), np.array(db))
