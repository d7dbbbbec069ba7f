"""Aggregation rules and the accumulator safeguard filter.

Baselines (mean, medoid, coordinate median, Krum, Zeno) are pure functions of
one round's reports. The safeguard keeps per-worker windowed sums of reports
and permanently ejects workers whose sums drift away from a majority
"median" worker.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

DEFENSE_KINDS = ("mean", "geomed", "coord_median", "krum", "zeno", "safeguard_single", "safeguard_double")


class DefenseError(ValueError):
    pass


def _stack(reports: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    Y = np.asarray(reports, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] == 0:
        raise DefenseError("need a non-empty list of equal-length reports")
    return Y


def aggregate_mean(reports) -> np.ndarray:
    return _stack(reports).mean(axis=0)


def _pairwise(Y: np.ndarray) -> np.ndarray:
    diff = Y[:, None, :] - Y[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


_TIE_RTOL = 1e-12


def _first_min(scores: np.ndarray) -> int:
    # Scores within rounding of the minimum count as tied; the lowest index wins.
    best = float(np.min(scores))
    return int(np.flatnonzero(scores <= best + _TIE_RTOL * abs(best))[0])


def geometric_medoid(reports) -> np.ndarray:
    """Input point with the smallest total distance to all inputs (lowest index on ties)."""
    Y = _stack(reports)
    return Y[_first_min(_pairwise(Y).sum(axis=1))].copy()


def coordinate_median(reports) -> np.ndarray:
    """Per-coordinate median; even counts take the lower-middle order statistic."""
    Y = _stack(reports)
    return np.sort(Y, axis=0)[(Y.shape[0] - 1) // 2].copy()


def krum_scores(Y: np.ndarray, b: int) -> np.ndarray:
    m = Y.shape[0]
    n = m - b - 2
    D2 = _pairwise(Y) ** 2
    scores = np.empty(m)
    for i in range(m):
        others = np.delete(D2[i], i)
        scores[i] = np.sort(others)[:n].sum()
    return scores


def krum(reports, b: int) -> np.ndarray:
    Y = _stack(reports)
    m = Y.shape[0]
    if b < 0 or 2 * b + 2 >= m:
        raise DefenseError(f"krum needs 2b+2 < m (b={b}, m={m})")
    return Y[_first_min(krum_scores(Y, b))].copy()


def zeno_scores(Y: np.ndarray, x: np.ndarray, eta: float, rho: float,
                f_r: Callable[[np.ndarray], float]) -> np.ndarray:
    if Y.shape[1] != x.shape[0]:
        raise DefenseError("report dimension does not match the point")
    base = f_r(x)
    return np.array([base - f_r(x - eta * u) - rho * float(np.dot(u, u)) for u in Y])


def zeno(reports, b: int, rho: float, x: np.ndarray, eta: float,
         f_r: Callable[[np.ndarray], float]) -> np.ndarray:
    """Mean of the ``m - b`` reports with the highest descent scores."""
    Y = _stack(reports)
    m = Y.shape[0]
    if not 1 <= m - b <= m:
        raise DefenseError(f"zeno needs 1 <= m-b <= m (b={b}, m={m})")
    if b == 0:
        return Y.mean(axis=0)
    order = np.argsort(-zeno_scores(Y, x, eta, rho, f_r), kind="stable")
    return Y[order[: m - b]].mean(axis=0)


def theoretical_threshold(T: int, m: int, p: float, log_T: int | None = None) -> float:
    """``8 * sqrt(T * ln(16 m T' / p))`` with ``T' = log_T`` (defaults to ``T``).

    The short window of the double safeguard passes the long window length
    as ``log_T``.
    """
    if not 0 < p < 1:
        raise DefenseError(f"p must lie in (0, 1), got {p}")
    if T < 1 or m < 1:
        raise DefenseError("T and m must be positive")
    lt = T if log_T is None else log_T
    return 8.0 * math.sqrt(T * math.log(16.0 * m * lt / p))


def majority_rank(m: int) -> int:
    """``ceil(m/2 + 1)``: the order statistic used as each worker's score."""
    return math.ceil(m / 2 + 1)


def empirical_median_threshold(accumulators: Mapping[int, np.ndarray], good: Sequence[int],
                               floor: float = 5.0, multiplier: float = 1.5,
                               m: int | None = None) -> tuple[int, float]:
    """Pick the median worker by order-statistic score and return ``(med_id, threshold)``.

    Each worker's score is the ``ceil(m/2+1)``-th smallest distance from its
    accumulator to those of the workers in ``good`` (itself included); the
    rank is capped at ``len(good)``.
    """
    ids = sorted(good)
    if not ids:
        raise DefenseError("good set is empty")
    M = np.array([accumulators[i] for i in ids])
    med_pos, S = _empirical_median(_pairwise(M), len(ids) if m is None else m)
    return ids[med_pos], multiplier * max(S, floor)


def _empirical_median(D: np.ndarray, m: int) -> tuple[int, float]:
    k = min(majority_rank(m), D.shape[0])
    scores = np.sort(D, axis=1)[:, k - 1]
    pos = int(np.argmin(scores))
    return pos, float(scores[pos])


def _theoretical_median(D: np.ndarray, threshold: float, m: int) -> int | None:
    counts = (D <= threshold).sum(axis=1)
    hits = np.flatnonzero(counts > m / 2)
    return int(hits[0]) if hits.size else None


@dataclass
class SafeguardState:
    """Accumulators and good set of the safeguard filter.

    ``A``/``B`` are ``m x d`` arrays indexed by worker id; rows of ejected
    workers are frozen. ``threshold_long``/``threshold_short`` are in
    accumulator units (reports divided by ``|good_k|``). With ``double=False``
    only the short window (``B``, length ``T0``) is active.
    """

    m: int
    d: int
    T0: int
    T1: int
    double: bool = True
    mode: str = "theoretical"
    threshold_short: float = math.inf
    threshold_long: float = math.inf
    floor_short: float = 5.0
    floor_long: float = 5.0
    multiplier: float = 1.5
    eject: bool = True
    A: np.ndarray = None
    B: np.ndarray = None
    good: tuple[int, ...] = None
    ejections: list[tuple[int, int]] = field(default_factory=list)
    events: list[tuple[int, str]] = field(default_factory=list)
    dev_A: np.ndarray = None
    dev_B: np.ndarray = None

    def __post_init__(self) -> None:
        if self.mode not in ("theoretical", "empirical"):
            raise DefenseError(f"unknown threshold mode {self.mode!r}")
        if self.T0 < 1 or self.T1 < 1:
            raise DefenseError("window lengths must be positive")
        if self.double and self.T0 > self.T1:
            raise DefenseError("double safeguard needs T0 <= T1")
        if self.A is None:
            self.A = np.zeros((self.m, self.d))
        if self.B is None:
            self.B = np.zeros((self.m, self.d))
        if self.good is None:
            self.good = tuple(range(self.m))
        if self.dev_A is None:
            self.dev_A = np.full(self.m, np.nan)
        if self.dev_B is None:
            self.dev_B = np.full(self.m, np.nan)

    def copy(self) -> "SafeguardState":
        return replace(self, A=self.A.copy(), B=self.B.copy(), ejections=list(self.ejections),
                       events=list(self.events), dev_A=self.dev_A.copy(), dev_B=self.dev_B.copy())


def _filter(state: SafeguardState, acc: np.ndarray, ids: list[int], t: int, which: str,
            threshold: float, floor: float) -> tuple[np.ndarray, np.ndarray]:
    """Distances of each worker in ``ids`` to the median accumulator, and the ejection mask."""
    M = acc[ids]
    D = _pairwise(M)
    if state.mode == "theoretical":
        pos = _theoretical_median(D, threshold, state.m)
        if pos is None:
            pos, _ = _empirical_median(D, state.m)
            state.events.append((t, f"median_fallback_{which}"))
        dist = D[pos]
        bad = dist > 2 * threshold
    else:
        pos, S = _empirical_median(D, state.m)
        limit = state.multiplier * max(S, floor)
        dist = D[pos]
        bad = (dist >= limit) & (dist > 0)
    return dist, bad


def safeguard_step(state: SafeguardState, reports: Mapping[int, np.ndarray],
                   t: int) -> tuple[np.ndarray, SafeguardState]:
    """One master round: accumulate, filter, and return the update direction.

    The direction averages the reports of the pre-ejection good set; ejected
    workers leave the good set from the next round on.
    """
    ids = list(state.good)
    if set(reports) != set(ids):
        raise DefenseError(f"reports cover {sorted(reports)} but good set is {ids}")
    new = state.copy()
    if new.double and t % new.T1 == 0:
        new.A[:] = 0.0
    if t % new.T0 == 0:
        new.B[:] = 0.0
    R = np.array([reports[i] for i in ids])
    n = len(ids)
    new.B[ids] += R / n
    if new.double:
        new.A[ids] += R / n
    direction = R.mean(axis=0)

    new.dev_A[:] = np.nan
    new.dev_B[:] = np.nan
    bad = np.zeros(n, dtype=bool)
    dist, mask = _filter(new, new.B, ids, t, "B", new.threshold_short, new.floor_short)
    new.dev_B[ids] = dist
    bad |= mask
    if new.double:
        dist, mask = _filter(new, new.A, ids, t, "A", new.threshold_long, new.floor_long)
        new.dev_A[ids] = dist
        bad |= mask

    if new.eject and bad.any():
        gone = [i for i, b in zip(ids, bad) if b]
        new.ejections.extend((t, i) for i in gone)
        new.good = tuple(i for i, b in zip(ids, bad) if not b)
    return direction, new


def reset_good(state: SafeguardState, all_workers: Sequence[int] | None = None) -> SafeguardState:
    new = state.copy()
    new.good = tuple(sorted(all_workers)) if all_workers is not None else tuple(range(state.m))
    new.A[:] = 0.0
    new.B[:] = 0.0
    return new


@dataclass(frozen=True)
class DefenseSpec:
    """Which aggregation rule the master applies, with its parameters.

    Window lengths of ``None`` are filled in by the simulator. ``threshold_scale``
    multiplies theoretical thresholds (the hidden constant).
    """

    kind: str = "mean"
    b: int = 0
    rho: float = 0.0005
    n_r: int = 10
    T: int | None = None
    T0: int | None = None
    T1: int | None = None
    threshold_mode: str = "theoretical"
    threshold_scale: float = 1.0
    floor: float = 5.0
    floor_long: float | None = None
    multiplier: float = 1.5
    reset_every: int | None = None
    eject: bool = True

    def __post_init__(self) -> None:
        if self.kind not in DEFENSE_KINDS:
            raise DefenseError(f"unknown defense: {self.kind!r}")
        if self.threshold_mode not in ("theoretical", "empirical"):
            raise DefenseError(f"unknown threshold mode: {self.threshold_mode!r}")
        if self.reset_every is not None and self.reset_every < 1:
            raise DefenseError("reset_every must be positive")
        if self.b < 0:
            raise DefenseError("b must be non-negative")

    @property
    def is_safeguard(self) -> bool:
        return self.kind.startswith("safeguard")

    def validate_for(self, m: int) -> None:
        if self.kind == "krum" and not 2 * self.b + 2 < m:
            raise DefenseError(f"krum needs 2b+2 < m (b={self.b}, m={m})")
        if self.kind == "zeno" and not 1 <= m - self.b <= m:
            raise DefenseError(f"zeno needs 1 <= m-b <= m (b={self.b}, m={m})")
