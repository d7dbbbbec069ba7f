"""Synthetic objectives with exact gradients and a bounded-noise oracle.

Every objective is the expectation of per-sample functions
``f_s(x) = f(x) + <zeta_s, x>`` with ``zeta_s`` uniform in the ``V``-ball, so a
stochastic gradient is ``grad(x) + zeta`` (mean zero, ``||zeta|| <= V``
surely) and a mini-batch value estimate is ``f(x) + <mean(zeta), x>``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .vecmath import RngStream, norm, uniform_ball


class Objective:
    """Base class; subclasses provide ``value``, ``gradient`` and ``hessian``."""

    name = "objective"
    d: int
    L: float
    L2: float
    V: float

    def _check(self, x: np.ndarray) -> None:
        if x.shape != (self.d,):
            raise ValueError(f"{self.name}: expected dimension {self.d}, got {x.shape}")

    def eval(self, x: np.ndarray) -> float:
        self._check(x)
        return self.value(x)

    def grad(self, x: np.ndarray) -> np.ndarray:
        self._check(x)
        return self.gradient(x)

    def value(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hessian(self, x: np.ndarray, tol: float = 1e-6) -> np.ndarray:
        # Central differences of the exact gradient, symmetrised.
        h = max(math.sqrt(tol), 1e-5)
        H = np.empty((self.d, self.d))
        for k in range(self.d):
            e = np.zeros(self.d)
            e[k] = h
            H[:, k] = (self.gradient(x + e) - self.gradient(x - e)) / (2 * h)
        return 0.5 * (H + H.T)

    def noise(self, gen: np.random.Generator) -> np.ndarray:
        return uniform_ball(self.d, self.V, gen)

    def stochastic_grad(self, x: np.ndarray, stream: RngStream) -> np.ndarray:
        self._check(x)
        g = self.gradient(x)
        if self.V == 0:
            return g
        return g + self.noise(stream.generator())

    def minibatch_estimator(self, stream: RngStream, n_r: int) -> Callable[[np.ndarray], float]:
        """Value estimate over ``n_r`` fresh samples, fixed for every point it is called on."""
        if n_r < 1:
            raise ValueError("n_r must be positive")
        gen = stream.generator()
        zeta = np.mean([self.noise(gen) for _ in range(n_r)], axis=0)

        def f_r(y: np.ndarray) -> float:
            self._check(y)
            return self.value(y) + float(np.dot(zeta, y))

        return f_r

    def describe(self) -> dict:
        return {"kind": self.name, "d": self.d, "L": self.L, "L2": self.L2, "V": self.V}


@dataclass
class QuadraticSaddle(Objective):
    """``f(x) = 0.5 * x^T diag(-delta, 1, ..., 1) x``.

    ``delta > 0`` gives a strict saddle at the origin, ``delta = 0`` a flat
    first coordinate and ``delta < 0`` a convex bowl.
    """

    delta: float
    d: int
    V: float = 1.0
    name = "quadratic_saddle"

    def __post_init__(self) -> None:
        if self.d < 1:
            raise ValueError("d must be positive")
        self.h = np.ones(self.d)
        self.h[0] = -self.delta
        self.L = max(1.0, abs(self.delta))
        self.L2 = 0.0

    def value(self, x: np.ndarray) -> float:
        return 0.5 * float(np.dot(self.h * x, x))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.h * x

    def hessian(self, x: np.ndarray, tol: float = 1e-6) -> np.ndarray:
        return np.diag(self.h)

    def min_eig(self, x: np.ndarray) -> float:
        return float(self.h.min())

    def describe(self) -> dict:
        return {**super().describe(), "delta": self.delta}


def _well(u: np.ndarray) -> np.ndarray:
    return 0.5 * u**2 + 2.0 / (1.0 + u**2)


def _well_d1(u: np.ndarray) -> np.ndarray:
    return u - 4.0 * u / (1.0 + u**2) ** 2


def _well_d2(u: np.ndarray) -> np.ndarray:
    return 1.0 - 4.0 * (1.0 - 3.0 * u**2) / (1.0 + u**2) ** 3


@dataclass
class SeparableDoubleWell(Objective):
    """``f(x) = sum_i w(x_i)`` with ``w(u) = u^2/2 + 2/(1+u^2)``.

    Minimisers at ``u = +-1`` with ``w = 1.5``; local maximum at ``u = 0``
    with ``w''(0) = -3``. ``-3 <= w'' <= 2`` everywhere, so ``L = 3`` globally.
    """

    d: int
    V: float = 1.0
    name = "double_well"

    def __post_init__(self) -> None:
        if self.d < 1:
            raise ValueError("d must be positive")
        self.L = 3.0
        # w'''(u) = 48u(1-u^2)/(1+u^2)^4 peaks at |u| ~ 0.325 with value ~9.34.
        self.L2 = 9.34

    def value(self, x: np.ndarray) -> float:
        return float(np.sum(_well(x)))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return _well_d1(x)

    def hessian(self, x: np.ndarray, tol: float = 1e-6) -> np.ndarray:
        return np.diag(_well_d2(x))

    def min_eig(self, x: np.ndarray) -> float:
        return float(_well_d2(x).min())


@dataclass
class SyntheticSoftmax(Objective):
    """Softmax cross-entropy on Gaussian class clusters.

    Parameters are a ``classes x features`` weight matrix flattened row-major,
    so ``d = classes * features``. ``label_map`` relabels every sample before
    the loss is taken (used by label-flipping workers).
    """

    d: int
    classes: int = 3
    samples: int = 60
    V: float = 1.0
    data_seed: int = 0
    label_map: tuple[int, ...] | None = None
    name = "softmax"
    features: int = field(init=False)

    def __post_init__(self) -> None:
        if self.classes < 2:
            raise ValueError("softmax needs at least 2 classes")
        if self.d % self.classes:
            raise ValueError(f"d={self.d} must be a multiple of classes={self.classes}")
        if self.samples < self.classes:
            raise ValueError("need at least one sample per class")
        self.features = self.d // self.classes
        self._flipped = None
        gen = np.random.default_rng(self.data_seed)
        means = 2.0 * gen.standard_normal((self.classes, self.features))
        self.labels = np.arange(self.samples) % self.classes
        self.X = means[self.labels] + gen.standard_normal((self.samples, self.features))
        if self.label_map is not None:
            if sorted(self.label_map) != list(range(self.classes)):
                raise ValueError("label_map must be a permutation of the classes")
            self.targets = np.asarray(self.label_map)[self.labels]
        else:
            self.targets = self.labels
        sq = np.sum(self.X**2, axis=1)
        self.L = 0.5 * float(np.mean(sq))
        self.L2 = float(np.max(sq) ** 1.5)

    def flipped(self) -> "SyntheticSoftmax":
        """Same data with every label ``l`` replaced by ``classes - 1 - l``."""
        if self._flipped is None:
            flip = tuple(self.classes - 1 - c for c in range(self.classes))
            self._flipped = SyntheticSoftmax(self.d, self.classes, self.samples, self.V,
                                             self.data_seed, flip)
        return self._flipped

    def _probs(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        W = x.reshape(self.classes, self.features)
        logits = self.X @ W.T
        logits -= logits.max(axis=1, keepdims=True)
        P = np.exp(logits)
        P /= P.sum(axis=1, keepdims=True)
        return logits, P

    def value(self, x: np.ndarray) -> float:
        logits, P = self._probs(x)
        lse = np.log(np.exp(logits).sum(axis=1))
        return float(np.mean(lse - logits[np.arange(self.samples), self.targets]))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        _, P = self._probs(x)
        P[np.arange(self.samples), self.targets] -= 1.0
        return (P.T @ self.X / self.samples).ravel()

    def describe(self) -> dict:
        return {**super().describe(), "classes": self.classes, "samples": self.samples,
                "data_seed": self.data_seed, "flipped": self.label_map is not None}


def hessian_min_eig(obj: Objective, x: np.ndarray, tol: float = 1e-6) -> float:
    """Smallest Hessian eigenvalue; closed form where the objective has one."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    obj._check(x)
    closed = getattr(obj, "min_eig", None)
    if closed is not None:
        return closed(x)
    return float(np.linalg.eigvalsh(obj.hessian(x, tol))[0])


@dataclass(frozen=True)
class SospCertificate:
    grad_norm: float
    hessian_min_eig: float
    epsilon: float
    satisfied: bool


def certify_sosp(obj: Objective, x: np.ndarray, epsilon: float) -> SospCertificate:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    gn = norm(obj.grad(x))
    lam = hessian_min_eig(obj, x)
    ok = gn <= epsilon and lam >= -math.sqrt(epsilon)
    return SospCertificate(gn, lam, epsilon, ok)


def make_objective(kind: str, d: int, V: float = 1.0, **params) -> Objective:
    if kind == "quadratic_saddle":
        return QuadraticSaddle(delta=float(params.get("delta", 0.1)), d=d, V=V)
    if kind == "double_well":
        return SeparableDoubleWell(d=d, V=V)
    if kind == "softmax":
        return SyntheticSoftmax(d=d, classes=int(params.get("classes", 3)),
                                samples=int(params.get("samples", 60)), V=V,
                                data_seed=int(params.get("data_seed", 0)))
    raise ValueError(f"unknown objective: {kind!r}")


__all__ = [
    "Objective",
    "QuadraticSaddle",
    "SeparableDoubleWell",
    "SyntheticSoftmax",
    "SospCertificate",
    "certify_sosp",
    "hessian_min_eig",
    "make_objective",
]
