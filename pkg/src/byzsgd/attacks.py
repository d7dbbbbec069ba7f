"""Byzantine worker strategies.

An attack sees the whole round (the current point, recent history and every
honest report) before the Byzantine workers answer, so colluding strategies
such as the variance attack can be expressed directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .objectives import Objective, SyntheticSoftmax
from .vecmath import ATTACK, RngStream, clip_to_ball

ATTACK_KINDS = ("honest", "sign_flip", "rescale", "delayed", "variance", "label_flip", "transient")


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "honest"
    byzantine_ids: tuple[int, ...] = ()
    factor: float = 0.6
    delay: int = 1000
    z_max: float = 0.3
    start_iter: int = 0
    stop_iter: int = 0
    inner: "AttackSpec | None" = None

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise AttackError(f"unknown attack: {self.kind!r}")
        if len(set(self.byzantine_ids)) != len(self.byzantine_ids):
            raise AttackError("byzantine_ids contains duplicates")
        if not np.isfinite(self.factor):
            raise AttackError("rescale factor must be finite")
        if self.kind == "delayed" and self.delay < 1:
            raise AttackError("delay must be >= 1")
        if self.kind == "variance" and self.z_max <= 0:
            raise AttackError("z_max must be positive")
        if self.kind == "transient":
            if self.inner is None:
                raise AttackError("transient attack needs an inner attack")
            if self.stop_iter < self.start_iter:
                raise AttackError("transient window has stop_iter < start_iter")

    def active(self, t: int) -> "AttackSpec":
        """The attack actually in force at iteration ``t`` (unwraps transients)."""
        if self.kind != "transient":
            return self
        if self.start_iter <= t < self.stop_iter:
            return self.inner.active(t)
        return AttackSpec("honest", self.byzantine_ids)

    @property
    def max_delay(self) -> int:
        if self.kind == "delayed":
            return self.delay
        if self.kind == "transient":
            return self.inner.max_delay
        return 0


@dataclass
class RoundContext:
    t: int
    x: np.ndarray
    history: Sequence[np.ndarray]
    honest_reports: list[np.ndarray]
    own_gradient: np.ndarray = field(default=None)
    wlog_clip: bool = False
    _shared: dict = field(default_factory=dict, repr=False)

    def point_at(self, k: int) -> np.ndarray:
        """``x_k`` for ``k <= t``; ``history[-1]`` is ``x_t``."""
        back = self.t - k
        if back < 0 or back >= len(self.history):
            raise AttackError(f"point history does not reach iteration {k} (t={self.t})")
        return self.history[-1 - back]


def variance_shift(honest: Sequence[np.ndarray], z_max: float) -> np.ndarray:
    """Coordinate-wise ``mu - z_max * sigma`` over the honest reports (population std)."""
    if len(honest) == 0:
        raise AttackError("variance attack needs at least one honest report")
    H = np.asarray(honest)
    return H.mean(axis=0) - z_max * H.std(axis=0)


def byzantine_report(spec: AttackSpec, ctx: RoundContext, worker: int, obj: Objective,
                     stream: RngStream) -> np.ndarray:
    if worker not in spec.byzantine_ids:
        raise AttackError(f"worker {worker} is not Byzantine")
    attack = spec.active(ctx.t)
    own = ctx.own_gradient
    if own is None:
        own = obj.stochastic_grad(ctx.x, stream)

    if attack.kind == "honest":
        out = own
    elif attack.kind == "sign_flip":
        out = -own
    elif attack.kind == "rescale":
        out = -attack.factor * own
    elif attack.kind == "delayed":
        past = ctx.point_at(max(0, ctx.t - attack.delay))
        out = obj.stochastic_grad(past, stream.with_purpose(ATTACK))
    elif attack.kind == "variance":
        # Every colluder reports the same vector; compute it once per round.
        key = ("variance", attack.z_max)
        if key not in ctx._shared:
            ctx._shared[key] = variance_shift(ctx.honest_reports, attack.z_max)
        out = ctx._shared[key].copy()
    elif attack.kind == "label_flip":
        if not isinstance(obj, SyntheticSoftmax):
            raise AttackError("label_flip needs a classification objective")
        out = obj.flipped().stochastic_grad(ctx.x, stream.with_purpose(ATTACK))
    else:
        raise AttackError(f"unhandled attack {attack.kind!r}")

    if ctx.wlog_clip:
        out = clip_to_ball(out, obj.grad(ctx.x), obj.V)
    return out

