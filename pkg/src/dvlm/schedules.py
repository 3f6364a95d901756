"""Continuous masking schedules and their integer discretization.

A schedule f maps a grid time t_k = k/K to the fraction of masked tokens at
that time. Sampling walks k = K -> 0, so the first reverse step goes from
f(1) = 1 down to f((K-1)/K). A convex f (shift with alpha < 1) drops steeply
near t = 1 and therefore decodes more tokens in the early steps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

from .errors import ConfigError, DomainError

Family = Literal["linear", "cosine", "shift"]
FAMILIES = ("linear", "cosine", "shift")

_TIE_TOL = 1e-9


@dataclass(frozen=True)
class ScheduleSpec:
    family: Family = "shift"
    alpha: float = 1.0 / 3.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown schedule family {self.family!r}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")

    def label(self) -> str:
        if self.family == "shift":
            return f"shift({self.alpha:g})"
        return self.family


def eval_schedule(spec: ScheduleSpec, t: float) -> float:
    if not (0.0 <= t <= 1.0):
        raise DomainError(f"t={t} outside [0, 1]")
    if spec.family == "linear":
        return t
    if spec.family == "cosine":
        return 1.0 - 0.5 * (1.0 + math.cos(math.pi * t))
    if t == 0.0 or t == 1.0:
        return t
    a = spec.alpha
    return min(1.0, max(0.0, a * t / (1.0 + (a - 1.0) * t)))


@dataclass(frozen=True)
class DiscreteSchedule:
    """Masked-token counts F_0..F_K at grid times k/K.

    F_0 = 0 (clean) and F_K = L (fully masked); strictly increasing so every
    reverse step decodes at least one token.
    """

    counts: tuple[int, ...]
    L: int
    spec: ScheduleSpec

    @property
    def K(self) -> int:
        return len(self.counts) - 1

    @property
    def nfe(self) -> float:
        return self.K / self.L

    def masked_trajectory(self) -> list[int]:
        """Masked counts in sampling order, L first and 0 last."""
        return list(reversed(self.counts))

    def reveal_sizes(self) -> list[int]:
        """Tokens decoded at each sampling step, first step first."""
        return list(reversed(step_sizes(self)))

    def to_csv(self) -> str:
        return ",".join(str(c) for c in self.counts)


def targets(spec: ScheduleSpec, L: int, K: int) -> list[float]:
    return [eval_schedule(spec, k / K) * L for k in range(K + 1)]


def objective(counts: Sequence[int], spec: ScheduleSpec, L: int) -> float:
    K = len(counts) - 1
    return sum((c - y) ** 2 for c, y in zip(counts, targets(spec, L, K)))


def discretize(spec: ScheduleSpec, L: int, K: int) -> DiscreteSchedule:
    """Least-squares fit of strictly increasing integer counts to f(k/K)*L.

    Exact DP over (step, count) states; among optimal sequences the
    lexicographically smallest is returned.
    """
    if K < 1:
        raise ConfigError(f"need at least one step, got K={K}")
    if K > L:
        raise ConfigError(f"K={K} > L={L}: cannot decode at least one token per step")
    y = targets(spec, L, K)
    inf = math.inf
    # best[k][c]: minimal cost of F_k..F_K given F_k = c.
    best = [[inf] * (L + 1) for _ in range(K + 1)]
    best[K][L] = (L - y[K]) ** 2
    for k in range(K - 1, -1, -1):
        tail = inf
        # F_k = c is feasible only if c >= k and L - c >= K - k.
        for c in range(L - (K - k), -1, -1):
            tail = min(tail, best[k + 1][c + 1])
            if c < k or (k == 0 and c != 0):
                continue
            best[k][c] = (c - y[k]) ** 2 + tail
    counts = [0]
    for k in range(1, K + 1):
        prev = counts[-1]
        row = best[k]
        lo = min(row[prev + 1 :])
        counts.append(next(c for c in range(prev + 1, L + 1) if row[c] <= lo + _TIE_TOL))
    return DiscreteSchedule(tuple(counts), L, spec)


def step_sizes(ds: DiscreteSchedule) -> list[int]:
    c = ds.counts
    return [c[k] - c[k - 1] for k in range(1, len(c))]


def steps_for_nfe(nfe: float, L: int) -> int:
    """K = ceil(nfe * L), clipped to [1, L]."""
    if not nfe > 0:
        raise ConfigError(f"nfe must be positive, got {nfe}")
    return max(1, min(L, math.ceil(nfe * L - 1e-9)))
