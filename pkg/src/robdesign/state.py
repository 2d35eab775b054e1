"""Markov summary statistics for the sequential allocation problems.

Three state families, all immutable with update-returning-new-state
semantics (the rollout engines explore both actions from one state, which
forbids in-place mutation):

* AdditiveState    -- signed covariate/feature sums (delta, gamma)
* InteractiveState -- signed Gram matrices (omega1, omega2)
* DayState         -- per-interval normalized Gram blocks across days
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import HorizonExceeded


@dataclass(frozen=True)
class AdditiveState:
    delta: np.ndarray
    gamma: np.ndarray
    n_seen: int = 0

    @classmethod
    def zero(cls, p: int, feature_dim: int) -> "AdditiveState":
        return cls(delta=np.zeros(p), gamma=np.zeros(feature_dim), n_seen=0)


def additive_update(s: AdditiveState, x: np.ndarray, psi_x: np.ndarray, a: int) -> AdditiveState:
    """New state with delta += a*x and gamma += a*psi_x."""
    if a not in (-1, 1):
        raise ValueError("action must be +1 or -1")
    return AdditiveState(delta=s.delta + a * x, gamma=s.gamma + a * psi_x, n_seen=s.n_seen + 1)


@dataclass(frozen=True)
class InteractiveState:
    omega1: np.ndarray
    omega2: np.ndarray
    n_seen: int = 0

    @classmethod
    def zero(cls, p: int, feature_dim: int) -> "InteractiveState":
        return cls(omega1=np.zeros((p, p)), omega2=np.zeros((p, feature_dim)), n_seen=0)


def interactive_update(
    s: InteractiveState, x: np.ndarray, psi_x: np.ndarray, a: int
) -> InteractiveState:
    """New state with omega1 += a*x x' and omega2 += a*x psi_x'."""
    if a not in (-1, 1):
        raise ValueError("action must be +1 or -1")
    return InteractiveState(
        omega1=s.omega1 + a * np.outer(x, x),
        omega2=s.omega2 + a * np.outer(x, psi_x),
        n_seen=s.n_seen + 1,
    )


@dataclass(frozen=True)
class DayState:
    """Across-day summaries, one block per within-day interval.

    sigma[t], omega1[t] are (p, p); xi[t], omega2[t] are (L, p). Every
    block is a (1/N)-normalized sum over the days folded in so far, so the
    blocks feed the day-level reward directly.
    """

    sigma: np.ndarray
    omega1: np.ndarray
    xi: np.ndarray
    omega2: np.ndarray
    days_seen: int
    horizon: int

    @classmethod
    def zero(cls, horizon_days: int, intervals: int, p: int, feature_dim: int) -> "DayState":
        return cls(
            sigma=np.zeros((intervals, p, p)),
            omega1=np.zeros((intervals, p, p)),
            xi=np.zeros((intervals, feature_dim, p)),
            omega2=np.zeros((intervals, feature_dim, p)),
            days_seen=0,
            horizon=horizon_days,
        )

    @property
    def intervals(self) -> int:
        return self.sigma.shape[0]


def day_update(s: DayState, day: list[tuple[np.ndarray, np.ndarray, int]]) -> DayState:
    """Fold one full day of (x, psi_x, action) triples into the state."""
    if s.days_seen >= s.horizon:
        raise HorizonExceeded(f"state already holds {s.days_seen} of {s.horizon} days")
    if len(day) != s.intervals:
        raise ValueError(f"day must have exactly {s.intervals} entries, got {len(day)}")
    scale = 1.0 / s.horizon
    sigma = s.sigma.copy()
    omega1 = s.omega1.copy()
    xi = s.xi.copy()
    omega2 = s.omega2.copy()
    for t, (x, psi_x, a) in enumerate(day):
        if a not in (-1, 1):
            raise ValueError("action must be +1 or -1")
        xx = np.outer(x, x)
        px = np.outer(psi_x, x)
        sigma[t] += scale * xx
        omega1[t] += scale * a * xx
        xi[t] += scale * px
        omega2[t] += scale * a * px
    return DayState(
        sigma=sigma,
        omega1=omega1,
        xi=xi,
        omega2=omega2,
        days_seen=s.days_seen + 1,
        horizon=s.horizon,
    )
