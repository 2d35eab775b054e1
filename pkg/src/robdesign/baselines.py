"""Reference allocation rules: RND, SBD, NBD, BBD.

All four are covariate-blind; they see only the running arm counts. The
non-robust design (NRD) is not here — it is the DP pipeline with the bias
weight zeroed, built by the designers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BASELINE_NAMES = ("RND", "SBD", "NBD", "BBD")


@dataclass(frozen=True)
class BaselineKind:
    name: str
    bias_prob: float = 0.75  # NBD minority-arm probability
    strength: float = 0.5  # BBD logistic imbalance response

    def __post_init__(self):
        if self.name not in BASELINE_NAMES:
            raise ValueError(f"unknown baseline {self.name!r}")
        if not 0.5 < self.bias_prob <= 1.0:
            raise ValueError("bias_prob must lie in (0.5, 1]")


def baseline_allocate(
    kind: BaselineKind,
    n_plus: int,
    n_minus: int,
    rng: np.random.Generator,
    sbd_start: int | None = None,
) -> int:
    """One +/-1 action from the arm counts so far.

    RND flips a fair coin. SBD alternates deterministically; its start sign
    is drawn from rng on the first call when not supplied. NBD plays the
    minority arm with probability bias_prob (fair coin at balance). BBD
    biases toward the lagging arm through a logistic in the count imbalance.
    """
    if kind.name == "RND":
        return 1 if rng.random() < 0.5 else -1
    if kind.name == "SBD":
        step = n_plus + n_minus
        start = sbd_start
        if start is None:
            start = 1 if rng.random() < 0.5 else -1
        return start if step % 2 == 0 else -start
    imbalance = n_plus - n_minus
    if kind.name == "NBD":
        if imbalance == 0:
            return 1 if rng.random() < 0.5 else -1
        minority = -1 if imbalance > 0 else 1
        return minority if rng.random() < kind.bias_prob else -minority
    # BBD
    p_plus = 1.0 / (1.0 + np.exp(kind.strength * imbalance))
    return 1 if rng.random() < p_plus else -1


class BaselineAllocator:
    """Stateful per-replication wrapper threading counts and the SBD start."""

    def __init__(self, kind: BaselineKind, rng: np.random.Generator):
        self.kind = kind
        self.rng = rng
        self.n_plus = 0
        self.n_minus = 0
        self._sbd_start = (1 if rng.random() < 0.5 else -1) if kind.name == "SBD" else None

    def next_action(self) -> int:
        a = baseline_allocate(
            self.kind, self.n_plus, self.n_minus, self.rng, sbd_start=self._sbd_start
        )
        if a == 1:
            self.n_plus += 1
        else:
            self.n_minus += 1
        return a
