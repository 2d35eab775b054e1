"""Terminal objectives and rewards for the design problems.

Four surfaces:

* exact_conditional_mse -- the projection-form conditional MSE of the OLS
  treatment-effect estimate on a fully observed dataset (test oracle and
  dominance reference).
* additive_bound        -- worst-case MSE surrogate in the additive setting,
  a function of the signed-sum state (delta, gamma).
* interactive_bound     -- worst-case MSE surrogate in the interactive
  setting, a function of the signed-Gram state (omega1, omega2).
* dynamic_reward        -- per-interval day-level reward assembled from
  across-day summary blocks plus current (and optionally simulated future)
  contributions; sums to the dynamic objective.

Scalar forms raise DegenerateDesign outside their domain; batched forms
return an ok-mask instead so rollout engines can drop or resample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDesign, NotSPD
from .numerics import batched_invert_spd, invert_spd, solve_spd
from .sieve import PopulationMoments

DENOM_FLOOR = 1e-6
# reward assembly marks barely identifiable interval Grams as degenerate:
# a Cholesky pivot this small inflates G^{-1} (and the reward) by >= 1e4,
# which destabilizes the actor-critic targets
REWARD_SPD_FLOOR = 1e-4


def exact_conditional_mse(
    X: np.ndarray, a: np.ndarray, f_vals: np.ndarray, sigma2: float
) -> tuple[float, float]:
    """(variance, squared bias) of the additive-model OLS effect estimate.

    Projection form: variance = sigma^2 / (a' P a) and bias = a' P f / (a' P a)
    with P the projector onto the orthogonal complement of col(X).
    """
    X = np.asarray(X, dtype=float)
    a = np.asarray(a, dtype=float)
    f_vals = np.asarray(f_vals, dtype=float)
    gram = X.T @ X
    xa = X.T @ a
    xf = X.T @ f_vals
    try:
        ga = solve_spd(gram, xa)
        gf = solve_spd(gram, xf)
    except NotSPD as exc:
        raise DegenerateDesign(f"covariate Gram matrix is singular: {exc}") from exc
    o1 = float(a @ a - xa @ ga)
    if o1 <= 1e-10:
        raise DegenerateDesign(f"residual allocation norm {o1:.3e} <= 1e-10")
    apf = float(a @ f_vals - xa @ gf)
    return sigma2 / o1, (apf / o1) ** 2


def additive_bound_batch(
    deltas: np.ndarray,
    gammas: np.ndarray,
    pm: PopulationMoments,
    n_total: int,
    sigma2: float,
    floor: float = DENOM_FLOOR,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized additive worst-case bound over rows of (deltas, gammas).

    Returns (values, ok); entries with ok == False hold +inf.
    """
    deltas = np.atleast_2d(np.asarray(deltas, dtype=float))
    gammas = np.atleast_2d(np.asarray(gammas, dtype=float))
    quad = np.einsum("kp,pq,kq->k", deltas, pm.sigma_inv, deltas)
    denom = n_total - quad / n_total
    ok = denom > floor
    safe = np.where(ok, denom, 1.0)
    proj = pm.u_basis.T  # (r, L)
    cross = proj @ pm.xi @ pm.sigma_inv  # (r, p)
    bias_vec = gammas @ proj.T - deltas @ cross.T
    bias_sq = np.einsum("kr,kr->k", bias_vec, bias_vec)
    eta2 = pm.nu2 * sigma2
    vals = sigma2 / safe + eta2 * bias_sq / safe**2
    return np.where(ok, vals, np.inf), ok


def additive_bound(
    state,
    pm: PopulationMoments,
    n_total: int,
    sigma2: float,
    floor: float = DENOM_FLOOR,
) -> float:
    """Worst-case MSE bound at an additive state (delta, gamma)."""
    vals, ok = additive_bound_batch(
        state.delta[None, :], state.gamma[None, :], pm, n_total, sigma2, floor
    )
    if not ok[0]:
        raise DegenerateDesign(
            f"variance denominator hit the floor {floor:g} at n_total={n_total}"
        )
    return float(vals[0])


def interactive_bound_batch(
    omega1: np.ndarray,
    omega2: np.ndarray,
    pm: PopulationMoments,
    n_total: int,
    sigma2: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized interactive worst-case bound over stacked states.

    omega1: (K, p, p) signed covariate Grams; omega2: (K, p, L) signed
    covariate-feature Grams. Returns (values, ok); failures hold +inf.
    """
    omega1 = np.asarray(omega1, dtype=float)
    omega2 = np.asarray(omega2, dtype=float)
    if omega1.ndim == 2:
        omega1 = omega1[None]
        omega2 = omega2[None]
    plus = pm.sigma[None] + omega1 / n_total
    minus = pm.sigma[None] - omega1 / n_total
    h1, ok1 = batched_invert_spd(plus)
    h2, ok2 = batched_invert_spd(minus)
    ok = ok1 & ok2
    xi_t = pm.xi.T[None]  # (1, p, L)
    h3 = xi_t + omega2 / n_total
    h4 = xi_t - omega2 / n_total
    diff = h1 @ h3 - h2 @ h4  # (K, p, L)
    mean = pm.mean_x
    # (H1 H3 - H2 H4)' E X, then its component in the null-space basis
    vec = np.einsum("kpl,p->kl", diff, mean)
    bias_vec = vec @ pm.u_basis
    bias_sq = np.einsum("kr,kr->k", bias_vec, bias_vec)
    var = (2.0 * sigma2 / n_total) * np.einsum("p,kpq,q->k", mean, h1 + h2, mean)
    eta2 = pm.nu2 * sigma2
    vals = var + eta2 * bias_sq
    return np.where(ok, vals, np.inf), ok


def interactive_bound(
    state, pm: PopulationMoments, n_total: int, sigma2: float
) -> float:
    """Worst-case MSE bound at an interactive state (omega1, omega2)."""
    vals, ok = interactive_bound_batch(
        state.omega1[None], state.omega2[None], pm, n_total, sigma2
    )
    if not ok[0]:
        raise DegenerateDesign("a group Gram matrix failed the SPD check")
    return float(vals[0])


@dataclass
class DesignPriors:
    """Per-interval design priors for the dynamic setting.

    u       -- (T, 2p) counterfactual mean stacks (sum; difference)
    sigma2  -- (T,) noise variances
    eta2    -- (T,) bias weights (paper default 1.0)
    u_basis -- per-interval orthonormal null-space bases, each (L, r_t)
    """

    u: np.ndarray
    sigma2: np.ndarray
    eta2: np.ndarray
    u_basis: list

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.sigma2 = np.asarray(self.sigma2, dtype=float)
        self.eta2 = np.asarray(self.eta2, dtype=float)
        if np.any(self.sigma2 <= 0):
            raise ValueError("sigma2 entries must be positive")
        if np.any(self.eta2 < 0):
            raise ValueError("eta2 entries must be nonnegative")

    @property
    def intervals(self) -> int:
        return self.u.shape[0]


def _assemble_gh(sig, om1, xi, om2):
    """G = [[sig, om1], [om1, sig]] and H = [om2 | xi] from interval blocks."""
    top = np.concatenate([sig, om1], axis=-1)
    bottom = np.concatenate([om1, sig], axis=-1)
    g = np.concatenate([top, bottom], axis=-2)
    h = np.concatenate([om2, xi], axis=-1)
    return g, h


def dynamic_reward(
    blocks: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray],
    x: np.ndarray,
    psi_x: np.ndarray,
    a: int,
    t: int,
    priors: DesignPriors,
    n_days: int,
    horizon: int,
    future_fill: tuple | None = None,
    floor: float = REWARD_SPD_FLOOR,
) -> float:
    """Day-level reward at interval t given past blocks and the current pair.

    blocks are the (sigma, omega1, xi, omega2) summaries at interval t,
    already (1/N)-normalized; future_fill, when given, holds same-shape
    (1/N)-weighted contributions of simulated future days. Always <= 0.
    """
    sigma_t, omega1_t, xi_blk, omega2_blk = blocks
    w = 1.0 / n_days
    xx = np.outer(x, x)
    px = np.outer(psi_x, x)
    sig = sigma_t + w * xx
    om1 = omega1_t + w * a * xx
    xi_cur = xi_blk + w * px
    om2 = omega2_blk + w * a * px
    if future_fill is not None:
        fs, fo1, fxi, fo2 = future_fill
        sig = sig + fs
        om1 = om1 + fo1
        xi_cur = xi_cur + fxi
        om2 = om2 + fo2
    g, h = _assemble_gh(sig, om1, xi_cur, om2)
    try:
        g_inv = invert_spd(g, floor=floor)
    except NotSPD as exc:
        raise DegenerateDesign(f"interval Gram matrix singular at t={t}: {exc}") from exc
    u_t = priors.u[t]
    gu = g_inv @ u_t
    var_term = (priors.sigma2[t] / n_days) * float(u_t @ gu)
    bias_vec = priors.u_basis[t].T @ (h @ gu)
    bias_term = priors.eta2[t] * float(bias_vec @ bias_vec)
    return -(var_term + bias_term) / horizon


def dynamic_reward_batch(
    blocks: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray],
    x: np.ndarray,
    psi_x: np.ndarray,
    a: np.ndarray,
    t: int,
    priors: DesignPriors,
    n_days: int,
    horizon: int,
    future_fill: tuple | None = None,
    floor: float = REWARD_SPD_FLOOR,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized dynamic_reward over a rollout batch.

    blocks hold (B, ...) stacks of the interval-t summaries; x is (B, p),
    psi_x is (B, L), a is (B,). Returns (rewards, ok).
    """
    sigma_t, omega1_t, xi_blk, omega2_blk = blocks
    w = 1.0 / n_days
    a = np.asarray(a, dtype=float)
    xx = np.einsum("bp,bq->bpq", x, x)
    px = np.einsum("bl,bp->blp", psi_x, x)
    sig = sigma_t + w * xx
    om1 = omega1_t + w * a[:, None, None] * xx
    xi_cur = xi_blk + w * px
    om2 = omega2_blk + w * a[:, None, None] * px
    if future_fill is not None:
        fs, fo1, fxi, fo2 = future_fill
        sig = sig + fs
        om1 = om1 + fo1
        xi_cur = xi_cur + fxi
        om2 = om2 + fo2
    g, h = _assemble_gh(sig, om1, xi_cur, om2)
    g_inv, ok = batched_invert_spd(g, floor=floor)
    u_t = priors.u[t]
    gu = g_inv @ u_t
    var_term = (priors.sigma2[t] / n_days) * np.einsum("p,bp->b", u_t, gu)
    proj = priors.u_basis[t].T
    bias_vec = np.einsum("rl,blp,bp->br", proj, h, gu)
    bias_term = priors.eta2[t] * np.einsum("br,br->b", bias_vec, bias_vec)
    rewards = -(var_term + bias_term) / horizon
    return np.where(ok, rewards, -np.inf), ok


def dynamic_objective(
    covariates: np.ndarray,
    actions: np.ndarray,
    features: np.ndarray,
    priors: DesignPriors,
    floor: float = REWARD_SPD_FLOOR,
) -> float:
    """Dynamic design objective of a completed N-day dataset.

    covariates: (N, T, p); actions: (N, T) in {-1, +1}; features: (N, T, L).
    Equals the per-interval sum of sigma2_t/N u' G^{-1} u + eta2_t
    ||U' H G^{-1} u||^2 with G_t, H_t the (1/N)-normalized full-data Grams;
    -horizon times the sum of the final day's rewards reproduces it.
    """
    n_days, intervals, _ = covariates.shape
    total = 0.0
    for t in range(intervals):
        xs = covariates[:, t, :]
        ps = features[:, t, :]
        acts = actions[:, t].astype(float)
        sig = xs.T @ xs / n_days
        om1 = (xs * acts[:, None]).T @ xs / n_days
        xi_blk = ps.T @ xs / n_days
        om2 = (ps * acts[:, None]).T @ xs / n_days
        g, h = _assemble_gh(sig, om1, xi_blk, om2)
        try:
            g_inv = invert_spd(g, floor=floor)
        except NotSPD as exc:
            raise DegenerateDesign(f"interval Gram matrix singular at t={t}: {exc}") from exc
        u_t = priors.u[t]
        gu = g_inv @ u_t
        var_term = (priors.sigma2[t] / n_days) * float(u_t @ gu)
        bias_vec = priors.u_basis[t].T @ (h @ gu)
        total += var_term + priors.eta2[t] * float(bias_vec @ bias_vec)
    return total


def estimate_counterfactual_means(
    sim, intervals: int, n_rollouts: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo means of X_t under the constant +1 and -1 policies.

    Uses common random numbers across the two arms, so action-independent
    dynamics give an exactly zero difference.
    """
    if n_rollouts < 1000:
        raise ValueError("need at least 1000 rollouts for counterfactual means")
    means = {}
    for arm in (1, -1):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA11)))
        x = sim.init_covariates(rng, n_rollouts)
        per_t = [x.mean(axis=0)]
        acts = np.full(n_rollouts, arm)
        for t in range(intervals - 1):
            x = sim.transition(rng, x, acts, t)
            per_t.append(x.mean(axis=0))
        means[arm] = np.stack(per_t, axis=0)
    return means[1], means[-1]


def estimate_u_t(sim, intervals: int, n_rollouts: int, seed: int) -> np.ndarray:
    """Per-interval (T, 2p) design-prior vectors from constant-policy rollouts."""
    mean_pos, mean_neg = estimate_counterfactual_means(sim, intervals, n_rollouts, seed)
    return np.concatenate([mean_pos + mean_neg, mean_pos - mean_neg], axis=1)
