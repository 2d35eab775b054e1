"""Backward value-function training and greedy online allocation for the
contextual-bandit settings (additive and interactive).

Stage values are approximated with small regressors fit on synthetic
rollouts: states are sampled under a broad behavior policy, targets are
Monte Carlo averages of the min-over-action next-stage value against a
shared set of covariate draws, and the terminal stage is the closed-form
worst-case bound. Online allocation evaluates the current-stage value at
both candidate updated states and takes the argmin (fair coin on ties).
"""

from __future__ import annotations

import json
import pathlib
from dataclasses import dataclass, field

import numpy as np

from .errors import HorizonExceeded, InsufficientData
from .objective import additive_bound_batch, interactive_bound_batch
from .sieve import PopulationMoments, SieveBasis, featurize, featurize_batch
from .state import AdditiveState, InteractiveState, additive_update, interactive_update
from .valuenet import (
    NetParams,
    NetSpec,
    TrainConfig,
    load_checkpoint,
    net_init,
    net_predict,
    net_train,
    save_checkpoint,
)

POLICY_FORMAT_VERSION = 1
MAX_RESAMPLE_RETRIES = 10
MAX_DROP_FRACTION = 0.2


class EmpiricalCovariates:
    """Discrete covariate law (support points + probabilities)."""

    def __init__(self, points: np.ndarray, probs: np.ndarray | None = None):
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        k = len(self.points)
        self.probs = np.full(k, 1.0 / k) if probs is None else np.asarray(probs, dtype=float)
        if abs(self.probs.sum() - 1.0) > 1e-12 or np.any(self.probs < 0):
            raise ValueError("probs must be a probability vector")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx = rng.choice(len(self.points), size=n, p=self.probs)
        return self.points[idx]


class DgpCovariates:
    """Covariate sampler view over a bandit DGP."""

    def __init__(self, dgp):
        self.dgp = dgp

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.dgp.draw_covariates(rng, n)


def sample_behavior_actions(rng: np.random.Generator, n: int) -> np.ndarray:
    """One length-n action sequence from the rollout behavior mixture.

    Modes (equal weight): uniform random; switchback from a random start;
    fixed imbalance with k pluses, k uniform on 0..n. The mixture spans the
    whole range of count-imbalance levels without enumerating them.
    """
    mode = rng.integers(0, 3)
    if mode == 0:
        return rng.integers(0, 2, size=n) * 2 - 1
    if mode == 1:
        start = 1 if rng.random() < 0.5 else -1
        return start * (-1) ** np.arange(n)
    k = int(rng.integers(0, n + 1))
    actions = np.full(n, -1, dtype=int)
    actions[rng.permutation(n)[:k]] = 1
    return actions


@dataclass
class BanditDesignPolicy:
    """Trained stagewise design for one horizon.

    nets[k] approximates the stage-(k+1) value for k = 0..N-2; the
    terminal stage is evaluated in closed form from the moments.
    """

    horizon: int
    setting: str  # additive | interactive
    nets: list
    pm: PopulationMoments
    basis: SieveBasis
    sigma2: float
    log_targets: bool = True
    full_layout: bool = False
    seed: int = 0
    train_log: list = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self):
        if self.setting not in ("additive", "interactive"):
            raise ValueError(f"unknown setting {self.setting!r}")
        if len(self.nets) != self.horizon - 1:
            raise ValueError("need exactly horizon-1 stage nets")
        self._tie_rng = np.random.default_rng(np.random.SeedSequence((self.seed, 0x7E)))

    @property
    def p(self) -> int:
        return self.pm.p

    @property
    def feature_dim(self) -> int:
        return self.pm.feature_dim

    def zero_state(self):
        if self.setting == "additive":
            return AdditiveState.zero(self.p, self.feature_dim)
        return InteractiveState.zero(self.p, self.feature_dim)

    def net_input_dim(self) -> int:
        if self.setting == "additive":
            return self.p + self.feature_dim
        if self.full_layout:
            return self.p * self.p + self.p * self.feature_dim
        return self.p * (self.p + 1) // 2 + self.p * self.feature_dim


def additive_net_inputs(deltas: np.ndarray, gammas: np.ndarray) -> np.ndarray:
    return np.concatenate([np.atleast_2d(deltas), np.atleast_2d(gammas)], axis=1)


def interactive_net_inputs(
    omega1: np.ndarray, omega2: np.ndarray, full_layout: bool, p: int
) -> np.ndarray:
    """Flatten signed Grams: upper triangle of omega1 (symmetry) plus all
    of omega2 by default; the literal full vectorization behind a flag."""
    omega1 = np.asarray(omega1, dtype=float).reshape(-1, p, p)
    omega2 = np.asarray(omega2, dtype=float)
    omega2 = omega2.reshape(len(omega1), -1)
    if full_layout:
        return np.concatenate([omega1.reshape(len(omega1), -1), omega2], axis=1)
    iu = np.triu_indices(p)
    return np.concatenate([omega1[:, iu[0], iu[1]], omega2], axis=1)


def _net_value_fn(net: NetParams, log_targets: bool, chunk: int = 131_072):
    def evaluate(inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = len(inputs)
        vals = np.empty(n)
        for start in range(0, n, chunk):
            vals[start : start + chunk] = net_predict(net, inputs[start : start + chunk])
        if log_targets:
            vals = np.exp(vals)
        return vals, np.ones(n, dtype=bool)

    return evaluate


def make_stage_evaluator(policy: BanditDesignPolicy, stage: int):
    """Value evaluator for a 1-based stage: the fitted net below the
    horizon, the closed-form bound at it. Returns (values, ok) batches."""
    if stage < policy.horizon:
        net_fn = _net_value_fn(policy.nets[stage - 1], policy.log_targets)
        if policy.setting == "additive":
            return lambda deltas, gammas: net_fn(additive_net_inputs(deltas, gammas))
        return lambda o1, o2: net_fn(
            interactive_net_inputs(o1, o2, policy.full_layout, policy.p)
        )
    if policy.setting == "additive":
        return lambda deltas, gammas: additive_bound_batch(
            deltas, gammas, policy.pm, policy.horizon, policy.sigma2
        )
    return lambda o1, o2: interactive_bound_batch(
        o1, o2, policy.pm, policy.horizon, policy.sigma2
    )


def _draw_rollout_state(rng, cov, basis, behavior, stage, interactive):
    xs = cov.sample(rng, stage)
    feats = featurize_batch(basis, xs)
    acts = behavior(rng, stage).astype(float)
    if interactive:
        omega1 = np.einsum("n,np,nq->pq", acts, xs, xs)
        omega2 = np.einsum("n,np,nl->pl", acts, xs, feats)
        return omega1, omega2
    return acts @ xs, acts @ feats


def _targets_additive(deltas, gammas, x_next, psi_next, weights, next_value, chunk=256):
    """Per-rollout Bellman targets and feasibility for the additive state."""
    n_roll = len(deltas)
    per_rollout_draws = x_next.ndim == 3
    m = x_next.shape[-2]
    signs = np.array([1.0, -1.0])
    targets = np.empty(n_roll)
    ok = np.ones(n_roll, dtype=bool)
    for start in range(0, n_roll, chunk):
        stop = min(start + chunk, n_roll)
        d = deltas[start:stop]
        g = gammas[start:stop]
        b = len(d)
        xn = x_next[start:stop] if per_rollout_draws else x_next[None, :, :]
        pn = psi_next[start:stop] if per_rollout_draws else psi_next[None, :, :]
        cand_d = d[:, None, None, :] + signs[None, None, :, None] * xn[:, :, None, :]
        cand_g = g[:, None, None, :] + signs[None, None, :, None] * pn[:, :, None, :]
        vals, fin = next_value(cand_d.reshape(b * m * 2, -1), cand_g.reshape(b * m * 2, -1))
        vals = np.where(fin, vals, np.inf).reshape(b, m, 2)
        best = vals.min(axis=2)
        feasible = np.isfinite(best)
        ok[start:stop] = feasible.all(axis=1)
        targets[start:stop] = (np.where(feasible, best, 0.0) * weights).sum(axis=1)
    return targets, ok


def _targets_interactive(omega1, omega2, x_next, psi_next, weights, next_value, chunk=64):
    n_roll = len(omega1)
    per_rollout_draws = x_next.ndim == 3
    m = x_next.shape[-2]
    signs = np.array([1.0, -1.0])
    targets = np.empty(n_roll)
    ok = np.ones(n_roll, dtype=bool)
    p, feat_dim = omega2.shape[1], omega2.shape[2]
    for start in range(0, n_roll, chunk):
        stop = min(start + chunk, n_roll)
        o1 = omega1[start:stop]
        o2 = omega2[start:stop]
        b = len(o1)
        xn = x_next[start:stop] if per_rollout_draws else np.broadcast_to(x_next, (b, m, p))
        pn = psi_next[start:stop] if per_rollout_draws else np.broadcast_to(psi_next, (b, m, feat_dim))
        xx = np.einsum("bmp,bmq->bmpq", xn, xn)
        xpsi = np.einsum("bmp,bml->bmpl", xn, pn)
        cand1 = o1[:, None, None, :, :] + signs[None, None, :, None, None] * xx[:, :, None, :, :]
        cand2 = o2[:, None, None, :, :] + signs[None, None, :, None, None] * xpsi[:, :, None, :, :]
        vals, fin = next_value(cand1.reshape(-1, p, p), cand2.reshape(-1, p, feat_dim))
        vals = np.where(fin, vals, np.inf).reshape(b, m, 2)
        best = vals.min(axis=2)
        feasible = np.isfinite(best)
        ok[start:stop] = feasible.all(axis=1)
        targets[start:stop] = (np.where(feasible, best, 0.0) * weights).sum(axis=1)
    return targets, ok


def build_stage_targets(
    stage: int,
    next_value,
    cov,
    basis: SieveBasis,
    setting: str,
    n_rollouts: int,
    n_mc: int,
    seed: int,
    behavior=sample_behavior_actions,
    exhaustive: bool = False,
    fresh_draws: bool = False,
):
    """Synthetic rollout states and their Bellman-backup targets.

    Each rollout's draws come from a child stream keyed by (seed, stage,
    rollout, retry), so targets for early rollouts do not move when the
    batch size grows. Rollouts whose backup is degenerate for both actions
    under some next-step draw are resampled up to 10 times, then dropped;
    dropping more than 20% raises InsufficientData.

    Returns (net_inputs, targets, n_dropped).
    """
    interactive = setting == "interactive"
    shared_rng = np.random.default_rng(np.random.SeedSequence((seed, stage, 0xF00D)))
    if exhaustive:
        x_shared = cov.points
        weights = cov.probs
    else:
        x_shared = cov.sample(shared_rng, n_mc)
        weights = np.full(len(x_shared), 1.0 / len(x_shared))
    psi_shared = featurize_batch(basis, x_shared)

    def draw_states(indices, retry):
        first, second = [], []
        for b in indices:
            rng = np.random.default_rng(np.random.SeedSequence((seed, stage, int(b), retry)))
            s1, s2 = _draw_rollout_state(rng, cov, basis, behavior, stage, interactive)
            first.append(s1)
            second.append(s2)
        return np.array(first), np.array(second)

    def draw_fresh(indices, retry):
        xs = np.empty((len(indices), n_mc, x_shared.shape[-1]))
        for row, b in enumerate(indices):
            rng = np.random.default_rng(
                np.random.SeedSequence((seed, stage, int(b), retry, 0xD0))
            )
            xs[row] = cov.sample(rng, n_mc)
        return xs, featurize_batch(basis, xs.reshape(-1, xs.shape[-1])).reshape(
            len(indices), n_mc, -1
        )

    compute = _targets_interactive if interactive else _targets_additive
    all_idx = np.arange(n_rollouts)
    s1, s2 = draw_states(all_idx, 0)
    if fresh_draws:
        xn, pn = draw_fresh(all_idx, 0)
        targets, ok = compute(s1, s2, xn, pn, weights, next_value)
    else:
        targets, ok = compute(s1, s2, x_shared, psi_shared, weights, next_value)

    for retry in range(1, MAX_RESAMPLE_RETRIES + 1):
        bad = np.flatnonzero(~ok)
        if bad.size == 0:
            break
        r1, r2 = draw_states(bad, retry)
        if fresh_draws:
            xn, pn = draw_fresh(bad, retry)
            new_t, new_ok = compute(r1, r2, xn, pn, weights, next_value)
        else:
            new_t, new_ok = compute(r1, r2, x_shared, psi_shared, weights, next_value)
        s1[bad] = r1
        s2[bad] = r2
        targets[bad] = new_t
        ok[bad] = new_ok

    n_dropped = int(np.sum(~ok))
    if n_dropped > MAX_DROP_FRACTION * n_rollouts:
        raise InsufficientData(
            f"stage {stage}: dropped {n_dropped}/{n_rollouts} rollouts as degenerate"
        )
    return (s1[ok], s2[ok]), targets[ok], n_dropped


REFIT_R2_FLOOR = 0.6
MAX_REFITS = 2


def train_stage(
    stage: int,
    next_value,
    cov,
    behavior,
    n_rollouts: int,
    n_mc: int,
    cfg: TrainConfig,
    seed: int,
    *,
    basis: SieveBasis,
    setting: str,
    net_spec: NetSpec,
    full_layout: bool = False,
    exhaustive: bool = False,
    fresh_draws: bool = False,
    refit_r2_floor: float = REFIT_R2_FLOOR,
    max_refits: int = MAX_REFITS,
):
    """Fit one stage value net on synthetic-rollout Bellman targets.

    A poorly fit stage poisons every earlier stage through the backward
    recursion, so fits with held-out R^2 below the floor are retried from
    fresh initializations (deterministic seed children) and the best
    validation loss wins. Stages whose targets are nearly constant skip
    the gate: R^2 is meaningless there and any fit reproduces the level.
    """
    (s1, s2), targets, n_dropped = build_stage_targets(
        stage,
        next_value,
        cov,
        basis,
        setting,
        n_rollouts,
        n_mc,
        seed,
        behavior=behavior or sample_behavior_actions,
        exhaustive=exhaustive,
        fresh_draws=fresh_draws,
    )
    if setting == "interactive":
        inputs = interactive_net_inputs(s1, s2, full_layout, s1.shape[1])
    else:
        inputs = additive_net_inputs(s1, s2)
    log_spread = float(np.std(np.log(targets + 1e-12)))
    gate_active = log_spread > 0.01
    best = None
    for attempt in range(max_refits + 1):
        init_seed = int(
            np.random.SeedSequence((seed, stage, 0x11, attempt)).generate_state(1)[0]
        )
        params = net_init(net_spec, seed=init_seed)
        fitted, report = net_train(
            params, inputs, targets, cfg, seed=seed + stage + 7919 * attempt
        )
        if best is None or report.val_loss < best[1].val_loss:
            best = (fitted, report)
        if not gate_active or best[1].r2 >= refit_r2_floor:
            break
    fitted, report = best
    return fitted, report, n_dropped


def train_policy(
    setting: str,
    horizon: int,
    pm: PopulationMoments,
    basis: SieveBasis,
    cov,
    behavior,
    n_rollouts: int,
    n_mc: int,
    cfg: TrainConfig,
    seed: int,
    net_hidden: tuple[int, ...] = (48, 32),
    net_activation: str = "swish",
    net_dropout: tuple[float, ...] = (),
    net_batch_norm: bool = False,
    full_layout: bool = False,
    sigma2: float = 1.0,
    fresh_draws: bool = False,
    exhaustive: bool = False,
) -> BanditDesignPolicy:
    """Backward loop over stages, each consuming the previous stage's net.

    Stage N is the closed-form terminal objective; with nu2 = 0 on the
    moments the same code path yields the non-robust (variance-only)
    design. The per-stage fit reports land on policy.train_log.
    """
    policy = BanditDesignPolicy(
        horizon=horizon,
        setting=setting,
        nets=[None] * (horizon - 1),
        pm=pm,
        basis=basis,
        sigma2=sigma2,
        log_targets=cfg.target_transform == "log",
        full_layout=full_layout,
        seed=seed,
    )
    input_dim = policy.net_input_dim()
    net_spec = NetSpec(
        input_dim=input_dim,
        hidden=net_hidden,
        activation=net_activation,
        dropout=net_dropout,
        batch_norm=net_batch_norm,
    )
    next_value = make_stage_evaluator(policy, horizon)
    log = []
    for stage in range(horizon - 1, 0, -1):
        net, report, n_dropped = train_stage(
            stage,
            next_value,
            cov,
            behavior,
            n_rollouts,
            n_mc,
            cfg,
            seed,
            basis=basis,
            setting=setting,
            net_spec=net_spec,
            full_layout=full_layout,
            fresh_draws=fresh_draws,
            exhaustive=exhaustive,
        )
        policy.nets[stage - 1] = net
        log.append(
            {
                "stage": stage,
                "val_loss": report.val_loss,
                "r2": report.r2,
                "epochs": report.epochs_run,
                "dropped": n_dropped,
            }
        )
        next_value = make_stage_evaluator(policy, stage)
    policy.train_log = log[::-1]
    return policy


def allocate(policy: BanditDesignPolicy, s, x_new: np.ndarray, rng=None):
    """Greedy action for the next arrival: evaluate the stage value at both
    candidate updated states, take the argmin, break exact ties fairly.

    Both candidates being infeasible (degenerate bound) is an exact tie in
    the extended-value sense, so the coin also decides there (the N = 1
    horizon hits this on every allocation). Returns (action, updated
    state); the rng is only consumed on ties.
    """
    if s.n_seen >= policy.horizon:
        raise HorizonExceeded(f"{s.n_seen} units already allocated of {policy.horizon}")
    rng = policy._tie_rng if rng is None else rng
    psi = featurize(policy.basis, x_new)
    stage = s.n_seen + 1
    evaluator = make_stage_evaluator(policy, stage)
    if policy.setting == "additive":
        cand_first = np.stack([s.delta + x_new, s.delta - x_new])
        cand_second = np.stack([s.gamma + psi, s.gamma - psi])
    else:
        xx = np.outer(x_new, x_new)
        xpsi = np.outer(x_new, psi)
        cand_first = np.stack([s.omega1 + xx, s.omega1 - xx])
        cand_second = np.stack([s.omega2 + xpsi, s.omega2 - xpsi])
    vals, ok = evaluator(cand_first, cand_second)
    vals = np.where(ok, vals, np.inf)
    if vals[0] == vals[1]:
        action = 1 if rng.random() < 0.5 else -1
    else:
        action = 1 if vals[0] < vals[1] else -1
    update = additive_update if policy.setting == "additive" else interactive_update
    return action, update(s, x_new, psi, action)


class BanditPolicyDesign:
    """Replication-harness adapter threading the policy state."""

    def __init__(self, policy: BanditDesignPolicy, name: str):
        self.policy = policy
        self.name = name

    def make_allocator(self, rng: np.random.Generator):
        policy = self.policy
        state = policy.zero_state()

        class _A:
            def __init__(self):
                self.state = state

            def choose(self, x):
                action, self.state = allocate(policy, self.state, x, rng=rng)
                return action

        return _A()


def save_policy(policy: BanditDesignPolicy, dirpath) -> None:
    path = pathlib.Path(dirpath)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": POLICY_FORMAT_VERSION,
        "horizon": policy.horizon,
        "setting": policy.setting,
        "sigma2": policy.sigma2,
        "nu2": policy.pm.nu2,
        "log_targets": policy.log_targets,
        "full_layout": policy.full_layout,
        "seed": policy.seed,
        "basis": {
            "terms": [list(t) for t in policy.basis.terms],
            "clamp": [list(c) for c in policy.basis.clamp],
        },
        "train_log": policy.train_log,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    (path / "moments.json").write_text(policy.pm.to_json())
    for k, net in enumerate(policy.nets):
        save_checkpoint(net, path / f"stage_{k + 1:03d}.json")


def load_policy(dirpath) -> BanditDesignPolicy:
    path = pathlib.Path(dirpath)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format_version") != POLICY_FORMAT_VERSION:
        raise ValueError(f"unsupported policy format {manifest.get('format_version')!r}")
    pm = PopulationMoments.from_json((path / "moments.json").read_text())
    basis = SieveBasis(
        terms=tuple(tuple(t) for t in manifest["basis"]["terms"]),
        clamp=tuple(tuple(c) for c in manifest["basis"]["clamp"]),
    )
    nets = [
        load_checkpoint(path / f"stage_{k + 1:03d}.json")
        for k in range(manifest["horizon"] - 1)
    ]
    policy = BanditDesignPolicy(
        horizon=manifest["horizon"],
        setting=manifest["setting"],
        nets=nets,
        pm=pm,
        basis=basis,
        sigma2=manifest["sigma2"],
        log_targets=manifest["log_targets"],
        full_layout=manifest["full_layout"],
        seed=manifest["seed"],
    )
    policy.train_log = manifest.get("train_log", [])
    return policy
