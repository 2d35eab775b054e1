"""Hierarchical design for the carryover setting: backward loop over days,
within-day actor-critic learning against rewards assembled from past
summaries and (below the last day) simulated futures.

Rollout batches are fully vectorized: every epoch simulates B past
histories under the behavior mixture, rolls the candidate policy through
the current day, simulates the remaining days under the frozen future
policies, and takes one advantage actor-critic step on the pooled
(state, action, return-to-go) tuples.
"""

from __future__ import annotations

import json
import pathlib
from dataclasses import dataclass, field

import numpy as np

from .numerics import null_space_basis
from .objective import (
    DesignPriors,
    dynamic_reward_batch,
    estimate_counterfactual_means,
)
from .sieve import SieveBasis, featurize_batch
from .state import DayState, day_update
from .valuenet import (
    NetParams,
    NetSpec,
    TrainConfig,
    load_checkpoint,
    net_init,
    net_predict,
    policy_gradient_step,
    save_checkpoint,
)

HIER_FORMAT_VERSION = 1


@dataclass(frozen=True)
class RlEncoding:
    """Fixed-length state encoding for the within-day policies.

    Concatenates the interval-t across-day blocks (flattened), a
    zero-padded window over the current day's (x, a) pairs (the pair at
    the decision interval carries a = 0), and time features
    one-hot(t) ++ [t/T].
    """

    p: int
    feature_dim: int
    intervals: int

    @property
    def window(self) -> int:
        return self.intervals

    @property
    def dim(self) -> int:
        blocks = 2 * self.p * self.p + 2 * self.feature_dim * self.p
        return blocks + self.window * (self.p + 1) + self.intervals + 1


def encode_batch(
    enc: RlEncoding,
    blocks: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray],
    window: np.ndarray,
    t: int,
) -> np.ndarray:
    """(B, dim) encodings at interval t.

    blocks hold the interval-t summaries (each (B, ...)); window is the
    current-day (B, W, p+1) history buffer with the slot-t action zeroed.
    """
    sigma_t, omega1_t, xi_t, omega2_t = blocks
    b = len(sigma_t)
    time_feats = np.zeros((b, enc.intervals + 1))
    time_feats[:, t] = 1.0
    time_feats[:, -1] = (t + 1) / enc.intervals
    return np.concatenate(
        [
            sigma_t.reshape(b, -1),
            omega1_t.reshape(b, -1),
            xi_t.reshape(b, -1),
            omega2_t.reshape(b, -1),
            window.reshape(b, -1),
            time_feats,
        ],
        axis=1,
    )


def encode_state(enc: RlEncoding, day_state: DayState, window: np.ndarray, t: int) -> np.ndarray:
    """Single-sample encoding from a deployment DayState."""
    blocks = (
        day_state.sigma[t][None],
        day_state.omega1[t][None],
        day_state.xi[t][None],
        day_state.omega2[t][None],
    )
    return encode_batch(enc, blocks, window[None], t)[0]


@dataclass
class DayPolicy:
    actor: NetParams
    critic: NetParams
    day_index: int
    encoding: RlEncoding
    train_log: list = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self):
        if self.actor.spec.output != "logit":
            raise ValueError("actor head must be a logit")


def _act(actor: NetParams, encoded: np.ndarray, mode: str, rng: np.random.Generator):
    single = np.asarray(encoded).ndim == 1
    x = np.atleast_2d(encoded)
    logits = net_predict(actor, x)
    if mode == "sample":
        prob = 1.0 / (1.0 + np.exp(-np.clip(logits, -500, 500)))
        acts = np.where(rng.random(len(logits)) < prob, 1, -1)
    elif mode == "greedy":
        acts = np.where(logits > 0, 1, -1)
        ties = logits == 0.0
        if np.any(ties):
            coins = np.where(rng.random(int(ties.sum())) < 0.5, 1, -1)
            acts[ties] = coins
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return int(acts[0]) if single else acts


def act_day(policy: DayPolicy, encoded: np.ndarray, mode: str, rng: np.random.Generator):
    """Action(s) from the day policy: Bernoulli(sigmoid(logit)) in sample
    mode, threshold at 1/2 in greedy mode (coin on an exactly zero logit)."""
    return _act(policy.actor, encoded, mode, rng)


def behavior_day_actions(rng: np.random.Generator, batch: int, intervals: int) -> np.ndarray:
    """Within-day behavior actions: per rollout, fair mixture of uniform
    coins and a switchback with a random start sign."""
    switch = rng.random(batch) < 0.5
    start = rng.integers(0, 2, batch) * 2 - 1
    coins = rng.integers(0, 2, (batch, intervals)) * 2 - 1
    sb = start[:, None] * ((-1) ** np.arange(intervals))[None, :]
    return np.where(switch[:, None], sb, coins)


@dataclass
class DynamicPriorBundle:
    """Design priors plus the counterfactual covariate means behind them
    (the plug-in ATE estimator reuses the means)."""

    priors: DesignPriors
    mean_pos: np.ndarray
    mean_neg: np.ndarray


def estimate_design_priors(
    sim,
    basis: SieveBasis,
    n_days: int,
    rollouts: int,
    seed: int,
    eta_t: float = 1.0,
    sigma2_t: float | None = None,
) -> DynamicPriorBundle:
    """Offline priors: u_t from constant-policy rollouts, per-interval
    null-space bases from behavior-policy rollouts, noise variances from
    the simulator. Held fixed throughout training."""
    intervals = sim.intervals
    mean_pos, mean_neg = estimate_counterfactual_means(sim, intervals, rollouts, seed)
    u = np.concatenate([mean_pos + mean_neg, mean_pos - mean_neg], axis=1)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xB0B)))
    x = sim.init_covariates(rng, rollouts)
    acts_all = behavior_day_actions(rng, rollouts, intervals)
    bases = []
    for t in range(intervals):
        feats = featurize_batch(basis, x)
        c_t = feats.T @ x / rollouts
        bases.append(null_space_basis(c_t))
        if t < intervals - 1:
            x = sim.transition(rng, x, acts_all[:, t], t)
    if sigma2_t is None:
        sigma2_t = float(getattr(sim, "outcome_noise_sd", 1.0)) ** 2
    priors = DesignPriors(
        u=u,
        sigma2=np.full(intervals, sigma2_t),
        eta2=np.full(intervals, float(eta_t) ** 2),
        u_basis=bases,
    )
    return DynamicPriorBundle(priors=priors, mean_pos=mean_pos, mean_neg=mean_neg)


def _day_contributions(xs, feats, acts, n_days):
    """Raw (1/N)-weighted interval contributions of one simulated day."""
    w = 1.0 / n_days
    a = acts.astype(float)
    xx = np.einsum("bp,bq->bpq", xs, xs)
    px = np.einsum("bl,bp->blp", feats, xs)
    return (
        w * xx,
        w * a[:, None, None] * xx,
        w * px,
        w * a[:, None, None] * px,
    )


def _simulate_policy_day(
    sim, policy, enc, running_blocks, rng, batch, basis, mode="sample"
):
    """Roll one day under a (frozen) day policy against running blocks.

    Returns per-interval covariates, features, actions. running_blocks are
    the (B, T, ...) across-day stacks the policy's encoding reads."""
    intervals = enc.intervals
    sigma_b, omega1_b, xi_b, omega2_b = running_blocks
    window = np.zeros((batch, enc.window, enc.p + 1))
    xs_t, feats_t, acts_t = [], [], []
    x = sim.init_covariates(rng, batch)
    for t in range(intervals):
        window[:, t, : enc.p] = x
        window[:, t, enc.p] = 0.0
        blocks_t = (sigma_b[:, t], omega1_b[:, t], xi_b[:, t], omega2_b[:, t])
        encoded = encode_batch(enc, blocks_t, window, t)
        acts = _act(policy.actor, encoded, mode, rng)
        window[:, t, enc.p] = acts
        feats = featurize_batch(basis, x)
        xs_t.append(x)
        feats_t.append(feats)
        acts_t.append(acts)
        if t < intervals - 1:
            x = sim.transition(rng, x, acts, t)
    return xs_t, feats_t, acts_t


def _generate_batch(
    day_index: int,
    future: list,
    sim,
    behavior,
    priors: DesignPriors,
    enc: RlEncoding,
    actor: NetParams,
    n_days: int,
    batch: int,
    rng: np.random.Generator,
    basis: SieveBasis,
):
    """One vectorized batch of synthetic rollouts for day day_index (1-based).

    Returns (per-interval encoded states, actions, covariates, rewards, ok).
    """
    intervals = enc.intervals
    p, feat_dim = enc.p, enc.feature_dim
    shape = lambda *tail: np.zeros((batch, intervals, *tail))
    blocks = (shape(p, p), shape(p, p), shape(feat_dim, p), shape(feat_dim, p))

    # past n-1 days under the behavior mixture
    past_xs = np.zeros((batch, day_index - 1, intervals, p))
    past_acts = np.zeros((batch, day_index - 1, intervals), dtype=int)
    for day in range(day_index - 1):
        x = sim.init_covariates(rng, batch)
        acts_all = behavior(rng, batch, intervals)
        past_acts[:, day] = acts_all
        for t in range(intervals):
            past_xs[:, day, t] = x
            feats = featurize_batch(basis, x)
            contrib = _day_contributions(x, feats, acts_all[:, t], n_days)
            for blk, c in zip(blocks, contrib):
                blk[:, t] += c
            if t < intervals - 1:
                x = sim.transition(rng, x, acts_all[:, t], t)

    # current day under the candidate policy
    window = np.zeros((batch, enc.window, p + 1))
    states, acts_cur, xs_cur, feats_cur = [], [], [], []
    x = sim.init_covariates(rng, batch)
    for t in range(intervals):
        window[:, t, :p] = x
        window[:, t, p] = 0.0
        blocks_t = (blocks[0][:, t], blocks[1][:, t], blocks[2][:, t], blocks[3][:, t])
        encoded = encode_batch(enc, blocks_t, window, t)
        acts = _act(actor, encoded, "sample", rng)
        window[:, t, p] = acts
        states.append(encoded)
        acts_cur.append(acts)
        xs_cur.append(x)
        feats_cur.append(featurize_batch(basis, x))
        if t < intervals - 1:
            x = sim.transition(rng, x, acts, t)

    # simulated future days under the frozen policies
    future_fill = None
    if future:
        future_fill = tuple(np.zeros_like(b) for b in blocks)
        running = tuple(b.copy() for b in blocks)
        cur_contrib = [
            _day_contributions(xs_cur[t], feats_cur[t], acts_cur[t], n_days)
            for t in range(intervals)
        ]
        for t in range(intervals):
            for blk, c in zip(running, cur_contrib[t]):
                blk[:, t] += c
        for pol in future:
            xs_f, feats_f, acts_f = _simulate_policy_day(
                sim, pol, enc, running, rng, batch, basis
            )
            for t in range(intervals):
                contrib = _day_contributions(xs_f[t], feats_f[t], acts_f[t], n_days)
                for blk, fblk, c in zip(running, future_fill, contrib):
                    blk[:, t] += c
                    fblk[:, t] += c

    rewards = np.empty((batch, intervals))
    ok = np.ones(batch, dtype=bool)
    for t in range(intervals):
        blocks_t = (blocks[0][:, t], blocks[1][:, t], blocks[2][:, t], blocks[3][:, t])
        fill_t = None
        if future_fill is not None:
            fill_t = tuple(f[:, t] for f in future_fill)
        r_t, ok_t = dynamic_reward_batch(
            blocks_t,
            xs_cur[t],
            feats_cur[t],
            acts_cur[t],
            t,
            priors,
            n_days,
            intervals,
            future_fill=fill_t,
        )
        rewards[:, t] = r_t
        ok &= ok_t

    return states, acts_cur, xs_cur, rewards, ok, (past_xs, past_acts)


MAX_EPOCH_RESAMPLES = 5


def _run_epoch(
    day_index: int,
    future: list,
    sim,
    behavior,
    priors: DesignPriors,
    enc: RlEncoding,
    actor: NetParams,
    n_days: int,
    batch: int,
    seed_parts: tuple,
    basis: SieveBasis,
):
    """One training epoch with degenerate rollouts resampled then dropped.

    Returns pooled (states, actions, returns-to-go) over the surviving
    rollouts plus the reward matrix and final mask.
    """
    rng = np.random.default_rng(np.random.SeedSequence((*seed_parts, 0)))
    states, actions, _, rewards, ok, _ = _generate_batch(
        day_index, future, sim, behavior, priors, enc, actor, n_days, batch, rng, basis
    )
    intervals = enc.intervals
    for retry in range(1, MAX_EPOCH_RESAMPLES + 1):
        bad = np.flatnonzero(~ok)
        if bad.size == 0:
            break
        retry_rng = np.random.default_rng(np.random.SeedSequence((*seed_parts, retry)))
        s2, a2, _, r2, ok2, _ = _generate_batch(
            day_index, future, sim, behavior, priors, enc, actor, n_days,
            len(bad), retry_rng, basis,
        )
        for t in range(intervals):
            states[t][bad] = s2[t]
            actions[t][bad] = a2[t]
        rewards[bad] = r2
        ok[bad] = ok2
    returns = np.flip(np.cumsum(np.flip(rewards, axis=1), axis=1), axis=1)
    pooled_states = np.concatenate([s[ok] for s in states], axis=0)
    pooled_actions = np.concatenate([a[ok] for a in actions], axis=0)
    pooled_returns = np.concatenate([returns[ok, t] for t in range(intervals)], axis=0)
    return pooled_states, pooled_actions, pooled_returns, rewards, ok


def _train_day_policy(
    day_index: int,
    future: list,
    sim,
    behavior,
    priors: DesignPriors,
    epochs: int,
    batch: int,
    cfg: TrainConfig,
    seed: int,
    basis: SieveBasis,
    n_days: int,
    net_hidden: tuple[int, ...],
    minibatch: int | None = None,
) -> DayPolicy:
    intervals = priors.intervals
    p = priors.u.shape[1] // 2
    feat_dim = basis.dim
    enc = RlEncoding(p=p, feature_dim=feat_dim, intervals=intervals)
    init_ss = np.random.SeedSequence((seed, day_index, 0x1))
    actor = net_init(
        NetSpec(input_dim=enc.dim, hidden=net_hidden, activation="gelu", output="logit"),
        seed=int(init_ss.generate_state(2)[0]),
    )
    critic = net_init(
        NetSpec(input_dim=enc.dim, hidden=net_hidden, activation="gelu", output="linear"),
        seed=int(init_ss.generate_state(2)[1]),
    )
    log = []
    calibrated = False
    for k in range(epochs):
        states, actions, returns, rewards, ok = _run_epoch(
            day_index, future, sim, behavior, priors, enc, actor, n_days, batch,
            (seed, day_index, k, 0x2), basis,
        )
        if not calibrated and len(states):
            # freeze an input affine from the first batch; block entries and
            # window features live on very different scales
            loc = states.mean(axis=0)
            scale = states.std(axis=0)
            scale[scale < 1e-12] = 1.0
            for net in (actor, critic):
                net.input_loc = loc
                net.input_scale = scale
            calibrated = True
        n_ok = int(ok.sum())
        if n_ok == 0:
            log.append({"epoch": k, "mean_reward": float("nan"), "ok": 0})
            continue
        if minibatch is not None and minibatch < len(states):
            mb_rng = np.random.default_rng(np.random.SeedSequence((seed, day_index, k, 0x3)))
            pick = mb_rng.permutation(len(states))[:minibatch]
            states, actions, returns = states[pick], actions[pick], returns[pick]
        actor, critic = policy_gradient_step(actor, critic, states, actions, returns, cfg)
        log.append(
            {
                "epoch": k,
                "mean_reward": float(rewards[ok].sum(axis=1).mean()),
                "ok": n_ok,
            }
        )
    policy = DayPolicy(actor=actor, critic=critic, day_index=day_index, encoding=enc)
    policy.train_log = log
    return policy


def train_last_day(
    sim,
    behavior,
    priors: DesignPriors,
    epochs: int,
    batch: int,
    cfg: TrainConfig,
    seed: int,
    *,
    basis: SieveBasis,
    n_days: int,
    net_hidden: tuple[int, ...] = (64, 64),
    minibatch: int | None = None,
) -> DayPolicy:
    """Policy learning on the final day: pure within-day RL (no future)."""
    return _train_day_policy(
        n_days, [], sim, behavior or behavior_day_actions, priors, epochs, batch, cfg,
        seed, basis, n_days, net_hidden, minibatch,
    )


def train_day(
    day_index: int,
    future: list,
    sim,
    behavior,
    priors: DesignPriors,
    epochs: int,
    batch: int,
    cfg: TrainConfig,
    seed: int,
    *,
    basis: SieveBasis,
    n_days: int,
    net_hidden: tuple[int, ...] = (64, 64),
    minibatch: int | None = None,
) -> DayPolicy:
    """Policy learning for an interior day: rewards include the simulated
    future days rolled under the frozen later policies."""
    if len(future) != n_days - day_index:
        raise ValueError(
            f"need policies for days {day_index + 1}..{n_days}, got {len(future)}"
        )
    return _train_day_policy(
        day_index, future, sim, behavior or behavior_day_actions, priors, epochs, batch,
        cfg, seed, basis, n_days, net_hidden, minibatch,
    )


@dataclass
class HierarchicalPolicy:
    days: list  # DayPolicy for day 1..N
    priors: DesignPriors
    n_days: int
    intervals: int
    basis: SieveBasis

    def __post_init__(self):
        if len(self.days) != self.n_days:
            raise ValueError("need one DayPolicy per day")


def train_hierarchical(
    sim,
    priors: DesignPriors,
    n_days: int,
    intervals: int,
    epochs: int,
    batch: int,
    cfg: TrainConfig,
    seed: int,
    *,
    basis: SieveBasis,
    behavior=None,
    net_hidden: tuple[int, ...] = (64, 64),
    minibatch: int | None = None,
    progress=None,
) -> HierarchicalPolicy:
    """Backward recursion over days chaining the per-day RL subproblems."""
    if intervals != priors.intervals:
        raise ValueError("priors cover a different number of intervals")
    days: list = [None] * n_days
    future: list = []
    for day_index in range(n_days, 0, -1):
        pol = _train_day_policy(
            day_index, future, sim, behavior or behavior_day_actions, priors, epochs,
            batch, cfg, seed, basis, n_days, net_hidden, minibatch,
        )
        days[day_index - 1] = pol
        future = [pol] + future
        if progress is not None:
            progress(day_index, pol)
    return HierarchicalPolicy(
        days=days, priors=priors, n_days=n_days, intervals=intervals, basis=basis
    )


class DynamicPolicyDesign:
    """Replication-harness adapter: greedy deployment, day-state threading."""

    def __init__(self, policy: HierarchicalPolicy, name: str):
        self.policy = policy
        self.name = name

    def make_day_allocator(self, rng: np.random.Generator):
        policy = self.policy
        enc = policy.days[0].encoding

        class _A:
            def __init__(self):
                self.day_state = DayState.zero(
                    policy.n_days, policy.intervals, enc.p, enc.feature_dim
                )
                self.window = np.zeros((enc.window, enc.p + 1))
                self.entries = []

            def choose(self, x, day, t):
                if t == 0:
                    self.window[:] = 0.0
                    self.entries = []
                self.window[t, : enc.p] = x
                self.window[t, enc.p] = 0.0
                encoded = encode_state(enc, self.day_state, self.window, t)
                action = act_day(policy.days[day], encoded, "greedy", rng)
                self.window[t, enc.p] = action
                psi = featurize_batch(policy.basis, x[None, :])[0]
                self.entries.append((x, psi, action))
                return action

            def end_day(self, _entries):
                self.day_state = day_update(self.day_state, self.entries)

        return _A()


def save_hierarchical(policy: HierarchicalPolicy, dirpath, bundle: DynamicPriorBundle | None = None) -> None:
    path = pathlib.Path(dirpath)
    path.mkdir(parents=True, exist_ok=True)
    priors = policy.priors
    manifest = {
        "format_version": HIER_FORMAT_VERSION,
        "n_days": policy.n_days,
        "intervals": policy.intervals,
        "basis": {
            "terms": [list(t) for t in policy.basis.terms],
            "clamp": [list(c) for c in policy.basis.clamp],
        },
        "priors": {
            "u": priors.u.tolist(),
            "sigma2": priors.sigma2.tolist(),
            "eta2": priors.eta2.tolist(),
            "u_basis": [b.tolist() for b in priors.u_basis],
        },
        "means": None
        if bundle is None
        else {"pos": bundle.mean_pos.tolist(), "neg": bundle.mean_neg.tolist()},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))
    for day in policy.days:
        save_checkpoint(day.actor, path / f"day_{day.day_index:03d}_actor.json")
        save_checkpoint(day.critic, path / f"day_{day.day_index:03d}_critic.json")


def load_hierarchical(dirpath) -> tuple[HierarchicalPolicy, DynamicPriorBundle | None]:
    path = pathlib.Path(dirpath)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format_version") != HIER_FORMAT_VERSION:
        raise ValueError(f"unsupported policy format {manifest.get('format_version')!r}")
    priors = DesignPriors(
        u=np.array(manifest["priors"]["u"]),
        sigma2=np.array(manifest["priors"]["sigma2"]),
        eta2=np.array(manifest["priors"]["eta2"]),
        u_basis=[np.array(b) for b in manifest["priors"]["u_basis"]],
    )
    basis = SieveBasis(
        terms=tuple(tuple(t) for t in manifest["basis"]["terms"]),
        clamp=tuple(tuple(c) for c in manifest["basis"]["clamp"]),
    )
    n_days = manifest["n_days"]
    intervals = manifest["intervals"]
    p = priors.u.shape[1] // 2
    enc = RlEncoding(p=p, feature_dim=basis.dim, intervals=intervals)
    days = []
    for d in range(1, n_days + 1):
        actor = load_checkpoint(path / f"day_{d:03d}_actor.json")
        critic = load_checkpoint(path / f"day_{d:03d}_critic.json")
        days.append(DayPolicy(actor=actor, critic=critic, day_index=d, encoding=enc))
    policy = HierarchicalPolicy(
        days=days, priors=priors, n_days=n_days, intervals=intervals, basis=basis
    )
    bundle = None
    if manifest.get("means"):
        bundle = DynamicPriorBundle(
            priors=priors,
            mean_pos=np.array(manifest["means"]["pos"]),
            mean_neg=np.array(manifest["means"]["neg"]),
        )
    return policy, bundle
