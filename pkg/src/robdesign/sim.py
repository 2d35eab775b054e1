"""Simulated data-generating processes, ATE estimators, and the
replication harness.

Bandit DGPs: two synthetic setups over correlated Gaussian covariates (one
additive, one with treatment-covariate interactions, both with a nonlinear
baseline so the linear working model is misspecified) plus a parametric
bootstrap built from a fitted linear model and an empirical covariate pool.
The dynamic DGP is a within-day MDP with action-dependent transitions.

Outcomes are materialized only after the design has chosen an action, so
the sequential information constraint is enforced structurally. The
replication harness derives per-replication streams from (seed, index)
only — designs compared under the same seed see identical covariate and
noise draws.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import BaselineAllocator, BaselineKind
from .errors import RobdesignError, SingularDesign
from .sieve import SieveBasis, featurize_batch


def paper_baseline_mean(z: np.ndarray, cos_weight: float = 1.5) -> np.ndarray:
    """Nonlinear baseline mean over the two continuous coordinates."""
    z = np.atleast_2d(z)
    out = 1.2 - 1.4 * z[:, 0] + 0.8 * z[:, 1]
    for j in range(2):
        out = out + 2.0 * np.sin(z[:, j] + 0.5) + cos_weight * np.cos(z[:, j] ** 2 - 0.5)
    return out


@dataclass
class BootstrapFit:
    """Parameters refit from an A/A dataset for the bootstrap DGP."""

    beta_hat: np.ndarray
    gamma_hat: float
    xi_hat: np.ndarray
    sigma2_hat: float
    pool: np.ndarray  # empirical covariate rows, intercept first


def make_bootstrap_fit(rng: np.random.Generator, n_days: int = 40) -> BootstrapFit:
    """Fit the bootstrap parameters on a synthetic stand-in A/A dataset.

    The production data behind the published experiment is proprietary;
    this reproduces the mechanism (OLS refit, scaled-mean effect sizes,
    empirical covariate pool) on generated marketplace-like series.
    """
    z = rng.standard_normal((n_days, 2))
    z[:, 1] = 0.5 * z[:, 0] + np.sqrt(1 - 0.25) * z[:, 1]
    x = np.column_stack([np.ones(n_days), z])
    y = x @ np.array([5.0, 0.8, 0.5]) + 0.6 * rng.standard_normal(n_days)
    beta_hat, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ beta_hat
    sigma2_hat = float(resid @ resid / max(n_days - 3, 1))
    return BootstrapFit(
        beta_hat=beta_hat,
        gamma_hat=0.025 * float(y.mean()),
        xi_hat=0.0125 * x.mean(axis=0),
        sigma2_hat=sigma2_hat,
        pool=x,
    )


@dataclass
class BanditDgp:
    """A contextual-bandit environment (covariate law + outcome model)."""

    variant: str  # setup1 | setup2 | bootstrap
    misspec: str = "paper_mu"  # paper_mu | none | sieve
    interactive: bool = False
    sigma2: float = 1.0
    cov_offdiag: float = 0.3
    sieve_basis: SieveBasis | None = None
    sieve_coeff: np.ndarray | None = None
    sieve_scale: float = 0.0
    bootstrap: BootstrapFit | None = None

    @classmethod
    def setup1(cls, misspec: str = "paper_mu") -> "BanditDgp":
        return cls(variant="setup1", misspec=misspec, interactive=False)

    @classmethod
    def setup2(cls, misspec: str = "paper_mu") -> "BanditDgp":
        return cls(variant="setup2", misspec=misspec, interactive=True)

    @classmethod
    def from_bootstrap(cls, fit: BootstrapFit, interactive: bool = False) -> "BanditDgp":
        return cls(
            variant="bootstrap",
            misspec="paper_mu",
            interactive=interactive,
            sigma2=fit.sigma2_hat,
            bootstrap=fit,
        )

    @classmethod
    def sieve_misspec(
        cls, basis: SieveBasis, coeff: np.ndarray, scale: float, interactive: bool = False
    ) -> "BanditDgp":
        return cls(
            variant="setup2" if interactive else "setup1",
            misspec="sieve",
            interactive=interactive,
            sieve_basis=basis,
            sieve_coeff=np.asarray(coeff, dtype=float),
            sieve_scale=float(scale),
        )

    @property
    def p(self) -> int:
        return 3

    @property
    def mean_x(self) -> np.ndarray:
        if self.variant == "bootstrap":
            return self.bootstrap.pool.mean(axis=0)
        return np.array([1.0, 0.0, 0.0])

    def draw_covariates(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.variant == "bootstrap":
            idx = rng.integers(0, len(self.bootstrap.pool), size=n)
            return self.bootstrap.pool[idx]
        z = rng.standard_normal((n, 2))
        rho = self.cov_offdiag
        z[:, 1] = rho * z[:, 0] + np.sqrt(1.0 - rho**2) * z[:, 1]
        return np.column_stack([np.ones(n), z])

    def latent(self, x: np.ndarray) -> np.ndarray:
        """Baseline (non-treatment, non-noise) outcome component."""
        x = np.atleast_2d(x)
        if self.variant == "bootstrap":
            return x @ self.bootstrap.beta_hat + paper_baseline_mean(x[:, 1:], cos_weight=2.0)
        if self.misspec == "none":
            return np.zeros(len(x))
        if self.misspec == "sieve":
            feats = featurize_batch(self.sieve_basis, x)
            return self.sieve_scale * (feats @ self.sieve_coeff)
        return paper_baseline_mean(x[:, 1:])

    def draw_noise(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.sqrt(self.sigma2) * rng.standard_normal(n)

    def treatment_term(self, x: np.ndarray, a) -> np.ndarray:
        x = np.atleast_2d(x)
        a = np.asarray(a, dtype=float)
        if self.variant == "setup1":
            return a
        if self.variant == "setup2":
            return a * (1.0 + 0.6 * x[:, 1] - 0.5 * x[:, 2])
        if self.interactive:
            return a * (x @ self.bootstrap.xi_hat)
        return a * self.bootstrap.gamma_hat

    def outcome(self, x: np.ndarray, f_x, noise, a) -> np.ndarray:
        """Materialize outcomes once actions are known."""
        return self.treatment_term(x, a) + np.asarray(f_x) + np.asarray(noise)

    def true_ate(self) -> float:
        if self.variant in ("setup1", "setup2"):
            return 2.0  # unit additive effect; interactions are mean-zero
        if self.interactive:
            return float(2.0 * self.mean_x @ self.bootstrap.xi_hat)
        return 2.0 * self.bootstrap.gamma_hat


def draw_bandit(dgp: BanditDgp, n: int, seed) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Covariates, latent baselines and noises for n sequential arrivals."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = dgp.draw_covariates(rng, n)
    return x, dgp.latent(x), dgp.draw_noise(rng, n)


def outcome_bandit(dgp: BanditDgp, x, f_x, noise, a):
    return dgp.outcome(x, f_x, noise, a)


def _signed_uniform(rng, lo, hi, size):
    mag = rng.uniform(lo, hi, size=size)
    sign = np.where(rng.random(size=size) < 0.5, -1.0, 1.0)
    return mag * sign


@dataclass
class DynamicDgp:
    """Within-day MDP: linear outcome/transition models with interaction
    terms plus a cosine misspecification term weighted by delta."""

    intervals: int
    delta: float
    b: np.ndarray  # (T,)
    beta: np.ndarray  # (T, 3)
    gamma: np.ndarray  # (T,)
    c: np.ndarray  # (T, 3)
    phi0: np.ndarray  # (T, 3)
    phi: np.ndarray  # (T, 3, 3)
    alpha: np.ndarray  # (T, 3)
    xi: np.ndarray  # (T, 3, 3)
    outcome_noise_sd: float = 1.0
    trans_noise_var: float = 1.5
    _ate_cache: dict = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def draw(cls, rng: np.random.Generator, intervals: int, delta: float) -> "DynamicDgp":
        t = intervals
        return cls(
            intervals=t,
            delta=float(delta),
            b=_signed_uniform(rng, 0.5, 1.0, t),
            beta=_signed_uniform(rng, 0.1, 0.3, (t, 3)),
            gamma=rng.uniform(0.5, 0.8, size=t),
            c=_signed_uniform(rng, 0.05, 0.1, (t, 3)),
            phi0=_signed_uniform(rng, 0.5, 1.0, (t, 3)),
            phi=rng.uniform(-0.3, 0.3, size=(t, 3, 3)),
            alpha=0.3 * rng.standard_normal((t, 3)),
            xi=rng.uniform(-0.2, 0.2, size=(t, 3, 3)),
        )

    @property
    def p(self) -> int:
        return 4

    def init_covariates(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.column_stack([np.ones(n), rng.standard_normal((n, 3))])

    def outcome(self, rng: np.random.Generator, x: np.ndarray, a, t: int) -> np.ndarray:
        x = np.atleast_2d(x)
        a = np.asarray(a, dtype=float)
        z = x[:, 1:]
        y = (
            self.b[t]
            + z @ self.beta[t]
            + self.gamma[t] * a
            + a * (z @ self.c[t])
            + self.delta * np.cos(z).sum(axis=1)
        )
        if self.outcome_noise_sd > 0:
            y = y + self.outcome_noise_sd * rng.standard_normal(len(y))
        return y

    def transition(self, rng: np.random.Generator, x: np.ndarray, a, t: int) -> np.ndarray:
        """Next covariates from interval t (valid for t = 0..T-2)."""
        if t >= self.intervals - 1:
            raise ValueError(f"no transition out of the final interval (t={t})")
        x = np.atleast_2d(x)
        a = np.asarray(a, dtype=float)
        z = x[:, 1:]
        z_next = (
            self.phi0[t]
            + z @ self.phi[t].T
            + np.outer(a, self.alpha[t])
            + a[:, None] * (z @ self.xi[t].T)
        )
        if self.trans_noise_var > 0:
            z_next = z_next + np.sqrt(self.trans_noise_var) * rng.standard_normal(z_next.shape)
        return np.column_stack([np.ones(len(z_next)), z_next])

    def true_ate(self, n_rollouts: int = 100_000, seed: int = 0) -> float:
        """Ground-truth ATE via counterfactual constant-policy rollouts.

        Common random numbers across the two arms; cached per (n, seed)."""
        key = (n_rollouts, seed)
        if key not in self._ate_cache:
            sums = {}
            for arm in (1, -1):
                rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD6)))
                x = self.init_covariates(rng, n_rollouts)
                acts = np.full(n_rollouts, arm)
                total = np.zeros(n_rollouts)
                for t in range(self.intervals):
                    total += self.outcome(rng, x, acts, t)
                    if t < self.intervals - 1:
                        x = self.transition(rng, x, acts, t)
                sums[arm] = total
            diff = (sums[1] - sums[-1]) / self.intervals
            self._ate_cache[key] = (float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(n_rollouts)))
        return self._ate_cache[key][0]

    def true_ate_stderr(self, n_rollouts: int = 100_000, seed: int = 0) -> float:
        self.true_ate(n_rollouts, seed)
        return self._ate_cache[(n_rollouts, seed)][1]


def step_dynamic(dgp: DynamicDgp, x_t: np.ndarray, a: int, t: int, rng: np.random.Generator):
    """One environment step: outcome now, next covariates unless t is final."""
    y = dgp.outcome(rng, x_t[None, :], np.array([a]), t)[0]
    if t >= dgp.intervals - 1:
        return y, None
    x_next = dgp.transition(rng, x_t[None, :], np.array([a]), t)[0]
    return y, x_next


def _ols(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    theta, _, rank, _ = np.linalg.lstsq(z, y, rcond=None)
    if rank < z.shape[1]:
        raise SingularDesign(f"design matrix rank {rank} < {z.shape[1]}")
    return theta


def ols_ate_bandit(
    x: np.ndarray, a: np.ndarray, y: np.ndarray, setting: str, mean_x: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """OLS effect estimate: 2*gamma_hat (additive) or 2*E[X]'xi_hat (interactive)."""
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    y = np.asarray(y, dtype=float)
    if setting == "additive":
        z = np.column_stack([a, x])
        theta = _ols(z, y)
        return 2.0 * float(theta[0]), theta
    if setting == "interactive":
        if mean_x is None:
            raise ValueError("interactive estimator needs the covariate mean")
        z = np.column_stack([a[:, None] * x, x])
        theta = _ols(z, y)
        p = x.shape[1]
        return 2.0 * float(np.asarray(mean_x) @ theta[:p]), theta
    raise ValueError(f"unknown setting {setting!r}")


def ols_ate_dynamic(
    covariates: np.ndarray,
    actions: np.ndarray,
    outcomes: np.ndarray,
    mean_pos: np.ndarray,
    mean_neg: np.ndarray,
) -> float:
    """Plug-in ATE from per-interval OLS fits and counterfactual means."""
    n_days, intervals, p = covariates.shape
    total = 0.0
    for t in range(intervals):
        xs = covariates[:, t, :]
        acts = actions[:, t].astype(float)
        z = np.column_stack([acts[:, None] * xs, xs])
        theta = _ols(z, outcomes[:, t])
        u_t = np.concatenate([mean_pos[t] + mean_neg[t], mean_pos[t] - mean_neg[t]])
        total += float(u_t @ theta)
    return total / intervals


@dataclass
class ReplicationRecord:
    replication: int
    design: str
    n: int
    assignments: list
    ate_hat: float
    true_ate: float
    squared_error: float
    failed: bool = False
    error: str = ""

    def to_json(self) -> str:
        return json.dumps(
            {
                "replication": self.replication,
                "design": self.design,
                "n": self.n,
                "assignments": self.assignments,
                "ate_hat": self.ate_hat,
                "true_ate": self.true_ate,
                "squared_error": self.squared_error,
                "failed": self.failed,
                "error": self.error,
            },
            sort_keys=True,
        )


@dataclass
class RunReport:
    design: str
    setting: str
    n: int
    replications: int
    mse: float
    ci_half: float
    failures: int
    records: list

    @property
    def stderr(self) -> float:
        return self.ci_half / 1.96 if np.isfinite(self.ci_half) else np.nan


class BaselineDesign:
    """Covariate-blind designs wrapped for the replication harness."""

    def __init__(self, kind: BaselineKind):
        self.kind = kind
        self.name = kind.name

    def make_allocator(self, rng: np.random.Generator):
        inner = BaselineAllocator(self.kind, rng)

        class _A:
            @staticmethod
            def choose(x):
                return inner.next_action()

        return _A()

    def make_day_allocator(self, rng: np.random.Generator):
        if self.kind.name == "SBD":
            # day-aware switchback: alternate across intervals and flip the
            # start sign each day. Continuing one global alternation would
            # give every day the same action at a fixed interval when T is
            # even, making the per-interval OLS unidentifiable.
            start = 1 if rng.random() < 0.5 else -1

            class _Sbd:
                @staticmethod
                def choose(x, day, t):
                    return start * (-1) ** (day + t)

                @staticmethod
                def end_day(entries):
                    pass

            return _Sbd()
        inner = BaselineAllocator(self.kind, rng)

        class _A:
            @staticmethod
            def choose(x, day, t):
                return inner.next_action()

            @staticmethod
            def end_day(entries):
                pass

        return _A()


def _replication_rngs(seed: int, rep: int) -> tuple[np.random.Generator, np.random.Generator]:
    env = np.random.default_rng(np.random.SeedSequence((seed, rep, 0)))
    design = np.random.default_rng(np.random.SeedSequence((seed, rep, 1)))
    return env, design


def _aggregate(design_name, setting, n, records) -> RunReport:
    ok = [r for r in records if not r.failed]
    failures = len(records) - len(ok)
    if ok:
        errs = np.array([r.squared_error for r in ok])
        mse = float(errs.mean())
        ci = float(1.96 * errs.std(ddof=1) / np.sqrt(len(errs))) if len(errs) > 1 else np.inf
    else:
        mse, ci = np.nan, np.nan
    return RunReport(
        design=design_name,
        setting=setting,
        n=n,
        replications=len(ok),
        mse=mse,
        ci_half=ci,
        failures=failures,
        records=records,
    )


def run_experiment(
    design,
    dgp: BanditDgp,
    n_units: int,
    replications: int,
    seed: int,
    threads: int = 1,
    estimator=None,
) -> RunReport:
    """Bandit benchmark: stream covariates, allocate sequentially,
    materialize outcomes, estimate the ATE, aggregate squared errors."""
    setting = "interactive" if dgp.interactive else "additive"
    truth = dgp.true_ate()

    def run_one(rep: int) -> ReplicationRecord:
        env_rng, design_rng = _replication_rngs(seed, rep)
        x, f_vals, noise = draw_bandit(dgp, n_units, env_rng)
        try:
            allocator = design.make_allocator(design_rng)
            actions = np.empty(n_units, dtype=int)
            for i in range(n_units):
                actions[i] = allocator.choose(x[i])
            y = dgp.outcome(x, f_vals, noise, actions)
            if estimator is not None:
                ate_hat = float(estimator(x, actions, y))
            else:
                ate_hat, _ = ols_ate_bandit(x, actions, y, setting, mean_x=dgp.mean_x)
            return ReplicationRecord(
                replication=rep,
                design=design.name,
                n=n_units,
                assignments=actions.tolist(),
                ate_hat=ate_hat,
                true_ate=truth,
                squared_error=(ate_hat - truth) ** 2,
            )
        except RobdesignError as exc:
            return ReplicationRecord(
                replication=rep,
                design=design.name,
                n=n_units,
                assignments=[],
                ate_hat=np.nan,
                true_ate=truth,
                squared_error=np.nan,
                failed=True,
                error=f"{type(exc).__name__}: {exc}",
            )

    records = _map_replications(run_one, replications, threads)
    return _aggregate(design.name, setting, n_units, records)


def run_dynamic_experiment(
    design,
    dgp: DynamicDgp,
    n_days: int,
    replications: int,
    seed: int,
    mean_pos: np.ndarray,
    mean_neg: np.ndarray,
    true_ate: float | None = None,
    threads: int = 1,
) -> RunReport:
    """Dynamic benchmark: N-day episodes with within-day carryover."""
    intervals = dgp.intervals
    truth = dgp.true_ate() if true_ate is None else true_ate

    def run_one(rep: int) -> ReplicationRecord:
        env_rng, design_rng = _replication_rngs(seed, rep)
        try:
            allocator = design.make_day_allocator(design_rng)
            xs = np.empty((n_days, intervals, dgp.p))
            acts = np.empty((n_days, intervals), dtype=int)
            ys = np.empty((n_days, intervals))
            for day in range(n_days):
                x = dgp.init_covariates(env_rng, 1)[0]
                entries = []
                for t in range(intervals):
                    a = allocator.choose(x, day, t)
                    y, x_next = step_dynamic(dgp, x, a, t, env_rng)
                    xs[day, t] = x
                    acts[day, t] = a
                    ys[day, t] = y
                    entries.append((x, a))
                    if x_next is not None:
                        x = x_next
                allocator.end_day(entries)
            ate_hat = ols_ate_dynamic(xs, acts, ys, mean_pos, mean_neg)
            return ReplicationRecord(
                replication=rep,
                design=design.name,
                n=n_days,
                assignments=acts.reshape(-1).tolist(),
                ate_hat=ate_hat,
                true_ate=truth,
                squared_error=(ate_hat - truth) ** 2,
            )
        except RobdesignError as exc:
            return ReplicationRecord(
                replication=rep,
                design=design.name,
                n=n_days,
                assignments=[],
                ate_hat=np.nan,
                true_ate=truth,
                squared_error=np.nan,
                failed=True,
                error=f"{type(exc).__name__}: {exc}",
            )

    records = _map_replications(run_one, replications, threads)
    return _aggregate(design.name, "dynamic", n_days, records)


def _map_replications(fn, replications: int, threads: int) -> list:
    if threads <= 1:
        return [fn(r) for r in range(replications)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(replications)))
