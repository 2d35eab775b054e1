"""End-to-end acceptance gates.

Each test prints one PASS line on success; assertion messages carry the
measured quantities on failure. Criteria 3, 5, 6 and 8 train policies and
run replication benchmarks, so the module takes on the order of an hour
at desk scale; everything else completes in seconds.
"""

import numpy as np
import pytest

from robdesign.baselines import BaselineKind
from robdesign.designer_bandit import (
    BanditPolicyDesign,
    DgpCovariates,
    EmpiricalCovariates,
    allocate,
    sample_behavior_actions,
    train_policy,
)
from robdesign.designer_dynamic import (
    DynamicPolicyDesign,
    estimate_design_priors,
    train_hierarchical,
)
from robdesign.numerics import null_space_basis, solve_spd
from robdesign.objective import (
    additive_bound,
    additive_bound_batch,
    dynamic_objective,
    dynamic_reward,
    exact_conditional_mse,
)
from robdesign.sieve import PopulationMoments, SieveBasis, featurize_batch
from robdesign.sim import (
    BanditDgp,
    BaselineDesign,
    DynamicDgp,
    run_dynamic_experiment,
    run_experiment,
)
from robdesign.state import AdditiveState, additive_update
from robdesign.valuenet import NetSpec, TrainConfig, net_init

from .oracles import TwoPointDp, rnd_expected_terminal, sandwich_mse
from .test_objective import empirical_pm
from .test_valuenet import flat_param_count, grad_rel_error

BANDIT_N_VALUES = (21, 28, 35, 42)
BANDIT_SIGMA2 = 1.0
# desk-scale training sizes (paper: B=8000, M=5000, 4 hidden layers of
# 512/256/128/64); the interactive value surface needs the larger budget
DESK_SCALE = {
    "additive": {"rollouts": 1000, "mc": 256, "hidden": (48, 32)},
    "interactive": {"rollouts": 1600, "mc": 512, "hidden": (64, 48)},
}


def _announce(num: int, text: str) -> None:
    print(f"\nACCEPTANCE {num} PASS: {text}")


def _stage_cfg() -> TrainConfig:
    return TrainConfig(
        lr=3e-3, batch_size=256, epochs=120, patience=15, target_transform="log"
    )


@pytest.fixture(scope="module")
def nrd_moments(bandit_moments):
    return PopulationMoments(
        sigma=bandit_moments.sigma,
        xi=bandit_moments.xi,
        u_basis=bandit_moments.u_basis,
        mean_x=bandit_moments.mean_x,
        nu2=0.0,
    )


def _train_bandit(setting, horizon, pm, basis, seed):
    scale = DESK_SCALE[setting]
    return train_policy(
        setting,
        horizon,
        pm,
        basis,
        DgpCovariates(BanditDgp.setup1()),
        sample_behavior_actions,
        scale["rollouts"],
        scale["mc"],
        _stage_cfg(),
        seed=seed,
        net_hidden=scale["hidden"],
        sigma2=BANDIT_SIGMA2,
    )


@pytest.fixture(scope="module")
def additive_policies(bandit_basis, bandit_moments, nrd_moments):
    """RSD and NRD additive policies for every benchmark horizon."""
    policies = {}
    for n in BANDIT_N_VALUES:
        policies[("RSD", n)] = _train_bandit("additive", n, bandit_moments, bandit_basis, 1000 + n)
        policies[("NRD", n)] = _train_bandit("additive", n, nrd_moments, bandit_basis, 2000 + n)
    return policies


@pytest.fixture(scope="module")
def interactive_policies(bandit_basis, bandit_moments, nrd_moments):
    """RSD at every horizon, NRD at the endpoints (criterion 6)."""
    policies = {}
    for n in BANDIT_N_VALUES:
        policies[("RSD", n)] = _train_bandit("interactive", n, bandit_moments, bandit_basis, 3000 + n)
    for n in (21, 42):
        policies[("NRD", n)] = _train_bandit("interactive", n, nrd_moments, bandit_basis, 4000 + n)
    return policies


class TestCriterion1AlgebraicOracles:
    def test_exact_mse_and_summary_forms(self):
        rng = np.random.default_rng(0xAC1)
        checked = 0
        while checked < 500:
            n = int(rng.integers(6, 13))
            p = int(rng.integers(2, 4))
            xs = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
            acts = (rng.integers(0, 2, n) * 2 - 1).astype(float)
            if abs(acts.sum()) == n:
                continue
            f_vals = rng.standard_normal(n)
            sigma2 = float(rng.uniform(0.5, 2.0))
            try:
                variance, bias2 = exact_conditional_mse(xs, acts, f_vals, sigma2)
            except Exception:
                continue  # a lies in col(X); resample
            variance_o, bias2_o = sandwich_mse(xs, acts, f_vals, sigma2)
            assert abs(variance - variance_o) <= 1e-9 * max(1.0, abs(variance_o))
            assert abs(bias2 - bias2_o) <= 1e-9 * max(1.0, abs(bias2_o))
            # summary-statistic form of a' P a with the empirical moments
            sigma_n = xs.T @ xs / n
            delta = acts @ xs
            summary = n - (delta @ solve_spd(sigma_n, delta)) / n
            gram = xs.T @ xs
            projection = float(acts @ acts - (xs.T @ acts) @ solve_spd(gram, xs.T @ acts))
            assert abs(summary - projection) <= 1e-8 * max(1.0, abs(projection))
            checked += 1
        _announce(1, f"{checked} random instances matched the sandwich oracle (1e-9) "
                     "and the summary-statistic allocation norm (1e-8)")


class TestCriterion2WorstCaseDominance:
    def test_bias_bound_dominates_realized_bias(self, bandit_basis):
        rng = np.random.default_rng(0xAC2)
        eta, sigma2 = 0.9, 1.0
        states = 0
        while states < 200:
            n = int(rng.integers(15, 41))
            xs = np.column_stack([np.ones(n), rng.standard_normal((n, 2))])
            acts = (rng.integers(0, 2, n) * 2 - 1).astype(float)
            if abs(acts.sum()) == n:
                continue
            pm = empirical_pm(bandit_basis, xs, nu2=eta**2 / sigma2)
            feats = featurize_batch(bandit_basis, xs)
            delta = acts @ xs
            gamma = acts @ feats
            gram = xs.T @ xs
            o1 = float(acts @ acts - (xs.T @ acts) @ solve_spd(gram, xs.T @ acts))
            if o1 <= 1e-6:
                continue
            proj_a = acts - xs @ solve_spd(gram, xs.T @ acts)
            bound_bias = (
                eta**2
                * np.sum((pm.u_basis.T @ (gamma - pm.xi @ pm.sigma_inv @ delta)) ** 2)
                / o1**2
            )
            kappas = rng.standard_normal((pm.u_basis.shape[1], 1000))
            norms = np.linalg.norm(kappas, axis=0)
            kappas = kappas / np.maximum(norms, 1.0)
            f_all = eta * feats @ (pm.u_basis @ kappas)  # (n, 1000)
            realized = (proj_a @ f_all / o1) ** 2
            assert np.all(realized <= bound_bias * (1 + 1e-9)), (
                f"violation: max realized {realized.max():.6e} vs bound {bound_bias:.6e}"
            )
            states += 1
        _announce(2, "200 states x 1000 unit-ball directions: zero bias-bound violations")


class TestCriterion3ExactDpEquivalence:
    def test_trained_policy_near_exact_dp(self):
        horizon = 8
        points = np.array([[0.8], [-1.2]])
        basis = SieveBasis(terms=((0, 1), (0, 2), (0, 3)), clamp=((-3.0, 3.0),))
        pts = np.tile(points, (500, 1))
        feats = featurize_batch(basis, pts)
        xi = feats.T @ pts / len(pts)
        pm = PopulationMoments(
            sigma=pts.T @ pts / len(pts),
            xi=xi,
            u_basis=null_space_basis(xi),
            mean_x=pts.mean(axis=0),
            nu2=0.5,
        )
        cov = EmpiricalCovariates(points)
        cfg = TrainConfig(lr=5e-3, batch_size=128, epochs=250, patience=40, target_transform="log")
        policy = train_policy(
            "additive", horizon, pm, basis, cov, sample_behavior_actions,
            800, 2, cfg, seed=0xAC3, net_hidden=(24, 16), exhaustive=True,
        )
        psi_points = featurize_batch(basis, points)

        def terminal(c1, c2):
            delta = c1 * points[0] + c2 * points[1]
            gamma = c1 * psi_points[0] + c2 * psi_points[1]
            vals, ok = additive_bound_batch(delta[None], gamma[None], pm, horizon, 1.0)
            return float(vals[0]) if ok[0] else np.inf

        dp = TwoPointDp(points, [0.5, 0.5], terminal, horizon)
        optimal = dp.optimal_value()

        total = 0.0
        for path_id in range(2**horizon):
            zs = [(path_id >> i) & 1 for i in range(horizon)]
            state = AdditiveState.zero(1, 3)
            rng = np.random.default_rng(path_id)
            for z in zs:
                _, state = allocate(policy, state, points[z], rng=rng)
            total += additive_bound(state, pm, horizon, 1.0) / 2**horizon
        rnd_value = rnd_expected_terminal(points, [0.5, 0.5], terminal, horizon)
        assert total <= optimal * 1.05, (
            f"trained policy {total:.6f} vs exact DP {optimal:.6f} (>5% off)"
        )
        assert total < rnd_value, f"trained {total:.6f} not below RND {rnd_value:.6f}"
        _announce(3, f"trained {total:.5f} within 5% of exact DP {optimal:.5f}, "
                     f"below RND {rnd_value:.5f}")


class TestCriterion4GradientCheck:
    def test_backprop_matches_central_differences_100_instances(self):
        rng = np.random.default_rng(0xAC4)
        activations = ["swish", "gelu"]
        outputs = ["linear", "softplus"]
        worst = 0.0
        for k in range(100):
            spec = NetSpec(
                input_dim=2,
                hidden=(3,),
                activation=activations[k % 2],
                batch_norm=bool((k // 2) % 2),
                output=outputs[(k // 4) % 2],
            )
            params = net_init(spec, seed=int(rng.integers(2**31)))
            if (k // 8) % 2 and params.norm_mode == "batch":
                params.norm_mode = "layer"
            assert flat_param_count(params) <= 30
            x = rng.standard_normal((6, 2))
            y = rng.standard_normal(6)
            worst = max(worst, grad_rel_error(params, x, y))
        assert worst <= 1e-4, f"worst relative gradient error {worst:.2e}"
        _announce(4, f"100 tiny-net instances: worst backprop-vs-FD relative error {worst:.2e}")


def _bandit_designs(policies, names, n):
    designs = []
    for name in names:
        if name in ("RSD", "NRD"):
            designs.append(BanditPolicyDesign(policies[(name, n)], name))
        else:
            designs.append(BaselineDesign(BaselineKind(name)))
    return designs


@pytest.mark.slow
class TestCriterion5CorrectSpecEfficiency:
    def test_efficiency_under_correct_specification(self, additive_policies):
        dgp = BanditDgp.setup1(misspec="none")
        replications = 400
        mse = {}
        for n in BANDIT_N_VALUES:
            for design in _bandit_designs(additive_policies, ("RSD", "NRD", "RND"), n):
                report = run_experiment(design, dgp, n, replications, seed=0xAC5)
                assert report.failures == 0
                mse[(design.name, n)] = report.mse
        effs = {}
        for n in BANDIT_N_VALUES:
            effs[n] = mse[("NRD", n)] / mse[("RSD", n)]
            assert effs[n] >= 0.95, (
                f"Eff(RSD) = {effs[n]:.4f} < 0.95 at N={n} "
                f"(MSE RSD {mse[('RSD', n)]:.4f}, NRD {mse[('NRD', n)]:.4f})"
            )
        assert mse[("NRD", 21)] <= mse[("RND", 21)], (
            f"MSE(NRD)={mse[('NRD', 21)]:.4f} above MSE(RND)={mse[('RND', 21)]:.4f} at N=21"
        )
        _announce(5, "f=0 efficiency: Eff(RSD) = "
                  + ", ".join(f"{effs[n]:.4f}@N={n}" for n in BANDIT_N_VALUES)
                  + f"; MSE(NRD)={mse[('NRD', 21)]:.4f} <= MSE(RND)={mse[('RND', 21)]:.4f}")


BASELINE_FIELD = ("NRD", "RND", "SBD", "NBD", "BBD")


def _ordering_check(policies, dgp, label, num):
    replications = 400
    reports = {}
    for n in BANDIT_N_VALUES:
        names = ("RSD",) + (BASELINE_FIELD if n in (21, 42) else ())
        for design in _bandit_designs(policies, names, n):
            reports[(design.name, n)] = run_experiment(design, dgp, n, replications, seed=0xAC6)
    for n in (21, 42):
        rsd = reports[("RSD", n)].mse
        for other in BASELINE_FIELD:
            rival = reports[(other, n)].mse
            assert rsd < rival, (
                f"{label} N={n}: MSE(RSD)={rsd:.4f} not below {other}={rival:.4f}"
            )
    # monotone decrease over N, one inversion allowed within CI overlap
    inversions = 0
    for a, b in zip(BANDIT_N_VALUES[:-1], BANDIT_N_VALUES[1:]):
        ra, rb = reports[("RSD", a)], reports[("RSD", b)]
        if rb.mse > ra.mse:
            inversions += 1
            assert rb.mse - ra.mse <= ra.ci_half + rb.ci_half, (
                f"{label}: MSE rose {ra.mse:.4f}->{rb.mse:.4f} beyond CI overlap"
            )
    assert inversions <= 1, f"{label}: {inversions} monotonicity inversions"
    curve = ", ".join(f"{reports[('RSD', n)].mse:.4f}" for n in BANDIT_N_VALUES)
    _announce(num, f"{label}: RSD lowest at N=21 and N=42; RSD MSE over N: {curve}")
    return reports


@pytest.mark.slow
class TestCriterion6MisspecifiedOrdering:
    def test_setup1_additive(self, additive_policies):
        _ordering_check(additive_policies, BanditDgp.setup1(), "Setup 1 (additive)", 6)

    def test_setup2_interactive(self, interactive_policies):
        _ordering_check(interactive_policies, BanditDgp.setup2(), "Setup 2 (interactive)", 6)


class TestCriterion7DynamicRewardIdentity:
    def test_reward_sum_reproduces_objective(self):
        basis = SieveBasis.dynamic_default()
        rng = np.random.default_rng(0xAC7)
        from robdesign.objective import DesignPriors

        for _ in range(100):
            n_days = int(rng.integers(10, 17))
            intervals = int(rng.integers(2, 7))
            xs = np.empty((n_days, intervals, 4))
            xs[..., 0] = 1.0
            xs[..., 1:] = rng.standard_normal((n_days, intervals, 3))
            half = np.array([1, -1] * (n_days // 2) + [1] * (n_days % 2))
            acts = np.stack([half[rng.permutation(n_days)] for _ in range(intervals)], axis=1)
            feats = featurize_batch(basis, xs.reshape(-1, 4)).reshape(n_days, intervals, -1)
            bases = []
            for _ in range(intervals):
                c = rng.standard_normal((basis.dim, 4))
                bases.append(null_space_basis(c))
            priors = DesignPriors(
                u=rng.standard_normal((intervals, 8)),
                sigma2=rng.uniform(0.5, 2.0, intervals),
                eta2=rng.uniform(0.2, 2.0, intervals),
                u_basis=bases,
            )
            objective = dynamic_objective(xs, acts, feats, priors)
            total = 0.0
            for t in range(intervals):
                past = slice(0, n_days - 1)
                a_past = acts[past, t].astype(float)
                blocks = (
                    np.einsum("nd,ne->de", xs[past, t], xs[past, t]) / n_days,
                    np.einsum("n,nd,ne->de", a_past, xs[past, t], xs[past, t]) / n_days,
                    np.einsum("nl,nd->ld", feats[past, t], xs[past, t]) / n_days,
                    np.einsum("n,nl,nd->ld", a_past, feats[past, t], xs[past, t]) / n_days,
                )
                total += -intervals * dynamic_reward(
                    blocks, xs[-1, t], feats[-1, t], int(acts[-1, t]), t, priors,
                    n_days, intervals,
                )
            assert abs(total - objective) <= 1e-9 * max(1.0, abs(objective))
        _announce(7, "100 random completed datasets: per-interval reward sums "
                     "reproduce the dynamic objective to 1e-9")


@pytest.mark.slow
class TestCriterion8DynamicDeskScale:
    def test_hierarchical_ordering(self):
        n_days, intervals, delta = 21, 6, 3.0
        dgp = DynamicDgp.draw(np.random.default_rng(0xAC8), intervals, delta)
        basis = SieveBasis.dynamic_default()
        bundle = estimate_design_priors(dgp, basis, n_days, 4000, seed=0xAC8, eta_t=1.0)
        cfg = TrainConfig(lr=5e-3, entropy_coef=1e-3)
        policy = train_hierarchical(
            dgp, bundle.priors, n_days, intervals, epochs=50, batch=2000, cfg=cfg,
            seed=0xAC8, basis=basis, net_hidden=(64, 64),
        )
        truth = dgp.true_ate(n_rollouts=100_000, seed=0xAC8)
        replications = 200
        results = {}
        designs = [DynamicPolicyDesign(policy, "RSD")] + [
            BaselineDesign(BaselineKind(k)) for k in ("SBD", "RND")
        ]
        for design in designs:
            report = run_dynamic_experiment(
                design, dgp, n_days, replications, seed=0xAC9,
                mean_pos=bundle.mean_pos, mean_neg=bundle.mean_neg, true_ate=truth,
            )
            results[design.name] = report.mse
        assert results["RSD"] <= results["SBD"], (
            f"MSE(RSD)={results['RSD']:.4f} above SBD={results['SBD']:.4f}"
        )
        assert results["RSD"] <= results["RND"], (
            f"MSE(RSD)={results['RSD']:.4f} above RND={results['RND']:.4f}"
        )
        _announce(8, "dynamic desk scale (T=6, N=21, delta=3): MSE RSD "
                  f"{results['RSD']:.4f} <= SBD {results['SBD']:.4f}, RND {results['RND']:.4f}")


class TestCriterion9Determinism:
    def test_bench_byte_identical_across_threads(self, tmp_path):
        from robdesign.cli import main

        config = """
[experiment]
setting = "bandit_additive"
seed = 31
replications = 30
n_values = [12, 16]
designs = ["RND", "SBD", "NBD", "BBD"]

[dgp]
variant = "setup1"
"""
        cfg_path = tmp_path / "config.toml"
        cfg_path.write_text(config)
        csvs = []
        for threads in (1, 2, 3):
            out = tmp_path / f"out{threads}"
            code = main(["bench", "--config", str(cfg_path), "--out", str(out), "--threads", str(threads)])
            assert code in (0, 4)
            csvs.append((out / "bench.csv").read_bytes())
        assert csvs[0] == csvs[1] == csvs[2]
        _announce(9, "cmd_bench CSV byte-identical across --threads 1/2/3 and reruns")
