import numpy as np
import pytest

from robdesign.errors import DegenerateDesign, HorizonExceeded, InsufficientData
from robdesign.objective import additive_bound, additive_bound_batch
from robdesign.designer_bandit import (
    BanditDesignPolicy,
    BanditPolicyDesign,
    DgpCovariates,
    EmpiricalCovariates,
    allocate,
    build_stage_targets,
    load_policy,
    make_stage_evaluator,
    sample_behavior_actions,
    save_policy,
    train_policy,
    train_stage,
)
from robdesign.sieve import PopulationMoments, SieveBasis, estimate_moments, featurize, featurize_batch
from robdesign.sim import BanditDgp
from robdesign.state import AdditiveState, additive_update
from robdesign.valuenet import NetSpec, TrainConfig

from .oracles import TwoPointDp

# bare scalar covariate (no intercept): the only shape where horizons as
# short as N=2 keep a' P a away from zero
TWO_POINTS = np.array([[0.8], [-1.2]])
TWO_POINT_BASIS = SieveBasis(terms=((0, 1), (0, 2), (0, 3)), clamp=((-3.0, 3.0),))


@pytest.fixture(scope="module")
def two_point_moments():
    # tiling the support reproduces the population moments exactly
    from robdesign.numerics import null_space_basis

    pts = np.tile(TWO_POINTS, (500, 1))
    feats = featurize_batch(TWO_POINT_BASIS, pts)
    xi = feats.T @ pts / len(pts)
    return PopulationMoments(
        sigma=pts.T @ pts / len(pts),
        xi=xi,
        u_basis=null_space_basis(xi),
        mean_x=pts.mean(axis=0),
        nu2=0.5,
    )


@pytest.fixture(scope="module")
def small_policy(bandit_basis, bandit_moments):
    """Small additive policy on the Setup-1 covariate law (N=6)."""
    dgp = BanditDgp.setup1()
    cfg = TrainConfig(lr=3e-3, batch_size=128, epochs=120, patience=15, target_transform="log")
    return train_policy(
        "additive", 6, bandit_moments, bandit_basis, DgpCovariates(dgp),
        sample_behavior_actions, 600, 128, cfg, seed=99, net_hidden=(24, 16),
    )


def terminal_fn_factory(pm, horizon):
    points_psi = featurize_batch(TWO_POINT_BASIS, TWO_POINTS)

    def terminal(c1, c2):
        delta = c1 * TWO_POINTS[0] + c2 * TWO_POINTS[1]
        gamma = c1 * points_psi[0] + c2 * points_psi[1]
        vals, ok = additive_bound_batch(delta[None], gamma[None], pm, horizon, 1.0)
        return float(vals[0]) if ok[0] else np.inf

    return terminal


class TestBehavior:
    def test_action_values(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            acts = sample_behavior_actions(rng, 9)
            assert set(np.unique(acts)).issubset({-1, 1})
            assert len(acts) == 9

    def test_spans_imbalance_levels(self):
        rng = np.random.default_rng(1)
        sums = {int(sample_behavior_actions(rng, 8).sum()) for _ in range(400)}
        # fixed-imbalance mode reaches the extremes, switchback the middle
        assert {-8, 0, 8}.issubset(sums)


class TestBuildStageTargets:
    def test_constant_next_value(self, bandit_basis, bandit_moments):
        dgp = BanditDgp.setup1()

        def const(deltas, gammas):
            return np.full(len(deltas), 0.7), np.ones(len(deltas), dtype=bool)

        (_, _), targets, dropped = build_stage_targets(
            3, const, DgpCovariates(dgp), bandit_basis, "additive", 50, 16, seed=7
        )
        assert dropped == 0
        assert np.max(np.abs(targets - 0.7)) <= 1e-12

    def test_exhaustive_two_point_matches_enumeration(self, two_point_moments):
        # N=2, stage n=1: target is the exact Bellman backup of the terminal
        horizon = 2
        cov = EmpiricalCovariates(TWO_POINTS)
        terminal = terminal_fn_factory(two_point_moments, horizon)

        def next_value(deltas, gammas):
            return additive_bound_batch(deltas, gammas, two_point_moments, horizon, 1.0)

        (deltas, gammas), targets, _ = build_stage_targets(
            1, next_value, cov, TWO_POINT_BASIS, "additive", 40, 2, seed=8, exhaustive=True
        )
        assert len(targets) > 0
        dp = TwoPointDp(TWO_POINTS, [0.5, 0.5], terminal, horizon)
        psi_points = featurize_batch(TWO_POINT_BASIS, TWO_POINTS)
        for gamma, target in zip(gammas, targets):
            counts = np.linalg.lstsq(psi_points.T, gamma, rcond=None)[0]
            c1, c2 = int(round(counts[0])), int(round(counts[1]))
            assert np.allclose(c1 * psi_points[0] + c2 * psi_points[1], gamma, atol=1e-9)
            expect = dp._value(1, c1, c2)
            assert abs(target - expect) <= 1e-9 * max(1.0, abs(expect))

    def test_prefix_determinism_when_batch_grows(self, bandit_basis, bandit_moments):
        dgp = BanditDgp.setup1()

        def next_value(deltas, gammas):
            return additive_bound_batch(deltas, gammas, bandit_moments, 20, 1.0)

        (d_small, g_small), t_small, _ = build_stage_targets(
            4, next_value, DgpCovariates(dgp), bandit_basis, "additive", 30, 32, seed=9
        )
        (d_big, g_big), t_big, _ = build_stage_targets(
            4, next_value, DgpCovariates(dgp), bandit_basis, "additive", 60, 32, seed=9
        )
        assert np.array_equal(t_small, t_big[:30])
        assert np.array_equal(d_small, d_big[:30])

    def test_insufficient_data(self, bandit_basis, bandit_moments):
        dgp = BanditDgp.setup1()

        def degenerate(deltas, gammas):
            return np.full(len(deltas), np.inf), np.zeros(len(deltas), dtype=bool)

        with pytest.raises(InsufficientData):
            build_stage_targets(
                2, degenerate, DgpCovariates(dgp), bandit_basis, "additive", 20, 8, seed=10
            )


class TestTrainStage:
    def test_constant_target_net(self, bandit_basis, bandit_moments):
        dgp = BanditDgp.setup1()

        def const(deltas, gammas):
            return np.full(len(deltas), 0.7), np.ones(len(deltas), dtype=bool)

        cfg = TrainConfig(lr=1e-2, batch_size=64, epochs=400, patience=80, target_transform="log")
        net, report, _ = train_stage(
            3, const, DgpCovariates(dgp), sample_behavior_actions, 200, 16, cfg, seed=11,
            basis=bandit_basis, setting="additive",
            net_spec=NetSpec(input_dim=10, hidden=(8,)),
        )
        from robdesign.designer_bandit import additive_net_inputs
        from robdesign.valuenet import net_predict

        # probe at the training states themselves (same stage, same seed)
        (deltas, gammas), _, _ = build_stage_targets(
            3, const, DgpCovariates(dgp), bandit_basis, "additive", 200, 16, seed=11
        )
        preds = np.exp(net_predict(net, additive_net_inputs(deltas, gammas)))
        assert np.max(np.abs(preds - 0.7) / 0.7) <= 0.01


class TestTrainPolicy:
    def test_two_stage_horizon_trains_one_net(self):
        # N=2 cannot identify the effect once covariates enter, so the
        # shortest-horizon case runs on an intercept-only law (p = 1)
        basis = SieveBasis(terms=((0, 0), (0, 1), (0, 2)), clamp=((-1.0, 1.0),))
        pm = estimate_moments(basis, np.ones((50, 1)), nu2=0.3)
        cov = EmpiricalCovariates(np.array([[1.0]]))
        cfg = TrainConfig(lr=5e-3, batch_size=32, epochs=30, patience=10, target_transform="log")
        policy = train_policy(
            "additive", 2, pm, basis, cov,
            sample_behavior_actions, 100, 8, cfg, seed=13, net_hidden=(8,),
        )
        assert len(policy.nets) == 1 and policy.nets[0] is not None

    def test_nu2_zero_terminal_is_variance_only(self, bandit_basis, bandit_moments):
        pm0 = PopulationMoments(
            sigma=bandit_moments.sigma, xi=bandit_moments.xi,
            u_basis=bandit_moments.u_basis, mean_x=bandit_moments.mean_x, nu2=0.0,
        )
        horizon = 30
        policy = BanditDesignPolicy(
            horizon=horizon, setting="additive", nets=[None] * (horizon - 1), pm=pm0,
            basis=bandit_basis, sigma2=1.0,
        )
        evaluator = make_stage_evaluator(policy, horizon)
        rng = np.random.default_rng(14)
        deltas = rng.standard_normal((20, 3))
        gammas = rng.standard_normal((20, 7))
        vals, ok = evaluator(deltas, gammas)
        quad = np.einsum("kp,pq,kq->k", deltas, pm0.sigma_inv, deltas)
        expect = 1.0 / (horizon - quad / horizon)
        assert ok.all()
        assert np.max(np.abs(vals - expect)) <= 1e-10

    def test_three_stage_matches_exact_dp_actions(self, two_point_moments):
        horizon = 3
        cov = EmpiricalCovariates(TWO_POINTS)
        cfg = TrainConfig(lr=5e-3, batch_size=64, epochs=250, patience=40, target_transform="log")
        policy = train_policy(
            "additive", horizon, two_point_moments, TWO_POINT_BASIS, cov,
            sample_behavior_actions, 500, 2, cfg, seed=15, net_hidden=(16, 16),
            exhaustive=True,
        )
        terminal = terminal_fn_factory(two_point_moments, horizon)
        dp = TwoPointDp(TWO_POINTS, [0.5, 0.5], terminal, horizon)
        psi_points = featurize_batch(TWO_POINT_BASIS, TWO_POINTS)
        agree = total = 0
        for path_id in range(2**horizon):
            zs = [(path_id >> i) & 1 for i in range(horizon)]
            state = AdditiveState.zero(1, 3)
            counts = [0, 0]
            rng = np.random.default_rng(16)
            for i, z in enumerate(zs):
                a_policy, _ = allocate(policy, state, TWO_POINTS[z], rng=rng)
                a_dp = dp.greedy_action(i + 1, counts[0], counts[1], z)
                if a_dp != 0:
                    total += 1
                    agree += a_policy == a_dp
                # advance along the DP-optimal path to compare on-policy
                take = a_dp if a_dp != 0 else a_policy
                counts[z] += take
                state = additive_update(state, TWO_POINTS[z], psi_points[z], take)
        assert total > 0
        assert agree / total >= 0.9


class TestAllocate:
    def test_zero_covariate_exact_tie(self):
        # odd-degree basis so the zero vector has zero features: the two
        # candidate states coincide and the coin decides
        basis = SieveBasis(terms=((1, 1), (1, 3)), clamp=((-1.0, 1.0), (-3.0, 3.0)))
        rng = np.random.default_rng(17)
        z = rng.standard_normal(300)
        historical = np.column_stack([np.ones_like(z), z])
        pm = estimate_moments(basis, historical, nu2=0.3)
        policy = BanditDesignPolicy(
            horizon=1, setting="additive", nets=[], pm=pm, basis=basis, sigma2=1.0
        )
        actions = set()
        for seed in range(40):
            state = AdditiveState.zero(2, 2)
            a, _ = allocate(policy, state, np.zeros(2), rng=np.random.default_rng(seed))
            actions.add(a)
        assert actions == {-1, 1}

    def test_horizon_one_symmetric_coin(self, bandit_basis, bandit_moments):
        policy = BanditDesignPolicy(
            horizon=1, setting="additive", nets=[], pm=bandit_moments,
            basis=bandit_basis, sigma2=1.0,
        )
        x = np.array([1.0, 0.4, -0.2])
        actions = set()
        for seed in range(40):
            a, _ = allocate(
                policy, AdditiveState.zero(3, 7), x, rng=np.random.default_rng(seed)
            )
            actions.add(a)
        assert actions == {-1, 1}

    def test_imbalance_correction_terminal(self, bandit_basis, bandit_moments):
        policy = BanditDesignPolicy(
            horizon=6, setting="additive", nets=[None] * 5, pm=bandit_moments,
            basis=bandit_basis, sigma2=1.0,
        )
        rng = np.random.default_rng(18)
        dgp = BanditDgp.setup1()
        flips = 0
        trials = 1000
        for _ in range(trials):
            xs = dgp.draw_covariates(rng, 6)
            state = AdditiveState.zero(3, 7)
            for i in range(5):
                state = additive_update(state, xs[i], featurize(bandit_basis, xs[i]), 1)
            action, _ = allocate(policy, state, xs[5], rng=rng)
            flips += action == -1
        assert flips / trials > 0.5

    def test_imbalance_correction_net_stage(self, small_policy):
        rng = np.random.default_rng(19)
        dgp = BanditDgp.setup1()
        flips = 0
        trials = 1000
        for _ in range(trials):
            xs = dgp.draw_covariates(rng, 3)
            state = AdditiveState.zero(3, 7)
            for i in range(2):
                state = additive_update(state, xs[i], featurize(small_policy.basis, xs[i]), 1)
            action, _ = allocate(small_policy, state, xs[2], rng=rng)
            flips += action == -1
        assert flips / trials > 0.5

    def test_sign_symmetry_at_terminal(self, bandit_basis, bandit_moments):
        # Q_N(delta, gamma) = Q_N(-delta, -gamma): flipping the history and
        # the candidate action leaves the attained minimum value unchanged
        horizon = 10
        policy = BanditDesignPolicy(
            horizon=horizon, setting="additive", nets=[None] * (horizon - 1),
            pm=bandit_moments, basis=bandit_basis, sigma2=1.0,
        )
        evaluator = make_stage_evaluator(policy, horizon)
        rng = np.random.default_rng(20)
        dgp = BanditDgp.setup1()
        for _ in range(25):
            xs = dgp.draw_covariates(rng, horizon)
            state = AdditiveState.zero(3, 7)
            flipped = AdditiveState.zero(3, 7)
            acts = rng.integers(0, 2, horizon - 1) * 2 - 1
            for i in range(horizon - 1):
                psi = featurize(bandit_basis, xs[i])
                state = additive_update(state, xs[i], psi, int(acts[i]))
                flipped = additive_update(flipped, xs[i], psi, int(-acts[i]))
            x_new = xs[-1]
            psi_new = featurize(bandit_basis, x_new)
            v_orig, _ = evaluator(
                np.stack([state.delta + x_new, state.delta - x_new]),
                np.stack([state.gamma + psi_new, state.gamma - psi_new]),
            )
            v_flip, _ = evaluator(
                np.stack([flipped.delta + x_new, flipped.delta - x_new]),
                np.stack([flipped.gamma + psi_new, flipped.gamma - psi_new]),
            )
            # the value table flips with the action: v_flip = v_orig[::-1]
            assert np.max(np.abs(v_flip - v_orig[::-1])) <= 1e-12
            a1, _ = allocate(policy, state, x_new, rng=np.random.default_rng(1))
            a2, _ = allocate(policy, flipped, x_new, rng=np.random.default_rng(1))
            if v_orig[0] != v_orig[1]:
                assert a2 == -a1

    def test_never_reads_future_covariates(self, small_policy):
        rng_a = np.random.default_rng(21)
        dgp = BanditDgp.setup1()
        xs = dgp.draw_covariates(rng_a, 6)
        xs_divergent = xs.copy()
        xs_divergent[3:] = dgp.draw_covariates(rng_a, 3)

        def run(stream, seed):
            state = small_policy.zero_state()
            rng = np.random.default_rng(seed)
            actions = []
            for x in stream:
                a, state = allocate(small_policy, state, x, rng=rng)
                actions.append(a)
            return actions

        assert run(xs, 5)[:3] == run(xs_divergent, 5)[:3]

    def test_horizon_exceeded(self, small_policy):
        state = small_policy.zero_state()
        rng = np.random.default_rng(22)
        dgp = BanditDgp.setup1()
        for x in dgp.draw_covariates(rng, 6):
            _, state = allocate(small_policy, state, x, rng=rng)
        with pytest.raises(HorizonExceeded):
            allocate(small_policy, state, np.array([1.0, 0, 0]), rng=rng)


class TestSerialization:
    def test_roundtrip_same_allocations(self, small_policy, tmp_path):
        save_policy(small_policy, tmp_path / "pol")
        loaded = load_policy(tmp_path / "pol")
        dgp = BanditDgp.setup1()
        xs = dgp.draw_covariates(np.random.default_rng(23), 6)

        def run(policy):
            state = policy.zero_state()
            rng = np.random.default_rng(3)
            actions = []
            for x in xs:
                a, state = allocate(policy, state, x, rng=rng)
                actions.append(a)
            return actions

        assert run(small_policy) == run(loaded)
        assert loaded.log_targets == small_policy.log_targets

    def test_design_adapter_runs(self, small_policy):
        from robdesign.sim import run_experiment

        dgp = BanditDgp.setup1()
        report = run_experiment(
            BanditPolicyDesign(small_policy, "RSD"), dgp, 6, 10, seed=24
        )
        assert report.failures == 0
        assert np.isfinite(report.mse)
