import numpy as np
import pytest

from dfedsim.data import make_synthetic_blobs, partition_iid
from dfedsim.errors import ConfigError
from dfedsim.numerics import RngStream
from dfedsim.optimizers import (
    AlgorithmKind,
    ClientState,
    HyperParams,
    extrapolate,
    gamma_weights,
    local_update,
    mix,
)
from dfedsim.problems import LogisticProblem, QuadraticProblem
from dfedsim.topology import TopologySpec, build_graph, metropolis_weights


class TestExtrapolate:
    def test_zero_beta_identity(self):
        s = ClientState.initial(np.array([1.0, 2.0]))
        s.x = np.array([3.0, 4.0])
        assert np.array_equal(extrapolate(s, 0.0), s.x)

    def test_equal_states_identity_any_beta(self):
        s = ClientState.initial(np.array([2.0, -1.0]))
        for beta in (0.0, 0.5, 0.99):
            assert np.array_equal(extrapolate(s, beta), s.x)

    def test_hand_arithmetic(self):
        s = ClientState.initial(np.array([1.0]))
        s.x = np.array([2.0])
        assert np.array_equal(extrapolate(s, 0.5), np.array([2.5]))
        assert np.array_equal(s.anchor, np.array([2.5]))


class TestGammaWeights:
    def test_documented_value(self):
        g_over_lam, w = gamma_weights(0.1, 0.5, 5)
        gamma = g_over_lam * 0.5
        assert gamma == pytest.approx(0.2262190625, abs=1e-12)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_lambda_zero_limit(self):
        g_over_lam, w = gamma_weights(0.1, 0.0, 4)
        assert g_over_lam == pytest.approx(0.4, abs=1e-15)
        assert np.allclose(w, 0.25)

    def test_weights_are_geometric(self):
        eta, lam, K = 0.2, 0.3, 6
        _, w = gamma_weights(eta, lam, K)
        r = 1 - eta * lam
        raw = eta * lam * r ** np.arange(K - 1, -1, -1)
        assert np.allclose(w, raw / raw.sum(), atol=1e-15)


def quad_problem(m=4, d=6, seed=2):
    return QuadraticProblem.random(m, d, RngStream(seed, "q"), center_spread=1.5)


def logistic_problem(m=4, seed=4):
    rng = RngStream(seed, "fx")
    ds = make_synthetic_blobs(3, 5, 160, 3.0, rng.spawn("blobs"))
    return LogisticProblem(ds, partition_iid(ds, m, rng.spawn("part")))


def run_local(problem, kind, hyper, state=None, round_index=0, seed=77, collect=False):
    if state is None:
        state = ClientState.initial(RngStream(seed, "x0").standard_normal(problem.d) * 0.4)
    if AlgorithmKind(kind) is AlgorithmKind.DFEDCATA:
        extrapolate(state, hyper.beta)
    return state, local_update(kind, state, problem, 0, hyper, round_index, seed, collect_grads=collect)


class TestLocalUpdateClosedForm:
    def test_single_plain_step(self):
        p = quad_problem()
        hyper = HyperParams(eta=0.1, lambda_=0.0, beta=0.0, K=1, batch_size=None)
        state, res = run_local(p, "dfedcata", hyper)
        expected = state.x - 0.1 * p.grad(0, state.x)
        assert np.allclose(res.x_new, expected, atol=1e-15)

    @pytest.mark.parametrize("eta,lam,k", [
        (0.1, 0.5, 5), (0.05, 0.0, 7), (0.2, 1.2, 3), (0.02, 2.0, 20), (0.1, 0.0, 1),
    ])
    def test_matches_weighted_gradient_form(self, eta, lam, k):
        assert eta * lam < 1.0
        for p in (quad_problem(), logistic_problem()):
            hyper = HyperParams(eta=eta, lambda_=lam, beta=0.3, K=k, batch_size=None, lr_decay=1.0)
            state, res = run_local(p, "dfedcata", hyper, collect=True)
            g_over_lam, w = gamma_weights(eta, lam, k)
            predicted = state.anchor - g_over_lam * (w @ res.grads)
            assert np.max(np.abs(res.x_new - predicted)) < 1e-10

    def test_local_energy_bound_holds(self):
        for p in (quad_problem(), logistic_problem()):
            hyper = HyperParams(eta=0.1, lambda_=0.4, beta=0.0, K=8, batch_size=None, lr_decay=1.0)
            state, res = run_local(p, "dfedcata", hyper, collect=True)
            g_over_lam, w = gamma_weights(0.1, 0.4, 8)
            lhs = float(np.sum((res.x_new - state.anchor) ** 2))
            rhs = g_over_lam**2 * float(w @ np.sum(res.grads**2, axis=1))
            assert lhs <= rhs + 1e-12

    def test_divergence_error_naming_round(self):
        from dfedsim.errors import DivergenceError
        from dfedsim.engine import ProblemSpec, RunConfig, run
        cfg = RunConfig(
            algorithm="dfedavg", m=4, seed=2,
            hyper=HyperParams(eta=1e6, lambda_=0.0, beta=0.0, K=30, T=400, batch_size=None, lr_decay=1.0),
            topology=TopologySpec("ring", 4),
            problem=ProblemSpec(kind="quadratic", d=4, curvature_min=3.0, curvature_max=4.0),
            init="gaussian",
        )
        with pytest.raises(DivergenceError) as err:
            run(cfg)
        assert err.value.round_index >= 0
        assert hasattr(err.value, "partial_records")


class TestBaselineDegeneracies:
    def _final(self, p, kind, hyper, seed=31):
        state, res = run_local(p, kind, hyper, seed=seed)
        return res.x_new

    def test_momentum_zero_equals_plain(self):
        p = quad_problem()
        h = HyperParams(eta=0.1, momentum=0.0, K=6, batch_size=None)
        assert np.array_equal(self._final(p, "dfedavgm", h), self._final(p, "dfedavg", h))

    def test_sam_zero_radius_equals_plain(self):
        p = logistic_problem()
        h = HyperParams(eta=0.1, rho=0.0, K=6, batch_size=16)
        assert np.array_equal(self._final(p, "dfedsam", h), self._final(p, "dfedavg", h))

    def test_dfedcata_degenerates_to_plain(self):
        p = logistic_problem()
        h = HyperParams(eta=0.1, lambda_=0.0, beta=0.0, K=6, batch_size=16)
        assert np.array_equal(self._final(p, "dfedcata", h), self._final(p, "dfedavg", h))

    def test_dpsgd_is_single_step(self):
        p = quad_problem()
        h = HyperParams(eta=0.1, K=9, batch_size=None)
        state = ClientState.initial(RngStream(31, "x0").standard_normal(p.d) * 0.4)
        res = local_update("dpsgd", state, p, 0, h, 0, 31)
        expected = state.x - 0.1 * p.grad(0, state.x)
        assert np.allclose(res.x_new, expected, atol=1e-15)


class TestMix:
    def test_identity_no_change(self):
        X = RngStream(1, "mix").standard_normal((5, 3))
        assert np.array_equal(mix(X, np.eye(5)), X)

    def test_uniform_full_averages(self):
        X = RngStream(2, "mix").standard_normal((4, 3))
        out = mix(X, np.full((4, 4), 0.25))
        for i in range(4):
            assert np.allclose(out[i], X.mean(axis=0), atol=1e-15)

    def test_mean_preserved_across_builders(self):
        specs = [
            TopologySpec("ring", 10),
            TopologySpec("grid", 10),
            TopologySpec("exponential", 10),
            TopologySpec("full", 10),
            TopologySpec("erdos_renyi", 10, seed=5, p=0.5),
        ]
        X = RngStream(3, "mix").standard_normal((10, 7))
        for spec in specs:
            W = metropolis_weights(build_graph(spec)).W
            out = mix(X, W)
            assert np.max(np.abs(out.mean(axis=0) - X.mean(axis=0))) < 1e-12

    def test_dimension_mismatch(self):
        from dfedsim.errors import DimensionError
        with pytest.raises(DimensionError):
            mix(np.zeros((3, 2)), np.eye(4))


class TestHyperValidation:
    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            HyperParams(eta=0.0)
        with pytest.raises(ConfigError):
            HyperParams(beta=1.0)
        with pytest.raises(ConfigError):
            HyperParams(K=0)
        with pytest.raises(ConfigError):
            HyperParams(lambda_=-0.1)
        with pytest.raises(ConfigError):
            HyperParams(batch_size=0)

    def test_effective_eta_decay(self):
        h = HyperParams(eta=0.1, lr_decay=0.998)
        assert h.effective_eta(0) == 0.1
        assert h.effective_eta(2) == pytest.approx(0.1 * 0.998**2, abs=1e-18)
