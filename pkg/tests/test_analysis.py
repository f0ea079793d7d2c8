import numpy as np
import pytest

from dfedsim.analysis import (
    StabilityProbeConfig,
    consensus_distance,
    geometric_weighted_sums,
    kappa_psi,
    kappa_psi_alt,
    rate_fit,
    stability_probe,
)
from dfedsim.engine import PartitionSpec, ProblemSpec, RoundRecord, RunConfig, iter_rounds
from dfedsim.errors import ConfigError
from dfedsim.numerics import RngStream
from dfedsim.optimizers import HyperParams
from dfedsim.topology import TopologySpec


class TestKappaPsi:
    def test_dual_implementations_agree(self):
        for psi in (0.05, 0.3, 0.5, 0.9, 0.99):
            for alpha in (0.1, 0.5, 0.9):
                k1 = kappa_psi(psi, alpha)
                k2 = kappa_psi_alt(psi, alpha)
                assert abs(k1 - k2) / k1 < 1e-12

    def test_monotone_blowup_near_one(self):
        values = [kappa_psi(p, 0.5) for p in (0.9, 0.99, 0.999)]
        assert values[0] < values[1] < values[2]

    def test_domain_errors(self):
        for psi, alpha in ((0.0, 0.5), (1.0, 0.5), (0.5, 0.0), (0.5, 1.0), (-0.1, 0.5)):
            with pytest.raises(ConfigError):
                kappa_psi(psi, alpha)

    def test_bound_on_small_grid(self):
        for psi in (0.2, 0.6, 0.9):
            for alpha in (0.25, 0.75):
                kappa = kappa_psi(psi, alpha)
                sums = geometric_weighted_sums(psi, alpha, 3000)
                t = np.arange(1, 3001, dtype=np.float64)
                assert np.all(sums <= kappa / t**alpha)

    def test_sums_match_direct_summation(self):
        psi, alpha = 0.7, 0.4
        sums = geometric_weighted_sums(psi, alpha, 50)
        for t in (1, 2, 10, 50):
            direct = sum(psi ** (t - s - 1) / (s + 1) ** alpha for s in range(t))
            assert sums[t - 1] == pytest.approx(direct, rel=1e-12)


class TestRateFit:
    def _records(self, grads):
        return [
            RoundRecord(round=i, train_loss=1.0, grad_norm_z_sq=g, consensus=0.0,
                        test_accuracy=None, psi_round=0.5, elapsed_ms=1.0)
            for i, g in enumerate(grads)
        ]

    def test_inverse_sqrt_slope(self):
        recs = self._records([1.0 / np.sqrt(t + 1) for t in range(200)])
        assert rate_fit(recs) == pytest.approx(-0.5, abs=0.05)

    def test_constant_slope_zero(self):
        recs = self._records([0.7] * 100)
        assert rate_fit(recs) == pytest.approx(0.0, abs=1e-12)

    def test_exact_zero_gives_sentinel(self):
        recs = self._records([1.0 / (t + 1) for t in range(50)] + [0.0] * 50)
        assert rate_fit(recs) == float("-inf")

    def test_too_few_records(self):
        with pytest.raises(ConfigError):
            rate_fit(self._records([1.0] * 19))


class TestConsensusDistance:
    def test_all_equal_zero(self):
        X = np.tile([1.0, 2.0, 3.0], (5, 1))
        assert consensus_distance(X) == 0.0

    def test_two_clients_hand_value(self):
        assert consensus_distance(np.array([[0.0], [2.0]])) == pytest.approx(1.0, abs=1e-15)

    def test_after_uniform_mix_zero(self):
        X = RngStream(1, "c").standard_normal((6, 4))
        mixed = np.full((6, 6), 1 / 6) @ X
        assert consensus_distance(mixed) < 1e-28


def probe_cfg(seed=11, T=40, batch_size=16):
    return RunConfig(
        algorithm="dfedcata",
        m=8,
        seed=seed,
        hyper=HyperParams(eta=0.05, lambda_=0.1, beta=0.5, K=5, T=T, batch_size=batch_size),
        topology=TopologySpec("ring", 8),
        problem=ProblemSpec(kind="logistic", classes=4, features=8, train_n=4096,
                            test_n=64, separation=3.0),
        partition=PartitionSpec(kind="iid"),
        eval_every=10,
    )


class TestStabilityProbe:
    def test_identical_replacement_keeps_delta_zero(self):
        # replace the sample with itself: the twin runs share every input
        from dfedsim.engine import build_problem

        cfg = probe_cfg(T=10)
        problem_a, test_x, test_y = build_problem(cfg)
        same_row = problem_a._phi[2][5][:-1]
        problem_b = problem_a.replace_sample(2, 5, same_row)
        for snap_a, snap_b in zip(
            iter_rounds(cfg, problem=problem_a, test_data=(test_x, test_y)),
            iter_rounds(cfg, problem=problem_b, test_data=(test_x, test_y)),
        ):
            assert np.array_equal(snap_a.states, snap_b.states)

    def test_coupled_before_measured_tau0(self):
        rep = stability_probe(probe_cfg(), StabilityProbeConfig(
            mu_tilde=0.1, perturbed_client=2, perturbed_index=5, probe_size=64))
        assert rep.coupled_before_tau0
        if rep.tau0_round is not None and rep.tau0_round > 0:
            assert np.all(rep.delta[: rep.tau0_round] == 0.0)
            assert rep.delta[rep.tau0_round:].max() > 0.0

    def test_full_batch_delta_monotone(self):
        rep = stability_probe(probe_cfg(T=40, batch_size=None), StabilityProbeConfig(
            mu_tilde=0.1, perturbed_client=2, perturbed_index=5, probe_size=64))
        assert rep.tau0 == 1  # every full-batch gradient touches the sample
        assert np.all(np.diff(rep.delta) >= 0.0)

    def test_rejects_quadratic(self):
        cfg = probe_cfg()
        from dataclasses import replace
        bad = replace(cfg, problem=ProblemSpec(kind="quadratic", d=5))
        with pytest.raises(ConfigError):
            stability_probe(bad, StabilityProbeConfig(mu_tilde=0.1))

    def test_rejects_oversized_step_constant(self):
        with pytest.raises(ConfigError):
            stability_probe(probe_cfg(), StabilityProbeConfig(mu_tilde=1e3))

    def test_report_fields_populated(self):
        rep = stability_probe(probe_cfg(T=20), StabilityProbeConfig(
            mu_tilde=0.1, perturbed_client=1, perturbed_index=3, probe_size=32))
        assert rep.delta.shape == (20,)
        assert rep.sup_loss_gap.shape == (20,)
        assert rep.U > 0 and rep.L_G > 0 and rep.L > 0
        assert 0 < rep.mean_psi < 1
