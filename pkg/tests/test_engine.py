import os

import numpy as np
import pytest

from dfedsim.engine import (
    PartitionSpec,
    ProblemSpec,
    RoundRecord,
    RunConfig,
    apply_axis,
    rounds_to_threshold,
    run,
    sweep,
)
from dfedsim.errors import ConfigError
from dfedsim.numerics import RngStream
from dfedsim.optimizers import HyperParams
from dfedsim.topology import TopologySpec


def quad_cfg(**overrides):
    base = dict(
        algorithm="dfedcata",
        m=8,
        seed=3,
        hyper=HyperParams(eta=0.1, lambda_=0.1, beta=0.5, K=5, T=50, batch_size=None),
        topology=TopologySpec("ring", 8),
        problem=ProblemSpec(kind="quadratic", d=10),
        init="gaussian",
    )
    base.update(overrides)
    return RunConfig(**base)


class TestRunBasics:
    def test_t0_returns_initial_state(self):
        cfg = quad_cfg(hyper=HyperParams(T=0))
        res = run(cfg)
        assert res.records == []
        x0 = RngStream(3, "init").standard_normal(10) * 0.1
        assert np.array_equal(res.final_states, np.tile(x0, (8, 1)))

    def test_rounds_strictly_increasing_and_finite(self):
        res = run(quad_cfg())
        rounds = [r.round for r in res.records]
        assert rounds == sorted(set(rounds))
        for r in res.records:
            assert np.isfinite([r.train_loss, r.grad_norm_z_sq, r.consensus, r.psi_round]).all()

    def test_eval_every_keeps_last_round(self):
        cfg = quad_cfg(eval_every=7)
        res = run(cfg)
        rounds = [r.round for r in res.records]
        assert rounds[-1] == 49
        assert all(r % 7 == 0 or r == 49 for r in rounds)

    def test_repeat_identical(self):
        a, b = run(quad_cfg()), run(quad_cfg())
        assert np.array_equal(a.final_states, b.final_states)
        for ra, rb in zip(a.records, b.records):
            for fld in ("round", "train_loss", "grad_norm_z_sq", "consensus", "psi_round"):
                assert getattr(ra, fld) == getattr(rb, fld)

    def test_thread_count_invariance(self):
        cfg = quad_cfg(
            problem=ProblemSpec(kind="quadratic", d=10, noise_sigma=0.3),
            hyper=HyperParams(eta=0.1, lambda_=0.1, beta=0.5, K=5, T=20, batch_size=None),
        )
        old = os.environ.get("DFL_THREADS")
        try:
            os.environ["DFL_THREADS"] = "1"
            a = run(cfg)
            os.environ["DFL_THREADS"] = "5"
            b = run(cfg)
        finally:
            if old is None:
                os.environ.pop("DFL_THREADS", None)
            else:
                os.environ["DFL_THREADS"] = old
        assert np.array_equal(a.final_states, b.final_states)

    def test_seed_zero_rejected(self):
        with pytest.raises(ConfigError):
            quad_cfg(seed=0)

    def test_m_topology_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            quad_cfg(m=9)


class TestCsvBackedRun:
    def test_run_from_csv_dataset(self, tmp_path):
        from dfedsim.data import make_synthetic_blobs, save_csv

        rng_train = make_synthetic_blobs(3, 5, 240, 3.0, RngStream(8, "csv-train"))
        rng_test = make_synthetic_blobs(3, 5, 60, 3.0, RngStream(8, "csv-test"))
        train_path, test_path = tmp_path / "train.csv", tmp_path / "test.csv"
        save_csv(rng_train, train_path)
        save_csv(rng_test, test_path)
        cfg = RunConfig(
            algorithm="dfedavg",
            m=4,
            seed=2,
            hyper=HyperParams(eta=0.1, K=3, T=8, batch_size=16),
            topology=TopologySpec("ring", 4),
            problem=ProblemSpec(kind="logistic", classes=3,
                                csv_path=str(train_path), csv_test_path=str(test_path)),
            partition=PartitionSpec(kind="iid"),
        )
        res = run(cfg)
        assert len(res.records) == 8
        assert res.records[-1].test_accuracy is not None
        assert res.records[-1].test_accuracy > 0.5


class TestHomogeneousQuadraticOracle:
    """All clients share A=I, b=0 on a full graph: the run must match an
    independent single-machine replay of the extrapolated proximal recursion."""

    def _cfg(self, beta):
        return RunConfig(
            algorithm="dfedcata",
            m=8,
            seed=3,
            hyper=HyperParams(eta=0.1, lambda_=0.1, beta=beta, K=5, T=200, batch_size=None),
            topology=TopologySpec("full", 8),
            problem=ProblemSpec(kind="quadratic", d=10, homogeneous=True),
            init="gaussian",
        )

    @staticmethod
    def _oracle(beta, rounds=200, d=10, seed=3):
        x = RngStream(seed, "init").standard_normal(d) * 0.1
        xp = x.copy()
        for t in range(rounds):
            eta = 0.1 * 0.998**t
            anchor = x + beta * (x - xp)
            y = anchor.copy()
            for _ in range(5):
                y = y - eta * (y + 0.1 * (y - anchor))  # grad f = x for A=I, b=0
            xp, x = x, y
        return x

    def test_converges_below_1e8_and_matches_oracle(self):
        res = run(self._cfg(0.5))
        losses = [r.train_loss for r in res.records]
        assert losses[-1] < 1e-8
        oracle = self._oracle(0.5)
        assert np.max(np.abs(res.average - oracle)) < 1e-10 * max(1.0, np.max(np.abs(oracle)))
        # momentum ripples: the loss envelope still decreases over 8-round windows
        for i in range(len(losses) - 8):
            if losses[i] > 1e-90:
                assert losses[i + 8] < losses[i]

    def test_no_momentum_is_strictly_monotone(self):
        losses = [r.train_loss for r in run(self._cfg(0.0)).records]
        assert losses[-1] < 1e-8
        for i in range(len(losses) - 1):
            if losses[i] > 1e-90:
                assert losses[i + 1] < losses[i]


class TestVerificationMode:
    def test_recursions_hold_on_clean_run(self):
        cfg = quad_cfg(verification_mode=True)
        rep = run(cfg).verification
        assert rep.rounds_checked == 50
        assert rep.worst() < 1e-8
        assert rep.mix_mean_drift < 1e-12

    def test_rejected_for_momentum_baseline(self):
        with pytest.raises(ConfigError):
            quad_cfg(algorithm="dfedavgm", verification_mode=True)


class TestRoundsToThreshold:
    def _records(self, values, metric="train_loss"):
        out = []
        for i, v in enumerate(values):
            out.append(RoundRecord(
                round=i,
                train_loss=v if metric == "train_loss" else 1.0,
                grad_norm_z_sq=v if metric == "grad_norm_z_sq" else 1.0,
                consensus=0.0,
                test_accuracy=v if metric == "test_accuracy" else None,
                psi_round=0.5,
                elapsed_ms=1.0,
            ))
        return out

    def test_monotone_crossing(self):
        recs = self._records([1.0 - 0.1 * i for i in range(10)])
        assert rounds_to_threshold(recs, "train_loss", 0.35) == 7

    def test_never_crossing(self):
        recs = self._records([1.0] * 10)
        assert rounds_to_threshold(recs, "train_loss", 0.1) is None

    def test_accuracy_crosses_upward(self):
        recs = self._records([0.1 * i for i in range(10)], metric="test_accuracy")
        assert rounds_to_threshold(recs, "test_accuracy", 0.65) == 7

    def test_unknown_metric(self):
        with pytest.raises(ConfigError):
            rounds_to_threshold([], "loss", 1.0)


class TestSweep:
    def test_empty_values(self):
        assert sweep(quad_cfg(), "beta", []) == []

    def test_beta_sweep_shape_and_shared_seeds(self):
        cfg = quad_cfg(hyper=HyperParams(eta=0.1, lambda_=0.1, beta=0.5, K=3, T=10, batch_size=None))
        cells = sweep(cfg, "beta", [0.0, 0.5], seeds=[3, 4])
        assert [(c.axis_value, c.seed) for c in cells] == [(0.0, 3), (0.0, 4), (0.5, 3), (0.5, 4)]
        assert all(len(c.records) == 10 and c.error is None for c in cells)

    def test_topology_axis_changes_psi(self):
        cfg = quad_cfg(hyper=HyperParams(T=3))
        cells = sweep(cfg, "topology", ["ring", "full"])
        psi_ring = cells[0].records[-1].psi_round
        psi_full = cells[1].records[-1].psi_round
        assert psi_full < 1e-10 < psi_ring

    def test_m_axis_resizes_topology(self):
        cfg = apply_axis(quad_cfg(), "m", 12)
        assert cfg.m == 12 and cfg.topology.m == 12

    def test_error_cells_recorded(self):
        cfg = quad_cfg(hyper=HyperParams(T=3))
        cells = sweep(cfg, "topology", ["ring", "not_a_kind"])
        assert cells[0].error is None
        assert cells[1].error is not None

    def test_unknown_axis(self):
        with pytest.raises(ConfigError):
            sweep(quad_cfg(), "gamma", [1.0])
