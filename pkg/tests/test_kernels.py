"""Backend parity: the compiled kernels must reproduce the numpy fallback.

Quadratic kernels perform identical elementwise IEEE operations in both
backends and must match bitwise; logistic kernels differ only in dot-product
summation order and must match to rounding error.
"""
import numpy as np
import pytest

from dfedsim import kernels
from dfedsim.data import make_synthetic_blobs, partition_iid
from dfedsim.errors import ConfigError
from dfedsim.numerics import RngStream
from dfedsim.problems import LogisticProblem, NoiseConfig, QuadraticProblem

pytestmark = pytest.mark.skipif(
    not kernels.COMPILED_AVAILABLE, reason="compiled core not built"
)


@pytest.fixture(autouse=True)
def restore_backend():
    yield
    kernels.set_backend("auto")


def quad_problem(noise=False):
    cfg = NoiseConfig(sigma=0.5, enabled=True) if noise else NoiseConfig()
    return QuadraticProblem.random(2, 16, RngStream(3, "kq"), noise=cfg)


def logistic_problem(noise=False):
    rng = RngStream(4, "kl")
    ds = make_synthetic_blobs(4, 6, 200, 2.5, rng.spawn("blobs"))
    cfg = NoiseConfig(sigma=0.5, enabled=True) if noise else NoiseConfig()
    return LogisticProblem(ds, partition_iid(ds, 2, rng.spawn("part")), noise=cfg)


def _run_both(fn, *args, **kwargs):
    kernels.set_backend("compiled")
    compiled = fn(*args, **kwargs)
    kernels.set_backend("python")
    python = fn(*args, **kwargs)
    return compiled, python


class TestProxKernel:
    @pytest.mark.parametrize("noisy", [False, True])
    def test_quadratic_bitwise(self, noisy):
        p = quad_problem(noise=noisy)
        x0 = RngStream(5, "x").standard_normal(p.d)
        etas = np.full(7, 0.05)
        noise = p.noise_block(RngStream(6, "n"), 7)
        c, py = _run_both(
            lambda: kernels.local_prox(p, 0, x0, x0 * 0.5, etas, 0.3, noise=noise)[0]
        )
        assert np.array_equal(c, py)

    def test_logistic_close(self):
        p = logistic_problem()
        x0 = RngStream(7, "x").standard_normal(p.d) * 0.2
        etas = np.full(6, 0.08)
        idx = p.sample_minibatch_block(0, 12, 6, RngStream(8, "mb"))
        c, py = _run_both(
            lambda: kernels.local_prox(p, 0, x0, x0, etas, 0.2, idx=idx)[0]
        )
        assert np.max(np.abs(c - py)) < 1e-13

    def test_collect_uses_reference_path(self):
        p = quad_problem()
        x0 = RngStream(9, "x").standard_normal(p.d)
        etas = np.full(4, 0.1)
        kernels.set_backend("compiled")
        x_fast, grads_fast = kernels.local_prox(p, 0, x0, x0, etas, 0.5)
        x_ref, grads = kernels.local_prox(p, 0, x0, x0, etas, 0.5, collect=True)
        assert grads_fast is None
        assert grads.shape == (4, p.d)
        assert np.array_equal(x_fast, x_ref)


class TestMomentumKernel:
    def test_quadratic_bitwise(self):
        p = quad_problem()
        x0 = RngStream(10, "x").standard_normal(p.d)
        v0 = np.zeros(p.d)
        etas = np.full(5, 0.05)
        c, py = _run_both(lambda: kernels.local_momentum(p, 0, x0, v0, etas, 0.9))
        assert np.array_equal(c[0], py[0])
        assert np.array_equal(c[1], py[1])

    def test_logistic_close(self):
        p = logistic_problem()
        x0 = np.zeros(p.d)
        v0 = np.zeros(p.d)
        etas = np.full(5, 0.05)
        idx = p.sample_minibatch_block(1, 8, 5, RngStream(11, "mb"))
        c, py = _run_both(lambda: kernels.local_momentum(p, 1, x0, v0, etas, 0.9, idx=idx))
        assert np.max(np.abs(c[0] - py[0])) < 1e-13


class TestSamKernel:
    def test_quadratic_close(self):
        # the ascent direction needs a norm, whose summation order differs
        p = quad_problem()
        x0 = RngStream(12, "x").standard_normal(p.d)
        etas = np.full(5, 0.05)
        c, py = _run_both(lambda: kernels.local_sam(p, 0, x0, etas, 0.1))
        assert np.max(np.abs(c - py)) < 1e-12

    def test_logistic_close(self):
        p = logistic_problem()
        x0 = RngStream(13, "x").standard_normal(p.d) * 0.1
        etas = np.full(5, 0.05)
        idx = p.sample_minibatch_block(0, 8, 5, RngStream(14, "mb"))
        c, py = _run_both(lambda: kernels.local_sam(p, 0, x0, etas, 0.1, idx=idx))
        assert np.max(np.abs(c - py)) < 1e-12


class TestBackendSelection:
    def test_active_backend_reports(self):
        kernels.set_backend("python")
        assert kernels.active_backend() == "python"
        kernels.set_backend("compiled")
        assert kernels.active_backend() == "compiled"

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigError):
            kernels.set_backend("gpu")
