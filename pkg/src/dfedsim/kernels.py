"""Hot local-update loops: compiled core with a pure-numpy fallback.

The per-client K-step update loop dominates runtime in every simulation, so
it is implemented twice: once in Cython (``dfedsim._core``) for quadratic and
logistic objectives, and once here in numpy. The backend is selected at
import time; set ``DFL_BACKEND=python`` or ``DFL_BACKEND=compiled`` to force
one (``auto``, the default, prefers the compiled core when importable).

The numpy fallback is the reference: it routes every gradient through
``Problem._grad_plain``, so there is exactly one Python implementation of
each objective. Gradient-collecting calls (used by the verification
recursions) always take the fallback path. For quadratic objectives both
backends perform identical elementwise IEEE operations and agree bitwise;
logistic kernels differ only in summation order (BLAS vs sequential).

``benchmarks/bench_kernels.py`` compares the two backends head to head.
"""
from __future__ import annotations

import os

import numpy as np

from .errors import ConfigError

try:
    from . import _core

    COMPILED_AVAILABLE = True
except ImportError:  # extension not built; numpy fallback covers everything
    _core = None
    COMPILED_AVAILABLE = False

_MODE = os.environ.get("DFL_BACKEND", "auto").lower()
if _MODE not in ("auto", "python", "compiled"):
    raise ConfigError(f"DFL_BACKEND must be auto|python|compiled, got {_MODE!r}")
if _MODE == "compiled" and not COMPILED_AVAILABLE:
    raise ConfigError("DFL_BACKEND=compiled but dfedsim._core is not built")

_USE_COMPILED = COMPILED_AVAILABLE and _MODE != "python"


def active_backend() -> str:
    return "compiled" if _USE_COMPILED else "python"


def set_backend(mode: str) -> str:
    """Switch backend at runtime (used by tests and the benchmark)."""
    global _USE_COMPILED
    if mode not in ("auto", "python", "compiled"):
        raise ConfigError(f"backend must be auto|python|compiled, got {mode!r}")
    if mode == "compiled" and not COMPILED_AVAILABLE:
        raise ConfigError("compiled backend requested but dfedsim._core is not built")
    _USE_COMPILED = COMPILED_AVAILABLE and mode != "python"
    return active_backend()


def _as_etas(etas, k_steps: int) -> np.ndarray:
    etas = np.ascontiguousarray(etas, dtype=np.float64)
    if etas.shape != (k_steps,):
        raise ConfigError(f"need one step size per local step, got shape {etas.shape}")
    return etas


def _grad_fn(problem, client, idx, noise):
    def grad(x, k):
        g = problem._grad_plain(client, x, None if idx is None else idx[k])
        if noise is not None:
            g = g + noise[k]
        return g

    return grad


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def _prox_python(x0, anchor, etas, lam, grad, k_steps, collect):
    x = x0.copy()
    grads = np.empty((k_steps, x.size)) if collect else None
    for k in range(k_steps):
        g = grad(x, k)
        if collect:
            grads[k] = g
        x = x - etas[k] * (g + lam * (x - anchor))
    return x, grads


def _momentum_python(x0, v0, etas, momentum, grad, k_steps):
    x = x0.copy()
    v = v0.copy()
    for k in range(k_steps):
        g = grad(x, k)
        v = momentum * v + g
        x = x - etas[k] * v
    return x, v


def _sam_python(x0, etas, rho, grad, k_steps):
    x = x0.copy()
    for k in range(k_steps):
        g1 = grad(x, k)
        nrm = float(np.linalg.norm(g1))
        if nrm > 0.0 and rho != 0.0:
            scale = rho / nrm
            g2 = grad(x + scale * g1, k)
        else:
            g2 = grad(x, k)
        x = x - etas[k] * g2
    return x


# ---------------------------------------------------------------------------
# dispatching entry points
# ---------------------------------------------------------------------------

def local_prox(problem, client, x0, anchor, etas, lam, idx=None, noise=None, collect=False):
    """K proximal SGD steps: x <- x - eta_k (g + lam (x - anchor)).

    Returns (x_K, grads) where grads is the (K, d) gradient stack when
    ``collect`` is set, else None. lam == 0 is plain local SGD.
    """
    k_steps = len(etas)
    etas = _as_etas(etas, k_steps)
    if _USE_COMPILED and not collect:
        payload = problem.kernel_payload(client)
        if payload is not None and payload[0] == "quadratic":
            return _core.prox_quadratic(x0, anchor, payload[1], payload[2], etas, lam, noise), None
        if payload is not None and payload[0] == "logistic" and idx is not None:
            _, phi, y, n_classes = payload
            return (
                _core.prox_logistic(x0, anchor, phi, y, n_classes, etas, lam, idx, noise),
                None,
            )
    return _prox_python(x0, anchor, etas, lam, _grad_fn(problem, client, idx, noise), k_steps, collect)


def local_momentum(problem, client, x0, v0, etas, momentum, idx=None, noise=None):
    """K heavy-ball steps: v <- momentum v + g; x <- x - eta_k v."""
    k_steps = len(etas)
    etas = _as_etas(etas, k_steps)
    if _USE_COMPILED:
        payload = problem.kernel_payload(client)
        if payload is not None and payload[0] == "quadratic":
            return _core.momentum_quadratic(x0, v0, payload[1], payload[2], etas, momentum, noise)
        if payload is not None and payload[0] == "logistic" and idx is not None:
            _, phi, y, n_classes = payload
            return _core.momentum_logistic(x0, v0, phi, y, n_classes, etas, momentum, idx, noise)
    return _momentum_python(x0, v0, etas, momentum, _grad_fn(problem, client, idx, noise), k_steps)


def local_sam(problem, client, x0, etas, rho, idx=None, noise=None):
    """K sharpness-aware steps: ascend rho g/||g||, descend with the gradient there.

    The step-k noise vector (when enabled) is shared by both gradient
    evaluations so rho == 0 reduces to plain SGD exactly.
    """
    k_steps = len(etas)
    etas = _as_etas(etas, k_steps)
    if _USE_COMPILED:
        payload = problem.kernel_payload(client)
        if payload is not None and payload[0] == "quadratic":
            return _core.sam_quadratic(x0, payload[1], payload[2], etas, rho, noise)
        if payload is not None and payload[0] == "logistic" and idx is not None:
            _, phi, y, n_classes = payload
            return _core.sam_logistic(x0, phi, y, n_classes, etas, rho, idx, noise)
    return _sam_python(x0, etas, rho, _grad_fn(problem, client, idx, noise), k_steps)
