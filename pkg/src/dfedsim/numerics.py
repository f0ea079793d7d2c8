"""Dense vector primitives, seeded random streams, and spectral estimation.

Model parameters, gradients, and mixing matrices are plain float64 numpy
arrays. Every source of randomness in the simulator flows through
:class:`RngStream`, a counter-based (Philox) generator keyed by an arbitrary
tag tuple, so that any (seed, tags, draw count) triple maps to the same
values on every platform and under any scheduling order.
"""
from __future__ import annotations

import hashlib
import os

import numpy as np

from .errors import DimensionError, NumericalError

DEBUG_CHECKS = bool(os.environ.get("DFL_DEBUG"))


def _stream_key(seed: int, tags) -> int:
    """Derive a 128-bit Philox key from (seed, tags).

    Encoding is canonical (type marker + payload) so the key never depends
    on PYTHONHASHSEED or platform int sizes.
    """
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(16, "little", signed=True))
    for tag in tags:
        if isinstance(tag, (int, np.integer)):
            h.update(b"i")
            h.update(int(tag).to_bytes(16, "little", signed=True))
        elif isinstance(tag, str):
            raw = tag.encode("utf-8")
            h.update(b"s")
            h.update(len(raw).to_bytes(4, "little"))
            h.update(raw)
        else:
            raise TypeError(f"stream tag must be int or str, got {type(tag)!r}")
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """Deterministic random stream addressed by (seed, *tags).

    Identical (seed, tags, draw count) always reproduces identical output.
    Streams with different tags are statistically independent, so one stream
    per (client, purpose, round) makes results independent of scheduling.
    """

    __slots__ = ("seed", "tags", "gen")

    def __init__(self, seed: int, *tags):
        self.seed = int(seed)
        self.tags = tags
        self.gen = np.random.Generator(np.random.Philox(key=_stream_key(seed, tags)))

    def spawn(self, *tags) -> "RngStream":
        """Child stream keyed by the parent's tags plus ``tags``."""
        return RngStream(self.seed, *self.tags, *tags)

    def advance(self, n_blocks: int) -> None:
        """Skip ahead as if ``n_blocks`` raw output blocks had been drawn."""
        self.gen.bit_generator.advance(n_blocks)

    def __getattr__(self, name):
        # delegate draw methods (integers, normal, dirichlet, ...) to numpy
        return getattr(self.gen, name)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, tags={self.tags})"


def as_vector(values) -> np.ndarray:
    """Coerce to a contiguous float64 1-D array."""
    x = np.ascontiguousarray(values, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"expected 1-D vector, got shape {x.shape}")
    return x


def axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Return ``a*x + y`` elementwise."""
    x = as_vector(x)
    y = as_vector(y)
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if not np.isfinite(a):
        raise DimensionError(f"scalar coefficient must be finite, got {a}")
    out = a * x + y
    if DEBUG_CHECKS and not np.all(np.isfinite(out)):
        raise NumericalError("axpy produced non-finite values")
    return out


def power_iteration(
    A: np.ndarray,
    seed: int = 0,
    tol: float = 1e-10,
    max_iters: int | None = None,
    block: int = 8,
):
    """Dominant-magnitude eigenpair of a symmetric matrix.

    Block power iteration on A^2 with Rayleigh-Ritz extraction: squaring
    reconciles +/- magnitude ties and the block keeps convergence fast
    through clustered spectra (rate |lambda_{b+1}/lambda_1|^2 per sweep).
    For a tied magnitude the returned vector spans the tied eigenspaces and
    the eigenvalue carries the sign of its Rayleigh quotient. Stalled sweeps
    restart from a fresh seeded block; exhausting the budget raises
    :class:`NumericalError` carrying the best magnitude estimate.
    """
    A = np.asarray(A, dtype=np.float64)
    m = A.shape[0]
    if A.shape != (m, m):
        raise DimensionError(f"expected square matrix, got shape {A.shape}")
    b = max(1, min(block, m))
    if max_iters is None:
        max_iters = max(200, (10 * m * m) // b)

    stream = RngStream(seed, "power-iteration")

    def fresh_block(tag):
        q, _ = np.linalg.qr(stream.spawn("start", tag).standard_normal((m, b)))
        return q

    V = fresh_block(0)
    best_res = np.inf
    best_mag = 0.0
    since_progress = 0
    restarts = 0
    for _ in range(max_iters):
        W2 = A @ (A @ V)
        H = V.T @ W2  # projected A^2, symmetric up to rounding
        theta, Y = np.linalg.eigh(0.5 * (H + H.T))
        top = float(theta[-1])
        v = V @ Y[:, -1]
        if top <= 0.0:
            return 0.0, v
        res = float(np.linalg.norm(A @ (A @ v) - top * v))
        if res <= tol * top:
            mag = float(np.sqrt(top))
            rho = float(v @ (A @ v))
            if abs(rho) >= mag * (1.0 - 1e-8):
                return rho, v
            return mag, v
        if res < best_res * (1.0 - 1e-6):
            best_res = res
            best_mag = float(np.sqrt(top))
            since_progress = 0
        else:
            since_progress += 1
        if since_progress > 50 and restarts < 3:
            restarts += 1
            since_progress = 0
            V = fresh_block(restarts)
            continue
        V, _ = np.linalg.qr(W2)

    raise NumericalError(
        f"power iteration did not converge in {max_iters} sweeps",
        best_estimate=best_mag,
    )


def second_eigenvalue_magnitude(W: np.ndarray, seed: int = 0) -> float:
    """Largest eigenvalue magnitude of W excluding the consensus eigenpair.

    Deflates the known (1, ones) eigenpair of a doubly stochastic symmetric
    W by subtracting P = (1/m) 11^T and returns the spectral radius of the
    remainder. Equals 0 for the uniform full mixing matrix and approaches 1
    as the graph becomes poorly connected (exactly 1 when disconnected).
    """
    W = np.asarray(W, dtype=np.float64)
    m = W.shape[0]
    if W.shape != (m, m):
        raise DimensionError(f"expected square matrix, got shape {W.shape}")
    B = W - 1.0 / m
    eig, _ = power_iteration(B, seed=seed)
    return abs(eig)
