"""Client-side update rules and the gossip aggregation step.

One communication round, per client, is: (optionally) extrapolate the round
anchor from the last two post-mix states, run K local steps against that
anchor, then average neighbor models with the mixing matrix.

The proximal local rule is

    x_{k+1} = x_k - eta (g_k + lam (x_k - anchor)),

whose K-step composition has the closed form

    x_K - anchor = -(gamma/lam) * sum_k (gamma_k/gamma) g_k,
    gamma_k = eta lam (1 - eta lam)^(K-1-k),  gamma = 1 - (1 - eta lam)^K.

:func:`gamma_weights` exposes those coefficients (with the analytic lam -> 0
limit gamma/lam -> K eta and gamma_k/gamma -> 1/K) for the verification
oracles and the virtual-sequence replay.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, DimensionError
from .kernels import local_momentum, local_prox, local_sam
from .numerics import RngStream


class AlgorithmKind(str, Enum):
    DFEDCATA = "dfedcata"
    DFEDAVG = "dfedavg"
    DFEDAVGM = "dfedavgm"
    DPSGD = "dpsgd"
    DFEDSAM = "dfedsam"


@dataclass(frozen=True)
class HyperParams:
    """Optimizer hyperparameters shared by all algorithms.

    eta: local learning rate (decayed by lr_decay each round).
    lambda_: proximal penalty tying local steps to the round anchor.
    beta: aggregation-phase extrapolation coefficient in [0, 1).
    K: local steps per round. T: communication rounds.
    rho: ascent radius for the sharpness-aware baseline.
    momentum: heavy-ball coefficient for the momentum baseline.
    batch_size: minibatch size; None means full-batch (exact) gradients.
    """

    eta: float = 0.1
    lambda_: float = 0.1
    beta: float = 0.99
    K: int = 5
    T: int = 100
    rho: float = 0.1
    momentum: float = 0.9
    batch_size: int | None = None
    lr_decay: float = 0.998

    def __post_init__(self):
        if not (np.isfinite(self.eta) and self.eta > 0):
            raise ConfigError(f"eta must be positive and finite, got {self.eta}")
        if not (np.isfinite(self.lambda_) and self.lambda_ >= 0):
            raise ConfigError(f"lambda_ must be >= 0, got {self.lambda_}")
        if not (0.0 <= self.beta < 1.0):
            raise ConfigError(f"beta must be in [0, 1), got {self.beta}")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.T < 0:
            raise ConfigError(f"T must be >= 0, got {self.T}")
        if not (0.0 < self.lr_decay <= 1.0):
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("rho", "momentum"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")

    def effective_eta(self, round_index: int) -> float:
        return self.eta * self.lr_decay**round_index


@dataclass
class ClientState:
    """Per-client mutable state across rounds.

    x_prev equals x at round 0 so the first extrapolation is the identity;
    the momentum buffer persists across rounds and is only used by the
    momentum baseline.
    """

    x: np.ndarray
    x_prev: np.ndarray
    anchor: np.ndarray = field(default=None)
    momentum_buf: np.ndarray = field(default=None)

    @staticmethod
    def initial(x0: np.ndarray) -> "ClientState":
        x0 = np.asarray(x0, dtype=np.float64)
        return ClientState(
            x=x0.copy(),
            x_prev=x0.copy(),
            anchor=x0.copy(),
            momentum_buf=np.zeros_like(x0),
        )


def extrapolate(state: ClientState, beta: float) -> np.ndarray:
    """Round anchor x + beta (x - x_prev); stored on the state."""
    anchor = state.x + beta * (state.x - state.x_prev)
    state.anchor = anchor
    return anchor


def gamma_weights(eta: float, lam: float, k_steps: int):
    """(gamma/lam, per-step weights gamma_k/gamma) of the proximal phase.

    Uses the analytic lam -> 0 limit so callers never divide 0 by 0.
    """
    if k_steps < 1:
        raise ConfigError(f"need at least one local step, got {k_steps}")
    if lam == 0.0:
        return k_steps * eta, np.full(k_steps, 1.0 / k_steps)
    r = 1.0 - eta * lam
    gamma = 1.0 - r**k_steps
    gamma_k = eta * lam * r ** np.arange(k_steps - 1, -1, -1, dtype=np.float64)
    return gamma / lam, gamma_k / gamma


@dataclass
class LocalResult:
    x_new: np.ndarray
    grads: np.ndarray | None = None  # (K, d), only when collected


def local_update(
    kind: AlgorithmKind,
    state: ClientState,
    problem,
    client: int,
    hyper: HyperParams,
    round_index: int,
    run_seed: int,
    collect_grads: bool = False,
    etas: np.ndarray | None = None,
) -> LocalResult:
    """Run one client's local phase for one round.

    Minibatch indices and injected gradient noise are drawn from streams
    keyed (run seed, purpose, client, round), so results do not depend on
    scheduling order. ``etas`` overrides the per-step learning rates (used
    by the decayed-schedule stability probe).
    """
    kind = AlgorithmKind(kind)
    k_steps = 1 if kind is AlgorithmKind.DPSGD else hyper.K
    if etas is None:
        etas = np.full(k_steps, hyper.effective_eta(round_index))
    else:
        etas = np.ascontiguousarray(etas, dtype=np.float64)
        if etas.shape != (k_steps,):
            raise ConfigError(f"etas must have shape ({k_steps},), got {etas.shape}")

    idx = None
    if hyper.batch_size is not None and problem.client_size(client) > 1:
        batch_stream = RngStream(run_seed, "minibatch", client, round_index)
        idx = problem.sample_minibatch_block(client, hyper.batch_size, k_steps, batch_stream)
    noise = None
    if problem.noise.enabled:
        noise_stream = RngStream(run_seed, "noise", client, round_index)
        noise = problem.noise_block(noise_stream, k_steps)

    if kind is AlgorithmKind.DFEDCATA:
        # the local phase starts at the extrapolated anchor and is tethered to it
        x_new, grads = local_prox(
            problem, client, state.anchor, state.anchor, etas, hyper.lambda_,
            idx=idx, noise=noise, collect=collect_grads,
        )
        return LocalResult(x_new=x_new, grads=grads)
    if kind in (AlgorithmKind.DFEDAVG, AlgorithmKind.DPSGD):
        x_new, grads = local_prox(
            problem, client, state.x, state.x, etas, 0.0,
            idx=idx, noise=noise, collect=collect_grads,
        )
        return LocalResult(x_new=x_new, grads=grads)
    if kind is AlgorithmKind.DFEDAVGM:
        x_new, v_new = local_momentum(
            problem, client, state.x, state.momentum_buf, etas, hyper.momentum,
            idx=idx, noise=noise,
        )
        state.momentum_buf = v_new
        return LocalResult(x_new=x_new)
    if kind is AlgorithmKind.DFEDSAM:
        x_new = local_sam(
            problem, client, state.x, etas, hyper.rho, idx=idx, noise=noise
        )
        return LocalResult(x_new=x_new)
    raise ConfigError(f"unhandled algorithm {kind}")


def mix(local_models: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Gossip step: row i of the result is sum_j w_ij local_models[j].

    Double stochasticity makes this mean-preserving.
    """
    local_models = np.asarray(local_models, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if W.shape[0] != W.shape[1] or W.shape[0] != local_models.shape[0]:
        raise DimensionError(
            f"mixing matrix {W.shape} incompatible with states {local_models.shape}"
        )
    return W @ local_models


def algorithm_uses_anchor(kind: AlgorithmKind) -> bool:
    return AlgorithmKind(kind) is AlgorithmKind.DFEDCATA
