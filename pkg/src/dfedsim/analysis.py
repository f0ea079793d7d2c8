"""Theory-facing diagnostics.

* kappa_psi: the spectrum-gap constant bounding the geometric weighted sum
  sum_{s<t} psi^(t-s-1)/(s+1)^alpha <= kappa_psi / t^alpha, with a second
  independent evaluation path for cross-checking.
* rate_fit: log-log slope of the best-so-far squared gradient norm.
* stability_probe: coupled twin simulations that differ in exactly one
  training sample, measuring the parameter gap and the sup loss gap over a
  held-out probe set under the decayed step-size schedule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import engine as _engine
from .errors import ConfigError, DataError
from .numerics import RngStream
from .optimizers import AlgorithmKind
from .problems import estimate_smoothness


def kappa_psi(psi: float, alpha: float) -> float:
    """Spectrum-gap constant; grows like 1/(psi ln(1/psi)) near psi -> 1.

    Singular at psi in {0, 1}: callers handle the fully-connected and
    disconnected graphs specially.
    """
    _check_kappa_domain(psi, alpha)
    log_inv = math.log(1.0 / psi)
    t1 = (alpha / math.e) ** alpha / (psi * log_inv**alpha)
    t2 = 2.0**alpha / ((1.0 - alpha) * math.e * psi * log_inv)
    t3 = 2.0**alpha / (psi * log_inv)
    return t1 + t2 + t3


def kappa_psi_alt(psi: float, alpha: float) -> float:
    """Same constant evaluated fully in log space (cross-check path)."""
    _check_kappa_domain(psi, alpha)
    log_psi = math.log(psi)
    log_log_inv = math.log(-log_psi)
    t1 = math.exp(alpha * (math.log(alpha) - 1.0) - log_psi - alpha * log_log_inv)
    t2 = math.exp(
        alpha * math.log(2.0) - math.log1p(-alpha) - 1.0 - log_psi - log_log_inv
    )
    t3 = math.exp(alpha * math.log(2.0) - log_psi - log_log_inv)
    return t1 + t2 + t3


def _check_kappa_domain(psi, alpha):
    if not 0.0 < psi < 1.0:
        raise ConfigError(f"kappa_psi needs 0 < psi < 1, got {psi}")
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"kappa_psi needs 0 < alpha < 1, got {alpha}")


def geometric_weighted_sums(psi: float, alpha: float, t_max: int) -> np.ndarray:
    """S(t) = sum_{s=0}^{t-1} psi^(t-s-1)/(s+1)^alpha for t = 1..t_max.

    Brute-force accumulation via the exact term-by-term recurrence
    S(t+1) = psi S(t) + 1/(t+1)^alpha; used to check the kappa_psi bound.
    """
    out = np.empty(t_max)
    s = 0.0
    for t in range(1, t_max + 1):
        s = psi * s + 1.0 / t**alpha
        out[t - 1] = s
    return out


def consensus_distance(states) -> float:
    """(1/m) sum_i ||x_i - mean||^2 over client parameter vectors."""
    X = np.asarray(states, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[0] < 1:
        raise DataError("need at least one client state")
    center = X.mean(axis=0)
    return float(np.mean(np.sum((X - center) ** 2, axis=1)))


def rate_fit(records, suffix_fraction: float = 0.5) -> float:
    """Least-squares slope of log best-so-far ||grad f(z)||^2 vs log round.

    Fit runs over the trailing ``suffix_fraction`` of the records. Returns
    -inf when the best-so-far value reaches exactly zero (converged).
    """
    pts = [
        (rec.round + 1, rec.grad_norm_z_sq)
        for rec in records
        if rec.grad_norm_z_sq is not None
    ]
    if len(pts) < 20:
        raise ConfigError(f"rate_fit needs >= 20 records, got {len(pts)}")
    rounds = np.array([p[0] for p in pts], dtype=np.float64)
    best = np.minimum.accumulate(np.array([p[1] for p in pts]))
    start = int(len(pts) * (1.0 - suffix_fraction))
    rounds, best = rounds[start:], best[start:]
    if np.any(best == 0.0):
        return float("-inf")
    slope, _ = np.polyfit(np.log(rounds), np.log(best), 1)
    return float(slope)


@dataclass(frozen=True)
class StabilityProbeConfig:
    """Twin-run probe parameters.

    mu_tilde scales the decayed rate eta(t, k) = mu_tilde / (t K + k + 1);
    the probe requires mu_tilde * L / (1 - beta) <= 1 for the problem's
    (estimated) smoothness constant L. perturbed_client / perturbed_index
    name the one replaced sample (client-local index).
    """

    mu_tilde: float
    perturbed_client: int = 0
    perturbed_index: int = 0
    probe_size: int = 512
    rounds: int | None = None  # overrides hyper.T when set

    def __post_init__(self):
        if self.mu_tilde <= 0:
            raise ConfigError(f"mu_tilde must be > 0, got {self.mu_tilde}")
        if self.probe_size < 1:
            raise ConfigError("probe_size must be >= 1")


@dataclass
class StabilityReport:
    delta: np.ndarray  # per-round sum_i ||x_i - x~_i||
    sup_loss_gap: np.ndarray  # per-round max over probe set at the averages
    tau0: int | None  # measured first draw of the replaced sample (1-based)
    tau0_round: int | None
    tau0_theoretical: float | None
    coupled_before_tau0: bool  # states bitwise identical before tau0
    U: float  # measured sup loss over the probe set
    L_G: float  # max per-sample gradient norm over the probe set
    L: float
    mu: float
    rounds: int
    mean_psi: float


def _measure_tau0(problem, cfg, probe, k_steps, t_max):
    """Replay the minibatch streams to find the first draw of j*."""
    batch = cfg.hyper.batch_size
    if batch is None:
        return 1, 0  # full-batch gradients touch every sample immediately
    i_star = probe.perturbed_client
    for t in range(t_max):
        stream = RngStream(cfg.seed, "minibatch", i_star, t)
        idx = problem.sample_minibatch_block(i_star, batch, k_steps, stream)
        hits = np.argwhere(idx == probe.perturbed_index)
        if hits.size:
            k = int(hits[0][0])
            return t * k_steps + k + 1, t
    return None, None


def stability_probe(cfg, probe: StabilityProbeConfig) -> StabilityReport:
    """Run coupled twin simulations differing in one training sample.

    Both runs consume identical random streams, so before the replaced
    sample is first drawn the trajectories coincide bitwise. Reported per
    round (post-mix): the summed parameter gap and the max loss gap over a
    held-out probe set evaluated at the two client averages.
    """
    if cfg.problem.kind == "quadratic":
        raise ConfigError("stability probe needs a dataset-backed problem kind")
    if probe.rounds is not None:
        cfg = replace(cfg, hyper=replace(cfg.hyper, T=int(probe.rounds)))
    if cfg.hyper.T < 1:
        raise ConfigError("stability probe needs at least one round")
    kind = AlgorithmKind(cfg.algorithm)
    beta_eff = cfg.hyper.beta if kind is AlgorithmKind.DFEDCATA else 0.0

    problem_a, test_x, test_y = _engine.build_problem(cfg)
    if not 0 <= probe.perturbed_client < problem_a.m:
        raise ConfigError(f"perturbed_client out of range 0..{problem_a.m - 1}")
    if not 0 <= probe.perturbed_index < problem_a.client_size(probe.perturbed_client):
        raise ConfigError("perturbed_index out of range for that client")

    profile = estimate_smoothness(problem_a, RngStream(cfg.seed, "stability-smoothness"))
    mu = probe.mu_tilde / (1.0 - beta_eff)
    if profile.L > 0 and mu * profile.L > 1.0 + 1e-9:
        raise ConfigError(
            f"step constant too large: mu L = {mu * profile.L:.3f} > 1 "
            f"(mu = mu_tilde/(1-beta) = {mu:.4f}, estimated L = {profile.L:.3f})"
        )

    # twin dataset: replace one feature row, keep the label so the
    # label-driven partition stays identical in both runs
    i_star, j_star = probe.perturbed_client, probe.perturbed_index
    perturb_rng = RngStream(cfg.seed, "stability-perturb")
    base_row = problem_a._phi[i_star][j_star][:-1]  # drop bias column
    new_row = base_row + perturb_rng.standard_normal(base_row.shape[0])
    problem_b = problem_a.replace_sample(i_star, j_star, new_row)

    k_steps = 1 if kind is AlgorithmKind.DPSGD else cfg.hyper.K

    def schedule(t, k):
        steps = t * k + np.arange(k, dtype=np.float64)
        return probe.mu_tilde / (steps + 1.0)

    tau0, tau0_round = _measure_tau0(problem_a, cfg, probe, k_steps, cfg.hyper.T)

    gen_a = _engine.iter_rounds(cfg, problem=problem_a, test_data=(test_x, test_y), lr_schedule=schedule)
    gen_b = _engine.iter_rounds(cfg, problem=problem_b, test_data=(test_x, test_y), lr_schedule=schedule)

    probe_x, probe_y = _build_probe_set(cfg, probe, test_x, test_y)
    deltas, gaps, psis = [], [], []
    coupled = True
    sup_loss = 0.0
    snap_a = snap_b = None
    for snap_a, snap_b in zip(gen_a, gen_b):
        t = snap_a.t
        deltas.append(float(np.sum(np.linalg.norm(snap_a.states - snap_b.states, axis=1))))
        before_divergence = tau0_round is None or t < tau0_round
        if before_divergence and not np.array_equal(snap_a.states, snap_b.states):
            coupled = False
        # the per-sample loss is dataset-independent, so one evaluator serves both
        la = problem_a.per_sample_losses(snap_a.average, probe_x, probe_y)
        lb = problem_a.per_sample_losses(snap_b.average, probe_x, probe_y)
        gaps.append(float(np.max(np.abs(la - lb))))
        sup_loss = max(sup_loss, float(la.max()), float(lb.max()))
        if snap_a.record is not None:
            psis.append(snap_a.record.psi_round)

    l_g = max(
        float(problem_a.per_sample_grad_norms(snap_a.average, probe_x, probe_y).max()),
        float(problem_a.per_sample_grad_norms(snap_b.average, probe_x, probe_y).max()),
    )
    mean_psi = float(np.mean(psis)) if psis else 0.0
    tau0_theory = _tau0_theoretical(
        cfg, probe, profile.L, mu, sup_loss, l_g, mean_psi, k_steps, problem_a
    )
    return StabilityReport(
        delta=np.array(deltas),
        sup_loss_gap=np.array(gaps),
        tau0=tau0,
        tau0_round=tau0_round,
        tau0_theoretical=tau0_theory,
        coupled_before_tau0=coupled,
        U=sup_loss,
        L_G=l_g,
        L=profile.L,
        mu=mu,
        rounds=cfg.hyper.T,
        mean_psi=mean_psi,
    )


def _build_probe_set(cfg, probe, test_x, test_y):
    from .data import make_synthetic_blobs

    spec = cfg.problem
    if spec.csv_path is not None:
        # CSV-backed runs have no generator to draw from: probe on the test set
        if test_x is None:
            raise ConfigError("stability probe on CSV data needs csv_test_path")
        return test_x[: probe.probe_size], test_y[: probe.probe_size]
    ds = make_synthetic_blobs(
        spec.classes, spec.features, probe.probe_size, spec.separation,
        RngStream(cfg.seed, "stability-probe-set"),
    )
    return ds.features, ds.labels


def _tau0_theoretical(cfg, probe, L, mu, U, l_g, mean_psi, k_steps, problem):
    """Stationary choice of tau0 from the stability bound, for comparison only."""
    if U <= 0 or L <= 0 or not 0.0 < mean_psi < 1.0:
        return None
    alpha = 1.0 - mu * L
    if not 0.0 < alpha < 1.0:
        return None
    kap = kappa_psi(mean_psi, alpha)
    m = problem.m
    sigma_hat = max(l_g, 1e-12)  # gradient-deviation scale proxy
    base = (2.0 * sigma_hat * l_g / (U * L)) * (1.0 + 6.0 * np.sqrt(m) * kap) / m
    tk = cfg.hyper.T * k_steps
    return float(base ** (1.0 / (1.0 + mu * L)) * tk ** (mu * L / (1.0 + mu * L)))
