"""Round orchestration: topology sampling, local phases, mixing, metrics.

Each communication round runs (extrapolate ->) K local steps per client ->
gossip mix. Everything is a pure function of the run config and master seed:
per-client randomness comes from streams keyed (seed, purpose, client,
round), so trajectories are identical no matter how many worker threads
execute the local phase (``DFL_THREADS``).

Recorded metrics are evaluated on the post-mix state of the round: the
training objective and test accuracy at the client average, the squared
gradient norm at the extrapolated evaluation point
z = avg + beta/(1-beta) (avg - avg_prev), and the consensus distance.

``verification_mode`` replays the closed-form / mean-sequence /
auxiliary-sequence / virtual-sequence recursions every round from the
collected per-step gradients and raises if any deviates beyond 1e-8.
"""
from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import topology as topo
from .data import load_csv, make_synthetic_blobs, partition_dirichlet, partition_iid, partition_pathological
from .errors import ConfigError, DivergenceError, NumericalError
from .numerics import RngStream
from .optimizers import (
    AlgorithmKind,
    ClientState,
    HyperParams,
    LocalResult,
    extrapolate,
    gamma_weights,
    local_update,
    mix,
)
from .problems import LogisticProblem, MlpProblem, NoiseConfig, QuadraticProblem

VERIFICATION_TOL = 1e-8
SWEEP_AXES = ("beta", "K", "lambda_", "eta", "m", "topology")


@dataclass(frozen=True)
class ProblemSpec:
    """What objective to build (see problems module for the kinds)."""

    kind: str = "quadratic"
    noise_sigma: float = 0.0
    # quadratic
    d: int = 20
    curvature_min: float = 0.5
    curvature_max: float = 2.0
    center_spread: float = 1.0
    homogeneous: bool = False
    # classification (synthetic blobs or CSV)
    classes: int = 4
    features: int = 8
    train_n: int = 1024
    test_n: int = 256
    separation: float = 3.0
    hidden: int = 8
    csv_path: str | None = None
    csv_test_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("quadratic", "logistic", "mlp"):
            raise ConfigError(f"unknown problem kind {self.kind!r}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class PartitionSpec:
    kind: str = "iid"
    alpha: float = 0.3
    classes_per_client: int = 2

    def __post_init__(self):
        if self.kind not in ("iid", "dirichlet", "pathological"):
            raise ConfigError(f"unknown partition kind {self.kind!r}")


@dataclass(frozen=True)
class RunConfig:
    algorithm: str = "dfedcata"
    m: int = 100
    seed: int = 1
    hyper: HyperParams = field(default_factory=HyperParams)
    topology: topo.TopologySpec = None
    problem: ProblemSpec = field(default_factory=ProblemSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    eval_every: int = 1
    verification_mode: bool = False
    init: str = "zeros"
    init_scale: float = 0.1

    def __post_init__(self):
        AlgorithmKind(self.algorithm)  # raises on unknown name
        if self.topology is None:
            object.__setattr__(
                self, "topology", topo.TopologySpec(kind="random_dynamic", m=self.m, seed=self.seed)
            )
        if self.seed == 0:
            raise ConfigError("seed must be non-zero")
        if self.m != self.topology.m:
            raise ConfigError(
                f"client count m={self.m} does not match topology.m={self.topology.m}"
            )
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.init not in ("zeros", "gaussian"):
            raise ConfigError(f"init must be zeros|gaussian, got {self.init!r}")
        if self.verification_mode and AlgorithmKind(self.algorithm) not in (
            AlgorithmKind.DFEDCATA,
            AlgorithmKind.DFEDAVG,
        ):
            raise ConfigError(
                "verification_mode replays the proximal-phase recursions and "
                "supports dfedcata/dfedavg only"
            )


@dataclass(frozen=True)
class RoundRecord:
    round: int
    train_loss: float
    grad_norm_z_sq: float
    consensus: float
    test_accuracy: float | None
    psi_round: float
    elapsed_ms: float


@dataclass
class VerificationReport:
    """Max per-round deviations of the replayed recursions."""

    local_closed_form: float = 0.0  # K-step proximal phase closed form
    local_bound_violation: float = 0.0  # weighted gradient-energy bound
    mean_sequence: float = 0.0  # averaged-state recursion
    auxiliary_sequence: float = 0.0  # extrapolated-average recursion
    virtual_sequence: float = 0.0  # per-client surrogate mean trajectory
    mix_mean_drift: float = 0.0  # mean preservation of the gossip step
    rounds_checked: int = 0

    def worst(self) -> float:
        return max(
            self.local_closed_form,
            self.local_bound_violation,
            self.mean_sequence,
            self.auxiliary_sequence,
            self.virtual_sequence,
        )


@dataclass
class RunResult:
    records: list
    final_states: np.ndarray  # (m, d) post-run client models
    average: np.ndarray  # (d,) final client average
    verification: VerificationReport | None
    problem: object
    test_features: np.ndarray | None
    test_labels: np.ndarray | None


def build_problem(cfg: RunConfig):
    """Materialize (problem, test_features, test_labels) from the config."""
    spec = cfg.problem
    noise = NoiseConfig(sigma=spec.noise_sigma, enabled=spec.noise_sigma > 0)
    if spec.kind == "quadratic":
        if spec.homogeneous:
            a = np.ones((cfg.m, spec.d))
            b = np.zeros((cfg.m, spec.d))
            problem = QuadraticProblem(a=a, b=b, noise=noise)
        else:
            problem = QuadraticProblem.random(
                cfg.m,
                spec.d,
                RngStream(cfg.seed, "problem"),
                curvature_range=(spec.curvature_min, spec.curvature_max),
                center_spread=spec.center_spread,
                noise=noise,
            )
        return problem, None, None

    if spec.csv_path is not None:
        train = load_csv(spec.csv_path)
        test = load_csv(spec.csv_test_path) if spec.csv_test_path else None
    else:
        train = make_synthetic_blobs(
            spec.classes, spec.features, spec.train_n, spec.separation,
            RngStream(cfg.seed, "data"),
        )
        test = make_synthetic_blobs(
            spec.classes, spec.features, spec.test_n, spec.separation,
            RngStream(cfg.seed, "data-test"),
        )

    part_rng = RngStream(cfg.seed, "partition")
    pspec = cfg.partition
    if pspec.kind == "iid":
        part = partition_iid(train, cfg.m, part_rng)
    elif pspec.kind == "dirichlet":
        part = partition_dirichlet(train, cfg.m, pspec.alpha, part_rng)
    else:
        part = partition_pathological(train, cfg.m, pspec.classes_per_client, part_rng)

    if spec.kind == "logistic":
        problem = LogisticProblem(train, part, noise=noise, n_classes=spec.classes)
    else:
        problem = MlpProblem(
            train, part, noise=noise, n_classes=spec.classes, hidden=spec.hidden
        )
    if test is not None:
        return problem, test.features, test.labels
    return problem, None, None


def initial_state(cfg: RunConfig, problem) -> np.ndarray:
    """Shared start vector x^0 (all clients identical)."""
    if cfg.init == "zeros":
        return np.zeros(problem.d)
    return RngStream(cfg.seed, "init").standard_normal(problem.d) * cfg.init_scale


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("DFL_THREADS", "1")))
    except ValueError:
        return 1


def _static_mixing(cfg: RunConfig):
    if cfg.topology.kind in topo.DYNAMIC_KINDS:
        return None
    return topo.metropolis_weights(topo.build_graph(cfg.topology))


@dataclass
class RoundSnapshot:
    """Post-mix view of one round (yielded by :func:`iter_rounds`)."""

    t: int
    states: np.ndarray  # (m, d) post-mix
    average: np.ndarray
    record: RoundRecord | None


def iter_rounds(cfg: RunConfig, problem=None, test_data=None, lr_schedule=None, out=None):
    """Generator driving the simulation one round at a time.

    lr_schedule(t, k_steps) -> per-step learning-rate array overrides the
    configured constant-per-round rate (used by the stability probe).
    Raises DivergenceError (with .partial_records attached) on non-finite
    iterates. When ``out`` (a dict) is given, the materialized problem, test
    data, live records list, and verification report are published into it.
    """
    if problem is None:
        problem, test_x, test_y = build_problem(cfg)
    else:
        test_x, test_y = test_data if test_data is not None else (None, None)
    kind = AlgorithmKind(cfg.algorithm)
    hyper = cfg.hyper
    beta_eff = hyper.beta if kind is AlgorithmKind.DFEDCATA else 0.0
    m = cfg.m

    x0 = initial_state(cfg, problem)
    states = [ClientState.initial(x0) for _ in range(m)]
    static_w = _static_mixing(cfg)
    verify = cfg.verification_mode
    report = VerificationReport() if verify else None
    virtual = np.tile(x0, (m, 1)) if verify else None
    records = []
    if out is not None:
        out.update(
            problem=problem, test_features=test_x, test_labels=test_y,
            records=records, report=report,
        )
    workers = _worker_count()
    k_steps = 1 if kind is AlgorithmKind.DPSGD else hyper.K

    for t in range(hyper.T):
        tic = time.perf_counter()
        w_round = static_w if static_w is not None else topo.sample_round_topology(cfg.topology, t)
        etas = None if lr_schedule is None else np.asarray(lr_schedule(t, k_steps), dtype=np.float64)

        if kind is AlgorithmKind.DFEDCATA:
            for s in states:
                extrapolate(s, hyper.beta)

        def one_client(i):
            return local_update(
                kind, states[i], problem, i, hyper, t, cfg.seed,
                collect_grads=verify, etas=etas,
            )

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(one_client, range(m)))
        else:
            results = [one_client(i) for i in range(m)]

        local_models = np.vstack([r.x_new for r in results])
        if not np.all(np.isfinite(local_models)):
            bad = int(np.flatnonzero(~np.isfinite(local_models).all(axis=1))[0])
            err = DivergenceError(t, bad)
            err.partial_records = records
            raise err

        x_bar = np.mean([s.x for s in states], axis=0)
        mixed = mix(local_models, w_round.W)
        x_bar_new = mixed.mean(axis=0)

        if verify:
            x_bar_prev = np.mean([s.x_prev for s in states], axis=0)
            _check_recursions(
                report, results, states, local_models, mixed, virtual,
                w_round.W, hyper, kind, t,
                etas if etas is not None else np.full(k_steps, hyper.effective_eta(t)),
                x_bar_prev, x_bar, x_bar_new, beta_eff,
            )

        for i, s in enumerate(states):
            s.x_prev = s.x
            s.x = mixed[i]

        record = None
        if t % cfg.eval_every == 0 or t == hyper.T - 1:
            z = x_bar_new + (beta_eff / (1.0 - beta_eff)) * (x_bar_new - x_bar)
            with np.errstate(over="ignore"):
                grad_z = problem.full_grad(z)
                record = RoundRecord(
                    round=t,
                    train_loss=problem.full_loss(x_bar_new),
                    grad_norm_z_sq=float(grad_z @ grad_z),
                    consensus=float(np.mean(np.sum((mixed - x_bar_new) ** 2, axis=1))),
                    test_accuracy=(
                        problem.accuracy(x_bar_new, test_x, test_y)
                        if test_x is not None
                        else None
                    ),
                    psi_round=w_round.psi,
                    elapsed_ms=(time.perf_counter() - tic) * 1e3,
                )
            finite = [record.train_loss, record.grad_norm_z_sq, record.consensus]
            if not np.all(np.isfinite(finite)):
                bad = int(np.argmax(np.sum(np.abs(mixed), axis=1)))
                err = DivergenceError(t, bad)
                err.partial_records = records
                raise err
            records.append(record)

        yield RoundSnapshot(t=t, states=mixed.copy(), average=x_bar_new.copy(), record=record)


def _check_recursions(
    report, results, states, local_models, mixed, virtual, W, hyper, kind, t,
    etas, x_bar_prev, x_bar, x_bar_new, beta_eff,
):
    """Replay the proximal-phase identities from the collected gradients."""
    lam = hyper.lambda_ if kind is AlgorithmKind.DFEDCATA else 0.0
    if not np.allclose(etas, etas[0]):
        raise ConfigError("verification_mode requires a constant within-round rate")
    g_over_lam, weights = gamma_weights(float(etas[0]), lam, len(etas))

    grads = np.stack([r.grads for r in results])  # (m, K, d)
    g_weighted = np.tensordot(weights, grads, axes=(0, 1))  # (m, d)
    anchors = np.vstack([s.anchor if kind is AlgorithmKind.DFEDCATA else s.x for s in states])

    dev2 = float(np.max(np.abs(local_models - anchors + g_over_lam * g_weighted)))
    report.local_closed_form = max(report.local_closed_form, dev2)

    lhs = np.sum((local_models - anchors) ** 2, axis=1)
    energy = np.einsum("k,mk->m", weights, np.sum(grads**2, axis=2))
    rhs = g_over_lam**2 * energy
    viol = float(np.max(np.maximum(lhs - rhs, 0.0)))
    report.local_bound_violation = max(report.local_bound_violation, viol)

    g_bar = g_weighted.mean(axis=0)
    pred_mean = x_bar + beta_eff * (x_bar - x_bar_prev) - g_over_lam * g_bar
    dev4 = float(np.max(np.abs(x_bar_new - pred_mean)))
    report.mean_sequence = max(report.mean_sequence, dev4)

    z_prev = x_bar + (beta_eff / (1.0 - beta_eff)) * (x_bar - x_bar_prev)
    z_new = x_bar_new + (beta_eff / (1.0 - beta_eff)) * (x_bar_new - x_bar)
    dev6 = float(
        np.max(np.abs(z_new - z_prev + (g_over_lam / (1.0 - beta_eff)) * g_bar))
    )
    report.auxiliary_sequence = max(report.auxiliary_sequence, dev6)

    # virtual per-client surrogate: same gradients, surrogate step, then mix
    virtual -= (g_over_lam / (1.0 - beta_eff)) * g_weighted
    virtual[:] = W @ virtual
    dev9 = float(np.max(np.abs(virtual.mean(axis=0) - z_new)))
    report.virtual_sequence = max(report.virtual_sequence, dev9)

    drift = float(np.max(np.abs(mixed.mean(axis=0) - local_models.mean(axis=0))))
    report.mix_mean_drift = max(report.mix_mean_drift, drift)
    report.rounds_checked += 1

    if report.worst() > VERIFICATION_TOL:
        raise NumericalError(
            f"verification recursion deviated by {report.worst():.3e} "
            f"(tolerance {VERIFICATION_TOL:.0e}) at round {t}",
            best_estimate=report,
        )


def run(cfg: RunConfig, problem=None, test_data=None, lr_schedule=None) -> RunResult:
    """Execute all T rounds; fully deterministic given (cfg, cfg.seed)."""
    out = {}
    gen = iter_rounds(
        cfg, problem=problem, test_data=test_data, lr_schedule=lr_schedule, out=out
    )
    last_snapshot = None
    for snap in gen:
        last_snapshot = snap
    if last_snapshot is None:  # T == 0: initial state returned untouched
        x0 = initial_state(cfg, out["problem"])
        final_states = np.tile(x0, (cfg.m, 1))
        average = x0.copy()
    else:
        final_states = last_snapshot.states
        average = last_snapshot.average
    return RunResult(
        records=out["records"],
        final_states=final_states,
        average=average,
        verification=out["report"],
        problem=out["problem"],
        test_features=out["test_features"],
        test_labels=out["test_labels"],
    )


def rounds_to_threshold(records, metric: str, threshold: float):
    """First recorded round where the metric crosses the threshold.

    Crossing is >= for test_accuracy and <= for train_loss /
    grad_norm_z_sq. Returns None if never crossed.
    """
    if metric not in ("test_accuracy", "train_loss", "grad_norm_z_sq"):
        raise ConfigError(f"unsupported threshold metric {metric!r}")
    for rec in records:
        value = getattr(rec, metric)
        if value is None:
            continue
        if metric == "test_accuracy":
            if value >= threshold:
                return rec.round
        elif value <= threshold:
            return rec.round
    return None


@dataclass
class SweepCell:
    axis_value: object
    seed: int
    records: list
    error: str | None = None


def apply_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    if axis in ("beta", "K", "lambda_", "eta"):
        caster = int if axis == "K" else float
        return replace(cfg, hyper=replace(cfg.hyper, **{axis: caster(value)}))
    if axis == "m":
        m = int(value)
        return replace(cfg, m=m, topology=replace(cfg.topology, m=m))
    return replace(cfg, topology=replace(cfg.topology, kind=str(value)))


def sweep(base: RunConfig, axis: str, values, seeds=None) -> list:
    """One run per (value, seed) with otherwise shared configuration."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    if seeds is None:
        seeds = [base.seed]
    cells = []
    for value in values:
        for seed in seeds:
            try:
                cfg = replace(apply_axis(base, axis, value), seed=int(seed))
                result = run(cfg)
                cells.append(SweepCell(axis_value=value, seed=int(seed), records=result.records))
            except (DivergenceError, NumericalError, ConfigError) as exc:
                cells.append(
                    SweepCell(axis_value=value, seed=int(seed), records=[], error=str(exc))
                )
    return cells
