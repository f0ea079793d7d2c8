"""Built-in oracle suite behind ``dfedsim verify``.

Every check replays an exact identity of the update algebra on a fixed
fixture and reports its worst numerical deviation:

* reweighting: double stochasticity implies sum_ij w_ij a_j == sum_i a_i.
* closed form: the K-step proximal phase equals
  anchor - (gamma/lam) sum_k (gamma_k/gamma) g_k (including the lam = 0
  limit gamma/lam -> K eta).
* energy bound: ||x_K - anchor||^2 <= (gamma/lam)^2 sum_k (gamma_k/gamma)
  ||g_k||^2 for deterministic gradients.
* mean / auxiliary / virtual sequence recursions on a deterministic run.
* spectrum-gap constant: the two kappa implementations agree and the
  geometric weighted sum stays below kappa/t^alpha.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .analysis import geometric_weighted_sums, kappa_psi, kappa_psi_alt
from .data import make_synthetic_blobs, partition_iid
from .engine import ProblemSpec, RunConfig, run
from .kernels import local_prox
from .numerics import RngStream
from .optimizers import HyperParams, gamma_weights
from .problems import LogisticProblem, QuadraticProblem
from .topology import TopologySpec, build_graph, metropolis_weights, sample_round_topology


@dataclass(frozen=True)
class CheckResult:
    name: str
    deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.deviation <= self.tolerance


_MIXING_FIXTURES = (
    TopologySpec("ring", 4),
    TopologySpec("ring", 16),
    TopologySpec("grid", 9),
    TopologySpec("exponential", 8),
    TopologySpec("full", 8),
    TopologySpec("erdos_renyi", 24, seed=3, p=0.2),
    TopologySpec("watts_strogatz", 16, seed=3, k=4),
    TopologySpec("random_dynamic", 20, seed=3, n_neighbors=4),
)

_PHASE_GRID = tuple(
    (eta, lam, k)
    for eta in (0.05, 0.2)
    for lam in (0.0, 0.3, 1.5)
    for k in (1, 4, 9)
)


def _fixture_problems():
    rng = RngStream(7, "verify")
    quad = QuadraticProblem.random(3, 12, rng.spawn("quad"))
    ds = make_synthetic_blobs(3, 5, 60, 3.0, rng.spawn("blobs"))
    logit = LogisticProblem(ds, partition_iid(ds, 3, rng.spawn("part")))
    return quad, logit


def check_reweighting(inject_defect: bool = False) -> CheckResult:
    worst = 0.0
    for spec in _MIXING_FIXTURES:
        if spec.kind == "random_dynamic":
            W = sample_round_topology(spec, 0).W
        else:
            W = metropolis_weights(build_graph(spec)).W
        if inject_defect:
            W = W.copy()
            W[0, 1] += 1e-6
        for draw in range(3):
            a = RngStream(11, "verify-seq", spec.kind, spec.m, draw).standard_normal(spec.m)
            worst = max(worst, abs(float(np.sum(W @ a) - np.sum(a))))
    return CheckResult("double-stochastic reweighting", worst, 1e-10)


def check_closed_form() -> tuple:
    quad, logit = _fixture_problems()
    worst_form = 0.0
    worst_energy = 0.0
    for problem in (quad, logit):
        for eta, lam, k in _PHASE_GRID:
            if eta * lam >= 1.0:
                continue
            anchor = RngStream(13, "verify-anchor", problem.kind, int(k)).standard_normal(problem.d) * 0.5
            etas = np.full(k, eta)
            x_k, grads = local_prox(
                problem, 0, anchor, anchor, etas, lam, collect=True
            )
            g_over_lam, weights = gamma_weights(eta, lam, k)
            predicted = anchor - g_over_lam * (weights @ grads)
            worst_form = max(worst_form, float(np.max(np.abs(x_k - predicted))))
            lhs = float(np.sum((x_k - anchor) ** 2))
            rhs = g_over_lam**2 * float(weights @ np.sum(grads**2, axis=1))
            worst_energy = max(worst_energy, max(0.0, lhs - rhs))
    return (
        CheckResult("local-update closed form", worst_form, 1e-10),
        CheckResult("local-update energy bound", worst_energy, 1e-10),
    )


def check_recursions() -> tuple:
    cfg = RunConfig(
        algorithm="dfedcata",
        m=8,
        seed=5,
        hyper=HyperParams(eta=0.05, lambda_=0.4, beta=0.7, K=5, T=50, batch_size=None),
        topology=TopologySpec("ring", 8),
        problem=ProblemSpec(kind="quadratic", d=10),
        verification_mode=True,
        init="gaussian",
    )
    report = run(cfg).verification
    return (
        CheckResult("mean-sequence recursion", report.mean_sequence, 1e-8),
        CheckResult("auxiliary-sequence recursion", report.auxiliary_sequence, 1e-8),
        CheckResult("virtual-sequence equivalence", report.virtual_sequence, 1e-8),
        CheckResult("mixing mean preservation", report.mix_mean_drift, 1e-12),
    )


def check_spectrum_constant(t_max: int = 2000) -> tuple:
    psis = (0.1, 0.3, 0.5, 0.7, 0.9)
    alphas = (0.1, 0.3, 0.5, 0.7)
    worst_rel = 0.0
    worst_violation = -np.inf
    for psi in psis:
        for alpha in alphas:
            k1 = kappa_psi(psi, alpha)
            k2 = kappa_psi_alt(psi, alpha)
            worst_rel = max(worst_rel, abs(k1 - k2) / k1)
            sums = geometric_weighted_sums(psi, alpha, t_max)
            t = np.arange(1, t_max + 1, dtype=np.float64)
            worst_violation = max(worst_violation, float(np.max(sums - k1 / t**alpha)))
    return (
        CheckResult("spectrum-constant dual evaluation", worst_rel, 1e-12),
        CheckResult("spectrum-constant bound", max(worst_violation, 0.0), 0.0),
    )


def run_verification_suite(inject_mixing_defect: bool = False, t_max: int = 2000):
    checks = [check_reweighting(inject_defect=inject_mixing_defect)]
    checks.extend(check_closed_form())
    checks.extend(check_recursions())
    checks.extend(check_spectrum_constant(t_max=t_max))
    return checks
