"""Communication graphs, Metropolis mixing weights, spectral diagnostics.

Every mixing matrix produced here is symmetric, doubly stochastic,
supported exactly on the graph edges plus the diagonal, and has all
non-consensus eigenvalues strictly inside the unit circle whenever the
graph is connected. Metropolis-Hastings weights guarantee all of that on
any undirected graph, which is why they back every topology kind.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigError, TopologyError
from .numerics import RngStream, second_eigenvalue_magnitude

STATIC_KINDS = ("ring", "grid", "exponential", "full", "erdos_renyi", "watts_strogatz")
DYNAMIC_KINDS = ("random_dynamic",)
KINDS = STATIC_KINDS + DYNAMIC_KINDS

#: incremented whenever a sampled per-round graph comes out disconnected
dynamic_disconnect_warnings = 0


def reset_warning_counters() -> None:
    global dynamic_disconnect_warnings
    dynamic_disconnect_warnings = 0


@dataclass(frozen=True)
class TopologySpec:
    """Which graph to build and with what parameters.

    kind: one of ring / grid / exponential / full / erdos_renyi /
        watts_strogatz / random_dynamic.
    p: edge probability (erdos_renyi).
    k: lattice neighbor count, even (watts_strogatz).
    p_rewire: probability of each extra shortcut pair (watts_strogatz).
    n_neighbors: per-round out-degree (random_dynamic).
    """

    kind: str
    m: int
    seed: int = 0
    p: float = 0.1
    k: int = 8
    p_rewire: float = 0.02
    n_neighbors: int = 10

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown topology kind {self.kind!r}; choose from {KINDS}")
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}")
        if self.kind == "erdos_renyi" and not 0.0 < self.p <= 1.0:
            raise ConfigError(f"erdos_renyi needs 0 < p <= 1, got {self.p}")
        if self.kind == "watts_strogatz":
            if self.k % 2 != 0 or not 0 < self.k < self.m:
                raise ConfigError(
                    f"watts_strogatz needs even 0 < k < m, got k={self.k}, m={self.m}"
                )
            if not 0.0 <= self.p_rewire <= 1.0:
                raise ConfigError(f"p_rewire must be in [0, 1], got {self.p_rewire}")
        if self.kind == "random_dynamic" and not 0 < self.n_neighbors < self.m:
            raise ConfigError(
                f"random_dynamic needs 0 < n_neighbors < m, got "
                f"n_neighbors={self.n_neighbors}, m={self.m}"
            )


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph on nodes 0..m-1 (no self loops stored)."""

    m: int
    edges: tuple
    connected: bool = field(default=False)

    @staticmethod
    def from_edges(m: int, edges) -> "Graph":
        uniq = sorted({(min(i, j), max(i, j)) for i, j in edges if i != j})
        return Graph(m=m, edges=tuple(uniq), connected=_is_connected(m, uniq))

    @cached_property
    def neighbors(self):
        adj = [[] for _ in range(self.m)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return [sorted(a) for a in adj]

    def degrees(self) -> np.ndarray:
        return np.array([len(a) for a in self.neighbors], dtype=np.int64)


def _is_connected(m: int, edges) -> bool:
    if m <= 1:
        return True
    adj = [[] for _ in range(m)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = [False] * m
    stack = [0]
    seen[0] = True
    count = 1
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                count += 1
                stack.append(v)
    return count == m


def exponential_distances(m: int):
    """Doubling offsets used by the exponential topology: powers of two < m."""
    dists = []
    d = 1
    while d < m:
        dists.append(d)
        d *= 2
    return dists


def _ring_edges(m):
    return [(i, (i + 1) % m) for i in range(m)] if m > 1 else []


def _grid_edges(m):
    # nearest square-ish lattice, row-major fill, non-wrapping 4-neighborhoods
    cols = int(np.ceil(np.sqrt(m)))
    edges = []
    for n in range(m):
        r, c = divmod(n, cols)
        if c + 1 < cols and n + 1 < m and (n + 1) // cols == r:
            edges.append((n, n + 1))
        if n + cols < m:
            edges.append((n, n + cols))
    return edges


def _exponential_edges(m):
    edges = []
    for i in range(m):
        for d in exponential_distances(m):
            edges.append((i, (i + d) % m))
    return edges


def _full_edges(m):
    return [(i, j) for i in range(m) for j in range(i + 1, m)]


def _erdos_renyi_edges(m, p, rng: RngStream):
    iu, ju = np.triu_indices(m, k=1)
    mask = rng.random(iu.shape[0]) < p
    return list(zip(iu[mask].tolist(), ju[mask].tolist()))


def _watts_strogatz_edges(m, k, p_extra, rng: RngStream):
    # ring lattice with k/2 neighbors per side, then extra shortcuts: each
    # non-lattice pair is added with probability p_extra
    edges = set()
    half = k // 2
    for i in range(m):
        for off in range(1, half + 1):
            j = (i + off) % m
            if i != j:
                edges.add((min(i, j), max(i, j)))
    iu, ju = np.triu_indices(m, k=1)
    mask = rng.random(iu.shape[0]) < p_extra
    for i, j in zip(iu[mask].tolist(), ju[mask].tolist()):
        edges.add((i, j))
    return list(edges)


def build_graph(spec: TopologySpec) -> Graph:
    """Deterministic graph for (spec, spec.seed).

    ring/grid/exponential/full are connected by construction. erdos_renyi is
    redrawn (up to 100 times) until connected. random_dynamic returns the
    round-0 sample; per-round graphs come from :func:`sample_round_topology`
    and are allowed to be disconnected.
    """
    m = spec.m
    if spec.kind == "ring":
        edges = _ring_edges(m)
    elif spec.kind == "grid":
        edges = _grid_edges(m)
    elif spec.kind == "exponential":
        edges = _exponential_edges(m)
    elif spec.kind == "full":
        edges = _full_edges(m)
    elif spec.kind == "watts_strogatz":
        rng = RngStream(spec.seed, "topology", spec.kind)
        edges = _watts_strogatz_edges(m, spec.k, spec.p_rewire, rng)
    elif spec.kind == "erdos_renyi":
        for attempt in range(100):
            rng = RngStream(spec.seed, "topology", spec.kind, attempt)
            edges = _erdos_renyi_edges(m, spec.p, rng)
            if _is_connected(m, edges):
                break
        else:
            raise TopologyError(
                f"erdos_renyi(m={m}, p={spec.p}) disconnected after 100 redraws"
            )
    elif spec.kind == "random_dynamic":
        return _dynamic_round_graph(spec, 0)
    g = Graph.from_edges(m, edges)
    if spec.kind in ("ring", "grid", "exponential", "full") and not g.connected:
        raise TopologyError(f"{spec.kind} graph unexpectedly disconnected (m={m})")
    return g


@dataclass(frozen=True)
class MixingMatrix:
    """Symmetric doubly stochastic gossip weights with spectral info."""

    W: np.ndarray
    psi: float
    spectral_gap: float

    @property
    def m(self) -> int:
        return self.W.shape[0]


def metropolis_weights(g: Graph, require_connected: bool = True) -> MixingMatrix:
    """Metropolis-Hastings weights: w_ij = 1/(1 + max(deg_i, deg_j)).

    Residual mass goes to the diagonal, which makes W symmetric and doubly
    stochastic on any undirected graph.
    """
    if require_connected and not g.connected:
        raise TopologyError("metropolis_weights requires a connected graph")
    m = g.m
    deg = g.degrees()
    W = np.zeros((m, m), dtype=np.float64)
    for i, j in g.edges:
        w = 1.0 / (1.0 + max(deg[i], deg[j]))
        W[i, j] = w
        W[j, i] = w
    np.fill_diagonal(W, 1.0 - W.sum(axis=1))
    psi = second_eigenvalue_magnitude(W)
    return MixingMatrix(W=W, psi=psi, spectral_gap=1.0 - psi)


def _dynamic_round_graph(spec: TopologySpec, round_index: int) -> Graph:
    rng = RngStream(spec.seed, "topology-round", round_index)
    m, n = spec.m, spec.n_neighbors
    edges = []
    for i in range(m):
        picks = rng.choice(m - 1, size=n, replace=False)
        peers = picks + (picks >= i)  # skip self
        edges.extend((i, int(j)) for j in peers)
    return Graph.from_edges(m, edges)


def sample_round_topology(spec: TopologySpec, round_index: int) -> MixingMatrix:
    """Per-round mixing matrix for the time-varying random topology.

    Each client selects n_neighbors distinct peers; the edge set is the
    symmetrized union of the selections. Deterministic given (seed, round).
    A disconnected draw is kept (W stays doubly stochastic) and counted in
    ``dynamic_disconnect_warnings``.
    """
    if spec.kind != "random_dynamic":
        raise ConfigError(f"sample_round_topology needs kind=random_dynamic, got {spec.kind}")
    g = _dynamic_round_graph(spec, round_index)
    if not g.connected:
        global dynamic_disconnect_warnings
        dynamic_disconnect_warnings += 1
    return metropolis_weights(g, require_connected=False)


@dataclass(frozen=True)
class ValidationReport:
    """Diagnostics for a candidate mixing matrix."""

    max_row_sum_dev: float
    max_col_sum_dev: float
    max_asymmetry: float
    psi: float
    reweight_sum_dev: float  # |sum_ij w_ij a_j - sum_i a_i| for a random sequence a

    stochastic_tol: float = 1e-12
    reweight_tol: float = 1e-10
    nullspace_tol: float = 1e-8

    @property
    def doubly_stochastic(self) -> bool:
        return (
            self.max_row_sum_dev < self.stochastic_tol
            and self.max_col_sum_dev < self.stochastic_tol
        )

    @property
    def symmetric(self) -> bool:
        return self.max_asymmetry < self.stochastic_tol

    @property
    def reweight_ok(self) -> bool:
        return self.reweight_sum_dev < self.reweight_tol

    @property
    def nullspace_ok(self) -> bool:
        # psi == 1 means a second consensus direction exists (disconnected)
        return self.psi <= 1.0 - self.nullspace_tol

    @property
    def passed(self) -> bool:
        return (
            self.doubly_stochastic
            and self.symmetric
            and self.reweight_ok
            and self.nullspace_ok
        )


def validate(W, seed: int = 0) -> ValidationReport:
    """Check double stochasticity, symmetry, and the spectral/null-space property.

    The reweighting check exercises the double-stochasticity identity
    sum_i sum_j w_ij a_j == sum_i a_i on a random sequence a.
    """
    if isinstance(W, MixingMatrix):
        W = W.W
    W = np.asarray(W, dtype=np.float64)
    m = W.shape[0]
    ones = np.ones(m)
    row_dev = float(np.max(np.abs(W @ ones - ones)))
    col_dev = float(np.max(np.abs(W.T @ ones - ones)))
    asym = float(np.max(np.abs(W - W.T)))
    psi = second_eigenvalue_magnitude(W, seed=seed)
    a = RngStream(seed, "validate-sequence").standard_normal(m)
    reweight_dev = float(abs(np.sum(W @ a) - np.sum(a)))
    return ValidationReport(
        max_row_sum_dev=row_dev,
        max_col_sum_dev=col_dev,
        max_asymmetry=asym,
        psi=psi,
        reweight_sum_dev=reweight_dev,
    )
