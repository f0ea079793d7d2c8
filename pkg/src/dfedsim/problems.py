"""Finite-sum objectives with exact and minibatch gradient oracles.

Three kinds are provided:

* quadratic -- per-client 0.5 (x-b_i)' diag(a_i) (x-b_i); gradients are exact
  regardless of minibatch indices, so stochasticity is controlled entirely by
  the injectable isotropic gradient noise (NoiseConfig).
* logistic -- multinomial logistic regression (softmax cross-entropy) over a
  partitioned labeled dataset, intercept included.
* mlp -- one hidden tanh layer with hand-derived backprop, cross-entropy.

Minibatch indices are client-local (0..S_i-1) and drawn uniformly with
replacement. ``grad`` adds N(0, sigma^2/d I) noise when the noise config is
enabled and a stream is supplied, so E||noise||^2 = sigma^2.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset, Partition
from .errors import ConfigError, DataError, DimensionError
from .numerics import RngStream


@dataclass(frozen=True)
class NoiseConfig:
    sigma: float = 0.0
    enabled: bool = False

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ConfigError(f"noise sigma must be finite and >= 0, got {self.sigma}")


@dataclass(frozen=True)
class SmoothnessProfile:
    """Constants of the smoothness / variance / heterogeneity assumptions.

    L is exact for quadratics and a sampled estimate otherwise; G and B come
    from a least-squares fit of mean_i ||grad f_i(x)||^2 against
    ||grad f(x)||^2 and are always estimates.
    """

    L: float
    sigma: float
    G: float
    B: float
    estimated: bool


class Problem:
    """Common oracle surface shared by all objective kinds."""

    kind: str = "abstract"

    def __init__(self, m: int, d: int, noise: NoiseConfig):
        self.m = m
        self.d = d
        self.noise = noise

    # -- per-client structure -------------------------------------------------
    def client_size(self, client: int) -> int:
        raise NotImplementedError

    def _check_client(self, client: int):
        if not 0 <= client < self.m:
            raise DataError(f"client {client} out of range 0..{self.m - 1}")

    def _check_x(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.d,):
            raise DimensionError(f"expected parameter shape ({self.d},), got {x.shape}")
        return x

    def _check_indices(self, client: int, indices):
        if indices is None:
            return None
        idx = np.asarray(indices, dtype=np.int64)
        s = self.client_size(client)
        if idx.size == 0 or idx.min() < 0 or idx.max() >= s:
            raise DataError(
                f"sample indices out of range for client {client} (size {s})"
            )
        return idx

    # -- oracles ---------------------------------------------------------------
    def loss(self, client: int, x, indices=None) -> float:
        raise NotImplementedError

    def _grad_plain(self, client: int, x, indices=None) -> np.ndarray:
        raise NotImplementedError

    def grad(self, client: int, x, indices=None, rng: RngStream | None = None):
        """Gradient of ``loss``; adds isotropic noise when enabled and rng given."""
        g = self._grad_plain(client, x, indices)
        if self.noise.enabled and rng is not None:
            g = g + self.noise_vector(rng)
        return g

    def noise_vector(self, rng: RngStream) -> np.ndarray:
        return rng.standard_normal(self.d) * (self.noise.sigma / np.sqrt(self.d))

    def noise_block(self, rng: RngStream, k: int) -> np.ndarray | None:
        """k pre-drawn noise vectors for one local phase, or None if disabled."""
        if not self.noise.enabled:
            return None
        return rng.standard_normal((k, self.d)) * (self.noise.sigma / np.sqrt(self.d))

    def full_loss(self, x) -> float:
        """f(x) = (1/m) sum_i f_i(x) over every client's full data."""
        return float(np.mean([self.loss(i, x) for i in range(self.m)]))

    def full_grad(self, x) -> np.ndarray:
        g = np.zeros(self.d)
        for i in range(self.m):
            g += self._grad_plain(i, x)
        return g / self.m

    def sample_minibatch(self, client: int, batch_size: int, rng: RngStream):
        """Uniform-with-replacement local indices; advances ``rng``."""
        self._check_client(client)
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
        s = self.client_size(client)
        if s == 0:
            raise DataError(f"client {client} has no samples")
        return rng.integers(0, s, size=batch_size)

    def sample_minibatch_block(self, client: int, batch_size: int, k: int, rng):
        """k minibatches drawn in one call (row r == step r's batch)."""
        self._check_client(client)
        s = self.client_size(client)
        if s == 0:
            raise DataError(f"client {client} has no samples")
        return rng.integers(0, s, size=(k, batch_size))

    def kernel_payload(self, client: int):
        """Arrays the compiled kernels need, or None when unsupported."""
        return None

    # -- classification extras --------------------------------------------------
    def accuracy(self, x, features, labels) -> float:
        raise NotImplementedError(f"{self.kind} has no classification accuracy")


def sample_minibatch(problem: Problem, client: int, batch_size: int, rng: RngStream):
    return problem.sample_minibatch(client, batch_size, rng)


class QuadraticProblem(Problem):
    """f_i(x) = 0.5 (x - b_i)' diag(a_i) (x - b_i)."""

    kind = "quadratic"

    def __init__(self, a: np.ndarray, b: np.ndarray, noise: NoiseConfig = NoiseConfig()):
        a = np.ascontiguousarray(a, dtype=np.float64)
        b = np.ascontiguousarray(b, dtype=np.float64)
        if a.ndim != 2 or a.shape != b.shape:
            raise ConfigError(f"curvatures {a.shape} and centers {b.shape} must match (m, d)")
        if np.any(a <= 0):
            raise ConfigError("curvatures must be strictly positive")
        super().__init__(m=a.shape[0], d=a.shape[1], noise=noise)
        self.a = a
        self.b = b

    @staticmethod
    def random(
        m: int,
        d: int,
        rng: RngStream,
        curvature_range=(0.5, 2.0),
        center_spread: float = 1.0,
        noise: NoiseConfig = NoiseConfig(),
    ) -> "QuadraticProblem":
        lo, hi = curvature_range
        a = rng.spawn("curv").uniform(lo, hi, size=(m, d))
        b = rng.spawn("centers").standard_normal((m, d)) * center_spread
        return QuadraticProblem(a=a, b=b, noise=noise)

    def client_size(self, client: int) -> int:
        return 1

    def loss(self, client, x, indices=None) -> float:
        self._check_client(client)
        x = self._check_x(x)
        self._check_indices(client, indices)
        r = x - self.b[client]
        return 0.5 * float(r @ (self.a[client] * r))

    def _grad_plain(self, client, x, indices=None) -> np.ndarray:
        self._check_client(client)
        x = self._check_x(x)
        self._check_indices(client, indices)
        return self.a[client] * (x - self.b[client])

    def minimizer(self) -> np.ndarray:
        """Global minimizer of f: (sum_i A_i)^-1 sum_i A_i b_i (elementwise)."""
        return (self.a * self.b).sum(axis=0) / self.a.sum(axis=0)

    def smoothness_constant(self) -> float:
        return float(self.a.max())

    def kernel_payload(self, client: int):
        return ("quadratic", self.a[client], self.b[client])


def _with_bias(features: np.ndarray) -> np.ndarray:
    return np.hstack([features, np.ones((features.shape[0], 1))])


def _softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(-np.mean(np.log(probs[np.arange(labels.size), labels] + 1e-300)))


class _ClassificationProblem(Problem):
    """Shared plumbing for dataset-backed problems."""

    def __init__(self, dataset, partition, n_classes, d, noise):
        super().__init__(m=partition.m, d=d, noise=noise)
        self.dataset = dataset
        self.partition = partition
        self.n_classes = n_classes
        self.d_in = dataset.d_in
        self._phi = []
        self._y = []
        for rows in partition.assignments:
            self._phi.append(_with_bias(dataset.features[rows]))
            self._y.append(dataset.labels[rows])

    def client_size(self, client: int) -> int:
        return self._y[client].shape[0]

    def _batch(self, client, indices):
        idx = self._check_indices(client, indices)
        if idx is None:
            return self._phi[client], self._y[client]
        return self._phi[client][idx], self._y[client][idx]

    def _scores(self, phi: np.ndarray, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def per_sample_losses(self, x, features, labels) -> np.ndarray:
        """Cross-entropy of each (feature, label) pair separately."""
        phi = _with_bias(np.asarray(features, dtype=np.float64))
        y = np.asarray(labels, dtype=np.int64)
        scores = self._scores(phi, x)
        z = scores - scores.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return -logp[np.arange(y.size), y]

    def accuracy(self, x, features, labels) -> float:
        phi = _with_bias(np.asarray(features, dtype=np.float64))
        scores = self._scores(phi, x)
        return float(np.mean(scores.argmax(axis=1) == np.asarray(labels)))

    def replace_sample(self, client: int, local_index: int, feature_row):
        """New problem whose (client, local_index) sample has other features.

        The label is kept so partitions derived from labels stay identical;
        this is what the stability twin-run needs.
        """
        rows = self.partition.assignments[client]
        if not 0 <= local_index < rows.shape[0]:
            raise DataError(f"local index {local_index} out of range")
        feats = self.dataset.features.copy()
        feats[rows[local_index]] = np.asarray(feature_row, dtype=np.float64)
        ds = LabeledDataset(features=feats, labels=self.dataset.labels, name=self.dataset.name)
        return type(self)(ds, self.partition, noise=self.noise, **self._extra_init())

    def _extra_init(self) -> dict:
        return {}


class LogisticProblem(_ClassificationProblem):
    """Softmax cross-entropy, parameters theta of shape (C, d_in + 1)."""

    kind = "logistic"

    def __init__(
        self,
        dataset: LabeledDataset,
        partition: Partition,
        noise: NoiseConfig = NoiseConfig(),
        n_classes: int | None = None,
    ):
        C = n_classes if n_classes is not None else dataset.n_classes
        if C < 2:
            raise ConfigError(f"need at least 2 classes, got {C}")
        super().__init__(dataset, partition, C, d=C * (dataset.d_in + 1), noise=noise)

    def _theta(self, x):
        return self._check_x(x).reshape(self.n_classes, self.d_in + 1)

    def loss(self, client, x, indices=None) -> float:
        self._check_client(client)
        phi, y = self._batch(client, indices)
        probs = _softmax(phi @ self._theta(x).T)
        return _cross_entropy(probs, y)

    def _grad_plain(self, client, x, indices=None) -> np.ndarray:
        self._check_client(client)
        phi, y = self._batch(client, indices)
        probs = _softmax(phi @ self._theta(x).T)
        probs[np.arange(y.size), y] -= 1.0
        return ((probs.T @ phi) / y.size).ravel()

    def _scores(self, phi, x):
        return phi @ self._theta(x).T

    def per_sample_grad_norms(self, x, features, labels) -> np.ndarray:
        """Norm of each sample's own loss gradient (the gradient is an outer
        product, so its norm factorizes)."""
        phi = _with_bias(np.asarray(features, dtype=np.float64))
        y = np.asarray(labels, dtype=np.int64)
        probs = _softmax(self._scores(phi, x))
        probs[np.arange(y.size), y] -= 1.0
        return np.linalg.norm(probs, axis=1) * np.linalg.norm(phi, axis=1)

    def kernel_payload(self, client: int):
        return ("logistic", self._phi[client], self._y[client], self.n_classes)

    def _extra_init(self):
        return {"n_classes": self.n_classes}


class MlpProblem(_ClassificationProblem):
    """One hidden tanh layer; parameters are (W1, W2) flattened."""

    kind = "mlp"

    def __init__(
        self,
        dataset: LabeledDataset,
        partition: Partition,
        noise: NoiseConfig = NoiseConfig(),
        n_classes: int | None = None,
        hidden: int = 8,
    ):
        C = n_classes if n_classes is not None else dataset.n_classes
        if C < 2:
            raise ConfigError(f"need at least 2 classes, got {C}")
        if hidden < 1:
            raise ConfigError(f"hidden width must be >= 1, got {hidden}")
        self.hidden = hidden
        d = hidden * (dataset.d_in + 1) + C * (hidden + 1)
        super().__init__(dataset, partition, C, d=d, noise=noise)

    def _extra_init(self):
        return {"n_classes": self.n_classes, "hidden": self.hidden}

    def _unpack(self, x):
        x = self._check_x(x)
        h, p = self.hidden, self.d_in + 1
        w1 = x[: h * p].reshape(h, p)
        w2 = x[h * p :].reshape(self.n_classes, h + 1)
        return w1, w2

    def _forward(self, phi, x):
        w1, w2 = self._unpack(x)
        hidden = np.tanh(phi @ w1.T)
        probs = _softmax(_with_bias(hidden) @ w2.T)
        return w1, w2, hidden, probs

    def loss(self, client, x, indices=None) -> float:
        self._check_client(client)
        phi, y = self._batch(client, indices)
        _, _, _, probs = self._forward(phi, x)
        return _cross_entropy(probs, y)

    def _grad_plain(self, client, x, indices=None) -> np.ndarray:
        self._check_client(client)
        phi, y = self._batch(client, indices)
        w1, w2, hidden, probs = self._forward(phi, x)
        delta = probs
        delta[np.arange(y.size), y] -= 1.0
        delta /= y.size
        g2 = delta.T @ _with_bias(hidden)
        dh = (delta @ w2[:, : self.hidden]) * (1.0 - hidden**2)
        g1 = dh.T @ phi
        return np.concatenate([g1.ravel(), g2.ravel()])

    def _scores(self, phi, x):
        w1, w2 = self._unpack(x)
        hidden = np.tanh(phi @ w1.T)
        return _with_bias(hidden) @ w2.T

    def per_sample_grad_norms(self, x, features, labels) -> np.ndarray:
        phi = _with_bias(np.asarray(features, dtype=np.float64))
        y = np.asarray(labels, dtype=np.int64)
        w1, w2 = self._unpack(x)
        hidden = np.tanh(phi @ w1.T)
        delta = _softmax(_with_bias(hidden) @ w2.T)
        delta[np.arange(y.size), y] -= 1.0
        # both layer gradients are per-sample outer products
        n2 = np.linalg.norm(delta, axis=1) * np.linalg.norm(_with_bias(hidden), axis=1)
        dz1 = (delta @ w2[:, : self.hidden]) * (1.0 - hidden**2)
        n1 = np.linalg.norm(dz1, axis=1) * np.linalg.norm(phi, axis=1)
        return np.sqrt(n1**2 + n2**2)


def estimate_smoothness(
    problem: Problem,
    rng: RngStream,
    n_points: int = 24,
    radius: float = 2.0,
) -> SmoothnessProfile:
    """Measure (L, G, B) for the assumption set.

    Quadratic: L is the exact largest curvature. Other kinds: max gradient
    difference ratio over sampled point pairs. G, B are fit by least squares
    from mean_i ||grad f_i||^2 = G^2 + B^2 ||grad f||^2 at sampled points and
    are reported as estimates only.
    """
    if problem.kind == "quadratic":
        L = problem.smoothness_constant()
        estimated = False
    else:
        L = 0.0
        sub = rng.spawn("smoothness")
        for _ in range(n_points):
            x = sub.standard_normal(problem.d) * radius
            y = x + sub.standard_normal(problem.d) * (radius * 0.1)
            diff = np.linalg.norm(problem.full_grad(x) - problem.full_grad(y))
            dist = np.linalg.norm(x - y)
            if dist > 0:
                L = max(L, diff / dist)
            for i in range(problem.m):
                gi = np.linalg.norm(
                    problem._grad_plain(i, x) - problem._grad_plain(i, y)
                )
                if dist > 0:
                    L = max(L, gi / dist)
        estimated = True

    sub = rng.spawn("heterogeneity")
    mean_sq, full_sq = [], []
    for _ in range(n_points):
        x = sub.standard_normal(problem.d) * radius
        per_client = np.mean(
            [np.sum(problem._grad_plain(i, x) ** 2) for i in range(problem.m)]
        )
        mean_sq.append(per_client)
        full_sq.append(np.sum(problem.full_grad(x) ** 2))
    A = np.vstack([np.ones(len(full_sq)), np.array(full_sq)]).T
    coef, *_ = np.linalg.lstsq(A, np.array(mean_sq), rcond=None)
    g_sq = max(float(coef[0]), 0.0)
    b_sq = max(float(coef[1]), 0.0)
    return SmoothnessProfile(
        L=float(L),
        sigma=problem.noise.sigma if problem.noise.enabled else 0.0,
        G=float(np.sqrt(g_sq)),
        B=float(np.sqrt(b_sq)),
        estimated=True if problem.kind != "quadratic" else estimated,
    )
