"""Single-integrator consensus with emulated event-triggered communication."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .hybrid import GraphTopology, SystemModel

# Undirected edge list of the 8-agent benchmark graph (1-based labels).
BENCHMARK_EDGES = ((1, 2), (1, 8), (2, 3), (2, 7), (3, 4), (3, 6),
                   (4, 5), (5, 6), (5, 8), (7, 8))


def benchmark_topology() -> GraphTopology:
    return GraphTopology.undirected(8, BENCHMARK_EDGES, one_based=True)


@dataclass(frozen=True)
class ConsensusParams:
    delta: float = 0.05
    a: float = 0.1
    alpha: float = 0.05
    eps_eta: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.a <= 0 or self.alpha <= 0 or self.eps_eta <= 0:
            raise ValueError("a, alpha and eps_eta must be positive")

    def c(self, n_i: int) -> float:
        return (1.0 - self.delta) * (1.0 - self.a * n_i)

    def d_lyap(self, n_i: int) -> float:
        return self.delta * (1.0 - self.a * n_i)

    def mu(self, n_i: int) -> float:
        return self.c(n_i) / n_i

    def gamma(self, n_i: int) -> float:
        return math.sqrt(n_i / self.a + self.alpha)


def consensus_control(i: int, yh: np.ndarray, in_mask: np.ndarray) -> float:
    """u_i = -sum over in-neighbours of (own broadcast - neighbour estimate)."""
    yh = np.asarray(yh, dtype=float).reshape(len(in_mask))
    return float(-np.sum(in_mask * (yh[i] - yh)))


class ConsensusModel(SystemModel):
    nx = 1
    ny = 1
    supply_advisory = True  # disagreement variable of the supply rate is an assumption

    def __init__(self, topology: GraphTopology, params: ConsensusParams):
        if not topology.is_undirected:
            raise ValueError("consensus model needs an undirected graph")
        if not topology.is_connected:
            raise ValueError("consensus model needs a connected graph")
        n_in = topology.out_mask.sum(axis=0)
        if np.any(params.a * n_in >= 1.0):
            raise ValueError("need a * N_i < 1 for every agent")
        self.topology = topology
        self.params = params
        self._in = topology.out_mask.T.astype(float)  # _in[i, m] = 1 if m -> i
        self._deg = self._in.sum(axis=1)
        self._lap = topology.laplacian()

    def n_i(self, i: int) -> int:
        return self.topology.n_out(i)

    def control(self, Yh: np.ndarray) -> np.ndarray:
        Y = Yh[..., 0]
        return -(self._deg * np.diag(Y) - np.sum(self._in * Y, axis=1))

    def output(self, x):
        return np.asarray(x, dtype=float)

    def vector_field(self, x, Yh, v=None):
        return self.control(Yh)[:, None] * np.ones_like(x)

    def flow_x(self, x, Yh, dt, v=None):
        # u is constant while estimates are held: exact
        return x + dt * self.control(Yh)[:, None]

    def output_rate(self, x, Yh, v=None):
        return self.control(Yh)[:, None]

    def H(self, i, x, Yh, v=None):
        return abs(consensus_control(i, Yh[i, :, 0], self._in[i]))

    def H_lower(self, i, yh):
        return abs(consensus_control(i, yh[:, 0], self._in[i]))

    def H_lower_all(self, Yh):
        return np.abs(self.control(Yh))

    def varsigma_all(self, Yh):
        return np.zeros(len(Yh))

    def output_batch(self, X):
        return np.asarray(X, dtype=float)

    def flow_x_batch(self, x, Yh, dts):
        u = self.control(Yh)[:, None]
        return x[None] + np.asarray(dts, dtype=float)[:, None, None] * u[None]

    def H_batch(self, i, X, Yh):
        return np.full(len(X), self.H(i, X[0], Yh))

    def storage_batch(self, X):
        X = np.asarray(X, dtype=float).reshape(len(X), -1)
        return np.einsum("ki,ij,kj->k", X, self._lap, X)

    def supply_rate_batch(self, X, E):
        X = np.asarray(X, dtype=float).reshape(len(X), -1)
        Z = X @ self._lap.T
        n_i = self.topology.out_mask.sum(axis=1)
        d = np.array([self.params.d_lyap(k) for k in n_i])
        mu = np.array([self.params.mu(k) for k in n_i])
        e2 = np.sum(E * E, axis=(2, 3))
        return -(Z * Z) @ d - e2 @ mu

    def mu(self, i):
        return self.params.mu(self.n_i(i))

    def c(self, i):
        return self.params.c(self.n_i(i))

    def gamma(self, i):
        return self.params.gamma(self.n_i(i))

    def storage(self, x):
        x = np.asarray(x, dtype=float).ravel()
        return float(x @ self._lap @ x)

    def disagreement(self, x):
        return self._lap @ np.asarray(x, dtype=float).ravel()

    def supply_rate(self, x, e, v=None):
        z = self.disagreement(x)
        n = self.topology.n_agents
        tot = 0.0
        for i in range(n):
            ni = self.n_i(i)
            tot -= self.params.d_lyap(ni) * z[i] ** 2
            tot -= self.params.mu(ni) * float(np.sum(e[i] ** 2))
        return tot

    def attractor_distance(self, x):
        x = np.asarray(x, dtype=float).ravel()
        return float(np.linalg.norm(x - x.mean()))


def consensus_model(topology: GraphTopology, params: ConsensusParams) -> ConsensusModel:
    return ConsensusModel(topology, params)


def spread(x) -> float:
    x = np.asarray(x, dtype=float).ravel()
    return float(x.max() - x.min())
