"""Hybrid state of the networked multi-agent system and its flow/jump maps.

Indexing conventions used throughout the package (0-based agents):

* ``e[i, m]`` is the network-induced error of agent m's estimate of ``y_i``,
  i.e. ``yhat_{m <- i} - y_i``; it is identically zero unless m is an
  out-neighbour of i.
* ``ell[i, m] == 1``: i's latest packet is still in flight to m.
* ``b[i, m] == 1``: the packet reached m but m has not sampled since.
* ``Yh[i, m]`` (see :func:`estimate_matrix`) is agent i's estimate of ``y_m``.
  The diagonal holds ``r_i``, the agent's own last broadcast.
"""
from __future__ import annotations

import abc
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .design import TriggerFunctions

SLACK = 1e-12


class ProtocolError(RuntimeError):
    """A jump was requested in a state where the hybrid model forbids it."""


class InvariantError(RuntimeError):
    pass


@dataclass(frozen=True)
class GraphTopology:
    n_agents: int
    edges: frozenset  # ordered pairs (i, m): i transmits to m

    def __post_init__(self):
        for i, m in self.edges:
            if i == m:
                raise ValueError(f"self-loop ({i}, {m}) not allowed")
            if not (0 <= i < self.n_agents and 0 <= m < self.n_agents):
                raise ValueError(f"edge ({i}, {m}) out of range")
        out = np.zeros((self.n_agents, self.n_agents), dtype=bool)
        for i, m in self.edges:
            out[i, m] = True
        object.__setattr__(self, "out_mask", out)

    @classmethod
    def undirected(cls, n_agents: int, pairs: Iterable[Sequence[int]],
                   one_based: bool = False) -> "GraphTopology":
        off = 1 if one_based else 0
        edges = set()
        for a, c in pairs:
            edges.add((a - off, c - off))
            edges.add((c - off, a - off))
        return cls(n_agents, frozenset(edges))

    def out_neighbors(self, i: int) -> list[int]:
        return [int(m) for m in np.nonzero(self.out_mask[i])[0]]

    def in_neighbors(self, i: int) -> list[int]:
        return [int(m) for m in np.nonzero(self.out_mask[:, i])[0]]

    def n_out(self, i: int) -> int:
        return int(self.out_mask[i].sum())

    def delta(self, i: int, m: int) -> int:
        return int(self.out_mask[i, m])

    @property
    def is_undirected(self) -> bool:
        return bool(np.array_equal(self.out_mask, self.out_mask.T))

    @property
    def is_connected(self) -> bool:
        adj = self.out_mask | self.out_mask.T
        seen = {0}
        stack = [0]
        while stack:
            k = stack.pop()
            for j in np.nonzero(adj[k])[0]:
                if int(j) not in seen:
                    seen.add(int(j))
                    stack.append(int(j))
        return len(seen) == self.n_agents

    def laplacian(self) -> np.ndarray:
        a = self.out_mask.T.astype(float)  # a[i, m] = 1 if m sends to i
        return np.diag(a.sum(axis=1)) - a


class SystemModel(abc.ABC):
    """Agent dynamics, local controllers and the dissipativity certificate data.

    States are stored as ``(N, nx)`` arrays and outputs as ``(N, ny)``; all
    agents share the same dimensions. ``Yh`` arguments are the ``(N, N, ny)``
    estimate matrix; ``yh`` arguments are a single agent's row of it.
    """

    topology: GraphTopology
    nx: int = 1
    ny: int = 1
    max_step: float = 1e-3

    @abc.abstractmethod
    def output(self, x: np.ndarray) -> np.ndarray:
        ...

    @abc.abstractmethod
    def vector_field(self, x: np.ndarray, Yh: np.ndarray, v=None) -> np.ndarray:
        ...

    def flow_x(self, x: np.ndarray, Yh: np.ndarray, dt: float, v=None) -> np.ndarray:
        """Integrate the plant with estimates held; RK4 with substeps <= max_step."""
        if dt <= 0:
            return x.copy()
        n = max(1, int(np.ceil(dt / self.max_step)))
        h = dt / n
        for _ in range(n):
            k1 = self.vector_field(x, Yh, v)
            k2 = self.vector_field(x + 0.5 * h * k1, Yh, v)
            k3 = self.vector_field(x + 0.5 * h * k2, Yh, v)
            k4 = self.vector_field(x + h * k3, Yh, v)
            x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        return x

    # growth bound data for the output and trigger design
    @abc.abstractmethod
    def H(self, i: int, x: np.ndarray, Yh: np.ndarray, v=None) -> float:
        ...

    @abc.abstractmethod
    def H_lower(self, i: int, yh: np.ndarray) -> float:
        ...

    def lip(self, i: int) -> float:
        return 0.0

    def varsigma(self, i: int, yh: np.ndarray) -> float:
        return 0.0

    # storage and supply data
    @abc.abstractmethod
    def mu(self, i: int) -> float:
        ...

    @abc.abstractmethod
    def gamma(self, i: int) -> float:
        ...

    @abc.abstractmethod
    def storage(self, x: np.ndarray) -> float:
        ...

    @abc.abstractmethod
    def supply_rate(self, x: np.ndarray, e: np.ndarray, v=None) -> float:
        ...

    @abc.abstractmethod
    def attractor_distance(self, x: np.ndarray) -> float:
        ...

    def H_lower_all(self, Yh: np.ndarray) -> np.ndarray:
        return np.array([self.H_lower(i, Yh[i]) for i in range(len(Yh))])

    def varsigma_all(self, Yh: np.ndarray) -> np.ndarray:
        return np.array([self.varsigma(i, Yh[i]) for i in range(len(Yh))])

    # Batched variants over a leading time axis; override for speed.
    def output_batch(self, X: np.ndarray) -> np.ndarray:
        return np.stack([self.output(x) for x in X])

    def flow_x_batch(self, x: np.ndarray, Yh: np.ndarray, dts: np.ndarray) -> np.ndarray:
        return np.stack([self.flow_x(x, Yh, float(dt)) for dt in dts])

    def H_batch(self, i: int, X: np.ndarray, Yh: np.ndarray) -> np.ndarray:
        return np.array([self.H(i, x, Yh) for x in X])

    def storage_batch(self, X: np.ndarray) -> np.ndarray:
        return np.array([self.storage(x) for x in X])

    def supply_rate_batch(self, X: np.ndarray, E: np.ndarray) -> np.ndarray:
        return np.array([self.supply_rate(x, e) for x, e in zip(X, E)])

    def output_rate(self, x: np.ndarray, Yh: np.ndarray, v=None) -> np.ndarray:
        """dy/dt by central difference of h along f; override when known."""
        f = self.vector_field(x, Yh, v)
        h = 1e-7
        return (self.output(x + h * f) - self.output(x - h * f)) / (2 * h)


@dataclass(frozen=True)
class HybridState:
    x: np.ndarray      # (N, nx)
    e: np.ndarray      # (N, N, ny)
    tau: np.ndarray    # (N,)
    sigma: np.ndarray  # (N,)
    r: np.ndarray      # (N, ny)
    ell: np.ndarray    # (N, N) int8
    b: np.ndarray      # (N, N) int8
    eta: np.ndarray    # (N,)

    @classmethod
    def initial(cls, model: SystemModel, x0, eta0=0.0) -> "HybridState":
        """State right after the synchronising broadcast at t = 0."""
        n = model.topology.n_agents
        x = np.array(x0, dtype=float).reshape(n, model.nx)
        y = model.output(x)
        return cls(
            x=x,
            e=np.zeros((n, n, model.ny)),
            tau=np.zeros(n),
            sigma=np.zeros(n),
            r=y.copy(),
            ell=np.zeros((n, n), dtype=np.int8),
            b=np.zeros((n, n), dtype=np.int8),
            eta=np.full(n, float(eta0)),
        )

    def copy(self, **changes) -> "HybridState":
        kw = {k: getattr(self, k).copy() for k in self.__dataclass_fields__}
        kw.update(changes)
        return HybridState(**kw)

    def validate(self, topology: GraphTopology, tfs: Sequence[TriggerFunctions] | None = None):
        out = topology.out_mask
        if np.any(self.e[~out] != 0):
            raise InvariantError("nonzero error on a non-edge")
        if np.any(self.eta < 0):
            raise InvariantError(f"negative eta {self.eta.min():.3e}")
        s = self.ell.astype(int) + self.b.astype(int)
        if np.any((s < 0) | (s > 1)):
            raise InvariantError("ell + b outside {0, 1}")
        if np.any(s[~out] != 0):
            raise InvariantError("indicator set on a non-edge")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.e))
                and np.all(np.isfinite(self.eta))):
            raise InvariantError("non-finite state")
        if tfs is not None:
            for i, tf in enumerate(tfs):
                if s[i].any() and self.tau[i] > tf.timing.tau_mad + SLACK:
                    raise InvariantError(
                        f"agent {i}: packet pending with tau={self.tau[i]:.6g} > "
                        f"tau_mad={tf.timing.tau_mad:.6g}")
                if not -SLACK <= self.sigma[i] <= tf.params.tau_masp + SLACK:
                    raise InvariantError(f"agent {i}: sigma={self.sigma[i]:.6g} out of range")


def estimate_matrix(state: HybridState, model: SystemModel) -> np.ndarray:
    """``Yh[i, m]``: agent i's held estimate of ``y_m`` (diagonal = ``r``)."""
    y = model.output(state.x)
    inn = model.topology.out_mask.T  # inn[i, m]: m sends to i
    Yh = (y[None, :, :] + state.e.transpose(1, 0, 2)) * inn[:, :, None]
    idx = np.arange(len(y))
    Yh[idx, idx] = state.r
    return Yh


def estimates_in(state: HybridState, i: int, model: SystemModel) -> np.ndarray:
    """Row i of :func:`estimate_matrix`: in-neighbour estimates plus the self entry."""
    y = model.output(state.x)
    inn = model.topology.out_mask[:, i]
    yh = (y + state.e[:, i]) * inn[:, None]
    yh[i] = state.r[i]
    return yh


def estimates_out(state: HybridState, i: int, model: SystemModel, y=None) -> np.ndarray:
    """Estimates of ``y_i`` held by i's out-neighbours (zero rows elsewhere)."""
    if y is None:
        y = model.output(state.x)
    out = model.topology.out_mask[i]
    return (y[i][None, :] + state.e[i]) * out[:, None]


_COEFS: dict = {}


def _coefs(tfs: Sequence[TriggerFunctions]) -> tuple[np.ndarray, np.ndarray]:
    key = tuple(id(tf) for tf in tfs)
    hit = _COEFS.get(key)
    if hit is None or any(a is not b for a, b in zip(hit[0], tfs)):
        coef = np.array([(1.0 - tf.params.eps) * tf.params.mu * tf.params.n_out for tf in tfs])
        eps_eta = np.array([tf.eps_eta for tf in tfs])
        hit = _COEFS[key] = (tuple(tfs), coef, eps_eta)
    return hit[1], hit[2]


def psi_all(Yh: np.ndarray, model: SystemModel,
            tfs: Sequence[TriggerFunctions]) -> np.ndarray:
    """Psi_i for every agent at once; agrees with ``tfs[i].psi(Yh[i])``."""
    coef = _coefs(tfs)[0]
    hl = model.H_lower_all(Yh)
    return model.varsigma_all(Yh) + coef * hl * hl


def flow(state: HybridState, dt: float, model: SystemModel,
         tfs: Sequence[TriggerFunctions], v=None) -> HybridState:
    """Flow for ``dt`` seconds with every estimate held (ZOH).

    Errors follow from the held estimates, so ``de/dt = -dy/dt`` on edges is
    satisfied exactly; eta uses the exact discretisation since Psi is
    constant while the estimates are.
    """
    if dt < 0:
        raise ValueError("negative flow duration")
    Yh = estimate_matrix(state, model)
    x = model.flow_x(state.x, Yh, dt, v)
    y = model.output(x)
    out = model.topology.out_mask
    e = (Yh.transpose(1, 0, 2) - y[:, None, :]) * out[:, :, None]
    psi = psi_all(Yh, model, tfs)
    eps_eta = _coefs(tfs)[1]
    a = np.exp(-eps_eta * dt)
    eta = a * state.eta + (1.0 - a) / eps_eta * psi
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(eta))):
        raise InvariantError("non-finite state during flow")
    return HybridState(x=x, e=e, tau=state.tau + dt, sigma=state.sigma + dt,
                       r=state.r.copy(), ell=state.ell.copy(), b=state.b.copy(), eta=eta)


def _flush(state: HybridState, i: int, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # agent i processes every buffered packet addressed to it
    e = state.e.copy()
    b = state.b.copy()
    pend = np.nonzero(b[:, i])[0]
    for j in pend:
        e[j, i] = state.r[j] - y[j]
    b[:, i] = 0
    return e, b


def _check_sampling(state: HybridState, i: int, tf: TriggerFunctions):
    if state.sigma[i] < tf.params.d_min - SLACK:
        raise ProtocolError(
            f"agent {i} sampled after {state.sigma[i]:.6g}s < d_min={tf.params.d_min:.6g}s")


def jump_transmit(state: HybridState, i: int, tfs: Sequence[TriggerFunctions],
                  model: SystemModel) -> HybridState:
    tf = tfs[i]
    _check_sampling(state, i, tf)
    if state.tau[i] < tf.timing.tau_miet:
        raise ProtocolError(f"agent {i} transmits before tau_miet")
    if state.ell[i].any():
        raise ProtocolError(f"agent {i} transmits with a packet still in flight")
    y = model.output(state.x)
    rho = tf.rho(y[i], estimates_out(state, i, model, y), state.sigma[i])
    e, b = _flush(state, i, y)
    tau, sigma, r, ell, eta = (state.tau.copy(), state.sigma.copy(), state.r.copy(),
                               state.ell.copy(), state.eta.copy())
    tau[i] = 0.0
    sigma[i] = 0.0
    r[i] = y[i]
    ell[i] = model.topology.out_mask[i]
    eta[i] += rho
    return HybridState(x=state.x.copy(), e=e, tau=tau, sigma=sigma, r=r, ell=ell, b=b, eta=eta)


def jump_sample(state: HybridState, i: int, tfs: Sequence[TriggerFunctions],
                model: SystemModel) -> HybridState:
    tf = tfs[i]
    _check_sampling(state, i, tf)
    y = model.output(state.x)
    nu = tf.nu(y[i], estimates_out(state, i, model, y), state.tau[i], state.sigma[i])
    e, b = _flush(state, i, y)
    sigma, eta = state.sigma.copy(), state.eta.copy()
    sigma[i] = 0.0
    eta[i] += nu
    return HybridState(x=state.x.copy(), e=e, tau=state.tau.copy(), sigma=sigma,
                       r=state.r.copy(), ell=state.ell.copy(), b=b, eta=eta)


def jump_receive(state: HybridState, i: int, m: int) -> HybridState:
    if state.ell[i, m] != 1:
        raise ProtocolError(f"delivery {i}->{m} without a packet in flight")
    ell, b = state.ell.copy(), state.b.copy()
    ell[i, m] = 0
    b[i, m] = 1
    return state.copy(ell=ell, b=b)


def trigger_decision(state: HybridState, i: int, tfs: Sequence[TriggerFunctions],
                     model: SystemModel) -> bool:
    """True iff agent i should broadcast at this sampling instant.

    Ties (``eta + nu == 0``) transmit.
    """
    tf = tfs[i]
    if state.tau[i] < tf.timing.tau_miet:
        return False
    if state.ell[i].any():
        raise ProtocolError(
            f"agent {i}: tau >= tau_miet while a packet is still in flight")
    y = model.output(state.x)
    nu = tf.nu(y[i], estimates_out(state, i, model, y), state.tau[i], state.sigma[i])
    return bool(state.eta[i] + nu <= 0.0)


@dataclass(frozen=True)
class FlowBatch:
    """States along one flow interval at offsets ``dts`` from its start."""

    dts: np.ndarray
    x: np.ndarray      # (K, N, nx)
    e: np.ndarray      # (K, N, N, ny)
    tau: np.ndarray    # (K, N)
    sigma: np.ndarray  # (K, N)
    eta: np.ndarray    # (K, N)
    start: HybridState
    Yh: np.ndarray

    def state(self, k: int) -> HybridState:
        return self.start.copy(x=self.x[k], e=self.e[k], tau=self.tau[k],
                               sigma=self.sigma[k], eta=self.eta[k])


def flow_batch(state: HybridState, dts, model: SystemModel,
               tfs: Sequence[TriggerFunctions]) -> FlowBatch:
    """:func:`flow` evaluated at many offsets at once (same held estimates)."""
    dts = np.asarray(dts, dtype=float)
    Yh = estimate_matrix(state, model)
    X = model.flow_x_batch(state.x, Yh, dts)
    Y = model.output_batch(X)
    out = model.topology.out_mask
    E = (Yh.transpose(1, 0, 2)[None] - Y[:, :, None, :]) * out[None, :, :, None]
    coef, eps_eta = _coefs(tfs)
    psi = psi_all(Yh, model, tfs)
    a = np.exp(-eps_eta[None, :] * dts[:, None])
    eta = a * state.eta[None, :] + (1.0 - a) / eps_eta * psi[None, :]
    return FlowBatch(dts, X, E, state.tau[None, :] + dts[:, None],
                     state.sigma[None, :] + dts[:, None], eta, state, Yh)
