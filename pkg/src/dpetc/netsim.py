"""Discrete-event simulation of asynchronous sampling, delayed packets and the ETM.

Time is kept as an integer number of picoseconds so that simultaneity and the
timing guarantees (inter-event times, total delays) can be checked exactly.
Clocks ``tau``/``sigma`` are re-derived from the integer clock after every
flow so they never drift from the event times.
"""
from __future__ import annotations

import csv
import heapq
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .design import TriggerFunctions
from .hybrid import (HybridState, SystemModel, flow, jump_receive, jump_sample,
                     jump_transmit, trigger_decision)

TRACE_FORMAT = "# dpetc-trace v1"
PS = 1_000_000_000_000  # picoseconds per second
SAMPLING, DELIVERY = 1, 0  # deliveries sort first at equal times
X0_STREAM = 1 << 20


class ConfigError(ValueError):
    pass


def to_ps(t: float) -> int:
    return int(round(t * PS))


def from_ps(t: int) -> float:
    return t / PS


def agent_rngs(seed: int, i: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Sampling and delay streams for agent i; independent of the agent count."""
    ss = np.random.SeedSequence(seed, spawn_key=(i,))
    s_samp, s_delay = ss.spawn(2)
    return np.random.default_rng(s_samp), np.random.default_rng(s_delay)


def initial_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(X0_STREAM,)))


@dataclass(frozen=True)
class Packet:
    sender: int
    payload: np.ndarray
    sent_at: int                 # ps
    deliver_at: dict             # receiver -> ps


@dataclass
class EventQueue:
    """Min-heap of ``(time_ps, kind, a, b)``; kind orders deliveries first."""

    _heap: list = field(default_factory=list)
    _last: int = -1

    def push_sampling(self, t: int, agent: int):
        heapq.heappush(self._heap, (t, SAMPLING, agent, -1))

    def push_delivery(self, t: int, sender: int, receiver: int):
        heapq.heappush(self._heap, (t, DELIVERY, sender, receiver))

    def peek_time(self) -> Optional[int]:
        return self._heap[0][0] if self._heap else None

    def pop(self):
        ev = heapq.heappop(self._heap)
        if ev[0] < self._last:
            raise RuntimeError("event processed out of time order")
        self._last = ev[0]
        return ev

    def __len__(self):
        return len(self._heap)


@dataclass(frozen=True)
class ScenarioConfig:
    model: SystemModel
    tfs: tuple                      # TriggerFunctions per agent
    x0: np.ndarray
    horizon: float
    seed: int = 0
    eta0: float = 0.0
    delay: str = "uniform"          # uniform | zero | max
    sampling: str = "uniform"       # uniform | periodic
    record_stride: Optional[float] = 0.01
    snapshots: bool = False         # keep pre/post states of every jump
    storage: Optional[Callable] = None  # state -> U, evaluated per row when set
    debug: bool = False
    delay_sampler: Optional[Callable] = None  # (rng, lo_ps, hi_ps) -> ps

    def __post_init__(self):
        if self.horizon < 0:
            raise ConfigError("horizon must be non-negative")
        if self.delay not in ("uniform", "zero", "max"):
            raise ConfigError(f"unknown delay distribution {self.delay!r}")
        if self.sampling not in ("uniform", "periodic"):
            raise ConfigError(f"unknown sampling distribution {self.sampling!r}")
        if self.record_stride is not None and self.record_stride <= 0:
            raise ConfigError("record_stride must be positive")
        n = self.model.topology.n_agents
        if len(self.tfs) != n:
            raise ConfigError("one TriggerFunctions per agent required")
        for i in range(n):
            for m in self.model.topology.out_neighbors(i):
                if self.max_delay_ps(i, m) < 0:
                    raise ConfigError(
                        f"tau_mad of agent {i} is below tau_masp of receiver {m}")

    def gap_bounds_ps(self, i: int) -> tuple[int, int]:
        p = self.tfs[i].params
        lo, hi = math.ceil(p.d_min * PS - 1e-3), math.floor(p.tau_masp * PS + 1e-3)
        if self.sampling == "periodic":
            lo = hi
        return lo, hi

    def max_delay_ps(self, i: int, m: int) -> int:
        # total delay (network + wait for m's next sample) stays strictly below tau_mad
        mad = math.floor(self.tfs[i].timing.tau_mad * PS)
        return mad - 1 - self.gap_bounds_ps(m)[1]

    def replace(self, **changes) -> "ScenarioConfig":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return ScenarioConfig(**kw)


def next_sampling(cfg: ScenarioConfig, i: int, now_ps: int, rng: np.random.Generator) -> int:
    lo, hi = cfg.gap_bounds_ps(i)
    if lo == hi:
        return now_ps + hi
    return now_ps + int(rng.integers(lo, hi + 1))


def draw_delays(cfg: ScenarioConfig, i: int, now_ps: int, payload,
                rng: np.random.Generator) -> Packet:
    out = {}
    for m in cfg.model.topology.out_neighbors(i):
        dmax = cfg.max_delay_ps(i, m)
        if cfg.delay_sampler is not None:
            d = int(cfg.delay_sampler(rng, 0, dmax))
            if not 0 <= d <= dmax:
                raise ConfigError(f"custom delay {d} ps outside [0, {dmax}]")
        elif cfg.delay == "zero":
            d = 0
        elif cfg.delay == "max":
            d = dmax
        else:
            d = int(rng.integers(0, dmax + 1))
        out[m] = now_ps + d
    return Packet(i, np.array(payload, copy=True), now_ps, out)


@dataclass
class Row:
    t: int
    kind: str          # flow | G_a | G_b | G_c
    agent: int         # -1 for flow rows
    other: int         # receiver for G_c, -1 otherwise
    x: np.ndarray
    eta: np.ndarray
    V: float
    U: Optional[float]
    state: Optional[HybridState] = None


@dataclass
class JumpRecord:
    t: int
    kind: str
    agent: int
    other: int
    deta: float                    # eta_i^+ - eta_i (rho at G_a, nu at G_b)
    tau: float                     # agent's tau before the jump
    flushed: tuple                 # senders whose packets agent processed
    pre: Optional[HybridState] = None
    post: Optional[HybridState] = None


@dataclass
class SimTrace:
    n_agents: int
    horizon: int                   # ps
    seed: int
    tau_miet: np.ndarray
    tau_mad: np.ndarray
    rows: list
    jumps: list
    samplings: list                # per agent, ps
    transmissions: list            # per agent, ps (includes the t=0 broadcast)
    deliveries: list               # (sender, receiver, sent_ps, delivered_ps)
    processing: list               # (sender, receiver, sent_ps, processed_ps)
    initial: HybridState
    final: HybridState
    has_storage: bool = False


def flow_snapped(st: HybridState, t_from: int, t_to: int, last_tx, last_s,
                 model: SystemModel, tfs) -> HybridState:
    """Flow between integer instants, then re-derive clocks from the integer clock."""
    st = flow(st, from_ps(t_to - t_from), model, tfs)
    st.tau[:] = (t_to - np.asarray(last_tx, dtype=np.int64)) / PS
    st.sigma[:] = (t_to - np.asarray(last_s, dtype=np.int64)) / PS
    return st


def run(cfg: ScenarioConfig) -> SimTrace:
    model, tfs = cfg.model, cfg.tfs
    topo = model.topology
    n = topo.n_agents
    h_ps = to_ps(cfg.horizon)
    stride = to_ps(cfg.record_stride) if cfg.record_stride else None
    rngs = [agent_rngs(cfg.seed, i) for i in range(n)]

    state = HybridState.initial(model, cfg.x0, cfg.eta0)
    if cfg.debug:
        state.validate(topo, tfs)
    last_tx = np.zeros(n, dtype=np.int64)
    last_s = np.zeros(n, dtype=np.int64)
    samplings = [[0] for _ in range(n)]
    transmissions = [[0] for _ in range(n)]
    deliveries, processing, rows, jumps = [], [], [], []

    def record(t, kind, agent, other, st):
        U = cfg.storage(st) if cfg.storage is not None else None
        rows.append(Row(t, kind, agent, other, st.x[:, 0].copy() if model.nx == 1
                        else st.x.ravel().copy(), st.eta.copy(),
                        model.storage(st.x), U, st if cfg.snapshots else None))

    def advance(st, t_from, t_to):
        st = flow_snapped(st, t_from, t_to, last_tx, last_s, model, tfs)
        if cfg.debug:
            st.validate(topo, tfs)
        return st

    q = EventQueue()
    for i in range(n):
        q.push_sampling(next_sampling(cfg, i, 0, rngs[i][0]), i)

    record(0, "flow", -1, -1, state)
    t_cur = 0
    next_rec = stride if stride else None
    while len(q) and q.peek_time() <= h_ps:
        t, kind, a, b_ = q.pop()
        while next_rec is not None and next_rec < t:
            state = advance(state, t_cur, next_rec)
            t_cur = next_rec
            record(t_cur, "flow", -1, -1, state)
            next_rec += stride
        if t > t_cur:
            state = advance(state, t_cur, t)
            t_cur = t
        pre = state
        if kind == DELIVERY:
            if transmissions[a][-1] > t:
                raise RuntimeError("delivery before its transmission")
            state = jump_receive(state, a, b_)
            deliveries.append((a, b_, transmissions[a][-1], t))
            jrec = JumpRecord(t, "G_c", a, b_, 0.0, float(pre.tau[a]), ())
        else:
            i = a
            flushed = tuple(int(j) for j in np.nonzero(pre.b[:, i])[0])
            samplings[i].append(t)
            if trigger_decision(state, i, tfs, model):
                state = jump_transmit(state, i, tfs, model)
                last_tx[i] = t
                transmissions[i].append(t)
                pkt = draw_delays(cfg, i, t, state.r[i], rngs[i][1])
                for m, td in pkt.deliver_at.items():
                    q.push_delivery(td, i, m)
                kname = "G_a"
            else:
                state = jump_sample(state, i, tfs, model)
                kname = "G_b"
            last_s[i] = t
            for j in flushed:
                processing.append((j, i, transmissions[j][-1], t))
            q.push_sampling(next_sampling(cfg, i, t, rngs[i][0]), i)
            jrec = JumpRecord(t, kname, i, -1, float(state.eta[i] - pre.eta[i]),
                              float(pre.tau[i]), flushed)
        if cfg.debug:
            state.validate(topo, tfs)
        if cfg.snapshots:
            jrec.pre, jrec.post = pre, state
        jumps.append(jrec)
        record(t, jrec.kind, jrec.agent, jrec.other, state)

    while next_rec is not None and next_rec < h_ps:
        state = advance(state, t_cur, next_rec)
        t_cur = next_rec
        record(t_cur, "flow", -1, -1, state)
        next_rec += stride
    if h_ps > t_cur:
        state = advance(state, t_cur, h_ps)
        t_cur = h_ps
        record(t_cur, "flow", -1, -1, state)

    return SimTrace(
        n_agents=n, horizon=h_ps, seed=cfg.seed,
        tau_miet=np.array([tf.timing.tau_miet for tf in tfs]),
        tau_mad=np.array([tf.timing.tau_mad for tf in tfs]),
        rows=rows, jumps=jumps, samplings=samplings, transmissions=transmissions,
        deliveries=deliveries, processing=processing,
        initial=HybridState.initial(model, cfg.x0, cfg.eta0), final=state,
        has_storage=cfg.storage is not None,
    )


# serialisation -------------------------------------------------------------

def _f(v: float) -> str:
    return repr(float(v))


def state_columns(n: int, edges: Sequence[tuple]) -> list[str]:
    cols = [f"tau{i}" for i in range(n)] + [f"sigma{i}" for i in range(n)]
    cols += [f"r{i}" for i in range(n)]
    cols += [f"e{i}_{m}" for i, m in edges]
    cols += [f"ell{i}_{m}" for i, m in edges] + [f"b{i}_{m}" for i, m in edges]
    return cols


def state_to_cells(st: HybridState, edges) -> list[str]:
    cells = [_f(v) for v in st.tau] + [_f(v) for v in st.sigma]
    cells += [_f(v) for v in st.r[:, 0]]
    cells += [_f(st.e[i, m, 0]) for i, m in edges]
    cells += [str(int(st.ell[i, m])) for i, m in edges]
    cells += [str(int(st.b[i, m])) for i, m in edges]
    return cells


def state_from_record(rec: dict, n: int, edges) -> HybridState:
    """Rebuild a scalar-output state from a CSV row written with full state."""
    e = np.zeros((n, n, 1))
    ell = np.zeros((n, n), dtype=np.int8)
    b = np.zeros((n, n), dtype=np.int8)
    for i, m in edges:
        e[i, m, 0] = float(rec[f"e{i}_{m}"])
        ell[i, m] = int(rec[f"ell{i}_{m}"])
        b[i, m] = int(rec[f"b{i}_{m}"])
    return HybridState(
        x=np.array([[float(rec[f"x{i}"])] for i in range(n)]),
        e=e,
        tau=np.array([float(rec[f"tau{i}"]) for i in range(n)]),
        sigma=np.array([float(rec[f"sigma{i}"]) for i in range(n)]),
        r=np.array([[float(rec[f"r{i}"])] for i in range(n)]),
        ell=ell, b=b,
        eta=np.array([float(rec[f"eta{i}"]) for i in range(n)]),
    )


def trace_csv(trace: SimTrace, full_state: bool = False, edges=None) -> str:
    """CSV text of a trace (LF line endings, repr floats)."""
    n = trace.n_agents
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    buf.write(TRACE_FORMAT + "\n")
    head = ["time", "kind", "agent", "receiver"]
    head += [f"x{i}" for i in range(n)] + [f"eta{i}" for i in range(n)] + ["U", "V"]
    if full_state:
        if edges is None:
            raise ValueError("edges required for full-state export")
        if any(r.state is None for r in trace.rows):
            raise ValueError("full-state export needs a trace recorded with snapshots")
        head += state_columns(n, edges)
    w.writerow(head)
    for r in trace.rows:
        cells = [_f(from_ps(r.t)), r.kind,
                 "" if r.agent < 0 else str(r.agent), "" if r.other < 0 else str(r.other)]
        cells += [_f(v) for v in r.x] + [_f(v) for v in r.eta]
        cells += ["" if r.U is None else _f(r.U), _f(r.V)]
        if full_state:
            cells += state_to_cells(r.state, edges)
        w.writerow(cells)
    return buf.getvalue()


def summary(trace: SimTrace) -> dict:
    per = []
    for i, tx in enumerate(trace.transmissions):
        gaps = np.diff(np.array(tx, dtype=np.int64)) / PS
        per.append({
            "agent": i,
            "transmissions": len(tx) - 1,
            "samplings": len(trace.samplings[i]) - 1,
            "iet_min": float(gaps.min()) if gaps.size else None,
            "iet_mean": float(gaps.mean()) if gaps.size else None,
            "iet_max": float(gaps.max()) if gaps.size else None,
            "tau_miet": float(trace.tau_miet[i]),
        })
    x0, x1 = trace.rows[0].x, trace.rows[-1].x
    return {
        "seed": trace.seed,
        "horizon": from_ps(trace.horizon),
        "agents": per,
        "total_transmissions": sum(p["transmissions"] for p in per),
        "initial_spread": float(x0.max() - x0.min()),
        "final_spread": float(x1.max() - x1.min()),
    }


def summary_json(trace: SimTrace) -> str:
    return json.dumps(summary(trace), indent=2, sort_keys=True) + "\n"


def replay_csv(text: str, model: SystemModel, tfs, edges) -> SimTrace:
    """Rebuild a trace with jump snapshots from a full-state CSV.

    Pre-jump states are recomputed by flowing the previous row exactly as the
    simulator did, so the result is bit-identical to the recorded run.
    """
    lines = text.splitlines(keepends=True)
    if lines and lines[0].startswith("#"):
        if lines[0].strip() != TRACE_FORMAT:
            raise ValueError(f"unsupported trace format {lines[0].strip()!r}")
        lines = lines[1:]
    recs = list(csv.DictReader(lines))
    if not recs:
        raise ValueError("empty trace")
    if "tau0" not in recs[0]:
        raise ValueError("trace was written without full state columns")
    n = model.topology.n_agents
    rows, jumps = [], []
    samplings = [[0] for _ in range(n)]
    transmissions = [[0] for _ in range(n)]
    deliveries, processing = [], []
    prev, prev_t = None, 0
    initial = None
    for rec in recs:
        t = to_ps(float(rec["time"]))
        st = state_from_record(rec, n, edges)
        kind = rec["kind"]
        agent = int(rec["agent"]) if rec["agent"] else -1
        other = int(rec["receiver"]) if rec["receiver"] else -1
        U = float(rec["U"]) if rec["U"] else None
        rows.append(Row(t, kind, agent, other, st.x[:, 0].copy(), st.eta.copy(),
                        float(rec["V"]), U, st))
        if prev is None:
            initial = st
            prev, prev_t = st, t
            continue
        if kind != "flow":
            if t > prev_t:
                last_tx = prev_t - np.rint(prev.tau * PS).astype(np.int64)
                last_s = prev_t - np.rint(prev.sigma * PS).astype(np.int64)
                pre = flow_snapped(prev, prev_t, t, last_tx, last_s, model, tfs)
            else:
                pre = prev
            if kind == "G_c":
                deliveries.append((agent, other, transmissions[agent][-1], t))
                flushed = ()
            else:
                flushed = tuple(int(j) for j in np.nonzero(pre.b[:, agent])[0])
                samplings[agent].append(t)
                if kind == "G_a":
                    transmissions[agent].append(t)
                for j in flushed:
                    processing.append((j, agent, transmissions[j][-1], t))
            jumps.append(JumpRecord(t, kind, agent, other,
                                    float(st.eta[agent] - pre.eta[agent]) if kind != "G_c" else 0.0,
                                    float(pre.tau[agent]), flushed, pre, st))
        prev, prev_t = st, t
    return SimTrace(
        n_agents=n, horizon=rows[-1].t, seed=-1,
        tau_miet=np.array([tf.timing.tau_miet for tf in tfs]),
        tau_mad=np.array([tf.timing.tau_mad for tf in tfs]),
        rows=rows, jumps=jumps, samplings=samplings, transmissions=transmissions,
        deliveries=deliveries, processing=processing, initial=initial, final=prev,
        has_storage=rows[0].U is not None,
    )
