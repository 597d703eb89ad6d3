"""Runtime monitor for the dissipativity certificate along simulated traces.

The storage function is

    U = V(x) + sum_i eta_i + sum_i gt_i(p_i) * phibar_{p_i}(tau_i, sigma_i) * Wt_i**2

and the monitor checks that it never increases at jumps and that along flows
it is dominated by the supply rate. Two flow checks are made:

* a hard check on the ETM part ``U - V`` whose rate bound follows from the
  phi ODE alone and is therefore independent of the plant's certificate;
* the full supply-rate check ``dU/dt <= s - sum eps_eta * eta``, which is
  advisory when the model says its supply rate is not fully specified.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .design import TriggerFunctions
from .hybrid import FlowBatch, SystemModel, estimate_matrix, flow_batch
from .netsim import PS, SimTrace, from_ps

MAX_SUBSET_AGENTS = 16


def p_flag(ell_i, b_i, out_i) -> int:
    out_i = np.asarray(out_i, dtype=bool)
    return int(np.any((np.asarray(ell_i) + np.asarray(b_i))[out_i] > 0))


def pending_set(ell_i, b_i, out_i) -> list[int]:
    out_i = np.asarray(out_i, dtype=bool)
    pend = (np.asarray(ell_i) == 1) | (np.asarray(b_i) == 1)
    return [int(m) for m in np.nonzero(pend & out_i)[0]]


def w_tilde(ell_i, b_i, y_i, e_out, r_i, lam: float, out_i) -> float:
    """Wt_i by exhaustive enumeration of the subsets of the pending set."""
    e_out = np.asarray(e_out, dtype=float)
    e_out = e_out.reshape(len(out_i), -1) * np.asarray(out_i, dtype=bool)[:, None]
    R = pending_set(ell_i, b_i, out_i)
    if len(R) > MAX_SUBSET_AGENTS:
        raise ValueError(f"{len(R)} pending receivers: subset enumeration refused")
    s = np.zeros_like(e_out)
    if R:
        s[R] = (np.asarray(r_i, dtype=float) - np.asarray(y_i, dtype=float)) - e_out[R]
    first = np.linalg.norm(e_out + s)
    best = 0.0
    for k in range(len(R) + 1):
        for sub in itertools.combinations(R, k):
            v = e_out.copy()
            if sub:
                v[list(sub)] += s[list(sub)]
            best = max(best, float(np.linalg.norm(v)))
    return max(float(first), lam * best)


def w_tilde_fast(ell_i, b_i, y_i, e_out, r_i, lam: float, out_i) -> float:
    """Closed form of :func:`w_tilde`: the subset max picks, block by block,
    the larger of ``|e_l|`` and ``|r - y|``."""
    out_i = np.asarray(out_i, dtype=bool)
    e_out = np.asarray(e_out, dtype=float).reshape(len(out_i), -1)
    pend = ((np.asarray(ell_i) == 1) | (np.asarray(b_i) == 1)) & out_i
    e2 = np.sum(e_out * e_out, axis=1) * out_i
    d = np.asarray(r_i, dtype=float) - np.asarray(y_i, dtype=float)
    d2 = float(d @ d)
    first = np.sum(np.where(pend, d2, e2))
    second = np.sum(np.where(pend, np.maximum(e2, d2), e2))
    return float(np.sqrt(max(first, lam * lam * second)))


def phi_bar(l: int, tau: float, sigma: float, phi, tau_miet: float) -> float:
    if tau - sigma <= tau_miet:
        return phi(l, tau)
    return phi(l, tau_miet + sigma)


class StorageEvaluator:
    """Evaluates U and its pieces for one system/ETM configuration."""

    def __init__(self, model: SystemModel, tfs: Sequence[TriggerFunctions],
                 exhaustive: bool = False):
        self.model = model
        self.tfs = tuple(tfs)
        self.out = model.topology.out_mask
        self.exhaustive = exhaustive
        for tf in self.tfs:
            need = tf.timing.tau_miet + tf.params.tau_masp
            if tf.design.phi.support(0) + 1e-12 < need:
                raise ValueError("phi table does not cover tau_miet + tau_masp")

    def agent_terms(self, st) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per agent: (gt(p), phibar, Wt)."""
        y = self.model.output(st.x)
        n = len(self.tfs)
        g, ph, w = np.empty(n), np.empty(n), np.empty(n)
        wt = w_tilde if self.exhaustive else w_tilde_fast
        for i, tf in enumerate(self.tfs):
            p = p_flag(st.ell[i], st.b[i], self.out[i])
            g[i] = tf.params.gamma_t(p)
            ph[i] = phi_bar(p, float(st.tau[i]), float(st.sigma[i]), tf.design.phi,
                            tf.timing.tau_miet)
            w[i] = wt(st.ell[i], st.b[i], y[i], st.e[i], st.r[i], tf.params.lam, self.out[i])
        return g, ph, w

    def etm_part(self, st) -> float:
        g, ph, w = self.agent_terms(st)
        return float(np.sum(st.eta) + np.sum(g * ph * w * w))

    def storage(self, st) -> float:
        return float(self.model.storage(st.x)) + self.etm_part(st)

    def etm_rate_bound(self, st) -> float:
        """Upper bound on d(U - V)/dt implied by the phi ODE."""
        Yh = estimate_matrix(st, self.model)
        g, _, w = self.agent_terms(st)
        tot = 0.0
        for i, tf in enumerate(self.tfs):
            p = tf.params
            hl = self.model.H_lower(i, Yh[i])
            H = self.model.H(i, st.x, Yh)
            psi = self.model.varsigma(i, Yh[i]) + (1 - p.eps) * p.mu * p.n_out * hl * hl
            tot += psi + p.eps * p.mu * p.n_out * H * H - g[i] ** 2 * w[i] ** 2
            tot -= tf.eps_eta * st.eta[i]
        return float(tot)

    def batch(self, fb: FlowBatch) -> dict:
        """U, U - V, the ETM rate bound and the supply rate along a flow batch."""
        st0, model = fb.start, self.model
        Y = model.output_batch(fb.x)
        K = len(fb.dts)
        etm = fb.eta.sum(axis=1)
        bound = -(fb.eta @ np.array([tf.eps_eta for tf in self.tfs]))
        for i, tf in enumerate(self.tfs):
            p = tf.params
            out = self.out[i]
            pf = p_flag(st0.ell[i], st0.b[i], out)
            pend = ((st0.ell[i] == 1) | (st0.b[i] == 1)) & out
            g = p.gamma_t(pf)
            tau, sig = fb.tau[:, i], fb.sigma[:, i]
            arg = np.where(tau - sig <= tf.timing.tau_miet, tau, tf.timing.tau_miet + sig)
            ph = tf.design.phi.eval(pf, arg)
            e2 = np.sum(fb.e[:, i] ** 2, axis=-1) * out[None, :]
            dv = st0.r[i][None, :] - Y[:, i]
            d2 = np.sum(dv * dv, axis=-1)[:, None]
            first = np.sum(np.where(pend[None, :], d2, e2), axis=1)
            second = np.sum(np.where(pend[None, :], np.maximum(e2, d2), e2), axis=1)
            w2 = np.maximum(first, p.lam ** 2 * second)
            etm = etm + g * ph * w2
            hl = model.H_lower(i, fb.Yh[i])
            H = model.H_batch(i, fb.x, fb.Yh)
            psi = model.varsigma(i, fb.Yh[i]) + (1 - p.eps) * p.mu * p.n_out * hl * hl
            bound = bound + psi + p.eps * p.mu * p.n_out * H * H - g * g * w2
        V = model.storage_batch(fb.x)
        eps_eta = np.array([tf.eps_eta for tf in self.tfs])
        supply = model.supply_rate_batch(fb.x, fb.e) - fb.eta @ eps_eta
        assert etm.shape == (K,)
        return {"U": V + etm, "etm": etm, "bound": bound, "supply": supply}

    def supply(self, st) -> float:
        eps_eta = np.array([tf.eps_eta for tf in self.tfs])
        return float(self.model.supply_rate(st.x, st.e) - np.sum(eps_eta * st.eta))


@dataclass
class Section:
    name: str
    passed: bool = True
    checked: int = 0
    violations: list = field(default_factory=list)
    worst: float = float("-inf")
    notes: dict = field(default_factory=dict)

    def fail(self, rec: dict, limit: int = 50):
        self.passed = False
        if len(self.violations) < limit:
            self.violations.append(rec)

    def as_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "checked": self.checked,
                "n_violations": len(self.violations), "violations": self.violations,
                "worst": None if self.worst == float("-inf") else self.worst,
                **self.notes}


def check_jumps(trace: SimTrace, ev: StorageEvaluator, rel_tol: float = 1e-8) -> Section:
    """Delta U <= tol at every jump; equality where the jump cannot move U.

    At a sampling jump without transmission and with tau <= tau_miet the
    sampling agent's own term must be unchanged. Other agents' terms may drop
    when buffered packets are flushed, so the total is only required to be
    unchanged when nothing was flushed.
    """
    sec = Section("jumps")
    per_kind = {"G_a": 0, "G_b": 0, "G_c": 0}
    for j in trace.jumps:
        if j.pre is None:
            raise ValueError("trace lacks jump snapshots; rerun with snapshots enabled")
        u0, u1 = ev.storage(j.pre), ev.storage(j.post)
        du = u1 - u0
        tol = rel_tol * (1.0 + abs(u0))
        sec.checked += 1
        per_kind[j.kind] += 1
        sec.worst = max(sec.worst, du / (1.0 + abs(u0)))
        rec = {"time": from_ps(j.t), "kind": j.kind, "agent": j.agent, "dU": du, "U": u0}
        if du > tol:
            sec.fail({**rec, "check": "increase"})
            continue
        if j.kind == "G_c" and abs(du) > tol:
            sec.fail({**rec, "check": "G_c invariance"})
        elif j.kind == "G_b" and j.tau <= trace.tau_miet[j.agent]:
            i = j.agent
            g0, p0, w0 = ev.agent_terms(j.pre)
            g1, p1, w1 = ev.agent_terms(j.post)
            own = g1[i] * p1[i] * w1[i] ** 2 - g0[i] * p0[i] * w0[i] ** 2
            own += j.post.eta[i] - j.pre.eta[i]
            if abs(own) > tol or (not j.flushed and abs(du) > tol):
                sec.fail({**rec, "check": "G_b invariance", "own_dU": own})
    sec.notes["per_kind"] = per_kind
    return sec


def _segments(trace: SimTrace):
    """(start_state, t0_ps, t1_ps) for every maximal flow interval."""
    prev_state, prev_t = trace.initial, 0
    for j in trace.jumps:
        if j.t > prev_t:
            yield prev_state, prev_t, j.t
        prev_state, prev_t = j.post, j.t
    if trace.horizon > prev_t:
        yield prev_state, prev_t, trace.horizon


def check_flow(trace: SimTrace, ev: StorageEvaluator, stride: float = 1e-4,
               abs_tol: float = 1e-9, advisory_supply: bool | None = None) -> Section:
    """Finite-difference dissipation checks along every flow interval.

    Hard: the increment of ``U - V`` over each substep is at most the Simpson
    integral of its rate bound, plus ``abs_tol * (1 + U)``.
    Supply: forward-difference rate of U against s~ with slack
    ``1e-6 + 1e-3 |s~|``; counted as downgrades when advisory.
    """
    model, tfs = ev.model, ev.tfs
    if advisory_supply is None:
        advisory_supply = getattr(model, "supply_advisory", True)
    sec = Section("flow")
    downgrades, supply_worst = 0, float("-inf")
    h_ps = max(1, int(round(stride * PS)))
    for st0, t0, t1 in _segments(trace):
        if st0 is None:
            raise ValueError("trace lacks jump snapshots; rerun with snapshots enabled")
        grid = np.array(list(range(0, t1 - t0, h_ps)) + [t1 - t0], dtype=np.int64)
        half = np.empty(2 * len(grid) - 1)
        half[0::2] = grid / PS
        half[1::2] = (grid[:-1] + grid[1:]) / (2 * PS)
        r = ev.batch(flow_batch(st0, half, model, tfs))
        U, E, B = r["U"][0::2], r["etm"][0::2], r["bound"]
        dt = np.diff(grid) / PS
        integral = dt / 6.0 * (B[0:-2:2] + 4 * B[1::2] + B[2::2])
        resid = np.diff(E) - integral
        scale = 1.0 + np.abs(U[:-1])
        sec.checked += len(dt)
        if len(dt):
            sec.worst = max(sec.worst, float(np.max(resid / scale)))
        for k in np.nonzero(resid > abs_tol * scale)[0]:
            sec.fail({"time": from_ps(t0 + int(grid[k])), "check": "etm residual",
                      "residual": float(resid[k])})
        s_t = r["supply"][0::2][:-1]
        excess = np.diff(U) / dt - s_t - (1e-6 + 1e-3 * np.abs(s_t))
        if len(dt):
            supply_worst = max(supply_worst, float(excess.max()))
        bad = np.nonzero(excess > 0)[0]
        if advisory_supply:
            downgrades += len(bad)
        else:
            for k in bad:
                sec.fail({"time": from_ps(t0 + int(grid[k])), "check": "supply rate",
                          "excess": float(excess[k])})
    sec.notes["supply_downgrades"] = downgrades
    sec.notes["supply_advisory"] = bool(advisory_supply)
    sec.notes["supply_worst_excess"] = None if supply_worst == float("-inf") else supply_worst
    return sec


def check_timing(trace: SimTrace) -> Section:
    """Inter-event times >= tau_miet, total delays <= tau_mad, transmissions
    only at sampling instants (all in exact integer time)."""
    sec = Section("timing")
    miet_ps = [int(np.floor(v * PS + 1e-3)) for v in trace.tau_miet]
    mad_ps = [int(np.floor(v * PS + 1e-3)) for v in trace.tau_mad]
    for i, tx in enumerate(trace.transmissions):
        samp = set(trace.samplings[i])
        for a, b in zip(tx, tx[1:]):
            sec.checked += 1
            if from_ps(b - a) < trace.tau_miet[i] or b - a < miet_ps[i]:
                sec.fail({"agent": i, "check": "iet", "gap": from_ps(b - a)})
        for t in tx[1:]:
            if t not in samp:
                sec.fail({"agent": i, "check": "off-sample transmission", "time": from_ps(t)})
    for snd, rcv, sent, done in trace.processing:
        sec.checked += 1
        if done - sent > mad_ps[snd]:
            sec.fail({"sender": snd, "receiver": rcv, "check": "delay",
                      "delay": from_ps(done - sent)})
    for snd, rcv, sent, got in trace.deliveries:
        if got < sent:
            sec.fail({"sender": snd, "receiver": rcv, "check": "causality"})
    return sec


def metrics(trace: SimTrace) -> dict:
    per = []
    flagged = False
    for i, tx in enumerate(trace.transmissions):
        gaps = np.diff(np.asarray(tx, dtype=np.int64)) / PS
        if gaps.size == 0:
            flagged = True
        per.append({
            "agent": i, "transmissions": int(gaps.size),
            "iet_min": float(gaps.min()) if gaps.size else None,
            "iet_mean": float(gaps.mean()) if gaps.size else None,
            "iet_max": float(gaps.max()) if gaps.size else None,
        })
    times = [from_ps(r.t) for r in trace.rows]
    spread = [float(r.x.max() - r.x.min()) for r in trace.rows]
    V = [float(r.V) for r in trace.rows]
    rho = [j.deta for j in trace.jumps if j.kind == "G_a"]
    return {"agents": per, "no_transmissions": flagged, "time": times,
            "spread": spread, "V": V, "rho_min": min(rho) if rho else None}


def v_monotone(trace: SimTrace, slack: float = 1e-6) -> tuple[bool, float]:
    """Largest increase of V between consecutive recorded rows."""
    V = np.array([r.V for r in trace.rows])
    if V.size < 2:
        return True, 0.0
    worst = float(np.max(np.diff(V)))
    return worst <= slack, worst


@dataclass
class MonitorReport:
    sections: list
    metrics: dict

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.sections)

    def as_dict(self, series: bool = False) -> dict:
        m = dict(self.metrics)
        if not series:
            m = {k: v for k, v in m.items() if k not in ("time", "spread", "V")}
        return {"passed": self.passed, "sections": [s.as_dict() for s in self.sections],
                "metrics": m}

    def to_json(self, series: bool = False) -> str:
        return json.dumps(self.as_dict(series), indent=2, sort_keys=True) + "\n"


def monitor(trace: SimTrace, ev: StorageEvaluator, stride: float = 1e-4,
            flow_check: bool = True) -> MonitorReport:
    secs = [check_timing(trace)]
    if trace.jumps and trace.jumps[0].pre is not None or not trace.jumps:
        secs.append(check_jumps(trace, ev))
        if flow_check:
            secs.append(check_flow(trace, ev, stride))
    return MonitorReport(secs, metrics(trace))
