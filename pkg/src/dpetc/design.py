"""Timing constants and trigger-function synthesis for the local ETMs.

Each agent integrates two scalar Riccati-type ODEs (``phi0`` for the
"everything processed" regime and ``phi1`` for the "packet in flight"
regime), reads off ``tau_max`` and ``tau_mad`` from them, and derives the
functions that drive its triggering variable ``eta``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
ROOT_TOL = 1e-9
SIGN_SLACK = 1e-12


class DesignError(ValueError):
    """Raised when a parameter set cannot produce admissible timing constants."""


@dataclass(frozen=True)
class EtmParams:
    """Per-agent tuning and system constants.

    gamma, lip and mu come from the system model (L2 gain, Lipschitz bound of
    the output growth, and the weight on ``H_i**2``); eps and lam are free
    tuning knobs.
    """

    gamma: float
    lip: float
    mu: float
    eps: float
    lam: float
    n_out: int
    phi0_init: float
    phi1_init: float
    tau_masp: float
    d_min: float

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise DesignError(f"lambda must lie in (0, 1), got {self.lam}")
        if not 0.0 < self.eps <= 1.0:
            raise DesignError(f"eps must lie in (0, 1], got {self.eps}")
        if self.gamma <= 0 or self.mu <= 0:
            raise DesignError("gamma and mu must be positive")
        if self.lip < 0:
            raise DesignError("lip must be non-negative")
        if self.n_out < 0:
            raise DesignError("n_out must be non-negative")
        if not 0.0 < self.d_min <= self.tau_masp:
            raise DesignError("need 0 < d_min <= tau_masp")
        if self.phi0_init <= 0 or self.phi1_init <= 0:
            raise DesignError("phi initial conditions must be positive")

    def gamma_t(self, l: int) -> float:
        return self.gamma * self.lam ** (-l)

    def lip_t(self, l: int) -> float:
        return self.lip * math.sqrt(self.n_out) * self.lam ** (-l)

    def ordering_ok(self) -> bool:
        """Initial-condition ordering required before integrating."""
        g1phi1 = self.gamma_t(1) * self.phi1_init
        g0phi0 = self.gamma_t(0) * self.phi0_init
        return g1phi1 >= g0phi0 > self.lam ** 2 * g1phi1 > 0.0

    def replace(self, **changes) -> "EtmParams":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return EtmParams(**kw)


def phi_derivative(l: int, phi: float, p: EtmParams) -> float:
    if l not in (0, 1):
        raise ValueError("l must be 0 or 1")
    g = p.gamma_t(l)
    return -(2.0 * p.lip_t(l) * phi + g * (phi * phi / (p.mu * p.eps) + 1.0))


def integrate_phi(p: EtmParams, l: int, horizon: float, step: float = DEFAULT_STEP,
                  stop_at_zero: bool = False) -> np.ndarray:
    """Classical RK4 on the grid ``k * step``, k = 0..ceil(horizon/step).

    With ``stop_at_zero`` the array ends at the first non-positive sample;
    beyond that point the solution runs into a pole and is of no use.
    """
    if step <= 0 or horizon <= 0:
        raise ValueError("step and horizon must be positive")
    if l not in (0, 1):
        raise ValueError("l must be 0 or 1")
    n = int(math.ceil(horizon / step - 1e-9))
    a = 2.0 * p.lip_t(l)
    g = p.gamma_t(l)
    inv = 1.0 / (p.mu * p.eps)
    h = step

    def rhs(v):
        return -(a * v + g * (v * v * inv + 1.0))

    out = [p.phi1_init if l else p.phi0_init]
    v = out[0]
    for k in range(n):
        k1 = rhs(v)
        k2 = rhs(v + 0.5 * h * k1)
        k3 = rhs(v + 0.5 * h * k2)
        k4 = rhs(v + h * k3)
        v = v + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not math.isfinite(v):
            raise DesignError(
                f"phi_{l} became non-finite at tau={(k + 1) * h:.6g}s; step too large")
        out.append(v)
        if stop_at_zero and v <= 0.0:
            break
    return np.asarray(out)


def _hermite(y0, y1, d0, d1, s, h):
    s2 = s * s
    s3 = s2 * s
    return ((2 * s3 - 3 * s2 + 1) * y0 + (s3 - 2 * s2 + s) * h * d0
            + (-2 * s3 + 3 * s2) * y1 + (s3 - s2) * h * d1)


@dataclass(frozen=True)
class PhiTable:
    """Sampled phi trajectories with cubic Hermite interpolation.

    phi1 may be shorter than phi0: it is cut at its first non-positive
    sample. Lookups outside a curve's support raise ``ValueError``.
    """

    step: float
    phi0: np.ndarray
    phi1: np.ndarray
    horizon: float
    params: EtmParams = field(repr=False)

    def __post_init__(self):
        for l, arr in ((0, self.phi0), (1, self.phi1)):
            p = self.params
            d = -(2.0 * p.lip_t(l) * arr + p.gamma_t(l) * (arr * arr / (p.mu * p.eps) + 1.0))
            object.__setattr__(self, f"_d{l}", d)

    def support(self, l: int) -> float:
        arr = self.phi1 if l else self.phi0
        return (len(arr) - 1) * self.step

    def __call__(self, l: int, tau: float) -> float:
        arr = self.phi1 if l else self.phi0
        d = self._d1 if l else self._d0
        if tau < 0:
            raise ValueError(f"negative tau {tau}")
        x = tau / self.step
        k = int(x)
        last = len(arr) - 1
        if k >= last:
            if k == last and x - k < 1e-9:
                return float(arr[last])
            raise ValueError(
                f"phi_{l}({tau:.6g}) outside table support [0, {self.support(l):.6g}]")
        s = x - k
        return float(_hermite(arr[k], arr[k + 1], d[k], d[k + 1], s, self.step))

    def eval(self, l: int, tau) -> np.ndarray:
        """Vectorised :meth:`__call__`; same arithmetic, same bounds policy."""
        arr = self.phi1 if l else self.phi0
        d = self._d1 if l else self._d0
        tau = np.asarray(tau, dtype=float)
        if np.any(tau < 0):
            raise ValueError("negative tau")
        x = tau / self.step
        k = x.astype(np.int64)
        last = len(arr) - 1
        at_end = (k == last) & (x - k < 1e-9)
        if np.any((k >= last) & ~at_end):
            raise ValueError(
                f"phi_{l}({float(tau.max()):.6g}) outside table support [0, {self.support(l):.6g}]")
        kk = np.minimum(k, last - 1)
        s = x - kk
        out = _hermite(arr[kk], arr[kk + 1], d[kk], d[kk + 1], s, self.step)
        return np.where(at_end, arr[last], out)

    def grid(self, l: int) -> np.ndarray:
        arr = self.phi1 if l else self.phi0
        return np.arange(len(arr)) * self.step


@dataclass(frozen=True)
class TimingConstants:
    tau_max: float
    tau_mad: float
    tau_miet: float

    def check(self, tau_masp: float):
        if self.tau_max + 1e-15 < self.tau_mad + tau_masp:
            raise DesignError(
                f"tau_max={self.tau_max:.6g} < tau_mad + tau_masp="
                f"{self.tau_mad + tau_masp:.6g}")
        if self.tau_miet > self.tau_max - tau_masp + 1e-15:
            raise DesignError(
                f"tau_miet={self.tau_miet:.6g} exceeds tau_max - tau_masp="
                f"{self.tau_max - tau_masp:.6g}")
        if self.tau_miet < self.tau_mad:
            raise DesignError(
                f"tau_miet={self.tau_miet:.6g} below tau_mad={self.tau_mad:.6g}")


def _bisect(pred: Callable[[float], bool], lo: float, hi: float, tol: float = ROOT_TOL) -> float:
    # pred(lo) is True, pred(hi) is False. Backing off one tol keeps the
    # returned point strictly inside, clear of the integration error.
    start = lo
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if pred(mid):
            lo = mid
        else:
            hi = mid
    return max(lo - tol, start)


def compute_tau_max(p: EtmParams, phi: PhiTable) -> float:
    thr = p.lam ** 2 * p.gamma_t(1) * phi(1, 0.0)
    g0 = p.gamma_t(0)

    def ok(t):
        return g0 * phi(0, t) >= thr

    if not ok(0.0):
        raise DesignError("tau_max: first inequality already violated at tau=0")
    vals = g0 * phi.phi0
    bad = np.nonzero(vals < thr)[0]
    if len(bad) == 0:
        raise DesignError("phi table horizon too short to bracket tau_max")
    k = int(bad[0])
    return _bisect(ok, (k - 1) * phi.step, k * phi.step)


def compute_tau_mad(p: EtmParams, phi: PhiTable) -> float:
    g0, g1 = p.gamma_t(0), p.gamma_t(1)

    def ok(t):
        return g1 * phi(1, t) >= g0 * phi(0, t)

    if not ok(0.0):
        raise DesignError("tau_mad: ordering violated at tau=0")
    n = min(len(phi.phi0), len(phi.phi1))
    bad = np.nonzero(g1 * phi.phi1[:n] < g0 * phi.phi0[:n])[0]
    if len(bad) == 0:
        return (n - 1) * phi.step
    k = int(bad[0])
    return _bisect(ok, (k - 1) * phi.step, k * phi.step)


def _zero_bound(p: EtmParams, l: int) -> float:
    # |phi'| >= gamma_t(l) for phi >= 0, so the zero crossing comes before this
    init = p.phi1_init if l else p.phi0_init
    return init / p.gamma_t(l)


@dataclass(frozen=True)
class AgentDesign:
    params: EtmParams
    phi: PhiTable
    timing: TimingConstants


def design_agent(p: EtmParams, step: float = DEFAULT_STEP,
                 tau_miet: float | None = None) -> AgentDesign:
    """Full pipeline: integrate phi, find tau_max/tau_mad, fix tau_miet.

    ``tau_miet`` defaults to ``tau_max - tau_masp``; a smaller user choice is
    accepted as long as it stays at or above ``tau_mad``.
    """
    if not p.ordering_ok():
        raise DesignError(
            "initial conditions violate gamma1*phi1(0) >= gamma0*phi0(0) > "
            "lam^2*gamma1*phi1(0) > 0")
    # first pass: long enough to bracket both boundaries
    h0 = max(_zero_bound(p, 0), _zero_bound(p, 1)) + 2 * step
    scout = PhiTable(step, integrate_phi(p, 0, h0, step, stop_at_zero=True),
                     integrate_phi(p, 1, h0, step, stop_at_zero=True), h0, p)
    tmax = compute_tau_max(p, scout)
    tmad = compute_tau_mad(p, scout)
    horizon = tmax + p.tau_masp + step
    phi = PhiTable(step, integrate_phi(p, 0, horizon, step),
                   integrate_phi(p, 1, horizon, step, stop_at_zero=True), horizon, p)
    if tau_miet is None:
        tau_miet = tmax - p.tau_masp
    timing = TimingConstants(tmax, tmad, tau_miet)
    timing.check(p.tau_masp)
    return AgentDesign(p, phi, timing)


def certify_timing(design: AgentDesign, refine: int = 10) -> dict:
    """Re-check both timing inequalities on an independent finer integration.

    Returns the worst margins found (non-negative means certified).
    """
    p, t = design.params, design.timing
    fine_step = design.phi.step / refine
    horizon = t.tau_max + fine_step
    f0 = integrate_phi(p, 0, horizon, fine_step)
    f1 = integrate_phi(p, 1, max(t.tau_mad, fine_step) + fine_step, fine_step,
                       stop_at_zero=True)
    fine = PhiTable(fine_step, f0, f1, horizon, p)
    g0, g1 = p.gamma_t(0), p.gamma_t(1)
    margin_max = g0 * fine(0, t.tau_max) - p.lam ** 2 * g1 * fine(1, 0.0)
    kmad = int(t.tau_mad / fine_step)
    diffs = g1 * f1[:kmad + 1] - g0 * f0[:kmad + 1]
    end = g1 * fine(1, t.tau_mad) - g0 * fine(0, t.tau_mad)
    margin_mad = float(min(diffs.min(), end))
    return {
        "tau_max_margin": float(margin_max),
        "tau_mad_margin": margin_mad,
        "precondition_margin": t.tau_max - t.tau_mad - p.tau_masp,
        "certified": bool(margin_max >= -SIGN_SLACK and margin_mad >= -SIGN_SLACK
                          and t.tau_max - t.tau_mad - p.tau_masp >= -1e-15),
    }


def closed_form_phi(p: EtmParams, l: int, tau):
    """Exact solution of the phi ODE when lip == 0 (tan form)."""
    if p.lip != 0:
        raise ValueError("closed form only valid for lip == 0")
    k = math.sqrt(p.mu * p.eps)
    g = p.gamma_t(l)
    init = p.phi1_init if l else p.phi0_init
    return k * np.tan(np.arctan(init / k) - g * np.asarray(tau) / k)


def tradeoff_curve(p: EtmParams, lambda_grid: Sequence[float],
                   step: float = DEFAULT_STEP) -> tuple[list[tuple[float, float, float]], list[dict]]:
    """(lambda, tau_max, tau_mad) rows sorted by lambda, plus skipped points."""
    rows, skipped = [], []
    for lam in sorted(lambda_grid):
        if not 0.0 < lam < 1.0:
            raise DesignError(f"lambda {lam} outside (0, 1)")
        q = p.replace(lam=lam)
        if not q.ordering_ok():
            skipped.append({"lambda": lam, "reason": "initial-condition ordering fails"})
            log.warning("tradeoff_curve: skipping lambda=%g (ordering)", lam)
            continue
        h0 = max(_zero_bound(q, 0), _zero_bound(q, 1)) + 2 * step
        tab = PhiTable(step, integrate_phi(q, 0, h0, step, stop_at_zero=True),
                       integrate_phi(q, 1, h0, step, stop_at_zero=True), h0, q)
        rows.append((lam, compute_tau_max(q, tab), compute_tau_mad(q, tab)))
    return rows, skipped


# ---------------------------------------------------------------------------
# trigger functions

def eta_exact_step(eta: float, psi_val: float, eps_eta: float, dt: float) -> float:
    if dt < 0:
        raise ValueError("dt must be non-negative")
    a = math.exp(-eps_eta * dt)
    return a * eta + (1.0 - a) / eps_eta * psi_val


def make_psi(varsigma: Callable, h_lower: Callable, p: EtmParams) -> Callable:
    coef = (1.0 - p.eps) * p.mu * p.n_out

    def psi(yhat_in) -> float:
        hl = h_lower(yhat_in)
        return float(varsigma(yhat_in) + coef * hl * hl)

    return psi


@dataclass(frozen=True)
class TriggerFunctions:
    """Everything agent i's ETM needs at run time."""

    design: AgentDesign
    out_mask: np.ndarray
    eps_eta: float
    mode: str = "online"
    psi: Callable | None = None

    def __post_init__(self):
        if self.mode not in ("online", "conservative"):
            raise ValueError(f"unknown trigger mode {self.mode!r}")
        if self.eps_eta <= 0:
            raise ValueError("eps_eta must be positive")
        p, t = self.design.params, self.design.timing
        if self.design.phi.support(0) + 1e-12 < t.tau_miet + p.tau_masp:
            raise DesignError("phi table does not cover tau_miet + tau_masp")
        object.__setattr__(self, "rho", make_rho(self))
        object.__setattr__(self, "nu", make_nu(self))

    @property
    def params(self) -> EtmParams:
        return self.design.params

    @property
    def timing(self) -> TimingConstants:
        return self.design.timing

    def e_out(self, y_i, yhat_out) -> np.ndarray:
        e = np.asarray(yhat_out, dtype=float) - np.asarray(y_i, dtype=float)
        return e * self.out_mask[:, None]

    def eps_rho(self, sigma: float) -> float:
        p, t, phi = self.params, self.timing, self.design.phi
        arg = t.tau_miet + (sigma if self.mode == "online" else p.tau_masp)
        val = p.gamma_t(0) * phi(0, arg) - p.gamma_t(1) * phi(1, 0.0) * p.lam ** 2
        if val < -SIGN_SLACK:
            raise DesignError(f"eps_rho={val:.3e} < 0: timing constants inconsistent")
        return max(val, 0.0)

    def eps_nu(self, sigma: float) -> float:
        p, t, phi = self.params, self.timing, self.design.phi
        arg = t.tau_miet + (sigma if self.mode == "online" else p.tau_masp)
        val = phi(0, arg) - phi(0, t.tau_miet)
        if val > SIGN_SLACK:
            raise DesignError(f"eps_nu={val:.3e} > 0: phi0 not decreasing")
        return min(val, 0.0)


def make_rho(tf: TriggerFunctions) -> Callable:
    def rho(y_i, yhat_out, sigma_i: float) -> float:
        e = tf.e_out(y_i, yhat_out)
        return tf.eps_rho(sigma_i) * float(np.sum(e * e))

    return rho


def make_nu(tf: TriggerFunctions) -> Callable:
    g0 = tf.params.gamma_t(0)
    tau_miet = tf.timing.tau_miet

    def nu(y_i, yhat_out, tau_i: float, sigma_i: float) -> float:
        # omega = 1 on [0, tau_miet], so nu vanishes there
        if tau_i <= tau_miet:
            return 0.0
        e = tf.e_out(y_i, yhat_out)
        val = g0 * tf.eps_nu(sigma_i) * float(np.sum(e * e))
        if val > SIGN_SLACK:
            raise DesignError(f"nu={val:.3e} > 0")
        return min(val, 0.0)

    return nu
