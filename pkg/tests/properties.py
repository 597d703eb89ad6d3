"""Randomized property suites for W~, the jump increments of eta and the
gamma~ scaling. Each suite returns the number of failed instances."""
import numpy as np

from dpetc.verify import phi_bar, w_tilde, w_tilde_fast

SLACK = 1e-12


def brute_w(ell, b, y, e, r, lam, out):
    """W~ straight from its definition, looping over subset bitmasks."""
    n = len(out)
    R = [m for m in range(n) if out[m] and (ell[m] or b[m])]
    e = np.where(np.asarray(out)[:, None], e, 0.0)
    s = np.zeros_like(e)
    for m in R:
        s[m] = (r - y) - e[m]
    first = np.sqrt(np.sum((e + s) ** 2))
    best = 0.0
    for mask in range(1 << len(R)):
        v = e.copy()
        for k, m in enumerate(R):
            if mask >> k & 1:
                v[m] = v[m] + s[m]
        best = max(best, np.sqrt(np.sum(v ** 2)))
    return max(first, lam * best)


def random_tuple(rng):
    n = int(rng.integers(2, 7))
    ny = int(rng.integers(1, 3))
    out = np.zeros(n, dtype=bool)
    out[1:] = rng.random(n - 1) < 0.7
    if not out.any():
        out[int(rng.integers(1, n))] = True
    ell = (rng.random(n) < 0.4) & out
    b = (rng.random(n) < 0.4) & out & ~ell
    scale = 10.0 ** rng.uniform(-3, 1)
    y = rng.normal(size=ny) * scale
    r = y.copy() if rng.random() < 0.1 else rng.normal(size=ny) * scale
    e = rng.normal(size=(n, ny)) * scale * out[:, None]
    lam = float(rng.uniform(0.05, 0.95))
    return ell.astype(int), b.astype(int), y, e, r, lam, out


def w_oracle_suite(n, seed=0):
    """Enumeration, bitmask brute force and closed form agree."""
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        t = random_tuple(rng)
        a, c, f = w_tilde(*t), brute_w(*t), w_tilde_fast(*t)
        tol = SLACK * (1 + a)
        bad += abs(a - c) > tol or abs(a - f) > 1e-10 * (1 + a)
    return bad


def w_jump_suite(n, seed=1):
    """Returns failures of (update invariance, sampling contraction, transmission contraction)."""
    rng = np.random.default_rng(seed)
    fails = [0, 0, 0]
    for _ in range(n):
        ell, b, y, e, r, lam, out = random_tuple(rng)
        edges = np.nonzero(out)[0]
        w0 = w_tilde(ell, b, y, e, r, lam, out)
        tol = SLACK * (1 + w0)

        # a packet in flight is delivered
        m = int(rng.choice(edges))
        l1, b1 = ell.copy(), b.copy()
        l1[m], b1[m] = 1, 0
        before = w_tilde(l1, b1, y, e, r, lam, out)
        l2, b2 = l1.copy(), b1.copy()
        l2[m], b2[m] = 0, 1
        fails[0] += abs(w_tilde(l2, b2, y, e, r, lam, out) - before) > SLACK * (1 + before)

        # the receiver processes a buffered packet: e_m jumps to r - y
        m = int(rng.choice(edges))
        l1, b1 = ell.copy(), b.copy()
        l1[m], b1[m] = 0, 1
        before = w_tilde(l1, b1, y, e, r, lam, out)
        e2 = e.copy()
        e2[m] = r - y
        b2 = b1.copy()
        b2[m] = 0
        fails[1] += w_tilde(l1, b2, y, e2, r, lam, out) > before + SLACK * (1 + before)

        # transmission: everything pending, memory reset to y
        zero = np.zeros_like(ell)
        after = w_tilde(out.astype(int), zero, y, e, y, lam, out)
        fails[2] += after > lam * w_tilde(zero, zero, y, e, r, lam, out) + tol
    return fails


def trigger_bound_suite(tfs, n, seed=2):
    """Returns failures of the (rho, nu) bounds for the given trigger functions.

    Past tau_miet every packet of the agent has been processed (tau_mad <
    tau_miet), so admissible states there have no pending indicators.
    """
    rng = np.random.default_rng(seed)
    fails = [0, 0]
    for _ in range(n):
        tf = tfs[int(rng.integers(len(tfs)))]
        p, t, phi = tf.params, tf.timing, tf.design.phi
        out = tf.out_mask
        N = len(out)
        scale = 10.0 ** rng.uniform(-3, 1)
        y = rng.normal(size=1) * scale
        yh = rng.normal(size=(N, 1)) * scale
        r = rng.normal(size=1) * scale
        e = (yh - y) * out[:, None]
        sigma = float(rng.uniform(0, p.tau_masp))
        tau = t.tau_miet + float(rng.uniform(0, 1.5 * sigma if rng.random() < 0.5 else 0.2))
        zero = np.zeros(N, dtype=int)
        w_now = w_tilde(zero, zero, y, e, r, p.lam, out)
        w_sent = w_tilde(out.astype(int), zero, y, e, y, p.lam, out)
        g0, g1 = p.gamma_t(0), p.gamma_t(1)
        bound = -(g1 * phi_bar(1, 0.0, 0.0, phi, t.tau_miet) * w_sent ** 2
                  - g0 * phi_bar(0, tau, sigma, phi, t.tau_miet) * w_now ** 2)
        rho = tf.rho(y, yh, sigma)
        fails[0] += rho > bound + SLACK * (1 + abs(bound))

        if rng.random() < 0.2:
            tau = float(rng.uniform(0, t.tau_miet))
            fails[1] += tf.nu(y, yh, tau, sigma) != 0.0
            continue
        bound = -(g0 * phi_bar(0, tau, 0.0, phi, t.tau_miet) * w_now ** 2
                  - g0 * phi_bar(0, tau, sigma, phi, t.tau_miet) * w_now ** 2)
        nu = tf.nu(y, yh, tau, sigma)
        fails[1] += nu > bound + SLACK * (1 + abs(bound))
    return fails


def dominance_suite(tfs, n, seed=3):
    """gamma~(p)^2 W~^2 >= gamma^2 |e_out|^2 for both values of p."""
    rng = np.random.default_rng(seed)
    fails = [0, 0]
    for k in range(n):
        tf = tfs[int(rng.integers(len(tfs)))]
        p = tf.params
        out = tf.out_mask
        N = len(out)
        want = k % 2
        ell = (rng.random(N) < 0.5) & out if want else np.zeros(N, dtype=bool)
        if want and not ell.any():
            ell[int(rng.choice(np.nonzero(out)[0]))] = True
        b = (rng.random(N) < 0.5) & out & ~ell if want else np.zeros(N, dtype=bool)
        y = rng.normal(size=1)
        r = rng.normal(size=1)
        e = rng.normal(size=(N, 1)) * out[:, None] * 10.0 ** rng.uniform(-3, 1)
        w = w_tilde(ell.astype(int), b.astype(int), y, e, r, p.lam, out)
        lhs = p.gamma_t(want) ** 2 * w ** 2
        rhs = p.gamma ** 2 * float(np.sum(e * e))
        fails[want] += lhs < rhs - SLACK * (1 + rhs)
    return fails
