import numpy as np
import pytest

from dpetc.config import DEFAULTS, build_scenario, build_setup, load_config
from dpetc.design import EtmParams
from dpetc.hybrid import GraphTopology, HybridState, SystemModel


@pytest.fixture(scope="session")
def cfg():
    return load_config(None)


@pytest.fixture(scope="session")
def setup(cfg):
    return build_setup(cfg)


@pytest.fixture(scope="session")
def short_monitored_trace(cfg, setup):
    from dpetc.netsim import run
    sc, _ = build_scenario(cfg, seed=11, horizon=0.4, setup=setup, snapshots=True,
                           storage=True)
    return run(sc)


def benchmark_params(n_out=2, mu=None, **kw):
    from dpetc.models import ConsensusParams
    cp = ConsensusParams()
    base = dict(gamma=cp.gamma(n_out), lip=0.0, mu=cp.c(n_out) if mu is None else mu,
                eps=0.5, lam=0.2, n_out=n_out, phi0_init=5.0, phi1_init=2.0,
                tau_masp=1e-2, d_min=1e-3)
    base.update(kw)
    return EtmParams(**base)


def random_state(model, rng, tau=None, sigma=None):
    """An admissible state with random errors on every edge."""
    n = model.topology.n_agents
    st = HybridState.initial(model, rng.uniform(-1, 1, n))
    out = model.topology.out_mask
    e = rng.normal(size=(n, n, 1)) * out[:, :, None]
    tau = rng.uniform(0, 0.2, n) if tau is None else np.full(n, tau)
    sigma = rng.uniform(0.001, 0.01, n) if sigma is None else np.full(n, sigma)
    sigma = np.minimum(sigma, tau)
    return st.copy(e=e, tau=tau, sigma=sigma, r=rng.uniform(-1, 1, (n, 1)),
                   eta=rng.uniform(0, 1, n))


class LeakyAgents(SystemModel):
    """Decoupled agents x' = -x + u with u from held neighbour estimates.

    A non-consensus model with a nonzero Lipschitz bound, used to exercise the
    generic code paths (RK4 flow, loops over agents).
    """

    def __init__(self, topology: GraphTopology, k: float = 0.5):
        self.topology = topology
        self.k = k
        self.max_step = 1e-3

    def _u(self, i, yh):
        inn = self.topology.out_mask[:, i]
        return -self.k * float(np.sum(inn * (yh[i, 0] - yh[:, 0])))

    def output(self, x):
        return np.asarray(x, dtype=float)

    def vector_field(self, x, Yh, v=None):
        u = np.array([self._u(i, Yh[i]) for i in range(len(x))])
        return -x + u[:, None]

    def H(self, i, x, Yh, v=None):
        return abs(-x[i, 0] + self._u(i, Yh[i]))

    def H_lower(self, i, yh):
        return 0.0

    def lip(self, i):
        return 1.0

    def mu(self, i):
        return 0.5

    def gamma(self, i):
        return 2.0

    def storage(self, x):
        return float(np.sum(np.asarray(x) ** 2))

    def supply_rate(self, x, e, v=None):
        return -float(np.sum(np.asarray(x) ** 2))

    def attractor_distance(self, x):
        return float(np.linalg.norm(x))
