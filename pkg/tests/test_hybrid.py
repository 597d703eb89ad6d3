import numpy as np
import pytest

from dpetc.hybrid import (GraphTopology, HybridState, InvariantError, ProtocolError,
                          estimate_matrix, estimates_in, flow, flow_batch, jump_receive,
                          jump_sample, jump_transmit, psi_all, trigger_decision)

from conftest import random_state


@pytest.fixture(scope="module")
def model(setup):
    return setup.model


@pytest.fixture(scope="module")
def tfs(setup):
    return setup.tfs


class TestTopology:
    def test_benchmark_degrees(self, model):
        topo = model.topology
        assert [topo.n_out(i) for i in range(8)] == [2, 3, 3, 2, 3, 2, 2, 3]
        assert topo.is_undirected and topo.is_connected
        assert topo.in_neighbors(0) == [1, 7]

    def test_laplacian(self, model):
        L = model.topology.laplacian()
        assert np.allclose(L.sum(axis=1), 0)
        assert np.linalg.eigvalsh(L)[1] == pytest.approx(0.7639, abs=1e-4)

    def test_rejects_self_loops_and_range(self):
        with pytest.raises(ValueError):
            GraphTopology(2, frozenset({(0, 0)}))
        with pytest.raises(ValueError):
            GraphTopology(2, frozenset({(0, 2)}))

    def test_directed_and_disconnected(self):
        g = GraphTopology(3, frozenset({(0, 1), (1, 2)}))
        assert not g.is_undirected
        h = GraphTopology.undirected(4, [(0, 1), (2, 3)])
        assert not h.is_connected


class TestState:
    def test_initial_is_valid(self, model, tfs):
        st = HybridState.initial(model, np.linspace(-1, 1, 8), eta0=0.5)
        st.validate(model.topology, tfs)
        assert np.array_equal(st.r[:, 0], st.x[:, 0])

    def test_invariant_violations(self, model, tfs):
        st = HybridState.initial(model, np.zeros(8))
        bad = st.copy(eta=-np.ones(8))
        with pytest.raises(InvariantError):
            bad.validate(model.topology)
        ell = st.ell.copy()
        ell[0, 1] = 1
        b = st.b.copy()
        b[0, 1] = 1
        with pytest.raises(InvariantError):
            st.copy(ell=ell, b=b).validate(model.topology)
        e = st.e.copy()
        e[0, 2, 0] = 1.0  # 0 -> 2 is not an edge
        with pytest.raises(InvariantError):
            st.copy(e=e).validate(model.topology)
        with pytest.raises(InvariantError):
            st.copy(ell=ell, tau=np.full(8, 0.05)).validate(model.topology, tfs)

    def test_estimates(self, model):
        rng = np.random.default_rng(0)
        st = random_state(model, rng)
        Yh = estimate_matrix(st, model)
        for i in range(8):
            row = estimates_in(st, i, model)
            assert np.array_equal(row, Yh[i])
            assert row[i, 0] == st.r[i, 0]
            for m in model.topology.in_neighbors(i):
                assert row[m, 0] == pytest.approx(st.x[m, 0] + st.e[m, i, 0])


class TestFlow:
    def test_piecewise_linear_oracle(self, model, tfs):
        rng = np.random.default_rng(1)
        st = random_state(model, rng)
        u = model.control(estimate_matrix(st, model))
        dt = 0.0037
        nxt = flow(st, dt, model, tfs)
        assert np.allclose(nxt.x[:, 0], st.x[:, 0] + dt * u, atol=1e-15)
        # estimates are held: e moves opposite to y on every edge
        out = model.topology.out_mask
        de = (nxt.e - st.e)[..., 0]
        assert np.allclose(de[out], -(dt * u)[np.nonzero(out)[0]], atol=1e-14)
        assert np.all(nxt.e[~out] == 0)
        assert np.allclose(nxt.tau, st.tau + dt) and np.allclose(nxt.sigma, st.sigma + dt)
        assert np.allclose(estimate_matrix(nxt, model), estimate_matrix(st, model), atol=1e-14)

    def test_eta_decays_without_input(self, model, tfs):
        st = HybridState.initial(model, np.full(8, 0.3), eta0=2.0)
        nxt = flow(st, 1.5, model, tfs)
        assert np.allclose(nxt.eta, 2.0 * np.exp(-0.05 * 1.5), rtol=1e-14)
        assert np.allclose(nxt.x, st.x)

    def test_psi_vector_matches_per_agent(self, model, tfs):
        st = random_state(model, np.random.default_rng(2))
        Yh = estimate_matrix(st, model)
        vec = psi_all(Yh, model, tfs)
        assert np.allclose(vec, [tf.psi(Yh[i]) for i, tf in enumerate(tfs)], rtol=1e-13)

    def test_batch_matches_single(self, model, tfs):
        st = random_state(model, np.random.default_rng(3))
        dts = np.array([0.0, 1e-4, 3.3e-3, 9e-3])
        fb = flow_batch(st, dts, model, tfs)
        for k, dt in enumerate(dts):
            one = flow(st, dt, model, tfs)
            assert np.allclose(fb.x[k], one.x, atol=1e-15)
            assert np.allclose(fb.e[k], one.e, atol=1e-15)
            assert np.allclose(fb.eta[k], one.eta, rtol=1e-14)

    def test_negative_duration(self, model, tfs):
        with pytest.raises(ValueError):
            flow(HybridState.initial(model, np.zeros(8)), -1.0, model, tfs)


class TestJumps:
    def ready(self, model, rng, agent=1):
        st = random_state(model, rng, tau=0.08, sigma=0.005)
        return st

    def test_transmit(self, model, tfs):
        rng = np.random.default_rng(4)
        st = self.ready(model, rng)
        i = 1
        post = jump_transmit(st, i, tfs, model)
        assert post.tau[i] == 0 and post.sigma[i] == 0
        assert post.r[i, 0] == st.x[i, 0]
        assert np.array_equal(post.ell[i].astype(bool), model.topology.out_mask[i])
        assert post.eta[i] >= st.eta[i]
        assert np.array_equal(post.x, st.x)
        # errors only change through flushed packets
        assert np.array_equal(post.e[i], st.e[i])

    def test_transmit_preconditions(self, model, tfs):
        rng = np.random.default_rng(5)
        st = self.ready(model, rng)
        with pytest.raises(ProtocolError):
            jump_transmit(st.copy(sigma=np.full(8, 1e-4)), 0, tfs, model)
        with pytest.raises(ProtocolError):
            jump_transmit(st.copy(tau=np.full(8, 0.01)), 0, tfs, model)
        ell = st.ell.copy()
        ell[0, 1] = 1
        with pytest.raises(ProtocolError):
            jump_transmit(st.copy(ell=ell), 0, tfs, model)

    def test_sample_flushes_buffered(self, model, tfs):
        rng = np.random.default_rng(6)
        st = self.ready(model, rng)
        b = st.b.copy()
        b[0, 1] = 1  # 0's packet waits at 1
        st = st.copy(b=b)
        post = jump_sample(st, 1, tfs, model)
        assert post.b[0, 1] == 0
        assert post.e[0, 1, 0] == pytest.approx(st.r[0, 0] - st.x[0, 0])
        assert post.sigma[1] == 0 and post.tau[1] == st.tau[1]
        assert post.eta[1] <= st.eta[1]

    def test_sample_before_miet_keeps_eta(self, model, tfs):
        st = random_state(model, np.random.default_rng(7), tau=0.02, sigma=0.004)
        post = jump_sample(st, 2, tfs, model)
        assert post.eta[2] == st.eta[2]

    def test_receive(self, model):
        st = HybridState.initial(model, np.zeros(8))
        with pytest.raises(ProtocolError):
            jump_receive(st, 0, 1)
        ell = st.ell.copy()
        ell[0, 1] = 1
        post = jump_receive(st.copy(ell=ell), 0, 1)
        assert post.ell[0, 1] == 0 and post.b[0, 1] == 1

    def test_trigger_decision(self, model, tfs):
        st = random_state(model, np.random.default_rng(8), tau=0.02, sigma=0.004)
        assert not trigger_decision(st, 0, tfs, model)
        late = st.copy(tau=np.full(8, 0.09), eta=np.zeros(8))
        # eta = 0 and nu <= 0: ties transmit
        assert trigger_decision(late, 0, tfs, model)
        rich = late.copy(eta=np.full(8, 1e6))
        assert not trigger_decision(rich, 0, tfs, model)
        ell = late.ell.copy()
        ell[0, 1] = 1
        with pytest.raises(ProtocolError):
            trigger_decision(late.copy(ell=ell), 0, tfs, model)
