import math

import numpy as np
import pytest

from alchemist import client, layout
from alchemist.errors import (
    DimensionMismatchError,
    InvalidActionError,
    InvalidArgumentError,
    NotReadyError,
    UnknownFunctionError,
)

from conftest import start_gateway


@pytest.fixture
def session(gateway):
    with client.connect(gateway.host, gateway.port) as sess:
        sess.request_workers(4)
        sess.load_library("testlib")
        yield sess


def svd_via_session(sess, matrix, k):
    handle = sess.send_matrix(matrix)
    u_h, s_h, v_h = sess.run("testlib", "truncated_svd", [handle, k])
    return sess.fetch_matrix(u_h), sess.fetch_matrix(s_h).ravel(), sess.fetch_matrix(v_h)


class TestTruncatedSvd:
    def test_diagonal_matrix(self, session):
        u, s, v = svd_via_session(session, np.diag([3.0, 2.0, 1.0]), 2)
        np.testing.assert_allclose(s, [3.0, 2.0], atol=1e-12)
        np.testing.assert_allclose(u, np.eye(3)[:, :2], atol=1e-10)
        np.testing.assert_allclose(v, np.eye(3)[:, :2], atol=1e-10)

    def test_against_dense_oracle(self, session):
        rng = np.random.default_rng(12345)
        a = rng.standard_normal((200, 100))
        u, s, v = svd_via_session(session, a, 10)
        ref = np.linalg.svd(a, compute_uv=False)[:10]
        assert np.max(np.abs(s - ref) / ref) < 1e-8
        assert u.shape == (200, 10) and v.shape == (100, 10)

    def test_reconstruction_error_near_optimal(self, session):
        rng = np.random.default_rng(99)
        a = rng.standard_normal((60, 40))
        k = 7
        u, s, v = svd_via_session(session, a, k)
        uo, so, vto = np.linalg.svd(a, full_matrices=False)
        best = np.linalg.norm(a - (uo[:, :k] * so[:k]) @ vto[:k])
        ours = np.linalg.norm(a - (u * s) @ v.T)
        assert ours <= best * (1 + 1e-6)

    def test_orthonormal_factors(self, session):
        rng = np.random.default_rng(5)
        u, s, v = svd_via_session(session, rng.standard_normal((50, 30)), 6)
        np.testing.assert_allclose(u.T @ u, np.eye(6), atol=1e-8)
        np.testing.assert_allclose(v.T @ v, np.eye(6), atol=1e-8)
        assert np.all(s[:-1] >= s[1:]) and np.all(s >= 0)

    def test_sign_canonicalization(self, session):
        rng = np.random.default_rng(31)
        _, _, v = svd_via_session(session, rng.standard_normal((40, 25)), 5)
        for col in v.T:
            assert col[np.argmax(np.abs(col))] >= 0

    def test_worker_count_independence(self, gateway):
        rng = np.random.default_rng(2026)
        a = rng.standard_normal((80, 50))
        results = []
        for workers in (1, 2, 3, 4):
            with client.connect(gateway.host, gateway.port) as sess:
                sess.request_workers(workers)
                sess.load_library("testlib")
                results.append(svd_via_session(sess, a, 8)[1])
        for other in results[1:]:
            np.testing.assert_allclose(other, results[0], rtol=1e-8)

    def test_nondefault_layout_input(self, session):
        rng = np.random.default_rng(8)
        a = rng.standard_normal((30, 20))
        handle = session.send_matrix(a, layout.STAR_VC)
        _, s_h, _ = session.run("testlib", "truncated_svd", [handle, 4])
        ref = np.linalg.svd(a, compute_uv=False)[:4]
        np.testing.assert_allclose(session.fetch_matrix(s_h).ravel(), ref, rtol=1e-8)

    def test_k_out_of_range(self, session):
        handle = session.send_matrix(np.ones((5, 4)))
        with pytest.raises(InvalidArgumentError):
            session.run("testlib", "truncated_svd", [handle, 5])
        with pytest.raises(InvalidArgumentError):
            session.run("testlib", "truncated_svd", [handle, 0])

    def test_incomplete_handle_rejected(self, session):
        handle = session.create_matrix(6, 6)
        with pytest.raises(NotReadyError):
            session.run("testlib", "truncated_svd", [handle, 2])

    def test_unknown_function(self, session):
        with pytest.raises(UnknownFunctionError):
            session.run("testlib", "no_such_fn", [])


class TestMultiply:
    def test_identity(self, session):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((9, 9))
        ha = session.send_matrix(a)
        hi = session.send_matrix(np.eye(9))
        (hc,) = session.run("testlib", "multiply", [ha, hi])
        np.testing.assert_array_equal(session.fetch_matrix(hc), a)

    def test_against_triple_loop_oracle(self, session):
        rng = np.random.default_rng(17)
        a = rng.standard_normal((30, 20))
        b = rng.standard_normal((20, 10))
        (hc,) = session.run(
            "testlib", "multiply", [session.send_matrix(a), session.send_matrix(b)]
        )
        got = session.fetch_matrix(hc)
        expected = np.zeros((30, 10))
        for i in range(30):
            for j in range(10):
                acc = 0.0
                for t in range(20):
                    acc += a[i, t] * b[t, j]
                expected[i, j] = acc
        assert np.max(np.abs(got - expected)) <= 1e-10
        assert (hc.m, hc.n) == (30, 10)

    def test_cross_layout_inputs(self, session):
        rng = np.random.default_rng(21)
        a = rng.standard_normal((12, 8))
        b = rng.standard_normal((8, 6))
        ha = session.send_matrix(a, layout.MC_MR)
        hb = session.send_matrix(b, layout.STAR_VC)
        (hc,) = session.run("testlib", "multiply", [ha, hb])
        assert np.max(np.abs(session.fetch_matrix(hc) - a @ b)) <= 1e-10

    def test_dimension_mismatch(self, session):
        ha = session.send_matrix(np.ones((4, 3)))
        hb = session.send_matrix(np.ones((4, 2)))
        with pytest.raises(DimensionMismatchError):
            session.run("testlib", "multiply", [ha, hb])

    def test_wrong_arity_and_types(self, session):
        ha = session.send_matrix(np.ones((2, 2)))
        with pytest.raises(InvalidArgumentError):
            session.run("testlib", "multiply", [ha])
        with pytest.raises(InvalidArgumentError):
            session.run("testlib", "multiply", [ha, 3])


class TestSimulator:
    def test_reset_defaults(self, session):
        assert session.run("testlib", "reset", []) == [0.0]
        assert session.run("testlib", "get_score", []) == [-1.0]
        assert session.run("testlib", "get_state", []) == [0.0]

    def test_ten_constant_steps_reach_target(self, session):
        session.run("testlib", "reset", [])
        for _ in range(10):
            state, score = session.run("testlib", "step", [0.1])
        assert state == 1.0
        assert score == 0.0

    def test_action_clamped(self, session):
        session.run("testlib", "reset", [])
        state, _ = session.run("testlib", "step", [5.0])
        assert state == 0.1
        state, _ = session.run("testlib", "step", [-99.0])
        assert state == 0.0

    def test_nonfinite_action_rejected(self, session):
        session.run("testlib", "reset", [])
        with pytest.raises(InvalidActionError):
            session.run("testlib", "step", [math.nan])
        with pytest.raises(InvalidActionError):
            session.run("testlib", "step", [math.inf])

    def test_deterministic_traces(self, session):
        actions = [0.03, -0.2, 0.1, 0.07, 5.0, -0.01]
        traces = []
        for _ in range(2):
            session.run("testlib", "reset", [])
            traces.append([tuple(session.run("testlib", "step", [a])) for a in actions])
        assert traces[0] == traces[1]

    def test_greedy_policy_improves_and_converges(self, session):
        session.run("testlib", "reset", [])
        scores = []
        state = 0.0
        for _ in range(12):
            action = max(-0.1, min(0.1, 1.0 - state))
            state, score = session.run("testlib", "step", [action])
            scores.append(score)
        assert all(b >= a for a, b in zip(scores, scores[1:]))
        assert scores[9] == 0.0
        assert all(s < 0 for s in scores[:9])

    def test_sessions_have_independent_simulators(self, gateway):
        with client.connect(gateway.host, gateway.port) as one:
            with client.connect(gateway.host, gateway.port) as two:
                for sess in (one, two):
                    sess.request_workers(1)
                    sess.load_library("testlib")
                    sess.run("testlib", "reset", [])
                one.run("testlib", "step", [0.1])
                assert two.run("testlib", "get_state", []) == [0.0]
                assert one.run("testlib", "get_state", []) == [0.1]
