"""Importance-calculus tests: factorization, first-order convergence, top-k."""

import numpy as np
import pytest

from qmarl import importance as imp
from qmarl.model import Model, ModelConfig, aggregate, policy_message_jacobian


def receiver_context(seed):
    """A receiver (h, q) with one peer sender; f maps the sender's full
    message to the receiver's policy output."""
    cfg = ModelConfig(obs_size=6, hidden=8, s_q=3, s_m=8, s_m_prime=5, trunk=6)
    model = Model.build(cfg, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1000)
    h = model.encode_hidden(rng.normal(size=6))
    q_recv = model.make_query(h)
    q_send = rng.normal(size=3)

    def f(m):
        c = aggregate(q_recv, [(q_send, m)], msg_size=8)
        return model.act(h, c)[0]

    return model, h, q_recv, q_send, f


def test_exact_zero_for_equal_messages():
    _, _, _, _, f = receiver_context(0)
    m = np.random.default_rng(1).normal(size=8)
    assert imp.importance_exact(f, m, m.copy()) == 0.0


def test_exact_zero_for_identical_outputs():
    f = lambda m: np.array([0.6, 0.4])
    assert imp.importance_exact(f, np.ones(4), np.zeros(4)) == 0.0


def test_exact_matches_two_forward_passes():
    _, _, _, _, f = receiver_context(2)
    rng = np.random.default_rng(3)
    m1, m2 = rng.normal(size=8), rng.normal(size=8)
    expected = np.linalg.norm(f(m1) - f(m2))
    assert abs(imp.importance_exact(f, m1, m2) - expected) < 1e-15


def test_gradient_zero_cases_and_linearity():
    rng = np.random.default_rng(4)
    df = rng.normal(size=(2, 6))
    q_r, q_s = rng.normal(size=3), rng.normal(size=3)
    m, m2 = rng.normal(size=6), rng.normal(size=6)
    assert imp.importance_gradient(df, q_r, q_s, m, m.copy()) == 0.0
    assert imp.importance_gradient(df, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), m, m2) == 0.0
    full = imp.importance_gradient(df, q_r, q_s, m, m2)
    half = imp.importance_gradient(df, q_r, q_s, m, m + 0.5 * (m2 - m))
    assert abs(half - 0.5 * full) < 1e-12


def test_gradient_first_order_convergence():
    # halving the perturbation should (on average) better than halve the
    # relative error of the first-order form against the exact measure
    ratios = []
    for seed in range(100):
        model, h, q_recv, q_send, f = receiver_context(seed)
        rng = np.random.default_rng(seed + 5000)
        m = rng.normal(size=8)
        u = rng.normal(size=8)
        u /= np.linalg.norm(u)
        c0 = aggregate(q_recv, [(q_send, m)], msg_size=8)
        jac = policy_message_jacobian(model, h, c0)

        def rel_err(eps):
            m_alt = m + eps * u
            exact = imp.importance_exact(f, m, m_alt)
            approx = imp.importance_gradient(jac, q_recv, q_send, m, m_alt)
            assert exact > 1e-12
            return abs(exact - approx) / exact

        ratios.append(rel_err(5e-3) / max(rel_err(1e-2), 1e-14))
    assert np.mean(ratios) <= 0.6, f"mean ratio {np.mean(ratios):.3f}"


def test_approx_factorization_exact():
    # |q_r . q_s| * d equals the literal vector form ||(q_r . q_s)(m - m_alt)||
    rng = np.random.default_rng(6)
    for _ in range(200):
        q_r, q_s = rng.normal(size=4), rng.normal(size=4)
        m, m_alt = rng.normal(size=7), rng.normal(size=7)
        d = float(np.linalg.norm(m - m_alt))
        literal = np.linalg.norm(float(np.dot(q_r, q_s)) * (m - m_alt))
        assert abs(imp.importance_approx(q_r, q_s, d) - literal) < 1e-12


def test_approx_examples():
    assert imp.importance_approx(np.array([1.0, 0]), np.array([0, 1.0]), 5.0) == 0.0
    assert imp.importance_approx(np.array([1.0, 0]), np.array([1.0, 0]), 2.0) == 2.0
    assert abs(imp.importance_approx(np.array([2.0, 1]), np.array([1.0, 1]), 2.0) - 6.0) < 1e-12


def test_approx_rejects_negative_distance():
    with pytest.raises(ValueError):
        imp.importance_approx(np.ones(2), np.ones(2), -1.0)


def test_approx_scale_covariance():
    rng = np.random.default_rng(7)
    q_r, q_s = rng.normal(size=3), rng.normal(size=3)
    base = imp.importance_approx(q_r, q_s, 1.7)
    assert abs(imp.importance_approx(q_r, q_s, 3.4) - 2 * base) < 1e-12


def test_message_distance_modes():
    assert imp.message_distance(np.array([3.0, 4.0]), None, "influence") == 5.0
    m = np.array([1.0, -2.0])
    assert imp.message_distance(m, m.copy(), "difference") == 0.0
    # absent cache falls back to the zero vector: same as influence
    assert imp.message_distance(m, None, "difference") == imp.message_distance(
        m, None, "influence"
    )
    with pytest.raises(ValueError):
        imp.message_distance(m, None, "weird")


def test_agent_importance_cases():
    q_s = np.array([1.0, 0.0])
    assert imp.agent_importance(q_s, [np.array([0.0, 1.0])], 5.0) == 0.0
    assert imp.agent_importance(q_s, [np.array([2.0, 1.0])], 0.0) == 0.0
    assert imp.agent_importance(q_s, [], 3.0) == 0.0


def test_agent_importance_matches_bruteforce_mean():
    rng = np.random.default_rng(8)
    q_s = rng.normal(size=3)
    receivers = [rng.normal(size=3) for _ in range(3)]
    d = 2.0
    expected = np.mean([abs(np.dot(q, q_s)) * d for q in receivers])
    assert abs(imp.agent_importance(q_s, receivers, d) - expected) < 1e-12


def test_importance_record_aggregate_is_mean():
    rng = np.random.default_rng(9)
    q_s = rng.normal(size=3)
    queries = {j: rng.normal(size=3) for j in range(4)}
    rec = imp.ImportanceRecord.build(1, q_s, queries, d=1.3)
    assert 1 not in rec.per_receiver
    assert abs(rec.aggregate - np.mean(list(rec.per_receiver.values()))) < 1e-12
    assert all(v >= 0 for v in rec.per_receiver.values())


def test_select_topk_examples():
    sched = imp.select_topk({"a": 3.0, "b": 5.0, "c": 4.0}, 2, tiebreak={"a": 0, "b": 1, "c": 2})
    assert sched.senders == ("b", "c")
    assert imp.select_topk({1: 1.0, 2: 2.0}, 5).senders == (2, 1)
    assert imp.select_topk({1: 1.0, 2: 2.0}, 0).senders == ()


def test_select_topk_tiebreak_by_slot():
    sched = imp.select_topk({10: 1.0, 20: 1.0, 30: 1.0}, 2, tiebreak={10: 9, 20: 2, 30: 5})
    assert sched.senders == (20, 30)


def test_select_topk_matches_full_sort_prefix():
    rng = np.random.default_rng(10)
    for _ in range(100):
        n = int(rng.integers(1, 12))
        vals = {i: float(rng.normal()) for i in range(n)}
        k = int(rng.integers(0, n + 1))
        expected = tuple(sorted(vals, key=lambda a: (-vals[a], a))[:k])
        assert imp.select_topk(vals, k).senders == expected


def test_select_topk_ranking_invariance_under_positive_scaling():
    rng = np.random.default_rng(11)
    vals = {i: float(rng.random()) for i in range(8)}
    base = imp.select_topk(vals, 4).senders
    for scale in (0.01, 7.3, 1e6):
        scaled = {k: scale * v for k, v in vals.items()}
        assert imp.select_topk(scaled, 4).senders == base
