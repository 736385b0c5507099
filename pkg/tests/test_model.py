"""Model block tests: fixtures with known algebra plus aggregation properties."""

import numpy as np
import pytest

from qmarl import nn
from qmarl.model import Model, ModelConfig, aggregate


def small_config(variant="generation"):
    if variant == "commnet":
        return ModelConfig(
            obs_size=6, hidden=8, s_q=0, s_m=8, s_m_prime=0, trunk=5, variant=variant
        )
    return ModelConfig(
        obs_size=6, hidden=8, s_q=3, s_m=8, s_m_prime=5, trunk=5, variant=variant
    )


def zero_bias_identity(n, activation="identity"):
    return nn.Mlp([nn.DenseLayer(np.eye(n), np.zeros(n), activation)])


def test_config_validates_generation_split():
    with pytest.raises(ValueError):
        ModelConfig(obs_size=4, hidden=8, s_q=3, s_m=8, s_m_prime=4, trunk=4)


def test_config_commnet_requires_hidden_message_match():
    with pytest.raises(ValueError):
        ModelConfig(
            obs_size=4, hidden=8, s_q=0, s_m=6, s_m_prime=0, trunk=4, variant="commnet"
        )


def test_encode_hidden_zero_obs_zero_fixture():
    model = Model.build(small_config(), np.random.default_rng(0))
    model.nets["encoder"] = nn.Mlp(
        [nn.DenseLayer(np.eye(8, 6), np.zeros(8), "identity")]
    )
    h = model.encode_hidden(np.zeros(6))
    assert not h.any()


def test_encode_hidden_deterministic_and_matches_algebra():
    model = Model.build(small_config(), np.random.default_rng(1))
    obs = np.random.default_rng(2).normal(size=6)
    h1 = model.encode_hidden(obs)
    h2 = model.encode_hidden(obs)
    np.testing.assert_array_equal(h1, h2)
    w = model.nets["encoder"].layers[0].weights
    b = model.nets["encoder"].layers[0].bias
    np.testing.assert_allclose(h1, np.tanh(w @ obs + b), atol=1e-12)


def test_query_message_shapes_and_zero_fixture():
    cfg = small_config()
    model = Model.build(cfg, np.random.default_rng(3))
    h = np.random.default_rng(4).normal(size=cfg.hidden)
    assert model.make_query(h).shape == (cfg.s_q,)
    assert model.make_message(h).shape == (cfg.s_m_prime,)
    # zero bias nets map zero hidden state to zero outputs
    assert not model.make_query(np.zeros(cfg.hidden)).any()
    assert not model.make_message(np.zeros(cfg.hidden)).any()


def test_query_message_match_recomputation():
    cfg = small_config()
    model = Model.build(cfg, np.random.default_rng(5))
    h = np.random.default_rng(6).normal(size=cfg.hidden)
    wq = model.nets["query"].layers[0].weights
    np.testing.assert_allclose(model.make_query(h), np.tanh(wq @ h), atol=1e-12)
    wm = model.nets["message"].layers[0].weights
    np.testing.assert_allclose(model.make_message(h), np.tanh(wm @ h), atol=1e-12)


def test_commnet_message_is_hidden_state():
    model = Model.build(small_config("commnet"), np.random.default_rng(7))
    h = np.arange(8.0)
    np.testing.assert_array_equal(model.make_message(h), h)
    with pytest.raises(ValueError):
        model.make_query(h)


def test_reconstruct_passthrough_in_plain_variant():
    model = Model.build(small_config("plain"), np.random.default_rng(8))
    m = np.arange(8.0)
    np.testing.assert_array_equal(model.reconstruct_message(None, m), m)
    with pytest.raises(ValueError):
        model.reconstruct_message(None, np.zeros(5))


def test_reconstruct_zero_inputs_zero_bias():
    model = Model.build(small_config(), np.random.default_rng(9))
    out = model.reconstruct_message(np.zeros(3), np.zeros(5))
    assert not out.any()  # tanh(W @ 0 + 0) = 0


def test_reconstruct_matches_recomputation():
    cfg = small_config()
    model = Model.build(cfg, np.random.default_rng(10))
    rng = np.random.default_rng(11)
    q, ms = rng.normal(size=3), rng.normal(size=5)
    w = model.nets["decoder"].layers[0].weights
    expected = np.tanh(w @ np.concatenate([q, ms]))
    np.testing.assert_allclose(model.reconstruct_message(q, ms), expected, atol=1e-12)


def test_aggregate_hand_example():
    # q_self=[1,1], peers {([1,0],[2,0]), ([0,1],[0,4])} -> ([2,0]+[0,4])/2
    c = aggregate(
        np.array([1.0, 1.0]),
        [
            (np.array([1.0, 0.0]), np.array([2.0, 0.0])),
            (np.array([0.0, 1.0]), np.array([0.0, 4.0])),
        ],
        msg_size=2,
    )
    np.testing.assert_allclose(c, [1.0, 2.0])


def test_aggregate_unit_weight_single_peer():
    c = aggregate(
        np.array([1.0, 0.0]),
        [(np.array([1.0, 0.0]), np.array([3.0, -2.0]))],
        msg_size=2,
    )
    np.testing.assert_allclose(c, [3.0, -2.0])


def test_aggregate_orthogonal_peer_contributes_zero():
    c = aggregate(
        np.array([1.0, 0.0]),
        [(np.array([0.0, 1.0]), np.array([9.0, 9.0]))],
        msg_size=2,
    )
    np.testing.assert_allclose(c, [0.0, 0.0])


def test_aggregate_empty_peers_is_zero_vector():
    c = aggregate(np.array([1.0, 1.0]), [], msg_size=4)
    np.testing.assert_array_equal(c, np.zeros(4))


def test_aggregate_linearity_in_messages():
    rng = np.random.default_rng(12)
    q_self = rng.normal(size=4)
    peers = [(rng.normal(size=4), rng.normal(size=6)) for _ in range(5)]
    c1 = aggregate(q_self, peers, msg_size=6)
    scaled = [(q, 2.5 * m) for q, m in peers]
    c2 = aggregate(q_self, scaled, msg_size=6)
    np.testing.assert_allclose(c2, 2.5 * c1, atol=1e-12)


def test_aggregate_matches_bruteforce_loop():
    rng = np.random.default_rng(13)
    for _ in range(20):
        n = rng.integers(1, 7)
        q_self = rng.normal(size=3)
        peers = [(rng.normal(size=3), rng.normal(size=5)) for _ in range(n)]
        expected = sum(np.dot(q_self, q) * m for q, m in peers) / n
        np.testing.assert_allclose(
            aggregate(q_self, peers, msg_size=5), expected, atol=1e-12
        )


def test_aggregate_mean_mode_is_arithmetic_mean():
    rng = np.random.default_rng(14)
    peers = [(rng.normal(size=3), rng.normal(size=5)) for _ in range(4)]
    expected = np.mean([m for _, m in peers], axis=0)
    got = aggregate(None, peers, msg_size=5, mean_mode=True)
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_commnet_pipeline_reproduces_hidden_state_mean():
    # pass-through messages equal to hidden states + mean aggregation
    model = Model.build(small_config("commnet"), np.random.default_rng(15))
    rng = np.random.default_rng(16)
    hs = [model.encode_hidden(rng.normal(size=6)) for _ in range(4)]
    msgs = [model.make_message(h) for h in hs]
    c0 = aggregate(None, [(None, m) for m in msgs[1:]], msg_size=8, mean_mode=True)
    np.testing.assert_allclose(c0, np.mean(hs[1:], axis=0), atol=1e-12)


def test_act_symmetric_logits_give_uniform_policy():
    model = Model.build(small_config(), np.random.default_rng(17))
    # zero weights in the policy head: logits are equal, softmax is uniform
    model.nets["policy"] = nn.Mlp(
        [nn.DenseLayer(np.zeros((2, 5)), np.zeros(2), "softmax")]
    )
    probs, _ = model.act(np.ones(8), np.ones(8))
    np.testing.assert_allclose(probs, [0.5, 0.5], atol=1e-12)


def test_act_probabilities_sum_to_one():
    model = Model.build(small_config(), np.random.default_rng(18))
    rng = np.random.default_rng(19)
    for _ in range(25):
        probs, value = model.act(rng.normal(size=8), rng.normal(size=8))
        assert abs(probs.sum() - 1.0) < 1e-9
        assert (probs >= 0).all()
        assert np.isfinite(value)


def test_act_matches_recomputation():
    cfg = small_config()
    model = Model.build(cfg, np.random.default_rng(20))
    rng = np.random.default_rng(21)
    h, c = rng.normal(size=8), rng.normal(size=8)
    wt = model.nets["trunk"].layers[0].weights
    t = np.tanh(wt @ np.concatenate([h, c]))
    wp = model.nets["policy"].layers[0].weights
    logits = wp @ t
    e = np.exp(logits - logits.max())
    probs, value = model.act(h, c)
    np.testing.assert_allclose(probs, e / e.sum(), atol=1e-12)
    wv = model.nets["value"].layers[0].weights
    assert abs(value - (wv @ t).item()) < 1e-12


def test_setting1_shape_audit():
    # full pipeline on the setting-1 sizes ends in a length-2 distribution
    cfg = ModelConfig(
        obs_size=65, hidden=64, s_q=16, s_m=64, s_m_prime=48, trunk=64
    )
    model = Model.build(cfg, np.random.default_rng(22))
    rng = np.random.default_rng(23)
    obs = (rng.random(65) < 0.05).astype(float)
    h = model.encode_hidden(obs)
    q = model.make_query(h)
    ms = model.make_message(h)
    assert q.shape == (16,) and ms.shape == (48,)
    m_full = model.reconstruct_message(q, ms)
    assert m_full.shape == (64,)
    c = aggregate(q, [(q, m_full)], msg_size=64)
    probs, value = model.act(h, c)
    assert probs.shape == (2,)
    assert abs(probs.sum() - 1.0) < 1e-9
