"""Channel tests: acquisition traces, collision formulas, message ordering."""

import numpy as np
import pytest

from qmarl import channel as ch


def cfg(n_c=3, t_q=6, t_m=2):
    return ch.RoundConfig.for_capacity(n_c, slots_query=t_q, slots_per_message=t_m)


def submissions_for(agents):
    return {a: (np.full(4, float(a)), 1.0) for a in agents}


def prev_log_with_single_idle(n_slots, idle_slot, skip=()):
    """Fabricate a previous round where only idle_slot is selectable."""
    log = ch.RoundLog.empty(n_slots)
    dummy = 1000
    for s in range(1, n_slots + 1):
        if s != idle_slot and s not in skip:
            log.senders_by_slot[s - 1] = [dummy]
            dummy += 1
    return log


def test_round_config_derived_quantities():
    c = ch.RoundConfig(slots_total=20, slots_query=11, slots_per_message=3)
    assert c.slots_message == 9
    assert c.capacity == 3
    c2 = ch.RoundConfig.for_capacity(5, slots_query=11, slots_per_message=3)
    assert c2.slots_total == 26 and c2.capacity == 5


def test_round_config_validation():
    with pytest.raises(ValueError):
        ch.RoundConfig(slots_total=5, slots_query=5)
    with pytest.raises(ValueError):
        ch.RoundConfig(slots_total=8, slots_query=2, slots_per_message=0)


def test_query_packet_wire_layout():
    pkt = ch.QueryPacket(sender=3, query=np.arange(16.0), distance=2.5, ack=7)
    raw = pkt.to_bytes()
    assert len(raw) == 1 + 4 + 4 * 16
    assert raw[0] == 7
    assert np.frombuffer(raw[1:5], dtype="<f4")[0] == np.float32(2.5)
    np.testing.assert_array_equal(
        np.frombuffer(raw[5:], dtype="<f4"), np.arange(16, dtype=np.float32)
    )
    assert len(ch.message_payload_bytes(np.zeros(48))) == 4 * 48


def test_select_idle_slot_single_choice():
    prev = prev_log_with_single_idle(6, idle_slot=4)
    rng = np.random.default_rng(0)
    for _ in range(10):
        assert ch.select_idle_slot(prev, rng) == 4


def test_select_idle_slot_uniform():
    prev = ch.RoundLog.empty(8)
    rng = np.random.default_rng(1)
    n = 100_000
    picks = np.array([ch.select_idle_slot(prev, rng) for _ in range(n)])
    freqs = np.bincount(picks, minlength=9)[1:] / n
    sigma = np.sqrt((1 / 8) * (7 / 8) / n)
    assert np.abs(freqs - 1 / 8).max() < 3 * sigma


def test_collided_slot_is_selectable_again():
    log = ch.RoundLog.empty(4)
    log.senders_by_slot[1] = [5, 6]  # collision in slot 2
    log.senders_by_slot[2] = [7]  # success in slot 3
    assert log.outcome(2) == "collision"
    assert 2 in log.selectable_slots()
    assert 3 not in log.selectable_slots()


def test_select_idle_slot_empty_pool_errors():
    prev = prev_log_with_single_idle(3, idle_slot=0)  # every slot successful
    with pytest.raises(RuntimeError):
        ch.select_idle_slot(prev, np.random.default_rng(0))


def test_pending_agent_confirmed_by_end_of_phase_ack():
    # confirmed agent holds slot 2; the only selectable slot (5) is later,
    # so only the end-of-phase ACK can confirm the newcomer - this round
    c = cfg(t_q=6)
    chan = ch.QueryChannel(c, np.random.default_rng(0))
    chan.add_agent(1)
    chan.states[1].confirmed = True
    chan.states[1].assigned_slot = 2
    chan.add_agent(3)
    chan.prev_log = prev_log_with_single_idle(6, idle_slot=5, skip=(2,))
    chan.prev_log.senders_by_slot[1] = [1]  # slot 2 was agent 1's success
    log = chan.run_query_phase(submissions_for([1, 3]))
    assert [p.sender for p in log.delivered] == [1, 3]
    assert log.delivered[0].ack == 0  # agent 1's packet cannot ack slot 5
    assert log.delivered[1].ack == 2
    assert log.end_ack == 5
    assert chan.states[3].confirmed and chan.states[3].assigned_slot == 5


def test_lone_agent_first_round_stays_unconfirmed():
    c = cfg()
    chan = ch.QueryChannel(c, np.random.default_rng(2))
    chan.add_agent(0)
    log = chan.run_query_phase(submissions_for([0]))
    assert len(log.delivered) == 1
    assert log.delivered[0].ack == 0
    assert log.end_ack == 0
    assert not chan.states[0].confirmed


def test_two_pending_agents_same_slot_collide():
    c = cfg(t_q=5)
    chan = ch.QueryChannel(c, np.random.default_rng(3))
    chan.add_agent(0)
    chan.add_agent(1)
    chan.prev_log = prev_log_with_single_idle(5, idle_slot=3)
    log = chan.run_query_phase(submissions_for([0, 1]))
    assert log.outcome(3) == "collision"
    assert not log.delivered
    assert not chan.states[0].confirmed and not chan.states[1].confirmed
    assert 3 in log.selectable_slots()  # eligible again next round


def test_all_successful_senders_get_acked_when_two_or_more():
    # whenever >= 2 queries get through, the ACK chain plus the end-of-phase
    # ACK covers every one of them
    rng = np.random.default_rng(4)
    for trial in range(200):
        c = cfg(t_q=8)
        chan = ch.QueryChannel(c, np.random.default_rng(trial))
        agents = list(range(rng.integers(2, 7)))
        for a in agents:
            chan.add_agent(a)
        log = chan.run_query_phase(submissions_for(agents))
        delivered = [p.sender for p in log.delivered]
        if len(delivered) >= 2:
            for a in delivered:
                assert chan.states[a].confirmed, f"trial {trial}: {a} unconfirmed"


def test_slot_stability_and_no_double_booking():
    rng = np.random.default_rng(5)
    c = cfg(t_q=7)
    chan = ch.QueryChannel(c, rng)
    present = set()
    next_id = 0
    fixed_slots = {}
    for _ in range(400):
        if present and rng.random() < 0.15:
            gone = int(rng.choice(sorted(present)))
            present.remove(gone)
            chan.remove_agent(gone)
            fixed_slots.pop(gone, None)
        if len(present) < 6 and rng.random() < 0.5:
            chan.add_agent(next_id)
            present.add(next_id)
            next_id += 1
        chan.run_query_phase(submissions_for(sorted(present)))
        confirmed = {
            a: chan.states[a].assigned_slot for a in chan.confirmed_agents()
        }
        for a, slot in confirmed.items():
            if a in fixed_slots:
                assert slot == fixed_slots[a], "confirmed agent changed slot"
            fixed_slots[a] = slot
        assert len(set(confirmed.values())) == len(confirmed), "double booking"


def test_collision_probability_values():
    assert ch.collision_probability(5, 1) == 0.0
    assert ch.collision_probability(2, 2) == 0.5
    assert abs(ch.collision_probability(10, 3) - 0.19) < 1e-12
    with pytest.raises(ValueError):
        ch.collision_probability(3, 4)


def test_collision_probability_monte_carlo():
    rng = np.random.default_rng(6)
    for t_idle, n_new in [(2, 2), (5, 5), (10, 3)]:
        emp = ch.simulate_first_attempt(t_idle, n_new, trials=100_000, rng=rng)
        assert abs(emp - ch.collision_probability(t_idle, n_new)) < 0.005


def test_collision_probability_upper_bound_grid():
    # strict bound 1 - 1/e over every feasible pair up to 1000
    bound = 1.0 - 1.0 / np.e
    t = np.arange(1, 1001, dtype=np.float64)
    for n_new in range(1, 1001):
        feasible = t[t >= n_new]
        p = 1.0 - ((feasible - 1) / feasible) ** (n_new - 1)
        assert (p < bound).all()


def test_schedule_centralized_modes():
    c = cfg(n_c=2)
    imps = {1: 0.5, 2: 3.0, 3: 1.0}
    sched = ch.schedule_centralized(imps, c)
    assert sched.senders == (2, 3)
    all_in = ch.schedule_centralized({1: 0.1}, cfg(n_c=5))
    assert all_in.senders == (1,)
    r1 = ch.schedule_centralized(imps, c, policy="random", rng=np.random.default_rng(7))
    r2 = ch.schedule_centralized(imps, c, policy="random", rng=np.random.default_rng(7))
    assert r1.senders == r2.senders and len(r1.senders) == 2


def test_csma_contend_basics():
    rng = np.random.default_rng(8)
    succ, coll = ch.csma_contend([4], windows=3, persistence=1.0, rng=rng)
    assert succ == [4] and coll == 0
    succ, coll = ch.csma_contend([1, 2], windows=5, persistence=1.0, rng=rng)
    assert succ == [] and coll == 5  # both always transmit, always collide
    with pytest.raises(ValueError):
        ch.csma_contend([1], 1, 0.0, rng)


def test_csma_contend_success_rate():
    # two contenders at p=0.5: lone-transmitter probability is 2p(1-p)=0.5
    rng = np.random.default_rng(9)
    wins = 0
    n = 100_000
    for _ in range(n):
        succ, _ = ch.csma_contend([1, 2], windows=1, persistence=0.5, rng=rng)
        wins += len(succ)
    assert abs(wins / n - 0.5) < 0.01


def test_message_phase_orders_by_importance():
    c = cfg(n_c=3)
    imps = {1: 0.2, 2: 5.0, 3: 1.0, 4: 3.0, 5: 0.9}
    res = ch.run_message_phase_decentralized(
        imps, [], c, persistence=0.5, rng=np.random.default_rng(10)
    )
    assert res.scheduled == [2, 4, 3]
    assert res.csma_successes == []


def test_message_phase_all_confirmed_fit():
    c = cfg(n_c=4)
    res = ch.run_message_phase_decentralized(
        {1: 0.1, 2: 0.2}, [], c, 0.5, np.random.default_rng(11)
    )
    assert set(res.scheduled) == {1, 2}
    assert res.csma_collision_windows == 0


def test_message_phase_csma_fill_pure_contention():
    c = cfg(n_c=2)
    res = ch.run_message_phase_decentralized(
        {}, [7, 8], c, persistence=1.0, rng=np.random.default_rng(12)
    )
    assert res.scheduled == []
    assert res.csma_collision_windows == 2  # certain collision each window


def test_importance_table_is_common_knowledge():
    rng = np.random.default_rng(13)
    delivered = [
        ch.QueryPacket(sender=i, query=rng.normal(size=4), distance=float(i + 1))
        for i in range(4)
    ]
    t1 = ch.importance_table(delivered, [0, 1, 2])
    t2 = ch.importance_table(delivered, [0, 1, 2])
    assert t1 == t2
    # sender with no delivered query cannot be scheduled
    with pytest.raises(ValueError):
        ch.importance_table(delivered, [9])


def test_protocol_rounds_no_scheduled_collisions():
    stats = ch.simulate_protocol_rounds(
        cfg(n_c=3, t_q=8), n_rounds=2000, rng=np.random.default_rng(14)
    )
    assert stats["scheduled_collisions"] == 0
    assert stats["schedule_mismatches"] == 0
    assert stats["scheduled_messages"] > 0
    assert stats["confirmations"] > 0
