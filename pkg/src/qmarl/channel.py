"""Time-slotted channel for one round: query phase plus message phase.

The query phase implements decentralized slot acquisition. Confirmed agents
keep a fixed slot forever; newcomers pick uniformly among the slots that were
idle (or collided) in the previous round and keep retrying until some ACK
names their slot. ACKs ride inside query packets as a single byte holding the
index of the last collision-free query slot seen so far this round, and the
agent that receives the first such ACK closes the phase by announcing the
last collision-free slot of the round. Consequence: whenever two or more
queries get through in a round, every one of them is acknowledged.

The message phase is collision-free by construction for confirmed agents:
everyone hears the same delivered packets, computes the same importance
table, and therefore the same transmission order. Leftover capacity is
contended for by unconfirmed agents with p-persistent CSMA.

Everything is deterministic given (config, arrival pattern, rng).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .importance import Schedule, agent_importance, select_topk


@dataclass(frozen=True)
class RoundConfig:
    """Slot budget of one round: T total, T_Q for queries, t_m per message."""

    slots_total: int
    slots_query: int
    slots_per_query: int = 1
    slots_per_message: int = 1

    def __post_init__(self):
        if not self.slots_total > self.slots_query >= 1:
            raise ValueError("need slots_total > slots_query >= 1")
        if self.slots_per_message < 1:
            raise ValueError("a message takes at least one slot")
        if self.slots_per_query != 1:
            raise ValueError("the acquisition protocol assumes one slot per query")

    @property
    def slots_message(self) -> int:
        return self.slots_total - self.slots_query

    @property
    def capacity(self) -> int:
        """N_c: how many messages fit into the message phase."""
        return self.slots_message // self.slots_per_message

    @classmethod
    def for_capacity(cls, n_c: int, slots_query: int, slots_per_message: int) -> "RoundConfig":
        """The tight budget whose message phase fits exactly n_c messages."""
        return cls(
            slots_total=slots_query + n_c * slots_per_message,
            slots_query=slots_query,
            slots_per_message=slots_per_message,
        )


@dataclass
class QueryPacket:
    """One delivered query: payload plus the piggybacked ACK byte.

    Wire layout: ack u8, distance float32 LE, query elements float32 LE.
    """

    sender: int
    query: np.ndarray
    distance: float
    ack: int = 0

    def to_bytes(self) -> bytes:
        if self.distance < 0:
            raise ValueError("distance must be nonnegative")
        q32 = np.asarray(self.query, dtype="<f4")
        return struct.pack("<Bf", self.ack, self.distance) + q32.tobytes()


def message_payload_bytes(message: np.ndarray) -> bytes:
    """The message-phase payload: elements as float32 LE, 4 bytes each."""
    return np.asarray(message, dtype="<f4").tobytes()


@dataclass
class AgentCommState:
    """Per-agent acquisition state; confirmed agents never change slot."""

    agent: int
    assigned_slot: int | None = None
    confirmed: bool = False

    @property
    def pending(self) -> bool:
        return not self.confirmed


@dataclass
class RoundLog:
    """Channel-level outcome of one round, shared knowledge of every listener."""

    n_slots: int
    senders_by_slot: list[list[int]] = field(default_factory=list)
    delivered: list[QueryPacket] = field(default_factory=list)
    end_ack: int = 0
    message_senders: list[int] = field(default_factory=list)
    message_collisions: int = 0

    @classmethod
    def empty(cls, n_slots: int) -> "RoundLog":
        return cls(n_slots=n_slots, senders_by_slot=[[] for _ in range(n_slots)])

    def outcome(self, slot: int) -> str:
        senders = self.senders_by_slot[slot - 1]
        if not senders:
            return "idle"
        return "success" if len(senders) == 1 else "collision"

    def selectable_slots(self) -> list[int]:
        """Slots a newcomer may pick: idle or collided in this (previous) round."""
        return [s for s in range(1, self.n_slots + 1) if self.outcome(s) != "success"]

    @property
    def query_collisions(self) -> int:
        return sum(1 for s in self.senders_by_slot if len(s) >= 2)


def select_idle_slot(prev: RoundLog, rng: np.random.Generator) -> int:
    """Uniform pick among last round's idle/collided slots."""
    idle = prev.selectable_slots()
    if not idle:
        raise RuntimeError(
            "no idle query slot available: more newcomers than the phase can carry"
        )
    return int(rng.choice(idle))


def collision_probability(t_idle: int, n_new: int) -> float:
    """Closed-form chance that a newcomer's first slot pick collides."""
    if not t_idle >= n_new >= 1:
        raise ValueError("need t_idle >= n_new >= 1")
    return 1.0 - ((t_idle - 1) / t_idle) ** (n_new - 1)


def simulate_first_attempt(
    t_idle: int, n_new: int, trials: int, rng: np.random.Generator
) -> float:
    """Monte Carlo companion of collision_probability: empirical per-agent
    collision frequency when n_new newcomers pick among t_idle slots."""
    if not t_idle >= n_new >= 1:
        raise ValueError("need t_idle >= n_new >= 1")
    picks = rng.integers(0, t_idle, size=(trials, n_new))
    flat = picks + np.arange(trials)[:, None] * t_idle
    counts = np.bincount(flat.ravel(), minlength=trials * t_idle)
    collided = counts[flat] >= 2
    return float(collided.mean())


class QueryChannel:
    """Acquisition protocol state across rounds for one broadcast domain."""

    def __init__(self, config: RoundConfig, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        self.states: dict[int, AgentCommState] = {}
        self.prev_log: RoundLog = RoundLog.empty(config.slots_query)

    def add_agent(self, agent: int) -> None:
        if agent in self.states:
            raise ValueError(f"agent {agent} already present")
        self.states[agent] = AgentCommState(agent)

    def remove_agent(self, agent: int) -> None:
        # the freed slot shows idle next round and re-enters the pool by itself
        self.states.pop(agent)

    def confirmed_agents(self) -> list[int]:
        return sorted(a for a, s in self.states.items() if s.confirmed)

    def slot_index(self) -> dict[int, int]:
        """Tiebreak table for scheduling: confirmed agents' slot numbers."""
        return {
            a: s.assigned_slot
            for a, s in self.states.items()
            if s.confirmed and s.assigned_slot is not None
        }

    def run_query_phase(self, submissions: Mapping[int, tuple]) -> RoundLog:
        """One query phase: every present agent transmits (query, distance).

        Returns the round log with delivered packets; confirmation state is
        updated in place from the ACK rules.
        """
        if set(submissions) != set(self.states):
            raise ValueError("submissions must cover exactly the present agents")
        log = RoundLog.empty(self.config.slots_query)
        for agent in sorted(self.states):
            state = self.states[agent]
            slot = (
                state.assigned_slot
                if state.confirmed
                else select_idle_slot(self.prev_log, self.rng)
            )
            state.assigned_slot = slot
            log.senders_by_slot[slot - 1].append(agent)

        # walk slots in order, delivering lone transmissions with ACK bytes
        last_success = 0
        success_sender: dict[int, int] = {}
        for slot in range(1, self.config.slots_query + 1):
            senders = log.senders_by_slot[slot - 1]
            if len(senders) != 1:
                continue
            agent = senders[0]
            query, distance = submissions[agent]
            log.delivered.append(
                QueryPacket(sender=agent, query=query, distance=distance, ack=last_success)
            )
            success_sender[slot] = agent
            last_success = slot

        # end-of-phase ACK: emitted by the agent that received the first
        # in-packet ACK; names the round's last collision-free slot
        acked = {p.ack for p in log.delivered if p.ack != 0}
        if acked:
            log.end_ack = last_success
            acked.add(log.end_ack)

        for slot in acked:
            agent = success_sender.get(slot)
            if agent is not None:
                self.states[agent].confirmed = True
                self.states[agent].assigned_slot = slot

        self.prev_log = log
        return log


def importance_table(
    delivered: list[QueryPacket], senders: list[int]
) -> dict[int, float]:
    """Common-knowledge importance of each schedulable sender.

    Built purely from this round's delivered packets, so every listener
    (and every sender) computes the identical table: receivers are the
    delivered senders themselves, never a private undelivered query.
    """
    queries = {p.sender: p.query for p in delivered}
    distances = {p.sender: p.distance for p in delivered}
    table = {}
    for i in senders:
        if i not in queries:
            raise ValueError(f"sender {i} has no delivered query this round")
        receivers = [q for j, q in queries.items() if j != i]
        table[i] = agent_importance(queries[i], receivers, distances[i])
    return table


def schedule_centralized(
    importances: Mapping[int, float],
    config: RoundConfig,
    policy: str = "importance",
    rng: np.random.Generator | None = None,
    tiebreak: Mapping[int, int] | None = None,
) -> Schedule:
    """Top-N_c by importance, or the uniform random baseline subset."""
    if policy == "importance":
        return select_topk(importances, config.capacity, tiebreak)
    if policy == "random":
        agents = sorted(importances)
        k = min(config.capacity, len(agents))
        picked = rng.choice(len(agents), size=k, replace=False)
        return Schedule(
            senders=tuple(agents[i] for i in picked), capacity=config.capacity
        )
    raise ValueError(f"unknown scheduling policy {policy!r}")


@dataclass
class MessagePhaseResult:
    """Who got a message through, in transmission order."""

    scheduled: list[int]
    csma_successes: list[int]
    csma_collision_windows: int

    @property
    def senders(self) -> list[int]:
        return self.scheduled + self.csma_successes


def csma_contend(
    pending: list[int],
    windows: int,
    persistence: float,
    rng: np.random.Generator,
) -> tuple[list[int], int]:
    """p-persistent contention over message-sized windows.

    Each window, every still-pending sender transmits with the persistence
    probability; a lone transmitter succeeds and stops contending, any
    simultaneous transmitters all fail.
    """
    if not 0.0 < persistence <= 1.0:
        raise ValueError("persistence must be in (0, 1]")
    pending = list(pending)
    successes: list[int] = []
    collisions = 0
    for _ in range(windows):
        if not pending:
            break
        transmitters = [a for a in pending if rng.random() < persistence]
        if len(transmitters) == 1:
            successes.append(transmitters[0])
            pending.remove(transmitters[0])
        elif len(transmitters) >= 2:
            collisions += 1
    return successes, collisions


def run_message_phase_decentralized(
    confirmed_importances: Mapping[int, float],
    unconfirmed: list[int],
    config: RoundConfig,
    persistence: float,
    rng: np.random.Generator,
    tiebreak: Mapping[int, int] | None = None,
) -> MessagePhaseResult:
    """Importance-ordered transmissions, then CSMA over leftover capacity."""
    schedule = select_topk(confirmed_importances, config.capacity, tiebreak)
    scheduled = list(schedule.senders)
    leftovers = config.capacity - len(scheduled)
    csma_successes, collisions = csma_contend(unconfirmed, leftovers, persistence, rng)
    return MessagePhaseResult(
        scheduled=scheduled,
        csma_successes=csma_successes,
        csma_collision_windows=collisions,
    )


def simulate_protocol_rounds(
    config: RoundConfig,
    n_rounds: int,
    rng: np.random.Generator,
    arrival_rate: float = 0.3,
    depart_rate: float = 0.05,
    max_agents: int | None = None,
    query_size: int = 4,
    persistence: float = 0.5,
) -> dict:
    """Model-free protocol study with random arrivals and departures.

    Every round, each listener independently recomputes the importance table
    from the delivered packets and the run aborts if any disagree; the
    importance-ordered block is also checked for double-booked slots. Used
    by the protocol-sim harness command and the collision-freedom tests.
    """
    if max_agents is None:
        max_agents = config.slots_query - 1
    channel = QueryChannel(config, rng)
    next_agent = 0
    present: set[int] = set()
    stats = {
        "rounds": n_rounds,
        "query_collision_slots": 0,
        "delivered_queries": 0,
        "scheduled_messages": 0,
        "scheduled_collisions": 0,
        "csma_messages": 0,
        "csma_collision_windows": 0,
        "schedule_mismatches": 0,
        "confirmations": 0,
    }
    for _ in range(n_rounds):
        if rng.random() < depart_rate * len(present) and present:
            leaver = int(rng.choice(sorted(present)))
            present.remove(leaver)
            channel.remove_agent(leaver)
        if len(present) < max_agents and rng.random() < arrival_rate:
            channel.add_agent(next_agent)
            present.add(next_agent)
            next_agent += 1

        confirmed_before = set(channel.confirmed_agents())
        submissions = {
            a: (rng.normal(size=query_size), float(abs(rng.normal())))
            for a in sorted(present)
        }
        log = channel.run_query_phase(submissions)
        stats["query_collision_slots"] += log.query_collisions
        stats["delivered_queries"] += len(log.delivered)
        stats["confirmations"] += len(
            set(channel.confirmed_agents()) - confirmed_before
        )

        confirmed = channel.confirmed_agents()
        slots = channel.slot_index()
        tables = [importance_table(log.delivered, confirmed) for _ in present]
        if tables and any(t != tables[0] for t in tables[1:]):
            stats["schedule_mismatches"] += 1
            raise AssertionError("common-knowledge importance tables diverged")
        table = tables[0] if tables else {}
        unconfirmed = sorted(set(present) - set(confirmed))
        result = run_message_phase_decentralized(
            table, unconfirmed, config, persistence, rng, tiebreak=slots
        )
        # back-to-back scheduled block: a collision would be a repeated sender
        if len(set(result.scheduled)) != len(result.scheduled):
            stats["scheduled_collisions"] += 1
        stats["scheduled_messages"] += len(result.scheduled)
        stats["csma_messages"] += len(result.csma_successes)
        stats["csma_collision_windows"] += result.csma_collision_windows
        log.message_senders = result.senders
        log.message_collisions = result.csma_collision_windows
    return stats
