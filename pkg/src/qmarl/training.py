"""Advantage actor-critic training and the rollout loop that wires the agent
model, the channel, the message cache and the junction together.

Round structure inside a rollout: observe -> hidden -> query/payload ->
query phase -> importance & scheduling -> message phase -> cache update ->
aggregate -> act -> environment step. Query-phase events always precede
message-phase events, which precede actions.

Training serializes everything: each "worker" is one rollout followed by one
atomic optimizer update against the parameters it just used, so a seeded run
is bit-reproducible for any worker count. Rewards stay per-agent from the
environment to the returns (no cross-agent summing), and gradients flow
through every tensor produced this round - including other agents' query and
message nets via the aggregation - while cached (stale or predicted) payloads
are treated as constants.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import channel as ch
from . import nn
from .importance import agent_importance
from .junction import ACTION_MOVE, EpisodeOutcome, GridSpec, JunctionEnv
from .model import Model, aggregate  # noqa: F401  (aggregate re-exported for demos)
from .prediction import CACHE_MODES, MessageCache

COMM_MODES = ("full", "centralized", "decentralized", "csma", "zero", "commnet")
SCHEDULE_POLICIES = ("importance", "random")

LOG_EPS = 1e-12


@dataclass(frozen=True)
class CommConfig:
    """Which communication regime a rollout runs under."""

    mode: str = "full"
    round_config: ch.RoundConfig | None = None
    schedule_policy: str = "importance"
    cache_mode: str = "hold"
    persistence: float = 0.5

    def __post_init__(self):
        if self.mode not in COMM_MODES:
            raise ValueError(f"unknown comm mode {self.mode!r}")
        if self.schedule_policy not in SCHEDULE_POLICIES:
            raise ValueError(f"unknown schedule policy {self.schedule_policy!r}")
        if self.cache_mode not in CACHE_MODES:
            raise ValueError(f"unknown cache mode {self.cache_mode!r}")
        if self.mode in ("centralized", "decentralized", "csma") and self.round_config is None:
            raise ValueError(f"mode {self.mode!r} needs a round_config")
        if not 0.0 < self.persistence <= 1.0:
            raise ValueError("persistence must be in (0, 1]")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization constants and the arrival-rate curriculum."""

    epochs: int = 300
    workers: int = 16
    lr: float = 1e-3
    gamma: float = 1.0
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    p_start: float = 0.02
    p_end: float = 0.1
    switch_epoch: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.workers < 1 or self.epochs < 0:
            raise ValueError("need workers >= 1 and epochs >= 0")
        for v in (self.lr, self.gamma, self.value_coef, self.entropy_coef):
            if not np.isfinite(v):
                raise ValueError("non-finite training coefficient")


def curriculum_p(epoch: int, config: TrainConfig) -> float:
    """Linear arrival-rate ramp from p_start to p_end over switch_epoch epochs."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    switch = max(1, config.switch_epoch)
    if epoch >= switch:
        return config.p_end
    return config.p_start + (config.p_end - config.p_start) * (epoch / switch)


@dataclass
class RoundGraph:
    """Tapes and masks of one round, enough to backprop the round exactly."""

    ids: list[int]
    uids: list[tuple[int, int]]  # (vid, entry round): vids recycle, these don't
    tape_enc: list
    hidden: np.ndarray
    tape_query: list | None
    queries: np.ndarray | None
    tape_msg: list | None
    payload: np.ndarray | None
    used_q: np.ndarray | None
    used_m: np.ndarray
    fresh_q: np.ndarray
    fresh_m: np.ndarray
    include: np.ndarray
    weights: np.ndarray | None
    counts: np.ndarray
    tape_dec: list | None
    messages: np.ndarray
    tape_trunk: list
    tape_policy: list
    tape_value: list
    probs: np.ndarray
    values: np.ndarray


@dataclass
class StepRecord:
    round_index: int
    row: int
    action: int
    reward: float
    value: float
    probs: np.ndarray


@dataclass
class Trajectory:
    """One episode: per-agent step records plus the per-round graphs."""

    rounds: list[RoundGraph | None]
    agents: list[list[StepRecord]]
    outcome: EpisodeOutcome
    episode_reward: float
    stats: dict


def _comm_enabled(comm: CommConfig) -> bool:
    return comm.mode != "zero"


def _deliveries(
    comm: CommConfig,
    ids: list[int],
    queries: dict[int, np.ndarray],
    distances: dict[int, float],
    payloads: dict[int, np.ndarray],
    chan: ch.QueryChannel | None,
    rng: np.random.Generator,
    stats: dict,
) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Run the round's channel activity; returns delivered queries/payloads."""
    if comm.mode in ("full", "commnet"):
        return dict(queries), dict(payloads)

    if comm.mode == "centralized":
        # controller hears every query; top-N_c (or random subset) transmit
        table = {
            i: agent_importance(
                queries[i], [queries[j] for j in ids if j != i], distances[i]
            )
            for i in ids
        }
        schedule = ch.schedule_centralized(
            table, comm.round_config, policy=comm.schedule_policy, rng=rng
        )
        stats["messages_sent"] += len(schedule.senders)
        return dict(queries), {a: payloads[a] for a in schedule.senders}

    if comm.mode == "decentralized":
        log = chan.run_query_phase({a: (queries[a], distances[a]) for a in ids})
        stats["query_collision_slots"] += log.query_collisions
        stats["delivered_queries"] += len(log.delivered)
        confirmed = chan.confirmed_agents()
        table = ch.importance_table(log.delivered, confirmed)
        unconfirmed = sorted(set(ids) - set(confirmed))
        result = ch.run_message_phase_decentralized(
            table,
            unconfirmed,
            comm.round_config,
            comm.persistence,
            rng,
            tiebreak=chan.slot_index(),
        )
        stats["messages_sent"] += len(result.senders)
        stats["csma_collision_windows"] += result.csma_collision_windows
        delivered_q = {p.sender: p.query for p in log.delivered}
        return delivered_q, {a: payloads[a] for a in result.senders}

    if comm.mode == "csma":
        # no query phase: contenders bundle query+payload into one grab
        cfg = comm.round_config
        windows = cfg.slots_total // (cfg.slots_per_query + cfg.slots_per_message)
        winners, collisions = ch.csma_contend(ids, windows, comm.persistence, rng)
        stats["messages_sent"] += len(winners)
        stats["csma_collision_windows"] += collisions
        return {a: queries[a] for a in winners}, {a: payloads[a] for a in winners}

    raise AssertionError(f"unhandled mode {comm.mode}")


def rollout(
    model: Model,
    env_spec: GridSpec,
    comm: CommConfig,
    env_rng: np.random.Generator,
    actor_rng: np.random.Generator,
    predictor: nn.Mlp | None = None,
    collect: bool = False,
) -> Trajectory:
    """Play one episode under the given communication regime."""
    cfg = model.config
    if comm.mode == "commnet" and cfg.variant != "commnet":
        raise ValueError("commnet mode needs the commnet model variant")
    if comm.cache_mode == "predict" and predictor is None:
        raise ValueError("predict cache mode needs a predictor net")

    env = JunctionEnv(env_spec)
    env.reset(env_rng)
    cache = MessageCache(size=cfg.payload_size)
    query_cache: dict[int, np.ndarray] = {}
    chan = (
        ch.QueryChannel(comm.round_config, actor_rng)
        if comm.mode == "decentralized"
        else None
    )

    rounds: list[RoundGraph | None] = []
    finished: list[list[StepRecord]] = []
    active: dict[int, list[StepRecord]] = {}
    stats = {
        "messages_sent": 0,
        "delivered_queries": 0,
        "query_collision_slots": 0,
        "csma_collision_windows": 0,
        "collisions": 0,
        "predictor_evaluations": 0,
    }
    episode_reward = 0.0

    while not env.done:
        ids = env.alive_ids()
        n = len(ids)
        if n == 0:
            if chan is not None:
                chan.run_query_phase({})
            res = env.step({})
            episode_reward += res.global_reward
            stats["collisions"] += res.collisions
            for vid in res.arrived:
                if chan is not None:
                    chan.add_agent(vid)
            rounds.append(None)
            continue

        for vid in ids:
            cache.ensure(vid)
        uids = [(vid, env.vehicles[vid].entry_round) for vid in ids]

        obs = np.stack([env.observe(vid) for vid in ids])
        hidden, tape_enc = nn.forward(model.nets["encoder"], obs)

        queries_m = tape_query = payload_m = tape_msg = None
        if _comm_enabled(comm):
            if cfg.has_query:
                queries_m, tape_query = nn.forward(model.nets["query"], hidden)
                payload_m, tape_msg = nn.forward(model.nets["message"], hidden)
            else:
                payload_m = hidden

        # ---- channel: query phase, scheduling, message phase -------------
        fresh_q = np.zeros(n, dtype=bool)
        fresh_m = np.zeros(n, dtype=bool)
        if _comm_enabled(comm):
            q_by_id = (
                {vid: queries_m[i] for i, vid in enumerate(ids)}
                if queries_m is not None
                else {vid: None for vid in ids}
            )
            p_by_id = {vid: payload_m[i] for i, vid in enumerate(ids)}
            d_by_id = {
                vid: float(
                    np.linalg.norm(
                        p_by_id[vid] - cache.advanced(vid, predictor, comm.cache_mode)
                    )
                )
                for vid in ids
            }
            got_q, got_m = _deliveries(
                comm, ids, q_by_id, d_by_id, p_by_id, chan, actor_rng, stats
            )
            stats["predictor_evaluations"] += cache.update(
                got_m, predictor, comm.cache_mode
            )
            if cfg.has_query:
                for vid, q in got_q.items():
                    query_cache[vid] = q
            for i, vid in enumerate(ids):
                fresh_q[i] = vid in got_q
                fresh_m[i] = vid in got_m

        # ---- aggregation --------------------------------------------------
        s_m = cfg.s_m
        used_q = np.zeros((n, cfg.s_q)) if cfg.has_query else None
        used_m = np.zeros((n, cfg.payload_size))
        known = np.zeros(n, dtype=bool)
        if _comm_enabled(comm):
            for i, vid in enumerate(ids):
                if cfg.has_query:
                    if vid in query_cache:
                        used_q[i] = query_cache[vid]
                        known[i] = True
                else:
                    known[i] = True
                if vid in cache.entries:
                    used_m[i] = cache.get(vid)

        include = known[None, :] & ~np.eye(n, dtype=bool)
        counts = np.maximum(include.sum(axis=1), 1)

        tape_dec = None
        if cfg.variant == "generation" and _comm_enabled(comm):
            dec_in = np.concatenate([used_q, used_m], axis=1)
            messages, tape_dec = nn.forward(model.nets["decoder"], dec_in)
        elif _comm_enabled(comm):
            messages = used_m  # plain / commnet payloads are already full size
        else:
            messages = np.zeros((n, s_m))

        weights = None
        if _comm_enabled(comm):
            if cfg.has_query:
                weights = queries_m @ used_q.T  # rows: receivers, cols: senders
                votes = np.where(include, weights, 0.0)
            else:
                votes = include.astype(float)
            agg = (votes @ messages) / counts[:, None]
        else:
            agg = np.zeros((n, s_m))

        trunk_in = np.concatenate([hidden, agg], axis=1)
        trunk_out, tape_trunk = nn.forward(model.nets["trunk"], trunk_in)
        probs, tape_policy = nn.forward(model.nets["policy"], trunk_out)
        values_2d, tape_value = nn.forward(model.nets["value"], trunk_out)
        values = values_2d[:, 0]

        draws = actor_rng.random(n)
        actions = (draws < probs[:, 1]).astype(int)  # P(move) = probs[move]

        res = env.step({vid: int(actions[i]) for i, vid in enumerate(ids)})
        episode_reward += res.global_reward
        stats["collisions"] += res.collisions

        for i, vid in enumerate(ids):
            reward = 0.0 if vid in res.departed else res.rewards.get(vid, 0.0)
            active.setdefault(vid, []).append(
                StepRecord(
                    round_index=len(rounds),
                    row=i,
                    action=int(actions[i]),
                    reward=reward,
                    value=float(values[i]),
                    probs=probs[i].copy(),
                )
            )
        for vid in res.departed:
            finished.append(active.pop(vid))
            cache.remove(vid)
            query_cache.pop(vid, None)
            if chan is not None:
                chan.remove_agent(vid)
        for vid in res.arrived:
            if chan is not None:
                chan.add_agent(vid)

        rounds.append(
            RoundGraph(
                ids=ids,
                uids=uids,
                tape_enc=tape_enc,
                hidden=hidden,
                tape_query=tape_query,
                queries=queries_m,
                tape_msg=tape_msg,
                payload=payload_m,
                used_q=used_q,
                used_m=used_m,
                fresh_q=fresh_q,
                fresh_m=fresh_m,
                include=include,
                weights=weights,
                counts=counts,
                tape_dec=tape_dec,
                messages=messages,
                tape_trunk=tape_trunk,
                tape_policy=tape_policy,
                tape_value=tape_value,
                probs=probs,
                values=values,
            )
            if collect
            else None
        )

    finished.extend(active.values())
    return Trajectory(
        rounds=rounds,
        agents=finished,
        outcome=env.outcome(),
        episode_reward=episode_reward,
        stats=stats,
    )


def discounted_returns(rewards: list[float], gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out


def trajectory_loss_terms(
    traj: Trajectory, gamma: float
) -> tuple[list[tuple], dict]:
    """Per-step (step, return, advantage) triples plus summed loss pieces."""
    terms = []
    policy_loss = value_loss = entropy_sum = 0.0
    for steps in traj.agents:
        returns = discounted_returns([s.reward for s in steps], gamma)
        for step, ret in zip(steps, returns):
            adv = ret - step.value
            p_act = max(step.probs[step.action], LOG_EPS)
            policy_loss += -np.log(p_act) * adv
            value_loss += (step.value - ret) ** 2
            p = np.clip(step.probs, LOG_EPS, 1.0)
            entropy_sum += float(-(p * np.log(p)).sum())
            terms.append((step, float(ret), float(adv)))
    return terms, {
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(entropy_sum),
    }


def _backward_round(
    model: Model,
    comm: CommConfig,
    rg: RoundGraph,
    dprobs: np.ndarray,
    dvalues: np.ndarray,
    acc: dict[str, nn.GradBundle],
) -> None:
    """Exact backprop of one round, cross-agent aggregation included."""
    cfg = model.config
    g_val = nn.backward(model.nets["value"], rg.tape_value, dvalues[:, None])
    acc["value"].accumulate(g_val)
    g_pol = nn.backward(model.nets["policy"], rg.tape_policy, dprobs)
    acc["policy"].accumulate(g_pol)
    d_trunk_out = g_val.d_input + g_pol.d_input
    g_trunk = nn.backward(model.nets["trunk"], rg.tape_trunk, d_trunk_out)
    acc["trunk"].accumulate(g_trunk)
    d_hidden = g_trunk.d_input[:, : cfg.hidden].copy()
    d_agg = g_trunk.d_input[:, cfg.hidden :]

    if _comm_enabled(comm):
        inv_counts = 1.0 / rg.counts[:, None]
        if cfg.has_query:
            votes = np.where(rg.include, rg.weights, 0.0)
            d_messages = (votes * inv_counts).T @ d_agg
            d_w = np.where(rg.include, (d_agg @ rg.messages.T) * inv_counts, 0.0)
            d_recv_q = d_w @ rg.used_q  # receiver-side queries, always fresh
            d_used_q = d_w.T @ rg.queries
        else:
            d_messages = (rg.include.astype(float) * inv_counts).T @ d_agg
            d_recv_q = d_used_q = None

        if cfg.variant == "generation":
            g_dec = nn.backward(model.nets["decoder"], rg.tape_dec, d_messages)
            acc["decoder"].accumulate(g_dec)
            d_used_q = d_used_q + g_dec.d_input[:, : cfg.s_q]
            d_used_m = g_dec.d_input[:, cfg.s_q :]
        else:
            d_used_m = d_messages

        if cfg.has_query:
            d_q_total = d_recv_q + np.where(rg.fresh_q[:, None], d_used_q, 0.0)
            g_query = nn.backward(model.nets["query"], rg.tape_query, d_q_total)
            acc["query"].accumulate(g_query)
            d_hidden += g_query.d_input
            d_payload = np.where(rg.fresh_m[:, None], d_used_m, 0.0)
            g_msg = nn.backward(model.nets["message"], rg.tape_msg, d_payload)
            acc["message"].accumulate(g_msg)
            d_hidden += g_msg.d_input
        else:
            # commnet: the payload IS the hidden state
            d_hidden += np.where(rg.fresh_m[:, None], d_used_m, 0.0)

    g_enc = nn.backward(model.nets["encoder"], rg.tape_enc, d_hidden)
    acc["encoder"].accumulate(g_enc)


def a3c_update(
    model: Model,
    trajectories: list[Trajectory],
    train_cfg: TrainConfig,
    comm: CommConfig,
    opt_states: dict[str, nn.OptimState],
) -> dict:
    """One optimizer step from complete trajectories; returns loss stats."""
    acc = {name: nn.zero_grads(net) for name, net in model.nets.items()}
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "steps": 0}
    for traj in trajectories:
        terms, pieces = trajectory_loss_terms(traj, train_cfg.gamma)
        for k in ("policy_loss", "value_loss", "entropy"):
            stats[k] += pieces[k]
        stats["steps"] += len(terms)

        seeds: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for step, ret, adv in terms:
            rg = traj.rounds[step.round_index]
            if rg is None:
                raise ValueError("trajectory was collected without tapes")
            if step.round_index not in seeds:
                seeds[step.round_index] = (
                    np.zeros_like(rg.probs),
                    np.zeros(len(rg.ids)),
                )
            dprobs, dvalues = seeds[step.round_index]
            p = np.clip(step.probs, LOG_EPS, 1.0)
            # d/dpi of -log(pi[a]) * adv, advantage held constant
            dprobs[step.row, step.action] += -adv / p[step.action]
            # d/dpi of -c_e * H(pi)
            dprobs[step.row] += train_cfg.entropy_coef * (np.log(p) + 1.0)
            dvalues[step.row] += 2.0 * train_cfg.value_coef * (step.value - ret)

        for round_index, (dprobs, dvalues) in seeds.items():
            _backward_round(model, comm, traj.rounds[round_index], dprobs, dvalues, acc)

    total = (
        stats["policy_loss"]
        + train_cfg.value_coef * stats["value_loss"]
        - train_cfg.entropy_coef * stats["entropy"]
    )
    if not np.isfinite(total):
        raise FloatingPointError(f"non-finite loss: {stats}")
    stats["total_loss"] = float(total)
    for name, net in model.nets.items():
        nn.optim_step(net, acc[name], opt_states[name])
    return stats


def episode_loss(
    model: Model,
    traj: Trajectory,
    train_cfg: TrainConfig,
) -> float:
    """Replay a collected full-communication episode under current params.

    Recomputes the whole differentiable pipeline on the recorded
    observations with the recorded actions, returns and advantages held
    fixed - the quantity whose gradient a3c_update implements. Used by the
    finite-difference oracle in the tests.
    """
    cfg = model.config
    per_round: dict[int, list[tuple[StepRecord, float, float]]] = {}
    terms, _ = trajectory_loss_terms(traj, train_cfg.gamma)
    for step, ret, adv in terms:
        per_round.setdefault(step.round_index, []).append((step, ret, adv))

    total = 0.0
    for round_index, entries in per_round.items():
        rg = traj.rounds[round_index]
        obs = rg.tape_enc[0][0]
        hidden = nn.apply(model.nets["encoder"], obs)
        n = len(rg.ids)
        if cfg.has_query:
            queries = nn.apply(model.nets["query"], hidden)
            payload = nn.apply(model.nets["message"], hidden)
        else:
            queries, payload = None, hidden
        if cfg.variant == "generation":
            messages = nn.apply(
                model.nets["decoder"], np.concatenate([queries, payload], axis=1)
            )
        else:
            messages = payload
        counts = np.maximum(rg.include.sum(axis=1), 1)
        if cfg.has_query:
            votes = np.where(rg.include, queries @ queries.T, 0.0)
        else:
            votes = rg.include.astype(float)
        agg = (votes @ messages) / counts[:, None]
        trunk_out = nn.apply(
            model.nets["trunk"], np.concatenate([hidden, agg], axis=1)
        )
        probs = nn.apply(model.nets["policy"], trunk_out)
        values = nn.apply(model.nets["value"], trunk_out)[:, 0]
        for step, ret, adv in entries:
            p = np.clip(probs[step.row], LOG_EPS, 1.0)
            total += -np.log(p[step.action]) * adv
            total += train_cfg.value_coef * (values[step.row] - ret) ** 2
            total -= train_cfg.entropy_coef * float(-(p * np.log(p)).sum())
    return float(total)


def train(
    model: Model,
    env_spec: GridSpec,
    comm: CommConfig,
    train_cfg: TrainConfig,
    predictor: nn.Mlp | None = None,
    on_epoch=None,
) -> list[dict]:
    """Serialized multi-worker training; mutates model in place.

    Returns one metrics record per epoch; on_epoch (if given) receives each
    record as it is produced.
    """
    opt_states = {
        name: nn.OptimState.for_net(net, lr=train_cfg.lr)
        for name, net in model.nets.items()
    }
    records = []
    for epoch in range(train_cfg.epochs):
        p = curriculum_p(epoch, train_cfg)
        spec = dataclasses.replace(env_spec, arrival_p=p)
        metrics = []
        losses = []
        for worker in range(train_cfg.workers):
            env_rng = np.random.default_rng(
                [train_cfg.seed, epoch, worker, 0xE0]
            )
            actor_rng = np.random.default_rng(
                [train_cfg.seed, epoch, worker, 0xAC]
            )
            traj = rollout(
                model, spec, comm, env_rng, actor_rng, predictor, collect=True
            )
            stats = a3c_update(model, [traj], train_cfg, comm, opt_states)
            metrics.append((traj.outcome.metric, traj.outcome.success, traj.episode_reward))
            losses.append(stats)
        record = {
            "epoch": epoch,
            "arrival_p": p,
            "tau_s": float(np.mean([m[0] for m in metrics])),
            "success_rate": float(np.mean([m[1] for m in metrics])),
            "episode_reward": float(np.mean([m[2] for m in metrics])),
            "policy_loss": float(np.mean([l["policy_loss"] for l in losses])),
            "value_loss": float(np.mean([l["value_loss"] for l in losses])),
            "entropy": float(np.mean([l["entropy"] for l in losses])),
        }
        records.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return records


@dataclass
class EvalStats:
    """Aggregate evaluation results with per-episode arrays for pairing."""

    episodes: int
    tau_s: np.ndarray = field(default_factory=lambda: np.zeros(0))
    success: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    collisions: np.ndarray = field(default_factory=lambda: np.zeros(0))
    messages_sent: np.ndarray = field(default_factory=lambda: np.zeros(0))
    query_collision_slots: np.ndarray = field(default_factory=lambda: np.zeros(0))
    csma_collision_windows: np.ndarray = field(default_factory=lambda: np.zeros(0))
    empty: bool = False

    @property
    def tau_s_mean(self) -> float:
        return float(self.tau_s.mean()) if self.episodes else float("nan")

    @property
    def tau_s_se(self) -> float:
        if self.episodes < 2:
            return float("nan")
        return float(self.tau_s.std(ddof=1) / np.sqrt(self.episodes))

    def as_record(self) -> dict:
        return {
            "episodes": self.episodes,
            "empty": self.empty,
            "tau_s_mean": self.tau_s_mean,
            "tau_s_se": self.tau_s_se,
            "success_rate": float(self.success.mean()) if self.episodes else float("nan"),
            "collisions_mean": float(self.collisions.mean()) if self.episodes else float("nan"),
            "messages_sent_mean": float(self.messages_sent.mean()) if self.episodes else float("nan"),
            "query_collision_slots_mean": (
                float(self.query_collision_slots.mean()) if self.episodes else float("nan")
            ),
            "csma_collision_windows_mean": (
                float(self.csma_collision_windows.mean()) if self.episodes else float("nan")
            ),
        }


def evaluate(
    model: Model,
    env_spec: GridSpec,
    comm: CommConfig,
    episodes: int,
    seed: int,
    predictor: nn.Mlp | None = None,
) -> EvalStats:
    """Roll out the policy without learning; seeded and repeatable.

    Episode i draws its environment stream from (seed, i) alone, so two
    evaluations with the same seed but different comm configs face the same
    arrival pattern episode by episode (paired comparisons).
    """
    if episodes == 0:
        return EvalStats(episodes=0, empty=True)
    tau, succ, coll, sent, qcoll, ccoll = [], [], [], [], [], []
    for ep in range(episodes):
        env_rng = np.random.default_rng([seed, ep, 0xE0])
        actor_rng = np.random.default_rng([seed, ep, 0xAC])
        traj = rollout(model, env_spec, comm, env_rng, actor_rng, predictor)
        tau.append(traj.outcome.metric)
        succ.append(traj.outcome.success)
        coll.append(traj.stats["collisions"])
        sent.append(traj.stats["messages_sent"])
        qcoll.append(traj.stats["query_collision_slots"])
        ccoll.append(traj.stats["csma_collision_windows"])
    return EvalStats(
        episodes=episodes,
        tau_s=np.array(tau),
        success=np.array(succ),
        collisions=np.array(coll, dtype=float),
        messages_sent=np.array(sent, dtype=float),
        query_collision_slots=np.array(qcoll, dtype=float),
        csma_collision_windows=np.array(ccoll, dtype=float),
    )


def collect_payload_pairs(
    model: Model,
    env_spec: GridSpec,
    episodes: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """(payload at t, payload at t+1) pairs per agent from full-comm rollouts.

    This is the predictor's training set: consecutive true payloads of the
    same vehicle under the frozen policy.
    """
    comm = CommConfig(mode="full")
    xs, ys = [], []
    for ep in range(episodes):
        traj = rollout(
            model,
            env_spec,
            comm,
            np.random.default_rng([seed, ep, 0xE0]),
            np.random.default_rng([seed, ep, 0xAC]),
            collect=True,
        )
        prev: dict[tuple[int, int], np.ndarray] = {}
        for rg in traj.rounds:
            if rg is None:
                prev = {}
                continue
            current = {uid: rg.payload[i] for i, uid in enumerate(rg.uids)}
            for uid, payload in current.items():
                if uid in prev:
                    xs.append(prev[uid])
                    ys.append(payload)
            prev = current
    if not xs:
        raise ValueError("no payload pairs collected")
    return np.stack(xs), np.stack(ys)


def paired_less_pvalue(a: np.ndarray, b: np.ndarray) -> float:
    """One-sided paired t-test p-value for mean(a) < mean(b)."""
    from scipy import stats as sps

    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("need two equal-length samples")
    diff = a - b
    spread = np.ptp(diff)
    if spread < 1e-10 * max(1.0, float(np.abs(diff).max())):
        # essentially constant difference: the t statistic degenerates
        return 1.0 if diff.mean() >= 0 else 0.0
    return float(sps.ttest_rel(a, b, alternative="less").pvalue)
