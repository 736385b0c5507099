"""Command-line front end: config loading, presets, metrics files, subcommands.

Subcommands: train (policy or predictor fitting), eval (single or sweep),
protocol-sim (model-free channel studies), importance-audit (exact vs
first-order vs query-factorized measures on a checkpoint), gradcheck.

Configs are JSON with five sections (env, model, comm, train, plus top-level
seed and optional sweep); unknown keys are rejected with their full path and
defaults are filled in before hashing, so semantically identical configs get
identical fingerprints. Metrics go to line-oriented JSON, one self-describing
record per line, append-safe.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import channel as ch
from . import nn
from . import training as tr
from .importance import importance_approx, importance_exact, importance_gradient
from .junction import GridSpec
from .model import Model, ModelConfig, policy_message_jacobian
from .prediction import train_predictor

METRICS_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Config rejected; the message names the offending key path."""


# section -> key -> (type, default); REQUIRED means the preset/user must set it
REQUIRED = object()
DERIVED = object()

_SCHEMA = {
    "env": {
        "size": (int, REQUIRED),
        "n_max": (int, REQUIRED),
        "vision": (int, REQUIRED),
        "arrival_p": (float, REQUIRED),
        "episode_rounds": (int, REQUIRED),
    },
    "model": {
        "s_q": (int, 16),
        "s_m": (int, REQUIRED),
        "s_m_prime": (int, DERIVED),  # s_m - s_q in the generation variant
        "hidden": (int, DERIVED),  # defaults to s_m
        "trunk": (int, DERIVED),  # defaults to hidden
        "variant": (str, "generation"),
    },
    "comm": {
        "mode": (str, "full"),
        "n_c": (int, DERIVED),  # alternative to T
        "T": (int, DERIVED),
        "T_Q": (int, DERIVED),  # defaults to n_max + 1
        "t_q": (int, 1),
        "t_m": (int, REQUIRED),
        "schedule": (str, "importance"),
        "cache": (str, "hold"),
        "persistence": (float, 0.5),
    },
    "train": {
        "epochs": (int, 2000),
        "workers": (int, 16),
        "lr": (float, 1e-3),
        "gamma": (float, 1.0),
        "value_coef": (float, 0.5),
        "entropy_coef": (float, 0.01),
        "p_start": (float, 0.02),
        "p_end": (float, 0.1),
        "switch_epoch": (int, 1000),
    },
}

_SWEEP_KINDS = ("n_c", "T", "s_m", "mode")


@dataclasses.dataclass
class RunConfig:
    """Validated experiment description, ready to hand to the trainer."""

    env: GridSpec
    model: ModelConfig
    comm: tr.CommConfig
    train: tr.TrainConfig
    seed: int
    sweep: dict | None
    canonical: dict

    @property
    def fingerprint(self) -> str:
        return config_fingerprint(self.canonical)


def config_fingerprint(canonical: dict) -> str:
    blob = json.dumps(canonical, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _coerce(value, kind, path):
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ConfigError(f"{path}: expected {kind.__name__}, got {value!r}")
    return value


def _validate_section(name: str, data: dict) -> dict:
    schema = _SCHEMA[name]
    out = {}
    for key in data:
        if key not in schema:
            raise ConfigError(f"{name}.{key}: unknown key")
    for key, (kind, default) in schema.items():
        if key in data:
            out[key] = _coerce(data[key], kind, f"{name}.{key}")
        elif default is REQUIRED:
            raise ConfigError(f"{name}.{key}: required key missing")
        elif default is not DERIVED:
            out[key] = default
    return out


def parse_config_data(data: dict) -> RunConfig:
    """Validate a loaded config dict and build the runtime objects."""
    if not isinstance(data, dict):
        raise ConfigError("top level must be an object")
    known_top = set(_SCHEMA) | {"seed", "sweep"}
    for key in data:
        if key not in known_top:
            raise ConfigError(f"{key}: unknown top-level key")
    sections = {
        name: _validate_section(name, data.get(name, {})) for name in _SCHEMA
    }
    seed = _coerce(data.get("seed", 0), int, "seed")

    env_d, model_d, comm_d, train_d = (
        sections["env"], sections["model"], sections["comm"], sections["train"]
    )

    # dependent defaults
    model_d.setdefault("hidden", model_d["s_m"])
    model_d.setdefault("trunk", model_d["hidden"])
    if "s_m_prime" not in model_d:
        if model_d["variant"] == "generation":
            model_d["s_m_prime"] = model_d["s_m"] - model_d["s_q"]
        else:
            model_d["s_m_prime"] = 0
    comm_d.setdefault("T_Q", env_d["n_max"] + 1)
    if "T" in comm_d and "n_c" in comm_d:
        derived = (comm_d["T"] - comm_d["T_Q"]) // comm_d["t_m"]
        if derived != comm_d["n_c"]:
            raise ConfigError(
                f"comm.n_c: {comm_d['n_c']} inconsistent with T={comm_d['T']} "
                f"(implies n_c={derived})"
            )
    elif "n_c" in comm_d:
        comm_d["T"] = comm_d["T_Q"] + comm_d["n_c"] * comm_d["t_m"]
    elif "T" in comm_d:
        comm_d["n_c"] = (comm_d["T"] - comm_d["T_Q"]) // comm_d["t_m"]
    else:
        # unconstrained modes: budget that fits everyone
        comm_d["n_c"] = env_d["n_max"]
        comm_d["T"] = comm_d["T_Q"] + comm_d["n_c"] * comm_d["t_m"]
    if comm_d["n_c"] < 0:
        raise ConfigError("comm.n_c: negative capacity")

    try:
        env = GridSpec(
            size=env_d["size"],
            n_max=env_d["n_max"],
            vision=env_d["vision"],
            arrival_p=env_d["arrival_p"],
            episode_rounds=env_d["episode_rounds"],
        )
    except (ValueError, AssertionError) as exc:
        raise ConfigError(f"env: {exc}") from exc
    try:
        model = ModelConfig(
            obs_size=env.obs_size,
            hidden=model_d["hidden"],
            s_q=model_d["s_q"],
            s_m=model_d["s_m"],
            s_m_prime=model_d["s_m_prime"],
            trunk=model_d["trunk"],
            variant=model_d["variant"],
        )
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc
    try:
        round_config = ch.RoundConfig(
            slots_total=comm_d["T"],
            slots_query=comm_d["T_Q"],
            slots_per_query=comm_d["t_q"],
            slots_per_message=comm_d["t_m"],
        )
        comm = tr.CommConfig(
            mode=comm_d["mode"],
            round_config=round_config,
            schedule_policy=comm_d["schedule"],
            cache_mode=comm_d["cache"],
            persistence=comm_d["persistence"],
        )
    except ValueError as exc:
        raise ConfigError(f"comm: {exc}") from exc
    try:
        train = tr.TrainConfig(seed=seed, **train_d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc

    sweep = data.get("sweep")
    if sweep is not None:
        if set(sweep) != {"kind", "values"}:
            raise ConfigError("sweep: needs exactly the keys kind and values")
        if sweep["kind"] not in _SWEEP_KINDS:
            raise ConfigError(f"sweep.kind: must be one of {_SWEEP_KINDS}")
        if not isinstance(sweep["values"], list) or not sweep["values"]:
            raise ConfigError("sweep.values: need a nonempty list")

    canonical = {"env": env_d, "model": model_d, "comm": comm_d,
                 "train": train_d, "seed": seed}
    if sweep is not None:
        canonical["sweep"] = sweep
    return RunConfig(
        env=env, model=model, comm=comm, train=train,
        seed=seed, sweep=sweep, canonical=canonical,
    )


def preset_names() -> list[str]:
    root = resources.files("qmarl").joinpath("presets")
    return sorted(p.name[: -len(".json")] for p in root.iterdir() if p.name.endswith(".json"))


def load_config(
    config_path: str | None,
    preset: str | None,
    overrides: list[str] | None = None,
) -> RunConfig:
    """Read a config file or packaged preset, apply key=value overrides."""
    if (config_path is None) == (preset is None):
        raise ConfigError("give exactly one of --config or --preset")
    if preset is not None:
        ref = resources.files("qmarl").joinpath("presets", f"{preset}.json")
        if not ref.is_file():
            raise ConfigError(
                f"unknown preset {preset!r}; available: {', '.join(preset_names())}"
            )
        text = ref.read_text()
        origin = f"preset {preset}"
    else:
        text = Path(config_path).read_text()
        origin = config_path
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{origin}: line {exc.lineno}, col {exc.colno}: {exc.msg}")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected dotted.path=value")
        path, raw = item.split("=", 1)
        node = data
        parts = path.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = json.loads(raw)
    return parse_config_data(data)


# ---------------------------------------------------------------------------
# metrics files: one JSON record per line
# ---------------------------------------------------------------------------


def write_metrics(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_metrics(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def _base_record(kind: str, cfg: RunConfig) -> dict:
    return {"schema": METRICS_SCHEMA_VERSION, "kind": kind,
            "seed": cfg.seed, "fingerprint": cfg.fingerprint}


def _eval_record(cfg: RunConfig, comm: tr.CommConfig, stats: tr.EvalStats,
                 s_m: int) -> dict:
    rec = _base_record("eval", cfg)
    rec.update(stats.as_record())
    rec.update(
        mode=comm.mode,
        schedule=comm.schedule_policy,
        cache=comm.cache_mode,
        n_c=comm.round_config.capacity if comm.round_config else None,
        T=comm.round_config.slots_total if comm.round_config else None,
        s_m=s_m,
    )
    return rec


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _load_model(cfg: RunConfig, checkpoint: str) -> Model:
    nets = nn.load(checkpoint)
    nets.pop("predictor", None)
    return Model(cfg.model, nets)


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.preset, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"

    if args.fit_predictor:
        if not args.checkpoint:
            raise ConfigError("--fit-predictor needs --checkpoint of a trained policy")
        model = _load_model(cfg, args.checkpoint)
        xs, ys = tr.collect_payload_pairs(
            model, cfg.env, episodes=args.episodes, seed=cfg.seed
        )
        predictor, history = train_predictor(
            xs, ys, epochs=args.predictor_epochs, lr=0.001,
            rng=np.random.default_rng(cfg.seed),
        )
        nn.save({"predictor": predictor}, out / "predictor.qmn")
        record = _base_record("predictor", cfg)
        record.update(
            pairs=len(xs),
            test_mse=history["test_mse"][-1],
            test_mse_epoch0=history["test_mse"][0],
            identity_mse=history["identity_mse"],
        )
        write_metrics([record], metrics_path)
        print(
            f"predictor: {len(xs)} pairs, held-out mse {history['test_mse'][-1]:.6f} "
            f"vs hold-last {history['identity_mse']:.6f}"
        )
        return 0

    model = Model.build(cfg.model, np.random.default_rng(cfg.seed))
    print(
        f"training {cfg.train.epochs} epochs x {cfg.train.workers} workers, "
        f"comm={cfg.comm.mode}, fingerprint={cfg.fingerprint}"
    )

    def on_epoch(rec):
        full = _base_record("epoch", cfg)
        full.update(rec)
        write_metrics([full], metrics_path)
        if rec["epoch"] % max(1, cfg.train.epochs // 20) == 0:
            print(
                f"  epoch {rec['epoch']:5d} p={rec['arrival_p']:.3f} "
                f"tau_s={rec['tau_s']:6.2f} success={rec['success_rate']:.2f}"
            )

    tr.train(model, cfg.env, cfg.comm, cfg.train, on_epoch=on_epoch)
    nn.save(model.nets, out / "checkpoint.qmn")
    meta = {
        "fingerprint": cfg.fingerprint,
        "config": cfg.canonical,
        "epochs": cfg.train.epochs,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / 'checkpoint.qmn'}")
    return 0


def _comm_for_sweep(cfg: RunConfig, kind: str, value) -> tr.CommConfig:
    base = cfg.comm.round_config
    if kind == "n_c":
        rc = ch.RoundConfig.for_capacity(
            int(value), base.slots_query, base.slots_per_message
        )
        return dataclasses.replace(cfg.comm, round_config=rc)
    if kind == "T":
        rc = ch.RoundConfig(
            slots_total=int(value),
            slots_query=base.slots_query,
            slots_per_query=base.slots_per_query,
            slots_per_message=base.slots_per_message,
        )
        return dataclasses.replace(cfg.comm, round_config=rc)
    if kind == "mode":
        return dataclasses.replace(cfg.comm, mode=str(value))
    raise ConfigError(f"sweep kind {kind!r} cannot be evaluated on one checkpoint")


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.preset, args.set)
    model = _load_model(cfg, args.checkpoint)
    predictor = None
    if args.predictor:
        predictor = nn.load(args.predictor)["predictor"]
    elif cfg.comm.cache_mode == "predict":
        raise ConfigError("comm.cache is 'predict' but no --predictor was given")

    comms = [cfg.comm]
    if args.sweep:
        if cfg.sweep is None:
            raise ConfigError("--sweep given but the config has no sweep section")
        comms = [
            _comm_for_sweep(cfg, cfg.sweep["kind"], v) for v in cfg.sweep["values"]
        ]

    records = []
    for comm in comms:
        stats = tr.evaluate(
            model, cfg.env, comm, episodes=args.episodes, seed=args.seed,
            predictor=predictor,
        )
        rec = _eval_record(cfg, comm, stats, cfg.model.s_m)
        records.append(rec)
        label = f"mode={comm.mode} n_c={rec['n_c']} T={rec['T']}"
        print(
            f"eval {label}: tau_s={rec['tau_s_mean']:.3f} "
            f"(se {rec['tau_s_se']:.3f}) success={rec['success_rate']:.3f}"
        )
    if args.out:
        write_metrics(records, args.out)
    return 0


def cmd_protocol_sim(args) -> int:
    rng = np.random.default_rng(args.seed)
    records = []
    if args.rounds:
        rc = ch.RoundConfig.for_capacity(args.capacity, args.t_q_slots, args.t_m)
        stats = ch.simulate_protocol_rounds(
            rc, n_rounds=args.rounds, rng=rng, persistence=args.persistence
        )
        rec = {"schema": METRICS_SCHEMA_VERSION, "kind": "protocol",
               "seed": args.seed, "study": "rounds"}
        rec.update(stats)
        records.append(rec)
        print(json.dumps(stats, indent=2))
        if stats["scheduled_collisions"] or stats["schedule_mismatches"]:
            print("invariant violation in the scheduled message phase", file=sys.stderr)
            return 1
    else:
        theory = ch.collision_probability(args.t_idle, args.n_new)
        empirical = ch.simulate_first_attempt(
            args.t_idle, args.n_new, trials=args.trials, rng=rng
        )
        rec = {
            "schema": METRICS_SCHEMA_VERSION, "kind": "protocol",
            "seed": args.seed, "study": "first_attempt",
            "t_idle": args.t_idle, "n_new": args.n_new, "trials": args.trials,
            "p_empirical": empirical, "p_theory": theory,
            "abs_error": abs(empirical - theory),
        }
        records.append(rec)
        print(
            f"t_idle={args.t_idle} n_new={args.n_new}: empirical {empirical:.5f} "
            f"theory {theory:.5f} |err| {abs(empirical - theory):.5f}"
        )
    if args.out:
        write_metrics(records, args.out)
    return 0


def cmd_importance_audit(args) -> int:
    cfg = load_config(args.config, args.preset, args.set)
    model = _load_model(cfg, args.checkpoint)
    rows = audit_importance(model, cfg, samples=args.samples, seed=args.seed)
    if not rows:
        print("no usable contexts collected", file=sys.stderr)
        return 1
    exact = np.array([r["exact"] for r in rows])
    grad = np.array([r["gradient"] for r in rows])
    approx = np.array([r["approx"] for r in rows])
    from scipy import stats as sps

    def report(name, a, b):
        pear = float(np.corrcoef(a, b)[0, 1])
        spear = float(sps.spearmanr(a, b).statistic)
        print(f"{name}: pearson {pear:.4f} spearman {spear:.4f}")

    print(f"{len(rows)} sampled (receiver, sender) contexts")
    report("exact    vs gradient", exact, grad)
    report("exact    vs approx  ", exact, approx)
    report("gradient vs approx  ", grad, approx)
    if args.out:
        rec = _base_record("audit", cfg)
        rec.update(
            samples=len(rows),
            pearson_exact_gradient=float(np.corrcoef(exact, grad)[0, 1]),
            pearson_exact_approx=float(np.corrcoef(exact, approx)[0, 1]),
            spearman_exact_approx=float(sps.spearmanr(exact, approx).statistic),
        )
        write_metrics([rec], args.out)
    return 0


def audit_importance(model: Model, cfg: RunConfig, samples: int, seed: int) -> list[dict]:
    """Exact / first-order / query-factorized importance on live contexts.

    Contexts come from full-communication rollouts: sender i's fresh message
    against its previous-round message at receiver j's aggregation input.
    """
    comm = tr.CommConfig(mode="full")
    rows = []
    ep = 0
    rng = np.random.default_rng(seed)
    while len(rows) < samples and ep < samples:
        traj = tr.rollout(
            model, cfg.env, comm,
            np.random.default_rng([seed, ep, 0xE0]),
            np.random.default_rng([seed, ep, 0xAC]),
            collect=True,
        )
        prev = None
        for rg in traj.rounds:
            if rg is None:
                prev = None
                continue
            if prev is not None and len(rg.ids) >= 2:
                shared = [u for u in rg.uids if u in prev]
                if shared:
                    uid_i = shared[rng.integers(len(shared))]
                    i = rg.uids.index(uid_i)
                    j = int(rng.choice([k for k in range(len(rg.ids)) if k != i]))
                    m_new = rg.messages[i]
                    m_alt = model.reconstruct_message(rg.used_q[i], prev[uid_i]) \
                        if model.config.variant == "generation" else prev[uid_i]
                    q_j, q_i = rg.queries[j], rg.queries[i]
                    h_j = rg.hidden[j]
                    base_agg = _receiver_aggregate(rg, j)
                    w = float(np.dot(q_j, q_i))
                    count = rg.counts[j]

                    def f(m):
                        c = base_agg + w * (m - m_new) / count
                        return model.act(h_j, c)[0]

                    jac = policy_message_jacobian(model, h_j, base_agg)
                    rows.append({
                        "exact": importance_exact(f, m_new, m_alt),
                        "gradient": importance_gradient(jac / count, q_j, q_i, m_new, m_alt),
                        "approx": importance_approx(
                            q_j, q_i, float(np.linalg.norm(rg.payload[i] - prev[uid_i]))
                        ),
                    })
                    if len(rows) >= samples:
                        break
            prev = {u: rg.payload[k] for k, u in enumerate(rg.uids)}
        ep += 1
    return rows


def _receiver_aggregate(rg, j: int) -> np.ndarray:
    votes = np.where(rg.include[j], rg.weights[j], 0.0)
    return (votes @ rg.messages) / rg.counts[j]


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for preset in ("setting1", "setting2"):
        cfg = load_config(None, preset, None)
        model = Model.build(cfg.model, rng)
        nets = dict(model.nets)
        nets["predictor"] = nn.init(
            [cfg.model.payload_size, 2 * cfg.model.payload_size, cfg.model.payload_size],
            ["tanh", "identity"], rng,
        )
        for name, net in nets.items():
            err = nn.finite_difference_probe(net, rng, probes_per_layer=args.probes)
            worst = max(worst, err)
            status = "ok" if err <= 1e-4 else "FAIL"
            print(f"{preset}/{name}: max rel err {err:.2e} [{status}]")
    print(f"worst over all blocks: {worst:.2e}")
    return 0 if worst <= 1e-4 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qmarl",
        description="query/message multi-agent RL under wireless constraints",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", help="path to a JSON config")
        p.add_argument("--preset", help=f"packaged preset ({', '.join(preset_names())})")
        p.add_argument("--set", action="append", default=[], metavar="PATH=JSON",
                       help="override a config key, e.g. --set comm.n_c=3")

    p = sub.add_parser("train", help="train a policy, or fit the message predictor")
    add_config_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--fit-predictor", action="store_true",
                   help="fit the message predictor on rollouts of --checkpoint")
    p.add_argument("--checkpoint", help="policy checkpoint (predictor fitting)")
    p.add_argument("--episodes", type=int, default=200,
                   help="rollout episodes for predictor data")
    p.add_argument("--predictor-epochs", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--predictor", help="predictor checkpoint for predict cache mode")
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sweep", action="store_true",
                   help="evaluate every value of the config's sweep section")
    p.add_argument("--out", help="append eval records to this metrics file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("protocol-sim", help="model-free channel Monte Carlo")
    p.add_argument("--t-idle", type=int, default=10)
    p.add_argument("--n-new", type=int, default=3)
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--rounds", type=int, default=0,
                   help="run the long-run acquisition study for this many rounds")
    p.add_argument("--capacity", type=int, default=3)
    p.add_argument("--t-q-slots", type=int, default=11, help="query-phase slots")
    p.add_argument("--t-m", type=int, default=3, help="slots per message")
    p.add_argument("--persistence", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_protocol_sim)

    p = sub.add_parser("importance-audit",
                       help="compare exact/first-order/factorized importance")
    add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_importance_audit)

    p = sub.add_parser("gradcheck", help="finite-difference audit of every block")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probes", type=int, default=8)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, nn.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
