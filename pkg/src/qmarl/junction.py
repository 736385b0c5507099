"""Traffic-junction gridworld: two 2-cell-wide roads crossing mid-grid.

Geometry on an L x L grid (row, col), one lane per travel direction:

* eastbound  lane = row L//2,   entering at column 0
* westbound  lane = row L//2-1, entering at column L-1
* southbound lane = col L//2-1, entering at row 0
* northbound lane = col L//2,   entering at row L-1

Each arriving vehicle gets one of three routes (straight, left, right); turn
routes switch onto the destination direction's lane inside the central 2x2
junction box. Route tables are generated from L, validated cell by cell, and
serializable as plain text for fixtures.

Per round every alive vehicle either stays or advances one cell along its
route; all moves are simultaneous, a cell holding two or more vehicles counts
every one of them as collided, and collided vehicles keep driving. After
moves, finished vehicles leave, then new arrivals are sampled per direction
(suppressed while the vehicle cap is reached), and rewards are booked for the
vehicles present at the end of the round.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTION_STAY = 0
ACTION_MOVE = 1

REWARD_COLLISION = -10.0
REWARD_TIME = -0.05

DIRECTIONS = ("east", "west", "south", "north")
ROUTE_NAMES = ("straight", "left", "right")


def _generate_routes(size: int) -> dict[tuple[str, int], tuple[tuple[int, int], ...]]:
    half = size // 2
    row_e, row_w = half, half - 1
    col_s, col_n = half - 1, half
    last = size - 1

    def east(cols):
        return [(row_e, c) for c in cols]

    def west(cols):
        return [(row_w, c) for c in cols]

    def south(rows):
        return [(r, col_s) for r in rows]

    def north(rows):
        return [(r, col_n) for r in rows]

    routes = {
        ("east", 0): east(range(size)),
        ("east", 1): east(range(col_n + 1)) + north(range(row_e - 1, -1, -1)),
        ("east", 2): east(range(col_s + 1)) + south(range(row_e + 1, size)),
        ("west", 0): west(range(last, -1, -1)),
        ("west", 1): west(range(last, col_s - 1, -1)) + south(range(row_w + 1, size)),
        ("west", 2): west(range(last, col_n - 1, -1)) + north(range(row_w - 1, -1, -1)),
        ("south", 0): south(range(size)),
        ("south", 1): south(range(row_e + 1)) + east(range(col_s + 1, size)),
        ("south", 2): south(range(row_w + 1)) + west(range(col_s - 1, -1, -1)),
        ("north", 0): north(range(last, -1, -1)),
        ("north", 1): north(range(last, row_w - 1, -1)) + west(range(col_n - 1, -1, -1)),
        ("north", 2): north(range(last, row_e - 1, -1)) + east(range(col_n + 1, size)),
    }
    return {k: tuple(v) for k, v in routes.items()}


@dataclass(frozen=True)
class GridSpec:
    """Environment constants: grid size, cap, vision, arrivals, episode length."""

    size: int
    n_max: int
    vision: int
    arrival_p: float
    episode_rounds: int

    def __post_init__(self):
        if self.size < 6 or self.size % 2:
            raise ValueError("grid size must be even and at least 6")
        if not 0.0 <= self.arrival_p <= 1.0:
            raise ValueError("arrival probability outside [0, 1]")
        if self.n_max < 1 or self.episode_rounds < 1 or self.vision < 0:
            raise ValueError("bad cap, episode length or vision")
        self._validate_routes()

    @property
    def road_cells(self) -> tuple[tuple[int, int], ...]:
        half = self.size // 2
        cells = {
            (r, c)
            for r in range(self.size)
            for c in range(self.size)
            if r in (half - 1, half) or c in (half - 1, half)
        }
        return tuple(sorted(cells))

    @property
    def road_index(self) -> dict[tuple[int, int], int]:
        return {cell: i for i, cell in enumerate(self.road_cells)}

    @property
    def routes(self) -> dict[tuple[str, int], tuple[tuple[int, int], ...]]:
        return _generate_routes(self.size)

    @property
    def entry_cells(self) -> dict[str, tuple[int, int]]:
        return {d: self.routes[(d, 0)][0] for d in DIRECTIONS}

    @property
    def obs_block_size(self) -> int:
        return self.n_max + len(self.road_cells) + len(ROUTE_NAMES)

    @property
    def obs_size(self) -> int:
        return (2 * self.vision + 1) ** 2 * self.obs_block_size

    def _validate_routes(self):
        roads = set(self.road_cells)
        for (direction, rid), path in self.routes.items():
            assert path[0] == self.routes[(direction, 0)][0], "route must start at entry"
            edge = (0, self.size - 1)
            r, c = path[-1]
            assert r in edge or c in edge, "route must end at the grid edge"
            for cell in path:
                assert cell in roads, f"{direction}/{rid}: {cell} off-road"
            for a, b in zip(path, path[1:]):
                assert abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1, "path not contiguous"

    def routes_as_text(self) -> str:
        lines = []
        for (direction, rid), path in sorted(self.routes.items()):
            cells = " ".join(f"({r},{c})" for r, c in path)
            lines.append(f"{direction} {ROUTE_NAMES[rid]}: {cells}")
        return "\n".join(lines) + "\n"


SETTING_1 = GridSpec(size=14, n_max=10, vision=0, arrival_p=0.1, episode_rounds=40)
SETTING_2 = GridSpec(size=18, n_max=15, vision=1, arrival_p=0.1, episode_rounds=60)


@dataclass
class Vehicle:
    """One car: identity, route, progress, and when it entered."""

    vid: int
    direction: str
    route: int
    path: tuple[tuple[int, int], ...]
    pos: int = 0
    entry_round: int = 0

    @property
    def cell(self) -> tuple[int, int]:
        return self.path[self.pos]


@dataclass
class StepResult:
    """Everything one round produced: rewards, collisions, departures, arrivals."""

    round_index: int
    rewards: dict[int, float]
    global_reward: float
    collisions: int
    collided: tuple[int, ...]
    departed: dict[int, int]
    arrived: tuple[int, ...]


@dataclass
class EpisodeOutcome:
    """End-of-episode metric: mean leave time on clean episodes, E otherwise."""

    success: bool
    mean_leave_time: float
    metric: float


def episode_metric(
    leave_times: list[int], any_collision: bool, episode_rounds: int
) -> EpisodeOutcome:
    tau_bar = float(np.mean(leave_times)) if leave_times else float(episode_rounds)
    success = not any_collision
    metric = tau_bar if success else float(episode_rounds)
    return EpisodeOutcome(success=success, mean_leave_time=tau_bar, metric=metric)


class JunctionEnv:
    """Single-threaded environment instance; deterministic under its rng."""

    def __init__(self, spec: GridSpec):
        self.spec = spec
        self.vehicles: dict[int, Vehicle] = {}
        self.round_count = 0
        self.any_collision = False
        self.leave_times: list[int] = []
        self.rng = np.random.default_rng(0)

    def reset(self, rng: np.random.Generator) -> None:
        self.vehicles.clear()
        self.round_count = 0
        self.any_collision = False
        self.leave_times = []
        self.rng = rng

    @property
    def done(self) -> bool:
        return self.round_count >= self.spec.episode_rounds

    def alive_ids(self) -> list[int]:
        return sorted(self.vehicles)

    def _spawn(self, direction: str, route: int) -> int:
        used = set(self.vehicles)
        vid = min(v for v in range(self.spec.n_max) if v not in used)
        self.vehicles[vid] = Vehicle(
            vid=vid,
            direction=direction,
            route=route,
            path=self.spec.routes[(direction, route)],
            entry_round=self.round_count,
        )
        return vid

    def step(self, actions: dict[int, int]) -> StepResult:
        if self.done:
            raise RuntimeError("episode already finished")
        if set(actions) != set(self.vehicles):
            raise ValueError("need exactly one action per alive vehicle")
        self.round_count += 1

        for vid, action in actions.items():
            if action == ACTION_MOVE:
                self.vehicles[vid].pos += 1
            elif action != ACTION_STAY:
                raise ValueError(f"unknown action {action}")

        departed: dict[int, int] = {}
        for vid in list(self.vehicles):
            v = self.vehicles[vid]
            if v.pos >= len(v.path):
                departed[vid] = self.round_count - v.entry_round
                del self.vehicles[vid]
        self.leave_times.extend(departed.values())

        arrived = []
        for direction in DIRECTIONS:
            # draws are consumed unconditionally so paired runs sharing a
            # seed face identical arrival patterns whatever the cap does
            u = self.rng.random()
            route = int(self.rng.integers(len(ROUTE_NAMES)))
            if len(self.vehicles) >= self.spec.n_max:
                continue  # arrivals suppressed at the cap, never queued
            if u < self.spec.arrival_p:
                arrived.append(self._spawn(direction, route))

        occupancy: dict[tuple[int, int], list[int]] = {}
        for vid, v in self.vehicles.items():
            occupancy.setdefault(v.cell, []).append(vid)
        collided = tuple(
            sorted(vid for ids in occupancy.values() if len(ids) >= 2 for vid in ids)
        )
        collisions = len(collided)
        if collisions:
            self.any_collision = True

        rewards = {}
        for vid, v in self.vehicles.items():
            tau = self.round_count - v.entry_round
            rewards[vid] = (
                REWARD_COLLISION * (vid in collided) + tau * REWARD_TIME
            )
        global_reward = collisions * REWARD_COLLISION + sum(
            (self.round_count - v.entry_round) * REWARD_TIME
            for v in self.vehicles.values()
        )
        return StepResult(
            round_index=self.round_count,
            rewards=rewards,
            global_reward=global_reward,
            collisions=collisions,
            collided=collided,
            departed=departed,
            arrived=tuple(arrived),
        )

    def outcome(self) -> EpisodeOutcome:
        if not self.done:
            raise RuntimeError("episode still running")
        return episode_metric(
            self.leave_times, self.any_collision, self.spec.episode_rounds
        )

    # ------------------------------------------------------------------
    # observations
    # ------------------------------------------------------------------

    def observe(self, vid: int) -> np.ndarray:
        """One-hot blocks for the (2V+1)^2 window centered on the vehicle.

        Block layout per cell, row-major over the window: occupant id
        (n_max), occupied road cell (|road|), occupant route (3). Cells that
        are empty, off-road or off-grid stay all-zero; a cell shared by
        collided vehicles shows the smallest id.
        """
        me = self.vehicles[vid]
        spec = self.spec
        occupant: dict[tuple[int, int], int] = {}
        for other_id in sorted(self.vehicles):
            cell = self.vehicles[other_id].cell
            occupant.setdefault(cell, other_id)
        v = spec.vision
        block = spec.obs_block_size
        obs = np.zeros(spec.obs_size)
        row0, col0 = me.cell
        idx = 0
        for dr in range(-v, v + 1):
            for dc in range(-v, v + 1):
                cell = (row0 + dr, col0 + dc)
                other_id = occupant.get(cell)
                if other_id is not None and cell in spec.road_index:
                    other = self.vehicles[other_id]
                    obs[idx + other_id] = 1.0
                    obs[idx + spec.n_max + spec.road_index[cell]] = 1.0
                    obs[idx + spec.n_max + len(spec.road_cells) + other.route] = 1.0
                idx += block
        return obs

    def observe_all(self) -> dict[int, np.ndarray]:
        return {vid: self.observe(vid) for vid in self.alive_ids()}
