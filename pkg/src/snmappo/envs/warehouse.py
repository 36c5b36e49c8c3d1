"""Multi-robot warehouse delivery gridworld with a sparse shared reward.

Agents move on a grid of shelves. An agent standing on a shelf may pick it up
(``toggle_load``); while loaded it may only enter cells that are not another
shelf's home, and toggling on the carried shelf's own home puts it back.
Carrying a *requested* shelf onto a goal cell delivers it: the team earns +1,
the shelf returns to its home cell and a new request is drawn. Nothing else is
rewarded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from . import _kernels as K
from .base import N_ACTIONS, DecPomdpSpec, StepResult, validate_actions

ACTION_NAMES = ("noop", "up", "down", "left", "right", "toggle_load")
OBS_DIM = 40


@dataclass(frozen=True)
class WarehouseLayout:
    """Static map: ``'S'`` shelf home, ``'G'`` goal cell, ``'.'`` floor. Agents spawn on the bottom row."""

    rows: tuple[str, ...]
    n_agents: int

    @property
    def height(self) -> int:
        return len(self.rows)

    @property
    def width(self) -> int:
        return len(self.rows[0])

    def cells(self, char: str) -> list[tuple[int, int]]:
        return [(r, c) for r, row in enumerate(self.rows) for c, ch in enumerate(row) if ch == char]


_TINY = (
    "........",
    ".SS..SS.",
    ".SS..SS.",
    "........",
    "........",
    "........",
    "........",
    "..GGGG..",
)
_SMALL = (
    "........",
    ".SS..SS.",
    ".SS..SS.",
    "........",
    ".SS..SS.",
    ".SS..SS.",
    "........",
    "........",
    "........",
    "........",
    "........",
    "..GGGG..",
)

LAYOUTS = {
    "tiny-2ag": WarehouseLayout(_TINY, 2),
    "tiny-4ag": WarehouseLayout(_TINY, 4),
    "small-2ag": WarehouseLayout(_SMALL, 2),
}


class WarehouseEnv:
    def __init__(self, layout: str | WarehouseLayout = "tiny-2ag", episode_limit: int = 500) -> None:
        if isinstance(layout, str):
            if layout not in LAYOUTS:
                raise ConfigError(f"unknown warehouse layout {layout!r}; choose from {sorted(LAYOUTS)}")
            self.layout_name = layout
            layout = LAYOUTS[layout]
        else:
            self.layout_name = "custom"
        if len({len(r) for r in layout.rows}) != 1:
            raise ConfigError("layout rows must have equal length")
        self.layout = layout
        self.n_agents = layout.n_agents
        self.height, self.width = layout.height, layout.width
        self.shelf_home = np.array(layout.cells("S"), dtype=np.int64).reshape(-1, 2)
        self.n_shelves = len(self.shelf_home)
        if self.n_shelves < self.n_agents:
            raise ConfigError("layout needs at least as many shelves as agents")
        if self.n_agents > self.width:
            raise ConfigError("more agents than spawn cells on the goal row")
        self.home_grid = np.full((self.height, self.width), -1, dtype=np.int64)
        for s, (r, c) in enumerate(self.shelf_home):
            self.home_grid[r, c] = s
        self.goal = np.zeros((self.height, self.width), dtype=np.bool_)
        for r, c in layout.cells("G"):
            self.goal[r, c] = True
        self.episode_limit = episode_limit
        self.spec = DecPomdpSpec(
            n_agents=self.n_agents,
            n_actions=N_ACTIONS,
            observation_dim=OBS_DIM,
            global_state_dim=4 * self.n_agents + 4 * self.n_shelves + 1,
            episode_limit=episode_limit,
            action_names=ACTION_NAMES,
        )
        self.rng = np.random.default_rng()
        self._obs = np.zeros((self.n_agents, OBS_DIM))
        self._masks = np.zeros((self.n_agents, N_ACTIONS), dtype=np.bool_)
        self._delivered = np.full(self.n_agents, -1, dtype=np.int64)
        self._alloc()

    def _alloc(self) -> None:
        self.agent_pos = np.zeros((self.n_agents, 2), dtype=np.int64)
        self.carrying = np.full(self.n_agents, -1, dtype=np.int64)
        self.shelf_pos = self.shelf_home.copy()
        self.shelf_grid = np.full((self.height, self.width), -1, dtype=np.int64)
        self.requested = np.zeros(self.n_shelves, dtype=np.bool_)
        self.timestep = 0
        self.deliveries = 0

    # -------------------------------------------------------------- dynamics

    def reset(self, seed: int | None = None) -> StepResult:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self._alloc()
        for s, (r, c) in enumerate(self.shelf_home):
            self.shelf_grid[r, c] = s
        cols = self.rng.choice(self.width, size=self.n_agents, replace=False)
        self.agent_pos[:, 0] = self.height - 1
        self.agent_pos[:, 1] = cols
        self.requested[self.rng.choice(self.n_shelves, size=self.n_agents, replace=False)] = True
        return self._result(0.0, False)

    def step(self, actions) -> StepResult:
        actions = validate_actions(actions, self.n_agents, N_ACTIONS)
        K.warehouse_step_kernel(actions, self.agent_pos, self.carrying, self.shelf_pos, self.shelf_home,
                                self.shelf_grid, self.home_grid, self.requested, self.goal, self._delivered)
        n_delivered = 0
        for s in self._delivered:
            if s >= 0:
                self.requested[s] = False
                candidates = np.flatnonzero(~self.requested)
                self.requested[self.rng.choice(candidates)] = True
                n_delivered += 1
        self.deliveries += n_delivered
        self.timestep += 1
        return self._result(float(n_delivered), self.timestep >= self.episode_limit)

    def _result(self, reward: float, truncated: bool) -> StepResult:
        return StepResult(
            observations=self.observations(),
            state=self.global_state(),
            action_masks=self.action_masks(),
            reward=reward,
            terminated=False,
            truncated=truncated,
            info={"deliveries": self.deliveries, "enemies_killed": 0, "allies_dead": 0, "battle_won": False},
        )

    # ----------------------------------------------------------- observation

    def observations(self) -> np.ndarray:
        K.warehouse_observe_kernel(self.agent_pos, self.carrying, self.shelf_grid, self.requested, self.goal,
                                   self._obs)
        return self._obs.copy()

    def observe(self, agent_id: int) -> np.ndarray:
        return self.observations()[agent_id]

    def action_masks(self) -> np.ndarray:
        K.warehouse_mask_kernel(self.agent_pos, self.carrying, self.shelf_home, self.shelf_grid, self.home_grid,
                                self._masks)
        return self._masks.copy()

    def action_mask(self, agent_id: int) -> np.ndarray:
        return self.action_masks()[agent_id]

    def global_state(self) -> np.ndarray:
        """Agents (col, row, carrying, carried-requested) then shelves (col, row, requested, carried), then time."""
        wn, hn = max(self.width - 1, 1), max(self.height - 1, 1)
        agents = np.zeros((self.n_agents, 4))
        agents[:, 0] = self.agent_pos[:, 1] / wn
        agents[:, 1] = self.agent_pos[:, 0] / hn
        loaded = self.carrying >= 0
        agents[:, 2] = loaded
        agents[loaded, 3] = self.requested[self.carrying[loaded]]
        shelves = np.zeros((self.n_shelves, 4))
        shelves[:, 0] = self.shelf_pos[:, 1] / wn
        shelves[:, 1] = self.shelf_pos[:, 0] / hn
        shelves[:, 2] = self.requested
        shelves[self.carrying[loaded], 3] = 1.0
        return np.concatenate([agents.ravel(), shelves.ravel(), [self.timestep / self.episode_limit]])

    def serialize(self) -> str:
        lines = [f"warehouse {self.layout_name} {self.height}x{self.width} t={self.timestep} deliveries={self.deliveries}"]
        for i in range(self.n_agents):
            r, c = self.agent_pos[i]
            lines.append(f"agent {i} row={r} col={c} carrying={self.carrying[i]}")
        for s in range(self.n_shelves):
            r, c = self.shelf_pos[s]
            lines.append(f"shelf {s} row={r} col={c} requested={int(self.requested[s])}")
        return "\n".join(lines) + "\n"

    def check_invariants(self) -> None:
        cells = {tuple(p) for p in self.agent_pos}
        assert len(cells) == self.n_agents, "two agents share a cell"
        assert int(self.requested.sum()) == self.n_agents, "requested set has wrong size"
        on_grid = self.shelf_grid[self.shelf_grid >= 0]
        carried = self.carrying[self.carrying >= 0]
        assert len(on_grid) + len(carried) == self.n_shelves, "shelf count changed"
        for i, s in enumerate(self.carrying):
            if s >= 0:
                assert tuple(self.shelf_pos[s]) == tuple(self.agent_pos[i]), "carried shelf not with agent"
