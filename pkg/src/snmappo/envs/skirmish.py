"""Two-team grid skirmish with death/win rewards only.

Learning allies fight a scripted enemy team. Each living unit has integer hit
points; an attack deals 1 damage to a unit within Chebyshev distance 1. Allies
act first in index order, then each living enemy attacks an adjacent ally or
steps greedily toward the nearest one. The team reward is +10 per enemy killed,
-10 per ally lost, +200 for eliminating the enemy team and -200 for losing every
ally. There is no health-based shaping.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from . import _kernels as K
from .base import N_ACTIONS, DecPomdpSpec, StepResult, validate_actions

ACTION_NAMES = ("noop", "up", "down", "left", "right", "attack")

SCENARIOS = {
    "5v5": (5, 5),
    "5v6": (5, 6),
    "8v9": (8, 9),
}

KILL_REWARD = 10.0
WIN_REWARD = 200.0


class SkirmishEnv:
    def __init__(self, scenario: str = "5v6", height: int = 10, width: int = 10, max_health: int = 10,
                 sight: int = 3, episode_limit: int = 200) -> None:
        if scenario not in SCENARIOS:
            raise ConfigError(f"unknown skirmish scenario {scenario!r}; choose from {sorted(SCENARIOS)}")
        self.scenario = scenario
        self.n_allies, self.n_enemies = SCENARIOS[scenario]
        self.n_units = self.n_allies + self.n_enemies
        if max(self.n_allies, self.n_enemies) > 2 * height:
            raise ConfigError("grid too small for the spawn columns")
        self.height, self.width = height, width
        self.max_health = max_health
        self.sight = sight
        self.episode_limit = episode_limit
        self.n_agents = self.n_allies
        self.spec = DecPomdpSpec(
            n_agents=self.n_allies,
            n_actions=N_ACTIONS,
            observation_dim=3 + 5 * (self.n_units - 1),
            global_state_dim=3 * self.n_units + 1,
            episode_limit=episode_limit,
            action_names=ACTION_NAMES,
        )
        self.rng = np.random.default_rng()
        self.pos = np.zeros((self.n_units, 2), dtype=np.int64)
        self.health = np.zeros(self.n_units, dtype=np.int64)
        self.timestep = 0
        self.enemies_killed = 0
        self.allies_dead = 0
        self.battle_won = False
        self._obs = np.zeros((self.n_allies, self.spec.observation_dim))
        self._masks = np.zeros((self.n_allies, N_ACTIONS), dtype=np.bool_)

    @property
    def alive(self) -> np.ndarray:
        return self.health > 0

    def _spawn(self, n: int, cols: tuple[int, int]) -> np.ndarray:
        cells = [(r, c) for c in cols for r in range(self.height)]
        idx = self.rng.choice(len(cells), size=n, replace=False)
        return np.array([cells[i] for i in idx], dtype=np.int64).reshape(n, 2)

    def reset(self, seed: int | None = None) -> StepResult:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.pos[: self.n_allies] = self._spawn(self.n_allies, (0, 1))
        self.pos[self.n_allies :] = self._spawn(self.n_enemies, (self.width - 2, self.width - 1))
        self.health[:] = self.max_health
        self.timestep = 0
        self.enemies_killed = 0
        self.allies_dead = 0
        self.battle_won = False
        return self._result(0.0, False, False)

    def step(self, actions) -> StepResult:
        actions = validate_actions(actions, self.n_allies, N_ACTIONS)
        killed, lost = K.skirmish_step_kernel(actions, self.pos, self.health, self.n_allies, self.height,
                                              self.width)
        self.enemies_killed += killed
        self.allies_dead += lost
        self.timestep += 1
        reward = KILL_REWARD * (killed - lost)
        won = not self.alive[self.n_allies :].any()
        lost_all = not self.alive[: self.n_allies].any()
        if won:
            reward += WIN_REWARD
            self.battle_won = True
        if lost_all:
            reward -= WIN_REWARD
        terminated = won or lost_all
        truncated = not terminated and self.timestep >= self.episode_limit
        return self._result(float(reward), terminated, truncated)

    def _result(self, reward: float, terminated: bool, truncated: bool) -> StepResult:
        return StepResult(
            observations=self.observations(),
            state=self.global_state(),
            action_masks=self.action_masks(),
            reward=reward,
            terminated=terminated,
            truncated=truncated,
            info={"deliveries": 0, "enemies_killed": self.enemies_killed, "allies_dead": self.allies_dead,
                  "battle_won": self.battle_won},
        )

    def observations(self) -> np.ndarray:
        K.skirmish_observe_kernel(self.pos, self.health, self.n_allies, self.height, self.width,
                                  float(self.max_health), self.sight, self._obs)
        return self._obs.copy()

    def observe(self, agent_id: int) -> np.ndarray:
        return self.observations()[agent_id]

    def action_masks(self) -> np.ndarray:
        K.skirmish_mask_kernel(self.pos, self.health, self.n_allies, self.height, self.width, self._masks)
        return self._masks.copy()

    def action_mask(self, agent_id: int) -> np.ndarray:
        return self.action_masks()[agent_id]

    def global_state(self) -> np.ndarray:
        """Per unit (allies first): col, row, health fraction; then normalized time."""
        units = np.empty((self.n_units, 3))
        units[:, 0] = self.pos[:, 1] / max(self.width - 1, 1)
        units[:, 1] = self.pos[:, 0] / max(self.height - 1, 1)
        units[:, 2] = self.health / self.max_health
        return np.concatenate([units.ravel(), [self.timestep / self.episode_limit]])

    def serialize(self) -> str:
        lines = [f"skirmish {self.scenario} {self.height}x{self.width} t={self.timestep} "
                 f"killed={self.enemies_killed} lost={self.allies_dead} won={int(self.battle_won)}"]
        for j in range(self.n_units):
            team = "ally" if j < self.n_allies else "enemy"
            lines.append(f"{team} {j} row={self.pos[j, 0]} col={self.pos[j, 1]} hp={self.health[j]}")
        return "\n".join(lines) + "\n"

    def check_invariants(self) -> None:
        assert np.all((self.health >= 0) & (self.health <= self.max_health)), "health out of range"
        living = {tuple(p) for p in self.pos[self.alive]}
        assert len(living) == int(self.alive.sum()), "two living units share a cell"
        dead = self.n_units - int(self.alive.sum())
        assert dead == self.enemies_killed + self.allies_dead, "death count mismatch"
