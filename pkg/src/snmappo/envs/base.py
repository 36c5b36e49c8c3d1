from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import UsageError

NOOP, UP, DOWN, LEFT, RIGHT, INTERACT = range(6)
N_ACTIONS = 6


@dataclass(frozen=True)
class DecPomdpSpec:
    """Static description of a cooperative partially observable task."""

    n_agents: int
    n_actions: int
    observation_dim: int
    global_state_dim: int
    episode_limit: int
    action_names: tuple[str, ...] = ()


@dataclass
class StepResult:
    observations: np.ndarray  # (n_agents, observation_dim)
    state: np.ndarray  # (global_state_dim,)
    action_masks: np.ndarray  # (n_agents, n_actions) bool
    reward: float = 0.0
    terminated: bool = False
    truncated: bool = False
    info: dict = field(default_factory=dict)

    @property
    def done(self) -> bool:
        return self.terminated or self.truncated


def validate_actions(actions, n_agents: int, n_actions: int) -> np.ndarray:
    try:
        arr = np.asarray(actions)
    except Exception as exc:  # noqa: BLE001 - anything unparsable is malformed
        raise UsageError(f"malformed joint action: {actions!r}") from exc
    if arr.shape != (n_agents,) or not np.issubdtype(arr.dtype, np.integer):
        raise UsageError(f"joint action must be {n_agents} integers, got {actions!r}")
    if arr.min() < 0 or arr.max() >= n_actions:
        raise UsageError(f"action out of range [0, {n_actions}): {actions!r}")
    return arr.astype(np.int64)
