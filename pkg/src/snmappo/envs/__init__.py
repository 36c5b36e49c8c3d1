"""Cooperative sparse-reward environments.

Environment names are ``warehouse-<layout>`` (``tiny-2ag``, ``tiny-4ag``,
``small-2ag``) and ``skirmish-<scenario>`` (``5v5``, ``5v6``, ``8v9``).
"""

from __future__ import annotations

from ..errors import ConfigError
from .base import N_ACTIONS, DecPomdpSpec, StepResult
from .skirmish import SCENARIOS, SkirmishEnv
from .warehouse import LAYOUTS, WarehouseEnv, WarehouseLayout

ENV_NAMES = tuple(f"warehouse-{k}" for k in LAYOUTS) + tuple(f"skirmish-{k}" for k in SCENARIOS)


def make_env(name: str, **kwargs):
    kind, _, variant = name.partition("-")
    if kind == "warehouse" and variant in LAYOUTS:
        return WarehouseEnv(variant, **kwargs)
    if kind == "skirmish" and variant in SCENARIOS:
        return SkirmishEnv(variant, **kwargs)
    raise ConfigError(f"unknown environment {name!r}; choose from {list(ENV_NAMES)}")


__all__ = [
    "DecPomdpSpec",
    "ENV_NAMES",
    "N_ACTIONS",
    "SkirmishEnv",
    "StepResult",
    "WarehouseEnv",
    "WarehouseLayout",
    "make_env",
]
