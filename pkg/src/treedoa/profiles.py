"""Canonical array and tree geometries used by the benchmarks.

"desk" is small enough to train and sweep on one CPU core in minutes; the
"full" profiles carry the 64-element geometry with the deep hidden stack,
in two- and three-level tree variants that share the same 1-degree leaf
grid.
"""

from __future__ import annotations

from .array_signal import ArrayConfig, feature_length
from .tree import TreeSpec

__all__ = [
    "DESK_HIDDEN",
    "FULL_HIDDEN",
    "desk_array",
    "full_array",
    "desk_tree",
    "full_tree_2level",
    "full_tree_3level",
    "get_profile",
    "PROFILE_NAMES",
]

DESK_HIDDEN = (128, 64, 32)
FULL_HIDDEN = (512, 256, 128, 64, 32, 16)

PROFILE_NAMES = ("desk", "full", "full2")


def desk_array() -> ArrayConfig:
    return ArrayConfig(num_elements=16)


def full_array() -> ArrayConfig:
    return ArrayConfig(num_elements=64)


def desk_tree() -> TreeSpec:
    return TreeSpec(
        fanouts=(6, 5, 4),
        hidden_sizes=DESK_HIDDEN,
        input_dim=feature_length(16),
    )


def full_tree_3level() -> TreeSpec:
    return TreeSpec(
        fanouts=(6, 5, 4),
        hidden_sizes=FULL_HIDDEN,
        input_dim=feature_length(64),
    )


def full_tree_2level() -> TreeSpec:
    return TreeSpec(
        fanouts=(12, 10),
        hidden_sizes=FULL_HIDDEN,
        input_dim=feature_length(64),
    )


def get_profile(name: str) -> tuple[ArrayConfig, TreeSpec]:
    """Resolve a profile name to its (array, tree) pair."""
    if name == "desk":
        return desk_array(), desk_tree()
    if name == "full":
        return full_array(), full_tree_3level()
    if name == "full2":
        return full_array(), full_tree_2level()
    raise ValueError(f"unknown profile {name!r}; expected one of {PROFILE_NAMES}")
