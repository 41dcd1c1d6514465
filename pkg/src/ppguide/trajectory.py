"""Rollout records shared by the policy, MIL and labeling stages."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

OBS_CHUNK_DIM = 8
ACT_CHUNK_DIM = 16
INSTANCE_DIM = OBS_CHUNK_DIM + ACT_CHUNK_DIM


@dataclass
class Trajectory:
    """One rollout, i.e. one MIL bag.

    ``obs`` and ``actions`` hold the observation chunk and the sampled action
    chunk of every replanning step, in raw (unnormalized) units. ``positions``
    is the full executed state trace, kept so runs can be compared exactly.
    """

    obs: np.ndarray  # (N, 8)
    actions: np.ndarray  # (N, 16)
    steps: np.ndarray  # (N,) env timestep at which each chunk was sampled
    outcome: str
    seed: int
    epoch: int = -1
    positions: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float64).reshape(-1, OBS_CHUNK_DIM)
        self.actions = np.asarray(self.actions, dtype=np.float64).reshape(-1, ACT_CHUNK_DIM)
        self.steps = np.asarray(self.steps, dtype=np.int64)
        if len(self.obs) == 0:
            raise ValueError("trajectory has no instances")
        if not (len(self.obs) == len(self.actions) == len(self.steps)):
            raise ValueError("obs, actions and steps must have the same length")

    def __len__(self):
        return len(self.obs)

    @property
    def success(self) -> bool:
        return self.outcome == "success"

    @property
    def instances(self) -> np.ndarray:
        """Raw concatenated instances, shape (N, 24)."""
        return np.concatenate([self.obs, self.actions], axis=1)

    def permuted(self, order) -> "Trajectory":
        order = np.asarray(order)
        return Trajectory(
            self.obs[order], self.actions[order], self.steps[order],
            self.outcome, self.seed, self.epoch, self.positions, dict(self.meta),
        )
