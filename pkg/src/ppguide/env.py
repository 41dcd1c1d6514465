"""Gated navigation toy task.

An agent starts near the bottom edge of the unit square and has to reach a
goal disc at the top. A rectangular trap sits between them; touching it ends
the episode as a failure, as does running out of time. The scripted expert
skirts the trap on the left or on the right, which makes the demonstration
distribution bimodal below the trap.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

HORIZON = 100
GOAL = np.array([0.5, 0.95])
GOAL_RADIUS = 0.07
TRAP_LO = np.array([0.35, 0.45])
TRAP_HI = np.array([0.65, 0.60])
MAX_ACTION = 0.08
START_LO = np.array([0.2, 0.02])
START_HI = np.array([0.8, 0.10])

OBS_DIM = 4
ACT_DIM = 2

SUCCESS = "success"
FAILURE = "failure"
MODES = ("left", "right")

# expert geometry
EXPERT_SPEED = 0.015
EXPERT_GAIN = 0.5
SIDE_MARGIN = 0.03
_SIDE_X = {"left": TRAP_LO[0] - SIDE_MARGIN, "right": TRAP_HI[0] + SIDE_MARGIN}
LIFT = 0.0
FORK_Y = 0.12
_ABOVE_Y = TRAP_HI[1] + 0.05

ENV_STREAM = 0


class TerminalStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvState:
    pos: np.ndarray
    t: int = 0
    done: bool = False
    outcome: Optional[str] = None

    @property
    def goal(self) -> np.ndarray:
        return GOAL


def env_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(ENV_STREAM,)))


def reset(seed: int) -> EnvState:
    u = env_rng(seed).random(2)
    return EnvState(pos=START_LO + u * (START_HI - START_LO))


def observe(state: EnvState) -> np.ndarray:
    return np.concatenate([state.pos, GOAL - state.pos])


def in_trap(pos) -> np.ndarray:
    pos = np.asarray(pos)
    return np.all((pos >= TRAP_LO) & (pos <= TRAP_HI), axis=-1)


def in_goal(pos) -> np.ndarray:
    pos = np.asarray(pos)
    return np.linalg.norm(pos - GOAL, axis=-1) < GOAL_RADIUS


def step_arrays(pos: np.ndarray, t: np.ndarray, action: np.ndarray):
    """Vectorized transition on ``(n, 2)`` positions.

    Returns new positions, new timesteps, a done mask and a success mask.
    """
    a = np.clip(action, -MAX_ACTION, MAX_ACTION)
    new = np.clip(pos + a, 0.0, 1.0)
    t = t + 1
    success = in_goal(new)
    trapped = in_trap(new) & ~success
    done = success | trapped | (t >= HORIZON)
    return new, t, done, success


def step(state: EnvState, action) -> tuple[EnvState, np.ndarray, bool, Optional[str]]:
    if state.done:
        raise TerminalStateError("cannot step a terminal state")
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (ACT_DIM,):
        raise ValueError(f"action must have shape (2,), got {action.shape}")
    pos, t, done, success = step_arrays(state.pos[None], np.array([state.t]), action[None])
    outcome = None
    if done[0]:
        outcome = SUCCESS if success[0] else FAILURE
    new = replace(state, pos=pos[0], t=int(t[0]), done=bool(done[0]), outcome=outcome)
    return new, observe(new), bool(done[0]), outcome


def expert_target(pos: np.ndarray, mode: str) -> np.ndarray:
    x, y = pos
    side = _SIDE_X[mode]
    if y > TRAP_HI[1]:
        return GOAL.copy()
    clear = x < TRAP_LO[0] - SIDE_MARGIN / 2 if mode == "left" else x > TRAP_HI[0] + SIDE_MARGIN / 2
    if clear:
        return np.array([side, _ABOVE_Y + 0.03])
    if y < FORK_Y:
        return np.array([x, FORK_Y + 0.01])
    return np.array([side, y + LIFT])


def scripted_expert(state: EnvState, mode: str) -> np.ndarray:
    """Proportional controller toward the active waypoint, speed-capped."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    delta = expert_target(state.pos, mode) - state.pos
    a = EXPERT_GAIN * delta
    norm = np.linalg.norm(a)
    if norm > EXPERT_SPEED:
        a *= EXPERT_SPEED / norm
    return np.clip(a, -MAX_ACTION, MAX_ACTION)


@dataclass
class Demo:
    seed: int
    mode: str
    observations: np.ndarray  # (T, 4), observation before each action
    actions: np.ndarray  # (T, 2)
    outcome: str

    def __len__(self):
        return len(self.actions)


def run_expert(seed: int, mode: str) -> Demo:
    state = reset(seed)
    obs, acts = [], []
    while not state.done:
        a = scripted_expert(state, mode)
        obs.append(observe(state))
        acts.append(a)
        state, _, _, _ = step(state, a)
    return Demo(seed, mode, np.array(obs), np.array(acts), state.outcome)


NEAR_SIDE_PROB = 0.8


def demo_mode(seed: int) -> str:
    """Skirt the trap on the side nearer the start, with probability NEAR_SIDE_PROB."""
    near = "left" if reset(seed).pos[0] < 0.5 else "right"
    far = "right" if near == "left" else "left"
    u = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,))).random()
    return near if u < NEAR_SIDE_PROB else far


def collect_demos(n: int, base_seed: int = 0) -> list[Demo]:
    return [run_expert(base_seed + i, demo_mode(base_seed + i)) for i in range(n)]
