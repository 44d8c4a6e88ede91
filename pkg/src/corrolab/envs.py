"""Desk-scale parametric task families with analytic dynamics and rewards.

Three families share the structure "tasks differ in reward xor transition":

* point-robot      2D navigation to a hidden goal; reward varies per task.
* line-vel         1D velocity tracking (double integrator); reward varies.
* point-robot-dyn  2D navigation with per-task gain/rotation dynamics and a
                   fixed goal; only the transition varies.

All dynamics are deterministic; episodes always run to the family horizon.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from corrolab.errors import DimensionMismatch, EpisodeFinished

POINT_ROBOT = "point-robot"
LINE_VEL = "line-vel"
POINT_ROBOT_DYN = "point-robot-dyn"
FAMILIES = (POINT_ROBOT, LINE_VEL, POINT_ROBOT_DYN)

_DYN_GOAL = np.array([0.75, 0.0])


@dataclass(frozen=True)
class TaskSpec:
    family: str
    params: tuple

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown task family {self.family!r} (known: {FAMILIES})")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        expected = 1 if self.family == LINE_VEL else 2
        if len(self.params) != expected:
            raise DimensionMismatch(f"{self.family} params", expected, len(self.params))


@dataclass
class EnvState:
    observation: np.ndarray
    step_index: int


@dataclass(frozen=True)
class StepResult:
    next_observation: np.ndarray
    reward: float
    done: bool


def obs_dim(family):
    return 2


def action_dim(family):
    return 1 if family == LINE_VEL else 2


def action_scale(family):
    """Half-width of the box actions are clipped to."""
    return 1.0 if family == LINE_VEL else 0.1


def horizon(family):
    return 50 if family == LINE_VEL else 20


def transition_varying(family):
    return family == POINT_ROBOT_DYN


def sample_task(family, rng):
    """Draw task parameters from the family's distribution."""
    if family == POINT_ROBOT:
        return TaskSpec(family, tuple(rng.uniform(-1.0, 1.0, 2)))
    if family == LINE_VEL:
        return TaskSpec(family, (rng.uniform(0.0, 3.0),))
    if family == POINT_ROBOT_DYN:
        gain = 1.5 ** rng.uniform(-1.0, 1.0)
        angle = rng.uniform(-np.pi / 4, np.pi / 4)
        return TaskSpec(family, (gain, angle))
    raise ValueError(f"unknown task family {family!r} (known: {FAMILIES})")


def task_descriptor(task):
    """Ground-truth parameter vector, used only by the supervised baseline."""
    return np.asarray(task.params, dtype=np.float64)


def env_reset(task):
    return EnvState(observation=np.zeros(obs_dim(task.family)), step_index=0)


def env_step(task, state, action):
    """Deterministic transition; reward is evaluated at the post-step state."""
    family = task.family
    if state.step_index >= horizon(family):
        raise EpisodeFinished(f"episode finished ({family} horizon {horizon(family)})")
    action = np.asarray(action, dtype=np.float64).ravel()
    if action.size != action_dim(family):
        raise DimensionMismatch(f"{family} action dim", action_dim(family), action.size)

    if family == POINT_ROBOT:
        a = np.clip(action, -0.1, 0.1)
        s_next = np.clip(state.observation + a, -1.0, 1.0)
        reward = -float(np.linalg.norm(s_next - np.asarray(task.params)))
    elif family == LINE_VEL:
        a = float(np.clip(action[0], -1.0, 1.0))
        pos, vel = state.observation
        v_next = float(np.clip(vel + 0.2 * a, -4.0, 4.0))
        s_next = np.array([pos + 0.05 * v_next, v_next])
        reward = -abs(v_next - task.params[0]) - 0.05 * a * a
    else:  # POINT_ROBOT_DYN
        gain, angle = task.params
        a = np.clip(action, -0.1, 0.1)
        c, s = np.cos(angle), np.sin(angle)
        delta = gain * np.array([c * a[0] - s * a[1], s * a[0] + c * a[1]])
        s_next = np.clip(state.observation + delta, -1.0, 1.0)
        reward = -float(np.linalg.norm(s_next - _DYN_GOAL))

    done = state.step_index + 1 >= horizon(family)
    return StepResult(next_observation=s_next, reward=float(reward), done=done)


def next_state(state, result):
    return EnvState(observation=result.next_observation, step_index=state.step_index + 1)
