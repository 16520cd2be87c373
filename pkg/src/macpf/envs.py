"""Desk-scale cooperative environments and a random finite-MMDP generator."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .numerics import RngStream
from .tabular import TabularMMDP

ACTION_NAMES = "ABCD"

DEFAULT_PAYOFF = (
    (8.0, -20.0, -20.0, -20.0),
    (-12.0, 0.0, 0.0, -20.0),
    (-12.0, 0.0, 0.0, -20.0),
    (-12.0, -12.0, -12.0, 8.0),
)


@dataclass(frozen=True)
class EnvStep:
    observations: list  # per-agent observation vectors
    reward: float
    done: bool
    state: np.ndarray  # global state vector fed to the mixer
    env_state: Any = None  # opaque environment state, passed back to step()
    truncated: bool = False  # episode cut by the horizon rather than a terminal state


@dataclass(frozen=True)
class MatrixGameSpec:
    payoff: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_PAYOFF))
    episode_length: int = 1


def matrix_game_default() -> MatrixGameSpec:
    return MatrixGameSpec()


class MatrixGame:
    """Single-state, single-step two-agent cooperative game."""

    name = "matrix_game"

    def __init__(self, spec: MatrixGameSpec | None = None):
        self.spec = spec or matrix_game_default()
        self.payoff = np.asarray(self.spec.payoff, dtype=np.float64)
        if self.payoff.ndim != 2:
            raise ValueError("payoff must be a 2-D table")
        self.n_agents = 2
        self.actions_per_agent = tuple(self.payoff.shape)
        self.obs_dim = 1
        self.state_dim = 1
        self.horizon = 1
        self.gamma = 0.0

    def _obs(self):
        one = np.ones(1)
        return [one, one.copy()], one.copy()

    def reset(self, rng: RngStream | None = None) -> EnvStep:
        obs, state = self._obs()
        return EnvStep(obs, 0.0, False, state, env_state=0)

    def step(self, env_state, joint_action: Sequence[int], rng: RngStream | None = None) -> EnvStep:
        a1, a2 = _check_actions(joint_action, self.actions_per_agent)
        obs, state = self._obs()
        return EnvStep(obs, float(self.payoff[a1, a2]), True, state, env_state=1)

    def to_mmdp(self) -> TabularMMDP:
        A = self.payoff.size
        return TabularMMDP(self.actions_per_agent, np.ones((1, A, 1)), self.payoff.reshape(1, A), 0.0)


def _check_actions(joint_action, actions_per_agent) -> tuple[int, ...]:
    if len(joint_action) != len(actions_per_agent):
        raise ValueError(f"expected {len(actions_per_agent)} actions, got {len(joint_action)}")
    out = []
    for a, k in zip(joint_action, actions_per_agent):
        if int(a) != a or not 0 <= a < k:
            raise ValueError(f"action {a} outside range [0, {k})")
        out.append(int(a))
    return tuple(out)


@dataclass(frozen=True)
class PointMassSpec:
    goals: tuple = ((5.0, 0.0), (0.0, 5.0), (-5.0, 0.0), (0.0, -5.0))
    sigma: float = 1.0
    peak: float = 1.0
    n_directions: int = 8
    step_size: float = 0.5
    half_width: float = 7.0
    horizon: int = 50
    start_spread: float = 1.0  # initial position uniform in [-spread, spread]^2
    gamma: float = 0.95

    def __post_init__(self):
        if self.sigma <= 0 or self.horizon < 1 or self.n_directions < 1:
            raise ValueError("sigma must be positive and horizon, n_directions at least 1")


class PointMass:
    """2-D point mass moved only when both agents pick the same direction.

    Action 0 is "stay"; action ``k >= 1`` moves ``step_size`` at angle
    ``2*pi*(k-1)/n_directions``. Reward is the Gaussian mixture centred on the
    goals, evaluated at the new position.
    """

    name = "point_mass"

    def __init__(self, spec: PointMassSpec | None = None):
        self.spec = spec or PointMassSpec()
        s = self.spec
        self.goals = np.asarray(s.goals, dtype=np.float64)
        self.n_agents = 2
        self.actions_per_agent = (s.n_directions + 1,) * 2
        angles = 2 * np.pi * np.arange(s.n_directions) / s.n_directions
        self.directions = np.vstack([np.zeros(2), np.stack([np.cos(angles), np.sin(angles)], 1)])
        self.directions[np.abs(self.directions) < 1e-12] = 0.0
        self.obs_dim = 2
        self.state_dim = 2
        self.horizon = s.horizon
        self.gamma = s.gamma

    def reward_at(self, pos) -> float:
        d2 = ((self.goals - np.asarray(pos, dtype=np.float64)) ** 2).sum(-1)
        return float(self.spec.peak * np.exp(-d2 / (2 * self.spec.sigma**2)).sum())

    def _step_record(self, pos, t, reward, done, truncated=False) -> EnvStep:
        obs = pos / self.spec.half_width
        return EnvStep([obs.copy(), obs.copy()], reward, done, obs.copy(), env_state=(pos.copy(), t),
                       truncated=truncated)

    def reset(self, rng: RngStream | None = None, position=None) -> EnvStep:
        if position is not None:
            pos = np.asarray(position, dtype=np.float64)
        elif rng is not None and self.spec.start_spread > 0:
            pos = rng.uniform(-self.spec.start_spread, self.spec.start_spread, size=2)
        else:
            pos = np.zeros(2)
        return self._step_record(pos, 0, 0.0, False)

    def step(self, env_state, joint_action: Sequence[int], rng: RngStream | None = None) -> EnvStep:
        a1, a2 = _check_actions(joint_action, self.actions_per_agent)
        pos, t = env_state
        pos = np.array(pos, dtype=np.float64)
        if a1 == a2:
            pos = pos + self.spec.step_size * self.directions[a1]
        t += 1
        outside = bool(np.any(np.abs(pos) > self.spec.half_width))
        timeout = t >= self.spec.horizon
        return self._step_record(pos, t, self.reward_at(pos), outside or timeout, timeout and not outside)

    def nearest_goal(self, pos) -> tuple[int, float]:
        d = np.sqrt(((self.goals - np.asarray(pos)) ** 2).sum(-1))
        k = int(np.argmin(d))
        return k, float(d[k])


def make_env(name: str, **kwargs):
    if name == "matrix_game":
        payoff = kwargs.pop("payoff", None)
        spec = MatrixGameSpec() if payoff is None else MatrixGameSpec(np.asarray(payoff, dtype=np.float64))
        return MatrixGame(spec)
    if name == "point_mass":
        return PointMass(PointMassSpec(**kwargs))
    raise ValueError(f"unknown environment {name!r}")


def write_trajectories_csv(path, trajectories: list[list[dict]]) -> None:
    """Write point-mass paths as rows ``episode,t,x,y,a1,a2,r``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "t", "x", "y", "a1", "a2", "r"])
        for ep, traj in enumerate(trajectories):
            for row in traj:
                w.writerow([ep, row["t"], f"{row['x']:.6f}", f"{row['y']:.6f}",
                            row["a1"], row["a2"], f"{row['r']:.6f}"])


def random_mmdp(seed: int, n_states: int, n_agents: int, actions_per_agent, gamma: float) -> TabularMMDP:
    """Random finite MMDP: Dirichlet(1) transition rows, uniform [-1, 1] rewards."""
    if isinstance(actions_per_agent, int):
        actions_per_agent = (actions_per_agent,) * n_agents
    actions_per_agent = tuple(int(k) for k in actions_per_agent)
    if len(actions_per_agent) != n_agents:
        raise ValueError("actions_per_agent must list one count per agent")
    rng = RngStream(seed).split("random_mmdp")
    A = int(np.prod(actions_per_agent))
    raw = rng.exponential(1.0, size=(n_states, A, n_states)) + 1e-12
    transition = raw / raw.sum(-1, keepdims=True)
    reward = rng.uniform(-1.0, 1.0, size=(n_states, A))
    return TabularMMDP(actions_per_agent, transition, reward, gamma)
