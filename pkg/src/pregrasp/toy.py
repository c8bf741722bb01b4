"""One-dimensional point-mass reach task.

A stand-in environment with a known easy optimum, used to check the SAC
trainer in isolation from the grasping simulation.  The point is velocity
commanded (``x += max_speed * a * dt``) and must settle on a random goal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class PointMassConfig:
    episode_length: int = 50
    dt: float = 0.1
    max_speed: float = 1.0
    bound: float = 1.0
    success_radius: float = 0.05
    success_run: int = 10
    max_relative_speed: float = 0.0  # unused; lets evaluate() override it harmlessly


class PointMassReachEnv:
    observation_dim = 3
    action_dim = 1

    def __init__(self, config: PointMassConfig | None = None):
        self.config = config or PointMassConfig()
        self.episode_length = self.config.episode_length
        self.x = 0.0
        self.goal = 0.0
        self.t = 0
        self.run = 0
        self.success = False

    def _obs(self) -> np.ndarray:
        return np.array([self.x, self.goal, self.goal - self.x])

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        b = self.config.bound
        self.x, self.goal = rng.uniform(-b, b, 2)
        self.t, self.run, self.success = 0, 0, False
        return self._obs()

    def step(self, action):
        c = self.config
        a = float(np.clip(np.asarray(action, float).reshape(-1)[0], -1.0, 1.0))
        self.x = float(np.clip(self.x + c.max_speed * a * c.dt, -2 * c.bound, 2 * c.bound))
        self.t += 1
        err = abs(self.goal - self.x)
        reward = 1.0 - math.tanh(10.0 * err)
        self.run = self.run + 1 if err < c.success_radius else 0
        self.success = self.success or self.run >= c.success_run
        truncated = self.t >= c.episode_length
        return self._obs(), reward, False, truncated, {"success": self.success}
