"""Pre-grasp tracking task around a free-floating box.

A kinematically driven three-finger gripper has to chase a drifting flat
box and hold a contact-free pose with the box between its open fingers.
The functional core (:func:`reset`, :func:`step` and friends) operates on
:class:`WorldState` values; :class:`PreGraspEnv` wraps it in the
``reset``/``step`` interface the trainer expects.

Observation layout (40 floats)::

    [0:7]   gripper position xyz + quaternion wxyz
    [7:13]  gripper linear + angular velocity
    [13:20] target position + quaternion
    [20:26] target linear + angular velocity
    [26:32] goal pose relative to the gripper: translation and rotation
            vector, both in the gripper frame.  The goal is the nearest of
            the grasp poses related by the box's symmetry rotations.
    [32:38] target velocity - gripper velocity (linear, angular; gripper frame)
    [38]    palm-to-target closest distance
    [39]    total contact force
"""
from __future__ import annotations

import dataclasses
import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geometry import (
    ConvexHull,
    Contact,
    OrientedBox,
    Pose,
    ShapeSet,
    Twist,
    build_convex_hull,
    closest_distance,
    collect_contacts,
    euler_to_quaternion,
    geodesic_angle,
    hull_contains_many,
    quat_conj,
    quat_from_rotvec,
    quat_mul,
    quat_normalize,
    quat_rotate,
    quat_to_matrix,
    quat_to_rotvec,
    random_quaternion,
    rotation_vector_between,
)

OBS_DIM = 40
ACTION_DIM = 6

# slices into the observation vector
GRIPPER_POSE = slice(0, 7)
GRIPPER_TWIST = slice(7, 13)
TARGET_POSE = slice(13, 20)
TARGET_TWIST = slice(20, 26)
POSE_ERROR = slice(26, 32)
TWIST_ERROR = slice(32, 38)
DISTANCE = 38
CONTACT_FORCE = 39


class InvalidConfigError(ValueError):
    pass


class EpisodeFinishedError(RuntimeError):
    pass


# ------------------------------------------------------------------ #
# Configuration
# ------------------------------------------------------------------ #
# Gripper frame: +z is the approach direction, the palm sits at the origin.
# Box pinched across its thin axis: gripper x <- box z, gripper z <- box x.
_DEFAULT_OFFSET_QUAT = [0.0, math.sqrt(0.5), 0.0, math.sqrt(0.5)]

KEYPOINT_RULES = ("corners_center", "corners", "center", "grid")


@dataclass
class EnvConfig:
    dt: float = 0.02
    episode_length: int = 500
    box_half_extents: Tuple[float, float, float] = (0.1, 0.1, 0.02)
    target_mass: float = 0.5
    max_action_translation: float = 0.010
    max_action_rotation: float = 0.1
    max_relative_speed: float = 0.4
    max_angular_speed: float = 0.0
    keypoint_rule: str = "corners_center"
    keypoint_grid: int = 3
    contact_stiffness: float = 1000.0
    contact_damping: float = 10.0
    spawn_low: Tuple[float, float, float] = (-0.4, 0.55, 0.85)
    spawn_high: Tuple[float, float, float] = (0.4, 0.9, 1.35)
    gripper_home: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    grasp_offset_position: Tuple[float, float, float] = (-0.16, 0.0, 0.0)
    grasp_offset_orientation: Tuple[float, float, float, float] = tuple(_DEFAULT_OFFSET_QUAT)
    workspace_radius: float = 3.0
    success_threshold: float = 2.0
    success_run: int = 200
    goal_symmetry: bool = True

    def validate(self) -> "EnvConfig":
        def bad(name, why):
            raise InvalidConfigError(f"env.{name}: {why}")

        if not self.dt > 0:
            bad("dt", "must be > 0")
        if int(self.episode_length) != self.episode_length or self.episode_length < 1:
            bad("episode_length", "must be an integer >= 1")
        if len(self.box_half_extents) != 3 or min(self.box_half_extents) <= 0:
            bad("box_half_extents", "need three positive values")
        if not self.target_mass > 0:
            bad("target_mass", "must be > 0")
        if not self.max_action_translation > 0:
            bad("max_action_translation", "must be > 0")
        if not self.max_action_rotation > 0:
            bad("max_action_rotation", "must be > 0")
        if not self.max_relative_speed >= 0:
            bad("max_relative_speed", "must be >= 0")
        if not self.max_angular_speed >= 0:
            bad("max_angular_speed", "must be >= 0")
        if self.keypoint_rule not in KEYPOINT_RULES:
            bad("keypoint_rule", f"must be one of {KEYPOINT_RULES}")
        if self.keypoint_grid < 2:
            bad("keypoint_grid", "must be >= 2")
        if self.contact_stiffness < 0 or self.contact_damping < 0:
            bad("contact_stiffness", "stiffness and damping must be >= 0")
        lo, hi = np.asarray(self.spawn_low, float), np.asarray(self.spawn_high, float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi < lo):
            bad("spawn_low", "spawn region is empty")
        if len(self.gripper_home) != 3:
            bad("gripper_home", "need three values")
        if len(self.grasp_offset_position) != 3:
            bad("grasp_offset_position", "need three values")
        q = np.asarray(self.grasp_offset_orientation, float)
        if q.shape != (4,) or not np.isfinite(q).all() or np.linalg.norm(q) < 1e-9:
            bad("grasp_offset_orientation", "need a non-zero quaternion wxyz")
        if not self.workspace_radius > 0:
            bad("workspace_radius", "must be > 0")
        if self.success_run < 1:
            bad("success_run", "must be >= 1")
        if not isinstance(self.goal_symmetry, bool):
            bad("goal_symmetry", "must be true or false")
        return self

    @property
    def target_inertia(self) -> np.ndarray:
        """Principal moments of a solid cuboid."""
        hx, hy, hz = self.box_half_extents
        m = self.target_mass
        return np.array([m * (hy * hy + hz * hz), m * (hx * hx + hz * hz), m * (hx * hx + hy * hy)]) / 3.0

    @property
    def grasp_offset(self) -> Pose:
        return Pose(np.asarray(self.grasp_offset_position, float),
                    np.asarray(self.grasp_offset_orientation, float))

    def keypoints(self) -> np.ndarray:
        """Target-frame key points used for the containment reward."""
        h = np.asarray(self.box_half_extents, float)
        corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]) * h
        if self.keypoint_rule == "corners":
            return corners
        if self.keypoint_rule == "center":
            return np.zeros((1, 3))
        if self.keypoint_rule == "grid":
            ax = np.linspace(-1.0, 1.0, self.keypoint_grid)
            return np.array([[x, y, z] for x in ax for y in ax for z in ax]) * h
        return np.vstack([corners, np.zeros((1, 3))])

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "EnvConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise InvalidConfigError(f"env.{unknown[0]}: unknown key")
        kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items()}
        try:
            cfg = cls(**kwargs)
        except TypeError as exc:
            raise InvalidConfigError(f"env: {exc}") from None
        return cfg.validate()


# ------------------------------------------------------------------ #
# Gripper model
# ------------------------------------------------------------------ #
PALM_HALF = (0.06, 0.06, 0.025)
LINK_HALF = (0.01, 0.015, 0.05)
# (x, y) of each finger column: two fingers on +x, the thumb on -x
FINGER_COLUMNS = ((0.075, 0.045), (0.075, -0.045), (-0.075, 0.0))
LINK_Z = (0.075, 0.175)  # proximal / distal link centres along the approach axis


@lru_cache(maxsize=None)
def gripper_model() -> Tuple[ShapeSet, ConvexHull]:
    """Open three-finger gripper: palm box plus two box links per finger."""
    boxes = [OrientedBox(np.zeros(3), np.eye(3), np.array(PALM_HALF))]
    hull_pts = [c for c in boxes[0].corners()]
    for x, y in FINGER_COLUMNS:
        for z in LINK_Z:
            boxes.append(OrientedBox(np.array([x, y, z]), np.eye(3), np.array(LINK_HALF)))
        base = PALM_HALF[2]
        for z in (base, LINK_Z[0] + LINK_HALF[2], LINK_Z[1] + LINK_HALF[2]):
            hull_pts.append(np.array([x, y, z]))
    return ShapeSet(boxes, palm_index=0), build_convex_hull(np.array(hull_pts))


# ------------------------------------------------------------------ #
# State containers
# ------------------------------------------------------------------ #
@dataclass
class WorldState:
    gripper_pose: Pose
    gripper_twist: Twist
    target_pose: Pose
    target_twist: Twist
    step_index: int = 0
    terminated: bool = False
    rng: Optional[np.random.Generator] = field(default=None, repr=False, compare=False)

    def copy(self) -> "WorldState":
        return WorldState(self.gripper_pose.copy(), self.gripper_twist.copy(),
                          self.target_pose.copy(), self.target_twist.copy(),
                          self.step_index, self.terminated, self.rng)


@dataclass(frozen=True)
class RewardBreakdown:
    r_d: float
    r_theta: float
    r_top: float
    p_f: float

    @property
    def total(self) -> float:
        return self.r_d + self.r_theta + self.r_top + self.p_f

    def as_dict(self) -> dict:
        return {"rd": self.r_d, "rtheta": self.r_theta, "rtop": self.r_top,
                "pf": self.p_f, "total": self.total}


@dataclass(frozen=True)
class SuccessTracker:
    threshold: float = 2.0
    required_run: int = 200
    consecutive_count: int = 0
    succeeded: bool = False


def update_success(tracker: SuccessTracker, total_reward: float) -> SuccessTracker:
    count = tracker.consecutive_count + 1 if total_reward > tracker.threshold else 0
    return dataclasses.replace(
        tracker,
        consecutive_count=count,
        succeeded=tracker.succeeded or count >= tracker.required_run,
    )


# ------------------------------------------------------------------ #
# Dynamics
# ------------------------------------------------------------------ #
def _uniform_in_ball(rng: np.random.Generator, radius: float) -> np.ndarray:
    if radius == 0.0:
        return np.zeros(3)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    return direction * radius * rng.random() ** (1.0 / 3.0)


def reset(config: EnvConfig, seed: int) -> Tuple[WorldState, np.ndarray]:
    """Randomised initial world: random gripper attitude, drifting target."""
    config.validate()
    rng = np.random.default_rng(seed)
    gripper = Pose(np.asarray(config.gripper_home, float), random_quaternion(rng))
    target = Pose(rng.uniform(config.spawn_low, config.spawn_high), random_quaternion(rng))
    # the gripper starts at rest, so relative and absolute target speed coincide
    target_twist = Twist(_uniform_in_ball(rng, config.max_relative_speed),
                         _uniform_in_ball(rng, config.max_angular_speed))
    world = WorldState(gripper, Twist(), target, target_twist, 0, False, rng)
    return world, assemble_observation(world, [], config)


def check_action(action) -> np.ndarray:
    a = np.asarray(action, dtype=float).reshape(-1)
    if a.shape != (ACTION_DIM,):
        raise ValueError(f"action must have {ACTION_DIM} components, got {a.shape}")
    if not np.all(np.isfinite(a)) or np.any(np.abs(a) > 1.0):
        raise ValueError(f"action components must lie in [-1, 1], got {a}")
    return a


def apply_action(pose: Pose, action, config: EnvConfig) -> Pose:
    """Move the gripper by a body-frame displacement and rotation."""
    a = check_action(action)
    shift = quat_rotate(pose.orientation, a[:3] * config.max_action_translation)
    turn = euler_to_quaternion(a[3:] * config.max_action_rotation)
    return Pose(pose.position + shift, quat_mul(pose.orientation, turn))


def integrate_target(world: WorldState, contacts: Sequence[Contact], config: EnvConfig) -> WorldState:
    """Semi-implicit Euler step of the free-floating box (no gravity)."""
    dt = config.dt
    pose, twist = world.target_pose, world.target_twist
    v, w = twist.linear.copy(), twist.angular.copy()
    if contacts:
        force = np.zeros(3)
        torque = np.zeros(3)
        for c in contacts:
            f = c.force
            force += f
            torque += np.cross(c.point - pose.position, f)
        r = quat_to_matrix(pose.orientation)
        inv_inertia = r @ np.diag(1.0 / config.target_inertia) @ r.T
        v = v + force / config.target_mass * dt
        w = w + inv_inertia @ torque * dt
    new_pose = Pose(pose.position + v * dt, orientation_step(pose.orientation, w, dt))
    out = world.copy()
    out.target_pose = new_pose
    out.target_twist = Twist(v, w)
    return out


def orientation_step(q: np.ndarray, omega: np.ndarray, dt: float) -> np.ndarray:
    """Advance ``q`` by a world-frame angular velocity held for ``dt``."""
    if not np.any(omega):
        return q
    return quat_normalize(quat_mul(quat_from_rotvec(omega * dt), q))


def goal_pose(target_pose: Pose, config: EnvConfig) -> Pose:
    """Nominal goal: the target pose composed with the grasp offset."""
    return target_pose.compose(config.grasp_offset)


def _matrix_to_quat(m: np.ndarray) -> np.ndarray:
    # adequate for the signed permutation matrices used below
    w = math.sqrt(max(0.0, 1.0 + np.trace(m))) / 2.0
    if w > 1e-6:
        return np.array([w, (m[2, 1] - m[1, 2]) / (4 * w), (m[0, 2] - m[2, 0]) / (4 * w), (m[1, 0] - m[0, 1]) / (4 * w)])
    axis = np.sqrt(np.maximum(0.0, (np.diag(m) + 1.0) / 2.0))
    k = int(np.argmax(axis))
    for j in range(3):
        if j != k and m[k, j] + m[j, k] < 0:
            axis[j] = -axis[j]
    return np.concatenate([[0.0], axis])


@lru_cache(maxsize=None)
def box_symmetries(half_extents: Tuple[float, float, float]) -> Tuple[np.ndarray, ...]:
    """Rotations (quaternions, identity first) that map the box onto itself."""
    h = np.asarray(half_extents, float)
    out = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            m = np.zeros((3, 3))
            m[range(3), perm] = signs
            if np.linalg.det(m) < 0 or not np.allclose(np.abs(m) @ h, h, rtol=0.0, atol=1e-12):
                continue
            out.append(_matrix_to_quat(m))
    return tuple(out)


def goal_candidates(target_pose: Pose, config: EnvConfig) -> List[Pose]:
    """Grasp poses that are physically identical because of the box's symmetry."""
    if not config.goal_symmetry:
        return [goal_pose(target_pose, config)]
    offset = config.grasp_offset
    return [target_pose.compose(Pose(np.zeros(3), q)).compose(offset)
            for q in box_symmetries(tuple(float(x) for x in config.box_half_extents))]


def nearest_goal(target_pose: Pose, gripper_pose: Pose, config: EnvConfig) -> Pose:
    """The candidate goal with the largest ``r_d + r_theta`` for this gripper pose."""
    best, best_cost = None, math.inf
    for goal in goal_candidates(target_pose, config):
        cost = (math.tanh(float(np.linalg.norm(goal.position - gripper_pose.position)))
                + math.tanh(geodesic_angle(gripper_pose.orientation, goal.orientation)))
        if cost < best_cost:
            best, best_cost = goal, cost
    return best


def _palm_and_target(world: WorldState, config: EnvConfig) -> Tuple[List[OrientedBox], OrientedBox]:
    shapes, _ = gripper_model()
    placed = shapes.placed(world.gripper_pose)
    target = OrientedBox.from_pose(world.target_pose, config.box_half_extents)
    return placed, target


def assemble_observation(world: WorldState, contacts: Sequence[Contact], config: EnvConfig) -> np.ndarray:
    gp, tp = world.gripper_pose, world.target_pose
    goal = nearest_goal(tp, gp, config)
    placed, target = _palm_and_target(world, config)
    shapes, _ = gripper_model()
    obs = np.empty(OBS_DIM)
    obs[GRIPPER_POSE] = gp.as_array()
    obs[GRIPPER_TWIST] = world.gripper_twist.as_array()
    obs[TARGET_POSE] = tp.as_array()
    obs[TARGET_TWIST] = world.target_twist.as_array()
    # relative quantities are seen from the gripper, the frame actions act in
    inv = quat_conj(gp.orientation)
    obs[26:29] = quat_rotate(inv, goal.position - gp.position)
    obs[29:32] = rotation_vector_between(gp.orientation, goal.orientation)
    obs[32:35] = quat_rotate(inv, world.target_twist.linear - world.gripper_twist.linear)
    obs[35:38] = quat_rotate(inv, world.target_twist.angular - world.gripper_twist.angular)
    obs[DISTANCE] = closest_distance(placed[shapes.palm_index], target)
    obs[CONTACT_FORCE] = sum(c.force_magnitude for c in contacts)
    return obs


def observation_scale(config: EnvConfig) -> np.ndarray:
    """Per-slot factors that bring observations to order one for network inputs.

    Velocities are divided by the gripper's top speeds, the goal offset by
    0.2 m (about the finger length), distances by 0.5 m and forces by 10 N.
    """
    lin = config.dt / config.max_action_translation
    ang = config.dt / config.max_action_rotation
    s = np.ones(OBS_DIM)
    s[7:10] = s[20:23] = s[32:35] = lin
    s[10:13] = s[23:26] = s[35:38] = ang
    s[26:29] = 1.0 / 0.2
    s[DISTANCE] = 1.0 / 0.5
    s[CONTACT_FORCE] = 1.0 / 10.0
    return s


def keypoints_inside(world: WorldState, config: EnvConfig) -> np.ndarray:
    """Boolean mask of target key points inside the gripper hull."""
    _, hull = gripper_model()
    world_pts = world.target_pose.transform_points(config.keypoints())
    local = world.gripper_pose.inverse_transform_points(world_pts)
    return hull_contains_many(hull, local, 0.0)


def compute_reward(world: WorldState, contacts: Sequence[Contact], config: EnvConfig) -> RewardBreakdown:
    goal = nearest_goal(world.target_pose, world.gripper_pose, config)
    dist = float(np.linalg.norm(goal.position - world.gripper_pose.position))
    angle = geodesic_angle(world.gripper_pose.orientation, goal.orientation)
    inside = keypoints_inside(world, config)
    force = sum(c.force_magnitude for c in contacts)
    return RewardBreakdown(
        r_d=1.0 - math.tanh(dist),
        r_theta=1.0 - math.tanh(angle),
        r_top=1.0 if inside.any() else 0.0,
        p_f=-1.0 if force > 0.0 else 0.0,
    )


def gripper_contacts(world: WorldState, config: EnvConfig) -> List[Contact]:
    placed, target = _palm_and_target(world, config)
    rel = world.gripper_twist.linear - world.target_twist.linear
    return collect_contacts(placed, target, config.contact_stiffness, config.contact_damping, rel)


def step(world: WorldState, action, config: EnvConfig):
    """One control period.

    Returns ``(world, observation, reward, terminated, truncated, contacts)``.
    """
    if world.terminated or world.step_index >= config.episode_length:
        raise EpisodeFinishedError("episode already finished; call reset()")
    old = world.gripper_pose
    new_pose = apply_action(old, action, config)
    linear = (new_pose.position - old.position) / config.dt
    body_turn = quat_to_rotvec(quat_mul(quat_conj(old.orientation), new_pose.orientation))
    angular = quat_rotate(old.orientation, body_turn) / config.dt

    moved = world.copy()
    moved.gripper_pose = new_pose
    moved.gripper_twist = Twist(linear, angular)
    contacts = gripper_contacts(moved, config)
    nxt = integrate_target(moved, contacts, config)
    nxt.step_index = world.step_index + 1

    obs = assemble_observation(nxt, contacts, config)
    reward = compute_reward(nxt, contacts, config)
    home = np.asarray(config.gripper_home, float)
    terminated = bool(np.linalg.norm(nxt.target_pose.position - home) > config.workspace_radius)
    nxt.terminated = terminated
    truncated = nxt.step_index >= config.episode_length
    return nxt, obs, reward, terminated, truncated, contacts


# ------------------------------------------------------------------ #
# Stateful wrapper
# ------------------------------------------------------------------ #
class PreGraspEnv:
    """Gym-style façade used by the trainer and evaluation loops."""

    observation_dim = OBS_DIM
    action_dim = ACTION_DIM

    def __init__(self, config: Optional[EnvConfig] = None):
        self.config = (config or EnvConfig()).validate()
        self.world: Optional[WorldState] = None
        self.tracker = SuccessTracker(self.config.success_threshold, self.config.success_run)
        self.last_contacts: List[Contact] = []

    @property
    def observation_scale(self) -> np.ndarray:
        return observation_scale(self.config)

    def reset(self, seed: int) -> np.ndarray:
        self.world, obs = reset(self.config, seed)
        self.tracker = SuccessTracker(self.config.success_threshold, self.config.success_run)
        self.last_contacts = []
        return obs

    def step(self, action):
        if self.world is None:
            raise EpisodeFinishedError("call reset() before step()")
        self.world, obs, reward, terminated, truncated, contacts = step(self.world, action, self.config)
        self.last_contacts = contacts
        self.tracker = update_success(self.tracker, reward.total)
        info = {"reward_terms": reward, "success": self.tracker.succeeded}
        return obs, reward.total, terminated, truncated, info
