"""The navigation MDP: unicycle kinematics at 2 Hz, collision and goal detection,
scan-stack observations with a one-hot goal bearing, and the shaped reward.

Rewards: +20 for reaching the goal, -20 for a collision, -10 for running out
of steps, and otherwise a progress term (1.0 * meters gained toward the goal)
plus +/-0.02 for turning toward/away from it.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    _HAVE_NUMBA,
    Pose,
    Scan,
    ScannerSpec,
    Vec2,
    apply_noise,
    cast_scan,
    njit,
    wrap_angle,
)
from .worldmap import WorldMap, sample_free_pose

GOAL_REWARD = 20.0
COLLISION_REWARD = -20.0
TIMEOUT_REWARD = -10.0
DISTANCE_GAIN = 1.0  # reward per meter of progress toward the goal
HEADING_BONUS = 0.02

MIN_SPAWN_GOAL_DISTANCE = 1.0
_GOAL_SAMPLE_TRIES = 1000


class Status(enum.Enum):
    RUNNING = "running"
    GOAL_REACHED = "goal"
    COLLIDED = "collision"
    TIMED_OUT = "timeout"


@dataclass(frozen=True)
class RobotSpec:
    radius: float = 0.177
    v_max: float = 0.6
    dt: float = 0.5  # 2 Hz control
    goal_radius: float = 0.3
    collision_substeps: int = 5

    def __post_init__(self):
        if min(self.radius, self.v_max, self.dt, self.goal_radius) <= 0.0:
            raise ValueError("robot spec values must be positive")
        if self.collision_substeps < 1:
            raise ValueError("collision_substeps must be >= 1")


@dataclass(frozen=True)
class ActionSet:
    """Seven (linear m/s, angular rad/s) pairs, symmetric about the middle action."""

    actions: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.actions) != 7:
            raise ValueError("action set must have exactly 7 actions")
        n = len(self.actions)
        for i, (v, w) in enumerate(self.actions):
            vm, wm = self.actions[n - 1 - i]
            if v != vm or w != -wm:
                raise ValueError("action set must be mirror-symmetric")

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, i: int) -> tuple[float, float]:
        return self.actions[i]


def default_action_set(v_max: float = 0.6) -> ActionSet:
    """Angular rates spaced -162..+162 deg/s; linear speed 0.2 m/s at the extremes
    rising linearly to v_max straight ahead."""
    v_min = 0.2
    w_max = math.radians(0.9 * 180.0)
    actions = []
    for i in range(7):
        frac = abs(i - 3) / 3.0
        v = v_max + (v_min - v_max) * frac
        w = (i - 3) / 3.0 * w_max
        actions.append((v, w))
    return ActionSet(tuple(actions))


@dataclass(frozen=True)
class EnvConfig:
    robot: RobotSpec = field(default_factory=RobotSpec)
    scanner: ScannerSpec = field(default_factory=ScannerSpec)
    actions: ActionSet = field(default_factory=default_action_set)
    max_steps: int = 1000
    bearing_bins: int = 128
    scan_frames: int = 4

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass
class Observation:
    """Network input: the last scan_frames normalized scans (oldest first) and
    a one-hot goal bearing."""

    scan_stack: np.ndarray  # (frames, num_beams) float32 in [0, 1]
    bearing_onehot: np.ndarray  # (bins,) float32, exactly one element 1


@dataclass
class EpisodeState:
    pose: Pose
    goal: Vec2
    scan_history: list[np.ndarray]  # normalized float32 rows, oldest first
    step_count: int
    prev_goal_distance: float
    prev_heading_error: float
    status: Status


@dataclass
class StepResult:
    observation: Observation
    reward: float
    terminal: bool
    status: Status


class TerminalStateError(RuntimeError):
    """Raised when step() is called on an episode that already ended."""


def normalize_scan(scan: Scan, max_range: float | None = None) -> np.ndarray:
    """Scale ranges by 1/max_range, clipped to [0, 1]."""
    limit = scan.max_range if max_range is None else max_range
    return np.clip(scan.ranges / limit, 0.0, 1.0).astype(np.float32)


def encode_orientation(bearing: float, bins: int = 128) -> np.ndarray:
    """One-hot encode a relative bearing: bin 0 is dead ahead, bins go counterclockwise."""
    b = bearing % (2.0 * math.pi)
    index = min(int(b / (2.0 * math.pi) * bins), bins - 1)
    onehot = np.zeros(bins, dtype=np.float32)
    onehot[index] = 1.0
    return onehot


def relative_goal_bearing(pose: Pose, goal: Vec2) -> float:
    """Bearing of the goal in the robot frame, wrapped to [-pi, pi)."""
    return wrap_angle(math.atan2(goal.y - pose.position.y, goal.x - pose.position.x) - pose.heading)


def integrate_motion(pose: Pose, v: float, w: float, dt: float) -> Pose:
    """Exact unicycle arc for constant (v, w); straight line when w is ~0."""
    if abs(w) < 1e-6:
        return Pose(
            Vec2(pose.position.x + v * math.cos(pose.heading) * dt,
                 pose.position.y + v * math.sin(pose.heading) * dt),
            pose.heading,
        )
    th = pose.heading
    th1 = th + w * dt
    r = v / w
    return Pose(
        Vec2(pose.position.x + r * (math.sin(th1) - math.sin(th)),
             pose.position.y - r * (math.cos(th1) - math.cos(th))),
        th1,
    )


def _collides(x: float, y: float, wmap: WorldMap, radius: float) -> bool:
    b = wmap.bounds
    if (
        x < b.min.x + radius
        or x > b.max.x - radius
        or y < b.min.y + radius
        or y > b.max.y - radius
    ):
        return True
    dist, inside = wmap.packed.clearance(x, y)
    return inside or dist < radius


def _observe(state: EpisodeState, config: EnvConfig) -> Observation:
    stack = np.stack(state.scan_history)
    bearing = relative_goal_bearing(state.pose, state.goal)
    return Observation(stack, encode_orientation(bearing, config.bearing_bins))


@njit(cache=True, nogil=True)
def _noise_normalize_kernel(ranges, noise, inv_max_range, out):  # pragma: no cover
    for i in range(ranges.shape[0]):
        v = (ranges[i] + noise[i]) * inv_max_range
        if v < 0.0:
            v = 0.0
        elif v > 1.0:
            v = 1.0
        out[i] = v


def _sense(state: EpisodeState, wmap: WorldMap, config: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    """Noisy normalized scan row; one fused kernel call on the fast path.

    Equivalent to normalize_scan(apply_noise(cast_scan(...))): clamping to
    [0, max_range] and then scaling is the same as scaling and clamping to [0, 1].
    """
    scan = cast_scan(state.pose, wmap.packed, config.scanner)
    sigma = config.scanner.noise_sigma
    if _HAVE_NUMBA and sigma > 0.0:
        noise = rng.normal(0.0, sigma, scan.ranges.shape[0])
        out = np.empty(scan.ranges.shape[0], dtype=np.float32)
        _noise_normalize_kernel(scan.ranges, noise, 1.0 / scan.max_range, out)
        return out
    return normalize_scan(apply_noise(scan, sigma, rng))


def reset(
    wmap: WorldMap, config: EnvConfig, rng: np.random.Generator
) -> tuple[EpisodeState, Observation]:
    """Sample a spawn pose and a goal at least 1 m away, then seed the scan history
    by replicating the first (noisy) scan into all history slots."""
    spawn = sample_free_pose(wmap, wmap.spawn_regions, config.robot.radius, rng)
    goal = None
    for _ in range(_GOAL_SAMPLE_TRIES):
        candidate = sample_free_pose(wmap, wmap.goal_regions, config.robot.radius, rng)
        if (candidate.position - spawn.position).norm() >= MIN_SPAWN_GOAL_DISTANCE:
            goal = candidate.position
            break
    if goal is None:
        from .worldmap import InfeasibleRegionError

        raise InfeasibleRegionError(
            f"could not sample a goal >= {MIN_SPAWN_GOAL_DISTANCE} m from the spawn"
        )
    state = EpisodeState(
        pose=spawn,
        goal=goal,
        scan_history=[],
        step_count=0,
        prev_goal_distance=(goal - spawn.position).norm(),
        prev_heading_error=abs(relative_goal_bearing(spawn, goal)),
        status=Status.RUNNING,
    )
    first = _sense(state, wmap, config, rng)
    state.scan_history = [first.copy() for _ in range(config.scan_frames)]
    return state, _observe(state, config)


def compute_reward(prev: EpisodeState, new_pose: Pose, status: Status) -> float:
    """Reward for the transition prev -> new_pose ending with the given status."""
    if status is Status.GOAL_REACHED:
        return GOAL_REWARD
    if status is Status.COLLIDED:
        return COLLISION_REWARD
    if status is Status.TIMED_OUT:
        return TIMEOUT_REWARD
    new_distance = (prev.goal - new_pose.position).norm()
    new_heading_error = abs(relative_goal_bearing(new_pose, prev.goal))
    reward = DISTANCE_GAIN * (prev.prev_goal_distance - new_distance)
    reward += HEADING_BONUS if new_heading_error < prev.prev_heading_error else -HEADING_BONUS
    return reward


def step(
    state: EpisodeState,
    action_index: int,
    wmap: WorldMap,
    config: EnvConfig,
    rng: np.random.Generator,
) -> tuple[EpisodeState, StepResult]:
    """Advance one control period. Motion is integrated in equal sub-intervals
    with a collision and goal check after each; the state is updated in place
    and returned."""
    if state.status is not Status.RUNNING:
        raise TerminalStateError("step() called on a terminal episode")
    if not 0 <= action_index < len(config.actions):
        raise ValueError(f"action index {action_index} out of range")

    v, w = config.actions[action_index]
    sub_dt = config.robot.dt / config.robot.collision_substeps
    pose = state.pose
    status = Status.RUNNING
    for _ in range(config.robot.collision_substeps):
        pose = integrate_motion(pose, v, w, sub_dt)
        if _collides(pose.position.x, pose.position.y, wmap, config.robot.radius):
            status = Status.COLLIDED
            break
        if (state.goal - pose.position).norm() <= config.robot.goal_radius:
            status = Status.GOAL_REACHED
            break

    step_count = state.step_count + 1
    if status is Status.RUNNING and step_count >= config.max_steps:
        status = Status.TIMED_OUT

    reward = compute_reward(state, pose, status)

    state.pose = pose
    state.step_count = step_count
    state.status = status
    state.prev_goal_distance = (state.goal - pose.position).norm()
    state.prev_heading_error = abs(relative_goal_bearing(pose, state.goal))
    state.scan_history.pop(0)
    state.scan_history.append(_sense(state, wmap, config, rng))

    observation = _observe(state, config)
    terminal = status is not Status.RUNNING
    return state, StepResult(observation, reward, terminal, status)


class NavEnv:
    """Convenience wrapper owning one episode at a time over a shared map."""

    def __init__(self, wmap: WorldMap, config: EnvConfig, rng: np.random.Generator):
        self.wmap = wmap
        self.config = config
        self.rng = rng
        self.state: EpisodeState | None = None

    def reset(self) -> Observation:
        self.state, observation = reset(self.wmap, self.config, self.rng)
        return observation

    def step(self, action_index: int) -> StepResult:
        if self.state is None:
            raise RuntimeError("reset() must be called before step()")
        self.state, result = step(self.state, action_index, self.wmap, self.config, self.rng)
        return result


TRAJECTORY_COLUMNS = ("step", "x", "y", "theta", "action", "reward", "status")


def write_trajectory_csv(path, rows) -> None:
    """Rows: (step, x, y, theta, action, reward, status_string)."""
    import csv

    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(TRAJECTORY_COLUMNS)
        writer.writerows(rows)
