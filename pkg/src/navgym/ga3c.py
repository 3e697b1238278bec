"""GA3C-style parallel training: many agents over per-agent environments, a
batching prediction service, a training queue feeding trainer workers, and one
shared parameter store.

Workers are threads communicating only through two bounded queues plus
per-agent reply channels; the heavy numpy work (ray casting, batched forward
passes, gradient math) releases the GIL. The parameter store enforces
many-readers-or-one-writer exclusion.

With num_agents == num_trainers == num_predictors == 1 the whole run executes
on one thread in a fixed schedule, making it bit-deterministic; wall-clock
columns are reported as 0 in that mode since timing is inherently
nondeterministic.
"""

from __future__ import annotations

import contextlib
import queue
import threading
import time
import traceback
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import acnet
from .acnet import NetConfig, NetParams, OptState, TrainingSample
from .sim_env import EnvConfig, NavEnv, Observation
from .worldmap import WorldMap, resolve_map

METRICS_COLUMNS = (
    "episode", "map", "outcome", "total_reward", "steps",
    "policy_loss", "value_loss", "entropy", "wall_ms",
)

_QUEUE_POLL = 0.05  # seconds between shutdown checks while blocked on a queue
_STRAGGLER_WAIT = 0.002  # max wait for more prediction requests once one is queued


@dataclass
class TrainConfig:
    num_agents: int = 32
    num_trainers: int = 8
    num_predictors: int = 2
    prediction_batch_max: int = 32
    training_batch_size: int = 32
    t_max: int = 5
    gamma: float = 0.99
    total_episodes: int = 1000
    checkpoint_every: int = 500
    seed: int = 0
    maps: tuple[str, ...] = ("simple_room",)
    map_weights: Optional[tuple[float, ...]] = None
    # (episode index, weights) entries; the last entry at or below the current
    # episode count wins. Implements mid-run curriculum changes.
    weight_schedule: tuple[tuple[int, tuple[float, ...]], ...] = ()
    env: EnvConfig = field(default_factory=EnvConfig)
    net: NetConfig = field(default_factory=NetConfig)
    learning_rate: float = 3e-4
    rmsprop_decay: float = 0.99
    rmsprop_epsilon: float = 1e-6
    entropy_beta: float = 0.01
    value_coef: float = 0.5

    def __post_init__(self):
        counts = (
            "num_agents", "num_trainers", "num_predictors", "prediction_batch_max",
            "training_batch_size", "t_max", "total_episodes", "checkpoint_every",
        )
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not self.maps:
            raise ValueError("at least one map is required")
        if self.map_weights is not None and len(self.map_weights) != len(self.maps):
            raise ValueError("map_weights length must match maps")
        for episode, weights in self.weight_schedule:
            if episode < 0 or len(weights) != len(self.maps):
                raise ValueError("bad weight_schedule entry")

    @property
    def deterministic(self) -> bool:
        return self.num_agents == self.num_trainers == self.num_predictors == 1


def compute_returns(
    rewards: Sequence[float], gamma: float, bootstrap: float = 0.0, terminal: bool = True
) -> np.ndarray:
    """Discounted suffix sums, seeded with the critic's value when the segment
    was cut by t_max rather than by a terminal state."""
    n = len(rewards)
    if n == 0:
        raise ValueError("rewards must be nonempty")
    out = np.empty(n, dtype=np.float64)
    acc = 0.0 if terminal else float(bootstrap)
    for i in range(n - 1, -1, -1):
        acc = float(rewards[i]) + gamma * acc
        out[i] = acc
    return out


@dataclass
class PredictionRequest:
    agent_id: int
    scan_stack: np.ndarray
    bearing_onehot: np.ndarray


@dataclass
class PredictionReply:
    agent_id: int
    policy: np.ndarray
    value: float


@dataclass
class EpisodeRecord:
    episode: int
    map_name: str
    total_reward: float
    steps: int
    outcome: str
    wall_ms: float


class _Shutdown(Exception):
    """Internal signal: the run is over, unwind the worker quietly."""


class ParamStore:
    """Shared parameters: many concurrent readers or exactly one writer."""

    def __init__(self, params: NetParams, opt: OptState):
        self.params = params
        self.opt = opt
        self._reader_mutex = threading.Lock()
        self._write_mutex = threading.Lock()
        self._readers = 0
        self.writer_active = False  # assertion hook for exclusion tests

    @contextlib.contextmanager
    def read(self):
        with self._reader_mutex:
            self._readers += 1
            if self._readers == 1:
                self._write_mutex.acquire()
        try:
            assert not self.writer_active, "reader overlapped a writer"
            yield
        finally:
            with self._reader_mutex:
                self._readers -= 1
                if self._readers == 0:
                    self._write_mutex.release()

    @contextlib.contextmanager
    def write(self):
        self._write_mutex.acquire()
        assert not self.writer_active, "two writers overlapped"
        self.writer_active = True
        try:
            yield
        finally:
            self.writer_active = False
            self._write_mutex.release()

    def predict(self, scans: np.ndarray, bearings: np.ndarray) -> acnet.NetOutput:
        with self.read():
            return acnet.forward(self.params, scans, bearings)

    def train_on(self, batch: Sequence[TrainingSample], entropy_beta: float,
                 value_coef: float) -> acnet.LossStats:
        with self.read():
            grads, losses = acnet.compute_gradients(self.params, batch, entropy_beta, value_coef)
        with self.write():
            acnet.apply_update(self.params, self.opt, grads)
        return losses

    def snapshot(self) -> tuple[NetParams, OptState]:
        with self.read():
            params = self.params.copy()
            opt = OptState(
                {k: v.copy() for k, v in self.opt.accumulators.items()},
                self.opt.learning_rate, self.opt.decay, self.opt.epsilon,
            )
        return params, opt


class MetricsWriter:
    """Append-only per-episode CSV; loss columns are the mean over the updates
    applied since the previous episode row (blank if there were none)."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        exists = append and self.path.exists() and self.path.stat().st_size > 0
        self._f = open(self.path, "a", encoding="utf-8", newline="")
        self._lock = threading.Lock()
        self._sums = [0.0, 0.0, 0.0]
        self._updates = 0
        if not exists:
            self._f.write(",".join(METRICS_COLUMNS) + "\n")
            self._f.flush()

    def record_update(self, losses: acnet.LossStats) -> None:
        with self._lock:
            self._sums[0] += losses.policy_loss
            self._sums[1] += losses.value_loss
            self._sums[2] += losses.entropy
            self._updates += 1

    def record_episode(self, rec: EpisodeRecord) -> None:
        with self._lock:
            if self._updates:
                loss_cells = [repr(s / self._updates) for s in self._sums]
                self._sums = [0.0, 0.0, 0.0]
                self._updates = 0
            else:
                loss_cells = ["", "", ""]
            row = [
                str(rec.episode), rec.map_name, rec.outcome, repr(rec.total_reward),
                str(rec.steps), *loss_cells, repr(rec.wall_ms),
            ]
            self._f.write(",".join(row) + "\n")
            self._f.flush()

    def close(self) -> None:
        self._f.close()


class _Run:
    """Shared state for one training run."""

    def __init__(self, config: TrainConfig, maps: Sequence[WorldMap],
                 store: ParamStore, metrics: MetricsWriter,
                 checkpoint_dir: Path, config_hash: int, start_episode: int = 0):
        self.config = config
        self.maps = list(maps)
        self.store = store
        self.metrics = metrics
        self.checkpoint_dir = checkpoint_dir
        self.config_hash = config_hash

        self.stop = threading.Event()  # no new episodes
        self.abort = threading.Event()  # a worker failed; unwind fast
        self.prediction_done = threading.Event()
        self.training_done = threading.Event()

        self.prediction_queue: queue.Queue = queue.Queue(maxsize=2 * config.prediction_batch_max)
        self.training_queue: queue.Queue = queue.Queue(maxsize=2 * config.training_batch_size)
        self.reply_queues = [queue.Queue() for _ in range(config.num_agents)]

        self.episode_lock = threading.Lock()
        self.start_episode = start_episode
        self.episodes_done = start_episode

        self.count_lock = threading.Lock()
        self.samples_in = 0
        self.samples_out = 0
        self.prediction_batches: list[int] = []  # forward batch sizes, test hook

        self.error_lock = threading.Lock()
        self.errors: list[str] = []

    def report_error(self, role: str, worker_id: int, exc: BaseException) -> None:
        with self.error_lock:
            self.errors.append(
                f"{role} {worker_id} failed: {exc!r}\n{''.join(traceback.format_exception(exc))}"
            )
        self.abort.set()
        self.stop.set()

    def current_weights(self) -> Optional[np.ndarray]:
        if len(self.maps) == 1:
            return None
        weights = self.config.map_weights or tuple(1.0 for _ in self.maps)
        with self.episode_lock:
            done = self.episodes_done
        for episode, entry in self.config.weight_schedule:
            if done >= episode:
                weights = entry
        w = np.asarray(weights, dtype=np.float64)
        return w / w.sum()

    def blocking_put(self, q: queue.Queue, item) -> None:
        while True:
            try:
                q.put(item, timeout=_QUEUE_POLL)
                return
            except queue.Full:
                if self.abort.is_set():
                    raise _Shutdown() from None

    def blocking_get(self, q: queue.Queue):
        while True:
            try:
                return q.get(timeout=_QUEUE_POLL)
            except queue.Empty:
                if self.abort.is_set():
                    raise _Shutdown() from None


def _sample_action(rng: np.random.Generator, policy: np.ndarray) -> int:
    # inverse-CDF draw over 7 entries; avoids Generator.choice's array churn
    p = policy.tolist()
    u = rng.random() * sum(p)
    acc = 0.0
    for i, pi in enumerate(p):
        acc += pi
        if u <= acc:
            return i
    return len(p) - 1


def _agent_rngs(seed: int, num_agents: int):
    children = np.random.SeedSequence(seed).spawn(1 + 2 * num_agents)
    init_rng = np.random.default_rng(children[0])
    pairs = [
        (np.random.default_rng(children[1 + 2 * i]), np.random.default_rng(children[2 + 2 * i]))
        for i in range(num_agents)
    ]
    return init_rng, pairs


def _run_episode(
    run: _Run,
    agent_id: int,
    env_rng: np.random.Generator,
    action_rng: np.random.Generator,
    predict: Callable[[int, Observation], tuple[np.ndarray, float]],
    emit: Callable[[list, float, bool], None],
) -> Optional[EpisodeRecord]:
    """One episode of the agent contract. Returns None if the run stopped
    before the episode finished."""
    cfg = run.config
    weights = run.current_weights()
    map_idx = 0 if weights is None else int(env_rng.choice(len(run.maps), p=weights))
    wmap = run.maps[map_idx]
    env = NavEnv(wmap, cfg.env, env_rng)
    obs = env.reset()

    start = time.perf_counter()
    buffer: list[tuple[Observation, int, float]] = []
    awaiting_bootstrap = False
    total_reward = 0.0
    steps = 0
    while True:
        policy, value = predict(agent_id, obs)
        if awaiting_bootstrap:
            emit(buffer, value, False)
            buffer = []
            awaiting_bootstrap = False
        action = _sample_action(action_rng, policy)
        result = env.step(action)
        buffer.append((obs, action, result.reward))
        obs = result.observation
        total_reward += result.reward
        steps += 1
        if result.terminal:
            emit(buffer, 0.0, True)
            wall_ms = 0.0 if cfg.deterministic else (time.perf_counter() - start) * 1e3
            return EpisodeRecord(0, wmap.name, total_reward, steps, result.status.value, wall_ms)
        if len(buffer) >= cfg.t_max:
            awaiting_bootstrap = True
        if run.stop.is_set():
            return None


def _make_emit(run: _Run):
    def emit(buffer, bootstrap: float, terminal: bool) -> None:
        returns = compute_returns([r for _, _, r in buffer], run.config.gamma, bootstrap, terminal)
        for (obs, action, _), ret in zip(buffer, returns):
            run.blocking_put(run.training_queue, TrainingSample(obs, action, float(ret)))
            with run.count_lock:
                run.samples_in += 1
    return emit


def _finish_episode(run: _Run, rec: EpisodeRecord) -> None:
    with run.episode_lock:
        if run.episodes_done >= run.config.total_episodes:
            return  # target already reached; drop the overflow episode
        run.episodes_done += 1
        index = run.episodes_done
        if index >= run.config.total_episodes:
            run.stop.set()
        checkpoint_due = index % run.config.checkpoint_every == 0
    rec.episode = index
    run.metrics.record_episode(rec)
    if checkpoint_due:
        _write_checkpoint(run, index, f"checkpoint_{index:06d}.ckpt")


def _write_checkpoint(run: _Run, episode: int, filename: str) -> Path:
    params, opt = run.store.snapshot()
    path = run.checkpoint_dir / filename
    acnet.save_checkpoint_file(
        path, params, opt,
        {"episode_count": episode, "config_hash": run.config_hash},
    )
    return path


def agent_loop(run: _Run, agent_id: int,
               env_rng: np.random.Generator, action_rng: np.random.Generator) -> None:
    """Threaded agent: predictions go through the shared queue."""

    def predict(aid: int, obs: Observation) -> tuple[np.ndarray, float]:
        run.blocking_put(
            run.prediction_queue,
            PredictionRequest(aid, obs.scan_stack, obs.bearing_onehot),
        )
        reply: PredictionReply = run.blocking_get(run.reply_queues[aid])
        assert reply.agent_id == aid, "prediction reply routed to the wrong agent"
        return reply.policy, reply.value

    emit = _make_emit(run)
    try:
        while not run.stop.is_set():
            rec = _run_episode(run, agent_id, env_rng, action_rng, predict, emit)
            if rec is not None:
                _finish_episode(run, rec)
    except _Shutdown:
        pass
    except BaseException as exc:  # noqa: BLE001 - worker failures must surface
        run.report_error("agent", agent_id, exc)


def predictor_loop(run: _Run, predictor_id: int) -> None:
    """Drains up to prediction_batch_max requests (waiting at most 2 ms for
    stragglers once one is present), runs one batched forward, routes replies."""
    cfg = run.config
    try:
        while True:
            try:
                first = run.prediction_queue.get(timeout=_QUEUE_POLL)
            except queue.Empty:
                if run.prediction_done.is_set() or run.abort.is_set():
                    return
                continue
            batch = [first]
            deadline = time.monotonic() + _STRAGGLER_WAIT
            while len(batch) < cfg.prediction_batch_max:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                try:
                    batch.append(run.prediction_queue.get(timeout=remaining))
                except queue.Empty:
                    break
            scans = np.stack([r.scan_stack for r in batch])
            bearings = np.stack([r.bearing_onehot for r in batch])
            out = run.store.predict(scans, bearings)
            with run.count_lock:
                run.prediction_batches.append(len(batch))
            for i, req in enumerate(batch):
                run.reply_queues[req.agent_id].put(
                    PredictionReply(req.agent_id, out.policy[i], float(out.value[i]))
                )
    except BaseException as exc:  # noqa: BLE001
        run.report_error("predictor", predictor_id, exc)


def trainer_loop(run: _Run, trainer_id: int) -> None:
    """Accumulates a batch, computes gradients under the read lock, applies the
    update under the write lock. Flushes a partial batch at shutdown."""
    cfg = run.config
    try:
        while True:
            batch: list[TrainingSample] = []
            while len(batch) < cfg.training_batch_size:
                try:
                    batch.append(run.training_queue.get(timeout=_QUEUE_POLL))
                except queue.Empty:
                    if run.training_done.is_set() or run.abort.is_set():
                        break
                    continue
            if not batch:
                return
            with run.count_lock:
                run.samples_out += len(batch)
            losses = run.store.train_on(batch, cfg.entropy_beta, cfg.value_coef)
            run.metrics.record_update(losses)
            if run.abort.is_set():
                return
    except BaseException as exc:  # noqa: BLE001
        run.report_error("trainer", trainer_id, exc)


@dataclass
class TrainResult:
    episodes_completed: int
    metrics_path: Path
    final_checkpoint: Path
    samples_enqueued: int
    samples_consumed: int
    interrupted: bool = False
    prediction_batches: list[int] = field(default_factory=list)


def _validate_config(config: TrainConfig) -> None:
    env, net = config.env, config.net
    if net.num_beams != env.scanner.num_beams:
        raise ValueError("network num_beams must match the scanner")
    if net.scan_frames != env.scan_frames:
        raise ValueError("network scan_frames must match the environment")
    if net.bearing_bins != env.bearing_bins:
        raise ValueError("network bearing_bins must match the environment")
    if net.num_actions != len(env.actions):
        raise ValueError("network num_actions must match the action set")


def run_training(
    config: TrainConfig,
    output_dir,
    maps: Optional[Sequence[WorldMap]] = None,
    initial: Optional[tuple[NetParams, OptState, int]] = None,
    config_hash: int = 0,
) -> TrainResult:
    """Train until total_episodes episodes complete; returns paths to the final
    checkpoint and the metrics CSV. `initial` resumes from (params, opt state,
    episode count)."""
    _validate_config(config)
    resolved = list(maps) if maps is not None else [resolve_map(name) for name in config.maps]
    if len(resolved) != len(config.maps):
        raise ValueError("maps length must match config.maps")

    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)

    init_rng, agent_rngs = _agent_rngs(config.seed, config.num_agents)
    if initial is not None:
        params, opt, start_episode = initial
        if params.config != config.net:
            raise ValueError("checkpoint network shape does not match the config")
    else:
        params = acnet.init_params(init_rng, config.net)
        opt = acnet.init_opt_state(
            params, config.learning_rate, config.rmsprop_decay, config.rmsprop_epsilon
        )
        start_episode = 0

    store = ParamStore(params, opt)
    metrics = MetricsWriter(out / "metrics.csv", append=start_episode > 0)
    run = _Run(config, resolved, store, metrics, out, config_hash, start_episode)

    interrupted = False
    try:
        # One BLAS thread per worker: the parallelism comes from the workers
        # themselves, and reduction order stays fixed for the deterministic mode.
        with threadpool_limits(limits=1):
            if config.deterministic:
                interrupted = _drive_sequential(run, agent_rngs[0])
            else:
                interrupted = _drive_threaded(run, agent_rngs)
    finally:
        metrics.close()

    if run.errors:
        raise RuntimeError("training aborted by worker failures:\n" + "\n".join(run.errors))

    final = _write_checkpoint(run, run.episodes_done, "checkpoint_final.ckpt")
    return TrainResult(
        episodes_completed=run.episodes_done - run.start_episode,
        metrics_path=metrics.path,
        final_checkpoint=final,
        samples_enqueued=run.samples_in,
        samples_consumed=run.samples_out,
        interrupted=interrupted,
        prediction_batches=run.prediction_batches,
    )


def _drive_threaded(run: _Run, agent_rngs) -> bool:
    cfg = run.config
    threads = []
    for i in range(cfg.num_agents):
        env_rng, action_rng = agent_rngs[i]
        threads.append(threading.Thread(
            target=agent_loop, args=(run, i, env_rng, action_rng),
            name=f"agent-{i}", daemon=True,
        ))
    predictors = [
        threading.Thread(target=predictor_loop, args=(run, i), name=f"predictor-{i}", daemon=True)
        for i in range(cfg.num_predictors)
    ]
    trainers = [
        threading.Thread(target=trainer_loop, args=(run, i), name=f"trainer-{i}", daemon=True)
        for i in range(cfg.num_trainers)
    ]
    for t in threads + predictors + trainers:
        t.start()

    interrupted = False
    try:
        for t in threads:
            while t.is_alive():
                t.join(timeout=0.2)
    except KeyboardInterrupt:
        interrupted = True
        run.stop.set()
        for t in threads:
            t.join()
    run.prediction_done.set()
    for t in predictors:
        t.join()
    run.training_done.set()
    for t in trainers:
        t.join()
    return interrupted


def _drive_sequential(run: _Run, rngs) -> bool:
    """Single agent, predictor, and trainer interleaved on one thread in a
    fixed order: predict inline, train whenever a full batch is queued, flush
    the remainder (largest batches first) at the end."""
    cfg = run.config
    env_rng, action_rng = rngs
    pending: deque[TrainingSample] = deque()

    def predict(agent_id: int, obs: Observation) -> tuple[np.ndarray, float]:
        out = run.store.predict(obs.scan_stack[None], obs.bearing_onehot[None])
        with run.count_lock:
            run.prediction_batches.append(1)
        return out.policy[0], float(out.value[0])

    def train_ready(final: bool) -> None:
        while len(pending) >= cfg.training_batch_size or (final and pending):
            batch = [pending.popleft() for _ in range(min(cfg.training_batch_size, len(pending)))]
            run.samples_out += len(batch)
            losses = run.store.train_on(batch, cfg.entropy_beta, cfg.value_coef)
            run.metrics.record_update(losses)

    def emit(buffer, bootstrap: float, terminal: bool) -> None:
        returns = compute_returns([r for _, _, r in buffer], cfg.gamma, bootstrap, terminal)
        for (obs, action, _), ret in zip(buffer, returns):
            pending.append(TrainingSample(obs, action, float(ret)))
            run.samples_in += 1
        train_ready(final=False)

    interrupted = False
    try:
        while run.episodes_done < cfg.total_episodes:
            rec = _run_episode(run, 0, env_rng, action_rng, predict, emit)
            if rec is not None:
                _finish_episode(run, rec)
            if run.stop.is_set():
                break
    except KeyboardInterrupt:
        interrupted = True
    train_ready(final=True)
    return interrupted


# --- Evaluation ---------------------------------------------------------------


@dataclass
class EvalMetrics:
    episodes: int
    success_rate: float
    collision_rate: float
    timeout_rate: float
    mean_steps: float
    mean_total_reward: float

    def as_dict(self) -> dict:
        return {
            "episodes": self.episodes,
            "success_rate": self.success_rate,
            "collision_rate": self.collision_rate,
            "timeout_rate": self.timeout_rate,
            "mean_steps": self.mean_steps,
            "mean_total_reward": self.mean_total_reward,
        }


def evaluate(
    params: NetParams,
    wmap: WorldMap,
    episodes: int,
    seed: int,
    env_config: Optional[EnvConfig] = None,
    trajectory_dir=None,
) -> EvalMetrics:
    """Greedy rollouts: argmax of the policy, no action sampling; the only
    randomness is episode setup and scanner noise."""
    from .sim_env import Status, write_trajectory_csv

    cfg = env_config or EnvConfig()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    counts = {Status.GOAL_REACHED: 0, Status.COLLIDED: 0, Status.TIMED_OUT: 0}
    total_steps = 0
    total_reward = 0.0
    if trajectory_dir is not None:
        trajectory_dir = Path(trajectory_dir)
        trajectory_dir.mkdir(parents=True, exist_ok=True)

    for episode in range(episodes):
        env = NavEnv(wmap, cfg, rng)
        obs = env.reset()
        rows = []
        steps = 0
        ep_reward = 0.0
        while True:
            out = acnet.forward(params, obs.scan_stack[None], obs.bearing_onehot[None])
            action = int(np.argmax(out.policy[0]))
            result = env.step(action)
            steps += 1
            ep_reward += result.reward
            pose = env.state.pose
            rows.append((
                steps, pose.position.x, pose.position.y, pose.heading,
                action, result.reward, result.status.value,
            ))
            obs = result.observation
            if result.terminal:
                counts[result.status] += 1
                break
        total_steps += steps
        total_reward += ep_reward
        if trajectory_dir is not None:
            write_trajectory_csv(trajectory_dir / f"episode_{episode:04d}.csv", rows)

    return EvalMetrics(
        episodes=episodes,
        success_rate=counts[Status.GOAL_REACHED] / episodes,
        collision_rate=counts[Status.COLLIDED] / episodes,
        timeout_rate=counts[Status.TIMED_OUT] / episodes,
        mean_steps=total_steps / episodes,
        mean_total_reward=total_reward / episodes,
    )
