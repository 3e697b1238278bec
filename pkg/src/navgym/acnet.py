"""Hand-rolled actor-critic network: two strided 1D convolutions over the scan
stack, a dense layer joined by the one-hot goal bearing, and softmax-policy /
scalar-value heads. Includes analytic gradients for the advantage actor-critic
loss, an RMSProp-style update, and binary checkpoint I/O.

Parameters are float32 for training; every routine follows the parameter dtype
so tests can run the whole pipeline in float64.
"""

from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass, fields
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .sim_env import Observation

CHECKPOINT_MAGIC = b"NAVG"
CHECKPOINT_VERSION = 1

ENTROPY_BETA = 0.01
VALUE_COEF = 0.5


@dataclass(frozen=True)
class NetConfig:
    num_beams: int = 1081
    scan_frames: int = 4
    conv1_filters: int = 16
    conv1_kernel: int = 9
    conv1_stride: int = 4
    conv2_filters: int = 32
    conv2_kernel: int = 5
    conv2_stride: int = 2
    dense_units: int = 256
    bearing_bins: int = 128
    num_actions: int = 7

    def __post_init__(self):
        if self.conv1_out_len < self.conv2_kernel:
            raise ValueError("scan too short for the convolution stack")

    @property
    def conv1_out_len(self) -> int:
        return (self.num_beams - self.conv1_kernel) // self.conv1_stride + 1

    @property
    def conv2_out_len(self) -> int:
        return (self.conv1_out_len - self.conv2_kernel) // self.conv2_stride + 1

    @property
    def flat_len(self) -> int:
        return self.conv2_out_len * self.conv2_filters

    @property
    def dense_in(self) -> int:
        return self.flat_len + self.bearing_bins


# (name, shape builder) in checkpoint order
_TENSOR_SHAPES = (
    ("conv1_w", lambda c: (c.conv1_filters, c.scan_frames, c.conv1_kernel)),
    ("conv1_b", lambda c: (c.conv1_filters,)),
    ("conv2_w", lambda c: (c.conv2_filters, c.conv1_filters, c.conv2_kernel)),
    ("conv2_b", lambda c: (c.conv2_filters,)),
    ("dense_w", lambda c: (c.dense_in, c.dense_units)),
    ("dense_b", lambda c: (c.dense_units,)),
    ("policy_w", lambda c: (c.dense_units, c.num_actions)),
    ("policy_b", lambda c: (c.num_actions,)),
    ("value_w", lambda c: (c.dense_units, 1)),
    ("value_b", lambda c: (1,)),
)

TENSOR_NAMES = tuple(name for name, _ in _TENSOR_SHAPES)


@dataclass
class NetParams:
    config: NetConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def dtype(self):
        return self.tensors["conv1_w"].dtype

    def copy(self) -> "NetParams":
        return NetParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


@dataclass
class NetOutput:
    """Batched outputs: policy rows are probability vectors, value is per-sample."""

    policy: np.ndarray  # (B, num_actions)
    value: np.ndarray  # (B,)


@dataclass
class TrainingSample:
    observation: Observation
    action: int
    return_R: float


@dataclass
class OptState:
    """RMSProp-style per-parameter accumulators."""

    accumulators: dict[str, np.ndarray]
    learning_rate: float = 3e-4
    decay: float = 0.99
    epsilon: float = 1e-6


def tensor_shapes(config: NetConfig) -> list[tuple[str, tuple[int, ...]]]:
    return [(name, shape(config)) for name, shape in _TENSOR_SHAPES]


def init_params(
    rng: np.random.Generator,
    config: NetConfig = NetConfig(),
    dtype=np.float32,
) -> NetParams:
    """Uniform(+-sqrt(6/(fan_in+fan_out))) weights, zero biases."""
    fans = {
        "conv1_w": (config.scan_frames * config.conv1_kernel, config.conv1_filters * config.conv1_kernel),
        "conv2_w": (config.conv1_filters * config.conv2_kernel, config.conv2_filters * config.conv2_kernel),
        "dense_w": (config.dense_in, config.dense_units),
        "policy_w": (config.dense_units, config.num_actions),
        "value_w": (config.dense_units, 1),
    }
    tensors = {}
    for name, shape in tensor_shapes(config):
        if name.endswith("_b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in, fan_out = fans[name]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-limit, limit, shape).astype(dtype)
    return NetParams(config, tensors)


def init_opt_state(params: NetParams, learning_rate: float = 3e-4,
                   decay: float = 0.99, epsilon: float = 1e-6) -> OptState:
    acc = {name: np.zeros_like(t) for name, t in params.tensors.items()}
    return OptState(acc, learning_rate, decay, epsilon)


@lru_cache(maxsize=8)
def _window_index(out_len: int, kernel: int, stride: int) -> np.ndarray:
    return np.arange(out_len)[:, None] * stride + np.arange(kernel)[None, :]


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


class _ForwardCache:
    __slots__ = ("cols1", "z1", "cols2", "z2", "dense_in", "z3", "a3",
                 "log_policy", "policy", "value")


def _forward_cached(params: NetParams, scans: np.ndarray, bearings: np.ndarray) -> _ForwardCache:
    cfg = params.config
    dt = params.dtype
    scans = np.ascontiguousarray(scans, dtype=dt)
    bearings = np.ascontiguousarray(bearings, dtype=dt)
    if scans.ndim != 3 or scans.shape[1:] != (cfg.scan_frames, cfg.num_beams):
        raise ValueError(f"scan batch must be (B, {cfg.scan_frames}, {cfg.num_beams}), got {scans.shape}")
    if bearings.ndim != 2 or bearings.shape != (scans.shape[0], cfg.bearing_bins):
        raise ValueError(f"bearing batch must be (B, {cfg.bearing_bins}), got {bearings.shape}")
    batch = scans.shape[0]
    cache = _ForwardCache()

    idx1 = _window_index(cfg.conv1_out_len, cfg.conv1_kernel, cfg.conv1_stride)
    # (B, C, O1, K1) -> (B, O1, C*K1): rows are flattened receptive fields
    cols1 = scans[:, :, idx1].transpose(0, 2, 1, 3).reshape(batch, cfg.conv1_out_len, -1)
    w1 = params["conv1_w"].reshape(cfg.conv1_filters, -1)
    cache.cols1 = cols1
    cache.z1 = cols1 @ w1.T + params["conv1_b"]
    a1 = _relu(cache.z1)  # (B, O1, F1)

    idx2 = _window_index(cfg.conv2_out_len, cfg.conv2_kernel, cfg.conv2_stride)
    # (B, O2, K2, F1) -> (B, O2, K2*F1); weights transposed to match (tap, channel)
    cols2 = a1[:, idx2, :].reshape(batch, cfg.conv2_out_len, -1)
    w2 = params["conv2_w"].transpose(0, 2, 1).reshape(cfg.conv2_filters, -1)
    cache.cols2 = cols2
    cache.z2 = cols2 @ w2.T + params["conv2_b"]
    a2 = _relu(cache.z2)  # (B, O2, F2)

    cache.dense_in = np.concatenate([a2.reshape(batch, -1), bearings], axis=1)
    cache.z3 = cache.dense_in @ params["dense_w"] + params["dense_b"]
    cache.a3 = _relu(cache.z3)

    logits = cache.a3 @ params["policy_w"] + params["policy_b"]
    cache.log_policy = _log_softmax(logits)
    cache.policy = np.exp(cache.log_policy)
    cache.value = (cache.a3 @ params["value_w"])[:, 0] + params["value_b"][0]
    return cache


def forward(params: NetParams, scans: np.ndarray, bearings: np.ndarray) -> NetOutput:
    """Batched forward pass over raw input arrays."""
    cache = _forward_cached(params, scans, bearings)
    return NetOutput(cache.policy, cache.value)


def batch_arrays(observations: Sequence[Observation]) -> tuple[np.ndarray, np.ndarray]:
    scans = np.stack([o.scan_stack for o in observations])
    bearings = np.stack([o.bearing_onehot for o in observations])
    return scans, bearings


def forward_batch(params: NetParams, observations: Sequence[Observation]) -> NetOutput:
    return forward(params, *batch_arrays(observations))


@dataclass
class LossStats:
    policy_loss: float
    value_loss: float
    entropy: float

    @property
    def total(self) -> float:
        return self.policy_loss + self.value_loss - ENTROPY_BETA * self.entropy


def compute_gradients(
    params: NetParams,
    batch: Sequence[TrainingSample],
    entropy_beta: float = ENTROPY_BETA,
    value_coef: float = VALUE_COEF,
) -> tuple[dict[str, np.ndarray], LossStats]:
    """Gradients of the mean actor-critic loss over the batch.

    Per sample: -log pi(a|s) * (R - V(s)) - beta * H(pi) + c_v * (R - V(s))^2,
    with the advantage treated as a constant in the policy term.
    """
    if not batch:
        raise ValueError("gradient batch must be nonempty")
    cfg = params.config
    dt = params.dtype
    scans, bearings = batch_arrays([s.observation for s in batch])
    actions = np.array([s.action for s in batch], dtype=np.int64)
    returns = np.array([s.return_R for s in batch], dtype=dt)

    cache = _forward_cached(params, scans, bearings)
    b = len(batch)
    rows = np.arange(b)

    advantage = returns - cache.value  # constant for the policy term
    entropy = -(cache.policy * cache.log_policy).sum(axis=1)

    # heads
    dlogits = cache.policy.copy()
    dlogits[rows, actions] -= 1.0
    dlogits *= advantage[:, None]
    dlogits += entropy_beta * cache.policy * (cache.log_policy + entropy[:, None])
    dlogits /= b
    dvalue = (-2.0 * value_coef / b) * advantage  # (B,)

    grads: dict[str, np.ndarray] = {}
    grads["policy_w"] = cache.a3.T @ dlogits
    grads["policy_b"] = dlogits.sum(axis=0)
    grads["value_w"] = (cache.a3.T @ dvalue)[:, None]
    grads["value_b"] = np.array([dvalue.sum()], dtype=dt)

    da3 = dlogits @ params["policy_w"].T + dvalue[:, None] * params["value_w"][:, 0]
    dz3 = da3 * (cache.z3 > 0)
    grads["dense_w"] = cache.dense_in.T @ dz3
    grads["dense_b"] = dz3.sum(axis=0)
    ddense_in = dz3 @ params["dense_w"].T

    da2 = ddense_in[:, : cfg.flat_len].reshape(b, cfg.conv2_out_len, cfg.conv2_filters)
    dz2 = da2 * (cache.z2 > 0)
    dw2 = dz2.reshape(-1, cfg.conv2_filters).T @ cache.cols2.reshape(-1, cache.cols2.shape[2])
    grads["conv2_w"] = (
        dw2.reshape(cfg.conv2_filters, cfg.conv2_kernel, cfg.conv1_filters).transpose(0, 2, 1)
    )
    grads["conv2_b"] = dz2.sum(axis=(0, 1))

    w2 = params["conv2_w"].transpose(0, 2, 1).reshape(cfg.conv2_filters, -1)
    dcols2 = (dz2 @ w2).reshape(b, cfg.conv2_out_len, cfg.conv2_kernel, cfg.conv1_filters)
    da1 = np.zeros((b, cfg.conv1_out_len, cfg.conv1_filters), dtype=dt)
    base = np.arange(cfg.conv2_out_len) * cfg.conv2_stride
    for k in range(cfg.conv2_kernel):
        # windows never collide within one tap offset, so plain fancy-index add works
        da1[:, base + k, :] += dcols2[:, :, k, :]
    dz1 = da1 * (cache.z1 > 0)
    dw1 = dz1.reshape(-1, cfg.conv1_filters).T @ cache.cols1.reshape(-1, cache.cols1.shape[2])
    grads["conv1_w"] = dw1.reshape(cfg.conv1_filters, cfg.scan_frames, cfg.conv1_kernel)
    grads["conv1_b"] = dz1.sum(axis=(0, 1))

    grads = {name: np.asarray(g, dtype=dt) for name, g in grads.items()}
    losses = LossStats(
        policy_loss=float(np.mean(-cache.log_policy[rows, actions] * advantage)),
        value_loss=float(np.mean(value_coef * advantage**2)),
        entropy=float(np.mean(entropy)),
    )
    return grads, losses


def apply_update(params: NetParams, opt: OptState, grads: dict[str, np.ndarray]) -> None:
    """acc = decay*acc + (1-decay)*g^2; param -= lr * g / sqrt(acc + eps). In place."""
    for name, g in grads.items():
        acc = opt.accumulators[name]
        acc *= opt.decay
        acc += (1.0 - opt.decay) * g * g
        params.tensors[name] -= opt.learning_rate * g / np.sqrt(acc + opt.epsilon)


# --- Checkpoint I/O ----------------------------------------------------------

_CONFIG_FIELDS = tuple(f.name for f in fields(NetConfig))
_HEADER = struct.Struct(f"<4sIQQddd{len(_CONFIG_FIELDS)}I")


class CheckpointError(Exception):
    pass


def config_hash(config_text: str) -> int:
    """First 8 bytes of sha256 over the canonical run-config text, as u64."""
    return int.from_bytes(hashlib.sha256(config_text.encode("utf-8")).digest()[:8], "little")


def save_checkpoint(params: NetParams, opt: OptState, metadata: dict) -> bytes:
    """Little-endian binary: header, then parameter tensors in fixed order, then
    the optimizer accumulators in the same order, all float32."""
    cfg = params.config
    header = _HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        int(metadata.get("config_hash", 0)),
        int(metadata.get("episode_count", 0)),
        float(opt.learning_rate),
        float(opt.decay),
        float(opt.epsilon),
        *(getattr(cfg, name) for name in _CONFIG_FIELDS),
    )
    chunks = [header]
    for name in TENSOR_NAMES:
        chunks.append(np.ascontiguousarray(params.tensors[name], dtype="<f4").tobytes())
    for name in TENSOR_NAMES:
        chunks.append(np.ascontiguousarray(opt.accumulators[name], dtype="<f4").tobytes())
    return b"".join(chunks)


def load_checkpoint(
    data: bytes, expected_config_hash: Optional[int] = None
) -> tuple[NetParams, OptState, dict]:
    if len(data) < _HEADER.size:
        raise CheckpointError(f"checkpoint truncated: {len(data)} bytes is shorter than the header")
    unpacked = _HEADER.unpack_from(data)
    magic, version, cfg_hash, episode_count, lr, decay, eps = unpacked[:7]
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; not a navgym checkpoint")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = NetConfig(**dict(zip(_CONFIG_FIELDS, unpacked[7:])))
    shapes = tensor_shapes(config)
    body = sum(int(np.prod(s)) for _, s in shapes) * 4 * 2
    if len(data) != _HEADER.size + body:
        raise CheckpointError(
            f"checkpoint size mismatch: expected {_HEADER.size + body} bytes, got {len(data)}"
        )
    if expected_config_hash is not None and expected_config_hash != cfg_hash:
        warnings.warn(
            f"checkpoint config hash {cfg_hash:#x} does not match the current "
            f"config {expected_config_hash:#x}; proceeding anyway",
            stacklevel=2,
        )
    offset = _HEADER.size

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape)) * 4
        arr = np.frombuffer(data, dtype="<f4", count=int(np.prod(shape)), offset=offset)
        offset += n
        return arr.reshape(shape).copy()

    tensors = {name: take(shape) for name, shape in shapes}
    acc = {name: take(shape) for name, shape in shapes}
    params = NetParams(config, tensors)
    opt = OptState(acc, lr, decay, eps)
    meta = {"config_hash": cfg_hash, "episode_count": episode_count}
    return params, opt, meta


def save_checkpoint_file(path, params: NetParams, opt: OptState, metadata: dict) -> None:
    with open(path, "wb") as f:
        f.write(save_checkpoint(params, opt, metadata))


def load_checkpoint_file(path, expected_config_hash: Optional[int] = None):
    with open(path, "rb") as f:
        return load_checkpoint(f.read(), expected_config_hash)
