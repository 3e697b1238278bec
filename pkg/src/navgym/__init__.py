"""navgym: a fast batched 2D lidar navigation simulator with a GA3C-style
actor-critic trainer, lidar/depth-camera scan fusion, and a CLI."""

from .geometry import (
    Circle,
    Pose,
    Scan,
    ScannerSpec,
    Segment,
    Vec2,
    apply_noise,
    cast_scan,
    cast_scan_scalar,
    distance_to_obstacle,
    ray_circle_intersect,
    ray_segment_intersect,
)
from .worldmap import (
    Disk,
    Rect,
    WorldMap,
    convert_svg,
    load_builtin_map,
    load_map,
    resolve_map,
    sample_free_pose,
    save_map,
)
from .sim_env import (
    ActionSet,
    EnvConfig,
    NavEnv,
    Observation,
    RobotSpec,
    Status,
    StepResult,
    compute_reward,
    default_action_set,
    encode_orientation,
    integrate_motion,
    normalize_scan,
    reset,
    step,
)
from .fusion import PointCloud, VirtualScanSpec, fuse_scans, pointcloud_to_scan
from .acnet import (
    NetConfig,
    NetParams,
    OptState,
    TrainingSample,
    apply_update,
    compute_gradients,
    forward,
    init_opt_state,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .ga3c import TrainConfig, compute_returns, evaluate, run_training

__version__ = "0.1.0"
