"""Configuration dataclasses, YAML loading with dotted overrides, and seed streams.

Every tunable in the stack lives in one of the section dataclasses below; the
YAML config file mirrors this layout section by section. Unknown keys are
rejected with a diagnostic naming the bad key.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

import numpy as np
import yaml


class ConfigError(ValueError):
    pass


@dataclass
class QuadConfig:
    mass: float = 0.33                  # kg, nominal airframe mass
    inertia: tuple = (2.5e-3, 2.5e-3, 4.3e-3)   # kg m^2, diagonal of J
    arm_length: float = 0.1             # m, rotor arm
    c_tau: float = 0.01                 # m, rotor yaw-drag coefficient
    # per-rotor thrust ceiling, N: TWR 3.5 at 0.33 kg -> 3.5*0.33*9.81/4
    u_max: float = 2.8326375
    gravity: float = 9.81               # m/s^2
    dt: float = 0.01                    # s, sim and control timestep


@dataclass
class AutopilotConfig:
    # rate-loop PID gains per body axis (roll, pitch, yaw); output is a
    # normalized torque demand in [-1, 1]
    kp: tuple = (0.1, 0.1, 1.0)
    ki: tuple = (0.05, 0.05, 0.1)
    kd: tuple = (0.001, 0.001, 0.0005)
    integral_limit: float = 0.2         # cap on the accumulated ki*e*dt term


@dataclass
class EnvConfig:
    omega_max: tuple = (12.0, 12.0, 5.0)    # rad/s, body-rate command scale
    k_p: tuple = (6.0, 6.0, 1.0)            # m, waypoint-offset normalizer
    k_v: tuple = (15.0, 15.0, 10.0)         # m/s, velocity normalizer
    obs_clip: float = 5.0                   # defensive clamp on normalized obs
    accept_radius: float = 1.0              # m, waypoint acceptance sphere
    waypoint_low: tuple = (-3.0, -3.0, 0.5)     # m, waypoint sampling box
    waypoint_high: tuple = (3.0, 3.0, 1.5)
    flight_low: tuple = (-6.0, -6.0, 0.1)       # m, valid-flight workspace
    flight_high: tuple = (6.0, 6.0, 3.0)
    max_episode_steps: int = 1000
    start_pos: tuple = (0.0, 0.0, 1.0)      # m, episode start position


@dataclass
class RewardConfig:
    lambda_progress: float = 10.0       # weight on squared-distance reduction
    lambda_smooth: float = 1.0e-4       # weight on action-change penalty
    lambda_safe: float = 10.0           # weight on the safety term
    r_collision: float = 1.0            # collision penalty magnitude


@dataclass
class TaskConfig:
    scenario: str = "mass"              # "mass" or "thrust_loss"
    n_mass_tasks: int = 16
    mass_min: float = 0.25              # kg
    mass_max: float = 0.50              # kg
    mass_values: tuple | None = None    # explicit mass list overrides sampling
    nominal_mass: float = 0.33          # kg, fixed-task baseline + fault tasks
    loss_levels: tuple = (0.1, 0.2, 0.3, 0.4, 0.5)  # per-rotor ceiling loss
    fault_rotors: tuple = (0, 1, 2, 3)


@dataclass
class EncoderConfig:
    latent_dim: int = 6
    hidden: tuple = (64, 64)
    buffer_capacity: int = 256          # per-task context ring buffer
    context_batch: int = 128            # transitions sampled per task update
    push_per_step: int = 1              # transitions pushed per task per step
    lr: float = 1.0e-3
    update_every: int = 3               # env steps between encoder updates
    kl_weight_init: float = 0.1
    kl_target_scale: float = 0.1        # KL target = scale * latent_dim
    alpha_scale: float = 0.05           # KL-weight up-rate when KL > target
    beta_scale: float = 0.1             # KL-weight down-rate when KL < target
    kl_weight_min: float = 1.0e-4
    kl_weight_max: float = 10.0
    w_pos: float = 1.0
    w_rew: float = 1.0
    w_spec: float = 5.0e-3
    eps: float = 1.0e-6                 # variance floor / log-argument floor
    spec_min: float = -5.0              # clamp bounds on the diversity loss
    spec_max: float = 5.0
    huber_delta: float = 1.0


@dataclass
class PpoConfig:
    hidden: tuple = (128, 128)
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    n_minibatches: int = 8
    entropy_coef: float = 1.0e-3
    lr: float = 3.0e-4
    log_std_init: float = -1.0
    latent_refresh: int = 32            # steps between z resampling (1 = every step)


@dataclass
class TrainConfig:
    method: str = "maven"   # maven | standard_rl | rl_dr | critic_encoder_ablation
    iterations: int = 400
    rollout_steps: int = 64             # env steps per PPO iteration
    envs_per_task: int = 8
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 100


@dataclass
class EvalConfig:
    n_tracks: int = 100
    track_waypoints: int = 5
    deterministic_action: bool = False
    deterministic_latent: bool = False
    fault_rotor: int = 0                # rotor index used by thrust-loss eval


@dataclass
class Config:
    quad: QuadConfig = field(default_factory=QuadConfig)
    autopilot: AutopilotConfig = field(default_factory=AutopilotConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    tasks: TaskConfig = field(default_factory=TaskConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def default_config() -> Config:
    return Config()


def config_to_dict(cfg: Config) -> dict:
    """Nested plain-python dict (lists instead of tuples, YAML/JSON friendly)."""
    out = {}
    for sec in fields(cfg):
        sub = getattr(cfg, sec.name)
        out[sec.name] = {
            f.name: _plain(getattr(sub, f.name)) for f in fields(sub)
        }
    return out


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def _coerce(value, default, key):
    """Coerce a YAML value to the type of the dataclass default."""
    if value is None and default is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key '{key}' expects a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{key}' expects an integer, got {value!r}")
        if isinstance(value, float) and value != int(value):
            raise ConfigError(f"config key '{key}' expects an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{key}' expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key '{key}' expects a string, got {value!r}")
        return value
    if isinstance(default, tuple) or default is None:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key '{key}' expects a list, got {value!r}")
        return tuple(_plain_scalar(x, key) for x in value)
    raise ConfigError(f"config key '{key}' has unsupported type")


def _plain_scalar(x, key):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ConfigError(f"config key '{key}' expects numeric list entries, got {x!r}")
    return float(x) if isinstance(x, float) else x


def config_from_dict(d: dict) -> Config:
    """Build a Config from a nested dict, rejecting unknown keys."""
    if not isinstance(d, dict):
        raise ConfigError("config root must be a mapping of sections")
    cfg = Config()
    valid_secs = {f.name for f in fields(cfg)}
    for sec_name, sec_val in d.items():
        if sec_name not in valid_secs:
            raise ConfigError(
                f"unknown config section '{sec_name}'; valid sections: "
                + ", ".join(sorted(valid_secs)))
        sub = getattr(cfg, sec_name)
        if sec_val is None:
            continue
        if not isinstance(sec_val, dict):
            raise ConfigError(f"config section '{sec_name}' must be a mapping")
        valid_keys = {f.name: f for f in fields(sub)}
        for key, val in sec_val.items():
            if key not in valid_keys:
                raise ConfigError(
                    f"unknown config key '{sec_name}.{key}'; valid keys under "
                    f"'{sec_name}': " + ", ".join(sorted(valid_keys)))
            default = getattr(sub, key)
            setattr(sub, key, _coerce(val, default, f"{sec_name}.{key}"))
    return cfg


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ("section.key", "value") pairs; values parsed as YAML scalars."""
    for key, raw in overrides:
        if key.count(".") != 1:
            raise ConfigError(
                f"override key '{key}' must be of the form section.key")
        sec, name = key.split(".")
        try:
            val = yaml.safe_load(raw)
        except yaml.YAMLError:
            raise ConfigError(f"cannot parse override value {raw!r} for '{key}'")
        d.setdefault(sec, {})
        if not isinstance(d[sec], dict):
            raise ConfigError(f"config section '{sec}' must be a mapping")
        d[sec][name] = val
    return d


def load_config(path=None, overrides=()) -> Config:
    """Load YAML config (optional) and apply dotted overrides, validating keys."""
    d = {}
    if path is not None:
        with open(path) as fh:
            text = fh.read()
        try:
            d = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
            raise ConfigError(f"invalid YAML in {path}{where}: {e}")
    apply_overrides(d, overrides)
    return config_from_dict(d)


def save_config(cfg: Config, path):
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)


# Named child streams of the run seed. Streams are derived positionally from
# SeedSequence spawn keys so the derivation is independent of call order.
_STREAMS = (
    "tasks",        # task-grid sampling
    "tracks",       # evaluation track generation
    "net_policy",   # parameter init streams
    "net_critic",
    "net_encoder",
    "net_fdyn",
    "net_frew",
    "action",       # rollout action sampling
    "latent",       # latent sampling during training
    "shuffle",      # PPO minibatch permutations
    "env",          # per-environment reset streams (sub-keyed by env index)
    "ctx",          # context-buffer push/sample streams
    "eval",         # deployment-time streams (sub-keyed by trial)
)
_STREAM_INDEX = {name: i for i, name in enumerate(_STREAMS)}


class SeedTree:
    """Deterministic named RNG streams derived from one integer seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def seq(self, name: str, *key: int) -> np.random.SeedSequence:
        idx = _STREAM_INDEX[name]
        return np.random.SeedSequence(self.seed, spawn_key=(idx,) + tuple(key))

    def rng(self, name: str, *key: int) -> np.random.Generator:
        return np.random.default_rng(self.seq(name, *key))
