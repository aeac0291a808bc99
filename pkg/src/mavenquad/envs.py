"""Waypoint-traversal POMDP: observations, reward, tasks, and batch stepping.

One set of shape-generic kernels implements the math for both the scalar
environment (used by deployment episodes and tests) and BatchEnv (used by
training and benchmarks), so the two paths are bit-identical element by
element.

Observation layout (22 dims): v/k_v (3), R row-major (9), (wp_k - p)/k_p for
the next two waypoints (6), previous action (4).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np
import yaml

from .autopilot import (PidState, RateCommand, autopilot_step,
                        gains_from_config, hover_throttle, motor_mix, rate_pid)
from .dynamics import (FaultSpec, QuadrotorParams, QuadrotorState, _integrate,
                       apply_fault, mix_rotor_thrusts, state_is_finite,
                       step_dynamics)

OBS_DIM = 22
ACT_DIM = 4
OBS_V = slice(0, 3)
OBS_R = slice(3, 12)
OBS_DP1 = slice(12, 15)
OBS_DP2 = slice(15, 18)
OBS_APREV = slice(18, 22)


class TerminationStatus(IntEnum):
    RUNNING = 0
    COLLISION = 1
    SUCCESS = 2
    TIMEOUT = 3


@dataclass
class TaskSpec:
    id: int
    mass: float                 # kg
    fault: FaultSpec

    def describe(self) -> dict:
        loss = self.fault.loss
        rotor = int(np.argmax(loss)) if loss.any() else -1
        return {"task_id": self.id, "mass": round(self.mass, 9),
                "fault_rotor": rotor,
                "fault_loss": float(loss[rotor]) if rotor >= 0 else 0.0}


@dataclass
class Track:
    waypoints: np.ndarray       # (k,3) m
    cursor: int = 0
    accept_radius: float = 1.0
    endless: bool = False       # training: resample a future waypoint on pass

    def next_waypoint(self, j=0):
        idx = min(self.cursor + j, len(self.waypoints) - 1)
        return self.waypoints[idx]

    @property
    def done(self) -> bool:
        return self.cursor >= len(self.waypoints)


def sample_tasks(scenario, cfg, rng):
    """Task grid for a scenario: random masses, or the rotor x loss grid."""
    if scenario == "mass":
        if cfg.mass_values is not None:
            masses = [float(m) for m in cfg.mass_values]
        else:
            masses = rng.uniform(cfg.mass_min, cfg.mass_max,
                                 size=cfg.n_mass_tasks).tolist()
        return [TaskSpec(id=i, mass=m, fault=FaultSpec())
                for i, m in enumerate(masses)]
    if scenario == "thrust_loss":
        tasks = []
        for rotor in cfg.fault_rotors:
            for level in cfg.loss_levels:
                loss = np.zeros(4)
                loss[rotor] = level
                tasks.append(TaskSpec(id=len(tasks), mass=cfg.nominal_mass,
                                      fault=FaultSpec(loss)))
        return tasks
    raise ValueError(f"unknown scenario '{scenario}' (expected mass or thrust_loss)")


# ---------------------------------------------------------------------------
# shared kernels (leading batch dims or none)

def _sq_dist(wp, p):
    dx = wp[..., 0] - p[..., 0]
    dy = wp[..., 1] - p[..., 1]
    dz = wp[..., 2] - p[..., 2]
    return dx * dx + dy * dy + dz * dz


def _obs_kernel(v, R, p, wp1, wp2, a_prev, k_v, k_p, clip):
    v_n = np.clip(v / k_v, -clip, clip)
    dp1 = np.clip((wp1 - p) / k_p, -clip, clip)
    dp2 = np.clip((wp2 - p) / k_p, -clip, clip)
    r_flat = R.reshape(R.shape[:-2] + (9,))
    return np.concatenate([v_n, r_flat, dp1, dp2, a_prev], axis=-1)


def _reward_kernel(p_prev, p_new, wp, a_prev, a, collided, rcfg):
    r_prog = _sq_dist(wp, p_prev) - _sq_dist(wp, p_new)
    da = a_prev - a
    r_smooth = -np.sqrt(da[..., 0] * da[..., 0] + da[..., 1] * da[..., 1]
                        + da[..., 2] * da[..., 2] + da[..., 3] * da[..., 3])
    r_safe = np.where(collided, -rcfg.r_collision, 0.0)
    r = (rcfg.lambda_progress * r_prog + rcfg.lambda_smooth * r_smooth
         + rcfg.lambda_safe * r_safe)
    return r, r_prog, r_smooth, r_safe


def _out_of_bounds(p, low, high):
    return ((p[..., 0] < low[0]) | (p[..., 0] > high[0])
            | (p[..., 1] < low[1]) | (p[..., 1] > high[1])
            | (p[..., 2] < low[2]) | (p[..., 2] > high[2]))


# ---------------------------------------------------------------------------
# scalar environment

def build_observation(quad, wp1, wp2, a_prev, env_cfg):
    return _obs_kernel(quad.v, quad.R, quad.p, wp1, wp2, a_prev,
                       np.asarray(env_cfg.k_v), np.asarray(env_cfg.k_p),
                       env_cfg.obs_clip)


def denormalize_action(a, env_cfg) -> RateCommand:
    return RateCommand(throttle=a[0],
                       omega_cmd=a[1:4] * np.asarray(env_cfg.omega_max))


def compute_reward(p_prev, p_new, wp, a_prev, a, collided, rcfg):
    """Weighted reward plus unweighted (progress, smoothness, safety) parts."""
    r, r_prog, r_smooth, r_safe = _reward_kernel(p_prev, p_new, wp, a_prev, a,
                                                 collided, rcfg)
    return r, (r_prog, r_smooth, r_safe)


def update_waypoints(track: Track, p, rng, wp_low, wp_high):
    """Advance the cursor (at most once) when p enters the acceptance sphere.

    Endless tracks append a fresh uniformly sampled waypoint on each pass so
    two upcoming waypoints always exist.
    """
    if track.done:
        return track, False
    wp = track.waypoints[track.cursor]
    if np.sqrt(_sq_dist(wp, p)) < track.accept_radius:
        wps = track.waypoints
        if track.endless:
            new_wp = rng.uniform(wp_low, wp_high)
            wps = np.vstack([wps, new_wp[None, :]])
        return Track(wps, track.cursor + 1, track.accept_radius,
                     track.endless), True
    return track, False


def check_termination(collided, track: Track, t, max_steps) -> TerminationStatus:
    if collided:
        return TerminationStatus.COLLISION
    if not track.endless and track.done:
        return TerminationStatus.SUCCESS
    if t >= max_steps:
        return TerminationStatus.TIMEOUT
    return TerminationStatus.RUNNING


@dataclass
class EnvState:
    quad: QuadrotorState
    track: Track
    pid: PidState
    a_prev: np.ndarray
    t: int
    status: TerminationStatus
    task: TaskSpec
    params: QuadrotorParams


def hover_action(cfg) -> np.ndarray:
    """Previous-action initializer: nominal-mass hover throttle, zero rates."""
    params = QuadrotorParams.from_config(cfg.quad, mass=cfg.tasks.nominal_mass)
    return np.array([hover_throttle(cfg.tasks.nominal_mass, params),
                     0.0, 0.0, 0.0])


def reset_env(task: TaskSpec, cfg, rng=None, track=None) -> EnvState:
    """Fresh episode state. track=None samples an endless training track."""
    ecf = cfg.env
    if track is None:
        wps = np.stack([rng.uniform(ecf.waypoint_low, ecf.waypoint_high)
                        for _ in range(2)])
        track = Track(wps, 0, ecf.accept_radius, endless=True)
    params = QuadrotorParams.from_config(cfg.quad, mass=task.mass)
    return EnvState(quad=QuadrotorState.at_rest(ecf.start_pos), track=track,
                    pid=PidState.zeros(), a_prev=hover_action(cfg), t=0,
                    status=TerminationStatus.RUNNING, task=task, params=params)


def env_step(env: EnvState, a, cfg, rng=None):
    """One POMDP step: autopilot -> dynamics -> reward -> waypoints -> status.

    Returns (obs, reward, status, new EnvState). The reward's progress term
    uses the pre-update immediate waypoint; the observation uses the updated
    track. Non-finite dynamics output freezes the pose and forces collision.
    """
    ecf = cfg.env
    a = np.asarray(a, dtype=np.float64)
    cmd = denormalize_action(a, ecf)
    gains = gains_from_config(cfg.autopilot)
    u, pid2 = autopilot_step(cmd, env.quad.w, env.pid, env.task.fault.loss,
                             env.params, gains, cfg.quad.dt)
    wrench = mix_rotor_thrusts(u, env.params)
    quad2 = step_dynamics(env.quad, wrench, env.params, cfg.quad.dt)
    finite = state_is_finite(quad2)
    if not finite:
        quad2 = env.quad
    collided = (not finite) or bool(_out_of_bounds(
        quad2.p, ecf.flight_low, ecf.flight_high))
    wp_cur = env.track.next_waypoint(0)
    r, _ = compute_reward(env.quad.p, quad2.p, wp_cur, env.a_prev, a,
                          collided, cfg.reward)
    track2, _passed = update_waypoints(env.track, quad2.p, rng,
                                       ecf.waypoint_low, ecf.waypoint_high)
    t2 = env.t + 1
    status = check_termination(collided, track2, t2, ecf.max_episode_steps)
    obs = build_observation(quad2, track2.next_waypoint(0),
                            track2.next_waypoint(1), a, ecf)
    env2 = EnvState(quad=quad2, track=track2, pid=pid2, a_prev=a.copy(),
                    t=t2, status=status, task=env.task, params=env.params)
    return obs, r, status, env2


# ---------------------------------------------------------------------------
# tracks

def switchback_track() -> np.ndarray:
    return np.array([[0.0, 0.0, 1.0], [-3.0, -3.0, 1.0], [3.0, 3.0, 1.0]])


NAMED_TRACKS = {"switchback": switchback_track}


def sample_track(rng, n_waypoints, env_cfg) -> np.ndarray:
    return rng.uniform(env_cfg.waypoint_low, env_cfg.waypoint_high,
                       size=(n_waypoints, 3))


def make_random_tracks(seed_tree, n, n_waypoints, env_cfg):
    """n seeded tracks; byte-identical for a given seed regardless of caller."""
    return [sample_track(np.random.default_rng(seed_tree.seq("tracks", i)),
                         n_waypoints, env_cfg) for i in range(n)]


def load_track_file(path):
    """YAML track file: {waypoints: [[x,y,z], ...], accept_radius: 1.0}."""
    with open(path) as fh:
        d = yaml.safe_load(fh)
    if not isinstance(d, dict) or "waypoints" not in d:
        raise ValueError(f"track file {path} must contain a 'waypoints' list")
    wps = np.asarray(d["waypoints"], dtype=np.float64)
    if wps.ndim != 2 or wps.shape[1] != 3 or len(wps) == 0:
        raise ValueError(f"track file {path}: waypoints must be an (n,3) list")
    return wps, float(d.get("accept_radius", 1.0))


# ---------------------------------------------------------------------------
# batch environment

class StepOut:
    __slots__ = ("obs", "reward", "status", "passed", "final_obs")

    def __init__(self, obs, reward, status, passed, final_obs):
        self.obs = obs              # (n,22) post-reset observations
        self.reward = reward        # (n,)
        self.status = status        # (n,) status after the step, before reset
        self.passed = passed        # (n,) waypoint passes this step
        self.final_obs = final_obs  # (n,22) pre-reset obs, valid where status!=0


class BatchEnv:
    """n synchronized environments sharing one scenario configuration.

    mode="train": endless tracks, auto-reset on termination, optional
    per-episode domain randomization (dr="mass"|"thrust_loss").
    mode="eval": fixed per-env track list, terminated environments freeze.
    """

    def __init__(self, n, cfg, task=None, mode="train", rngs=None,
                 tracks=None, dr=None):
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "eval" and tracks is None:
            raise ValueError("eval mode requires tracks")
        if mode == "train" and rngs is None:
            raise ValueError("train mode requires per-env rngs")
        if dr is not None and dr not in ("mass", "thrust_loss"):
            raise ValueError(f"unknown dr scenario {dr!r}")
        self.n = n
        self.cfg = cfg
        self.mode = mode
        self.dr = dr
        self.task = task
        self.rngs = rngs
        self.gains = gains_from_config(cfg.autopilot)
        self.params = QuadrotorParams.from_config(cfg.quad)
        self.k_v = np.asarray(cfg.env.k_v)
        self.k_p = np.asarray(cfg.env.k_p)
        self.omega_max = np.asarray(cfg.env.omega_max)
        self.flight_low = np.asarray(cfg.env.flight_low)
        self.flight_high = np.asarray(cfg.env.flight_high)
        self.wp_low = np.asarray(cfg.env.waypoint_low)
        self.wp_high = np.asarray(cfg.env.waypoint_high)
        self.hover = hover_action(cfg)
        self._ar = np.arange(n)

        base_mass = task.mass if task is not None else cfg.quad.mass
        base_loss = task.fault.loss if task is not None else np.zeros(4)
        self.mass = np.full(n, float(base_mass))
        self.loss = np.tile(base_loss, (n, 1))

        if mode == "eval":
            lens = [len(t) for t in tracks]
            length = max(lens)
            self.tracks_arr = np.zeros((n, length, 3))
            for i, t in enumerate(tracks):
                self.tracks_arr[i, :lens[i]] = t
                self.tracks_arr[i, lens[i]:] = t[-1]
            self.tlen = np.asarray(lens)
        else:
            self.wp1 = np.zeros((n, 3))
            self.wp2 = np.zeros((n, 3))

        self.p = np.zeros((n, 3))
        self.v = np.zeros((n, 3))
        self.R = np.zeros((n, 3, 3))
        self.w = np.zeros((n, 3))
        self.integ = np.zeros((n, 3))
        self.prev_meas = np.zeros((n, 3))
        self.a_prev = np.zeros((n, 4))
        self.t = np.zeros(n, dtype=np.int64)
        self.cursor = np.zeros(n, dtype=np.int64)
        self.status = np.zeros(n, dtype=np.int64)
        self.obs = np.zeros((n, OBS_DIM))
        self.ep_ends = 0
        self.ep_passes = 0
        self.ep_collisions = 0
        self.reset_all()

    def _wp(self, j):
        if self.mode == "eval":
            idx = np.minimum(self.cursor + j, self.tlen - 1)
            return self.tracks_arr[self._ar, idx]
        return self.wp1 if j == 0 else self.wp2

    def _reset_rows(self, idx):
        for i in idx:
            if self.dr == "mass":
                tc = self.cfg.tasks
                self.mass[i] = self.rngs[i].uniform(tc.mass_min, tc.mass_max)
            elif self.dr == "thrust_loss":
                tc = self.cfg.tasks
                rotor = int(self.rngs[i].integers(len(tc.fault_rotors)))
                level = self.rngs[i].uniform(0.0, max(tc.loss_levels))
                self.loss[i] = 0.0
                self.loss[i, tc.fault_rotors[rotor]] = level
            if self.mode == "train":
                self.wp1[i] = self.rngs[i].uniform(self.wp_low, self.wp_high)
                self.wp2[i] = self.rngs[i].uniform(self.wp_low, self.wp_high)
        self.p[idx] = np.asarray(self.cfg.env.start_pos)
        self.v[idx] = 0.0
        self.R[idx] = np.eye(3)
        self.w[idx] = 0.0
        self.integ[idx] = 0.0
        self.prev_meas[idx] = 0.0
        self.a_prev[idx] = self.hover
        self.t[idx] = 0
        self.cursor[idx] = 0
        self.status[idx] = 0
        self.obs[idx] = _obs_kernel(
            self.v[idx], self.R[idx], self.p[idx],
            self._wp(0)[idx], self._wp(1)[idx], self.a_prev[idx],
            self.k_v, self.k_p, self.cfg.env.obs_clip)

    def reset_all(self):
        self._reset_rows(self._ar)

    def step(self, actions) -> StepOut:
        """Step all live environments; frozen rows pass through unchanged."""
        cfg = self.cfg
        a = np.asarray(actions, dtype=np.float64)
        live = self.status == 0

        omega_cmd = a[:, 1:4] * self.omega_max
        pid = PidState(integ=self.integ, prev_meas=self.prev_meas)
        d, pid2 = rate_pid(self.w, omega_cmd, pid, self.gains, cfg.quad.dt)
        u = motor_mix(a[:, 0], d, self.params)
        u = apply_fault(u, self.loss, self.params)
        f_z, tau = mix_rotor_thrusts(u, self.params)
        p2, v2, R2, w2 = _integrate(self.p, self.v, self.R, self.w, f_z, tau,
                                    self.mass, self.params.J,
                                    self.params.J_inv, self.params.g,
                                    cfg.quad.dt)
        bad = ~(np.isfinite(p2).all(axis=1) & np.isfinite(v2).all(axis=1)
                & np.isfinite(R2).all(axis=(1, 2))
                & np.isfinite(w2).all(axis=1))
        if bad.any():
            p2[bad] = self.p[bad]
            v2[bad] = self.v[bad]
            R2[bad] = self.R[bad]
            w2[bad] = self.w[bad]
        collided = bad | _out_of_bounds(p2, self.flight_low, self.flight_high)

        wp_cur = self._wp(0)
        r, *_ = _reward_kernel(self.p, p2, wp_cur, self.a_prev, a, collided,
                               cfg.reward)
        dist = np.sqrt(_sq_dist(wp_cur, p2))
        adv = (dist < cfg.env.accept_radius) & live

        def commit(old, new):
            m = live if old.ndim == 1 else live.reshape(
                (-1,) + (1,) * (old.ndim - 1))
            return np.where(m, new, old)

        self.p = commit(self.p, p2)
        self.v = commit(self.v, v2)
        self.R = commit(self.R, R2)
        self.w = commit(self.w, w2)
        self.integ = commit(self.integ, pid2.integ)
        self.prev_meas = commit(self.prev_meas, pid2.prev_meas)
        self.a_prev = commit(self.a_prev, a)
        self.t = self.t + live

        if self.mode == "train":
            self.wp1 = np.where(adv[:, None], self.wp2, self.wp1)
            for i in np.nonzero(adv)[0]:
                self.wp2[i] = self.rngs[i].uniform(self.wp_low, self.wp_high)
        else:
            self.cursor = self.cursor + adv

        new_status = np.zeros(self.n, dtype=np.int64)
        new_status[collided] = int(TerminationStatus.COLLISION)
        if self.mode == "eval":
            done_track = (self.cursor >= self.tlen) & ~collided
            new_status[done_track] = int(TerminationStatus.SUCCESS)
        timed = (self.t >= cfg.env.max_episode_steps) & (new_status == 0)
        new_status[timed] = int(TerminationStatus.TIMEOUT)
        # keep the returned snapshot distinct from self.status: auto-reset
        # below zeroes the live copy in place
        status = np.where(live, new_status, self.status)
        self.status = status.copy()

        obs_new = _obs_kernel(self.v, self.R, self.p, self._wp(0),
                              self._wp(1), self.a_prev, self.k_v, self.k_p,
                              cfg.env.obs_clip)
        self.obs = np.where(live[:, None], obs_new, self.obs)

        reward = np.where(live, r, 0.0)
        final_obs = self.obs.copy()
        ended = live & (status != 0)
        self.ep_ends += int(ended.sum())
        self.ep_passes += int(adv.sum())
        self.ep_collisions += int((ended & collided).sum())

        if self.mode == "train" and ended.any():
            self._reset_rows(np.nonzero(ended)[0])
        return StepOut(self.obs, reward, status, adv, final_obs)

    def pop_counters(self):
        out = (self.ep_ends, self.ep_passes, self.ep_collisions)
        self.ep_ends = self.ep_passes = self.ep_collisions = 0
        return out
