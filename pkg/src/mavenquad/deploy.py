"""Deployment: frozen networks, online context inference, benchmark suites.

The deployment loop mirrors meta-testing: start from the latent prior,
act, append the observed transition to an online context buffer, and
re-infer the posterior from everything buffered before the next action.
No gradients exist anywhere on this path.
"""

import os
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_checkpoint
from .config import SeedTree, apply_overrides, config_from_dict
from .encoder import CTX_DIM, ContextBuffer, Encoder
from .envs import (ACT_DIM, OBS_DIM, TaskSpec, TerminationStatus, Track,
                   build_observation, env_step, make_random_tracks,
                   reset_env, switchback_track, NAMED_TRACKS)
from .dynamics import FaultSpec
from .metrics import (EvalReport, Trajectory, export_trajectory,
                      trajectory_metrics)
from .nn import param_checksum, sample_to_action
from .ppo import PolicyValue

ENCODER_METHODS = ("maven", "critic_encoder_ablation")


class CheckpointMismatch(ValueError):
    """Checkpoint tensors do not fit the configured architecture."""


class OnlineContext:
    """Transition ring buffer plus cached per-row factors.

    The encoder is frozen during deployment, so each transition is encoded
    once on push; the posterior is re-aggregated from all cached factors on
    every query.
    """

    def __init__(self, encoder: Encoder, capacity: int = 256):
        self.encoder = encoder
        self.buffer = ContextBuffer(capacity, task_id=-1)
        self.d = encoder.d
        self.mu = np.zeros((capacity, self.d))
        self.var = np.ones((capacity, self.d))

    def __len__(self):
        return len(self.buffer)

    def push(self, o, a, r, o_next):
        slot = self.buffer.head
        self.buffer.push(o, a, r, o_next)
        row = np.concatenate([o, a, [r], o_next])[None, :]
        mu, var = self.encoder.encode_factor_np(row)
        self.mu[slot] = mu[0]
        self.var[slot] = var[0]

    def posterior(self):
        """(mu, var) of q(z | C); the N(0, I) prior when C is empty."""
        n = len(self.buffer)
        if n == 0:
            return np.zeros(self.d), np.ones(self.d)
        inv = 1.0 / self.var[:n]
        var_post = 1.0 / inv.sum(axis=0)
        mu_post = var_post * (self.mu[:n] * inv).sum(axis=0)
        return mu_post, var_post


@dataclass
class Deployment:
    """A checkpoint rebuilt into runnable frozen networks."""
    method: str
    seed: int
    cfg: object
    policy: PolicyValue
    encoder: Encoder = None
    extra: dict = None

    def checksum(self) -> str:
        params = list(self.policy.params)
        if self.encoder is not None:
            params += self.encoder.params + self.encoder.f_dyn.params
        return param_checksum(params)


def _load_tensor(param, name, tensors):
    if name not in tensors:
        raise CheckpointMismatch(f"checkpoint is missing tensor '{name}'")
    arr = tensors[name]
    if arr.shape != param.data.shape:
        raise CheckpointMismatch(
            f"tensor '{name}' has shape {arr.shape}, the configured "
            f"architecture needs {param.data.shape}")
    param.data = arr.astype(np.float64, copy=True)


def _load_named(net_named, tensors):
    for name, holder in net_named.items():
        _load_tensor(holder, name, tensors)


def load_deployment(path: str, overrides=()) -> Deployment:
    """Rebuild networks from a checkpoint, refusing dimension mismatches.

    overrides: dotted ("section.key", value) pairs patched over the stored
    config snapshot (architecture keys that no longer fit the tensors fail
    the dimension check).
    """
    ck = load_checkpoint(path)
    cfg_dict = {k: dict(v) for k, v in ck.config.items()}
    apply_overrides(cfg_dict, overrides)
    cfg = config_from_dict(cfg_dict)
    rng = np.random.default_rng(0)  # placeholder init, overwritten below
    policy = PolicyValue(OBS_DIM, cfg.encoder.latent_dim, ACT_DIM, cfg.ppo,
                         rng, rng)
    holders = policy.named_params()
    encoder = None
    if ck.method in ENCODER_METHODS:
        encoder = Encoder(cfg.encoder, rng, rng, rng)
        holders.update(encoder.named_params())
    unknown = set(ck.tensors) - set(holders)
    if unknown:
        raise CheckpointMismatch(
            "checkpoint holds tensors the architecture does not: "
            + ", ".join(sorted(unknown)))
    _load_named(holders, ck.tensors)
    return Deployment(method=ck.method, seed=ck.seed, cfg=cfg, policy=policy,
                      encoder=encoder, extra=ck.extra)


def trial_rngs(seed: int, *key):
    """(action, latent) generator pair for one deployment trial."""
    tree = SeedTree(seed)
    return tree.rng("eval", 0, *key), tree.rng("eval", 1, *key)


def meta_test_episode(policy, encoder, task: TaskSpec, track_wps, cfg,
                      rng_action=None, rng_latent=None, *,
                      accept_radius=None, deterministic_action=False,
                      deterministic_latent=False, on_step=None):
    """One deployment episode on a finite track.

    Returns (Trajectory, metrics dict). Each step infers z from the full
    online context (prior when empty), acts, then appends the transition.
    on_step(t, mu, var) exposes the posterior actually used per step.
    """
    if rng_action is None:
        rng_action = np.random.default_rng(cfg.train.seed)
    if rng_latent is None:
        rng_latent = np.random.default_rng(cfg.train.seed + 1)
    ecf = cfg.env
    radius = ecf.accept_radius if accept_radius is None else accept_radius
    wps = np.asarray(track_wps, dtype=np.float64)
    track = Track(wps.copy(), 0, radius, endless=False)
    env = reset_env(task, cfg, track=track)
    obs = build_observation(env.quad, track.next_waypoint(0),
                            track.next_waypoint(1), env.a_prev, ecf)
    d = policy.latent_dim
    omega_max = np.asarray(ecf.omega_max)
    rec = {k: [] for k in ("t", "p", "v", "w", "throttle", "rate_cmd",
                           "wp", "z_mu", "z_var")}
    ctx = OnlineContext(encoder, cfg.encoder.buffer_capacity) \
        if encoder is not None else None

    def record(env_state, a, mu, var):
        rec["t"].append(env_state.t * cfg.quad.dt)
        rec["p"].append(env_state.quad.p.copy())
        rec["v"].append(env_state.quad.v.copy())
        rec["w"].append(env_state.quad.w.copy())
        rec["throttle"].append(a[0])
        rec["rate_cmd"].append(a[1:4] * omega_max)
        rec["wp"].append(env_state.track.cursor)
        if ctx is not None:
            rec["z_mu"].append(mu)
            rec["z_var"].append(var)

    status = TerminationStatus.RUNNING
    while status == TerminationStatus.RUNNING:
        if ctx is not None:
            mu, var = ctx.posterior()
            if deterministic_latent:
                z = mu.copy()
            else:
                z = mu + np.sqrt(var) * rng_latent.standard_normal(d)
        else:
            mu = var = None
            z = np.zeros(d)
        if on_step is not None:
            on_step(env.t, mu, var)
        s, _, _ = policy.act(obs[None], z[None], rng_action,
                             deterministic=deterministic_action)
        a = sample_to_action(s)[0]
        record(env, a, mu, var)
        obs2, r, status, env2 = env_step(env, a, cfg)
        if ctx is not None:
            ctx.push(obs, a, float(r), obs2)
        obs, env = obs2, env2

    final_mu, final_var = ctx.posterior() if ctx is not None else (None, None)
    record(env, np.zeros(ACT_DIM), final_mu, final_var)

    traj = Trajectory(
        t=np.asarray(rec["t"]), p=np.stack(rec["p"]), v=np.stack(rec["v"]),
        w=np.stack(rec["w"]), throttle=np.asarray(rec["throttle"]),
        rate_cmd=np.stack(rec["rate_cmd"]),
        waypoint_index=np.asarray(rec["wp"], dtype=np.int64),
        n_waypoints=len(wps), status=int(status),
        z_mu=np.stack(rec["z_mu"]) if rec["z_mu"] else None,
        z_var=np.stack(rec["z_var"]) if rec["z_var"] else None)
    return traj, trajectory_metrics(traj)


# ---------------------------------------------------------------------------
# benchmark suites

def resolve_suite(suite: str, cfg, seed: int, n_tracks: int):
    """[(name, waypoints)] for a suite; identical bytes for a given seed."""
    if suite == "switchback":
        return [("switchback", switchback_track())]
    if suite == "random_tracks":
        tree = SeedTree(seed)
        tracks = make_random_tracks(tree, n_tracks,
                                    cfg.eval.track_waypoints, cfg.env)
        return [(f"random_{i:04d}", wps) for i, wps in enumerate(tracks)]
    if suite in NAMED_TRACKS:
        return [(suite, NAMED_TRACKS[suite]())]
    raise ValueError(f"unknown suite {suite!r} (switchback, random_tracks, "
                     "or a named track)")


def mass_eval_tasks(masses) -> list:
    return [TaskSpec(id=i, mass=float(m), fault=FaultSpec())
            for i, m in enumerate(masses)]


def fault_eval_tasks(levels=(0.0, 0.15, 0.30, 0.45, 0.60), rotor=0,
                     mass=0.33) -> list:
    out = []
    for i, level in enumerate(levels):
        loss = np.zeros(4)
        loss[rotor] = level
        out.append(TaskSpec(id=i, mass=mass, fault=FaultSpec(loss)))
    return out


def run_benchmark(checkpoints: dict, suite: str, tasks, n_tracks: int,
                  seed: int, out_dir=None, overrides=(),
                  deterministic_action=False, deterministic_latent=False,
                  export_first=False, progress=False) -> EvalReport:
    """Evaluate each method's checkpoint on method-identical track/task sets.

    checkpoints: {method_label: checkpoint path}. Every method sees byte
    identical tracks and the same per-trial rng streams. Network parameters
    are checksummed around each method's trials; any drift is an error.
    """
    report = EvalReport()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    deps = {}
    for method, path in checkpoints.items():
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing checkpoint for {method}: {path}")
        deps[method] = load_deployment(path, overrides)
    # one track set for everyone, regardless of per-checkpoint configs
    tracks = resolve_suite(suite, next(iter(deps.values())).cfg, seed,
                           n_tracks)
    for method, dep in deps.items():
        before = dep.checksum()
        for task in tasks:
            for ti, (name, wps) in enumerate(tracks):
                rng_a, rng_l = trial_rngs(seed, task.id, ti)
                traj, m = meta_test_episode(
                    dep.policy, dep.encoder, task, wps, dep.cfg,
                    rng_a, rng_l,
                    deterministic_action=deterministic_action,
                    deterministic_latent=deterministic_latent)
                report.add(method, task.describe(), name, m)
                if export_first and ti == 0 and out_dir:
                    export_trajectory(traj, os.path.join(
                        out_dir, f"traj_{method}_task{task.id}_{name}.csv"))
            if progress:
                sr = report.success_rate(method=method, task_id=task.id)
                print(f"{method} task {task.id}: success {sr:.1f}% "
                      f"over {len(tracks)} tracks", flush=True)
        if dep.checksum() != before:
            raise RuntimeError(
                f"deployment mutated parameters for method {method}")
    if out_dir:
        report.write_csv(os.path.join(out_dir, "report.csv"))
        report.write_summary(os.path.join(out_dir, "summary.json"))
    return report
