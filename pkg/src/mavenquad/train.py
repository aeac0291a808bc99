"""Meta-training loop: concurrent task environments, online context
collection, periodic encoder updates, and latent-conditioned PPO.

Methods:
  maven                     encoder-inferred latent, prediction-trained
  standard_rl               single fixed task, zeroed latent
  rl_dr                     domain randomization per episode, zeroed latent
  critic_encoder_ablation   encoder trained by critic TD error through z
"""

import json
import os
import subprocess
import time

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import save_checkpoint
from .config import SeedTree, config_to_dict
from .encoder import (ContextBuffer, Encoder, adapt_kl_weight,
                      aggregate_posterior, aggregate_posterior_np,
                      encoder_loss, kl_to_prior, sample_latent,
                      specialization_loss)
from .envs import (ACT_DIM, OBS_DIM, BatchEnv, TaskSpec, TerminationStatus,
                   sample_tasks)
from .dynamics import FaultSpec
from .nn import Adam, sample_to_action
from .ppo import PolicyValue, compute_gae, normalize_advantages, ppo_update

METHODS = ("maven", "standard_rl", "rl_dr", "critic_encoder_ablation")
ENCODER_METHODS = ("maven", "critic_encoder_ablation")


def git_revision():
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"],
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def resolve_tasks(method, scenario, cfg, rng):
    """Task list for a method; rl_dr returns None (per-episode sampling)."""
    if method == "rl_dr":
        return None
    if method == "standard_rl":
        return [TaskSpec(0, cfg.tasks.nominal_mass, FaultSpec())]
    return sample_tasks(scenario, cfg.tasks, rng)


class MetaTrainer:
    def __init__(self, cfg, scenario, method, run_dir, seed=None):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
        if seed is not None:
            cfg.train.seed = int(seed)
        self.cfg = cfg
        self.scenario = scenario
        self.method = method
        self.run_dir = run_dir
        self.tree = SeedTree(cfg.train.seed)
        self.d = cfg.encoder.latent_dim

        tasks = resolve_tasks(method, scenario, cfg,
                              self.tree.rng("tasks"))
        n_envs = cfg.train.envs_per_task
        if tasks is None:
            self.tasks = [None]
            self.envs = [BatchEnv(
                n_envs, cfg, task=None, mode="train",
                rngs=[self.tree.rng("env", 0, j) for j in range(n_envs)],
                dr=scenario)]
        else:
            self.tasks = tasks
            self.envs = [BatchEnv(
                n_envs, cfg, task=t, mode="train",
                rngs=[self.tree.rng("env", i, j) for j in range(n_envs)])
                for i, t in enumerate(tasks)]
        self.n_tasks = len(self.envs)
        self.n_envs = n_envs

        self.policy = PolicyValue(OBS_DIM, self.d, ACT_DIM, cfg.ppo,
                                  self.tree.rng("net_policy"),
                                  self.tree.rng("net_critic"))
        self.opt_actor = Adam(self.policy.actor_params, lr=cfg.ppo.lr)
        self.opt_critic = Adam(self.policy.critic.params, lr=cfg.ppo.lr)

        self.encoder = None
        if method in ENCODER_METHODS:
            self.encoder = Encoder(cfg.encoder,
                                   self.tree.rng("net_encoder"),
                                   self.tree.rng("net_fdyn"),
                                   self.tree.rng("net_frew"))
            self.opt_encoder = Adam(self.encoder.params, lr=cfg.encoder.lr)
            self.buffers = [ContextBuffer(cfg.encoder.buffer_capacity, i)
                            for i in range(self.n_tasks)]
            self.ctx_rngs = [self.tree.rng("ctx", i)
                             for i in range(self.n_tasks)]
            self.latent_rngs = [self.tree.rng("latent", i)
                                for i in range(self.n_tasks)]
        self.action_rngs = [self.tree.rng("action", i)
                            for i in range(self.n_tasks)]
        self.shuffle_rng = self.tree.rng("shuffle")

        self.omega_kl = cfg.encoder.kl_weight_init
        self.z = np.zeros((self.n_tasks, n_envs, self.d))
        self.iteration = 0
        self.env_steps = 0
        self.enc_stats = {}
        self.progress = False  # stdout progress lines (never in the log file)

    # -- latent handling -----------------------------------------------------

    def _task_posterior_np(self, ti):
        """Current posterior over task ti's latent from its full buffer."""
        buf = self.buffers[ti]
        if len(buf) == 0:
            return np.zeros(self.d), np.ones(self.d)
        mu, var = self.encoder.encode_factor_np(buf.context_rows())
        return aggregate_posterior_np(mu, var)

    def _refresh_latents(self):
        if self.encoder is None:
            return  # baselines keep z = 0
        for ti in range(self.n_tasks):
            mu, var = self._task_posterior_np(ti)
            rng = self.latent_rngs[ti]
            self.z[ti] = mu + np.sqrt(var) * rng.standard_normal(
                (self.n_envs, self.d))

    # -- encoder updates -----------------------------------------------------

    def _encoder_update(self):
        enc_cfg = self.cfg.encoder
        live = [ti for ti in range(self.n_tasks) if len(self.buffers[ti]) > 0]
        if not live:
            return
        batches, xis = [], []
        for ti in live:
            batches.append(self.buffers[ti].sample(enc_cfg.context_batch,
                                                   self.ctx_rngs[ti]))
            xis.append(self.latent_rngs[ti].standard_normal(self.d))
        if self.method == "maven":
            total, comps = encoder_loss(self.encoder, batches, xis, enc_cfg,
                                        self.omega_kl, self.cfg.env.k_p)
        else:
            total, comps = self._critic_encoder_loss(batches, xis, enc_cfg)
        self.opt_encoder.zero_grad()
        total.backward()
        self.opt_encoder.step()
        self.omega_kl = adapt_kl_weight(self.omega_kl, comps["kl"], enc_cfg)
        self.enc_stats = {k: v for k, v in comps.items()
                          if k != "per_task_kl"}
        self.enc_stats["omega_kl"] = self.omega_kl

    def _critic_encoder_loss(self, batches, xis, enc_cfg):
        """Ablation objective: KL + critic TD error backpropagated into z.

        The critic is treated as a fixed function here (its own training
        stays inside the PPO update); only the encoder receives gradients.
        """
        gamma = self.cfg.ppo.gamma
        kl_sum = td_sum = None
        mus = []
        for (o, a, r, o_next), xi in zip(batches, xis):
            ctx = np.concatenate([o, a, r[:, None], o_next], axis=1)
            mu_f, var_f = self.encoder.encode_factor(ctx)
            mu_p, var_p = aggregate_posterior(mu_f, var_f)
            kl = kl_to_prior(mu_p, var_p)
            z = sample_latent(mu_p, var_p, xi)
            z_rows = Tensor(np.ones((len(o), 1))) * z.reshape(1, self.d)
            v = self.policy.critic.forward(
                _concat_oz(o, z_rows))[:, 0]
            target = r + gamma * self.policy.value_np(
                o_next, np.tile(mu_p.data, (len(o), 1)))
            err = v - Tensor(target)
            td = (err * err).mean()
            kl_sum = kl if kl_sum is None else kl_sum + kl
            td_sum = td if td_sum is None else td_sum + td
            mus.append(mu_p.reshape(1, self.d))

        scale = 1.0 / len(batches)
        kl_mean, td_mean = kl_sum * scale, td_sum * scale
        spec = specialization_loss(ad.concat(mus, axis=0), enc_cfg.eps,
                                   enc_cfg.spec_min, enc_cfg.spec_max)
        total = (kl_mean * self.omega_kl + td_mean
                 + spec * enc_cfg.w_spec)
        comps = {"kl": float(kl_mean.data), "pos": 0.0,
                 "rew": float(td_mean.data), "spec": float(spec.data)}
        return total, comps

    # -- rollout and update ----------------------------------------------------

    def _rollout(self):
        cfg = self.cfg
        T, n, nt = cfg.train.rollout_steps, self.n_envs, self.n_tasks
        K = cfg.ppo.latent_refresh
        shape = (T, nt, n)
        ro = {"o": np.zeros(shape + (OBS_DIM,)),
              "z": np.zeros(shape + (self.d,)),
              "s": np.zeros(shape + (ACT_DIM,)),
              "logp": np.zeros(shape), "r": np.zeros(shape),
              "v": np.zeros(shape), "v_next": np.zeros(shape),
              "terminal": np.zeros(shape, dtype=bool),
              "ended": np.zeros(shape, dtype=bool)}
        reward_total = 0.0

        for t in range(T):
            if t % K == 0:
                self._refresh_latents()
            for ti in range(nt):
                env = self.envs[ti]
                obs = env.obs.copy()
                z = self.z[ti]
                s, logp, v = self.policy.act(obs, z, self.action_rngs[ti])
                a = sample_to_action(s)
                out = env.step(a)
                status = out.status
                ro["o"][t, ti] = obs
                ro["z"][t, ti] = z
                ro["s"][t, ti] = s
                ro["logp"][t, ti] = logp
                ro["r"][t, ti] = out.reward
                ro["v"][t, ti] = v
                ro["v_next"][t, ti] = self.policy.value_np(out.final_obs, z)
                ro["terminal"][t, ti] = (
                    (status == int(TerminationStatus.COLLISION))
                    | (status == int(TerminationStatus.SUCCESS)))
                ro["ended"][t, ti] = status != 0
                reward_total += float(out.reward.sum())
                if self.encoder is not None:
                    frac = cfg.encoder.push_per_step / n
                    self.buffers[ti].push_subset(
                        obs, a, out.reward, out.final_obs, frac,
                        self.ctx_rngs[ti])
            self.env_steps += nt * n
            if self.encoder is not None \
                    and (t + 1) % cfg.encoder.update_every == 0:
                self._encoder_update()
        return ro, reward_total / (T * nt * n)

    def _ppo_update(self, ro):
        cfg = self.cfg
        adv = np.empty_like(ro["r"])
        ret = np.empty_like(ro["r"])
        for ti in range(self.n_tasks):
            a, r_ = compute_gae(ro["r"][:, ti], ro["v"][:, ti],
                                ro["v_next"][:, ti], ro["terminal"][:, ti],
                                ro["ended"][:, ti], cfg.ppo.gamma,
                                cfg.ppo.gae_lambda)
            adv[:, ti] = normalize_advantages(a)
            ret[:, ti] = r_
        batch = {"o": ro["o"].reshape(-1, OBS_DIM),
                 "z": ro["z"].reshape(-1, self.d),
                 "sample": ro["s"].reshape(-1, ACT_DIM),
                 "logp": ro["logp"].ravel(),
                 "adv": adv.ravel(), "ret": ret.ravel()}
        return ppo_update(batch, self.policy, self.opt_actor,
                          self.opt_critic, cfg.ppo, self.shuffle_rng)

    # -- artifacts -------------------------------------------------------------

    def named_tensors(self):
        out = self.policy.named_tensors()
        if self.encoder is not None:
            out.update(self.encoder.named_tensors())
        return out

    def save(self, path):
        extra = {"iteration": self.iteration, "env_steps": self.env_steps,
                 "scenario": self.scenario, "omega_kl": self.omega_kl,
                 "f_dyn_seed_stream": f"net_fdyn@{self.cfg.train.seed}",
                 "task_descriptions": [
                     t.describe() if t is not None else {"dr": self.scenario}
                     for t in self.tasks]}
        save_checkpoint(path, self.named_tensors(),
                        config_to_dict(self.cfg), self.cfg.train.seed,
                        self.method, extra=extra)

    def write_manifest(self):
        os.makedirs(self.run_dir, exist_ok=True)
        manifest = {"method": self.method, "scenario": self.scenario,
                    "seed": self.cfg.train.seed,
                    "git_revision": git_revision(),
                    "config": config_to_dict(self.cfg)}
        with open(os.path.join(self.run_dir, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)

    # -- main loop ---------------------------------------------------------------

    def train(self, max_steps=None, log_file=None):
        cfg = self.cfg
        self.write_manifest()
        ckpt_path = os.path.join(self.run_dir, "checkpoint.bin")
        log_path = log_file or os.path.join(self.run_dir, "train_log.jsonl")
        t0 = time.time()
        with open(log_path, "a") as log:
            try:
                while self.iteration < cfg.train.iterations:
                    if max_steps is not None and self.env_steps >= max_steps:
                        break
                    ro, mean_reward = self._rollout()
                    stats = self._ppo_update(ro)
                    self.iteration += 1
                    if self.iteration % cfg.train.log_every == 0:
                        self._log_line(log, mean_reward, stats)
                        if self.progress:
                            el = time.time() - t0
                            print(f"iter {self.iteration} "
                                  f"steps {self.env_steps} "
                                  f"reward {mean_reward:.4f} [{el:.1f}s]",
                                  flush=True)
                    if self.iteration % cfg.train.checkpoint_every == 0:
                        self.save(ckpt_path)
            except KeyboardInterrupt:
                self.save(ckpt_path)
                raise
        self.save(ckpt_path)
        return ckpt_path

    def _log_line(self, log, mean_reward, stats):
        ends = passes = collisions = 0
        for env in self.envs:
            e, p, c = env.pop_counters()
            ends += e
            passes += p
            collisions += c
        steps_iter = (self.cfg.train.rollout_steps * self.n_tasks
                      * self.n_envs * self.cfg.train.log_every)
        rec = {"iteration": self.iteration, "env_steps": self.env_steps,
               "mean_reward": round(mean_reward, 6),
               "pass_rate": round(passes / max(steps_iter, 1), 6),
               "collision_rate": round(collisions / max(ends, 1), 6)
               if ends else 0.0,
               "episodes": ends,
               "actor_loss": round(stats["actor_loss"], 6),
               "value_loss": round(stats["value_loss"], 6),
               "entropy": round(stats["entropy"], 6),
               "clip_fraction": round(stats["clip_fraction"], 6),
               "approx_kl": round(stats["approx_kl"], 6)}
        for k, v in self.enc_stats.items():
            rec[f"enc_{k}"] = round(v, 6)
        log.write(json.dumps(rec, sort_keys=True) + "\n")
        log.flush()


def _concat_oz(o, z_rows):
    return ad.concat([Tensor(o), z_rows], axis=1)
