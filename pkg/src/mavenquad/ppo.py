"""Latent-conditioned PPO: actor/critic on concat(o, z), GAE, clipped updates.

The latent rows entering the update are plain data; encoder training happens
elsewhere. Baselines run the same networks with a zeroed latent channel so
every method shares one architecture.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Adam, GaussianHead, Mlp


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; carries a diagnostic dump."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


class PolicyValue:
    """Actor and state-value critic over the observation+latent vector."""

    def __init__(self, obs_dim, latent_dim, act_dim, ppo_cfg, rng_actor,
                 rng_critic):
        in_dim = obs_dim + latent_dim
        hid = tuple(ppo_cfg.hidden)
        self.obs_dim = obs_dim
        self.latent_dim = latent_dim
        self.act_dim = act_dim
        self.actor = Mlp((in_dim, *hid, act_dim), rng_actor, out_gain=0.01)
        self.critic = Mlp((in_dim, *hid, 1), rng_critic)
        self.head = GaussianHead(act_dim, ppo_cfg.log_std_init)

    @property
    def actor_params(self):
        return self.actor.params + self.head.params

    @property
    def params(self):
        return self.actor_params + self.critic.params

    def named_params(self, prefix: str = "policy") -> dict:
        out = self.actor.named_params(f"{prefix}.actor")
        out.update(self.critic.named_params(f"{prefix}.critic"))
        out[f"{prefix}.log_std"] = self.head.log_std
        return out

    def named_tensors(self, prefix: str = "policy"):
        return {k: v.data for k, v in self.named_params(prefix).items()}

    def act(self, o, z, rng, deterministic: bool = False):
        """Rollout-time forward pass (no graph).

        Returns pre-squash samples, their log-probs, and state values.
        """
        x = np.concatenate([o, z], axis=1)
        raw = self.actor.apply(x)
        s = self.head.sample(raw, rng, deterministic=deterministic)
        logp = self.head.log_prob_np(raw, s)
        value = self.critic.apply(x)[:, 0]
        return s, logp, value

    def value_np(self, o, z):
        return self.critic.apply(np.concatenate([o, z], axis=1))[:, 0]


def compute_gae(rewards, values, next_values, terminal, ended, gamma, lam):
    """GAE over (T, n) arrays with row auto-resets.

    next_values must hold V of the observation actually reached at each step
    (the pre-reset one on rows that ended); `terminal` marks true endings
    whose bootstrap is zeroed, `ended` additionally includes truncations and
    stops the recursion from crossing episode boundaries.
    """
    rewards = np.asarray(rewards)
    not_term = ~np.asarray(terminal, dtype=bool)
    not_end = ~np.asarray(ended, dtype=bool)
    delta = rewards + gamma * next_values * not_term - values
    adv = np.zeros_like(rewards)
    carry = np.zeros(rewards.shape[1])
    for t in range(rewards.shape[0] - 1, -1, -1):
        carry = delta[t] + gamma * lam * not_end[t] * carry
        adv[t] = carry
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def clipped_surrogate(logp_new: Tensor, logp_old, adv, clip_eps) -> Tensor:
    """Mean clipped policy objective (to be maximized)."""
    ratio = (logp_new - Tensor(logp_old)).exp()
    adv_t = Tensor(adv)
    return ad.minimum(ratio * adv_t,
                      ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv_t
                      ).mean()


def ppo_update(batch, policy: PolicyValue, opt_actor: Adam, opt_critic: Adam,
               ppo_cfg, rng):
    """Epochs of minibatched clipped-surrogate and value-MSE updates.

    batch: dict with rows o, z, sample (pre-squash), logp, adv, ret.
    Returns averaged update statistics.
    """
    x = np.concatenate([batch["o"], batch["z"]], axis=1)
    sample = batch["sample"]
    logp_old = batch["logp"]
    adv = batch["adv"]
    ret = batch["ret"]
    n = len(adv)
    eps = ppo_cfg.clip_eps

    stats = {"actor_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
             "clip_fraction": 0.0, "approx_kl": 0.0}
    n_batches = 0
    for _ in range(ppo_cfg.epochs):
        order = rng.permutation(n)
        for idx in np.array_split(order, ppo_cfg.n_minibatches):
            if len(idx) == 0:
                continue
            xb = x[idx]
            raw = policy.actor.forward(Tensor(xb))
            logp = policy.head.log_prob(raw, sample[idx])
            surr = clipped_surrogate(logp, logp_old[idx], adv[idx], eps)
            entropy = policy.head.entropy()
            actor_loss = -surr - entropy * ppo_cfg.entropy_coef

            value = policy.critic.forward(Tensor(xb))[:, 0]
            verr = value - Tensor(ret[idx])
            value_loss = (verr * verr).mean()

            if not (np.isfinite(actor_loss.data)
                    and np.isfinite(value_loss.data)):
                raise TrainingDiverged(
                    "non-finite PPO loss",
                    dump={"actor_loss": float(actor_loss.data),
                          "value_loss": float(value_loss.data),
                          "logp_old": logp_old[idx], "adv": adv[idx],
                          "ret": ret[idx]})

            opt_actor.zero_grad()
            actor_loss.backward()
            opt_actor.step()
            opt_critic.zero_grad()
            value_loss.backward()
            opt_critic.step()

            ratio = np.exp(logp.data - logp_old[idx])
            stats["actor_loss"] += float(actor_loss.data)
            stats["value_loss"] += float(value_loss.data)
            stats["entropy"] += float(entropy.data)
            stats["clip_fraction"] += float(
                np.mean((ratio < 1.0 - eps) | (ratio > 1.0 + eps)))
            stats["approx_kl"] += float(np.mean(logp_old[idx] - logp.data))
            n_batches += 1

    for k in stats:
        stats[k] /= max(n_batches, 1)
    return stats
