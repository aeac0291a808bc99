"""Predictive task encoder.

Per-task context buffers feed a factorized Gaussian posterior over a
D-dimensional latent task variable: one Gaussian factor per transition,
combined by precision weighting. The encoder trains on prediction losses
(state-difference and reward heads) plus a KL bottleneck and a cross-task
diversity term; the dynamics head is frozen at init and acts as a fixed
random projection.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .envs import ACT_DIM, OBS_DIM, OBS_DP1
from .nn import Mlp

CTX_DIM = OBS_DIM + ACT_DIM + 1 + OBS_DIM   # (o, a, r, o_next) row


@dataclass
class Transition:
    o: np.ndarray
    a: np.ndarray
    r: float
    o_next: np.ndarray


class ContextBuffer:
    """Fixed-capacity FIFO ring of transitions, stored as flat arrays."""

    def __init__(self, capacity: int = 256, task_id: int = 0):
        self.capacity = int(capacity)
        self.task_id = task_id
        self.o = np.zeros((capacity, OBS_DIM))
        self.a = np.zeros((capacity, ACT_DIM))
        self.r = np.zeros(capacity)
        self.o_next = np.zeros((capacity, OBS_DIM))
        self.size = 0
        self.head = 0

    def __len__(self):
        return self.size

    def push(self, o, a, r, o_next):
        i = self.head
        self.o[i], self.a[i], self.r[i], self.o_next[i] = o, a, r, o_next
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def push_rows(self, o, a, r, o_next):
        for j in range(len(r)):
            self.push(o[j], a[j], r[j], o_next[j])

    def push_subset(self, o, a, r, o_next, fraction: float, rng):
        """Append a uniformly chosen fraction of the given rows."""
        n = len(r)
        k = int(round(fraction * n))
        if k <= 0:
            return
        idx = rng.choice(n, size=min(k, n), replace=False)
        self.push_rows(o[idx], a[idx], r[idx], o_next[idx])

    def sample(self, n: int, rng):
        """n transitions drawn with replacement; buffer must be non-empty."""
        if self.size == 0:
            raise ValueError("cannot sample from an empty context buffer")
        idx = rng.integers(self.size, size=n)
        return self.o[idx], self.a[idx], self.r[idx], self.o_next[idx]

    def context_rows(self, idx=None) -> np.ndarray:
        """(n, CTX_DIM) factor inputs for the selected (default all) rows."""
        if idx is None:
            idx = np.arange(self.size)
        return np.concatenate([self.o[idx], self.a[idx],
                               self.r[idx, None], self.o_next[idx]], axis=1)


class Encoder:
    """Factor network plus frozen dynamics head and trainable reward head."""

    def __init__(self, enc_cfg, rng_phi, rng_fdyn, rng_frew):
        d = enc_cfg.latent_dim
        hid = tuple(enc_cfg.hidden)
        self.d = d
        self.eps = enc_cfg.eps
        self.phi = Mlp((CTX_DIM, *hid, 2 * d), rng_phi)
        self.f_dyn = Mlp((OBS_DIM + ACT_DIM + d, *hid, OBS_DIM), rng_fdyn)
        for p in self.f_dyn.params:
            p.requires_grad = False    # fixed random projection, never trained
        self.f_rew = Mlp((OBS_DIM + d, *hid, 1), rng_frew)

    @property
    def params(self):
        return self.phi.params + self.f_rew.params

    def named_params(self, prefix: str = "encoder") -> dict:
        out = self.phi.named_params(f"{prefix}.phi")
        out.update(self.f_dyn.named_params(f"{prefix}.f_dyn"))
        out.update(self.f_rew.named_params(f"{prefix}.f_rew"))
        return out

    def named_tensors(self, prefix: str = "encoder"):
        return {k: v.data for k, v in self.named_params(prefix).items()}

    # -- posterior construction (differentiable path) ------------------------

    def encode_factor(self, ctx: np.ndarray):
        """Rows of (o,a,r,o_next) -> per-row factor (mu, var), var > 0."""
        out = self.phi.forward(Tensor(ctx))
        mu = out[:, :self.d]
        var = out[:, self.d:].softplus() + self.eps
        return mu, var

    def encode_factor_np(self, ctx: np.ndarray):
        out = self.phi.apply(ctx)
        mu = out[:, :self.d]
        var = np.logaddexp(0.0, out[:, self.d:]) + self.eps
        return mu, var

    def predict_dynamics(self, o, a, z: Tensor) -> Tensor:
        """Predicted observation difference; gradients flow only through z."""
        z_rows = Tensor(np.ones((len(o), 1))) * z.reshape(1, self.d)
        inp = ad.concat([Tensor(o), Tensor(a), z_rows], axis=1)
        return self.f_dyn.forward(inp)

    def predict_reward(self, o, z: Tensor) -> Tensor:
        z_rows = Tensor(np.ones((len(o), 1))) * z.reshape(1, self.d)
        return self.f_rew.forward(ad.concat([Tensor(o), z_rows], axis=1))[:, 0]


def aggregate_posterior(mu, var):
    """Product of Gaussian factors along axis 0, precision-weighted."""
    inv = 1.0 / var
    var_post = 1.0 / inv.sum(axis=0)
    mu_post = var_post * (mu * inv).sum(axis=0)
    return mu_post, var_post


def aggregate_posterior_np(mu: np.ndarray, var: np.ndarray):
    inv = 1.0 / var
    var_post = 1.0 / inv.sum(axis=0)
    return var_post * (mu * inv).sum(axis=0), var_post


def sample_latent(mu, var, xi: np.ndarray):
    """Reparameterized draw mu + sqrt(var) * xi (xi pre-drawn from N(0,I))."""
    return mu + var.sqrt() * Tensor(xi)


def sample_latent_np(mu, var, rng, deterministic: bool = False):
    if deterministic:
        return mu.copy()
    return mu + np.sqrt(var) * rng.standard_normal(mu.shape)


def kl_to_prior(mu, var):
    """KL(N(mu, diag var) || N(0, I)), closed form."""
    return (var + mu * mu - 1.0 - var.log()).sum() * 0.5


def kl_to_prior_np(mu: np.ndarray, var: np.ndarray) -> float:
    return float(0.5 * np.sum(var + mu * mu - 1.0 - np.log(var)))


def position_loss(delta_hat: Tensor, o: np.ndarray, o_next: np.ndarray,
                  k_p) -> Tensor:
    """MSE on the position-bearing observation channels, un-normalized.

    The observation carries position only through the next-waypoint offset;
    both prediction and target are rescaled by k_p back to meters.
    """
    k_p = np.asarray(k_p)
    target = (o_next[:, OBS_DP1] - o[:, OBS_DP1]) * k_p
    err = delta_hat[:, OBS_DP1] * Tensor(k_p) - Tensor(target)
    return (err * err).mean()


def huber(err: Tensor, delta: float) -> Tensor:
    """Elementwise Huber: quadratic inside delta, linear outside."""
    a = err.abs()
    return ad.where(a.data <= delta, err * err * 0.5,
                    (a - 0.5 * delta) * delta)


def reward_loss(pred: Tensor, r: np.ndarray, delta: float) -> Tensor:
    return huber(pred - Tensor(r), delta).mean()


def specialization_loss(task_mus: Tensor, eps: float, lo: float,
                        hi: float) -> Tensor:
    """Negative log of cross-task latent-mean variance, clamped.

    Variance is per dimension across tasks (population convention),
    averaged over dimensions before the log.
    """
    m = task_mus.mean(axis=0, keepdims=True)
    dev = task_mus - m
    v = (dev * dev).mean(axis=0).mean()
    return ((v + eps).log() * -1.0).clamp(lo, hi)


def encoder_loss(enc: Encoder, batches, xis, enc_cfg, omega_kl: float,
                 k_p) -> "tuple[Tensor, dict]":
    """Total encoder objective over per-task context batches.

    batches: list of (o, a, r, o_next) row arrays, one entry per task with a
    non-empty buffer. xis: matching list of (D,) standard-normal draws for
    the reparameterized per-task latent.
    """
    if not batches:
        raise ValueError("no context batches; all buffers empty")
    n_tasks = len(batches)
    kl_sum = pos_sum = rew_sum = None
    mus = []
    per_task_kl = []
    for (o, a, r, o_next), xi in zip(batches, xis):
        ctx = np.concatenate([o, a, r[:, None], o_next], axis=1)
        mu_f, var_f = enc.encode_factor(ctx)
        mu_p, var_p = aggregate_posterior(mu_f, var_f)
        kl = kl_to_prior(mu_p, var_p)
        z = sample_latent(mu_p, var_p, xi)
        pos = position_loss(enc.predict_dynamics(o, a, z), o, o_next, k_p)
        rew = reward_loss(enc.predict_reward(o, z), r, enc_cfg.huber_delta)
        kl_sum = kl if kl_sum is None else kl_sum + kl
        pos_sum = pos if pos_sum is None else pos_sum + pos
        rew_sum = rew if rew_sum is None else rew_sum + rew
        mus.append(mu_p.reshape(1, enc.d))
        per_task_kl.append(float(kl.data))

    scale = 1.0 / n_tasks
    kl_mean = kl_sum * scale
    pos_mean = pos_sum * scale
    rew_mean = rew_sum * scale
    spec = specialization_loss(ad.concat(mus, axis=0), enc_cfg.eps,
                               enc_cfg.spec_min, enc_cfg.spec_max)
    total = (kl_mean * omega_kl + pos_mean * enc_cfg.w_pos
             + rew_mean * enc_cfg.w_rew + spec * enc_cfg.w_spec)
    components = {"kl": float(kl_mean.data), "pos": float(pos_mean.data),
                  "rew": float(rew_mean.data), "spec": float(spec.data),
                  "per_task_kl": per_task_kl}
    return total, components


def adapt_kl_weight(omega: float, batch_kl: float, enc_cfg) -> float:
    """Multiplicative controller driving batch KL toward its target."""
    target = enc_cfg.kl_target_scale * enc_cfg.latent_dim
    if batch_kl > target:
        omega = omega * (1.0 + enc_cfg.alpha_scale)
    elif batch_kl < target:
        omega = omega * (1.0 - enc_cfg.beta_scale)
    return float(np.clip(omega, enc_cfg.kl_weight_min, enc_cfg.kl_weight_max))
