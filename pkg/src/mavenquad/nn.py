"""Dense networks, diagonal-Gaussian policy head, and Adam.

Networks are plain MLPs with ReLU hidden layers. Every layer is
orthogonally initialized; output layers take a configurable gain so policy
means can start near zero.
"""

import numpy as np

from .autodiff import Tensor

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def orthogonal(n_in: int, n_out: int, gain: float, rng) -> np.ndarray:
    """Orthogonal (n_in, n_out) matrix via QR with sign correction."""
    flat = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return np.ascontiguousarray(gain * q)


class Linear:
    def __init__(self, n_in, n_out, gain, rng):
        self.w = Tensor(orthogonal(n_in, n_out, gain, rng),
                        requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w.data + self.b.data


class Mlp:
    """ReLU MLP. widths = (in, hidden..., out); at least one hidden layer."""

    def __init__(self, widths, rng, out_gain: float = 1.0, out_act=None):
        if len(widths) < 3:
            raise ValueError("need at least one hidden layer")
        if out_act not in (None, "tanh"):
            raise ValueError(f"unknown output activation {out_act!r}")
        self.widths = tuple(int(w) for w in widths)
        self.out_act = out_act
        gains = [np.sqrt(2.0)] * (len(widths) - 2) + [out_gain]
        self.layers = [Linear(widths[i], widths[i + 1], gains[i], rng)
                       for i in range(len(widths) - 1)]

    @property
    def params(self):
        out = []
        for lay in self.layers:
            out.extend((lay.w, lay.b))
        return out

    def named_params(self, prefix: str) -> dict:
        out = {}
        for i, lay in enumerate(self.layers):
            out[f"{prefix}.w{i}"] = lay.w
            out[f"{prefix}.b{i}"] = lay.b
        return out

    def forward(self, x: Tensor) -> Tensor:
        for lay in self.layers[:-1]:
            x = lay(x).relu()
        x = self.layers[-1](x)
        return x.tanh() if self.out_act == "tanh" else x

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Graph-free forward pass for rollouts."""
        for lay in self.layers[:-1]:
            x = np.maximum(lay.apply(x), 0.0)
        x = self.layers[-1].apply(x)
        return np.tanh(x) if self.out_act == "tanh" else x

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


class GaussianHead:
    """State-independent diagonal Gaussian over pre-squash action values.

    The distribution mean is tanh(raw network output); log-probabilities are
    plain Gaussian densities of the pre-squash sample. Mapping a sample to an
    executable action (throttle to [0,1], rates clipped) happens downstream.
    """

    def __init__(self, dim: int, init_log_std: float = -1.0):
        self.log_std = Tensor(np.full(dim, init_log_std), requires_grad=True)
        self.dim = dim

    @property
    def params(self):
        return [self.log_std]

    def std(self) -> np.ndarray:
        return np.exp(np.clip(self.log_std.data, LOG_STD_MIN, LOG_STD_MAX))

    def sample(self, mean_raw: np.ndarray, rng,
               deterministic: bool = False) -> np.ndarray:
        mu = np.tanh(mean_raw)
        if deterministic:
            return mu
        return mu + self.std() * rng.standard_normal(mu.shape)

    def log_prob(self, mean_raw: Tensor, sample: np.ndarray) -> Tensor:
        """Row-wise log-density of pre-squash samples; differentiable."""
        log_std = self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)
        inv_std = (-log_std).exp()
        dev = (Tensor(sample) - mean_raw.tanh()) * inv_std
        terms = dev * dev * -0.5 - log_std - _HALF_LOG_2PI
        return terms.sum(axis=-1)

    def log_prob_np(self, mean_raw: np.ndarray, sample: np.ndarray):
        log_std = np.clip(self.log_std.data, LOG_STD_MIN, LOG_STD_MAX)
        dev = (sample - np.tanh(mean_raw)) * np.exp(-log_std)
        return (dev * dev * -0.5 - log_std - _HALF_LOG_2PI).sum(axis=-1)

    def entropy(self) -> Tensor:
        log_std = self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)
        return (log_std + (0.5 + _HALF_LOG_2PI)).sum()


def gaussian_sample_logprob(head: GaussianHead, mean_raw: np.ndarray, rng):
    """Draw one pre-squash sample and its log-probability (no graph)."""
    s = head.sample(mean_raw, rng)
    return s, head.log_prob_np(mean_raw, s)


def sample_to_action(s: np.ndarray) -> np.ndarray:
    """Map pre-squash sample rows to executable normalized actions."""
    a = np.empty_like(s)
    a[..., 0] = np.clip((s[..., 0] + 1.0) * 0.5, 0.0, 1.0)
    a[..., 1:] = np.clip(s[..., 1:], -1.0, 1.0)
    return a


def adam_step(p, g, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update; returns (new_p, new_m, new_v)."""
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return p - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            p.data, self.m[i], self.v[i] = adam_step(
                p.data, g, self.m[i], self.v[i], self.t, self.lr,
                self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def flatten_params(params) -> np.ndarray:
    return np.concatenate([p.data.ravel() for p in params])


def param_checksum(params) -> str:
    """Order-sensitive hex digest of raw parameter bytes."""
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
