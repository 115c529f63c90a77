"""Desk-scale class-conditional diffusion.

Linear beta schedule, closed-form forward noising, a two-hidden-layer MLP
noise predictor with hand-written gradients, epsilon-MSE training with Adam,
and the deterministic (eta = 0) DDIM update.

Timesteps are 1-based: ``t`` ranges over ``1..T`` and ``t = 0`` denotes clean
data, with ``alpha_bar(0) = 1``.
"""

import enum
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from decu.gaussian_metrics import DiagonalGaussian

TIME_DIM = 8
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


class TrainingDivergence(FloatingPointError):
    """Raised when a training loss stops being finite."""


# --------------------------------------------------------------------------
# noise schedule
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.array(self.betas, dtype=np.float64).reshape(-1)
        if betas.size < 1:
            raise ValueError("schedule needs at least one step")
        if not (np.all(betas > 0.0) and np.all(betas < 1.0)):
            raise ValueError("betas must lie in (0, 1)")
        if np.any(np.diff(betas) <= 0.0):
            raise ValueError("betas must be strictly increasing")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        for arr in (betas, alphas, alpha_bars):
            arr.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def T(self):
        return self.betas.size

    def alpha_bar(self, t):
        """``alpha_bar`` at integer step(s) ``t`` in ``0..T``."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise IndexError(f"step out of range 0..{self.T}")
        padded = np.concatenate(([1.0], self.alpha_bars))
        out = padded[t]
        return float(out) if out.ndim == 0 else out


def make_schedule(T, beta_start=1e-4, beta_end=2e-2):
    if int(T) != T or T < 2:
        raise ValueError("T must be an integer >= 2")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError("need 0 < beta_start < beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, int(T)))


def ddim_timesteps(T, n_steps):
    """Uniform-stride DDIM grid ``[stride, 2*stride, ..., T]``."""
    if n_steps < 1 or T % n_steps != 0:
        raise ValueError(f"ddim_steps={n_steps} must divide T={T}")
    stride = T // n_steps
    return np.arange(stride, T + 1, stride, dtype=np.int64)


def forward_sample(y0, t, noise, sched):
    """``sqrt(abar_t) y0 + sqrt(1 - abar_t) noise`` for t in ``1..T``.

    ``t`` may be a scalar or one step per row of a batched ``y0``.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if y0.shape != noise.shape:
        raise ValueError("y0 and noise must have the same shape")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise IndexError(f"forward step must be in 1..{sched.T}")
    ab = np.asarray(sched.alpha_bar(t), dtype=np.float64)
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (y0.ndim - ab.ndim))
    return np.sqrt(ab) * y0 + np.sqrt(1.0 - ab) * noise


# --------------------------------------------------------------------------
# denoiser
# --------------------------------------------------------------------------

def time_embedding(t, T):
    """Sinusoidal features of ``t / T`` at frequencies pi * 2^k, k = 0..3."""
    s = np.asarray(t, dtype=np.float64).reshape(-1, 1) / T
    freqs = math.pi * 2.0 ** np.arange(TIME_DIM // 2)
    ang = s * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _silu(x):
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return x * sig, sig


class DenoiserBackbone:
    """MLP ``[z_t, time features, class embedding] -> eps_hat``.

    Parameters are stored in ``params`` under ``PARAM_NAMES``; their shapes are
    fixed by ``(d, hidden, embed_dim)``.
    """

    def __init__(self, d, hidden, embed_dim, params=None):
        self.d = int(d)
        self.hidden = int(hidden)
        self.embed_dim = int(embed_dim)
        shapes = self.param_shapes()
        if params is None:
            params = {k: np.zeros(s) for k, s in shapes.items()}
        self.params = {}
        for k in PARAM_NAMES:
            arr = np.array(params[k], dtype=np.float64)
            if arr.shape != shapes[k]:
                raise ValueError(f"{k} has shape {arr.shape}, expected {shapes[k]}")
            self.params[k] = arr

    @property
    def n_in(self):
        return self.d + TIME_DIM + self.embed_dim

    def param_shapes(self):
        h = self.hidden
        return {
            "W1": (self.n_in, h), "b1": (h,),
            "W2": (h, h), "b2": (h,),
            "W3": (h, self.d), "b3": (self.d,),
        }

    @classmethod
    def initialize(cls, d, hidden, embed_dim, stream):
        net = cls(d, hidden, embed_dim)
        for name in ("W1", "W2", "W3"):
            shape = net.params[name].shape
            net.params[name] = stream.normal(shape) / math.sqrt(shape[0])
        return net

    def copy(self):
        return DenoiserBackbone(self.d, self.hidden, self.embed_dim,
                                {k: v.copy() for k, v in self.params.items()})

    def n_params(self):
        return sum(v.size for v in self.params.values())

    def digest(self):
        h = hashlib.sha256()
        for k in PARAM_NAMES:
            h.update(np.ascontiguousarray(self.params[k], dtype="<f8").tobytes())
        return h.hexdigest()

    def freeze(self):
        for v in self.params.values():
            v.setflags(write=False)
        return self

    @property
    def frozen(self):
        return not self.params["W1"].flags.writeable

    def network(self, z, t, emb, T, keep=False):
        """Raw MLP output ``F`` before it is mixed with ``z``."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        n = z.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,))
        emb = np.atleast_2d(np.asarray(emb, dtype=np.float64))
        if z.shape[1] != self.d or emb.shape != (n, self.embed_dim):
            raise ValueError("input dimensions do not match the backbone")
        p = self.params
        u = np.concatenate([z, time_embedding(t, T), emb], axis=1)
        a1 = u @ p["W1"] + p["b1"]
        h1, s1 = _silu(a1)
        a2 = h1 @ p["W2"] + p["b2"]
        h2, s2 = _silu(a2)
        out = h2 @ p["W3"] + p["b3"]
        if keep:
            return out, (u, a1, s1, h1, a2, s2, h2)
        return out

    def forward(self, z, t, emb, sched, keep=False):
        """Batched noise prediction ``eps_hat`` for ``z`` (B, d) at step(s) ``t``.

        The MLP output ``F`` is mixed with the input,
        ``eps_hat = sqrt(1 - abar_t) z + sqrt(abar_t) F``, which makes the
        implied clean estimate ``sqrt(abar_t) z - sqrt(1 - abar_t) F``: a small
        residual correction near t = 0 and a direct prediction near t = T.
        """
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t), (z.shape[0],))
        ab = sched.alpha_bar(t).reshape(-1, 1)
        a = np.sqrt(ab)
        res = self.network(z, t, emb, sched.T, keep)
        f, cache = res if keep else (res, None)
        eps = np.sqrt(1.0 - ab) * z + a * f
        if keep:
            return eps, (cache, a)
        return eps

    def backward(self, cache, grad_out, weights=True):
        """Gradients of a scalar loss given ``grad_out = dL/d eps_hat``.

        Returns ``(param_grads, grad_emb)``; ``param_grads`` is None when
        ``weights`` is False (frozen backbone: only the input path is needed).
        """
        cache, d_out = cache
        grad_out = grad_out * d_out
        u, a1, s1, h1, a2, s2, h2 = cache
        p = self.params
        g_h2 = grad_out @ p["W3"].T
        g_a2 = g_h2 * (s2 * (1.0 + a2 * (1.0 - s2)))
        g_h1 = g_a2 @ p["W2"].T
        g_a1 = g_h1 * (s1 * (1.0 + a1 * (1.0 - s1)))
        g_u = g_a1 @ p["W1"].T
        grad_emb = g_u[:, self.d + TIME_DIM:]
        if not weights:
            return None, grad_emb
        grads = {
            "W3": h2.T @ grad_out, "b3": grad_out.sum(axis=0),
            "W2": h1.T @ g_a2, "b2": g_a2.sum(axis=0),
            "W1": u.T @ g_a1, "b1": g_a1.sum(axis=0),
        }
        return grads, grad_emb


class ClassEmbeddingTable:
    """One trainable embedding row per class id in ``[0, C)``."""

    def __init__(self, weights):
        w = np.array(weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 1:
            raise ValueError("embedding table must be (C, e) with C >= 1")
        self.weights = w

    @classmethod
    def initialize(cls, n_classes, embed_dim, stream, scale=1.0):
        return cls(scale * stream.normal((n_classes, embed_dim)))

    @property
    def n_classes(self):
        return self.weights.shape[0]

    @property
    def embed_dim(self):
        return self.weights.shape[1]

    def copy(self):
        return ClassEmbeddingTable(self.weights.copy())

    def lookup(self, class_ids):
        ids = np.asarray(class_ids, dtype=np.int64)
        if np.any(ids < 0) or np.any(ids >= self.n_classes):
            raise KeyError(f"class id out of range 0..{self.n_classes - 1}")
        return self.weights[ids]


def denoiser_forward(backbone, table, z_t, t, class_id, sched):
    """Single-sample noise prediction for class ``class_id``."""
    z = np.asarray(z_t, dtype=np.float64)
    emb = table.lookup([class_id])
    return backbone.forward(z.reshape(1, -1), [t], emb, sched)[0]


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

class Trainable(enum.Enum):
    BACKBONE_AND_TABLE = "backbone_and_table"
    TABLE_ONLY = "table_only"


class AdamState:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.moments = {}

    def update(self, named_params, named_grads):
        self.step += 1
        c1 = 1.0 - self.beta1 ** self.step
        c2 = 1.0 - self.beta2 ** self.step
        for name, g in named_grads.items():
            if name not in self.moments:
                self.moments[name] = (np.zeros_like(g), np.zeros_like(g))
            m, v = self.moments[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            param = named_params[name]
            param -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def mse_loss(eps, eps_hat):
    """Mean over batch and dimensions of the squared prediction error."""
    diff = np.asarray(eps_hat) - np.asarray(eps)
    return float(np.mean(diff * diff))


def loss_and_grads(backbone, table, x0, labels, t, eps, sched, weights=True):
    """Epsilon-MSE at fixed steps ``t`` and noise ``eps``, with its gradients.

    Returns ``(loss, backbone_grads, table_grad)``; ``backbone_grads`` is None
    when ``weights`` is False.
    """
    z = forward_sample(x0, t, eps, sched)
    emb = table.lookup(labels)
    eps_hat, cache = backbone.forward(z, t, emb, sched, keep=True)
    diff = eps_hat - eps
    loss = float(np.mean(diff * diff))
    grads, grad_emb = backbone.backward(cache, (2.0 / diff.size) * diff, weights=weights)
    g_table = np.zeros_like(table.weights)
    np.add.at(g_table, labels, grad_emb)
    return loss, grads, g_table


def training_step(backbone, table, batch, sched, opt, trainable, stream):
    """One epsilon-MSE Adam step on ``batch = (images (B, d), class_ids (B,))``.

    Timesteps and noise are drawn from ``stream``. With ``TABLE_ONLY`` the
    backbone weights receive no gradient and are never written.
    """
    x0, labels = batch
    x0 = np.asarray(x0, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = x0.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    full = Trainable(trainable) is Trainable.BACKBONE_AND_TABLE
    if full and backbone.frozen:
        raise ValueError("backbone is frozen")
    t = 1 + stream.integers(sched.T, n)
    eps = stream.normal(x0.shape)
    loss, grads, g_table = loss_and_grads(backbone, table, x0, labels, t, eps, sched, full)
    if not math.isfinite(loss):
        raise TrainingDivergence(f"non-finite loss {loss} at optimizer step {opt.step + 1}")
    params = {"table": table.weights}
    named = {"table": g_table}
    if full:
        params.update(backbone.params)
        named.update(grads)
    opt.update(params, named)
    return loss


def train(backbone, table, images, labels, sched, steps, batch_size, opt, trainable, stream):
    """Run ``steps`` training steps on minibatches drawn with replacement."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] == 0:
        raise ValueError("empty dataset")
    losses = np.empty(steps)
    for s in range(steps):
        idx = stream.integers(images.shape[0], batch_size)
        losses[s] = training_step(backbone, table, (images[idx], labels[idx]),
                                  sched, opt, trainable, stream)
    return losses


# --------------------------------------------------------------------------
# DDIM
# --------------------------------------------------------------------------

def ddim_update(z_t, eps_hat, t, t_prev, sched):
    """Deterministic DDIM move ``z_t -> z_{t_prev}`` for arrays of any leading shape."""
    if not 0 <= t_prev < t <= sched.T:
        raise ValueError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)
    x0_hat = (z_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_hat


def ddim_step(z_t, eps_hat, t, t_prev, sched):
    """One DDIM step; returns (zero-variance Gaussian at z_prev, z_prev)."""
    z_prev = ddim_update(np.asarray(z_t, dtype=np.float64),
                         np.asarray(eps_hat, dtype=np.float64), t, t_prev, sched)
    return DiagonalGaussian.point(z_prev), z_prev
