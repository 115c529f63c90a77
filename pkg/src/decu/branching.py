"""Branched generation and the uncertainty estimates built on it.

Generation for a class and a noise seed: draw ``z_T`` and a prefix component,
run the prefix component's DDIM chain down to the branch point ``b``, then
continue one chain per component from the shared ``z_b`` to step 0 and decode.
Epistemic uncertainty is the W2 pairwise-distance estimate over the M
component means of the first transition after ``b``.
"""

import enum
from dataclasses import dataclass

import numpy as np

from decu.gaussian_metrics import DiagonalGaussian
from decu.paide import paide_points
from decu.rng import SeededStream, derive_key


class Codec(enum.Enum):
    """Maps images (H, W) to flat latents and back."""

    IDENTITY = "identity"
    AVGPOOL2X = "avgpool2x"

    def latent_dim(self, image_shape):
        h, w = image_shape
        if self is Codec.IDENTITY:
            return h * w
        if h % 2 or w % 2:
            raise ValueError("avgpool2x needs even image sides")
        return (h // 2) * (w // 2)

    def encode(self, images):
        images = np.asarray(images, dtype=np.float64)
        lead, (h, w) = images.shape[:-2], images.shape[-2:]
        if self is Codec.IDENTITY:
            return images.reshape(lead + (h * w,))
        pooled = images.reshape(lead + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))
        return pooled.reshape(lead + (h * w // 4,))

    def decode(self, latents, image_shape):
        latents = np.asarray(latents, dtype=np.float64)
        h, w = image_shape
        lead = latents.shape[:-1]
        if self is Codec.IDENTITY:
            return latents.reshape(lead + (h, w))
        small = latents.reshape(lead + (h // 2, w // 2))
        return np.repeat(np.repeat(small, 2, axis=-2), 2, axis=-1)


def to_latent(images, codec, scale=4.0):
    """Images in [0, 1] -> centred latents ``scale * (encode(y) - 0.5)``."""
    return scale * (codec.encode(images) - 0.5)


def from_latent(latents, codec, image_shape, scale=4.0):
    """Inverse of :func:`to_latent`, clipped to the image range [0, 1]."""
    return np.clip(codec.decode(np.asarray(latents) / scale + 0.5, image_shape), 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class BranchTrace:
    class_id: int
    seed: int
    branch_point: int
    prefix_component: int
    prefix_chain: np.ndarray      # (n_prefix + 1, d): z_T ... z_b
    branch_chains: np.ndarray     # (M, n_post + 1, d): z_b ... z_0 per component
    decoded_images: np.ndarray    # (M, H, W) in [0, 1]
    first_step_means: tuple       # M zero-variance Gaussians

    @property
    def M(self):
        return self.branch_chains.shape[0]


def noise_key(seed):
    return derive_key(seed, "branch-noise")


def _initial_state(model, seeds):
    z = np.stack([SeededStream(noise_key(s)).normal(model.d) for s in seeds])
    prefix = np.array([SeededStream.for_purpose(s, "branch-prefix").integers(model.M)
                       for s in seeds], dtype=np.int64)
    return z, prefix


def check_branch_point(model, b):
    model.prev_step(int(b))
    return int(b)


def run_prefix(model, class_id, seeds, b, keep=False):
    """Prefix chains for a batch of seeds.

    Returns ``(z_b, prefix_components, chain)`` where ``chain`` is
    (n_prefix + 1, B, d) when ``keep`` is set and None otherwise.
    """
    b = check_branch_point(model, b)
    z, prefix = _initial_state(model, seeds)
    chain = [z] if keep else None
    t = model.config.T
    while t > b:
        t_prev = model.prev_step(t)
        z = model.step(prefix, z, t, t_prev, class_id)
        if keep:
            chain.append(z)
        t = t_prev
    return z, prefix, (np.stack(chain) if keep else None)


def run_branches(model, class_id, z_b, b, n_steps=None):
    """Advance every component from the shared ``z_b`` (B, d).

    Returns (S, M, B, d): the latents after each of the first ``n_steps``
    post-branch transitions (all of them by default).
    """
    m = model.M
    nb = z_b.shape[0]
    comps = np.repeat(np.arange(m), nb)
    z = np.tile(z_b, (m, 1))
    out = []
    t = int(b)
    while t > 0 and (n_steps is None or len(out) < n_steps):
        t_prev = model.prev_step(t)
        z = model.step(comps, z, t, t_prev, class_id)
        out.append(z.reshape(m, nb, -1))
        t = t_prev
    return np.stack(out)


def generate_with_branching(model, class_id, b, seed):
    z_b, prefix, chain = run_prefix(model, class_id, [seed], b, keep=True)
    post = run_branches(model, class_id, z_b, b)[:, :, 0, :]        # (S, M, d)
    branch_chains = np.concatenate([np.broadcast_to(z_b, (1, model.M, model.d)), post])
    branch_chains = np.ascontiguousarray(branch_chains.transpose(1, 0, 2))
    images = model.decode(branch_chains[:, -1])
    first = tuple(DiagonalGaussian.point(m) for m in post[0])
    return BranchTrace(int(class_id), int(seed), int(b), int(prefix[0]), chain[:, 0, :],
                       branch_chains, images, first)


def noise_seeds(seed, n_noise):
    return [derive_key(seed, "noise-sample", i) % (2**62) for i in range(int(n_noise))]


def first_step_uncertainties(model, class_id, b, seeds):
    """Estimator right after the branch point, one value per noise seed."""
    z_b, _, _ = run_prefix(model, class_id, seeds, b)
    first = run_branches(model, class_id, z_b, b, n_steps=1)[0]       # (M, B, d)
    return paide_points(first.transpose(1, 0, 2), model.weights)


def estimate_class_uncertainty(model, class_id, b, n_noise=8, seed=0):
    if n_noise < 1:
        raise ValueError("n_noise must be >= 1")
    return float(np.mean(first_step_uncertainties(model, class_id, b,
                                                   noise_seeds(seed, n_noise))))


def pixel_paide(images, weights=None):
    """Per-pixel estimator over M images of shape (M, H, W) or (M, H, W, ch).

    Each pixel (and channel) is a zero-variance 1-D Gaussian per component;
    channels are averaged.
    """
    images = np.asarray(images, dtype=np.float64)
    m = images.shape[0]
    pix = images.reshape(m, -1).T[:, :, None]                     # (P, M, 1)
    vals = paide_points(pix, weights).reshape(images.shape[1:])
    if images.ndim == 4:
        vals = vals.mean(axis=-1)
    return vals


def per_pixel_uncertainty(model, class_id, b, seed):
    trace = generate_with_branching(model, class_id, b, seed)
    return pixel_paide(trace.decoded_images, model.weights)


def uncertainty_curve(model, class_id, b, seeds):
    """Estimator at every post-branch step for a batch of seeds: (B, S)."""
    z_b, _, _ = run_prefix(model, class_id, seeds, b)
    post = run_branches(model, class_id, z_b, b)                      # (S, M, B, d)
    return paide_points(post.transpose(2, 0, 1, 3), model.weights)


def uncertainty_vs_branch_distance(model, class_id, b, seed):
    """List of ``(steps_past_branch, uncertainty)`` for one noise seed."""
    vals = uncertainty_curve(model, class_id, b, [seed])[0]
    return [(i + 1, float(v)) for i, v in enumerate(vals)]
