"""Efficient ensembles: one frozen shared backbone, M trained class-embedding tables."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from decu._jit import thread_cap
from decu.branching import Codec, from_latent, to_latent
from decu.dataset import subset_digest
from decu.diffusion import (
    AdamState,
    ClassEmbeddingTable,
    DenoiserBackbone,
    Trainable,
    TrainingDivergence,
    ddim_timesteps,
    ddim_update,
    make_schedule,
    train,
)
from decu.gaussian_metrics import DiagonalGaussian
from decu.rng import SeededStream, derive_key


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 128
    embed_dim: int = 16
    codec: str = "avgpool2x"
    latent_scale: float = 4.0
    T: int = 200
    beta_start: float = 2.5e-3
    beta_end: float = 0.1
    ddim_steps: int = 40
    n_components: int = 5
    pretrain_steps: int = 3000
    component_steps: int = 3000
    batch_size: int = 128
    lr: float = 1e-3
    embed_init_scale: float = 1.0

    def validate(self):
        if not 2 <= self.n_components <= 16:
            raise ValueError("n_components must be in 2..16")
        if self.hidden < 1 or self.embed_dim < 1 or self.batch_size < 1:
            raise ValueError("hidden, embed_dim and batch_size must be positive")
        if self.pretrain_steps < 1 or self.component_steps < 0:
            raise ValueError("step counts must be positive")
        Codec(self.codec)
        if not self.latent_scale > 0:
            raise ValueError("latent_scale must be positive")
        make_schedule(self.T, self.beta_start, self.beta_end)
        ddim_timesteps(self.T, self.ddim_steps)
        return self

    def schedule(self):
        return make_schedule(self.T, self.beta_start, self.beta_end)

    def encode(self, images):
        return to_latent(images, Codec(self.codec), self.latent_scale)


@dataclass
class EnsembleModel:
    backbone: DenoiserBackbone
    tables: list
    config: ModelConfig
    component_seeds: tuple
    image_shape: tuple
    subset_digests: tuple = ()
    losses: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.tables:
            raise ValueError("ensemble needs at least one table")
        shape = self.tables[0].weights.shape
        if any(t.weights.shape != shape for t in self.tables):
            raise ValueError("all tables must share (C, e_c)")
        if shape[1] != self.backbone.embed_dim:
            raise ValueError("table width does not match the backbone")
        if Codec(self.config.codec).latent_dim(self.image_shape) != self.backbone.d:
            raise ValueError("codec latent size does not match the backbone")
        self.image_shape = tuple(int(v) for v in self.image_shape)
        self.backbone.freeze()
        self.schedule = self.config.schedule()
        self.grid = ddim_timesteps(self.config.T, self.config.ddim_steps)

    @property
    def M(self):
        return len(self.tables)

    @property
    def n_classes(self):
        return self.tables[0].n_classes

    @property
    def d(self):
        return self.backbone.d

    @property
    def codec(self):
        return Codec(self.config.codec)

    def decode(self, latents):
        return from_latent(latents, self.codec, self.image_shape, self.config.latent_scale)

    @property
    def weights(self):
        return np.full(self.M, 1.0 / self.M)

    def predict_eps(self, components, z, t, class_ids):
        """Noise predictions for rows of ``z`` under per-row components and classes."""
        components = np.broadcast_to(np.asarray(components, dtype=np.int64), (z.shape[0],))
        class_ids = np.broadcast_to(np.asarray(class_ids, dtype=np.int64), (z.shape[0],))
        emb = np.empty((z.shape[0], self.backbone.embed_dim))
        for j in np.unique(components):
            rows = components == j
            emb[rows] = self.tables[int(j)].lookup(class_ids[rows])
        return self.backbone.forward(z, t, emb, self.schedule)

    def step(self, components, z, t, t_prev, class_ids):
        eps = self.predict_eps(components, z, t, class_ids)
        return ddim_update(z, eps, t, t_prev, self.schedule)

    def prev_step(self, t):
        """Grid step that follows ``t`` on the way down (0 after the smallest)."""
        i = np.searchsorted(self.grid, t)
        if i >= self.grid.size or self.grid[i] != t:
            raise ValueError(f"step {t} is not on the DDIM grid (stride {self.grid[0]})")
        return 0 if i == 0 else int(self.grid[i - 1])


def pretrain_backbone(dataset, config, seed):
    """Stage-0 training of backbone plus a throwaway table on every pool image.

    Returns ``(backbone, losses)``; the backbone comes back frozen.
    """
    config = config.validate()
    x, y = dataset.full_arrays()
    x = config.encode(x.reshape((-1,) + dataset.image_shape))
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    init = SeededStream.for_purpose(seed, "backbone-init")
    backbone = DenoiserBackbone.initialize(x.shape[1], config.hidden, config.embed_dim, init)
    scratch = ClassEmbeddingTable.initialize(dataset.n_classes, config.embed_dim,
                                             SeededStream.for_purpose(seed, "stage0-table"),
                                             config.embed_init_scale)
    opt = AdamState(lr=config.lr)
    losses = train(backbone, scratch, x, y, config.schedule(), config.pretrain_steps,
                   config.batch_size, opt, Trainable.BACKBONE_AND_TABLE,
                   SeededStream.for_purpose(seed, "stage0-train"))
    return backbone.freeze(), losses


def train_component(j, backbone, images, labels, n_classes, seed_j, config):
    """Initialise a table from ``seed_j`` and train it against the frozen backbone.

    Returns ``(table, losses)``.
    """
    if not backbone.frozen:
        raise ValueError("backbone must be frozen before component training")
    table = ClassEmbeddingTable.initialize(n_classes, config.embed_dim,
                                           SeededStream.for_purpose(seed_j, "table-init"),
                                           config.embed_init_scale)
    opt = AdamState(lr=config.lr)
    try:
        losses = train(backbone, table, images, labels, config.schedule(),
                       config.component_steps, config.batch_size, opt,
                       Trainable.TABLE_ONLY, SeededStream.for_purpose(seed_j, "table-train"))
    except TrainingDivergence as exc:
        raise TrainingDivergence(f"component {j}: {exc}") from exc
    return table, losses


def component_seeds_for(master_seed, m):
    return tuple(derive_key(master_seed, "component", j) % (2**31) for j in range(m))


def build_ensemble(dataset, config, master_seed, component_seeds=None, threads=None):
    """Pretrain the backbone, then train every component (concurrently if allowed)."""
    config = config.validate()
    seeds = tuple(component_seeds or component_seeds_for(master_seed, config.n_components))
    if len(seeds) != config.n_components:
        raise ValueError("one seed per component required")
    backbone, stage0 = pretrain_backbone(dataset, config, derive_key(master_seed, "stage0"))
    before = backbone.digest()
    subsets = [dataset.component_subset(s) for s in seeds]

    def job(j):
        x, y = dataset.subset_arrays(subsets[j])
        x = config.encode(x.reshape((-1,) + dataset.image_shape))
        return train_component(j, backbone, x, y, dataset.n_classes, seeds[j], config)

    workers = min(thread_cap() if threads is None else threads, len(seeds))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, range(len(seeds))))
    else:
        results = [job(j) for j in range(len(seeds))]
    if backbone.digest() != before:
        raise RuntimeError("backbone changed during component training")
    losses = {"stage0": stage0}
    for j, (_, l) in enumerate(results):
        losses[f"component{j}"] = l
    return EnsembleModel(backbone, [t for t, _ in results], config, seeds,
                         dataset.image_shape, tuple(subset_digest(s) for s in subsets), losses)


def component_mean_prediction(model, j, z_t, t, t_prev, class_id):
    """Zero-variance Gaussian at component ``j``'s DDIM mean for ``z_t -> z_{t_prev}``."""
    if not 0 <= j < model.M:
        raise IndexError(f"component {j} out of range")
    z = np.asarray(z_t, dtype=np.float64).reshape(1, -1)
    z_prev = model.step([j], z, t, t_prev, [class_id])[0]
    return DiagonalGaussian.point(z_prev)
