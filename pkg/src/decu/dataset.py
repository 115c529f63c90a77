"""Synthetic binned-classes image dataset.

Each class is a procedural pattern (disk, bars, checker or gradient) with its
own parameters; samples jitter those parameters and add pixel noise. Classes
are grouped into bins that differ in how many images per class each ensemble
component gets to see.
"""

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from decu.rng import SeededStream, derive_key

BIN_LABELS = ("bin1", "bin10", "bin100", "bin1300")
FAMILIES = ("disk", "bars", "checker", "gradient")


@dataclass(frozen=True)
class DatasetConfig:
    class_counts: tuple = (10, 10, 10, 20)
    bin_counts: tuple = (1, 4, 16, 64)
    image_size: int = 16
    pixel_noise: float = 0.05
    pool_size: int = 0   # 0: largest bin count

    def validate(self):
        if len(self.class_counts) != len(BIN_LABELS) or len(self.bin_counts) != len(BIN_LABELS):
            raise ValueError(f"need one class count and one bin count per bin {BIN_LABELS}")
        if any(int(c) < 1 for c in self.class_counts):
            raise ValueError("every bin needs at least one class")
        counts = [int(c) for c in self.bin_counts]
        if counts[0] < 1 or any(b <= a for a, b in zip(counts, counts[1:])):
            raise ValueError("bin counts must be >= 1 and strictly increasing")
        if int(self.image_size) < 8:
            raise ValueError("image_size must be >= 8")
        if self.pixel_noise < 0:
            raise ValueError("pixel_noise must be >= 0")
        if self.pool_size and self.pool_size < counts[-1]:
            raise ValueError("pool_size must be >= the largest bin count")
        return self

    @property
    def n_classes(self):
        return int(sum(self.class_counts))

    @property
    def pool(self):
        return int(self.pool_size or self.bin_counts[-1])


@dataclass(frozen=True, eq=False)
class BinnedDataset:
    config: DatasetConfig
    seed: int
    families: tuple         # family name per class
    class_params: tuple     # template parameter dict per class
    bins: np.ndarray        # bin index per class
    images: np.ndarray      # (C, pool, H, W) in [0, 1]

    @property
    def n_classes(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[2:]

    def bin_label(self, class_id):
        return BIN_LABELS[int(self.bins[class_id])]

    def classes_in_bin(self, b):
        b = BIN_LABELS.index(b) if isinstance(b, str) else int(b)
        return np.flatnonzero(self.bins == b)

    def count_for_class(self, class_id):
        return int(self.config.bin_counts[int(self.bins[class_id])])

    def full_arrays(self):
        """Every pool image with its label, flattened: ((C*pool, H*W), (C*pool,))."""
        c, n = self.images.shape[:2]
        flat = self.images.reshape(c * n, -1)
        return flat, np.repeat(np.arange(c), n)

    def component_subset(self, component_seed):
        """Pool indices per class seen by one ensemble component.

        The largest bin uses its whole pool for every component; smaller bins
        draw their count without replacement from a stream keyed by the
        component seed and the class.
        """
        top = len(BIN_LABELS) - 1
        out = []
        for c in range(self.n_classes):
            k = self.count_for_class(c)
            if int(self.bins[c]) == top and k >= self.config.pool:
                out.append(np.arange(self.config.pool))
            else:
                stream = SeededStream.for_purpose(component_seed, "subset", c)
                out.append(np.sort(stream.choice_without_replacement(self.config.pool, k)))
        return out

    def subset_arrays(self, subset):
        xs = [self.images[c, idx].reshape(len(idx), -1) for c, idx in enumerate(subset)]
        ys = [np.full(len(idx), c) for c, idx in enumerate(subset)]
        return np.concatenate(xs), np.concatenate(ys)

    def digest(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.bins, dtype="<i8").tobytes())
        return h.hexdigest()


def subset_digest(subset):
    h = hashlib.sha256()
    for idx in subset:
        h.update(np.ascontiguousarray(idx, dtype="<i8").tobytes())
        h.update(b"|")
    return h.hexdigest()


# --------------------------------------------------------------------------
# pattern generators
# --------------------------------------------------------------------------

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _grid(size):
    ax = np.arange(size, dtype=np.float64)
    return np.meshgrid(ax, ax, indexing="ij")


def render(family, params, size):
    yy, xx = _grid(size)
    fg, bg = params["fg"], params["bg"]
    if family == "disk":
        dist = np.hypot(xx - params["cx"], yy - params["cy"])
        mask = _sigmoid((params["r"] - dist) / 0.5)
    elif family == "bars":
        th = params["angle"]
        proj = xx * math.cos(th) + yy * math.sin(th)
        mask = _sigmoid(4.0 * np.sin(2.0 * math.pi * proj / params["period"] + params["phase"]))
    elif family == "checker":
        cell = params["cell"]
        u = np.sin(math.pi * (xx - params["ox"]) / cell)
        v = np.sin(math.pi * (yy - params["oy"]) / cell)
        mask = _sigmoid(6.0 * u * v)
    elif family == "gradient":
        th = params["angle"]
        c = (size - 1) / 2.0
        proj = (xx - c) * math.cos(th) + (yy - c) * math.sin(th)
        mask = _sigmoid(params["slope"] * proj / size)
    else:
        raise ValueError(f"unknown family {family!r}")
    return bg + (fg - bg) * mask


def _draw_template(family, size, u):
    """Class template parameters from a vector of 8 uniforms."""
    fg = 0.65 + 0.35 * u[0]
    bg = 0.3 * u[1]
    if family == "disk":
        lo, hi = 0.3 * size, 0.7 * size
        return {"cx": lo + (hi - lo) * u[2], "cy": lo + (hi - lo) * u[3],
                "r": size * (0.15 + 0.15 * u[4]), "fg": fg, "bg": bg}
    if family == "bars":
        return {"angle": math.pi * u[2], "period": size * (0.25 + 0.3 * u[3]),
                "phase": 2.0 * math.pi * u[4], "fg": fg, "bg": bg}
    if family == "checker":
        return {"cell": size * (0.12 + 0.2 * u[2]), "ox": size * 0.5 * u[3],
                "oy": size * 0.5 * u[4], "fg": fg, "bg": bg}
    return {"angle": 2.0 * math.pi * u[2], "slope": 4.0 + 8.0 * u[3], "fg": fg, "bg": bg}


_JITTER = {
    "cx": 1.5, "cy": 1.5, "r": 0.6, "angle": 0.2, "period": 0.6, "phase": 0.6,
    "cell": 0.3, "ox": 0.8, "oy": 0.8, "slope": 1.0, "fg": 0.05, "bg": 0.05,
}


def _jitter(params, u):
    out = {}
    for i, (k, v) in enumerate(sorted(params.items())):
        out[k] = v + _JITTER[k] * (2.0 * u[i] - 1.0)
    return out


def make_binned_dataset(config=None, seed=0, min_template_gap=2.0):
    """Build the dataset deterministically from ``seed``.

    Within a family, class templates are redrawn until every pair is at least
    ``min_template_gap`` apart in L2, which keeps classes distinguishable.
    """
    config = (config or DatasetConfig()).validate()
    size = int(config.image_size)
    bins = np.concatenate([np.full(int(n), b) for b, n in enumerate(config.class_counts)])
    n_classes = bins.size
    # family by position inside the bin: every bin gets the same family mix
    pos = np.concatenate([np.arange(int(n)) for n in config.class_counts])
    families = tuple(FAMILIES[p % len(FAMILIES)] for p in pos)

    templates = []
    rendered = []
    for c in range(n_classes):
        fam = families[c]
        stream = SeededStream.for_purpose(seed, "class-template", c)
        for _attempt in range(1000):
            params = _draw_template(fam, size, stream.uniform(8))
            img = render(fam, params, size)
            gaps = [np.linalg.norm(img - r) for f, r in zip(families, rendered) if f == fam]
            if not gaps or min(gaps) >= min_template_gap:
                break
        else:
            raise ValueError(f"could not place class {c}; lower min_template_gap")
        templates.append(params)
        rendered.append(img)

    pool = config.pool
    images = np.empty((n_classes, pool, size, size))
    for c in range(n_classes):
        stream = SeededStream(derive_key(seed, "class-samples", c))
        for k in range(pool):
            p = _jitter(templates[c], stream.uniform(len(templates[c])))
            img = render(families[c], p, size)
            img = img + config.pixel_noise * stream.normal((size, size))
            images[c, k] = np.clip(img, 0.0, 1.0)
    images.setflags(write=False)
    return BinnedDataset(config, int(seed), families, tuple(templates), bins, images)
