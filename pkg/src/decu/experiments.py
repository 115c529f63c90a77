"""Experiment harness over a trained ensemble: class uncertainty per bin,
SSIM diversity across branch points, saturation curves and per-pixel maps,
plus the CSV / PGM writers for their outputs."""

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from decu import kernels
from decu._jit import thread_cap
from decu.branching import (
    estimate_class_uncertainty,
    noise_seeds,
    per_pixel_uncertainty,
    run_branches,
    run_prefix,
    uncertainty_curve,
)
from decu.dataset import BIN_LABELS

SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def ssim(a, b, data_range=1.0, window=SSIM_WINDOW):
    """Mean SSIM over all ``window`` x ``window`` windows at stride 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < window:
        raise ValueError(f"need 2-D images at least {window} x {window}")
    return float(ssim_pairs(a[None], b[None], data_range, window)[0])


def ssim_pairs(a, b, data_range=1.0, window=SSIM_WINDOW):
    """Batched :func:`ssim` over stacks (N, H, W)."""
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    return kernels.ssim_batch(a, b, window, c1, c2)


def _map_classes(fn, classes, threads):
    # results come back in class order whatever the pool does
    workers = min(thread_cap() if threads is None else threads, len(classes))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, classes))
    return [fn(c) for c in classes]


def _used_bins(dataset):
    return [b for b in range(len(BIN_LABELS)) if dataset.classes_in_bin(b).size]


# --------------------------------------------------------------------------
# class uncertainty per bin
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BinSummary:
    bin: str
    n_classes: int
    mean: float
    median: float
    std: float


@dataclass(frozen=True)
class BinExperiment:
    branch_point: int
    class_ids: np.ndarray
    bins: tuple                 # label per class
    uncertainty: np.ndarray     # per class
    summary: tuple              # BinSummary per non-empty bin, bin order

    def bin_means(self):
        return {s.bin: s.mean for s in self.summary}

    def rows(self):
        return [(int(c), b, float(u)) for c, b, u in zip(self.class_ids, self.bins, self.uncertainty)]


def run_bin_experiment(model, dataset, b=None, n_noise=8, seed=0, threads=None):
    """Class uncertainty for every class at branch point ``b`` (default: the
    smallest grid step), grouped by bin."""
    b = int(model.grid[0]) if b is None else int(b)
    model.prev_step(b)
    classes = list(range(dataset.n_classes))
    unc = np.array(_map_classes(
        lambda c: estimate_class_uncertainty(model, c, b, n_noise, seed), classes, threads))
    labels = tuple(dataset.bin_label(c) for c in classes)
    summary = []
    for k in _used_bins(dataset):
        vals = unc[dataset.classes_in_bin(k)]
        summary.append(BinSummary(BIN_LABELS[k], int(vals.size), float(np.mean(vals)),
                                  float(np.median(vals)), float(np.std(vals))))
    return BinExperiment(b, np.array(classes), labels, unc, tuple(summary))


# --------------------------------------------------------------------------
# diversity
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DiversityTable:
    branch_points: tuple
    bins: tuple
    mean: np.ndarray     # (len(branch_points), len(bins))
    std: np.ndarray
    count: np.ndarray    # SSIM values aggregated per cell

    def rows(self):
        out = []
        for i, b in enumerate(self.branch_points):
            for j, label in enumerate(self.bins):
                out.append((int(b), label, float(self.mean[i, j]), float(self.std[i, j]),
                            int(self.count[i, j])))
        return out

    def column(self, label):
        return self.mean[:, self.bins.index(label)]


def final_images(model, class_id, b, seeds):
    """Decoded outputs of every component for each seed: (M, S, H, W)."""
    z_b, _, _ = run_prefix(model, class_id, seeds, b)
    z0 = run_branches(model, class_id, z_b, b)[-1]
    return model.decode(z0)


def pairwise_ssim(images):
    """SSIM for every unordered component pair, per seed: (n_pairs * S,)."""
    m = images.shape[0]
    i, j = np.triu_indices(m, k=1)
    a = images[i].reshape((-1,) + images.shape[-2:])
    b = images[j].reshape((-1,) + images.shape[-2:])
    return ssim_pairs(a, b)


def run_diversity_experiment(model, dataset, branch_points, n_seeds=5, seed=0, threads=None):
    branch_points = tuple(int(b) for b in branch_points)
    for b in branch_points:
        model.prev_step(b)
    seeds = noise_seeds(seed, n_seeds)
    bins = _used_bins(dataset)
    mean = np.empty((len(branch_points), len(bins)))
    std = np.empty_like(mean)
    count = np.zeros(mean.shape, dtype=np.int64)
    for i, b in enumerate(branch_points):
        per_class = _map_classes(lambda c: pairwise_ssim(final_images(model, c, b, seeds)),
                                 list(range(dataset.n_classes)), threads)
        for j, k in enumerate(bins):
            vals = np.concatenate([per_class[c] for c in dataset.classes_in_bin(k)])
            mean[i, j] = np.mean(vals)
            std[i, j] = np.std(vals)
            count[i, j] = vals.size
    return DiversityTable(branch_points, tuple(BIN_LABELS[k] for k in bins), mean, std, count)


# --------------------------------------------------------------------------
# saturation curve and per-pixel maps
# --------------------------------------------------------------------------

def run_curve_experiment(model, class_id, b, n_seeds=20, seed=0):
    """Seed-averaged estimator per post-branch step: list of (step, value)."""
    vals = uncertainty_curve(model, class_id, b, noise_seeds(seed, n_seeds)).mean(axis=0)
    return [(k + 1, float(v)) for k, v in enumerate(vals)]


@dataclass(frozen=True)
class PixelExperiment:
    branch_point: int
    class_ids: np.ndarray
    maps: np.ndarray            # (C, H, W)
    class_uncertainty: np.ndarray

    @property
    def map_means(self):
        return self.maps.mean(axis=(1, 2))


def run_pixel_experiment(model, dataset, b=None, n_noise=8, seed=0, classes=None, threads=None):
    """Per-pixel map for the first noise seed of every class, next to the
    class uncertainty from the same seeds."""
    b = int(model.grid[0]) if b is None else int(b)
    classes = list(range(dataset.n_classes)) if classes is None else [int(c) for c in classes]
    first = noise_seeds(seed, 1)[0]
    maps = np.stack(_map_classes(lambda c: per_pixel_uncertainty(model, c, b, first),
                                 classes, threads))
    unc = np.array(_map_classes(
        lambda c: estimate_class_uncertainty(model, c, b, n_noise, seed), classes, threads))
    return PixelExperiment(b, np.array(classes), maps, unc)


# --------------------------------------------------------------------------
# writers
# --------------------------------------------------------------------------

def fmt(v):
    """Round-trip text for numbers: ``repr`` for floats, ``str`` otherwise."""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_pgm(path, image, vmax=1.0):
    """Binary 8-bit graymap of ``image`` scaled so ``vmax`` is white."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM needs a 2-D image")
    scaled = np.clip(np.rint(255.0 * img / vmax), 0, 255).astype(np.uint8) if vmax > 0 \
        else np.zeros(img.shape, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(scaled.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def write_bins(out_dir, result):
    write_csv(os.path.join(out_dir, "bins.csv"), ("class_id", "bin", "uncertainty"), result.rows())
    write_csv(os.path.join(out_dir, "bins_summary.csv"),
              ("bin", "n_classes", "mean", "median", "std"),
              [(s.bin, s.n_classes, s.mean, s.median, s.std) for s in result.summary])


def write_diversity(out_dir, table):
    write_csv(os.path.join(out_dir, "diversity.csv"), ("b", "bin", "mean", "std", "n"), table.rows())


def write_curve(out_dir, curve, name="curve.csv"):
    write_csv(os.path.join(out_dir, name), ("steps_past_branch", "uncertainty"), curve)


def write_pixel_map(path_stem, pixel_map, max_value):
    h, w = pixel_map.shape
    rows = [(r, c, pixel_map[r, c]) for r in range(h) for c in range(w)]
    write_csv(path_stem + ".csv", ("row", "col", "uncertainty"), rows)
    write_pgm(path_stem + ".pgm", pixel_map, max_value)


def write_pixels(out_dir, result, max_value):
    for c, m in zip(result.class_ids, result.maps):
        write_pixel_map(os.path.join(out_dir, f"pixels_class{int(c):03d}"), m, max_value)
    write_csv(os.path.join(out_dir, "pixels_summary.csv"),
              ("class_id", "map_mean", "class_uncertainty"),
              list(zip(result.class_ids, result.map_means, result.class_uncertainty)))


def log_m(model):
    return math.log(model.M)
