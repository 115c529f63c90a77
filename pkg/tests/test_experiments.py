import csv
import itertools
import math

import numpy as np
import pytest

from decu.dataset import BIN_LABELS, FAMILIES, DatasetConfig, make_binned_dataset
from decu.experiments import (
    fmt,
    read_pgm,
    run_bin_experiment,
    run_curve_experiment,
    run_diversity_experiment,
    run_pixel_experiment,
    ssim,
    write_bins,
    write_csv,
    write_diversity,
    write_pgm,
)

# --------------------------------------------------------------------------
# dataset
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def default_dataset():
    return make_binned_dataset(DatasetConfig(), seed=0)


def test_dataset_is_deterministic(default_dataset):
    again = make_binned_dataset(DatasetConfig(), seed=0)
    assert again.digest() == default_dataset.digest()
    assert make_binned_dataset(DatasetConfig(), seed=1).digest() != default_dataset.digest()


def test_dataset_shape_and_bins(default_dataset):
    ds = default_dataset
    assert ds.images.shape == (50, 64, 16, 16)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert [ds.classes_in_bin(b).size for b in BIN_LABELS] == [10, 10, 10, 20]
    assert {ds.bin_label(c) for c in range(50)} == set(BIN_LABELS)
    assert set(ds.families) == set(FAMILIES)


def test_component_subset_counts(default_dataset):
    ds = default_dataset
    a, b = ds.component_subset(101), ds.component_subset(202)
    for c in range(ds.n_classes):
        assert a[c].size == ds.count_for_class(c)
        assert np.unique(a[c]).size == a[c].size          # no replacement
        assert a[c].max() < ds.config.pool
    top = ds.classes_in_bin("bin1300")
    assert all(np.array_equal(a[c], np.arange(64)) for c in top)
    small = [c for c in range(ds.n_classes) if c not in top]
    assert any(not np.array_equal(a[c], b[c]) for c in small)
    assert all(np.array_equal(x, y) for x, y in zip(a, ds.component_subset(101)))
    x, y = ds.subset_arrays(a)
    assert x.shape == (1 * 10 + 4 * 10 + 16 * 10 + 64 * 20, 256)
    assert np.array_equal(np.bincount(y), [ds.count_for_class(c) for c in range(ds.n_classes)])


def test_same_family_classes_are_apart(default_dataset):
    ds = default_dataset
    means = ds.images.mean(axis=1)
    for fam in FAMILIES:
        idx = [c for c in range(ds.n_classes) if ds.families[c] == fam]
        for i, j in itertools.combinations(idx, 2):
            assert np.linalg.norm(means[i] - means[j]) > 0.5


@pytest.mark.parametrize("kw", [dict(class_counts=(1, 1, 1)), dict(class_counts=(0, 1, 1, 1)),
                                dict(bin_counts=(1, 4, 4, 8)), dict(image_size=6),
                                dict(pixel_noise=-0.1), dict(pool_size=10)])
def test_dataset_config_validation(kw):
    with pytest.raises(ValueError):
        make_binned_dataset(DatasetConfig(**kw), seed=0)


# --------------------------------------------------------------------------
# SSIM
# --------------------------------------------------------------------------


def scalar_ssim(a, b, win=8, c1=1e-4, c2=9e-4):
    h, w = len(a), len(a[0])
    vals = []
    for r in range(h - win + 1):
        for c in range(w - win + 1):
            xs = [a[i][j] for i in range(r, r + win) for j in range(c, c + win)]
            ys = [b[i][j] for i in range(r, r + win) for j in range(c, c + win)]
            n = len(xs)
            mx, my = sum(xs) / n, sum(ys) / n
            vx = sum((x - mx) ** 2 for x in xs) / n
            vy = sum((y - my) ** 2 for y in ys) / n
            cxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / n
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


def test_ssim_constant_offset_hand_value():
    a, b = np.full((16, 16), 0.25), np.full((16, 16), 0.75)
    hand = (0.375 + 1e-4) / (0.625 + 1e-4)
    assert hand == pytest.approx(0.600064, abs=1e-6)
    assert ssim(a, b) == pytest.approx(hand, abs=1e-12)
    assert scalar_ssim(a.tolist(), b.tolist()) == pytest.approx(hand, abs=1e-12)


def test_ssim_matches_scalar_loops_and_is_symmetric():
    rng = np.random.default_rng(0)
    for _ in range(5):
        a, b = rng.uniform(size=(12, 10)), rng.uniform(size=(12, 10))
        assert ssim(a, b) == pytest.approx(scalar_ssim(a.tolist(), b.tolist()), abs=1e-12)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-15)
        assert -1.0 <= ssim(a, 1.0 - a) <= 1.0


def test_ssim_errors():
    with pytest.raises(ValueError):
        ssim(np.zeros((16, 16)), np.zeros((16, 15)))
    with pytest.raises(ValueError):
        ssim(np.zeros((6, 6)), np.zeros((6, 6)))


# --------------------------------------------------------------------------
# harness
# --------------------------------------------------------------------------


def test_bin_experiment_shape_and_degenerate(small_dataset, small_model, degenerate_model):
    res = run_bin_experiment(small_model, small_dataset, n_noise=2)
    assert len(res.rows()) == small_dataset.n_classes
    assert res.branch_point == 5
    assert [s.bin for s in res.summary] == list(BIN_LABELS)
    deg = run_bin_experiment(degenerate_model, small_dataset, n_noise=2)
    assert np.all(deg.uncertainty == 0.0)
    assert {(s.mean, s.median, s.std) for s in deg.summary} == {(0.0, 0.0, 0.0)}


def test_bin_experiment_thread_independent(small_dataset, small_model):
    a = run_bin_experiment(small_model, small_dataset, 50, n_noise=2, threads=1)
    b = run_bin_experiment(small_model, small_dataset, 50, n_noise=2, threads=4)
    assert np.array_equal(a.uncertainty, b.uncertainty)


def test_diversity_table(small_dataset, small_model, degenerate_model):
    bps = (200, 150, 100, 50)
    tab = run_diversity_experiment(small_model, small_dataset, bps, n_seeds=2)
    assert tab.mean.shape == (4, 4) and len(tab.rows()) == 16
    assert np.all(tab.mean <= 1.0) and np.all(tab.mean >= -1.0)
    m = small_model.M
    assert np.all(tab.count[:, 0] == 2 * 2 * m * (m - 1) // 2)
    deg = run_diversity_experiment(degenerate_model, small_dataset, bps, n_seeds=2)
    np.testing.assert_allclose(deg.mean, 1.0, atol=1e-12)
    np.testing.assert_allclose(deg.std, 0.0, atol=1e-12)
    with pytest.raises(ValueError):
        run_diversity_experiment(small_model, small_dataset, (201,), n_seeds=1)


def test_curve_and_pixels(small_dataset, small_model):
    curve = run_curve_experiment(small_model, 0, 100, n_seeds=3)
    assert [k for k, _ in curve] == list(range(1, 21))
    pix = run_pixel_experiment(small_model, small_dataset, n_noise=2, classes=[0, 5])
    assert pix.maps.shape == (2, 16, 16) and pix.map_means.shape == (2,)


def test_csv_round_trip(tmp_path, small_dataset, small_model):
    vals = [0.1, 1 / 3, 1e-300, 2.0 ** 0.5]
    path = tmp_path / "x.csv"
    write_csv(path, ("v",), [(v,) for v in vals])
    with open(path) as fh:
        got = [float(r[0]) for r in list(csv.reader(fh))[1:]]
    assert got == vals
    assert fmt(np.float64(0.1)) == "0.1" and fmt(np.int64(3)) == "3"
    res = run_bin_experiment(small_model, small_dataset, n_noise=1)
    write_bins(tmp_path, res)
    with open(tmp_path / "bins.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["class_id", "bin", "uncertainty"] and len(rows) == small_dataset.n_classes + 1
    assert [float(r[2]) for r in rows[1:]] == res.uncertainty.tolist()
    tab = run_diversity_experiment(small_model, small_dataset, (100, 50), n_seeds=1)
    write_diversity(tmp_path, tab)
    with open(tmp_path / "diversity.csv") as fh:
        assert len(list(csv.reader(fh))) == 1 + 2 * 4


def test_pgm_round_trip(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    write_pgm(tmp_path / "a.pgm", img)
    back = read_pgm(tmp_path / "a.pgm")
    assert back.shape == (3, 4) and back[0, 0] == 0 and back[-1, -1] == 255
    write_pgm(tmp_path / "b.pgm", img, vmax=math.log(5))
    assert read_pgm(tmp_path / "b.pgm").max() < 255
