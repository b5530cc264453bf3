"""Generators, IDX parsing, label flipping, synthetic-set plumbing."""
import struct

import numpy as np
import pytest

from iwd import data as dt
from iwd import models as md
from iwd.errors import ContractError, FormatError


def test_mixture_counts():
    ds = dt.gen_gaussian_mixture(classes=2, per_class=50, d=2, spread=0.2, seed=0)
    assert ds.n == 100
    assert np.sum(ds.y == 0) == 50
    assert np.sum(ds.y == 1) == 50


def test_mixture_degenerate_spread():
    ds = dt.gen_gaussian_mixture(classes=3, per_class=4, d=2, spread=0.0, seed=1)
    for c in range(3):
        mu = np.array([np.cos(2 * np.pi * c / 3), np.sin(2 * np.pi * c / 3)])
        rows = ds.x[ds.y == c]
        assert np.allclose(rows, mu, atol=0)
        assert np.allclose(np.linalg.norm(rows, axis=1), 1.0)


def test_mixture_separable_by_logistic():
    train = dt.gen_gaussian_mixture(classes=2, per_class=50, d=2, spread=0.1, seed=2)
    test = dt.gen_gaussian_mixture(classes=2, per_class=50, d=2, spread=0.1, seed=3)
    arch = md.ArchDescriptor(kind="linear", input_dim=2, classes=2)
    m = md.init_model(arch, md.InitDistribution(), seed=4)
    m = md.train(m, train.x, train.y, train.w, md.SgdConfig(lr=0.5), steps=500)
    assert md.accuracy(m, test.x, test.y) >= 0.99


def test_moons_counts():
    ds = dt.gen_two_moons(n=100, noise=0.1, seed=5)
    assert ds.n == 100
    assert np.sum(ds.y == 0) == 50
    assert np.sum(ds.y == 1) == 50


def test_moons_noiseless_geometry():
    ds = dt.gen_two_moons(n=80, noise=0.0, seed=6)
    r0 = np.linalg.norm(ds.x[ds.y == 0], axis=1)
    r1 = np.linalg.norm(ds.x[ds.y == 1] - np.array([1.0, -0.5]), axis=1)
    assert np.allclose(r0, 1.0, atol=1e-12)
    assert np.allclose(r1, 1.0, atol=1e-12)


def test_moons_mlp_separable():
    train = dt.gen_two_moons(n=100, noise=0.1, seed=7)
    test = dt.gen_two_moons(n=100, noise=0.1, seed=8)
    arch = md.ArchDescriptor(kind="mlp", input_dim=2, classes=2, hidden=(16,))
    m = md.init_model(arch, md.InitDistribution(), seed=9)
    m = md.train(m, train.x, train.y, train.w, md.SgdConfig(lr=0.5), steps=400)
    assert md.accuracy(m, test.x, test.y) >= 0.95


def test_generators_deterministic():
    a = dt.gen_two_moons(n=30, noise=0.2, seed=10)
    b = dt.gen_two_moons(n=30, noise=0.2, seed=10)
    assert np.array_equal(a.x, b.x)
    c = dt.gen_gaussian_mixture(classes=2, per_class=5, d=3, spread=0.5, seed=11)
    e = dt.gen_gaussian_mixture(classes=2, per_class=5, d=3, spread=0.5, seed=11)
    assert np.array_equal(c.x, e.x)


def test_fresh_weights_sum_to_one():
    for ds in (
        dt.gen_two_moons(n=33, noise=0.1, seed=12),
        dt.gen_gaussian_mixture(classes=3, per_class=7, d=2, spread=0.3, seed=13),
    ):
        assert abs(ds.w.sum() - 1.0) < 1e-12


def _write_idx_fixture(tmp_path, count=2, rows=3, cols=2):
    rng = np.random.default_rng(14)
    pixels = rng.integers(0, 256, size=(count, rows, cols), dtype=np.uint8)
    labels = rng.integers(0, 2, size=count, dtype=np.uint8)
    ip = tmp_path / "images.idx"
    lp = tmp_path / "labels.idx"
    with open(ip, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, count, rows, cols))
        fh.write(pixels.tobytes())
    with open(lp, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, count))
        fh.write(labels.tobytes())
    return ip, lp, pixels, labels


def test_idx_hand_built_fixture(tmp_path):
    ip, lp, pixels, labels = _write_idx_fixture(tmp_path)
    ds = dt.load_idx_pair(ip, lp, normalize=False)
    assert ds.x.shape == (2, 6)
    assert np.array_equal(ds.x, pixels.reshape(2, 6) / 255.0)
    assert np.array_equal(ds.y, labels.astype(np.int64))
    assert abs(ds.w.sum() - 1.0) < 1e-12


def test_idx_normalization(tmp_path):
    ip, lp, pixels, _ = _write_idx_fixture(tmp_path, count=4)
    ds = dt.load_idx_pair(ip, lp)
    assert abs(ds.x.mean()) < 1e-10
    assert abs(ds.x.std() - 1.0) < 1e-6


def test_idx_bad_magic(tmp_path):
    ip, lp, _, _ = _write_idx_fixture(tmp_path)
    raw = bytearray(ip.read_bytes())
    raw[3] = 0x04
    ip.write_bytes(bytes(raw))
    with pytest.raises(FormatError) as err:
        dt.load_idx_pair(ip, lp)
    assert "byte 0" in str(err.value)


def test_idx_count_mismatch(tmp_path):
    ip, lp, _, labels = _write_idx_fixture(tmp_path)
    with open(lp, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, 3))
        fh.write(bytes([0, 1, 0]))
    with pytest.raises(FormatError) as err:
        dt.load_idx_pair(ip, lp)
    assert "byte 4" in str(err.value)


def test_idx_truncated(tmp_path):
    ip, lp, _, _ = _write_idx_fixture(tmp_path)
    raw = ip.read_bytes()
    ip.write_bytes(raw[:-3])
    with pytest.raises(FormatError) as err:
        dt.load_idx_pair(ip, lp)
    assert "byte 16" in str(err.value)


def test_idx_roundtrip(tmp_path):
    rng = np.random.default_rng(15)
    x = rng.integers(0, 256, size=(5, 12)).astype(np.float64) / 255.0
    ds = dt.WeightedDataset(x, rng.integers(0, 3, size=5), dt.uniform_weights(5), 3)
    ip = tmp_path / "im.idx"
    lp = tmp_path / "lb.idx"
    dt.save_idx_pair(ds, ip, lp, rows=4, cols=3)
    back = dt.load_idx_pair(ip, lp, normalize=False)
    assert np.array_equal(back.x, ds.x)
    assert np.array_equal(back.y, ds.y)


def test_flip_none():
    ds = dt.gen_two_moons(n=20, noise=0.1, seed=16)
    out, flipped = dt.flip_labels(ds, dt.NoiseSpec(flip_fraction=0.0, seed=17))
    assert np.array_equal(out.y, ds.y)
    assert flipped.size == 0


def test_flip_all_binary():
    ds = dt.gen_two_moons(n=20, noise=0.1, seed=18)
    out, flipped = dt.flip_labels(ds, dt.NoiseSpec(flip_fraction=1.0, seed=19))
    assert np.array_equal(out.y, 1 - ds.y)
    assert flipped.size == 20


def test_flip_exact_count_and_reproducible():
    ds = dt.gen_gaussian_mixture(classes=4, per_class=25, d=2, spread=0.2, seed=20)
    a, fa = dt.flip_labels(ds, dt.NoiseSpec(flip_fraction=0.2, seed=21))
    b, fb = dt.flip_labels(ds, dt.NoiseSpec(flip_fraction=0.2, seed=21))
    assert fa.size == 20
    assert np.array_equal(fa, fb)
    assert np.array_equal(a.y, b.y)
    assert np.array_equal(a.x, ds.x)
    changed = np.flatnonzero(a.y != ds.y)
    assert np.array_equal(changed, fa)  # every flip picks a different label
    assert np.all((a.y >= 0) & (a.y < 4))


def test_init_synthetic_small():
    ds = dt.gen_two_moons(n=20, noise=0.1, seed=22)
    s = dt.init_synthetic(ds, ipc=1, mode="random-real", seed=23)
    assert s.m == 2
    assert set(s.y.tolist()) == {0, 1}


def test_init_synthetic_class_mean_degenerate():
    ds = dt.gen_gaussian_mixture(classes=3, per_class=5, d=2, spread=0.0, seed=24)
    s = dt.init_synthetic(ds, ipc=2, mode="class-mean", seed=25)
    for c in range(3):
        mu = np.array([np.cos(2 * np.pi * c / 3), np.sin(2 * np.pi * c / 3)])
        assert np.allclose(s.x[s.y == c], mu, atol=1e-12)


def test_init_synthetic_random_real_membership():
    ds = dt.gen_gaussian_mixture(classes=2, per_class=10, d=3, spread=0.4, seed=26)
    s = dt.init_synthetic(ds, ipc=4, mode="random-real", seed=27)
    for i in range(s.m):
        same_class = ds.x[ds.y == s.y[i]]
        assert any(np.array_equal(s.x[i], row) for row in same_class)


def test_init_synthetic_insufficient_class():
    ds = dt.gen_gaussian_mixture(classes=2, per_class=3, d=2, spread=0.1, seed=28)
    with pytest.raises(ContractError):
        dt.init_synthetic(ds, ipc=4, mode="random-real", seed=29)


def test_init_synthetic_noise_mode():
    ds = dt.gen_two_moons(n=16, noise=0.1, seed=30)
    s = dt.init_synthetic(ds, ipc=3, mode="noise", seed=31)
    assert s.x.shape == (6, 2)
    assert np.all(np.isfinite(s.x))


def test_csv_export(tmp_path):
    ds = dt.gen_two_moons(n=6, noise=0.2, seed=32)
    path = tmp_path / "ds.csv"
    dt.export_csv(ds, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "f0,f1,label,weight"
    assert len(lines) == 7
    first = lines[1].split(",")
    assert float(first[0]) == ds.x[0, 0]
    assert int(first[2]) == ds.y[0]


def test_synthetic_roundtrip(tmp_path):
    ds = dt.gen_two_moons(n=20, noise=0.1, seed=33)
    s = dt.init_synthetic(ds, ipc=2, mode="random-real", seed=34, eta0=0.05)
    jp = tmp_path / "syn.json"
    bp = tmp_path / "syn.bin"
    dt.save_synthetic(s, jp, bp)
    back = dt.load_synthetic(jp, bp)
    assert back.ipc == s.ipc
    assert back.eta == s.eta
    assert np.array_equal(back.y, s.y)
    assert np.array_equal(back.x, s.x.astype("<f4").astype(np.float64))


def test_take_subset_renormalizes():
    ds = dt.gen_two_moons(n=10, noise=0.1, seed=35)
    sub = dt.take_subset(ds, np.array([0, 1, 5]))
    assert sub.n == 3
    assert abs(sub.w.sum() - 1.0) < 1e-12
