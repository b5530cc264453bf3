"""Dataset provisioning: toy generators, IDX image files, weighted wrappers.

Real datasets carry per-instance weights (uniform by default) so that
upweighting experiments and weighted losses share one representation.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class WeightedDataset:
    """Feature matrix with integer labels and non-negative instance weights."""

    x: np.ndarray
    y: np.ndarray
    w: np.ndarray
    class_count: int
    provenance: str = ""

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        w = np.asarray(self.w, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise ContractError("features must form a non-empty (N, d) matrix")
        n = x.shape[0]
        if y.shape != (n,) or w.shape != (n,):
            raise ContractError("labels and weights must both have length N")
        if not np.all(np.isfinite(x)):
            raise ContractError("features must be finite")
        if np.any(w < 0):
            raise ContractError("instance weights must be non-negative")
        if self.class_count < 2:
            raise ContractError("need at least 2 classes")
        if y.min() < 0 or y.max() >= self.class_count:
            raise ContractError("labels must lie in [0, class_count)")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class SyntheticSet:
    """Learnable synthetic exemplars with fixed labels and a learnable lr."""

    x: np.ndarray
    y: np.ndarray
    eta: float
    ipc: int
    class_count: int

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        m = self.ipc * self.class_count
        if x.ndim != 2 or x.shape[0] != m:
            raise ContractError(f"synthetic set must hold ipc*classes = {m} rows")
        if y.shape != (m,):
            raise ContractError("synthetic labels must have length ipc*classes")
        counts = np.bincount(y, minlength=self.class_count)
        if not np.all(counts == self.ipc):
            raise ContractError("each class needs exactly ipc synthetic instances")
        if not np.all(np.isfinite(x)):
            raise ContractError("synthetic features must be finite")
        if not self.eta > 0:
            raise ContractError("synthetic learning rate must be positive")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def m(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class NoiseSpec:
    flip_fraction: float
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.flip_fraction <= 1.0:
            raise ContractError("flip_fraction must lie in [0, 1]")


def uniform_weights(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def with_weights(ds: WeightedDataset, w: np.ndarray) -> WeightedDataset:
    return WeightedDataset(ds.x, ds.y, w, ds.class_count, ds.provenance)


def take_subset(ds: WeightedDataset, idx: np.ndarray, renormalize: bool = True) -> WeightedDataset:
    idx = np.asarray(idx, dtype=np.intp)
    w = ds.w[idx]
    total = w.sum()
    if renormalize:
        if total <= 0:
            raise ContractError("cannot renormalize zero total weight")
        w = w / total
    return WeightedDataset(ds.x[idx], ds.y[idx], w, ds.class_count, ds.provenance + "+subset")


def gen_gaussian_mixture(
    classes: int, per_class: int, d: int, spread: float, seed: int
) -> WeightedDataset:
    """Isotropic blobs whose means sit on the unit circle in the first 2 dims."""
    if classes < 2 or per_class < 1 or d < 2:
        raise ContractError("need classes >= 2, per_class >= 1, d >= 2")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(classes) / classes
    means = np.zeros((classes, d))
    means[:, 0] = np.cos(angles)
    means[:, 1] = np.sin(angles)
    x = np.repeat(means, per_class, axis=0) + spread * rng.standard_normal((classes * per_class, d))
    y = np.repeat(np.arange(classes), per_class)
    return WeightedDataset(
        x, y, uniform_weights(classes * per_class), classes,
        f"gaussian-mixture(classes={classes},per_class={per_class},d={d},spread={spread},seed={seed})",
    )


def gen_two_moons(n: int, noise: float, seed: int) -> WeightedDataset:
    """Interleaved half-circles; the second is mirrored and centered at (1, -0.5)."""
    if n < 2:
        raise ContractError("need at least one point per moon")
    rng = np.random.default_rng(seed)
    n0 = n // 2
    n1 = n - n0
    t0 = np.linspace(0.0, np.pi, n0)
    t1 = np.linspace(0.0, np.pi, n1)
    x = np.concatenate(
        [
            np.stack([np.cos(t0), -np.sin(t0)], axis=1),
            np.stack([1.0 - np.cos(t1), np.sin(t1) - 0.5], axis=1),
        ]
    )
    x = x + noise * rng.standard_normal(x.shape)
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    return WeightedDataset(x, y, uniform_weights(n), 2, f"two-moons(n={n},noise={noise},seed={seed})")


def _read_exact(fh, count: int, offset: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise FormatError(
            f"truncated file: wanted {count} bytes of {what} at byte {offset}, got {len(buf)}"
        )
    return buf


def load_idx_pair(images_path, labels_path, normalize: bool = True) -> WeightedDataset:
    """Read an IDX image/label file pair into a flat-feature dataset.

    Pixels are scaled to [0, 1]; with ``normalize`` the per-channel mean and
    std over the whole set are removed afterwards.
    """
    with open(images_path, "rb") as fh:
        magic, = struct.unpack(">I", _read_exact(fh, 4, 0, "image magic"))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"bad image magic 0x{magic:08x} at byte 0")
        count, rows, cols = struct.unpack(">III", _read_exact(fh, 12, 4, "image dims"))
        pixels = np.frombuffer(
            _read_exact(fh, count * rows * cols, 16, "pixel data"), dtype=np.uint8
        )
    with open(labels_path, "rb") as fh:
        magic, = struct.unpack(">I", _read_exact(fh, 4, 0, "label magic"))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"bad label magic 0x{magic:08x} at byte 0")
        label_count, = struct.unpack(">I", _read_exact(fh, 4, 4, "label count"))
        if label_count != count:
            raise FormatError(
                f"label count {label_count} at byte 4 does not match image count {count}"
            )
        labels = np.frombuffer(_read_exact(fh, count, 8, "label data"), dtype=np.uint8)
    x = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    if normalize:
        std = float(x.std())
        x = (x - x.mean()) / max(std, 1e-8)
    classes = max(int(labels.max()) + 1, 2)
    return WeightedDataset(
        x, labels.astype(np.int64), uniform_weights(count), classes,
        f"idx(rows={rows},cols={cols})",
    )


def save_idx_pair(ds: WeightedDataset, images_path, labels_path, rows: int, cols: int) -> None:
    """Write features in [0, 1] as an IDX ubyte image/label file pair."""
    if rows * cols != ds.d:
        raise ContractError("rows*cols must equal the feature dimension")
    if ds.x.min() < 0.0 or ds.x.max() > 1.0:
        raise ContractError("features must lie in [0, 1] for byte export")
    pixels = np.round(ds.x * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, ds.n, rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, ds.n))
        fh.write(ds.y.astype(np.uint8).tobytes())


def flip_labels(ds: WeightedDataset, spec: NoiseSpec) -> tuple[WeightedDataset, np.ndarray]:
    """Reassign floor(flip_fraction*N) seeded-chosen labels; returns (ds, flipped idx)."""
    rng = np.random.default_rng(spec.seed)
    k = int(np.floor(spec.flip_fraction * ds.n))
    flipped = np.sort(rng.permutation(ds.n)[:k])
    y = ds.y.copy()
    for i in flipped:
        # uniform draw over the other classes
        offset = rng.integers(1, ds.class_count)
        y[i] = (y[i] + offset) % ds.class_count
    out = WeightedDataset(
        ds.x, y, ds.w, ds.class_count, ds.provenance + f"+flips({k},seed={spec.seed})"
    )
    return out, flipped


def init_synthetic(
    ds: WeightedDataset, ipc: int, mode: str, seed: int, eta0: float = 0.01
) -> SyntheticSet:
    """Seed the synthetic set: copy real rows, replicate class means, or noise."""
    if mode not in ("random-real", "class-mean", "noise"):
        raise ContractError(f"unknown synthetic init mode {mode!r}")
    if ipc < 1:
        raise ContractError("ipc must be at least 1")
    rng = np.random.default_rng(seed)
    blocks = []
    for c in range(ds.class_count):
        members = np.flatnonzero(ds.y == c)
        if mode == "random-real":
            if len(members) < ipc:
                raise ContractError(
                    f"class {c} has {len(members)} instances, need {ipc} for random-real init"
                )
            picked = rng.choice(members, size=ipc, replace=False)
            blocks.append(ds.x[picked])
        elif mode == "class-mean":
            if len(members) == 0:
                raise ContractError(f"class {c} is empty; class-mean init undefined")
            blocks.append(np.repeat(ds.x[members].mean(axis=0, keepdims=True), ipc, axis=0))
        else:
            scale = max(float(ds.x.std()), 1e-8)
            blocks.append(scale * rng.standard_normal((ipc, ds.d)))
    x = np.concatenate(blocks, axis=0)
    y = np.repeat(np.arange(ds.class_count), ipc)
    return SyntheticSet(x, y, eta0, ipc, ds.class_count)


def export_csv(ds: WeightedDataset, path) -> None:
    """Header row of feature columns plus label and weight; full float precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(ds.d)] + ["label", "weight"])
        for i in range(ds.n):
            writer.writerow(
                [f"{v:.17g}" for v in ds.x[i]] + [int(ds.y[i]), f"{ds.w[i]:.17g}"]
            )


def save_synthetic(s: SyntheticSet, json_path, bin_path) -> None:
    """JSON metadata beside a little-endian float32 feature block."""
    meta = {
        "ipc": s.ipc,
        "class_count": s.class_count,
        "eta": s.eta,
        "labels": s.y.tolist(),
        "rows": s.m,
        "cols": s.d,
        "dtype": "<f4",
    }
    with open(json_path, "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(bin_path, "wb") as fh:
        fh.write(s.x.astype("<f4").tobytes())


def load_synthetic(json_path, bin_path) -> SyntheticSet:
    with open(json_path) as fh:
        meta = json.load(fh)
    raw = np.fromfile(bin_path, dtype="<f4")
    if raw.size != meta["rows"] * meta["cols"]:
        raise FormatError(
            f"feature block holds {raw.size} values, metadata implies "
            f"{meta['rows'] * meta['cols']}"
        )
    x = raw.reshape(meta["rows"], meta["cols"]).astype(np.float64)
    return SyntheticSet(x, np.array(meta["labels"]), meta["eta"], meta["ipc"], meta["class_count"])
