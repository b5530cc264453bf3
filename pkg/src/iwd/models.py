"""Small classifiers over flat parameter vectors: linear, MLP, tiny conv net.

Forward passes are expressed with autodiff Tensors so losses are twice
differentiable. Parameters live in a single flat float64 vector; the layer
layout is derived from the architecture descriptor.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError

CONV_CHANNELS = 8
CONV_KERNEL = 3


@dataclass(frozen=True)
class ArchDescriptor:
    """Network shape: ``kind`` in {linear, mlp, tinyconv}.

    ``image_shape`` (channels, height, width) is required for tinyconv and
    must multiply out to ``input_dim``.
    """

    kind: str
    input_dim: int
    classes: int
    hidden: tuple[int, ...] = ()
    activation: str = "relu"
    image_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "mlp", "tinyconv"):
            raise ContractError(f"unknown architecture kind {self.kind!r}")
        if self.classes < 2:
            raise ContractError("need at least 2 classes")
        if self.input_dim <= 0:
            raise ContractError("input_dim must be positive")
        if self.activation != "relu":
            raise ContractError("only relu activation is supported")
        if any(h <= 0 for h in self.hidden):
            raise ContractError("hidden sizes must be positive")
        if self.kind == "mlp" and not self.hidden:
            raise ContractError("mlp needs at least one hidden layer")
        if self.kind == "tinyconv":
            if self.image_shape is None:
                raise ContractError("tinyconv needs image_shape=(c, h, w)")
            c, h, w = self.image_shape
            if c * h * w != self.input_dim:
                raise ContractError("image_shape does not match input_dim")
            if h < CONV_KERNEL or w < CONV_KERNEL:
                raise ContractError("image too small for a 3x3 kernel")
        object.__setattr__(self, "hidden", tuple(self.hidden))


@dataclass(frozen=True)
class InitDistribution:
    """Seeded parameter initialization: kaiming-uniform or normal(sigma)."""

    kind: str = "kaiming-uniform"
    sigma: float = 0.1

    def __post_init__(self):
        if self.kind not in ("kaiming-uniform", "normal"):
            raise ContractError(f"unknown init kind {self.kind!r}")
        if self.kind == "normal" and self.sigma < 0:
            raise ContractError("sigma must be non-negative")


@dataclass(frozen=True)
class SgdConfig:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr < 0:
            raise ContractError("lr must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be non-negative")


@dataclass(frozen=True)
class ModelState:
    arch: ArchDescriptor
    theta: np.ndarray
    seed: int = 0

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.shape != (param_count(self.arch),):
            raise ContractError(
                f"theta has dim {theta.shape}, arch implies {param_count(self.arch)}"
            )
        object.__setattr__(self, "theta", theta)


def layer_shapes(arch: ArchDescriptor) -> list[tuple[str, tuple[int, ...]]]:
    """(name, shape) pairs in flat-vector order; weights precede their bias."""
    if arch.kind == "linear":
        return [("w0", (arch.classes, arch.input_dim)), ("b0", (arch.classes,))]
    if arch.kind == "mlp":
        dims = [arch.input_dim, *arch.hidden, arch.classes]
        shapes = []
        for i in range(len(dims) - 1):
            shapes.append((f"w{i}", (dims[i + 1], dims[i])))
            shapes.append((f"b{i}", (dims[i + 1],)))
        return shapes
    c, _, _ = arch.image_shape
    return [
        ("conv_w", (CONV_CHANNELS, c, CONV_KERNEL, CONV_KERNEL)),
        ("conv_b", (CONV_CHANNELS,)),
        ("head_w", (arch.classes, CONV_CHANNELS)),
        ("head_b", (arch.classes,)),
    ]


def param_count(arch: ArchDescriptor) -> int:
    return sum(int(np.prod(s)) for _, s in layer_shapes(arch))


def layer_slices(arch: ArchDescriptor) -> list[tuple[str, slice, tuple[int, ...]]]:
    out = []
    offset = 0
    for name, shape in layer_shapes(arch):
        size = int(np.prod(shape))
        out.append((name, slice(offset, offset + size), shape))
        offset += size
    return out


def init_model(arch: ArchDescriptor, dist: InitDistribution, seed: int) -> ModelState:
    """Sample a parameter vector; bit-deterministic for fixed inputs."""
    rng = np.random.default_rng(seed)
    if dist.kind == "normal":
        theta = dist.sigma * rng.standard_normal(param_count(arch))
        return ModelState(arch, theta, seed)
    parts = []
    for name, shape in layer_shapes(arch):
        if name.endswith("_b") or name.startswith("b"):
            # bias bound follows the matching weight's fan-in
            fan_in = _bias_fan_in(arch, name)
            bound = 1.0 / np.sqrt(fan_in)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
        parts.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
    return ModelState(arch, np.concatenate(parts), seed)


def _bias_fan_in(arch: ArchDescriptor, bias_name: str) -> int:
    shapes = dict(layer_shapes(arch))
    if bias_name == "conv_b":
        return int(np.prod(shapes["conv_w"][1:]))
    if bias_name == "head_b":
        return int(np.prod(shapes["head_w"][1:]))
    weight = "w" + bias_name[1:]
    return int(np.prod(shapes[weight][1:]))


def _unpack(arch: ArchDescriptor, theta: Tensor) -> dict[str, Tensor]:
    params = {}
    for name, slc, shape in layer_slices(arch):
        block = ad.slice1d(theta, slc.start, slc.stop)
        params[name] = ad.reshape(block, shape) if len(shape) > 1 else block
    return params


_conv_index_cache: dict[tuple[int, int, int], np.ndarray] = {}


def _conv_indices(image_shape: tuple[int, int, int]) -> np.ndarray:
    """Flat gather indices turning (c*h*w,) into valid-conv patches.

    Shape (out_h*out_w, c*k*k): row l lists the input positions under the
    kernel at output location l.
    """
    if image_shape in _conv_index_cache:
        return _conv_index_cache[image_shape]
    c, h, w = image_shape
    k = CONV_KERNEL
    out_h, out_w = h - k + 1, w - k + 1
    idx = np.empty((out_h * out_w, c * k * k), dtype=np.intp)
    l = 0
    for i in range(out_h):
        for j in range(out_w):
            p = 0
            for ch in range(c):
                for di in range(k):
                    for dj in range(k):
                        idx[l, p] = ch * h * w + (i + di) * w + (j + dj)
                        p += 1
            l += 1
    _conv_index_cache[image_shape] = idx
    return idx


def _forward_tinyconv(arch: ArchDescriptor, params: dict[str, Tensor], x: Tensor):
    c, h, w = arch.image_shape
    k = CONV_KERNEL
    out_h, out_w = h - k + 1, w - k + 1
    n_loc = out_h * out_w
    batch = x.shape[0]
    idx = _conv_indices(arch.image_shape)
    flat = ad.reshape(x, (batch * c * h * w,))
    offsets = (np.arange(batch) * (c * h * w))[:, None, None]
    patches = ad.take1d(flat, offsets + idx[None, :, :])  # (batch, n_loc, c*k*k)
    patches2 = ad.reshape(patches, (batch * n_loc, c * k * k))
    conv_w = ad.reshape(params["conv_w"], (CONV_CHANNELS, c * k * k))
    pre = ad.add(ad.matmul(patches2, ad.transpose(conv_w)), params["conv_b"])
    act = ad.relu(pre)
    pooled = ad.mul(
        ad.sum_(ad.reshape(act, (batch, n_loc, CONV_CHANNELS)), axis=1),
        ad.constant(1.0 / n_loc),
    )
    return pooled


def penultimate(arch: ArchDescriptor, theta: Tensor, x: Tensor) -> Tensor:
    """Features feeding the final linear layer (the inputs, for linear)."""
    params = _unpack(arch, theta)
    if arch.kind == "linear":
        return x
    if arch.kind == "mlp":
        h = x
        for i in range(len(arch.hidden)):
            h = ad.relu(ad.add(ad.matmul(h, ad.transpose(params[f"w{i}"])), params[f"b{i}"]))
        return h
    return _forward_tinyconv(arch, params, x)


def logits(arch: ArchDescriptor, theta: Tensor, x: Tensor) -> Tensor:
    params = _unpack(arch, theta)
    feats = penultimate(arch, theta, x)
    if arch.kind == "tinyconv":
        return ad.add(ad.matmul(feats, ad.transpose(params["head_w"])), params["head_b"])
    last = len(arch.hidden) if arch.kind == "mlp" else 0
    return ad.add(ad.matmul(feats, ad.transpose(params[f"w{last}"])), params[f"b{last}"])


def per_instance_ce(arch: ArchDescriptor, theta: Tensor, x: Tensor, y: np.ndarray) -> Tensor:
    """Cross-entropy per instance, shape (n, 1)."""
    z = logits(arch, theta, x)
    shift = ad.constant(np.max(z.data, axis=1, keepdims=True))
    lse = ad.add(ad.log(ad.sum_(ad.exp(ad.add(z, ad.neg(shift))), axis=1, keepdims=True)), shift)
    picked = ad.take_along1(z, np.asarray(y, dtype=np.intp)[:, None])
    return ad.add(lse, ad.neg(picked))


def weighted_loss_tensor(
    arch: ArchDescriptor,
    theta: Tensor,
    x: Tensor,
    y: np.ndarray,
    w,
    l2: float = 0.0,
) -> Tensor:
    """sum_i w_i * ce_i (+ 0.5 * l2 * ||theta||^2), as a graph node."""
    n = x.shape[0]
    y = np.asarray(y)
    if not isinstance(w, Tensor):
        w = ad.constant(np.asarray(w, dtype=np.float64))
    if len(y) != n or w.shape != (n,):
        raise ContractError("batch, labels and weights must have equal length")
    ce = per_instance_ce(arch, theta, x, y)
    loss = ad.sum_(ad.mul(ad.reshape(w, (n, 1)), ce))
    if l2:
        loss = ad.add(loss, ad.mul(ad.constant(0.5 * l2), ad.dot(theta, theta)))
    return loss


def make_loss(arch: ArchDescriptor, x: np.ndarray, y: np.ndarray, w: np.ndarray, l2: float = 0.0):
    """A ScalarFunction in theta for a fixed weighted batch."""
    if np.any(np.asarray(w) < 0):
        raise ContractError("instance weights must be non-negative")
    xc = ad.constant(np.asarray(x, dtype=np.float64))
    return lambda theta: weighted_loss_tensor(arch, theta, xc, y, w, l2=l2)


def weighted_loss(model: ModelState, x: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    return ad.value(make_loss(model.arch, x, y, w), model.theta)


def mean_loss(model: ModelState, x: np.ndarray, y: np.ndarray) -> float:
    n = len(np.asarray(y))
    return weighted_loss(model, x, y, np.full(n, 1.0 / n))


def sgd_step(
    theta: np.ndarray, g: np.ndarray, cfg: SgdConfig, velocity: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """v' = momentum*v + g + weight_decay*theta;  theta' = theta - lr*v'."""
    if theta.shape != g.shape or theta.shape != velocity.shape:
        raise ContractError("sgd_step operands must share one dimension")
    v = cfg.momentum * velocity + g + cfg.weight_decay * theta
    return theta - cfg.lr * v, v


def train(
    model: ModelState,
    x: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    cfg: SgdConfig,
    steps: int,
    l2: float = 0.0,
) -> ModelState:
    """Full-batch SGD for a fixed number of steps."""
    loss = make_loss(model.arch, x, y, w, l2=l2)
    theta = model.theta
    velocity = np.zeros_like(theta)
    for _ in range(steps):
        g = ad.grad(loss, theta)
        theta, velocity = sgd_step(theta, g, cfg, velocity)
    return ModelState(model.arch, theta, model.seed)


def predict(model: ModelState, x: np.ndarray) -> np.ndarray:
    z = logits(model.arch, ad.constant(model.theta), ad.constant(np.asarray(x, dtype=np.float64)))
    return np.argmax(z.data, axis=1)


def accuracy(model: ModelState, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict(model, x) == np.asarray(y)))


def save_model(model: ModelState, path) -> None:
    """JSON header line followed by a little-endian float64 parameter block."""
    header = {
        "arch": {
            "kind": model.arch.kind,
            "input_dim": model.arch.input_dim,
            "classes": model.arch.classes,
            "hidden": list(model.arch.hidden),
            "activation": model.arch.activation,
            "image_shape": list(model.arch.image_shape) if model.arch.image_shape else None,
        },
        "seed": model.seed,
        "dim": int(model.theta.size),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(model.theta.astype("<f8").tobytes())


def load_model(path) -> ModelState:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        raw = fh.read()
    arch_d = header["arch"]
    arch = ArchDescriptor(
        kind=arch_d["kind"],
        input_dim=arch_d["input_dim"],
        classes=arch_d["classes"],
        hidden=tuple(arch_d["hidden"]),
        activation=arch_d["activation"],
        image_shape=tuple(arch_d["image_shape"]) if arch_d["image_shape"] else None,
    )
    theta = np.frombuffer(raw, dtype="<f8", count=header["dim"]).astype(np.float64)
    return ModelState(arch, theta, header["seed"])
