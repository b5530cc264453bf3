"""The distillation objective: matchable statistics compared along an inner
training trajectory.

A statistic is extracted from the synthetic set and from the weighted real
set at each visited parameter state; a discrepancy between the two is summed
over the trajectory and averaged over seeded initial draws. Statistics are
built as autodiff graphs so the same code yields values, gradients in the
synthetic features, and the weight-derivatives the influence machinery needs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import models as md
from .autodiff import Tensor
from .data import SyntheticSet, WeightedDataset
from .errors import ContractError
from .parallel import ordered_thread_map

STAT_KINDS = ("gradient", "feature-mean", "prediction-loss")
DISC_KINDS = ("layer-cosine", "squared-l2", "mmd-rbf")


@dataclass(frozen=True)
class StatisticKind:
    """What to match. ``per_class=None`` resolves to class-wise for gradients
    (following gradient-matching practice) and global otherwise."""

    kind: str
    layerwise: bool = True
    per_class: bool | None = None

    def __post_init__(self):
        if self.kind not in STAT_KINDS:
            raise ContractError(f"unknown statistic kind {self.kind!r}")

    @property
    def classwise(self) -> bool:
        if self.per_class is None:
            return self.kind == "gradient"
        return self.per_class


@dataclass(frozen=True)
class DiscrepancyKind:
    kind: str
    bandwidth: float | None = None  # mmd-rbf only; None = median heuristic

    def __post_init__(self):
        if self.kind not in DISC_KINDS:
            raise ContractError(f"unknown discrepancy kind {self.kind!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ContractError("mmd bandwidth must be positive")


@dataclass(frozen=True)
class TrajectoryConfig:
    """Inner-training recipe; ``s_inner`` picks the training set.

    For ``s_inner="S"`` the step size is the synthetic set's learnable eta
    and the trajectory is treated as frozen context when differentiating in
    the synthetic features (alternating scheme). ``unroll`` opts into full
    backpropagation through the inner steps instead (small step counts only).
    """

    arch: md.ArchDescriptor
    s_inner: str = "S"
    steps: int = 1
    inner_sgd: md.SgdConfig = field(default_factory=lambda: md.SgdConfig(lr=0.05))
    init: md.InitDistribution = field(default_factory=md.InitDistribution)
    init_samples: int = 1
    unroll: bool = False

    def __post_init__(self):
        if self.s_inner not in ("S", "D"):
            raise ContractError("s_inner must be 'S' or 'D'")
        if self.steps < 0:
            raise ContractError("steps must be non-negative")
        if self.init_samples < 1:
            raise ContractError("need at least one initial draw")
        if self.unroll and self.steps > 5:
            raise ContractError("unrolled differentiation is limited to steps <= 5")
        if self.unroll and self.s_inner != "S":
            raise ContractError("unrolling applies to the s_inner='S' trajectory")


@dataclass
class Statistic:
    """Blocks of matched values at one trajectory state.

    ``points``/``point_weights`` carry the underlying feature rows when the
    statistic supports set-level discrepancies (mmd).
    """

    blocks: list
    step_index: int
    points: np.ndarray | None = None
    point_weights: np.ndarray | None = None


@dataclass
class DiscrepancyResult:
    value: float
    grad_first: list
    grad_second: list
    zero_norm_blocks: list


def _check_tensor(x, name: str) -> Tensor:
    if not isinstance(x, Tensor):
        raise ContractError(f"{name} must be a Tensor")
    return x


def stat_graph(
    kind: StatisticKind,
    arch: md.ArchDescriptor,
    theta: Tensor,
    x: Tensor,
    y: np.ndarray,
    w: Tensor,
):
    """Statistic blocks as graph nodes; returns (blocks, feature_points).

    ``w`` enters linearly (no renormalization here), so derivatives in ``w``
    recover per-instance statistics.
    """
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    if y.shape != (n,) or w.shape != (n,):
        raise ContractError("batch, labels and weights must have equal length")
    wcol = ad.reshape(w, (n, 1))

    if kind.kind == "gradient":
        ce = md.per_instance_ce(arch, theta, x, y)
        weighted = ad.mul(wcol, ce)
        if kind.classwise:
            scalars = []
            for c in range(arch.classes):
                members = np.flatnonzero(y == c)
                if members.size:
                    scalars.append(ad.sum_(ad.take_rows(weighted, members)))
                else:
                    scalars.append(None)
        else:
            scalars = [ad.sum_(weighted)]
        blocks = []
        dim = md.param_count(arch)
        for s in scalars:
            if s is None:
                g = ad.constant(np.zeros(dim))
            else:
                (g,) = ad.backward(s, [theta])
            if kind.layerwise:
                blocks.extend(
                    ad.slice1d(g, slc.start, slc.stop) for _, slc, _ in md.layer_slices(arch)
                )
            else:
                blocks.append(g)
        return blocks, None

    feats = md.penultimate(arch, theta, x)
    if kind.kind == "feature-mean":
        if kind.classwise:
            blocks = []
            p = feats.shape[1]
            for c in range(arch.classes):
                members = np.flatnonzero(y == c)
                if members.size:
                    sub = ad.take_rows(feats, members)
                    wsub = ad.take_rows(wcol, members)
                    blocks.append(ad.reshape(ad.matmul(ad.transpose(sub), wsub), (p,)))
                else:
                    blocks.append(ad.constant(np.zeros(p)))
        else:
            blocks = [ad.reshape(ad.matmul(ad.transpose(feats), wcol), (feats.shape[1],))]
        return blocks, feats

    # prediction-loss: a single weighted-loss scalar as a 1-vector
    ce = md.per_instance_ce(arch, theta, x, y)
    return [ad.reshape(ad.sum_(ad.mul(wcol, ce)), (1,))], None


def _as_statistic(kind, arch, state, x, y, w, step_index: int) -> Statistic:
    # theta enters as a differentiation root: the gradient statistic is
    # literally a backward pass w.r.t. it
    blocks, points = stat_graph(kind, arch, ad.leaf(state.theta), ad.constant(x), y, ad.constant(w))
    return Statistic(
        blocks=[b.data.copy() for b in blocks],
        step_index=step_index,
        points=None if points is None else points.data.copy(),
        point_weights=None if points is None else np.asarray(w, dtype=np.float64).copy(),
    )


def stat_real(
    kind: StatisticKind,
    model: md.ModelState,
    ds: WeightedDataset,
    batch: np.ndarray | None = None,
    normalize: bool = True,
    step_index: int = 0,
) -> Statistic:
    """Weighted real-data statistic over ``batch`` (all instances by default).

    ``normalize`` rescales the batch weights to sum to one; the perturbation
    analysis disables it to keep the statistic affine in the weights.
    """
    if batch is None:
        batch = np.arange(ds.n)
    batch = np.asarray(batch, dtype=np.intp)
    if batch.size == 0:
        raise ContractError("statistic over an empty batch is undefined")
    w = ds.w[batch]
    if normalize:
        total = w.sum()
        if total <= 0:
            raise ContractError("batch weights sum to zero; cannot renormalize")
        w = w / total
    return _as_statistic(kind, model.arch, model, ds.x[batch], ds.y[batch], w, step_index)


def stat_syn(kind: StatisticKind, model: md.ModelState, s: SyntheticSet, step_index: int = 0) -> Statistic:
    """Synthetic-side statistic with uniform 1/M weights."""
    w = np.full(s.m, 1.0 / s.m)
    return _as_statistic(kind, model.arch, model, s.x, s.y, w, step_index)


def _median_bandwidth(points: np.ndarray) -> float:
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=2)
    tri = d2[np.triu_indices(len(points), k=1)]
    med = float(np.sqrt(np.median(tri))) if tri.size else 1.0
    return med if med > 0 else 1.0


def _rbf_quad(pa: Tensor, wa: Tensor, pb: Tensor, wb: Tensor, gamma: float) -> Tensor:
    """w_a^T K w_b for the gaussian kernel exp(-gamma * ||x - y||^2)."""
    na, nb = pa.shape[0], pb.shape[0]
    sqa = ad.sum_(ad.mul(pa, pa), axis=1, keepdims=True)
    sqb = ad.sum_(ad.mul(pb, pb), axis=1, keepdims=True)
    cross = ad.matmul(pa, ad.transpose(pb))
    d2 = ad.add(ad.add(sqa, ad.transpose(sqb)), ad.mul(ad.constant(-2.0), cross))
    k = ad.exp(ad.mul(ad.constant(-gamma), d2))
    return ad.reshape(
        ad.matmul(ad.reshape(wa, (1, na)), ad.matmul(k, ad.reshape(wb, (nb, 1)))), ()
    )


def disc_graph(
    kind: DiscrepancyKind,
    blocks_a: list,
    blocks_b: list,
    points_a: Tensor | None = None,
    weights_a: Tensor | None = None,
    points_b: Tensor | None = None,
    weights_b: Tensor | None = None,
):
    """Discrepancy as a graph node; returns (scalar, zero_norm_block_ids)."""
    flags: list[int] = []
    if kind.kind == "mmd-rbf":
        if points_a is None or points_b is None:
            raise ContractError("mmd-rbf needs feature point sets (feature-mean statistic)")
        if kind.bandwidth is not None:
            sigma = kind.bandwidth
        else:
            sigma = _median_bandwidth(np.concatenate([points_a.data, points_b.data]))
        gamma = 1.0 / (2.0 * sigma * sigma)
        aa = _rbf_quad(points_a, weights_a, points_a, weights_a, gamma)
        bb = _rbf_quad(points_b, weights_b, points_b, weights_b, gamma)
        ab = _rbf_quad(points_a, weights_a, points_b, weights_b, gamma)
        return ad.add(ad.add(aa, bb), ad.mul(ad.constant(-2.0), ab)), flags

    if len(blocks_a) != len(blocks_b):
        raise ContractError("statistic block structure differs between arguments")
    terms = []
    for i, (a, b) in enumerate(zip(blocks_a, blocks_b)):
        if a.shape != b.shape:
            raise ContractError(f"block {i} shapes differ: {a.shape} vs {b.shape}")
        if kind.kind == "squared-l2":
            diff = ad.add(a, ad.neg(b))
            terms.append(ad.dot(diff, diff))
        else:  # layer-cosine
            na2 = float(a.data @ a.data)
            nb2 = float(b.data @ b.data)
            if na2 == 0.0 or nb2 == 0.0:
                flags.append(i)
                continue
            denom = ad.sqrt(ad.mul(ad.dot(a, a), ad.dot(b, b)))
            cos = ad.div(ad.dot(a, b), denom)
            terms.append(ad.add(ad.constant(1.0), ad.neg(cos)))
    if not terms:
        return ad.constant(0.0), flags
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total, flags


def discrepancy(kind: DiscrepancyKind, a: Statistic, b: Statistic) -> DiscrepancyResult:
    """Evaluate the discrepancy and its gradients in both arguments.

    For mmd-rbf the gradients are taken in the two feature point sets; for
    the block kinds, in the block vectors.
    """
    if kind.kind == "mmd-rbf":
        if a.points is None or b.points is None:
            raise ContractError("mmd-rbf needs feature point sets (feature-mean statistic)")
        pa, pb = ad.leaf(a.points), ad.leaf(b.points)
        out, flags = disc_graph(
            kind, [], [], pa, ad.constant(a.point_weights), pb, ad.constant(b.point_weights)
        )
        ga, gb = ad.backward(out, [pa, pb])
        return DiscrepancyResult(out.item(), [ga.data.copy()], [gb.data.copy()], flags)
    la = [ad.leaf(x) for x in a.blocks]
    lb = [ad.leaf(x) for x in b.blocks]
    out, flags = disc_graph(kind, la, lb)
    grads = ad.backward(out, la + lb)
    k = len(la)
    return DiscrepancyResult(
        out.item(),
        [g.data.copy() for g in grads[:k]],
        [g.data.copy() for g in grads[k:]],
        flags,
    )


def run_inner_trajectory(
    cfg: TrajectoryConfig, s: SyntheticSet, ds: WeightedDataset, seed: int
) -> list:
    """Seeded init + full-batch SGD states [theta_0 .. theta_steps]."""
    state = md.init_model(cfg.arch, cfg.init, seed)
    states = [state]
    if cfg.steps == 0:
        return states
    if cfg.s_inner == "S":
        x, y, w = s.x, s.y, np.full(s.m, 1.0 / s.m)
        sgd = md.SgdConfig(
            lr=s.eta, momentum=cfg.inner_sgd.momentum, weight_decay=cfg.inner_sgd.weight_decay
        )
    else:
        x, y, w = ds.x, ds.y, ds.w
        sgd = cfg.inner_sgd
    loss = md.make_loss(cfg.arch, x, y, w)
    theta = state.theta
    velocity = np.zeros_like(theta)
    for _ in range(cfg.steps):
        g = ad.grad(loss, theta)
        theta, velocity = md.sgd_step(theta, g, sgd, velocity)
        states.append(md.ModelState(cfg.arch, theta, state.seed))
    return states


def matched_states(trajectory: list) -> list:
    """(step index, state) pairs entering the objective sum.

    With at least one inner step these are the post-update states 1..steps;
    a zero-step trajectory degenerates to the single initial state.
    """
    if len(trajectory) == 1:
        return [(0, trajectory[0])]
    return list(enumerate(trajectory))[1:]


def draw_seeds(seed: int, count: int) -> list[int]:
    return [int(v) for v in np.random.SeedSequence(seed).generate_state(count, dtype=np.uint64)]


def objective(
    s: SyntheticSet,
    ds: WeightedDataset,
    cfg: TrajectoryConfig,
    stat: StatisticKind,
    disc: DiscrepancyKind,
    seed: int,
    normalize: bool = True,
    threads: int = 1,
) -> float:
    """Monte-Carlo distillation objective: mean over initial draws of the
    per-state discrepancy sum."""

    def one_draw(draw_seed: int) -> float:
        traj = run_inner_trajectory(cfg, s, ds, draw_seed)
        total = 0.0
        for t, state in matched_states(traj):
            a = stat_syn(stat, state, s, step_index=t)
            b = stat_real(stat, state, ds, normalize=normalize, step_index=t)
            out, _ = _disc_value(disc, a, b)
            total += out
        return total

    vals = ordered_thread_map(one_draw, draw_seeds(seed, cfg.init_samples), threads)
    return float(sum(vals) / cfg.init_samples)


def _disc_value(kind: DiscrepancyKind, a: Statistic, b: Statistic):
    if kind.kind == "mmd-rbf":
        out, flags = disc_graph(
            kind,
            [],
            [],
            ad.constant(a.points),
            ad.constant(a.point_weights),
            ad.constant(b.points),
            ad.constant(b.point_weights),
        )
    else:
        out, flags = disc_graph(
            kind, [ad.constant(x) for x in a.blocks], [ad.constant(x) for x in b.blocks]
        )
    return out.item(), flags


def _syn_stat_leaf(stat, cfg, theta: np.ndarray, xs: Tensor, s: SyntheticSet):
    w = ad.constant(np.full(s.m, 1.0 / s.m))
    return stat_graph(stat, cfg.arch, ad.leaf(theta), xs, s.y, w)


def objective_with_grad(
    s: SyntheticSet,
    ds: WeightedDataset,
    cfg: TrajectoryConfig,
    stat: StatisticKind,
    disc: DiscrepancyKind,
    seed: int,
    threads: int = 1,
):
    """Objective value plus gradients in the synthetic features and eta.

    Default mode holds the trajectory frozen (gradients flow through the
    synthetic statistic only), so the eta gradient is zero; ``cfg.unroll``
    backpropagates through the inner updates and recovers both.
    """
    if cfg.unroll:
        return _objective_grad_unrolled(s, ds, cfg, stat, disc, seed, threads)

    def one_draw(draw_seed: int):
        traj = run_inner_trajectory(cfg, s, ds, draw_seed)
        total = 0.0
        gx = np.zeros_like(s.x)
        for t, state in matched_states(traj):
            xs = ad.leaf(s.x)
            blocks_a, points_a = _syn_stat_leaf(stat, cfg, state.theta, xs, s)
            b = stat_real(stat, state, ds, step_index=t)
            if disc.kind == "mmd-rbf":
                out, _ = disc_graph(
                    disc,
                    [],
                    [],
                    points_a,
                    ad.constant(np.full(s.m, 1.0 / s.m)),
                    ad.constant(b.points),
                    ad.constant(b.point_weights),
                )
            else:
                out, _ = disc_graph(disc, blocks_a, [ad.constant(x) for x in b.blocks])
            (g,) = ad.backward(out, [xs])
            total += out.item()
            gx += g.data
        return total, gx

    results = ordered_thread_map(one_draw, draw_seeds(seed, cfg.init_samples), threads)
    value = sum(r[0] for r in results) / cfg.init_samples
    grad_x = sum(r[1] for r in results) / cfg.init_samples
    return float(value), grad_x, 0.0


def _objective_grad_unrolled(s, ds, cfg, stat, disc, seed, threads):
    w_syn = np.full(s.m, 1.0 / s.m)

    def one_draw(draw_seed: int):
        init = md.init_model(cfg.arch, cfg.init, draw_seed)
        xs = ad.leaf(s.x)
        eta = ad.leaf(np.array([s.eta]))
        eta_s = ad.reshape(eta, ())
        # a differentiation root so per-step gradients come back as graphs
        theta = ad.leaf(init.theta)
        velocity = None
        states = [theta]
        for _ in range(cfg.steps):
            loss = md.weighted_loss_tensor(cfg.arch, theta, xs, s.y, ad.constant(w_syn))
            (g,) = ad.backward(loss, [theta])
            v = g
            if cfg.inner_sgd.weight_decay:
                v = ad.add(v, ad.mul(ad.constant(cfg.inner_sgd.weight_decay), theta))
            if velocity is not None and cfg.inner_sgd.momentum:
                v = ad.add(v, ad.mul(ad.constant(cfg.inner_sgd.momentum), velocity))
            velocity = v
            theta = ad.add(theta, ad.neg(ad.mul(eta_s, v)))
            states.append(theta)
        matched = [(0, states[0])] if cfg.steps == 0 else list(enumerate(states))[1:]
        total = None
        for t, th in matched:
            blocks_a, points_a = stat_graph(stat, cfg.arch, th, xs, s.y, ad.constant(w_syn))
            wb = ds.w / ds.w.sum()
            blocks_b, points_b = stat_graph(
                stat, cfg.arch, th, ad.constant(ds.x), ds.y, ad.constant(wb)
            )
            if disc.kind == "mmd-rbf":
                out, _ = disc_graph(
                    disc, [], [], points_a, ad.constant(w_syn), points_b, ad.constant(wb)
                )
            else:
                out, _ = disc_graph(disc, blocks_a, blocks_b)
            total = out if total is None else ad.add(total, out)
        gx, ge = ad.backward(total, [xs, eta])
        return total.item(), gx.data.copy(), float(ge.data[0])

    results = ordered_thread_map(one_draw, draw_seeds(seed, cfg.init_samples), threads)
    value = sum(r[0] for r in results) / cfg.init_samples
    grad_x = sum(r[1] for r in results) / cfg.init_samples
    grad_eta = sum(r[2] for r in results) / cfg.init_samples
    return float(value), grad_x, float(grad_eta)
