"""Influence estimation: classical inverse-Hessian scores, exact
leave-one-out retraining, and the explicit/implicit decomposition of the
matching objective's sensitivity to instance weights.

Sign convention, used everywhere downstream: positive score means
upweighting the instance increases the metric (for the matching objective,
makes the fit worse). Weighting negates scores before softmax.

All shared precomputation (trajectories, discrepancy gradients, inverse-HVP
factors) is deterministic, so batch scoring and the per-instance operations
produce bit-identical numbers.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import matching as mt
from . import models as md
from .data import SyntheticSet, WeightedDataset, uniform_weights
from .errors import ContractError, SolverError
from .matching import DiscrepancyKind, StatisticKind, TrajectoryConfig
from .parallel import ordered_thread_map

DENSE_DIM_LIMIT = 2000

SCORE_MODES = ("classical", "distill-explicit", "distill-full")


@dataclass(frozen=True)
class LissaConfig:
    scale: float = 10.0
    depth: int = 100
    repeats: int = 4


@dataclass(frozen=True)
class HvpSolverConfig:
    method: str = "cg"
    damping: float = 0.01
    tol: float = 1e-8
    max_iter: int = 200
    lissa: LissaConfig = field(default_factory=LissaConfig)

    def __post_init__(self):
        if self.method not in ("cg", "dense", "lissa"):
            raise ContractError(f"unknown solver method {self.method!r}")
        if self.damping < 0:
            raise ContractError("damping must be non-negative")
        if self.tol <= 0 or self.max_iter <= 0:
            raise ContractError("tol and max_iter must be positive")


@dataclass(frozen=True)
class SolverDiag:
    residual: float
    iterations: int
    converged: bool
    method: str


@dataclass
class InfluenceRecord:
    """Score for one instance, split into the direct (statistic) term and
    the parameter-response term, with a per-matched-state breakdown.

    ``endpoint_approx`` marks scores whose parameter response came from an
    inverse-Hessian solve at the trajectory endpoint instead of an exact
    single-step derivative.
    """

    index: int
    total: float
    explicit_term: float
    implicit_term: float
    per_step: list
    solver_diag: SolverDiag | None = None
    endpoint_approx: bool = False


@dataclass(frozen=True)
class MetricSpec:
    """What M measures: mean loss on a held-out set, or the single-state
    matching discrepancy against a synthetic set."""

    kind: str
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    syn: SyntheticSet | None = None
    stat: StatisticKind | None = None
    disc: DiscrepancyKind | None = None

    def __post_init__(self):
        if self.kind not in ("test-loss", "distill-objective"):
            raise ContractError(f"unknown metric kind {self.kind!r}")
        if self.kind == "test-loss" and (self.x is None or self.y is None):
            raise ContractError("test-loss metric needs x and y")
        if self.kind == "distill-objective" and (
            self.syn is None or self.stat is None or self.disc is None
        ):
            raise ContractError("distill-objective metric needs syn, stat and disc")


@dataclass(frozen=True)
class TrainerConfig:
    arch: md.ArchDescriptor
    sgd: md.SgdConfig
    steps: int
    init: md.InitDistribution = field(default_factory=md.InitDistribution)
    seed: int = 0
    l2: float = 0.0

    def __post_init__(self):
        if self.steps < 0:
            raise ContractError("steps must be non-negative")
        if self.l2 < 0:
            raise ContractError("l2 must be non-negative")


def _uniform(ds: WeightedDataset) -> WeightedDataset:
    return WeightedDataset(ds.x, ds.y, uniform_weights(ds.n), ds.class_count, ds.provenance)


def metric_value(
    metric: MetricSpec, arch: md.ArchDescriptor, ds: WeightedDataset, theta: np.ndarray
) -> float:
    state = md.ModelState(arch, theta)
    if metric.kind == "test-loss":
        return md.mean_loss(state, metric.x, metric.y)
    a = mt.stat_syn(metric.stat, state, metric.syn)
    b = mt.stat_real(metric.stat, state, ds)
    return mt.discrepancy(metric.disc, a, b).value


def metric_grad(
    metric: MetricSpec, arch: md.ArchDescriptor, ds: WeightedDataset, theta: np.ndarray
) -> np.ndarray:
    if metric.kind == "test-loss":
        n = len(metric.y)
        f = md.make_loss(arch, metric.x, metric.y, np.full(n, 1.0 / n))
        return ad.grad(f, theta)
    t = ad.leaf(theta)
    w_syn = uniform_weights(metric.syn.m)
    wb = ds.w / ds.w.sum()
    blocks_a, pts_a = mt.stat_graph(
        metric.stat, arch, t, ad.constant(metric.syn.x), metric.syn.y, ad.constant(w_syn)
    )
    blocks_b, pts_b = mt.stat_graph(metric.stat, arch, t, ad.constant(ds.x), ds.y, ad.constant(wb))
    if metric.disc.kind == "mmd-rbf":
        out, _ = mt.disc_graph(
            metric.disc, [], [], pts_a, ad.constant(w_syn), pts_b, ad.constant(wb)
        )
    else:
        out, _ = mt.disc_graph(metric.disc, blocks_a, blocks_b)
    (g,) = ad.backward(out, [t])
    return g.data.copy()


def train_model(cfg: TrainerConfig, ds: WeightedDataset) -> md.ModelState:
    state = md.init_model(cfg.arch, cfg.init, cfg.seed)
    return md.train(state, ds.x, ds.y, ds.w, cfg.sgd, cfg.steps, l2=cfg.l2)


def loo_effect(
    cfg: TrainerConfig,
    ds: WeightedDataset,
    j: int,
    metric: MetricSpec,
    base: md.ModelState | None = None,
) -> float:
    """Metric shift from dropping instance j and retraining: both runs share
    the init seed and step budget; the reduced set gets uniform 1/(N-1)
    weights."""
    if ds.n < 2:
        raise ContractError("leave-one-out needs at least two instances")
    if not 0 <= j < ds.n:
        raise ContractError(f"instance index {j} out of range")
    if base is None:
        base = train_model(cfg, _uniform(ds))
    keep = np.delete(np.arange(ds.n), j)
    reduced = WeightedDataset(
        ds.x[keep], ds.y[keep], uniform_weights(ds.n - 1), ds.class_count, ds.provenance
    )
    retrained = train_model(cfg, reduced)
    return metric_value(metric, cfg.arch, ds, retrained.theta) - metric_value(
        metric, cfg.arch, ds, base.theta
    )


def loo_all(
    cfg: TrainerConfig, ds: WeightedDataset, metric: MetricSpec, threads: int = 1
) -> np.ndarray:
    """Leave-one-out effects for every instance, sharing one base run."""
    base = train_model(cfg, _uniform(ds))
    return np.array(
        ordered_thread_map(
            lambda j: loo_effect(cfg, ds, j, metric, base=base), range(ds.n), threads
        )
    )


def solve_inverse_hvp(hvp_fn, g: np.ndarray, cfg: HvpSolverConfig) -> tuple[np.ndarray, SolverDiag]:
    """x with (H + damping*I) x = g, where hvp_fn computes H @ v.

    A zero right-hand side short-circuits to the exact zero solution.
    """
    g = np.asarray(g, dtype=np.float64)
    lam = cfg.damping

    def apply(v):
        return hvp_fn(v) + lam * v

    gnorm = float(np.linalg.norm(g))
    if gnorm == 0.0:
        return np.zeros_like(g), SolverDiag(0.0, 0, True, cfg.method)

    if cfg.method == "dense":
        dim = g.size
        if dim > DENSE_DIM_LIMIT:
            raise ContractError(f"dense solve limited to dim <= {DENSE_DIM_LIMIT}, got {dim}")
        eye = np.eye(dim)
        h = np.column_stack([apply(eye[:, i]) for i in range(dim)])
        x = np.linalg.solve(h, g)
        res = float(np.linalg.norm(apply(x) - g))
        return x, SolverDiag(res, dim, True, "dense")

    if cfg.method == "lissa":
        # truncated Neumann series on the rescaled operator; deterministic
        # because the HVP is full-batch
        scale = cfg.lissa.scale
        acc = np.zeros_like(g)
        for _ in range(cfg.lissa.repeats):
            x = g.copy()
            for _ in range(cfg.lissa.depth):
                x = g + x - apply(x) / scale
            acc += x / scale
        x = acc / cfg.lissa.repeats
        res = float(np.linalg.norm(apply(x) - g))
        return x, SolverDiag(
            res, cfg.lissa.depth * cfg.lissa.repeats, res <= cfg.tol * gnorm, "lissa"
        )

    x = np.zeros_like(g)
    r = g.copy()
    p = r.copy()
    rs = float(r @ r)
    for k in range(cfg.max_iter):
        if np.sqrt(rs) <= cfg.tol * gnorm:
            return x, SolverDiag(float(np.sqrt(rs)), k, True, "cg")
        ap = apply(p)
        curv = float(p @ ap)
        if curv <= 0.0:
            raise SolverError(f"negative curvature encountered at iteration {k}")
        alpha = rs / curv
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, SolverDiag(
        float(np.sqrt(rs)), cfg.max_iter, bool(np.sqrt(rs) <= cfg.tol * gnorm), "cg"
    )


def _training_hvp_fn(arch, ds: WeightedDataset, theta: np.ndarray, l2: float = 0.0):
    f = md.make_loss(arch, ds.x, ds.y, ds.w, l2=l2)
    return lambda v: ad.hvp(f, theta, v)


def grad_per_instance(arch, ds: WeightedDataset, theta: np.ndarray, j: int) -> np.ndarray:
    """Gradient of instance j's own (unit-weight) loss."""
    f = md.make_loss(arch, ds.x[j : j + 1], ds.y[j : j + 1], np.ones(1))
    return ad.grad(f, theta)


# ---------------------------------------------------------------- classical


@dataclass
class _ClassicalContext:
    arch: md.ArchDescriptor
    ds: WeightedDataset
    theta: np.ndarray
    factor: np.ndarray
    diag: SolverDiag


def _classical_context(model, ds, metric, solver) -> _ClassicalContext:
    # solve against grad M, so the factor is shared by every instance and a
    # stationary metric yields exactly zero scores
    gm = metric_grad(metric, model.arch, ds, model.theta)
    wbar = ds.w / ds.w.sum()
    hvp_fn = _training_hvp_fn(
        model.arch, WeightedDataset(ds.x, ds.y, wbar, ds.class_count, ds.provenance), model.theta
    )
    x, diag = solve_inverse_hvp(hvp_fn, gm, solver)
    return _ClassicalContext(model.arch, ds, model.theta, x, diag)


def _classical_kernel(ctx: _ClassicalContext, j: int) -> float:
    gj = grad_per_instance(ctx.arch, ctx.ds, ctx.theta, j)
    return float(-(ctx.factor @ gj))


def classical_influence(
    model: md.ModelState,
    ds: WeightedDataset,
    j: int,
    metric: MetricSpec,
    solver: HvpSolverConfig,
) -> float:
    """-<grad M, (H + damping I)^-1 grad l_j> at the trained parameters.

    Dividing by N approximates the negated leave-one-out effect.
    """
    if not 0 <= j < ds.n:
        raise ContractError(f"instance index {j} out of range")
    return _classical_kernel(_classical_context(model, ds, metric, solver), j)


# --------------------------------------------------- matching-objective scores


@dataclass
class _StepContext:
    state: md.ModelState
    grad2_blocks: list | None       # dD/d(real blocks)
    weight_grad: np.ndarray | None  # dD/dw, for the kernel discrepancy


@dataclass
class _DrawContext:
    steps: list                   # one _StepContext per matched state
    imp_vectors: list | None      # per state: c_t with implicit = <c_t, grad l_j>
    imp_theta: np.ndarray | None  # where the per-instance gradient is taken


def _instance_stat_blocks(stat, state, ds, j) -> list:
    """phi(z_j; theta): the instance's own statistic at unit weight."""
    sub = WeightedDataset(
        ds.x[j : j + 1], ds.y[j : j + 1], np.ones(1), ds.class_count, ds.provenance
    )
    return mt.stat_real(stat, state, sub, normalize=False).blocks


def _real_weight_grad(stat, disc, arch, state, ds, a: mt.Statistic) -> np.ndarray:
    """dD/dw over the real set. Needed for mmd, where the weights sit inside
    the kernel quadratic form rather than scaling an affine block."""
    w = ad.leaf(ds.w)
    _, pts_b = mt.stat_graph(stat, arch, ad.constant(state.theta), ad.constant(ds.x), ds.y, w)
    out, _ = mt.disc_graph(
        disc, [], [], ad.constant(a.points), ad.constant(a.point_weights), pts_b, w
    )
    (g,) = ad.backward(out, [w])
    return g.data.copy()


def _explicit_step_context(stat, disc, state, s: SyntheticSet, ds) -> _StepContext:
    a = mt.stat_syn(stat, state, s)
    b = mt.stat_real(stat, state, ds, normalize=False)
    if disc.kind == "mmd-rbf":
        wg = _real_weight_grad(stat, disc, state.arch, state, ds, a)
        return _StepContext(state, None, wg)
    res = mt.discrepancy(disc, a, b)
    return _StepContext(state, res.grad_second, None)


def _explicit_kernel(stat, disc, ctx: _StepContext, ds, j: int) -> float:
    if ctx.weight_grad is not None:
        return float(ctx.weight_grad[j])
    phi = _instance_stat_blocks(stat, ctx.state, ds, j)
    return float(sum(float(g @ p) for g, p in zip(ctx.grad2_blocks, phi)))


def _state_theta_grad(stat, disc, arch, state, s: SyntheticSet, ds) -> np.ndarray:
    """Gradient of the per-state discrepancy in theta, with both statistic
    sides in the graph (the transposed-Jacobian contraction the parameter
    response couples into)."""
    t = ad.leaf(state.theta)
    w_syn = uniform_weights(s.m)
    blocks_a, pts_a = mt.stat_graph(stat, arch, t, ad.constant(s.x), s.y, ad.constant(w_syn))
    blocks_b, pts_b = mt.stat_graph(stat, arch, t, ad.constant(ds.x), ds.y, ad.constant(ds.w))
    if disc.kind == "mmd-rbf":
        out, _ = mt.disc_graph(disc, [], [], pts_a, ad.constant(w_syn), pts_b, ad.constant(ds.w))
    else:
        out, _ = mt.disc_graph(disc, blocks_a, blocks_b)
    (g,) = ad.backward(out, [t])
    return g.data.copy()


def _inner_lr(cfg: TrajectoryConfig, s: SyntheticSet) -> float:
    return s.eta if cfg.s_inner == "S" else cfg.inner_sgd.lr


def _full_contexts(s, ds, cfg, stat, disc, solver, seed):
    """Per-draw contexts for the decomposed score, plus solver diagnostics
    and whether the endpoint approximation was used."""
    draws = []
    residual = 0.0
    iters = 0
    converged = True
    method = None
    endpoint_approx = False
    lr = _inner_lr(cfg, s)
    responds = cfg.s_inner == "D" and cfg.steps > 0 and lr != 0.0
    for draw_seed in mt.draw_seeds(seed, cfg.init_samples):
        traj = mt.run_inner_trajectory(cfg, s, ds, draw_seed)
        matched = mt.matched_states(traj)
        steps_ctx = [_explicit_step_context(stat, disc, state, s, ds) for _, state in matched]
        imp_vectors = None
        imp_theta = None
        if responds:
            jtv = [_state_theta_grad(stat, disc, cfg.arch, state, s, ds) for _, state in matched]
            if cfg.steps == 1:
                # single step: d theta_1 / d w_j = -lr * grad l_j(theta_0), exact
                imp_vectors = [-lr * v for v in jtv]
                imp_theta = traj[0].theta
            else:
                endpoint_approx = True
                end = traj[-1].theta
                hvp_fn = _training_hvp_fn(cfg.arch, ds, end, l2=cfg.inner_sgd.weight_decay)
                imp_vectors = []
                for v in jtv:
                    x, diag = solve_inverse_hvp(hvp_fn, v, solver)
                    imp_vectors.append(-x)
                    residual = max(residual, diag.residual)
                    iters = max(iters, diag.iterations)
                    converged = converged and diag.converged
                    method = diag.method
                imp_theta = end
        draws.append(_DrawContext(steps_ctx, imp_vectors, imp_theta))
    if method is None:
        diag = SolverDiag(0.0, 0, True, "exact" if responds else "none")
    else:
        diag = SolverDiag(residual, iters, converged, method)
    return draws, diag, endpoint_approx


def _record_from_contexts(stat, disc, ds, draws, j, diag, endpoint_approx) -> InfluenceRecord:
    n_draws = len(draws)
    n_steps = len(draws[0].steps)
    exp = np.zeros((n_draws, n_steps))
    imp = np.zeros((n_draws, n_steps))
    for di, dc in enumerate(draws):
        for t in range(n_steps):
            exp[di, t] = _explicit_kernel(stat, disc, dc.steps[t], ds, j)
        if dc.imp_vectors is not None:
            arch = dc.steps[0].state.arch
            gj = grad_per_instance(arch, ds, dc.imp_theta, j)
            for t, c in enumerate(dc.imp_vectors):
                imp[di, t] = float(c @ gj)
    mexp = exp.mean(axis=0)
    mimp = imp.mean(axis=0)
    explicit_term = float(mexp.sum())
    implicit_term = float(mimp.sum())
    return InfluenceRecord(
        index=j,
        total=explicit_term + implicit_term,
        explicit_term=explicit_term,
        implicit_term=implicit_term,
        per_step=[float(e + i) for e, i in zip(mexp, mimp)],
        solver_diag=diag,
        endpoint_approx=endpoint_approx,
    )


def distill_influence_explicit(
    s: SyntheticSet,
    ds: WeightedDataset,
    trajectories: list,
    stat: StatisticKind,
    disc: DiscrepancyKind,
    j: int,
) -> tuple[float, list]:
    """Direct term of instance j's weight sensitivity: per matched state,
    the pairing of dD/d(real statistic) with the instance's own statistic,
    averaged over the supplied trajectories."""
    if not 0 <= j < ds.n:
        raise ContractError(f"instance index {j} out of range")
    if trajectories and isinstance(trajectories[0], md.ModelState):
        trajectories = [trajectories]
    if not trajectories:
        raise ContractError("need at least one trajectory")
    draws = [
        _DrawContext(
            [
                _explicit_step_context(stat, disc, state, s, ds)
                for _, state in mt.matched_states(traj)
            ],
            None,
            None,
        )
        for traj in trajectories
    ]
    rec = _record_from_contexts(stat, disc, ds, draws, j, None, False)
    return rec.total, rec.per_step


def distill_influence_full(
    s: SyntheticSet,
    ds: WeightedDataset,
    cfg: TrajectoryConfig,
    stat: StatisticKind,
    disc: DiscrepancyKind,
    solver: HvpSolverConfig,
    j: int,
    seed: int = 0,
) -> InfluenceRecord:
    """Direct term plus the parameter-response term for instance j.

    The response through the inner trajectory is exact for a single inner
    step and otherwise uses a damped inverse-Hessian solve at the endpoint
    (flagged on the record). Trajectories trained on the synthetic set do
    not respond to real weights, so their implicit term is zero.
    """
    if not 0 <= j < ds.n:
        raise ContractError(f"instance index {j} out of range")
    draws, diag, approx = _full_contexts(s, ds, cfg, stat, disc, solver, seed)
    return _record_from_contexts(stat, disc, ds, draws, j, diag, approx)


def fd_objective_influence_oracle(
    s: SyntheticSet,
    ds: WeightedDataset,
    cfg: TrajectoryConfig,
    stat: StatisticKind,
    disc: DiscrepancyKind,
    j: int,
    seed: int = 0,
    eps: float = 1e-4,
) -> float:
    """Central difference of the unnormalized objective in w_j, re-running
    the inner trajectory on each side so every dependence on the weight is
    captured."""
    if not 0 <= j < ds.n:
        raise ContractError(f"instance index {j} out of range")
    if eps <= 0:
        raise ContractError("step size must be positive")
    if ds.w[j] < eps:
        raise ContractError("step size exceeds the instance weight")
    wp = ds.w.copy()
    wp[j] += eps
    wm = ds.w.copy()
    wm[j] -= eps
    dp = WeightedDataset(ds.x, ds.y, wp, ds.class_count, ds.provenance)
    dm = WeightedDataset(ds.x, ds.y, wm, ds.class_count, ds.provenance)
    fp = mt.objective(s, dp, cfg, stat, disc, seed, normalize=False)
    fm = mt.objective(s, dm, cfg, stat, disc, seed, normalize=False)
    return (fp - fm) / (2.0 * eps)


def score_all(
    mode: str,
    ds: WeightedDataset,
    *,
    model: md.ModelState | None = None,
    metric: MetricSpec | None = None,
    s: SyntheticSet | None = None,
    cfg: TrajectoryConfig | None = None,
    stat: StatisticKind | None = None,
    disc: DiscrepancyKind | None = None,
    solver: HvpSolverConfig | None = None,
    seed: int = 0,
    threads: int = 1,
) -> list:
    """Influence records for every instance, in instance order.

    Shared context (trajectories, discrepancy gradients, solver factors) is
    built once; the per-instance kernel is the same one the single-instance
    operations use, so results match them bit for bit regardless of thread
    count.
    """
    if mode not in SCORE_MODES:
        raise ContractError(f"unknown scoring mode {mode!r}")
    if mode == "classical":
        if model is None or metric is None or solver is None:
            raise ContractError("classical scoring needs model, metric and solver")
        ctx = _classical_context(model, ds, metric, solver)

        def one_classical(j: int) -> InfluenceRecord:
            v = _classical_kernel(ctx, j)
            return InfluenceRecord(j, v, 0.0, v, [v], ctx.diag, False)

        return list(ordered_thread_map(one_classical, range(ds.n), threads))

    if s is None or cfg is None or stat is None or disc is None:
        raise ContractError("matching-objective scoring needs s, cfg, stat and disc")
    if mode == "distill-full":
        if solver is None:
            raise ContractError("distill-full scoring needs a solver config")
        draws, diag, approx = _full_contexts(s, ds, cfg, stat, disc, solver, seed)
    else:
        draws = [
            _DrawContext(
                [
                    _explicit_step_context(stat, disc, state, s, ds)
                    for _, state in mt.matched_states(mt.run_inner_trajectory(cfg, s, ds, d))
                ],
                None,
                None,
            )
            for d in mt.draw_seeds(seed, cfg.init_samples)
        ]
        diag, approx = None, False

    def one(j: int) -> InfluenceRecord:
        return _record_from_contexts(stat, disc, ds, draws, j, diag, approx)

    return list(ordered_thread_map(one, range(ds.n), threads))


def write_influence_csv(records: list, path, flipped=None) -> None:
    """CSV with one row per record; ``flipped`` marks known-corrupt indices."""
    bad = set() if flipped is None else {int(i) for i in flipped}
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(
            ["index", "total", "explicit", "implicit",
             "flipped_flag", "solver_residual", "solver_iters"]
        )
        for r in records:
            diag = r.solver_diag
            out.writerow(
                [
                    r.index,
                    repr(float(r.total)),
                    repr(float(r.explicit_term)),
                    repr(float(r.implicit_term)),
                    1 if r.index in bad else 0,
                    repr(float(diag.residual)) if diag else "0.0",
                    diag.iterations if diag else 0,
                ]
            )
