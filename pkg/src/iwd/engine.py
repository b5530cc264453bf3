"""Outer loops: distillation with influence-softmax weighting, selection
baselines, the four-way ablation, and train-from-scratch evaluation.

One distillation run is sequential over outer steps. Per step: sample a
real minibatch, draw a fresh inner initialization, run the inner
trajectory, and descend the weighted per-instance matching loss in the
synthetic features (and the synthetic learning rate when unrolling).
Influence scores refresh every ``refresh`` steps and are frozen between.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import influence as infl
from . import matching as mt
from . import models as md
from . import weighting as wt
from .data import SyntheticSet, WeightedDataset, init_synthetic, take_subset, uniform_weights
from .errors import ContractError, NumericalError
from .matching import DiscrepancyKind, StatisticKind, TrajectoryConfig
from .parallel import ordered_thread_map

ETA_FLOOR = 1e-6

ABLATION_MODES = ("random-select", "influence-select", "prune-then-distill", "iwd")

TAU_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)


@dataclass(frozen=True)
class DistillConfig:
    trajectory: TrajectoryConfig
    stat: StatisticKind
    disc: DiscrepancyKind
    outer_steps: int
    batch_size: int
    outer_lr: float = 0.1
    outer_lr_eta: float = 0.01
    policy: wt.WeightPolicy = field(default_factory=wt.WeightPolicy)
    refresh: int = 50
    ipc: int = 1
    syn_init: str = "class-mean"
    eta0: float = 0.01
    solver: infl.HvpSolverConfig = field(default_factory=infl.HvpSolverConfig)
    seed: int = 0

    def __post_init__(self):
        if self.outer_steps < 1:
            raise ContractError("outer_steps must be at least 1")
        if self.batch_size < 1:
            raise ContractError("batch_size must be at least 1")
        if self.outer_lr < 0 or self.outer_lr_eta < 0:
            raise ContractError("outer learning rates must be non-negative")
        if self.refresh < 1:
            raise ContractError("refresh interval must be at least 1")
        if self.ipc < 1:
            raise ContractError("ipc must be at least 1")
        if not self.eta0 > 0:
            raise ContractError("eta0 must be positive")


@dataclass(frozen=True)
class EvalConfig:
    """Train-from-scratch protocol: fresh seeded models fit the synthetic
    set at its own learning rate, then score accuracy on held-out data."""

    arch: md.ArchDescriptor
    epochs: int
    momentum: float = 0.9
    weight_decay: float = 5e-4
    n_repeats: int = 5
    init: md.InitDistribution = field(default_factory=md.InitDistribution)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError("epochs must be at least 1")
        if self.n_repeats < 1:
            raise ContractError("need at least one evaluation repeat")


@dataclass
class RunReport:
    objective_log: list
    refresh_log: list
    syn: SyntheticSet
    eta_log: list
    accuracy_mean: float | None = None
    accuracy_std: float | None = None
    wall_clock: float = 0.0


def _score_mode(cfg: DistillConfig) -> str:
    return "distill-explicit" if cfg.trajectory.s_inner == "S" else "distill-full"


def _grouped(stat: StatisticKind) -> bool:
    # prediction-loss always emits a single block regardless of per_class
    return stat.classwise and stat.kind in ("gradient", "feature-mean")


def _blocks_per_group(stat: StatisticKind, arch: md.ArchDescriptor) -> int:
    if stat.kind == "gradient" and stat.layerwise:
        return len(md.layer_slices(arch))
    return 1


def _class_slice(stat: StatisticKind, arch: md.ArchDescriptor, c: int) -> slice:
    """Block positions to compare for an instance of class c."""
    if not _grouped(stat):
        return slice(None)
    g = _blocks_per_group(stat, arch)
    return slice(c * g, (c + 1) * g)


def _syn_weights(stat: StatisticKind, s: SyntheticSet) -> np.ndarray:
    # class-wise statistics compare class means against single instances,
    # so each class block is normalized by ipc rather than by m
    if _grouped(stat):
        return np.full(s.m, 1.0 / s.ipc)
    return np.full(s.m, 1.0 / s.m)


def _instance_term(stat, disc, arch, blocks_syn, pts_syn, s, state, ds, i, theta_node=None):
    """Matching discrepancy between the synthetic statistic and instance i's
    own statistic at one trajectory state, as a graph node.

    With ``theta_node`` the instance side joins the graph (unrolled mode);
    otherwise it is a frozen numeric constant.
    """
    c = int(ds.y[i])
    sel = _class_slice(stat, arch, c)
    if theta_node is not None:
        blocks_i, pts_i = mt.stat_graph(
            stat, arch, theta_node, ad.constant(ds.x[i : i + 1]), ds.y[i : i + 1], ad.constant(np.ones(1))
        )
    else:
        sub = WeightedDataset(ds.x[i : i + 1], ds.y[i : i + 1], np.ones(1), ds.class_count)
        st = mt.stat_real(stat, state, sub, normalize=False)
        blocks_i = [ad.constant(b) for b in st.blocks]
        pts_i = None if st.points is None else ad.constant(st.points)
    if disc.kind == "mmd-rbf":
        if _grouped(stat):
            members = np.flatnonzero(s.y == c)
            pa = ad.take_rows(pts_syn, members)
            wa = ad.constant(np.full(members.size, 1.0 / members.size))
        else:
            pa = pts_syn
            wa = ad.constant(np.full(s.m, 1.0 / s.m))
        out, _ = mt.disc_graph(disc, [], [], pa, wa, pts_i, ad.constant(np.ones(1)))
        return out
    out, _ = mt.disc_graph(disc, blocks_syn[sel], blocks_i[sel])
    return out


def _sum_terms(terms):
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def _batch_loss_and_grads(s, ds, batch, w_batch, cfg: DistillConfig, step_seed: int):
    """Weighted minibatch matching loss, its gradient in the synthetic
    features, and (when unrolling) in the synthetic learning rate."""
    tr = cfg.trajectory
    if tr.unroll:
        return _batch_unrolled(s, ds, batch, w_batch, cfg, step_seed)
    arch = tr.arch
    w_syn = _syn_weights(cfg.stat, s)
    total_val = 0.0
    gx = np.zeros_like(s.x)
    for draw in mt.draw_seeds(step_seed, tr.init_samples):
        traj = mt.run_inner_trajectory(tr, s, ds, draw)
        xs = ad.leaf(s.x)
        terms = []
        for _, state in mt.matched_states(traj):
            blocks_syn, pts_syn = mt.stat_graph(
                cfg.stat, arch, ad.leaf(state.theta), xs, s.y, ad.constant(w_syn)
            )
            for wb, i in zip(w_batch, batch):
                out = _instance_term(
                    cfg.stat, cfg.disc, arch, blocks_syn, pts_syn, s, state, ds, int(i)
                )
                terms.append(ad.mul(ad.constant(float(wb)), out))
        total = _sum_terms(terms)
        (g,) = ad.backward(total, [xs])
        total_val += total.item()
        gx += g.data
    k = tr.init_samples
    return total_val / k, gx / k, 0.0


def _batch_unrolled(s, ds, batch, w_batch, cfg: DistillConfig, step_seed: int):
    tr = cfg.trajectory
    arch = tr.arch
    w_syn_train = np.full(s.m, 1.0 / s.m)
    w_syn_stat = _syn_weights(cfg.stat, s)
    total_val = 0.0
    gx = np.zeros_like(s.x)
    geta = 0.0
    for draw in mt.draw_seeds(step_seed, tr.init_samples):
        init = md.init_model(arch, tr.init, draw)
        xs = ad.leaf(s.x)
        eta = ad.leaf(np.array([s.eta]))
        eta_s = ad.reshape(eta, ())
        theta = ad.leaf(init.theta)
        velocity = None
        states = [theta]
        for _ in range(tr.steps):
            loss = md.weighted_loss_tensor(arch, theta, xs, s.y, ad.constant(w_syn_train))
            (g,) = ad.backward(loss, [theta])
            v = g
            if tr.inner_sgd.weight_decay:
                v = ad.add(v, ad.mul(ad.constant(tr.inner_sgd.weight_decay), theta))
            if velocity is not None and tr.inner_sgd.momentum:
                v = ad.add(v, ad.mul(ad.constant(tr.inner_sgd.momentum), velocity))
            velocity = v
            theta = ad.add(theta, ad.neg(ad.mul(eta_s, v)))
            states.append(theta)
        matched = [states[0]] if tr.steps == 0 else states[1:]
        terms = []
        for th in matched:
            blocks_syn, pts_syn = mt.stat_graph(cfg.stat, arch, th, xs, s.y, ad.constant(w_syn_stat))
            for wb, i in zip(w_batch, batch):
                out = _instance_term(
                    cfg.stat, cfg.disc, arch, blocks_syn, pts_syn, s, None, ds, int(i),
                    theta_node=th,
                )
                terms.append(ad.mul(ad.constant(float(wb)), out))
        total = _sum_terms(terms)
        gxs, ge = ad.backward(total, [xs, eta])
        total_val += total.item()
        gx += gxs.data
        geta += float(ge.data[0])
    k = tr.init_samples
    return total_val / k, gx / k, geta / k


def _step_seeds(seed: int, steps: int) -> tuple[np.ndarray, np.ndarray]:
    states = np.random.SeedSequence(seed).generate_state(2 * steps, dtype=np.uint64)
    return states[0::2], states[1::2]


def distill(ds: WeightedDataset, cfg: DistillConfig, score_fn=None, threads: int = 1) -> RunReport:
    """Influence-weighted distillation; ``policy=uniform`` runs the plain
    baseline through the identical code path.

    ``score_fn(s, step) -> scores`` overrides influence scoring (tests force
    degenerate scores through it).
    """
    if cfg.batch_size > ds.n:
        raise ContractError(f"batch_size {cfg.batch_size} exceeds dataset size {ds.n}")
    start = time.perf_counter()
    s = init_synthetic(ds, cfg.ipc, cfg.syn_init, cfg.seed, cfg.eta0)
    batch_seeds, init_seeds = _step_seeds(cfg.seed, cfg.outer_steps)
    weights_full = uniform_weights(ds.n)
    objective_log: list[float] = []
    eta_log: list[float] = []
    refresh_log: list[dict] = []
    uses_scores = cfg.policy.kind != "uniform" or score_fn is not None
    for t in range(cfg.outer_steps):
        if uses_scores and t % cfg.refresh == 0:
            if score_fn is not None:
                scores = np.asarray(score_fn(s, t), dtype=np.float64)
            else:
                recs = infl.score_all(
                    _score_mode(cfg), ds, s=s, cfg=cfg.trajectory, stat=cfg.stat,
                    disc=cfg.disc, solver=cfg.solver, seed=int(init_seeds[t]),
                    threads=threads,
                )
                scores = np.array([r.total for r in recs])
            weights_full = wt.apply_policy(cfg.policy, scores)
            refresh_log.append(
                {
                    "step": t,
                    "score_mean": float(scores.mean()),
                    "score_std": float(scores.std()),
                    "weight_max": float(weights_full.max()),
                }
            )
        rng = np.random.default_rng(int(batch_seeds[t]))
        batch = np.sort(rng.choice(ds.n, cfg.batch_size, replace=False))
        w_batch = wt.restrict_weights(weights_full, batch)
        try:
            loss, gx, geta = _batch_loss_and_grads(s, ds, batch, w_batch, cfg, int(init_seeds[t]))
        except NumericalError as exc:
            raise NumericalError(
                f"matching loss failed at outer step {t} "
                f"(batch={batch.tolist()}, |x|_max={float(np.abs(s.x).max())!r}): {exc}"
            ) from exc
        if not (np.isfinite(loss) and np.all(np.isfinite(gx)) and np.isfinite(geta)):
            raise NumericalError(
                f"non-finite matching loss at outer step {t}: "
                f"loss={loss!r}, |grad_x|={float(np.abs(gx).max())!r}, grad_eta={geta!r}"
            )
        objective_log.append(float(loss))
        new_x = s.x - cfg.outer_lr * gx
        new_eta = s.eta
        if cfg.trajectory.unroll and cfg.outer_lr_eta:
            new_eta = max(s.eta - cfg.outer_lr_eta * geta, ETA_FLOOR)
        s = SyntheticSet(new_x, s.y, new_eta, s.ipc, s.class_count)
        eta_log.append(new_eta)
    return RunReport(
        objective_log=objective_log,
        refresh_log=refresh_log,
        syn=s,
        eta_log=eta_log,
        wall_clock=time.perf_counter() - start,
    )


def evaluate(s: SyntheticSet, test: WeightedDataset, cfg: EvalConfig) -> tuple[float, float]:
    """Mean and std of test accuracy over freshly initialized models trained
    on the synthetic set at its own learning rate."""
    sgd = md.SgdConfig(lr=s.eta, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    w = uniform_weights(s.m)
    accs = []
    for draw in mt.draw_seeds(cfg.seed, cfg.n_repeats):
        model = md.init_model(cfg.arch, cfg.init, draw)
        trained = md.train(model, s.x, s.y, w, sgd, cfg.epochs)
        accs.append(md.accuracy(trained, test.x, test.y))
    return float(np.mean(accs)), float(np.std(accs))


def _ablation_scores(ds: WeightedDataset, cfg: DistillConfig, threads: int = 1) -> np.ndarray:
    """Influence of each real instance against a class-mean synthetic set,
    shared by the selection and pruning ablation arms."""
    s = init_synthetic(ds, cfg.ipc, "class-mean", cfg.seed, cfg.eta0)
    recs = infl.score_all(
        _score_mode(cfg), ds, s=s, cfg=cfg.trajectory, stat=cfg.stat, disc=cfg.disc,
        solver=cfg.solver, seed=cfg.seed, threads=threads,
    )
    return np.array([r.total for r in recs])


def _balanced_random(ds: WeightedDataset, ipc: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(ds.class_count):
        members = np.flatnonzero(ds.y == c)
        if members.size < ipc:
            raise ContractError(f"class {c} has fewer than ipc={ipc} instances")
        picks.append(np.sort(rng.choice(members, ipc, replace=False)))
    return np.concatenate(picks)


def _balanced_top(ds: WeightedDataset, benefit: np.ndarray, ipc: int) -> np.ndarray:
    picks = []
    for c in range(ds.class_count):
        members = np.flatnonzero(ds.y == c)
        if members.size < ipc:
            raise ContractError(f"class {c} has fewer than ipc={ipc} instances")
        top = wt.select_top_k(benefit[members], ipc)
        picks.append(np.sort(members[top]))
    return np.concatenate(picks)


def _subset_syn(ds: WeightedDataset, idx: np.ndarray, ipc: int, eta: float) -> SyntheticSet:
    return SyntheticSet(ds.x[idx], ds.y[idx], eta, ipc, ds.class_count)


def run_ablation(
    ds: WeightedDataset,
    cfg: DistillConfig,
    eval_cfg: EvalConfig,
    test: WeightedDataset,
    modes=ABLATION_MODES,
    seeds: int = 5,
    threads: int = 1,
) -> list:
    """Accuracy rows for each (mode, seed); every mode sees the same seed
    stream so comparisons are paired."""
    if not modes:
        raise ContractError("need at least one ablation mode")
    for mode in modes:
        if mode not in ABLATION_MODES:
            raise ContractError(f"unknown ablation mode {mode!r}")
    seed_list = [int(v) for v in np.random.SeedSequence(cfg.seed).generate_state(seeds, dtype=np.uint64)]
    jobs = [(mode, sd) for mode in modes for sd in seed_list]

    def one(job):
        mode, sd = job
        dcfg = replace(cfg, seed=sd)
        ecfg = replace(eval_cfg, seed=sd)
        if mode == "random-select":
            syn = _subset_syn(ds, _balanced_random(ds, cfg.ipc, sd), cfg.ipc, cfg.eta0)
        elif mode == "influence-select":
            benefit = -_ablation_scores(ds, dcfg)
            syn = _subset_syn(ds, _balanced_top(ds, benefit, cfg.ipc), cfg.ipc, cfg.eta0)
        elif mode == "prune-then-distill":
            benefit = -_ablation_scores(ds, dcfg)
            kept = wt.prune_fraction(benefit, 0.9)
            reduced = take_subset(ds, kept, renormalize=True)
            plain = replace(dcfg, policy=wt.WeightPolicy(kind="uniform"))
            syn = distill(reduced, plain).syn
        else:
            syn = distill(ds, dcfg).syn
        mean, std = evaluate(syn, test, ecfg)
        return {
            "mode": mode,
            "ipc": cfg.ipc,
            "tau": cfg.policy.tau,
            "seed": sd,
            "accuracy": mean,
            "accuracy_std": std,
        }

    return list(ordered_thread_map(one, jobs, threads))


def tau_sweep(
    ds: WeightedDataset,
    cfg: DistillConfig,
    eval_cfg: EvalConfig,
    test: WeightedDataset,
    grid=TAU_GRID,
    threads: int = 1,
) -> list:
    """Distill + evaluate per temperature; seeds shared across the grid."""
    grid = list(grid)
    if not grid:
        raise ContractError("temperature grid must be non-empty")

    def one(tau):
        pol = wt.WeightPolicy(kind="softmax", tau=float(tau))
        rep = distill(ds, replace(cfg, policy=pol))
        mean, std = evaluate(rep.syn, test, eval_cfg)
        return {
            "tau": float(tau),
            "accuracy": mean,
            "accuracy_std": std,
            "final_objective": rep.objective_log[-1],
        }

    return list(ordered_thread_map(one, grid, threads))


def report_to_dict(rep: RunReport) -> dict:
    """JSON-ready view; wall-clock is deliberately left out so identical
    runs serialize to identical bytes."""
    return {
        "objective_log": [float(v) for v in rep.objective_log],
        "refresh_log": rep.refresh_log,
        "eta_log": [float(v) for v in rep.eta_log],
        "syn": {
            "x": rep.syn.x.tolist(),
            "y": rep.syn.y.tolist(),
            "eta": rep.syn.eta,
            "ipc": rep.syn.ipc,
            "class_count": rep.syn.class_count,
        },
        "accuracy_mean": rep.accuracy_mean,
        "accuracy_std": rep.accuracy_std,
    }


def save_report_json(rep: RunReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report_to_dict(rep), fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_ablation_csv(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["mode", "ipc", "tau", "seed", "accuracy", "accuracy_std"])
        for r in rows:
            out.writerow(
                [r["mode"], r["ipc"], repr(float(r["tau"])), r["seed"],
                 repr(float(r["accuracy"])), repr(float(r["accuracy_std"]))]
            )
