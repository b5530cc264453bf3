"""Artifact-writing experiment runners.

Both the CLI and the HTTP service dispatch here, so the two front-ends
produce identical files for identical configs. Numeric cells are written
with repr for byte-stable reruns.
"""
import csv
import json
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import data as dt
from . import engine as eng
from . import influence as infl
from . import models as md
from . import svgplot
from .errors import ContractError
from .runconfig import (
    ExperimentConfig,
    MissingFieldError,
    build_arch,
    build_dataset,
    build_discrepancy,
    build_distill_config,
    build_eval_config,
    build_solver,
    build_statistic,
    build_trajectory,
)


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(obj: dict, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_csv(path: Path, header: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for row in rows:
            out.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def _require_test(cfg: ExperimentConfig):
    if cfg.test is None:
        raise MissingFieldError("test")
    return build_dataset(cfg.test)[0]


def run_distill(cfg: ExperimentConfig, out_dir, threads: int = 1) -> dict:
    """Weighted distillation run: synthetic set, report, curve artifacts."""
    out = _outdir(out_dir)
    ds, _ = build_dataset(cfg.train)
    rep = eng.distill(ds, build_distill_config(cfg), threads=threads)
    if cfg.test is not None:
        test = build_dataset(cfg.test)[0]
        rep.accuracy_mean, rep.accuracy_std = eng.evaluate(
            rep.syn, test, build_eval_config(cfg)
        )
    eng.save_report_json(rep, out / "run_report.json")
    dt.save_synthetic(rep.syn, out / "synthetic.json", out / "synthetic.bin")
    _write_csv(
        out / "objective_curve.csv",
        ["step", "objective", "eta"],
        [(t, float(v), float(e)) for t, (v, e) in
         enumerate(zip(rep.objective_log, rep.eta_log))],
    )
    svgplot.write_svg(
        svgplot.line_chart_svg(rep.objective_log, title="matching objective",
                               xlabel="outer step", ylabel="batch loss"),
        out / "curve.svg",
    )
    return {
        "artifacts": ["run_report.json", "synthetic.json", "synthetic.bin",
                      "objective_curve.csv", "curve.svg"],
        "summary": {
            "final_objective": float(rep.objective_log[-1]),
            "eta": float(rep.syn.eta),
            "accuracy_mean": rep.accuracy_mean,
            "accuracy_std": rep.accuracy_std,
        },
    }


def _load_or_init_synthetic(cfg: ExperimentConfig, ds):
    if cfg.synthetic_json is not None:
        return dt.load_synthetic(cfg.synthetic_json, cfg.synthetic_bin)
    return dt.init_synthetic(
        ds, cfg.distill.ipc, cfg.distill.syn_init, cfg.seed, cfg.distill.eta0
    )


def _score_records(cfg: ExperimentConfig, ds, threads: int) -> list:
    mode = cfg.influence.mode
    if mode == "classical":
        test = _require_test(cfg)
        trainer = infl.TrainerConfig(
            arch=build_arch(cfg.arch),
            sgd=md.SgdConfig(lr=cfg.influence.trainer_lr),
            steps=cfg.influence.trainer_steps,
            seed=cfg.seed,
            l2=cfg.influence.trainer_l2,
        )
        model = infl.train_model(trainer, ds)
        metric = infl.MetricSpec(kind="test-loss", x=test.x, y=test.y)
        return infl.score_all(
            "classical", ds, model=model, metric=metric,
            solver=build_solver(cfg), threads=threads,
        )
    syn = _load_or_init_synthetic(cfg, ds)
    return infl.score_all(
        mode, ds,
        s=syn, cfg=build_trajectory(cfg),
        stat=build_statistic(cfg), disc=build_discrepancy(cfg),
        solver=build_solver(cfg), seed=cfg.seed, threads=threads,
    )


def run_influence(cfg: ExperimentConfig, out_dir, threads: int = 1) -> dict:
    """Per-instance scores plus their distribution plot."""
    out = _outdir(out_dir)
    ds, flipped = build_dataset(cfg.train)
    records = _score_records(cfg, ds, threads)
    infl.write_influence_csv(records, out / "influence.csv", flipped=flipped)
    totals = [r.total for r in records]
    svgplot.write_svg(
        svgplot.histogram_svg(totals, bins=cfg.influence.bins,
                              title="influence scores"),
        out / "histogram.svg",
    )
    return {
        "artifacts": ["influence.csv", "histogram.svg"],
        "summary": {
            "n": ds.n,
            "mode": cfg.influence.mode,
            "score_mean": float(np.mean(totals)),
            "score_std": float(np.std(totals)),
            "flipped_count": int(len(flipped)),
        },
    }


def run_evaluate(cfg: ExperimentConfig, out_dir, threads: int = 1) -> dict:
    """Train-on-synthetic evaluation of a previously saved set."""
    out = _outdir(out_dir)
    if cfg.synthetic_json is None:
        raise MissingFieldError("synthetic_json")
    test = _require_test(cfg)
    syn = dt.load_synthetic(cfg.synthetic_json, cfg.synthetic_bin)
    mean, std = eng.evaluate(syn, test, build_eval_config(cfg))
    _write_csv(
        out / "evaluation.csv",
        ["accuracy_mean", "accuracy_std", "n_repeats", "epochs"],
        [(float(mean), float(std), cfg.evaluation.n_repeats, cfg.evaluation.epochs)],
    )
    return {
        "artifacts": ["evaluation.csv"],
        "summary": {"accuracy_mean": float(mean), "accuracy_std": float(std)},
    }


def run_ablate(cfg: ExperimentConfig, out_dir, threads: int = 1) -> dict:
    """Selection-strategy comparison table over paired seeds."""
    out = _outdir(out_dir)
    ds, _ = build_dataset(cfg.train)
    test = _require_test(cfg)
    rows = eng.run_ablation(
        ds, build_distill_config(cfg), build_eval_config(cfg), test,
        modes=tuple(cfg.ablation.modes), seeds=cfg.ablation.seeds, threads=threads,
    )
    eng.write_ablation_csv(rows, out / "ablation.csv")
    per_mode: dict = {}
    for r in rows:
        per_mode.setdefault(r["mode"], []).append(r["accuracy"])
    return {
        "artifacts": ["ablation.csv"],
        "summary": {m: float(sum(v) / len(v)) for m, v in per_mode.items()},
    }


def run_tau_sweep(cfg: ExperimentConfig, out_dir, threads: int = 1) -> dict:
    """Temperature sensitivity table and curve."""
    out = _outdir(out_dir)
    ds, _ = build_dataset(cfg.train)
    test = _require_test(cfg)
    rows = eng.tau_sweep(
        ds, build_distill_config(cfg), build_eval_config(cfg), test,
        grid=cfg.tau_grid, threads=threads,
    )
    _write_csv(
        out / "tau_sweep.csv",
        ["tau", "accuracy", "accuracy_std", "final_objective"],
        [(float(r["tau"]), float(r["accuracy"]), float(r["accuracy_std"]),
          float(r["final_objective"])) for r in rows],
    )
    svgplot.write_svg(
        svgplot.line_chart_svg(
            [r["accuracy"] for r in rows], xs=[r["tau"] for r in rows],
            title="accuracy vs temperature", xlabel="tau", ylabel="accuracy",
        ),
        out / "curve.svg",
    )
    best = max(rows, key=lambda r: r["accuracy"])
    return {
        "artifacts": ["tau_sweep.csv", "curve.svg"],
        "summary": {"best_tau": float(best["tau"]),
                    "best_accuracy": float(best["accuracy"])},
    }


def run_loo_oracle(cfg: ExperimentConfig, out_dir, threads: int = 1) -> dict:
    """Leave-one-out ground truth next to the influence prediction."""
    out = _outdir(out_dir)
    ds, _ = build_dataset(cfg.train)
    test = _require_test(cfg)
    trainer = infl.TrainerConfig(
        arch=build_arch(cfg.arch),
        sgd=md.SgdConfig(lr=cfg.loo.trainer_lr),
        steps=cfg.loo.trainer_steps,
        seed=cfg.seed,
        l2=cfg.loo.trainer_l2,
    )
    metric = infl.MetricSpec(kind="test-loss", x=test.x, y=test.y)
    model = infl.train_model(trainer, ds)
    loo = infl.loo_all(trainer, ds, metric, threads=threads)
    records = infl.score_all(
        "classical", ds, model=model, metric=metric,
        solver=build_solver(cfg), threads=threads,
    )
    pred = [-r.total / ds.n for r in records]
    rho = float(spearmanr(pred, loo).statistic)
    _write_csv(
        out / "loo_oracle.csv",
        ["index", "influence", "loo_pred", "loo_true"],
        [(j, float(records[j].total), float(pred[j]), float(loo[j]))
         for j in range(ds.n)],
    )
    _write_json({"n": ds.n, "spearman_rho": rho}, out / "loo_summary.json")
    return {
        "artifacts": ["loo_oracle.csv", "loo_summary.json"],
        "summary": {"spearman_rho": rho, "n": ds.n},
    }


JOBS = {
    "distill": run_distill,
    "influence": run_influence,
    "evaluate": run_evaluate,
    "ablate": run_ablate,
    "tau-sweep": run_tau_sweep,
    "loo-oracle": run_loo_oracle,
}


def run_job(name: str, cfg: ExperimentConfig, out_dir, threads: int = 1) -> dict:
    if name not in JOBS:
        raise ContractError(f"unknown job {name!r}")
    return JOBS[name](cfg, out_dir, threads=threads)
