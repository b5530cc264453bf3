"""Experiment configuration: one JSON document, schema-versioned, validated
before any compute, then lowered onto the core dataclasses."""
import json
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import data as dt
from . import matching as mt
from . import models as md
from . import weighting as wt
from .engine import DistillConfig, EvalConfig
from .errors import ContractError
from .influence import HvpSolverConfig, LissaConfig

SCHEMA_VERSION = 1


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MoonsSpec(StrictModel):
    kind: Literal["two-moons"]
    n: int = Field(ge=2)
    noise: float = Field(ge=0.0)
    seed: int = 0
    flip_fraction: float = Field(default=0.0, ge=0.0, le=0.5)
    flip_seed: int = 0


class MixtureSpec(StrictModel):
    kind: Literal["gaussian-mixture"]
    classes: int = Field(ge=2)
    per_class: int = Field(ge=1)
    dim: int = Field(ge=1)
    spread: float = Field(gt=0.0)
    seed: int = 0
    flip_fraction: float = Field(default=0.0, ge=0.0, le=0.5)
    flip_seed: int = 0


class IdxSpec(StrictModel):
    kind: Literal["idx"]
    images: str
    labels: str
    flip_fraction: float = Field(default=0.0, ge=0.0, le=0.5)
    flip_seed: int = 0


DatasetSpec = Union[MoonsSpec, MixtureSpec, IdxSpec]


class ArchSpec(StrictModel):
    kind: Literal["linear", "mlp", "tinyconv"] = "mlp"
    input_dim: int = Field(ge=1)
    classes: int = Field(ge=2)
    hidden: list[int] = []
    activation: str = "relu"
    image_shape: Optional[tuple[int, int, int]] = None


class SgdSpec(StrictModel):
    lr: float = Field(ge=0.0)
    momentum: float = Field(default=0.0, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=0.0, ge=0.0)


class InitSpec(StrictModel):
    kind: Literal["kaiming-uniform", "normal"] = "kaiming-uniform"
    sigma: float = Field(default=0.1, ge=0.0)


class TrajectorySpec(StrictModel):
    s_inner: Literal["S", "D"] = "S"
    steps: int = Field(default=1, ge=0)
    inner_sgd: SgdSpec = SgdSpec(lr=0.05)
    init: InitSpec = InitSpec()
    init_samples: int = Field(default=1, ge=1)
    unroll: bool = False

    @model_validator(mode="after")
    def _check_unroll(self):
        if self.unroll and self.steps > 5:
            raise ValueError("unrolled trajectories support at most 5 steps")
        if self.unroll and self.s_inner != "S":
            raise ValueError("unrolled trajectories train on S")
        return self


class StatisticSpec(StrictModel):
    kind: Literal["gradient", "feature-mean", "prediction-loss"] = "gradient"
    layerwise: bool = True
    per_class: Optional[bool] = None


class DiscrepancySpec(StrictModel):
    kind: Literal["layer-cosine", "squared-l2", "mmd-rbf"] = "layer-cosine"
    bandwidth: Optional[float] = Field(default=None, gt=0.0)


class PolicySpec(StrictModel):
    kind: Literal["softmax", "uniform", "top-k", "prune"] = "softmax"
    tau: float = Field(default=1.0, gt=0.0)
    k: int = Field(default=1, ge=1)
    keep_frac: float = Field(default=0.9, gt=0.0, le=1.0)


class LissaSpec(StrictModel):
    scale: float = Field(default=10.0, gt=0.0)
    depth: int = Field(default=100, ge=1)
    repeats: int = Field(default=4, ge=1)


class SolverSpec(StrictModel):
    method: Literal["cg", "dense", "lissa"] = "cg"
    damping: float = Field(default=0.01, ge=0.0)
    tol: float = Field(default=1e-8, gt=0.0)
    max_iter: int = Field(default=200, ge=1)
    lissa: LissaSpec = LissaSpec()


class DistillSpec(StrictModel):
    outer_steps: int = Field(ge=1)
    batch_size: int = Field(ge=1)
    outer_lr: float = Field(default=0.1, ge=0.0)
    outer_lr_eta: float = Field(default=0.01, ge=0.0)
    refresh: int = Field(default=50, ge=1)
    ipc: int = Field(default=1, ge=1)
    syn_init: Literal["random-real", "class-mean", "noise"] = "class-mean"
    eta0: float = Field(default=0.01, gt=0.0)


class EvaluationSpec(StrictModel):
    epochs: int = Field(ge=1)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=5e-4, ge=0.0)
    n_repeats: int = Field(default=5, ge=1)
    init: InitSpec = InitSpec()


class InfluenceSpec(StrictModel):
    mode: Literal["classical", "distill-explicit", "distill-full"] = "distill-explicit"
    # classical mode trains its own model on the real set and measures
    # test loss; these set that trainer's budget
    trainer_steps: int = Field(default=200, ge=1)
    trainer_lr: float = Field(default=0.1, gt=0.0)
    trainer_l2: float = Field(default=0.0, ge=0.0)
    bins: int = Field(default=20, ge=1)


class AblationSpec(StrictModel):
    modes: list[str] = ["random-select", "influence-select", "prune-then-distill", "iwd"]
    seeds: int = Field(default=5, ge=1)

    @field_validator("modes")
    @classmethod
    def _known_modes(cls, v):
        known = ("random-select", "influence-select", "prune-then-distill", "iwd")
        for m in v:
            if m not in known:
                raise ValueError(f"unknown ablation mode {m!r}")
        return v


class LooSpec(StrictModel):
    trainer_steps: int = Field(default=200, ge=1)
    trainer_lr: float = Field(default=0.1, gt=0.0)
    trainer_l2: float = Field(default=0.0, ge=0.0)


class ExperimentConfig(StrictModel):
    """Everything one run needs; nested invariants checked on parse."""

    schema_version: int
    seed: int = 0
    out_dir: str = "artifacts"
    train: DatasetSpec = Field(discriminator="kind")
    test: Optional[DatasetSpec] = Field(default=None, discriminator="kind")
    arch: ArchSpec
    trajectory: TrajectorySpec = TrajectorySpec()
    statistic: StatisticSpec = StatisticSpec()
    discrepancy: DiscrepancySpec = DiscrepancySpec()
    policy: PolicySpec = PolicySpec()
    solver: SolverSpec = SolverSpec()
    distill: DistillSpec
    evaluation: EvaluationSpec
    influence: InfluenceSpec = InfluenceSpec()
    ablation: AblationSpec = AblationSpec()
    tau_grid: list[float] = [0.01, 0.1, 1.0, 10.0, 100.0]
    loo: LooSpec = LooSpec()
    # evaluate/influence can score a previously distilled set instead of a
    # fresh initialization
    synthetic_json: Optional[str] = None
    synthetic_bin: Optional[str] = None

    @field_validator("schema_version")
    @classmethod
    def _known_schema(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"schema_version must be {SCHEMA_VERSION}")
        return v

    @field_validator("tau_grid")
    @classmethod
    def _positive_taus(cls, v):
        if any(t <= 0 for t in v):
            raise ValueError("tau_grid entries must be positive")
        return v

    @model_validator(mode="after")
    def _check(self):
        if (self.synthetic_json is None) != (self.synthetic_bin is None):
            raise ValueError("synthetic_json and synthetic_bin go together")
        for label, p in self._referenced_paths():
            if not Path(p).is_file():
                raise ValueError(f"{label} path not found: {p}")
        return self

    def _referenced_paths(self):
        out = []
        for label, spec in (("train", self.train), ("test", self.test)):
            if isinstance(spec, IdxSpec):
                out.append((f"{label}.images", spec.images))
                out.append((f"{label}.labels", spec.labels))
        if self.synthetic_json is not None:
            out.append(("synthetic_json", self.synthetic_json))
            out.append(("synthetic_bin", self.synthetic_bin))
        return out


class MissingFieldError(ContractError):
    """A command needs a config section the document does not provide."""

    def __init__(self, field: str):
        super().__init__(f"config field {field!r} is required for this command")
        self.field = field


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    with open(p) as fh:
        return ExperimentConfig.model_validate(json.load(fh))


def first_error_field(exc) -> str:
    """Dotted path of the first failing field in a pydantic error; falls back
    to the message (which names the field) for whole-document checks."""
    errs = exc.errors()
    if not errs:
        return "config"
    first = errs[0]
    loc = [str(part) for part in first.get("loc", ()) if part != "__root__"]
    if loc:
        return ".".join(loc)
    msg = str(first.get("msg", "config"))
    return msg.removeprefix("Value error, ")


# ---------------------------------------------------------------- lowering


def build_dataset(spec) -> tuple:
    """Realize a dataset spec; returns (dataset, flipped_indices)."""
    if isinstance(spec, MoonsSpec):
        ds = dt.gen_two_moons(spec.n, spec.noise, spec.seed)
    elif isinstance(spec, MixtureSpec):
        ds = dt.gen_gaussian_mixture(
            spec.classes, spec.per_class, spec.dim, spec.spread, spec.seed
        )
    elif isinstance(spec, IdxSpec):
        ds = dt.load_idx_pair(spec.images, spec.labels)
    else:
        raise ContractError(f"unknown dataset spec {type(spec).__name__}")
    if spec.flip_fraction > 0.0:
        return dt.flip_labels(ds, dt.NoiseSpec(spec.flip_fraction, spec.flip_seed))
    return ds, np.array([], dtype=int)


def build_arch(spec: ArchSpec) -> md.ArchDescriptor:
    return md.ArchDescriptor(
        kind=spec.kind,
        input_dim=spec.input_dim,
        classes=spec.classes,
        hidden=tuple(spec.hidden),
        activation=spec.activation,
        image_shape=spec.image_shape,
    )


def _build_sgd(spec: SgdSpec) -> md.SgdConfig:
    return md.SgdConfig(lr=spec.lr, momentum=spec.momentum, weight_decay=spec.weight_decay)


def _build_init(spec: InitSpec) -> md.InitDistribution:
    return md.InitDistribution(kind=spec.kind, sigma=spec.sigma)


def build_trajectory(cfg: ExperimentConfig) -> mt.TrajectoryConfig:
    t = cfg.trajectory
    return mt.TrajectoryConfig(
        arch=build_arch(cfg.arch),
        s_inner=t.s_inner,
        steps=t.steps,
        inner_sgd=_build_sgd(t.inner_sgd),
        init=_build_init(t.init),
        init_samples=t.init_samples,
        unroll=t.unroll,
    )


def build_statistic(cfg: ExperimentConfig) -> mt.StatisticKind:
    s = cfg.statistic
    return mt.StatisticKind(kind=s.kind, layerwise=s.layerwise, per_class=s.per_class)


def build_discrepancy(cfg: ExperimentConfig) -> mt.DiscrepancyKind:
    d = cfg.discrepancy
    return mt.DiscrepancyKind(kind=d.kind, bandwidth=d.bandwidth)


def build_policy(cfg: ExperimentConfig) -> wt.WeightPolicy:
    p = cfg.policy
    return wt.WeightPolicy(kind=p.kind, tau=p.tau, k=p.k, keep_frac=p.keep_frac)


def build_solver(cfg: ExperimentConfig) -> HvpSolverConfig:
    s = cfg.solver
    return HvpSolverConfig(
        method=s.method,
        damping=s.damping,
        tol=s.tol,
        max_iter=s.max_iter,
        lissa=LissaConfig(scale=s.lissa.scale, depth=s.lissa.depth, repeats=s.lissa.repeats),
    )


def build_distill_config(cfg: ExperimentConfig) -> DistillConfig:
    d = cfg.distill
    return DistillConfig(
        trajectory=build_trajectory(cfg),
        stat=build_statistic(cfg),
        disc=build_discrepancy(cfg),
        outer_steps=d.outer_steps,
        batch_size=d.batch_size,
        outer_lr=d.outer_lr,
        outer_lr_eta=d.outer_lr_eta,
        policy=build_policy(cfg),
        refresh=d.refresh,
        ipc=d.ipc,
        syn_init=d.syn_init,
        eta0=d.eta0,
        solver=build_solver(cfg),
        seed=cfg.seed,
    )


def build_eval_config(cfg: ExperimentConfig) -> EvalConfig:
    e = cfg.evaluation
    return EvalConfig(
        arch=build_arch(cfg.arch),
        epochs=e.epochs,
        momentum=e.momentum,
        weight_decay=e.weight_decay,
        n_repeats=e.n_repeats,
        init=_build_init(e.init),
        seed=cfg.seed,
    )
