"""HTTP front-end: each endpoint accepts a full experiment config and runs
the matching job, writing the same artifacts the CLI would."""
from typing import Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from . import __version__
from .errors import ContractError, FormatError, NumericalError, SolverError
from .jobs import run_job
from .runconfig import ExperimentConfig

app = FastAPI(title="iwd", version=__version__)


class JobRequest(BaseModel):
    config: ExperimentConfig
    out_dir: Optional[str] = None
    seed: Optional[int] = None
    threads: int = 1


class JobResponse(BaseModel):
    job: str
    out_dir: str
    artifacts: list[str]
    summary: dict


def _run(job: str, req: JobRequest) -> JobResponse:
    cfg = req.config
    if req.seed is not None:
        cfg = cfg.model_copy(update={"seed": req.seed})
    out_dir = req.out_dir if req.out_dir is not None else cfg.out_dir
    try:
        result = run_job(job, cfg, out_dir, threads=req.threads)
    except (ContractError, FormatError) as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    except (NumericalError, SolverError) as exc:
        raise HTTPException(status_code=500, detail=str(exc))
    return JobResponse(job=job, out_dir=str(out_dir), **result)


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


@app.post("/distill", response_model=JobResponse)
def distill(req: JobRequest) -> JobResponse:
    return _run("distill", req)


@app.post("/influence", response_model=JobResponse)
def influence(req: JobRequest) -> JobResponse:
    return _run("influence", req)


@app.post("/evaluate", response_model=JobResponse)
def evaluate(req: JobRequest) -> JobResponse:
    return _run("evaluate", req)


@app.post("/ablate", response_model=JobResponse)
def ablate(req: JobRequest) -> JobResponse:
    return _run("ablate", req)


@app.post("/tau-sweep", response_model=JobResponse)
def tau_sweep(req: JobRequest) -> JobResponse:
    return _run("tau-sweep", req)


@app.post("/loo-oracle", response_model=JobResponse)
def loo_oracle(req: JobRequest) -> JobResponse:
    return _run("loo-oracle", req)
