"""Command-line front-end.

Thin dispatcher over the job runners: parse flags, validate the config
document, run, report artifact paths. Exit codes: 0 success, 1 runtime
failure, 2 invalid config (first failing field named on stderr).
"""
import argparse
import json
import os
import sys

from pydantic import ValidationError

from .errors import ContractError, FormatError, NumericalError, SolverError
from .jobs import JOBS, run_job
from .runconfig import MissingFieldError, first_error_field, load_config


def _add_job_parser(sub, name: str, help_text: str):
    p = sub.add_parser(name, help=help_text)
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", default=None, help="output directory (default: config out_dir)")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: IWD_THREADS or 1)")
    return p


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="iwd", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    _add_job_parser(sub, "distill", "learn a weighted synthetic set")
    _add_job_parser(sub, "influence", "score every training instance")
    _add_job_parser(sub, "evaluate", "train on a saved synthetic set and test")
    _add_job_parser(sub, "ablate", "compare selection strategies across seeds")
    _add_job_parser(sub, "tau-sweep", "sweep the softmax temperature")
    _add_job_parser(sub, "loo-oracle", "leave-one-out ground truth vs influence")
    serve = sub.add_parser("serve", help="start the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return ap


def _resolve_threads(arg) -> int:
    if arg is not None:
        return max(int(arg), 1)
    env = os.environ.get("IWD_THREADS", "").strip()
    if env:
        try:
            return max(int(env), 1)
        except ValueError:
            print(f"iwd: ignoring non-integer IWD_THREADS={env!r}", file=sys.stderr)
    return 1


def _run_command(args) -> int:
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as exc:
        print(f"iwd: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"iwd: config is not valid JSON: {exc}", file=sys.stderr)
        return 2
    except ValidationError as exc:
        print(f"iwd: invalid config field: {first_error_field(exc)}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    out_dir = args.out if args.out is not None else cfg.out_dir
    threads = _resolve_threads(args.threads)
    try:
        result = run_job(args.command, cfg, out_dir, threads=threads)
    except MissingFieldError as exc:
        print(f"iwd: invalid config field: {exc.field}", file=sys.stderr)
        return 2
    except (ContractError, FormatError, NumericalError, SolverError, OSError) as exc:
        print(f"iwd: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    for name in result["artifacts"]:
        print(os.path.join(str(out_dir), name))
    print(json.dumps(result["summary"], sort_keys=True))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        import uvicorn

        from .service import app

        uvicorn.run(app, host=args.host, port=args.port)
        return 0
    assert args.command in JOBS
    return _run_command(args)


if __name__ == "__main__":
    sys.exit(main())
