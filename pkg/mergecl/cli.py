"""Command-line entry point: `mergecl run|merge|fisher|eval|sweep|oracle|serve`."""

import functools
import logging
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

import numpy as np
import typer
from pydantic import ValidationError

from mergecl.checkpoint import Checkpoint, load_checkpoint, model_from_checkpoint, save_checkpoint
from mergecl.config import ExperimentConfig, FisherEstimator, load_config, parse_config, worker_limit
from mergecl.errors import InputError, MergeClError, UsageError
from mergecl.experiment import build_stream, run_experiment, write_run_outputs
from mergecl.fisher import DEFAULT_EPSILON, estimate_fisher_exact, estimate_fisher_mc
from mergecl.merge import MergeSpec, MergeStrategy, apply_merge
from mergecl.metrics import accuracy, significant, write_sweep_csv
from mergecl.model import HEAD_PREFIX
from mergecl.oracle import random_tasks, verify_merge_optimality
from mergecl.taskstream import read_csv_dataset

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
ORACLE_TOLERANCE = 1e-10

app = typer.Typer(help="Continual learning by weight merging.", no_args_is_help=True, add_completion=False)


def _exits_on_error(command):
    """Map library errors to their exit codes; invalid arguments exit with 2, OS errors with 1."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except MergeClError as exc:
            typer.echo(f"error: {exc}", err=True)
            raise typer.Exit(exc.exit_code) from None
        except ValidationError as exc:
            typer.echo(f"error: {exc}", err=True)
            raise typer.Exit(2) from None
        except OSError as exc:
            typer.echo(f"error: {exc}", err=True)
            raise typer.Exit(1) from None

    return wrapper


@app.callback()
def main_callback(verbose: bool = typer.Option(False, "--verbose", "-v", help="Log at DEBUG level.")):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, force=True)


@app.command()
@_exits_on_error
def run(
    config_path: Path = typer.Argument(..., help="Experiment config (JSON)."),
    seed: Optional[int] = typer.Option(None, "--seed"),
    lam: Optional[float] = typer.Option(None, "--lambda"),
    strategy: Optional[str] = typer.Option(None, "--strategy"),
    out: Optional[Path] = typer.Option(None, "--out"),
    ledger: bool = typer.Option(False, "--ledger", help="Record the run in the ledger database."),
):
    """Run one experiment and write checkpoints, metrics.csv and summary.json."""
    config = load_config(config_path).with_overrides(
        seed=seed, lam=lam, strategy=strategy, out=str(out) if out is not None else None
    )
    started_at = datetime.now(timezone.utc)
    report = run_experiment(config)
    finished_at = datetime.now(timezone.utc)
    out_dir = write_run_outputs(report, config, config.output.out_dir, started_at, finished_at)
    if ledger:
        _record_in_ledger(report, str(out_dir), started_at, finished_at)
    typer.echo(f"last_acc {significant(report.last_acc)}")
    typer.echo(f"inc_acc {significant(report.inc_acc)}")


def _record_in_ledger(report, out_dir: str, started_at: datetime, finished_at: datetime) -> None:
    from sqlmodel import Session, SQLModel

    from db import engine
    from mergecl.ledger import record_run

    SQLModel.metadata.create_all(engine)
    with Session(engine) as session:
        run = record_run(session, report, out_dir, started_at, finished_at)
    typer.echo(f"ledger run {run.uuid}")


def _merge_mask(theta_a, theta_b) -> dict[str, bool]:
    # Head rows only --a has are classes new in --a; they are copied, everything else must align.
    return {name: name in theta_b or not name.startswith(HEAD_PREFIX) for name in theta_a}


@app.command()
@_exits_on_error
def merge(
    a: Path = typer.Option(..., "--a", help="Fine-tuned checkpoint (weight lambda)."),
    b: Path = typer.Option(..., "--b", help="Previous merged checkpoint (weight 1 - lambda)."),
    lam: float = typer.Option(..., "--lambda"),
    fisher_a: Optional[Path] = typer.Option(None, "--fisher-a"),
    fisher_b: Optional[Path] = typer.Option(None, "--fisher-b"),
    out: Path = typer.Option(..., "--out"),
    epsilon: float = typer.Option(DEFAULT_EPSILON, "--epsilon"),
):
    """CoMA merge of two checkpoints, or CoFiMA when both Fisher files are given."""
    if (fisher_a is None) != (fisher_b is None):
        raise UsageError("--fisher-a and --fisher-b must be given together")
    ckpt_a, ckpt_b = load_checkpoint(a), load_checkpoint(b)
    theta_a, theta_b = ckpt_a.params, ckpt_b.params
    mask = _merge_mask(theta_a, theta_b)
    if fisher_a is not None:
        fishers = [load_checkpoint(path).fisher for path in (fisher_a, fisher_b)]
        if any(f is None for f in fishers):
            raise InputError("a Fisher file holds no Fisher entries")
        spec = MergeSpec(strategy=MergeStrategy.cofima, lam=lam, epsilon=epsilon, mask=mask)
        merged = apply_merge(spec, theta_a, theta_b, fisher_t=fishers[0], fisher_anchor=fishers[1])
    else:
        merged = apply_merge(MergeSpec(strategy=MergeStrategy.coma, lam=lam, mask=mask), theta_a, theta_b)
    metadata = {**ckpt_a.metadata, "merge": {"a": str(a), "b": str(b), "lambda": lam, "fisher": fisher_a is not None}}
    save_checkpoint(out, Checkpoint(dict(merged), metadata))
    typer.echo(f"wrote {out}")


@app.command()
@_exits_on_error
def fisher(
    ckpt: Path = typer.Option(..., "--ckpt"),
    data: Path = typer.Option(..., "--data", help="CSV of 'label,f1,...,fd' rows."),
    out: Path = typer.Option(..., "--out"),
    estimator: FisherEstimator = typer.Option(FisherEstimator.exact, "--estimator"),
    samples: int = typer.Option(1, "--samples", min=1),
    seed: int = typer.Option(0, "--seed", min=0),
):
    """Diagonal Fisher of a checkpoint's model on a CSV dataset."""
    checkpoint = load_checkpoint(ckpt)
    model = model_from_checkpoint(checkpoint)
    dataset = read_csv_dataset(data)
    if estimator == FisherEstimator.exact:
        result = estimate_fisher_exact(model, dataset)
    else:
        result = estimate_fisher_mc(model, dataset, samples, seed)
    metadata = {k: v for k, v in checkpoint.metadata.items() if k in ("config_hash", "strategy", "task")}
    save_checkpoint(out, Checkpoint.build(fisher=result, **metadata))
    typer.echo(f"wrote {out} (mean Fisher {significant(float(result.flat().mean()))})")


@app.command("eval")
@_exits_on_error
def evaluate(
    ckpt: Path = typer.Argument(...),
    config_path: Path = typer.Option(..., "--config", help="Config whose stream to evaluate on."),
):
    """Accuracy of a checkpoint on every task of the stream its head covers."""
    model = model_from_checkpoint(load_checkpoint(ckpt))
    stream = build_stream(load_config(config_path))
    known = set(model.head.class_ids)
    covered = 0
    for task in stream:
        if not known.issuperset(task.class_set):
            break
        covered += 1
    if covered == 0:
        raise UsageError("the checkpoint's head does not cover the first task")
    seen = stream.seen_test(covered)
    predictions = model.predict(seen.features)
    start = 0
    for t, task in enumerate(stream.tasks[:covered], start=1):
        stop = start + len(task.test)
        typer.echo(f"task {t} acc {significant(accuracy(predictions[start:stop], seen.labels[start:stop]))}")
        start = stop
    typer.echo(f"acc_seen {significant(accuracy(predictions, seen.labels))}")


def _parse_grid(text: str) -> list[float]:
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"cannot parse lambda grid {text!r}") from None
    if not values:
        raise UsageError("the lambda grid is empty")
    return values


def _parse_seeds(text: str) -> list[int]:
    try:
        if ".." in text:
            low, high = (int(part) for part in text.split("..", 1))
            return list(range(low, high + 1))
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"cannot parse seeds {text!r}") from None


def _sweep_job(payload: tuple[str, bool]) -> dict[str, Any]:
    config_json, write_outputs = payload
    config = parse_config(config_json)
    report = run_experiment(config)
    if write_outputs:
        write_run_outputs(report, config, config.output.out_dir)
    return {
        "lambda": config.train.lam,
        "seed": config.train.seed,
        "strategy": report.strategy,
        "last_acc": report.last_acc,
        "inc_acc": report.inc_acc,
    }


def sweep_configs(
    config: ExperimentConfig, strategies: list[str], grid: list[float], seeds: list[int], out: Path
) -> list[ExperimentConfig]:
    """Cartesian product in (strategy, lambda, seed) order, each with its own output directory."""
    configs = []
    for strategy in strategies:
        for lam in grid:
            for seed in seeds:
                run_dir = out / f"{strategy}_lambda{lam:g}_seed{seed}"
                configs.append(config.with_overrides(seed=seed, lam=lam, strategy=strategy, out=str(run_dir)))
    return configs


@app.command()
@_exits_on_error
def sweep(
    config_path: Path = typer.Option(..., "--config"),
    lambda_grid: str = typer.Option("0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1", "--lambda-grid"),
    seeds: str = typer.Option("0..4", "--seeds"),
    strategies: list[str] = typer.Option([], "--strategy", help="Repeatable; default is the config's strategy."),
    out: Path = typer.Option(Path("runs/sweep"), "--out"),
    write_runs: bool = typer.Option(False, "--write-runs", help="Also write every run's directory."),
):
    """Run the lambda x seed grid in parallel and write a long-form sweep.csv."""
    config = load_config(config_path)
    configs = sweep_configs(
        config, strategies or [config.train.strategy.value], _parse_grid(lambda_grid), _parse_seeds(seeds), out
    )
    payloads = [(c.model_dump_json(by_alias=True), write_runs) for c in configs]
    workers = min(worker_limit(), len(payloads))
    logger.info("sweeping %d runs on %d workers", len(payloads), workers)
    if workers == 1:
        rows = [_sweep_job(payload) for payload in payloads]
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            rows = list(executor.map(_sweep_job, payloads))
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, out / "sweep.csv")
    typer.echo(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")


@app.command()
@_exits_on_error
def oracle(
    trials: int = typer.Option(100, "--trials", min=1),
    dim: int = typer.Option(10, "--dim", min=1),
    tasks: int = typer.Option(2, "--tasks", min=1),
    seed: int = typer.Option(0, "--seed", min=0),
):
    """Check Fisher-weighted averaging against the exact joint optimum of random quadratics."""
    rng = np.random.default_rng(seed)
    batch_gap = two_task_gap = 0.0
    for _ in range(trials):
        report = verify_merge_optimality(random_tasks(rng, tasks, dim))
        batch_gap = max(batch_gap, report.batch_gap)
        two_task_gap = max(two_task_gap, report.two_task_gap)
    max_gap = max(batch_gap, two_task_gap)
    typer.echo(f"batch_gap {significant(batch_gap)}")
    typer.echo(f"two_task_gap {significant(two_task_gap)}")
    typer.echo(f"max_gap {significant(max_gap)}")
    if not max_gap < ORACLE_TOLERANCE:
        raise typer.Exit(1)


@app.command()
def serve(
    host: str = typer.Option("127.0.0.1", "--host"),
    port: int = typer.Option(8000, "--port"),
    reload: bool = typer.Option(False, "--reload"),
):
    """Serve the run-ledger API."""
    import uvicorn

    uvicorn.run("mergecl.main:app", host=host, port=port, reload=reload)


def main() -> None:
    app()
