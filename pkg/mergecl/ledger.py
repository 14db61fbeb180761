import logging
from datetime import datetime
from typing import Optional

from sqlmodel import Session

from mergecl.models import Run, TaskResult
from mergecl.strategies import ExperimentReport

logger = logging.getLogger(__name__)


def record_run(
    session: Session,
    report: ExperimentReport,
    out_dir: Optional[str],
    started_at: datetime,
    finished_at: datetime,
) -> Run:
    """Store a finished run and its per-task results."""
    run = Run(
        config_hash=report.config_hash,
        strategy=report.strategy,
        lam=report.lam,
        seed=report.seed,
        num_tasks=report.num_tasks,
        last_acc=report.last_acc,
        inc_acc=report.inc_acc,
        out_dir=out_dir,
        started_at=started_at,
        finished_at=finished_at,
    )
    session.add(run)
    for task, acc in enumerate(report.acc_seen, start=1):
        session.add(
            TaskResult(
                task=task,
                acc_seen=acc,
                merge_count=report.merge_counts[task - 1],
                wall_time=report.wall_times[task - 1],
                run=run,
            )
        )
    session.commit()
    session.refresh(run)
    logger.info("recorded run %s (%s, seed %d)", run.uuid, run.strategy, run.seed)
    return run
