from typing import Optional
from uuid import UUID

from fastapi import APIRouter, Depends, Query, status
from fastapi.exceptions import HTTPException
from sqlmodel import Session, func, select

from mergecl.dependency import get_session
from mergecl.models import Run, RunRead, TaskResult, TaskResultRead

router = APIRouter(prefix="/runs", tags=["runs"])

_PAGE_SIZE = 6


@router.get("/", name="run_list")
def run_list(
    session: Session = Depends(get_session),
    page: int = Query(1, ge=1),
    strategy: Optional[str] = None,
):
    count_query = select(func.count(Run.uuid))
    query = select(Run).order_by(Run.finished_at.desc())
    if strategy is not None:
        count_query = count_query.where(Run.strategy == strategy)
        query = query.where(Run.strategy == strategy)

    num_runs = session.exec(count_query).one()
    offset = (page - 1) * _PAGE_SIZE
    runs = session.exec(query.offset(offset).limit(_PAGE_SIZE)).all()

    next_page = page + 1 if (offset + _PAGE_SIZE) < num_runs else None

    return {
        "runs": [RunRead.model_validate(run).model_dump(mode="json") for run in runs],
        "total": num_runs,
        "next_page": next_page,
    }


def _get_run(session: Session, run_id: UUID) -> Run:
    run = session.get(Run, run_id)

    if not run:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail="Run not found")

    return run


@router.get("/{run_id}", name="run_detail", response_model=RunRead)
def run_detail(run_id: UUID, session: Session = Depends(get_session)):
    return _get_run(session, run_id)


@router.get("/{run_id}/tasks", name="run_tasks", response_model=list[TaskResultRead])
def run_tasks(run_id: UUID, session: Session = Depends(get_session)):
    run = _get_run(session, run_id)
    return session.exec(
        select(TaskResult).where(TaskResult.run_id == run.uuid).order_by(TaskResult.task)
    ).all()
