from datetime import datetime
from typing import List, Optional
from uuid import UUID, uuid4

from sqlmodel import Column, Field, Relationship, SQLModel, String


# Common base model for the Run resource.
# Defines the fields shared by the table and the read model.
class RunBase(SQLModel):
    config_hash: str = Field(sa_column=Column(String(16), index=True))
    strategy: str = Field(sa_column=Column(String(32), index=True))
    lam: float = Field(ge=0, le=1)
    seed: int = Field(ge=0)
    num_tasks: int = Field(ge=1)
    last_acc: float = Field(ge=0, le=100)
    inc_acc: float = Field(ge=0, le=100)
    out_dir: Optional[str] = None
    started_at: datetime
    finished_at: datetime


# Database model for the Run resource.
# One finished experiment; run.tasks returns its per-task results.
class Run(RunBase, table=True):
    uuid: UUID = Field(default_factory=uuid4, primary_key=True)
    tasks: List["TaskResult"] = Relationship(back_populates="run")


# Read model for the Run resource, as returned by the API.
class RunRead(RunBase):
    uuid: UUID


# Common base model for the TaskResult resource.
class TaskResultBase(SQLModel):
    task: int = Field(ge=1)
    acc_seen: float = Field(ge=0, le=100)
    merge_count: int = Field(default=0, ge=0)
    wall_time: float = Field(default=0.0, ge=0)
    # Foreign key connecting the result to its run at the database level.
    run_id: UUID = Field(default=None, foreign_key="run.uuid")


# Database model for the TaskResult resource.
class TaskResult(TaskResultBase, table=True):
    uuid: UUID = Field(default_factory=uuid4, primary_key=True)
    # ORM relationship: task_result.run returns the associated Run object.
    run: Run = Relationship(back_populates="tasks")


class TaskResultRead(TaskResultBase):
    uuid: UUID
