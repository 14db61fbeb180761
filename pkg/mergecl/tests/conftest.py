from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from fastapi.testclient import TestClient
from sqlmodel import Session, SQLModel, create_engine
from sqlmodel.pool import StaticPool

from mergecl.autodiff import ParamSet
from mergecl.config import TrainConfig
from mergecl.dependency import get_session
from mergecl.main import app
from mergecl.model import Activation, MlpConfig, expand_head, init_model
from mergecl.models import Run, TaskResult
from mergecl.taskstream import StreamConfig, gen_gaussian_stream


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-seed replications that take minutes")


@pytest.fixture(scope="function", name="session")
def session_fixture():
    engine = create_engine(
        "sqlite://", connect_args={"check_same_thread": False}, poolclass=StaticPool
    )
    SQLModel.metadata.create_all(engine)

    with Session(engine) as session:
        yield session


@pytest.fixture(name="client")
def client_fixture(session: Session):
    def get_session_override():
        return session

    app.dependency_overrides[get_session] = get_session_override

    client = TestClient(app)
    yield client
    app.dependency_overrides.clear()


@pytest.fixture(scope="session")
def make_stream():
    def _make_stream(**kwargs):
        config = StreamConfig(
            num_tasks=kwargs.get("num_tasks", 3),
            classes_per_task=kwargs.get("classes_per_task", 2),
            samples_per_class=kwargs.get("samples_per_class", 20),
            feature_dim=kwargs.get("feature_dim", 4),
            class_separation=kwargs.get("class_separation", 3.0),
            within_class_std=kwargs.get("within_class_std", 1.0),
            seed=kwargs.get("seed", 0),
            projection_dim=kwargs.get("projection_dim"),
        )
        return gen_gaussian_stream(config)

    return _make_stream


@pytest.fixture(scope="session")
def make_model():
    """Backbone of the given shape; `classes` expands the head for task 1."""

    def _make_model(**kwargs):
        config = MlpConfig(
            input_dim=kwargs.get("input_dim", 4),
            hidden_dims=kwargs.get("hidden_dims", [5]),
            activation=kwargs.get("activation", Activation.tanh),
            seed=kwargs.get("seed", 0),
        )
        model = init_model(config)
        classes = kwargs.get("classes")
        if classes:
            model = expand_head(model, classes, task_id=1)
        return model

    return _make_model


@pytest.fixture(scope="session")
def make_params():
    """Random ParamSet with the given {name: shape} layout."""

    def _make_params(rng: np.random.Generator, shapes=None, scale: float = 1.0):
        shapes = shapes or {"a": (3,), "b": (2, 2), "c": ()}
        return ParamSet({name: scale * rng.normal(size=shape) for name, shape in shapes.items()})

    return _make_params


@pytest.fixture(scope="session")
def train_config():
    def _train_config(**kwargs):
        defaults = {
            "lr_backbone": 0.05,
            "lr_head": 0.1,
            "epochs": 2,
            "batch_size": 8,
            "seed": 0,
            "ca_samples_per_class": 16,
            "ca_epochs": 2,
        }
        defaults.update(kwargs)
        return TrainConfig.model_validate(defaults)

    return _train_config


@pytest.fixture(scope="session")
def create_run():
    def _create_run(session: Session, **kwargs):
        finished_at = kwargs.get("finished_at", datetime.now(timezone.utc))
        run = Run(
            config_hash=kwargs.get("config_hash", "0123456789abcdef"),
            strategy=kwargs.get("strategy", "cofima"),
            lam=kwargs.get("lam", 0.5),
            seed=kwargs.get("seed", 0),
            num_tasks=kwargs.get("num_tasks", 2),
            last_acc=kwargs.get("last_acc", 80.0),
            inc_acc=kwargs.get("inc_acc", 90.0),
            out_dir=kwargs.get("out_dir", "runs/test"),
            started_at=finished_at - timedelta(seconds=5),
            finished_at=finished_at,
        )
        session.add(run)
        for task, acc in enumerate(kwargs.get("acc_seen", [100.0, 80.0]), start=1):
            session.add(TaskResult(task=task, acc_seen=acc, merge_count=1, wall_time=1.0, run=run))
        session.commit()
        session.refresh(run)
        return run

    return _create_run
