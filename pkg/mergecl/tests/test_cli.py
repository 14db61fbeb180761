import csv
import json
from pathlib import Path
from typing import Callable

import numpy as np
import pytest
from typer.testing import CliRunner

from mergecl.autodiff import ParamSet
from mergecl.checkpoint import Checkpoint, load_checkpoint, model_from_checkpoint, save_checkpoint
from mergecl.cli import app
from mergecl.config import THREADS_ENV
from mergecl.experiment import METRICS_FILE, RUN_META_FILE, SUMMARY_FILE, fisher_file, params_file
from mergecl.fisher import FisherDiag, estimate_fisher_exact
from mergecl.taskstream import TaskStream, read_csv_dataset, write_csv_dataset

runner = CliRunner()

SMALL_CONFIG = {
    "stream": {"num_tasks": 2, "classes_per_task": 2, "samples_per_class": 20, "feature_dim": 4},
    "model": {"hidden_dims": [5]},
    "train": {"epochs": 2, "batch_size": 8, "strategy": "cofima", "lambda": 0.5},
}


@pytest.fixture(autouse=True)
def single_worker(monkeypatch: pytest.MonkeyPatch):
    monkeypatch.setenv(THREADS_ENV, "1")


@pytest.fixture(name="config_path")
def config_path_fixture(tmp_path: Path) -> Path:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return path


def invoke_run(config_path: Path, out: Path, *extra: str):
    return runner.invoke(app, ["run", str(config_path), "--out", str(out), *extra])


def test_run_writes_checkpoints_and_metrics(tmp_path: Path, config_path: Path):
    out = tmp_path / "run"

    result = invoke_run(config_path, out)

    assert result.exit_code == 0, result.output
    assert "inc_acc" in result.output
    for t in (1, 2):
        assert (out / params_file(t)).exists()
        assert (out / fisher_file(t)).exists()
    rows = list(csv.reader((out / METRICS_FILE).open()))
    assert [row[0] for row in rows[1:]] == ["1", "2", "all"]
    summary = json.loads((out / SUMMARY_FILE).read_text())
    assert summary["num_tasks"] == 2
    assert summary["strategy"] == "cofima"


def test_checkpoint_rebuilds_the_deployed_model(tmp_path: Path, config_path: Path):
    out = tmp_path / "run"
    invoke_run(config_path, out)

    model = model_from_checkpoint(load_checkpoint(out / params_file(2)))

    assert model.num_classes == 4
    assert load_checkpoint(out / params_file(2)).metadata["task"] == 2


def test_sequential_fine_tuning_writes_no_fisher_files(tmp_path: Path, config_path: Path):
    out = tmp_path / "run"

    result = invoke_run(config_path, out, "--strategy", "seq_ft")

    assert result.exit_code == 0, result.output
    assert (out / params_file(2)).exists()
    assert not list(out.glob("*.fisher.ckpt"))


def test_reruns_are_byte_identical(tmp_path: Path, config_path: Path):
    first, second = tmp_path / "first", tmp_path / "second"

    invoke_run(config_path, first, "--seed", "3")
    invoke_run(config_path, second, "--seed", "3")

    for name in [params_file(1), params_file(2), fisher_file(2), METRICS_FILE, SUMMARY_FILE]:
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_invalid_config_exits_with_usage_code(tmp_path: Path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"train": {"epochz": 1}}))

    result = runner.invoke(app, ["run", str(path)])

    assert result.exit_code == 2


def test_lambda_override_reaches_the_run(tmp_path: Path, config_path: Path):
    out = tmp_path / "run"

    result = invoke_run(config_path, out, "--lambda", "0.25", "--strategy", "coma")

    assert result.exit_code == 0, result.output
    assert json.loads((out / SUMMARY_FILE).read_text())["lambda"] == 0.25
    assert json.loads((out / RUN_META_FILE).read_text())["config"]["train"]["lambda"] == 0.25


def test_invalid_lambda_override_exits_with_usage_code(tmp_path: Path, config_path: Path):
    result = invoke_run(config_path, tmp_path / "run", "--lambda", "1.5")

    assert result.exit_code == 2


def test_merge_with_lambda_one_keeps_the_first_checkpoint(tmp_path: Path):
    a, b, out = tmp_path / "a.ckpt", tmp_path / "b.ckpt", tmp_path / "out.ckpt"
    rng = np.random.default_rng(0)
    save_checkpoint(a, Checkpoint.build(params=ParamSet({"w": rng.normal(size=(3, 2)), "v": rng.normal(size=4)})))
    save_checkpoint(b, Checkpoint.build(params=ParamSet({"w": rng.normal(size=(3, 2)), "v": rng.normal(size=4)})))

    result = runner.invoke(app, ["merge", "--a", str(a), "--b", str(b), "--lambda", "1", "--out", str(out)])

    assert result.exit_code == 0, result.output
    assert load_checkpoint(out).entries.keys() == load_checkpoint(a).entries.keys()
    assert load_checkpoint(out).params == load_checkpoint(a).params


def test_fisher_weighted_merge_hand_example(tmp_path: Path):
    paths = {name: tmp_path / f"{name}.ckpt" for name in ("a", "b", "fa", "fb", "out")}
    save_checkpoint(paths["a"], Checkpoint.build(params=ParamSet({"w": [4.0]})))
    save_checkpoint(paths["b"], Checkpoint.build(params=ParamSet({"w": [0.0]})))
    save_checkpoint(paths["fa"], Checkpoint.build(fisher=FisherDiag({"w": [1.0]})))
    save_checkpoint(paths["fb"], Checkpoint.build(fisher=FisherDiag({"w": [3.0]})))

    result = runner.invoke(
        app,
        [
            "merge",
            "--a", str(paths["a"]),
            "--b", str(paths["b"]),
            "--lambda", "0.5",
            "--fisher-a", str(paths["fa"]),
            "--fisher-b", str(paths["fb"]),
            "--out", str(paths["out"]),
        ],
    )

    assert result.exit_code == 0, result.output
    np.testing.assert_allclose(load_checkpoint(paths["out"]).params["w"], [1.0], rtol=0, atol=1e-15)


def test_equal_fisher_files_reduce_to_the_plain_merge(tmp_path: Path):
    rng = np.random.default_rng(1)
    a, b, fisher = tmp_path / "a.ckpt", tmp_path / "b.ckpt", tmp_path / "f.ckpt"
    save_checkpoint(a, Checkpoint.build(params=ParamSet({"w": rng.normal(size=5)})))
    save_checkpoint(b, Checkpoint.build(params=ParamSet({"w": rng.normal(size=5)})))
    save_checkpoint(fisher, Checkpoint.build(fisher=FisherDiag({"w": rng.uniform(0.1, 2.0, size=5)})))
    common = ["merge", "--a", str(a), "--b", str(b), "--lambda", "0.3"]

    runner.invoke(app, [*common, "--out", str(tmp_path / "plain.ckpt")])
    runner.invoke(app, [*common, "--fisher-a", str(fisher), "--fisher-b", str(fisher), "--out", str(tmp_path / "f.out")])

    plain = load_checkpoint(tmp_path / "plain.ckpt").params["w"]
    weighted = load_checkpoint(tmp_path / "f.out").params["w"]
    np.testing.assert_allclose(weighted, plain, rtol=0, atol=1e-14)


def test_merge_needs_both_fisher_files(tmp_path: Path):
    a, fa = tmp_path / "a.ckpt", tmp_path / "fa.ckpt"
    save_checkpoint(a, Checkpoint.build(params=ParamSet({"w": [1.0]})))
    save_checkpoint(fa, Checkpoint.build(fisher=FisherDiag({"w": [1.0]})))

    result = runner.invoke(
        app, ["merge", "--a", str(a), "--b", str(a), "--lambda", "0.5", "--fisher-a", str(fa), "--out", str(tmp_path / "o")]
    )

    assert result.exit_code == 2


def test_merge_of_misaligned_checkpoints_fails(tmp_path: Path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, Checkpoint.build(params=ParamSet({"w": [1.0, 2.0]})))
    save_checkpoint(b, Checkpoint.build(params=ParamSet({"w": [1.0]})))

    result = runner.invoke(app, ["merge", "--a", str(a), "--b", str(b), "--lambda", "0.5", "--out", str(tmp_path / "o")])

    assert result.exit_code == 1
    assert "'w'" in result.output


def test_corrupt_checkpoint_is_reported(tmp_path: Path):
    a = tmp_path / "a.ckpt"
    a.write_bytes(b"XXXX0000")

    result = runner.invoke(app, ["merge", "--a", str(a), "--b", str(a), "--lambda", "0.5", "--out", str(tmp_path / "o")])

    assert result.exit_code == 1
    assert "magic" in result.output


def test_fisher_command_matches_the_library(
    tmp_path: Path, config_path: Path, make_stream: Callable[..., TaskStream]
):
    out = tmp_path / "run"
    invoke_run(config_path, out, "--strategy", "seq_ft")
    data = tmp_path / "data.csv"
    write_csv_dataset(make_stream(num_tasks=1).tasks[0].train, data)
    fisher_out = tmp_path / "fisher.ckpt"

    result = runner.invoke(
        app, ["fisher", "--ckpt", str(out / params_file(1)), "--data", str(data), "--out", str(fisher_out)]
    )

    assert result.exit_code == 0, result.output
    model = model_from_checkpoint(load_checkpoint(out / params_file(1)))
    assert load_checkpoint(fisher_out).fisher == estimate_fisher_exact(model, read_csv_dataset(data))


def test_eval_reports_every_covered_task(tmp_path: Path, config_path: Path):
    out = tmp_path / "run"
    invoke_run(config_path, out)

    result = runner.invoke(app, ["eval", str(out / params_file(2)), "--config", str(config_path)])

    assert result.exit_code == 0, result.output
    assert "task 1 acc" in result.output
    assert "task 2 acc" in result.output
    summary = json.loads((out / SUMMARY_FILE).read_text())
    reported = float(result.output.split("acc_seen")[-1])
    assert reported == pytest.approx(summary["acc_seen"][-1], rel=1e-5)


def test_oracle_passes():
    result = runner.invoke(app, ["oracle", "--trials", "10", "--dim", "5"])

    assert result.exit_code == 0, result.output
    assert "max_gap" in result.output
    assert runner.invoke(app, ["oracle", "--trials", "10", "--dim", "5"]).output == result.output


def test_sweep_writes_one_row_per_run(tmp_path: Path, config_path: Path):
    out = tmp_path / "sweep"

    result = runner.invoke(
        app,
        [
            "sweep",
            "--config", str(config_path),
            "--lambda-grid", "0,1",
            "--seeds", "0..1",
            "--strategy", "coma",
            "--out", str(out),
        ],
    )

    assert result.exit_code == 0, result.output
    rows = list(csv.DictReader((out / "sweep.csv").open()))
    assert len(rows) == 4
    assert [(row["lambda"], row["seed"]) for row in rows] == [("0.0", "0"), ("0.0", "1"), ("1.0", "0"), ("1.0", "1")]
    assert {row["strategy"] for row in rows} == {"coma"}


def test_sweep_rejects_a_bad_grid(tmp_path: Path, config_path: Path):
    result = runner.invoke(
        app, ["sweep", "--config", str(config_path), "--lambda-grid", "a,b", "--out", str(tmp_path / "s")]
    )

    assert result.exit_code == 2
