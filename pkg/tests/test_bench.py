import csv
import io
import json

import numpy as np
import pytest

from conftest import tiny_config
from modno.bench import (NAMED_EXPERIMENTS, ExperimentConfig, ResultsTable, build_experiment_data,
                         emit_solution_plotdata, emit_summary, emit_table, experiment_config, load_config,
                         output_dir, pooled_mean_baselines, run_experiment)
from modno.exceptions import ConfigError, StageError
from modno.models import init_modno, modno_predict_grid
from modno.trainer import TrainConfig


def _table(**kw):
    base = dict(experiment="e", operators=["a", "b"], q_values=[1.0, 0.7], modno=[[0.01, 0.02], [0.5, 0.25]],
                single_don=[0.03, 0.04], mean_baseline=[0.9, 0.8], cost_ratio=[1.0, 0.85])
    base.update(kw)
    return ResultsTable(**base)


def test_results_table_validation():
    with pytest.raises(ConfigError):
        _table(modno=[[0.01, 0.02]])
    with pytest.raises(ConfigError):
        _table(modno=[[0.01], [0.02]])
    for bad in (float("nan"), float("inf"), -0.1):
        with pytest.raises(ConfigError):
            _table(modno=[[bad, 0.0], [0.0, 0.0]])
    assert ResultsTable.from_dict(_table().to_dict()) == _table()


def test_markdown_table():
    text = emit_table(_table(), "markdown")
    lines = text.splitlines()
    assert lines[0] == "| Operator | Single DON 100% data | MODNO 100% data | MODNO 70% data |"
    assert len(lines) == 2 + 2
    assert lines[3] == "| b | 4.00% | 50.00% | 25.00% |"


def test_csv_table_round_trip(tmp_path):
    path = tmp_path / "t.csv"
    text = emit_table(_table(), "csv", path)
    assert path.read_text() == text
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[1] == ["a", "3.00%", "1.00%", "2.00%"]
    assert [float(r[3].rstrip("%")) / 100 for r in rows[1:]] == [0.02, 0.25]
    with pytest.raises(ConfigError):
        emit_table(_table(), "latex")


def test_empty_and_single_column_tables():
    empty = ResultsTable("e", [], [1.0], [])
    assert emit_table(empty, "csv") == "Operator,MODNO 100% data\n"
    one = _table(q_values=[1.0], modno=[[0.1], [0.2]], single_don=None)
    assert one.header() == ["Operator", "MODNO 100% data"]


def test_summary_csv():
    rows = list(csv.reader(io.StringIO(emit_summary(_table()))))
    assert rows[0] == ["quantity", "key", "value"]
    assert rows[1:3] == [["cost_ratio", "1", "1.0"], ["cost_ratio", "0.7", "0.85"]]
    assert rows[3] == ["mean_baseline", "a", "90.00%"]


def test_config_json_round_trip_and_validation(tmp_path):
    for name in NAMED_EXPERIMENTS:
        cfg = experiment_config(name)
        back = ExperimentConfig.from_json(cfg.to_json())
        assert back == cfg and back.content_hash() == cfg.content_hash()
    cfg = experiment_config("exp2")
    assert cfg.query_dim == 2 and cfg.labels == ["porous_media_m2", "porous_media_m3", "porous_media_m4"]
    assert experiment_config("exp5").q_values == (1.0, 0.9, 0.8)
    with pytest.raises(ConfigError):
        experiment_config("exp9")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**cfg.to_dict(), "colour": 1})
    with pytest.raises(ConfigError):
        cfg.replace(operators=cfg.to_dict()["operators"][:2])
    with pytest.raises(ConfigError):
        cfg.replace(q_values=[0.0])
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert load_config(path) == cfg and load_config("exp2") == cfg
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)


def test_hashes_separate_data_from_training():
    cfg = experiment_config("exp1")
    other = cfg.replace(train={**cfg.to_dict()["train"], "epochs": 5})
    assert other.data_hash() == cfg.data_hash() and other.content_hash() != cfg.content_hash()
    assert cfg.replace(seed=1).data_hash() != cfg.data_hash()


def test_committed_configs_match_defaults():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    for name in NAMED_EXPERIMENTS:
        assert load_config(root / f"{name}.json") == experiment_config(name)


def test_experiment_data_and_cache(tmp_path):
    cfg = tiny_config()
    train, test = build_experiment_data(cfg, tmp_path)
    assert [s.n_functions for s in train] == [6] * 3 and [s.n_functions for s in test] == [4] * 3
    again, _ = build_experiment_data(cfg, tmp_path)
    assert all(np.array_equal(a.targets, b.targets) for a, b in zip(train, again))
    # identical memory layout too, so fresh and cached data round identically in training
    for a, b in zip(train, again):
        for name in ("inputs", "points", "targets"):
            assert getattr(a, name).flags.c_contiguous and getattr(b, name).flags.c_contiguous
    assert len(list(tmp_path.glob("data-*/*.bin"))) == 6
    assert all(0 < b for b in pooled_mean_baselines(train, test))


def test_space_time_meshes_hold_out_the_terminal_time():
    cfg = tiny_config("exp2", n_times=4)
    train, test = build_experiment_data(cfg)
    assert sorted(set(train[0].points[:, 1])) == pytest.approx([0.002, 0.004, 0.006, 0.008])
    assert set(test[0].points[:, 1]) == {0.01}


def test_plotdata():
    cfg = tiny_config()
    _, test = build_experiment_data(cfg)
    m = init_modno(16, [1, 1, 1], basis_count=4, branch_hidden=(8,), trunk_hidden=(8,), seed=0)
    text = emit_solution_plotdata(m, test[1], [2], op_index=1)
    lines = text.splitlines()
    assert lines[0] == "# x target_2 prediction_2"
    data = np.array([[float(v) for v in line.split()] for line in lines[1:]])
    assert data.shape == (16, 3)
    assert np.array_equal(data[:, 1], test[1].targets[2])
    assert np.array_equal(data[:, 2], modno_predict_grid(m, 1, test[1].inputs[2:3], test[1].points)[0])
    with pytest.raises(IndexError):
        emit_solution_plotdata(m, test[1], [4])


def test_run_experiment_is_reproducible(tmp_path):
    cfg = tiny_config()
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b")
    assert a == b
    da, db = output_dir(cfg, tmp_path / "a"), output_dir(cfg, tmp_path / "b")
    assert da.name == f"exp1-{cfg.content_hash()[:12]}"
    for name in ("results.csv", "results.md", "results.json", "summary.csv", "config.json"):
        assert (da / name).read_bytes() == (db / name).read_bytes()
    assert not (da / "partial.json").exists()
    assert {p.name for p in da.glob("*.ckpt")} == {"single_op0.ckpt", "single_op1.ckpt", "single_op2.ckpt",
                                                  "modno_q1.ckpt", "modno_q0.7.ckpt"}
    assert len(list(da.glob("plot_op*_q*.dat"))) == 6
    assert json.loads((da / "results.json").read_text())["config_hash"] == cfg.content_hash()
    assert len(a.modno) == 3 and len(a.modno[0]) == 2 and a.cost_ratio[0] == 1.0
    before = (da / "results.json").read_bytes()
    assert run_experiment(cfg, tmp_path / "a", cache_dir=tmp_path / "a") == a  # builds the cache
    assert run_experiment(cfg, tmp_path / "a", cache_dir=tmp_path / "a") == a  # reads it back
    assert (da / "results.json").read_bytes() == before


def test_stage_errors_are_tagged(tmp_path):
    cfg = tiny_config(train=TrainConfig(epochs=5, optimizer="sgd", trunk_lr=1e8, branch_lr=1e8))
    with np.errstate(all="ignore"), pytest.raises(StageError) as info:
        run_experiment(cfg, tmp_path)
    assert info.value.stage == "single_don"
    assert json.loads((output_dir(cfg, tmp_path) / "partial.json").read_text()) == {"modno": {},
                                                                                  "single_don": None}
    bad = tiny_config(n_grid=6)
    with pytest.raises(StageError) as info:
        run_experiment(bad)
    assert info.value.stage == "datagen"
