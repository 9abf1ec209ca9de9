"""Command line layer: exit codes, file outputs, and rerun determinism."""

import json

import numpy as np
import pytest

from vecforge.cli import main
from vecforge.container import (
    read_checkpoint,
    to_bytes,
    write_container,
)
from vecforge.covariance import ActivationStream, streams_to_container
from vecforge.merge import (
    emr_from_checkpoint,
    load_recipe,
    recipe_from_dict,
    run_recipe,
)

SUITE_FLAGS = [
    "--tasks", "2",
    "--input-dim", "10",
    "--hidden-dim", "12",
    "--output-dim", "5",
    "--subspace", "4",
]


@pytest.fixture()
def suite_dir(tmp_path):
    out = tmp_path / "suite"
    assert main(["synth", "--out", str(out), "--seed", "3", *SUITE_FLAGS]) == 0
    return out


def write_recipe(path, data):
    path.write_text(json.dumps(data, indent=2) + "\n")
    return path


def basic_recipe(method="task_arithmetic", purification=None, **extra):
    data = {
        "method": method,
        "inputs": [
            {"checkpoint": "suite/task_task0.safetensors", "covariance": "task0.cov.safetensors"},
            {"checkpoint": "suite/task_task1.safetensors", "covariance": "task1.cov.safetensors"},
        ],
        "base": "suite/base.safetensors",
        "lambda": 0.4,
    }
    if purification is not None:
        data["purification"] = purification
    data.update(extra)
    return data


def build_covs(tmp_path, suite_dir):
    for t in ("task0", "task1"):
        code = main([
            "cov",
            "--model", str(suite_dir / f"task_{t}.safetensors"),
            "--suite", str(suite_dir),
            "--samples", "256",
            "--out", str(tmp_path / f"{t[-5:]}.cov.safetensors"),
        ])
        assert code == 0


# ============================================================================
# Exit codes
# ============================================================================


def test_missing_input_file_exits_4(tmp_path, suite_dir):
    code = main([
        "eval",
        "--weights", str(tmp_path / "nope.safetensors"),
        "--suite", str(suite_dir),
        "--task", "task0",
    ])
    assert code == 4


def test_malformed_container_exits_4(tmp_path):
    junk = tmp_path / "junk.safetensors"
    junk.write_bytes(b"garbage")
    code = main([
        "cov", "--model", str(junk), "--acts", str(junk),
        "--out", str(tmp_path / "c.safetensors"),
    ])
    assert code == 4


def test_zero_synthetic_samples_exits_2(tmp_path, suite_dir):
    code = main([
        "cov",
        "--model", str(suite_dir / "task_task0.safetensors"),
        "--suite", str(suite_dir),
        "--samples", "0",
        "--out", str(tmp_path / "c.safetensors"),
    ])
    assert code == 2


def test_bad_budget_exits_2(tmp_path, suite_dir):
    build_covs(tmp_path, suite_dir)
    code = main([
        "alloc",
        "--models",
        str(suite_dir / "task_task0.safetensors"),
        str(suite_dir / "task_task1.safetensors"),
        "--covs",
        str(tmp_path / "task0.cov.safetensors"),
        str(tmp_path / "task1.cov.safetensors"),
        "--rho", "1.5",
        "--out", str(tmp_path / "alloc.txt"),
    ])
    assert code == 2


def test_model_covariance_count_mismatch_exits_2(tmp_path):
    code = main([
        "alloc",
        "--models", "a", "b",
        "--covs", "c",
        "--rho", "0.75",
        "--out", str(tmp_path / "alloc.txt"),
    ])
    assert code == 2


def test_nan_activations_exit_3(tmp_path, suite_dir):
    bad = np.full((12, 4), np.nan)
    streams = [
        ActivationStream("layer1.weight", [np.zeros((10, 4))], "task0"),
        ActivationStream("layer2.weight", [bad], "task0"),
    ]
    acts_path = tmp_path / "acts.safetensors"
    write_container(streams_to_container(streams, task_id="task0"), acts_path)
    code = main([
        "cov",
        "--model", str(suite_dir / "task_task0.safetensors"),
        "--acts", str(acts_path),
        "--out", str(tmp_path / "c.safetensors"),
    ])
    assert code == 3


def test_invalid_recipe_exits_2(tmp_path, suite_dir):
    build_covs(tmp_path, suite_dir)
    recipe = write_recipe(tmp_path / "r.json", basic_recipe(**{"lambda": 5.0}))
    code = main(["merge", "--recipe", str(recipe), "--out", str(tmp_path / "m.safetensors")])
    assert code == 2


def test_bad_thread_env_exits_2(tmp_path, suite_dir, monkeypatch):
    monkeypatch.setenv("VECFORGE_THREADS", "lots")
    code = main([
        "eval",
        "--weights", str(suite_dir / "base.safetensors"),
        "--suite", str(suite_dir),
        "--task", "task0",
        "--out", str(tmp_path / "e.csv"),
    ])
    assert code == 2


# ============================================================================
# Determinism across reruns
# ============================================================================


def test_synth_reruns_are_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--seed", "9", *SUITE_FLAGS]) == 0
    for rel in (
        "suite.json",
        "base.safetensors",
        "task_task0.safetensors",
        "ref_task1.safetensors",
    ):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_cov_reruns_are_byte_identical(tmp_path, suite_dir):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.cov.safetensors"
        code = main([
            "cov",
            "--model", str(suite_dir / "task_task0.safetensors"),
            "--suite", str(suite_dir),
            "--samples", "128",
            "--out", str(out),
        ])
        assert code == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_merge_reruns_are_byte_identical(tmp_path, suite_dir):
    build_covs(tmp_path, suite_dir)
    recipe = write_recipe(
        tmp_path / "r.json",
        basic_recipe(purification={"rho": 0.75}, seed=4),
    )
    blobs = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.safetensors"
        assert main(["merge", "--recipe", str(recipe), "--out", str(out)]) == 0
        blobs.append(out.read_bytes())
    assert blobs[0] == blobs[1]


def test_thread_count_does_not_change_merge_output(tmp_path, suite_dir):
    build_covs(tmp_path, suite_dir)
    recipe = write_recipe(tmp_path / "r.json", basic_recipe(purification={"rho": 0.75}))
    blobs = []
    for threads in ("1", "3"):
        out = tmp_path / f"t{threads}.safetensors"
        code = main(["--threads", threads, "merge", "--recipe", str(recipe), "--out", str(out)])
        assert code == 0
        blobs.append(out.read_bytes())
    assert blobs[0] == blobs[1]


# ============================================================================
# Output formats
# ============================================================================


def test_alloc_prints_per_model_ratios(tmp_path, suite_dir, capsys):
    build_covs(tmp_path, suite_dir)
    out = tmp_path / "alloc.txt"
    code = main([
        "alloc",
        "--models",
        str(suite_dir / "task_task0.safetensors"),
        str(suite_dir / "task_task1.safetensors"),
        "--covs",
        str(tmp_path / "task0.cov.safetensors"),
        str(tmp_path / "task1.cov.safetensors"),
        "--rho", "0.75",
        "--out", str(out),
    ])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    parsed = dict(line.split("\t") for line in lines)
    assert set(parsed) == {"task0", "task1"}
    for ratio in parsed.values():
        assert 0.0 < float(ratio) <= 1.0
    from vecforge.rank_alloc import read_allocation

    alloc = read_allocation(out)
    assert set(alloc.ranks) == {"task0", "task1"}


def test_eval_csv_format(tmp_path, suite_dir, capsys):
    argv = [
        "eval",
        "--weights", str(suite_dir / "ref_task0.safetensors"),
        "--suite", str(suite_dir),
        "--task", "task0",
        "--n", "64",
        "--seed", "5",
    ]
    assert main(argv) == 0
    stdout_text = capsys.readouterr().out
    lines = stdout_text.strip().splitlines()
    assert lines[0] == "task,n_eval,seed,score"
    task, n, seed, score = lines[1].split(",")
    assert (task, n, seed) == ("task0", "64", "5")
    assert float(score) == 1.0
    out = tmp_path / "e.csv"
    assert main(argv + ["--out", str(out)]) == 0
    assert out.read_text() == stdout_text


def test_rank_sweep_csv_format(tmp_path, suite_dir):
    out = tmp_path / "sweep.csv"
    code = main([
        "fig3",
        "--suite", str(suite_dir),
        "--ranks", "2,4",
        "--decomposers", "plain_svd,co_svd",
        "--samples", "128",
        "--n-eval", "128",
        "--out", str(out),
    ])
    assert code == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "decomposer,rank,task,score,seed"
    assert len(lines) == 1 + 2 * 2 * 2
    for line in lines[1:]:
        dec, rank, task, score, seed = line.split(",")
        assert dec in {"plain_svd", "co_svd"}
        assert int(rank) in {2, 4}
        assert task in {"task0", "task1"}
        assert 0.0 <= float(score) <= 1.0
        assert seed == "0"
    again = tmp_path / "again.csv"
    main([
        "fig3", "--suite", str(suite_dir), "--ranks", "2,4",
        "--decomposers", "plain_svd,co_svd", "--samples", "128",
        "--n-eval", "128", "--out", str(again),
    ])
    assert again.read_bytes() == out.read_bytes()


def test_empty_rank_list_exits_2(tmp_path, suite_dir):
    code = main([
        "fig3", "--suite", str(suite_dir), "--ranks", ",",
        "--out", str(tmp_path / "x.csv"),
    ])
    assert code == 2


# ============================================================================
# End-to-end pipeline
# ============================================================================


def test_merge_writes_resolved_recipe_sidecar(tmp_path, suite_dir):
    build_covs(tmp_path, suite_dir)
    recipe_path = write_recipe(
        tmp_path / "r.json", basic_recipe(purification={"rho": 0.75})
    )
    out = tmp_path / "merged.safetensors"
    assert main(["merge", "--recipe", str(recipe_path), "--out", str(out)]) == 0
    sidecar = tmp_path / "merged.safetensors.recipe.json"
    data = json.loads(sidecar.read_text())
    assert data["lambda"] == 0.4
    assert data["purification"]["gamma"] == pytest.approx(0.625)
    recipe_from_dict(data).validate()

    direct = run_recipe(load_recipe(recipe_path), root=tmp_path)
    assert out.read_bytes() == to_bytes(direct.weights)


def test_merge_emr_writes_artifact_sidecar(tmp_path, suite_dir):
    recipe_path = write_recipe(tmp_path / "r.json", basic_recipe(method="emr"))
    out = tmp_path / "merged.safetensors"
    assert main(["merge", "--recipe", str(recipe_path), "--out", str(out)]) == 0
    artifacts = emr_from_checkpoint(
        read_checkpoint(tmp_path / "merged.safetensors.emr.safetensors")
    )
    assert artifacts.task_order == ["task0", "task1"]
    read_checkpoint(out).validate()


def test_full_pipeline(tmp_path, suite_dir, capsys):
    build_covs(tmp_path, suite_dir)
    alloc_out = tmp_path / "alloc.txt"
    assert main([
        "alloc",
        "--models",
        str(suite_dir / "task_task0.safetensors"),
        str(suite_dir / "task_task1.safetensors"),
        "--covs",
        str(tmp_path / "task0.cov.safetensors"),
        str(tmp_path / "task1.cov.safetensors"),
        "--rho", "0.75",
        "--out", str(alloc_out),
    ]) == 0
    recipe_path = write_recipe(
        tmp_path / "r.json", basic_recipe(purification={"rho": 0.75})
    )
    merged = tmp_path / "merged.safetensors"
    assert main(["merge", "--recipe", str(recipe_path), "--out", str(merged)]) == 0
    capsys.readouterr()
    assert main([
        "eval",
        "--weights", str(merged),
        "--suite", str(suite_dir),
        "--task", "task1",
        "--n", "256",
    ]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    score = float(lines[1].split(",")[-1])
    assert 0.0 <= score <= 1.0
