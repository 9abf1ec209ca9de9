import json
import warnings

import numpy as np
import pytest

from exporter import random_token_samples, write_sample_file
from exporter.cli import main
from vecforge.container import read_checkpoint, read_covariances

VOCAB = 96

MAPPING = {
    "encoder.layer.0.attention.self.query": "enc0.q",
    "encoder.layer.0.intermediate.dense": "enc0.up",
}


def write_manifest(tmp_path, name="man.json", **overrides):
    doc = {
        "model_id": "tiny-encoder:0",
        "mapping": dict(MAPPING),
        "sample": {"path": "samples.safetensors", "count": 256},
    }
    doc.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture()
def workdir(tmp_path):
    write_sample_file(random_token_samples(VOCAB, 8, 64, seed=2),
                      tmp_path / "samples.safetensors")
    write_manifest(tmp_path)
    return tmp_path


# === happy paths =================================================================


def test_export_weights_command(workdir):
    out = workdir / "w.safetensors"
    code = main(["export-weights", "--manifest", str(workdir / "man.json"),
                 "--out", str(out)])
    assert code == 0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ck = read_checkpoint(out)
    assert ck.linear_layers == sorted(MAPPING.values())


def test_export_cov_uses_manifest_sample_block(workdir):
    out = workdir / "c.safetensors"
    code = main(["export-cov", "--manifest", str(workdir / "man.json"),
                 "--out", str(out)])
    assert code == 0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        covs = read_covariances(out)
    assert all(e.sample_count == 256 for e in covs.entries.values())


def test_manifest_sample_path_is_manifest_relative(workdir, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    out = workdir / "c.safetensors"
    code = main(["export-cov", "--manifest", str(workdir / "man.json"),
                 "--out", str(out)])
    assert code == 0


def test_samples_and_n_flags_override(workdir):
    other = workdir / "other.safetensors"
    write_sample_file(random_token_samples(VOCAB, 2, 64, seed=7), other)
    out = workdir / "c.safetensors"
    code = main(["export-cov", "--manifest", str(workdir / "man.json"),
                 "--samples", str(other), "--n", "64", "--out", str(out)])
    assert code == 0
    covs = read_covariances(out)
    assert all(e.sample_count == 64 for e in covs.entries.values())


def test_make_samples_command(tmp_path):
    out = tmp_path / "s.safetensors"
    code = main(["make-samples", "--vocab", str(VOCAB), "--sequences", "4",
                 "--seq-len", "16", "--seed", "3", "--out", str(out)])
    assert code == 0
    ck = read_checkpoint(out)
    ids = ck.get("input_ids")
    assert ids.shape == (4, 16)
    assert np.array_equal(ids, random_token_samples(VOCAB, 4, 16, seed=3))


def test_model_id_override_changes_weights(workdir):
    a = workdir / "a.safetensors"
    b = workdir / "b.safetensors"
    base = ["export-weights", "--manifest", str(workdir / "man.json")]
    assert main(base + ["--out", str(a)]) == 0
    assert main(base + ["--out", str(b), "--model-id", "tiny-encoder:1"]) == 0
    ck_a, ck_b = read_checkpoint(a), read_checkpoint(b)
    assert ck_b.metadata["model_id"] == "tiny-encoder:1"
    assert any(
        not np.array_equal(ck_a.get(l), ck_b.get(l)) for l in ck_a.linear_layers
    )


def test_dtype_policy_flag(workdir):
    out = workdir / "w64.safetensors"
    code = main(["export-weights", "--manifest", str(workdir / "man.json"),
                 "--dtype-policy", "float64", "--out", str(out)])
    assert code == 0
    ck = read_checkpoint(out)
    assert all(ck.get(l).dtype == np.float64 for l in ck.linear_layers)


def test_reruns_are_byte_identical(workdir):
    args = ["export-cov", "--manifest", str(workdir / "man.json")]
    a = workdir / "a.safetensors"
    b = workdir / "b.safetensors"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


# === failure exit codes ==========================================================


def test_bad_manifest_exits_2(workdir):
    bad = write_manifest(workdir, name="bad.json",
                         mapping={"a": "same", "b": "same"})
    code = main(["export-weights", "--manifest", str(bad),
                 "--out", str(workdir / "w.safetensors")])
    assert code == 2


def test_missing_manifest_exits_4(tmp_path):
    code = main(["export-weights", "--manifest", str(tmp_path / "absent.json"),
                 "--out", str(tmp_path / "w.safetensors")])
    assert code == 4


def test_missing_sample_file_exits_4(tmp_path):
    write_manifest(tmp_path)
    code = main(["export-cov", "--manifest", str(tmp_path / "man.json"),
                 "--out", str(tmp_path / "c.safetensors")])
    assert code == 4


def test_no_sample_source_exits_2(workdir):
    man = write_manifest(workdir, name="nosample.json")
    doc = json.loads(man.read_text())
    del doc["sample"]
    man.write_text(json.dumps(doc))
    code = main(["export-cov", "--manifest", str(man),
                 "--out", str(workdir / "c.safetensors")])
    assert code == 2


def test_oversized_n_exits_2(workdir):
    code = main(["export-cov", "--manifest", str(workdir / "man.json"),
                 "--n", "100000", "--out", str(workdir / "c.safetensors")])
    assert code == 2


def test_unmapped_layer_exits_2(workdir):
    bad = write_manifest(workdir, name="unmapped.json",
                         mapping={"encoder.layer.9.output.dense": "x"})
    code = main(["export-weights", "--manifest", str(bad),
                 "--out", str(workdir / "w.safetensors")])
    assert code == 2


def test_hook_width_mismatch_exits_3(workdir):
    bad = write_manifest(workdir, name="emb.json",
                         mapping={"embeddings.word_embeddings": "emb"})
    code = main(["export-cov", "--manifest", str(bad),
                 "--out", str(workdir / "c.safetensors")])
    assert code == 3


def test_unknown_model_exits_4(workdir):
    code = main(["export-weights", "--manifest", str(workdir / "man.json"),
                 "--model-id", "no-such-model-anywhere",
                 "--out", str(workdir / "w.safetensors")])
    assert code == 4
