"""Synthetic evaluation bed: planted edits, scoring, and experiment drivers."""

import numpy as np
import pytest

from vecforge.container import to_bytes
from vecforge.errors import (
    DimensionMismatch,
    EmptyStream,
    IoFailure,
    ValidationError,
)
from vecforge.linalg import cholesky
from vecforge.merge import merge_task_arithmetic
from vecforge.purify import DecomposerKind, pave_purify
from vecforge.workbench import (
    LAYER1,
    LAYER2,
    ActivationDistribution,
    SyntheticTaskSpec,
    default_specs,
    eval_model,
    figure3_experiment,
    load_suite,
    merging_gain_experiment,
    run_activations,
    sample_inputs,
    save_suite,
    synth_suite,
    task_covariances,
    toy_forward,
)

SMALL = dict(input_dim=10, hidden_dim=12, output_dim=5, subspace_dim=4)


def small_specs(seed=0, **overrides):
    kwargs = dict(SMALL)
    kwargs.update(overrides)
    return default_specs(n_tasks=2, seed=seed, **kwargs)


# ============================================================================
# Suite construction
# ============================================================================


def test_zero_rank_zero_noise_finetuned_equals_base():
    specs = small_specs(planted_rank=0, noise_scale=0.0)
    suite = synth_suite(specs, base_seed=0)
    for ft in suite.finetuned:
        for layer in (LAYER1, LAYER2):
            np.testing.assert_array_equal(ft.get(layer), suite.base.get(layer))


def test_planted_delta_has_exact_rank_and_scale():
    specs = small_specs(planted_rank=1, noise_scale=0.0, delta_scale=2.5)
    suite = synth_suite(specs, base_seed=1)
    for spec in specs:
        for layer in (LAYER1, LAYER2):
            P = suite.ground_truth[spec.task_id][layer]
            s = np.linalg.svd(P, compute_uv=False)
            assert s[0] == pytest.approx(2.5, rel=1e-9)
            assert s[1] <= 1e-10 * s[0]


def test_noise_free_finetuned_equals_reference():
    specs = small_specs(noise_scale=0.0)
    suite = synth_suite(specs, base_seed=2)
    for ft, ref in zip(suite.finetuned, suite.references):
        for layer in (LAYER1, LAYER2):
            np.testing.assert_array_equal(ft.get(layer), ref.get(layer))


def test_reference_is_base_plus_planted():
    specs = small_specs()
    suite = synth_suite(specs, base_seed=3)
    for spec, ref in zip(specs, suite.references):
        for layer in (LAYER1, LAYER2):
            np.testing.assert_allclose(
                ref.get(layer) - suite.base.get(layer),
                suite.ground_truth[spec.task_id][layer],
                atol=1e-12,
            )


def test_suite_construction_is_deterministic():
    a = synth_suite(small_specs(), base_seed=4)
    b = synth_suite(small_specs(), base_seed=4)
    assert to_bytes(a.base) == to_bytes(b.base)
    for x, y in zip(a.finetuned + a.references, b.finetuned + b.references):
        assert to_bytes(x) == to_bytes(y)


def test_suite_lookup_helpers():
    suite = synth_suite(small_specs(), base_seed=5)
    assert suite.spec_for("task1").task_id == "task1"
    assert suite.reference_for("task0") is suite.references[0]
    with pytest.raises(ValidationError):
        suite.spec_for("nope")
    with pytest.raises(ValidationError):
        suite.reference_for("nope")


def test_suite_validation_errors():
    with pytest.raises(ValidationError):
        synth_suite([], base_seed=0)
    dup = [small_specs()[0], small_specs()[0]]
    with pytest.raises(ValidationError):
        synth_suite(dup, base_seed=0)
    mixed = [
        SyntheticTaskSpec(task_id="a", seed=0, input_dim=8, hidden_dim=8, output_dim=4,
                          planted_rank=1, activation=ActivationDistribution(4)),
        SyntheticTaskSpec(task_id="b", seed=1, input_dim=9, hidden_dim=8, output_dim=4,
                          planted_rank=1, activation=ActivationDistribution(4)),
    ]
    with pytest.raises(DimensionMismatch):
        synth_suite(mixed, base_seed=0)


def test_spec_validation_errors():
    with pytest.raises(DimensionMismatch):
        ActivationDistribution(0).validate(8)
    with pytest.raises(DimensionMismatch):
        ActivationDistribution(9).validate(8)
    with pytest.raises(ValidationError):
        ActivationDistribution(4, anisotropy=0.5).validate(8)
    bad_rank = SyntheticTaskSpec(task_id="t", seed=0, input_dim=4, hidden_dim=4,
                                 output_dim=2, planted_rank=5,
                                 activation=ActivationDistribution(2))
    with pytest.raises(DimensionMismatch):
        bad_rank.validate()
    bad_noise = SyntheticTaskSpec(task_id="t", seed=0, noise_scale=-0.1)
    with pytest.raises(ValidationError):
        bad_noise.validate()


def test_default_specs_layout():
    specs = default_specs(seed=7)
    assert [s.task_id for s in specs] == ["task0", "task1", "task2", "task3"]
    assert [s.seed for s in specs] == [7000, 7001, 7002, 7003]


# ============================================================================
# Input distribution and activations
# ============================================================================


def test_inputs_live_on_declared_subspace():
    spec = small_specs()[0]
    rng = np.random.default_rng(10)
    X = sample_inputs(spec, 200, rng)
    assert X.shape == (spec.input_dim, 200)
    # project out the subspace; nothing should remain
    from vecforge.workbench import _activation_basis

    Q = _activation_basis(spec)
    residual = X - Q @ (Q.T @ X)
    assert np.abs(residual).max() <= 1e-10


def test_isotropic_full_subspace_inputs_have_identity_covariance():
    spec = default_specs(
        n_tasks=1, seed=0, input_dim=6, hidden_dim=8, output_dim=4,
        subspace_dim=6, anisotropy=1.0,
    )[0]
    rng = np.random.default_rng(11)
    X = sample_inputs(spec, 10_000, rng)
    C = (X @ X.T) / 10_000
    assert np.abs(C - np.eye(6)).max() <= 0.1


def test_rank_one_inputs_give_rank_one_covariance():
    specs = small_specs(subspace_dim=1)
    suite = synth_suite(specs, base_seed=6)
    covs = task_covariances(suite.finetuned[0], specs[0], 256, 0)
    entry = covs.entries[LAYER1]
    raw = entry.matrix - entry.diag_boost * np.eye(entry.matrix.shape[0])
    s = np.linalg.svd(raw, compute_uv=False)
    assert s[1] <= 1e-8 * s[0]


def test_second_layer_sees_rectified_hidden_activations():
    specs = small_specs()
    suite = synth_suite(specs, base_seed=7)
    model = suite.finetuned[0]
    streams = run_activations(model, specs[0], 64, seed=3)
    X = streams[LAYER1].batches[0]
    H = streams[LAYER2].batches[0]
    np.testing.assert_array_equal(H, np.maximum(model.get(LAYER1) @ X, 0.0))
    assert streams[LAYER1].layer_name == LAYER1
    assert streams[LAYER2].layer_name == LAYER2


def test_empty_activation_run_is_rejected_downstream():
    specs = small_specs()
    suite = synth_suite(specs, base_seed=8)
    with pytest.raises(EmptyStream):
        task_covariances(suite.finetuned[0], specs[0], 0, 0)


def test_covariance_build_is_deterministic():
    specs = small_specs()
    suite = synth_suite(specs, base_seed=9)
    a = task_covariances(suite.finetuned[0], specs[0], 128, 5)
    b = task_covariances(suite.finetuned[0], specs[0], 128, 5)
    for layer in (LAYER1, LAYER2):
        np.testing.assert_array_equal(a.entries[layer].matrix, b.entries[layer].matrix)
        assert a.entries[layer].diag_boost == b.entries[layer].diag_boost


# ============================================================================
# Scoring
# ============================================================================


def test_reference_scores_one_against_itself():
    specs = small_specs()
    suite = synth_suite(specs, base_seed=10)
    for spec, ref in zip(specs, suite.references):
        assert eval_model(ref, spec, 256, 0, ref) == 1.0


def test_base_scores_strictly_below_reference():
    specs = default_specs(seed=11)
    suite = synth_suite(specs, base_seed=11)
    for spec, ref in zip(specs, suite.references):
        assert eval_model(suite.base, spec, 512, 0, ref) < 1.0


def test_eval_is_deterministic_and_validates():
    specs = small_specs()
    suite = synth_suite(specs, base_seed=12)
    args = (suite.finetuned[0], specs[0], 128, 4, suite.references[0])
    assert eval_model(*args) == eval_model(*args)
    with pytest.raises(ValidationError):
        eval_model(suite.finetuned[0], specs[0], 0, 0, suite.references[0])


# ============================================================================
# Pruning experiment
# ============================================================================


def test_pruning_at_full_rank_is_lossless():
    specs = default_specs(seed=13)
    suite = synth_suite(specs, base_seed=13)
    rows = figure3_experiment(
        suite, ranks=[32], decomposers=("plain_svd", "co_svd"), n_eval=512
    )
    for row in rows:
        i = [s.task_id for s in specs].index(row["task"])
        direct = eval_model(
            suite.finetuned[i], specs[i], 512, row["seed"], suite.references[i]
        )
        assert abs(row["score"] - direct) <= 1.0 / 512 + 1e-12


def test_covariance_guided_truncation_beats_controls():
    scores: dict[str, list[float]] = {}
    for s in range(10):
        suite = synth_suite(default_specs(seed=s), base_seed=s)
        rows = figure3_experiment(
            suite,
            ranks=[2, 4, 8],
            decomposers=(
                "plain_svd",
                "scaled_svd",
                "co_svd",
                "co_svd_random",
                "co_svd_crosstask",
            ),
            seed=s,
        )
        for row in rows:
            scores.setdefault(row["decomposer"], []).append(row["score"])
    mean = {k: float(np.mean(v)) for k, v in scores.items()}
    assert mean["co_svd"] > mean["scaled_svd"]
    assert mean["co_svd"] > mean["plain_svd"]
    assert mean["co_svd"] > mean["co_svd_crosstask"]
    assert mean["co_svd"] > mean["co_svd_random"]
    assert mean["plain_svd"] > mean["co_svd_random"]


def test_score_grows_with_rank_under_plain_truncation():
    suite = synth_suite(default_specs(seed=0), base_seed=0)
    grid = [2, 3, 4, 6, 8, 10, 12, 16, 24, 32]
    rows = figure3_experiment(suite, ranks=grid, decomposers=("plain_svd",))
    curve = [
        float(np.mean([r["score"] for r in rows if r["rank"] == rank]))
        for rank in grid
    ]
    inversions = sum(b < a - 1e-12 for a, b in zip(curve, curve[1:]))
    assert inversions <= 1


# ============================================================================
# Recovering the planted edit
# ============================================================================


def weighted_cos(delta, target, factors):
    num = 0.0
    aa = 0.0
    bb = 0.0
    for layer in (LAYER1, LAYER2):
        A = delta[layer] @ factors[layer]
        B = target[layer] @ factors[layer]
        num += float(np.sum(A * B))
        aa += float(np.sum(A * A))
        bb += float(np.sum(B * B))
    return num / np.sqrt(aa * bb)


def test_covariance_guided_truncation_recovers_planted_edit():
    """Across suites, covariance-guided rank-2 truncation should land closer
    to the noise-free specialist than plain truncation, both in action on
    task inputs and in covariance-weighted alignment with the planted delta.
    """
    n_suites = 30
    suite_action = 0
    suite_cos = 0
    for s in range(n_suites):
        specs = default_specs(seed=s)
        suite = synth_suite(specs, base_seed=s)
        rank_map = {LAYER1: 2, LAYER2: 2}
        err_co, err_pl, cos_co, cos_pl = [], [], [], []
        for i, spec in enumerate(suite.specs):
            ft = suite.finetuned[i]
            ref = suite.references[i]
            covs = task_covariances(ft, spec, 1024, 0)
            factors = {
                l: cholesky(covs.entries[l].matrix) for l in (LAYER1, LAYER2)
            }
            tv_co = pave_purify(ft, suite.base, covs, rank_map, DecomposerKind("co_svd"))
            tv_pl = pave_purify(ft, suite.base, covs, rank_map, DecomposerKind("plain_svd"))
            m_co = merge_task_arithmetic([tv_co], suite.base, 1.0).weights
            m_pl = merge_task_arithmetic([tv_pl], suite.base, 1.0).weights
            X = sample_inputs(spec, 512, np.random.default_rng(910_000 + spec.seed))
            want = toy_forward(ref, X)
            err_co.append(float(np.linalg.norm(toy_forward(m_co, X) - want)))
            err_pl.append(float(np.linalg.norm(toy_forward(m_pl, X) - want)))
            planted = suite.ground_truth[spec.task_id]
            cos_co.append(weighted_cos(tv_co.layers, planted, factors))
            cos_pl.append(weighted_cos(tv_pl.layers, planted, factors))
        suite_action += float(np.mean(err_co)) < float(np.mean(err_pl))
        suite_cos += float(np.mean(cos_co)) > float(np.mean(cos_pl))
    assert suite_action >= int(0.9 * n_suites)
    assert suite_cos >= int(0.9 * n_suites)


# ============================================================================
# Merging experiment and persistence
# ============================================================================


def test_merging_gain_experiment_smoke():
    specs = default_specs(seed=20, noise_scale=0.06)
    suite = synth_suite(specs, base_seed=20)
    plain, pure = merging_gain_experiment(
        suite, rho=0.875, lam=0.15, n_samples=256, n_eval=512
    )
    assert 0.0 <= plain <= 1.0 and 0.0 <= pure <= 1.0
    again = merging_gain_experiment(
        suite, rho=0.875, lam=0.15, n_samples=256, n_eval=512
    )
    assert (plain, pure) == again


def test_suite_round_trip_through_directory(tmp_path):
    specs = small_specs(seed=21)
    suite = synth_suite(specs, base_seed=21)
    save_suite(suite, tmp_path / "suite")
    back = load_suite(tmp_path / "suite")
    assert back.base_seed == 21
    assert back.specs == suite.specs
    assert to_bytes(back.base) == to_bytes(suite.base)
    for x, y in zip(back.finetuned + back.references, suite.finetuned + suite.references):
        assert to_bytes(x) == to_bytes(y)
    for spec in specs:
        for layer in (LAYER1, LAYER2):
            np.testing.assert_allclose(
                back.ground_truth[spec.task_id][layer],
                suite.ground_truth[spec.task_id][layer],
                atol=1e-12,
            )


def test_suite_load_errors(tmp_path):
    with pytest.raises(IoFailure):
        load_suite(tmp_path / "missing")
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "suite.json").write_text("{broken")
    with pytest.raises(ValidationError):
        load_suite(bad)
