from dataclasses import replace

import numpy as np
import pytest

from app.errors import (
    BoundError,
    DuplicateSampleError,
    IngestionFormatError,
    InsufficientEventsError,
    JoinError,
    MissingHousekeepingError,
    PreprocessingOrderError,
)
from app.metrics.service import concordance_index
from extraction.archive import dataset_hash, load_dataset, report_path, save_dataset
from extraction.expression_pipeline import (
    ExpressionPipeline,
    assemble_dataset,
    load_clinical_csv,
    load_expression_csv,
    load_id_list,
    log_transform,
    normalize_to_reference,
    select_top_variance_genes,
)
from extraction.folds import parse_fold_plan_roles, serialize_fold_plans, split_folds
from extraction.patch_pipeline import PatchPipeline, average_patch_features, write_patch_set
from extraction.schemas import ExpressionMatrix, IngestionReport, PatchFeatureSet, SampleStatus, SurvivalDataset
from extraction.synthetic import SyntheticConfig, generate_synthetic


# ----------------- ingestion ----------------- #

@pytest.fixture
def toy(fixtures_dir):
    matrix = load_expression_csv(fixtures_dir / "toy_expression.csv")
    clinical = load_clinical_csv(fixtures_dir / "toy_clinical.csv")
    unlabeled = load_id_list(fixtures_dir / "toy_unlabeled.txt")
    return matrix, clinical, unlabeled


def test_expression_csv_drops_genes_with_missing_cells(toy):
    matrix, _, _ = toy
    assert matrix.sample_ids == ("S1", "S2", "S3", "S4", "S5", "S6")
    assert matrix.gene_ids == ("G1", "G2", "G3", "G4")
    assert matrix.dropped_genes == ("G5",)
    assert matrix.values[3, 1] == 40.0


def test_unparseable_cell_reports_file_coordinates(tmp_path):
    path = tmp_path / "expr.csv"
    path.write_text("id,A,B\nS1,1,2\nS2,3,x\n", encoding="utf-8")
    with pytest.raises(IngestionFormatError) as info:
        load_expression_csv(path)
    assert (info.value.row, info.value.column) == (3, 3)


def test_duplicate_sample_ids(tmp_path):
    path = tmp_path / "expr.csv"
    path.write_text("id,A\nS1,1\nS1,2\nS2,3\n", encoding="utf-8")
    with pytest.raises(DuplicateSampleError):
        load_expression_csv(path)
    matrix = load_expression_csv(path, dedup=True)
    assert matrix.sample_ids == ("S1", "S2")
    assert matrix.values[:, 0].tolist() == [1.0, 3.0]


def test_genes_as_rows_orientation(tmp_path):
    path = tmp_path / "expr.csv"
    path.write_text("gene,S1,S2\nA,1,2\nB,3,4\nC,5,6\n", encoding="utf-8")
    matrix = load_expression_csv(path, orientation="genes_as_rows")
    assert matrix.sample_ids == ("S1", "S2")
    assert matrix.gene_ids == ("A", "B", "C")
    np.testing.assert_array_equal(matrix.values, [[1, 3, 5], [2, 4, 6]])


def test_clinical_csv_errors(fixtures_dir, tmp_path):
    with pytest.raises(IngestionFormatError) as info:
        load_clinical_csv(fixtures_dir / "bad_clinical.csv")
    assert (info.value.row, info.value.column) == (3, 2)

    path = tmp_path / "clinical.csv"
    path.write_text("sample_id,time,status\nS1,0,1\n", encoding="utf-8")
    with pytest.raises(IngestionFormatError):
        load_clinical_csv(path)
    path.write_text("sample_id,time\nS1,1\n", encoding="utf-8")
    with pytest.raises(IngestionFormatError, match="status"):
        load_clinical_csv(path)


def test_assemble_dataset_status_counts(toy):
    matrix, clinical, unlabeled = toy
    ds = assemble_dataset(matrix, clinical, unlabeled)
    assert ds.status_counts() == {"event": 3, "censored": 2, "unlabeled": 1}
    assert np.isnan(ds.times[5])
    assert ds.statuses()[3] == SampleStatus.CENSORED


def test_assemble_dataset_join_errors(toy):
    matrix, clinical, _ = toy
    with pytest.raises(JoinError):
        assemble_dataset(matrix, clinical, ["S1"])
    with pytest.raises(JoinError):
        assemble_dataset(matrix, clinical, ["S99"])
    with pytest.raises(InsufficientEventsError):
        assemble_dataset(matrix, clinical[:1], [])


def test_top_variance_selection_keeps_original_order(toy):
    matrix, _, _ = toy
    selected = select_top_variance_genes(matrix, 3)
    assert selected.gene_ids == ("G1", "G2", "G4")
    with pytest.raises(BoundError):
        select_top_variance_genes(matrix, 0)
    with pytest.raises(BoundError):
        select_top_variance_genes(matrix, 5)


def test_pipeline_applies_log_after_selection(toy):
    matrix, _, _ = toy
    out = ExpressionPipeline(top_k=3).run(matrix)
    assert out.stage == "log_transformed"
    assert out.values[0, 0] == pytest.approx(1.0)   # log2(1 + 1)
    assert out.values[5, 0] == pytest.approx(6.0)   # log2(1 + 63)


def test_pipeline_refuses_out_of_order_steps(toy):
    matrix, _, _ = toy
    pipeline = ExpressionPipeline(top_k=3)
    logged = pipeline.log_transform(matrix)
    with pytest.raises(PreprocessingOrderError):
        pipeline.select(logged)


def test_housekeeping_normalization_factor(toy):
    matrix, _, _ = toy
    reference = ExpressionMatrix(sample_ids=("R1", "R2"), gene_ids=("G3",), values=np.array([[5.0], [7.0]]))
    out = normalize_to_reference(matrix, reference, ["G3"])
    assert out.normalization_factor == pytest.approx(2.0)
    np.testing.assert_allclose(out.values, 2.0 * matrix.values)
    with pytest.raises(MissingHousekeepingError):
        normalize_to_reference(matrix, reference, ["G1"])


def test_added_cohort_is_scaled_onto_the_labeled_one(toy):
    matrix, _, _ = toy
    extra = ExpressionMatrix(sample_ids=("X1", "X2"), gene_ids=("G1", "G2", "G3", "G4"),
                             values=np.array([[2.0, 15.0, 1.0, 1.0], [5.0, 25.0, 2.0, 2.0]]))
    report = IngestionReport()
    merged = ExpressionPipeline(housekeeping_gene_ids=["G3"]).add_cohort(matrix, extra, report)
    assert merged.sample_ids[-2:] == ("X1", "X2")
    np.testing.assert_array_equal(merged.values[:6], matrix.values)
    np.testing.assert_allclose(merged.values[6:], 2.0 * extra.values)
    assert merged.values[6:, 2].mean() == pytest.approx(merged.values[:6, 2].mean())
    assert report.extra["cohort_normalization_factor"] == "2"
    assert merged.normalization_factor is None

    with pytest.raises(PreprocessingOrderError):
        ExpressionPipeline(housekeeping_gene_ids=["G3"]).add_cohort(log_transform(matrix), extra)


# ----------------- folds ----------------- #

def test_fold_plans_partition_labeled_samples(small_cohort):
    ds, _ = small_cohort
    plans = split_folds(ds, k=5, repeats=2, seed=1)
    labeled = set(np.flatnonzero(ds.labeled_mask).tolist())
    unlabeled = set(np.flatnonzero(ds.unlabeled_mask).tolist())

    for plan in plans:
        seen = []
        for split in plan.triples():
            train, val, test = set(split.train), set(split.val), set(split.test)
            assert not train & test and not train & val and not val & test
            assert not (val | test) & unlabeled
            held_unlabeled = {i for i in unlabeled if plan.fold_assignments[i] == split.fold}
            assert not train & held_unlabeled
            assert train | val | test | held_unlabeled == labeled | unlabeled
            seen.extend(split.test.tolist())
        assert sorted(seen) == sorted(labeled)


def test_fold_plans_are_seeded(small_cohort):
    ds, _ = small_cohort
    a = split_folds(ds, k=5, repeats=2, seed=4)
    b = split_folds(ds, k=5, repeats=2, seed=4)
    c = split_folds(ds, k=5, repeats=2, seed=5)
    for pa, pb in zip(a, b):
        np.testing.assert_array_equal(pa.fold_assignments, pb.fold_assignments)
        np.testing.assert_array_equal(pa.val_mask, pb.val_mask)
    assert not np.array_equal(a[0].fold_assignments, c[0].fold_assignments)
    assert not np.array_equal(a[0].fold_assignments, a[1].fold_assignments)


def test_stratified_folds_balance_events(small_cohort):
    ds, _ = small_cohort
    plan = split_folds(ds, k=5, repeats=1, seed=2)[0]
    events = [int(ds.event_mask[split.test].sum()) for split in plan.triples()]
    assert max(events) - min(events) <= 1


def test_fold_count_bounds(small_cohort):
    ds, _ = small_cohort
    with pytest.raises(BoundError):
        split_folds(ds, k=1)
    with pytest.raises(BoundError):
        split_folds(ds, k=int(ds.labeled_mask.sum()) + 1)
    with pytest.raises(BoundError):
        split_folds(ds, val_fraction=1.0)


def test_fold_plan_text_lists_every_role(small_cohort):
    ds, _ = small_cohort
    plans = split_folds(ds, k=4, repeats=1, seed=0)
    roles = parse_fold_plan_roles(serialize_fold_plans(plans, ds.sample_ids))
    split = plans[0].triple(2)
    assert sorted(roles[(0, 2)]["test"]) == sorted(ds.sample_ids[i] for i in split.test)
    assert sum(len(v) for v in roles[(0, 2)].values()) == ds.n_samples
    with pytest.raises(IngestionFormatError):
        parse_fold_plan_roles("sample_id\trepeat\n")


# ----------------- archives ----------------- #

def test_archive_preserves_content_hash(small_cohort, tmp_path):
    ds, beta = small_cohort
    digest = save_dataset(ds, tmp_path / "cohort", beta=beta)
    loaded, loaded_beta = load_dataset(tmp_path / "cohort.npz")

    assert dataset_hash(loaded, loaded_beta) == digest
    assert loaded.sample_ids == ds.sample_ids
    np.testing.assert_array_equal(loaded.status, ds.status)
    np.testing.assert_array_equal(np.isnan(loaded.times), ds.unlabeled_mask)
    np.testing.assert_allclose(loaded_beta, beta)
    assert report_path(tmp_path / "cohort.npz").exists()


def test_archive_with_patches(small_cohort, tmp_path):
    ds, _ = small_cohort
    ds = ds.subset(range(3))
    rng = np.random.default_rng(0)
    patches = tuple(PatchFeatureSet(sample_id=sid, patch_features=rng.normal(size=(i + 1, 6)))
                    for i, sid in enumerate(ds.sample_ids))
    ds = replace(ds, patches=patches)
    save_dataset(ds, tmp_path / "with_patches")
    loaded, _ = load_dataset(tmp_path / "with_patches.npz")
    assert [p.n_patches for p in loaded.patches] == [1, 2, 3]
    np.testing.assert_allclose(loaded.patches[2].patch_features, patches[2].patch_features)


def test_missing_archive(tmp_path):
    with pytest.raises(IngestionFormatError):
        load_dataset(tmp_path / "absent.npz")


# ----------------- synthetic ----------------- #

def test_synthetic_censoring_matches_target():
    ds, beta = generate_synthetic(SyntheticConfig(n_samples=4000, d=5, censor_rate=0.3, seed=0))
    counts = ds.status_counts()
    assert counts["censored"] / ds.n_samples == pytest.approx(0.3, abs=0.03)
    assert beta.shape == (5,)


def test_synthetic_sparsity_and_unlabeled_share(small_cohort):
    ds, _ = small_cohort
    assert ds.status_counts()["unlabeled"] == 20
    _, beta = generate_synthetic(SyntheticConfig(n_samples=10, d=10, true_beta_sparsity=0.7, seed=1))
    assert int((beta == 0).sum()) == 7
    assert np.linalg.norm(beta) == pytest.approx(1.0)


def test_true_predictor_concordance_on_a_dense_draw():
    ds, beta = generate_synthetic(SyntheticConfig(n_samples=2000, d=5, censor_rate=0.5, seed=4))
    assert np.all(beta != 0)
    risk = ds.features @ beta
    t, event = ds.times, ds.status == 1

    hits, pairs = 0.0, 0
    for i in np.flatnonzero(event):
        later = t > t[i]
        pairs += int(later.sum())
        hits += float(np.sum(risk[i] > risk[later]) + 0.5 * np.sum(risk[i] == risk[later]))
    assert concordance_index(risk, t, ds.status) == pytest.approx(hits / pairs, abs=1e-12)
    assert hits / pairs > 0.6
    assert ds.status_counts()["censored"] / ds.n_samples == pytest.approx(0.5, abs=0.05)


def test_pool_needs_distinct_sample_ids():
    cohort, _ = generate_synthetic(SyntheticConfig(n_samples=10, d=3, seed=1))
    pool, _ = generate_synthetic(SyntheticConfig(n_samples=5, d=3, seed=2, id_prefix="U"))
    merged = SurvivalDataset.concat(pool.as_unlabeled(), cohort)
    assert merged.sample_ids[:2] == ("U00000", "U00001")
    assert merged.status_counts()["unlabeled"] == 5
    with pytest.raises(DuplicateSampleError):
        SurvivalDataset.concat(cohort, cohort)


# ----------------- patch features ----------------- #

def test_patch_directory_pairs_augmented_files(tmp_path):
    rng = np.random.default_rng(0)
    a = PatchFeatureSet("A", rng.normal(size=(3, 8)), rng.normal(size=(3, 8)))
    b = PatchFeatureSet("B", rng.normal(size=(1, 8)))
    write_patch_set(a, tmp_path)
    write_patch_set(b, tmp_path)
    (tmp_path / "notes.md").write_text("ignored", encoding="utf-8")

    sets = PatchPipeline(expected_width=8).load_directory(tmp_path, ["A", "B"])
    assert sets["A"].augmented_patch_features is not None
    assert sets["B"].augmented_patch_features is None

    student, teacher = average_patch_features([sets["A"], sets["B"]])
    np.testing.assert_allclose(student[0], a.patch_features.mean(axis=0))
    assert teacher is None

    with pytest.raises(IngestionFormatError):
        PatchPipeline(expected_width=16).load_directory(tmp_path)
    with pytest.raises(JoinError):
        PatchPipeline(expected_width=8).load_directory(tmp_path, ["A", "C"])


def test_orphan_augmented_file(tmp_path):
    np.save(tmp_path / "X.aug.npy", np.zeros((2, 4)))
    with pytest.raises(JoinError):
        PatchPipeline(expected_width=4).load_directory(tmp_path)
