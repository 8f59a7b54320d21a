"""Tests for dataset assembly, file IO, and validation."""

import numpy as np
import pytest

from stapdp.data import (
    DataError,
    Dataset,
    DistanceSet,
    SchemaConfig,
    build_dataset,
    empty_dataset,
    load_dataset,
    save_dataset,
    validate,
)


def toy_dataset():
    """Three subjects, one with two occasions, mixed distance sets."""
    return build_dataset(
        subject_ids=["b", "a", "b", "c"],
        occasions=[1, 1, 2, 1],
        y=[2.0, 1.0, 3.0, 4.0],
        X=[[1.0, 0.5], [1.0, -0.5], [1.0, 0.0], [1.0, 1.5]],
        Z=[[1.0], [1.0], [1.0], [1.0]],
        w=[1.0, 2.0, 1.0, 1.0],
        distance_values={
            ("b", 1): [0.9, 0.2],
            ("a", 1): [0.5],
            ("c", 1): [],
        },
        radius=1.0,
        x_names=("intercept", "z1"),
        z_names=("re_int",),
    )


class TestDistanceSet:
    def test_values_sorted(self):
        ds = DistanceSet(np.array([0.9, 0.1, 0.5]), radius=1.0)
        assert np.array_equal(ds.values, [0.1, 0.5, 0.9])
        assert len(ds) == 3

    def test_empty_allowed(self):
        assert len(DistanceSet(np.array([]), radius=1.0)) == 0

    def test_out_of_range_rejected(self):
        with pytest.raises(DataError):
            DistanceSet(np.array([1.2]), radius=1.0)
        with pytest.raises(DataError):
            DistanceSet(np.array([-0.1]), radius=1.0)
        with pytest.raises(DataError):
            DistanceSet(np.array([np.nan]), radius=1.0)


class TestSchemaConfig:
    def test_json_round_trip(self, tmp_path):
        schema = SchemaConfig(
            radius=2.5,
            id_col="subject",
            x_cols=("age", "sex"),
            z_cols=("re_int",),
            include_intercept=False,
            n_basis=9,
        )
        path = tmp_path / "schema.json"
        schema.to_json(path)
        assert SchemaConfig.from_json(path) == schema

    def test_defaults_fill_missing_keys(self, tmp_path):
        path = tmp_path / "schema.json"
        path.write_text('{"radius": 1.0}\n')
        schema = SchemaConfig.from_json(path)
        assert schema.id_col == "id"
        assert schema.n_basis == 7
        assert schema.include_intercept

    def test_bad_radius_rejected(self):
        with pytest.raises(DataError):
            SchemaConfig(radius=-1.0)


class TestBuildDataset:
    def test_rows_canonically_ordered(self):
        ds = toy_dataset()
        assert ds.subject_ids == ("a", "b", "c")
        assert np.array_equal(ds.row_subject, [0, 1, 1, 2])
        assert list(ds.occasions) == [1, 1, 2, 1]
        assert np.array_equal(ds.y, [1.0, 2.0, 3.0, 4.0])

    def test_input_order_is_irrelevant(self):
        """Any row permutation assembles to the same canonical Dataset."""
        base = toy_dataset()
        perm = [3, 0, 2, 1]
        ids = ["b", "a", "b", "c"]
        occ = [1, 1, 2, 1]
        shuffled = build_dataset(
            subject_ids=[ids[i] for i in perm],
            occasions=[occ[i] for i in perm],
            y=np.array([2.0, 1.0, 3.0, 4.0])[perm],
            X=np.array([[1.0, 0.5], [1.0, -0.5], [1.0, 0.0], [1.0, 1.5]])[perm],
            Z=np.ones((4, 1)),
            w=np.array([1.0, 2.0, 1.0, 1.0])[perm],
            distance_values={("b", 1): [0.2, 0.9], ("a", 1): [0.5], ("c", 1): []},
            radius=1.0,
            x_names=("intercept", "z1"),
            z_names=("re_int",),
        )
        assert np.array_equal(shuffled.y, base.y)
        assert np.array_equal(shuffled.X, base.X)
        assert np.array_equal(shuffled.w, base.w)
        assert all(
            np.array_equal(a.values, b.values)
            for a, b in zip(shuffled.distances, base.distances)
        )

    def test_distances_for_unknown_pair_rejected(self):
        with pytest.raises(DataError, match="unknown subject-occasion"):
            build_dataset(
                subject_ids=["a"], occasions=[1], y=[0.0], X=[[1.0]], Z=[],
                w=[1.0], distance_values={("a", 2): [0.3]}, radius=1.0,
            )

    def test_row_bounds_are_contiguous(self):
        ds = toy_dataset()
        starts, ends = ds.row_bounds()
        assert np.array_equal(starts, [0, 1, 3])
        assert np.array_equal(ends, [1, 3, 4])

    def test_subject_index(self):
        idx = toy_dataset().subject_index
        assert np.array_equal(idx["b"], [1, 2])
        assert np.array_equal(idx["c"], [3])

    def test_rows_view(self):
        rows = toy_dataset().rows
        assert rows[0].subject_id == "a"
        assert rows[0].y == 1.0
        assert len(rows[2].distances) == 0 or rows[2].occasion == 2

    def test_counts(self):
        ds = toy_dataset()
        assert ds.n_rows == 4
        assert ds.n_subjects == 3
        assert ds.p == 2
        assert ds.q == 1


class TestEmptyDataset:
    def test_no_rows_no_subjects(self):
        ds = empty_dataset(radius=2.0)
        assert ds.n_rows == 0
        assert ds.n_subjects == 0
        assert ds.radius == 2.0


class TestDatasetValidation:
    def test_weight_must_be_positive(self):
        with pytest.raises(DataError, match="positive"):
            build_dataset(
                subject_ids=["a"], occasions=[1], y=[0.0], X=[[1.0]], Z=[],
                w=[0.0], distance_values={}, radius=1.0,
            )

    def test_nonfinite_outcome_rejected(self):
        with pytest.raises(DataError, match="non-finite"):
            build_dataset(
                subject_ids=["a"], occasions=[1], y=[np.inf], X=[[1.0]], Z=[],
                w=[1.0], distance_values={}, radius=1.0,
            )

    def test_subject_without_rows_rejected(self):
        with pytest.raises(DataError, match="no observation rows"):
            Dataset(
                subject_ids=("a", "ghost"),
                row_subject=np.array([0]),
                occasions=(1,),
                y=np.zeros(1),
                X=np.ones((1, 1)),
                Z=np.zeros((1, 0)),
                w=np.ones(1),
                distances=(DistanceSet(np.array([]), 1.0),),
                radius=1.0,
                x_names=("intercept",),
                z_names=(),
            )


def write_csvs(tmp_path, subj_rows, dist_rows):
    subjects = tmp_path / "subjects.csv"
    distances = tmp_path / "distances.csv"
    subjects.write_text("\n".join(subj_rows) + "\n")
    distances.write_text("\n".join(dist_rows) + "\n")
    return subjects, distances


class TestLoadDataset:
    def test_basic_load(self, tmp_path):
        subjects, distances = write_csvs(
            tmp_path,
            ["id,occasion,y,age", "s1,1,2.5,40", "s2,1,3.5,50"],
            ["id,occasion,distance", "s1,1,0.25", "s1,1,0.75", "s2,1,0.5"],
        )
        schema = SchemaConfig(radius=1.0, x_cols=("age",))
        ds = load_dataset(subjects, distances, schema)
        assert ds.n_rows == 2
        assert ds.x_names == ("intercept", "age")
        assert np.array_equal(ds.X[:, 0], [1.0, 1.0])
        assert np.array_equal(ds.w, [1.0, 1.0])
        assert np.array_equal(ds.distances[0].values, [0.25, 0.75])

    def test_row_order_in_files_is_irrelevant(self, tmp_path):
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        a_dir.mkdir()
        b_dir.mkdir()
        a = write_csvs(
            a_dir,
            ["id,occasion,y", "s2,1,2.0", "s1,1,1.0"],
            ["id,occasion,distance", "s2,1,0.3", "s1,1,0.6", "s1,1,0.1"],
        )
        b = write_csvs(
            b_dir,
            ["id,occasion,y", "s1,1,1.0", "s2,1,2.0"],
            ["id,occasion,distance", "s1,1,0.1", "s1,1,0.6", "s2,1,0.3"],
        )
        schema = SchemaConfig(radius=1.0)
        da = load_dataset(*a, schema)
        db = load_dataset(*b, schema)
        assert np.array_equal(da.y, db.y)
        assert all(
            np.array_equal(x.values, y.values)
            for x, y in zip(da.distances, db.distances)
        )

    def test_distances_beyond_radius_dropped_and_counted(self, tmp_path):
        subjects, distances = write_csvs(
            tmp_path,
            ["id,occasion,y", "s1,1,0.0"],
            ["id,occasion,distance", "s1,1,0.4", "s1,1,1.4", "s1,1,2.0"],
        )
        ds = load_dataset(subjects, distances, SchemaConfig(radius=1.0))
        assert ds.dropped_distances == 2
        assert len(ds.distances[0]) == 1

    def test_non_numeric_outcome_reported_with_row(self, tmp_path):
        subjects, distances = write_csvs(
            tmp_path,
            ["id,occasion,y", "s1,1,oops", "s2,1,1.0"],
            ["id,occasion,distance"],
        )
        with pytest.raises(DataError, match="row 1.*oops"):
            load_dataset(subjects, distances, SchemaConfig(radius=1.0))

    def test_missing_column_reported(self, tmp_path):
        subjects, distances = write_csvs(
            tmp_path,
            ["id,occasion,outcome", "s1,1,1.0"],
            ["id,occasion,distance"],
        )
        with pytest.raises(DataError, match="missing required column"):
            load_dataset(subjects, distances, SchemaConfig(radius=1.0))

    def test_stray_distance_pair_rejected(self, tmp_path):
        subjects, distances = write_csvs(
            tmp_path,
            ["id,occasion,y", "s1,1,1.0"],
            ["id,occasion,distance", "s9,1,0.5"],
        )
        with pytest.raises(DataError, match="unknown subject-occasion"):
            load_dataset(subjects, distances, SchemaConfig(radius=1.0))

    def test_weight_column_honored(self, tmp_path):
        subjects, distances = write_csvs(
            tmp_path,
            ["id,occasion,y,weight", "s1,1,1.0,2.5"],
            ["id,occasion,distance"],
        )
        ds = load_dataset(subjects, distances, SchemaConfig(radius=1.0))
        assert np.array_equal(ds.w, [2.5])


class TestSaveLoadRoundTrip:
    def test_round_trip_preserves_everything(self, tmp_path):
        schema = SchemaConfig(radius=1.0, x_cols=("z1",), z_cols=("re_int",))
        base = toy_dataset()
        subjects = tmp_path / "subjects.csv"
        distances = tmp_path / "distances.csv"
        save_dataset(base, subjects, distances, schema)
        again = load_dataset(subjects, distances, schema)
        assert again.subject_ids == base.subject_ids
        assert np.array_equal(again.y, base.y)
        assert np.array_equal(again.X, base.X)
        assert np.array_equal(again.Z, base.Z)
        assert np.array_equal(again.w, base.w)
        assert all(
            np.array_equal(a.values, b.values)
            for a, b in zip(again.distances, base.distances)
        )

    def test_save_is_deterministic(self, tmp_path):
        schema = SchemaConfig(radius=1.0, x_cols=("z1",), z_cols=("re_int",))
        ds = toy_dataset()
        save_dataset(ds, tmp_path / "s1.csv", tmp_path / "d1.csv", schema)
        save_dataset(ds, tmp_path / "s2.csv", tmp_path / "d2.csv", schema)
        assert (tmp_path / "s1.csv").read_bytes() == (tmp_path / "s2.csv").read_bytes()
        assert (tmp_path / "d1.csv").read_bytes() == (tmp_path / "d2.csv").read_bytes()


class TestValidate:
    def test_histogram_covers_all_distances(self):
        report = validate(toy_dataset(), near_radius=0.3)
        assert report.n_features == 3
        assert report.histogram_counts.sum() == 3
        assert report.n_rows == 4

    def test_flags_subjects_without_near_features(self):
        report = validate(toy_dataset(), near_radius=0.3)
        # subject a's nearest feature is at 0.5, subject c has none at all
        assert report.n_without_near_feature == 2
        assert any("no feature within" in w for w in report.warnings)

    def test_quiet_on_well_covered_data(self):
        ds = build_dataset(
            subject_ids=["a"], occasions=[1], y=[0.0], X=[[1.0]], Z=[],
            w=[1.0], distance_values={("a", 1): [0.05, 0.5]}, radius=1.0,
        )
        report = validate(ds, near_radius=0.3)
        assert report.warnings == ()
