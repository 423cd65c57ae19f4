"""Schema, CSV ingestion, splits, and k-core against hand-built oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_schema, random_dataset
from ctrbias.data import (Dataset, FeatureIndex, FieldSchema, Sample,
                          chronological_split, ingest_csv, k_core_filter)
from ctrbias.errors import (ConfigError, CsvParseError, LabelError,
                            SchemaError)


class TestFieldSchema:
    def test_layout_properties(self):
        s = make_schema(4, 6, 3)
        assert s.n == 13
        assert s.field_names == ("user", "item", "group")
        assert list(s.boundaries) == [0, 4, 10, 13]
        assert s.offset("item") == 4
        assert s.cardinality("group") == 3
        assert s.bias_range == (10, 13)
        assert s.num_groups == 3

    def test_validation_rejects_bad_declarations(self):
        with pytest.raises(ConfigError):
            FieldSchema(fields=(), bias_field="g")
        with pytest.raises(ConfigError):
            FieldSchema(fields=(("a", 2), ("a", 3)), bias_field="a")
        with pytest.raises(ConfigError):
            FieldSchema(fields=(("a", 0),), bias_field="a")
        with pytest.raises(ConfigError):
            FieldSchema(fields=(("a", 2),), bias_field="missing")
        with pytest.raises(ConfigError):
            FieldSchema(fields=(("a", 1),), bias_field="a")  # cardinality < 2
        with pytest.raises(ConfigError):
            FieldSchema(fields=(("a", 2),), bias_field="a",
                        categories={"other": ("x",)})
        with pytest.raises(SchemaError):
            FieldSchema(fields=(("a", 2),), bias_field="a",
                        categories={"a": ("x", "y", "z")})
        with pytest.raises(ConfigError):
            FieldSchema(fields=(("a", 2),), bias_field="a",
                        categories={"a": ("x", "x")})

    def test_digest_frozen_value(self):
        s = FieldSchema(
            fields=(("user", 3), ("item", 4), ("group", 2)),
            bias_field="group",
            categories={"group": ("g0", "g1")},
        )
        assert s.digest() == ("9d2a00f35b70b99e6b7542639e754682"
                              "d9677041ad401d222021ddf4efb64487")

    def test_digest_tracks_feature_space_not_threshold(self):
        base = FieldSchema(fields=(("g", 2),), bias_field="g")
        relabeled = FieldSchema(fields=(("g", 2),), bias_field="g",
                                categories={"g": ("a", "b")})
        rethresholded = FieldSchema(fields=(("g", 2),), bias_field="g",
                                    label_threshold=3.0)
        assert base.digest() != relabeled.digest()
        assert base.digest() == rethresholded.digest()

    def test_json_round_trip(self, tmp_path):
        s = make_schema()
        s = FieldSchema(s.fields, s.bias_field, s.categories, label_threshold=3.5)
        path = tmp_path / "schema.json"
        s.save(path)
        loaded = FieldSchema.load(path)
        assert loaded == s
        assert loaded.digest() == s.digest()

    def test_load_rejects_bad_json(self, tmp_path):
        path = tmp_path / "schema.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            FieldSchema.load(path)
        path.write_text("{\"fields\": 3}")
        with pytest.raises(ConfigError):
            FieldSchema.load(path)


class TestFeatureIndex:
    def test_seeded_from_declared_vocabulary(self):
        idx = FeatureIndex(make_schema())
        assert idx.index_of("user", "u2") == 2
        assert idx.index_of("group", "g1") == 4 + 6 + 1

    def test_create_assigns_next_free_local(self):
        schema = FieldSchema(fields=(("f", 3), ("g", 2)), bias_field="g")
        idx = FeatureIndex(schema)
        assert idx.index_of("f", "first", create=True) == 0
        assert idx.index_of("f", "second", create=True) == 1
        assert idx.index_of("f", "first", create=True) == 0  # stable
        assert idx.index_of("f", "third", create=True) == 2
        with pytest.raises(SchemaError):
            idx.index_of("f", "fourth", create=True)

    def test_unknown_without_create_raises(self):
        idx = FeatureIndex(make_schema())
        with pytest.raises(SchemaError):
            idx.index_of("user", "someone-new")
        with pytest.raises(SchemaError):
            idx.index_of("nope", "x")

    def test_labels_fill_placeholders(self):
        schema = FieldSchema(fields=(("f", 3), ("g", 2)), bias_field="g")
        idx = FeatureIndex(schema)
        idx.index_of("f", "seen", create=True)
        assert idx.labels("f") == ("seen", "f:1", "f:2")


class TestSample:
    def test_validation(self):
        with pytest.raises(ConfigError):
            Sample(np.array([2, 1]), np.array([1.0, 1.0]), 1, "u", "i", 0)
        with pytest.raises(ConfigError):
            Sample(np.array([1, 1]), np.array([0.5, 0.5]), 1, "u", "i", 0)
        with pytest.raises(ConfigError):
            Sample(np.array([0, 1]), np.array([1.0, 0.0]), 1, "u", "i", 0)
        with pytest.raises(ConfigError):
            Sample(np.array([0, 1]), np.array([1.0, 1.0]), 2, "u", "i", 0)

    def test_entries(self):
        s = Sample(np.array([0, 5]), np.array([1.0, 1.0]), 1, "u", "i", 3)
        assert s.entries == [(0, 1.0), (5, 1.0)]


class TestDataset:
    def test_from_samples_pads_with_inert_zeros(self):
        schema = make_schema(2, 2, 2)
        short = Sample(np.array([0, 2, 4]), np.array([1.0, 1.0, 1.0]), 0, "u0", "i0", 0)
        long = Sample(np.array([1, 3, 4, 5]), np.array([1.0, 1.0, 0.5, 0.5]), 1,
                      "u1", "i1", 1)
        ds = Dataset.from_samples(schema, [short, long])
        assert ds.indices.shape == (2, 4)
        assert ds.values[0, 3] == 0.0 and ds.indices[0, 3] == 0
        back = ds.sample(0)
        assert np.array_equal(back.indices, short.indices)
        assert np.array_equal(back.values, short.values)
        assert [s.item_id for s in ds.iter_samples()] == ["i0", "i1"]

    def test_validation_rejects_bad_field_sums(self):
        schema = make_schema(2, 2, 2)
        with pytest.raises(ConfigError, match="sum to 1"):
            Dataset(schema, np.array([[0, 2, 4], [0, 2, 4]]),
                    np.array([[1.0, 1.0, 1.0], [1.0, 0.7, 1.0]]),
                    [0, 1], ["u0", "u0"], ["i0", "i0"], [0, 1])

    def test_validation_rejects_out_of_range_indices(self):
        schema = make_schema(2, 2, 2)
        with pytest.raises(ConfigError, match="out of schema range"):
            Dataset(schema, np.array([[0, 2, 99]]), np.array([[1.0, 1.0, 1.0]]),
                    [0], ["u0"], ["i0"], [0])

    def test_validation_rejects_non_binary_labels(self):
        schema = make_schema(2, 2, 2)
        with pytest.raises(ConfigError, match="labels"):
            Dataset(schema, np.array([[0, 2, 4]]), np.array([[1.0, 1.0, 1.0]]),
                    [3], ["u0"], ["i0"], [0])

    def test_bias_memberships_coo(self, rng):
        ds = random_dataset(rng, n_rows=40, multi_group_prob=0.5)
        rows, groups = ds.bias_memberships()
        lo, hi = ds.schema.bias_range
        expected = []
        for i in range(len(ds)):
            for j in range(ds.indices.shape[1]):
                if ds.values[i, j] > 0 and lo <= ds.indices[i, j] < hi:
                    expected.append((i, int(ds.indices[i, j]) - lo))
        assert sorted(zip(rows.tolist(), groups.tolist())) == sorted(expected)
        assert any(np.bincount(rows) > 1)  # multi-group rows really occur

    def test_subset_keeps_metadata(self, rng):
        ds = random_dataset(rng, n_rows=10)
        sub = ds.subset([3, 1], split_tag="other")
        assert sub.split_tag == "other"
        assert sub.bias_labels == ds.bias_labels
        assert list(sub.user_ids) == [ds.user_ids[3], ds.user_ids[1]]

    def test_default_bias_labels_use_vocabulary_then_placeholders(self):
        schema = FieldSchema(fields=(("g", 3),), bias_field="g",
                             categories={"g": ("alpha",)})
        ds = Dataset(schema, np.array([[0]]), np.array([[1.0]]), [1], ["u"], ["i"], [0])
        assert ds.bias_labels == ("alpha", "g:1", "g:2")


class TestCsvRoundTrip:
    def test_to_csv_then_ingest_is_identity(self, rng, tmp_path):
        ds = random_dataset(rng, n_rows=25, multi_group_prob=0.4)
        path = tmp_path / "log.csv"
        ds.to_csv(path)
        back = ingest_csv(path, ds.schema, split_tag=ds.split_tag)
        assert np.array_equal(back.labels, ds.labels)
        assert np.array_equal(back.user_ids, ds.user_ids)
        assert np.array_equal(back.item_ids, ds.item_ids)
        assert np.array_equal(back.timestamps, ds.timestamps)
        for i in range(len(ds)):
            a, b = ds.sample(i), back.sample(i)
            assert np.array_equal(a.indices, b.indices)
            assert np.allclose(a.values, b.values, atol=0, rtol=1e-15)

    def test_multi_valued_cell_gets_fractional_values(self, tmp_path):
        schema = FieldSchema(fields=(("g", 4),), bias_field="g")
        path = tmp_path / "log.csv"
        path.write_text("user_id,item_id,label,timestamp,g\n"
                        "u,i,1,5,a|b|c\n")
        ds = ingest_csv(path, schema)
        s = ds.sample(0)
        assert np.array_equal(s.indices, [0, 1, 2])
        assert np.allclose(s.values, [1 / 3] * 3)

    def test_shared_index_keeps_categories_aligned_across_files(self, tmp_path):
        schema = FieldSchema(fields=(("g", 3),), bias_field="g")
        (tmp_path / "a.csv").write_text(
            "user_id,item_id,label,timestamp,g\nu,i,1,0,x\n")
        (tmp_path / "b.csv").write_text(
            "user_id,item_id,label,timestamp,g\nu,i,0,1,y\nu,i,1,2,x\n")
        index = FeatureIndex(schema)
        a = ingest_csv(tmp_path / "a.csv", schema, index)
        b = ingest_csv(tmp_path / "b.csv", schema, index)
        assert a.indices[0, 0] == 0       # x -> 0
        assert b.indices[0, 0] == 1       # y -> 1
        assert b.indices[1, 0] == 0       # x stays 0
        assert b.bias_labels == ("x", "y", "g:2")

    def test_label_threshold_binarizes(self, tmp_path):
        schema = FieldSchema(fields=(("g", 2),), bias_field="g",
                             label_threshold=3.0)
        path = tmp_path / "r.csv"
        path.write_text("user_id,item_id,label,timestamp,g\n"
                        "u,i,4.5,0,a\nu,i,3.0,1,a\nu,i,1,2,b\n")
        ds = ingest_csv(path, schema)
        assert list(ds.labels) == [1, 0, 0]


class TestIngestErrors:
    def _write(self, tmp_path, body):
        path = tmp_path / "bad.csv"
        path.write_text(body)
        return path

    def test_empty_file(self, tmp_path):
        path = self._write(tmp_path, "")
        with pytest.raises(CsvParseError, match="empty file") as e:
            ingest_csv(path, make_schema())
        assert e.value.line_no == 1

    def test_wrong_header(self, tmp_path):
        path = self._write(tmp_path, "user,item,label,ts,user,item,group\n")
        with pytest.raises(CsvParseError, match="header") as e:
            ingest_csv(path, make_schema())
        assert e.value.line_no == 1

    def test_wrong_column_count_reports_line(self, tmp_path):
        path = self._write(
            tmp_path,
            "user_id,item_id,label,timestamp,user,item,group\n"
            "u0,i0,1,0,u0,i0,g0\n"
            "u0,i0,1,1,u0,i0\n")
        with pytest.raises(CsvParseError, match="columns") as e:
            ingest_csv(path, make_schema())
        assert e.value.line_no == 3

    def test_bad_timestamp_reports_line(self, tmp_path):
        path = self._write(
            tmp_path,
            "user_id,item_id,label,timestamp,user,item,group\n"
            "u0,i0,1,soon,u0,i0,g0\n")
        with pytest.raises(CsvParseError, match="timestamp") as e:
            ingest_csv(path, make_schema())
        assert e.value.line_no == 2

    def test_non_binary_label_without_threshold(self, tmp_path):
        path = self._write(
            tmp_path,
            "user_id,item_id,label,timestamp,user,item,group\n"
            "u0,i0,4,0,u0,i0,g0\n")
        with pytest.raises(LabelError, match="label"):
            ingest_csv(path, make_schema())

    def test_non_numeric_label_with_threshold(self, tmp_path):
        schema = FieldSchema(fields=(("g", 2),), bias_field="g", label_threshold=0.5)
        path = self._write(tmp_path, "user_id,item_id,label,timestamp,g\nu,i,x,0,a\n")
        with pytest.raises(CsvParseError, match="label") as e:
            ingest_csv(path, schema)
        assert e.value.line_no == 2

    def test_empty_cell(self, tmp_path):
        path = self._write(
            tmp_path,
            "user_id,item_id,label,timestamp,user,item,group\n"
            "u0,i0,1,0,u0,,g0\n")
        with pytest.raises(CsvParseError, match="empty cell") as e:
            ingest_csv(path, make_schema())
        assert e.value.line_no == 2

    def test_duplicate_category_in_cell(self, tmp_path):
        path = self._write(
            tmp_path,
            "user_id,item_id,label,timestamp,user,item,group\n"
            "u0,i0,1,0,u0,i0,g0|g0\n")
        with pytest.raises(CsvParseError, match="duplicate") as e:
            ingest_csv(path, make_schema())
        assert e.value.line_no == 2

    def test_vocabulary_overflow_propagates(self, tmp_path):
        schema = FieldSchema(fields=(("g", 2),), bias_field="g")
        path = self._write(
            tmp_path,
            "user_id,item_id,label,timestamp,g\nu,i,1,0,a\nu,i,1,1,b\nu,i,1,2,c\n")
        with pytest.raises(SchemaError, match="overflow"):
            ingest_csv(path, schema)


class TestChronologicalSplit:
    def test_rounded_cut_points(self, rng):
        ds = random_dataset(rng, n_rows=10)
        train, val, test = chronological_split(ds, (0.7, 0.15, 0.15))
        # cuts: round(10*0.7) = 7, round(10*0.85) = 8 (banker's rounding)
        assert (len(train), len(val), len(test)) == (7, 1, 2)
        assert (train.split_tag, val.split_tag, test.split_tag) == (
            "train", "val-nbt", "test-nbt")

    def test_partitions_by_ascending_timestamp(self, rng):
        ds = random_dataset(rng, n_rows=40)
        train, val, test = chronological_split(ds)
        assert train.timestamps.max() < val.timestamps.min()
        assert val.timestamps.max() < test.timestamps.min()
        merged = sorted(np.concatenate([train.timestamps, val.timestamps,
                                        test.timestamps]).tolist())
        assert merged == sorted(ds.timestamps.tolist())

    def test_deterministic_under_row_permutation(self, rng):
        ds = random_dataset(rng, n_rows=30)
        perm = rng.permutation(len(ds))
        shuffled = ds.subset(perm)
        for a, b in zip(chronological_split(ds), chronological_split(shuffled)):
            assert np.array_equal(a.timestamps, b.timestamps)
            assert np.array_equal(a.user_ids, b.user_ids)
            assert np.array_equal(a.indices, b.indices)

    def test_tie_break_by_user_then_item(self):
        schema = make_schema(3, 3, 2)
        rows = [
            Sample(np.array([2, 3 + 1, 6]), np.array([1.0, 1.0, 1.0]), 0, "u2", "i1", 5),
            Sample(np.array([0, 3 + 2, 6]), np.array([1.0, 1.0, 1.0]), 0, "u0", "i2", 5),
            Sample(np.array([0, 3 + 0, 6]), np.array([1.0, 1.0, 1.0]), 0, "u0", "i0", 5),
        ]
        ds = Dataset.from_samples(schema, rows)
        train, val, test = chronological_split(ds, (0.4, 0.3, 0.3))
        # all stamps equal: order is (u0,i0), (u0,i2), (u2,i1); cut at round(1.2)=1
        assert list(train.item_ids) == ["i0"]
        assert list(val.item_ids) == ["i2"]
        assert list(test.item_ids) == ["i1"]

    def test_fraction_validation(self, rng):
        ds = random_dataset(rng, n_rows=5)
        with pytest.raises(ConfigError):
            chronological_split(ds, (0.5, 0.5))
        with pytest.raises(ConfigError):
            chronological_split(ds, (0.8, 0.3, 0.1))
        with pytest.raises(ConfigError):
            chronological_split(ds, (1.0, -0.1, 0.1))


def naive_k_core(users, items, core):
    """Alternating deletion until stable, the textbook formulation."""
    keep = set(range(len(users)))
    changed = True
    while changed:
        changed = False
        from collections import Counter
        ucnt = Counter(users[i] for i in keep)
        icnt = Counter(items[i] for i in keep)
        drop = {i for i in keep
                if ucnt[users[i]] < core or icnt[items[i]] < core}
        if drop:
            keep -= drop
            changed = True
    return sorted(keep)


class TestKCore:
    def test_matches_naive_oracle_on_random_graphs(self, rng):
        for trial in range(20):
            ds = random_dataset(rng, n_users=6, n_items=8,
                                n_rows=int(rng.integers(5, 60)))
            core = int(rng.integers(1, 5))
            filtered = k_core_filter(ds, core)
            expected = naive_k_core(list(ds.user_ids), list(ds.item_ids), core)
            got = sorted(
                np.flatnonzero(np.isin(ds.timestamps, filtered.timestamps)).tolist())
            assert got == expected, f"trial {trial} core {core}"

    def test_fixpoint_property(self, rng):
        ds = random_dataset(rng, n_users=6, n_items=8, n_rows=50)
        filtered = k_core_filter(ds, 3)
        if len(filtered):
            _, ucnt = np.unique(filtered.user_ids, return_counts=True)
            _, icnt = np.unique(filtered.item_ids, return_counts=True)
            assert ucnt.min() >= 3 and icnt.min() >= 3
        again = k_core_filter(filtered, 3)
        assert len(again) == len(filtered)

    def test_core_one_keeps_everything(self, rng):
        ds = random_dataset(rng, n_rows=20)
        assert len(k_core_filter(ds, 1)) == 20

    def test_invalid_core(self, rng):
        with pytest.raises(ConfigError):
            k_core_filter(random_dataset(rng, n_rows=5), 0)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)),
                    min_size=1, max_size=40),
           st.integers(1, 4))
    def test_matches_naive_oracle_property(self, pairs, core):
        schema = make_schema(5, 5, 2)
        samples = [
            Sample(np.array([u, 5 + i, 10]), np.array([1.0, 1.0, 1.0]), 1,
                   f"u{u}", f"i{i}", t)
            for t, (u, i) in enumerate(pairs)
        ]
        ds = Dataset.from_samples(schema, samples)
        filtered = k_core_filter(ds, core)
        expected = naive_k_core([p[0] for p in pairs], [p[1] for p in pairs], core)
        assert sorted(filtered.timestamps.tolist()) == expected
