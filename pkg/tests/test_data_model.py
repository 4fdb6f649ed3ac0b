import numpy as np
import pytest
from hypothesis import given, strategies as st

from egcimpute.data_model import (CATEGORICAL, CONTINUOUS, ORDINAL, DataError, MixedDataset, SchemaError,
                                  VariableSchema, VariableSpec, build_latent_index_map, load_dataset,
                                  write_dataset)


def mixed_schema():
    return VariableSchema((VariableSpec.categorical("blood", ["A", "B", "AB", "O"]),
                           VariableSpec.continuous("age"), VariableSpec.ordinal("likert", 5)))


def test_single_continuous_map():
    imap = build_latent_index_map(VariableSchema((VariableSpec.continuous("x"),)))
    assert imap.d == 1
    assert list(imap[0]) == [0]


def test_categorical_then_continuous_map():
    schema = VariableSchema((VariableSpec.categorical("c", 6), VariableSpec.continuous("x")))
    imap = build_latent_index_map(schema)
    assert imap.d == 7
    assert list(imap[0]) == list(range(6))
    assert list(imap[1]) == [6]


def test_benchmark_schema_dimension():
    specs = [VariableSpec.continuous(f"c{i}") for i in range(5)]
    specs += [VariableSpec.ordinal(f"o{i}", 5) for i in range(5)]
    specs += [VariableSpec.categorical(f"k{i}", 6) for i in range(5)]
    assert build_latent_index_map(VariableSchema(specs)).d == 40


@given(st.lists(st.one_of(st.just(1), st.integers(2, 9).map(lambda k: -k)), min_size=1, max_size=12))
def test_latent_ranges_partition(widths):
    specs = [VariableSpec.continuous(f"v{i}") if w == 1 else VariableSpec.categorical(f"v{i}", -w)
             for i, w in enumerate(widths)]
    imap = build_latent_index_map(VariableSchema(specs))
    covered = [i for j in range(len(specs)) for i in imap[j]]
    assert covered == list(range(imap.d))
    assert imap.d == sum(abs(w) for w in widths)


@pytest.mark.parametrize("bad", [
    lambda: VariableSpec.ordinal("o", 1),
    lambda: VariableSpec.categorical("c", ["a"]),
    lambda: VariableSpec.categorical("c", ["a", "a"]),
    lambda: VariableSpec("x", "weird"),
    lambda: VariableSchema((VariableSpec.continuous("x"), VariableSpec.continuous("x"))),
])
def test_schema_validation(bad):
    with pytest.raises(SchemaError):
        bad()


def test_schema_text_round_trip():
    schema = mixed_schema()
    text = schema.to_text()
    assert "blood categorical A,B,AB,O" in text
    again = VariableSchema.from_text(text)
    assert again == schema
    assert again.hash() == schema.hash()
    assert [v.kind for v in again] == [CATEGORICAL, CONTINUOUS, ORDINAL]


def test_empty_csv(tmp_path):
    (tmp_path / "d.csv").write_text("blood,age,likert\n")
    data = load_dataset(tmp_path / "d.csv", mixed_schema())
    assert data.n == 0


def test_labels_coded_in_schema_order(tmp_path):
    (tmp_path / "d.csv").write_text("blood,age,likert\nO,3.5,2\nA,,5\n,1e-3,\n")
    data = load_dataset(tmp_path / "d.csv", mixed_schema())
    np.testing.assert_array_equal(data.values[:, 0], [4, 1, np.nan])
    assert np.isnan(data.values[1, 1]) and np.isnan(data.values[2, 2])


@pytest.mark.parametrize("row, message", [("Z,1,1", "unknown label"), ("A,1,7", "out of range"),
                                          ("A,abc,1", "row 1")])
def test_cell_errors(tmp_path, row, message):
    (tmp_path / "d.csv").write_text("blood,age,likert\n" + row + "\n")
    with pytest.raises(DataError, match=message):
        load_dataset(tmp_path / "d.csv", mixed_schema())


def test_column_mismatch(tmp_path):
    (tmp_path / "d.csv").write_text("age,blood,likert\n1,A,1\n")
    with pytest.raises(DataError):
        load_dataset(tmp_path / "d.csv", mixed_schema())


def test_custom_missing_token(tmp_path):
    (tmp_path / "d.csv").write_text("blood,age,likert\nNA,2,NA\n")
    data = load_dataset(tmp_path / "d.csv", mixed_schema(), na="NA")
    assert np.isnan(data.values[0, 0]) and np.isnan(data.values[0, 2])


@given(st.lists(st.tuples(st.one_of(st.none(), st.integers(1, 4)),
                          st.one_of(st.none(), st.floats(-1e6, 1e6, allow_nan=False)),
                          st.one_of(st.none(), st.integers(1, 5))), max_size=20))
def test_write_load_round_trip(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    values = np.array([[np.nan if v is None else v for v in r] for r in rows], dtype=float).reshape(-1, 3)
    data = MixedDataset(mixed_schema(), values)
    write_dataset(data, path, comment="test")
    again = load_dataset(path, mixed_schema())
    np.testing.assert_array_equal(again.values, data.values)


def test_dataset_rejects_bad_codes():
    with pytest.raises(DataError):
        MixedDataset(mixed_schema(), [[5, 1.0, 1]])
    with pytest.raises(DataError):
        MixedDataset(mixed_schema(), [[1, np.inf, 1]])
