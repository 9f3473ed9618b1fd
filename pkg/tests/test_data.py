import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_dataset
from crowdsparse.data import (ABSENT, DataError, Dataset, SplitSpec, kfold_indices, load_csv,
                              save_csv, split, standardize)


def test_csv_round_trip_with_missing_votes(tmp_path, rng):
    ds = random_dataset(rng, 25, 4, 3, missing=0.4)
    paths = save_csv(ds, tmp_path)
    back = load_csv(paths["features"], paths["votes"], paths["labels"])
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.votes, ds.votes)
    np.testing.assert_array_equal(back.true_labels, ds.true_labels)


def test_headerless_csv(tmp_path):
    (tmp_path / "x.csv").write_text("1,2\n3,4\n")
    (tmp_path / "v.csv").write_text("1,\n,0\n")
    ds = load_csv(tmp_path / "x.csv", tmp_path / "v.csv")
    np.testing.assert_array_equal(ds.votes, [[1, ABSENT], [ABSENT, 0]])
    assert ds.available.sum() == 2


@pytest.mark.parametrize("features, votes, message", [
    ("1,2\n3,4\n", "1,0\n", "dimension mismatch"),
    ("1,2\n3,4\n", "1,0\n,\n", "no available votes"),
    ("1,2\n3,4\n", "1,2\n0,0\n", "non-binary"),
    ("1,2\n3\n", "1\n0\n", "cells"),
])
def test_invalid_inputs(tmp_path, features, votes, message):
    (tmp_path / "x.csv").write_text(features)
    (tmp_path / "v.csv").write_text(votes)
    with pytest.raises(DataError, match=message):
        load_csv(tmp_path / "x.csv", tmp_path / "v.csv")


def test_dataset_is_read_only(rng):
    ds = random_dataset(rng, 5, 2, 1)
    with pytest.raises(ValueError):
        ds.votes[0, 0] = 1


def test_split_is_a_deterministic_partition(rng):
    ds = random_dataset(rng, 50, 2, 1)
    a_train, a_test = split(ds, SplitSpec(0.3, 7))
    b_train, b_test = split(ds, SplitSpec(0.3, 7))
    np.testing.assert_array_equal(a_test.features, b_test.features)
    assert a_test.n == 15 and a_train.n == 35
    rows = np.vstack([a_train.features, a_test.features])
    assert sorted(map(tuple, rows)) == sorted(map(tuple, ds.features))


def test_split_spec_validation():
    with pytest.raises(DataError):
        SplitSpec(1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 200), st.integers(2, 10), st.integers(0, 100))
def test_kfold_partitions_units(n, folds, seed):
    if folds > n:
        with pytest.raises(DataError):
            kfold_indices(n, folds, seed)
        return
    parts = kfold_indices(n, folds, seed)
    allidx = np.concatenate(parts)
    assert sorted(allidx) == list(range(n))
    sizes = [p.size for p in parts]
    assert max(sizes) - min(sizes) <= 1


def test_standardize(rng):
    ds = random_dataset(rng, 40, 2, 3)
    out, rec = standardize(ds)
    np.testing.assert_allclose(out.features.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(out.features.std(axis=0, ddof=1), 1)
    np.testing.assert_allclose(rec.inverse(out.features), ds.features)
    with pytest.raises(DataError):
        standardize(Dataset(np.ones((3, 1)), np.ones((3, 1))))


def test_ingestion_examples(tmp_path):
    (tmp_path / "x.csv").write_text("1,2\n3,4\n5,6\n")
    (tmp_path / "v.csv").write_text("1,\n0,1\n,0\n")
    ds = load_csv(tmp_path / "x.csv", tmp_path / "v.csv")
    assert (ds.n, ds.d, ds.true_labels) == (3, 2, None)
    assert ds.available[0].tolist() == [True, False] and ds.votes[0, 0] == 1


@pytest.mark.parametrize("fraction, n_train, n_test", [(0.3, 7, 3), (0.999, 1, 9)])
def test_split_sizes(rng, fraction, n_train, n_test):
    ds = random_dataset(rng, 10, 2, 1)
    train, test = split(ds, SplitSpec(fraction, 7))
    assert (train.n, test.n) == (n_train, n_test)


def test_standardize_examples():
    ds = Dataset(np.array([[1.0], [2.0], [3.0]]), np.ones((3, 1)))
    out, _ = standardize(ds)
    np.testing.assert_allclose(out.features.ravel(), [-1, 0, 1])
    again, _ = standardize(out)
    np.testing.assert_allclose(again.features, out.features, atol=1e-12)
