import numpy as np
import pytest
from pydantic import ValidationError

from pathkernel.config import DatasetConfig, ModelSpec
from pathkernel.datasets import (
    Sample,
    Split,
    build_dataset,
    export_dataset_csv,
    generate_blobs,
    generate_dataset,
    import_dataset_csv,
)
from pathkernel.error_handling import InvalidInputError, MissingInputError


def test_pairs_enforce_a_at_least_b():
    train, test = generate_dataset(3, 0.5, seed=0, include_diagonal=True)
    pairs = {(s.a, s.b) for s in train + test}
    assert pairs == {(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)}


def test_diagonal_pairs_are_dropped_by_default():
    train, test = generate_dataset(3, 0.5, seed=0)
    assert {(s.a, s.b) for s in train + test} == {(1, 0), (2, 0), (2, 1)}
    train, test = generate_dataset(113, 0.5, seed=0)
    assert len(train) + len(test) == 6328
    assert DatasetConfig().include_diagonal is False


def test_samples_use_the_four_token_layout():
    sample = Sample.modadd(4, 3, 5)
    assert sample.tokens == [4, 5, 3, 6]
    assert sample.label == 2
    assert sample.sum == 7


def test_split_is_disjoint_and_seeded():
    train, test = generate_dataset(7, 0.4, seed=3)
    again, _ = generate_dataset(7, 0.4, seed=3)
    other, _ = generate_dataset(7, 0.4, seed=4)
    assert len(train) + len(test) == 21
    assert not {(s.a, s.b) for s in train} & {(s.a, s.b) for s in test}
    assert [s.tokens for s in train] == [s.tokens for s in again]
    assert [s.tokens for s in train] != [s.tokens for s in other]


def test_published_split_sizes_without_diagonal():
    train, test = generate_dataset(113, 0.3, seed=0, train_size=4000, test_size=2000)
    assert len(train) == 4000
    assert len(test) == 2000
    assert all(s.a > s.b for s in train + test)


def test_operand_order_is_validated():
    with pytest.raises(InvalidInputError):
        Sample.modadd(1, 2, 5)
    with pytest.raises(ValidationError):
        Sample(tokens=[1, 5, 2, 6], label=3, a=1, b=2)
    with pytest.raises(ValidationError):
        Sample(label=0)


def test_split_arrays():
    split = Split(generate_dataset(5, 0.5, seed=0)[0])
    assert split.inputs.shape == (len(split), 4)
    assert np.array_equal(split.labels, split.sums % 5)
    assert len(split.head(2)) == 2
    assert split.head(None) is split


def test_blobs_are_balanced():
    train, test = generate_blobs(30, 4, 3, 0.5, seed=0)
    labels = np.array([s.label for s in train + test])
    assert np.bincount(labels).tolist() == [10, 10, 10]
    assert len(train[0].features) == 4
    assert Split(train).sums is None


def test_build_dataset_dispatches_on_kind():
    train, _ = build_dataset(DatasetConfig(kind="blobs", n_samples=10), ModelSpec(kind="mlp", input_dim=2))
    assert train[0].features is not None


def test_csv_round_trip(tmp_path):
    train, test = generate_dataset(5, 0.6, seed=1)
    path = export_dataset_csv(tmp_path / "dataset.csv", train, test)
    train_back, test_back = import_dataset_csv(path, p=5)
    assert [s.tokens for s in train_back] == [s.tokens for s in train]
    assert [s.label for s in test_back] == [s.label for s in test]

    blobs_train, blobs_test = generate_blobs(8, 2, 2, 0.5, seed=0)
    path = export_dataset_csv(tmp_path / "blobs.csv", blobs_train, blobs_test)
    back, _ = import_dataset_csv(path)
    assert [s.features for s in back] == [s.features for s in blobs_train]


def test_csv_import_errors(tmp_path):
    with pytest.raises(MissingInputError):
        import_dataset_csv(tmp_path / "missing.csv")
    train, test = generate_dataset(5, 0.6, seed=1)
    path = export_dataset_csv(tmp_path / "dataset.csv", train, test)
    with pytest.raises(InvalidInputError, match="modulus"):
        import_dataset_csv(path)
