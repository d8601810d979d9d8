import json

import numpy as np
import pytest

from geocrowd.baselines import majority_vote
from geocrowd.errors import FormatError
from geocrowd.formats import (
    SCHEMA_VERSION,
    read_annotations,
    read_confusions,
    read_dataset,
    read_json,
    read_labels,
    read_matrix,
    write_annotations,
    write_confusions,
    write_dataset,
    write_json,
    write_labels,
    write_matrix_csv,
)
from geocrowd.simulator import Dataset, gen_confusions, gen_mixture_dataset, sample_annotations


@pytest.fixture(scope="module")
def world():
    ds = gen_mixture_dataset(3, 4, 50, separation=2.0, seed=0, n_val=10, n_test=20)
    ens = gen_confusions({"kind": "dirichlet", "boost": 0.3}, 3, 4, seed=1)
    ann = sample_annotations(ds, ens, 0.4, seed=2)
    return ds, ens, ann


def test_dataset_round_trip_is_lossless(world, tmp_path):
    ds, _, _ = world
    write_dataset(tmp_path / "d.csv", ds)
    back = read_dataset(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.F_true, ds.F_true)
    np.testing.assert_array_equal(back.y, ds.y)
    np.testing.assert_array_equal(back.split, ds.split)
    assert back.K == ds.K


def test_dataset_without_posteriors(tmp_path):
    ds = Dataset(np.arange(6.0).reshape(2, 3), np.array([0, 1, 0]), 2)
    write_dataset(tmp_path / "d.csv", ds)
    back = read_dataset(tmp_path / "d.csv")
    assert back.F_true is None
    np.testing.assert_array_equal(back.X, ds.X)


def test_annotations_round_trip(world, tmp_path):
    _, _, ann = world
    write_annotations(tmp_path / "a.csv", ann)
    back = read_annotations(tmp_path / "a.csv")
    for f in ("item", "annot", "label"):
        np.testing.assert_array_equal(getattr(back, f), getattr(ann, f))
    assert (back.n_items, back.n_annotators, back.K) == (ann.n_items, ann.n_annotators, ann.K)


def test_confusions_round_trip(world, tmp_path):
    _, ens, _ = world
    write_confusions(tmp_path / "c.json", ens)
    back = read_confusions(tmp_path / "c.json")
    np.testing.assert_array_equal(back.A, ens.A)
    assert back.tags == ens.tags
    assert read_json(tmp_path / "c.json")["schema_version"] == SCHEMA_VERSION


def test_labels_round_trip(world, tmp_path):
    _, _, ann = world
    post = majority_vote(ann)
    write_labels(tmp_path / "l.csv", post)
    back = read_labels(tmp_path / "l.csv")
    np.testing.assert_array_equal(back.q, post.q)
    np.testing.assert_array_equal(back.hard, post.hard)


def test_matrix_sources(world, tmp_path):
    _, ens, _ = world
    Z = np.random.default_rng(0).random((5, 3))
    write_matrix_csv(tmp_path / "z.csv", Z)
    np.testing.assert_array_equal(read_matrix(tmp_path / "z.csv"), Z)
    write_confusions(tmp_path / "c.json", ens)
    W = read_matrix(tmp_path / "c.json")
    np.testing.assert_array_equal(W, np.concatenate(list(ens.A), axis=0))


def test_json_defaults_schema_version(tmp_path):
    write_json(tmp_path / "m.json", {"a": 1})
    assert read_json(tmp_path / "m.json") == {"a": 1, "schema_version": SCHEMA_VERSION}


class TestRejections:
    def test_wrong_kind(self, world, tmp_path):
        _, _, ann = world
        write_annotations(tmp_path / "a.csv", ann)
        with pytest.raises(FormatError):
            read_dataset(tmp_path / "a.csv")

    def test_future_schema(self, world, tmp_path):
        _, _, ann = world
        write_annotations(tmp_path / "a.csv", ann)
        text = (tmp_path / "a.csv").read_text().replace('"schema_version": 1', '"schema_version": 2')
        (tmp_path / "a.csv").write_text(text)
        with pytest.raises(FormatError):
            read_annotations(tmp_path / "a.csv")

    def test_truncated_dataset(self, world, tmp_path):
        ds, _, _ = world
        write_dataset(tmp_path / "d.csv", ds)
        lines = (tmp_path / "d.csv").read_text().splitlines(keepends=True)
        (tmp_path / "d.csv").write_text("".join(lines[:-3]))
        with pytest.raises(FormatError):
            read_dataset(tmp_path / "d.csv")

    def test_non_numeric_feature(self, world, tmp_path):
        ds, _, _ = world
        write_dataset(tmp_path / "d.csv", ds)
        lines = (tmp_path / "d.csv").read_text().splitlines(keepends=True)
        cells = lines[2].split(",")
        cells[3] = "abc"
        lines[2] = ",".join(cells)
        (tmp_path / "d.csv").write_text("".join(lines))
        with pytest.raises(FormatError):
            read_dataset(tmp_path / "d.csv")

    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        with pytest.raises(FormatError):
            read_confusions(tmp_path / "c.json")
        (tmp_path / "c.json").write_text("[1, 2]")
        with pytest.raises(FormatError):
            read_json(tmp_path / "c.json")

    def test_confusion_shape_mismatch(self, tmp_path):
        d = {"schema_version": 1, "K": 3, "matrices": [{"tag": "x", "matrix": [[1, 0], [0, 1]]}]}
        (tmp_path / "c.json").write_text(json.dumps(d))
        with pytest.raises(FormatError):
            read_confusions(tmp_path / "c.json")

    def test_confusion_missing_schema(self, tmp_path):
        d = {"K": 2, "matrices": [{"tag": "x", "matrix": [[1, 0], [0, 1]]}]}
        (tmp_path / "c.json").write_text(json.dumps(d))
        with pytest.raises(FormatError):
            read_confusions(tmp_path / "c.json")

    def test_ragged_matrix(self, tmp_path):
        (tmp_path / "z.csv").write_text("1,2\n3\n")
        with pytest.raises(FormatError):
            read_matrix(tmp_path / "z.csv")
