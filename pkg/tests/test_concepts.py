import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from immalab import concepts as cc


def test_ring_mean_radius_oracle():
    spec = cc.ConceptSpec("ring", params={"radius": 1.0, "noise": 0.05})
    ds = cc.generate(spec, n_train=4096, n_ref=0, seed=0)
    r = np.linalg.norm(ds.train, axis=1).mean()
    assert 0.98 <= r <= 1.02


def test_empty_train_is_valid():
    ds = cc.generate(cc.ConceptSpec("blob"), n_train=0, n_ref=5)
    assert ds.train.shape == (0, 2) and ds.reference.shape == (5, 2)


@pytest.mark.parametrize("kind", cc.KINDS)
def test_deterministic_bounded_disjoint(kind):
    spec = cc.ConceptSpec(kind, concept_id=1)
    a, b = cc.generate(spec, 256, 128, seed=3), cc.generate(spec, 256, 128, seed=3)
    assert np.array_equal(a.train, b.train) and np.array_equal(a.reference, b.reference)
    pts = np.concatenate([a.train, a.reference])
    assert np.abs(pts).max() <= cc.BOX
    train = {tuple(p) for p in a.train}
    assert not any(tuple(p) in train for p in a.reference)


def test_unknown_kind_and_bad_noise_rejected():
    with pytest.raises(cc.ConceptError):
        cc.ConceptSpec("hexagon")
    with pytest.raises(cc.ConceptError):
        cc.ConceptSpec("ring", params={"noise": 0.0})
    with pytest.raises(cc.ConceptError):
        cc.ConceptSpec("ring", params={"arms": 3})


def test_csv_round_trip(tmp_path):
    ds = cc.generate(cc.ConceptSpec("spiral", concept_id=4), 100, 50, seed=1)
    cc.save_csv(ds, tmp_path / "spiral")
    back = cc.load_csv(tmp_path / "spiral", concept_id=4)
    assert np.array_equal(back.train, ds.train) and np.array_equal(back.reference, ds.reference)
    assert back.name == "spiral"


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-3, 3, width=32), st.floats(-3, 3, width=32)), max_size=20))
def test_point_csv_round_trip_exact(tmp_path_factory, pts):
    path = tmp_path_factory.mktemp("pts") / "p.csv"
    arr = np.array(pts, dtype=np.float32).reshape(-1, 2)
    cc.write_points(arr, path)
    assert np.array_equal(cc.read_points(path), arr)


def test_three_column_row_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x,y\n0.1,0.2\n0.3,0.4,0.5\n")
    with pytest.raises(cc.ConceptError, match=":3:"):
        cc.read_points(path)


def test_header_only_is_empty(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("x,y\n")
    assert cc.read_points(path).shape == (0, 2)


def test_pretraining_concepts_are_separable():
    from immalab import metrics as mt

    ds = cc.make_datasets()
    clf = mt.train_classifier(ds, steps=600)
    assert clf.validation_accuracy >= 0.95
