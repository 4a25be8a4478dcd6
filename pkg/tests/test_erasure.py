import numpy as np
import pytest

from immalab import concepts as cc
from immalab import diffusion as dm
from immalab import erasure as er
from immalab import metrics as mt


@pytest.fixture(scope="module")
def small():
    ds = cc.make_datasets(n_train=256, n_ref=64)
    sched = dm.schedule_linear()
    model = dm.pretrain(ds, dm.TrainConfig(steps=300, batch_size=64), sched)
    return ds, sched, model


def test_config_rejects_null_and_bad_values():
    with pytest.raises(ValueError):
        er.ErasureConfig(target_row=0)
    with pytest.raises(ValueError):
        er.ErasureConfig(target_row=1, steps=-1)
    with pytest.raises(ValueError):
        er.ErasureConfig(target_row=1, train_names=())


def test_zero_steps_is_identity(small):
    ds, sched, model = small
    out = er.erase(model, ds[0], er.ErasureConfig(target_row=1, steps=0), sched)
    assert out.equal(model)


def test_only_selected_subset_moves(small):
    ds, sched, model = small
    hist = []
    out = er.erase(model, ds[2], er.ErasureConfig(target_row=3, steps=150), sched, history=hist)
    for n in model:
        same = out[n].data.tobytes() == model[n].data.tobytes()
        assert same == (n not in dm.FILM_NAMES)
    smooth = np.convolve(hist, np.ones(50) / 50, mode="valid")
    assert smooth[-1] < smooth[0]


def test_target_row_bounds(small):
    ds, sched, model = small
    with pytest.raises(ValueError):
        er.erase(model, ds[0], er.ErasureConfig(target_row=40, steps=1), sched)


def test_self_report_is_identity(small):
    ds, sched, model = small
    clf = mt.train_classifier(ds, steps=200)
    rep = er.erasure_report(model, model, ds[:2], clf, 1, sched, n=64)
    for d in ds[:2]:
        assert rep.value(d.name, "accuracy") == rep.value(d.name, "accuracy_base")
        for m in mt.METRICS:
            assert rep.value(d.name, f"sgr_{m}") == 0.0
