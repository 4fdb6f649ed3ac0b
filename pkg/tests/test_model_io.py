import json

import numpy as np
import pytest

from egcimpute.bench import MaskSpec, generate_synthetic, mask
from egcimpute.em_fit import FitConfig, fit
from egcimpute.impute import single_impute
from egcimpute.model_io import ModelFileError, dumps, load_model, loads, save_model


@pytest.fixture(scope="module")
def models():
    data, _ = generate_synthetic(300, 2, 3, 0, p_cont=2, p_ord=2)
    masked, _ = mask(data, MaskSpec("MCAR", 0.3, 0))
    dense = fit(masked, FitConfig(max_iter=4, loglik_samples=20, window=30))
    low = fit(masked, FitConfig(max_iter=4, loglik_samples=0, rank=4))
    return masked, dense, low


@pytest.mark.parametrize("which", ["dense", "low"])
def test_round_trip_is_exact(models, which, tmp_path):
    masked, dense, low = models
    model = dense if which == "dense" else low
    path = tmp_path / "m.json"
    save_model(model, path, comment="test")
    back = load_model(path)
    np.testing.assert_array_equal(back.sigma, model.sigma)
    for a, b in zip(model.marginals, back.marginals):
        assert a.to_dict() == b.to_dict()
    if model.lowrank is not None:
        np.testing.assert_array_equal(back.lowrank.W, model.lowrank.W)
        assert back.lowrank.sigma2 == model.lowrank.sigma2
    np.testing.assert_array_equal(single_impute(masked, back).values, single_impute(masked, model).values)
    assert dumps(back, "test") == path.read_text()


def test_windows_survive(models):
    _, dense, _ = models
    back = loads(dumps(dense))
    assert [list(w) for w in back.windows] == [list(w) for w in dense.windows]
    assert back.windows[0].maxlen == 30


def test_timing_not_written(models):
    _, dense, _ = models
    text = dumps(dense)
    assert "timing" not in text
    assert text == dumps(dense)


def test_comment_lines_skipped(models):
    _, dense, _ = models
    assert dumps(dense, "a b c").startswith("# a b c\n")
    np.testing.assert_array_equal(loads(dumps(dense, "hello")).sigma, dense.sigma)


def test_rejects_bad_files(models):
    _, dense, _ = models
    good = json.loads(dumps(dense))
    with pytest.raises(ModelFileError):
        loads("{not json")
    for key, value in [("format", "other"), ("version", 99), ("schema_hash", "0" * 8)]:
        bad = dict(good, **{key: value})
        with pytest.raises(ModelFileError):
            loads(json.dumps(bad))
