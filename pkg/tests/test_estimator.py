import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from msdn import MSDNSegmenter
from msdn.data import synth_generate
from msdn.errors import ConfigError, DataError, DimensionError


@pytest.fixture(scope="module")
def arrays():
    samples = synth_generate(3, 6, 32)
    X = np.stack([s.image[0] for s in samples])
    y = np.stack([s.mask for s in samples])
    return X, y


def quick(**kw):
    params = dict(model="msdn", base_channels=2, head_channels=4, max_epochs=2, lr=1e-3, seed=0)
    params.update(kw)
    return MSDNSegmenter(**params)


def test_params_roundtrip():
    est = quick(lr=0.01)
    assert est.get_params()["lr"] == 0.01
    assert clone(est).get_params() == est.get_params()
    est.set_params(model="unet")
    assert est.model == "unet"


def test_unfitted():
    with pytest.raises(NotFittedError):
        quick().predict(np.zeros((1, 32, 32)))


def test_fit_predict_score(arrays):
    X, y = arrays
    strong = np.array([True, True, False, False, False, False])
    est = quick().fit(X, y, strong=strong)
    assert est.num_classes_ == 1
    proba = est.predict_proba(X[:2])
    assert proba.shape == (2, 2, 32, 32)
    np.testing.assert_allclose(proba.sum(axis=1), 1, atol=1e-5)
    labels = est.predict(X[:2])
    assert labels.shape == (2, 32, 32)
    np.testing.assert_array_equal(labels, proba.argmax(axis=1))
    assert 0 <= est.score(X, y) <= 1
    boxes = est.predict_boxes(X[:1], threshold=0.0)
    assert len(boxes) == 1 and all(0 <= s <= 1 for _, s in boxes[0])


def test_channel_axis_accepted(arrays):
    X, y = arrays
    est = quick(model="unet", max_epochs=1).fit(X[:, None], y)
    assert est.predict(X[:1]).shape == (1, 32, 32)


def test_deterministic(arrays):
    X, y = arrays
    a = quick(model="unet", max_epochs=1).fit(X, y).predict_proba(X[:1])
    b = quick(model="unet", max_epochs=1).fit(X, y).predict_proba(X[:1])
    np.testing.assert_array_equal(a, b)


def test_validation_errors(arrays):
    X, y = arrays
    with pytest.raises(DimensionError):
        quick().fit(X, y[:3])
    with pytest.raises(DataError):
        quick().fit(X, y + 0.5)
    with pytest.raises(ValueError):
        quick().fit(np.full_like(X, np.nan), y)
    with pytest.raises(ConfigError):
        quick(model="unet").fit(X, y, strong=np.zeros(len(X), bool))


def test_no_boxes_without_detection(arrays):
    X, y = arrays
    est = quick(model="unet", max_epochs=0).fit(X, y)
    with pytest.raises(ConfigError):
        est.predict_boxes(X[:1])
