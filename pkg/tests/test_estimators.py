import numpy as np
import pytest
from sklearn.base import clone
from sklearn.pipeline import make_pipeline

from treebp import LeNet5Classifier, TenTreeClassifier, Tree3Classifier
from treebp.estimators import PixelScaler, as_images, check_labels
from treebp.exceptions import ShapeError

from conftest import random_images


@pytest.fixture(scope="module")
def data():
    tr = random_images(40, "mnist", seed=5)
    te = random_images(20, "mnist", seed=6)
    return tr.images, tr.labels, te.images, te.labels


def small_tree(**kw):
    return Tree3Classifier(K=2, M=2, geometry="mnist", epochs=1, batch_size=10,
                           augment_shift=0, hflip=False, **kw)


def test_fit_predict_shapes(data):
    X, y, Xt, yt = data
    clf = small_tree().fit(X, y, Xt, yt)
    assert clf.predict(Xt).shape == (20,)
    proba = clf.predict_proba(Xt)
    assert proba.shape == (20, 10)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-6)
    assert np.array_equal(clf.predict(Xt), proba.argmax(axis=1))
    assert clf.score(Xt, yt) == pytest.approx(np.mean(clf.predict(Xt) == yt))
    assert len(clf.history_) == 1
    assert list(clf.classes_) == list(range(10))
    assert clf.n_features_in_ == 784


def test_flat_and_3d_input_accepted(data):
    X, y, Xt, _ = data
    clf = small_tree().fit(X.reshape(40, -1), y)
    a = clf.predict(Xt.reshape(20, -1))
    b = clf.predict(Xt[:, 0])
    assert np.array_equal(a, b) and np.array_equal(a, clf.predict(Xt))


def test_fit_is_deterministic(data):
    X, y, Xt, _ = data
    a = small_tree(random_state=3).fit(X, y).predict_proba(Xt)
    b = small_tree(random_state=3).fit(X, y).predict_proba(Xt)
    assert np.array_equal(a, b)


def test_clone_and_params():
    for est in (small_tree(eta=0.3), TenTreeClassifier(K=2, M=2), LeNet5Classifier(epochs=2)):
        params = est.get_params()
        c = clone(est)
        assert c.get_params() == params
        c.set_params(random_state=9)
        assert c.random_state == 9 and est.random_state == params["random_state"]


def test_named_plan_fits(data):
    X, y, Xt, _ = data
    clf = Tree3Classifier(plan="tree3-mnist", geometry="mnist", epochs=1).fit(X, y)
    assert clf.plan_.K == 15 and clf.plan_.dataset_size == 40
    assert clf.predict(Xt).shape == (20,)


def test_lenet_and_tentree_fit(data):
    X, y, Xt, _ = data
    for clf in (LeNet5Classifier(geometry="mnist", epochs=1, batch_size=20),
                TenTreeClassifier(K=1, M=1, geometry="mnist", epochs=1, batch_size=20)):
        clf.fit(X, y)
        assert clf.predict_proba(Xt).shape == (20, 10)


def test_unfitted_raises(data):
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        small_tree().predict(data[2])


def test_input_validation():
    with pytest.raises(ShapeError):
        as_images(np.zeros((2, 100)), "mnist")
    with pytest.raises(ShapeError):
        as_images(np.zeros((2, 3, 28, 28)), "mnist")
    with pytest.raises(ValueError):
        as_images(np.full((1, 784), np.nan), "mnist")
    with pytest.raises(ShapeError):
        check_labels([1, 2], 3)
    with pytest.raises(ValueError):
        check_labels([1, 10], 2)
    with pytest.raises(ValueError):
        check_labels([0.5, 1.0], 2)
    assert check_labels(np.array([1.0, 2.0]), 2).dtype == np.int64


def test_pixel_scaler_in_pipeline(data):
    X, y, Xt, _ = data
    scaler = PixelScaler().fit(X)
    s = scaler.transform(np.array([[0, 255]], dtype=np.uint8))
    assert s.min() == -1.0 and s.max() == 1.0
    pipe = make_pipeline(PixelScaler(), small_tree()).fit(X, y)
    direct = small_tree().fit(X, y)
    np.testing.assert_allclose(pipe.predict_proba(Xt), direct.predict_proba(Xt), rtol=1e-5, atol=1e-7)


def test_fresh_params_unchanged_by_predict(data):
    X, y, Xt, _ = data
    clf = small_tree().fit(X, y)
    before = clf.params_.copy()
    clf.predict(Xt)
    assert clf.params_.equal(before)
