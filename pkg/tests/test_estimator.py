import numpy as np
import pytest
from sklearn.base import clone

from loda.data import SyntheticSpec, dataset_from_spec
from loda.estimator import LoDaRegressor, check_images
from loda.exceptions import InputError

DATA = dataset_from_spec(SyntheticSpec(severities=(0.0, 1.0, 2.0, 3.0)), 0)


def test_get_set_params_and_clone():
    est = LoDaRegressor(epochs=2, latent_dim=32)
    assert est.get_params()["latent_dim"] == 32
    twin = clone(est.set_params(heads=2))
    assert twin.get_params()["heads"] == 2


def test_fit_predict_score():
    est = LoDaRegressor(epochs=1, batch_size=4, patches_per_test_image=2)
    assert est.fit(DATA.images, DATA.labels) is est
    pred = est.predict(DATA.images)
    assert pred.shape == (len(DATA),)
    assert -1.0 <= est.score(DATA.images, DATA.labels) <= 1.0
    assert len(est.history_) == 1


def test_predict_before_fit():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        LoDaRegressor().predict(DATA.images)


@pytest.mark.parametrize("bad", [np.zeros((2, 1, 64, 64)), np.full((2, 3, 64, 64), 2.0),
                                 np.full((2, 3, 64, 64), np.nan), np.zeros((2, 3, 32, 32))])
def test_image_validation(bad):
    with pytest.raises(InputError):
        check_images(bad, 64)


def test_score_validation():
    est = LoDaRegressor(epochs=1)
    with pytest.raises(InputError, match="constant"):
        est.fit(DATA.images, np.ones(len(DATA)))
    with pytest.raises(InputError):
        est.fit(DATA.images, np.ones(3))
