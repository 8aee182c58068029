import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from straightwm.envs import generate_dataset, make_env
from straightwm.errors import ContractError
from straightwm.estimators import StraightenedWorldModel

KW = dict(epochs=1, steps_per_epoch=2, batch_size=4, encoder_hidden=8, latent_channels=4, predictor_hidden=16, head_dim=4)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(make_env("umaze"), n_traj=6, traj_len=30, seed=0)


def test_params_roundtrip():
    est = StraightenedWorldModel(lam=0.0, **KW)
    assert est.get_params()["lam"] == 0.0
    assert clone(est).get_params() == est.get_params()
    est.set_params(seed=4)
    assert est.seed == 4


def test_fit_transform_score(data):
    est = StraightenedWorldModel(**KW)
    with pytest.raises(NotFittedError):
        est.transform(np.zeros((1, 2, 32, 32)))
    est.fit(data)
    obs = make_env("umaze").render_positions(np.array([[1.5, 1.5], [2.5, 1.5]]))
    z = est.transform(obs)
    assert z.shape == (2, est.n_features_out_) == (2, 64)
    np.testing.assert_array_equal(z, est.model_.encode_numpy(obs).reshape(2, -1))
    assert -1 <= est.score(data) <= 1
    again = StraightenedWorldModel(**KW).fit(data)
    assert again.model_.to_bytes() == est.model_.to_bytes()


def test_fit_rejects_arrays():
    with pytest.raises(ContractError):
        StraightenedWorldModel(**KW).fit(np.zeros((3, 2)))
