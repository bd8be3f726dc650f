import numpy as np
import pytest

from stnn.model import ModelVariant, gradients, loss
from stnn.training import _blocks_of, _grad_blocks, grad_check

from test_model import random_model


@pytest.mark.parametrize("variant", list(ModelVariant))
def test_every_variant_passes_finite_difference_check(variant):
    assert grad_check(4, 2, 3, 6, 2, variant, lam=1.0, gamma=0.1, seed=0) < 1e-5


def test_stnn_r_with_gamma_penalty_away_from_zero():
    assert grad_check(4, 2, 3, 6, 2, ModelVariant.STNN_R, lam=1.0, gamma=0.1, seed=3) < 1e-5


def test_lambda_zero_zeroes_theta_blocks():
    x, z, params, relations = random_model(4, 2, 3, 6, 2, ModelVariant.STNN, seed=5)
    g = gradients(x, z, params, relations, ModelVariant.STNN, lam=0.0, gamma=0.0)
    assert np.all(g.theta0 == 0.0)
    for block in g.thetas:
        assert np.all(block == 0.0)
    assert grad_check(4, 2, 3, 6, 2, ModelVariant.STNN, lam=0.0, gamma=0.1, seed=5) < 1e-5


def test_perfect_fit_has_zero_gradients():
    from stnn.data import SeriesTensor
    from stnn.model import LatentState, StnnParameters, decode, dynamics_step
    from stnn.numerics import substream
    from test_model import random_relations

    rng = substream(2, "perfect-grad")
    relations = random_relations(3, 1, rng)
    params = StnnParameters(0.5 * np.eye(2), [rng.normal(0.0, 0.2, size=(2, 2))],
                            rng.normal(size=(2, 1)), np.zeros(1))
    z = np.empty((5, 3, 2))
    z[0] = rng.normal(size=(3, 2))
    for t in range(4):
        z[t + 1] = dynamics_step(z[t], params, relations, ModelVariant.STNN)
    x = SeriesTensor(np.stack([decode(z[t], params) for t in range(5)]))
    g = gradients(x, LatentState(z), params, relations, ModelVariant.STNN, 1.0, 0.0)
    for block in g.arrays():
        assert np.all(block == 0.0)


def test_pair_restricted_gradients_match_fd_with_duplicates():
    variant = ModelVariant.STNN_R
    x, z, params, relations = random_model(4, 2, 3, 8, 2, variant, seed=11)
    pairs = [2, 2, 5]  # duplicate pair counts twice
    l1_scale = 3.0 / 7.0
    analytic = _grad_blocks(gradients(x, z, params, relations, variant, 0.8, 0.05,
                                      pairs=pairs, l1_scale=l1_scale))
    blocks = _blocks_of(z, params)
    step = 1e-6
    worst = 0.0
    for key, block in blocks.items():
        flat = block.ravel()
        ana = analytic[key].ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            hi = loss(x, z, params, relations, variant, 0.8, 0.05,
                      pairs=pairs, l1_scale=l1_scale).total
            flat[idx] = orig - step
            lo = loss(x, z, params, relations, variant, 0.8, 0.05,
                      pairs=pairs, l1_scale=l1_scale).total
            flat[idx] = orig
            fd = (hi - lo) / (2 * step)
            worst = max(worst, abs(ana[idx] - fd) / max(1e-8, abs(ana[idx]) + abs(fd)))
    assert worst < 1e-5


def test_unsampled_latent_slices_get_zero_gradient():
    x, z, params, relations = random_model(3, 1, 2, 10, 1, ModelVariant.STNN, seed=7)
    g = gradients(x, z, params, relations, ModelVariant.STNN, 1.0, 0.0, pairs=[4])
    touched = {3, 4}  # 0-based slices for pair t=4
    for t in range(10):
        if t in touched:
            assert np.any(g.z[t] != 0.0)
        else:
            assert np.all(g.z[t] == 0.0)


def test_l1_subgradient_zero_at_zero():
    x, z, params, relations = random_model(4, 1, 2, 6, 1, ModelVariant.STNN_D, seed=9)
    params.gammas[0][:] = 0.0
    params.gammas[0][0, 1] = 0.7
    params.gammas[0][2, 3] = -0.4
    g = gradients(x, z, params, relations, ModelVariant.STNN_D, lam=0.0, gamma=2.0)
    expected = np.zeros((4, 4))
    expected[0, 1] = 2.0
    expected[2, 3] = -2.0
    assert np.array_equal(g.gammas[0], expected)
