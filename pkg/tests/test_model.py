import math

import numpy as np
import pytest

from stnn.data import Relation, RelationSet, SeriesTensor
from stnn.model import (DynamicGateParams, LatentState, ModelVariant, StateError,
                        StnnParameters, decode, dynamic_gate, dynamics_step,
                        extract_correlations, dynamic_correlations, gradients,
                        init_model, load_checkpoint, loss, save_checkpoint)
from stnn.numerics import substream


def random_relations(n, count, rng, normalize=True):
    rels = []
    for r in range(count):
        w = np.abs(rng.normal(size=(n, n)))
        np.fill_diagonal(w, 0.0)
        if normalize:
            w = w / w.sum(axis=1, keepdims=True)
        rels.append(Relation(f"w{r}", w))
    return RelationSet(n, rels)


def random_model(n, m, N, T, count, variant, seed=0, param_scale=0.3):
    """A generic (non-init) model instance for behavioral tests."""
    rng = substream(seed, "model-test")
    relations = random_relations(n, count, rng)
    z = LatentState(rng.normal(0.0, 0.5, size=(T, n, N)))
    gammas = None
    gate = None
    if ModelVariant(variant).uses_gamma:
        gammas = [rng.normal(0.0, param_scale, size=(n, n)) for _ in range(count)]
    elif ModelVariant(variant).is_gated:
        gate = DynamicGateParams(rng.normal(0.0, 0.5, size=(count, N)),
                                 rng.normal(0.0, 0.5, size=count))
    params = StnnParameters(
        theta0=np.eye(N) + rng.normal(0.0, 0.1, size=(N, N)),
        thetas=[rng.normal(0.0, param_scale, size=(N, N)) for _ in range(count)],
        decoder_weight=rng.normal(0.0, param_scale, size=(N, m)),
        decoder_bias=rng.normal(0.0, 0.1, size=m),
        gammas=gammas,
        gate=gate,
    )
    x = SeriesTensor(rng.uniform(0.0, 1.0, size=(T, n, m)))
    return x, z, params, relations


# ---------------------------------------------------------------------------
# initialization


def test_init_same_seed_identical():
    relations = random_relations(4, 2, substream(0, "rel"))
    za, pa = init_model(4, 2, 3, relations, ModelVariant.STNN_R, 6, substream(5, "init"))
    zb, pb = init_model(4, 2, 3, relations, ModelVariant.STNN_R, 6, substream(5, "init"))
    assert np.array_equal(za.z, zb.z)
    assert np.array_equal(pa.theta0, pb.theta0)
    for a, b in zip(pa.gammas, pb.gammas):
        assert np.array_equal(a, b)


def test_init_stnn_r_gammas_are_ones_and_match_plain_stnn():
    relations = random_relations(5, 2, substream(1, "rel"))
    z, params = init_model(5, 1, 3, relations, ModelVariant.STNN_R, 8, substream(2, "init"))
    for g in params.gammas:
        assert np.all(g == 1.0)
    out_r = dynamics_step(z.z[0], params, relations, ModelVariant.STNN_R)
    plain = StnnParameters(params.theta0, params.thetas, params.decoder_weight,
                           params.decoder_bias)
    out_plain = dynamics_step(z.z[0], plain, relations, ModelVariant.STNN)
    assert np.array_equal(out_r, out_plain)


def test_init_variant_extras():
    relations = random_relations(3, 1, substream(1, "rel"))
    _, p_stnn = init_model(3, 1, 2, relations, ModelVariant.STNN, 5, substream(0, "i"))
    assert p_stnn.gammas is None and p_stnn.gate is None
    _, p_d = init_model(3, 1, 2, relations, ModelVariant.STNN_D, 5, substream(0, "i"))
    assert all((g >= 0).all() for g in p_d.gammas)
    _, p_g = init_model(3, 1, 2, relations, ModelVariant.STNN_DYNAMIC_GATE, 5, substream(0, "i"))
    assert np.all(p_g.gate.weights == 0.0) and np.all(p_g.gate.biases == 0.0)


def test_init_argument_errors():
    relations = RelationSet(3, [])
    with pytest.raises(ValueError):
        init_model(3, 1, 0, relations, ModelVariant.STNN, 5, substream(0, "i"))
    with pytest.raises(ValueError):
        init_model(3, 1, 2, relations, ModelVariant.STNN, 1, substream(0, "i"))


# ---------------------------------------------------------------------------
# dynamics and decoding


def test_dynamics_zero_stays_zero():
    x, z, params, relations = random_model(4, 1, 3, 5, 2, ModelVariant.STNN)
    out = dynamics_step(np.zeros((4, 3)), params, relations, ModelVariant.STNN)
    assert np.array_equal(out, np.zeros((4, 3)))


def test_dynamics_scalar_tanh():
    relations = RelationSet(1, [])
    params = StnnParameters(np.array([[1.0]]), [], np.array([[1.0]]), np.zeros(1))
    out = dynamics_step(np.array([[0.5]]), params, relations, ModelVariant.STNN)
    assert out[0, 0] == pytest.approx(0.4621171573, abs=1e-10)


def test_dynamics_two_node_swap():
    relations = RelationSet(2, [Relation("w", np.array([[0.0, 1.0], [1.0, 0.0]]))])
    params = StnnParameters(np.array([[0.0]]), [np.array([[1.0]])],
                            np.array([[1.0]]), np.zeros(1))
    zt = np.array([[0.3], [-0.8]])
    out = dynamics_step(zt, params, relations, ModelVariant.STNN)
    assert out[0, 0] == pytest.approx(math.tanh(-0.8), abs=1e-12)
    assert out[1, 0] == pytest.approx(math.tanh(0.3), abs=1e-12)


def test_dynamics_output_bounded():
    x, z, params, relations = random_model(6, 1, 4, 5, 2, ModelVariant.STNN, param_scale=0.8)
    out = dynamics_step(2.0 * z.z[0], params, relations, ModelVariant.STNN)
    assert np.all(np.abs(out) < 1.0)
    # extreme pre-activations saturate to +/-1 at float precision, never beyond
    extreme = dynamics_step(1e3 * z.z[0], params, relations, ModelVariant.STNN)
    assert np.all(np.abs(extreme) <= 1.0)
    assert np.all(np.isfinite(extreme))


def test_decode_bias_only_and_selector():
    params = StnnParameters(np.eye(2), [], np.zeros((2, 3)), np.array([1.5, -2.0, 0.25]))
    out = decode(np.zeros((4, 2)), params)
    assert np.allclose(out, np.tile([1.5, -2.0, 0.25], (4, 1)))
    sel = StnnParameters(np.eye(2), [], np.eye(2), np.zeros(2))
    zt = substream(0, "dec").normal(size=(5, 2))
    assert np.array_equal(decode(zt, sel), zt)


def test_decode_matches_per_row_oracle():
    x, z, params, relations = random_model(5, 3, 4, 5, 1, ModelVariant.STNN)
    zt = z.z[0]
    out = decode(zt, params)
    for i in range(5):
        for j in range(3):
            expected = float(zt[i] @ params.decoder_weight[:, j]) + params.decoder_bias[j]
            assert out[i, j] == pytest.approx(expected, abs=1e-12)


# ---------------------------------------------------------------------------
# reductions and equivariance


def test_reduction_stnn_r_with_unit_gamma_equals_stnn():
    x, z, params, relations = random_model(5, 2, 3, 6, 2, ModelVariant.STNN_R)
    params.gammas = [np.ones((5, 5)) for _ in range(2)]
    a = dynamics_step(z.z[0], params, relations, ModelVariant.STNN_R)
    b = dynamics_step(z.z[0], params, relations, ModelVariant.STNN)
    assert np.allclose(a, b, atol=1e-15, rtol=0)


def test_reduction_stnn_d_with_gamma_equal_w_equals_stnn():
    x, z, params, relations = random_model(5, 2, 3, 6, 2, ModelVariant.STNN_D)
    params.gammas = [w.copy() for w in relations.matrices()]
    a = dynamics_step(z.z[0], params, relations, ModelVariant.STNN_D)
    b = dynamics_step(z.z[0], params, relations, ModelVariant.STNN)
    assert np.allclose(a, b, atol=1e-15, rtol=0)


def test_reduction_zero_relations_is_nonspatial():
    rng = substream(12, "nonspatial")
    relations = RelationSet(4, [])
    params = StnnParameters(rng.normal(size=(3, 3)), [], rng.normal(size=(3, 1)), np.zeros(1))
    zt = rng.normal(size=(4, 3))
    out = dynamics_step(zt, params, relations, ModelVariant.STNN)
    assert np.allclose(out, np.tanh(zt @ params.theta0), atol=1e-15)


def test_permutation_equivariance():
    x, z, params, relations = random_model(6, 2, 3, 5, 2, ModelVariant.STNN)
    perm = np.array([4, 2, 0, 5, 1, 3])
    p = np.eye(6)[perm]
    permuted_rels = RelationSet(6, [Relation(r.label, p @ r.matrix @ p.T)
                                    for r in relations])
    lhs = dynamics_step(p @ z.z[0], params, permuted_rels, ModelVariant.STNN)
    rhs = p @ dynamics_step(z.z[0], params, relations, ModelVariant.STNN)
    assert np.allclose(lhs, rhs, atol=1e-12, rtol=0)


# ---------------------------------------------------------------------------
# dynamic gate


def test_gate_zero_params_halves_prior():
    x, z, params, relations = random_model(4, 1, 3, 5, 2, ModelVariant.STNN_DYNAMIC_GATE)
    params.gate = DynamicGateParams(np.zeros((2, 3)), np.zeros(2))
    gated = dynamic_gate(z.z[0], params.gate, relations)
    for g, w in zip(gated, relations.matrices()):
        assert np.allclose(g, 0.5 * w, atol=1e-15)


def test_gate_saturates_to_prior():
    x, z, params, relations = random_model(4, 1, 3, 5, 1, ModelVariant.STNN_DYNAMIC_GATE)
    params.gate = DynamicGateParams(np.zeros((1, 3)), np.array([60.0]))
    gated = dynamic_gate(z.z[0], params.gate, relations)
    assert np.allclose(gated[0], relations.matrices()[0], atol=1e-15)


def test_gate_single_series_half():
    relations = RelationSet(1, [Relation("w", np.array([[0.0]]))])
    gate = DynamicGateParams(np.array([[1.0]]), np.zeros(1))
    out = dynamic_gate(np.array([[0.0]]), gate, relations)
    assert out[0][0, 0] == 0.0  # 0.5 gate on zero prior
    relations2 = RelationSet(1, [Relation("w", np.array([[2.0]]))])
    out2 = dynamic_gate(np.array([[0.0]]), gate, relations2)
    assert out2[0][0, 0] == pytest.approx(1.0)


def test_gate_missing_params_raises():
    x, z, params, relations = random_model(4, 1, 3, 5, 1, ModelVariant.STNN)
    with pytest.raises(StateError):
        dynamic_gate(z.z[0], None, relations)


# ---------------------------------------------------------------------------
# loss


def brute_force_loss(x, z, params, relations, variant, lam, gamma):
    """Scalar-loop re-implementation of the objective, kept independent of
    the library's vectorized path."""
    T, n, m = x.values.shape
    N = z.latent_dim
    recon = 0.0
    for t in range(T):
        for i in range(n):
            for j in range(m):
                pred = sum(z.z[t, i, k] * params.decoder_weight[k, j] for k in range(N))
                pred += params.decoder_bias[j]
                recon += (pred - x.values[t, i, j]) ** 2
    recon /= T * n * m

    def effective(zt):
        mats = []
        for r, w in enumerate(relations.matrices()):
            if variant == ModelVariant.STNN:
                mats.append(w)
            elif variant == ModelVariant.STNN_R:
                mats.append(w * params.gammas[r])
            elif variant == ModelVariant.STNN_D:
                mats.append(params.gammas[r])
            else:
                sig = 1.0 / (1.0 + np.exp(-(zt @ params.gate.weights[r] + params.gate.biases[r])))
                mats.append(w * sig[:, None])
        return mats

    dyn = 0.0
    for t in range(T - 1):
        mats = effective(z.z[t])
        pre = z.z[t] @ params.theta0
        for mat, theta in zip(mats, params.thetas):
            pre = pre + mat @ z.z[t] @ theta
        step = np.tanh(pre)
        dyn += float(((z.z[t + 1] - step) ** 2).sum()) / (n * N)
    dyn /= T - 1

    l1 = 0.0
    if params.gammas is not None:
        l1 = float(sum(np.abs(g).sum() for g in params.gammas))
    return recon, dyn, l1, recon + lam * dyn + gamma * l1


@pytest.mark.parametrize("variant", list(ModelVariant))
def test_loss_matches_brute_force_oracle(variant):
    x, z, params, relations = random_model(4, 2, 3, 6, 2, variant, seed=3)
    got = loss(x, z, params, relations, variant, lam=0.7, gamma=0.2)
    recon, dyn, l1, total = brute_force_loss(x, z, params, relations, variant, 0.7, 0.2)
    assert got.reconstruction == pytest.approx(recon, abs=1e-12)
    assert got.dynamics == pytest.approx(dyn, abs=1e-12)
    assert got.l1_gamma == pytest.approx(l1, abs=1e-12)
    assert got.total == pytest.approx(total, abs=1e-12)


def test_loss_breakdown_identity():
    x, z, params, relations = random_model(4, 2, 3, 6, 2, ModelVariant.STNN_R, seed=8)
    b = loss(x, z, params, relations, ModelVariant.STNN_R, lam=0.3, gamma=0.05)
    assert b.total == pytest.approx(b.reconstruction + 0.3 * b.dynamics + 0.05 * b.l1_gamma,
                                    abs=1e-12)


def test_loss_perfect_fit_is_zero():
    # latent trajectory generated by the dynamics themselves, decoded exactly
    rng = substream(13, "perfect")
    relations = random_relations(3, 1, rng)
    params = StnnParameters(0.5 * np.eye(2), [rng.normal(0.0, 0.2, size=(2, 2))],
                            rng.normal(size=(2, 1)), np.zeros(1))
    z = np.empty((5, 3, 2))
    z[0] = rng.normal(size=(3, 2))
    for t in range(4):
        z[t + 1] = dynamics_step(z[t], params, relations, ModelVariant.STNN)
    x = SeriesTensor(z @ params.decoder_weight + params.decoder_bias)
    b = loss(x, LatentState(z), params, relations, ModelVariant.STNN, lam=1.0, gamma=0.0)
    assert b.total == pytest.approx(0.0, abs=1e-24)


def test_loss_trivial_scalar_case():
    relations = RelationSet(1, [])
    params = StnnParameters(np.array([[1.0]]), [], np.array([[1.0]]), np.zeros(1))
    x = SeriesTensor(np.zeros((2, 1, 1)))
    z = LatentState(np.zeros((2, 1, 1)))
    b = loss(x, z, params, relations, ModelVariant.STNN, lam=1.0, gamma=0.0)
    assert (b.reconstruction, b.dynamics, b.total) == (0.0, 0.0, 0.0)


def test_loss_pair_subset_and_errors():
    x, z, params, relations = random_model(4, 1, 2, 8, 1, ModelVariant.STNN)
    b = loss(x, z, params, relations, ModelVariant.STNN, 1.0, 0.0, pairs=[2, 5])
    assert math.isfinite(b.total)
    with pytest.raises(ValueError):
        loss(x, z, params, relations, ModelVariant.STNN, 1.0, 0.0, pairs=[])
    with pytest.raises(ValueError):
        loss(x, z, params, relations, ModelVariant.STNN, 1.0, 0.0, pairs=[8])


# ---------------------------------------------------------------------------
# correlation extraction


def test_extract_correlations_unit_gamma_returns_priors():
    x, z, params, relations = random_model(4, 1, 2, 5, 2, ModelVariant.STNN_R)
    params.gammas = [np.ones((4, 4)) for _ in range(2)]
    effective, dominant = extract_correlations(params, relations, ModelVariant.STNN_R)
    for (label, mat), w in zip(effective, relations.matrices()):
        assert np.array_equal(mat, w)


def test_extract_correlations_single_relation_dominant_zero():
    x, z, params, relations = random_model(4, 1, 2, 5, 1, ModelVariant.STNN_D)
    _, dominant = extract_correlations(params, relations, ModelVariant.STNN_D)
    assert np.array_equal(dominant, np.zeros(4, dtype=int))


def test_extract_correlations_pass_through_for_discovery():
    x, z, params, relations = random_model(4, 1, 2, 5, 2, ModelVariant.STNN_D)
    effective, _ = extract_correlations(params, relations, ModelVariant.STNN_D)
    for (label, mat), g in zip(effective, params.gammas):
        assert np.array_equal(mat, g)


def test_extract_correlations_rejects_plain_stnn():
    x, z, params, relations = random_model(4, 1, 2, 5, 1, ModelVariant.STNN)
    with pytest.raises(StateError):
        extract_correlations(params, relations, ModelVariant.STNN)


def test_dynamic_correlations_rows():
    x, z, params, relations = random_model(3, 1, 2, 6, 2, ModelVariant.STNN_DYNAMIC_GATE)
    rows = dynamic_correlations(z, params, relations, 2, 4)
    assert len(rows) == 3 * 3  # three steps, three series
    assert {t for t, *_ in rows} == {2, 3, 4}
    with pytest.raises(StateError):
        dynamic_correlations(z, StnnParameters(params.theta0, params.thetas,
                                               params.decoder_weight, params.decoder_bias),
                             relations, 1, 2)


# ---------------------------------------------------------------------------
# checkpoints


@pytest.mark.parametrize("variant", list(ModelVariant))
def test_checkpoint_round_trip_exact(tmp_path, variant):
    x, z, params, relations = random_model(4, 2, 3, 6, 2, variant, seed=21)
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, z, params, relations, variant, 0.5, 0.01, 77)
    back = load_checkpoint(path)
    assert back.variant == variant
    assert (back.lam, back.gamma, back.seed) == (0.5, 0.01, 77)
    assert np.array_equal(back.z.z, z.z)
    assert np.array_equal(back.params.theta0, params.theta0)
    for a, b in zip(back.params.thetas, params.thetas):
        assert np.array_equal(a, b)
    assert np.array_equal(back.params.decoder_weight, params.decoder_weight)
    if params.gammas is not None:
        for a, b in zip(back.params.gammas, params.gammas):
            assert np.array_equal(a, b)
    if params.gate is not None:
        assert np.array_equal(back.params.gate.weights, params.gate.weights)
    for a, b in zip(back.relations.matrices(), relations.matrices()):
        assert np.array_equal(a, b)
