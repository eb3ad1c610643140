import math

import numpy as np
import pytest

from ages.divergences import divergence_value_mc
from ages.gaussian import (
    GaussianJoint,
    exact_critic,
    gaussian_fdivergence,
    gaussian_joint_logratio,
    hellinger2_gaussian,
    kl_gaussian,
    linear_gaussian_joints,
)
from ages.models import (
    LOGVAR_MIN,
    Transform,
    TransformSpec,
    analytic_elbo,
    build_model,
    elbo_terms,
)
from ages.nn import MlpSpec, ShapeError, UsageError, finite_diff_check


def deterministic_linear(W, b=None):
    W = np.asarray(W, dtype=float)
    t = Transform(TransformSpec("deterministic", MlpSpec(W.shape)))
    t.net.layers[0].W[:] = W
    t.net.layers[0].b[:] = 0.0 if b is None else b
    return t


def gaussian_const(dim, mean=0.0, logvar=0.0, in_dim=None):
    """Gaussian transform whose heads ignore the input."""
    in_dim = dim if in_dim is None else in_dim
    t = Transform(TransformSpec.build("gaussian", in_dim, dim))
    layer = t.net.layers[0]
    layer.W[:] = 0.0
    layer.b[:dim] = mean
    layer.b[dim:] = logvar
    return t


# -- transforms --------------------------------------------------------------


def test_deterministic_identity_encoder():
    t = deterministic_linear(np.eye(2))
    np.testing.assert_array_equal(t.sample(np.array([[0.3, -0.3]])), [[0.3, -0.3]])


def test_deterministic_linear_generator():
    t = deterministic_linear(2 * np.eye(2))
    np.testing.assert_array_equal(t.sample(np.array([[1.0, 1.0]])), [[2.0, 2.0]])


def test_gaussian_at_logvar_floor_stays_near_mean():
    t = gaussian_const(2, mean=1.5, logvar=-50.0)
    x = np.zeros((10_000, 2))
    z = t.sample(x, np.random.default_rng(0))
    # sigma = e^-5 ~ 0.0067, so 0.02 is a 3-sigma band per coordinate
    assert np.mean(np.all(np.abs(z - 1.5) < 0.02, axis=1)) > 0.99
    assert t.clamp_count > 0
    _, lv = t.gaussian_heads(x[:1])
    assert np.all(lv == LOGVAR_MIN)


def test_unit_gaussian_sample_variance():
    t = gaussian_const(2)
    z = t.sample(np.zeros((100_000, 2)), np.random.default_rng(1))
    var = z.var(axis=0)
    assert np.all((var >= 0.98) & (var <= 1.02))


def test_noise_concat_with_zero_noise_weights_is_deterministic():
    rng = np.random.default_rng(2)
    spec = TransformSpec.build("noise_concat", 2, 2, hidden=(5,), noise_dim=3)
    t = Transform(spec, rng)
    t.net.layers[0].W[2:, :] = 0.0  # noise rows
    det = Transform(TransformSpec.build("deterministic", 2, 2, hidden=(5,)))
    det.net.layers[0].W[:] = t.net.layers[0].W[:2]
    det.net.layers[0].b[:] = t.net.layers[0].b
    det.net.layers[1].W[:] = t.net.layers[1].W
    det.net.layers[1].b[:] = t.net.layers[1].b
    z = rng.standard_normal((7, 2))
    np.testing.assert_allclose(t.sample(z, rng), det.sample(z), rtol=1e-12)


def test_noise_concat_identity_on_noise_has_unit_variance():
    t = Transform(TransformSpec.build("noise_concat", 2, 2, noise_dim=2))
    t.net.layers[0].W[:] = np.vstack([np.zeros((2, 2)), np.eye(2)])
    t.net.layers[0].b[:] = 0.0
    x = t.sample(np.zeros((100_000, 2)), np.random.default_rng(3))
    np.testing.assert_allclose(x.var(axis=0), 1.0, atol=0.02)


def test_transform_spec_validation():
    with pytest.raises(ValueError):
        TransformSpec("deterministic", MlpSpec((2, 2)), noise_dim=1)
    with pytest.raises(ValueError):
        TransformSpec("noise_concat", MlpSpec((2, 2)), noise_dim=0)
    with pytest.raises(ValueError):
        TransformSpec("gaussian", MlpSpec((2, 3)))
    with pytest.raises(ValueError):
        TransformSpec("flow", MlpSpec((2, 2)))


def test_transform_shape_and_usage_errors():
    t = gaussian_const(2)
    with pytest.raises(ShapeError):
        t.sample(np.zeros((3, 5)), np.random.default_rng(0))
    with pytest.raises(UsageError):
        t.sample(np.zeros((3, 2)))
    with pytest.raises(UsageError):
        gaussian_const(2).backward(np.zeros((3, 2)))


@pytest.mark.parametrize("kind", ["gaussian", "noise_concat", "deterministic"])
def test_reparametrized_gradients_match_finite_differences(kind):
    # gradient of E||E(x, eps)||^2 with common random numbers
    rng = np.random.default_rng(4)
    t = Transform(TransformSpec.build(kind, 2, 2, hidden=(6,), activation="tanh"), rng)
    if kind == "gaussian":
        t.net.layers[-1].W[:, 2:] = rng.normal(0, 0.3, (6, 2))
    x = rng.standard_normal((10_000, 2))
    eps = t.draw_noise(10_000, rng) if t.noise_dim else None

    def loss(p):
        saved = t.params.copy()
        t.net.set_params(p)
        v = float((t.sample(x, noise=eps) ** 2).sum(axis=1).mean())
        t.net.set_params(saved)
        return v

    z = t.sample(x, noise=eps)
    grads, _ = t.backward(2.0 * z / len(x))
    assert finite_diff_check(loss, t.params, grads, step=1e-5) <= 1e-3


def test_transform_input_gradients():
    rng = np.random.default_rng(5)
    t = Transform(TransformSpec.build("noise_concat", 2, 3, hidden=(4,), activation="tanh", noise_dim=2), rng)
    x = rng.standard_normal((3, 2))
    eps = t.draw_noise(3, rng)
    up = rng.standard_normal((3, 3))
    t.sample(x, noise=eps)
    _, gx = t.backward(up)

    def loss(flat):
        return float((t.sample(flat.reshape(3, 2), noise=eps) * up).sum())

    assert gx.shape == (3, 2)
    assert finite_diff_check(loss, x.ravel(), gx.ravel()) <= 1e-4


# -- model assembly ------------------------------------------------------------


MODEL_CFG = dict(
    data_dim=2,
    latent_dim=3,
    generator=dict(kind="gaussian", hidden=[8]),
    encoder=dict(kind="noise_concat", hidden=[8]),
    discriminator=dict(hidden=[8], zero_output=True),
)


def test_build_model_widths_and_zero_discriminator():
    m = build_model(MODEL_CFG, np.random.default_rng(0))
    assert m.discriminator.net.spec.in_dim == 5 and m.discriminator.net.spec.out_dim == 1
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 2))
    z = m.encoder_sample(x, rng)
    D = m.discriminator_score(x, z)
    np.testing.assert_array_equal(D, 0.0)
    np.testing.assert_array_equal(np.exp(D), 1.0)


def test_discriminator_score_is_clamped():
    m = build_model(MODEL_CFG, np.random.default_rng(0))
    m.discriminator.net.layers[-1].b[:] = 1e4
    D = m.discriminator_score(np.zeros((2, 2)), np.zeros((2, 3)))
    assert np.all(np.isfinite(D)) and np.all(D == 30.0)


def test_generator_only_model():
    cfg = dict(MODEL_CFG, encoder=None)
    m = build_model(cfg, np.random.default_rng(0))
    assert m.encoder is None and m.discriminator.net.spec.in_dim == 2


def test_build_model_same_seed_same_params():
    a = build_model(MODEL_CFG, np.random.default_rng(9))
    b = build_model(MODEL_CFG, np.random.default_rng(9))
    for name in ("generator", "encoder", "discriminator"):
        np.testing.assert_array_equal(a.networks()[name].params, b.networks()[name].params)


# -- Gaussian oracle machinery -------------------------------------------------


def test_logratio_examples():
    p = GaussianJoint([0.0], [[1.0]])
    np.testing.assert_allclose(gaussian_joint_logratio(p, p, np.array([[0.3], [-2.0]])), 0.0)
    q = GaussianJoint([1.0], [[1.0]])
    assert gaussian_joint_logratio(p, q, np.array([[0.0]]))[0] == pytest.approx(0.5)
    w = GaussianJoint([0.0], [[4.0]])
    assert gaussian_joint_logratio(p, w, np.array([[0.0]]))[0] == pytest.approx(math.log(2.0))


def test_gaussian_joint_rejects_bad_covariance():
    with pytest.raises(ValueError):
        GaussianJoint([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ValueError):
        GaussianJoint([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])


def test_mc_kl_matches_closed_form_within_three_se():
    rng = np.random.default_rng(6)
    pe = GaussianJoint([0.2, -0.1], [[1.0, 0.3], [0.3, 0.8]])
    pg = GaussianJoint([0.0, 0.4], [[1.3, -0.2], [-0.2, 1.1]])
    y = pg.sample(200_000, rng)
    est = divergence_value_mc("kl", lambda s: gaussian_joint_logratio(pe, pg, s), y)
    assert abs(est.value - kl_gaussian(pe, pg)) <= 3 * est.stderr


def test_hellinger_and_js_closed_forms_match_mc():
    rng = np.random.default_rng(7)
    pe = GaussianJoint([0.0], [[1.0]])
    pg = GaussianJoint([0.7], [[1.5]])
    y = pg.sample(400_000, rng)
    for name in ("hellinger", "js", "revkl"):
        est = divergence_value_mc(name, lambda s: gaussian_joint_logratio(pe, pg, s), y)
        assert abs(est.value - gaussian_fdivergence(name, pe, pg)) <= 3 * est.stderr, name
    assert hellinger2_gaussian(pe, pe) == pytest.approx(0.0, abs=1e-12)


def linear_model(rng=None):
    cfg = dict(
        data_dim=1,
        latent_dim=1,
        generator=dict(kind="gaussian", hidden=[]),
        encoder=dict(kind="gaussian", hidden=[]),
        discriminator=dict(hidden=[4]),
    )
    m = build_model(cfg, rng or np.random.default_rng(0))
    for t, w, b, lv in ((m.encoder, 0.6, 0.1, -0.5), (m.generator, 1.2, -0.3, -0.7)):
        layer = t.net.layers[0]
        layer.W[:] = [[w, 0.0]]
        layer.b[:] = [b, lv]
    return m


def test_linear_gaussian_joints_match_samples():
    m = linear_model()
    data = GaussianJoint([0.5], [[1.5]])
    pe, pg = linear_gaussian_joints(m, data)
    rng = np.random.default_rng(8)
    n = 400_000
    x = data.sample(n, rng)
    ye = np.hstack([x, m.encoder_sample(x, rng)])
    z = rng.standard_normal((n, 1))
    yg = np.hstack([m.generator_sample(z, rng), z])
    for p, y in ((pe, ye), (pg, yg)):
        np.testing.assert_allclose(y.mean(axis=0), p.mean, atol=0.01)
        np.testing.assert_allclose(np.cov(y.T), p.cov, atol=0.02)


def test_exact_critic_gradients():
    m = linear_model()
    pe, pg = linear_gaussian_joints(m, GaussianJoint([0.5], [[1.5]]))
    critic = exact_critic(pe, pg, 1)
    rng = np.random.default_rng(9)
    x, z = rng.standard_normal((5, 1)), rng.standard_normal((5, 1))
    critic.score(x, z)
    _, gx, gz = critic.backward(np.ones(5))
    h = 1e-6
    fx = (critic.score(x + h, z) - critic.score(x - h, z)) / (2 * h)
    fz = (critic.score(x, z + h) - critic.score(x, z - h)) / (2 * h)
    np.testing.assert_allclose(gx[:, 0], fx, rtol=1e-6)
    np.testing.assert_allclose(gz[:, 0], fz, rtol=1e-6)


def test_joint_kl_bounds_marginal_kl():
    m = linear_model()
    data = GaussianJoint([0.5], [[1.5]])
    pe, pg = linear_gaussian_joints(m, data)
    joint = kl_gaussian(pe, pg)
    marginal = kl_gaussian(pe.marginal([0]), pg.marginal([0]))
    assert joint > marginal >= 0.0


# -- analytic ELBO ---------------------------------------------------------------


def test_elbo_kl_term_vanishes_when_encoder_is_prior():
    enc = gaussian_const(2)
    gen = gaussian_const(2)
    res = elbo_terms(enc, gen, np.zeros((5, 2)), np.random.default_rng(0))
    assert res.kl == 0.0


def test_elbo_kl_term_example():
    enc = gaussian_const(1, mean=1.0)
    gen = gaussian_const(1)
    res = elbo_terms(enc, gen, np.zeros((3, 1)), np.random.default_rng(0))
    assert res.kl == pytest.approx(0.5)


def test_elbo_reconstruction_at_generator_mean():
    # generator mean = z, encoder deterministic in the limit (logvar at floor), z = x
    enc = Transform(TransformSpec.build("gaussian", 1, 1))
    enc.net.layers[0].W[:] = [[1.0, 0.0]]
    enc.net.layers[0].b[:] = [0.0, LOGVAR_MIN]
    gen = Transform(TransformSpec.build("gaussian", 1, 1))
    gen.net.layers[0].W[:] = [[1.0, 0.0]]
    gen.net.layers[0].b[:] = 0.0
    x = np.array([[0.4], [-1.2]])
    res = elbo_terms(enc, gen, x, noise=np.zeros((2, 1)))
    assert res.recon == pytest.approx(0.5 * math.log(2 * math.pi))


def test_elbo_gradients_match_finite_differences():
    rng = np.random.default_rng(10)
    enc = Transform(TransformSpec.build("gaussian", 2, 2, hidden=(5,), activation="tanh"), rng)
    gen = Transform(TransformSpec.build("gaussian", 2, 2, hidden=(5,), activation="tanh"), rng)
    for t in (enc, gen):
        t.net.layers[-1].W[:, 2:] = rng.normal(0, 0.3, (5, 2))
    x = rng.standard_normal((6, 2))
    eps = rng.standard_normal((12, 2))
    res = elbo_terms(enc, gen, x, n_samples=2, noise=eps, grads=True)
    for net, g in ((enc, res.grad_encoder), (gen, res.grad_generator)):

        def loss(p, net=net):
            saved = net.params.copy()
            net.net.set_params(p)
            v = elbo_terms(enc, gen, x, n_samples=2, noise=eps).loss
            net.net.set_params(saved)
            return v

        assert finite_diff_check(loss, net.params, g, step=1e-5) <= 1e-4


def test_elbo_equals_joint_kl_plus_data_entropy_on_linear_model():
    m = linear_model()
    data = GaussianJoint([0.5], [[1.5]])
    pe, pg = linear_gaussian_joints(m, data)
    rng = np.random.default_rng(11)
    x = data.sample(400_000, rng)
    noise = rng.standard_normal((x.shape[0], 1))
    res = elbo_terms(m.encoder, m.generator, x, noise=noise)
    # per-datum ELBO terms for a standard error
    per = []
    for chunk in np.array_split(np.arange(x.shape[0]), 40):
        per.append(elbo_terms(m.encoder, m.generator, x[chunk], noise=noise[chunk]).loss)
    se = np.std(per, ddof=1) / math.sqrt(len(per))
    expected = kl_gaussian(pe, pg) + data.entropy()
    assert abs(res.loss - expected) <= 3 * se


def test_analytic_elbo_needs_gaussian_transforms():
    det = deterministic_linear(np.eye(2))
    with pytest.raises(UsageError):
        analytic_elbo(det, gaussian_const(2), np.zeros((2, 2)))
