import math

import numpy as np
import pytest
import sympy as sp

from ages import divergences as dv

R = np.geomspace(1e-3, 1e3, 61)

# generator functions written independently of the module, for symbolic checks
t = sp.symbols("t", positive=True)
SYMBOLIC_F = {
    "kl": t * sp.log(t),
    "revkl": -sp.log(t),
    "js": -(t + 1) * sp.log((1 + t) / 2) + t * sp.log(t),
    "hellinger": (sp.sqrt(t) - 1) ** 2,
}


@pytest.mark.parametrize("name", dv.NAMED)
def test_second_derivatives_match_symbolic(name):
    f = SYMBOLIC_F[name]
    f_tilde = sp.simplify(t * f.subs(t, 1 / t))
    f2 = sp.lambdify(t, sp.diff(f, t, 2), "numpy")
    ft2 = sp.lambdify(t, sp.diff(f_tilde, t, 2), "numpy")
    div = dv.get_divergence(name)
    np.testing.assert_allclose(div.f_second(R), f2(R), rtol=1e-9)
    np.testing.assert_allclose(div.f_tilde_second(R), ft2(R), rtol=1e-9)


@pytest.mark.parametrize("name", dv.NAMED)
def test_generator_function_invariants(name):
    div = dv.get_divergence(name)
    assert abs(div.f(1.0)) <= 1e-12 and abs(div.f_tilde(1.0)) <= 1e-12
    r = np.geomspace(0.01, 100, 41)
    np.testing.assert_allclose(div.f_tilde(r), r * div.f(1.0 / r), rtol=1e-9, atol=1e-12)
    assert np.all(div.f_second(R) > 0)


@pytest.mark.parametrize("name", ["js", "hellinger"])
def test_symmetric_divergences_have_equal_f_and_f_tilde(name):
    div = dv.get_divergence(name)
    np.testing.assert_allclose(div.f(R), div.f_tilde(R), rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("name", dv.NAMED)
def test_ratio_identity(name):
    s_t = dv.scaling_theta(name, R)
    s_p = dv.scaling_phi(name, R)
    np.testing.assert_allclose(s_t, s_p * R, rtol=1e-9)


@pytest.mark.parametrize("name, expected", [("kl", 1.0), ("revkl", 1.0), ("js", 0.5), ("hellinger", 0.5)])
def test_scalings_at_optimum_equal_f_second_at_one(name, expected):
    assert dv.scaling_theta(name, 1.0) == pytest.approx(expected, rel=1e-12)
    assert dv.scaling_phi(name, 1.0) == pytest.approx(expected, rel=1e-12)
    assert dv.get_divergence(name).f_second_at_one() == pytest.approx(expected, rel=1e-12)


def test_scaling_examples():
    assert dv.scaling_theta("kl", 2.0) == pytest.approx(2.0)
    np.testing.assert_allclose(dv.scaling_theta("revkl", R), 1.0, rtol=1e-12)
    assert dv.scaling_theta("js", 1.0) == pytest.approx(0.5)
    np.testing.assert_allclose(dv.scaling_phi("kl", R), 1.0, rtol=1e-12)
    assert dv.scaling_phi("js", 3.0) == pytest.approx(0.25)
    assert dv.scaling_phi("hellinger", 4.0) == pytest.approx(0.25)
    assert dv.scaling_theta("all", 7.0) == 1.0 and dv.scaling_phi("all", 0.1) == 1.0


@pytest.mark.parametrize("r", [0.0, -1.0, np.nan])
def test_non_positive_ratio_is_domain_error(r):
    with pytest.raises(dv.DomainError):
        dv.scaling_theta("kl", r)
    with pytest.raises(dv.DomainError):
        dv.scaling_phi("kl", r)


def test_unknown_divergence():
    with pytest.raises(dv.ConfigError):
        dv.get_divergence("wasserstein")


def test_clip_examples():
    assert dv.clip_ratio(dv.ClipPolicy(0.5), 10.0) == 2.0
    assert dv.clip_ratio(dv.ClipPolicy(0.5), 1.0) == 1.0
    assert dv.clip_ratio(dv.ClipPolicy(0.0), 123.0) == 123.0
    np.testing.assert_array_equal(dv.clip_ratio(dv.ClipPolicy(1.0), R), 1.0)


@pytest.mark.parametrize("r0", [-0.1, 1.5])
def test_clip_policy_range(r0):
    with pytest.raises(dv.ConfigError):
        dv.ClipPolicy(r0)


@pytest.mark.parametrize("r0", [0.1, 0.5, 0.9])
def test_clipped_ratio_in_range(r0):
    c = dv.clip_ratio(dv.ClipPolicy(r0), R)
    assert np.all(c >= r0) and np.all(c <= 1.0 / r0)


@pytest.mark.parametrize("name", dv.NAMED)
@pytest.mark.parametrize("r0", [0.1, 0.5])
def test_clipped_scalings_bounded_and_contain_optimum(name, r0):
    logits = np.linspace(-40, 40, 801)
    s_t, s_p, _ = dv.scalings_from_logits(name, logits, dv.ClipPolicy(r0))
    f2 = dv.get_divergence(name).f_second_at_one()
    for s in (s_t, s_p):
        assert np.all(np.isfinite(s)) and np.all(s > 0)
        assert s.min() <= f2 <= s.max()
    assert s_t.max() / s_t.min() < 1e3


@pytest.mark.parametrize("name", dv.NAMED)
def test_full_clip_gives_f_second_at_one_and_normalizes_to_all(name):
    logits = np.linspace(-5, 5, 11)
    s_t, s_p, st = dv.scalings_from_logits(name, logits, dv.ClipPolicy(1.0))
    f2 = dv.get_divergence(name).f_second_at_one()
    np.testing.assert_allclose(s_t, f2, rtol=1e-12)
    np.testing.assert_allclose(s_p, f2, rtol=1e-12)
    n_t, n_p, _ = dv.scalings_from_logits(name, logits, dv.ClipPolicy(1.0), normalize=True)
    a_t, a_p, _ = dv.scalings_from_logits("all", logits)
    np.testing.assert_array_equal(n_t, a_t)
    np.testing.assert_array_equal(n_p, a_p)
    assert st.clipped == 10


def test_logit_clamp_guards_overflow():
    s_t, s_p, st = dv.scalings_from_logits("kl", np.array([1000.0, -1000.0, 0.0]))
    assert np.all(np.isfinite(s_t)) and st.clamped == 2
    assert s_t[0] == pytest.approx(math.exp(30.0))


def test_heuristic_table_values():
    D = np.array([-1.0, 0.0, 2.0])
    kt, kp = dv.heuristic_scalings("kl", D)
    np.testing.assert_allclose(kt, 1.0)
    np.testing.assert_allclose(kp, (D + 1) * np.exp(D))
    rt, rp = dv.heuristic_scalings("revkl", D)
    np.testing.assert_allclose(rt, (D - 1) * np.exp(-D))
    np.testing.assert_allclose(rp, -1.0)
    jt, jp = dv.heuristic_scalings("js", np.array([0.0]))
    # log(2 / (1 + 1)) = 0 at the optimum
    np.testing.assert_allclose([jt[0], jp[0]], 0.0, atol=1e-15)
    with pytest.raises(dv.ConfigError):
        dv.heuristic_scalings("hellinger", D)


# -- Monte-Carlo divergence values -----------------------------------------


@pytest.mark.parametrize("name", dv.NAMED)
def test_identical_distributions_have_zero_divergence(name):
    x = np.random.default_rng(0).standard_normal(1000)
    est = dv.divergence_value_mc(name, lambda s: np.zeros_like(s), x)
    assert est.value == pytest.approx(0.0, abs=1e-12) and est.reliable


def test_kl_between_unit_gaussians():
    # p_e = N(0, 1), p_g = N(1, 1): log r(x) = log N(x; 0) - log N(x; 1) = 0.5 - x
    x = np.random.default_rng(1).normal(1.0, 1.0, 1_000_000)
    est = dv.divergence_value_mc("kl", lambda s: 0.5 - s, x)
    assert abs(est.value - 0.5) <= 0.01


def test_non_finite_samples_excluded_and_flagged():
    D = np.zeros(100)
    D[:5] = np.inf
    est = dv.divergence_value_mc("kl", lambda s: s, D)
    assert est.n_excluded == 5 and est.n_used == 95
    assert not est.reliable


def test_all_has_no_value():
    with pytest.raises(dv.ConfigError):
        dv.divergence_value_mc("all", lambda s: s, np.zeros(3))
