import math

import numpy as np
import pytest
from scipy import stats

from netstrat.model import (ParamSpace, PriorConfig, log_likelihood, log_prior,
                            make_posterior, params_from_json, params_to_json,
                            poisson_mean, strata_probs, zip_log_pmf)
from netstrat.simulate import SimConfig, brute_force_likelihood, generate
from conftest import make_study, random_params, random_unconstrained


def tiny_space(j=2, free_beta_s3=False):
    return ParamSpace(class_labels=tuple(f"c{i}" for i in range(j)),
                      strata_cov_names=("x1", "x2"),
                      outcome_cov_names=("x1",),
                      free_beta_s3=free_beta_s3)


def small_data(seed=0, n_classes=3, class_size=4):
    data, _ = generate(SimConfig(n_classes=n_classes, class_size=class_size,
                                 edge_prob=0.5, seed=seed))
    return data


# ---- parameter space ----


def test_dim_matches_free_parameter_count():
    for j, kg, ky, free in [(2, 2, 1, False), (5, 3, 2, True)]:
        sp = ParamSpace(class_labels=tuple(f"c{i}" for i in range(j)),
                        strata_cov_names=tuple(f"g{i}" for i in range(kg)),
                        outcome_cov_names=tuple(f"y{i}" for i in range(ky)),
                        free_beta_s3=free)
        n_beta = 4 if free else 3
        want = 3 * (1 + kg) + 1 + 9 + n_beta + ky + 9 + 1 + 2 * j
        assert sp.dim == want
        assert len(sp.names()) == sp.dim


def test_pack_unpack_roundtrip():
    sp = tiny_space()
    rng = np.random.default_rng(1)
    u = random_unconstrained(sp, rng, scale=1.5)
    p = sp.unpack(u)
    assert sp.pack(p) == pytest.approx(u, abs=1e-12)
    assert p.sigma_a > 0 and p.sigma_b > 0
    assert np.all((p.phi >= 0) & (p.phi <= 1))
    # non-centered intercepts: a = sigma_a * raw
    assert p.a == pytest.approx(p.sigma_a * u[sp.block("a")])


def test_constrained_roundtrip_and_matrix():
    sp = tiny_space(free_beta_s3=True)
    rng = np.random.default_rng(2)
    u = np.vstack([random_unconstrained(sp, rng) for _ in range(6)])
    c = sp.constrain_matrix(u)
    for i in range(6):
        assert c[i] == pytest.approx(sp.to_constrained(sp.unpack(u[i])), abs=0)
        p2 = sp.from_constrained(c[i])
        assert sp.to_constrained(p2) == pytest.approx(c[i], abs=1e-12)


def test_parameter_names_unique_and_structured():
    sp = tiny_space()
    names = sp.names()
    assert len(set(names)) == len(names)
    assert "gamma[011]" in names
    assert "alpha[001,3]" in names
    assert "beta_s[z1]" in names and "beta_s[001,3]" in names
    assert "sigma_a" in names and "sigma_b" in names
    assert "phi[111,1]" in names
    assert not any("z3" in n for n in names)
    assert "beta_s[z3]" in tiny_space(free_beta_s3=True).names()


def test_params_json_roundtrip():
    sp = tiny_space()
    p = random_params(sp, np.random.default_rng(3))
    doc = params_to_json(p)
    assert doc["format_version"] == 1
    p2 = params_from_json(doc)
    assert sp.pack(p2) == pytest.approx(sp.pack(p), abs=1e-12)
    doc["names"] = list(reversed(doc["names"]))
    with pytest.raises(ValueError):
        params_from_json(doc)


# ---- strata membership probabilities ----


def test_strata_probs_hand_value():
    sp = tiny_space(j=1)
    p = random_params(sp, np.random.default_rng(4))
    x = np.array([0.7, -1.2])
    a_j = float(p.a[0])
    got = strata_probs(x, a_j, p)
    # straight-line softmax with reference category first
    etas = [0.0] + [float(p.gamma[k] + p.delta[k] @ x + a_j) for k in range(3)]
    den = sum(math.exp(e) for e in etas)
    want = [math.exp(e) / den for e in etas]
    assert got == pytest.approx(want, rel=1e-13)


def test_strata_probs_sum_to_one():
    sp = tiny_space(j=3)
    rng = np.random.default_rng(5)
    p = random_params(sp, rng, scale=2.0)
    for _ in range(100):
        pr = strata_probs(rng.normal(size=2) * 3, float(rng.normal()), p)
        assert pr.shape == (4,)
        assert abs(pr.sum() - 1.0) < 1e-12
        assert np.all(pr >= 0)


def test_strata_probs_rejects_nonfinite():
    sp = tiny_space(j=1)
    p = random_params(sp, np.random.default_rng(6))
    with pytest.raises(ValueError):
        strata_probs(np.array([np.inf, 0.0]), 0.0, p)


# ---- zero-inflated Poisson pmf ----


def test_zip_pmf_hand_values():
    phi, mu = 0.3, 2.0
    want0 = math.log(phi + (1 - phi) * math.exp(-mu))
    want3 = math.log(1 - phi) + 3 * math.log(mu) - mu - math.log(6.0)
    assert zip_log_pmf(0, phi, mu) == pytest.approx(want0, rel=1e-14)
    assert zip_log_pmf(3, phi, mu) == pytest.approx(want3, rel=1e-14)
    # degenerate mixtures
    assert zip_log_pmf(0, 1.0, 5.0) == 0.0
    assert zip_log_pmf(2, 1.0, 5.0) == -np.inf


def test_zip_pmf_normalizes():
    ys = np.arange(0, 500)
    for phi in (0.0, 0.3, 0.7, 0.99):
        for mu in (0.1, 1.0, 5.0, 20.0):
            total = np.exp(zip_log_pmf(ys, phi, mu)).sum()
            assert abs(total - 1.0) < 1e-8, (phi, mu)


def test_zip_pmf_validates_inputs():
    with pytest.raises(ValueError):
        zip_log_pmf(-1, 0.2, 1.0)
    with pytest.raises(ValueError):
        zip_log_pmf(1.5, 0.2, 1.0)
    with pytest.raises(ValueError):
        zip_log_pmf(1, 1.2, 1.0)
    with pytest.raises(ValueError):
        zip_log_pmf(1, 0.2, -1.0)


# ---- outcome mean tying ----


def test_poisson_mean_ties_arm3_to_arm2():
    sp = tiny_space(j=2)
    p = random_params(sp, np.random.default_rng(7))
    x = np.array([0.4])
    b_j = float(p.b[1])
    for code in ("111", "011", "000"):
        mu2 = poisson_mean(code, 2, 0.25, x, b_j, p)
        mu3 = poisson_mean(code, 3, 0.25, x, b_j, p)
        assert mu3 == mu2
    assert poisson_mean("001", 3, 0.25, x, b_j, p) != pytest.approx(
        poisson_mean("001", 2, 0.25, x, b_j, p))


def test_poisson_mean_slope_structure():
    # d log mu / ds recovers the arm-level shared slope, and the
    # reward-arm slope applies only to the stratum still free at z=3
    sp = tiny_space(j=1)
    p = random_params(sp, np.random.default_rng(8))
    x = np.zeros(1)

    def slope(code, z):
        m0 = poisson_mean(code, z, 0.2, x, 0.0, p)
        m1 = poisson_mean(code, z, 0.7, x, 0.0, p)
        return float(math.log(m1 / m0) / 0.5)

    for code in ("111", "011", "001", "000"):
        assert slope(code, 1) == pytest.approx(float(p.beta_s[0]), rel=1e-9)
        assert slope(code, 2) == pytest.approx(float(p.beta_s[1]), rel=1e-9)
    for code in ("111", "011", "000"):
        assert slope(code, 3) == pytest.approx(float(p.beta_s[1]), rel=1e-9)
    assert slope("001", 3) == pytest.approx(float(p.beta_s[2]), rel=1e-9)


def test_free_beta_s3_unties_reward_arm():
    sp = tiny_space(j=1, free_beta_s3=True)
    p = random_params(sp, np.random.default_rng(9))
    assert len(p.beta_s) == 4
    x = np.zeros(1)
    m0 = poisson_mean("000", 3, 0.0, x, 0.0, p)
    m1 = poisson_mean("000", 3, 1.0, x, 0.0, p)
    assert float(math.log(m1 / m0)) == pytest.approx(float(p.beta_s[3]), rel=1e-9)


# ---- likelihood ----


def test_log_likelihood_matches_enumeration():
    rng = np.random.default_rng(10)
    for rep in range(10):
        data = small_data(seed=rep, n_classes=3, class_size=2)
        sp = ParamSpace.for_data(data)
        p = random_params(sp, rng, scale=1.0)
        ours = log_likelihood(data, p)
        oracle = brute_force_likelihood(data, p)
        assert abs(ours - oracle) < 1e-9, rep


def test_log_likelihood_invariant_to_student_order():
    data = small_data(seed=3, n_classes=3, class_size=5)
    sp = ParamSpace.for_data(data)
    p = random_params(sp, np.random.default_rng(11))
    base = log_likelihood(data, p)

    order = np.random.default_rng(0).permutation(data.n_students)
    from netstrat.data import StudyData
    shuffled = StudyData(students=tuple(data.students[i] for i in order),
                         classes=data.classes, network=data.network,
                         covariate_spec=data.covariate_spec)
    assert log_likelihood(shuffled, p) == pytest.approx(base, rel=1e-12)


def test_log_likelihood_empty_data_is_zero():
    data = make_study([])
    sp = ParamSpace(class_labels=(), strata_cov_names=(), outcome_cov_names=())
    p = random_params(sp, np.random.default_rng(12))
    assert log_likelihood(data, p) == 0.0


# ---- prior ----


def test_log_prior_matches_scipy():
    sp = tiny_space(j=2)
    p = random_params(sp, np.random.default_rng(13))
    cfg = PriorConfig()
    got = log_prior(p, cfg)
    want = 0.0
    want += stats.norm.logpdf(p.gamma, 0, cfg.sd_strata_coef).sum()
    want += stats.norm.logpdf(p.delta, 0, cfg.sd_strata_coef).sum()
    want += stats.norm.logpdf(p.alpha, 0, cfg.sd_outcome_coef).sum()
    want += stats.norm.logpdf(p.beta_s, 0, cfg.sd_outcome_coef).sum()
    want += stats.norm.logpdf(p.beta_x, 0, cfg.sd_outcome_coef).sum()
    # half-normal scales
    want += (math.log(2) + stats.norm.logpdf(p.sigma_a, 0, cfg.sd_sigma))
    want += (math.log(2) + stats.norm.logpdf(p.sigma_b, 0, cfg.sd_sigma))
    # hierarchical intercepts; flat phi contributes zero
    want += stats.norm.logpdf(p.a, 0, p.sigma_a).sum()
    want += stats.norm.logpdf(p.b, 0, p.sigma_b).sum()
    assert got == pytest.approx(want, rel=1e-12)


def test_log_prior_outside_support():
    sp = tiny_space(j=1)
    p = random_params(sp, np.random.default_rng(14))
    object.__setattr__(p, "sigma_a", -0.5)
    assert log_prior(p, PriorConfig()) == -np.inf


def test_prior_config_validation():
    with pytest.raises(ValueError):
        PriorConfig(sd_sigma=0.0)
    with pytest.raises(ValueError):
        PriorConfig(sd_strata_coef=-1.0)


# ---- posterior and gradient ----


def test_gradient_matches_finite_differences():
    data = small_data(seed=5, n_classes=3, class_size=4)
    post = make_posterior(data)
    dim = post.space.dim
    rng = np.random.default_rng(15)
    h = 1e-5
    for rep in range(5):
        u = rng.uniform(-1.0, 1.0, size=dim)
        val, ana = post.value_and_grad(u)
        assert np.isfinite(val)
        for k in rng.choice(dim, size=12, replace=False):
            e = np.zeros(dim)
            e[k] = h
            fd = (post.log_post(u + e) - post.log_post(u - e)) / (2 * h)
            denom = max(abs(float(ana[k])), abs(fd), 1e-8)
            assert abs(float(ana[k]) - fd) / denom < 1e-5, (rep, k)


def test_value_and_grad_consistent_with_parts():
    data = small_data(seed=6, n_classes=3, class_size=3)
    post = make_posterior(data)
    u = np.random.default_rng(16).uniform(-0.8, 0.8, size=post.space.dim)
    v, g = post.value_and_grad(u)
    assert v == pytest.approx(post.log_post(u), abs=0)
    assert g == pytest.approx(post.grad(u), abs=0)


def test_posterior_handles_extreme_states():
    data = small_data(seed=7, n_classes=3, class_size=3)
    post = make_posterior(data)
    u = np.full(post.space.dim, 40.0)  # exp() overflow territory
    v, g = post.value_and_grad(u)
    assert not np.isnan(v)
    assert np.all(np.isfinite(g)) or v == -np.inf


def test_posterior_includes_prior_and_likelihood():
    data = small_data(seed=8, n_classes=3, class_size=3)
    prior = PriorConfig(sd_outcome_coef=0.5)
    post = make_posterior(data, prior=prior)
    sp = post.space
    u = np.random.default_rng(17).uniform(-0.5, 0.5, size=sp.dim)
    p = sp.unpack(u)
    want = log_likelihood(data, p) + log_prior(p, prior)
    # plus the change-of-variables terms for sigma and phi blocks
    want += u[sp.block("log_sigma_a")].sum() + u[sp.block("log_sigma_b")].sum()
    lphi = u[sp.block("logit_phi")]
    want += np.sum(lphi - 2 * np.log1p(np.exp(lphi)))
    # and the standard-normal density of the whitened intercepts replaces
    # the hierarchical terms already counted in log_prior
    want -= stats.norm.logpdf(p.a, 0, p.sigma_a).sum()
    want -= stats.norm.logpdf(p.b, 0, p.sigma_b).sum()
    want += stats.norm.logpdf(u[sp.block("a")]).sum()
    want += stats.norm.logpdf(u[sp.block("b")]).sum()
    assert post.log_post(u) == pytest.approx(want, rel=1e-10)
