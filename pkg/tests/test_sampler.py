import numpy as np
import pytest
from scipy import stats

from netstrat.sampler import (Diagnostics, Draws, SamplerConfig, SamplerError,
                              diagnose, sample)


def std_normal(dim):
    def log_post(u):
        return -0.5 * float(u @ u)

    def grad(u):
        return -u

    return log_post, grad


def test_standard_normal_moments_and_ks():
    lp, gr = std_normal(10)
    cfg = SamplerConfig(chains=4, warmup=500, samples=1000, seed=0, threads=1)
    draws = sample(lp, gr, 10, cfg)
    flat = draws.flat()
    assert flat.shape == (4000, 10)
    assert np.abs(flat.mean(axis=0)).max() < 0.05
    assert np.abs(flat.var(axis=0) - 1.0).max() < 0.1
    for k in range(10):
        ks = stats.kstest(flat[:, k], "norm").statistic
        assert ks < 0.03, k
    assert int(draws.divergences.sum()) == 0


def test_same_seed_bit_identical():
    lp, gr = std_normal(4)
    cfg = SamplerConfig(chains=2, warmup=200, samples=100, seed=42)
    a = sample(lp, gr, 4, cfg)
    b = sample(lp, gr, 4, cfg)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.log_posts, b.log_posts)
    c = sample(lp, gr, 4, SamplerConfig(chains=2, warmup=200, samples=100, seed=43))
    assert not np.array_equal(a.positions, c.positions)


def test_thread_count_does_not_change_draws():
    lp, gr = std_normal(3)
    one = sample(lp, gr, 3, SamplerConfig(chains=3, warmup=150, samples=80,
                                          seed=7, threads=1))
    many = sample(lp, gr, 3, SamplerConfig(chains=3, warmup=150, samples=80,
                                           seed=7, threads=3))
    assert np.array_equal(one.positions, many.positions)


def test_correlated_gaussian_interval_coverage():
    cov = np.array([[1.0, 0.9], [0.9, 1.0]])
    prec = np.linalg.inv(cov)

    def lp(u):
        return -0.5 * float(u @ prec @ u)

    def gr(u):
        return -prec @ u

    cfg = SamplerConfig(chains=4, warmup=500, samples=1000, seed=1)
    flat = sample(lp, gr, 2, cfg).flat()
    # true central 90% interval per coordinate is +-1.6449 (unit variances)
    zq = stats.norm.ppf(0.95)
    for k in range(2):
        cover = np.mean(np.abs(flat[:, k]) <= zq)
        assert abs(cover - 0.90) <= 0.03, k


def test_step_size_frozen_after_warmup():
    lp, gr = std_normal(2)
    draws = sample(lp, gr, 2, SamplerConfig(chains=2, warmup=150, samples=50, seed=3))
    assert draws.step_sizes.shape == (2,)
    assert np.all(draws.step_sizes > 0)
    assert draws.mass_diag.shape == (2, 2)
    assert np.all(draws.mass_diag > 0)


def test_log_posts_match_positions():
    lp, gr = std_normal(3)
    draws = sample(lp, gr, 3, SamplerConfig(chains=2, warmup=100, samples=40, seed=9))
    for c in range(2):
        for i in (0, 17, 39):
            assert draws.log_posts[c, i] == pytest.approx(
                lp(draws.positions[c, i]), abs=1e-12)


def test_accept_stats_in_unit_interval():
    lp, gr = std_normal(3)
    draws = sample(lp, gr, 3, SamplerConfig(chains=2, warmup=100, samples=40, seed=5))
    assert draws.accept_stats.shape == (2, 40)
    assert np.all(draws.accept_stats >= 0) and np.all(draws.accept_stats <= 1)
    assert draws.accept_stats.mean() > 0.5


def test_init_failure_raises_sampler_error():
    def lp(u):
        return -np.inf

    def gr(u):
        return np.zeros_like(u)

    with pytest.raises(SamplerError):
        sample(lp, gr, 2, SamplerConfig(chains=1, warmup=10, samples=5, seed=0))


def test_rwm_fallback_runs_without_gradient():
    lp, _ = std_normal(1)

    def bad_grad(u):  # must never be called
        raise AssertionError("gradient used in rwm mode")

    cfg = SamplerConfig(chains=2, warmup=2000, samples=4000, seed=2,
                        algorithm="rwm")
    draws = sample(lp, bad_grad, 1, cfg)
    flat = draws.flat()
    assert abs(flat.mean()) < 0.1
    assert abs(flat.var() - 1.0) < 0.25


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(chains=0)
    with pytest.raises(ValueError):
        SamplerConfig(target_accept=1.0)
    with pytest.raises(ValueError):
        SamplerConfig(max_tree_depth=0)
    with pytest.raises(ValueError):
        SamplerConfig(algorithm="vi")


# ---- diagnostics ----


def iid_normal_positions(chains=4, n=500, dim=3, seed=0):
    return np.random.default_rng(seed).standard_normal((chains, n, dim))


def test_diagnose_white_noise():
    diag = diagnose(iid_normal_positions(), names=["a", "b", "c"])
    assert np.all(diag.rhat < 1.01)
    assert np.all(diag.ess > 500)
    assert not diag.degenerate.any()
    d = diag.as_dict()
    assert set(d["parameters"]) == {"a", "b", "c"}
    assert d["n_divergent"] == 0


def test_diagnose_offset_chain_flags_nonconvergence():
    pos = iid_normal_positions()
    pos[0, :, 0] += 10.0
    diag = diagnose(pos)
    assert diag.rhat[0] > 1.5
    assert diag.rhat[1] < 1.01


def test_diagnose_constant_chains_degenerate():
    pos = np.zeros((2, 100, 2))
    diag = diagnose(pos)
    assert np.isnan(diag.rhat).all()
    assert diag.degenerate.all()


def test_diagnose_single_chain_rejected():
    with pytest.raises(ValueError, match="chains"):
        diagnose(np.zeros((1, 100, 2)))


def test_diagnose_accepts_draws_object():
    lp, gr = std_normal(2)
    draws = sample(lp, gr, 2, SamplerConfig(chains=2, warmup=100, samples=60,
                                            seed=11, threads=1),
                   names=["u0", "u1"])
    diag = diagnose(draws)
    assert diag.names == ["u0", "u1"]
    assert diag.n_divergent == int(draws.divergences.sum())
    assert np.all(diag.ess > 0)
