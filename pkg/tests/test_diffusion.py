import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from stylecodes import diffusion as dm
from stylecodes.errors import ConfigError, UsageError
from stylecodes.numerics import rng


# -- schedule -------------------------------------------------------------


def test_running_product():
    s = dm.schedule_from_betas([0.1, 0.2])
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72], rtol=1e-15)


def test_single_step_schedule():
    s = dm.make_schedule(1, 0.05, 0.05)
    assert s.alpha_bar[0] == s.alpha[0]


def test_long_schedule_matches_log_space_product():
    s = dm.make_schedule(1000, 1e-4, 0.02)
    beta = np.linspace(1e-4, 0.02, 1000)
    ref = math.exp(math.fsum(math.log1p(-b) for b in beta))
    assert s.alpha_bar[-1] == pytest.approx(ref, rel=1e-6)


def test_bad_schedules_rejected():
    with pytest.raises(ConfigError):
        dm.make_schedule(0)
    with pytest.raises(ConfigError):
        dm.make_schedule(10, 0.5, 0.1)
    with pytest.raises(ConfigError):
        dm.schedule_from_betas([0.1, 1.0])


@given(st.integers(1, 500), st.floats(1e-6, 0.5), st.floats(0.0, 0.49))
def test_alpha_bar_strictly_decreasing(T, b0, extra):
    s = dm.make_schedule(T, b0, min(b0 + extra, 0.99))
    assert np.all((s.alpha > 0) & (s.alpha < 1))
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[0] == s.alpha[0]


# -- forward process ------------------------------------------------------


def test_q_sample_direct_formula():
    s = dm.schedule_from_betas([0.75])
    z = dm.q_sample(np.array([1.0]), 1, np.array([1.0]), s).z
    assert z[0] == pytest.approx(0.5 + math.sqrt(0.75), abs=1e-12)


def test_q_sample_small_beta_limit():
    s = dm.schedule_from_betas([1e-10])
    z = dm.q_sample(np.array([0.3]), 1, np.array([2.0]), s).z
    assert z[0] == pytest.approx(0.3, abs=1e-4)


def test_q_sample_timestep_range():
    s = dm.make_schedule(10)
    with pytest.raises(UsageError):
        dm.q_sample(np.zeros(1), 0, np.zeros(1), s)
    with pytest.raises(UsageError):
        dm.q_sample(np.zeros(1), 11, np.zeros(1), s)


def test_q_sample_monte_carlo_moments():
    s = dm.make_schedule(1000)
    t, z0, n = 400, 0.7, 100_000
    eps = np.random.default_rng(0).standard_normal(n)
    z = dm.q_sample(np.full(n, z0), t, eps, s).z
    ab = s.ab(t)
    var = 1 - ab
    assert abs(z.mean() - math.sqrt(ab) * z0) < 3 * math.sqrt(var / n)
    assert abs(z.var() - var) < 3 * var * math.sqrt(2 / (n - 1))


# -- reverse steps --------------------------------------------------------


def test_ddpm_last_step_is_deterministic():
    s = dm.make_schedule(50)
    st_ = dm.NoisyState(np.array([0.4, -0.2]), 1)
    a = dm.ddpm_step(st_, np.array([0.1, 0.3]), s, np.random.default_rng(0)).z
    b = dm.ddpm_step(st_, np.array([0.1, 0.3]), s, np.random.default_rng(99)).z
    np.testing.assert_array_equal(a, b)
    assert dm.ddpm_sigma(s, 1) == 0.0


def test_ddpm_single_step_inverts_q_sample():
    s = dm.schedule_from_betas([0.3])
    z0, eps = np.array([0.25, -0.5]), np.array([1.2, 0.4])
    zt = dm.q_sample(z0, 1, eps, s)
    np.testing.assert_allclose(dm.ddpm_step(zt, eps, s).z, z0, atol=1e-5)


def test_ddpm_noise_variance():
    s = dm.make_schedule(100)
    t, n = 50, 100_000
    st_ = dm.NoisyState(np.zeros(n), t)
    z = dm.ddpm_step(st_, np.zeros(n), s, np.random.default_rng(1)).z
    var = dm.ddpm_sigma(s, t) ** 2
    assert abs(z.var() - var) < 3 * var * math.sqrt(2 / (n - 1))


def test_ddim_eta0_deterministic_and_inverts():
    s = dm.make_schedule(200)
    r = np.random.default_rng(3)
    z0, eps = r.standard_normal(16), r.standard_normal(16)
    zt = dm.q_sample(z0, 150, eps, s)
    a = dm.ddim_step(zt, eps, 0, s)
    b = dm.ddim_step(zt, eps, 0, s)
    np.testing.assert_array_equal(a.z, b.z)
    np.testing.assert_allclose(a.z, z0, atol=1e-5)
    np.testing.assert_allclose(dm.predict_z0(zt.z, eps, 150, s), z0, atol=1e-5)


def test_clip_x0_in_range_is_noop():
    s = dm.make_schedule(200)
    r = np.random.default_rng(4)
    z0, eps = r.uniform(-0.9, 0.9, 16), r.standard_normal(16)
    zt = dm.q_sample(z0, 150, eps, s)
    np.testing.assert_allclose(dm.clip_eps(zt.z, eps, 150, s), eps, atol=1e-9)
    np.testing.assert_allclose(dm.ddim_step(zt, eps, 0, s, clip_x0=True).z, z0, atol=1e-5)


def test_clip_x0_bounds_prediction():
    s = dm.make_schedule(200)
    r = np.random.default_rng(5)
    z0, eps = 3.0 * r.standard_normal(64), r.standard_normal(64)
    zt = dm.q_sample(z0, 190, eps, s)
    out = dm.ddim_step(zt, eps, 0, s, clip_x0=True).z
    np.testing.assert_allclose(out, np.clip(z0, -1, 1), atol=1e-6)
    e2 = dm.clip_eps(zt.z, eps, 190, s)
    assert np.abs(dm.predict_z0(zt.z, e2, 190, s)).max() <= 1 + 1e-9
    a = dm.ddpm_step(zt, eps, s, rng.key(0), t_prev=0, clip_x0=True).z
    np.testing.assert_allclose(a, np.clip(z0, -1, 1), atol=1e-6)


def test_ddim_step_ordering():
    s = dm.make_schedule(10)
    with pytest.raises(UsageError):
        dm.ddim_step(dm.NoisyState(np.zeros(1), 5), np.zeros(1), 5, s)
    with pytest.raises(UsageError):
        dm.ddim_step(dm.NoisyState(np.zeros(1), 5), np.zeros(1), 2, s, eta=1.0)


def gaussian_eps(m, sd):
    """Exact noise prediction when the data are N(m, sd^2)."""
    def eps(z, ab):
        return math.sqrt(1 - ab) * (z - math.sqrt(ab) * m) / (ab * sd * sd + 1 - ab)
    return eps


def test_ddim_50_matches_ddpm_1000_distribution():
    s = dm.make_schedule(1000)
    eps = gaussian_eps(0.5, 0.3)
    n = 10_000
    r = np.random.default_rng(7)
    zd = r.standard_normal(n)
    state = dm.NoisyState(zd, 1000)
    for t in range(1000, 0, -1):
        state = dm.ddpm_step(state, eps(state.z, float(s.ab(t))), s, r)
    ddpm = state.z
    steps = dm.timestep_sequence(1000, 50)
    state = dm.NoisyState(np.random.default_rng(8).standard_normal(n), steps[0])
    for i, t in enumerate(steps):
        nxt = steps[i + 1] if i + 1 < len(steps) else 0
        state = dm.ddim_step(state, eps(state.z, float(s.ab(t))), nxt, s)
    ks = stats.ks_2samp(ddpm, state.z).statistic
    assert ks < 0.05


# -- guidance -------------------------------------------------------------


def test_cfg_identities():
    u, c = np.array([0.1, -2.0]), np.array([0.3, 5.0])
    np.testing.assert_array_equal(dm.cfg_combine(u, c, 1.0), c)
    np.testing.assert_array_equal(dm.cfg_combine(u, c, 0.0), u)
    assert dm.cfg_combine(np.array(0.1), np.array(0.3), 2.0) == pytest.approx(0.5)


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_cfg_identities_exact(a, b):
    u, c = np.array([a]), np.array([b])
    assert dm.cfg_combine(u, c, 1)[0] == b
    assert dm.cfg_combine(u, c, 0)[0] == a


def test_timestep_sequence():
    seq = dm.timestep_sequence(200, 20)
    assert seq[0] == 200 and seq[-1] == 1 and len(seq) == 20
    assert all(a > b for a, b in zip(seq, seq[1:]))
    with pytest.raises(ConfigError):
        dm.timestep_sequence(10, 11)


def _toy_model(z, t, prompts, styles=None, style_on=None):
    p = np.asarray(prompts, dtype=np.float64).reshape(-1, 1, 1, 1)
    return (0.1 * z + 0.05 * p + 0.01 * t.reshape(-1, 1, 1, 1) / 200).astype(z.dtype)


def test_guidance_one_equals_plain_loop():
    s = dm.make_schedule(200)
    cfg = dm.SamplerConfig("ddim", 10, 0.0, 1.0, seed=5)
    img = dm.sample_loop(_toy_model, 2, None, cfg, s, shape=(1, 2, 2))
    steps = dm.timestep_sequence(200, 10)
    z = rng.normal((1, 2, 2), 5, 0)
    for i, t in enumerate(steps):
        nxt = steps[i + 1] if i + 1 < len(steps) else 0
        e = _toy_model(z[None], np.array([t]), [2])[0]
        z = dm.ddim_step(dm.NoisyState(z, t), e, nxt, s).z
    np.testing.assert_array_equal(img, np.clip(z, -1, 1))


def test_sampling_is_deterministic():
    s = dm.make_schedule(200)
    cfg = dm.SamplerConfig("ddim", 8, 0.0, 3.0, seed=11)
    a = dm.sample_loop(_toy_model, 1, None, cfg, s, shape=(1, 4, 4))
    b = dm.sample_loop(_toy_model, 1, None, cfg, s, shape=(1, 4, 4))
    assert a.tobytes() == b.tobytes()


def test_batch_elements_independent_of_batch_composition():
    s = dm.make_schedule(200)
    cfg = dm.SamplerConfig("ddpm", 6, 0.0, 2.0)
    both = dm.sample_batch(_toy_model, [0, 3], None, [4, 9], cfg, s, shape=(1, 2, 2))
    one = dm.sample_batch(_toy_model, [3], None, [9], cfg, s, shape=(1, 2, 2))
    np.testing.assert_array_equal(both[1], one[0])


def mixture_eps(means, sd, weights):
    """Exact noise prediction for a 1-D Gaussian mixture prior."""
    means, weights = np.asarray(means), np.asarray(weights)

    def eps(z, ab):
        var = ab * sd * sd + 1 - ab
        mu = math.sqrt(ab) * means
        logp = -0.5 * (z[:, None] - mu) ** 2 / var + np.log(weights)
        w = np.exp(logp - logp.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        return math.sqrt(1 - ab) * ((z[:, None] - mu) / var * w).sum(axis=1)
    return eps


def test_sampler_reproduces_gaussian_mixture():
    means, sd, weights = (-0.5, 0.5), 0.1, (0.3, 0.7)
    s = dm.make_schedule(200, 5e-4, 0.1)
    eps = mixture_eps(means, sd, weights)
    n = 10_000
    r = np.random.default_rng(21)
    state = dm.NoisyState(r.standard_normal(n), 200)
    for t in range(200, 0, -1):
        state = dm.ddpm_step(state, eps(state.z, float(s.ab(t))), s, r)
    edges = np.linspace(-1.2, 1.2, 49)
    hist = np.histogram(state.z, edges)[0] / n
    cdf = sum(w * stats.norm.cdf(edges, m, sd) for m, w in zip(means, weights))
    tv = 0.5 * np.abs(hist - np.diff(cdf)).sum() + 0.5 * (1 - (cdf[-1] - cdf[0]))
    assert tv < 0.1
