import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uha import rng
from uha.autodiff import check_gradient
from uha.bounds import (
    GROUPS,
    AnnealParams,
    BoundSampler,
    Estimate,
    bridge_log_density,
    estimate_bound,
    hais_bound_sample,
    iw_bound_sample,
    pool_estimates,
    realize_beta,
    uha_bound_sample,
)
from uha.targets import GaussianTarget, MeanFieldGaussian, StudentT
from uha.tuning import flatten, frozen_objective, step_noise, unflatten


def random_params(gen, dim, K, groups=GROUPS, spread=0.3, eps_max=0.5):
    p = AnnealParams.initial(dim, K, eps=0.1, eta=0.5, eps_max=eps_max, trainable=groups)
    x = flatten(p, groups)
    return unflatten(x + spread * gen.normal(size=x.size), p, groups)


def test_uniform_beta_grid():
    # the appended logit is fixed at 0, so "all equal" means all zero
    np.testing.assert_allclose(realize_beta(np.zeros(3)), [0, 0.25, 0.5, 0.75, 1], atol=1e-15)
    assert not np.allclose(realize_beta(np.full(3, 0.7)), [0, 0.25, 0.5, 0.75, 1])


def test_beta_softmax_example():
    np.testing.assert_allclose(realize_beta(np.array([math.log(3.0), 0.0])), [0, 0.6, 0.8, 1], atol=1e-15)


@given(st.lists(st.floats(-10, 10), min_size=0, max_size=40))
def test_beta_strictly_increasing(raw):
    b = realize_beta(np.array(raw, dtype=np.float64))
    assert b[0] == 0.0 and b[-1] == 1.0
    assert np.all(np.diff(b) > 0)


@given(st.lists(st.floats(-300, 300), min_size=1, max_size=40))
def test_beta_endpoints_and_order_for_extreme_logits(raw):
    # increments below one ulp of 1 can round away, so only weak order survives
    b = realize_beta(np.array(raw, dtype=np.float64))
    assert b[0] == 0.0 and b[-1] == 1.0
    assert np.all(np.diff(b) >= 0) and np.all(np.isfinite(b))


def test_bridge_endpoints(gen):
    target = StudentT(3)
    p = random_params(gen, 3, 4, groups=("q",))
    z = gen.normal(size=3)
    from uha.targets import gaussian_log_density

    assert bridge_log_density(z, 0.0, p, target) == gaussian_log_density(z, p.q)
    assert bridge_log_density(z, 1.0, p, target) == target.log_density(z)


def test_bridge_example():
    # p(z) = exp(-(z-1)^2 / 2), unnormalized
    target = GaussianTarget(np.ones(1), np.zeros(1), log_z=0.5 * math.log(2 * math.pi))
    p = AnnealParams.initial(1, 2)
    assert bridge_log_density(np.zeros(1), 0.5, p, target) == pytest.approx(-0.7094693, abs=1e-7)


def test_degenerate_psi_matches_plain_path(gen):
    target = StudentT(2)
    plain = random_params(gen, 2, 4, groups=("q",))
    psi = plain.with_groups(("q", "psi_of_beta"))
    for b in np.linspace(0, 1, 11):
        z = gen.normal(size=2)
        assert bridge_log_density(z, b, psi, target) == pytest.approx(bridge_log_density(z, b, plain, target),
                                                                       abs=1e-14)


def test_eps_of_beta_positive_and_neutral_at_start(gen):
    p = AnnealParams.initial(2, 8, eps=0.1).with_groups(("eps", "eps_of_beta"))
    np.testing.assert_allclose(p.step_sizes(), 0.1, rtol=1e-12)
    q = random_params(gen, 2, 8, groups=("eps", "eps_of_beta"), spread=3.0)
    assert np.all(q.step_sizes() > 0)


def test_single_bridge_is_plain_elbo(gen):
    target = StudentT(4)
    p = random_params(gen, 4, 1, groups=("q",))
    run = uha_bound_sample(p, target, M=1, seed=17)
    noise = rng.noise_for_seed(17, 4, 0)
    z = p.q.loc + np.exp(p.q.log_scale) * noise["xi_q"][0]
    from uha.targets import gaussian_log_density

    assert run.value == target.log_density(z) - gaussian_log_density(z, p.q)


def test_exact_q_gives_zero():
    target = GaussianTarget(np.array([0.3, -1.0]), np.array([0.2, -0.4]))
    p = AnnealParams.initial(2, 1, q=target.as_q())
    for seed in range(20):
        assert uha_bound_sample(p, target, seed=seed).value == 0.0
        for K in (1, 7, 64):
            assert iw_bound_sample(p.q, target, K, seed=seed) == 0.0
    est = estimate_bound(BoundSampler("uha", p, target), 100)
    assert est.mean == 0.0 and est.stderr == 0.0


def test_single_draw_collapse(gen):
    for target in (StudentT(5), GaussianTarget(gen.normal(size=5), 0.3 * gen.normal(size=5))):
        p = random_params(gen, 5, 1, groups=("q",))
        for seed in range(25):
            u = uha_bound_sample(p, target, seed=seed).value
            h = hais_bound_sample(p, target, seed=seed).value
            w = iw_bound_sample(p.q, target, 1, seed=seed)
            assert abs(u - h) <= 1e-12 and abs(u - w) <= 1e-12


@pytest.mark.parametrize("method", ["uha", "hais"])
def test_telescoping_is_bit_exact(gen, method):
    target = StudentT(3)
    p = random_params(gen, 3, 6)
    fn = uha_bound_sample if method == "uha" else hais_bound_sample
    for seed in range(10):
        run = fn(p, target, seed=seed)
        assert run.reconstruct() == run.value


@pytest.mark.parametrize("method,K", [("uha", 6), ("hais", 6), ("iw", 9), ("plain_vi", 1)])
def test_batched_and_sequential_agree(gen, method, K):
    target = StudentT(3)
    p = random_params(gen, 3, K if method != "iw" else 1)
    sampler = BoundSampler(method, p, target, K=K)
    seeds = rng.derive_seeds(4, "draw", range(12))
    values, diverged, _, _ = sampler.batch(seeds)
    assert not diverged.any()
    for s, v in zip(seeds, values):
        run = sampler(int(s))
        assert v == pytest.approx(run.value, abs=1e-10)


def test_hais_accept_flags_match_batched(gen):
    target = StudentT(2)
    p = random_params(gen, 2, 5, groups=("q", "eps"), spread=1.0, eps_max=4.0)
    sampler = BoundSampler("hais", p, target)
    seeds = rng.derive_seeds(1, "draw", range(20))
    _, _, acc, _ = sampler.batch(seeds)
    for s, flags in zip(seeds, acc):
        np.testing.assert_array_equal(hais_bound_sample(p, target, seed=int(s)).accept_flags, flags)


def test_hais_matches_uha_at_small_step():
    target = GaussianTarget(np.array([0.5, -0.5]), np.array([0.3, -0.2]))
    q = MeanFieldGaussian(np.zeros(2), np.zeros(2))
    p = AnnealParams.initial(2, 8, eps=1e-4, eta=0.5, q=q)
    p = type(p)(**{**p.__dict__, "raw_eta": -40.0})  # eta ~ 0
    h = estimate_bound(BoundSampler("hais", p, target), 10_000, base_seed=1)
    u = estimate_bound(BoundSampler("uha", p, target), 10_000, base_seed=2)
    assert abs(h.mean - u.mean) < 3 * math.hypot(h.stderr, u.stderr)


def test_constant_sampler():
    est = estimate_bound(lambda seed: 2.5, 50)
    assert est == Estimate(2.5, 0.0, 50, 0, 0.0)


def test_estimate_requires_two_draws():
    with pytest.raises(ValueError):
        estimate_bound(lambda seed: 0.0, 1)


def test_divergences_flag_unreliable():
    def sampler(seed):
        return math.nan if seed % 50 == 0 else 1.0

    est = estimate_bound(sampler, 5000)
    assert est.diverged > 0.01 * 5000
    assert est.unreliable and est.n + est.diverged == 5000
    assert not estimate_bound(lambda s: 1.0, 100).unreliable


def test_stderr_shrinks_with_draws(gen):
    target = StudentT(4)
    sampler = BoundSampler("plain_vi", random_params(gen, 4, 1, groups=("q",)), target)
    small, large = estimate_bound(sampler, 1000), estimate_bound(sampler, 16_000, base_seed=9)
    assert 3.0 < small.stderr / large.stderr < 5.0


def _replay(values):
    # sampler that returns values[i] for the i-th derived draw seed
    index = {int(s): i for i, s in enumerate(rng.derive_seeds(0, "draw", range(len(values))))}
    return lambda seed: float(values[index[seed]])


def test_pooling_equals_concatenation(gen):
    values = gen.normal(size=300)
    parts = np.split(values, [50, 170])
    pooled = pool_estimates([estimate_bound(_replay(v), len(v)) for v in parts])
    assert pooled.n == 300
    assert pooled.mean == pytest.approx(values.mean(), abs=1e-12)
    assert pooled.stderr == pytest.approx(values.std(ddof=1) / math.sqrt(300), rel=1e-10)


@settings(max_examples=6)
@given(st.sampled_from(["uha", "hais", "iw", "plain_vi"]), st.integers(0, 2 ** 32))
def test_lower_bound_property(method, seed):
    gen = np.random.default_rng(seed)
    d = int(gen.integers(1, 4))
    if gen.random() < 0.5:
        target = StudentT(d)
    else:
        target = GaussianTarget(gen.normal(size=d), 0.5 * gen.normal(size=d))
    K = {"uha": 6, "hais": 6, "iw": 6, "plain_vi": 1}[method]
    p = random_params(gen, d, K if method in ("uha", "hais") else 1, spread=0.5)
    est = estimate_bound(BoundSampler(method, p, target, K=K), 4000, base_seed=seed)
    assert est.mean - 4 * est.stderr <= 0


@pytest.mark.parametrize("group", GROUPS)
def test_gradient_each_group(gen, group):
    target = StudentT(2)
    p = random_params(gen, 2, 8)
    noises = step_noise(21, 2, 2, 7)
    f = frozen_objective(p, target, (group,), noises)
    assert check_gradient(f, flatten(p, (group,))) < 1e-4
