import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from anadis.latent import AnalogicalPair, LatentSpec, sample_analogical_batch
from anadis.models import ModelFamilyError, build_bundle, classify_relation, generate
from anadis.objectives import (
    PROB_FLOOR,
    LossReport,
    ToyWorld,
    analogical_loss,
    combined_step_loss,
    critic_loss,
    elbo_loss,
    generator_adversarial_loss,
    supervised_analogical_loss,
    verify_bound,
)
from anadis.seeding import stream
from conftest import gradient_error, tiny_gan_bundle, tiny_vae_bundle, zero_parameters


def _pairs(bundle, n, seed=0):
    return sample_analogical_batch(bundle.latent_spec, n, stream(seed, "pairs"))


# ---------------------------------------------------------------------------
# ELBO
# ---------------------------------------------------------------------------


def test_elbo_analytic_uniform_decoder():
    # all parameters zeroed: decoder outputs sigmoid(0) = 0.5 everywhere and
    # the posterior equals the prior, so recon = 784*ln(2) and kl = 0
    bundle = build_bundle("anavae", "mnist", seed=0, dtype=torch.float64)
    for net in bundle.nets.values():
        zero_parameters(net)
    x = (np.random.default_rng(0).random((4, 1, 28, 28)) > 0.5).astype(np.float64)
    report = elbo_loss(bundle, x, rng=np.random.default_rng(1))
    assert abs(report.components["recon"] - 784 * math.log(2)) < 1e-9
    assert abs(report.components["kl"]) < 1e-12
    assert abs(report.total - (report.components["recon"] + report.components["kl"])) < 1e-6


def test_elbo_kl_zero_for_prior_posterior():
    bundle = tiny_vae_bundle(seed=1)
    zero_parameters(bundle.encoder)  # mu = 0, logvar = 0
    x = np.random.default_rng(0).random((3, 1, 5, 5))
    report = elbo_loss(bundle, x, rng=np.random.default_rng(2))
    assert report.components["kl"] == pytest.approx(0.0, abs=1e-12)


def test_elbo_rejects_out_of_range_pixels():
    bundle = tiny_vae_bundle()
    with pytest.raises(ValueError, match=r"\[0,1\]"):
        elbo_loss(bundle, np.full((2, 1, 5, 5), 1.5), rng=np.random.default_rng(0))


def test_elbo_wrong_family():
    with pytest.raises(ModelFamilyError):
        elbo_loss(tiny_gan_bundle(), np.zeros((1, 1, 5, 5)), rng=np.random.default_rng(0))


def test_elbo_gradient_matches_finite_differences():
    bundle = tiny_vae_bundle(seed=3)
    x = np.random.default_rng(5).random((4, 1, 5, 5))

    def loss():
        return elbo_loss(bundle, x, rng=np.random.default_rng(17)).total_tensor

    err = gradient_error(loss, [bundle.generator, bundle.encoder])
    assert err < 1e-3


# ---------------------------------------------------------------------------
# Critic / adversarial
# ---------------------------------------------------------------------------


def test_gradient_penalty_zero_for_unit_norm_linear_critic():
    bundle = tiny_gan_bundle(seed=4)
    # replace the critic with a single linear layer of unit-norm weight
    lin = torch.nn.Linear(25, 1).double()
    with torch.no_grad():
        w = torch.randn(25, generator=torch.Generator().manual_seed(0)).double()
        lin.weight.copy_((w / w.norm()).reshape(1, -1))
        lin.bias.zero_()
    bundle.nets["critic"] = torch.nn.Sequential(torch.nn.Flatten(), lin)
    rng = np.random.default_rng(0)
    real = rng.uniform(-1, 1, (8, 1, 5, 5))
    fake = rng.uniform(-1, 1, (8, 1, 5, 5))
    report = critic_loss(bundle, real, fake, rng=np.random.default_rng(1))
    assert report.components["gradient_penalty"] < 1e-9


def test_constant_critic_gives_unit_penalty_and_zero_gap():
    bundle = tiny_gan_bundle(seed=5)
    zero_parameters(bundle.critic)
    rng = np.random.default_rng(0)
    real = rng.uniform(-1, 1, (6, 1, 5, 5))
    fake = rng.uniform(-1, 1, (6, 1, 5, 5))
    report = critic_loss(bundle, real, fake, gp_weight=0.25, rng=np.random.default_rng(1))
    assert report.components["critic"] == pytest.approx(0.0, abs=1e-12)
    assert report.components["gradient_penalty"] == pytest.approx(1.0, abs=1e-9)
    assert report.total == pytest.approx(0.25, abs=1e-9)


def test_critic_loss_batch_mismatch():
    bundle = tiny_gan_bundle()
    with pytest.raises(ValueError, match="batch"):
        critic_loss(bundle, np.zeros((3, 1, 5, 5)), np.zeros((4, 1, 5, 5)))


def test_critic_total_combination():
    bundle = tiny_gan_bundle(seed=6)
    rng = np.random.default_rng(2)
    report = critic_loss(bundle, rng.uniform(-1, 1, (5, 1, 5, 5)),
                         rng.uniform(-1, 1, (5, 1, 5, 5)), gp_weight=0.7,
                         rng=np.random.default_rng(3))
    expected = report.components["critic"] + 0.7 * report.components["gradient_penalty"]
    assert report.total == pytest.approx(expected, abs=1e-6)


def test_critic_gradient_matches_finite_differences():
    bundle = tiny_gan_bundle(seed=7)
    rng = np.random.default_rng(8)
    real = rng.uniform(-1, 1, (4, 1, 5, 5))
    fake = rng.uniform(-1, 1, (4, 1, 5, 5))

    def loss():
        return critic_loss(bundle, real, fake, gp_weight=0.25,
                           rng=np.random.default_rng(23)).total_tensor

    err = gradient_error(loss, [bundle.critic])
    assert err < 1e-3


def test_generator_adversarial_constants():
    bundle = tiny_gan_bundle(seed=9)
    zero_parameters(bundle.critic)
    fake = np.random.default_rng(0).uniform(-1, 1, (5, 1, 5, 5))
    assert generator_adversarial_loss(bundle, fake).total == pytest.approx(0.0, abs=1e-12)
    with torch.no_grad():
        bundle.critic[-1].bias.fill_(2.5)
    assert generator_adversarial_loss(bundle, fake).total == pytest.approx(-2.5, abs=1e-9)


def test_generator_adversarial_shift_linearity():
    bundle = tiny_gan_bundle(seed=10)
    fake = np.random.default_rng(0).uniform(-1, 1, (5, 1, 5, 5))
    before = generator_adversarial_loss(bundle, fake).total
    with torch.no_grad():
        bundle.critic[-1].bias.add_(0.3)  # raises every score by exactly 0.3
    after = generator_adversarial_loss(bundle, fake).total
    assert after - before == pytest.approx(-0.3, abs=1e-9)


# ---------------------------------------------------------------------------
# Analogical loss
# ---------------------------------------------------------------------------


def test_analogical_uniform_classifier_gives_log_k():
    bundle = build_bundle("anavae", "mnist", seed=11, dtype=torch.float64)
    zero_parameters(bundle.relation)  # softmax of zeros -> uniform over 16
    report = analogical_loss(bundle, _pairs(bundle, 8), train=False)
    assert report.total == pytest.approx(math.log(16), abs=1e-9)


def test_analogical_perfect_classifier_gives_zero():
    bundle = tiny_vae_bundle(seed=12)
    pairs = _pairs(bundle, 6)
    factors = torch.as_tensor([p.factor for p in pairs])

    class OneHot(torch.nn.Module):
        def forward(self, x):
            out = torch.zeros(x.shape[0], 3, dtype=x.dtype)
            out[torch.arange(x.shape[0]), factors] = 1.0
            return out

    bundle.nets["relation"] = OneHot()
    report = analogical_loss(bundle, pairs, train=False)
    assert report.total == pytest.approx(0.0, abs=1e-12)
    assert report.diagnostics["clamp_fraction"] == 0.0


def test_analogical_matches_exact_enumeration():
    # a fully enumerable world: uniform factor choice, one deterministic pair
    # per (factor, base, sign, magnitude) cell; passing each cell once makes
    # the Monte-Carlo mean equal the exact expectation
    bundle = tiny_vae_bundle(seed=13)
    k = bundle.latent_spec.code_dim
    bases = [np.zeros(k), np.ones(k) * 0.5, -np.ones(k), np.arange(k) * 0.1]
    pairs = []
    for base in bases:
        for factor in range(k):
            for offset in (-1.5, 1.2):
                c2 = base.copy()
                c2[factor] += offset
                pairs.append(AnalogicalPair(c1=base.copy(), c2=c2, z=np.zeros(0),
                                            factor=factor, offset=offset))
    x1 = generate(bundle, np.stack([p.c1 for p in pairs]))
    x2 = generate(bundle, np.stack([p.c2 for p in pairs]))
    probs = classify_relation(bundle, x1, x2)
    expected = -np.mean([math.log(max(probs[i, p.factor], PROB_FLOOR))
                         for i, p in enumerate(pairs)])
    report = analogical_loss(bundle, pairs, train=False)
    assert report.total == pytest.approx(expected, abs=1e-10)


def test_analogical_gradient_matches_finite_differences():
    bundle = tiny_gan_bundle(seed=14)
    pairs = _pairs(bundle, 4, seed=2)

    def loss():
        return analogical_loss(bundle, pairs, train=False).total_tensor

    err = gradient_error(loss, [bundle.generator, bundle.relation])
    assert err < 1e-3


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_analogical_permutation_invariant(seed):
    bundle = tiny_vae_bundle(seed=15)
    pairs = _pairs(bundle, 6, seed=seed)
    perm = np.random.default_rng(seed).permutation(6)
    a = analogical_loss(bundle, pairs, train=False).total
    b = analogical_loss(bundle, [pairs[i] for i in perm], train=False).total
    assert a == pytest.approx(b, abs=1e-12)


# ---------------------------------------------------------------------------
# Combined and supervised losses
# ---------------------------------------------------------------------------


def test_combined_lambda_zero_equals_base():
    bundle = tiny_vae_bundle(seed=16)
    x = np.random.default_rng(0).random((4, 1, 5, 5))
    base = elbo_loss(bundle, x, train=False)
    combined = combined_step_loss(bundle, x, None, 0.0, train=False)
    assert combined.total == base.total
    assert combined.components["analogical"] == 0.0


def test_combined_lambda_weighting():
    bundle = tiny_vae_bundle(seed=17)
    x = np.random.default_rng(0).random((4, 1, 5, 5))
    pairs = _pairs(bundle, 5)
    base = elbo_loss(bundle, x, train=False).total
    ana = analogical_loss(bundle, pairs, train=False).total
    for lam in (1.0, 2.0):
        combined = combined_step_loss(bundle, x, pairs, lam, train=False)
        assert combined.total == pytest.approx(base + lam * ana, abs=1e-9)
        assert combined.components["analogical"] == pytest.approx(ana, abs=1e-12)


def test_combined_rejects_negative_lambda():
    bundle = tiny_vae_bundle()
    with pytest.raises(ValueError, match="lambda"):
        combined_step_loss(bundle, np.zeros((1, 1, 5, 5)), None, -0.1)


def test_combined_gan_generator_phase():
    bundle = tiny_gan_bundle(seed=18)
    fake = np.random.default_rng(0).uniform(-1, 1, (4, 1, 5, 5))
    pairs = _pairs(bundle, 4)
    base = generator_adversarial_loss(bundle, fake, train=False).total
    ana = analogical_loss(bundle, pairs, train=False).total
    combined = combined_step_loss(bundle, fake, pairs, 1.0, train=False)
    assert combined.total == pytest.approx(base + ana, abs=1e-9)


def test_supervised_uniform_and_perfect():
    bundle = build_bundle("anagan", "mnist", seed=19, dtype=torch.float64)
    zero_parameters(bundle.relation)
    rng = np.random.default_rng(0)
    x1 = rng.random((6, 1, 28, 28))
    x2 = rng.random((6, 1, 28, 28))
    factors = rng.integers(0, 8, size=6)
    report = supervised_analogical_loss(bundle, (x1, x2, factors), train=False)
    assert report.total == pytest.approx(math.log(8), abs=1e-9)
    with pytest.raises(ValueError):
        supervised_analogical_loss(bundle, (x1[:0], x2[:0], factors[:0]))


def test_supervised_smoke_fit_on_synthetic_pairs():
    # fitting R alone on rendered pairs with a known differing factor: the
    # 5-seed median loss curve decreases over 200 full-batch steps
    from anadis.data import SyntheticFactorSpec, render_synthetic
    from anadis.models import (NetSpec, custom_bundle, fc, flatten, reshape,
                               sigmoid, softmax, tanh)

    spec = SyntheticFactorSpec()
    names = spec.FACTORS

    def labeled_batch(rng, n=64):
        x1, x2, factors = [], [], []
        for _ in range(n):
            base = np.array([rng.uniform(*spec.sample_ranges[f]) for f in names])
            r = int(rng.integers(0, 4))
            lo, hi = spec.sample_ranges[names[r]]
            moved = base.copy()
            moved[r] = rng.uniform(lo, hi)
            x1.append(render_synthetic(base, spec))
            x2.append(render_synthetic(moved, spec))
            factors.append(r)
        return (np.stack(x1)[:, None], np.stack(x2)[:, None], np.array(factors))

    curves = []
    for seed in range(5):
        relation = NetSpec((2, 32, 32), (flatten(), fc(64), tanh(), fc(4), softmax()))
        generator = NetSpec((4,), (fc(8), tanh(), fc(32 * 32), sigmoid(),
                                   reshape(1, 32, 32)))
        bundle = custom_bundle("anavae", {"generator": generator, "relation": relation,
                                          "encoder": NetSpec((1, 32, 32),
                                                             (flatten(), fc(8),))},
                               code_dim=4, seed=seed)
        batch = labeled_batch(np.random.default_rng(seed))
        opt = torch.optim.Adam(bundle.relation.parameters(), lr=1e-3)
        losses = []
        for _ in range(200):
            report = supervised_analogical_loss(bundle, batch, train=True)
            opt.zero_grad()
            report.total_tensor.backward()
            opt.step()
            losses.append(report.total)
        curves.append(losses)
    median = np.median(np.array(curves), axis=0)
    strided = median[::10]
    assert np.all(np.diff(strided) < 0), "median loss curve is not decreasing"
    assert median[-1] < median[0]


def test_loss_report_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        LossReport(total=float("nan"), components={})


# ---------------------------------------------------------------------------
# Bound enumeration
# ---------------------------------------------------------------------------


def test_bound_tight_for_exact_posterior():
    rng = np.random.default_rng(0)
    prior = rng.dirichlet(np.ones(3))
    conditional = rng.dirichlet(np.ones(5), size=3)
    joint = prior[:, None] * conditional
    posterior = (joint / joint.sum(axis=0, keepdims=True)).T
    world = ToyWorld(prior=prior, conditional=conditional, classifier=posterior)
    lhs, kl_term, k_term = verify_bound(world)
    assert kl_term == pytest.approx(0.0, abs=1e-12)
    assert k_term == pytest.approx(lhs, abs=1e-12)


def test_bound_uniform_classifier():
    # two factors, four pairs, uniform world: the classifier term collapses
    # to -ln k and can never exceed the negative conditional entropy
    k, n_pairs = 2, 4
    world = ToyWorld(prior=np.full(k, 1 / k),
                     conditional=np.full((k, n_pairs), 1 / n_pairs),
                     classifier=np.full((n_pairs, k), 1 / k))
    lhs, kl_term, k_term = verify_bound(world)
    assert k_term == pytest.approx(-math.log(k), abs=1e-12)
    assert k_term <= lhs + 1e-12


def test_bound_identity_on_random_worlds():
    rng = np.random.default_rng(123)
    for _ in range(100):
        world = ToyWorld.random(int(rng.integers(2, 6)), int(rng.integers(3, 30)), rng)
        lhs, kl_term, k_term = verify_bound(world)
        assert abs(lhs - (kl_term + k_term)) < 1e-12
        assert kl_term >= -1e-15
        assert k_term <= lhs + 1e-12


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(2, 5), n_pairs=st.integers(2, 12))
def test_bound_identity_property(seed, k, n_pairs):
    world = ToyWorld.random(k, n_pairs, np.random.default_rng(seed))
    lhs, kl_term, k_term = verify_bound(world)
    assert abs(lhs - (kl_term + k_term)) < 1e-12
    assert k_term <= lhs + 1e-12


def test_toy_world_rejects_unnormalized_tables():
    with pytest.raises(ValueError, match="normalize"):
        ToyWorld(prior=np.array([0.5, 0.6]),
                 conditional=np.full((2, 3), 1 / 3),
                 classifier=np.full((3, 2), 0.5))
