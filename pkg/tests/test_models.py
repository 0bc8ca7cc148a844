import numpy as np
import pytest
import torch

from anadis.latent import LatentSpec
from anadis.models import (
    ModelFamilyError,
    NetSpec,
    build_bundle,
    build_net,
    classify_relation,
    conv,
    custom_bundle,
    discriminate,
    encode,
    fc,
    flatten,
    generate,
    param_digest,
    reshape,
    sigmoid,
    softmax,
)
from anadis.seeding import stream
from conftest import tiny_gan_bundle, tiny_vae_bundle, zero_parameters, n_params


# ---------------------------------------------------------------------------
# NetSpec shape checking
# ---------------------------------------------------------------------------


def test_netspec_rejects_fc_on_spatial_input():
    with pytest.raises(ValueError, match="flat"):
        NetSpec((1, 28, 28), (fc(10),))


def test_netspec_rejects_nontiling_conv():
    with pytest.raises(ValueError, match="tile"):
        NetSpec((1, 27, 27), (conv(8, 4, 2, 0),))


def test_netspec_rejects_bad_reshape():
    with pytest.raises(ValueError, match="reshape"):
        NetSpec((10,), (reshape(3, 2, 2),))


def test_netspec_roundtrips_through_dict():
    spec = NetSpec((3,), (fc(12), sigmoid(), reshape(3, 2, 2), conv(4, 2, 1, 0), flatten(), softmax()))
    assert NetSpec.from_dict(spec.to_dict()) == spec


def test_all_profiles_typecheck():
    # building touches every table spec; a shape bug fails here, not at runtime
    for family in ("anavae", "anagan"):
        for profile in ("mnist", "color64", "synthetic"):
            bundle = build_bundle(family, profile, seed=0)
            for name, spec in bundle.net_specs.items():
                assert spec.output_shape  # already validated at construction


# ---------------------------------------------------------------------------
# Profile contracts
# ---------------------------------------------------------------------------


def test_mnist_vae_dimensions():
    bundle = build_bundle("anavae", "mnist")
    assert bundle.latent_spec == LatentSpec(16, 0)
    # encoder emits 32 statistics: 16 means + 16 log-variances
    assert bundle.net_specs["encoder"].output_shape == (32,)
    mu, logvar, _ = encode(bundle, np.random.default_rng(0).random((3, 1, 28, 28)))
    assert mu.shape == (3, 16) and logvar.shape == (3, 16)


def test_mnist_gan_dimensions():
    bundle = build_bundle("anagan", "mnist")
    assert bundle.latent_spec == LatentSpec(8, 16)
    assert bundle.net_specs["critic"].output_shape == (1,)
    assert bundle.net_specs["generator"].input_shape == (24,)


def test_color64_gan_dimensions():
    bundle = build_bundle("anagan", "color64")
    assert bundle.latent_spec == LatentSpec(32, 64)
    assert bundle.net_specs["generator"].input_shape == (96,)
    assert bundle.image_shape == (3, 64, 64)


def test_color64_vae_code_override():
    # the flower/bird variant widens the code to 64
    bundle = build_bundle("anavae", "color64", spec_overrides={"code_dim": 64})
    assert bundle.net_specs["encoder"].output_shape == (128,)
    assert bundle.net_specs["relation"].output_shape == (64,)


def test_relation_conv_widths_are_halved():
    bundle = build_bundle("anavae", "mnist")
    enc_widths = [l.out for l in bundle.net_specs["encoder"].layers if l.kind == "conv"]
    rel_widths = [l.out for l in bundle.net_specs["relation"].layers if l.kind == "conv"]
    assert rel_widths == [w // 2 for w in enc_widths]


def test_relation_has_dropout_after_each_activation():
    bundle = build_bundle("anagan", "mnist")
    layers = bundle.net_specs["relation"].layers
    for i, layer in enumerate(layers):
        if layer.kind == "lrelu":
            assert layers[i + 1].kind == "dropout" and layers[i + 1].rate == 0.2


def test_unknown_override_key_rejected():
    with pytest.raises(ValueError, match="spec_overrides"):
        build_bundle("anavae", "mnist", spec_overrides={"bogus": 1})


def test_family_invariants():
    with pytest.raises(ValueError):
        custom_bundle("anagan", tiny_vae_bundle().net_specs, code_dim=3, noise_dim=0)


# ---------------------------------------------------------------------------
# Forward contracts
# ---------------------------------------------------------------------------


def test_generate_shape_and_range():
    bundle = build_bundle("anavae", "synthetic", seed=1)
    codes, _ = np.random.default_rng(0).standard_normal((6, 4)), None
    images = generate(bundle, codes)
    assert images.shape == (6, 1, 32, 32)
    assert images.min() >= 0.0 and images.max() <= 1.0

    gan = build_bundle("anagan", "synthetic", seed=1)
    rng = np.random.default_rng(0)
    images = generate(gan, rng.standard_normal((6, 4)), rng.standard_normal((6, 8)))
    assert images.min() >= -1.0 and images.max() <= 1.0


def test_generate_eval_mode_deterministic():
    bundle = build_bundle("anavae", "synthetic", seed=2)
    codes = np.random.default_rng(1).standard_normal((4, 4))
    a = generate(bundle, codes)
    b = generate(bundle, codes)
    assert np.array_equal(a, b)


def test_generate_rejects_bad_shapes():
    bundle = build_bundle("anavae", "synthetic")
    with pytest.raises(ValueError):
        generate(bundle, np.zeros((3, 5)))
    gan = build_bundle("anagan", "synthetic")
    with pytest.raises(ValueError):
        generate(gan, np.zeros((3, 4)), np.zeros((2, 8)))
    with pytest.raises(ValueError):
        generate(gan, np.zeros((3, 4)))  # missing noise


def test_encode_eval_returns_mu_exactly():
    bundle = build_bundle("anavae", "synthetic", seed=3)
    images = np.random.default_rng(0).random((5, 1, 32, 32)).astype(np.float32)
    mu, _, code = encode(bundle, images)
    assert np.array_equal(mu, code)


def test_encode_reparameterization_variance():
    # zeroed encoder -> mu = 0, logvar = 0; over many draws the sampled code
    # variance must match exp(logvar) = 1
    bundle = tiny_vae_bundle(seed=4)
    zero_parameters(bundle.encoder)
    images = np.random.default_rng(0).random((1, 1, 5, 5))
    rng = np.random.default_rng(42)
    draws = np.stack([encode(bundle, images, rng=rng, train=True)[2][0] for _ in range(10_000)])
    assert np.all(np.abs(draws.var(axis=0) - 1.0) < 0.05)


def test_encode_wrong_family():
    with pytest.raises(ModelFamilyError):
        encode(build_bundle("anagan", "synthetic"), np.zeros((1, 1, 32, 32)))


def test_discriminate_scores_finite_and_flat():
    bundle = build_bundle("anagan", "synthetic", seed=5)
    scores = discriminate(bundle, np.random.default_rng(0).uniform(-1, 1, (7, 1, 32, 32)))
    assert scores.shape == (7,)
    assert np.all(np.isfinite(scores))


def test_discriminate_wrong_family():
    with pytest.raises(ModelFamilyError):
        discriminate(build_bundle("anavae", "synthetic"), np.zeros((1, 1, 32, 32)))


def test_zero_weight_critic_head_outputs_bias():
    bundle = tiny_gan_bundle(seed=6)
    head = bundle.critic[-1]
    with torch.no_grad():
        head.weight.zero_()
        head.bias.fill_(0.75)
    scores = discriminate(bundle, np.random.default_rng(0).uniform(-1, 1, (5, 1, 5, 5)))
    assert np.allclose(scores, 0.75)


def test_classify_relation_rows_are_probabilities():
    bundle = build_bundle("anavae", "mnist", seed=7)
    rng = np.random.default_rng(0)
    x1 = rng.random((4, 1, 28, 28)).astype(np.float32)
    x2 = rng.random((4, 1, 28, 28)).astype(np.float32)
    probs = classify_relation(bundle, x1, x2)
    assert probs.shape == (4, 16)
    assert probs.min() >= 0
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-5)


def test_classify_relation_untrained_near_uniform():
    bundle = build_bundle("anavae", "mnist", seed=8)
    x = np.random.default_rng(1).random((6, 1, 28, 28)).astype(np.float32)
    probs = classify_relation(bundle, x, x)
    k = bundle.latent_spec.code_dim
    assert probs.max() < 3.0 / k


def test_classify_relation_shape_mismatch():
    bundle = build_bundle("anavae", "synthetic")
    with pytest.raises(ValueError):
        classify_relation(bundle, np.zeros((2, 1, 32, 32)), np.zeros((3, 1, 32, 32)))


# ---------------------------------------------------------------------------
# Construction determinism, digests
# ---------------------------------------------------------------------------


def test_build_bundle_seeded_init_reproducible():
    a = build_bundle("anavae", "synthetic", seed=11)
    b = build_bundle("anavae", "synthetic", seed=11)
    c = build_bundle("anavae", "synthetic", seed=12)
    assert param_digest(a.generator) == param_digest(b.generator)
    assert param_digest(a.generator) != param_digest(c.generator)


def test_param_digest_detects_single_weight_change():
    bundle = tiny_vae_bundle()
    before = param_digest(bundle.generator)
    with torch.no_grad():
        list(bundle.generator.parameters())[0].view(-1)[0] += 1e-6
    assert param_digest(bundle.generator) != before


def test_tiny_fixtures_are_under_1k_params():
    vae = tiny_vae_bundle()
    assert n_params(vae.generator, vae.encoder) <= 1000
    gan = tiny_gan_bundle()
    assert n_params(gan.critic) <= 1000
    assert n_params(gan.generator, gan.relation) <= 1000


def test_color64_forward_paths():
    # exercises inorm, gap, and conv-softmax heads end to end
    bundle = build_bundle("anagan", "color64", seed=0)
    x = np.random.default_rng(0).uniform(-1, 1, (2, 3, 64, 64)).astype(np.float32)
    probs = classify_relation(bundle, x, x)
    assert probs.shape == (2, 32)
    scores = discriminate(bundle, x)
    assert scores.shape == (2,)
