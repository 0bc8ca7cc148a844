"""Loss computations for both families.

The VAE family minimizes reconstruction + KL (the negative evidence bound);
the GAN family trains a Wasserstein critic with a gradient penalty. Both add
the analogical term: the generator emits pairs from codes differing in one
component, and the relation classifier's log-likelihood of the true component
is maximized jointly by generator and classifier.

All public losses return a LossReport with float components; the
differentiable scalar rides along in `total_tensor` for optimizer steps.
Probabilities are floored at PROB_FLOOR inside logs so softmax underflow can
never produce a non-finite loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .latent import pairs_to_arrays
from .models import latent_input

__all__ = [
    "LossReport",
    "PROB_FLOOR",
    "elbo_loss",
    "critic_loss",
    "generator_adversarial_loss",
    "analogical_loss",
    "combined_step_loss",
    "supervised_analogical_loss",
    "ToyWorld",
    "verify_bound",
]

PROB_FLOOR = 1e-12


@dataclass
class LossReport:
    """A scalar loss with its named parts.

    `total` is the documented combination of `components` (weights such as
    the penalty coefficient live in `diagnostics`). `total_tensor` is the
    same value as an attached-graph torch scalar when the loss was computed
    with gradients enabled.
    """

    total: float
    components: dict
    diagnostics: dict = field(default_factory=dict)
    total_tensor: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not np.isfinite(self.total):
            raise FloatingPointError(f"non-finite loss total: {self.total} "
                                     f"(components {self.components})")


def _log(p):
    return torch.log(torch.clamp(p, min=PROB_FLOOR))


def _scalar(t):
    return float(t.detach())


# ---------------------------------------------------------------------------
# VAE family
# ---------------------------------------------------------------------------


def elbo_loss(bundle, real_images, rng=None, train=True) -> LossReport:
    """Reconstruction + KL for a real batch (a minimization loss).

    recon: per-image pixel-summed Bernoulli cross-entropy between the input
    and its decoding, averaged over the batch. kl: closed-form divergence of
    the diagonal-Gaussian posterior from the standard normal,
    -0.5 * sum(1 + logvar - mu^2 - exp(logvar)). total = recon + kl.

    In training mode the decoded code is the reparameterized draw
    mu + exp(logvar/2) * eps with eps from `rng`; in evaluation mode it is mu.
    """
    if bundle.family != "anavae":
        from .models import ModelFamilyError
        raise ModelFamilyError("elbo_loss applies to the anavae family")
    x = torch.as_tensor(np.asarray(real_images)).to(bundle.dtype)
    if x.min() < 0 or x.max() > 1:
        raise ValueError(f"vae inputs must lie in [0,1]; got range "
                         f"[{float(x.min()):.4f}, {float(x.max()):.4f}]")
    n = x.shape[0]
    bundle.encoder.train(train)
    bundle.generator.train(train)
    stats = bundle.encoder(x)
    k = bundle.latent_spec.code_dim
    mu, logvar = stats[:, :k], stats[:, k:]
    if train:
        if rng is None:
            raise ValueError("training-mode elbo needs an rng for the posterior draw")
        eps = torch.as_tensor(rng.standard_normal(mu.shape)).to(bundle.dtype)
        code = mu + torch.exp(0.5 * logvar) * eps
    else:
        code = mu
    decoded = bundle.generator(code)
    recon = -(x * _log(decoded) + (1 - x) * _log(1 - decoded)).sum() / n
    kl = (-0.5 * (1 + logvar - mu * mu - torch.exp(logvar))).sum() / n
    total = recon + kl
    return LossReport(
        total=_scalar(total),
        components={"recon": _scalar(recon), "kl": _scalar(kl)},
        total_tensor=total,
    )


# ---------------------------------------------------------------------------
# GAN family
# ---------------------------------------------------------------------------


def _critic_scores(bundle, images, train):
    bundle.critic.train(train)
    return bundle.critic(images).reshape(-1)


def critic_loss(bundle, real_images, fake_images, gp_weight=0.25, rng=None,
                train=True) -> LossReport:
    """Wasserstein critic loss with the unit-gradient-norm penalty.

    critic = mean D(fake) - mean D(real). The penalty interpolates each
    real/fake pair at a per-sample Uniform[0,1] point u (drawn from `rng`)
    and averages (||grad_xhat D(xhat)||_2 - 1)^2.
    total = critic + gp_weight * gradient_penalty.
    """
    if bundle.family != "anagan":
        from .models import ModelFamilyError
        raise ModelFamilyError("critic_loss applies to the anagan family")
    real = torch.as_tensor(np.asarray(real_images)).to(bundle.dtype)
    fake = fake_images if torch.is_tensor(fake_images) else \
        torch.as_tensor(np.asarray(fake_images)).to(bundle.dtype)
    if real.shape[0] != fake.shape[0]:
        raise ValueError(f"batch sizes differ: {real.shape[0]} real vs {fake.shape[0]} fake")
    n = real.shape[0]
    if rng is None:
        rng = np.random.default_rng(0)
    u = torch.as_tensor(rng.random(n)).to(bundle.dtype).reshape((n,) + (1,) * (real.dim() - 1))

    critic = _critic_scores(bundle, fake, train).mean() - _critic_scores(bundle, real, train).mean()

    interp = (u * real + (1 - u) * fake.detach()).requires_grad_(True)
    scores = _critic_scores(bundle, interp, train)
    grads = torch.autograd.grad(scores.sum(), interp, create_graph=True)[0]
    grad_norm = torch.sqrt(grads.reshape(n, -1).pow(2).sum(dim=1) + 1e-24)
    penalty = ((grad_norm - 1) ** 2).mean()

    total = critic + gp_weight * penalty
    return LossReport(
        total=_scalar(total),
        components={"critic": _scalar(critic), "gradient_penalty": _scalar(penalty)},
        diagnostics={"gp_weight": float(gp_weight)},
        total_tensor=total,
    )


def generator_adversarial_loss(bundle, fake_images, train=True) -> LossReport:
    """-mean D(fake): minimizing this pushes generated scores up."""
    if bundle.family != "anagan":
        from .models import ModelFamilyError
        raise ModelFamilyError("generator_adversarial_loss applies to the anagan family")
    fake = fake_images if torch.is_tensor(fake_images) else \
        torch.as_tensor(np.asarray(fake_images)).to(bundle.dtype)
    total = -_critic_scores(bundle, fake, train).mean()
    return LossReport(total=_scalar(total), components={"adversarial": _scalar(total)},
                      total_tensor=total)


# ---------------------------------------------------------------------------
# Analogical terms
# ---------------------------------------------------------------------------


def analogical_loss(bundle, pairs, train=True) -> LossReport:
    """Negative mean log-probability R assigns to each pair's true factor.

    Generates x1 = G(c1, z) and x2 = G(c2, z) with the pair's shared noise;
    gradients flow into both the generator and the classifier. Probabilities
    hitting the floor are counted in diagnostics["clamp_fraction"].
    """
    c1, c2, z, factors = pairs_to_arrays(pairs)
    n = len(pairs)
    bundle.generator.train(train)
    bundle.relation.train(train)
    noise = z if bundle.latent_spec.noise_dim else None
    x1 = bundle.generator(latent_input(bundle, c1, noise))
    x2 = bundle.generator(latent_input(bundle, c2, noise))
    probs = bundle.relation(torch.cat([x1, x2], dim=1))
    idx = torch.as_tensor(factors)
    p_true = probs[torch.arange(n), idx]
    clamped = float((p_true < PROB_FLOOR).sum()) / n
    total = -_log(p_true).mean()
    return LossReport(
        total=_scalar(total),
        components={"analogical": _scalar(total)},
        diagnostics={"clamp_fraction": clamped},
        total_tensor=total,
    )


def supervised_analogical_loss(bundle, labeled_pairs, train=True) -> LossReport:
    """Classifier-only variant on real pairs with known differing factor.

    `labeled_pairs` is (x1, x2, factors) with images stacked batch-first.
    No generation is involved, so only R receives gradients.
    """
    x1, x2, factors = labeled_pairs
    x1 = torch.as_tensor(np.asarray(x1)).to(bundle.dtype)
    x2 = torch.as_tensor(np.asarray(x2)).to(bundle.dtype)
    factors = torch.as_tensor(np.asarray(factors, dtype=np.int64))
    n = x1.shape[0]
    if n == 0:
        raise ValueError("labeled_pairs must be nonempty")
    bundle.relation.train(train)
    probs = bundle.relation(torch.cat([x1, x2], dim=1))
    p_true = probs[torch.arange(n), factors]
    total = -_log(p_true).mean()
    return LossReport(total=_scalar(total), components={"analogical": _scalar(total)},
                      total_tensor=total)


def combined_step_loss(bundle, batch, pairs, lambda_, rng=None, train=True) -> LossReport:
    """Base family loss plus lambda times the analogical term.

    For the VAE family `batch` is a real image batch; for the GAN family it
    is the already-generated fake batch of the generator phase. With
    lambda_ = 0 the analogical branch is skipped entirely and the total
    equals the base loss exactly.
    """
    if lambda_ < 0:
        raise ValueError(f"lambda_ must be >= 0, got {lambda_}")
    if bundle.family == "anavae":
        base = elbo_loss(bundle, batch, rng=rng, train=train)
    else:
        base = generator_adversarial_loss(bundle, batch, train=train)
    components = dict(base.components)
    diagnostics = {"lambda": float(lambda_)}
    if lambda_ == 0:
        components["analogical"] = 0.0
        return LossReport(total=base.total, components=components,
                          diagnostics=diagnostics, total_tensor=base.total_tensor)
    ana = analogical_loss(bundle, pairs, train=train)
    total = base.total_tensor + lambda_ * ana.total_tensor
    components["analogical"] = ana.components["analogical"]
    diagnostics.update(ana.diagnostics)
    return LossReport(total=_scalar(total), components=components,
                      diagnostics=diagnostics, total_tensor=total)


# ---------------------------------------------------------------------------
# Enumerable bound checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyWorld:
    """A fully tabulated finite world over (factor, pair).

    prior: P(r), shape [k]. conditional: P(pair | r), shape [k, n_pairs].
    classifier: R(r | pair), shape [n_pairs, k]. All rows must normalize.
    """

    prior: np.ndarray
    conditional: np.ndarray
    classifier: np.ndarray

    def __post_init__(self):
        prior = np.asarray(self.prior, dtype=np.float64)
        conditional = np.asarray(self.conditional, dtype=np.float64)
        classifier = np.asarray(self.classifier, dtype=np.float64)
        object.__setattr__(self, "prior", prior)
        object.__setattr__(self, "conditional", conditional)
        object.__setattr__(self, "classifier", classifier)
        k, n_pairs = conditional.shape
        if prior.shape != (k,) or classifier.shape != (n_pairs, k):
            raise ValueError("table shapes are inconsistent")
        for name, table, axis in (("prior", prior, None),
                                  ("conditional", conditional, 1),
                                  ("classifier", classifier, 1)):
            if table.min() < 0:
                raise ValueError(f"{name} has negative entries")
            sums = table.sum() if axis is None else table.sum(axis=axis)
            if not np.allclose(sums, 1.0, atol=1e-9):
                raise ValueError(f"{name} rows do not normalize to 1")

    @classmethod
    def random(cls, k, n_pairs, rng):
        """A random normalized world with a random (generally wrong) classifier."""
        return cls(
            prior=rng.dirichlet(np.ones(k)),
            conditional=rng.dirichlet(np.ones(n_pairs), size=k),
            classifier=rng.dirichlet(np.ones(k), size=n_pairs),
        )


def _xlogy(x, y):
    out = np.zeros_like(x)
    mask = x > 0
    out[mask] = x[mask] * np.log(y[mask])
    return out


def verify_bound(world: ToyWorld):
    """Enumerate the three quantities of the conditional-entropy decomposition.

    Returns (lhs, kl_term, k_term) where lhs = -H(r | x1, x2),
    kl_term = E_pairs KL(P(r|pair) || R(r|pair)) and k_term is the expected
    classifier log-likelihood. The identity lhs = kl_term + k_term holds by
    construction, and since the KL part is non-negative, k_term <= lhs: the
    classifier log-likelihood lower-bounds the negative conditional entropy.
    """
    joint = world.prior[:, None] * world.conditional  # [k, n_pairs]
    p_pair = joint.sum(axis=0)
    posterior = np.divide(joint, p_pair[None, :], out=np.zeros_like(joint),
                          where=p_pair[None, :] > 0)
    lhs = float((p_pair[None, :] * _xlogy(posterior, posterior)).sum())
    kl_term = float((p_pair[None, :] * (_xlogy(posterior, posterior)
                                        - _xlogy(posterior, world.classifier.T))).sum())
    k_term = float(_xlogy(joint, world.classifier.T).sum())
    return lhs, kl_term, k_term
