"""Self-contained oracle suites behind the `verify` command.

Each suite checks one pillar of the implementation against an independent
reference computation: enumerated probability tables for the entropy bound,
central finite differences for loss gradients, a constructed
independent-subspace generator for the metric, and direct least-squares
solves for the projection distance. Everything runs from a fresh checkout in
a few minutes on a laptop CPU.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .latent import LatentSpec, sample_analogical_batch
from .models import NetSpec, custom_bundle, fc, flatten, reshape, sigmoid, softmax, tanh
from .objectives import ToyWorld, analogical_loss, critic_loss, elbo_loss, verify_bound
from .seeding import stream
from .subspace_score import MetricParams, subspace_score

__all__ = ["SuiteResult", "run_bound_suite", "run_gradient_suite",
           "run_metric_suite", "run_projection_suite", "run_all_suites",
           "IndependentSubspaceOracle", "finite_difference_error"]


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _result(name, passed, detail, t0):
    return SuiteResult(name=name, passed=passed, detail=detail, seconds=time.time() - t0)


# ---------------------------------------------------------------------------
# Entropy-bound enumeration
# ---------------------------------------------------------------------------


def run_bound_suite(n_worlds=100, seed=0, tol=1e-12):
    t0 = time.time()
    rng = np.random.default_rng(seed)
    worst_gap, violations = 0.0, 0
    for _ in range(n_worlds):
        world = ToyWorld.random(int(rng.integers(2, 6)), int(rng.integers(3, 40)), rng)
        lhs, kl_term, k_term = verify_bound(world)
        worst_gap = max(worst_gap, abs(lhs - (kl_term + k_term)))
        if k_term > lhs + tol or kl_term < -tol:
            violations += 1
    passed = worst_gap <= tol and violations == 0
    return _result("bound_identity", passed,
                   f"{n_worlds} worlds, worst identity gap {worst_gap:.2e}, "
                   f"{violations} bound violations", t0)


# ---------------------------------------------------------------------------
# Finite-difference gradient checks
# ---------------------------------------------------------------------------


def finite_difference_error(loss_fn, modules, h=1e-4):
    """||grad_fd - grad_autograd|| / ||grad_autograd|| over all parameters.

    `loss_fn` must be deterministic in the parameters (re-seed internal
    randomness per call) and is evaluated with grad enabled, since penalty
    terms differentiate through their own forward.
    """
    params = [p for m in modules for p in m.parameters()]
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = torch.cat([p.grad.reshape(-1).clone() for p in params]).numpy()
    numeric = np.empty_like(analytic)
    idx = 0
    for p in params:
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            f_plus = float(loss_fn().detach())
            flat[i] = orig - h
            f_minus = float(loss_fn().detach())
            flat[i] = orig
            numeric[idx] = (f_plus - f_minus) / (2 * h)
            idx += 1
    return float(np.linalg.norm(numeric - analytic)
                 / max(np.linalg.norm(analytic), 1e-12))


def _fd_vae_bundle(seed=0):
    specs = {
        "generator": NetSpec((3,), (fc(12), tanh(), fc(25), sigmoid(), reshape(1, 5, 5))),
        "encoder": NetSpec((1, 5, 5), (flatten(), fc(12), tanh(), fc(6))),
        "relation": NetSpec((2, 5, 5), (flatten(), fc(8), tanh(), fc(3), softmax())),
    }
    return custom_bundle("anavae", specs, code_dim=3, seed=seed, dtype=torch.float64)


def _fd_gan_bundle(seed=0):
    specs = {
        "generator": NetSpec((4,), (fc(12), tanh(), fc(25), tanh(), reshape(1, 5, 5))),
        "critic": NetSpec((1, 5, 5), (flatten(), fc(16), tanh(), fc(1))),
        "relation": NetSpec((2, 5, 5), (flatten(), fc(8), tanh(), fc(2), softmax())),
    }
    return custom_bundle("anagan", specs, code_dim=2, noise_dim=2, seed=seed,
                         dtype=torch.float64)


def run_gradient_suite(seed=0, tol=1e-3):
    t0 = time.time()
    errors = {}

    vae = _fd_vae_bundle(seed)
    x01 = np.random.default_rng(seed + 1).random((4, 1, 5, 5))
    errors["elbo"] = finite_difference_error(
        lambda: elbo_loss(vae, x01, rng=np.random.default_rng(17)).total_tensor,
        [vae.generator, vae.encoder])

    gan = _fd_gan_bundle(seed)
    rng = np.random.default_rng(seed + 2)
    real = rng.uniform(-1, 1, (4, 1, 5, 5))
    fake = rng.uniform(-1, 1, (4, 1, 5, 5))
    errors["critic_gp"] = finite_difference_error(
        lambda: critic_loss(gan, real, fake, gp_weight=0.25,
                            rng=np.random.default_rng(23)).total_tensor,
        [gan.critic])

    pairs = sample_analogical_batch(gan.latent_spec, 4, stream(seed, "fd-pairs"))
    errors["analogical"] = finite_difference_error(
        lambda: analogical_loss(gan, pairs, train=False).total_tensor,
        [gan.generator, gan.relation])

    passed = all(e < tol for e in errors.values())
    detail = ", ".join(f"{k}={v:.2e}" for k, v in errors.items())
    return _result("gradient_checks", passed, f"relative errors: {detail}", t0)


# ---------------------------------------------------------------------------
# Metric ideal case
# ---------------------------------------------------------------------------


class IndependentSubspaceOracle:
    """Generator emitting points on k exactly independent 4-D subspaces.

    Factor i maps to span(e_{4i}..e_{4i+3}); the traversal value and the
    fixed base coordinates mix into four generic in-subspace coordinates so
    each factor's samples fill their subspace in general position.
    """

    def __init__(self, k=4, dim=32):
        self.latent_spec = LatentSpec(code_dim=k, noise_dim=0)
        self.image_shape = (1, 1, dim)
        self.dim = dim

    def generate_fn(self, codes, noises):
        codes = np.asarray(codes)
        factor = int(np.argmax(codes.max(axis=0) - codes.min(axis=0)))
        k = codes.shape[1]
        b1 = codes[0, (factor + 1) % k]
        b2 = codes[0, (factor + 2) % k]
        v = codes[:, factor]
        w = np.stack([
            1.0 + 0.3 * np.sin(3 * b1) + 0.05 * v,
            v + 0.2 * b2,
            0.5 * v ** 2 + b2,
            np.sin(v + b1),
        ], axis=1)
        out = np.zeros((len(codes), self.dim))
        out[:, 4 * factor:4 * factor + 4] = w
        return out.reshape(len(codes), *self.image_shape)


def run_metric_suite(seed=0):
    t0 = time.time()
    oracle = IndependentSubspaceOracle(k=4, dim=32)
    rng = np.random.default_rng(seed)
    span_dim = 4 * oracle.latent_spec.code_dim

    inside = np.zeros((oracle.dim, 40))
    inside[:span_dim] = rng.standard_normal((span_dim, 40))
    in_report = subspace_score(oracle, inside, MetricParams(seed=seed))

    outside = np.zeros((oracle.dim, 40))
    outside[span_dim:] = rng.standard_normal((oracle.dim - span_dim, 40))
    out_report = subspace_score(oracle, outside, MetricParams(seed=seed))

    ideal_ok = abs(in_report.aggregate_score - 1.0) <= 1e-6
    endpoint_ok = abs(out_report.aggregate_score
                      - 0.5 * out_report.aggregate_nmi) <= 1e-9
    return _result("metric_ideal_case", ideal_ok and endpoint_ok,
                   f"in-span score {in_report.aggregate_score:.8f}, orthogonal "
                   f"score {out_report.aggregate_score:.8f} vs 0.5*NMI "
                   f"{0.5 * out_report.aggregate_nmi:.8f}", t0)


# ---------------------------------------------------------------------------
# Projection-distance oracle
# ---------------------------------------------------------------------------


def run_projection_suite(seed=0, n_instances=100, tol=1e-8):
    from .subspace_score import projection_distance

    t0 = time.time()
    rng = np.random.default_rng(seed)
    worst = 0.0
    bounds_ok = True
    for _ in range(n_instances):
        d = int(rng.integers(20, 200))
        cols = int(rng.integers(2, min(d, 50)))
        y = rng.standard_normal((d, cols))
        x = rng.standard_normal(d)
        x /= np.linalg.norm(x)
        ours = projection_distance(x, y)
        u, *_ = np.linalg.lstsq(y, x, rcond=None)
        direct = float(np.linalg.norm(y @ u - x))
        worst = max(worst, abs(ours - direct))
        bounds_ok = bounds_ok and (-1e-12 <= ours <= 1 + 1e-12)
    return _result("projection_distance", worst <= tol and bounds_ok,
                   f"{n_instances} instances, worst |diff| {worst:.2e} vs "
                   f"least-squares solve", t0)


def run_all_suites(seed=0):
    return [
        run_bound_suite(seed=seed),
        run_gradient_suite(seed=seed),
        run_metric_suite(seed=seed),
        run_projection_suite(seed=seed),
    ]
