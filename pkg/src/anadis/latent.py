"""Latent codes, analogical code pairs, and traversal sequences.

The latent space splits into a continuous code c (one component per hoped-for
generative factor) and, for the GAN family only, a noise vector z that absorbs
everything the code does not model. Both are standard normal component-wise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LatentSpec",
    "AnalogicalPair",
    "TraversalSequence",
    "sample_prior",
    "sample_analogical_batch",
    "build_traversal",
    "pairs_to_arrays",
]


@dataclass(frozen=True)
class LatentSpec:
    """Dimensions of the latent space: `code_dim` components of c, `noise_dim` of z."""

    code_dim: int
    noise_dim: int = 0

    def __post_init__(self):
        if self.code_dim < 1:
            raise ValueError(f"code_dim must be >= 1, got {self.code_dim}")
        if self.noise_dim < 0:
            raise ValueError(f"noise_dim must be >= 0, got {self.noise_dim}")


@dataclass(frozen=True)
class AnalogicalPair:
    """Two codes that differ in exactly one component, plus the shared noise.

    `factor` is the index of the differing component, `offset` the signed
    amount added to c1[factor] to obtain c2[factor]; |offset| lies in [1, 2].
    """

    c1: np.ndarray
    c2: np.ndarray
    z: np.ndarray
    factor: int
    offset: float


@dataclass(frozen=True)
class TraversalSequence:
    """Codes that agree with `base_code` everywhere except position `factor`,
    where `values` are substituted one by one."""

    base_code: np.ndarray
    factor: int
    values: tuple = ()
    codes: np.ndarray = field(repr=False, default=None)


def sample_prior(spec: LatentSpec, n: int, rng: np.random.Generator):
    """Draw `n` codes and noises from the component-wise standard normal prior.

    Returns (codes [n, code_dim], noises [n, noise_dim]); noises is an
    n-by-0 array when the spec has no noise split.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    codes = rng.standard_normal((n, spec.code_dim))
    noises = rng.standard_normal((n, spec.noise_dim))
    return codes, noises


def sample_analogical_batch(spec: LatentSpec, batch: int, rng: np.random.Generator):
    """Sample a batch of analogical code pairs.

    Per pair: c1 and z come from the prior; the differing factor is uniform
    over the code components; the offset magnitude is Uniform[1, 2] with a
    fair-coin sign, so each factor is exercised in both directions and cannot
    split into two one-sided halves.
    """
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    codes, noises = sample_prior(spec, batch, rng)
    factors = rng.integers(0, spec.code_dim, size=batch)
    signs = np.where(rng.random(batch) < 0.5, -1.0, 1.0)
    offsets = signs * rng.uniform(1.0, 2.0, size=batch)
    pairs = []
    for i in range(batch):
        c2 = codes[i].copy()
        c2[factors[i]] += offsets[i]
        pairs.append(
            AnalogicalPair(
                c1=codes[i],
                c2=c2,
                z=noises[i],
                factor=int(factors[i]),
                offset=float(offsets[i]),
            )
        )
    return pairs


def build_traversal(base_code: np.ndarray, factor: int, values) -> TraversalSequence:
    """Substitute each of `values` into position `factor` of `base_code`.

    Pure: `base_code` is copied, never mutated. `values` must be nonempty
    and strictly monotone.
    """
    base_code = np.asarray(base_code, dtype=np.float64)
    values = tuple(float(v) for v in values)
    if not values:
        raise ValueError("values must be nonempty")
    if not (0 <= factor < base_code.shape[-1]):
        raise IndexError(f"factor {factor} out of range for code_dim {base_code.shape[-1]}")
    diffs = np.diff(values)
    if len(values) > 1 and not (np.all(diffs > 0) or np.all(diffs < 0)):
        raise ValueError("values must be strictly monotone")
    codes = np.tile(base_code, (len(values), 1))
    codes[:, factor] = values
    return TraversalSequence(base_code=base_code.copy(), factor=factor, values=values, codes=codes)


def pairs_to_arrays(pairs):
    """Stack a pair list into (c1, c2, z, factors) arrays for batched forwards."""
    if not pairs:
        raise ValueError("pairs must be nonempty")
    c1 = np.stack([p.c1 for p in pairs])
    c2 = np.stack([p.c2 for p in pairs])
    z = np.stack([p.z for p in pairs])
    factors = np.array([p.factor for p in pairs], dtype=np.int64)
    return c1, c2, z, factors
