"""Network construction and forward contracts.

Four roles: generator G (code -> image), encoder Q (VAE family), critic D
(GAN family, unbounded scores), and the relation classifier R that looks at
an image pair stacked along channels and predicts which code component
differs. Architectures are declared as layer lists that are shape-checked
end to end at construction time; a malformed spec fails at build, not at
runtime.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn

from .latent import LatentSpec
from .seeding import torch_generator

__all__ = [
    "Layer",
    "NetSpec",
    "ModelBundle",
    "ModelFamilyError",
    "build_bundle",
    "build_net",
    "generate",
    "encode",
    "discriminate",
    "classify_relation",
    "param_digest",
    "all_parameters_finite",
    "PROFILES",
]

FAMILIES = ("anavae", "anagan")


class ModelFamilyError(ValueError):
    """An operation was called on the wrong model family."""


# ---------------------------------------------------------------------------
# Layer descriptors and shape checking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Layer:
    kind: str
    out: int = 0
    kernel: int = 0
    stride: int = 0
    padding: int = 0
    slope: float = 0.0
    rate: float = 0.0
    shape: tuple = ()


def conv(out, kernel=4, stride=2, padding=1):
    return Layer("conv", out=out, kernel=kernel, stride=stride, padding=padding)


def upconv(out, kernel=4, stride=2, padding=1):
    return Layer("upconv", out=out, kernel=kernel, stride=stride, padding=padding)


def fc(out):
    return Layer("fc", out=out)


def bn():
    return Layer("bn")


def inorm():
    return Layer("inorm")


def relu():
    return Layer("relu")


def lrelu(slope=0.2):
    return Layer("lrelu", slope=slope)


def sigmoid():
    return Layer("sigmoid")


def tanh():
    return Layer("tanh")


def softmax():
    return Layer("softmax")


def dropout(rate=0.2):
    return Layer("dropout", rate=rate)


def flatten():
    return Layer("flatten")


def reshape(*shape):
    return Layer("reshape", shape=tuple(shape))


def gap():
    return Layer("gap")


def _propagate(shape, layer: Layer):
    """Output shape of `layer` applied to `shape` ((C,H,W) or (F,)); raises on misuse."""
    kind = layer.kind
    if kind in ("conv", "upconv"):
        if len(shape) != 3:
            raise ValueError(f"{kind} needs a (C,H,W) input, got {shape}")
        c, h, w = shape
        k, s, p = layer.kernel, layer.stride, layer.padding
        if kind == "conv":
            if (h + 2 * p - k) % s or (w + 2 * p - k) % s:
                raise ValueError(f"conv {k}x{k}/{s} does not tile {h}x{w} exactly")
            return (layer.out, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
        return (layer.out, (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k)
    if kind == "fc":
        if len(shape) != 1:
            raise ValueError(f"fc needs a flat input, got {shape} (insert flatten)")
        return (layer.out,)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "reshape":
        if int(np.prod(shape)) != int(np.prod(layer.shape)):
            raise ValueError(f"cannot reshape {shape} to {layer.shape}")
        return tuple(layer.shape)
    if kind == "gap":
        if len(shape) != 3:
            raise ValueError(f"gap needs a (C,H,W) input, got {shape}")
        return (shape[0],)
    if kind in ("bn", "inorm", "relu", "lrelu", "sigmoid", "tanh", "dropout"):
        return shape
    if kind == "softmax":
        if len(shape) != 1:
            raise ValueError(f"softmax needs a flat input, got {shape}")
        return shape
    raise ValueError(f"unknown layer kind {kind!r}")


@dataclass(frozen=True)
class NetSpec:
    """An input shape plus an ordered layer list; composition is validated eagerly."""

    input_shape: tuple
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.output_shape  # force validation

    @property
    def output_shape(self):
        shape = self.input_shape
        for layer in self.layers:
            shape = _propagate(shape, layer)
        return shape

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "layers": [
                {k: (list(v) if isinstance(v, tuple) else v)
                 for k, v in vars(lyr).items()
                 if v not in (0, 0.0, ()) or k == "kind"}
                for lyr in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d):
        layers = []
        for entry in d["layers"]:
            entry = dict(entry)
            if "shape" in entry:
                entry["shape"] = tuple(entry["shape"])
            layers.append(Layer(**entry))
        return cls(input_shape=tuple(d["input_shape"]), layers=tuple(layers))


class _PerSampleNorm(nn.GroupNorm):
    """Instance-style normalization for flat features: one group over all of them."""

    def __init__(self, width):
        super().__init__(1, width, affine=True)


def build_net(spec: NetSpec) -> nn.Sequential:
    """Materialize a NetSpec as torch modules."""
    mods = []
    shape = spec.input_shape
    for layer in spec.layers:
        out_shape = _propagate(shape, layer)
        kind = layer.kind
        if kind == "conv":
            mods.append(nn.Conv2d(shape[0], layer.out, layer.kernel, layer.stride, layer.padding))
        elif kind == "upconv":
            mods.append(nn.ConvTranspose2d(shape[0], layer.out, layer.kernel, layer.stride, layer.padding))
        elif kind == "fc":
            mods.append(nn.Linear(shape[0], layer.out))
        elif kind == "bn":
            mods.append(nn.BatchNorm2d(shape[0]) if len(shape) == 3 else nn.BatchNorm1d(shape[0]))
        elif kind == "inorm":
            if len(shape) == 3:
                mods.append(nn.InstanceNorm2d(shape[0], affine=True, track_running_stats=False))
            else:
                mods.append(_PerSampleNorm(shape[0]))
        elif kind == "relu":
            mods.append(nn.ReLU())
        elif kind == "lrelu":
            mods.append(nn.LeakyReLU(layer.slope))
        elif kind == "sigmoid":
            mods.append(nn.Sigmoid())
        elif kind == "tanh":
            mods.append(nn.Tanh())
        elif kind == "softmax":
            mods.append(nn.Softmax(dim=1))
        elif kind == "dropout":
            mods.append(nn.Dropout(layer.rate))
        elif kind == "flatten":
            mods.append(nn.Flatten())
        elif kind == "reshape":
            mods.append(nn.Unflatten(1, tuple(layer.shape)))
        elif kind == "gap":
            mods.append(nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten()))
        shape = out_shape
    return nn.Sequential(*mods)


# ---------------------------------------------------------------------------
# Architecture profiles
# ---------------------------------------------------------------------------


def _mnist_generator(in_dim, head):
    return NetSpec((in_dim,), (
        fc(1024), bn(), relu(),
        fc(128 * 7 * 7), bn(), relu(),
        reshape(128, 7, 7),
        upconv(64), bn(), relu(),
        upconv(1), head,
    ))


def _mnist_encoder(code_dim):
    return NetSpec((1, 28, 28), (
        conv(64), lrelu(0.2),
        conv(128), bn(), lrelu(0.2),
        flatten(), fc(1024), bn(), lrelu(0.2),
        fc(2 * code_dim),
    ))


def _mnist_critic():
    return NetSpec((1, 28, 28), (
        conv(64), lrelu(0.2),
        conv(128), inorm(), lrelu(0.2),
        flatten(), fc(1024), inorm(), lrelu(0.2),
        fc(1),
    ))


def _mnist_relation(code_dim):
    # conv widths are half of the encoder/critic's; dropout after every activation
    return NetSpec((2, 28, 28), (
        conv(32), lrelu(0.2), dropout(0.2),
        conv(64), bn(), lrelu(0.2), dropout(0.2),
        flatten(), fc(1024), bn(), lrelu(0.2), dropout(0.2),
        fc(code_dim), softmax(),
    ))


def _color64_generator(in_dim, head):
    return NetSpec((in_dim,), (
        reshape(in_dim, 1, 1),
        upconv(512, 4, 1, 0), bn(), lrelu(0.1),
        upconv(256), bn(), lrelu(0.1),
        upconv(128), bn(), lrelu(0.1),
        upconv(64), bn(), lrelu(0.1),
        upconv(3), head,
    ))


def _color64_encoder(code_dim):
    return NetSpec((3, 64, 64), (
        conv(64), lrelu(0.1),
        conv(128), bn(), lrelu(0.1),
        conv(256), bn(), lrelu(0.1),
        conv(512), bn(), lrelu(0.1),
        conv(2 * code_dim, 4, 1, 0),
        flatten(),
    ))


def _color64_critic():
    return NetSpec((3, 64, 64), (
        conv(64), lrelu(0.1),
        conv(128), inorm(), lrelu(0.1),
        conv(256), inorm(), lrelu(0.1),
        conv(512), inorm(), lrelu(0.1),
        conv(1, 4, 1, 0), flatten(),
    ))


def _color64_relation(code_dim):
    return NetSpec((6, 64, 64), (
        conv(32), lrelu(0.1), dropout(0.2),
        conv(64), bn(), lrelu(0.1), dropout(0.2),
        conv(128), bn(), lrelu(0.1), dropout(0.2),
        conv(256), bn(), lrelu(0.1), dropout(0.2),
        conv(code_dim, 4, 1, 0), gap(), softmax(),
    ))


def _synthetic_generator(in_dim, head):
    return NetSpec((in_dim,), (
        fc(512), bn(), relu(),
        fc(64 * 8 * 8), bn(), relu(),
        reshape(64, 8, 8),
        upconv(32), bn(), relu(),
        upconv(1), head,
    ))


def _synthetic_encoder(code_dim):
    return NetSpec((1, 32, 32), (
        conv(32), lrelu(0.2),
        conv(64), bn(), lrelu(0.2),
        flatten(), fc(512), bn(), lrelu(0.2),
        fc(2 * code_dim),
    ))


def _synthetic_critic():
    return NetSpec((1, 32, 32), (
        conv(32), lrelu(0.2),
        conv(64), inorm(), lrelu(0.2),
        flatten(), fc(512), inorm(), lrelu(0.2),
        fc(1),
    ))


def _synthetic_relation(code_dim):
    return NetSpec((2, 32, 32), (
        conv(16), lrelu(0.2), dropout(0.2),
        conv(32), bn(), lrelu(0.2), dropout(0.2),
        flatten(), fc(512), bn(), lrelu(0.2), dropout(0.2),
        fc(code_dim), softmax(),
    ))


# profile -> (image_shape, per-family defaults and builders)
PROFILES = {
    "mnist": {
        "image_shape": (1, 28, 28),
        "anavae": {"code_dim": 16, "noise_dim": 0},
        "anagan": {"code_dim": 8, "noise_dim": 16},
        "generator": _mnist_generator,
        "encoder": _mnist_encoder,
        "critic": _mnist_critic,
        "relation": _mnist_relation,
    },
    "color64": {
        "image_shape": (3, 64, 64),
        "anavae": {"code_dim": 32, "noise_dim": 0},
        "anagan": {"code_dim": 32, "noise_dim": 64},
        "generator": _color64_generator,
        "encoder": _color64_encoder,
        "critic": _color64_critic,
        "relation": _color64_relation,
    },
    # desk-scale profile for the procedural factor dataset (not from any table)
    "synthetic": {
        "image_shape": (1, 32, 32),
        "anavae": {"code_dim": 4, "noise_dim": 0},
        "anagan": {"code_dim": 4, "noise_dim": 8},
        "generator": _synthetic_generator,
        "encoder": _synthetic_encoder,
        "critic": _synthetic_critic,
        "relation": _synthetic_relation,
    },
}


# ---------------------------------------------------------------------------
# Bundle
# ---------------------------------------------------------------------------


@dataclass
class ModelBundle:
    family: str
    latent_spec: LatentSpec
    image_shape: tuple
    nets: dict = field(repr=False)
    net_specs: dict = field(repr=False)
    profile: str = ""
    dtype: torch.dtype = torch.float32

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.family == "anavae" and self.latent_spec.noise_dim != 0:
            raise ValueError("anavae bundles use no noise split (noise_dim must be 0)")
        if self.family == "anagan" and self.latent_spec.noise_dim <= 0:
            raise ValueError("anagan bundles need noise_dim > 0")

    @property
    def generator(self):
        return self.nets["generator"]

    @property
    def encoder(self):
        if self.family != "anavae":
            raise ModelFamilyError("encoder exists only for the anavae family")
        return self.nets["encoder"]

    @property
    def critic(self):
        if self.family != "anagan":
            raise ModelFamilyError("critic exists only for the anagan family")
        return self.nets["critic"]

    @property
    def relation(self):
        return self.nets["relation"]

    def modules(self):
        return list(self.nets.values())

    def parameters(self):
        for net in self.nets.values():
            yield from net.parameters()


def _init_parameters(module: nn.Module, gen: torch.Generator):
    """DCGAN-style init: N(0, 0.02) weights, N(1, 0.02) norm gains, zero biases."""
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                m.weight.normal_(0.0, 0.02, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d, nn.InstanceNorm2d, nn.GroupNorm)):
                if m.weight is not None:
                    m.weight.normal_(1.0, 0.02, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()


def build_bundle(family, dataset_profile, spec_overrides=None, seed=0,
                 dtype=torch.float32) -> ModelBundle:
    """Construct the networks for a (family, profile) pair.

    `spec_overrides` may replace `code_dim`/`noise_dim` (profile builders are
    re-run with the new sizes) or whole entries of `net_specs`. Override
    shapes that do not compose with the rest of the bundle are build errors.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    if dataset_profile not in PROFILES:
        raise ValueError(f"unknown profile {dataset_profile!r}; expected one of {tuple(PROFILES)}")
    prof = PROFILES[dataset_profile]
    overrides = dict(spec_overrides or {})

    code_dim = int(overrides.pop("code_dim", prof[family]["code_dim"]))
    noise_dim = int(overrides.pop("noise_dim", prof[family]["noise_dim"]))
    if family == "anavae":
        noise_dim = 0
    spec = LatentSpec(code_dim=code_dim, noise_dim=noise_dim)
    image_shape = prof["image_shape"]

    head = sigmoid() if family == "anavae" else tanh()
    net_specs = {
        "generator": prof["generator"](code_dim + noise_dim, head),
        "relation": prof["relation"](code_dim),
    }
    if family == "anavae":
        net_specs["encoder"] = prof["encoder"](code_dim)
    else:
        net_specs["critic"] = prof["critic"]()
    net_specs.update(overrides.pop("net_specs", {}))
    if overrides:
        raise ValueError(f"unknown spec_overrides keys: {sorted(overrides)}")

    _check_bundle_shapes(family, net_specs, spec, image_shape)

    gen = torch_generator(seed, "model-init")
    nets = {}
    for name in sorted(net_specs):
        net = build_net(net_specs[name]).to(dtype)
        _init_parameters(net, gen)
        nets[name] = net
    return ModelBundle(family=family, latent_spec=spec, image_shape=image_shape,
                       nets=nets, net_specs=net_specs, profile=dataset_profile, dtype=dtype)


def custom_bundle(family, net_specs, code_dim, noise_dim=0, image_shape=None,
                  seed=0, dtype=torch.float32) -> ModelBundle:
    """Build a bundle from explicit NetSpecs (tiny test nets, ablations)."""
    if family == "anavae":
        noise_dim = 0
    spec = LatentSpec(code_dim=code_dim, noise_dim=noise_dim)
    image_shape = tuple(image_shape or net_specs["generator"].output_shape)
    _check_bundle_shapes(family, net_specs, spec, image_shape)
    gen = torch_generator(seed, "model-init")
    nets = {}
    for name in sorted(net_specs):
        net = build_net(net_specs[name]).to(dtype)
        _init_parameters(net, gen)
        nets[name] = net
    return ModelBundle(family=family, latent_spec=spec, image_shape=image_shape,
                       nets=nets, net_specs=net_specs, profile="custom", dtype=dtype)


def _check_bundle_shapes(family, net_specs, spec, image_shape):
    g = net_specs["generator"]
    if g.input_shape != (spec.code_dim + spec.noise_dim,):
        raise ValueError(f"generator input {g.input_shape} != latent width "
                         f"{spec.code_dim + spec.noise_dim}")
    if g.output_shape != image_shape:
        raise ValueError(f"generator output {g.output_shape} != image shape {image_shape}")
    want_head = "sigmoid" if family == "anavae" else "tanh"
    heads = [l.kind for l in g.layers if l.kind not in ("reshape", "flatten")]
    if not heads or heads[-1] != want_head:
        raise ValueError(f"{family} generator must end in {want_head}")
    r = net_specs["relation"]
    if r.input_shape != (2 * image_shape[0],) + image_shape[1:]:
        raise ValueError(f"relation input {r.input_shape} incompatible with pairs of {image_shape}")
    if r.layers[-1].kind != "softmax" or r.output_shape != (spec.code_dim,):
        raise ValueError("relation net must end in a softmax over the code components")
    if family == "anavae":
        q = net_specs["encoder"]
        if q.input_shape != image_shape or q.output_shape != (2 * spec.code_dim,):
            raise ValueError(f"encoder must map {image_shape} to {2 * spec.code_dim} "
                             f"statistics, got {q.input_shape} -> {q.output_shape}")
    else:
        d = net_specs["critic"]
        if d.input_shape != image_shape or d.output_shape != (1,):
            raise ValueError(f"critic must map {image_shape} to a single score, "
                             f"got {d.input_shape} -> {d.output_shape}")


# ---------------------------------------------------------------------------
# Forward contracts (numpy in, numpy out; training code drives tensors directly)
# ---------------------------------------------------------------------------


def _as_tensor(x, dtype):
    return torch.as_tensor(np.asarray(x)).to(dtype)


def _set_mode(net: nn.Module, train: bool):
    net.train(train)


def latent_input(bundle, codes, noises=None):
    """Concatenate code and noise into the generator's input tensor."""
    codes = _as_tensor(codes, bundle.dtype)
    if bundle.latent_spec.noise_dim == 0:
        return codes
    if noises is None:
        raise ValueError("this bundle has a noise split; pass noises")
    noises = _as_tensor(noises, bundle.dtype)
    if noises.shape != (codes.shape[0], bundle.latent_spec.noise_dim):
        raise ValueError(f"noises shape {tuple(noises.shape)} does not match "
                         f"[{codes.shape[0]} x {bundle.latent_spec.noise_dim}]")
    return torch.cat([codes, noises], dim=1)


def generate(bundle, codes, noises=None, train=False):
    """Run the generator; returns images as a numpy array.

    Evaluation mode (the default) is pure and deterministic: frozen batch-norm
    statistics, no dropout. Plug-in bundles (oracles) may supply a
    `generate_fn(codes, noises)` attribute instead of torch nets.
    """
    gen_fn = getattr(bundle, "generate_fn", None)
    if gen_fn is not None:
        return np.asarray(gen_fn(codes, noises))
    codes = np.asarray(codes)
    if codes.ndim != 2 or codes.shape[1] != bundle.latent_spec.code_dim:
        raise ValueError(f"codes shape {codes.shape} does not match "
                         f"[n x {bundle.latent_spec.code_dim}]")
    x = latent_input(bundle, codes, noises)
    _set_mode(bundle.generator, train)
    with torch.no_grad():
        out = bundle.generator(x)
    return out.numpy()


def encode(bundle, images, rng=None, train=False):
    """Posterior statistics and a code draw for the VAE family.

    Returns (mu, logvar, code). In evaluation mode the code is exactly mu;
    in training mode it is the reparameterized draw mu + exp(logvar/2) * eps
    with eps taken from `rng`.
    """
    enc = bundle.encoder  # raises ModelFamilyError on the GAN family
    images = _as_tensor(images, bundle.dtype)
    _set_mode(enc, train)
    with torch.no_grad():
        stats = enc(images)
    k = bundle.latent_spec.code_dim
    mu, logvar = stats[:, :k].numpy(), stats[:, k:].numpy()
    if train:
        if rng is None:
            raise ValueError("training-mode encode needs an rng for the reparameterized draw")
        eps = rng.standard_normal(mu.shape)
        code = mu + np.exp(0.5 * logvar) * eps
    else:
        code = mu.copy()
    return mu, logvar, code


def discriminate(bundle, images):
    """Critic scores for the GAN family: one unbounded real per image."""
    critic = bundle.critic
    images = _as_tensor(images, bundle.dtype)
    _set_mode(critic, False)
    with torch.no_grad():
        scores = critic(images)
    return scores.numpy().reshape(-1)


def classify_relation(bundle, x1, x2, train=False):
    """R's probability table over which component differs between x1 and x2.

    The pair is stacked along the channel axis. Each row is a probability
    vector. There is no symmetry guarantee: swapping (x1, x2) generally
    changes the output.
    """
    x1 = _as_tensor(x1, bundle.dtype)
    x2 = _as_tensor(x2, bundle.dtype)
    if x1.shape != x2.shape:
        raise ValueError(f"pair shapes differ: {tuple(x1.shape)} vs {tuple(x2.shape)}")
    net = bundle.relation
    _set_mode(net, train)
    with torch.no_grad():
        probs = net(torch.cat([x1, x2], dim=1))
    return probs.numpy()


# ---------------------------------------------------------------------------
# Parameter bookkeeping
# ---------------------------------------------------------------------------


def param_digest(module: nn.Module) -> str:
    """Order-stable digest of all parameters and buffers (detects any change)."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def all_parameters_finite(bundle) -> bool:
    for net in bundle.nets.values():
        for t in net.state_dict().values():
            if t.is_floating_point() and not torch.isfinite(t).all():
                return False
    return True
