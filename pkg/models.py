#!/usr/bin/env python3
"""
DisCoPatch Networks
Encoder, Generator and Discriminator built from stride-2 convolution stages,
plus the reparameterization step and parameter bookkeeping.
"""

import hashlib
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from normalization import NORM_KINDS, GroupLayout, NormConfig, NormLayer
from tensor_engine import (ShapeError, Tensor, activation, add, conv2d, conv_transpose2d,
                           exp, flatten, linear, mul, reshape)

KERNEL = 3
STRIDE = 2
PADDING = 1
OUTPUT_PADDING = 1


@dataclass
class ModelConfig:
    latent_dim: int = 128
    hidden_dims: Tuple[int, ...] = (32, 64, 128)
    patch_size: int = 32
    in_channels: int = 3
    leaky_slope: float = 0.01
    norm_kind: str = "patch"
    image_size: int = 256

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if not self.hidden_dims:
            raise ValueError("hidden_dims needs at least one stage")
        if self.latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.patch_size % (2 ** len(self.hidden_dims)):
            raise ValueError(f"patch_size {self.patch_size} is not divisible by "
                             f"2^{len(self.hidden_dims)} (one halving per stage)")
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"Unknown norm_kind: {self.norm_kind}")
        if self.image_size < self.patch_size:
            raise ValueError(f"image_size {self.image_size} is smaller than patch_size {self.patch_size}")

    @property
    def bottleneck_size(self) -> int:
        return self.patch_size // 2 ** len(self.hidden_dims)

    @property
    def flat_features(self) -> int:
        return self.hidden_dims[-1] * self.bottleneck_size ** 2


def _kaiming_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    # a = sqrt(5) leaky gain, so the bound reduces to 1/sqrt(fan_in)
    bound = math.sqrt(6.0 / ((1.0 + 5.0) * fan_in))
    return rng.uniform(-bound, bound, size=shape)


class Conv:
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.weight = Tensor(_kaiming_uniform((c_out, c_in, KERNEL, KERNEL), c_in * KERNEL ** 2, rng),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x, stride=STRIDE, padding=PADDING):
        return conv2d(x, self.weight, self.bias, stride=stride, padding=padding)

    def parameters(self):
        return [self.weight, self.bias]


class ConvT:
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.weight = Tensor(_kaiming_uniform((c_in, c_out, KERNEL, KERNEL), c_out * KERNEL ** 2, rng),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x):
        return conv_transpose2d(x, self.weight, self.bias, stride=STRIDE, padding=PADDING,
                                output_padding=OUTPUT_PADDING)

    def parameters(self):
        return [self.weight, self.bias]


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = Tensor(_kaiming_uniform((n_out, n_in), n_in, rng), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x):
        return linear(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class ConvTrunk:
    """Stride-2 conv + norm + LeakyReLU stages shared by Encoder and Discriminator."""

    def __init__(self, cfg: ModelConfig, norm_kind: str, track: bool, norm_cfg: NormConfig,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.convs: List[Conv] = []
        self.norms: List[NormLayer] = []
        c_in = cfg.in_channels
        for h in cfg.hidden_dims:
            self.convs.append(Conv(c_in, h, rng))
            self.norms.append(NormLayer(norm_kind, h, track, norm_cfg))
            c_in = h

    def __call__(self, x: Tensor, layout: Optional[GroupLayout] = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels or x.shape[2:] != (self.cfg.patch_size,) * 2:
            raise ShapeError(f"expected N x {self.cfg.in_channels} x {self.cfg.patch_size} x "
                             f"{self.cfg.patch_size} input, got {x.shape}")
        for conv, norm in zip(self.convs, self.norms):
            x = activation("leaky_relu", norm(conv(x), layout), slope=self.cfg.leaky_slope)
        return flatten(x)

    def named(self, prefix: str):
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            yield f"{prefix}.conv{i}", conv
            yield f"{prefix}.norm{i}", norm


class Encoder:
    def __init__(self, cfg: ModelConfig, norm_cfg: NormConfig, rng: np.random.Generator):
        self.trunk = ConvTrunk(cfg, "batch", True, norm_cfg, rng)
        self.fc_mu = Dense(cfg.flat_features, cfg.latent_dim, rng)
        self.fc_logvar = Dense(cfg.flat_features, cfg.latent_dim, rng)

    def __call__(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        h = self.trunk(x)
        return self.fc_mu(h), self.fc_logvar(h)

    def named(self):
        yield from self.trunk.named("encoder")
        yield "encoder.fc_mu", self.fc_mu
        yield "encoder.fc_logvar", self.fc_logvar


class Generator:
    def __init__(self, cfg: ModelConfig, norm_cfg: NormConfig, rng: np.random.Generator):
        self.cfg = cfg
        rev = cfg.hidden_dims[::-1]
        self.project = Dense(cfg.latent_dim, cfg.flat_features, rng)
        self.ups: List[ConvT] = []
        self.norms: List[NormLayer] = []
        for c_in, c_out in zip(rev, rev[1:] + (rev[-1],)):
            self.ups.append(ConvT(c_in, c_out, rng))
            self.norms.append(NormLayer("batch", c_out, True, norm_cfg))
        self.out_conv = Conv(rev[-1], cfg.in_channels, rng)

    def __call__(self, z: Tensor) -> Tensor:
        cfg = self.cfg
        if z.ndim != 2 or z.shape[1] != cfg.latent_dim:
            raise ShapeError(f"latent axis 1 has width {z.shape[-1]}, expected {cfg.latent_dim}")
        s = cfg.bottleneck_size
        x = reshape(self.project(z), (z.shape[0], cfg.hidden_dims[-1], s, s))
        for up, norm in zip(self.ups, self.norms):
            x = activation("leaky_relu", norm(up(x)), slope=cfg.leaky_slope)
        return activation("tanh", self.out_conv(x, stride=1, padding=1))

    def named(self):
        yield "generator.project", self.project
        for i, (up, norm) in enumerate(zip(self.ups, self.norms)):
            yield f"generator.up{i}", up
            yield f"generator.norm{i}", norm
        yield "generator.out_conv", self.out_conv


class Discriminator:
    def __init__(self, cfg: ModelConfig, norm_cfg: NormConfig, rng: np.random.Generator):
        self.trunk = ConvTrunk(cfg, cfg.norm_kind, norm_cfg.disc_track_running_stats, norm_cfg, rng)
        self.head = Dense(cfg.flat_features, 1, rng)

    def features(self, x: Tensor, layout: Optional[GroupLayout] = None) -> Tensor:
        return self.trunk(x, layout)

    def __call__(self, x: Tensor, layout: Optional[GroupLayout] = None) -> Tensor:
        logits = self.head(self.features(x, layout))
        return reshape(activation("sigmoid", logits), (x.shape[0],))

    def named(self):
        yield from self.trunk.named("discriminator")
        yield "discriminator.head", self.head


class ModelParams:
    """Encoder (theta_E), Generator (theta_G) and Discriminator (phi) with their norm states."""

    def __init__(self, cfg: ModelConfig, norm_cfg: Optional[NormConfig] = None, seed: int = 0):
        self.cfg = cfg
        self.norm_cfg = norm_cfg or NormConfig()
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg, self.norm_cfg, rng)
        self.generator = Generator(cfg, self.norm_cfg, rng)
        self.discriminator = Discriminator(cfg, self.norm_cfg, rng)

    # Parameter groups
    def _modules(self, network: str):
        nets = {"encoder": self.encoder, "generator": self.generator, "discriminator": self.discriminator}
        return list(nets[network].named())

    def parameters(self, network: str) -> List[Tensor]:
        params = []
        for _, module in self._modules(network):
            params.extend(module.parameters())
        return params

    def vae_parameters(self) -> List[Tensor]:
        return self.parameters("encoder") + self.parameters("generator")

    def disc_parameters(self) -> List[Tensor]:
        return self.parameters("discriminator")

    def norm_layers(self, network: Optional[str] = None) -> List[NormLayer]:
        networks = [network] if network else ["encoder", "generator", "discriminator"]
        return [m for net in networks for _, m in self._modules(net) if isinstance(m, NormLayer)]

    def parameter_count(self, network: Optional[str] = None) -> int:
        networks = [network] if network else ["encoder", "generator", "discriminator"]
        return sum(p.data.size for net in networks for p in self.parameters(net))

    def zero_grad(self) -> None:
        for net in ("encoder", "generator", "discriminator"):
            for p in self.parameters(net):
                p.grad = None

    def train(self) -> "ModelParams":
        for layer in self.norm_layers():
            layer.state.mode = "train"
        return self

    def eval(self) -> "ModelParams":
        for layer in self.norm_layers():
            layer.state.mode = "eval"
        return self

    # Checkpoint tables
    def named_tensors(self) -> Dict[str, np.ndarray]:
        table = {}
        for net in ("encoder", "generator", "discriminator"):
            for name, module in self._modules(net):
                if isinstance(module, NormLayer):
                    s = module.state
                    table[f"{name}.gamma"] = s.gamma.data
                    table[f"{name}.beta"] = s.beta.data
                    table[f"{name}.running_mean"] = s.running_mean
                    table[f"{name}.running_var"] = s.running_var
                    table[f"{name}.batches_tracked"] = np.array([s.batches_tracked], dtype=np.float32)
                else:
                    table[f"{name}.weight"] = module.weight.data
                    table[f"{name}.bias"] = module.bias.data
        return table

    def load_named_tensors(self, table: Dict[str, np.ndarray]) -> None:
        expected = self.named_tensors()
        missing = sorted(set(expected) - set(table))
        extra = sorted(set(table) - set(expected))
        if missing or extra:
            raise KeyError(f"tensor table mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, shape_ref in expected.items():
            if table[name].shape != shape_ref.shape:
                raise ShapeError(f"{name}: stored shape {table[name].shape} != model shape {shape_ref.shape}")
        for net in ("encoder", "generator", "discriminator"):
            for name, module in self._modules(net):
                if isinstance(module, NormLayer):
                    s = module.state
                    s.gamma.data = np.array(table[f"{name}.gamma"], dtype=s.gamma.data.dtype)
                    s.beta.data = np.array(table[f"{name}.beta"], dtype=s.beta.data.dtype)
                    s.running_mean = np.array(table[f"{name}.running_mean"], dtype=np.float32)
                    s.running_var = np.array(table[f"{name}.running_var"], dtype=np.float32)
                    s.batches_tracked = int(table[f"{name}.batches_tracked"][0])
                else:
                    module.weight.data = np.array(table[f"{name}.weight"], dtype=module.weight.data.dtype)
                    module.bias.data = np.array(table[f"{name}.bias"], dtype=module.bias.data.dtype)

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for name, array in sorted(self.named_tensors().items()):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(array, dtype="<f4").tobytes())
        return digest.hexdigest()


def count_parameters(cfg: ModelConfig) -> Dict[str, int]:
    """Trainable parameter counts straight from the layer recipe (no allocation)."""
    k2 = KERNEL ** 2
    trunk = 0
    c_in = cfg.in_channels
    for h in cfg.hidden_dims:
        trunk += h * c_in * k2 + h + 2 * h
        c_in = h
    flat = cfg.flat_features
    encoder = trunk + 2 * (flat * cfg.latent_dim + cfg.latent_dim)
    rev = cfg.hidden_dims[::-1]
    generator = cfg.latent_dim * flat + flat
    for c_in, c_out in zip(rev, rev[1:] + (rev[-1],)):
        generator += c_in * c_out * k2 + c_out + 2 * c_out
    generator += cfg.in_channels * rev[-1] * k2 + cfg.in_channels
    discriminator = trunk + flat + 1
    return {
        "encoder": encoder,
        "generator": generator,
        "discriminator": discriminator,
        "total": encoder + generator + discriminator,
    }


def _unpack(x):
    if hasattr(x, "layout") and hasattr(x, "data"):
        return x.data, x.layout
    return x, None


def encode(model: ModelParams, x) -> Tuple[Tensor, Tensor]:
    """Return (mu, logvar) for a PatchBatch or NCHW tensor."""
    data, _ = _unpack(x)
    return model.encoder(data)


def reparameterize(mu: Tensor, logvar: Tensor, eps) -> Tensor:
    """z = mu + eps * exp(0.5 * logvar)."""
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    if mu.shape != logvar.shape or mu.shape != eps.shape:
        raise ShapeError(f"reparameterize: mu {mu.shape}, logvar {logvar.shape}, eps {eps.shape}")
    return add(mu, mul(eps, exp(mul(logvar, 0.5))))


def generate(model: ModelParams, z: Tensor) -> Tensor:
    return model.generator(z)


def discriminate(model: ModelParams, x, layout: Optional[GroupLayout] = None) -> Tensor:
    """Per-patch realness in (0, 1)."""
    data, batch_layout = _unpack(x)
    layout = layout or batch_layout
    if layout is not None:
        layout.check(data.shape[0])
    return model.discriminator(data, layout)


def penultimate_features(model: ModelParams, x, layout: Optional[GroupLayout] = None) -> Tensor:
    data, batch_layout = _unpack(x)
    layout = layout or batch_layout
    if layout is not None:
        layout.check(data.shape[0])
    return model.discriminator.features(data, layout)


def build_model(cfg: ModelConfig, norm_cfg: Optional[NormConfig] = None, seed: int = 0) -> ModelParams:
    return ModelParams(cfg, norm_cfg, seed)


