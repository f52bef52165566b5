"""Network assembly: the class-conditional generator and two discriminators
(capsule head and a plain convolutional baseline).

The generator maps [latent noise, class embedding] through a fully
connected layer into a small spatial seed, grows it with fractional
convolutions (conditional batch norm, leaky relu, pixel feature norm after
each), and finishes with a 1x1 conv and sigmoid. The capsule discriminator
stacks a strided spectrally-normalized conv, a 1x1 conv into primary
capsules, a second strided conv whose flattened output doubles as the
feature vector f(x), and routing into c+1 output capsules (slot c = "this
is generated"). Prediction = argmax over capsule lengths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .capsule import (
    CapsuleStack,
    CouplingMatrix,
    capsule_lengths,
    predict_vectors,
    route,
    squash,
)
from .diffcore import SpectralState, Tensor, as_tensor
from .errors import ConfigInvalid, ShapeMismatch, UnknownClass

LEAKY_SLOPE = 0.2
FRAC_KERNEL = 3


def he_scale(fan_in: int) -> float:
    return float(np.sqrt(2.0 / fan_in))


def upsample_plan(target: int, layers: int) -> tuple[tuple[int, ...], int]:
    """Choose per-layer upsampling factors and the seed extent.

    Each fractional layer maps extent e -> (e-1)*up + 3. Doubling layers
    (up=2) come first; the rest run at up=1. The plan with the most
    doubling layers and a seed >= 1 wins. Even targets can only be reached
    with up=1 throughout, since up=2 always lands on an odd extent.
    """
    for k in range(layers, -1, -1):
        numer = target - 2 * (layers - k) - (2**k - 1)
        if numer >= 2**k and numer % 2**k == 0:
            return (2,) * k + (1,) * (layers - k), numer // 2**k
    raise ConfigInvalid(
        f"no {layers}-layer fractional stack reaches extent {target}"
    )


@dataclass
class GeneratorConfig:
    latent_dim: int = 64
    num_classes: int = 2
    class_embed_dim: int = 8
    fractional_layers: int = 5
    base_channels: int = 16
    image_shape: tuple[int, int, int] = (1, 16, 16)

    def validate(self) -> None:
        if min(self.latent_dim, self.num_classes, self.class_embed_dim,
               self.base_channels) < 1 or self.fractional_layers < 1:
            raise ConfigInvalid(f"non-positive generator dimension in {self}")
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ConfigInvalid(f"bad image_shape {self.image_shape}")


@dataclass
class Generator:
    cfg: GeneratorConfig
    params: dict[str, Tensor]
    plan: tuple[int, ...]
    seed_hw: tuple[int, int]

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def forward(self, z, labels) -> Tensor:
        cfg = self.cfg
        z = as_tensor(z)
        labels = np.asarray(labels, dtype=np.int64)
        if z.ndim != 2 or z.shape[1] != cfg.latent_dim:
            raise ShapeMismatch(
                f"latent batch must be [n x {cfg.latent_dim}], got {z.shape}"
            )
        if labels.shape != (z.shape[0],):
            raise ShapeMismatch(f"labels shape {labels.shape} != batch {z.shape[0]}")
        if labels.size and (labels.min() < 0 or labels.max() >= cfg.num_classes):
            raise UnknownClass(
                f"labels must lie in [0, {cfg.num_classes}), got {sorted(set(labels.tolist()))}"
            )

        e = dc.embedding(self.params["embed"], labels)
        h = dc.concat([z, e], axis=1)
        h = dc.matmul(h, self.params["fc.w"]) + self.params["fc.b"]
        sh, sw = self.seed_hw
        h = dc.reshape(h, (z.shape[0], cfg.base_channels, sh, sw))
        for i, up in enumerate(self.plan):
            h = dc.frac_conv2d(h, self.params[f"frac{i}.k"], up=up)
            h = dc.cond_batchnorm(
                h, labels, self.params[f"cbn{i}.gamma"], self.params[f"cbn{i}.beta"]
            )
            h = dc.leaky_relu(h, LEAKY_SLOPE)
            h = dc.pixel_feature_norm(h)
        h = dc.conv2d(h, self.params["out.k"], stride=1) + self.params["out.b"]
        return dc.sigmoid(h)


def build_generator(cfg: GeneratorConfig, seed: int) -> Generator:
    cfg.validate()
    channels, height, width = cfg.image_shape
    plan_h, seed_h = upsample_plan(height, cfg.fractional_layers)
    plan_w, seed_w = upsample_plan(width, cfg.fractional_layers)
    if plan_h != plan_w:
        raise ConfigInvalid(
            f"image extents {height}x{width} need incompatible upsampling plans"
        )
    rng = np.random.default_rng(seed)
    p: dict[str, Tensor] = {}
    p["embed"] = dc.parameter(
        rng.standard_normal((cfg.num_classes, cfg.class_embed_dim)), "embed"
    )
    fc_in = cfg.latent_dim + cfg.class_embed_dim
    fc_out = cfg.base_channels * seed_h * seed_w
    p["fc.w"] = dc.parameter(
        rng.standard_normal((fc_in, fc_out)) * he_scale(fc_in), "fc.w"
    )
    p["fc.b"] = dc.parameter(np.zeros(fc_out), "fc.b")
    for i in range(cfg.fractional_layers):
        fan_in = cfg.base_channels * FRAC_KERNEL * FRAC_KERNEL
        p[f"frac{i}.k"] = dc.parameter(
            rng.standard_normal(
                (cfg.base_channels, cfg.base_channels, FRAC_KERNEL, FRAC_KERNEL)
            ) * he_scale(fan_in),
            f"frac{i}.k",
        )
        p[f"cbn{i}.gamma"] = dc.parameter(
            np.ones((cfg.num_classes, cfg.base_channels)), f"cbn{i}.gamma"
        )
        p[f"cbn{i}.beta"] = dc.parameter(
            np.zeros((cfg.num_classes, cfg.base_channels)), f"cbn{i}.beta"
        )
    p["out.k"] = dc.parameter(
        rng.standard_normal((channels, cfg.base_channels, 1, 1))
        * he_scale(cfg.base_channels),
        "out.k",
    )
    p["out.b"] = dc.parameter(np.zeros((channels, 1, 1)), "out.b")
    return Generator(cfg=cfg, params=p, plan=plan_h, seed_hw=(seed_h, seed_w))


def generator_forward(G: Generator, z, labels) -> Tensor:
    return G.forward(z, labels)


@dataclass
class DiscriminatorConfig:
    num_classes: int = 2
    primary_caps: int = 32
    primary_pose: tuple[int, int] = (4, 4)
    out_dim: int = 16
    conv_kernel: int = 5
    conv_stride: int = 2
    conv_channels: int = 32
    feature_channels: int = 64
    routing_iters: int = 3
    image_shape: tuple[int, int, int] = (1, 16, 16)

    @property
    def out_caps(self) -> int:
        return self.num_classes + 1

    @property
    def pose_dim(self) -> int:
        return self.primary_pose[0] * self.primary_pose[1]

    def conv_extents(self) -> tuple[int, int, int, int]:
        """Spatial extents after each strided conv."""
        _, height, width = self.image_shape

        def shrink(e: int) -> int:
            out = (e - self.conv_kernel) // self.conv_stride + 1
            if out < 1:
                raise ConfigInvalid(
                    f"{self.conv_kernel}x{self.conv_kernel}/{self.conv_stride} conv "
                    f"does not fit extent {e}"
                )
            return out

        h1, w1 = shrink(height), shrink(width)
        return h1, w1, shrink(h1), shrink(w1)

    def validate(self) -> None:
        if min(self.num_classes, self.primary_caps, self.conv_channels,
               self.feature_channels, self.routing_iters) < 1:
            raise ConfigInvalid(f"non-positive discriminator dimension in {self}")
        if self.out_dim != 16:
            raise ConfigInvalid(f"output capsules are 16-dimensional, got {self.out_dim}")
        if self.pose_dim < 1:
            raise ConfigInvalid(f"bad primary pose {self.primary_pose}")
        h1, w1, h2, w2 = self.conv_extents()
        if (self.feature_channels * h2 * w2) % self.out_dim:
            raise ConfigInvalid(
                f"feature width {self.feature_channels}x{h2}x{w2} does not split "
                f"into {self.out_dim}-dim capsules"
            )


@dataclass
class DiscriminatorOutput:
    """Per-batch capsule head readout.

    h: [n x (c+1) x out_dim] capsule vectors; lengths: their norms, each in
    [0, 1); features: flat f(x) rows used for feature matching and latent
    statistics; coupling: the routing weights that produced h (None for the
    conv baseline).
    """

    h: Tensor
    lengths: Tensor
    features: Tensor
    coupling: CouplingMatrix | None = None

    def predictions(self) -> np.ndarray:
        """argmax over capsule lengths; index c means "generated"."""
        return np.argmax(self.lengths.data, axis=-1)


@dataclass
class CapsuleDiscriminator:
    cfg: DiscriminatorConfig
    params: dict[str, Tensor]
    spectral: dict[str, SpectralState]

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def forward(self, x, update_spectral: bool = False, coupling=None) -> DiscriminatorOutput:
        cfg = self.cfg
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1:] != cfg.image_shape:
            raise ShapeMismatch(
                f"expected image batch [n x {cfg.image_shape}], got {x.shape}"
            )
        n = x.shape[0]
        h1, w1, h2, w2 = cfg.conv_extents()

        def sn(name: str) -> Tensor:
            return dc.spectral_normalize(
                self.params[name], self.spectral[name], update=update_spectral
            )

        h = dc.conv2d(x, sn("conv1.k"), stride=cfg.conv_stride) + self.params["conv1.b"]
        h = dc.leaky_relu(h, LEAKY_SLOPE)

        pose = cfg.pose_dim
        p = dc.conv2d(h, sn("primary.k"), stride=1) + self.params["primary.b"]
        p = dc.reshape(p, (n, cfg.primary_caps, pose, h1, w1))
        p = dc.transpose(p, (0, 1, 3, 4, 2))
        p = squash(p, axis=-1)
        p = dc.transpose(p, (0, 1, 4, 2, 3))
        p = dc.reshape(p, (n, cfg.primary_caps * pose, h1, w1))

        f = dc.conv2d(p, sn("conv2.k"), stride=cfg.conv_stride) + self.params["conv2.b"]
        flat = dc.reshape(f, (n, cfg.feature_channels * h2 * w2))

        # Unit-length input capsules. The spectrally normalized conv stack
        # shrinks activations hard at small widths; squashing near-zero
        # vectors here would leave the routing head (and the pull-away /
        # feature-matching terms that consume these features) with vanishing
        # gradients, so the capsules are L2-normalized instead.
        in_caps = flat.shape[1] // cfg.out_dim
        caps = dc.reshape(flat, (n, in_caps, cfg.out_dim))
        inv = dc.power(dc.sum(caps * caps, axis=-1, keepdims=True) + 1e-12, -0.5)
        caps_in = caps * inv
        features = dc.reshape(caps_in, (n, in_caps * cfg.out_dim))
        stack = CapsuleStack(W=self.params["caps.W"], routing_iters=cfg.routing_iters)
        u_hat = predict_vectors(caps_in, stack)
        v, coup = route(u_hat, cfg.routing_iters, coupling=coupling)
        return DiscriminatorOutput(
            h=v, lengths=capsule_lengths(v), features=features, coupling=coup
        )


def build_discriminator(cfg: DiscriminatorConfig, seed: int) -> CapsuleDiscriminator:
    cfg.validate()
    channels = cfg.image_shape[0]
    h1, w1, h2, w2 = cfg.conv_extents()
    rng = np.random.default_rng(seed)
    k = cfg.conv_kernel
    pose = cfg.pose_dim
    prim_ch = cfg.primary_caps * pose
    p: dict[str, Tensor] = {}

    def conv_weight(name: str, out_ch: int, in_ch: int, kern: int) -> None:
        fan_in = in_ch * kern * kern
        p[name] = dc.parameter(
            rng.standard_normal((out_ch, in_ch, kern, kern)) * he_scale(fan_in), name
        )

    conv_weight("conv1.k", cfg.conv_channels, channels, k)
    p["conv1.b"] = dc.parameter(np.zeros((cfg.conv_channels, 1, 1)), "conv1.b")
    conv_weight("primary.k", prim_ch, cfg.conv_channels, 1)
    p["primary.b"] = dc.parameter(np.zeros((prim_ch, 1, 1)), "primary.b")
    conv_weight("conv2.k", cfg.feature_channels, prim_ch, k)
    p["conv2.b"] = dc.parameter(np.zeros((cfg.feature_channels, 1, 1)), "conv2.b")

    in_caps = (cfg.feature_channels * h2 * w2) // cfg.out_dim
    p["caps.W"] = dc.parameter(
        rng.standard_normal((in_caps, cfg.out_caps, cfg.out_dim, cfg.out_dim))
        * he_scale(cfg.out_dim),
        "caps.W",
    )

    spectral = {
        name: SpectralState.for_matrix(p[name].shape[0], rng)
        for name in ("conv1.k", "primary.k", "conv2.k")
    }
    for name, state in spectral.items():
        dc.converge_spectral(state, p[name])
    return CapsuleDiscriminator(cfg=cfg, params=p, spectral=spectral)


def discriminator_forward(D, x, update_spectral: bool = False, coupling=None) -> DiscriminatorOutput:
    if isinstance(D, ConvDiscriminator):
        return D.forward(x, update_spectral=update_spectral)
    return D.forward(x, update_spectral=update_spectral, coupling=coupling)


@dataclass
class ConvDiscriminator:
    """Baseline head: same conv trunk, dense layer + sigmoid instead of
    capsules. Sigmoid outputs stand in for capsule lengths so the margin
    machinery applies unchanged."""

    cfg: DiscriminatorConfig
    params: dict[str, Tensor]
    spectral: dict[str, SpectralState]

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def forward(self, x, update_spectral: bool = False) -> DiscriminatorOutput:
        cfg = self.cfg
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1:] != cfg.image_shape:
            raise ShapeMismatch(
                f"expected image batch [n x {cfg.image_shape}], got {x.shape}"
            )
        n = x.shape[0]
        h2, w2 = cfg.conv_extents()[2:]

        def sn(name: str) -> Tensor:
            return dc.spectral_normalize(
                self.params[name], self.spectral[name], update=update_spectral
            )

        h = dc.conv2d(x, sn("conv1.k"), stride=cfg.conv_stride) + self.params["conv1.b"]
        h = dc.leaky_relu(h, LEAKY_SLOPE)
        h = dc.conv2d(h, sn("conv2.k"), stride=cfg.conv_stride) + self.params["conv2.b"]
        h = dc.leaky_relu(h, LEAKY_SLOPE)
        features = dc.reshape(h, (n, cfg.feature_channels * h2 * w2))
        logits = dc.matmul(features, self.params["head.w"]) + self.params["head.b"]
        lengths = dc.sigmoid(logits)
        return DiscriminatorOutput(
            h=dc.reshape(lengths, (n, cfg.out_caps, 1)),
            lengths=lengths,
            features=features,
            coupling=None,
        )


def build_conv_discriminator(cfg: DiscriminatorConfig, seed: int) -> ConvDiscriminator:
    cfg.validate()
    channels = cfg.image_shape[0]
    h2, w2 = cfg.conv_extents()[2:]
    rng = np.random.default_rng(seed)
    k = cfg.conv_kernel
    p: dict[str, Tensor] = {}
    for name, out_ch, in_ch in (
        ("conv1.k", cfg.conv_channels, channels),
        ("conv2.k", cfg.feature_channels, cfg.conv_channels),
    ):
        fan_in = in_ch * k * k
        p[name] = dc.parameter(
            rng.standard_normal((out_ch, in_ch, k, k)) * he_scale(fan_in), name
        )
        p[name.replace(".k", ".b")] = dc.parameter(np.zeros((out_ch, 1, 1)))
    width = cfg.feature_channels * h2 * w2
    p["head.w"] = dc.parameter(
        rng.standard_normal((width, cfg.out_caps)) * he_scale(width), "head.w"
    )
    p["head.b"] = dc.parameter(np.zeros(cfg.out_caps), "head.b")
    spectral = {
        name: SpectralState.for_matrix(p[name].shape[0], rng)
        for name in ("conv1.k", "conv2.k")
    }
    for name, state in spectral.items():
        dc.converge_spectral(state, p[name])
    return ConvDiscriminator(cfg=cfg, params=p, spectral=spectral)
