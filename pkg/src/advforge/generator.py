"""Target-conditioned adversarial generator.

A UNet takes a clean image and a target feature vector. The feature vector
passes through a shared Linear-GELU-Linear transform, then per residual
block a Linear-GELU projection matches it to the block's channel width and
adds it to the block's activations (broadcast over spatial positions). The
decoder output is mapped smoothly onto [0, 1] and finally clipped into the
L-inf budget around the source image.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ContractError


@dataclass
class GeneratorConfig:
    feature_dim: int
    base_width: int = 64
    depth: int = 3
    injection_dim: int = 256
    epsilon: float = 16 / 255  # unit-interval units
    bounded_output: bool = True
    image_channels: int = 3

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ContractError("epsilon must be positive")
        if self.injection_dim <= 0 or self.feature_dim <= 0:
            raise ContractError("feature_dim and injection_dim must be positive")
        if self.depth < 1:
            raise ContractError("depth must be >= 1")

    def descriptor(self) -> dict:
        """Self-describing architecture record stored in checkpoint manifests."""
        return {
            "family": "unet-resblock-injection",
            "feature_dim": self.feature_dim,
            "base_width": self.base_width,
            "depth": self.depth,
            "injection_dim": self.injection_dim,
            "epsilon": self.epsilon,
            "bounded_output": self.bounded_output,
            "image_channels": self.image_channels,
            "attention": False,
        }

    @classmethod
    def from_descriptor(cls, d: dict):
        keys = ("feature_dim", "base_width", "depth", "injection_dim",
                "epsilon", "bounded_output", "image_channels")
        return cls(**{k: d[k] for k in keys})


class FeatureTransform(nn.Module):
    """Shared target-feature enhancer: affine -> GELU -> affine."""

    def __init__(self, feature_dim, injection_dim, activation=nn.GELU):
        super().__init__()
        self.fc1 = nn.Linear(feature_dim, injection_dim)
        self.act = activation()
        self.fc2 = nn.Linear(injection_dim, injection_dim)

    def forward(self, f):
        if f.ndim != 2 or f.shape[1] != self.fc1.in_features:
            raise ContractError(
                f"expected [B, {self.fc1.in_features}] feature batch, got {tuple(f.shape)}"
            )
        return self.fc2(self.act(self.fc1(f)))


class DimensionMatch(nn.Module):
    """Per-block projection of the shared embedding: affine -> GELU."""

    def __init__(self, injection_dim, channels, activation=nn.GELU):
        super().__init__()
        self.fc = nn.Linear(injection_dim, channels)
        self.act = activation()

    def forward(self, e):
        return self.act(self.fc(e))


class InjectedResBlock(nn.Module):
    """Residual block with an additive feature injection after its first conv."""

    def __init__(self, in_ch, out_ch, injection_dim, activation=nn.GELU, groups=8):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm1 = nn.GroupNorm(min(groups, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(min(groups, out_ch), out_ch)
        self.act = nn.SiLU()
        self.dmm = DimensionMatch(injection_dim, out_ch, activation=activation)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, e):
        h = self.conv1(x)
        h = h + self.dmm(e)[:, :, None, None]
        h = self.act(self.norm1(h))
        h = self.norm2(self.conv2(h))
        return self.act(h + self.skip(x))


class TargetConditionedUnet(nn.Module):
    """UNet whose every residual block receives the transformed target feature.

    `blocks` lists the injected residual blocks in forward order (encoder,
    bottleneck, decoder); each owns exactly one DimensionMatch projection
    while the FeatureTransform is shared.
    """

    def __init__(self, config: GeneratorConfig, activation=nn.GELU):
        super().__init__()
        self.config = config
        c = config.base_width
        widths = [c * (2 ** i) for i in range(config.depth)]

        self.ftm = FeatureTransform(config.feature_dim, config.injection_dim, activation)
        self.stem = nn.Conv2d(config.image_channels, widths[0], 3, padding=1)

        enc, downs = [], []
        in_ch = widths[0]
        for w in widths:
            enc.append(InjectedResBlock(in_ch, w, config.injection_dim, activation))
            downs.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
            in_ch = w
        self.encoder = nn.ModuleList(enc)
        self.downs = nn.ModuleList(downs)

        self.bottleneck = InjectedResBlock(widths[-1], widths[-1], config.injection_dim, activation)

        dec, ups = [], []
        in_ch = widths[-1]
        for w in reversed(widths):
            ups.append(nn.ConvTranspose2d(in_ch, w, 2, stride=2))
            dec.append(InjectedResBlock(w + w, w, config.injection_dim, activation))
            in_ch = w
        self.ups = nn.ModuleList(ups)
        self.decoder = nn.ModuleList(dec)

        self.head = nn.Conv2d(widths[0], config.image_channels, 3, padding=1)

    @property
    def blocks(self):
        return list(self.encoder) + [self.bottleneck] + list(self.decoder)

    def transform_features(self, f_t):
        """FTM output for a [B, feature_dim] batch of target features."""
        return self.ftm(f_t)

    def project_injection(self, block_index, e):
        """DMM output of one block: a [B, block_width] vector."""
        blocks = self.blocks
        if not 0 <= block_index < len(blocks):
            raise ContractError(f"block_index {block_index} out of range [0, {len(blocks)})")
        return blocks[block_index].dmm(e)

    def forward(self, x_s, f_t):
        """Raw generated image in [0, 1], same shape as x_s."""
        if x_s.ndim != 4 or x_s.shape[1] != self.config.image_channels:
            raise ContractError(f"expected [B, {self.config.image_channels}, H, W], got {tuple(x_s.shape)}")
        if f_t.ndim != 2 or f_t.shape[0] != x_s.shape[0]:
            raise ContractError(
                f"feature batch {tuple(f_t.shape)} inconsistent with image batch {tuple(x_s.shape)}"
            )
        side = 2 ** self.config.depth
        if x_s.shape[0] and (x_s.shape[2] % side or x_s.shape[3] % side):
            raise ContractError(f"spatial size must be a multiple of {side} for depth {self.config.depth}")
        if x_s.shape[0] == 0:
            return x_s.clone()

        e = self.ftm(f_t)
        h = self.stem(x_s)
        skips = []
        for block, down in zip(self.encoder, self.downs):
            h = block(h, e)
            skips.append(h)
            h = down(h)
        h = self.bottleneck(h, e)
        for up, block, skip in zip(self.ups, self.decoder, reversed(skips)):
            h = up(h)
            h = block(torch.cat([h, skip], dim=1), e)
        out = self.head(h)
        if self.config.bounded_output:
            out = 0.5 * (torch.tanh(out) + 1.0)
        return out

    def craft(self, x_s, f_t):
        """Generate and clip: the single-forward-pass attack."""
        return clip_to_budget(self(x_s, f_t), x_s, self.config.epsilon)


def clip_to_budget(raw, x_s, eps) -> torch.Tensor:
    """min(x_s + eps, max(raw, x_s - eps)), then clamped to valid pixels.

    The final [0, 1] clamp keeps outputs valid images when x_s +/- eps
    leaves the pixel range; the result always satisfies
    ||out - x_s||_inf <= eps whenever x_s itself lies in [0, 1].
    """
    if raw.shape != x_s.shape:
        raise ContractError(f"raw {tuple(raw.shape)} and source {tuple(x_s.shape)} shapes differ")
    if eps <= 0:
        raise ContractError("eps must be positive")
    clipped = torch.minimum(x_s + eps, torch.maximum(raw, x_s - eps))
    return clipped.clamp(0.0, 1.0)


def build_generator(config: GeneratorConfig, seed: int = 0, activation=nn.GELU) -> TargetConditionedUnet:
    """Seeded construction so identical configs yield identical initial weights."""
    torch.manual_seed(seed)
    return TargetConditionedUnet(config, activation=activation)
