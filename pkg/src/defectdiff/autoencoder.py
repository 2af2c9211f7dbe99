"""Convolutional autoencoder providing the latent space for diffusion.

Trained from scratch on the target pairs with a plain MSE objective, then
frozen: the diffusion model never updates these weights.  The encoder trunk
doubles as the desk-scale feature embedder for Frechet-distance scoring.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .datasets import PairSet
from .util import config_hash, substream


@dataclass(frozen=True)
class AutoencoderConfig:
    in_channels: int = 1
    base_channels: int = 16
    latent_channels: int = 4
    spatial_factor: int = 8  # power of two; H/f x W/f latent grid

    def __post_init__(self):
        f = self.spatial_factor
        if f < 2 or f & (f - 1):
            raise ValueError(f"spatial_factor must be a power of two >= 2, got {f}")


@dataclass(frozen=True)
class AutoencoderTrainConfig:
    steps: int = 2000
    lr: float = 2e-3
    batch_size: int = 4
    seed: int = 0


class ConvAutoencoder(nn.Module):
    """Strided conv encoder and mirrored upsampling decoder with tanh output."""

    def __init__(self, config: AutoencoderConfig, seed: int = 0):
        super().__init__()
        torch.manual_seed(substream(seed, "autoencoder-init"))
        self.config = config
        n_down = int(math.log2(config.spatial_factor))
        base = config.base_channels
        widths = [min(base * (2**i), base * 2) for i in range(n_down)]

        enc = [nn.Conv2d(config.in_channels, widths[0], 3, padding=1), nn.SiLU()]
        ch = widths[0]
        for w in widths:
            enc += [nn.Conv2d(ch, w, 4, stride=2, padding=1), nn.SiLU()]
            ch = w
        self.encoder_trunk = nn.Sequential(*enc)
        self.to_latent = nn.Conv2d(ch, config.latent_channels, 3, padding=1)
        self.feature_channels = ch

        dec = [nn.Conv2d(config.latent_channels, ch, 3, padding=1), nn.SiLU()]
        for w in reversed(widths):
            dec += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(ch, w, 3, padding=1),
                nn.SiLU(),
            ]
            ch = w
        dec += [nn.Conv2d(ch, config.in_channels, 3, padding=1), nn.Tanh()]
        self.decoder = nn.Sequential(*dec)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.to_latent(self.encoder_trunk(x))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Penultimate feature map, used by the FID embedder."""
        return self.encoder_trunk(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))


@dataclass
class AutoencoderParams:
    """Trained weights plus the training metadata recorded for provenance."""

    model: ConvAutoencoder
    config: AutoencoderConfig
    metadata: dict = field(default_factory=dict)

    @property
    def spatial_factor(self) -> int:
        return self.config.spatial_factor


def _check_image(params: AutoencoderParams, image: np.ndarray):
    if image.ndim != 3 or image.shape[0] != params.config.in_channels:
        raise ValueError(
            f"expected ({params.config.in_channels}, H, W) image, got {image.shape}"
        )
    f = params.config.spatial_factor
    if image.shape[1] % f or image.shape[2] % f:
        raise ValueError(f"image size {image.shape[1:]} not divisible by factor {f}")


def encode(params: AutoencoderParams, image: np.ndarray) -> np.ndarray:
    """Map one (C, H, W) image to its (c_z, H/f, W/f) latent code."""
    _check_image(params, image)
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
        return params.model.encode(x)[0].numpy()


def decode(params: AutoencoderParams, z: np.ndarray) -> np.ndarray:
    """Map one latent code back to a (C, H, W) image in [-1, 1]."""
    if z.ndim != 3 or z.shape[0] != params.config.latent_channels:
        raise ValueError(
            f"expected ({params.config.latent_channels}, h, w) latent, got {z.shape}"
        )
    with torch.no_grad():
        zt = torch.from_numpy(np.ascontiguousarray(z, dtype=np.float32))[None]
        return params.model.decode(zt)[0].numpy()


def reconstruction_loss(model: ConvAutoencoder, images: torch.Tensor) -> torch.Tensor:
    return nn.functional.mse_loss(model(images), images)


def train_autoencoder(
    pairs: PairSet,
    config: AutoencoderConfig | None = None,
    train: AutoencoderTrainConfig | None = None,
) -> AutoencoderParams:
    """Fit the autoencoder by MSE reconstruction; deterministic given the seed."""
    if len(pairs) == 0:
        raise ValueError("cannot train on an empty pair set")
    config = config or AutoencoderConfig()
    train = train or AutoencoderTrainConfig()
    model = ConvAutoencoder(config, seed=train.seed)
    images = torch.from_numpy(pairs.images().astype(np.float32))
    _check_image(AutoencoderParams(model, config), pairs[0].image)

    rng = np.random.default_rng(substream(train.seed, "autoencoder-batches"))
    optimizer = torch.optim.Adam(model.parameters(), lr=train.lr)
    initial_loss = final_loss = None
    for step in range(train.steps):
        idx = rng.integers(0, len(pairs), size=min(train.batch_size, len(pairs)))
        batch = images[torch.from_numpy(idx)]
        loss = reconstruction_loss(model, batch)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if initial_loss is None:
            initial_loss = float(loss.detach())
        final_loss = float(loss.detach())

    model.eval()
    for p in model.parameters():  # frozen from here on
        p.requires_grad_(False)
    metadata = {
        "steps": train.steps,
        "seed": train.seed,
        "initial_loss": initial_loss,
        "final_loss": final_loss,
        "config_hash": config_hash({**asdict(config), **asdict(train)}),
    }
    return AutoencoderParams(model=model, config=config, metadata=metadata)


class EncoderFeatureExtractor:
    """Frozen encoder trunk + global average pooling, for FID embeddings."""

    def __init__(self, params: AutoencoderParams):
        self._model = params.model
        h = params.metadata.get("config_hash", "untrained")
        self.extractor_id = f"ae-gap{params.model.feature_channels}-{h}"

    def __call__(self, images: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
        if x.ndim != 4:
            raise ValueError(f"expected (N, C, H, W) images, got {tuple(x.shape)}")
        with torch.no_grad():
            feats = self._model.features(x).mean(dim=(2, 3))
        return feats.numpy().astype(np.float64)
