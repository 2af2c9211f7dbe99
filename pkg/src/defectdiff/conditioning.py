"""Mask and prompt conditioning for the layout-guided denoiser.

The mask travels into the model along two routes: as layout tokens (one-hot
expansion -> conv stem -> small conv backbone -> flattened token grid) consumed
by the gated attention sublayers, and as a strided-conv downsampled map
concatenated onto the noisy latent at the first U-Net convolution.  Category
prompts come from a frozen embedding table; only a dedicated null-prompt
vector (the unconditional branch of classifier-free guidance) is trainable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .util import substream

PROMPT_TEMPLATE = "a photo of {} defect on steel surface"


@dataclass(frozen=True)
class ConditioningConfig:
    categories: tuple = ("inclusion", "patches", "scratches")
    num_classes: int = 4  # categories + background channel
    token_dim: int = 64
    grid_factor: int = 8  # mask tokens form an (H/g)^2 grid
    n_prompt_tokens: int = 4
    latent_spatial_factor: int = 8
    mask_channels: int = 4  # downsampled map channels fed to the first conv

    def __post_init__(self):
        if self.num_classes < len(self.categories) + 1:
            raise ValueError(
                f"num_classes={self.num_classes} cannot hold "
                f"{len(self.categories)} categories plus background"
            )
        for name, value in (("grid_factor", self.grid_factor),
                            ("latent_spatial_factor", self.latent_spatial_factor)):
            if value < 2 or value & (value - 1):
                raise ValueError(f"{name} must be a power of two >= 2, got {value}")

    def category_index(self, category: str) -> int:
        try:
            return self.categories.index(category)
        except ValueError:
            raise ValueError(
                f"unknown category {category!r}; expected one of {list(self.categories)}"
            ) from None

    def prompt_text(self, category: str) -> str:
        self.category_index(category)
        return PROMPT_TEMPLATE.format(category)


def expand_channels(mask: np.ndarray, category_index: int, num_classes: int) -> np.ndarray:
    """One-hot semantic map: channel 0 is background, channel index+1 the mask."""
    if category_index + 1 >= num_classes:
        raise ValueError(
            f"category index {category_index} needs channel {category_index + 1} "
            f"but only {num_classes} channels are configured"
        )
    if not np.all(np.isin(np.unique(mask), (0.0, 1.0))):
        raise ValueError("mask must be binary")
    out = np.zeros((num_classes,) + mask.shape, dtype=np.float32)
    out[0] = 1.0 - mask
    out[category_index + 1] = mask
    return out


class MaskEncoder(nn.Module):
    """One-hot mask -> (H/grid_factor)^2 layout tokens of dim token_dim.

    Stand-in for a pretrained backbone: a 3x3 conv stem followed by strided
    conv stages down to the token grid, then a 1x1 head and reshape/permute.
    """

    def __init__(self, config: ConditioningConfig):
        super().__init__()
        self.grid_factor = config.grid_factor
        n_strided = int(math.log2(config.grid_factor))
        widths = [min(32 * (2**i), config.token_dim) for i in range(n_strided)]
        layers = [nn.Conv2d(config.num_classes, widths[0], 3, padding=1), nn.SiLU()]
        ch = widths[0]
        for w in widths:
            layers += [nn.Conv2d(ch, w, 4, stride=2, padding=1), nn.SiLU()]
            ch = w
        # final unstrided stage keeps the stage count at log2(grid_factor) + 1
        layers += [nn.Conv2d(ch, ch, 3, padding=1), nn.SiLU()]
        self.backbone = nn.Sequential(*layers)
        self.head = nn.Conv2d(ch, config.token_dim, 1)

    def forward(self, one_hot: torch.Tensor) -> torch.Tensor:
        h, w = one_hot.shape[-2:]
        if h % self.grid_factor or w % self.grid_factor:
            raise ValueError(f"mask size {(h, w)} not divisible by {self.grid_factor}")
        feats = self.head(self.backbone(one_hot))
        return feats.flatten(2).transpose(1, 2)  # (B, N_tok, d)


class MaskDownsampler(nn.Module):
    """One-hot mask -> low-res map matching the latent spatial grid."""

    def __init__(self, config: ConditioningConfig):
        super().__init__()
        self.factor = config.latent_spatial_factor
        n = int(math.log2(self.factor))
        layers = []
        ch = config.num_classes
        for i in range(n):
            out = config.mask_channels if i == n - 1 else 16
            layers += [nn.Conv2d(ch, out, 4, stride=2, padding=1)]
            if i < n - 1:
                layers += [nn.SiLU()]
            ch = out
        self.net = nn.Sequential(*layers)

    def forward(self, one_hot: torch.Tensor) -> torch.Tensor:
        h, w = one_hot.shape[-2:]
        if h % self.factor or w % self.factor:
            raise ValueError(f"mask size {(h, w)} not divisible by {self.factor}")
        return self.net(one_hot)


class Conditioner(nn.Module):
    """Bundles the mask encoder, downsampler, and prompt table."""

    def __init__(self, config: ConditioningConfig, seed: int = 0):
        super().__init__()
        torch.manual_seed(substream(seed, "conditioner-init"))
        self.config = config
        self.mask_encoder = MaskEncoder(config)
        self.downsampler = MaskDownsampler(config)
        table = 0.2 * torch.randn(
            len(config.categories), config.n_prompt_tokens, config.token_dim
        )
        self.register_buffer("prompt_table", table)  # frozen text embedder
        self.null_prompt = nn.Parameter(
            0.2 * torch.randn(config.n_prompt_tokens, config.token_dim)
        )

    def one_hot(self, masks: torch.Tensor, categories: list[str]) -> torch.Tensor:
        """(B, H, W) binary masks -> (B, num_classes, H, W) one-hot maps."""
        indices = [self.config.category_index(c) for c in categories]
        b, h, w = masks.shape
        out = torch.zeros(b, self.config.num_classes, h, w, dtype=masks.dtype)
        out[:, 0] = 1.0 - masks
        for i, ci in enumerate(indices):
            out[i, ci + 1] = masks[i]
        return out

    def prompt_tokens(self, categories: list[str]) -> torch.Tensor:
        indices = [self.config.category_index(c) for c in categories]
        return self.prompt_table[indices]

    def null_tokens(self, batch: int) -> torch.Tensor:
        return self.null_prompt[None].expand(batch, -1, -1)


@dataclass(frozen=True)
class PromptTokens:
    tokens: np.ndarray  # (N_txt, d)
    prompt_id: str


def _mask_to_one_hot(conditioner: Conditioner, mask: np.ndarray, category: str):
    index = conditioner.config.category_index(category)
    one_hot = expand_channels(mask, index, conditioner.config.num_classes)
    return torch.from_numpy(one_hot)[None]


def encode_mask(conditioner: Conditioner, mask: np.ndarray, category: str) -> np.ndarray:
    """Layout tokens for one mask: ((H/grid_factor)^2, token_dim)."""
    with torch.no_grad():
        return conditioner.mask_encoder(_mask_to_one_hot(conditioner, mask, category))[0].numpy()


def encode_prompt(conditioner: Conditioner, category: str) -> PromptTokens:
    """Frozen prompt tokens for a category; unknown categories are an error."""
    with torch.no_grad():
        tokens = conditioner.prompt_tokens([category])[0].numpy().copy()
    return PromptTokens(tokens=tokens, prompt_id=category)


def downsample_mask(conditioner: Conditioner, mask: np.ndarray, category: str) -> np.ndarray:
    """Low-res conditioning map aligned with the latent grid."""
    with torch.no_grad():
        return conditioner.downsampler(_mask_to_one_hot(conditioner, mask, category))[0].numpy()
