"""Layout-conditioned latent diffusion: schedule, denoiser, training, sampling.

The denoiser is a small U-Net over latent codes.  Each attention block runs
three residual sublayers in order: self-attention over the image tokens, a
gated self-attention over the concatenation of image and layout tokens whose
output is scaled by tanh(gate) and truncated back to the image tokens, and
cross-attention against the prompt tokens.  Every gate starts at zero, so an
untrained gated sublayer is an exact no-op.

Training draws a uniform timestep and Gaussian noise per sample and regresses
the predicted noise onto the drawn noise (mean squared error); the prompt is
replaced by the learned null embedding with a fixed dropout probability so
classifier-free guidance has an unconditional branch.  The mask condition is
never dropped: both guidance branches see the layout tokens and the
downsampled mask concatenated onto the noisy latent.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import autoencoder as ae_mod
from .autoencoder import AutoencoderConfig, AutoencoderParams
from .conditioning import Conditioner, ConditioningConfig
from .datasets import CATEGORIES, PairSet
from .util import config_hash, substream


# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep corruption rates and their cumulative signal products."""

    timesteps: int
    betas: np.ndarray  # (T,), betas[i] applies at t = i + 1
    alpha_bars: np.ndarray  # (T,), strictly decreasing

    def __post_init__(self):
        if self.betas.shape != (self.timesteps,):
            raise ValueError("betas shape disagrees with timesteps")
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise ValueError("alpha_bars must be strictly decreasing")

    def alpha_bar(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.timesteps):
            raise ValueError(f"timestep {t} outside [1, {self.timesteps}]")
        return self.alpha_bars[t - 1]


def make_schedule(timesteps: int, kind: str = "linear") -> NoiseSchedule:
    """Linear (1e-4 to 0.02) or squared-cosine beta schedule."""
    if timesteps < 1:
        raise ValueError(f"timesteps must be >= 1, got {timesteps}")
    if kind == "linear":
        betas = np.linspace(1e-4, 2e-2, timesteps, dtype=np.float64)
    elif kind == "cosine":
        steps = np.arange(timesteps + 1, dtype=np.float64) / timesteps
        abar = np.cos((steps + 0.008) / 1.008 * np.pi / 2.0) ** 2
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(timesteps=timesteps, betas=betas, alpha_bars=alpha_bars)


def q_sample(schedule: NoiseSchedule, z0, t, eps):
    """Closed-form corruption: sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    scalar_t = np.isscalar(t) or (hasattr(t, "ndim") and getattr(t, "ndim") == 0)
    t_np = np.atleast_1d(np.asarray(t, dtype=np.int64))
    abar = schedule.alpha_bar(t_np).astype(np.float64)
    if torch.is_tensor(z0):
        if eps.shape != z0.shape:
            raise ValueError("eps must match z0 shape")
        a = torch.from_numpy(abar).to(z0.dtype)
        a = a[0] if scalar_t else a.reshape(-1, *([1] * (z0.ndim - 1)))
        return torch.sqrt(a) * z0 + torch.sqrt(1.0 - a) * eps
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if eps.shape != z0.shape:
        raise ValueError("eps must match z0 shape")
    a = abar[0] if scalar_t else abar.reshape(-1, *([1] * (z0.ndim - 1)))
    return np.sqrt(a) * z0 + np.sqrt(1.0 - a) * eps


def sampling_timesteps(total: int, steps: int) -> list[int]:
    """Descending timestep subsequence ending at 1, starting at T."""
    if steps < 1:
        raise ValueError(f"sampler steps must be >= 1, got {steps}")
    if steps > total:
        raise ValueError(f"sampler steps {steps} exceed schedule length {total}")
    taus = [math.ceil((k + 1) * total / steps) for k in range(steps)]
    return taus[::-1]


# ---------------------------------------------------------------------------
# denoiser blocks
# ---------------------------------------------------------------------------


class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        half = dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half) / half)
        self.register_buffer("freqs", freqs)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        angles = t[:, None].float() * self.freqs[None]
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class TokenAttention(nn.Module):
    """Multi-head softmax attention between token sequences."""

    def __init__(self, dim: int, n_heads: int = 1):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"dim {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, queries: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        if queries.shape[-1] != context.shape[-1]:
            raise ValueError("query/context token dims disagree")
        b, n, d = queries.shape
        h = self.n_heads
        q = self.to_q(queries).view(b, n, h, d // h).transpose(1, 2)
        k = self.to_k(context).view(b, -1, h, d // h).transpose(1, 2)
        v = self.to_v(context).view(b, -1, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // h)
        out = torch.softmax(scores, dim=-1) @ v
        return self.to_out(out.transpose(1, 2).reshape(b, n, d))


class ConditionedAttentionBlock(nn.Module):
    """Self-attention, gated layout attention, and prompt cross-attention.

    The gated sublayer attends over [image tokens, layout tokens], keeps only
    the image-token rows, and scales by tanh(gate); with gate at its zero
    initialization the sublayer contributes exactly nothing.
    """

    def __init__(self, dim: int, n_heads: int = 1):
        super().__init__()
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = TokenAttention(dim, n_heads)
        self.norm_gated = nn.LayerNorm(dim)
        self.gated_attn = TokenAttention(dim, n_heads)
        self.gate = nn.Parameter(torch.zeros(()))
        self.norm_cross = nn.LayerNorm(dim)
        self.cross_attn = TokenAttention(dim, n_heads)

    def attend(
        self,
        tokens: torch.Tensor,
        layout_tokens: torch.Tensor,
        prompt_tokens: torch.Tensor,
        ablate_gated: bool = False,
    ) -> torch.Tensor:
        v = self.norm_self(tokens)
        tokens = tokens + self.self_attn(v, v)
        if not ablate_gated:
            n_img = tokens.shape[1]
            joint = self.norm_gated(torch.cat([tokens, layout_tokens], dim=1))
            attended = self.gated_attn(joint, joint)
            tokens = tokens + torch.tanh(self.gate) * attended[:, :n_img]
        tokens = tokens + self.cross_attn(self.norm_cross(tokens), prompt_tokens)
        return tokens

    def forward(self, x, layout_tokens, prompt_tokens, ablate_gated=False):
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        tokens = self.attend(tokens, layout_tokens, prompt_tokens, ablate_gated)
        return tokens.transpose(1, 2).view(b, c, h, w)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(min(8, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(nn.functional.silu(temb))[:, :, None, None]
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 4
    mask_channels: int = 4
    base_channels: int = 64
    time_dim: int = 128
    n_heads: int = 4


class DenoiserUNet(nn.Module):
    """Two-level U-Net over latent maps with conditioned attention at full
    latent resolution; the input is CONCAT(downsampled mask, noisy latent)."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        b, td = config.base_channels, config.time_dim
        self.time_embed = nn.Sequential(
            SinusoidalTimeEmbedding(b),
            nn.Linear(b, td),
            nn.SiLU(),
            nn.Linear(td, td),
        )
        self.first_conv = nn.Conv2d(
            config.mask_channels + config.latent_channels, b, 3, padding=1
        )
        self.enc1 = ResBlock(b, b, td)
        self.attn1 = ConditionedAttentionBlock(b, config.n_heads)
        self.down = nn.Conv2d(b, b * 2, 4, stride=2, padding=1)
        self.enc2 = ResBlock(b * 2, b * 2, td)
        self.mid = ResBlock(b * 2, b * 2, td)
        self.up = nn.Conv2d(b * 2, b, 3, padding=1)
        self.dec1 = ResBlock(b * 2, b, td)
        self.attn2 = ConditionedAttentionBlock(b, config.n_heads)
        self.out_norm = nn.GroupNorm(8, b)
        self.out_conv = nn.Conv2d(b, config.latent_channels, 3, padding=1)

    def forward(self, z_in, t, layout_tokens, prompt_tokens, ablate_gated=False):
        temb = self.time_embed(t)
        h1 = self.enc1(self.first_conv(z_in), temb)
        h1 = self.attn1(h1, layout_tokens, prompt_tokens, ablate_gated)
        h2 = self.mid(self.enc2(self.down(h1), temb), temb)
        u = self.up(nn.functional.interpolate(h2, scale_factor=2, mode="nearest"))
        u = self.dec1(torch.cat([u, h1], dim=1), temb)
        u = self.attn2(u, layout_tokens, prompt_tokens, ablate_gated)
        return self.out_conv(nn.functional.silu(self.out_norm(u)))


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GuidanceConfig:
    omega: float = 3.0
    sampler_steps: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.omega < 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.omega}")
        if self.sampler_steps < 1:
            raise ValueError("sampler_steps must be >= 1")


@dataclass(frozen=True)
class GeneratorConfig:
    resolution: int = 64
    image_channels: int = 1
    latent_channels: int = 4
    spatial_factor: int = 8
    base_channels: int = 64
    time_dim: int = 128
    n_heads: int = 4
    timesteps: int = 1000
    schedule_kind: str = "linear"
    categories: tuple = CATEGORIES
    grid_factor: int = 8
    n_prompt_tokens: int = 4
    mask_channels: int = 4
    p_drop: float = 0.1
    freeze_backbone: bool = False

    def conditioning_config(self) -> ConditioningConfig:
        return ConditioningConfig(
            categories=tuple(self.categories),
            num_classes=len(self.categories) + 1,
            token_dim=self.base_channels,
            grid_factor=self.grid_factor,
            n_prompt_tokens=self.n_prompt_tokens,
            latent_spatial_factor=self.spatial_factor,
            mask_channels=self.mask_channels,
        )

    def autoencoder_config(self) -> AutoencoderConfig:
        return AutoencoderConfig(
            in_channels=self.image_channels,
            latent_channels=self.latent_channels,
            spatial_factor=self.spatial_factor,
        )

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            latent_channels=self.latent_channels,
            mask_channels=self.mask_channels,
            base_channels=self.base_channels,
            time_dim=self.time_dim,
            n_heads=self.n_heads,
        )


# Sublayers that stay trainable when the backbone is frozen: the paper-style
# adaptation set (gated attention + gate scalars), the mask-condition modules,
# and the first convolution that consumes the concatenated mask.
_ADAPTATION_MARKERS = ("gated_attn", "norm_gated", "gate", "first_conv")


class Generator(nn.Module):
    """Frozen autoencoder + conditioner + denoiser with one noise schedule."""

    def __init__(self, config: GeneratorConfig, ae_params: AutoencoderParams, seed: int = 0):
        super().__init__()
        expected = config.autoencoder_config()
        if ae_params.config != expected:
            raise ValueError(
                f"autoencoder config {ae_params.config} does not match generator "
                f"requirements {expected}"
            )
        if config.resolution % config.spatial_factor:
            raise ValueError("resolution not divisible by the latent spatial factor")
        self.config = config
        self.seed = seed
        self.schedule = make_schedule(config.timesteps, config.schedule_kind)
        self.autoencoder = ae_params.model
        self.ae_metadata = dict(ae_params.metadata)
        self.conditioner = Conditioner(config.conditioning_config(), seed=seed)
        torch.manual_seed(substream(seed, "denoiser-init"))
        self.unet = DenoiserUNet(config.denoiser_config())
        self._apply_freeze_policy()

    def _apply_freeze_policy(self):
        for p in self.autoencoder.parameters():
            p.requires_grad_(False)
        if self.config.freeze_backbone:
            for name, p in self.unet.named_parameters():
                p.requires_grad_(any(m in name for m in _ADAPTATION_MARKERS))

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def trainable_parameter_names(self) -> list[str]:
        return [n for n, p in self.named_parameters() if p.requires_grad]

    def gates(self) -> list[nn.Parameter]:
        return [self.unet.attn1.gate, self.unet.attn2.gate]

    # -- conditioning helpers -------------------------------------------------

    def prepare_condition(self, masks: np.ndarray, categories: list[str]):
        """Binary masks -> (one-hot, downsampled map, layout tokens)."""
        if masks.ndim == 2:
            masks = masks[None]
        m = torch.from_numpy(np.ascontiguousarray(masks, dtype=np.float32))
        one_hot = self.conditioner.one_hot(m, list(categories))
        return one_hot, self.conditioner.downsampler(one_hot), self.conditioner.mask_encoder(one_hot)

    # -- core ops -------------------------------------------------------------

    def predict_noise(self, z_in, prompt_tokens, layout_tokens, t, ablate_gated=False):
        """Noise estimate for a concatenated (mask map, noisy latent) input.

        `prompt_tokens=None` selects the learned null prompt (the
        unconditional guidance branch); the layout tokens are mandatory.
        """
        if layout_tokens is None:
            raise ValueError("mask condition is mandatory: layout tokens missing")
        expected_ch = self.config.mask_channels + self.config.latent_channels
        if z_in.ndim != 4 or z_in.shape[1] != expected_ch:
            raise ValueError(
                f"z_in must be (B, {expected_ch}, h, w), got {tuple(z_in.shape)}"
            )
        t_arr = torch.as_tensor(t)
        if t_arr.ndim == 0:
            t_arr = t_arr.expand(z_in.shape[0])
        if torch.any(t_arr < 1) or torch.any(t_arr > self.schedule.timesteps):
            raise ValueError(f"timestep outside [1, {self.schedule.timesteps}]")
        if prompt_tokens is None:
            prompt_tokens = self.conditioner.null_tokens(z_in.shape[0])
        return self.unet(z_in, t_arr.float(), layout_tokens, prompt_tokens, ablate_gated)

    def cfg_predict(self, z_t, down_map, layout_tokens, prompt_tokens, t, omega,
                    ablate_gated=False):
        """Classifier-free guided estimate: uncond + omega * (cond - uncond)."""
        z_in = torch.cat([down_map, z_t], dim=1)
        eps_cond = self.predict_noise(z_in, prompt_tokens, layout_tokens, t, ablate_gated)
        eps_uncond = self.predict_noise(z_in, None, layout_tokens, t, ablate_gated)
        return eps_uncond + omega * (eps_cond - eps_uncond)

    def sample(self, masks: np.ndarray, categories, guidance: GuidanceConfig,
               ablate_gated: bool = False) -> np.ndarray:
        """Ancestral denoising from pure noise, decoded to images in [-1, 1].

        Deterministic for a fixed (masks, categories, guidance seed).
        """
        single = masks.ndim == 2
        if single:
            masks = masks[None]
        if isinstance(categories, str):
            cats = [categories] * len(masks)
        else:
            cats = list(categories)
        if len(cats) != len(masks):
            raise ValueError("one category per mask required")
        res = masks.shape[-1]
        if res % self.config.spatial_factor:
            raise ValueError(f"mask resolution {res} not divisible by latent factor")
        taus = sampling_timesteps(self.schedule.timesteps, guidance.sampler_steps)
        gen = torch.Generator().manual_seed(substream(guidance.seed, "sample"))
        b = len(masks)
        h = w = res // self.config.spatial_factor
        with torch.no_grad():
            _, down, layout = self.prepare_condition(masks, cats)
            prompt = self.conditioner.prompt_tokens(cats)
            z = torch.randn(b, self.config.latent_channels, h, w, generator=gen)
            for i, tau in enumerate(taus):
                prev = taus[i + 1] if i + 1 < len(taus) else 0
                eps_hat = self.cfg_predict(
                    z, down, layout, prompt, tau, guidance.omega, ablate_gated
                )
                abar_t = float(self.schedule.alpha_bars[tau - 1])
                abar_prev = 1.0 if prev == 0 else float(self.schedule.alpha_bars[prev - 1])
                alpha_eff = abar_t / abar_prev
                beta_eff = 1.0 - alpha_eff
                mean = (z - beta_eff / math.sqrt(1.0 - abar_t) * eps_hat) / math.sqrt(alpha_eff)
                if prev > 0:
                    noise = torch.randn(z.shape, generator=gen)
                    z = mean + math.sqrt(beta_eff) * noise
                else:
                    z = mean
            images = self.autoencoder.decode(z).numpy()
        return images[0] if single else images


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorTrainConfig:
    iterations: int = 30000
    warmup: int = 10000
    lr: float = 5e-5
    batch_size: int = 2
    seed: int = 0


def diffusion_loss(
    generator: Generator,
    images: torch.Tensor,
    masks: torch.Tensor,
    categories: list[str],
    t: torch.Tensor,
    eps: torch.Tensor,
    drop_prompt: torch.Tensor,
    z0: torch.Tensor | None = None,
) -> torch.Tensor:
    """Noise-regression MSE for an explicit (t, eps, prompt-drop) draw."""
    if images.shape[0] == 0:
        raise ValueError("empty batch")
    if z0 is None:
        with torch.no_grad():
            z0 = generator.autoencoder.encode(images)
    z_t = q_sample(generator.schedule, z0, t, eps)
    one_hot = generator.conditioner.one_hot(masks, categories).to(images.dtype)
    layout = generator.conditioner.mask_encoder(one_hot)
    down = generator.conditioner.downsampler(one_hot)
    prompt = generator.conditioner.prompt_tokens(categories)
    null = generator.conditioner.null_tokens(len(categories))
    prompt = torch.where(drop_prompt[:, None, None], null, prompt)
    z_in = torch.cat([down, z_t], dim=1)
    eps_hat = generator.predict_noise(z_in, prompt, layout, t)
    return nn.functional.mse_loss(eps_hat, eps)


def training_step(
    generator: Generator,
    batch: list,
    rng: torch.Generator,
    z0: torch.Tensor | None = None,
) -> float:
    """One objective evaluation + backward pass; gradients land only on the
    trainable set (frozen modules carry no grad)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    images = torch.from_numpy(np.stack([p.image for p in batch]).astype(np.float32))
    masks = torch.from_numpy(np.stack([p.mask for p in batch]).astype(np.float32))
    categories = [p.category for p in batch]
    b = len(batch)
    t = torch.randint(1, generator.schedule.timesteps + 1, (b,), generator=rng)
    shape = (b, generator.config.latent_channels,
             generator.config.resolution // generator.config.spatial_factor,
             generator.config.resolution // generator.config.spatial_factor)
    eps = torch.randn(shape, generator=rng)
    drop = torch.rand(b, generator=rng) < generator.config.p_drop
    loss = diffusion_loss(generator, images, masks, categories, t, eps, drop, z0=z0)
    generator.zero_grad(set_to_none=True)
    loss.backward()
    return float(loss.detach())


def train_generator(
    pairs: PairSet,
    generator: Generator,
    train: GeneratorTrainConfig | None = None,
) -> dict:
    """Adam loop with linear learning-rate warmup; returns the loss history."""
    if len(pairs) == 0:
        raise ValueError("cannot train on an empty pair set")
    train = train or GeneratorTrainConfig()
    rng_np = np.random.default_rng(substream(train.seed, "generator-batches"))
    rng_torch = torch.Generator().manual_seed(substream(train.seed, "generator-noise"))
    optimizer = torch.optim.Adam(generator.trainable_parameters(), lr=train.lr)

    with torch.no_grad():  # the autoencoder is frozen, so latents are static
        images = torch.from_numpy(pairs.images().astype(np.float32))
        latents = generator.autoencoder.encode(images)

    history: list[float] = []
    for step in range(train.iterations):
        lr = train.lr * min(1.0, (step + 1) / max(train.warmup, 1))
        for group in optimizer.param_groups:
            group["lr"] = lr
        idx = rng_np.integers(0, len(pairs), size=min(train.batch_size, len(pairs)))
        batch = [pairs[int(i)] for i in idx]
        loss = training_step(generator, batch, rng_torch, z0=latents[torch.from_numpy(idx)])
        optimizer.step()
        history.append(loss)

    window = max(1, len(history) // 10)
    return {
        "loss": history,
        "initial_smoothed": float(np.mean(history[:window])) if history else None,
        "final_smoothed": float(np.mean(history[-window:])) if history else None,
        "config": asdict(train),
        "config_hash": config_hash(asdict(train)),
    }
