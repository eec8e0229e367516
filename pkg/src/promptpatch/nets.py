"""Desk-scale denoiser and decoder networks.

Both are fixed-weight stand-ins for a pretrained latent-diffusion backbone:
weights are drawn once from a seeded generator and never trained, so every
forward pass is a deterministic, differentiable function of its inputs.

Two initialization choices keep the untrained pipeline numerically workable:

* the denoiser adds a noise-fraction-proportional response
  ``sqrt(1 - alpha_bar_t) * z`` to its convolutional output, which keeps the
  deterministic reverse chain well conditioned (the clean latent stays on the
  scale of the seed latent instead of growing by ``1/sqrt(alpha_bar_T)``);
* decoder transpose-conv kernels are a bilinear-upsampling base plus noise,
  so each latent cell drives a smooth, consistently signed pixel neighborhood
  and gradient directions survive placement jitter.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .conditioning import AttentionWeights, cross_attention
from .rng import DTYPE, torch_generator
from .sampler import LatentState
from .schedule import NoiseSchedule


def _randn(gen: torch.Generator, *shape: int, std: float) -> torch.Tensor:
    return torch.randn(shape, generator=gen, dtype=DTYPE) * std


class ConvDenoiser:
    """Small convolutional noise predictor with two cross-attention blocks.

    Operates on ``(channels, height, width)`` latents; exposes the attention
    map of each block so a sampling run can record the full step-by-layer grid.
    """

    def __init__(
        self,
        schedule: NoiseSchedule,
        seed: int,
        latent_channels: int = 4,
        hidden: int = 16,
        text_dim: int = 16,
        attn_dim: int = 16,
        net_scale: float = 0.1,
        attn_logit_scale: float = 2.0,
    ) -> None:
        gen = torch_generator(seed)
        self.schedule = schedule
        self.latent_channels = latent_channels
        self.hidden = hidden
        self.text_dim = text_dim
        self.net_scale = net_scale
        self.num_attention_layers = 2

        conv_std = 1.0 / math.sqrt(9 * hidden)
        self.w_in = _randn(
            gen, hidden, latent_channels, 3, 3, std=1.0 / math.sqrt(9 * latent_channels)
        )
        self.w_time = _randn(gen, hidden, 4, std=0.5)
        self.attn: list[AttentionWeights] = []
        self.w_proj: list[torch.Tensor] = []
        for _ in range(self.num_attention_layers):
            self.attn.append(
                AttentionWeights(
                    w_query=_randn(
                        gen, hidden, attn_dim, std=attn_logit_scale / math.sqrt(hidden)
                    ),
                    w_key=_randn(
                        gen, text_dim, attn_dim, std=attn_logit_scale / math.sqrt(text_dim)
                    ),
                    w_value=_randn(gen, text_dim, attn_dim, std=1.0 / math.sqrt(text_dim)),
                    dim=attn_dim,
                )
            )
            self.w_proj.append(_randn(gen, attn_dim, hidden, std=1.0 / math.sqrt(attn_dim)))
        self.w_mid = _randn(gen, hidden, hidden, 3, 3, std=conv_std)
        self.w_out = _randn(gen, latent_channels, hidden, 3, 3, std=conv_std)

    def _time_features(self, t: int) -> torch.Tensor:
        tau = 2.0 * math.pi * t / self.schedule.num_timesteps
        return torch.tensor(
            [math.sin(tau), math.cos(tau), math.sin(2 * tau), math.cos(2 * tau)],
            dtype=DTYPE,
        )

    def _attend(
        self, h: torch.Tensor, embedding: torch.Tensor, layer: int
    ) -> tuple[torch.Tensor, torch.Tensor]:
        channels, height, width = h.shape
        feats = h.reshape(channels, height * width).T
        out, attn_map = cross_attention(feats, embedding, self.attn[layer])
        proj = (out @ self.w_proj[layer]).T.reshape(channels, height, width)
        return torch.tanh(h + proj), attn_map

    def __call__(
        self, values: torch.Tensor, timestep: int, embedding: torch.Tensor
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if values.shape[0] != self.latent_channels:
            raise ValueError(
                f"expected {self.latent_channels} latent channels, got {values.shape[0]}"
            )
        if embedding.shape[1] != self.text_dim:
            raise ValueError(
                f"expected text dim {self.text_dim}, got {embedding.shape[1]}"
            )
        t_bias = (self.w_time @ self._time_features(timestep))[:, None, None]
        h = torch.tanh(F.conv2d(values[None], self.w_in, padding=1)[0] + t_bias)
        h, map_one = self._attend(h, embedding, 0)
        h = torch.tanh(F.conv2d(h[None], self.w_mid, padding=1)[0])
        h, map_two = self._attend(h, embedding, 1)
        eps_net = F.conv2d(h[None], self.w_out, padding=1)[0]
        noise_fraction = math.sqrt(1.0 - self.schedule.alpha_bar(timestep))
        return noise_fraction * values + self.net_scale * eps_net, [map_one, map_two]


def _bilinear_kernel() -> torch.Tensor:
    # Stride-2 transpose conv with this 4x4 kernel is exact bilinear upsampling.
    taps = torch.tensor([1.0, 3.0, 3.0, 1.0], dtype=DTYPE) / 4.0
    return torch.outer(taps, taps)


class ConvDecoder:
    """Fixed transpose-convolution stack mapping a clean latent to an RGB image.

    Upscales the latent spatial size by 8 (three stride-2 layers) and squashes
    through a sigmoid so the output always lies in [0, 1]. Each kernel is a
    bilinear-upsampling base mixed across channels plus a noise component.
    """

    def __init__(
        self,
        seed: int,
        latent_channels: int = 4,
        hidden: int = 12,
        detail: float = 0.25,
        mix_noise: float = 0.3,
        mix_gain: float = 1.5,
        output_gain: float = 3.5,
    ) -> None:
        gen = torch_generator(seed)
        self.latent_channels = latent_channels
        self.output_gain = output_gain
        base = _bilinear_kernel()

        def tconv(cin: int, cout: int) -> torch.Tensor:
            mix = (
                mix_gain + mix_noise * torch.randn((cin, cout), generator=gen, dtype=DTYPE)
            ) / cin
            noise = _randn(gen, cin, cout, 4, 4, std=detail / math.sqrt(4 * cin))
            return mix[:, :, None, None] * base + noise

        self.w_one = tconv(latent_channels, hidden)
        self.w_two = tconv(hidden, hidden)
        self.w_three = tconv(hidden, 3)

    def decode(self, z0: LatentState) -> torch.Tensor:
        """Decode a timestep-0 latent to an image in [0, 1] of shape (3, 8H, 8W)."""
        if z0.timestep != 0:
            raise ValueError(f"decode requires a timestep-0 latent, got {z0.timestep}")
        if z0.values.shape[0] != self.latent_channels:
            raise ValueError(
                f"expected {self.latent_channels} latent channels, got {z0.values.shape[0]}"
            )
        x = z0.values[None]
        x = torch.tanh(F.conv_transpose2d(x, self.w_one, stride=2, padding=1))
        x = torch.tanh(F.conv_transpose2d(x, self.w_two, stride=2, padding=1))
        x = F.conv_transpose2d(x, self.w_three, stride=2, padding=1)
        return torch.sigmoid(self.output_gain * x)[0]

    __call__ = decode
