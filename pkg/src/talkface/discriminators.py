"""Temporal PatchGAN discriminator, lip-sync embedder, and the perceptual feature pyramid."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .audio import N_FEATURES, SUBFRAMES
from .avct import AcousticNorm

SYNC_WINDOW = 5
CROP_SIZE = 96
EMBED_DIM = 256


class TemporalDiscriminator(nn.Module):
    """Four convolutions over T frames stacked along channels; outputs a patch grid.

    For 256x256 input the patch grid is 16x16.
    """

    def __init__(self, seq_len: int, widths=(32, 64, 128)):
        super().__init__()
        self.seq_len = seq_len
        w1, w2, w3 = widths
        self.net = nn.Sequential(
            nn.Conv2d(3 * seq_len, w1, 4, stride=4), nn.LeakyReLU(0.2),
            nn.Conv2d(w1, w2, 4, stride=2, padding=1), nn.GroupNorm(8, w2), nn.LeakyReLU(0.2),
            nn.Conv2d(w2, w3, 4, stride=2, padding=1), nn.GroupNorm(8, w3), nn.LeakyReLU(0.2),
            nn.Conv2d(w3, 1, 3, padding=1),
        )

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(T, 3, H, W) or (B, T, 3, H, W) -> (B, 1, h, w) patch scores."""
        if frames.ndim == 4:
            frames = frames[None]
        return self.net(frames.flatten(1, 2))

    @staticmethod
    def patch_grid(size: int) -> int:
        size = (size - 4) // 4 + 1
        for _ in range(2):
            size = (size + 2 - 4) // 2 + 1
        return size


class SyncDiscriminator(nn.Module):
    """SyncNet-style twin encoder: 5 mouth crops and 5 acoustic frames -> two 256-d embeddings."""

    def __init__(self, embed_dim: int = EMBED_DIM):
        super().__init__()

        def block(cin, cout, stride):
            return [nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.GroupNorm(8, cout),
                    nn.LeakyReLU(0.2)]

        self.visual = nn.Sequential(
            *block(3 * SYNC_WINDOW, 32, 2), *block(32, 64, 2), *block(64, 128, 2),
            *block(128, 128, 2), *block(128, 256, 2),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(256, embed_dim),
        )
        self.acoustic_norm = AcousticNorm()
        self.audio = nn.Sequential(
            *block(1, 32, 1), *block(32, 64, 2), *block(64, 128, 2), *block(128, 256, 2),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(256, embed_dim),
        )

    def embed_visual(self, crops: torch.Tensor) -> torch.Tensor:
        """(B, 5, 3, 96, 96) -> (B, 256)."""
        return self.visual(crops.flatten(1, 2))

    def embed_audio(self, acoustic: torch.Tensor) -> torch.Tensor:
        """(B, 5, 4, 41) -> (B, 256)."""
        a = self.acoustic_norm(acoustic)
        return self.audio(a.reshape(a.shape[0], 1, SYNC_WINDOW * SUBFRAMES, N_FEATURES))

    def forward(self, crops, acoustic):
        return self.embed_visual(crops), self.embed_audio(acoustic)


class FeaturePyramid(nn.Module):
    """Fixed, randomly initialized convolutional pyramid used as the default
    perceptual feature network. Parameters never train."""

    def __init__(self, seed: int = 0, widths=(8, 16, 32, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers, cin = [], 3
        for i, cout in enumerate(widths):
            k = 4 if i < len(widths) - 1 else 3
            conv = nn.Conv2d(cin, cout, k, stride=2, padding=1)
            with torch.no_grad():
                fan_in = cin * k * k
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            cin = cout
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def forward(self, x):
        feats = []
        for conv in self.layers:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats
