"""Keypoint detector and image renderer, first-order motion style, desk scale.

The detector and the dense-motion network work at a quarter of the image
resolution (64x64 for 256x256 frames). The generator reaches that scale by
space-to-depth rearrangement instead of strided convolutions so the
full-resolution cost stays small on CPU.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import RejectedInputError
from .motion import DenseMotionField, KeypointSet, local_affine_motion, make_coordinate_grid, warp_image


@dataclass
class RendererConfig:
    image_size: int = 256
    num_kp: int = 10
    latent_channels: int = 32
    map_size: int = 64
    kp_expansion: int = 32
    kp_max_features: int = 128
    kp_blocks: int = 3
    temperature: float = 0.1
    kp_variance: float = 0.01
    motion_expansion: int = 16
    motion_max_features: int = 64
    motion_blocks: int = 3
    gen_channels: int = 64
    gen_res_blocks: int = 2

    @property
    def feature_size(self) -> int:
        return self.image_size // 4


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class AntiAliasDownsample(nn.Module):
    """Gaussian blur followed by strided subsampling."""

    def __init__(self, channels: int, scale: float):
        super().__init__()
        self.step = int(round(1 / scale))
        sigma = (self.step - 1) / 2
        size = 2 * round(sigma * 4) + 1
        self.pad = size // 2
        coords = torch.arange(size, dtype=torch.float32) - size // 2
        g = torch.exp(-coords ** 2 / (2 * sigma ** 2))
        kernel = torch.outer(g, g)
        kernel = kernel / kernel.sum()
        self.register_buffer("weight", kernel.expand(channels, 1, size, size).clone())
        self.channels = channels

    def forward(self, x):
        if self.step == 1:
            return x
        x = F.pad(x, (self.pad,) * 4, mode="replicate")
        x = F.conv2d(x, self.weight.to(x.dtype), groups=self.channels)
        return x[:, :, ::self.step, ::self.step]


class DownBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm = _norm(cout)

    def forward(self, x):
        return F.avg_pool2d(F.leaky_relu(self.norm(self.conv(x)), 0.2), 2)


class UpBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm = _norm(cout)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.leaky_relu(self.norm(self.conv(x)), 0.2)


class Hourglass(nn.Module):
    def __init__(self, in_features, expansion, num_blocks, max_features):
        super().__init__()
        down, up = [], []
        for i in range(num_blocks):
            cin = in_features if i == 0 else min(max_features, expansion * 2 ** i)
            down.append(DownBlock(cin, min(max_features, expansion * 2 ** (i + 1))))
        for i in reversed(range(num_blocks)):
            cin = (1 if i == num_blocks - 1 else 2) * min(max_features, expansion * 2 ** (i + 1))
            up.append(UpBlock(cin, min(max_features, expansion * 2 ** i)))
        self.down = nn.ModuleList(down)
        self.up = nn.ModuleList(up)
        self.out_filters = expansion + in_features

    def forward(self, x):
        skips = [x]
        for block in self.down:
            skips.append(block(skips[-1]))
        out = skips.pop()
        for block in self.up:
            out = torch.cat([block(out), skips.pop()], dim=1)
        return out


def heatmap_to_keypoints(heatmap: torch.Tensor) -> torch.Tensor:
    """Soft-argmax: expectation of (B, N, H, W) normalized heatmaps over the grid."""
    h, w = heatmap.shape[-2:]
    grid = make_coordinate_grid(h, w, heatmap.dtype, heatmap.device)
    return torch.einsum("bnhw,hwc->bnc", heatmap, grid)


def keypoint_gaussians(points: torch.Tensor, size: tuple[int, int], variance: float) -> torch.Tensor:
    """(B, N, 2) -> (B, N, H, W) unnormalized Gaussian bumps."""
    grid = make_coordinate_grid(*size, points.dtype, points.device)
    diff = grid[None, None] - points[:, :, None, None, :]
    return torch.exp(-0.5 * diff.pow(2).sum(-1) / variance)


class KeypointDetector(nn.Module):
    """Image -> (KeypointSet, 32-channel latent map)."""

    def __init__(self, cfg: RendererConfig):
        super().__init__()
        self.cfg = cfg
        self.down = AntiAliasDownsample(3, 0.25)
        self.hourglass = Hourglass(3, cfg.kp_expansion, cfg.kp_blocks, cfg.kp_max_features)
        feats = self.hourglass.out_filters
        self.heat = nn.Conv2d(feats, cfg.num_kp, 7, padding=3)
        self.jacobian = nn.Conv2d(feats, 4 * cfg.num_kp, 7, padding=3)
        nn.init.zeros_(self.jacobian.weight)
        nn.init.zeros_(self.jacobian.bias)
        self.latent = nn.Conv2d(feats, cfg.latent_channels, 1)

    def check_image(self, img):
        s = self.cfg.image_size
        if img.ndim != 4 or tuple(img.shape[1:]) != (3, s, s):
            raise RejectedInputError(f"expected (B, 3, {s}, {s}) images, got {tuple(img.shape)}")

    def forward(self, img: torch.Tensor):
        self.check_image(img)
        feats = self.hourglass(self.down(img))
        b, n = img.shape[0], self.cfg.num_kp
        logits = self.heat(feats) / self.cfg.temperature
        h, w = logits.shape[-2:]
        heat = F.softmax(logits.reshape(b, n, -1), dim=-1).reshape(b, n, h, w)
        points = heatmap_to_keypoints(heat)
        residual = self.jacobian(feats).reshape(b, n, 4, h, w)
        residual = (residual * heat[:, :, None]).sum((-1, -2)).reshape(b, n, 2, 2)
        jacobians = torch.eye(2, dtype=img.dtype, device=img.device) + residual
        latent = self.latent(feats)
        if latent.shape[-1] != self.cfg.map_size:
            latent = F.interpolate(latent, size=(self.cfg.map_size,) * 2, mode="bilinear",
                                   align_corners=False)
        return KeypointSet(points, jacobians), latent


def compose_flow(candidates: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """(B, K, H, W, 2) candidates weighted by (B, K, H, W) masks -> (B, H, W, 2)."""
    return (candidates * masks[..., None]).sum(1)


class DenseMotionNetwork(nn.Module):
    """Predicts per-candidate soft masks and an occlusion map at feature scale."""

    def __init__(self, cfg: RendererConfig):
        super().__init__()
        self.cfg = cfg
        self.down = AntiAliasDownsample(3, 0.25)
        in_ch = (cfg.num_kp + 1) * 4
        self.hourglass = Hourglass(in_ch, cfg.motion_expansion, cfg.motion_blocks,
                                   cfg.motion_max_features)
        feats = self.hourglass.out_filters
        self.mask = nn.Conv2d(feats, cfg.num_kp + 1, 7, padding=3)
        self.occlusion = nn.Conv2d(feats, 1, 7, padding=3)

    def candidates(self, src: KeypointSet, drv: KeypointSet, size, dtype, device):
        grid = make_coordinate_grid(*size, dtype, device)
        local = local_affine_motion(src, drv, grid)
        identity = grid.expand(local.shape[0], 1, *grid.shape)
        return torch.cat([identity, local], dim=1)  # background first

    def forward(self, ref_img: torch.Tensor, src: KeypointSet, drv: KeypointSet):
        small = self.down(ref_img)
        b, _, h, w = small.shape
        cand = self.candidates(src, drv, (h, w), small.dtype, small.device)
        k = cand.shape[1]
        heat = (keypoint_gaussians(drv.points, (h, w), self.cfg.kp_variance)
                - keypoint_gaussians(src.points, (h, w), self.cfg.kp_variance))
        heat = torch.cat([torch.zeros_like(heat[:, :1]), heat], dim=1)
        repeated = small[:, None].expand(b, k, 3, h, w).reshape(b * k, 3, h, w)
        deformed = warp_image(repeated, cand.reshape(b * k, h, w, 2)).reshape(b, k * 3, h, w)
        x = torch.cat([heat, deformed], dim=1)
        feats = self.hourglass(x)
        masks = F.softmax(self.mask(feats), dim=1)
        occlusion = torch.sigmoid(self.occlusion(feats))
        flow = compose_flow(cand, masks)
        return DenseMotionField(flow, occlusion), masks, cand


class ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = _norm(channels)
        self.norm2 = _norm(channels)

    def forward(self, x):
        out = self.conv1(F.leaky_relu(self.norm1(x), 0.2))
        out = self.conv2(F.leaky_relu(self.norm2(out), 0.2))
        return x + out


class Generator(nn.Module):
    """Encode the reference, warp at feature scale, gate by occlusion, decode.

    Besides learned features, the encoding keeps the reference pixels
    themselves (4x4 space-to-depth). The decoder predicts a logit correction
    on top of the warped pixels, so an unseen face keeps its own colours and
    the network only has to paint what the warp cannot supply. The final
    decoder layer starts at zero, making the untrained generator a pure warp.
    """

    COPY_EPS = 0.01

    def __init__(self, cfg: RendererConfig):
        super().__init__()
        c = cfg.gen_channels
        self.encode = nn.Sequential(
            nn.PixelUnshuffle(4),
            nn.Conv2d(48, c, 3, padding=1), _norm(c), nn.LeakyReLU(0.2),
            nn.Conv2d(c, c, 3, padding=1), _norm(c), nn.LeakyReLU(0.2),
        )
        self.merge = nn.Conv2d(c + 48, c, 1)
        self.bottleneck = nn.Sequential(*[ResBlock(c) for _ in range(cfg.gen_res_blocks)])
        self.decode = nn.Sequential(
            nn.Conv2d(c, c, 3, padding=1), _norm(c), nn.LeakyReLU(0.2),
            nn.Conv2d(c, 48, 3, padding=1),
            nn.PixelShuffle(4),
        )
        nn.init.zeros_(self.decode[3].weight)
        nn.init.zeros_(self.decode[3].bias)

    def forward(self, ref_img: torch.Tensor, field: DenseMotionField):
        feats = torch.cat([self.encode(ref_img), F.pixel_unshuffle(ref_img, 4)], 1)
        flow = field.flow
        if flow.shape[1:3] != feats.shape[-2:]:
            flow = F.interpolate(flow.permute(0, 3, 1, 2), size=feats.shape[-2:], mode="bilinear",
                                 align_corners=True).permute(0, 2, 3, 1)
        feats = warp_image(feats, flow)
        if field.occlusion is not None:
            occ = field.occlusion
            if occ.shape[-2:] != feats.shape[-2:]:
                occ = F.interpolate(occ, size=feats.shape[-2:], mode="bilinear", align_corners=True)
            feats = feats * occ
        copy = F.pixel_shuffle(feats[:, -48:], 4).clamp(self.COPY_EPS, 1 - self.COPY_EPS)
        return torch.sigmoid(self.decode(self.bottleneck(self.merge(feats))) + torch.logit(copy))


class Renderer(nn.Module):
    """Dense motion network plus generator: the part frozen as E_r."""

    def __init__(self, cfg: RendererConfig):
        super().__init__()
        self.cfg = cfg
        self.dense = DenseMotionNetwork(cfg)
        self.generator = Generator(cfg)

    def dense_motion(self, ref_img, src: KeypointSet, drv: KeypointSet) -> DenseMotionField:
        return self.dense(ref_img, src, drv)[0]

    def render(self, ref_img, field: DenseMotionField):
        return self.generator(ref_img, field)

    def forward(self, ref_img, src: KeypointSet, drv: KeypointSet):
        field = self.dense_motion(ref_img, src, drv)
        return self.render(ref_img, field), field
