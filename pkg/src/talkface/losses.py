"""Loss terms for batched sequential training of the correlation transformer."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .discriminators import CROP_SIZE, SYNC_WINDOW, FeaturePyramid, SyncDiscriminator, TemporalDiscriminator
from .errors import RejectedInputError
from .motion import KeypointSet
from .transforms import SimilarityTransform

SYNC_FLOOR = 1e-7
SYNC_EPS = 1e-8


@dataclass
class LossWeights:
    lambda_sync: float = 10.0
    lambda_v: float = 1.0
    lambda_eq_p: float = 10.0
    lambda_eq_j: float = 10.0
    lambda_pixel: float = 1.0
    pixel_loss: bool = True
    seq_len: int = 24
    window: int = 5
    lambda_adv: float = 1.0

    def __post_init__(self):
        for name in ("lambda_sync", "lambda_v", "lambda_eq_p", "lambda_eq_j", "seq_len", "window"):
            if getattr(self, name) <= 0:
                raise RejectedInputError(f"{name} must be positive")
        if self.lambda_adv < 0:
            raise RejectedInputError("lambda_adv must be non-negative")


# ------------------------------------------------------------------ lip sync

def sync_probability(e_v: torch.Tensor, e_a: torch.Tensor, eps: float = SYNC_EPS) -> torch.Tensor:
    """Cosine similarity with a guarded denominator, over the last dimension."""
    num = (e_v * e_a).sum(-1)
    denom = torch.clamp(e_v.norm(dim=-1) * e_a.norm(dim=-1), min=eps)
    return num / denom


def sync_loss_from_probability(p: torch.Tensor) -> torch.Tensor:
    return -torch.log(p.clamp(SYNC_FLOOR, 1.0))


def sync_loss(crops: torch.Tensor, acoustic: torch.Tensor, d_sync: SyncDiscriminator) -> torch.Tensor:
    """-log P_sync for (B, 5, 3, h, w) mouth crops and (B, 5, 4, 41) audio; returns (B,)."""
    if crops.shape[1] != SYNC_WINDOW or acoustic.shape[1] != SYNC_WINDOW:
        raise RejectedInputError(f"lip-sync windows must span exactly {SYNC_WINDOW} frames")
    if crops.shape[-2:] != (CROP_SIZE, CROP_SIZE):
        b, w = crops.shape[:2]
        crops = F.interpolate(crops.flatten(0, 1), size=(CROP_SIZE, CROP_SIZE), mode="bilinear",
                              align_corners=False).reshape(b, w, 3, CROP_SIZE, CROP_SIZE)
    e_v, e_a = d_sync(crops, acoustic.to(crops))
    return sync_loss_from_probability(sync_probability(e_v, e_a))


def crop_box(frame: torch.Tensor, box) -> torch.Tensor:
    """Slice (..., C, H, W) at box = (x0, y0, x1, y1), half-open pixel bounds."""
    x0, y0, x1, y1 = (int(v) for v in box)
    h, w = frame.shape[-2:]
    if x1 <= x0 or y1 <= y0:
        raise RejectedInputError(f"degenerate crop box {box}")
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
        raise RejectedInputError(f"crop box {box} outside {w}x{h} frame")
    return frame[..., y0:y1, x0:x1]


def crop_mouth(frame: torch.Tensor, box, size: int = CROP_SIZE) -> torch.Tensor:
    patch = crop_box(frame, box)
    squeeze = patch.ndim == 3
    if squeeze:
        patch = patch[None]
    out = F.interpolate(patch, size=(size, size), mode="bilinear", align_corners=False)
    return out[0] if squeeze else out


def crop_sequence(frames: torch.Tensor, boxes) -> torch.Tensor:
    """(T, 3, H, W) frames with (T, 4) boxes -> (T, 3, 96, 96)."""
    return torch.stack([crop_mouth(f, b) for f, b in zip(frames, boxes)])


# ------------------------------------------------------------------ temporal GAN

def temporal_gan_losses(real: torch.Tensor, fake: torch.Tensor, d_seq: TemporalDiscriminator):
    """Least-squares GAN terms on channel-stacked sequences.

    Returns (generator term, discriminator term). The discriminator term sees
    the fake stack detached, so it only trains the discriminator.
    """
    if real.shape != fake.shape:
        raise RejectedInputError(
            f"real {tuple(real.shape)} and fake {tuple(fake.shape)} sequences differ")
    gen = (d_seq(fake) - 1).pow(2).mean()
    disc = (d_seq(real) - 1).pow(2).mean() + d_seq(fake.detach()).pow(2).mean()
    return gen, disc


# ------------------------------------------------------------------ perceptual

def perceptual_loss(a: torch.Tensor, b: torch.Tensor, feature_net: nn.Module,
                    scales=(1, 2)) -> torch.Tensor:
    """Sum over scales and pyramid depths of mean |features(a) - features(b)|, per batch item."""
    if a.shape != b.shape:
        raise RejectedInputError("perceptual loss needs equally shaped images")
    total = a.new_zeros(a.shape[0])
    for s in scales:
        xa = a if s == 1 else F.avg_pool2d(a, s)
        xb = b if s == 1 else F.avg_pool2d(b, s)
        for fa, fb in zip(feature_net(xa), feature_net(xb)):
            total = total + (fa - fb).abs().flatten(1).mean(1)
    return total


# ------------------------------------------------------------------ equivariance

def equivariance_losses(pred: KeypointSet, gt_frames: torch.Tensor, detector,
                        transform: SimilarityTransform):
    """Compare predicted keypoints with the frozen detector on warped ground truth.

    L_K = mean |detect(warp(gt)).points - S(pred.points)|
    L_J = mean |detect(warp(gt)).jacobians - dS @ pred.jacobians|
    Returns per-frame (B,) tensors.
    """
    with torch.no_grad():
        detected, _ = detector(transform.warp(gt_frames))
    moved = transform(pred.points)
    jac = transform.jacobian(pred.points) @ pred.jacobians
    eq_k = (detected.points - moved).abs().flatten(1).mean(1)
    eq_j = (detected.jacobians - jac).abs().flatten(1).mean(1)
    return eq_k, eq_j


# ------------------------------------------------------------------ total

@dataclass
class LossModules:
    detector: nn.Module
    d_seq: TemporalDiscriminator
    d_sync: SyncDiscriminator
    feature_net: nn.Module = field(default_factory=FeaturePyramid)


def sync_centres(seq_len: int) -> range:
    """0-based centres of the lip-sync windows; boundary frames are skipped."""
    return range(2, seq_len - 2)


def total_loss(real: torch.Tensor, fake: torch.Tensor, pred: KeypointSet, mouth_boxes,
               acoustic: torch.Tensor, weights: LossWeights, modules: LossModules,
               transform: SimilarityTransform):
    """Per-sequence objective.

    L = L_seq + lambda_sync / (T - 4) * sum_{i=3}^{T-2} L_sync(crops_{i-2..i+2})
          + 1/T * sum_i (lambda_v L_vgg + lambda_eq_p L_eq_K + lambda_eq_j L_eq_J)

    L_seq is the least-squares generator term (weight ``lambda_adv``) plus, when enabled, a weighted
    per-frame L1 pixel term. Returns (total, breakdown) where breakdown holds
    the weighted contribution of every term and the raw per-frame values.
    """
    t = real.shape[0]
    if t < 5:
        raise RejectedInputError(f"sequence length {t} < 5 leaves no lip-sync window")
    if fake.shape != real.shape or len(pred) != t or len(mouth_boxes) != t or len(acoustic) != t:
        raise RejectedInputError("batch members disagree on sequence length")
    adv = (modules.d_seq(fake) - 1).pow(2).mean()
    pixel = (fake - real).abs().flatten(1).mean(1)
    seq = weights.lambda_adv * adv + (weights.lambda_pixel * pixel.mean() if weights.pixel_loss else 0.0)

    crops = crop_sequence(fake, mouth_boxes)
    centres = list(sync_centres(t))
    windows = torch.stack([crops[c - 2:c + 3] for c in centres])
    audio = torch.stack([acoustic[c - 2:c + 3] for c in centres])
    sync_terms = sync_loss(windows, audio, modules.d_sync)
    sync = weights.lambda_sync / (t - 4) * sync_terms.sum()

    vgg_terms = perceptual_loss(fake, real, modules.feature_net)
    eq_k_terms, eq_j_terms = equivariance_losses(pred, real, modules.detector, transform)
    vgg = weights.lambda_v * vgg_terms.sum() / t
    eq_k = weights.lambda_eq_p * eq_k_terms.sum() / t
    eq_j = weights.lambda_eq_j * eq_j_terms.sum() / t
    total = seq + sync + vgg + eq_k + eq_j
    breakdown = {
        "total": total, "seq": seq, "sync": sync, "vgg": vgg, "eq_K": eq_k, "eq_J": eq_j,
        "seq_adv": adv, "pixel": pixel.mean(),
        "terms": {"sync": sync_terms, "vgg": vgg_terms, "eq_K": eq_k_terms, "eq_J": eq_j_terms,
                  "pixel": pixel},
        "sync_count": len(centres),
        "sync_normalizer": t - 4,
    }
    return total, breakdown


def sync_hinge_loss(p_pos: torch.Tensor, p_neg: torch.Tensor, margin: float = 0.8) -> torch.Tensor:
    """Max-margin objective on cosine scores: synced above +margin, shifted below -margin."""
    return F.relu(margin - p_pos).mean() + F.relu(p_neg + margin).mean()
