"""Evaluation: landmark distance, SyncNet-style offset/confidence, and the
mouth-opening probe used on synthetic speakers."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .discriminators import SYNC_WINDOW
from .errors import RejectedInputError
from .losses import crop_sequence, sync_probability
from .synthetic import FaceGeometry, FaceStyle, luminance, render_face

MAX_OFFSET = 15
MIN_SYNC_FRAMES = 41


# ------------------------------------------------------------------ LMD

def _frame_scale(scale, n_frames: int, landmarks: np.ndarray) -> np.ndarray:
    if scale is None:
        span = landmarks.max(axis=1) - landmarks.min(axis=1)
        scale = np.hypot(span[:, 0], span[:, 1])
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (n_frames,))
    if np.any(scale <= 0):
        raise RejectedInputError("landmark normalization scale must be positive")
    return scale


def metric_lmd(pred, gt, pred_scale=None, gt_scale=None) -> float:
    """Mean normalized relative landmark distance over (T, L, 2) mouth landmarks.

    Each set is centred on its own centroid and divided by its own scale,
    a scalar or per-frame face-box diagonal. Without a scale the diagonal of
    the set's own bounding box is used.
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 3 or p.shape[-1] != 2:
        raise RejectedInputError(f"landmark shapes {p.shape} and {g.shape} must match as (T, L, 2)")
    t = p.shape[0]
    pn = (p - p.mean(axis=1, keepdims=True)) / _frame_scale(pred_scale, t, p)[:, None, None]
    gn = (g - g.mean(axis=1, keepdims=True)) / _frame_scale(gt_scale, t, g)[:, None, None]
    return float(np.linalg.norm(pn - gn, axis=-1).mean())


# ------------------------------------------------------------------ sync

@dataclass
class SyncReport:
    av_offset: int
    av_confidence: float
    scores: dict = field(default_factory=dict)


@torch.no_grad()
def offset_scores(crops: torch.Tensor, acoustic, d_sync, max_offset: int = MAX_OFFSET) -> dict[int, float]:
    """Mean P_sync for each audio shift k, pairing video window c with audio window c - k.

    Only centres valid for every shift are used, so each k averages the same
    video windows.
    """
    t = len(crops)
    if t < MIN_SYNC_FRAMES or t < SYNC_WINDOW + 2 * max_offset:
        raise RejectedInputError(f"sync evaluation needs at least {MIN_SYNC_FRAMES} frames, got {t}")
    half = SYNC_WINDOW // 2
    a = torch.as_tensor(np.asarray(acoustic), dtype=torch.float32)
    if len(a) != t:
        raise RejectedInputError(f"{t} video frames but {len(a)} audio frames")
    centres = np.arange(half + max_offset, t - half - max_offset)
    wins = torch.stack([crops[c - half:c + half + 1] for c in range(half, t - half)])
    e_v_all = d_sync.embed_visual(wins)
    e_a_all = d_sync.embed_audio(torch.stack([a[c - half:c + half + 1] for c in range(half, t - half)]))
    scores = {}
    for k in range(-max_offset, max_offset + 1):
        e_v = e_v_all[centres - half]
        e_a = e_a_all[centres - k - half]
        scores[k] = sync_probability(e_v, e_a).mean().item()
    return scores


def metric_av_sync(frames: torch.Tensor, mouth_boxes, acoustic, d_sync,
                   max_offset: int = MAX_OFFSET) -> SyncReport:
    """AV offset (argmax over shifts) and confidence (max minus median).

    A positive offset means the audio has to be delayed by that many frames
    to line up with the video.
    """
    crops = crop_sequence(frames, mouth_boxes)
    scores = offset_scores(crops, acoustic, d_sync, max_offset)
    ks = np.array(list(scores))
    vals = np.array([scores[k] for k in ks])
    best = int(ks[np.argmax(vals)])
    return SyncReport(best, float(vals.max() - np.median(vals)), scores)


def shift_audio(acoustic: np.ndarray, k: int) -> np.ndarray:
    """Advance the audio by k frames (negative k delays), replicating edge frames."""
    idx = np.clip(np.arange(len(acoustic)) + k, 0, len(acoustic) - 1)
    return np.asarray(acoustic)[idx]


# ------------------------------------------------------------------ mouth probe

def _mouth_luminance(frames, boxes):
    arr = frames.detach().cpu().numpy() if isinstance(frames, torch.Tensor) else np.asarray(frames)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    if arr.shape[-1] != 3:
        arr = np.moveaxis(arr, -3, -1)
    return [luminance(img[y0:y1, x0:x1]) for img, (x0, y0, x1, y1) in zip(arr, np.asarray(boxes))]


def mean_darkness(frames, boxes) -> np.ndarray:
    """Per-frame mean of 1 - luminance inside the mouth box.

    Needs no knowledge of the face colours, so it also works on renders whose
    palette drifted from the reference; correlations are unaffected by the
    unknown affine scale to mouth opening.
    """
    return np.asarray([1.0 - lum.mean() for lum in _mouth_luminance(frames, boxes)])


def mouth_darkness(frames, boxes, style: FaceStyle) -> np.ndarray:
    """Per-frame mean of clip((L_skin - L) / (L_skin - L_cavity), 0, 1) inside the mouth box."""
    ls, lc = luminance(style.skin), luminance(style.cavity)
    return np.asarray([np.clip((ls - lum) / (ls - lc), 0.0, 1.0).mean()
                       for lum in _mouth_luminance(frames, boxes)])


@dataclass
class MouthProbe:
    """Linear map from mouth-box darkness to mouth opening, fitted on clean renders of a style."""

    style: FaceStyle
    slope: float
    intercept: float

    @classmethod
    def calibrate(cls, style: FaceStyle, n: int = 11) -> "MouthProbe":
        openings = np.linspace(0.0, 1.0, n)
        pose = np.zeros(6)
        imgs = np.stack([render_face(style, pose, o) for o in openings])
        box = FaceGeometry(style, pose, 0.0).mouth_box()
        dark = mouth_darkness(imgs, [box] * n, style)
        slope, intercept = np.polyfit(dark, openings, 1)
        return cls(style, float(slope), float(intercept))

    def openings(self, frames, boxes) -> np.ndarray:
        return np.clip(self.slope * mouth_darkness(frames, boxes, self.style) + self.intercept, 0.0, 1.0)

    def landmarks(self, frames, boxes, poses) -> np.ndarray:
        """Analytic mouth landmarks at the probed opening and the given head poses, (T, 20, 2)."""
        ops = self.openings(frames, boxes)
        return np.stack([FaceGeometry(self.style, p, o).landmarks() for p, o in zip(poses, ops)])


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.std() == 0 or b.std() == 0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


# ------------------------------------------------------------------ report

@dataclass
class EvaluationReport:
    lmd: float
    av_offset: int
    av_confidence: float
    clips: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)
