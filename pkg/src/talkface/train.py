"""Training loops: renderer pretraining, lip-sync discriminator, AVCT, head motion.

Every loop draws its randomness from a generator seeded by (seed, iteration),
so a run resumed from a saved state replays exactly the batches and random
transforms an uninterrupted run would have used.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .avct import AVCT
from .config import Config
from .data import SpeakerClip, TrainingBatch, make_batch
from .discriminators import SYNC_WINDOW, FeaturePyramid, SyncDiscriminator, TemporalDiscriminator
from .errors import ConfigurationError, RejectedInputError
from .head_motion import HeadMotionConfig, HeadMotionPredictor, pose_anchor_loss
from .losses import LossModules, crop_sequence, perceptual_loss, sync_hinge_loss, sync_probability, total_loss
from .motion import KeypointSet
from .renderer import KeypointDetector, Renderer
from .transforms import SimilarityTransform, ThinPlateTransform

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("iteration", "total", "seq", "sync", "vgg", "eq_K", "eq_J")


def step_generator(seed: int, iteration: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) * 1_000_003 + int(iteration))


def freeze(module: torch.nn.Module) -> torch.nn.Module:
    module.eval()
    module.requires_grad_(False)
    return module


def parameter_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class LossLog:
    """Append-only CSV of per-iteration loss terms."""

    def __init__(self, path, columns=LOSS_COLUMNS):
        self.path = Path(path) if path is not None else None
        self.columns = columns
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(columns)

    def append(self, row: dict) -> None:
        if self.path is None:
            return
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row[c]) for c in self.columns])


def _fmt(v):
    if isinstance(v, torch.Tensor):
        v = v.item()
    return v if isinstance(v, int) else f"{float(v):.6g}"


def read_loss_log(path) -> dict[str, np.ndarray]:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]} if rows else {}


def _pick_clip(clips: Sequence[SpeakerClip], gen: torch.Generator) -> SpeakerClip:
    return clips[int(torch.randint(len(clips), (1,), generator=gen))]


def _cosine(opt, base_lr: float, it: int, total: int, decay: bool, warmup: int = 0):
    lr = base_lr * 0.5 * (1 + np.cos(np.pi * min(it, total) / total)) if decay and total > 0 else base_lr
    if warmup and it < warmup:
        lr = lr * (it + 1) / warmup
    for group in opt.param_groups:
        group["lr"] = lr


# ------------------------------------------------------------------ renderer pretraining

@dataclass
class RendererTraining:
    detector: KeypointDetector
    renderer: Renderer
    history: list = field(default_factory=list)


def renderer_losses(detector, renderer, src, drv, feature_net, cfg, gen, drv_boxes=None):
    """Self-driving reconstruction: detect both frames, render drv from src.

    With ``drv_boxes`` and a positive ``pretrain.lambda_mouth``, an extra L1
    term on the mouth crops keeps the small mouth region from being
    outweighed by the rest of the face.
    """
    p = cfg.pretrain
    kp_s, _ = detector(src)
    kp_d, _ = detector(drv)
    out, _ = renderer(src, kp_s, kp_d)
    pixel = sum((F.avg_pool2d(out, s) - F.avg_pool2d(drv, s)).abs().mean() if s > 1
                else (out - drv).abs().mean() for s in (1, 2, 4))
    perc = perceptual_loss(out, drv, feature_net).mean()
    tps = ThinPlateTransform.random(len(drv), gen)
    kp_t, _ = detector(tps.warp(drv))
    eq_k = (kp_d.points - tps(kp_t.points)).abs().mean()
    moved_j = tps.jacobian(kp_t.points) @ kp_t.jacobians
    eq_j = (kp_d.jacobians - moved_j).abs().mean()
    loss = p.lambda_perceptual * perc + p.lambda_pixel * pixel + p.lambda_eq_k * eq_k + p.lambda_eq_j * eq_j
    mouth = torch.zeros(())
    if drv_boxes is not None and p.lambda_mouth > 0:
        mouth = (crop_sequence(out, drv_boxes) - crop_sequence(drv, drv_boxes)).abs().mean()
        loss = loss + p.lambda_mouth * mouth
    return loss, {"loss": loss.item(), "l1": (out - drv).abs().mean().item(), "perceptual": perc.item(),
                  "eq_K": eq_k.item(), "eq_J": eq_j.item(), "mouth": mouth.item()}


def recolor_pair(src: torch.Tensor, drv: torch.Tensor, gen: torch.Generator, prob: float):
    """Apply one random colour remap per pair to both frames.

    The remap is a channel permutation, an optional inversion and a
    per-channel gain and offset that keep values in [0, 1]. Pairs keep their
    geometry, so the renderer must copy colours from the source instead of
    memorising them.
    """
    if prob <= 0:
        return src, drv
    b = len(src)
    apply = (torch.rand(b, generator=gen) < prob).view(b, 1, 1, 1)
    perm = torch.stack([torch.randperm(3, generator=gen) for _ in range(b)])
    invert = (torch.rand(b, 1, 1, 1, generator=gen) < 0.5).float()
    gain = 0.5 + 0.5 * torch.rand(b, 3, 1, 1, generator=gen)
    offset = (1 - gain) * torch.rand(b, 3, 1, 1, generator=gen)

    def remap(x):
        y = torch.stack([x[i, perm[i]] for i in range(b)])
        y = invert * (1 - y) + (1 - invert) * y
        return torch.where(apply, gain * y + offset, x)

    return remap(src), remap(drv)


def train_renderer(clips: Sequence[SpeakerClip], cfg: Config, detector=None, renderer=None,
                   feature_net=None, iterations: int | None = None, log_every: int = 50) -> RendererTraining:
    """Pretrain detector and renderer on random (source, driving) frame pairs."""
    torch.manual_seed(cfg.seed)
    detector = detector or KeypointDetector(cfg.renderer)
    renderer = renderer or Renderer(cfg.renderer)
    feature_net = feature_net or FeaturePyramid(cfg.seed)
    params = list(detector.parameters()) + list(renderer.parameters())
    opt = torch.optim.Adam(params, lr=cfg.pretrain.lr)
    n_iter = cfg.pretrain.iterations if iterations is None else iterations
    detector.train()
    renderer.train()
    history = []
    t0 = time.time()
    for it in range(n_iter):
        gen = step_generator(cfg.seed, it)
        clip = _pick_clip(clips, gen)
        idx = torch.randint(len(clip), (2, cfg.pretrain.batch), generator=gen)
        src, drv = recolor_pair(clip.frame_tensor(idx[0]), clip.frame_tensor(idx[1]), gen,
                                cfg.pretrain.color_jitter)
        boxes = None if clip.mouth_boxes is None else clip.mouth_boxes[idx[1].numpy()]
        loss, stats = renderer_losses(detector, renderer, src, drv, feature_net, cfg, gen, boxes)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(stats)
        if log_every and it % log_every == 0:
            log.info("renderer it %d %.0fs l1=%.4f mouth=%.4f eqK=%.4f", it, time.time() - t0, stats["l1"],
                     stats["mouth"], stats["eq_K"])
    detector.eval()
    renderer.eval()
    return RendererTraining(detector, renderer, history)


# ------------------------------------------------------------------ lip-sync discriminator

def sync_pairs(clips: Sequence[SpeakerClip], batch: int, gen: torch.Generator,
               min_offset: int = 5, max_offset: int = 15):
    """Sample synced and shifted (crop window, audio window) pairs.

    Returns crops (B, 5, 3, 96, 96), synced audio (B, 5, 4, 41), shifted audio.
    """
    crops, pos, neg = [], [], []
    half = SYNC_WINDOW // 2
    for _ in range(batch):
        clip = _pick_clip(clips, gen)
        lo, hi = half, len(clip) - half - 1
        if hi - lo < min_offset:
            raise RejectedInputError(
                f"clip of {len(clip)} frames is too short for sync offsets >= {min_offset}")
        while True:
            c = int(torch.randint(lo, hi + 1, (1,), generator=gen))
            k = int(torch.randint(min_offset, max_offset + 1, (1,), generator=gen))
            k = k if bool(torch.rand(1, generator=gen) < 0.5) else -k
            if lo <= c + k <= hi:
                break
        crops.append(clip.mouth_crops[c - half:c + half + 1])
        pos.append(torch.as_tensor(clip.acoustic[c - half:c + half + 1], dtype=torch.float32))
        neg.append(torch.as_tensor(clip.acoustic[c + k - half:c + k + half + 1], dtype=torch.float32))
    return torch.stack(crops), torch.stack(pos), torch.stack(neg)


def sync_separation(d_sync, clips, n_pairs: int = 128, seed: int = 12345, **offsets) -> float:
    """mean P_sync(synced) - mean P_sync(shifted) on freshly sampled pairs."""
    gen = torch.Generator().manual_seed(seed)
    crops, pos, neg = sync_pairs(clips, n_pairs, gen, **offsets)
    with torch.no_grad():
        e_v = d_sync.embed_visual(crops)
        p_pos = sync_probability(e_v, d_sync.embed_audio(pos))
        p_neg = sync_probability(e_v, d_sync.embed_audio(neg))
    return (p_pos.mean() - p_neg.mean()).item()


def train_sync_discriminator(clips: Sequence[SpeakerClip], cfg: Config, d_sync=None,
                             iterations: int | None = None, log_every: int = 50) -> SyncDiscriminator:
    s = cfg.sync
    torch.manual_seed(cfg.seed)
    d_sync = d_sync or SyncDiscriminator()
    d_sync.acoustic_norm.fit(np.concatenate([c.acoustic for c in clips]))
    opt = torch.optim.Adam(d_sync.parameters(), lr=s.lr)
    n_iter = s.iterations if iterations is None else iterations
    d_sync.train()
    for it in range(n_iter):
        gen = step_generator(cfg.seed + 1, it)
        crops, pos, neg = sync_pairs(clips, s.batch, gen, s.min_offset, s.max_offset)
        e_v = d_sync.embed_visual(crops)
        loss = sync_hinge_loss(sync_probability(e_v, d_sync.embed_audio(pos)),
                               sync_probability(e_v, d_sync.embed_audio(neg)), s.margin)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_every and it % log_every == 0:
            log.info("sync it %d loss=%.4f", it, loss.item())
    return d_sync.eval()


# ------------------------------------------------------------------ AVCT

@dataclass
class AVCTTraining:
    avct: AVCT
    d_seq: TemporalDiscriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    iteration: int = 0
    history: list = field(default_factory=list)

    def state_dict(self) -> dict:
        return {"iteration": self.iteration, "avct": self.avct.state_dict(),
                "d_seq": self.d_seq.state_dict(), "opt_g": self.opt_g.state_dict(),
                "opt_d": self.opt_d.state_dict()}

    def load_state_dict(self, state: dict) -> None:
        self.iteration = int(state["iteration"])
        self.avct.load_state_dict(state["avct"])
        self.d_seq.load_state_dict(state["d_seq"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])


def new_avct_training(clips: Sequence[SpeakerClip], cfg: Config, detector=None,
                      prior_stride: int = 5) -> AVCTTraining:
    """Fresh model and optimizers. With a detector, the output heads start at
    the mean detected keypoints of every ``prior_stride``-th training frame."""
    torch.manual_seed(cfg.seed)
    avct = AVCT(cfg.avct)
    avct.acoustic_norm.fit(np.concatenate([c.acoustic for c in clips]))
    if detector is not None:
        with torch.no_grad():
            kps = [detector(c.frame_tensor(slice(s, s + 16 * prior_stride, prior_stride)))[0]
                   for c in clips for s in range(0, len(c), 16 * prior_stride)]
        avct.init_output_prior(KeypointSet(torch.cat([k.points for k in kps]),
                                           torch.cat([k.jacobians for k in kps])))
    d_seq = TemporalDiscriminator(cfg.train.seq_len)
    opt_g = torch.optim.Adam(avct.parameters(), lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)
    opt_d = torch.optim.Adam(d_seq.parameters(), lr=cfg.train.d_lr)
    return AVCTTraining(avct, d_seq, opt_g, opt_d)


def sample_batch(clips, seq_len: int, gen: torch.Generator):
    """A TrainingBatch of seq_len consecutive frames and a reference frame index from the same clip."""
    clip = _pick_clip(clips, gen)
    if len(clip) < seq_len:
        raise RejectedInputError(f"clip of {len(clip)} frames is shorter than T={seq_len}")
    start = int(torch.randint(len(clip) - seq_len + 1, (1,), generator=gen))
    ref = int(torch.randint(len(clip), (1,), generator=gen))
    return make_batch(clip, np.arange(start, start + seq_len)), ref


def avct_forward(avct, detector, renderer, batch: TrainingBatch, ref_index: int):
    """Predict keypoints for the batch frames and render them from the reference frame."""
    clip = batch.clip
    ref_img = clip.frame_tensor(slice(ref_index, ref_index + 1))
    with torch.no_grad():
        kp_ref, latent = detector(ref_img)
    pred = avct.run_frames(clip.phonemes, clip.pose_maps, clip.acoustic, latent[0],
                           torch.from_numpy(batch.indices))
    t = len(batch)
    src = KeypointSet(kp_ref.points.expand(t, -1, -1), kp_ref.jacobians.expand(t, -1, -1, -1))
    fake, _ = renderer(ref_img.expand(t, -1, -1, -1), src, pred)
    return pred, fake


def avct_step(state: AVCTTraining, clips, cfg: Config, modules: LossModules, renderer,
              total_iterations: int | None = None, lr_decay: bool | None = None) -> dict:
    """One generator update followed by one temporal-discriminator update.

    With decay on, the learning rate follows a cosine over ``total_iterations``
    (default ``train.iterations``), so resumed runs keep the same schedule.
    """
    lr_decay = cfg.train.lr_decay if lr_decay is None else lr_decay
    it = state.iteration
    gen = step_generator(cfg.seed + 2, it)
    weights = cfg.loss_weights()
    batch, ref = sample_batch(clips, weights.seq_len, gen)
    k = cfg.train.eq_scale
    transform = SimilarityTransform.random(len(batch), gen, 0.1 * k, 0.05 * k, 0.05 * k)
    _cosine(state.opt_g, cfg.train.lr, it, total_iterations or cfg.train.iterations, lr_decay,
            cfg.train.warmup)
    state.avct.train()
    real = batch.frames
    pred, fake = avct_forward(state.avct, modules.detector, renderer, batch, ref)
    modules.d_seq.requires_grad_(False)
    total, parts = total_loss(real, fake, pred, batch.mouth_boxes, batch.acoustic, weights, modules, transform)
    state.opt_g.zero_grad()
    total.backward()
    state.opt_g.step()
    modules.d_seq.requires_grad_(True)
    d_loss = (modules.d_seq(real) - 1).pow(2).mean() + modules.d_seq(fake.detach()).pow(2).mean()
    state.opt_d.zero_grad()
    d_loss.backward()
    state.opt_d.step()
    state.iteration += 1
    row = {k: parts[k].item() if isinstance(parts[k], torch.Tensor) else float(parts[k])
           for k in ("total", "seq", "sync", "vgg", "eq_K", "eq_J", "pixel", "seq_adv")}
    row["iteration"] = it
    row["d_seq"] = d_loss.item()
    state.history.append(row)
    return row


def train_avct(clips: Sequence[SpeakerClip], cfg: Config, detector, renderer, d_sync,
               state: AVCTTraining | None = None, iterations: int | None = None,
               loss_log=None, feature_net=None, lr_decay: bool | None = None, log_every: int = 10,
               on_step=None) -> AVCTTraining:
    """Batched sequential training of the transformer against frozen detector, renderer and D_sync.

    ``iterations`` counts additional steps from the state's current iteration.
    """
    if detector is None or renderer is None or d_sync is None:
        raise ConfigurationError("AVCT training needs pretrained detector, renderer and sync discriminator")
    for m in (detector, renderer, d_sync):
        freeze(m)
    digests = [parameter_digest(m) for m in (detector, renderer, d_sync)]
    state = state or new_avct_training(clips, cfg, detector)
    modules = LossModules(detector, state.d_seq, d_sync, feature_net or FeaturePyramid(cfg.seed))
    n_iter = cfg.train.iterations if iterations is None else iterations
    end = state.iteration + n_iter
    writer = LossLog(loss_log)
    t0 = time.time()
    while state.iteration < end:
        row = avct_step(state, clips, cfg, modules, renderer, lr_decay=lr_decay)
        writer.append(row)
        if on_step is not None:
            on_step(state, row)
        if log_every and row["iteration"] % log_every == 0:
            log.info("avct it %d %.0fs total=%.3f sync=%.3f eqK=%.3f pixel=%.4f", row["iteration"],
                     time.time() - t0, row["total"], row["sync"], row["eq_K"], row["pixel"])
    if digests != [parameter_digest(m) for m in (detector, renderer, d_sync)]:
        raise RuntimeError("a frozen module changed during AVCT training")
    return state


# ------------------------------------------------------------------ head motion

def head_motion_losses(model: HeadMotionPredictor, acoustic: torch.Tensor, poses: torch.Tensor,
                       lambda_anchor: float = 1.0, lambda_delta: float = 10.0):
    """L1 to ground-truth poses and per-frame pose increments, plus the anchor term."""
    h_ref = poses[:, 0]
    pred = model(acoustic, h_ref)
    d_pred = torch.diff(pred, dim=1, prepend=h_ref[:, None])
    d_gt = torch.diff(poses, dim=1, prepend=h_ref[:, None])
    anchor = pose_anchor_loss(pred[:, 0], h_ref)
    pose = (pred - poses).abs().mean()
    delta = (d_pred - d_gt).abs().mean()
    return pose + lambda_delta * delta + lambda_anchor * anchor, {
        "pose": pose.item(), "delta": delta.item(), "anchor": anchor.item()}


def train_head_motion(clips: Sequence[SpeakerClip], cfg: Config, model=None,
                      iterations: int | None = None, lr_decay: bool = True,
                      log_every: int = 50) -> HeadMotionPredictor:
    """Regress each clip's full pose track from its audio, anchored at the first pose."""
    h = cfg.head
    torch.manual_seed(cfg.seed)
    model = model or HeadMotionPredictor(HeadMotionConfig(h.hidden, h.layers, h.pose_features,
                                                          cfg.avct.map_size))
    model.acoustic_norm.fit(np.concatenate([c.acoustic for c in clips]))
    opt = torch.optim.Adam(model.parameters(), lr=h.lr)
    n_iter = h.iterations if iterations is None else iterations
    model.train()
    for it in range(n_iter):
        _cosine(opt, h.lr, it, n_iter, lr_decay)
        clip = clips[it % len(clips)]
        a = torch.as_tensor(clip.acoustic, dtype=torch.float32)[None]
        p = torch.as_tensor(clip.poses, dtype=torch.float32)[None]
        loss, stats = head_motion_losses(model, a, p, h.lambda_anchor)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_every and it % log_every == 0:
            log.info("head it %d pose=%.4f anchor=%.5f", it, stats["pose"], stats["anchor"])
    return model.eval()
