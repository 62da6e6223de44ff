"""Clip loading, preprocessing cache, and batched-sequential training batches."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import audio as audio_mod
from .avct import project_pose_track
from .errors import AlignmentError, RejectedInputError
from .synthetic import FaceStyle, SyntheticClip, SyntheticSpeakerSpec

FEATURE_CACHE = "features.npz"


def image_to_tensor(img) -> torch.Tensor:
    """uint8 (H, W, 3) or (T, H, W, 3) array -> float tensor in [0, 1], channels first."""
    arr = np.asarray(img)
    t = torch.from_numpy(np.array(arr, copy=True)).float() / 255.0
    return t.movedim(-1, -3)


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().clamp(0, 1).movedim(-3, -1).cpu().numpy()
    return np.round(arr * 255.0).astype(np.uint8)


def load_image(path, size: int | None = 256) -> torch.Tensor:
    img = Image.open(path).convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return image_to_tensor(np.asarray(img))


def save_frames(frames: torch.Tensor, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(tensor_to_image(frames)):
        p = out / f"{i:06d}.png"
        Image.fromarray(frame).save(p)
        paths.append(p)
    return paths


def load_frame_dir(path) -> np.ndarray:
    files = sorted(Path(path).glob("*.png"))
    if not files:
        raise RejectedInputError(f"no PNG frames in {path}")
    return np.stack([np.asarray(Image.open(f).convert("RGB")) for f in files])


@dataclass
class SpeakerClip:
    """One talking-head video with its frame-aligned conditioning streams."""

    frames: torch.Tensor  # (T, 3, H, W) uint8
    acoustic: np.ndarray  # (T, 4, 41)
    phonemes: np.ndarray  # (T,)
    poses: np.ndarray  # (T, 6)
    mouth_boxes: np.ndarray | None = None  # (T, 4)
    landmarks: np.ndarray | None = None  # (T, 20, 2)
    openings: np.ndarray | None = None
    wave: audio_mod.Waveform | None = None
    style: FaceStyle | None = None

    def __post_init__(self):
        n = len(self.frames)
        for name in ("acoustic", "phonemes", "poses", "mouth_boxes", "landmarks", "openings"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise AlignmentError(f"{name} has {len(v)} frames, video has {n}")

    def __len__(self):
        return len(self.frames)

    @classmethod
    def from_synthetic(cls, clip: SyntheticClip) -> "SpeakerClip":
        acoustic = audio_mod.extract_acoustic_frames(clip.wave)
        track = audio_mod.align_tracks(acoustic, clip.phonemes, clip.poses)
        t = len(track)
        frames = torch.from_numpy(clip.frames[:t]).permute(0, 3, 1, 2).contiguous()
        return cls(frames, track.acoustic, track.phonemes, track.poses, clip.mouth_boxes[:t],
                   clip.landmarks[:t], clip.openings[:t], clip.wave, clip.spec.style)

    @classmethod
    def load(cls, path, vocab=audio_mod.DEFAULT_VOCAB, use_cache: bool = True) -> "SpeakerClip":
        """Read a dataset directory laid out like the synthetic generator's output."""
        root = Path(path)
        frames = load_frame_dir(root / "frames")
        wave = audio_mod.read_wav(root / "audio.wav")
        cache = root / FEATURE_CACHE
        if use_cache and cache.exists():
            with np.load(cache) as z:
                acoustic, phonemes, poses = z["acoustic"], z["phonemes"], z["poses"]
        else:
            acoustic, phonemes, poses = preprocess(root, vocab=vocab, wave=wave, write=False)
        track = audio_mod.align_tracks(acoustic, phonemes, poses)
        t = min(len(track), len(frames))
        if abs(len(frames) - len(track)) > 2:
            raise AlignmentError(f"video has {len(frames)} frames but tracks have {len(track)}")
        boxes = _optional_table(root / "mouth_boxes.txt", np.int64)
        marks = np.load(root / "landmarks.npy") if (root / "landmarks.npy").exists() else None
        openings, style = None, None
        if (root / "meta.json").exists():
            meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
            if "openings" in meta:
                openings = np.asarray(meta["openings"], dtype=np.float64)
            if "spec" in meta:
                style = SyntheticSpeakerSpec.from_dict(meta["spec"]).style
        cut = (lambda a: None if a is None else a[:t])
        return cls(torch.from_numpy(frames[:t]).permute(0, 3, 1, 2).contiguous(),
                   track.acoustic[:t], track.phonemes[:t], track.poses[:t], cut(boxes), cut(marks),
                   cut(openings), wave, style)

    def frame_tensor(self, idx=None) -> torch.Tensor:
        f = self.frames if idx is None else self.frames[idx]
        return f.float() / 255.0

    @cached_property
    def pose_maps(self) -> torch.Tensor:
        return project_pose_track(self.poses)

    @cached_property
    def mouth_crops(self) -> torch.Tensor:
        """(T, 3, 96, 96) float crops at the stored mouth boxes."""
        from .losses import crop_sequence

        if self.mouth_boxes is None:
            raise RejectedInputError("clip has no mouth boxes")
        out = []
        for s in range(0, len(self), 64):
            out.append(crop_sequence(self.frame_tensor(slice(s, s + 64)), self.mouth_boxes[s:s + 64]))
        return torch.cat(out)


def _optional_table(path: Path, dtype):
    if not path.exists():
        return None
    return np.loadtxt(path, delimiter=",", dtype=dtype, ndmin=2)


def preprocess(root, vocab=audio_mod.DEFAULT_VOCAB, wave=None, write: bool = True):
    """Extract acoustic features and parse tracks; optionally cache them as features.npz."""
    root = Path(root)
    wave = wave if wave is not None else audio_mod.read_wav(root / "audio.wav")
    acoustic = audio_mod.extract_acoustic_frames(wave)
    phonemes = audio_mod.load_phoneme_track(root / "phonemes.phn", vocab)
    poses = audio_mod.load_pose_track(root / "poses.txt")
    if write:
        np.savez(root / FEATURE_CACHE, acoustic=acoustic, phonemes=phonemes, poses=poses)
    return acoustic, phonemes, poses


@dataclass
class TrainingBatch:
    """T consecutive frames of one clip plus their conditioning."""

    clip: SpeakerClip
    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or len(idx) == 0:
            raise RejectedInputError("batch needs a 1-D, nonempty index list")
        if np.any(np.diff(idx) != 1):
            raise RejectedInputError(f"batch frames must be consecutive, got {idx.tolist()}")
        if idx[0] < 0 or idx[-1] >= len(self.clip):
            raise RejectedInputError("batch indices outside the clip")
        self.indices = idx

    def __len__(self):
        return len(self.indices)

    @property
    def frames(self) -> torch.Tensor:
        return self.clip.frame_tensor(torch.from_numpy(self.indices))

    @property
    def mouth_boxes(self) -> np.ndarray:
        return self.clip.mouth_boxes[self.indices]

    @property
    def acoustic(self) -> torch.Tensor:
        return torch.as_tensor(self.clip.acoustic[self.indices], dtype=torch.float32)

    def windows(self, window: int = 5) -> np.ndarray:
        """(T, 2n+1) clip-level window indices with edge replication."""
        offsets = np.arange(-window, window + 1)
        return np.clip(self.indices[:, None] + offsets, 0, len(self.clip) - 1)


def make_batch(clip: SpeakerClip, indices) -> TrainingBatch:
    return TrainingBatch(clip, np.asarray(indices))
