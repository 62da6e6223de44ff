"""Synthetic single-speaker corpus: a drawn face whose mouth opening is tied to
the phoneme stream and whose audio amplitude equals the mouth opening.

Frames are rendered with Pillow at 4x supersampling and box-filtered down,
so shapes have anti-aliased edges.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import audio as audio_mod
from .audio import DEFAULT_VOCAB, FPS, FRAME_SAMPLES, SAMPLE_RATE, Waveform
from .errors import RejectedInputError

SUPERSAMPLE = 4
N_LANDMARKS = 20
VOWELS = {"AA", "AE", "AH", "AO", "AW", "AX", "AY", "EH", "ER", "EY", "IH", "IY", "OW", "OY",
          "UH", "UW"}
BILABIALS = {"B", "M", "P"}
LABIODENTALS = {"F", "V"}


@dataclass
class FaceStyle:
    background: tuple[float, float, float] = (0.20, 0.35, 0.55)
    skin: tuple[float, float, float] = (0.93, 0.78, 0.64)
    hair: tuple[float, float, float] = (0.25, 0.15, 0.08)
    lips: tuple[float, float, float] = (0.55, 0.18, 0.20)
    cavity: tuple[float, float, float] = (0.08, 0.02, 0.03)
    eyes: tuple[float, float, float] = (0.10, 0.10, 0.15)
    face_half_width: float = 72.0
    face_half_height: float = 92.0
    eye_dx: float = 30.0
    eye_dy: float = -22.0
    eye_radius: float = 9.0
    mouth_dy: float = 42.0
    mouth_width: float = 64.0
    lip_thickness: float = 5.0
    max_opening: float = 34.0
    parallax: float = 90.0

    @property
    def face_diagonal(self) -> float:
        return 2.0 * math.hypot(self.face_half_width, self.face_half_height)

    @property
    def mouth_box_size(self) -> int:
        return int(round(self.mouth_width + 24))


@dataclass
class PoseTrajectory:
    """Per-dof sinusoids: value_t = amplitude * sin(2 pi t / period + phase)."""

    amplitude: tuple[float, ...] = (0.06, 0.15, 0.03, 0.03, 0.02, 0.0)
    period: tuple[float, ...] = (70.0, 50.0, 90.0, 110.0, 130.0, 100.0)
    phase: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    def sample(self, n_frames: int) -> np.ndarray:
        t = np.arange(n_frames, dtype=np.float64)[:, None]
        a, p, ph = (np.asarray(v, dtype=np.float64)[None] for v in
                    (self.amplitude, self.period, self.phase))
        return a * np.sin(2 * np.pi * t / p + ph)


def default_mouth_open(seed: int, vocab=DEFAULT_VOCAB) -> dict[str, float]:
    """Per-phoneme mouth opening: silence closed, vowels wide, bilabials nearly shut."""
    rng = np.random.default_rng(seed)
    table = {}
    for tok in vocab:
        if tok == "SIL":
            table[tok] = 0.0
        elif tok in BILABIALS:
            table[tok] = 0.05
        elif tok in LABIODENTALS:
            table[tok] = 0.15
        elif tok in VOWELS:
            table[tok] = float(np.round(rng.uniform(0.55, 1.0), 4))
        else:
            table[tok] = float(np.round(rng.uniform(0.2, 0.45), 4))
    return table


@dataclass
class SyntheticSpeakerSpec:
    seed: int = 0
    duration_frames: int = 250
    mouth_open: dict[str, float] = field(default_factory=lambda: default_mouth_open(1234))
    pose: PoseTrajectory = field(default_factory=PoseTrajectory)
    style: FaceStyle = field(default_factory=FaceStyle)
    min_segment: int = 2
    max_segment: int = 5
    silence_prob: float = 0.15
    vocab: tuple[str, ...] = DEFAULT_VOCAB

    def __post_init__(self):
        if self.duration_frames < 50:
            raise RejectedInputError("synthetic clips need at least 50 frames")
        for tok, v in self.mouth_open.items():
            if not 0.0 <= v <= 1.0:
                raise RejectedInputError(f"mouth-open value for {tok} outside [0, 1]: {v}")
        if self.mouth_open.get("SIL", 0.0) != 0.0:
            raise RejectedInputError("silence must map to a closed mouth")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpeakerSpec":
        d = dict(d)
        d["pose"] = PoseTrajectory(**{k: tuple(v) for k, v in d["pose"].items()})
        d["style"] = FaceStyle(**{k: tuple(v) if isinstance(v, list) else v
                                  for k, v in d["style"].items()})
        d["vocab"] = tuple(d["vocab"])
        return cls(**d)


def alternate_style() -> FaceStyle:
    """A differently shaped and coloured face, kept out of training corpora."""
    return FaceStyle(
        background=(0.75, 0.80, 0.70),
        skin=(0.62, 0.45, 0.33),
        hair=(0.85, 0.80, 0.55),
        lips=(0.32, 0.10, 0.10),
        cavity=(0.05, 0.02, 0.02),
        eyes=(0.05, 0.20, 0.10),
        face_half_width=80.0,
        face_half_height=84.0,
        eye_dx=34.0,
        eye_dy=-18.0,
        eye_radius=7.0,
        mouth_dy=36.0,
        mouth_width=58.0,
        lip_thickness=6.0,
        max_opening=30.0,
    )


def random_style(seed: int) -> FaceStyle:
    """A seeded random face for identity-agnostic renderer pretraining.

    Colours and proportions are drawn independently; the cavity stays the
    darkest region so the mouth probe keeps its meaning.
    """
    rng = np.random.default_rng(seed)

    def colour(lo, hi):
        return tuple(float(v) for v in np.round(rng.uniform(lo, hi, 3), 3))

    return FaceStyle(
        background=colour(0.1, 0.9),
        skin=colour(0.35, 0.95),
        hair=colour(0.05, 0.9),
        lips=colour(0.2, 0.6),
        cavity=colour(0.0, 0.08),
        eyes=colour(0.0, 0.3),
        face_half_width=float(rng.uniform(66, 82)),
        face_half_height=float(rng.uniform(82, 96)),
        eye_dx=float(rng.uniform(26, 36)),
        eye_dy=float(rng.uniform(-26, -16)),
        eye_radius=float(rng.uniform(6, 10)),
        mouth_dy=float(rng.uniform(34, 46)),
        mouth_width=float(rng.uniform(52, 68)),
        lip_thickness=float(rng.uniform(4, 7)),
        max_opening=float(rng.uniform(28, 36)),
    )


def sample_phonemes(spec: SyntheticSpeakerSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    labels = []
    while len(labels) < spec.duration_frames:
        if rng.random() < spec.silence_prob:
            label = 0
        else:
            label = int(rng.integers(1, len(spec.vocab)))
        labels.extend([label] * int(rng.integers(spec.min_segment, spec.max_segment + 1)))
    return np.asarray(labels[:spec.duration_frames], dtype=np.int64)


def phoneme_frequency(label: int) -> float:
    return 120.0 + 5.0 * label


def synthesize_audio(labels: np.ndarray, openings: np.ndarray) -> Waveform:
    """Phase-continuous sinusoid per frame; amplitude equals the mouth opening."""
    freq = np.repeat([phoneme_frequency(int(l)) for l in labels], FRAME_SAMPLES)
    amp = np.repeat(openings, FRAME_SAMPLES)
    phase = 2 * np.pi * np.cumsum(freq) / SAMPLE_RATE
    return Waveform(amp * np.sin(phase), SAMPLE_RATE)


def amplitude_envelope(wave: Waveform) -> np.ndarray:
    """Per-frame peak amplitude estimate, sqrt(2) * RMS."""
    n = len(wave.samples) // FRAME_SAMPLES
    frames = wave.samples[:n * FRAME_SAMPLES].reshape(n, FRAME_SAMPLES)
    return np.sqrt(2.0 * np.mean(frames ** 2, axis=1))


class FaceGeometry:
    """Where the face parts of one frame land, in 256x256 pixel coordinates."""

    def __init__(self, style: FaceStyle, pose: np.ndarray, opening: float, size: int = 256):
        self.style = style
        self.scale = size / 256.0
        pitch, yaw, roll, tx, ty, _ = (float(v) for v in pose)
        half = size / 2.0
        self.center = np.array([half + half * tx, half + half * ty])
        self.roll = roll
        self.parallax = np.array([style.parallax * math.sin(yaw), style.parallax * math.sin(pitch)])
        self.opening = float(opening) * style.max_opening

    def to_image(self, local: np.ndarray, inner: bool = True) -> np.ndarray:
        local = np.asarray(local, dtype=np.float64) + (self.parallax if inner else 0.0)
        c, s = math.cos(self.roll), math.sin(self.roll)
        rot = np.array([[c, -s], [s, c]])
        return (local @ rot.T) * self.scale + self.center

    @property
    def mouth_center(self) -> np.ndarray:
        return self.to_image(np.array([[0.0, self.style.mouth_dy]]))[0]

    def mouth_box(self) -> tuple[int, int, int, int]:
        side = self.style.mouth_box_size * self.scale
        x0, y0 = np.round(self.mouth_center - side / 2).astype(int)
        n = int(round(side))
        return int(x0), int(y0), int(x0) + n, int(y0) + n

    def lip_outer_axes(self):
        st = self.style
        return st.mouth_width / 2, st.lip_thickness + self.opening / 2

    def lip_inner_axes(self):
        st = self.style
        return st.mouth_width / 2 - st.lip_thickness, self.opening / 2

    def landmarks(self) -> np.ndarray:
        """12 outer-lip + 8 inner-lip points, (20, 2)."""
        return mouth_landmarks(self.style, self.opening, self.to_image)


def mouth_landmarks(style: FaceStyle, opening_px: float, to_image=None) -> np.ndarray:
    ow, oh = style.mouth_width / 2, style.lip_thickness + opening_px / 2
    iw, ih = style.mouth_width / 2 - style.lip_thickness, opening_px / 2
    outer = np.deg2rad(np.arange(12) * 30.0)
    inner = np.deg2rad(np.arange(8) * 45.0)
    pts = np.concatenate([
        np.stack([ow * np.cos(outer), oh * np.sin(outer)], -1),
        np.stack([iw * np.cos(inner), ih * np.sin(inner)], -1),
    ]) + np.array([0.0, style.mouth_dy])
    return to_image(pts) if to_image is not None else pts


def _ellipse(cx, cy, ax, ay, n=96):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.stack([cx + ax * np.cos(t), cy + ay * np.sin(t)], -1)


def render_face(style: FaceStyle, pose: np.ndarray, opening: float, size: int = 256) -> np.ndarray:
    """Draw one frame; returns (size, size, 3) uint8."""
    geo = FaceGeometry(style, pose, opening, size)
    ss = SUPERSAMPLE
    canvas = Image.new("RGB", (size * ss, size * ss), _rgb(style.background))
    draw = ImageDraw.Draw(canvas)

    def poly(local, color, inner=True):
        pts = geo.to_image(local, inner) * ss
        draw.polygon([tuple(p) for p in pts], fill=_rgb(color))

    fw, fh = style.face_half_width, style.face_half_height
    poly(_ellipse(0, -fh * 0.35, fw * 1.08, fh * 0.75), style.hair, inner=False)
    poly(_ellipse(0, 0, fw, fh), style.skin, inner=False)
    for sx in (-1, 1):
        poly(_ellipse(sx * style.eye_dx, style.eye_dy, style.eye_radius, style.eye_radius), style.eyes)
    nose = tuple(0.85 * np.asarray(style.skin))
    poly(np.array([[0.0, -6.0], [-8.0, 18.0], [8.0, 18.0]]), nose)
    ow, oh = geo.lip_outer_axes()
    poly(_ellipse(0, style.mouth_dy, ow, oh), style.lips)
    iw, ih = geo.lip_inner_axes()
    if ih > 0:
        poly(_ellipse(0, style.mouth_dy, iw, ih), style.cavity)
    small = canvas.resize((size, size), Image.BOX)
    return np.asarray(small, dtype=np.uint8)


def _rgb(color) -> tuple[int, int, int]:
    return tuple(int(round(255 * c)) for c in color)


def luminance(rgb) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


@dataclass
class SyntheticClip:
    frames: np.ndarray  # (T, 256, 256, 3) uint8
    wave: Waveform
    phonemes: np.ndarray
    poses: np.ndarray
    openings: np.ndarray
    mouth_boxes: np.ndarray  # (T, 4) x0, y0, x1, y1
    landmarks: np.ndarray  # (T, 20, 2)
    spec: SyntheticSpeakerSpec


def make_clip(spec: SyntheticSpeakerSpec, size: int = 256) -> SyntheticClip:
    labels = sample_phonemes(spec)
    openings = np.array([spec.mouth_open[spec.vocab[l]] for l in labels])
    poses = spec.pose.sample(spec.duration_frames)
    frames, boxes, marks = [], [], []
    for pose, op in zip(poses, openings):
        frames.append(render_face(spec.style, pose, op, size))
        geo = FaceGeometry(spec.style, pose, op, size)
        boxes.append(geo.mouth_box())
        marks.append(geo.landmarks())
    return SyntheticClip(np.stack(frames), synthesize_audio(labels, openings), labels, poses,
                         openings, np.asarray(boxes, dtype=np.int64), np.stack(marks), spec)


def generate_synthetic_speaker(spec: SyntheticSpeakerSpec, out_dir) -> Path:
    """Write frames/*.png, audio.wav, phonemes.phn, poses.txt, mouth_boxes.txt,
    landmarks.npy and meta.json into out_dir."""
    out = Path(out_dir)
    clip = make_clip(spec)
    frame_dir = out / "frames"
    frame_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(clip.frames):
        Image.fromarray(frame).save(frame_dir / f"{i:06d}.png")
    audio_mod.write_wav(out / "audio.wav", clip.wave)
    audio_mod.save_phoneme_track(out / "phonemes.phn", clip.phonemes, spec.vocab)
    audio_mod.save_pose_track(out / "poses.txt", clip.poses)
    np.savetxt(out / "mouth_boxes.txt", clip.mouth_boxes, fmt="%d", delimiter=",")
    np.save(out / "landmarks.npy", clip.landmarks)
    meta = {
        "fps": FPS,
        "n_frames": spec.duration_frames,
        "face_diagonal": spec.style.face_diagonal,
        "openings": clip.openings.tolist(),
        "spec": spec.to_dict(),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")
    return out
