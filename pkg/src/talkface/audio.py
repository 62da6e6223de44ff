"""Frame-aligned acoustic features and track ingestion.

Every 40 ms video frame (25 fps) gets a 4x41 matrix: four 25 ms analysis
windows at 10 ms hop, each contributing 13 MFCC + 26 log mel filterbank
energies, followed by the frame's F0 (Hz / 500) and a voiced flag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.fft import dct
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import AlignmentError, RejectedInputError

SAMPLE_RATE = 16000
FPS = 25
FRAME_SAMPLES = SAMPLE_RATE // FPS  # 640
HOP_SAMPLES = 160
WIN_SAMPLES = 400
SUBFRAMES = 4
N_FFT = 512
N_MFCC = 13
N_FBANK = 26
F0_NORM = 500.0
F0_MIN, F0_MAX = 50.0, 500.0
VOICING_THRESHOLD = 0.5
SILENCE_RMS = 1e-4
N_FEATURES = N_MFCC + N_FBANK + 2  # 41
F0_COL = N_MFCC + N_FBANK
VOICED_COL = F0_COL + 1

# 40 ARPAbet phones (39 CMU phones plus schwa) after the silence token.
DEFAULT_VOCAB: tuple[str, ...] = (
    "SIL",
    "AA", "AE", "AH", "AO", "AW", "AX", "AY", "B", "CH", "D",
    "DH", "EH", "ER", "EY", "F", "G", "HH", "IH", "IY", "JH",
    "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S",
    "SH", "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH",
)


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise RejectedInputError(f"sample_rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise RejectedInputError("waveform must be mono (1-D)")
        if not np.all(np.isfinite(samples)):
            raise RejectedInputError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class HeadPose:
    """Rigid head pose: rotation (pitch, yaw, roll) in radians, translation in image units."""

    rotation: tuple[float, float, float]
    translation: tuple[float, float, float]

    def __post_init__(self):
        values = np.asarray(self.rotation + self.translation, dtype=np.float64)
        if values.shape != (6,) or not np.all(np.isfinite(values)):
            raise RejectedInputError("head pose needs 6 finite values")
        if np.any(np.abs(values[:3]) > math.pi):
            raise RejectedInputError("rotation components must lie in [-pi, pi]")

    @classmethod
    def identity(cls) -> "HeadPose":
        return cls((0.0, 0.0, 0.0), (0.0, 0.0, 0.0))

    @classmethod
    def from_array(cls, values) -> "HeadPose":
        v = [float(x) for x in values]
        if len(v) != 6:
            raise RejectedInputError(f"head pose needs 6 values, got {len(v)}")
        return cls(tuple(v[:3]), tuple(v[3:]))

    def as_array(self) -> np.ndarray:
        return np.array(self.rotation + self.translation, dtype=np.float64)


@dataclass
class ConditioningTrack:
    acoustic: np.ndarray  # (T, 4, 41)
    phonemes: np.ndarray  # (T,) int64
    poses: np.ndarray  # (T, 6)
    fps: int = FPS

    def __post_init__(self):
        n = len(self.acoustic)
        if n < 1 or len(self.phonemes) != n or len(self.poses) != n:
            raise RejectedInputError("conditioning track sequences must share a length >= 1")

    def __len__(self):
        return len(self.acoustic)


def read_wav(path) -> Waveform:
    """Read a WAV file as mono float samples in [-1, 1], resampled to 16 kHz."""
    rate, data = wavfile.read(str(path))
    if data.ndim > 1:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        samples = data.astype(np.float64)
    return resample(Waveform(samples, rate))


def write_wav(path, wave: Waveform) -> None:
    pcm = np.clip(np.round(wave.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), wave.sample_rate, pcm)


def resample(wave: Waveform, target: int = SAMPLE_RATE) -> Waveform:
    """Polyphase resampling; a no-op when the rate already matches."""
    if wave.sample_rate == target:
        return wave
    g = math.gcd(wave.sample_rate, target)
    out = resample_poly(wave.samples, target // g, wave.sample_rate // g)
    return Waveform(np.clip(out, -1.0, 1.0), target)


def _mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _inv_mel(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_filterbank(n_filters: int = N_FBANK, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   low_hz: float = 0.0, high_hz: float | None = None) -> np.ndarray:
    """Triangular filters evenly spaced on the mel scale, shape (n_filters, n_fft // 2 + 1)."""
    high_hz = sample_rate / 2 if high_hz is None else high_hz
    edges_hz = _inv_mel(np.linspace(_mel(low_hz), _mel(high_hz), n_filters + 2))
    freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    bank = np.zeros((n_filters, len(freqs)))
    for m in range(n_filters):
        lo, mid, hi = edges_hz[m:m + 3]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        bank[m] = np.maximum(0.0, np.minimum(rising, falling))
    return bank


_FILTERBANK = mel_filterbank()
_WINDOW = np.hamming(WIN_SAMPLES)


def _spectral_features(windows: np.ndarray) -> np.ndarray:
    """(..., 400) analysis windows -> (..., 39) MFCC ++ log FBANK."""
    spec = np.fft.rfft(windows * _WINDOW, N_FFT)
    power = (spec.real ** 2 + spec.imag ** 2) / N_FFT
    fbank = np.log(np.maximum(power @ _FILTERBANK.T, 1e-10))
    mfcc = dct(fbank, type=2, axis=-1, norm="ortho")[..., :N_MFCC]
    return np.concatenate([mfcc, fbank], axis=-1)


def estimate_f0(segment: np.ndarray, sample_rate: int = SAMPLE_RATE) -> float:
    """Normalized-autocorrelation pitch estimate in Hz; 0.0 when unvoiced."""
    x = segment - segment.mean()
    if np.sqrt(np.mean(x ** 2)) < SILENCE_RMS:
        return 0.0
    lag_min = int(math.floor(sample_rate / F0_MAX))
    lag_max = min(int(math.ceil(sample_rate / F0_MIN)), len(x) // 2)
    lags = np.arange(lag_min, lag_max + 1)
    r = np.empty(len(lags))
    for k, lag in enumerate(lags):
        a, b = x[:-lag], x[lag:]
        denom = math.sqrt(float(a @ a) * float(b @ b))
        r[k] = (a @ b) / denom if denom > 0 else 0.0
    best = float(r.max())
    if best < VOICING_THRESHOLD:
        return 0.0
    # earliest peak close to the global maximum avoids octave errors
    k = int(np.flatnonzero(r >= 0.9 * best)[0])
    while k + 1 < len(r) and r[k + 1] > r[k]:
        k += 1
    lag = float(lags[k])
    if 0 < k < len(r) - 1:
        denom = r[k - 1] - 2 * r[k] + r[k + 1]
        if denom != 0:
            lag += 0.5 * (r[k - 1] - r[k + 1]) / denom
    return sample_rate / lag


def extract_acoustic_frames(wave: Waveform) -> np.ndarray:
    """Waveform at 16 kHz -> (T, 4, 41) with T = floor(duration / 40 ms)."""
    if wave.sample_rate != SAMPLE_RATE:
        raise RejectedInputError(
            f"expected {SAMPLE_RATE} Hz audio, got {wave.sample_rate} Hz; resample first")
    n_frames = len(wave.samples) // FRAME_SAMPLES
    if n_frames < 1:
        raise RejectedInputError("waveform shorter than one 40 ms frame")
    # windows are centred on each 10 ms hop and zero-padded past the ends
    pad = (WIN_SAMPLES - HOP_SAMPLES) // 2
    padded = np.concatenate([np.zeros(pad), wave.samples, np.zeros(WIN_SAMPLES)])
    starts = (np.arange(n_frames)[:, None] * FRAME_SAMPLES
              + np.arange(SUBFRAMES)[None, :] * HOP_SAMPLES)
    windows = padded[starts[..., None] + np.arange(WIN_SAMPLES)]
    feats = np.zeros((n_frames, SUBFRAMES, N_FEATURES))
    feats[..., :F0_COL] = _spectral_features(windows)
    for i in range(n_frames):
        f0 = estimate_f0(wave.samples[i * FRAME_SAMPLES:(i + 1) * FRAME_SAMPLES])
        feats[i, :, F0_COL] = f0 / F0_NORM
        feats[i, :, VOICED_COL] = 1.0 if f0 > 0 else 0.0
    return feats


def load_phoneme_track(path, vocab: Sequence[str] = DEFAULT_VOCAB) -> np.ndarray:
    index = {tok: i for i, tok in enumerate(vocab)}
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    labels = []
    for lineno, line in enumerate(lines, start=1):
        tok = line.strip()
        if not tok:
            continue
        if tok not in index:
            raise RejectedInputError(f"unknown phoneme token {tok!r} at line {lineno} of {path}")
        labels.append(index[tok])
    if not labels:
        raise RejectedInputError(f"phoneme track {path} is empty")
    return np.asarray(labels, dtype=np.int64)


def save_phoneme_track(path, labels, vocab: Sequence[str] = DEFAULT_VOCAB) -> None:
    Path(path).write_text("".join(vocab[int(i)] + "\n" for i in labels), encoding="utf-8")


def load_pose_track(path) -> np.ndarray:
    """Pose file (pitch,yaw,roll,tx,ty,tz per line) -> (T, 6)."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise RejectedInputError(
                f"pose track {path} line {lineno}: expected 6 columns, got {len(parts)}")
        try:
            pose = HeadPose.from_array(parts)
        except ValueError as exc:
            raise RejectedInputError(f"pose track {path} line {lineno}: {exc}") from None
        rows.append(pose.as_array())
    if not rows:
        raise RejectedInputError(f"pose track {path} is empty")
    return np.stack(rows)


def save_pose_track(path, poses) -> None:
    lines = [",".join(f"{v:.8f}" for v in row) for row in np.asarray(poses, dtype=np.float64)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def align_tracks(acoustic, phonemes, poses, max_slack: int = 2) -> ConditioningTrack:
    lengths = (len(acoustic), len(phonemes), len(poses))
    if min(lengths) < 1:
        raise RejectedInputError(f"empty track among lengths {lengths}")
    if max(lengths) - min(lengths) > max_slack:
        raise AlignmentError(
            f"track lengths differ by more than {max_slack} frames: "
            f"acoustic={lengths[0]}, phonemes={lengths[1]}, poses={lengths[2]}")
    n = min(lengths)
    return ConditioningTrack(
        acoustic=np.asarray(acoustic, dtype=np.float64)[:n],
        phonemes=np.asarray(phonemes, dtype=np.int64)[:n],
        poses=np.asarray(poses, dtype=np.float64)[:n],
    )
