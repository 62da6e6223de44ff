"""Audio-visual correlation transformer.

The encoder attends over a window of 2n+1 frames of (phoneme embedding, pose
image) features. The decoder's initial query is built per frame from the
reference keypoint latent and upsampled acoustic features; the centre
embedding of the decoder output is projected to keypoints and Jacobians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .audio import N_FEATURES, SUBFRAMES
from .errors import RejectedInputError
from .motion import KeypointSet


@dataclass
class AVCTConfig:
    vocab_size: int = 41
    num_kp: int = 10
    window: int = 5
    d_model: int = 512
    n_heads: int = 8
    enc_layers: int = 4
    dec_layers: int = 4
    d_ff: int = 1024
    map_size: int = 64
    latent_channels: int = 32
    audio_channels: int = 32

    @property
    def window_length(self) -> int:
        return 2 * self.window + 1


# ---------------------------------------------------------------- pose images

def _rotation(pitch, yaw, roll) -> np.ndarray:
    cx, sx = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    cz, sz = math.cos(roll), math.sin(roll)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


_CORNERS = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
_EDGES = [(a, b) for a in range(8) for b in range(a + 1, 8)
          if np.sum(_CORNERS[a] != _CORNERS[b]) == 1]
EDGE_RADIUS_PX = 0.75


def project_pose(pose, map_size: int = 64) -> np.ndarray:
    """Rasterize a unit head box under the pose, orthographically projected.

    A pixel is set when its centre lies within 0.75 px of a projected edge.
    Translation is in normalized units, so 2 / map_size moves the mask by
    one pixel.
    """
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (6,) or not np.all(np.isfinite(pose)):
        raise RejectedInputError("pose must be 6 finite values")
    pts = _CORNERS @ _rotation(*pose[:3]).T + pose[3:]
    uv = (pts[:, :2] + 1.0) * map_size / 2 - 0.5  # pixel units, centres on integers
    a = np.array([uv[i] for i, _ in _EDGES])
    b = np.array([uv[j] for _, j in _EDGES])
    jj, ii = np.meshgrid(np.arange(map_size), np.arange(map_size))
    p = np.stack([jj.ravel(), ii.ravel()], -1).astype(np.float64)
    ab = b - a
    denom = np.maximum((ab ** 2).sum(-1), 1e-12)
    t = np.clip(((p[:, None] - a[None]) * ab[None]).sum(-1) / denom, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    dist = np.sqrt(((p[:, None] - closest) ** 2).sum(-1)).min(-1)
    return (dist <= EDGE_RADIUS_PX).reshape(map_size, map_size).astype(np.float32)


def project_pose_track(poses, map_size: int = 64) -> torch.Tensor:
    """(T, 6) poses -> (T, 1, m, m) binary maps."""
    return torch.from_numpy(np.stack([project_pose(p, map_size) for p in np.asarray(poses)]))[:, None]


# ---------------------------------------------------------------- building blocks

def sinusoidal_encoding(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)
    return pe.float()


class AcousticNorm(nn.Module):
    """Fixed per-column standardization of 4x41 acoustic frames."""

    def __init__(self):
        super().__init__()
        self.register_buffer("mean", torch.zeros(N_FEATURES))
        self.register_buffer("std", torch.ones(N_FEATURES))

    @torch.no_grad()
    def fit(self, acoustic):
        a = torch.as_tensor(np.asarray(acoustic), dtype=torch.float64).reshape(-1, N_FEATURES)
        self.mean.copy_(a.mean(0).to(self.mean))
        self.std.copy_(a.std(0).clamp_min(1e-3).to(self.std))

    def forward(self, a):
        return (a - self.mean.to(a)) / self.std.to(a)


class ResDown(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(min(8, cout), cout)
        self.norm2 = nn.GroupNorm(min(8, cout), cout)
        self.skip = nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        out = F.silu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.silu(out + self.skip(F.avg_pool2d(x, 2)))


class DownsamplingStack(nn.Module):
    """Five 2x-downsampling residual blocks, then a projection to one token."""

    CHANNELS = (16, 32, 64, 128, 128)

    def __init__(self, in_channels: int, map_size: int, d_model: int):
        super().__init__()
        chans = (in_channels,) + self.CHANNELS
        self.blocks = nn.Sequential(*[ResDown(a, b) for a, b in zip(chans[:-1], chans[1:])])
        side = map_size // 2 ** len(self.CHANNELS)
        if side < 1:
            raise RejectedInputError(f"map_size {map_size} too small for five downsamplings")
        self.proj = nn.Linear(self.CHANNELS[-1] * side * side, d_model)
        # unit-variance tokens keep content on the same scale as the positional code
        self.norm = nn.LayerNorm(d_model)

    def forward(self, x):
        return self.norm(self.proj(self.blocks(x).flatten(1)))


class AudioUpsampler(nn.Module):
    """Acoustic frame (4x41) -> 32 x m x m feature map."""

    def __init__(self, out_channels: int, map_size: int):
        super().__init__()
        self.base = map_size // 4
        self.fc = nn.Linear(SUBFRAMES * N_FEATURES, 32 * self.base * self.base)
        self.conv1 = nn.Conv2d(32, 32, 3, padding=1)
        self.conv2 = nn.Conv2d(32, 32, 3, padding=1)
        self.out = nn.Conv2d(32, out_channels, 1)
        self.out_norm = nn.GroupNorm(min(8, out_channels), out_channels)
        self.map_size = map_size

    def forward(self, a):
        x = F.silu(self.fc(a.flatten(1))).reshape(-1, 32, self.base, self.base)
        x = F.silu(self.conv1(x))
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = F.silu(self.conv2(x))
        x = F.interpolate(x, size=(self.map_size,) * 2, mode="bilinear", align_corners=False)
        return self.out_norm(self.out(x))


# ---------------------------------------------------------------- model

class AVCT(nn.Module):
    def __init__(self, cfg: AVCTConfig | None = None):
        super().__init__()
        cfg = cfg or AVCTConfig()
        self.cfg = cfg
        m = cfg.map_size
        if m % 4:
            raise RejectedInputError("map_size must be divisible by 4")
        self.phoneme_embedding = nn.Embedding(cfg.vocab_size, (m // 4) ** 2)
        self.acoustic_norm = AcousticNorm()
        self.audio_net = AudioUpsampler(cfg.audio_channels, m)
        self.encoder_stack = DownsamplingStack(2, m, cfg.d_model)
        self.query_stack = DownsamplingStack(cfg.latent_channels + cfg.audio_channels, m, cfg.d_model)
        self.register_buffer("positional", sinusoidal_encoding(cfg.window_length, cfg.d_model),
                             persistent=False)
        self.pe_scale = 1.0
        enc_layer = nn.TransformerEncoderLayer(cfg.d_model, cfg.n_heads, cfg.d_ff, dropout=0.0,
                                               activation="gelu", batch_first=True, norm_first=True)
        dec_layer = nn.TransformerDecoderLayer(cfg.d_model, cfg.n_heads, cfg.d_ff, dropout=0.0,
                                               activation="gelu", batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(enc_layer, cfg.enc_layers, enable_nested_tensor=False)
        self.decoder = nn.TransformerDecoder(dec_layer, cfg.dec_layers)
        self.out_norm = nn.LayerNorm(cfg.d_model)
        self.points_head = nn.Linear(cfg.d_model, cfg.num_kp * 2)
        self.jacobian_head = nn.Linear(cfg.d_model, cfg.num_kp * 4)
        for head in (self.points_head, self.jacobian_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    @torch.no_grad()
    def init_output_prior(self, keypoints: KeypointSet) -> None:
        """Set the head biases so an untrained model outputs the mean of ``keypoints``."""
        pts = keypoints.points.reshape(-1, self.cfg.num_kp, 2).mean(0).clamp(-0.999, 0.999)
        jac = keypoints.jacobians.reshape(-1, self.cfg.num_kp, 2, 2).mean(0)
        self.points_head.bias.copy_(torch.atanh(pts).reshape(-1))
        self.jacobian_head.bias.copy_((jac - torch.eye(2)).reshape(-1))

    # -- per-frame features

    def embed_phoneme(self, ids) -> torch.Tensor:
        """(...,) label ids -> (..., 1, m, m)."""
        ids = torch.as_tensor(ids, dtype=torch.long)
        if bool(((ids < 0) | (ids >= self.cfg.vocab_size)).any()):
            raise RejectedInputError(f"phoneme id outside [0, {self.cfg.vocab_size})")
        side = self.cfg.map_size // 4
        emb = self.phoneme_embedding(ids.reshape(-1)).reshape(-1, 1, side, side)
        up = F.interpolate(emb, scale_factor=4, mode="bilinear", align_corners=False)
        return up.reshape(ids.shape + up.shape[1:])

    def audio_maps(self, acoustic) -> torch.Tensor:
        """(F, 4, 41) -> (F, 32, m, m)."""
        return self.audio_net(self.acoustic_norm(acoustic))

    def _positional(self, x):
        return x + self.pe_scale * self.positional.to(x)

    def _check_window(self, x, name):
        if x.shape[1] != self.cfg.window_length:
            raise RejectedInputError(
                f"{name} window must have {self.cfg.window_length} frames, got {x.shape[1]}")

    # -- windowed operations

    def encode_window(self, phoneme_maps, pose_maps) -> torch.Tensor:
        """(B, 2n+1, 1, m, m) twice -> (B, 2n+1, d) encoder memory."""
        self._check_window(phoneme_maps, "phoneme")
        self._check_window(pose_maps, "pose")
        b, w = phoneme_maps.shape[:2]
        x = torch.cat([phoneme_maps, pose_maps.to(phoneme_maps)], dim=2).flatten(0, 1)
        tokens = self.encoder_stack(x).reshape(b, w, -1)
        return self.encoder(self._positional(tokens))

    def build_query(self, ref_latent, audio_maps) -> torch.Tensor:
        """ref_latent (B, 32, m, m), audio_maps (B, 2n+1, 32, m, m) -> (B, 2n+1, d)."""
        self._check_window(audio_maps, "audio")
        b, w = audio_maps.shape[:2]
        if ref_latent.shape[0] != b or ref_latent.shape[1:] != audio_maps.shape[2:]:
            raise RejectedInputError(
                f"reference latent {tuple(ref_latent.shape)} does not match audio maps "
                f"{tuple(audio_maps.shape)}")
        rep = ref_latent[:, None].expand(b, w, *ref_latent.shape[1:])
        x = torch.cat([rep, audio_maps], dim=2).flatten(0, 1)
        return self._positional(self.query_stack(x).reshape(b, w, -1))

    def decode_motion(self, memory, query, center: int | None = None) -> KeypointSet:
        center = self.cfg.window if center is None else center
        if not 0 <= center < self.cfg.window_length:
            raise RejectedInputError(f"centre index {center} outside the window")
        out = self.out_norm(self.decoder(query, memory)[:, center])
        b, n = out.shape[0], self.cfg.num_kp
        points = torch.tanh(self.points_head(out)).reshape(b, n, 2)
        eye = torch.eye(2, dtype=out.dtype, device=out.device)
        jacobians = eye + self.jacobian_head(out).reshape(b, n, 2, 2)
        return KeypointSet(points, jacobians)

    def forward(self, phonemes, pose_maps, acoustic, ref_latent) -> KeypointSet:
        """One window per batch row: phonemes (B, 2n+1), pose_maps (B, 2n+1, 1, m, m),
        acoustic (B, 2n+1, 4, 41), ref_latent (B, 32, m, m)."""
        b, w = phonemes.shape
        audio = self.audio_maps(acoustic.flatten(0, 1)).reshape(b, w, -1, *ref_latent.shape[-2:])
        memory = self.encode_window(self.embed_phoneme(phonemes), pose_maps)
        return self.decode_motion(memory, self.build_query(ref_latent, audio))

    # -- sequences

    def window_indices(self, frames, length: int) -> torch.Tensor:
        """Clip-level window indices with edge replication, (len(frames), 2n+1)."""
        n = self.cfg.window
        offsets = torch.arange(-n, n + 1)
        return (torch.as_tensor(frames)[:, None] + offsets[None]).clamp(0, length - 1)

    def run_frames(self, phonemes, pose_maps, acoustic, ref_latent, frames) -> KeypointSet:
        """Predict keypoints for selected frames of a clip.

        Per-frame features are computed once for the union of the windows and
        then gathered, which is equivalent to running each window separately.
        phonemes (T,), pose_maps (T, 1, m, m), acoustic (T, 4, 41),
        ref_latent (32, m, m) shared by all frames.
        """
        length = len(phonemes)
        idx = self.window_indices(frames, length)
        needed, inverse = torch.unique(idx, return_inverse=True)
        ph = self.embed_phoneme(torch.as_tensor(phonemes)[needed])
        pm = pose_maps[needed].to(ph)
        enc_tokens = self.encoder_stack(torch.cat([ph, pm], dim=1))
        audio = self.audio_maps(torch.as_tensor(acoustic, dtype=ph.dtype)[needed])
        rep = ref_latent[None].expand(len(needed), *ref_latent.shape).to(ph)
        query_tokens = self.query_stack(torch.cat([rep, audio], dim=1))
        memory = self.encoder(self._positional(enc_tokens[inverse]))
        query = self._positional(query_tokens[inverse])
        return self.decode_motion(memory, query)

    def run_sequence(self, phonemes, pose_maps, acoustic, ref_latent, chunk: int = 64) -> KeypointSet:
        """Keypoints for every frame of a track, (T, N, ...)."""
        length = len(phonemes)
        if length < 1:
            raise RejectedInputError("empty track")
        parts = [self.run_frames(phonemes, pose_maps, acoustic, ref_latent,
                                 torch.arange(s, min(s + chunk, length)))
                 for s in range(0, length, chunk)]
        return KeypointSet(torch.cat([p.points for p in parts]), torch.cat([p.jacobians for p in parts]))
