"""End-to-end inference: audio + phonemes + one reference image -> video frames."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import audio as audio_mod
from .avct import AVCT, project_pose_track
from .errors import ConfigurationError, RejectedInputError
from .head_motion import HeadMotionPredictor, predict_head_motion
from .motion import KeypointSet, relative_motion_transfer
from .renderer import KeypointDetector, Renderer


@dataclass
class Models:
    detector: KeypointDetector
    renderer: Renderer
    avct: AVCT
    head_motion: HeadMotionPredictor | None = None
    d_sync: torch.nn.Module | None = None

    def eval(self) -> "Models":
        for m in (self.detector, self.renderer, self.avct, self.head_motion, self.d_sync):
            if m is not None:
                m.eval()
        return self


@dataclass
class InferenceResult:
    frames: torch.Tensor  # (T, 3, H, W)
    keypoints: KeypointSet  # raw transformer output
    transferred: KeypointSet  # after relative motion transfer
    reference: KeypointSet  # detected on the reference image
    poses: np.ndarray  # (T, 6)


@torch.no_grad()
def infer(ref_image: torch.Tensor, wave: audio_mod.Waveform | None, phonemes, models: Models,
          poses=None, h_ref=None, acoustic=None, chunk: int = 32) -> InferenceResult:
    """Animate ``ref_image`` (3, H, W) with the given speech.

    Head poses come from ``poses`` when supplied, else from the head-motion
    predictor anchored at ``h_ref`` (identity by default). ``acoustic`` may
    be passed to skip feature extraction.
    """
    if models is None or models.avct is None:
        raise ConfigurationError("inference needs a trained checkpoint")
    models.eval()
    if ref_image.ndim != 3:
        raise RejectedInputError("reference image must be (3, H, W)")
    if acoustic is None:
        if wave is None:
            raise RejectedInputError("need audio or precomputed acoustic features")
        acoustic = audio_mod.extract_acoustic_frames(wave)
    acoustic = np.asarray(acoustic)
    phonemes = np.asarray(phonemes)
    if poses is None:
        if models.head_motion is None:
            raise ConfigurationError("no pose track supplied and checkpoint has no head-motion model")
        anchor = np.zeros(6) if h_ref is None else np.asarray(h_ref, dtype=np.float64)
        poses = predict_head_motion(models.head_motion, acoustic, anchor)
    track = audio_mod.align_tracks(acoustic, phonemes, poses)
    ref = ref_image[None].float()
    kp_ref, latent = models.detector(ref)
    pred = models.avct.run_sequence(track.phonemes, project_pose_track(track.poses), track.acoustic,
                                    latent[0])
    moved = relative_motion_transfer(pred, kp_ref[0])
    out = []
    for s in range(0, len(moved), chunk):
        drv = moved[s:s + chunk]
        n = len(drv)
        src = KeypointSet(kp_ref.points.expand(n, -1, -1), kp_ref.jacobians.expand(n, -1, -1, -1))
        frames, _ = models.renderer(ref.expand(n, -1, -1, -1), src, drv)
        out.append(frames)
    return InferenceResult(torch.cat(out), pred, moved, kp_ref[0], track.poses)
