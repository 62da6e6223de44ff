"""Recurrent head-pose predictor anchored at the reference pose."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .audio import N_FEATURES, SUBFRAMES
from .avct import AcousticNorm, project_pose
from .errors import RejectedInputError

POSE_DOF = 6


@dataclass
class HeadMotionConfig:
    hidden: int = 256
    layers: int = 2
    pose_features: int = 64
    map_size: int = 64


class HeadMotionPredictor(nn.Module):
    """GRU over [flattened acoustic frame, projected pose image of h_ref].

    The output head emits per-frame pose deltas; poses are h_ref plus the
    running sum of deltas, with the first frame's delta included so the
    anchor loss has something to act on.
    """

    def __init__(self, cfg: HeadMotionConfig | None = None):
        super().__init__()
        cfg = cfg or HeadMotionConfig()
        self.cfg = cfg
        self.acoustic_norm = AcousticNorm()
        self.pose_proj = nn.Linear(cfg.map_size * cfg.map_size, cfg.pose_features)
        self.gru = nn.GRU(SUBFRAMES * N_FEATURES + cfg.pose_features, cfg.hidden, cfg.layers,
                          batch_first=True)
        self.delta_head = nn.Linear(cfg.hidden, POSE_DOF)
        nn.init.zeros_(self.delta_head.weight)
        nn.init.zeros_(self.delta_head.bias)

    def pose_image(self, h_ref: torch.Tensor) -> torch.Tensor:
        maps = [project_pose(h, self.cfg.map_size) for h in h_ref.detach().cpu().numpy()]
        return torch.as_tensor(np.stack(maps), dtype=h_ref.dtype, device=h_ref.device).flatten(1)

    def forward(self, acoustic: torch.Tensor, h_ref: torch.Tensor) -> torch.Tensor:
        """acoustic (B, T, 4, 41), h_ref (B, 6) -> poses (B, T, 6)."""
        if acoustic.ndim != 4 or acoustic.shape[1] == 0:
            raise RejectedInputError("acoustic input must be (B, T>0, 4, 41)")
        b, t = acoustic.shape[:2]
        a = self.acoustic_norm(acoustic).flatten(2)
        p = self.pose_proj(self.pose_image(h_ref))[:, None].expand(b, t, -1)
        hidden, _ = self.gru(torch.cat([a, p], dim=-1))
        deltas = self.delta_head(hidden)
        return h_ref[:, None] + torch.cumsum(deltas, dim=1)


def pose_anchor_loss(pred_first, h_ref) -> torch.Tensor:
    """Mean absolute difference over the six pose components."""
    a = torch.as_tensor(pred_first)
    b = torch.as_tensor(h_ref).to(a)
    return (a - b).abs().mean()


@torch.no_grad()
def predict_head_motion(model: HeadMotionPredictor, acoustic, h_ref=None) -> np.ndarray:
    """(T, 4, 41) acoustic frames and a 6-dof reference pose -> (T, 6) poses."""
    a = torch.as_tensor(np.asarray(acoustic), dtype=torch.float32)
    if a.ndim != 3 or len(a) == 0:
        raise RejectedInputError("need a nonempty (T, 4, 41) acoustic sequence")
    h = torch.zeros(POSE_DOF) if h_ref is None else torch.as_tensor(np.asarray(h_ref), dtype=torch.float32)
    model.eval()
    return model(a[None], h.reshape(1, POSE_DOF))[0].double().numpy()
