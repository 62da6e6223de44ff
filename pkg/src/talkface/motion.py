"""Keypoint + Jacobian motion representation and first-order dense motion.

Coordinates are normalized to [-1, 1] with x to the right and y down, using
the align-corners convention: -1 and 1 are the centres of the border pixels.
All functions accept arbitrary leading batch dimensions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericError, RejectedInputError

DET_EPS = 1e-6


@dataclass
class KeypointSet:
    points: torch.Tensor  # (..., N, 2)
    jacobians: torch.Tensor  # (..., N, 2, 2)

    def __post_init__(self):
        if self.points.shape[-1] != 2 or self.jacobians.shape[-2:] != (2, 2):
            raise RejectedInputError("keypoints must be (..., N, 2) with (..., N, 2, 2) jacobians")
        if self.points.shape[:-1] != self.jacobians.shape[:-2]:
            raise RejectedInputError(
                f"points {tuple(self.points.shape)} and jacobians "
                f"{tuple(self.jacobians.shape)} disagree")

    @property
    def num_kp(self) -> int:
        return self.points.shape[-2]

    def __len__(self):
        return self.points.shape[0]

    def __getitem__(self, idx) -> "KeypointSet":
        return KeypointSet(self.points[idx], self.jacobians[idx])

    def detach(self) -> "KeypointSet":
        return KeypointSet(self.points.detach(), self.jacobians.detach())

    def to(self, *args, **kwargs) -> "KeypointSet":
        return KeypointSet(self.points.to(*args, **kwargs), self.jacobians.to(*args, **kwargs))

    @staticmethod
    def stack(items, dim: int = 0) -> "KeypointSet":
        items = list(items)
        return KeypointSet(torch.stack([k.points for k in items], dim),
                           torch.stack([k.jacobians for k in items], dim))


def make_coordinate_grid(height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """(H, W, 2) grid of (x, y) pixel-centre coordinates in [-1, 1]."""
    x = 2 * torch.arange(width, dtype=dtype, device=device) / (width - 1) - 1
    y = 2 * torch.arange(height, dtype=dtype, device=device) / (height - 1) - 1
    yy, xx = torch.meshgrid(y, x, indexing="ij")
    return torch.stack([xx, yy], dim=-1)


def _det(j: torch.Tensor) -> torch.Tensor:
    return j[..., 0, 0] * j[..., 1, 1] - j[..., 0, 1] * j[..., 1, 0]


def invert_jacobian(j: torch.Tensor, warn: bool = True) -> torch.Tensor:
    """Closed-form inverse of (..., 2, 2) matrices.

    Matrices with |det| < 1e-6 are replaced by j + 1e-6 * I before inversion.
    """
    j = torch.as_tensor(j)
    det = _det(j)
    singular = det.abs() < DET_EPS
    if bool(singular.any()):
        if warn:
            warnings.warn(f"{int(singular.sum())} near-singular jacobian(s) regularized "
                          f"with {DET_EPS:g} * identity", RuntimeWarning, stacklevel=2)
        eye = torch.eye(2, dtype=j.dtype, device=j.device)
        j = torch.where(singular[..., None, None], j + DET_EPS * eye, j)
        det = _det(j)
        if bool((det == 0).any()):
            raise NumericError("jacobian remains singular after regularization")
    adj = torch.stack([
        torch.stack([j[..., 1, 1], -j[..., 0, 1]], dim=-1),
        torch.stack([-j[..., 1, 0], j[..., 0, 0]], dim=-1),
    ], dim=-2)
    return adj / det[..., None, None]


def relative_motion_transfer(kp_seq: KeypointSet, ref: KeypointSet) -> KeypointSet:
    """Re-anchor a (T, N, ...) keypoint sequence on a reference keypoint set.

    points_i' = points_i - points_1 + ref.points
    jac_i'    = jac_i @ inv(jac_1) @ ref.jacobians
    Frame 1 of the output is the reference itself.
    """
    if kp_seq.points.ndim != 3 or len(kp_seq) < 1:
        raise RejectedInputError("expected a nonempty (T, N, 2) keypoint sequence")
    if ref.points.shape != kp_seq.points.shape[1:]:
        raise RejectedInputError("reference and sequence disagree on keypoint count")
    first = kp_seq[0]
    points = kp_seq.points - first.points + ref.points
    relative = kp_seq.jacobians @ invert_jacobian(first.jacobians)
    jacobians = relative @ ref.jacobians
    # i = 1 is exact by construction, not up to rounding of J @ inv(J)
    points = torch.cat([ref.points[None], points[1:]])
    jacobians = torch.cat([ref.jacobians[None], jacobians[1:]])
    return KeypointSet(points, jacobians)


def local_affine_motion(src: KeypointSet, drv: KeypointSet, grid: torch.Tensor) -> torch.Tensor:
    """First-order backward flow candidates, one per keypoint.

    candidate_k(z) = src_k + J_src_k @ inv(J_drv_k) @ (z - drv_k)

    src/drv: (B, N, ...) keypoints; grid: (H, W, 2). Returns (B, N, H, W, 2).
    """
    if src.points.shape != drv.points.shape:
        raise RejectedInputError(
            f"source {tuple(src.points.shape)} and driving {tuple(drv.points.shape)} "
            "keypoints disagree")
    if grid.shape[-1] != 2 or grid.ndim != 3:
        raise RejectedInputError("grid must be (H, W, 2)")
    affine = src.jacobians @ invert_jacobian(drv.jacobians, warn=False)  # (B, N, 2, 2)
    offset = grid[None, None] - drv.points[..., None, None, :]  # (B, N, H, W, 2)
    moved = torch.einsum("bnij,bnhwj->bnhwi", affine, offset)
    return moved + src.points[..., None, None, :]


@dataclass
class DenseMotionField:
    flow: torch.Tensor  # (B, H, W, 2) backward-sampling coordinates
    occlusion: torch.Tensor | None = None  # (B, 1, H, W) in [0, 1]


def warp_image(img: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp (B, C, H, W) images with (B, h, w, 2) sampling coordinates.

    Bilinear sampling; samples outside [-1, 1] clamp to the border.
    Occlusion is not applied here.
    """
    if flow.shape[-1] != 2 or flow.ndim != 4 or img.ndim != 4 or flow.shape[0] != img.shape[0]:
        raise RejectedInputError(
            f"cannot warp image {tuple(img.shape)} with flow {tuple(flow.shape)}")
    return F.grid_sample(img, flow.to(img.dtype), mode="bilinear", padding_mode="border",
                         align_corners=True)


KEYPOINT_COLUMNS = ("x", "y", "j00", "j01", "j10", "j11")


def save_keypoint_track(path, kp: KeypointSet) -> None:
    """Text table: header '# frames=T keypoints=N columns=x,y,j00,j01,j10,j11', then T*N rows."""
    pts = kp.points.detach().cpu().double().numpy()
    jac = kp.jacobians.detach().cpu().double().numpy()
    t, n = pts.shape[:2]
    table = np.concatenate([pts, jac.reshape(t, n, 4)], axis=-1).reshape(t * n, 6)
    header = f"frames={t} keypoints={n} columns={','.join(KEYPOINT_COLUMNS)}"
    np.savetxt(str(path), table, fmt="%.9f", header=header)


def load_keypoint_track(path) -> KeypointSet:
    first = Path(path).read_text(encoding="utf-8").splitlines()[0]
    fields = dict(tok.split("=", 1) for tok in first.lstrip("# ").split())
    try:
        t, n = int(fields["frames"]), int(fields["keypoints"])
    except (KeyError, ValueError):
        raise RejectedInputError(f"{path}: malformed keypoint track header") from None
    table = np.loadtxt(str(path), ndmin=2)
    if table.shape != (t * n, 6):
        raise RejectedInputError(f"{path}: expected {t * n}x6 table, got {table.shape}")
    table = torch.from_numpy(table.reshape(t, n, 6))
    return KeypointSet(table[..., :2].clone(), table[..., 2:].reshape(t, n, 2, 2).clone())
