"""Random image warps with analytic Jacobians, used by the equivariance losses."""

from __future__ import annotations

import torch

from .errors import RejectedInputError
from .motion import make_coordinate_grid, warp_image


class SimilarityTransform:
    """z -> scale * R(angle) @ z + shift, batched over the leading dimension."""

    def __init__(self, angle, scale, shift):
        self.angle = torch.as_tensor(angle)
        self.scale = torch.as_tensor(scale, dtype=self.angle.dtype)
        self.shift = torch.as_tensor(shift, dtype=self.angle.dtype)
        if bool((self.scale.abs() < 1e-8).any()):
            raise RejectedInputError("similarity transform with zero scale is not invertible")

    @classmethod
    def random(cls, batch: int, generator: torch.Generator | None = None, sigma_angle=0.1,
               sigma_scale=0.05, sigma_shift=0.05, dtype=torch.float32):
        def draw(*shape):
            return torch.randn(*shape, generator=generator, dtype=torch.float64).to(dtype)

        return cls(sigma_angle * draw(batch), 1 + sigma_scale * draw(batch), sigma_shift * draw(batch, 2))

    @classmethod
    def identity(cls, batch: int = 1, dtype=torch.float32):
        return cls(torch.zeros(batch, dtype=dtype), torch.ones(batch, dtype=dtype),
                   torch.zeros(batch, 2, dtype=dtype))

    def matrix(self) -> torch.Tensor:
        c, s = torch.cos(self.angle), torch.sin(self.angle)
        rot = torch.stack([torch.stack([c, -s], -1), torch.stack([s, c], -1)], -2)
        return self.scale[..., None, None] * rot

    def _broadcast(self, t: torch.Tensor, ndim: int) -> torch.Tensor:
        return t.reshape(t.shape[:1] + (1,) * (ndim - 1) + t.shape[1:])

    def __call__(self, points: torch.Tensor) -> torch.Tensor:
        """points: (B, ..., 2)."""
        m = self._broadcast(self.matrix().to(points), points.ndim - 1)
        shift = self._broadcast(self.shift.to(points), points.ndim - 1)
        return (m @ points[..., None])[..., 0] + shift

    def inverse(self, points: torch.Tensor) -> torch.Tensor:
        m = self._broadcast(self.matrix().to(points), points.ndim - 1)
        shift = self._broadcast(self.shift.to(points), points.ndim - 1)
        inv = m.transpose(-1, -2) / (self.scale.to(points) ** 2).reshape(m.shape[:1] + (1,) * (m.ndim - 1))
        return (inv @ (points - shift)[..., None])[..., 0]

    def jacobian(self, points: torch.Tensor) -> torch.Tensor:
        """(B, ..., 2) -> (B, ..., 2, 2); constant for a similarity."""
        m = self._broadcast(self.matrix().to(points), points.ndim - 1)
        return m.expand(points.shape[:-1] + (2, 2))

    def warp(self, images: torch.Tensor) -> torch.Tensor:
        """Resample so that content at p moves to self(p)."""
        b, _, h, w = images.shape
        grid = make_coordinate_grid(h, w, images.dtype, images.device).expand(b, h, w, 2)
        return warp_image(images, self.inverse(grid))


class ThinPlateTransform:
    """Random affine + thin-plate-spline deformation of the plane.

    T(z) = A z + b + sum_c w_c U(|z - c|),  U(r) = r^2 log(r + eps)
    Images are warped by sampling at T(z), so keypoints detected on the
    warped image map back onto the original through T.
    """

    EPS = 1e-6

    def __init__(self, affine, control_points, control_params):
        self.affine = affine  # (B, 2, 3)
        self.control_points = control_points  # (K, 2)
        self.control_params = control_params  # (B, K, 2)

    @classmethod
    def random(cls, batch: int, generator: torch.Generator | None = None, sigma_affine=0.05,
               sigma_tps=0.005, points_tps=5, dtype=torch.float32):
        noise = torch.randn(batch, 2, 3, generator=generator, dtype=torch.float64).to(dtype)
        affine = sigma_affine * noise + torch.eye(2, 3, dtype=dtype)
        control = make_coordinate_grid(points_tps, points_tps, dtype).reshape(-1, 2)
        params = sigma_tps * torch.randn(batch, points_tps ** 2, 2, generator=generator,
                                         dtype=torch.float64).to(dtype)
        det = affine[:, 0, 0] * affine[:, 1, 1] - affine[:, 0, 1] * affine[:, 1, 0]
        if bool((det.abs() < 1e-3).any()):
            raise RejectedInputError("sampled a non-invertible affine component")
        return cls(affine, control, params)

    def _parts(self, points):
        b = points.shape[0]
        flat = points.reshape(b, -1, 2)
        diff = flat[:, :, None, :] - self.control_points.to(points)[None, None]  # (B, P, K, 2)
        r = diff.pow(2).sum(-1).add(1e-12).sqrt()
        return flat, diff, r

    def __call__(self, points: torch.Tensor) -> torch.Tensor:
        shape = points.shape
        flat, _, r = self._parts(points)
        a = self.affine.to(points)
        out = flat @ a[:, :, :2].transpose(1, 2) + a[:, None, :, 2]
        u = r ** 2 * torch.log(r + self.EPS)
        out = out + u @ self.control_params.to(points)
        return out.reshape(shape)

    def jacobian(self, points: torch.Tensor) -> torch.Tensor:
        shape = points.shape
        flat, diff, r = self._parts(points)
        a = self.affine.to(points)
        # dU/dz = (2 log(r + eps) + r / (r + eps)) * (z - c)
        coeff = 2 * torch.log(r + self.EPS) + r / (r + self.EPS)
        du = coeff[..., None] * diff  # (B, P, K, 2)
        tps = torch.einsum("bki,bpkj->bpij", self.control_params.to(points), du)
        jac = a[:, None, :, :2] + tps
        return jac.reshape(shape[:-1] + (2, 2))

    def warp(self, images: torch.Tensor) -> torch.Tensor:
        b, _, h, w = images.shape
        grid = make_coordinate_grid(h, w, images.dtype, images.device).expand(b, h, w, 2)
        return warp_image(images, self(grid.contiguous()))
