import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from talkface.errors import RejectedInputError
from talkface.motion import DenseMotionField, KeypointSet, make_coordinate_grid
from talkface.renderer import (
    KeypointDetector, Renderer, RendererConfig, compose_flow, heatmap_to_keypoints,
)

SMALL = RendererConfig(image_size=64, kp_expansion=8, kp_max_features=32, kp_blocks=2, motion_expansion=8,
                       motion_max_features=32, motion_blocks=2, gen_channels=16, gen_res_blocks=1, map_size=16)


def kp_pair(seed, b=2, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    pts = torch.rand(b, 10, 2, generator=g) * 1.6 - 0.8
    jac = torch.eye(2) + 0.2 * torch.randn(b, 10, 2, 2, generator=g)
    src = KeypointSet(pts.to(dtype), jac.to(dtype))
    drv = KeypointSet((pts + 0.1 * torch.randn(b, 10, 2, generator=g)).to(dtype), jac.to(dtype))
    return src, drv


def test_soft_argmax_uniform_and_delta():
    uniform = torch.full((1, 1, 64, 64), 1 / 64 ** 2, dtype=torch.float64)
    assert heatmap_to_keypoints(uniform).abs().max() <= 1e-12
    grid = make_coordinate_grid(64, 64, torch.float64)
    target = torch.tensor([0.5, -0.25], dtype=torch.float64)
    idx = (grid - target).norm(dim=-1).flatten().argmin()
    delta = torch.zeros(64 * 64, dtype=torch.float64)
    delta[idx] = 1
    pt = heatmap_to_keypoints(delta.reshape(1, 1, 64, 64))[0, 0]
    assert (pt - target).abs().max() <= 2 / 64


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_detector_range_and_shapes(seed):
    torch.manual_seed(seed)
    det = KeypointDetector(SMALL)
    img = torch.rand(2, 3, 64, 64)
    kp, latent = det(img)
    assert kp.points.shape == (2, 10, 2) and kp.jacobians.shape == (2, 10, 2, 2)
    assert kp.points.abs().max() <= 1.0
    assert latent.shape == (2, 32, 16, 16)


def test_detector_rejects_wrong_shape():
    with pytest.raises(RejectedInputError):
        KeypointDetector(SMALL)(torch.rand(1, 3, 32, 32))


def test_default_config_maps_are_64():
    cfg = RendererConfig()
    assert cfg.feature_size == 64 and cfg.map_size == 64 and cfg.latent_channels == 32


def test_dense_motion_identity_when_drv_equals_src():
    torch.manual_seed(0)
    r = Renderer(SMALL)
    src, _ = kp_pair(1)
    field, masks, _ = r.dense(torch.rand(2, 3, 64, 64), src, src)
    grid = make_coordinate_grid(16, 16)
    assert (field.flow - grid).abs().max() <= 1e-6
    assert torch.allclose(masks.sum(1), torch.ones(2, 16, 16), atol=1e-5)
    assert field.occlusion.min() >= 0 and field.occlusion.max() <= 1


def test_compose_flow_one_hot_cases():
    grid = make_coordinate_grid(8, 8, torch.float64)
    eye = torch.eye(2, dtype=torch.float64)
    from talkface.motion import local_affine_motion

    src = KeypointSet(torch.tensor([[[0.3, 0.1]]], dtype=torch.float64), eye.expand(1, 1, 2, 2))
    drv = KeypointSet(torch.tensor([[[0.1, 0.1]]], dtype=torch.float64), eye.expand(1, 1, 2, 2))
    cand = torch.cat([grid.expand(1, 1, 8, 8, 2), local_affine_motion(src, drv, grid)], 1)
    bg = torch.zeros(1, 2, 8, 8, dtype=torch.float64)
    bg[:, 0] = 1
    assert torch.equal(compose_flow(cand, bg), grid[None])
    fg = 1 - bg
    assert torch.allclose(compose_flow(cand, fg), grid[None] + torch.tensor([0.2, 0.0], dtype=torch.float64))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_flow_is_convex_combination(seed):
    torch.manual_seed(seed)
    r = Renderer(SMALL)
    src, drv = kp_pair(seed)
    field, _, cand = r.dense(torch.rand(2, 3, 64, 64), src, drv)
    lo, hi = cand.min(1).values, cand.max(1).values
    assert (field.flow >= lo - 1e-5).all() and (field.flow <= hi + 1e-5).all()


def test_render_range_determinism_and_occlusion_gating():
    torch.manual_seed(0)
    r = Renderer(SMALL).eval()
    src, drv = kp_pair(2)
    img = torch.rand(2, 3, 64, 64)
    out1, _ = r(img, src, drv)
    out2, _ = r(img, src, drv)
    assert torch.equal(out1, out2)
    assert out1.shape == (2, 3, 64, 64) and out1.min() >= 0 and out1.max() <= 1
    closed = DenseMotionField(make_coordinate_grid(16, 16).expand(2, 16, 16, 2), torch.zeros(2, 1, 16, 16))
    a = r.render(img, closed)
    b = r.render(torch.rand(2, 3, 64, 64), closed)
    assert torch.equal(a, b)


def test_overfit_autoencoder_identity_flow():
    """Identity flow with occlusion 1 reproduces the reference after overfitting the generator."""
    torch.manual_seed(0)
    r = Renderer(SMALL)
    y, x = torch.meshgrid(torch.linspace(0, 1, 64), torch.linspace(0, 1, 64), indexing="ij")
    img = torch.stack([x, y, 0.5 * (x + y)])[None] * 0.8 + 0.1
    field = DenseMotionField(make_coordinate_grid(16, 16)[None], torch.ones(1, 1, 16, 16))
    opt = torch.optim.Adam(r.generator.parameters(), lr=3e-3)
    for _ in range(300):
        opt.zero_grad()
        loss = (r.render(img, field) - img).abs().mean()
        loss.backward()
        opt.step()
    with torch.no_grad():
        assert (r.render(img, field) - img).abs().mean().item() <= 0.05


def test_untrained_generator_is_pure_warp():
    """At initialisation the generator copies the warped reference (up to the logit clamp)."""
    torch.manual_seed(0)
    r = Renderer(SMALL).eval()
    img = torch.rand(2, 3, 64, 64) * 0.9 + 0.05
    grid = make_coordinate_grid(16, 16).expand(2, 16, 16, 2)
    ident = DenseMotionField(grid, torch.ones(2, 1, 16, 16))
    with torch.no_grad():
        assert torch.allclose(r.render(img, ident), img, atol=1e-5)
        # a shift of one feature cell moves the image by four pixels
        shifted = DenseMotionField(grid + torch.tensor([2 / 15, 0.0]), torch.ones(2, 1, 16, 16))
        out = r.render(img, shifted)
    assert torch.allclose(out[..., :, :56], img[..., :, 4:60], atol=1e-5)
