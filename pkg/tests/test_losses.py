import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from torch import nn

from talkface.discriminators import FeaturePyramid, SyncDiscriminator, TemporalDiscriminator
from talkface.errors import RejectedInputError
from talkface.losses import (
    LossModules, LossWeights, crop_box, crop_mouth, equivariance_losses, perceptual_loss, sync_centres,
    sync_hinge_loss, sync_loss, sync_loss_from_probability, sync_probability, temporal_gan_losses, total_loss,
)
from talkface.motion import KeypointSet
from talkface.transforms import SimilarityTransform

# ---------------------------------------------------------------- sync probability


def test_sync_probability_trivial_cases():
    e = torch.zeros(256, dtype=torch.float64)
    e[0] = 1
    assert sync_probability(e, e).item() == 1.0
    f = torch.zeros(256, dtype=torch.float64)
    f[1] = 3
    assert sync_probability(e, f).item() == 0.0
    assert sync_probability(torch.zeros(256), torch.randn(256)).item() == 0.0
    assert sync_probability(torch.zeros(256), torch.zeros(256)).item() == 0.0


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 16, elements=st.floats(-1e3, 1e3)), arrays(np.float64, 16, elements=st.floats(-1e3, 1e3)))
def test_sync_probability_range_and_oracle(a, b):
    p = sync_probability(torch.from_numpy(a), torch.from_numpy(b)).item()
    assert -1.0 - 1e-12 <= p <= 1.0 + 1e-12
    denom = max(np.linalg.norm(a) * np.linalg.norm(b), 1e-8)
    assert p == pytest.approx(float(a @ b) / denom, abs=1e-9)


def test_sync_loss_clamp_values():
    p = torch.tensor([1.0, 0.0, -0.5, 0.5], dtype=torch.float64)
    loss = sync_loss_from_probability(p)
    assert loss[0].item() == 0.0
    assert loss[1].item() == pytest.approx(16.118095650958, abs=1e-9)
    assert loss[2].item() == loss[1].item()
    assert loss[3].item() == pytest.approx(math.log(2))


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-7, 1.0), st.floats(1e-7, 1.0))
def test_sync_loss_monotone(p, q):
    lp, lq = sync_loss_from_probability(torch.tensor([p, q], dtype=torch.float64))
    if p < q:
        assert lp >= lq
    elif p > q:
        assert lp <= lq


def test_sync_loss_rejects_wrong_window():
    d = SyncDiscriminator()
    with pytest.raises(RejectedInputError):
        sync_loss(torch.rand(1, 4, 3, 96, 96), torch.rand(1, 4, 4, 41), d)


def test_sync_loss_resizes_crops():
    torch.manual_seed(0)
    d = SyncDiscriminator().eval()
    out = sync_loss(torch.rand(2, 5, 3, 48, 48), torch.rand(2, 5, 4, 41), d)
    assert out.shape == (2,) and torch.isfinite(out).all()


def test_sync_hinge_zero_when_margins_met():
    assert sync_hinge_loss(torch.tensor([0.9, 1.0]), torch.tensor([-0.9, -1.0])).item() == 0.0
    assert sync_hinge_loss(torch.tensor([0.0]), torch.tensor([0.0])).item() == pytest.approx(1.6)


# ---------------------------------------------------------------- temporal GAN


def test_patch_grid_for_256():
    d = TemporalDiscriminator(4)
    out = d(torch.rand(4, 3, 256, 256))
    assert out.shape[-2:] == (16, 16)
    assert TemporalDiscriminator.patch_grid(256) == 16 >= 8


def test_gan_terms_equal_inputs_and_target():
    class Const(nn.Module):
        def __init__(self, v):
            super().__init__()
            self.v = v

        def forward(self, x):
            if x.ndim == 4:
                x = x[None]
            return torch.full((x.shape[0], 1, 4, 4), self.v)

    x = torch.rand(6, 3, 32, 32)
    gen, disc = temporal_gan_losses(x, x.clone(), Const(1.0))
    assert gen.item() == 0.0 and disc.item() == 1.0
    gen, disc = temporal_gan_losses(x, x.clone(), Const(0.5))
    assert gen.item() == 0.25 and disc.item() == 0.5
    with pytest.raises(RejectedInputError):
        temporal_gan_losses(x, x[:5], Const(1.0))


def test_gan_disc_term_does_not_reach_generator():
    d = TemporalDiscriminator(4)
    fake = torch.rand(4, 3, 64, 64, requires_grad=True)
    _, disc = temporal_gan_losses(torch.rand(4, 3, 64, 64), fake, d)
    disc.backward()
    assert fake.grad is None


# ---------------------------------------------------------------- perceptual


def test_perceptual_properties():
    net = FeaturePyramid()
    g = torch.Generator().manual_seed(0)
    a = torch.rand(2, 3, 64, 64, generator=g)
    b = torch.rand(2, 3, 64, 64, generator=g)
    assert perceptual_loss(a, a, net).abs().max().item() == 0.0
    assert torch.allclose(perceptual_loss(a, b, net), perceptual_loss(b, a, net))
    big = perceptual_loss(a, a + 0.1 * torch.rand(a.shape, generator=g), net)
    small = perceptual_loss(a, a + 0.01 * torch.rand(a.shape, generator=g), net)
    assert (big > small).all()
    assert len(net(a)) == 4
    assert not any(p.requires_grad for p in net.parameters())
    with pytest.raises(RejectedInputError):
        perceptual_loss(a, b[:, :, :32], net)


def test_feature_pyramid_seeded():
    x = torch.rand(1, 3, 32, 32)
    for fa, fb in zip(FeaturePyramid(seed=4)(x), FeaturePyramid(seed=4)(x)):
        assert torch.equal(fa, fb)


# ---------------------------------------------------------------- crops


def test_crop_index_slice_oracle():
    frame = torch.rand(3, 256, 256)
    patch = crop_box(frame, (96, 128, 160, 192))
    assert torch.equal(patch, frame[:, 128:192, 96:160])
    assert crop_mouth(frame, (96, 128, 160, 192)).shape == (3, 96, 96)


def test_crop_full_frame_is_resize():
    frame = torch.rand(3, 192, 192)
    full = crop_mouth(frame, (0, 0, 192, 192))
    ref = nn.functional.interpolate(frame[None], size=(96, 96), mode="bilinear", align_corners=False)[0]
    assert torch.equal(full, ref)


@pytest.mark.parametrize("box", [(10, 10, 10, 40), (10, 40, 30, 20), (-1, 0, 20, 20), (0, 0, 300, 40)])
def test_crop_rejects_bad_boxes(box):
    with pytest.raises(RejectedInputError):
        crop_mouth(torch.rand(3, 256, 256), box)


# ---------------------------------------------------------------- equivariance


class FixedDetector(nn.Module):
    def __init__(self, kp):
        super().__init__()
        self.kp = kp

    def forward(self, img):
        b = img.shape[0]
        return KeypointSet(self.kp.points.expand(b, -1, -1), self.kp.jacobians.expand(b, -1, -1, -1)), None


def test_equivariance_zero_on_identity():
    g = torch.Generator().manual_seed(1)
    kp = KeypointSet(torch.rand(10, 2, generator=g, dtype=torch.float64) - 0.5,
                     torch.eye(2, dtype=torch.float64) + 0.1 * torch.randn(10, 2, 2, generator=g, dtype=torch.float64))
    frames = torch.rand(3, 3, 16, 16, dtype=torch.float64)
    pred = KeypointSet(kp.points.expand(3, -1, -1), kp.jacobians.expand(3, -1, -1, -1))
    k, j = equivariance_losses(pred, frames, FixedDetector(kp), SimilarityTransform.identity(3, torch.float64))
    assert k.abs().max() == 0 and j.abs().max() == 0


def test_equivariance_translation_jacobian_is_plain_difference():
    g = torch.Generator().manual_seed(2)
    det = KeypointSet(torch.zeros(10, 2, dtype=torch.float64), torch.eye(2, dtype=torch.float64).repeat(10, 1, 1))
    pj = torch.eye(2, dtype=torch.float64) + torch.randn(1, 10, 2, 2, generator=g, dtype=torch.float64)
    pred = KeypointSet(torch.zeros(1, 10, 2, dtype=torch.float64), pj)
    tr = SimilarityTransform(torch.zeros(1, dtype=torch.float64), torch.ones(1, dtype=torch.float64),
                             torch.tensor([[0.2, -0.1]], dtype=torch.float64))
    _, j = equivariance_losses(pred, torch.rand(1, 3, 8, 8, dtype=torch.float64), FixedDetector(det), tr)
    assert j.item() == pytest.approx((pj[0] - det.jacobians).abs().mean().item(), abs=1e-12)


# ---------------------------------------------------------------- total loss


class MeanSeq(nn.Module):
    """Patch score = mean intensity of the stacked sequence."""

    def forward(self, x):
        if x.ndim == 4:
            x = x[None]
        return x.mean(dim=(1, 2, 3, 4)).reshape(-1, 1, 1, 1)


class MeanSync(nn.Module):
    """Embeddings (window mean, 1) for crops and (0.1 * window mean + 0.3, 1) for audio."""

    def forward(self, crops, acoustic):
        v = crops.flatten(1).mean(1)
        a = acoustic.flatten(1).mean(1)
        return torch.stack([v - 0.5, torch.ones_like(v)], 1), torch.stack([0.1 * a - 0.3, torch.ones_like(a)], 1)


class Identity(nn.Module):
    def forward(self, x):
        return [x]


def fixture(t=24):
    """Per-frame constant images so every term has a closed form."""
    r = np.random.default_rng(42)
    u = r.uniform(0.2, 0.8, t)  # real intensities
    v = r.uniform(0.2, 0.8, t)  # fake intensities
    aud = r.normal(size=(t, 4, 41))
    real = torch.from_numpy(np.broadcast_to(u[:, None, None, None], (t, 3, 32, 32)).copy())
    fake = torch.from_numpy(np.broadcast_to(v[:, None, None, None], (t, 3, 32, 32)).copy())
    det_pts = r.uniform(-0.5, 0.5, (10, 2))
    det_jac = np.eye(2) + 0.1 * r.normal(size=(10, 2, 2))
    pred_pts = r.uniform(-0.5, 0.5, (t, 10, 2))
    pred_jac = np.eye(2) + 0.1 * r.normal(size=(t, 10, 2, 2))
    return dict(u=u, v=v, aud=aud, real=real, fake=fake, det_pts=det_pts, det_jac=det_jac,
                pred_pts=pred_pts, pred_jac=pred_jac)


def hand_composite(f, w: LossWeights):
    """Composite objective evaluated with numpy on the closed forms of each stub."""
    u, v, aud = f["u"], f["v"], f["aud"]
    t = len(u)
    adv = (v.mean() - 1) ** 2
    seq = adv + w.lambda_pixel * np.abs(v - u).mean()
    sync_sum = 0.0
    for c in range(2, t - 2):
        ev = np.array([v[c - 2:c + 3].mean() - 0.5, 1.0])
        ea = np.array([0.1 * aud[c - 2:c + 3].mean() - 0.3, 1.0])
        p = ev @ ea / max(np.linalg.norm(ev) * np.linalg.norm(ea), 1e-8)
        sync_sum += -np.log(np.clip(p, 1e-7, 1))
    vgg = 2 * np.abs(v - u)  # scales 1 and 2 of a constant image
    eqk = np.abs(f["det_pts"][None] - f["pred_pts"]).reshape(t, -1).mean(1)
    eqj = np.abs(f["det_jac"][None] - f["pred_jac"]).reshape(t, -1).mean(1)
    per_frame = (w.lambda_v * vgg + w.lambda_eq_p * eqk + w.lambda_eq_j * eqj).sum() / t
    return seq + w.lambda_sync / (t - 4) * sync_sum + per_frame


def run_total(f, w):
    det = KeypointSet(torch.from_numpy(f["det_pts"]), torch.from_numpy(f["det_jac"]))
    modules = LossModules(FixedDetector(det), MeanSeq(), MeanSync(), Identity())
    pred = KeypointSet(torch.from_numpy(f["pred_pts"]), torch.from_numpy(f["pred_jac"]))
    t = len(f["u"])
    boxes = np.tile([8, 8, 24, 24], (t, 1))
    return total_loss(f["real"], f["fake"], pred, boxes, torch.from_numpy(f["aud"]), w, modules,
                      SimilarityTransform.identity(t, torch.float64))


def test_total_loss_matches_hand_composite():
    f = fixture()
    w = LossWeights()
    total, br = run_total(f, w)
    assert total.item() == pytest.approx(hand_composite(f, w), abs=1e-6)
    assert br["sync_count"] == 20 and br["sync_normalizer"] == 20
    assert br["terms"]["sync"].shape == (20,)


def test_total_loss_term_count_general():
    for t in (5, 9, 24):
        assert len(sync_centres(t)) == t - 4
        assert list(sync_centres(t))[0] == 2 and list(sync_centres(t))[-1] == t - 3


def test_total_loss_weight_linearity():
    f = fixture()
    _, b1 = run_total(f, LossWeights())
    _, b2 = run_total(f, LossWeights(lambda_v=2.0))
    assert b2["vgg"].item() == pytest.approx(2 * b1["vgg"].item(), rel=1e-12)
    for k in ("seq", "sync", "eq_K", "eq_J"):
        assert b2[k].item() == b1[k].item()


def test_total_loss_zero_case():
    f = fixture(8)
    f["v"] = f["u"]
    f["fake"] = f["real"].clone()
    f["pred_pts"] = np.broadcast_to(f["det_pts"], f["pred_pts"].shape).copy()
    f["pred_jac"] = np.broadcast_to(f["det_jac"], f["pred_jac"].shape).copy()

    class PerfectSync(nn.Module):
        def forward(self, crops, acoustic):
            e = torch.ones(crops.shape[0], 4, dtype=crops.dtype)
            return e, e

    det = KeypointSet(torch.from_numpy(f["det_pts"]), torch.from_numpy(f["det_jac"]))
    modules = LossModules(FixedDetector(det), MeanSeq(), PerfectSync(), Identity())
    pred = KeypointSet(torch.from_numpy(f["pred_pts"]), torch.from_numpy(f["pred_jac"]))
    total, br = total_loss(f["real"], f["fake"], pred, np.tile([8, 8, 24, 24], (8, 1)),
                           torch.from_numpy(f["aud"]), LossWeights(), modules,
                           SimilarityTransform.identity(8, torch.float64))
    for k in ("sync", "vgg", "eq_K", "eq_J", "pixel"):
        assert br[k].item() == 0.0
    assert total.item() == pytest.approx(br["seq_adv"].item())


def test_total_loss_rejects_short_and_mismatched():
    f = fixture(4)
    with pytest.raises(RejectedInputError):
        run_total(f, LossWeights())
    f = fixture(8)
    f["aud"] = f["aud"][:7]
    with pytest.raises(RejectedInputError):
        run_total(f, LossWeights())


def test_loss_weights_defaults_and_validation():
    w = LossWeights()
    assert (w.lambda_sync, w.lambda_v, w.lambda_eq_p, w.lambda_eq_j, w.seq_len, w.window) == (10, 1, 10, 10, 24, 5)
    with pytest.raises(RejectedInputError):
        LossWeights(lambda_sync=0)


def test_total_loss_adversarial_weight():
    f = fixture()
    _, b1 = run_total(f, LossWeights(pixel_loss=False))
    _, b0 = run_total(f, LossWeights(pixel_loss=False, lambda_adv=0.0))
    _, b3 = run_total(f, LossWeights(pixel_loss=False, lambda_adv=3.0))
    assert b0["seq"].item() == pytest.approx(0.0, abs=1e-12)
    assert b3["seq"].item() == pytest.approx(3 * b1["seq"].item(), rel=1e-12)
    assert b3["seq_adv"].item() == b1["seq_adv"].item()
    with pytest.raises(RejectedInputError):
        LossWeights(lambda_adv=-1.0)
