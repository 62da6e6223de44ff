import numpy as np
import pytest
import torch

from talkface.audio import Waveform, extract_acoustic_frames
from talkface.avct import AVCT, AVCTConfig
from talkface.errors import ConfigurationError, RejectedInputError
from talkface.head_motion import HeadMotionConfig, HeadMotionPredictor
from talkface.pipeline import Models, infer
from talkface.renderer import KeypointDetector, Renderer, RendererConfig

REN = RendererConfig(image_size=64, kp_expansion=8, kp_max_features=16, kp_blocks=2, motion_expansion=8,
                     motion_max_features=16, motion_blocks=2, gen_channels=16, gen_res_blocks=1)
AV = AVCTConfig(d_model=32, n_heads=2, enc_layers=1, dec_layers=1, d_ff=64)


@pytest.fixture(scope="module")
def models():
    torch.manual_seed(0)
    avct = AVCT(AV)
    with torch.no_grad():
        torch.nn.init.normal_(avct.points_head.weight, std=0.05)
        torch.nn.init.normal_(avct.jacobian_head.weight, std=0.05)
    head = HeadMotionPredictor(HeadMotionConfig(hidden=16, pose_features=8))
    return Models(KeypointDetector(REN), Renderer(REN), avct, head)


def one_second():
    t = np.arange(16000) / 16000
    return Waveform(0.5 * np.sin(2 * np.pi * 180 * t) * (t > 0.3))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_one_second_and_anchor(models, seed):
    ref = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(seed))
    res = infer(ref, one_second(), np.zeros(25, dtype=np.int64), models)
    assert res.frames.shape == (25, 3, 64, 64) and res.poses.shape == (25, 6)
    assert torch.equal(res.transferred.points[0], res.reference.points)
    assert torch.equal(res.transferred.jacobians[0], res.reference.jacobians)
    assert np.all(res.poses == 0)  # untrained head motion stays at the identity anchor


def test_deterministic(models):
    ref = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(5))
    a = infer(ref, one_second(), np.zeros(25, dtype=np.int64), models, chunk=7)
    b = infer(ref, one_second(), np.zeros(25, dtype=np.int64), models, chunk=32)
    assert torch.allclose(a.frames, b.frames, atol=1e-6)
    c = infer(ref, one_second(), np.zeros(25, dtype=np.int64), models, chunk=7)
    assert torch.equal(a.frames, c.frames)


def test_supplied_poses_and_h_ref(models):
    ref = torch.rand(3, 64, 64)
    poses = np.zeros((25, 6))
    poses[:, 1] = 0.1
    res = infer(ref, None, np.zeros(25, dtype=np.int64), models, poses=poses,
                acoustic=extract_acoustic_frames(one_second()))
    assert np.allclose(res.poses, poses)
    anchored = infer(ref, one_second(), np.zeros(25, dtype=np.int64), models, h_ref=np.full(6, 0.05))
    assert np.allclose(anchored.poses, 0.05)


def test_errors(models):
    ref = torch.rand(3, 64, 64)
    with pytest.raises(ConfigurationError):
        infer(ref, one_second(), np.zeros(25, dtype=np.int64), None)
    with pytest.raises(ConfigurationError):
        infer(ref, one_second(), np.zeros(25, dtype=np.int64), Models(models.detector, models.renderer, models.avct))
    with pytest.raises(RejectedInputError):
        infer(ref, None, np.zeros(25, dtype=np.int64), models)
    with pytest.raises(RejectedInputError):
        infer(ref[None], one_second(), np.zeros(25, dtype=np.int64), models)
    with pytest.raises(RejectedInputError):
        infer(ref, one_second(), np.zeros(10, dtype=np.int64), models)
