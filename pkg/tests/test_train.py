import io

import numpy as np
import pytest
import torch

from talkface.config import Config
from talkface.data import SpeakerClip
from talkface.discriminators import FeaturePyramid
from talkface.errors import ConfigurationError, RejectedInputError
from talkface.synthetic import SyntheticSpeakerSpec, make_clip
from talkface.train import (
    LOSS_COLUMNS, new_avct_training, parameter_digest, read_loss_log, recolor_pair, renderer_losses, sample_batch,
    step_generator, sync_pairs,
    sync_separation, train_avct, train_head_motion, train_renderer, train_sync_discriminator,
)

SMALL = {"renderer.image_size": 64, "renderer.kp_expansion": 8, "renderer.kp_max_features": 16,
         "renderer.kp_blocks": 2, "renderer.motion_expansion": 8, "renderer.motion_max_features": 16,
         "renderer.motion_blocks": 2, "renderer.gen_channels": 16, "renderer.gen_res_blocks": 1,
         "avct.d_model": 32, "avct.n_heads": 2, "avct.enc_layers": 1, "avct.dec_layers": 1, "avct.d_ff": 64,
         "train.seq_len": 8, "train.lr": 1e-3, "train.lambda_sync": 1e-3, "train.d_lr": 2e-5, "sync.batch": 4, "pretrain.batch": 2,
         "head.hidden": 16, "head.pose_features": 8, "head.lr": 3e-3}


@pytest.fixture(scope="module")
def cfg():
    return Config().update(SMALL)


@pytest.fixture(scope="module")
def clips():
    return [SpeakerClip.from_synthetic(make_clip(SyntheticSpeakerSpec(seed=1, duration_frames=60), size=64))]


@pytest.fixture(scope="module")
def frozen(cfg, clips):
    """Briefly pretrained detector, renderer and lip-sync discriminator.

    The small temporal discriminator overpowers the generator at 64x64, so
    the small config also lowers its learning rate.
    """
    ren = train_renderer(clips, cfg, iterations=100, log_every=0)
    d_sync = train_sync_discriminator(clips, cfg, iterations=20, log_every=0)
    return ren.detector, ren.renderer, d_sync


def test_step_generator_reproducible():
    a = torch.rand(3, generator=step_generator(4, 10))
    assert torch.equal(a, torch.rand(3, generator=step_generator(4, 10)))
    assert not torch.equal(a, torch.rand(3, generator=step_generator(4, 11)))


def test_renderer_pretraining_runs(clips, cfg):
    res = train_renderer(clips, cfg, iterations=3, log_every=0)
    assert len(res.history) == 3 and all(np.isfinite(h["loss"]) for h in res.history)
    assert not res.detector.training


def test_sync_pairs_and_training(clips, cfg):
    crops, pos, neg = sync_pairs(clips, 3, torch.Generator().manual_seed(0))
    assert crops.shape == (3, 5, 3, 96, 96) and pos.shape == neg.shape == (3, 5, 4, 41)
    assert not torch.equal(pos, neg)
    d = train_sync_discriminator(clips, cfg, iterations=2, log_every=0)
    assert np.isfinite(sync_separation(d, clips, n_pairs=8))


def test_sync_pairs_rejects_short_clip(clips):
    short = SpeakerClip(clips[0].frames[:8], clips[0].acoustic[:8], clips[0].phonemes[:8], clips[0].poses[:8],
                        clips[0].mouth_boxes[:8])
    with pytest.raises(RejectedInputError):
        sync_pairs([short], 2, torch.Generator().manual_seed(0))


def test_sample_batch_consecutive(clips):
    b, ref = sample_batch(clips, 8, torch.Generator().manual_seed(0))
    assert np.all(np.diff(b.indices) == 1) and 0 <= ref < len(clips[0])
    with pytest.raises(RejectedInputError):
        sample_batch(clips, 100, torch.Generator().manual_seed(0))


def test_missing_frozen_modules(clips, cfg, frozen):
    with pytest.raises(ConfigurationError):
        train_avct(clips, cfg, None, frozen[1], frozen[2], iterations=1)


def test_smoke_loss_decreases_and_frozen_untouched(clips, cfg, frozen, tmp_path):
    before = [parameter_digest(m) for m in frozen]
    log_path = tmp_path / "loss.csv"
    state = train_avct(clips, cfg, *frozen, iterations=50, loss_log=log_path, log_every=0)
    assert [parameter_digest(m) for m in frozen] == before
    curve = read_loss_log(log_path)
    assert tuple(curve) == LOSS_COLUMNS and len(curve["total"]) == 50
    assert curve["total"][40:].mean() < curve["total"][:10].mean()
    assert state.iteration == 50


def test_resume_bit_identical(clips, cfg, frozen):
    straight = train_avct(clips, cfg, *frozen, iterations=3, log_every=0)
    saved = {k: v for k, v in straight.state_dict().items()}
    buf = io.BytesIO()
    torch.save(saved, buf)
    next_straight = train_avct(clips, cfg, *frozen, state=straight, iterations=1, log_every=0).history[-1]
    resumed = new_avct_training(clips, cfg, frozen[0])
    buf.seek(0)
    resumed.load_state_dict(torch.load(buf, weights_only=True))
    next_resumed = train_avct(clips, cfg, *frozen, state=resumed, iterations=1, log_every=0).history[-1]
    assert next_resumed["iteration"] == next_straight["iteration"] == 3
    for k in ("total", "seq", "sync", "vgg", "eq_K", "eq_J"):
        assert next_resumed[k] == next_straight[k]


def test_head_motion_training_fits(clips, cfg):
    from talkface.head_motion import predict_head_motion

    model = train_head_motion(clips, cfg, iterations=60, log_every=0)
    pred = predict_head_motion(model, clips[0].acoustic, clips[0].poses[0])
    base = np.abs(clips[0].poses - clips[0].poses[0]).mean()
    assert np.abs(pred - clips[0].poses).mean() < base


def test_recolor_pair_is_shared_channel_affine():
    g = torch.Generator().manual_seed(0)
    src = torch.rand(6, 3, 8, 8)
    a, b = recolor_pair(src, src.clone(), g, 1.0)
    assert torch.equal(a, b)
    assert a.min() >= 0 and a.max() <= 1
    x = src.flatten(2).numpy()
    y = a.flatten(2).numpy()
    for i in range(6):
        for c in range(3):
            # every output channel is an affine function of one input channel
            res = [np.linalg.lstsq(np.stack([x[i, j], np.ones(64)], 1), y[i, c], rcond=None)[1][0]
                   for j in range(3)]
            assert min(res) < 1e-8
    same, _ = recolor_pair(src, src, g, 0.0)
    assert same is src


def test_renderer_losses_mouth_term(clips, cfg):
    torch.manual_seed(0)
    pre = train_renderer(clips, cfg, iterations=1, log_every=0)
    clip = clips[0]
    src, drv = clip.frame_tensor(slice(0, 2)), clip.frame_tensor(slice(10, 12))
    boxes = clip.mouth_boxes[10:12]
    net = FeaturePyramid()
    base, s0 = renderer_losses(pre.detector, pre.renderer, src, drv, net, cfg, torch.Generator().manual_seed(1), boxes)
    assert s0["mouth"] == 0.0
    weighted = Config().update({**SMALL, "pretrain.lambda_mouth": 5.0})
    loss, s5 = renderer_losses(pre.detector, pre.renderer, src, drv, net, weighted, torch.Generator().manual_seed(1), boxes)
    assert s5["mouth"] > 0
    assert loss.item() == pytest.approx(base.item() + 5.0 * s5["mouth"], rel=1e-5)
