"""Toy 64x64 configuration shared by the gradient-check tests."""

import numpy as np
import torch
from torch import nn

from talkface.avct import AVCT, AVCTConfig, project_pose_track
from talkface.discriminators import FeaturePyramid, SyncDiscriminator, TemporalDiscriminator
from talkface.losses import LossModules, LossWeights, total_loss
from talkface.motion import KeypointSet
from talkface.renderer import KeypointDetector, Renderer, RendererConfig
from talkface.transforms import SimilarityTransform

T = 8
REN = RendererConfig(image_size=64, map_size=32, kp_expansion=8, kp_max_features=32, kp_blocks=2,
                     motion_expansion=8, motion_max_features=32, motion_blocks=2, gen_channels=16,
                     gen_res_blocks=1)
AV = AVCTConfig(d_model=32, n_heads=2, enc_layers=1, dec_layers=1, d_ff=64, map_size=32)


class ToyProblem:
    def __init__(self, seed=0):
        torch.manual_seed(seed)
        r = np.random.default_rng(seed)
        self.avct = AVCT(AV).double().eval()
        with torch.no_grad():
            for head in (self.avct.points_head, self.avct.jacobian_head):
                nn.init.normal_(head.weight, std=0.05)
        self.detector = KeypointDetector(REN).double().eval().requires_grad_(False)
        self.renderer = Renderer(REN).double().eval().requires_grad_(False)
        self.modules = LossModules(self.detector, TemporalDiscriminator(T).double().requires_grad_(False),
                                   SyncDiscriminator().double().eval().requires_grad_(False),
                                   FeaturePyramid().double())
        self.real = torch.from_numpy(r.uniform(0, 1, (T, 3, 64, 64)))
        self.phonemes = torch.from_numpy(r.integers(0, 41, T))
        self.pose_maps = project_pose_track(r.normal(0, 0.1, (T, 6)), 32).double()
        self.acoustic = torch.from_numpy(r.normal(size=(T, 4, 41)))
        self.boxes = np.tile([16, 32, 48, 56], (T, 1))
        self.transform = SimilarityTransform.random(T, torch.Generator().manual_seed(seed), dtype=torch.float64)
        self.weights = LossWeights(seq_len=T)

    def loss(self):
        ref = self.real[:1]
        kp_ref, latent = self.detector(ref)
        pred = self.avct.run_frames(self.phonemes, self.pose_maps, self.acoustic, latent[0], torch.arange(T))
        src = KeypointSet(kp_ref.points.expand(T, -1, -1), kp_ref.jacobians.expand(T, -1, -1, -1))
        fake, _ = self.renderer(ref.expand(T, -1, -1, -1), src, pred)
        total, _ = total_loss(self.real, fake, pred, self.boxes, self.acoustic, self.weights, self.modules,
                              self.transform)
        return total


def gradient_check(n_params=16, steps=(1e-4,), seed=0):
    """Analytic gradients and central differences for random scalar AVCT parameters.

    Returns (analytic (n,), numeric (len(steps), n)). Parameters whose
    gradient is identically zero for this batch (unused embedding rows) are
    skipped and redrawn.
    """
    prob = ToyProblem(seed)
    params = [p for p in prob.avct.parameters() if p.requires_grad]
    prob.avct.zero_grad()
    prob.loss().backward()
    sizes = np.array([p.numel() for p in params])
    gen = np.random.default_rng(seed + 1)
    analytic, numeric = [], []
    while len(analytic) < n_params:
        p = params[gen.choice(len(params), p=sizes / sizes.sum())]
        i = int(gen.integers(p.numel()))
        g = p.grad.reshape(-1)[i].item()
        if g == 0.0:
            continue
        flat = p.data.reshape(-1)
        orig = flat[i].item()
        row = []
        with torch.no_grad():
            for h in steps:
                flat[i] = orig + h
                up = prob.loss().item()
                flat[i] = orig - h
                down = prob.loss().item()
                flat[i] = orig
                row.append((up - down) / (2 * h))
        analytic.append(g)
        numeric.append(row)
    return np.array(analytic), np.array(numeric).T
