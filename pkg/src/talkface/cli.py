"""Command-line entry point: ``talkface <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import audio as audio_mod
from .config import PRESETS, Config

log = logging.getLogger("talkface")

SUBCOMMANDS = ("synth", "preprocess", "pretrain-renderer", "train-sync", "train-avct",
               "train-headmotion", "infer", "eval")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named override bundle applied first")
    p.add_argument("--seed", type=int, help="seed for all randomness")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="talkface", description="Audio-driven talking-face toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    p = sub.add_parser("synth", help="generate a synthetic speaker dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--frames", type=int, default=250)
    p.add_argument("--style", choices=("default", "alternate"), default="default")
    _common(p)

    p = sub.add_parser("preprocess", help="extract and cache acoustic features")
    p.add_argument("--data", type=Path, required=True, nargs="+")
    _common(p)

    for name, helptext in (("pretrain-renderer", "pretrain keypoint detector and renderer"),
                           ("train-sync", "train the lip-sync discriminator"),
                           ("train-headmotion", "train the head-motion predictor")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", type=Path, required=True, nargs="+")
        p.add_argument("--ckpt", type=Path, required=True)
        p.add_argument("--iterations", type=int)
        _common(p)

    p = sub.add_parser("train-avct", help="batched sequential training of the transformer")
    p.add_argument("--data", type=Path, required=True, nargs="+")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--log", type=Path, help="loss-curve CSV (default: <ckpt>/avct_loss.csv)")
    p.add_argument("--resume", action="store_true", help="continue from <ckpt>/avct_state.pt")
    _common(p)

    p = sub.add_parser("infer", help="animate a reference image from speech")
    p.add_argument("--ref", type=Path, required=True)
    p.add_argument("--audio", type=Path, required=True)
    p.add_argument("--phonemes", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--poses", type=Path, help="pose track; predicted from audio when absent")
    p.add_argument("--h-ref", help="reference pose as six comma-separated values")
    _common(p)

    p = sub.add_parser("eval", help="score generated frames against a dataset directory")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, help="checkpoint with a lip-sync discriminator")
    _common(p)
    return parser


def load_config(args) -> Config:
    cfg = Config()
    if getattr(args, "ckpt", None) is not None and (args.ckpt / "manifest.json").exists():
        from .checkpoint import load_config as ckpt_config

        cfg = ckpt_config(args.ckpt)
    if args.preset:
        cfg.update(PRESETS[args.preset])
    loaded = Config.load(args.config, args.overrides)
    explicit = {k: v for k, v in loaded.to_flat().items() if v != Config().to_flat()[k]}
    cfg.update(explicit)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _clips(paths):
    from .data import SpeakerClip

    return [SpeakerClip.load(p) for p in paths]


def cmd_synth(args, cfg):
    from .synthetic import SyntheticSpeakerSpec, alternate_style, generate_synthetic_speaker

    kwargs = {"style": alternate_style()} if args.style == "alternate" else {}
    spec = SyntheticSpeakerSpec(seed=cfg.seed, duration_frames=args.frames, **kwargs)
    generate_synthetic_speaker(spec, args.out)
    print(args.out)


def cmd_preprocess(args, cfg):
    from .data import FEATURE_CACHE, preprocess

    for d in args.data:
        acoustic, _, _ = preprocess(d)
        print(f"{d / FEATURE_CACHE}: {len(acoustic)} frames")


def cmd_pretrain_renderer(args, cfg):
    from .checkpoint import save_components
    from .train import train_renderer

    res = train_renderer(_clips(args.data), cfg, iterations=args.iterations)
    save_components(args.ckpt, {"ekd": res.detector, "er": res.renderer}, cfg)


def cmd_train_sync(args, cfg):
    from .checkpoint import save_components
    from .train import sync_separation, train_sync_discriminator

    clips = _clips(args.data)
    d_sync = train_sync_discriminator(clips, cfg, iterations=args.iterations)
    log.info("sync separation %.3f", sync_separation(d_sync, clips))
    save_components(args.ckpt, {"dsync": d_sync}, cfg)


def cmd_train_avct(args, cfg):
    from .checkpoint import load_component, save_components
    from .train import AVCTTraining, new_avct_training, train_avct

    clips = _clips(args.data)
    frozen = [load_component(args.ckpt, n, cfg) for n in ("ekd", "er", "dsync")]
    state_path = args.ckpt / "avct_state.pt"
    state = new_avct_training(clips, cfg, frozen[0])
    if args.resume:
        if not state_path.exists():
            raise FileNotFoundError(f"nothing to resume: {state_path}")
        state.load_state_dict(torch.load(state_path, weights_only=True))
    every = cfg.train.checkpoint_every

    def on_step(st: AVCTTraining, row):
        if every and st.iteration % every == 0:
            torch.save(st.state_dict(), state_path)

    n_iter = args.iterations if args.iterations is not None else cfg.train.iterations - state.iteration
    state = train_avct(clips, cfg, *frozen, state=state, iterations=max(n_iter, 0),
                       loss_log=args.log or args.ckpt / "avct_loss.csv", on_step=on_step)
    torch.save(state.state_dict(), state_path)
    save_components(args.ckpt, {"avct": state.avct}, cfg)


def cmd_train_headmotion(args, cfg):
    from .checkpoint import save_components
    from .train import train_head_motion

    model = train_head_motion(_clips(args.data), cfg, iterations=args.iterations)
    save_components(args.ckpt, {"headmotion": model}, cfg)


def cmd_infer(args, cfg):
    from .checkpoint import load_models
    from .data import load_image, save_frames
    from .pipeline import infer

    models = load_models(args.ckpt, need_head_motion=args.poses is None)
    vocab = json.loads((args.ckpt / "manifest.json").read_text(encoding="utf-8"))["vocab"]
    wave = audio_mod.read_wav(args.audio)
    phonemes = audio_mod.load_phoneme_track(args.phonemes, vocab)
    poses = audio_mod.load_pose_track(args.poses) if args.poses else None
    h_ref = None
    if args.h_ref:
        h_ref = audio_mod.HeadPose.from_array([float(v) for v in args.h_ref.split(",")]).as_array()
    res = infer(load_image(args.ref, cfg.renderer.image_size), wave, phonemes, models,
                poses=poses, h_ref=h_ref)
    save_frames(res.frames, args.out)
    audio_mod.save_pose_track(args.out / "poses.txt", res.poses)
    print(f"{len(res.frames)} frames -> {args.out}")


def cmd_eval(args, cfg):
    from .data import SpeakerClip, image_to_tensor, load_frame_dir
    from .metrics import EvaluationReport, MouthProbe, metric_av_sync, metric_lmd

    gt = SpeakerClip.load(args.gt)
    frame_dir = args.pred / "frames" if (args.pred / "frames").is_dir() else args.pred
    pred = image_to_tensor(load_frame_dir(frame_dir))
    t = min(len(pred), len(gt))
    pred = pred[:t]
    if gt.style is None or gt.landmarks is None or gt.mouth_boxes is None:
        raise ValueError("ground-truth directory lacks synthetic metadata (meta.json, landmarks, boxes)")
    probe = MouthProbe.calibrate(gt.style)
    boxes = gt.mouth_boxes[:t]
    pred_marks = probe.landmarks(pred, boxes, gt.poses[:t])
    diag = gt.style.face_diagonal
    lmd = metric_lmd(pred_marks, gt.landmarks[:t], diag, diag)
    offset, conf = None, None
    if args.ckpt is not None:
        from .checkpoint import load_component

        sync = metric_av_sync(pred, boxes, gt.acoustic[:t], load_component(args.ckpt, "dsync"))
        offset, conf = sync.av_offset, sync.av_confidence
    clip_entry = {"name": str(args.gt), "frames": t, "lmd": lmd, "av_offset": offset,
                  "av_confidence": conf}
    report = EvaluationReport(lmd, offset, conf, [clip_entry])
    print(json.dumps(report.to_dict(), indent=1))


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "pretrain-renderer": cmd_pretrain_renderer,
    "train-sync": cmd_train_sync, "train-avct": cmd_train_avct, "train-headmotion": cmd_train_headmotion,
    "infer": cmd_infer, "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        torch.manual_seed(cfg.seed)
        np.random.seed(cfg.seed % 2**32)
        COMMANDS[args.command](args, cfg)
    except Exception as exc:  # every runtime failure maps to exit status 1
        print(f"talkface {args.command}: error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
