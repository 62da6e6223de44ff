"""Checkpoint directory: manifest.json plus one state-dict file per component."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch

from .audio import DEFAULT_VOCAB
from .avct import AVCT
from .config import Config
from .discriminators import SyncDiscriminator
from .errors import ConfigurationError
from .head_motion import HeadMotionConfig, HeadMotionPredictor
from .pipeline import Models
from .renderer import KeypointDetector, Renderer

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
COMPONENT_FILES = {
    "ekd": "ekd.bin",
    "er": "er.bin",
    "avct": "avct.bin",
    "dsync": "dsync.bin",
    "headmotion": "headmotion.bin",
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def read_manifest(ckpt_dir) -> dict:
    path = Path(ckpt_dir) / MANIFEST
    if not path.exists():
        raise ConfigurationError(f"no checkpoint manifest at {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint format {manifest.get('format_version')}")
    return manifest


def save_components(ckpt_dir, components: dict, cfg: Config, vocab=DEFAULT_VOCAB) -> Path:
    """Write the given {name: module} state dicts and merge them into the manifest."""
    root = Path(ckpt_dir)
    root.mkdir(parents=True, exist_ok=True)
    try:
        manifest = read_manifest(root)
    except ConfigurationError:
        manifest = {"format_version": FORMAT_VERSION, "components": {}}
    for name, module in components.items():
        if name not in COMPONENT_FILES:
            raise ConfigurationError(f"unknown checkpoint component {name!r}")
        path = root / COMPONENT_FILES[name]
        torch.save(module.state_dict(), path)
        manifest["components"][name] = {"file": path.name, "sha256": _sha256(path)}
    manifest["config"] = cfg.to_flat()
    manifest["vocab"] = list(vocab)
    manifest["seed"] = cfg.seed
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return root


def load_config(ckpt_dir) -> Config:
    return Config.from_flat(read_manifest(ckpt_dir)["config"])


def build_component(name: str, cfg: Config) -> torch.nn.Module:
    if name == "ekd":
        return KeypointDetector(cfg.renderer)
    if name == "er":
        return Renderer(cfg.renderer)
    if name == "avct":
        return AVCT(cfg.avct)
    if name == "dsync":
        return SyncDiscriminator()
    if name == "headmotion":
        h = cfg.head
        return HeadMotionPredictor(HeadMotionConfig(h.hidden, h.layers, h.pose_features, cfg.avct.map_size))
    raise ConfigurationError(f"unknown checkpoint component {name!r}")


def load_component(ckpt_dir, name: str, cfg: Config | None = None) -> torch.nn.Module:
    root = Path(ckpt_dir)
    manifest = read_manifest(root)
    entry = manifest["components"].get(name)
    if entry is None:
        raise ConfigurationError(f"checkpoint {root} has no {name!r} component")
    path = root / entry["file"]
    if not path.exists() or _sha256(path) != entry["sha256"]:
        raise ConfigurationError(f"checkpoint file {path} is missing or corrupted")
    cfg = cfg or Config.from_flat(manifest["config"])
    module = build_component(name, cfg)
    module.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    return module.eval()


def has_component(ckpt_dir, name: str) -> bool:
    try:
        return name in read_manifest(ckpt_dir)["components"]
    except ConfigurationError:
        return False


def load_models(ckpt_dir, need_head_motion: bool = False) -> Models:
    cfg = load_config(ckpt_dir)
    opt = {n: load_component(ckpt_dir, n, cfg) if has_component(ckpt_dir, n) else None
           for n in ("headmotion", "dsync")}
    if need_head_motion and opt["headmotion"] is None:
        raise ConfigurationError("checkpoint has no head-motion model")
    return Models(load_component(ckpt_dir, "ekd", cfg), load_component(ckpt_dir, "er", cfg),
                  load_component(ckpt_dir, "avct", cfg), opt["headmotion"], opt["dsync"])
