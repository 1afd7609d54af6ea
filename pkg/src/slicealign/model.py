"""2D U-Net encoder/decoder, pre-training heads and checkpoint transfer."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .losses import normalize_embed


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    base_width: int = 16
    stages: int = 4
    proj_dim: int = 128
    embed_dim: Optional[int] = None  # None: same as the channels at the alignment scale
    num_classes: int = 4

    def __post_init__(self):
        if self.base_width < 1 or self.stages < 1 or self.in_channels < 1:
            raise ValueError(f"invalid channel plan: {self}")
        if self.proj_dim < 1 or self.num_classes < 2:
            raise ValueError(f"invalid head sizes: proj_dim={self.proj_dim}, num_classes={self.num_classes}")

    def channels_at(self, s: int) -> int:
        if not 1 <= s <= self.stages:
            raise ValueError(f"scale s={s} outside [1, {self.stages}]")
        return self.base_width * 2 ** (s - 1)


def conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    """Stage ``s`` (1-based) runs at stride ``2**(s-1)`` with ``base * 2**(s-1)`` channels."""

    def __init__(self, in_channels: int = 1, base_width: int = 16, stages: int = 4):
        super().__init__()
        self.base_width = base_width
        self.stages = stages
        chans = [in_channels] + [base_width * 2**k for k in range(stages)]
        self.blocks = nn.ModuleList(conv_block(chans[k], chans[k + 1]) for k in range(stages))

    def channels_at(self, s: int) -> int:
        return self.base_width * 2 ** (s - 1)

    @staticmethod
    def stride_at(s: int) -> int:
        return 2 ** (s - 1)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for k, block in enumerate(self.blocks):
            if k:
                x = F.max_pool2d(x, 2)
            x = block(x)
            feats.append(x)
        return feats

    def feature(self, x: torch.Tensor, s: int) -> torch.Tensor:
        if not 1 <= s <= self.stages:
            raise ValueError(f"scale s={s} outside [1, {self.stages}]")
        return self.forward(x)[s - 1]


class Decoder(nn.Module):
    def __init__(self, base_width: int, stages: int, num_classes: int):
        super().__init__()
        chans = [base_width * 2**k for k in range(stages)]
        self.ups = nn.ModuleList(nn.ConvTranspose2d(chans[k], chans[k - 1], 2, stride=2) for k in range(stages - 1, 0, -1))
        self.blocks = nn.ModuleList(conv_block(2 * chans[k - 1], chans[k - 1]) for k in range(stages - 1, 0, -1))
        self.head = nn.Conv2d(chans[0], num_classes, 1)

    def forward(self, feats: list[torch.Tensor]) -> torch.Tensor:
        x = feats[-1]
        for up, block, skip in zip(self.ups, self.blocks, reversed(feats[:-1])):
            x = block(torch.cat([up(x), skip], dim=1))
        return self.head(x)


class SegmentationModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.in_channels, cfg.base_width, cfg.stages)
        self.decoder = Decoder(cfg.base_width, cfg.stages, cfg.num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


class PretrainModel(nn.Module):
    """Encoder plus the two self-supervised heads.

    ``embed`` is a per-pixel linear layer on the scale-``s`` map; ``proj``
    maps the globally pooled deepest map to a ``proj_dim`` vector. Neither
    head is transferred to fine-tuning.
    """

    def __init__(self, cfg: ModelConfig, s: int = 4):
        super().__init__()
        if not 1 <= s <= cfg.stages:
            raise ValueError(f"scale s={s} outside [1, {cfg.stages}]")
        self.cfg = cfg
        self.s = s
        self.encoder = Encoder(cfg.in_channels, cfg.base_width, cfg.stages)
        c = cfg.channels_at(s)
        self.embed = nn.Conv2d(c, cfg.embed_dim or c, 1)
        self.proj = nn.Linear(cfg.channels_at(cfg.stages), cfg.proj_dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feats = self.encoder(x)
        pix = normalize_embed(feats[self.s - 1], self.embed)
        return pix, global_feature(feats[-1], self.proj)


def global_feature(feature_map: torch.Tensor, proj: nn.Module) -> torch.Tensor:
    """Spatial mean then linear projection; accepts ``(c, h, w)`` or ``(B, c, h, w)``."""
    return proj(feature_map.mean(dim=(-2, -1)))


def _seeded(seed: int, factory):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


def build_encoder(cfg: ModelConfig, seed: int = 0) -> Encoder:
    return _seeded(seed, lambda: Encoder(cfg.in_channels, cfg.base_width, cfg.stages))


def build_pretrain_model(cfg: ModelConfig, s: int = 4, seed: int = 0) -> PretrainModel:
    return _seeded(seed, lambda: PretrainModel(cfg, s))


def build_segmentation_model(cfg: ModelConfig, seed: int = 0) -> SegmentationModel:
    return _seeded(seed, lambda: SegmentationModel(cfg))


# ---------------------------------------------------------------------------
# Checkpoints: <name>.pt holds tensors, <name>.json the metadata.
# ---------------------------------------------------------------------------


def architecture_hash(state_dict: dict, prefix: str = "encoder.") -> str:
    spec = sorted((k, list(v.shape)) for k, v in state_dict.items() if k.startswith(prefix))
    return hashlib.sha256(json.dumps(spec).encode()).hexdigest()[:16]


def save_checkpoint(path: str | Path, state: dict, metadata: dict) -> Path:
    """Write ``state`` (must contain ``"model"``) and a JSON metadata sidecar."""
    path = Path(path).with_suffix(".pt")
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(state, path)
    meta = dict(metadata)
    meta["architecture_hash"] = architecture_hash(state["model"])
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


def load_checkpoint(path: str | Path) -> tuple[dict, dict]:
    path = Path(path).with_suffix(".pt")
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=False)
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return state, meta


def encoder_state(state_dict: dict) -> dict:
    return {k[len("encoder.") :]: v for k, v in state_dict.items() if k.startswith("encoder.")}


def load_pretrained_encoder(model: SegmentationModel, checkpoint) -> tuple[SegmentationModel, dict]:
    """Copy encoder weights from a checkpoint (path or state dict) into ``model``.

    Returns the model and ``{"loaded": [...], "skipped": [...]}``; heads and
    any non-encoder tensors in the checkpoint are skipped.
    """
    if isinstance(checkpoint, (str, Path)):
        checkpoint, _ = load_checkpoint(checkpoint)
    sd = checkpoint.get("model", checkpoint)
    src = encoder_state(sd)
    dst = model.encoder.state_dict()
    mismatched = [
        f"{k}: checkpoint {tuple(src[k].shape)} vs model {tuple(v.shape)}"
        for k, v in dst.items()
        if k in src and src[k].shape != v.shape
    ]
    missing = [k for k in dst if k not in src]
    if mismatched or missing:
        lines = mismatched + [f"{k}: missing from checkpoint" for k in missing]
        raise ValueError("encoder checkpoint incompatible:\n  " + "\n  ".join(lines))
    model.encoder.load_state_dict(src)
    loaded = sorted("encoder." + k for k in src)
    skipped = sorted(k for k in sd if not k.startswith("encoder."))
    return model, {"loaded": loaded, "skipped": skipped}
