"""Pre-training and fine-tuning loops with checkpoint/resume."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ExperimentConfig, OptimConfig
from .losses import overall_loss
from .model import (
    PretrainModel,
    SegmentationModel,
    build_pretrain_model,
    build_segmentation_model,
    load_checkpoint,
    load_pretrained_encoder,
    save_checkpoint,
)
from .pairing import sample_pretrain_batch
from .volume_data import Volume, strip_labels

log = logging.getLogger(__name__)

# sub-stream ids under the experiment seed
_DATA_STREAM = 1
_FINETUNE_STREAM = 2


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainState:
    model: nn.Module
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    config: ExperimentConfig
    step: int = 0
    epoch: int = 0


@dataclass
class PretrainResult:
    state: TrainState
    history: list[dict] = field(default_factory=list)
    checkpoint: Optional[Path] = None


def data_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


def make_optimizer(params, cfg: OptimConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def _set_lr(opt: torch.optim.Optimizer, cfg: OptimConfig, step: int) -> None:
    scale = min(1.0, (step + 1) / cfg.warmup_steps) if cfg.warmup_steps > 0 else 1.0
    for group in opt.param_groups:
        group["lr"] = cfg.lr * scale


def steps_per_epoch(dataset: Sequence[Volume], cfg: ExperimentConfig) -> int:
    if cfg.pretrain.iters_per_epoch:
        return cfg.pretrain.iters_per_epoch
    return max(1, math.ceil(sum(v.V for v in dataset) / cfg.pairing.n))


def stack_pixels(views) -> torch.Tensor:
    return torch.from_numpy(np.stack([v.pixels for v in views]).astype(np.float32))[:, None]


# ---------------------------------------------------------------------------
# Pre-training
# ---------------------------------------------------------------------------


def init_pretrain_state(cfg: ExperimentConfig) -> TrainState:
    model = build_pretrain_model(cfg.model, cfg.loss.s, seed=cfg.seed)
    opt = make_optimizer(model.parameters(), cfg.pretrain.optim)
    return TrainState(model, opt, data_rng(cfg.seed, _DATA_STREAM), cfg)


def pretrain_step(state: TrainState, dataset: Sequence[Volume]) -> dict:
    cfg = state.config
    plan = sample_pretrain_batch(dataset, cfg.pairing, cfg.augment, state.rng)
    model = state.model
    model.train()
    pix, glob = model(stack_pixels(plan.views))
    total, breakdown = overall_loss(plan, pix, glob, cfg.loss)
    if not torch.isfinite(total):
        meta = [(v.subject_id, v.slice_index, v.view_id) for v in plan.views]
        raise TrainingDiverged(f"non-finite loss at step {state.step}: components={breakdown}, batch={meta}")
    _set_lr(state.optimizer, cfg.pretrain.optim, state.step)
    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()
    state.step += 1
    breakdown["step"] = state.step
    return breakdown


def save_state(state: TrainState, path: str | Path, kind: str = "pretrain") -> Path:
    meta = {
        "kind": kind,
        "step": state.step,
        "epoch": state.epoch,
        "rng_state": state.rng.bit_generator.state,
        "config": state.config.to_dict(),
    }
    return save_checkpoint(path, {"model": state.model.state_dict(), "optimizer": state.optimizer.state_dict()}, meta)


def load_state(path: str | Path) -> TrainState:
    blob, meta = load_checkpoint(path)
    cfg = ExperimentConfig.from_dict(meta["config"])
    state = init_pretrain_state(cfg)
    state.model.load_state_dict(blob["model"])
    state.optimizer.load_state_dict(blob["optimizer"])
    state.rng.bit_generator.state = meta["rng_state"]
    state.step = int(meta["step"])
    state.epoch = int(meta["epoch"])
    return state


def pretrain(
    dataset: Sequence[Volume],
    cfg: ExperimentConfig,
    out_dir: Optional[str | Path] = None,
    state: Optional[TrainState] = None,
    max_steps: Optional[int] = None,
) -> PretrainResult:
    """Self-supervised pre-training of the encoder; labels are never read.

    Runs ``cfg.pretrain.epochs`` epochs (or stops early at ``max_steps`` total
    steps). Pass ``state`` to resume. With ``out_dir`` the per-step loss
    records go to ``logs/pretrain.jsonl`` and the final state to
    ``checkpoints/pretrain.pt``.
    """
    if len(dataset) < 2:
        raise ValueError(f"pre-training needs at least 2 subjects, got {len(dataset)}")
    dataset = strip_labels(dataset)
    state = state or init_pretrain_state(cfg)
    spe = steps_per_epoch(dataset, state.config)
    total_steps = state.config.pretrain.epochs * spe
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)

    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "logs").mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "logs" / "pretrain.jsonl", "a")
    result = PretrainResult(state)
    try:
        while state.step < total_steps:
            rec = pretrain_step(state, dataset)
            state.epoch = state.step // spe
            rec["epoch"] = state.epoch
            result.history.append(rec)
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
            if state.step % spe == 0:
                log.info("epoch %d step %d total %.4f", state.epoch, state.step, rec["total"])
    finally:
        if log_file:
            log_file.close()
    if out_dir is not None:
        result.checkpoint = save_state(state, out_dir / "checkpoints" / "pretrain.pt")
    return result


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------


def soft_dice_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """1 - mean soft Dice over foreground classes, pooled over the batch."""
    C = logits.shape[1]
    probs = logits.softmax(dim=1)
    onehot = F.one_hot(target.long(), C).permute(0, 3, 1, 2).to(probs.dtype)
    dims = (0, 2, 3)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    dice = (2 * inter + eps) / (denom + eps)
    return 1.0 - dice[1:].mean()


def segmentation_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, target.long()) + soft_dice_loss(logits, target)


@dataclass
class FinetuneResult:
    model: SegmentationModel
    log: list[dict]
    load_report: Optional[dict] = None


def labeled_slices(dataset: Sequence[Volume], subject_ids: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    by_id = {v.subject_id: v for v in dataset}
    missing = [s for s in subject_ids if s not in by_id]
    if missing:
        raise ValueError(f"unknown subjects: {missing}")
    unlabeled = [s for s in subject_ids if by_id[s].labels is None]
    if unlabeled:
        raise ValueError(f"subjects without labels cannot be fine-tuned on: {unlabeled}")
    xs, ys = [], []
    for sid in subject_ids:
        vol = by_id[sid]
        for z in range(vol.V):
            xs.append(vol.voxels[z])
            ys.append(vol.label_slice(z))
    return np.stack(xs).astype(np.float32), np.stack(ys).astype(np.int64)


def finetune(
    dataset: Sequence[Volume],
    labeled_subject_ids: Sequence[str],
    cfg: ExperimentConfig,
    init=None,
    seed: Optional[int] = None,
) -> FinetuneResult:
    """Supervised segmentation training on the slices of the listed subjects.

    ``init`` is a pre-training checkpoint (path or state dict) for the
    encoder; ``None`` trains from scratch. The decoder initialization and the
    batch order depend only on ``seed`` (default ``cfg.seed``), so runs with
    and without ``init`` see identical samples.
    """
    seed = cfg.seed if seed is None else seed
    X, Y = labeled_slices(dataset, list(labeled_subject_ids))
    model = build_segmentation_model(cfg.model, seed=seed)
    report = None
    if init is not None:
        model, report = load_pretrained_encoder(model, init)
    ft = cfg.finetune
    opt = make_optimizer(model.parameters(), ft.optim)
    rng = data_rng(seed, _FINETUNE_STREAM)
    history = []
    model.train()
    for step in range(ft.steps):
        idx = rng.integers(0, len(X), size=ft.batch_size)
        flip = rng.random(ft.batch_size) < ft.flip_prob
        xb, yb = X[idx].copy(), Y[idx].copy()
        xb[flip] = xb[flip][:, :, ::-1]
        yb[flip] = yb[flip][:, :, ::-1]
        logits = model(torch.from_numpy(xb)[:, None])
        loss = segmentation_loss(logits, torch.from_numpy(yb))
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite fine-tuning loss at step {step}")
        _set_lr(opt, ft.optim, step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append({"step": step + 1, "loss": loss.item()})
    model.eval()
    return FinetuneResult(model, history, report)


@torch.no_grad()
def predict_volume(model: SegmentationModel, volume: Volume, batch_size: int = 32) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, volume.V, batch_size):
        x = torch.from_numpy(np.ascontiguousarray(volume.voxels[start : start + batch_size]))[:, None]
        out.append(model(x).argmax(dim=1).numpy().astype(np.uint8))
    return np.concatenate(out)
