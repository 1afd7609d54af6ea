"""Dice metrics, k-fold plans with labeled-subject budgets, and the protocol runner."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .config import ExperimentConfig
from .training import finetune, predict_volume
from .volume_data import Volume

log = logging.getLogger(__name__)


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """2|A n B| / (|A| + |B|); two empty masks score 1.0."""
    pred_mask = np.asarray(pred_mask)
    gt_mask = np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch: {pred_mask.shape} vs {gt_mask.shape}")
    a = pred_mask.astype(bool)
    b = gt_mask.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def mean_dsc(pred_labels: np.ndarray, gt_labels: np.ndarray, num_classes: int) -> tuple[dict[int, float], float]:
    """Per-foreground-class Dice on one subject's label volume and their mean."""
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ValueError(f"shape mismatch: {pred_labels.shape} vs {gt_labels.shape}")
    for name, arr in (("pred", pred_labels), ("gt", gt_labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} labels outside [0, {num_classes})")
    per_class = {c: dice(pred_labels == c, gt_labels == c) for c in range(1, num_classes)}
    return per_class, float(np.mean(list(per_class.values())))


def subjects_mean_dsc(pairs: Sequence[tuple[np.ndarray, np.ndarray]], num_classes: int) -> float:
    """Average over subjects of the per-subject class-mean Dice."""
    return float(np.mean([mean_dsc(p, g, num_classes)[1] for p, g in pairs]))


@dataclass(frozen=True)
class Fold:
    train: tuple[str, ...]
    val: tuple[str, ...]
    labeled: tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[Fold, ...]
    M: Union[int, str]
    seed: int

    def check(self, subjects: Sequence[str]) -> None:
        seen: list[str] = []
        for f in self.folds:
            assert not set(f.train) & set(f.val), "train and val overlap"
            assert set(f.train) | set(f.val) == set(subjects), "fold does not cover all subjects"
            assert set(f.labeled) <= set(f.train), "labeled subset outside the training split"
            assert len(f.labeled) == (len(f.train) if self.M == "all" else self.M)
            seen.extend(f.val)
        assert sorted(seen) == sorted(subjects), "validation sets do not partition the subjects"


def make_folds(subjects: Sequence[str], k: int, M: Union[int, str], seed: int) -> FoldPlan:
    """Seeded k-fold split; each fold labels ``M`` random training subjects.

    ``M="all"`` labels every training subject of the fold. The plan depends
    only on (subjects, k, M, seed), so all methods evaluated with one seed
    share the same labeled samples.
    """
    subjects = list(subjects)
    if len(set(subjects)) != len(subjects):
        raise ValueError("subject ids must be unique")
    if not 2 <= k <= len(subjects):
        raise ValueError(f"k={k} must lie in [2, {len(subjects)}]")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    chunks = np.array_split(np.arange(len(order)), k)
    min_train = len(subjects) - max(len(c) for c in chunks)
    m = min_train if M == "all" else int(M)
    if M != "all" and not 1 <= m <= min_train:
        raise ValueError(f"M={M} exceeds the per-fold training size {min_train} (or is < 1)")
    folds = []
    for chunk in chunks:
        val = tuple(sorted(order[i] for i in chunk))
        train = tuple(sorted(s for s in subjects if s not in val))
        n_lab = len(train) if M == "all" else m
        labeled = tuple(sorted(rng.choice(train, size=n_lab, replace=False).tolist()))
        folds.append(Fold(train, val, labeled))
    plan = FoldPlan(tuple(folds), M if M == "all" else m, seed)
    plan.check(subjects)
    return plan


@dataclass
class ResultRow:
    method: str
    M: Union[int, str]
    fold_values: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_values))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_values))


@dataclass
class ResultTable:
    rows: list[ResultRow] = field(default_factory=list)

    def get(self, method: str, M) -> ResultRow:
        for r in self.rows:
            if r.method == method and r.M == M:
                return r
        raise KeyError((method, M))

    def to_records(self) -> list[dict]:
        return [
            {"method": r.method, "M": r.M, "mean": r.mean, "std": r.std, "folds": list(r.fold_values)}
            for r in self.rows
        ]

    def to_json(self) -> str:
        return json.dumps(self.to_records(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["method", "M", "mean", "std", "folds"])
        for r in self.rows:
            w.writerow([r.method, r.M, f"{r.mean:.6f}", f"{r.std:.6f}", ";".join(f"{v:.6f}" for v in r.fold_values)])
        return buf.getvalue()

    def format(self) -> str:
        lines = []
        for r in self.rows:
            lines.append(f"{r.method:<16} M={str(r.M):<4} {r.mean:.3f}({r.std:.2f})")
        return "\n".join(lines)


def run_protocol(
    dataset: Sequence[Volume],
    methods: Mapping[str, Optional[object]],
    Ms: Sequence[Union[int, str]],
    k: int,
    seed: int,
    cfg: ExperimentConfig,
    num_classes: Optional[int] = None,
) -> ResultTable:
    """Fine-tune and score every (method, M, fold).

    ``methods`` maps a name to an encoder checkpoint (path or state dict), or
    to ``None`` for training from scratch. Each fold's score is the mean over
    its validation subjects of the class-averaged 3D Dice.
    """
    num_classes = num_classes or cfg.model.num_classes
    by_id = {v.subject_id: v for v in dataset}
    subjects = sorted(by_id)
    table = ResultTable()
    plans = {M: make_folds(subjects, k, M, seed) for M in Ms}  # validate all budgets before training
    for M in Ms:
        plan = plans[M]
        for name, init in methods.items():
            values = []
            for fi, fold in enumerate(plan.folds):
                res = finetune(dataset, fold.labeled, cfg, init=init, seed=seed * 1000 + fi)
                pairs = [(predict_volume(res.model, by_id[s]), by_id[s].labels) for s in fold.val]
                values.append(subjects_mean_dsc(pairs, num_classes))
                log.info("%s M=%s fold %d: %.4f", name, M, fi, values[-1])
            table.rows.append(ResultRow(name, M, values))
    return table
