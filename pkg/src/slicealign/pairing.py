"""Batch construction and positive-set rules for the two pre-training losses.

Global positives compare relative positions ``index / V`` (across subjects);
alignment pairs compare absolute index distance within one volume. Both use
strict ``<`` against the shared threshold ``t`` and are evaluated in exact
rational arithmetic, so every alignment pair is also a global positive.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .augment import AugmentConfig, SliceView, two_views
from .volume_data import Volume, get_slice


@dataclass(frozen=True)
class PairingConfig:
    t: float = 0.1
    n: int = 8

    def __post_init__(self):
        if not 0 < self.t <= 1:
            raise ValueError(f"t must lie in (0, 1], got {self.t}")
        if self.n < 2 or self.n % 2:
            raise ValueError(f"n must be an even integer >= 2, got {self.n}")


@dataclass(frozen=True, eq=False)
class PairPlan:
    views: list[SliceView]
    gp_positives: list[frozenset[int]]
    la_pairs: list[tuple[int, int]]

    def __len__(self):
        return len(self.views)

    def gp_mask(self) -> np.ndarray:
        m = np.zeros((len(self.views),) * 2, dtype=bool)
        for i, P in enumerate(self.gp_positives):
            m[i, list(P)] = True
        return m

    def check(self, t: float) -> None:
        """Assert the structural invariants of the plan."""
        for i, P in enumerate(self.gp_positives):
            assert i not in P, f"view {i} is its own positive"
            for j in P:
                assert i in self.gp_positives[j], f"positive sets not symmetric at ({i}, {j})"
        for i, vi in enumerate(self.views):
            for j, vj in enumerate(self.views):
                if i != j and _twins(vi, vj):
                    assert j in self.gp_positives[i], f"twin {j} missing from P_{i}"
        for i, j in self.la_pairs:
            vi, vj = self.views[i], self.views[j]
            assert i < j
            assert vi.subject_id == vj.subject_id
            assert _index_close(vi, vj, t)
            assert j in self.gp_positives[i], f"alignment pair ({i}, {j}) is not a global positive"


def relative_position(slice_index: int, V: int) -> float:
    if V <= 0:
        raise ValueError(f"V must be positive, got {V}")
    if not 0 <= slice_index < V:
        raise ValueError(f"slice_index {slice_index} outside [0, {V})")
    return slice_index / V


def _twins(a: SliceView, b: SliceView) -> bool:
    return a.subject_id == b.subject_id and a.slice_index == b.slice_index and a.view_id != b.view_id


def _exact(t: float) -> Fraction:
    # read t as the decimal the user wrote; Fraction(0.1) is slightly above 1/10
    return Fraction(repr(float(t)))


def _position_close(a: SliceView, b: SliceView, t: float) -> bool:
    # |ia/Va - ib/Vb| < t  <=>  |ia*Vb - ib*Va| < t*Va*Vb
    return abs(a.slice_index * b.V - b.slice_index * a.V) < _exact(t) * a.V * b.V


def _index_close(a: SliceView, b: SliceView, t: float) -> bool:
    return abs(a.slice_index - b.slice_index) < _exact(t) * a.V


def gp_positive_set(views: Sequence[SliceView], t: float) -> list[frozenset[int]]:
    out = []
    for i, vi in enumerate(views):
        out.append(
            frozenset(j for j, vj in enumerate(views) if j != i and (_twins(vi, vj) or _position_close(vi, vj, t)))
        )
    return out


def la_positive_pairs(views: Sequence[SliceView], t: float) -> list[tuple[int, int]]:
    pairs = []
    for i in range(len(views)):
        for j in range(i + 1, len(views)):
            vi, vj = views[i], views[j]
            if vi.subject_id == vj.subject_id and _index_close(vi, vj, t):
                pairs.append((i, j))
    return pairs


def build_plan(views: Sequence[SliceView], t: float) -> PairPlan:
    views = list(views)
    return PairPlan(views, gp_positive_set(views, t), la_positive_pairs(views, t))


def sample_pretrain_batch(
    dataset: Sequence[Volume], cfg: PairingConfig, aug: AugmentConfig, rng: np.random.Generator
) -> PairPlan:
    """Two distinct subjects, n/2 slices from each, two views per slice.

    Views are ordered subject-major with twins adjacent: ``[s0 slice a v0,
    s0 slice a v1, s0 slice b v0, ...]``.
    """
    if len(dataset) < 2:
        raise ValueError(f"pre-training batches need at least 2 subjects, got {len(dataset)}")
    half = cfg.n // 2
    picks = rng.choice(len(dataset), size=2, replace=False)
    views: list[SliceView] = []
    for k in picks:
        vol = dataset[int(k)]
        if vol.V < half:
            raise ValueError(f"{vol.subject_id}: V={vol.V} < n/2={half}; cannot sample without replacement")
        for idx in np.sort(rng.choice(vol.V, size=half, replace=False)):
            views.extend(two_views(get_slice(vol, int(idx)), aug, rng))
    plan = build_plan(views, cfg.t)
    plan.check(cfg.t)
    return plan
