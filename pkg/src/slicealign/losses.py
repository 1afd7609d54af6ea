"""Local alignment, window-based local alignment and global positional losses.

Shapes used throughout:

* pixel embeddings: ``(B, c, h, w)`` tensors, unit L2 norm along ``c``
  (or the ``c x hw`` matrix form held by :class:`PixelEmbedding`)
* global features: ``(2n, d)``

The alignment loss scores every query pixel of slice ``i`` against the
pixels of slice ``j`` (one similarity row per query pixel), keeps the best
score of each row and pulls it toward 1 with an L1 penalty. The windowed
variant restricts each row to the aligned ``omega x omega`` window, so the
full-plane loss is the ``omega == h == w`` special case of the same kernel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import torch
import torch.nn.functional as F

from .pairing import PairPlan

NORM_EPS = 1e-8
AXES = ("row", "col")

# Counts pixels whose embedding norm fell below NORM_EPS.
DEBUG_COUNTERS = {"zero_pixels": 0}

EmbedParams = Union[None, torch.Tensor, Callable[[torch.Tensor], torch.Tensor]]
Positives = Union[torch.Tensor, Sequence[Sequence[int]]]


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    omega: int = 4
    tau: float = 0.1
    s: int = 4
    la_axis: str = "row"
    la_symmetric: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if self.omega < 1:
            raise ValueError(f"omega must be a positive integer, got {self.omega}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.la_axis not in AXES:
            raise ValueError(f"la_axis must be one of {AXES}, got {self.la_axis!r}")


@dataclass(frozen=True)
class ComplexityReport:
    mac_count: int
    peak_similarity_entries: int


@dataclass(frozen=True, eq=False)
class PixelEmbedding:
    matrix: torch.Tensor  # (c, h*w)
    grid_shape: tuple[int, int]

    @classmethod
    def from_map(cls, emb: torch.Tensor) -> "PixelEmbedding":
        c, h, w = emb.shape
        return cls(emb.reshape(c, h * w), (h, w))

    def to_map(self) -> torch.Tensor:
        return self.matrix.reshape(self.matrix.shape[0], *self.grid_shape)


def _apply_embed(x: torch.Tensor, embed: EmbedParams) -> torch.Tensor:
    if embed is None:
        return x
    if isinstance(embed, torch.Tensor):
        # per-pixel linear map: (c_out, c_in)
        return torch.einsum("oc,bchw->bohw", embed, x)
    return embed(x)


def normalize_embed(feature_map: torch.Tensor, embed: EmbedParams = None) -> torch.Tensor:
    """Embed every pixel then L2-normalize along channels.

    Accepts ``(c, h, w)`` or ``(B, c, h, w)`` and returns the same rank.
    Zero vectors stay (numerically) zero instead of raising.
    """
    squeeze = feature_map.dim() == 3
    x = feature_map[None] if squeeze else feature_map
    x = _apply_embed(x, embed)
    norms = x.detach().norm(dim=1)
    DEBUG_COUNTERS["zero_pixels"] += int((norms < NORM_EPS).sum())
    x = F.normalize(x, p=2.0, dim=1, eps=NORM_EPS)
    return x[0] if squeeze else x


def pixel_embedding(feature_map: torch.Tensor, embed: EmbedParams = None) -> PixelEmbedding:
    return PixelEmbedding.from_map(normalize_embed(feature_map, embed))


def window_partition(emb: torch.Tensor, omega: int) -> torch.Tensor:
    """``(B, c, h, w)`` -> ``(B, r_h * r_w, omega**2, c)``, windows in row-major order."""
    B, c, h, w = emb.shape
    if h % omega or w % omega:
        raise ValueError(f"feature grid h={h}, w={w} is not divisible by window size omega={omega}")
    rh, rw = h // omega, w // omega
    x = emb.reshape(B, c, rh, omega, rw, omega).permute(0, 2, 4, 3, 5, 1)
    return x.reshape(B, rh * rw, omega * omega, c)


def _max_first(A: torch.Tensor, dim: int) -> torch.Tensor:
    # ties resolve to the lowest index, so the subgradient is reproducible
    idx = A.argmax(dim=dim, keepdim=True)
    return A.gather(dim, idx).squeeze(dim)


def _window_alignment(q: torch.Tensor, k: torch.Tensor, axis: str, symmetric: bool) -> tuple[torch.Tensor, int]:
    """Per-pair alignment loss from windowed embeddings.

    ``q``, ``k``: ``(P, R, m, c)``. Returns ``(P,)`` losses and the number of
    similarity entries materialized per pair.
    """
    P, R, m, c = q.shape
    A = torch.bmm(q.reshape(P * R, m, c).contiguous(), k.reshape(P * R, m, c).transpose(1, 2))
    A = A.reshape(P, R, m, m)
    # "row": each query pixel of the first map takes its best match in the second
    row = (1.0 - _max_first(A, 3)).abs().reshape(P, R * m).mean(dim=1)
    if symmetric:
        col = (1.0 - _max_first(A, 2)).abs().reshape(P, R * m).mean(dim=1)
        loss = 0.5 * (row + col)
    elif axis == "row":
        loss = row
    else:
        loss = (1.0 - _max_first(A, 2)).abs().reshape(P, R * m).mean(dim=1)
    return loss, R * m * m


def local_alignment_loss(
    X_i: Union[PixelEmbedding, torch.Tensor],
    X_j: Union[PixelEmbedding, torch.Tensor],
    axis: str = "row",
    symmetric: bool = False,
) -> torch.Tensor:
    """Full-plane alignment loss between two ``c x hw`` unit-column matrices."""
    Xi = X_i.matrix if isinstance(X_i, PixelEmbedding) else X_i
    Xj = X_j.matrix if isinstance(X_j, PixelEmbedding) else X_j
    if Xi.dim() != 2 or Xi.shape != Xj.shape:
        raise ValueError(f"embedding shapes differ or are not c x hw: {tuple(Xi.shape)} vs {tuple(Xj.shape)}")
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    q = Xi.t().contiguous()[None, None]
    k = Xj.t().contiguous()[None, None]
    loss, _ = _window_alignment(q, k, axis, symmetric)
    return loss[0]


def windowed_alignment_batch(
    emb_i: torch.Tensor, emb_j: torch.Tensor, omega: int, axis: str = "row", symmetric: bool = False
) -> tuple[torch.Tensor, ComplexityReport]:
    """Windowed alignment for ``P`` pairs of normalized embeddings ``(P, c, h, w)``.

    Returns per-pair losses ``(P,)`` and the per-pair complexity.
    """
    if emb_i.shape != emb_j.shape:
        raise ValueError(f"embedding shapes differ: {tuple(emb_i.shape)} vs {tuple(emb_j.shape)}")
    c = emb_i.shape[1]
    loss, entries = _window_alignment(window_partition(emb_i, omega), window_partition(emb_j, omega), axis, symmetric)
    return loss, ComplexityReport(mac_count=entries * c, peak_similarity_entries=entries)


def windowed_local_alignment_loss(
    fmap_i: torch.Tensor,
    fmap_j: torch.Tensor,
    embed: EmbedParams,
    omega: int,
    axis: str = "row",
    symmetric: bool = False,
) -> tuple[torch.Tensor, ComplexityReport]:
    """Window-based alignment between two ``c x h x w`` feature maps.

    Both maps are embedded and normalized, cut into ``omega x omega``
    windows, and each query pixel is matched only inside the window with the
    same grid index. The loss averages the per-pixel terms over all ``hw``
    query pixels.
    """
    if fmap_i.dim() != 3 or fmap_i.shape != fmap_j.shape:
        raise ValueError(f"expected two c x h x w maps of equal shape, got {tuple(fmap_i.shape)}, {tuple(fmap_j.shape)}")
    emb_i = normalize_embed(fmap_i, embed)[None]
    emb_j = normalize_embed(fmap_j, embed)[None]
    loss, report = windowed_alignment_batch(emb_i, emb_j, omega, axis, symmetric)
    return loss[0], report


def _positive_mask(positives: Positives, n: int, device) -> torch.Tensor:
    if isinstance(positives, torch.Tensor):
        mask = positives.to(device=device, dtype=torch.bool)
    else:
        if len(positives) != n:
            raise ValueError(f"got {len(positives)} positive sets for {n} features")
        mask = torch.zeros(n, n, dtype=torch.bool, device=device)
        for i, P in enumerate(positives):
            for j in P:
                mask[i, j] = True
    if mask.diagonal().any():
        raise ValueError("a sample cannot be its own positive")
    empty = (~mask.any(dim=1)).nonzero().flatten().tolist()
    if empty:
        raise ValueError(f"empty positive set for samples {empty}")
    return mask


def global_positional_loss(
    features: torch.Tensor, positives: Positives, tau: float = 0.1, reduction: str = "mean"
) -> torch.Tensor:
    """Positional contrastive loss with ``Sim(a, b) = exp(cos(a, b) / tau)``.

    For sample ``i`` every other sample enters the denominator; the loss is
    the mean negative log-ratio over its positive set.
    """
    if features.dim() != 2 or features.shape[0] < 2:
        raise ValueError(f"expected (2n, d) features with 2n >= 2, got {tuple(features.shape)}")
    n = features.shape[0]
    norms = features.norm(dim=1)
    if bool((norms == 0).any()):
        raise ValueError(f"zero-norm global feature at rows {(norms == 0).nonzero().flatten().tolist()}")
    mask = _positive_mask(positives, n, features.device)
    z = features / norms[:, None]
    logits = z @ z.t() / tau
    eye = torch.eye(n, dtype=torch.bool, device=features.device)
    log_denom = torch.logsumexp(logits.masked_fill(eye, float("-inf")), dim=1)
    log_ratio = logits - log_denom[:, None]
    per_sample = -torch.where(mask, log_ratio, torch.zeros_like(log_ratio)).sum(dim=1) / mask.sum(dim=1)
    if reduction == "none":
        return per_sample
    return per_sample.mean()


def overall_loss(
    plan: PairPlan,
    pixel_emb: torch.Tensor,
    global_features: torch.Tensor,
    cfg: LossConfig,
) -> tuple[torch.Tensor, dict]:
    """Global positional term plus ``lambda`` times the mean alignment over ``P^A``.

    ``pixel_emb`` are the normalized embeddings ``(2n, c, h, w)`` of the plan's
    views. With an empty pair list the alignment term is 0. ``la_term`` in the
    breakdown is the weighted contribution ``lambda * mean``.
    """
    gp = global_positional_loss(global_features, plan.gp_positives, cfg.tau)
    breakdown = {"gp_term": gp.detach().item(), "la_term": 0.0, "la_raw": 0.0, "num_la_pairs": len(plan.la_pairs)}
    if cfg.lam == 0 or not plan.la_pairs:
        breakdown["total"] = breakdown["gp_term"]
        return gp, breakdown
    ii = torch.tensor([p[0] for p in plan.la_pairs])
    jj = torch.tensor([p[1] for p in plan.la_pairs])
    per_pair, report = windowed_alignment_batch(
        pixel_emb[ii], pixel_emb[jj], cfg.omega, cfg.la_axis, cfg.la_symmetric
    )
    la = per_pair.mean()
    la_term = cfg.lam * la
    total = gp + la_term
    breakdown.update(
        la_term=la_term.detach().item(),
        la_raw=la.detach().item(),
        total=total.detach().item(),
        mac_per_pair=report.mac_count,
    )
    return total, breakdown
