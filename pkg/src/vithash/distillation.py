"""Teacher-to-student alignment losses.

High-level alignment matches hash features directly. Low-level alignment
matches, for each configured layer pair, the class token (through a
projection) and window-pooled patch tokens weighted by window size.
All distances are unsquared L2 norms averaged over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn as nn

from .backbone import ConfigError, EncoderOutput

_ZERO_DIST = 1e-12


@dataclass(frozen=True)
class LayerPairSpec:
    """1-based block indices of an aligned (student, teacher) layer pair."""

    student_layer_index: int
    teacher_layer_index: int


@dataclass
class WindowSummary:
    pooled: torch.Tensor  # [K, D] or [batch, K, D]
    counts: torch.Tensor  # [K] tokens per window
    window_size: int
    num_tokens: int  # N, including tokens discarded by the square crop

    @property
    def weights(self) -> torch.Tensor:
        return self.counts.to(self.pooled.dtype) / self.num_tokens


def safe_norm(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """L2 norm whose gradient is defined as 0 at (numerically) zero distance."""
    sq = (x * x).sum(dim)
    nonzero = sq > _ZERO_DIST ** 2
    return torch.where(nonzero, torch.sqrt(torch.where(nonzero, sq, torch.ones_like(sq))),
                       torch.zeros_like(sq))


def tail_layer_pairs(student_layers: int, teacher_layers: int, count: int = 2) -> list[LayerPairSpec]:
    """Map the last ``count`` student blocks onto the last ``count`` teacher blocks."""
    if count > min(student_layers, teacher_layers):
        raise ConfigError(f"cannot align {count} layers between depths {student_layers} and {teacher_layers}")
    return [
        LayerPairSpec(student_layers - count + 1 + i, teacher_layers - count + 1 + i)
        for i in range(count)
    ]


def high_level_loss(h_t: torch.Tensor, h_s: torch.Tensor) -> torch.Tensor:
    if h_t.shape != h_s.shape:
        raise ValueError(f"hash shapes differ: teacher {tuple(h_t.shape)} vs student {tuple(h_s.shape)}")
    return safe_norm(h_t - h_s).mean()


def global_align_loss(class_t: torch.Tensor, class_s: torch.Tensor, proj: torch.Tensor) -> torch.Tensor:
    """Batch mean of ||class_t @ proj - class_s||.  ``proj`` is [D_t, D_s]."""
    if class_t.shape[-1] != proj.shape[0] or class_s.shape[-1] != proj.shape[1]:
        raise ValueError(
            f"shape mismatch: class_t {tuple(class_t.shape)}, class_s {tuple(class_s.shape)}, "
            f"proj {tuple(proj.shape)}"
        )
    return safe_norm(class_t @ proj - class_s).mean()


@lru_cache(maxsize=64)
def window_layout(num_tokens: int, window_size: int) -> tuple[tuple[tuple[int, ...], ...], int]:
    """Token indices of each window over the floor(sqrt N) square grid.

    Windows tile the grid row-major from the top-left; when the window size
    does not divide the grid side, the last row/column of windows is ragged.
    Returns ``(windows, grid_side)``.
    """
    side = math.isqrt(num_tokens)
    if window_size < 1 or window_size > side:
        raise ConfigError(f"window size {window_size} must lie in [1, {side}] for N={num_tokens}")
    starts = range(0, side, window_size)
    windows = []
    for r0 in starts:
        for c0 in starts:
            rows = range(r0, min(r0 + window_size, side))
            cols = range(c0, min(c0 + window_size, side))
            windows.append(tuple(r * side + c for r in rows for c in cols))
    return tuple(windows), side


def pooling_matrix(num_tokens: int, window_size: int, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """``(A [K, N], counts [K])`` with ``A @ tokens`` giving per-window means."""
    windows, _ = window_layout(num_tokens, window_size)
    a = torch.zeros(len(windows), num_tokens, dtype=dtype)
    for k, idx in enumerate(windows):
        a[k, list(idx)] = 1.0 / len(idx)
    counts = torch.tensor([len(idx) for idx in windows], dtype=torch.long)
    return a, counts


def window_partition_pool(tokens: torch.Tensor, window_size: int,
                          proj: torch.Tensor | None = None) -> WindowSummary:
    """Project (optional), grid-reshape, window-partition and average-pool tokens.

    ``tokens`` is [N, D] or [batch, N, D] and must exclude the class token.
    """
    n = tokens.shape[-2]
    if proj is not None:
        tokens = tokens @ proj
    a, counts = pooling_matrix(n, window_size, dtype=tokens.dtype)
    pooled = torch.matmul(a.to(tokens.device), tokens)
    return WindowSummary(pooled, counts, window_size, n)


def local_align_loss(win_s: WindowSummary, win_t: WindowSummary) -> torch.Tensor:
    if (win_s.pooled.shape != win_t.pooled.shape or not torch.equal(win_s.counts, win_t.counts)
            or win_s.num_tokens != win_t.num_tokens):
        raise ValueError("window layouts of student and teacher differ")
    dist = safe_norm(win_s.pooled - win_t.pooled)  # [..., K]
    per_sample = (dist * win_s.weights.to(dist.device)).sum(-1)
    return per_sample.mean()


class AlignmentProjections(nn.Module):
    """Per-layer-pair, unshared global and local projections [D_t, D_s]."""

    def __init__(self, teacher_dim: int, student_dim: int, num_pairs: int, seed: int | None = None):
        super().__init__()
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        bound = 1.0 / teacher_dim ** 0.5

        def init():
            return nn.Parameter(torch.rand(teacher_dim, student_dim, generator=gen) * 2 * bound - bound)

        self.global_proj = nn.ParameterList(init() for _ in range(num_pairs))
        self.local_proj = nn.ParameterList(init() for _ in range(num_pairs))


def distill_loss(teacher_out: EncoderOutput, student_out: EncoderOutput,
                 h_t: torch.Tensor, h_s: torch.Tensor, pairs: list[LayerPairSpec],
                 projections: AlignmentProjections, gamma: float, window_size: int) -> dict[str, torch.Tensor]:
    """Returns ``high``, ``global``, ``local`` and ``distill`` tensors.

    ``distill = high + gamma * sum_m (global_m + local_m)``; every term is a
    batch mean, so this equals the batch mean of the per-sample combination.
    Teacher quantities are detached.
    """
    if not pairs:
        raise ConfigError("at least one layer pair is required for distillation")
    if len(projections.global_proj) != len(pairs):
        raise ConfigError(f"{len(pairs)} layer pairs but {len(projections.global_proj)} projections")
    high = high_level_loss(h_t.detach(), h_s)
    glob = h_s.new_zeros(())
    local = h_s.new_zeros(())
    for m, pair in enumerate(pairs):
        z_t = teacher_out.per_layer[pair.teacher_layer_index - 1].detach()
        z_s = student_out.per_layer[pair.student_layer_index - 1]
        if z_t.shape[1] != z_s.shape[1]:
            raise ConfigError(
                f"token grids differ (teacher {z_t.shape[1]} vs student {z_s.shape[1]} tokens); "
                "teacher and student must share image and patch size"
            )
        glob = glob + global_align_loss(z_t[:, 0], z_s[:, 0], projections.global_proj[m])
        win_t = window_partition_pool(z_t[:, 1:], window_size, projections.local_proj[m])
        win_s = window_partition_pool(z_s[:, 1:], window_size)
        local = local + local_align_loss(win_s, win_t)
    return {
        "high": high,
        "global": glob,
        "local": local,
        "distill": high + gamma * (glob + local),
    }
