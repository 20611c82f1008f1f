"""Training objectives on continuous hash features."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F

from .backbone import ConfigError


@dataclass
class LossConfig:
    temperature: float = 0.1
    epsilon: float = 1e-8
    margin: float | None = None  # None -> code_bits / 2
    alpha_teacher: float = 1.0
    alpha_student: float = 2.0
    beta_student: float = 2.0
    gamma: float = 0.3
    # "pairs" divides the triplet double sum by B^2, "batch" by B
    triplet_norm: str = "pairs"
    normalize_contrastive: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        for name in ("alpha_teacher", "alpha_student", "beta_student", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.margin is not None and self.margin < 0:
            raise ConfigError("margin must be non-negative")
        if self.triplet_norm not in ("pairs", "batch"):
            raise ConfigError(f"triplet_norm must be 'pairs' or 'batch', got {self.triplet_norm!r}")

    def margin_for(self, code_bits: int) -> float:
        return code_bits / 2 if self.margin is None else self.margin


@dataclass
class LossBreakdown:
    contrastive: float = 0.0
    triplet: float = 0.0
    high: float = 0.0
    global_: float = 0.0
    local: float = 0.0
    distill: float = 0.0
    total: float = 0.0

    FIELDS = ("contrastive", "triplet", "high", "global", "local", "distill", "total")

    def as_dict(self) -> dict[str, float]:
        d = asdict(self)
        d["global"] = d.pop("global_")
        return {k: d[k] for k in self.FIELDS}

    @classmethod
    def from_dict(cls, d: dict) -> "LossBreakdown":
        return cls(**{("global_" if k == "global" else k): float(v) for k, v in d.items()})


def contrastive_terms(sim: torch.Tensor, labels: torch.Tensor, temperature: float,
                      epsilon: float, stabilize: bool = True) -> torch.Tensor:
    """Per-anchor supervised contrastive terms from a similarity matrix.

    For anchor i, the denominator runs over all r != i and the positives are
    the other same-label samples; the log-ratios are summed over positives and
    divided by ``n_pos + epsilon``. With ``stabilize`` the row maximum over
    r != i is subtracted first, which leaves the value unchanged.
    """
    n = sim.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs at least 2 samples")
    eye = torch.eye(n, dtype=torch.bool, device=sim.device)
    logits = sim.masked_fill(eye, float("-inf"))
    if stabilize:
        # c_i cancels analytically; detaching keeps the max out of the graph
        c = logits.max(dim=1, keepdim=True).values.detach()
        logits = logits - c
    logits = logits / temperature
    log_denom = torch.logsumexp(logits, dim=1, keepdim=True)
    log_prob = (logits - log_denom).masked_fill(eye, 0.0)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    n_pos = pos.sum(1).to(sim.dtype)
    return -(log_prob * pos).sum(1) / (n_pos + epsilon)


def supervised_contrastive(h: torch.Tensor, labels: torch.Tensor, temperature: float = 0.1,
                           epsilon: float = 1e-8, normalize: bool = True) -> torch.Tensor:
    """Sum over anchors of the stabilized supervised contrastive terms.

    Rows of ``h`` are L2-normalized first unless ``normalize`` is False.
    """
    if h.shape[0] < 2:
        raise ValueError("contrastive loss needs at least 2 samples")
    if normalize:
        h = F.normalize(h, dim=1)
    return contrastive_terms(h @ h.T, labels, temperature, epsilon).sum()


def relaxed_hamming(x: torch.Tensor, y: torch.Tensor | None = None) -> torch.Tensor:
    """Pairwise (b - xs . ys) / 2 with rows rescaled to norm sqrt(b).

    Equals the Hamming distance for +-1 codes. Returns [n_x, n_y].
    """
    if y is None:
        y = x
    b = x.shape[1]
    scale = math.sqrt(b)
    xs = F.normalize(x, dim=1) * scale
    ys = F.normalize(y, dim=1) * scale
    return (b - xs @ ys.T) / 2


def hamming_triplet(h: torch.Tensor, labels: torch.Tensor, margin: float,
                    norm: str = "pairs") -> torch.Tensor:
    """Pull same-label pairs together in relaxed Hamming distance, push others past ``margin``.

    Self-pairs are excluded. ``norm="pairs"`` divides by B^2, ``"batch"`` by B.
    """
    n = h.shape[0]
    dist = relaxed_hamming(h)
    same = labels[:, None] == labels[None, :]
    per_pair = torch.where(same, dist, torch.clamp(margin - dist, min=0.0))
    per_pair = per_pair.masked_fill(torch.eye(n, dtype=torch.bool, device=h.device), 0.0)
    denom = n * n if norm == "pairs" else n
    return per_pair.sum() / denom


def teacher_total(contrastive, triplet, config: LossConfig):
    return contrastive + config.alpha_teacher * triplet


def student_total(contrastive, triplet, distill, config: LossConfig):
    return contrastive + config.alpha_student * triplet + config.beta_student * distill
