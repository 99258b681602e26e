"""Training objectives: quality regression, relative ranking, self-consistency, total."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, asdict

import torch

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.05
    lambda3: float = 1.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    quality: float
    ranking: float
    consistency: float
    total: float
    margin1: float = 0.0
    margin2: float = 0.0
    extremes: tuple[int, int, int, int] | None = None

    CSV_FIELDS = ("quality", "ranking", "consistency", "total", "margin1", "margin2")

    def row(self) -> list[float]:
        d = asdict(self)
        return [d[k] for k in self.CSV_FIELDS]


class RankingSkipped(Exception):
    """Raised by :func:`find_extremes` when the batch cannot be ranked."""


def _norm(diff: torch.Tensor, norm: str) -> torch.Tensor:
    if norm == "l1":
        return diff.abs().mean()
    if norm == "l2":
        return (diff * diff).mean()
    raise ValueError(f"unknown loss norm {norm!r}; expected 'l1' or 'l2'")


def quality_loss(q: torch.Tensor, s: torch.Tensor, norm: str = "l1") -> torch.Tensor:
    """Mean absolute (or squared) error between predictions and subjective scores."""
    if q.numel() == 0:
        raise ValueError("quality_loss: empty batch")
    if q.shape != s.shape:
        raise ValueError(f"quality_loss: shape mismatch {tuple(q.shape)} vs {tuple(s.shape)}")
    return _norm(q - s, norm)


def find_extremes(s) -> tuple[int, int, int, int]:
    """Indices of the highest, second highest, lowest and second lowest targets.

    Ties go to the lowest index. Raises :class:`RankingSkipped` for fewer than
    four samples or all-equal targets.
    """
    vals = [float(v) for v in (s.tolist() if torch.is_tensor(s) else s)]
    if len(vals) < 4:
        raise RankingSkipped(f"need at least 4 samples, got {len(vals)}")
    if max(vals) == min(vals):
        raise RankingSkipped("all targets equal")
    desc = sorted(range(len(vals)), key=lambda i: (-vals[i], i))
    asc = sorted(range(len(vals)), key=lambda i: (vals[i], i))
    return desc[0], desc[1], asc[0], asc[1]


def _exact_hinge_arg(arg: torch.Tensor, q, i, j, k, l, margin_terms) -> torch.Tensor:
    """Give ``arg = |q_i - q_j| - |q_k - q_l| + margin`` its correctly rounded value.

    Evaluated term by term in floating point, the three differences round
    independently, so ``q = s`` leaves residues of a few ulp instead of an
    exact zero. The signs of the rounded differences are exact, which lets
    the whole expression be summed exactly with :func:`math.fsum`. The
    gradient is untouched.
    """
    v = q.detach().double().tolist()
    a = 1.0 if v[i] >= v[j] else -1.0
    b = 1.0 if v[k] >= v[l] else -1.0
    exact = math.fsum([a * v[i], -a * v[j], -b * v[k], b * v[l], *margin_terms])
    return arg + (torch.tensor(exact, dtype=arg.dtype) - arg.detach())


def relative_ranking_loss(q: torch.Tensor, s: torch.Tensor, return_details: bool = False):
    """Triplet hinge on the batch extremes with margins taken from the target gaps.

    ``margin1 = s[max2] - s[min]`` and ``margin2 = s[max] - s[min2]`` are
    constants (no gradient flows through ``s``). A skipped batch yields 0.
    """
    try:
        i_max, i_max2, i_min, i_min2 = find_extremes(s)
    except RankingSkipped as exc:
        log.debug("ranking loss skipped: %s", exc)
        zero = q.sum() * 0.0
        return (zero, (0.0, 0.0, None)) if return_details else zero
    st = s.detach()
    margin1 = st[i_max2] - st[i_min]
    margin2 = st[i_max] - st[i_min2]
    span = (q[i_max] - q[i_min]).abs()
    sv = st.double().tolist()
    arg1 = _exact_hinge_arg((q[i_max] - q[i_max2]).abs() - span + margin1, q, i_max, i_max2, i_max, i_min,
                            (sv[i_max2], -sv[i_min]))
    arg2 = _exact_hinge_arg((q[i_min2] - q[i_min]).abs() - span + margin2, q, i_min2, i_min, i_max, i_min,
                            (sv[i_max], -sv[i_min2]))
    term1 = torch.clamp(arg1, min=0.0)
    term2 = torch.clamp(arg2, min=0.0)
    loss = term1 + term2
    if return_details:
        return loss, (float(margin1), float(margin2), (i_max, i_max2, i_min, i_min2))
    return loss


def self_consistency_loss(conv: torch.Tensor, conv_t: torch.Tensor,
                          atten: torch.Tensor, atten_t: torch.Tensor,
                          rank: torch.Tensor, rank_t: torch.Tensor,
                          lambda1: float = 0.5, norm: str = "l1") -> torch.Tensor:
    """Disagreement between branch outputs on a batch and on its transformed copy."""
    if conv.shape != conv_t.shape or atten.shape != atten_t.shape:
        raise ValueError("self_consistency_loss: batch and transformed outputs differ in shape")
    loss = _norm(conv - conv_t, norm)
    if atten.numel():
        loss = loss + _norm(atten - atten_t, norm)
    rank_gap = rank - rank_t
    return loss + lambda1 * (rank_gap.abs() if norm == "l1" else rank_gap * rank_gap)


def total_loss(quality, ranking, consistency, weights: LossWeights):
    return quality + weights.lambda2 * ranking + weights.lambda3 * consistency


def compute_losses(out, out_t, s: torch.Tensor, weights: LossWeights,
                   norm: str = "l1", consistency_on: str = "scalar"):
    """All four objectives for a batch ``out`` and its transformed copy ``out_t``.

    Returns ``(total, LossReport)``. ``out_t`` may be ``None`` when the
    consistency weight is zero, in which case that term is 0.
    """
    quality = quality_loss(out.q, s, norm)
    ranking, (m1, m2, ext) = relative_ranking_loss(out.q, s, return_details=True)
    if out_t is None:
        consistency = quality * 0.0
    else:
        ranking_t = relative_ranking_loss(out_t.q, s)
        if consistency_on == "scalar":
            a, a_t, b, b_t = out.conv_logit, out_t.conv_logit, out.atten_logit, out_t.atten_logit
        elif consistency_on == "vector":
            a, a_t, b, b_t = out.conv_pooled, out_t.conv_pooled, out.atten_pooled, out_t.atten_pooled
        else:
            raise ValueError(f"consistency_on must be 'scalar' or 'vector', got {consistency_on!r}")
        consistency = self_consistency_loss(a, a_t, b, b_t, ranking, ranking_t, weights.lambda1, norm)
    total = total_loss(quality, ranking, consistency, weights)
    parts = float(quality.detach()), float(ranking.detach()), float(consistency.detach())
    report = LossReport(*parts, total_loss(*parts, weights), m1, m2, ext)
    return total, report
