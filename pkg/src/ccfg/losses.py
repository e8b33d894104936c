"""Loss functions for the two training stages.

All functions operate on plain tensors, are differentiable through autograd and
return summed (not averaged) scalars. They hold no state and are safe to call
concurrently.
"""
from dataclasses import dataclass
import math

import torch
import torch.nn.functional as F

UNIT_NORM_TOL = 1e-6
COSINE_TOL = 1e-6
PROB_FLOOR = 1e-12
_DIST_FLOOR = 1e-24


@dataclass(frozen=True)
class LossConfig:
    """Hyperparameters of every loss term.

    Defaults are the settings used for the Chinese character benchmark.
    """

    tau: float = 0.07
    base_tau: float = 0.07
    gamma: float = 3.5
    s: float = 30.0
    m_c: float = 0.40
    m_e: float = 1.0
    m_a: float = 1.0
    lam: float = 0.3
    p_n: int = 4

    def __post_init__(self):
        if self.tau <= 0 or self.base_tau <= 0:
            raise ValueError(f"temperatures must be positive, got tau={self.tau}, base_tau={self.base_tau}")
        if not 0 <= self.gamma <= 3.5:
            raise ValueError(f"gamma must lie in [0, 3.5], got {self.gamma}")
        if self.s <= 0:
            raise ValueError(f"s must be positive, got {self.s}")
        if not 0 <= self.m_c <= 0.5:
            raise ValueError(f"m_c must lie in [0, 0.5], got {self.m_c}")
        if self.m_e <= 0 or self.m_a <= 0:
            raise ValueError(f"pair margins must be positive, got m_e={self.m_e}, m_a={self.m_a}")
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if int(self.p_n) != self.p_n or self.p_n < 0:
            raise ValueError(f"p_n must be a nonnegative integer, got {self.p_n}")


def scl_loss(z, labels, tau=0.07, base_tau=None, validate=True):
    """Supervised contrastive loss over one batch of unit-normalized embeddings.

    Rows whose label occurs only once in the batch have no positives and
    contribute 0. ``base_tau`` rescales the result by ``tau / base_tau``.
    ``validate=False`` skips the unit-norm check (used for gradient probing).
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if z.dim() != 2:
        raise ValueError(f"expected a (B, d) matrix, got shape {tuple(z.shape)}")
    n = z.shape[0]
    if n < 2:
        raise ValueError(f"batch needs at least 2 rows, got {n}")
    labels = torch.as_tensor(labels, device=z.device).reshape(-1)
    if labels.numel() != n:
        raise ValueError(f"{labels.numel()} labels for {n} rows")
    if (labels < 0).any():
        raise ValueError("labels must be nonnegative")
    if validate:
        norms = z.detach().norm(dim=1)
        if ((norms - 1).abs() > UNIT_NORM_TOL).any():
            raise ValueError("scl_loss expects unit-normalized rows")

    self_mask = torch.eye(n, dtype=torch.bool, device=z.device)
    logits = (z @ z.T / tau).masked_fill(self_mask, float("-inf"))
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    pos = (labels[:, None] == labels[None, :]) & ~self_mask
    n_pos = pos.sum(dim=1)
    per_row = -log_prob.masked_fill(~pos, 0.0).sum(dim=1) / n_pos.clamp(min=1)
    loss = per_row.sum()
    if base_tau is not None:
        loss = loss * (tau / base_tau)
    return loss


def _check_gamma(gamma):
    if gamma < 0:
        raise ValueError(f"gamma must be nonnegative, got {gamma}")


def _focal_terms(log_pt, gamma):
    if gamma == 0:
        # pow(0, 0) has a NaN gradient at pt == 1
        return -log_pt.sum()
    pt = log_pt.exp()
    return -((1 - pt).clamp(min=0) ** gamma * log_pt).sum()


def _target_prob(probs, labels):
    labels = torch.as_tensor(labels, device=probs.device).reshape(-1, 1)
    pt = probs.gather(1, labels).squeeze(1)
    if (pt == 0).any():
        raise ValueError("target probability is exactly 0; clamp probabilities before calling")
    return pt.clamp(PROB_FLOOR, 1.0)


def focal_pair_loss(probs_left, probs_right, left_labels, right_labels, gamma=3.5):
    """Focal loss summed over both members of every pair, on probability rows."""
    _check_gamma(gamma)
    if probs_left.shape != probs_right.shape:
        raise ValueError(f"shape mismatch {tuple(probs_left.shape)} vs {tuple(probs_right.shape)}")
    return (_focal_terms(_target_prob(probs_left, left_labels).log(), gamma)
            + _focal_terms(_target_prob(probs_right, right_labels).log(), gamma))


def focal_pair_loss_from_logits(logits_left, logits_right, left_labels, right_labels, gamma=3.5):
    """Same value as :func:`focal_pair_loss` on ``softmax(logits)``, via log-softmax."""
    _check_gamma(gamma)

    def side(logits, labels):
        labels = torch.as_tensor(labels, device=logits.device).reshape(-1, 1)
        return _focal_terms(F.log_softmax(logits, dim=1).gather(1, labels).squeeze(1), gamma)

    return side(logits_left, left_labels) + side(logits_right, right_labels)


def _lmcl_side(cos, labels, s, m_c):
    if cos.dim() != 2:
        raise ValueError(f"expected (N, C) cosines, got shape {tuple(cos.shape)}")
    if (cos.detach().abs() > 1 + COSINE_TOL).any():
        raise ValueError("cosine entries must lie in [-1, 1]")
    labels = torch.as_tensor(labels, device=cos.device).reshape(-1)
    if ((labels < 0) | (labels >= cos.shape[1])).any():
        raise ValueError(f"labels must lie in [0, {cos.shape[1]})")
    margin = F.one_hot(labels, cos.shape[1]).to(cos.dtype) * m_c
    return F.cross_entropy(s * (cos - margin), labels, reduction="sum")


def lmcl_loss(cos_left, cos_right, left_labels, right_labels, s=30.0, m_c=0.40):
    """Large-margin cosine loss, both pair members entering with a negative log."""
    if s <= 0:
        raise ValueError(f"s must be positive, got {s}")
    if not 0 <= m_c <= 0.5:
        raise ValueError(f"m_c must lie in [0, 0.5], got {m_c}")
    return _lmcl_side(cos_left, left_labels, s, m_c) + _lmcl_side(cos_right, right_labels, s, m_c)


def _pair_inputs(left, right, flags):
    if left.shape != right.shape:
        raise ValueError(f"left/right shape mismatch {tuple(left.shape)} vs {tuple(right.shape)}")
    if left.dim() != 2:
        raise ValueError(f"expected (N, d) matrices, got shape {tuple(left.shape)}")
    flags = torch.as_tensor(flags, device=left.device).reshape(-1)
    if flags.numel() != left.shape[0]:
        raise ValueError(f"{flags.numel()} flags for {left.shape[0]} pairs")
    if not ((flags == 0) | (flags == 1)).all():
        raise ValueError("flags must be 0 or 1")
    return flags.to(torch.bool)


def _contrastive(left, right, positive, margin):
    d2 = (left - right).pow(2).sum(dim=1)
    # clamp keeps the sqrt gradient finite when a pair coincides
    d = d2.clamp(min=_DIST_FLOOR).sqrt()
    hinge = (margin - d).clamp(min=0).pow(2)
    return torch.where(positive, d2, hinge).sum()


def euclidean_pair_loss(left, right, flags, m_e=1.0):
    """Pairwise contrastive loss on (already normalized) projections."""
    if m_e <= 0:
        raise ValueError(f"m_e must be positive, got {m_e}")
    positive = _pair_inputs(left, right, flags)
    return _contrastive(left, right, positive, m_e)


def _unit_rows(x):
    norms = x.norm(dim=1, keepdim=True)
    if (norms.detach() == 0).any() or not torch.isfinite(norms.detach()).all():
        raise ValueError("cannot normalize a zero-norm row")
    return x / norms


def angular_pair_loss(left, right, flags, m_a=1.0):
    """Pairwise contrastive loss on the directions of raw vectors (chord distance)."""
    if m_a <= 0:
        raise ValueError(f"m_a must be positive, got {m_a}")
    positive = _pair_inputs(left, right, flags)
    return _contrastive(_unit_rows(left), _unit_rows(right), positive, m_a)


def angular_pair_loss_cosine(left, right, flags, m_a=1.0):
    """The angular loss written through the cosine of the pair angle.

    Algebraically identical to :func:`angular_pair_loss`; kept as a cross-check.
    """
    if m_a <= 0:
        raise ValueError(f"m_a must be positive, got {m_a}")
    positive = _pair_inputs(left, right, flags)
    cos = (_unit_rows(left) * _unit_rows(right)).sum(dim=1)
    chord2 = (2 * (1 - cos)).clamp(min=0)
    hinge = (m_a - chord2.clamp(min=_DIST_FLOOR).sqrt()).clamp(min=0).pow(2)
    return torch.where(positive, chord2, hinge).sum()


def total_loss(focal, lmcl, l_e, l_a, lam=0.3):
    """Focal + LMCL + lam * (Euclidean + angular)."""
    for name, value in (("focal", focal), ("lmcl", lmcl), ("l_e", l_e), ("l_a", l_a)):
        v = value.detach() if torch.is_tensor(value) else torch.tensor(float(value))
        if not torch.isfinite(v).all():
            raise ValueError(f"non-finite loss component {name}={float(v)}")
    if not math.isfinite(lam):
        raise ValueError(f"non-finite lambda {lam}")
    return focal + lmcl + lam * (l_e + l_a)
