"""Training objectives.

All functions take torch tensors and return 0-dim tensors so they can be
back-propagated; numpy inputs are converted on the way in.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

LOG_EPS = 1e-7
NORM_TOL = 1e-5


def _t(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(x, dtype=dtype or torch.get_default_dtype())


def confidence_indicator(conf_a, conf_b, alpha_conf: float = 0.75):
    """1 where ``alpha_conf < conf_a < conf_b`` holds strictly, else 0.

    Works on python scalars (returns int) and on tensors (elementwise).
    """
    if isinstance(conf_a, torch.Tensor) or isinstance(conf_b, torch.Tensor):
        conf_a, conf_b = _t(conf_a), _t(conf_b)
        return ((alpha_conf < conf_a) & (conf_a < conf_b)).to(conf_a.dtype)
    return int(alpha_conf < conf_a < conf_b)


@dataclass
class ContrastiveBatch:
    """Paired overlap embeddings with their confidences and a negative bank.

    ``neg_bank`` is either ``K x D`` (shared by every anchor) or
    ``N_p x K x D`` (one set of negatives per anchor).
    """

    emb_a: torch.Tensor
    emb_b: torch.Tensor
    conf_a: torch.Tensor
    conf_b: torch.Tensor
    neg_bank: torch.Tensor
    tau: float = 0.1
    alpha_conf: float = 0.75

    def validate(self) -> None:
        n = self.emb_a.shape[0]
        if self.emb_b.shape != self.emb_a.shape:
            raise ValueError("emb_a and emb_b must have the same shape")
        if self.conf_a.shape != (n,) or self.conf_b.shape != (n,):
            raise ValueError("confidences must be length-N_p vectors")
        if self.neg_bank.dim() not in (2, 3) or self.neg_bank.shape[-2] < 1:
            raise ValueError("neg_bank must hold at least one negative")
        if self.neg_bank.dim() == 3 and self.neg_bank.shape[0] != n:
            raise ValueError("per-anchor neg_bank must have N_p rows")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        for name in ("emb_a", "emb_b", "neg_bank"):
            t = getattr(self, name)
            if t.numel() and (t.detach().norm(dim=-1) - 1).abs().max() > NORM_TOL:
                raise ValueError(f"{name} rows must be unit-normalised")


def contrastive_loss(batch: ContrastiveBatch, include_positive: bool = True) -> torch.Tensor:
    """Confidence-gated InfoNCE pulling each anchor in ``emb_a`` towards its
    more confident counterpart in ``emb_b``.

    ``emb_b`` is detached: it acts as the target and receives no gradient.
    Callers wanting both directions call this twice with a and b swapped.
    With ``include_positive=False`` the denominator holds only negatives.
    """
    batch.validate()
    gate = confidence_indicator(batch.conf_a.detach(), batch.conf_b.detach(), batch.alpha_conf)
    n_eff = gate.sum()
    if n_eff.item() == 0:
        # keep the graph attached so callers can always backprop
        return (batch.emb_a * 0).sum() + (batch.neg_bank * 0).sum()
    anchor = batch.emb_a
    target = batch.emb_b.detach()
    pos = (anchor * target).sum(-1) / batch.tau
    if batch.neg_bank.dim() == 2:
        neg = anchor @ batch.neg_bank.T / batch.tau
    else:
        neg = torch.einsum("nd,nkd->nk", anchor, batch.neg_bank) / batch.tau
    logits = torch.cat([pos[:, None], neg], dim=1) if include_positive else neg
    # logsumexp subtracts the row max before exponentiating
    per_pair = torch.logsumexp(logits, dim=1) - pos
    return (per_pair * gate).sum() / n_eff


def class_weights(gt: torch.Tensor, weighting: str = "frequency"):
    """Per-class weights (foreground, background) from pixel counts."""
    n_total = gt.numel()
    n_fg = gt.sum()
    n_bg = n_total - n_fg
    if weighting == "frequency":
        return n_fg / n_total, n_bg / n_total
    if weighting == "inverse_frequency":
        return n_bg / n_total, n_fg / n_total
    if weighting == "uniform":
        one = torch.ones((), dtype=gt.dtype)
        return one, one
    raise ValueError(f"unknown weighting {weighting!r}")


def balance_loss(pred, gt, alpha_exp: float = 2.0, eps: float = LOG_EPS,
                 weighting: str = "frequency") -> torch.Tensor:
    """Class-weighted focal binary cross-entropy averaged over all pixels.

    Foreground pixels contribute ``lam_fg * (1 - b)**alpha * log(b)``,
    background pixels ``lam_bg * b**alpha * log(1 - b)``; the weights come
    from :func:`class_weights` on ``gt``.
    """
    pred = _t(pred)
    gt = _t(gt, pred.dtype)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    lam_fg, lam_bg = class_weights(gt.detach(), weighting)
    fg = gt * lam_fg * (1 - pred) ** alpha_exp * torch.log(pred + eps)
    bg = (1 - gt) * lam_bg * pred ** alpha_exp * torch.log(1 - pred + eps)
    return -(fg + bg).sum() / pred.numel()


def construction_loss(pred, gt, reduction: str = "mean") -> torch.Tensor:
    pred = _t(pred)
    gt = _t(gt, pred.dtype)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    sq = (pred - gt) ** 2
    if reduction == "sum":
        return sq.sum()
    if reduction == "mean":
        return sq.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def weight_decay_loss(param_vectors, lambda_wd: float = 2e-4) -> torch.Tensor:
    """``lambda/2 * sum(w**2)`` over the given weight arrays."""
    if lambda_wd < 0:
        raise ValueError("lambda_wd must be >= 0")
    total = torch.zeros(())
    for p in param_vectors:
        if not isinstance(p, torch.Tensor):
            p = torch.as_tensor(p, dtype=torch.float64)
        total = total + (p ** 2).sum()
    return 0.5 * lambda_wd * total


def decay_parameters(model: torch.nn.Module):
    """Convolution kernels only; biases are excluded from weight decay."""
    return [p for name, p in model.named_parameters() if name.endswith("weight") and p.dim() > 1]


def _f(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


@dataclass
class LossBreakdown:
    contrast: float
    balance: float
    construction: float
    weight_decay: float
    total: float
    per_stage: list = field(default_factory=list)


def total_loss(stage_terms, construction, weight_decay, return_tensor: bool = False):
    """Sum the per-stage (contrast, balance) terms with the global terms.

    Returns a :class:`LossBreakdown` of floats, plus the differentiable total
    when ``return_tensor`` is set.
    """
    stage_terms = list(stage_terms)
    if not stage_terms:
        raise ValueError("need at least one stage")
    contrast = sum(c for c, _ in stage_terms)
    balance = sum(b for _, b in stage_terms)
    total = construction + weight_decay + contrast + balance
    breakdown = LossBreakdown(
        contrast=_f(contrast), balance=_f(balance), construction=_f(construction),
        weight_decay=_f(weight_decay), total=_f(total),
        per_stage=[(_f(c), _f(b)) for c, b in stage_terms])
    if return_tensor:
        return breakdown, total
    return breakdown
