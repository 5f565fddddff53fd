"""Segmentation and discrepancy objectives.

Logits are ``(N, K, H, W)`` (a single ``(K, H, W)`` map is promoted), targets
are ``(N, H, W)`` integer class maps. Every objective returns a :class:`LossValue`
whose ``terms`` record the pieces it was assembled from.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

EPS = 1e-7
DICE_SMOOTH = 1.0
C_MAX = 10.0


@dataclass
class LossValue:
    value: torch.Tensor
    terms: dict[str, float] = field(default_factory=dict)

    def item(self) -> float:
        return float(self.value.detach())

    def log_record(self) -> dict[str, float]:
        return {"value": self.item(), **self.terms}


def _batched(logits: torch.Tensor, target: torch.Tensor | None = None):
    if logits.dim() == 3:
        logits = logits.unsqueeze(0)
        if target is not None and target.dim() == 2:
            target = target.unsqueeze(0)
    return logits, target


def _check(logits: torch.Tensor, target: torch.Tensor) -> None:
    if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    k = logits.shape[1]
    if target.numel() and (int(target.max()) >= k or int(target.min()) < 0):
        raise ValueError(f"target class index out of range for K={k}")


def cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> LossValue:
    """Mean over pixels of -log(max(softmax(logits)[target], EPS))."""
    logits, target = _batched(logits, target)
    _check(logits, target)
    probs = torch.softmax(logits, dim=1)
    picked = probs.gather(1, target.long().unsqueeze(1)).squeeze(1)
    value = -torch.log(picked.clamp_min(EPS)).mean()
    return LossValue(value, {"ce": float(value.detach())})


def dice_loss(probs: torch.Tensor, target: torch.Tensor) -> LossValue:
    """1 - mean over foreground classes of the smoothed soft Dice, counts pooled over the batch."""
    probs, target = _batched(probs, target)
    _check(probs, target)
    k = probs.shape[1]
    onehot = torch.nn.functional.one_hot(target.long(), k).permute(0, 3, 1, 2).to(probs.dtype)
    dims = (0, 2, 3)
    inter = (probs * onehot).sum(dims)[1:]
    denom = probs.sum(dims)[1:] + onehot.sum(dims)[1:]
    value = 1.0 - ((2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)).mean()
    return LossValue(value, {"dice": float(value.detach())})


def task_loss(logits: torch.Tensor, target: torch.Tensor) -> LossValue:
    logits, target = _batched(logits, target)
    ce = cross_entropy(logits, target)
    dice = dice_loss(torch.softmax(logits, dim=1), target)
    return LossValue(ce.value.double() + dice.value.double(), {"ce": ce.terms["ce"], "dice": dice.terms["dice"]})


def pseudo_labels(ref_logits: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, i.e. ties go to the lowest class
    return ref_logits.detach().argmax(dim=1)


def discrepancy_ce(adv_logits: torch.Tensor, ref_logits: torch.Tensor) -> LossValue:
    """CE of the adversary against the hard prediction of the reference head (no gradient to ref)."""
    adv_logits, _ = _batched(adv_logits)
    ref_logits, _ = _batched(ref_logits)
    if adv_logits.shape != ref_logits.shape:
        raise ValueError(f"shape mismatch: {tuple(adv_logits.shape)} vs {tuple(ref_logits.shape)}")
    return cross_entropy(adv_logits, pseudo_labels(ref_logits))


def _check_weight(name: str, w: float) -> None:
    if w < 0:
        raise ValueError(f"{name} must be >= 0, got {w}")


def adversary_objective(fp_src, f_src, fp_tgt, f_tgt, gamma: float, c_max: float = C_MAX) -> LossValue:
    """Target-only MDD adversary loss: agree with f on source, disagree on target."""
    _check_weight("gamma", gamma)
    d_src = discrepancy_ce(fp_src, f_src).value.double()
    d_tgt = discrepancy_ce(fp_tgt, f_tgt).value.double()
    d_tgt_c = d_tgt.clamp(max=c_max)
    value = d_src - gamma * d_tgt_c
    return LossValue(value, {"ce_src": float(d_src.detach()), "ce_tgt": float(d_tgt_c.detach()), "gamma": gamma})


def extractor_objective(task, ce_src, ce_tgt, alpha: float, gamma: float) -> LossValue:
    """Target-only MDD feature-extractor loss: task + alpha*ce_src + gamma*ce_tgt.

    Arguments may be tensors (for backprop) or LossValues.
    """
    _check_weight("alpha", alpha)
    _check_weight("gamma", gamma)
    task, ce_src, ce_tgt = (_as_double(t) for t in (task, ce_src, ce_tgt))
    if alpha == 0 and gamma == 0:
        value = task
    else:
        value = task + alpha * ce_src + gamma * ce_tgt
    return LossValue(value, _terms(task=task, ce_src=ce_src, ce_tgt=ce_tgt, alpha=alpha, gamma=gamma))


def mdd_adversary_objective(fp_src, f_src, fp_tgt, f_tgt, alpha: float, gamma: float,
                            c_max: float = C_MAX) -> LossValue:
    """Original MDD adversary: maximise alpha*ce_tgt - gamma*ce_src, written as a minimisation."""
    _check_weight("alpha", alpha)
    _check_weight("gamma", gamma)
    d_src = discrepancy_ce(fp_src, f_src).value.double()
    d_tgt = discrepancy_ce(fp_tgt, f_tgt).value.double().clamp(max=c_max)
    value = gamma * d_src - alpha * d_tgt
    return LossValue(value, _terms(ce_src=d_src, ce_tgt=d_tgt, alpha=alpha, gamma=gamma))


def mdd_extractor_objective(task, ce_tgt, ce_src, alpha: float, gamma: float) -> LossValue:
    """Original MDD extractor loss: task + alpha*ce_tgt - gamma*ce_src (note the negative source term)."""
    _check_weight("alpha", alpha)
    _check_weight("gamma", gamma)
    task, ce_src, ce_tgt = (_as_double(t) for t in (task, ce_src, ce_tgt))
    if alpha == 0 and gamma == 0:
        value = task
    else:
        value = task + alpha * ce_tgt - gamma * ce_src
    return LossValue(value, _terms(task=task, ce_src=ce_src, ce_tgt=ce_tgt, alpha=alpha, gamma=gamma))


def _as_double(t) -> torch.Tensor:
    # combine in float64 so logged values recompose exactly from logged terms
    t = t.value if isinstance(t, LossValue) else t
    return t.double() if torch.is_tensor(t) else torch.tensor(float(t), dtype=torch.float64)


def _terms(**kw) -> dict[str, float]:
    return {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in kw.items()}


def recompute(name: str, terms: dict[str, float]) -> float:
    """Rebuild a logged objective value from its logged terms."""
    t = terms
    if name == "task":
        return t["ce"] + t["dice"]
    if name == "adversary":
        return t["ce_src"] - t["gamma"] * t["ce_tgt"]
    if name == "extractor":
        return t["task"] + t["alpha"] * t["ce_src"] + t["gamma"] * t["ce_tgt"]
    if name == "mdd_adversary":
        return t["gamma"] * t["ce_src"] - t["alpha"] * t["ce_tgt"]
    if name == "mdd_extractor":
        return t["task"] + t["alpha"] * t["ce_tgt"] - t["gamma"] * t["ce_src"]
    raise KeyError(name)
