"""Source pretraining, Target-Only MDD, MDD / DANN baselines and few-shot fine-tuning.

Each alternating iteration draws one labeled source batch and one unlabeled
target batch, then runs three sub-steps with their own Adam optimizers:

* head step: ``f`` minimises the source task loss;
* adversary step: ``f_prime`` minimises its objective (method dependent);
* extractor step: ``psi`` minimises its objective (method dependent).

Sub-steps hand gradients only to the parameters they own (``torch.autograd.grad``
restricted to that module), so the other two parameter sets stay bit-identical.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn

from . import losses as L
from .data import BatchStream, LabeledSet, UnlabeledSet
from .metrics import evaluate
from .model import ModelBundle, duplicate_head
from .phantom import AugmentConfig

log = logging.getLogger(__name__)

METHODS = ("ours", "mdd", "dann", "source_only")


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int = -1):
        super().__init__(f"{message} (step {step})")
        self.step = step


@dataclass
class AdaptConfig:
    alpha: float = 7.5e-2
    gamma: float = 3e-1
    lr_psi: float = 5e-4
    lr_f: float = 1e-3
    lr_f_prime: float = 1e-3
    batch_size: int = 8
    pretrain_steps: int = 300
    adapt_steps: int = 150
    finetune_steps: int = 100
    eval_every: int = 25
    seed: int = 0
    method: str = "ours"
    dann_lambda: float = 1.0
    freeze_f: bool = False
    select: str = "source_val"
    augment: bool = True
    c_max: float = L.C_MAX

    def validate(self) -> None:
        if self.alpha < 0 or self.gamma < 0:
            raise ValueError("alpha and gamma must be >= 0")
        for name in ("lr_psi", "lr_f", "lr_f_prime"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.select not in ("source_val", "last"):
            raise ValueError(f"unknown select mode {self.select!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise KeyError(sorted(bad)[0])
        return cls(**d)


@dataclass
class TrainHistory:
    method: str
    records: list[dict] = field(default_factory=list)
    checkpoints: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    selected_step: Optional[int] = None

    def log(self, step: int, objective: str, loss: L.LossValue, **extra) -> dict:
        if self.records and step < self.records[-1]["step"]:
            raise ValueError("history steps must be non-decreasing")
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite {objective} objective in {self.method}", step)
        rec = {"step": step, "method": self.method, "objective": objective, "value": value, **loss.terms, **extra}
        self.records.append(rec)
        return rec

    def __len__(self) -> int:
        return len(self.records)

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")
            for ck in self.checkpoints:
                fh.write(json.dumps({"method": self.method, "checkpoint": ck}) + "\n")


def deterministic_mode(enabled: Optional[bool] = None) -> bool:
    """Switch torch into deterministic algorithms; defaults to ``TOMDD_DETERMINISTIC``."""
    if enabled is None:
        enabled = os.environ.get("TOMDD_DETERMINISTIC", "0") == "1"
    torch.use_deterministic_algorithms(bool(enabled))
    return bool(enabled)


def _params(module: nn.Module) -> list[nn.Parameter]:
    return list(module.parameters())


def _apply(opt: torch.optim.Optimizer, params: list[nn.Parameter], loss: torch.Tensor) -> None:
    grads = torch.autograd.grad(loss, params)
    for p, g in zip(params, grads):
        p.grad = g
    opt.step()
    for p in params:
        p.grad = None


def _adam(module: nn.Module, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(module.parameters(), lr=lr)


# --------------------------------------------------------------------------- sub-steps


def head_step(model: ModelBundle, opt_f, xs, ys, z_src=None) -> L.LossValue:
    """Task-only update of ``f`` on source (psi frozen)."""
    if z_src is None:
        with torch.no_grad():
            z_src = model.psi(xs)
    loss = L.task_loss(model.f(z_src), ys)
    _apply(opt_f, _params(model.f), loss.value)
    return loss


def _head_logits(model: ModelBundle, z_src, z_tgt):
    with torch.no_grad():
        return model.f(z_src), model.f(z_tgt)


def adversary_step(model: ModelBundle, opt_fp, xs, xt, gamma: float, z_src=None, z_tgt=None,
                   c_max: float = L.C_MAX) -> L.LossValue:
    """Target-only MDD: ``f_prime`` agrees with ``f`` on source and disagrees on target."""
    if model.f_prime is None:
        raise TrainingError("adversary head f_prime is missing")
    if z_src is None or z_tgt is None:
        with torch.no_grad():
            z_src, z_tgt = model.psi(xs), model.psi(xt)
    f_src, f_tgt = _head_logits(model, z_src, z_tgt)
    loss = L.adversary_objective(model.f_prime(z_src), f_src, model.f_prime(z_tgt), f_tgt, gamma, c_max)
    _apply(opt_fp, _params(model.f_prime), loss.value)
    return loss


def mdd_adversary_step(model: ModelBundle, opt_fp, xs, xt, alpha: float, gamma: float, z_src=None, z_tgt=None,
                       c_max: float = L.C_MAX) -> L.LossValue:
    """Original MDD: ``f_prime`` maximises alpha*ce_tgt - gamma*ce_src."""
    if model.f_prime is None:
        raise TrainingError("adversary head f_prime is missing")
    if z_src is None or z_tgt is None:
        with torch.no_grad():
            z_src, z_tgt = model.psi(xs), model.psi(xt)
    f_src, f_tgt = _head_logits(model, z_src, z_tgt)
    loss = L.mdd_adversary_objective(model.f_prime(z_src), f_src, model.f_prime(z_tgt), f_tgt, alpha, gamma, c_max)
    _apply(opt_fp, _params(model.f_prime), loss.value)
    return loss


def _extractor_terms(model: ModelBundle, xs, ys, xt, need_disc: bool):
    z_src = model.psi(xs)
    f_src = model.f(z_src)
    task = L.task_loss(f_src, ys)
    if not need_disc:
        zero = torch.zeros((), dtype=torch.float64)
        return task, zero, zero
    z_tgt = model.psi(xt)
    with torch.no_grad():
        f_tgt = model.f(z_tgt)
    ce_src = L.discrepancy_ce(model.f_prime(z_src), f_src).value
    ce_tgt = L.discrepancy_ce(model.f_prime(z_tgt), f_tgt).value
    return task, ce_src, ce_tgt


def extractor_step(model: ModelBundle, opt_psi, xs, ys, xt, alpha: float, gamma: float) -> L.LossValue:
    """Target-only MDD: ``psi`` aligns f and f_prime on both domains while solving the task."""
    need = (alpha > 0 or gamma > 0)
    if need and model.f_prime is None:
        raise TrainingError("adversary head f_prime is missing")
    task, ce_src, ce_tgt = _extractor_terms(model, xs, ys, xt, need)
    loss = L.extractor_objective(task, ce_src, ce_tgt, alpha, gamma)
    _apply(opt_psi, _params(model.psi), loss.value)
    return loss


def mdd_extractor_step(model: ModelBundle, opt_psi, xs, ys, xt, alpha: float, gamma: float) -> L.LossValue:
    """Original MDD: ``psi`` minimises task + alpha*ce_tgt - gamma*ce_src."""
    need = (alpha > 0 or gamma > 0)
    if need and model.f_prime is None:
        raise TrainingError("adversary head f_prime is missing")
    task, ce_src, ce_tgt = _extractor_terms(model, xs, ys, xt, need)
    loss = L.mdd_extractor_objective(task, ce_tgt, ce_src, alpha, gamma)
    _apply(opt_psi, _params(model.psi), loss.value)
    return loss


# --------------------------------------------------------------------------- supervised


def _aug(cfg: AdaptConfig) -> Optional[AugmentConfig]:
    return AugmentConfig() if cfg.augment else None


Monitor = Callable[[int, ModelBundle], dict]


class _BestTracker:
    def __init__(self, model: ModelBundle, val: Optional[LabeledSet], history: TrainHistory, enabled: bool,
                 monitor: Optional[Monitor] = None):
        self.model, self.val, self.history = model, val, history
        self.enabled = enabled and val is not None
        self.monitor = monitor
        self.best_f1 = -1.0
        self.best_state = None

    def check(self, step: int) -> None:
        if self.monitor is not None:
            self.history.checkpoints.append({"step": step, "monitor": self.monitor(step, self.model)})
        if not self.enabled:
            return
        f1 = evaluate(self.model, self.val).mean_f1
        self.history.checkpoints.append({"step": step, "source_val_f1": f1})
        # ties keep the later checkpoint
        if f1 >= self.best_f1:
            self.best_f1 = f1
            self.best_state = copy.deepcopy(self.model.state_dict())
            self.history.selected_step = step

    def restore(self) -> None:
        if self.enabled and self.best_state is not None:
            self.model.load_state_dict(self.best_state)


def train_supervised(model: ModelBundle, data: LabeledSet, cfg: AdaptConfig, steps: int, tag: str,
                     val: Optional[LabeledSet] = None, stream_key: int = 11) -> tuple[ModelBundle, TrainHistory]:
    """Jointly minimise the task loss over psi and f (Adam, lr_psi / lr_f)."""
    cfg.validate()
    if len(data) == 0:
        raise TrainingError("empty dataset", 0)
    history = TrainHistory(method=tag)
    if steps == 0:
        return model, history
    t0 = time.perf_counter()
    opt = torch.optim.Adam([
        {"params": model.psi.parameters(), "lr": cfg.lr_psi},
        {"params": model.f.parameters(), "lr": cfg.lr_f},
    ])
    stream = BatchStream(data, cfg.batch_size, [cfg.seed, stream_key], _aug(cfg))
    tracker = _BestTracker(model, val, history, enabled=True)
    params = _params(model.psi) + _params(model.f)
    model.train()
    for step in range(1, steps + 1):
        xs, ys = next(stream)
        loss = L.task_loss(model(xs), ys)
        history.log(step, "task", loss)
        _apply(opt, params, loss.value)
        if step % cfg.eval_every == 0 or step == steps:
            tracker.check(step)
    tracker.restore()
    history.wall_clock = time.perf_counter() - t0
    return model, history


def pretrain_source(model: ModelBundle, source_train: LabeledSet, cfg: AdaptConfig,
                    source_val: Optional[LabeledSet] = None) -> tuple[ModelBundle, TrainHistory]:
    if model.f_prime is not None:
        raise TrainingError("pretraining expects no adversary head", 0)
    return train_supervised(model, source_train, cfg, cfg.pretrain_steps, "pretrain", source_val)


# --------------------------------------------------------------------------- adaptation


def _check_unlabeled(target) -> None:
    if not isinstance(target, UnlabeledSet):
        raise TypeError("adaptation takes an UnlabeledSet for the target domain; call strip_labels()")


def _alternating(model: ModelBundle, source_train: LabeledSet, target_train: UnlabeledSet, cfg: AdaptConfig,
                 method: str, source_val: Optional[LabeledSet],
                 monitor: Optional[Monitor] = None) -> tuple[ModelBundle, TrainHistory]:
    cfg.validate()
    _check_unlabeled(target_train)
    history = TrainHistory(method=method)
    t0 = time.perf_counter()
    uses_adversary = method in ("ours", "mdd")
    if uses_adversary and model.f_prime is None:
        raise TrainingError("adversary head f_prime is missing; call duplicate_head first", 0)
    opt_f = _adam(model.f, cfg.lr_f)
    opt_psi = _adam(model.psi, cfg.lr_psi)
    opt_fp = _adam(model.f_prime, cfg.lr_f_prime) if uses_adversary else None
    src = BatchStream(source_train, cfg.batch_size, [cfg.seed, 21], _aug(cfg))
    tgt = BatchStream(target_train, cfg.batch_size, [cfg.seed, 22], _aug(cfg))
    tracker = _BestTracker(model, source_val, history, enabled=cfg.select == "source_val", monitor=monitor)
    tracker.check(0)
    model.train()
    for step in range(1, cfg.adapt_steps + 1):
        xs, ys = next(src)
        xt = next(tgt)
        with torch.no_grad():
            z_src = model.psi(xs)
            z_tgt = model.psi(xt) if uses_adversary else None
        if not cfg.freeze_f:
            history.log(step, "task", head_step(model, opt_f, xs, ys, z_src))
        if method == "ours":
            history.log(step, "adversary", adversary_step(model, opt_fp, xs, xt, cfg.gamma, z_src, z_tgt, cfg.c_max))
            history.log(step, "extractor", extractor_step(model, opt_psi, xs, ys, xt, cfg.alpha, cfg.gamma))
        elif method == "mdd":
            history.log(step, "mdd_adversary",
                        mdd_adversary_step(model, opt_fp, xs, xt, cfg.alpha, cfg.gamma, z_src, z_tgt, cfg.c_max))
            history.log(step, "mdd_extractor", mdd_extractor_step(model, opt_psi, xs, ys, xt, cfg.alpha, cfg.gamma))
        else:
            history.log(step, "extractor", extractor_step(model, opt_psi, xs, ys, xt, 0.0, 0.0))
        if step % cfg.eval_every == 0 or step == cfg.adapt_steps:
            tracker.check(step)
    tracker.restore()
    history.wall_clock = time.perf_counter() - t0
    return model, history


def adapt_target_only_mdd(model: ModelBundle, source_train: LabeledSet, target_train_unlabeled: UnlabeledSet,
                          cfg: AdaptConfig, source_val: Optional[LabeledSet] = None, monitor: Optional[Monitor] = None):
    return _alternating(model, source_train, target_train_unlabeled, cfg, "ours", source_val, monitor)


def adapt_mdd_baseline(model: ModelBundle, source_train: LabeledSet, target_train_unlabeled: UnlabeledSet,
                       cfg: AdaptConfig, source_val: Optional[LabeledSet] = None, monitor: Optional[Monitor] = None):
    return _alternating(model, source_train, target_train_unlabeled, cfg, "mdd", source_val, monitor)


def adapt_source_only(model: ModelBundle, source_train: LabeledSet, target_train_unlabeled: UnlabeledSet,
                      cfg: AdaptConfig, source_val: Optional[LabeledSet] = None, monitor: Optional[Monitor] = None):
    """Same schedule as the adversarial methods with every domain term removed."""
    return _alternating(model, source_train, target_train_unlabeled, cfg, "source_only", source_val, monitor)


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lambd):
        ctx.lambd = lambd
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.lambd * grad, None


def grad_reverse(x: torch.Tensor, lambd: float = 1.0) -> torch.Tensor:
    return _GradReverse.apply(x, lambd)


class DomainClassifier(nn.Module):
    """Fully convolutional source-vs-target classifier on psi's features; one logit per patch.

    The input is normalised per sample so psi cannot win the reversed game by inflating feature scale.
    """

    def __init__(self, in_channels: int, width: int = 32, slope: float = 0.01):
        super().__init__()
        self.net = nn.Sequential(
            nn.GroupNorm(1, in_channels, affine=False),
            nn.Conv2d(in_channels, width, 3, stride=2, padding=1), nn.LeakyReLU(slope),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.LeakyReLU(slope),
            nn.Conv2d(width, 1, 3, stride=2, padding=1),
        )

    def forward(self, z):
        return self.net(z)


def dann_lambda(step: int, total: int, peak: float) -> float:
    """Usual DANN warm-up 2/(1+exp(-10p)) - 1, scaled to ``peak``."""
    p = step / max(total, 1)
    return peak * (2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0)


def adapt_dann_baseline(model: ModelBundle, source_train: LabeledSet, target_train_unlabeled: UnlabeledSet,
                        cfg: AdaptConfig, source_val: Optional[LabeledSet] = None,
                        monitor: Optional[Monitor] = None):
    """Task loss plus domain confusion through a gradient-reversal layer on psi's features.

    The domain classifier is returned in ``history`` only as its accuracy trace and then discarded.
    """
    cfg.validate()
    _check_unlabeled(target_train_unlabeled)
    history = TrainHistory(method="dann")
    t0 = time.perf_counter()
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        disc = DomainClassifier(model.cfg.feature_channels)
    opt_f = _adam(model.f, cfg.lr_f)
    opt_psi = _adam(model.psi, cfg.lr_psi)
    opt_d = _adam(disc, cfg.lr_f_prime)
    src = BatchStream(source_train, cfg.batch_size, [cfg.seed, 21], _aug(cfg))
    tgt = BatchStream(target_train_unlabeled, cfg.batch_size, [cfg.seed, 22], _aug(cfg))
    tracker = _BestTracker(model, source_val, history, enabled=cfg.select == "source_val", monitor=monitor)
    tracker.check(0)
    bce = nn.BCEWithLogitsLoss()
    opts = (opt_psi, opt_f, opt_d)
    all_params = _params(model.psi) + _params(model.f) + _params(disc)
    model.train()
    for step in range(1, cfg.adapt_steps + 1):
        xs, ys = next(src)
        xt = next(tgt)
        lambd = dann_lambda(step, cfg.adapt_steps, cfg.dann_lambda)
        z_src, z_tgt = model.psi(xs), model.psi(xt)
        task = L.task_loss(model.f(z_src), ys)
        d_logits = disc(grad_reverse(torch.cat([z_src, z_tgt]), lambd))
        labels = torch.zeros_like(d_logits)
        labels[: len(xs)] = 1.0
        domain = bce(d_logits, labels)
        acc = float(((d_logits.detach() > 0).float() == labels).float().mean())
        total = task.value + domain.double()
        loss = L.LossValue(total, {"task": task.item(), "domain": float(domain.detach()), "lambda": lambd})
        history.log(step, "dann", loss, domain_acc=acc)
        grads = torch.autograd.grad(total, all_params)
        for p, g in zip(all_params, grads):
            p.grad = g
        for opt in opts:
            opt.step()
        for p in all_params:
            p.grad = None
        if step % cfg.eval_every == 0 or step == cfg.adapt_steps:
            tracker.check(step)
    tracker.restore()
    history.wall_clock = time.perf_counter() - t0
    return model, history


def prepare_adversary(model: ModelBundle) -> ModelBundle:
    if model.f_prime is None:
        model.f_prime = duplicate_head(model.f)
    return model


def adapt(model: ModelBundle, source_train: LabeledSet, target_train_unlabeled: UnlabeledSet, cfg: AdaptConfig,
          source_val: Optional[LabeledSet] = None, monitor: Optional[Monitor] = None) -> tuple[ModelBundle, TrainHistory]:
    """Dispatch on ``cfg.method``."""
    cfg.validate()
    if cfg.method in ("ours", "mdd"):
        prepare_adversary(model)
    fn = {
        "ours": adapt_target_only_mdd,
        "mdd": adapt_mdd_baseline,
        "dann": adapt_dann_baseline,
        "source_only": adapt_source_only,
    }[cfg.method]
    return fn(model, source_train, target_train_unlabeled, cfg, source_val, monitor)


# --------------------------------------------------------------------------- few-shot


def draw_volumes(available: list[int], k: int, seed: int, draw: int) -> list[int]:
    if k > len(available):
        raise ValueError(f"k={k} exceeds the {len(available)} available labeled volumes")
    rng = np.random.default_rng([seed, 31, draw])
    return sorted(int(v) for v in rng.choice(sorted(available), size=k, replace=False))


def finetune_fewshot(model: ModelBundle, target_labeled: LabeledSet, cfg: AdaptConfig) -> tuple[ModelBundle, TrainHistory]:
    """Drop f_prime and fine-tune f o psi on the labeled target volumes (last iterate kept)."""
    model = copy.deepcopy(model)
    model.f_prime = None
    return train_supervised(model, target_labeled, cfg, cfg.finetune_steps, "finetune", val=None, stream_key=41)
