"""Training strategies (finetune, ER, EWC, LwF) and the explanation-consistency loss."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
import torch
from torch.func import functional_call, grad, vmap
from torch.nn import functional as F

from .errors import ConfigError
from .memory import DualBuffer, ReplayBatch, sample_batch
from .saliency import SaliencySpec, compute_saliency

log = logging.getLogger(__name__)

STRATEGIES = ("finetune", "er", "ewc", "lwf")


@dataclass(frozen=True)
class TrainConfig:
    strategy: Literal["finetune", "er", "ewc", "lwf"] = "er"
    rrr_enabled: bool = False
    rrr_lambda: float = 1.0
    epochs: int = 7
    batch_size: int = 32
    optimizer: Literal["adam", "radam", "sgd"] = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    lr_decay: float = 0.2
    milestones: tuple[float, ...] = (2 / 7, 4 / 7, 6 / 7)
    ewc_lambda: float = 100.0
    fisher_samples: int = 256
    lwf_temperature: float = 2.0
    lwf_lambda: float = 1.0

    @property
    def rrr_active(self) -> bool:
        return self.rrr_enabled and self.rrr_lambda > 0

    def validate(self, buffer_capacity: int) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.rrr_lambda < 0 or self.ewc_lambda < 0 or self.lwf_lambda < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.lwf_temperature <= 0:
            raise ConfigError("lwf_temperature must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.rrr_enabled and buffer_capacity == 0:
            raise ConfigError("RRR requires a buffer: rrr_enabled needs buffer_capacity > 0")
        if self.strategy == "er" and buffer_capacity == 0:
            raise ConfigError("strategy 'er' requires buffer_capacity > 0")


@dataclass
class EwcAnchor:
    params: dict[str, torch.Tensor]
    fisher: dict[str, torch.Tensor]


@dataclass
class RegularizerState:
    anchors: list[EwcAnchor] = field(default_factory=list)
    old_model: torch.nn.Module | None = None


@dataclass
class TrainStepReport:
    step: int
    task: int
    L_task: float
    L_replay: float
    L_RRR: float
    L_reg: float
    grad_norm: float


@dataclass
class TrainRngs:
    shuffle: torch.Generator
    replay: np.random.Generator
    noise: torch.Generator


def task_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy; ``targets`` are logit positions."""
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= logits.shape[1]):
        raise ValueError(f"label outside the {logits.shape[1]}-way head")
    return F.cross_entropy(logits, targets)


def saliency_l1(maps: torch.Tensor, references: torch.Tensor) -> torch.Tensor:
    """Batch mean of per-map L1 distances (sum over map elements)."""
    if maps.shape != references.shape:
        raise ValueError(f"saliency shape {tuple(maps.shape)} != reference {tuple(references.shape)}")
    return (maps - references).abs().flatten(1).sum(dim=1).mean()


def rrr_loss(model, batch: ReplayBatch, xai: SaliencySpec, generator: torch.Generator | None = None) -> torch.Tensor:
    """L1 drift between current explanations of buffered samples and their frozen references."""
    if batch.method != xai.method:
        raise ValueError(f"buffer references were made with {batch.method}, config asks for {xai.method}")
    maps = compute_saliency(model, batch.images, model.head_index(batch.labels), xai,
                            generator=generator, create_graph=True)
    return saliency_l1(maps, batch.saliencies.to(maps.dtype))


def ewc_penalty(params: dict[str, torch.Tensor], anchors: list[EwcAnchor], ewc_lambda: float) -> torch.Tensor:
    """sum over anchors of lambda/2 * sum_i F_i (theta_i - theta*_i)^2.

    Anchored tensors may have fewer leading rows than the current ones
    (the head grows); the extra rows are unconstrained.
    """
    total = torch.zeros((), dtype=next(iter(params.values())).dtype)
    for anchor in anchors:
        for name, star in anchor.params.items():
            theta = params[name]
            if theta.shape != star.shape:
                if theta.shape[1:] != star.shape[1:] or theta.shape[0] < star.shape[0]:
                    raise ValueError(f"{name}: shape {tuple(theta.shape)} does not match anchor "
                                     f"{tuple(star.shape)}")
                theta = theta[:star.shape[0]]
            total = total + (ewc_lambda / 2) * (anchor.fisher[name] * (theta - star) ** 2).sum()
    return total


def fisher_diag(model, split, n_samples: int = 256, rng: np.random.Generator | None = None,
                chunk: int = 64) -> dict[str, torch.Tensor]:
    """Diagonal empirical Fisher: mean of squared per-sample grads of log p(y_true | x)."""
    if len(split) == 0:
        raise ValueError("cannot estimate the Fisher information from an empty task")
    n = min(n_samples, len(split))
    idx = np.arange(len(split)) if n == len(split) else np.sort(
        (rng or np.random.default_rng(0)).choice(len(split), size=n, replace=False))
    images = split.image_tensor(model.dtype)[torch.from_numpy(idx)]
    targets = model.head_index(split.labels[idx])
    return fisher_from_samples(model, images, targets, chunk)


def fisher_from_samples(model, images: torch.Tensor, targets: torch.Tensor, chunk: int = 64):
    params = {k: v.detach() for k, v in model.named_parameters()}

    def log_lik(p, x, t):
        logits, _ = functional_call(model, p, (x.unsqueeze(0),))
        return F.log_softmax(logits, dim=1)[0].gather(0, t.view(1))[0]

    per_sample = vmap(grad(log_lik), in_dims=(None, 0, 0))
    sums = {k: torch.zeros_like(v) for k, v in params.items()}
    for i in range(0, len(images), chunk):
        g = per_sample(params, images[i:i + chunk], targets[i:i + chunk])
        for k in sums:
            sums[k] += (g[k] ** 2).sum(dim=0)
    return {k: v / len(images) for k, v in sums.items()}


def lwf_distill(new_logits: torch.Tensor, old_logits: torch.Tensor, temperature: float = 2.0) -> torch.Tensor:
    """tau^2-scaled cross-entropy from the softened old-model distribution to the new one."""
    if new_logits.shape != old_logits.shape:
        raise ValueError(f"class sets differ: new {tuple(new_logits.shape)} vs old {tuple(old_logits.shape)}")
    t = temperature
    target = F.softmax(old_logits / t, dim=1)
    return -(target * F.log_softmax(new_logits / t, dim=1)).sum(dim=1).mean() * t * t


def make_optimizer(params, config: TrainConfig):
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.lr, momentum=config.momentum)
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.lr)
    if config.optimizer == "radam":
        return torch.optim.RAdam(params, lr=config.lr)
    raise ConfigError(f"unknown optimizer {config.optimizer!r}")


def milestone_epochs(config: TrainConfig) -> list[int]:
    return sorted({m for m in (int(round(f * config.epochs)) for f in config.milestones)
                   if 0 < m < config.epochs})


def train_task(model, task, buffer: DualBuffer, config: TrainConfig, xai: SaliencySpec,
               regs: RegularizerState, rngs: TrainRngs,
               on_step: Callable[[TrainStepReport], None] | None = None) -> list[TrainStepReport]:
    """Train on one task's data; the head must already cover the task's classes.

    Per step the objective is the current-batch cross-entropy plus, when
    applicable: ER's cross-entropy on a replay batch, lambda times the RRR
    loss on that replay batch, the EWC penalty and the LwF distillation
    term on current inputs.
    """
    k = task.task_id
    if config.rrr_active and k > 1 and not buffer.entries:
        raise RuntimeError(f"task {k}: RRR is enabled but the buffer is empty")
    images = task.train.image_tensor(model.dtype)
    targets = model.head_index(task.train.labels)
    n = len(images)
    use_replay = bool(buffer.entries) and (config.strategy == "er" or config.rrr_active)
    old_model = regs.old_model if config.strategy == "lwf" else None
    n_old = len(old_model.classes_seen) if old_model is not None else 0

    opt = make_optimizer(model.parameters(), config)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestone_epochs(config), gamma=config.lr_decay)
    reports = []
    model.train()
    for _ in range(config.epochs):
        perm = torch.randperm(n, generator=rngs.shuffle)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            x, y = images[idx], targets[idx]
            logits, _ = model(x)
            l_task = task_loss(logits, y)
            l_replay = torch.zeros((), dtype=model.dtype)
            l_rrr = torch.zeros((), dtype=model.dtype)
            l_reg = torch.zeros((), dtype=model.dtype)
            if use_replay:
                batch = sample_batch(buffer, config.batch_size, rngs.replay)
                if config.strategy == "er":
                    r_logits, _ = model(batch.images)
                    l_replay = task_loss(r_logits, model.head_index(batch.labels))
                if config.rrr_active:
                    l_rrr = rrr_loss(model, batch, xai, generator=rngs.noise)
            if config.strategy == "ewc" and regs.anchors:
                l_reg = ewc_penalty(model.parameter_dict(), regs.anchors, config.ewc_lambda)
            if old_model is not None and n_old > 0:
                with torch.no_grad():
                    old_logits, _ = old_model(x)
                l_reg = config.lwf_lambda * lwf_distill(logits[:, :n_old], old_logits,
                                                        config.lwf_temperature)
            loss = l_task + l_replay + l_reg
            if config.rrr_active:
                loss = loss + config.rrr_lambda * l_rrr
            opt.zero_grad(set_to_none=True)
            loss.backward()
            gnorm = torch.sqrt(sum((p.grad ** 2).sum() for p in model.parameters() if p.grad is not None))
            opt.step()
            model.version += 1
            rep = TrainStepReport(step=model.version, task=k, L_task=float(l_task.detach()),
                                  L_replay=float(l_replay.detach()), L_RRR=float(l_rrr.detach()),
                                  L_reg=float(l_reg.detach()),
                                  grad_norm=float(gnorm))
            reports.append(rep)
            if on_step is not None:
                on_step(rep)
        sched.step()
    model.eval()
    return reports


def consolidate(model, task, config: TrainConfig, regs: RegularizerState,
                rng: np.random.Generator) -> RegularizerState:
    """Snapshot regularizer state at a task boundary (after the buffer update)."""
    if config.strategy == "ewc":
        fisher = fisher_diag(model, task.train, config.fisher_samples, rng)
        params = {k: v.detach().clone() for k, v in model.named_parameters()}
        regs.anchors.append(EwcAnchor(params, fisher))
    elif config.strategy == "lwf":
        old = copy.deepcopy(model)
        for p in old.parameters():
            p.requires_grad_(False)
        regs.old_model = old.eval()
    return regs
