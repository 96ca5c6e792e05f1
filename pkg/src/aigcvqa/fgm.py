"""Adversarial weight perturbation training (fast gradient method on weights).

Each step computes the clean gradient, nudges the selected weights by
``epsilon * g / ||g||``, computes the loss gradient again at the perturbed
weights, restores the originals, and descends along the sum of both
gradients.
"""

from __future__ import annotations

import fnmatch
import json
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .losses import LossBreakdown

log = logging.getLogger(__name__)

GRAD_EPS = 1e-12


class FgmError(RuntimeError):
    pass


class TrainingDiverged(FgmError):
    pass


@dataclass
class FgmConfig:
    epsilon: float = 0.1
    norm_scope: str = "per_tensor"  # or "global"
    include: list[str] = field(default_factory=lambda: ["*"])
    exclude: list[str] = field(default_factory=lambda: ["*bias", "*norm*", "*bn*"])
    learning_rate: float = 0.01
    batch_size: int = 8
    max_steps: int = 1000
    tolerance: float = 1e-4
    window: int = 50
    optimizer: str = "sgd"  # "sgd" applies the update literally; "adam" routes it through torch.optim.Adam
    max_abort_fraction: float = 0.01

    def __post_init__(self) -> None:
        if not self.epsilon >= 0:
            raise FgmError(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.learning_rate > 0:
            raise FgmError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise FgmError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.norm_scope not in ("per_tensor", "global"):
            raise FgmError(f"norm_scope must be 'per_tensor' or 'global', got {self.norm_scope!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise FgmError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.max_steps < 0 or self.window < 1:
            raise FgmError("max_steps must be >= 0 and window >= 1")

    def selects(self, name: str) -> bool:
        return any(fnmatch.fnmatchcase(name, p) for p in self.include) and not any(
            fnmatch.fnmatchcase(name, p) for p in self.exclude
        )


@dataclass
class PerturbationState:
    snapshot: dict[str, torch.Tensor]
    deltas: dict[str, torch.Tensor]

    def delta_norms(self) -> dict[str, float]:
        return {name: float(torch.linalg.vector_norm(d)) for name, d in self.deltas.items()}


@dataclass
class StepResult:
    clean: LossBreakdown | torch.Tensor
    adversarial: LossBreakdown | torch.Tensor | None
    clean_loss: float
    adv_loss: float
    delta_norms: dict[str, float]
    aborted: bool = False


def compute_perturbation(
    gradients: dict[str, torch.Tensor], epsilon: float, norm_scope: str = "per_tensor"
) -> dict[str, torch.Tensor]:
    """``epsilon * g / ||g||`` per tensor, or with one norm over all tensors for ``global``.

    Tensors (or, globally, gradient sets) with norm below 1e-12 get a zero delta.
    """
    for name, g in gradients.items():
        if not torch.isfinite(g).all():
            raise FgmError(f"non-finite gradient for {name!r}")
    if norm_scope == "per_tensor":
        out = {}
        for name, g in gradients.items():
            norm = torch.linalg.vector_norm(g)
            out[name] = torch.zeros_like(g) if norm < GRAD_EPS else epsilon * g / norm
        return out
    if norm_scope == "global":
        total = math.sqrt(sum(float(torch.sum(g * g)) for g in gradients.values()))
        if total < GRAD_EPS:
            return {name: torch.zeros_like(g) for name, g in gradients.items()}
        return {name: epsilon * g / total for name, g in gradients.items()}
    raise FgmError(f"unknown norm scope {norm_scope!r}")


def _objective(out: LossBreakdown | torch.Tensor) -> torch.Tensor:
    return out.objective if isinstance(out, LossBreakdown) else out


def _gradients(model: nn.Module, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    params = dict(model.named_parameters())
    trainable = [(n, p) for n, p in params.items() if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in trainable], allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g.detach()) for (n, p), g in zip(trainable, grads)}


def fgm_step(
    model: nn.Module,
    batch: Any,
    loss_fn: Callable[[nn.Module, Any], LossBreakdown | torch.Tensor],
    config: FgmConfig,
    optimizer: torch.optim.Optimizer | None = None,
) -> StepResult:
    """One clean + adversarial pass and a parameter update.

    On a non-finite loss (either pass) or non-finite updated weights the
    model is put back exactly as it was before the step and the result is
    flagged ``aborted``.
    """
    params = dict(model.named_parameters())
    before = {n: p.detach().clone() for n, p in params.items()}

    def abort(clean, adv, clean_val, adv_val, norms) -> StepResult:
        with torch.no_grad():
            for n, p in params.items():
                p.copy_(before[n])
        return StepResult(clean, adv, clean_val, adv_val, norms, aborted=True)

    clean = loss_fn(model, batch)
    clean_loss = _objective(clean)
    clean_val = float(clean_loss.detach())
    if not math.isfinite(clean_val):
        return abort(clean, None, clean_val, float("nan"), {})
    g_clean = _gradients(model, clean_loss)

    selected = {n: g for n, g in g_clean.items() if config.selects(n)}
    try:
        deltas = compute_perturbation(selected, config.epsilon, config.norm_scope)
    except FgmError:
        return abort(clean, None, clean_val, float("nan"), {})
    state = PerturbationState(snapshot={n: params[n].detach().clone() for n in deltas}, deltas=deltas)
    with torch.no_grad():
        for n, d in deltas.items():
            params[n].add_(d)

    try:
        adv = loss_fn(model, batch)
        adv_loss = _objective(adv)
        adv_val = float(adv_loss.detach())
        g_adv = _gradients(model, adv_loss) if math.isfinite(adv_val) else None
    finally:
        with torch.no_grad():
            for n, w in state.snapshot.items():
                params[n].copy_(w)
    norms = state.delta_norms()
    if g_adv is None:
        return abort(clean, adv, clean_val, adv_val, norms)

    with torch.no_grad():
        if optimizer is None:
            for n, g in g_clean.items():
                params[n].sub_(config.learning_rate * (g + g_adv[n]))
        else:
            for n, g in g_clean.items():
                params[n].grad = g + g_adv[n]
            optimizer.step()
            optimizer.zero_grad(set_to_none=True)
        if not all(torch.isfinite(p).all() for p in params.values()):
            return abort(clean, adv, clean_val, adv_val, norms)
    return StepResult(clean, adv, clean_val, adv_val, norms)


def baseline_step(
    model: nn.Module,
    batch: Any,
    loss_fn: Callable[[nn.Module, Any], LossBreakdown | torch.Tensor],
    config: FgmConfig,
    optimizer: torch.optim.Optimizer | None = None,
) -> StepResult:
    """Plain step without perturbation (FGM disabled)."""
    params = dict(model.named_parameters())
    before = {n: p.detach().clone() for n, p in params.items()}
    clean = loss_fn(model, batch)
    loss = _objective(clean)
    val = float(loss.detach())
    if not math.isfinite(val):
        return StepResult(clean, None, val, float("nan"), {}, aborted=True)
    grads = _gradients(model, loss)
    with torch.no_grad():
        if optimizer is None:
            for n, g in grads.items():
                params[n].sub_(config.learning_rate * g)
        else:
            for n, g in grads.items():
                params[n].grad = g
            optimizer.step()
            optimizer.zero_grad(set_to_none=True)
        if not all(torch.isfinite(p).all() for p in params.values()):
            for n, p in params.items():
                p.copy_(before[n])
            return StepResult(clean, None, val, float("nan"), {}, aborted=True)
    return StepResult(clean, None, val, float("nan"), {})


def make_optimizer(model: nn.Module, config: FgmConfig) -> torch.optim.Optimizer | None:
    if config.optimizer == "adam":
        return torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=config.learning_rate)
    return None


def _batches(n_items: int, batch_size: int, rng: random.Random) -> list[list[int]]:
    order = list(range(n_items))
    rng.shuffle(order)
    return [order[i : i + batch_size] for i in range(0, n_items, batch_size)]


def _converged(losses: Sequence[float], window: int, tol: float) -> bool:
    if len(losses) < 2 * window:
        return False
    recent = float(np.mean(losses[-window:]))
    prev = float(np.mean(losses[-2 * window : -window]))
    return abs(recent - prev) / max(abs(prev), 1e-12) < tol


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)
    aborted: int = 0

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def train(
    model: nn.Module,
    dataset: Sequence[Any],
    loss_fn: Callable[[nn.Module, list[Any]], LossBreakdown | torch.Tensor],
    config: FgmConfig,
    *,
    epochs: int | None = None,
    seed: int = 0,
    use_fgm: bool = True,
    on_step: Callable[[dict], None] | None = None,
) -> tuple[nn.Module, TrainingLog]:
    """Shuffle ``dataset`` into mini-batches of ``config.batch_size`` items and train.

    Stops after ``epochs`` passes (if given), ``config.max_steps`` steps, or
    when the mean clean loss over the last ``window`` steps moves by less
    than ``tolerance`` relative to the window before it.
    """
    rng = random.Random(seed)
    optimizer = make_optimizer(model, config)
    step_fn = fgm_step if use_fgm else baseline_step
    history: list[float] = []
    log_ = TrainingLog()
    step = 0
    epoch = 0
    converged = False
    while not converged and step < config.max_steps and (epochs is None or epoch < epochs):
        if len(dataset) == 0:
            break
        for idx in _batches(len(dataset), config.batch_size, rng):
            if step >= config.max_steps:
                break
            batch = [dataset[i] for i in idx]
            res = step_fn(model, batch, loss_fn, config, optimizer)
            step += 1
            rec = {
                "step": step,
                "epoch": epoch,
                "clean_loss": res.clean_loss,
                "adv_loss": res.adv_loss if use_fgm else None,
                "delta_norms": res.delta_norms,
                "lr": config.learning_rate,
                "aborted": res.aborted,
            }
            if isinstance(res.clean, LossBreakdown):
                rec.update(res.clean.summary())
            log_.records.append(rec)
            if on_step is not None:
                on_step(rec)
            if res.aborted:
                log_.aborted += 1
                log.warning("step %d aborted: non-finite loss or weights", step)
                continue
            history.append(res.clean_loss)
            if _converged(history, config.window, config.tolerance):
                log.info("converged at step %d", step)
                converged = True
                break
        epoch += 1
    if step and log_.aborted / step > config.max_abort_fraction:
        raise TrainingDiverged(f"{log_.aborted} of {step} steps aborted")
    return model, log_
