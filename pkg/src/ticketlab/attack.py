"""L-inf projected-gradient attacks, Gaussian input noise, and the
adversarial training step.

The attack maximizes per-sample cross-entropy over an epsilon ball around
the input, projecting after every step so the infinity norm bound holds
exactly. With best-so-far tracking the zero perturbation is always in the
candidate set, which makes "adversarial loss >= clean loss" a hard
guarantee rather than a tendency.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import Network, _as_mask_tensors

INPUT_MIN = 0.0
INPUT_MAX = 1.0


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class AdvConfig:
    """Attack budget: radius, iteration count, step size, and init scheme."""

    epsilon: float = 8.0 / 255.0
    steps: int = 7
    step_size: float = 2.0 / 255.0
    init: str = "zero"  # "zero" | "random"
    track_best: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.init not in ("zero", "random"):
            raise ValueError(f"init must be 'zero' or 'random', got {self.init!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdvConfig":
        return cls(**d)


@dataclass
class Perturbation:
    """Additive perturbation with max-norm <= the epsilon it was drawn under."""

    delta: np.ndarray


def _project(delta: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    delta = np.clip(delta, -eps, eps)
    delta = np.clip(x + delta, INPUT_MIN, INPUT_MAX) - x
    assert float(np.abs(delta).max(initial=0.0)) <= eps
    return delta


def attack_objective(net: Network, masks, y: np.ndarray):
    """Per-sample cross-entropy of the masked forward pass, as an attack target.

    Returns a function mapping a perturbed input batch to (per-sample losses,
    gradient with respect to the input or None).
    """
    mask_tensors = _as_mask_tensors(net, masks)

    def objective(x_adv: np.ndarray, need_grad: bool):
        leaf = Tensor(x_adv, requires_grad=need_grad)
        losses = ad.cross_entropy(net.forward(leaf, mask_tensors), y, reduction="none")
        if not need_grad:
            return losses.data.copy(), None
        ad.backward(ad.tsum(losses))
        return losses.data.copy(), leaf.grad

    return objective


def attack_on_objective(objective, x: np.ndarray, cfg: AdvConfig, rng=None) -> Perturbation:
    """Run PGD against an arbitrary per-sample objective."""
    if cfg.epsilon == 0.0:
        return Perturbation(np.zeros_like(x))
    eps = cfg.epsilon

    best_delta = np.zeros_like(x)
    best_loss = np.full(x.shape[0], -np.inf)

    def consider(delta, losses):
        better = losses > best_loss
        best_loss[better] = losses[better]
        best_delta[better] = delta[better]

    if cfg.init == "random":
        if rng is None:
            raise ValueError("random init requires an rng")
        delta = _project(rng.uniform(-eps, eps, size=x.shape).astype(x.dtype), x, eps)
        if cfg.track_best:
            clean_losses, _ = objective(x, False)
            consider(np.zeros_like(x), clean_losses)
    else:
        delta = np.zeros_like(x)

    for _ in range(cfg.steps):
        losses, grad = objective(x + delta, True)
        if cfg.track_best:
            consider(delta, losses)
        delta = _project(delta + cfg.step_size * np.sign(grad), x, eps)

    if cfg.track_best:
        losses, _ = objective(x + delta, False)
        consider(delta, losses)
        return Perturbation(best_delta)
    return Perturbation(delta)


def pgd_attack(net: Network, masks, x, y: np.ndarray, cfg: AdvConfig, rng=None) -> Perturbation:
    """PGD perturbation of an image batch against a (masked) network.

    Model weights are read, never written; their requires_grad flags are
    suspended so the backward pass only produces input gradients.
    """
    x_np = x.data if isinstance(x, Tensor) else np.asarray(x)
    restore = [(t, t.requires_grad) for t in net.params.values()]
    try:
        for t, _ in restore:
            t.requires_grad = False
        return attack_on_objective(attack_objective(net, masks, y), x_np, cfg, rng)
    finally:
        for t, rg in restore:
            t.requires_grad = rg


def gaussian_augment(x: np.ndarray, sigma: float, rng) -> np.ndarray:
    """Add iid N(0, sigma^2) noise, then clip back to the input range."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    noise = rng.standard_normal(x.shape, dtype=np.float32)
    return np.clip(x + sigma * noise, INPUT_MIN, INPUT_MAX)


def adversarial_train_step(net: Network, masks, batch, cfg: AdvConfig, optimizer, rng=None) -> float:
    """One minimax step: attack the batch, then descend on the masked weights."""
    x, y = batch
    pert = pgd_attack(net, masks, x, y, cfg, rng)
    mask_tensors = _as_mask_tensors(net, masks)
    net.zero_grad()
    loss = ad.cross_entropy(net.forward(Tensor(x + pert.delta), mask_tensors), y)
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingDivergedError("adversarial training loss is not finite", step=optimizer.step_count)
    ad.backward(loss)
    optimizer.step(masks)
    return value
