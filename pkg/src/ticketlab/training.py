"""Pretraining and transfer: SGD with momentum and a step-decay schedule,
three pretraining schemes (natural, adversarial, random smoothing), whole
model finetuning, and linear evaluation on frozen features.

All randomness used by a run derives from the TrainConfig seed through
independent child streams (init / shuffling / augmentation / noise), so a
scheme that degenerates to another (epsilon 0, sigma 0) reproduces it
bitwise, and the same config always yields the same weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from .attack import AdvConfig, TrainingDivergedError, adversarial_train_step, gaussian_augment
from .autodiff import Tensor
from .metrics import MetricsReport, evaluate_model, infer
from .models import Checkpoint, MaskSet, Network, NetworkSpec, build_model, replace_head, _as_mask_tensors


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_factor: float = 0.1
    decay_epochs: tuple = (10, 20)
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.base_lr <= 0:
            raise ValueError("epochs, batch_size and base_lr must be positive")
        if self.momentum < 0 or self.weight_decay < 0 or self.lr_decay_factor <= 0:
            raise ValueError("momentum/weight_decay must be >= 0 and lr_decay_factor > 0")
        if list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            raise ValueError(f"decay_epochs must be strictly increasing, got {self.decay_epochs}")
        if self.decay_epochs and self.epochs <= max(self.decay_epochs):
            raise ValueError(f"epochs ({self.epochs}) must exceed the last decay epoch {max(self.decay_epochs)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "decay_epochs" in d:
            d["decay_epochs"] = tuple(d["decay_epochs"])
        return cls(**d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step-decay schedule: base_lr times factor^(number of decay epochs <= epoch)."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    drops = sum(1 for d in cfg.decay_epochs if d <= epoch)
    return cfg.base_lr * cfg.lr_decay_factor**drops


@dataclass(frozen=True)
class PretrainScheme:
    """How robustness is (or is not) induced while pretraining."""

    kind: str  # "natural" | "adversarial" | "random_smoothing"
    adv: AdvConfig | None = None
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("natural", "adversarial", "random_smoothing"):
            raise ValueError(f"unknown pretraining scheme {self.kind!r}")
        if self.kind == "adversarial" and self.adv is None:
            object.__setattr__(self, "adv", AdvConfig())

    def to_dict(self) -> dict:
        return {"kind": self.kind, "adv": self.adv.to_dict() if self.adv else None, "sigma": self.sigma}


class SGD:
    """Momentum SGD with decoupled masking: at masked positions the whole
    update (gradient, weight decay, momentum) is zeroed, so frozen weights
    are bit-identical before and after a step."""

    total_steps = 0  # process-wide, lets harnesses verify cached reruns train nothing

    def __init__(self, params: dict, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.step_count = 0

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def step(self, masks=None):
        mask_arrays = masks.masks if isinstance(masks, MaskSet) else masks
        for name, t in self.params.items():
            g = t.grad
            if self.weight_decay:
                g = g + self.weight_decay * t.data
            if mask_arrays and name in mask_arrays:
                arr = mask_arrays[name]
                g = g * (arr.data if isinstance(arr, Tensor) else arr)
            v = self.velocity[name]
            v *= self.momentum
            v += g
            t.data -= self.lr * v
        self.step_count += 1
        SGD.total_steps += 1


def _rng_streams(seed: int):
    ss = np.random.SeedSequence(seed)
    init, shuffle, aug, noise, attack = ss.spawn(5)
    return {
        "init": np.random.default_rng(init),
        "shuffle": np.random.default_rng(shuffle),
        "aug": np.random.default_rng(aug),
        "noise": np.random.default_rng(noise),
        "attack": np.random.default_rng(attack),
    }


def _natural_step(net: Network, masks, x: np.ndarray, y: np.ndarray, optimizer: SGD) -> float:
    mask_tensors = _as_mask_tensors(net, masks)
    net.zero_grad()
    loss = ad.cross_entropy(net.forward(Tensor(x), mask_tensors), y)
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingDivergedError("training loss is not finite", step=optimizer.step_count)
    ad.backward(loss)
    optimizer.step(masks)
    return value


@dataclass
class TrainResult:
    history: list
    steps: int


def train_model(
    net: Network,
    masks,
    train_data,
    cfg: TrainConfig,
    scheme: PretrainScheme,
    eval_data=None,
    log_fn=None,
    params=None,
) -> TrainResult:
    """Run the training loop; returns per-epoch history and the step count.

    ``masks`` fixes the sparsity pattern for the whole run (weights under a
    zero stay untouched). ``params`` restricts the optimizer to a subset of
    the network's parameters.
    """
    streams = _rng_streams(cfg.seed)
    optimizer = SGD(params if params is not None else net.params, lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    history = []
    n = train_data.images.shape[0]
    for epoch in range(cfg.epochs):
        optimizer.lr = lr_at(epoch, cfg)
        perm = streams["shuffle"].permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            sel = perm[start : start + cfg.batch_size]
            x = train_data.images[sel]
            y = train_data.labels[sel]
            if cfg.augment:
                x = data_mod.augment(x, streams["aug"])
            try:
                if scheme.kind == "adversarial":
                    losses.append(adversarial_train_step(net, masks, (x, y), scheme.adv, optimizer, streams["attack"]))
                else:
                    if scheme.kind == "random_smoothing":
                        x = gaussian_augment(x, scheme.sigma, streams["noise"])
                    losses.append(_natural_step(net, masks, x, y, optimizer))
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(f"diverged in epoch {epoch}", step=exc.step) from exc
        record = {"epoch": epoch, "lr": optimizer.lr, "train_loss": float(np.mean(losses))}
        if eval_data is not None:
            preds = infer(net, eval_data.images, masks).argmax(axis=1)
            record["eval_accuracy"] = float((preds == eval_data.labels).mean())
        history.append(record)
        if log_fn is not None:
            log_fn(record)
    return TrainResult(history=history, steps=optimizer.step_count)


def pretrain(spec: NetworkSpec, source_task, scheme: PretrainScheme, cfg: TrainConfig, rng=None, log_fn=None) -> Checkpoint:
    """Train a dense model on the source task under the given scheme."""
    streams = _rng_streams(cfg.seed)
    init_rng = rng if rng is not None else streams["init"]
    net = build_model(spec, init_rng)
    result = train_model(net, None, source_task.train, cfg, scheme, eval_data=source_task.test, log_fn=log_fn)
    metadata = {
        "source_task": source_task.name,
        "pretraining_scheme": scheme.kind,
        "scheme_params": scheme.to_dict(),
        "seed": cfg.seed,
        "epoch": cfg.epochs,
        "train_config": cfg.to_dict(),
        "final_train_loss": result.history[-1]["train_loss"],
    }
    return Checkpoint.from_network(net, metadata)


def finetune_whole(
    ticket,
    downstream_task,
    cfg: TrainConfig,
    eval_adv_cfg: AdvConfig | None = None,
    ood_images: np.ndarray | None = None,
    n_bins: int = 15,
    log_fn=None,
) -> tuple[Network, MetricsReport]:
    """Transfer by whole-model finetuning: fresh classifier head, all
    unmasked weights train, masked weights stay frozen at zero effect.

    The adversarial evaluation defaults to the attack used during the
    ticket's pretraining when one exists.
    """
    streams = _rng_streams(cfg.seed)
    net = replace_head(ticket.checkpoint.to_network(), downstream_task.classes, streams["init"])
    train_model(net, ticket.masks, downstream_task.train, cfg, PretrainScheme("natural"), log_fn=log_fn)
    if eval_adv_cfg is None:
        eval_adv_cfg = ticket.pretraining_attack()
    report = evaluate_model(net, ticket.masks, downstream_task.test, adv_cfg=eval_adv_cfg, ood_images=ood_images, n_bins=n_bins)
    return net, report


@dataclass
class LinearHead:
    """Classifier trained on frozen penultimate features."""

    w: np.ndarray
    b: np.ndarray
    classes: int


def linear_eval(ticket, downstream_task, cfg: TrainConfig, log_fn=None) -> tuple[LinearHead, float]:
    """Freeze the ticket and train only a linear classifier on its features.

    Features are extracted once per split (so image-space augmentation does
    not apply) and the head trains under the same schedule. Returns the head
    and its test accuracy.
    """
    streams = _rng_streams(cfg.seed)
    net = ticket.checkpoint.to_network()
    feats_train = infer(net, downstream_task.train.images, ticket.masks, features=True)
    feats_test = infer(net, downstream_task.test.images, ticket.masks, features=True)

    dim = feats_train.shape[1]
    classes = downstream_task.classes
    bound = math.sqrt(6.0 / dim)
    w = Tensor(streams["init"].uniform(-bound, bound, size=(dim, classes)).astype(np.float32), requires_grad=True)
    b = Tensor(np.zeros(classes, dtype=np.float32), requires_grad=True)
    optimizer = SGD({"w": w, "b": b}, lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    n = feats_train.shape[0]
    labels = downstream_task.train.labels
    for epoch in range(cfg.epochs):
        optimizer.lr = lr_at(epoch, cfg)
        perm = streams["shuffle"].permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            sel = perm[start : start + cfg.batch_size]
            optimizer.zero_grad()
            logits = ad.add(ad.matmul(Tensor(feats_train[sel]), w), ad.reshape(b, (1, -1)))
            loss = ad.cross_entropy(logits, labels[sel])
            if not np.isfinite(float(loss.data)):
                raise TrainingDivergedError(f"linear head diverged in epoch {epoch}", step=optimizer.step_count)
            ad.backward(loss)
            optimizer.step()
            losses.append(float(loss.data))
        if log_fn is not None:
            log_fn({"epoch": epoch, "lr": optimizer.lr, "train_loss": float(np.mean(losses))})

    test_logits = feats_test @ w.data + b.data
    acc = float((test_logits.argmax(axis=1) == downstream_task.test.labels).mean())
    return LinearHead(w.data.copy(), b.data.copy(), classes), acc


def assemble_linear_model(ticket, head: LinearHead) -> Network:
    """Ticket body plus a trained linear head, as a full Network for metrics."""
    net = ticket.checkpoint.to_network()
    rng = np.random.default_rng(0)
    net = replace_head(net, head.classes, rng)
    net.params["head.w"] = Tensor(head.w.copy(), requires_grad=True)
    net.params["head.b"] = Tensor(head.b.copy(), requires_grad=True)
    return net
