"""Drawing tickets from pretrained checkpoints.

Three schemes: one-shot magnitude pruning (optionally structured into row,
kernel, or channel groups), iterative magnitude pruning under a natural or
adversarial training objective, and learnable mask pruning that optimizes
per-weight scores through a straight-through top-k binarization while the
pretrained weights stay bit-frozen.

A ticket never rewrites weights: it is always the original checkpoint plus
a binary mask, so the sparse subnetwork stays an explicit pair.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import serialize
from .attack import AdvConfig, TrainingDivergedError
from .autodiff import Tensor
from .models import Checkpoint, MaskSet, Network, prunable_names
from .training import SGD, PretrainScheme, TrainConfig, lr_at, train_model, _rng_streams
from . import data as data_mod

GRANULARITIES = ("element", "row", "kernel", "channel")
SCHEMES = ("OMP", "IMP-natural", "IMP-adversarial", "LMP")


class GroupingError(ValueError):
    """Granularity does not apply to the layer's weight shape."""


class PruningConfigError(ValueError):
    """Invalid pruning request."""


def _group_matrix(weights: np.ndarray, granularity: str) -> np.ndarray:
    """View of the weight tensor as (n_groups, group_size) rows.

    Conv weights are F x C x k x k; rows are the k-vectors inside each
    kernel slice, kernels are the k*k slices, channels are whole output
    filters. For 2-d weights (features x units) a row is one output unit's
    incoming vector; kernel/channel require a conv weight.
    """
    if granularity == "element":
        return weights.reshape(-1, 1)
    if weights.ndim == 4:
        f, c, k, k2 = weights.shape
        if granularity == "row":
            return weights.reshape(f * c * k, k2)
        if granularity == "kernel":
            return weights.reshape(f * c, k * k2)
        if granularity == "channel":
            return weights.reshape(f, c * k * k2)
    elif weights.ndim == 2:
        if granularity == "row":
            return np.ascontiguousarray(weights.T)
        raise GroupingError(f"granularity {granularity!r} needs a conv weight, got shape {weights.shape}")
    if granularity not in GRANULARITIES:
        raise GroupingError(f"unknown granularity {granularity!r}")
    raise GroupingError(f"granularity {granularity!r} does not apply to weight shape {weights.shape}")


def group_scores(weights: np.ndarray, granularity: str) -> np.ndarray:
    """Per-group saliency: mean absolute value, so different group sizes are
    comparable under a global budget."""
    mat = _group_matrix(weights, granularity)
    return np.abs(mat).mean(axis=1)


def _mask_with_zeroed_groups(shape: tuple, granularity: str, zero_ids: np.ndarray) -> np.ndarray:
    mat = _group_matrix(np.ones(shape, dtype=np.float32), granularity)
    mat = np.ascontiguousarray(mat)
    mat[zero_ids] = 0.0
    if granularity == "element":
        return mat.reshape(shape)
    if len(shape) == 2:
        return np.ascontiguousarray(mat.T)
    return mat.reshape(shape)


@dataclass
class Ticket:
    """A drawn subnetwork: pretrained checkpoint + mask + provenance."""

    checkpoint: Checkpoint
    masks: MaskSet
    sparsity: float
    granularity: str
    scheme: str
    locus: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise PruningConfigError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.locus not in ("upstream", "downstream"):
            raise PruningConfigError(f"locus must be upstream or downstream, got {self.locus!r}")

    def pretraining_attack(self) -> AdvConfig | None:
        params = self.checkpoint.metadata.get("scheme_params") or {}
        if params.get("kind") == "adversarial" and params.get("adv"):
            return AdvConfig.from_dict(params["adv"])
        return None

    def metadata(self) -> dict:
        return {
            "sparsity": self.sparsity,
            "granularity": self.granularity,
            "scheme": self.scheme,
            "locus": self.locus,
            "provenance": self.provenance,
            "pretraining_scheme": self.checkpoint.metadata.get("pretraining_scheme"),
        }


def save_ticket(ticket: Ticket, path) -> None:
    serialize.save_masks(ticket.masks, path, metadata=ticket.metadata())


def load_ticket(path, checkpoint: Checkpoint) -> Ticket:
    masks, meta = serialize.load_masks(path)
    return Ticket(
        checkpoint=checkpoint,
        masks=masks,
        sparsity=meta["sparsity"],
        granularity=meta["granularity"],
        scheme=meta["scheme"],
        locus=meta["locus"],
        provenance=meta.get("provenance", {}),
    )


def _gather_groups(weights: dict, names: list, granularity: str):
    """All groups across layers as parallel arrays, in deterministic order."""
    scores, layer_idx, group_idx, sizes = [], [], [], []
    for li, name in enumerate(names):
        s = group_scores(weights[name], granularity)
        g = _group_matrix(weights[name], granularity)
        scores.append(s)
        layer_idx.append(np.full(s.size, li))
        group_idx.append(np.arange(s.size))
        sizes.append(np.full(s.size, g.shape[1]))
    return (np.concatenate(scores), np.concatenate(layer_idx), np.concatenate(group_idx), np.concatenate(sizes))


def _select_zero_groups(scores, layer_idx, group_idx, sizes, target_zeros: float):
    """Lowest-scoring groups until the zeroed count first reaches the target.

    Ties break on (layer order, group index), so the mask is a pure function
    of the magnitudes and the configuration.
    """
    order = np.lexsort((group_idx, layer_idx, scores))
    chosen = []
    zeroed = 0
    for pos in order:
        if zeroed >= target_zeros:
            break
        chosen.append(pos)
        zeroed += int(sizes[pos])
    return chosen, zeroed


def omp(checkpoint: Checkpoint, sparsity: float, granularity: str = "element", scope: str = "global") -> Ticket:
    """One-shot magnitude pruning of the pretrained weights, no retraining.

    Zeroes the lowest mean-magnitude groups until the zeroed-weight fraction
    first reaches the target (smallest overshoot, at most one group over).
    """
    if not 0.0 <= sparsity < 1.0:
        raise PruningConfigError(f"sparsity must be in [0, 1); {sparsity} would empty the network")
    if granularity not in GRANULARITIES:
        raise GroupingError(f"unknown granularity {granularity!r}")
    if scope not in ("global", "per_layer"):
        raise PruningConfigError(f"scope must be global or per_layer, got {scope!r}")

    names = prunable_names(checkpoint.spec)
    weights = checkpoint.weights
    masks = {}
    total = sum(weights[n].size for n in names)
    if scope == "global":
        scores, layer_idx, group_idx, sizes = _gather_groups(weights, names, granularity)
        chosen, _ = _select_zero_groups(scores, layer_idx, group_idx, sizes, sparsity * total)
        per_layer_zero = {li: [] for li in range(len(names))}
        for pos in chosen:
            per_layer_zero[int(layer_idx[pos])].append(int(group_idx[pos]))
        for li, name in enumerate(names):
            ids = np.asarray(sorted(per_layer_zero[li]), dtype=int)
            masks[name] = _mask_with_zeroed_groups(weights[name].shape, granularity, ids)
    else:
        for name in names:
            s = group_scores(weights[name], granularity)
            g = _group_matrix(weights[name], granularity)
            sizes = np.full(s.size, g.shape[1])
            chosen, _ = _select_zero_groups(s, np.zeros(s.size, dtype=int), np.arange(s.size), sizes, sparsity * weights[name].size)
            masks[name] = _mask_with_zeroed_groups(weights[name].shape, granularity, np.asarray(chosen, dtype=int))

    maskset = MaskSet(masks)
    return Ticket(
        checkpoint=checkpoint,
        masks=maskset,
        sparsity=maskset.sparsity(),
        granularity=granularity,
        scheme="OMP",
        locus="upstream",
        provenance={"requested_sparsity": sparsity, "scope": scope},
    )


def geometric_schedule(rate: float = 0.2, rounds: int = 10) -> list:
    """Cumulative sparsities from pruning a fixed fraction of survivors per
    round: 1 - (1 - rate)^k."""
    if not 0.0 < rate < 1.0:
        raise PruningConfigError(f"per-round rate must be in (0, 1), got {rate}")
    return [1.0 - (1.0 - rate) ** k for k in range(1, rounds + 1)]


def _prune_to_count(live_weights: dict, names: list, mask: MaskSet, target_zeros: float) -> MaskSet:
    """Grow the zero set to the smallest count >= target, by ascending
    magnitude of the surviving weights; existing zeros never revive."""
    flat_scores, flat_layer, flat_idx = [], [], []
    for li, name in enumerate(names):
        w = np.abs(live_weights[name]).reshape(-1)
        alive = mask.masks[name].reshape(-1) > 0
        flat_scores.append(np.where(alive, w, np.inf))
        flat_layer.append(np.full(w.size, li))
        flat_idx.append(np.arange(w.size))
    scores = np.concatenate(flat_scores)
    layer_idx = np.concatenate(flat_layer)
    flat_idx = np.concatenate(flat_idx)

    current_zeros = mask.zero_count()
    additional = max(int(np.ceil(target_zeros)) - current_zeros, 0)
    if additional == 0:
        return mask.copy()
    order = np.lexsort((flat_idx, layer_idx, scores))
    new_masks = {name: mask.masks[name].copy() for name in names}
    for pos in order[:additional]:
        name = names[int(layer_idx[pos])]
        new_masks[name].reshape(-1)[int(flat_idx[pos])] = 0.0
    return MaskSet(new_masks)


def imp(
    checkpoint: Checkpoint,
    task,
    objective: str,
    schedule: list,
    adv_cfg: AdvConfig | None,
    train_cfg: TrainConfig,
    locus: str = "downstream",
    epochs_per_round: int | None = None,
) -> list:
    """Iterative magnitude pruning: alternate (train with mask fixed) and
    (prune surviving weights to the next cumulative sparsity).

    Training follows the chosen objective; the adversarial variant solves the
    same minimax problem as adversarial pretraining. ``epochs_per_round``
    defaults to the config's epoch count; 0 skips training entirely, which
    reduces one round to one-shot magnitude pruning. Emits one ticket per
    round; every ticket references the original pretrained weights, and masks
    are nested across rounds (zeros never revive).
    """
    if objective not in ("natural", "adversarial"):
        raise PruningConfigError(f"objective must be natural or adversarial, got {objective!r}")
    schedule = list(schedule)
    if any(not 0.0 < s < 1.0 for s in schedule) or any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise PruningConfigError(f"schedule must be strictly increasing within (0, 1), got {schedule}")
    rounds_epochs = train_cfg.epochs if epochs_per_round is None else epochs_per_round
    if rounds_epochs < 0:
        raise PruningConfigError(f"epochs_per_round must be >= 0, got {rounds_epochs}")

    scheme = PretrainScheme(objective if objective == "natural" else "adversarial", adv=adv_cfg)
    working = checkpoint.to_network()
    if task.classes != checkpoint.spec.num_classes:
        from .models import replace_head

        working = replace_head(working, task.classes, _rng_streams(train_cfg.seed)["init"])
    names = prunable_names(checkpoint.spec)
    total = sum(checkpoint.weights[n].size for n in names)
    mask = MaskSet.all_ones(checkpoint.spec)

    tickets = []
    for rnd, target in enumerate(schedule, start=1):
        if rounds_epochs > 0:
            round_seed = int(np.random.SeedSequence((train_cfg.seed, rnd)).generate_state(1)[0])
            decay = tuple(d for d in train_cfg.decay_epochs if d < rounds_epochs)
            round_cfg = dataclasses.replace(train_cfg, seed=round_seed, epochs=rounds_epochs, decay_epochs=decay)
            try:
                train_model(working, mask, task.train, round_cfg, scheme)
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(f"IMP diverged in round {rnd}", step=exc.step) from exc
        live = {name: working.params[name].data for name in names}
        mask = _prune_to_count(live, names, mask, target * total)
        tickets.append(
            Ticket(
                checkpoint=checkpoint,
                masks=mask.copy(),
                sparsity=mask.sparsity(),
                granularity="element",
                scheme=f"IMP-{objective}",
                locus=locus,
                provenance={"round": rnd, "schedule": schedule, "epochs_per_round": rounds_epochs},
            )
        )
    return tickets


@dataclass
class MaskScores:
    """Continuous per-layer scores plus the keep budget they binarize to."""

    scores: dict  # name -> Tensor
    keep: dict  # name -> int

    def __post_init__(self):
        for name, k in self.keep.items():
            size = self.scores[name].data.size
            if not 0 <= k <= size:
                raise PruningConfigError(f"keep count {k} outside [0, {size}] for layer {name!r}")


def topk_binarize_layer(scores: Tensor, k: int) -> Tensor:
    """Binary top-k mask with a straight-through backward.

    Forward keeps the k highest scores (ties to the lower flat index);
    backward passes the mask gradient through to the scores unmodified.
    """
    if not 0 <= k <= scores.data.size:
        raise PruningConfigError(f"keep count {k} outside [0, {scores.data.size}]")
    flat = scores.data.reshape(-1)
    order = np.argsort(-flat, kind="stable")
    mask_flat = np.zeros_like(flat)
    mask_flat[order[:k]] = 1.0
    assert int(mask_flat.sum()) == k

    def back(g):
        ad._accum(scores, g)

    return ad._make(mask_flat.reshape(scores.data.shape), (scores,), back)


def topk_binarize(mask_scores: MaskScores) -> dict:
    """Per-layer binarization; returns mask tensors for a masked forward."""
    return {name: topk_binarize_layer(t, mask_scores.keep[name]) for name, t in mask_scores.scores.items()}


def binarized_maskset(mask_scores: MaskScores) -> MaskSet:
    return MaskSet({name: t.data.copy() for name, t in topk_binarize(mask_scores).items()})


def uniform_keep_plan(checkpoint: Checkpoint, sparsity: float) -> dict:
    """Per-layer keep counts at one global keep fraction."""
    if not 0.0 <= sparsity < 1.0:
        raise PruningConfigError(f"sparsity must be in [0, 1), got {sparsity}")
    names = prunable_names(checkpoint.spec)
    return {name: int(round((1.0 - sparsity) * checkpoint.weights[name].size)) for name in names}


def weight_hash(net: Network) -> str:
    h = hashlib.sha256()
    for name in sorted(net.params):
        h.update(name.encode())
        h.update(net.params[name].data.tobytes())
    return h.hexdigest()


def lmp(
    checkpoint: Checkpoint,
    downstream_task,
    keep_plan,
    train_cfg: TrainConfig,
    rng=None,
    init: str = "magnitude",
) -> Ticket:
    """Learnable mask pruning: optimize mask scores on the downstream task
    while every model weight stays bit-frozen.

    Scores start at |pretrained weight| so the step-0 binarization equals
    per-layer magnitude pruning ("random" draws them uniform instead). The
    downstream class count must match the checkpoint: the pretrained head is
    part of the frozen weights.
    """
    if isinstance(keep_plan, float):
        keep_plan = uniform_keep_plan(checkpoint, keep_plan)
    if downstream_task.classes != checkpoint.spec.num_classes:
        raise PruningConfigError(
            "LMP keeps all weights frozen, including the head; downstream class count "
            f"{downstream_task.classes} must match the checkpoint's {checkpoint.spec.num_classes}"
        )

    streams = _rng_streams(train_cfg.seed)
    net = checkpoint.to_network()
    net.set_requires_grad(False)
    hash_before = weight_hash(net)

    names = prunable_names(checkpoint.spec)
    if init == "magnitude":
        scores = {name: Tensor(np.abs(checkpoint.weights[name]), requires_grad=True) for name in names}
    elif init == "random":
        score_rng = rng if rng is not None else streams["init"]
        scores = {
            name: Tensor(score_rng.uniform(0.0, 1.0, size=checkpoint.weights[name].shape).astype(np.float32), requires_grad=True)
            for name in names
        }
    else:
        raise PruningConfigError(f"unknown score init {init!r}")
    mask_scores = MaskScores(scores=scores, keep={name: keep_plan[name] for name in names})

    optimizer = SGD(scores, lr=train_cfg.base_lr, momentum=train_cfg.momentum, weight_decay=0.0)
    images, labels = downstream_task.train.images, downstream_task.train.labels
    n = images.shape[0]
    for epoch in range(train_cfg.epochs):
        optimizer.lr = lr_at(epoch, train_cfg)
        perm = streams["shuffle"].permutation(n)
        for start in range(0, n, train_cfg.batch_size):
            sel = perm[start : start + train_cfg.batch_size]
            x = images[sel]
            if train_cfg.augment:
                x = data_mod.augment(x, streams["aug"])
            optimizer.zero_grad()
            mask_tensors = topk_binarize(mask_scores)
            loss = ad.cross_entropy(net.forward(Tensor(x), mask_tensors), labels[sel])
            if not np.isfinite(float(loss.data)):
                raise TrainingDivergedError(f"LMP diverged in epoch {epoch}", step=optimizer.step_count)
            ad.backward(loss)
            optimizer.step()

    assert weight_hash(net) == hash_before, "LMP must not modify model weights"
    final = binarized_maskset(mask_scores)
    return Ticket(
        checkpoint=checkpoint,
        masks=final,
        sparsity=final.sparsity(),
        granularity="element",
        scheme="LMP",
        locus="downstream",
        provenance={"keep_total": int(sum(mask_scores.keep.values())), "epochs": train_cfg.epochs, "score_init": init},
    )
