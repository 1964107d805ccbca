"""Evaluation metrics: accuracy, adversarial accuracy, calibration (ECE and
NLL), out-of-distribution ROC-AUC from max-softmax scores, and the Fréchet
distance between Gaussian fits of deep features."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attack import AdvConfig, pgd_attack
from .models import MaskSet, Network, _as_mask_tensors
from .autodiff import Tensor


@dataclass
class MetricsReport:
    """One evaluation row. Fields that were not computed are None and listed
    in ``skipped``."""

    accuracy: float
    ece: float
    nll: float
    n_samples: int
    adv_accuracy: float | None = None
    roc_auc: float | None = None
    attack: dict | None = None
    skipped: tuple = ()

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "adv_accuracy": self.adv_accuracy,
            "ece": self.ece,
            "nll": self.nll,
            "roc_auc": self.roc_auc,
            "attack": self.attack,
            "n_samples": self.n_samples,
            "skipped": list(self.skipped),
        }


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def infer(net: Network, images: np.ndarray, masks=None, batch_size: int = 256, features: bool = False) -> np.ndarray:
    """Batched no-grad forward pass; returns logits or penultimate features."""
    mask_tensors = _as_mask_tensors(net, masks)
    restore = [(t, t.requires_grad) for t in net.params.values()]
    outs = []
    try:
        for t, _ in restore:
            t.requires_grad = False
        for start in range(0, images.shape[0], batch_size):
            x = Tensor(images[start : start + batch_size])
            out = net.features(x, mask_tensors) if features else net.forward(x, mask_tensors)
            outs.append(out.data)
    finally:
        for t, rg in restore:
            t.requires_grad = rg
    return np.concatenate(outs, axis=0)


def accuracy(net: Network, masks, dataset, batch_size: int = 256) -> float:
    """Fraction of argmax-correct predictions; argmax ties resolve to the
    lowest class index."""
    if len(dataset) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    preds = infer(net, dataset.images, masks, batch_size).argmax(axis=1)
    return float((preds == dataset.labels).mean())


def adversarial_accuracy(net: Network, masks, dataset, adv_cfg: AdvConfig, rng=None, batch_size: int = 128) -> float:
    """Accuracy under per-batch PGD.

    A sample counts as correct only if it is classified correctly both
    cleanly and at the attack's returned perturbation: the zero perturbation
    is always in the attacker's candidate set, so an already-misclassified
    input stays misclassified. This makes adversarial accuracy <= clean
    accuracy exact, and epsilon 0 reproduces clean accuracy exactly.
    """
    if len(dataset) == 0:
        raise ValueError("adversarial accuracy of an empty dataset is undefined")
    correct = 0
    for start in range(0, len(dataset), batch_size):
        x = dataset.images[start : start + batch_size]
        y = dataset.labels[start : start + batch_size]
        clean_ok = infer(net, x, masks, batch_size).argmax(axis=1) == y
        pert = pgd_attack(net, masks, x, y, adv_cfg, rng)
        adv_ok = infer(net, x + pert.delta, masks, batch_size).argmax(axis=1) == y
        correct += int((clean_ok & adv_ok).sum())
    return correct / len(dataset)


def calibration(probs: np.ndarray, labels: np.ndarray, n_bins: int = 15) -> dict:
    """Expected calibration error over equal-width confidence bins, plus NLL.

    Returns {"ece", "nll", "bins"}; bins carry (count, acc, conf) so callers
    can cross-check that the bin-weighted accuracy reproduces plain accuracy.
    ECE is bin-dependent; no monotonicity under refinement is implied.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ValueError(f"probs {probs.shape} and labels {labels.shape} do not align")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("probability rows must be nonnegative and sum to 1 within 1e-6")

    n = probs.shape[0]
    conf = probs.max(axis=1)
    pred = probs.argmax(axis=1)
    correct = (pred == labels).astype(np.float64)
    idx = np.minimum((conf * n_bins).astype(int), n_bins - 1)

    ece = 0.0
    bins = []
    for b in range(n_bins):
        members = idx == b
        count = int(members.sum())
        if count == 0:
            bins.append({"count": 0, "acc": None, "conf": None})
            continue
        acc_b = float(correct[members].mean())
        conf_b = float(conf[members].mean())
        ece += (count / n) * abs(acc_b - conf_b)
        bins.append({"count": count, "acc": acc_b, "conf": conf_b})

    nll = float(-np.log(np.maximum(probs[np.arange(n), labels], 1e-12)).mean())
    return {"ece": float(ece), "nll": nll, "bins": bins}


def roc_auc(id_scores: np.ndarray, ood_scores: np.ndarray) -> float:
    """Rank-based (Mann-Whitney) AUC for separating in-distribution from
    out-of-distribution scores; in-distribution is the positive class and
    ties earn half credit."""
    id_scores = np.asarray(id_scores, dtype=np.float64)
    ood_scores = np.asarray(ood_scores, dtype=np.float64)
    if id_scores.size == 0 or ood_scores.size == 0:
        raise ValueError("roc_auc needs nonempty score sets")
    both = np.concatenate([id_scores, ood_scores])
    _, inverse, counts = np.unique(both, return_inverse=True, return_counts=True)
    high = np.cumsum(counts)
    avg_rank = (high - counts + 1 + high) / 2.0
    ranks = avg_rank[inverse]
    n1, n2 = id_scores.size, ood_scores.size
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n2))


def msp_scores(net: Network, masks, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Max softmax probability per sample (the standard OoD confidence score)."""
    return softmax(infer(net, images, masks, batch_size)).max(axis=1)


@dataclass
class FIDStats:
    """Gaussian fit of a feature distribution."""

    mu: np.ndarray
    sigma: np.ndarray
    n: int
    feature_layer_id: str = "penultimate"
    low_sample: bool = False


def gaussian_stats(feature_extractor, dataset, masks=None, max_samples: int | None = None, batch_size: int = 256) -> FIDStats:
    """Sample mean and unbiased covariance of penultimate-layer features.

    ``feature_extractor`` is a Network (features taken after global pooling)
    or any callable mapping an image batch to an N x D feature array. Fewer
    samples than feature dimensions sets the low_sample warning flag.
    """
    images = dataset.images if hasattr(dataset, "images") else np.asarray(dataset)
    if max_samples is not None:
        images = images[:max_samples]
    if images.shape[0] < 2:
        raise ValueError("gaussian_stats needs at least 2 samples")
    if isinstance(feature_extractor, Network):
        feats = infer(feature_extractor, images, masks, batch_size, features=True)
        layer_id = f"{feature_extractor.spec.spec_id}.penultimate"
    else:
        feats = np.asarray(feature_extractor(images))
        layer_id = "custom"
    feats = feats.astype(np.float64)
    mu = feats.mean(axis=0)
    sigma = np.atleast_2d(np.cov(feats, rowvar=False))
    sigma = (sigma + sigma.T) / 2.0
    return FIDStats(mu=mu, sigma=sigma, n=feats.shape[0], feature_layer_id=layer_id, low_sample=feats.shape[0] < feats.shape[1])


PSD_TOLERANCE = 1e-8


def _psd_sqrt(sym: np.ndarray, what: str) -> np.ndarray:
    lam, q = np.linalg.eigh(sym)
    if lam.min(initial=0.0) < -PSD_TOLERANCE:
        raise ValueError(f"{what} has eigenvalue {lam.min()} below -{PSD_TOLERANCE}; not PSD")
    lam = np.clip(lam, 0.0, None)
    return (q * np.sqrt(lam)) @ q.T


def frechet_distance(a: FIDStats, b: FIDStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The matrix square root comes from a symmetric eigendecomposition of
    S_a^(1/2) S_b S_a^(1/2); small negative eigenvalues (within the PSD
    tolerance) clamp to zero, larger ones raise. The result clamps at 0.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ValueError(f"dimension mismatch: {a.mu.shape}/{a.sigma.shape} vs {b.mu.shape}/{b.sigma.shape}")
    sqrt_a = _psd_sqrt(a.sigma, "first covariance")
    inner = sqrt_a @ b.sigma @ sqrt_a
    inner = (inner + inner.T) / 2.0
    lam, _ = np.linalg.eigh(inner)
    if lam.min(initial=0.0) < -PSD_TOLERANCE:
        raise ValueError(f"cross term has eigenvalue {lam.min()} below -{PSD_TOLERANCE}; not PSD")
    tr_sqrt = np.sqrt(np.clip(lam, 0.0, None)).sum()
    diff = a.mu - b.mu
    fid = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_sqrt)
    return max(fid, 0.0)


def evaluate_model(
    net: Network,
    masks,
    dataset,
    adv_cfg: AdvConfig | None = None,
    ood_images: np.ndarray | None = None,
    n_bins: int = 15,
    rng=None,
    batch_size: int = 256,
) -> MetricsReport:
    """Full Table-style evaluation row for one model on one test split."""
    logits = infer(net, dataset.images, masks, batch_size)
    probs = softmax(logits.astype(np.float64))
    probs = probs / probs.sum(axis=1, keepdims=True)
    acc = float((logits.argmax(axis=1) == dataset.labels).mean())
    cal = calibration(probs, dataset.labels, n_bins=n_bins)

    skipped = []
    adv_acc = None
    if adv_cfg is not None:
        adv_acc = adversarial_accuracy(net, masks, dataset, adv_cfg, rng, batch_size=min(batch_size, 128))
    else:
        skipped.append("adv_accuracy")
    auc = None
    if ood_images is not None:
        auc = roc_auc(probs.max(axis=1), msp_scores(net, masks, ood_images, batch_size))
    else:
        skipped.append("roc_auc")

    return MetricsReport(
        accuracy=acc,
        adv_accuracy=adv_acc,
        ece=cal["ece"],
        nll=cal["nll"],
        roc_auc=auc,
        attack=adv_cfg.to_dict() if adv_cfg else None,
        n_samples=len(dataset),
        skipped=tuple(skipped),
    )
