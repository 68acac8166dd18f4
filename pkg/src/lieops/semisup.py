"""Semi-supervised consistency training on frozen features.

A small classifier is trained with cross-entropy on a handful of labeled
features plus a consistency term on unlabeled features: wherever the EMA
copy of the classifier is confident, its argmax becomes a pseudo-label and
the live classifier must reproduce it on an augmented version of the same
feature. Augmentations are group transports with coefficients sampled from
the learned prior; the comparison baselines replace them with the identity
(plain pseudo-labeling) or with random feature interpolation.

The backbone, operator dictionary, and prior network are frozen throughout;
gradients reach only the classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .inference import LaplacianParams, sample_laplacian
from .networks import (
    AdamWState,
    EmaState,
    MlpNet,
    WarmupSchedule,
    adamw_update,
    cross_entropy,
    ema_update,
    encode_prior,
    softmax,
)
from .operators import OperatorDictionary, transport

METHODS = ("supervised", "pseudo_label", "mixup", "prior_aug")


@dataclass
class SemiSupConfig:
    labeled_batch: int = 32
    unlabeled_batch: int = 480
    confidence: float = 0.95   # values above 1 disable the consistency term
    iterations: int = 1000
    ema_decay: float = 0.999
    hidden_dim: int = 128
    lr: float = 1.0e-3
    weight_decay: float = 5.0e-4
    method: str = "prior_aug"

    def __post_init__(self):
        if self.labeled_batch < 1 or self.unlabeled_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.confidence <= 0.0:
            raise ValueError("confidence must be positive")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")


@dataclass
class PriorSampler:
    """Frozen prior over augmentation coefficients for given features.

    Wraps either a trained prior network (evaluated past its warm-up, so the
    blend weight is 1) or fixed Laplacian parameters.
    """

    opdict: OperatorDictionary
    net: MlpNet | None = None
    fixed: LaplacianParams | None = None

    def params(self, Z: np.ndarray) -> LaplacianParams:
        if self.net is not None:
            out, _ = encode_prior(self.net, Z, WarmupSchedule(total_iters=0), 0)
            return out
        if self.fixed is None:
            raise ValueError("PriorSampler needs a network or fixed parameters")
        shape = (Z.shape[0],) + self.fixed.shift.shape
        return LaplacianParams(
            np.broadcast_to(self.fixed.shift, shape).copy(),
            np.broadcast_to(self.fixed.log_scale, shape).copy(),
        )

    def augment(self, Z: np.ndarray, rng: np.random.Generator, noise=None) -> np.ndarray:
        p = self.params(Z)
        if noise is None:
            c, _ = sample_laplacian(p, rng)
        else:
            c = p.shift + p.scale * noise
        return transport(self.opdict, c, Z)


def semisup_loss(
    classifier: MlpNet,
    ema_classifier: MlpNet,
    labeled: tuple[np.ndarray, np.ndarray],
    unlabeled: np.ndarray,
    prior: PriorSampler | None,
    cfg: SemiSupConfig,
    rng: np.random.Generator,
    noise_override: np.ndarray | None = None,
):
    """Supervised cross-entropy plus confidence-masked consistency.

    Pseudo-labels and the confidence mask come from the EMA classifier on
    the un-augmented unlabeled features and carry no gradient. Confident
    features are augmented (``prior`` None means identity augmentation) and
    the live classifier's cross-entropy against the pseudo-labels, averaged
    over the confident count, is added. The term is zero when nothing
    clears the threshold.

    ``noise_override`` fixes the per-point reparameterization noise (used by
    order-invariance tests); by default the rng is consumed only when at
    least one unlabeled point is confident.

    Returns ``(loss, grads, n_confident)`` with grads for the classifier.
    """
    Zl, yl = labeled
    logits_l, cache_l = classifier.forward(Zl)
    loss, d_logits_l = cross_entropy(logits_l, yl)
    grads, _ = classifier.backward(cache_l, d_logits_l)

    ema_logits, _ = ema_classifier.forward(unlabeled)
    probs = softmax(ema_logits)
    conf = probs.max(axis=1)
    mask = conf >= cfg.confidence
    n_conf = int(mask.sum())
    if n_conf > 0:
        pseudo = np.argmax(probs[mask], axis=1)
        Zu = unlabeled[mask]
        if prior is not None:
            noise = noise_override[mask] if noise_override is not None else None
            Zu = prior.augment(Zu, rng, noise=noise)
        logits_u, cache_u = classifier.forward(Zu)
        loss_u, d_logits_u = cross_entropy(logits_u, pseudo)
        loss += loss_u
        grads_u, _ = classifier.backward(cache_u, d_logits_u)
        for g, gu in zip(grads, grads_u):
            g += gu
    return loss, grads, n_conf


def _mixup_consistency(
    classifier: MlpNet,
    ema_classifier: MlpNet,
    unlabeled: np.ndarray,
    rng: np.random.Generator,
):
    """Interpolation consistency: match mixed EMA logits on mixed features."""
    n = unlabeled.shape[0]
    partner = rng.permutation(n)
    lam = rng.random(n)[:, None]
    mixed = lam * unlabeled + (1.0 - lam) * unlabeled[partner]
    ema_logits, _ = ema_classifier.forward(unlabeled)
    target = lam * ema_logits + (1.0 - lam) * ema_logits[partner]
    logits, cache = classifier.forward(mixed)
    diff = logits - target
    loss = float(np.mean(diff * diff))
    d_logits = 2.0 * diff / diff.size
    grads, _ = classifier.backward(cache, d_logits)
    return loss, grads


@dataclass
class TrialResult:
    accuracy: float
    history: list = field(default_factory=list)  # (iteration, loss, n_confident)


def run_semisup_trial(
    features: np.ndarray,
    labels: np.ndarray,
    test_features: np.ndarray,
    test_labels: np.ndarray,
    labeled_idx: np.ndarray,
    prior: PriorSampler | None,
    cfg: SemiSupConfig,
    seed: int,
    history_every: int = 100,
) -> TrialResult:
    """Train the classifier on one label split and score the EMA copy.

    Batches come from one rng stream and augmentation noise from another, so
    methods that never touch the augmentation stream see identical batches.
    Labeled batches are drawn with replacement (the labeled pool is tiny),
    unlabeled batches without. Deterministic for a fixed seed and split.

    Raises:
        ValueError: if some class has no labeled example in the split.
    """
    labels = np.asarray(labels)
    labeled_idx = np.asarray(labeled_idx)
    classes = np.unique(labels)
    present = np.unique(labels[labeled_idx])
    if present.size != classes.size:
        missing = sorted(set(classes.tolist()) - set(present.tolist()))
        raise ValueError(f"label split is missing classes {missing}")
    if cfg.method in ("prior_aug",) and prior is None:
        raise ValueError("prior_aug needs a PriorSampler")

    batch_rng, aug_rng, init_rng = np.random.default_rng(seed).spawn(3)
    n_classes = classes.size
    classifier = MlpNet([features.shape[1], cfg.hidden_dim], n_classes, "plain", rng=init_rng)
    opt = AdamWState.for_net(classifier)
    ema = EmaState(classifier, cfg.ema_decay)

    unlabeled_idx = np.setdiff1d(np.arange(features.shape[0]), labeled_idx)
    history = []
    for it in range(cfg.iterations):
        lab = batch_rng.choice(labeled_idx, size=cfg.labeled_batch, replace=True)
        unl = batch_rng.choice(
            unlabeled_idx, size=min(cfg.unlabeled_batch, unlabeled_idx.size), replace=False
        )
        Zl, yl, Zu = features[lab], labels[lab], features[unl]
        n_conf = 0
        if cfg.method == "supervised":
            logits, cache = classifier.forward(Zl)
            loss, d_logits = cross_entropy(logits, yl)
            grads, _ = classifier.backward(cache, d_logits)
        elif cfg.method == "mixup":
            logits, cache = classifier.forward(Zl)
            loss, d_logits = cross_entropy(logits, yl)
            grads, _ = classifier.backward(cache, d_logits)
            ema_net = ema.network(classifier)
            loss_u, grads_u = _mixup_consistency(classifier, ema_net, Zu, aug_rng)
            loss += loss_u
            for g, gu in zip(grads, grads_u):
                g += gu
        else:
            ema_net = ema.network(classifier)
            use_prior = prior if cfg.method == "prior_aug" else None
            loss, grads, n_conf = semisup_loss(
                classifier, ema_net, (Zl, yl), Zu, use_prior, cfg, aug_rng
            )
        adamw_update(classifier, grads, opt, lr=cfg.lr, weight_decay=cfg.weight_decay)
        ema_update(ema, classifier)
        if it % history_every == 0 or it == cfg.iterations - 1:
            history.append((it, float(loss), n_conf))

    final = ema.network(classifier)
    logits, _ = final.forward(test_features)
    acc = float(np.mean(np.argmax(logits, axis=1) == np.asarray(test_labels)))
    return TrialResult(accuracy=acc, history=history)


def sample_label_split(
    labels: np.ndarray, per_class: int, rng: np.random.Generator
) -> np.ndarray:
    """Indices of ``per_class`` labeled examples per class."""
    labels = np.asarray(labels)
    out = []
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        if idx.size < per_class:
            raise ValueError(f"class {k} has only {idx.size} examples, need {per_class}")
        out.extend(rng.choice(idx, size=per_class, replace=False))
    return np.sort(np.array(out))
