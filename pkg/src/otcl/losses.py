"""Dynamic preservation: separate classes with a prototype cross-entropy,
then compress each class around its (frozen) per-batch mean.

The two phases run per incoming joint batch (stream batch plus replay draw):

1. separation — cross-entropy of inner-product logits against every class
   seen so far, averaged within each class present and summed over classes;
   the feature extractor takes full steps while prototype rows of old
   classes step at a damped rate (clip factor).
2. compression — per-class means of the current features become constant
   anchors; samples are pulled to their own anchor and pushed from the rest.
   Only the extractor moves here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch
from .model import ClassPrototypes, FeatureExtractor, class_logits


@dataclass(frozen=True)
class PreservationConfig:
    lr_theta: float = 0.05
    lr_proto: float = 0.05
    clip_alpha: float = 0.1  # damping on old-class prototype steps
    steps_l1: int = 1
    steps_l2: int = 1

    def __post_init__(self):
        if self.lr_theta <= 0 or self.lr_proto <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.clip_alpha <= 1.0:
            raise ValueError("clip_alpha must lie in [0, 1]")
        if self.steps_l1 < 0 or self.steps_l2 < 0:
            raise ValueError("step counts must be non-negative")


def _class_weights(labels: np.ndarray) -> np.ndarray:
    """Per-sample weights 1/count(class), so sum(w_i * v_i) = per-class mean
    of v summed over the classes present."""
    _, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    return 1.0 / counts[inverse]


def loss_separation(z: Tensor, labels: np.ndarray, protos: ClassPrototypes) -> Tensor:
    """Sum over present classes of the class-mean cross-entropy.

    Logits cover every class with a prototype, so new-class samples push old
    prototypes through the normalizer even when no old sample is present.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty batch")
    protos.require(labels.tolist())
    known = protos.known()
    col = {c: j for j, c in enumerate(known)}
    logits = class_logits(z, protos)
    true_col = np.array([col[int(c)] for c in labels])
    nll = ad.sub(ad.logsumexp(logits, axis=1), ad.gather(logits, true_col))
    return ad.tsum(ad.mul(nll, Tensor(_class_weights(labels))))


def apply_clip_grad(
    protos: ClassPrototypes,
    clip_alpha: float,
    lr_proto: float,
    old_classes,
) -> None:
    """Consume prototype gradients: full step for new classes, `clip_alpha`
    of the step for old ones. Zeroes the accumulators afterward."""
    if lr_proto <= 0:
        raise ValueError("learning rate must be positive")
    if not 0.0 <= clip_alpha <= 1.0:
        raise ValueError("clip_alpha must lie in [0, 1]")
    old = set(int(c) for c in old_classes)
    for c in protos.known():
        t = protos.params[f"proto_{c}"]
        factor = clip_alpha if c in old else 1.0
        t.data -= lr_proto * factor * t.grad
        t.zero_grad()


def compute_mean_prototypes(features: np.ndarray, labels: np.ndarray) -> dict[int, np.ndarray]:
    """Per-class feature means of the joint batch; detached constants."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty batch")
    features = np.asarray(features, dtype=np.float64)
    return {
        int(c): features[labels == c].mean(axis=0) for c in np.unique(labels)
    }


def loss_compression(z: Tensor, labels: np.ndarray, means: dict[int, np.ndarray]) -> Tensor:
    """Pull samples toward their class mean, push from other classes' means.

    Per sample: ||z - mean_own||^2 + logsumexp_c(-||z - mean_c||^2) over the
    classes present in the batch; per-class mean, summed over classes. The
    means are constants — no gradient reaches them.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty batch")
    present = sorted(int(c) for c in np.unique(labels))
    missing = [c for c in present if c not in means]
    if missing:
        raise KeyError(f"no mean prototype for classes {missing}")
    anchors = Tensor(np.stack([means[c] for c in present]))
    col = {c: j for j, c in enumerate(present)}
    own_col = np.array([col[int(c)] for c in labels])

    dists = ad.pairwise_sqdist(z, anchors)
    own = ad.gather(dists, own_col)
    repel = ad.logsumexp(ad.neg(dists), axis=1)
    per_sample = ad.add(own, repel)
    return ad.tsum(ad.mul(per_sample, Tensor(_class_weights(labels))))


def join_batches(new_batch: Batch, replay_batch: Batch | None) -> Batch:
    """Stack the stream batch with the replay draw, never mixing classes:
    replay rows whose label already appears in the stream batch are dropped."""
    if replay_batch is None or len(replay_batch) == 0:
        return new_batch
    new_classes = set(new_batch.labels.tolist())
    keep = ~np.isin(replay_batch.labels, sorted(new_classes))
    if not keep.any():
        return new_batch
    return Batch(
        np.concatenate([new_batch.features, replay_batch.features[keep]]),
        np.concatenate([new_batch.labels, replay_batch.labels[keep]]),
    )


def dynamic_preservation_step(
    new_batch: Batch,
    replay_batch: Batch | None,
    fe: FeatureExtractor,
    protos: ClassPrototypes,
    cfg: PreservationConfig,
) -> dict:
    """One preservation pass over a joint batch; returns loss traces.

    Runs `steps_l1` separation updates (extractor full-rate, prototypes
    clip-controlled), freezes the per-class means of the resulting features,
    then runs `steps_l2` compression updates on the extractor alone.
    """
    joint = join_batches(new_batch, replay_batch)
    new_classes = set(new_batch.labels.tolist())
    old_classes = [c for c in protos.known() if c not in new_classes]

    x = Tensor(joint.features)
    sep_trace, comp_trace = [], []

    for _ in range(cfg.steps_l1):
        z = fe.forward(x)
        loss = loss_separation(z, joint.labels, protos)
        sep_trace.append(loss.item())
        fe.params.zero_grad()
        protos.params.zero_grad()
        ad.backward(loss)
        fe.params.step(cfg.lr_theta)
        apply_clip_grad(protos, cfg.clip_alpha, cfg.lr_proto, old_classes)

    means = compute_mean_prototypes(fe.features_np(joint.features), joint.labels)

    for _ in range(cfg.steps_l2):
        z = fe.forward(x)
        loss = loss_compression(z, joint.labels, means)
        comp_trace.append(loss.item())
        fe.params.zero_grad()
        ad.backward(loss)
        fe.params.step(cfg.lr_theta)

    return {"separation": sep_trace, "compression": comp_trace, "means": means}
