"""Relative attention: per-part fusion weights predicted from a pair.

A two-layer MLP with a softmax head maps the concatenated per-part
descriptors of a probe/gallery pair to four fusion weights; it is trained
with a cosine-embedding verification loss (margin hinge on negatives).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import SgdConfig, Tensor, glorot_uniform, sgd_step
from .embeddings import Instance, PartEmbedding, R_PARTS, fused_similarity, part_cosines
from .errors import ConfigError, DataError, DimensionError, UsageError

log = logging.getLogger(__name__)

DEFAULT_HIDDEN = 256


@dataclass(frozen=True)
class VerificationConfig:
    margin: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.margin < 1.0:
            raise ConfigError(f"margin must be in [0, 1), got {self.margin}")


@dataclass
class AttentionParams:
    """fc1 -> ReLU -> fc2 -> softmax over the 4 parts."""

    w1: Tensor  # (hidden, 2*R*d)
    b1: Tensor  # (hidden, 1)
    w2: Tensor  # (R, hidden)
    b2: Tensor  # (R, 1)

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def dim(self) -> int:
        return self.w1.shape[1] // (2 * R_PARTS)

    def tensors(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def to_entries(self) -> dict:
        return {
            "attention/w1": self.w1.data,
            "attention/b1": self.b1.data,
            "attention/w2": self.w2.data,
            "attention/b2": self.b2.data,
        }

    @staticmethod
    def from_entries(entries: dict) -> "AttentionParams":
        try:
            return AttentionParams(
                *(Tensor(entries[f"attention/{k}"], requires_grad=True) for k in ("w1", "b1", "w2", "b2"))
            )
        except KeyError as e:
            raise DataError(f"checkpoint is missing attention parameter {e}") from e


def init_attention_params(rng: np.random.Generator, d: int, hidden: int = DEFAULT_HIDDEN) -> AttentionParams:
    n_in = 2 * R_PARTS * d
    return AttentionParams(
        w1=Tensor(glorot_uniform(rng, hidden, n_in), requires_grad=True),
        b1=Tensor(np.zeros((hidden, 1)), requires_grad=True),
        w2=Tensor(glorot_uniform(rng, R_PARTS, hidden), requires_grad=True),
        b2=Tensor(np.zeros((R_PARTS, 1)), requires_grad=True),
    )


def order_pair(a: PartEmbedding, b: PartEmbedding):
    """Canonical pair order (byte-lexicographic), making similarity symmetric."""
    return (a, b) if a.key() <= b.key() else (b, a)


def pair_descriptor(a: PartEmbedding, b: PartEmbedding) -> np.ndarray:
    """Concatenated per-part descriptors [a_r || b_r], fixed part order; (2Rd, 1)."""
    cols = []
    for r in range(R_PARTS):
        cols.append(a.parts[r])
        cols.append(b.parts[r])
    return np.concatenate(cols).reshape(-1, 1)


def weights_from_descriptor(params: AttentionParams, x: Tensor) -> Tensor:
    """Forward pass on the tape; returns the (4, 1) softmax weights."""
    if x.shape[0] != params.w1.shape[1]:
        raise DimensionError(
            f"descriptor length {x.shape[0]} does not match parameters "
            f"(expect {params.w1.shape[1]} = 2*R*d)"
        )
    h = (params.w1 @ x + params.b1).relu()
    logits = params.w2 @ h + params.b2
    return logits.softmax()


def attention_weights(params: AttentionParams, a: PartEmbedding, b: PartEmbedding) -> np.ndarray:
    a, b = order_pair(a, b)
    w = weights_from_descriptor(params, Tensor(pair_descriptor(a, b)))
    return w.data.reshape(-1)


def attention_weights_batch(params: AttentionParams, descriptors: np.ndarray) -> np.ndarray:
    """Vectorized inference for (B, 2Rd) descriptors; returns (B, 4) weights."""
    h = np.maximum(descriptors @ params.w1.data.T + params.b1.data.reshape(-1), 0.0)
    logits = h @ params.w2.data.T + params.b2.data.reshape(-1)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def attention_similarity(params: AttentionParams, a: PartEmbedding, b: PartEmbedding) -> float:
    return fused_similarity(a, b, attention_weights(params, a, b))


def verification_loss(s: float, y: int, cfg: VerificationConfig) -> float:
    """1 - s for positives; hinge max(0, s + margin) for negatives."""
    if y == 1:
        return 1.0 - s
    if y == -1:
        return max(0.0, s + cfg.margin)
    raise UsageError(f"verification label must be +1 or -1, got {y!r}")


def pair_loss(
    params: AttentionParams,
    a: PartEmbedding,
    b: PartEmbedding,
    y: int,
    cfg: VerificationConfig,
    descriptor: Tensor = None,
) -> Tensor:
    """Tape-building loss for one pair: verification loss of the fused similarity.

    ``descriptor`` may be passed explicitly (e.g. a requires_grad leaf for
    gradient checks); it must already be in canonical order.
    """
    if y not in (1, -1):
        raise UsageError(f"verification label must be +1 or -1, got {y!r}")
    a, b = order_pair(a, b)
    if descriptor is None:
        descriptor = Tensor(pair_descriptor(a, b))
    w = weights_from_descriptor(params, descriptor)
    cosines = Tensor(part_cosines(a, b).reshape(-1, 1))
    s = w.mul(cosines).sum()
    if y == 1:
        return s.affine(-1.0, 1.0)
    return s.affine(1.0, cfg.margin).relu()


def build_training_pairs(scenes, rng: np.random.Generator, negative_pool_factor: int = 10):
    """All labeled cross-scene same-identity pairs as positives, plus a seeded
    pool of cross-identity negatives (``negative_pool_factor`` x positives).

    Returns a list of (Instance, Instance, y) with y in {+1, -1}.
    """
    labeled = [i for s in scenes for i in s.instances if i.identity is not None]
    labeled.sort(key=lambda i: i.instance_id)
    by_identity = {}
    for inst in labeled:
        by_identity.setdefault(inst.identity, []).append(inst)

    positives = []
    for insts in by_identity.values():
        for i in range(len(insts)):
            for j in range(i + 1, len(insts)):
                if insts[i].scene_id != insts[j].scene_id:
                    positives.append((insts[i], insts[j], 1))

    if not positives:
        raise DataError("no cross-scene same-identity pairs available for training")

    target = negative_pool_factor * len(positives)
    negatives = []
    seen = set()
    n = len(labeled)
    attempts = 0
    while len(negatives) < target and attempts < 50 * target:
        attempts += 1
        i, j = rng.integers(0, n, size=2)
        if i == j:
            continue
        a, b = labeled[i], labeled[j]
        if a.identity == b.identity:
            continue
        key = (min(a.instance_id, b.instance_id), max(a.instance_id, b.instance_id))
        if key in seen:
            continue
        seen.add(key)
        negatives.append((a, b, -1))
    if not negatives:
        raise DataError("no cross-identity pairs available for training")
    return positives + negatives


def train_attention(
    pairs,
    cfg: SgdConfig,
    vcfg: VerificationConfig = VerificationConfig(),
    hidden: int = DEFAULT_HIDDEN,
    neg_ratio: int = 3,
    epoch_losses: list = None,
) -> AttentionParams:
    """Train the attention head on frozen embeddings.

    Each epoch uses every positive pair plus a fresh seeded subsample of the
    provided negatives at ``neg_ratio`` negatives per positive.
    Deterministic given (pairs, cfg).
    """
    positives = [p for p in pairs if p[2] == 1]
    negatives = [p for p in pairs if p[2] == -1]
    if not positives or not negatives:
        raise DataError(
            f"training needs both pair classes, got {len(positives)} positive "
            f"and {len(negatives)} negative"
        )
    d = positives[0][0].embedding.dim
    rng = np.random.default_rng(cfg.seed)
    params = init_attention_params(rng, d, hidden)

    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at_epoch(epoch)
        n_neg = min(len(negatives), neg_ratio * len(positives))
        chosen = rng.choice(len(negatives), size=n_neg, replace=False)
        epoch_pairs = positives + [negatives[i] for i in chosen]
        order = rng.permutation(len(epoch_pairs))

        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [epoch_pairs[i] for i in order[start : start + cfg.batch_size]]
            loss = pair_loss(params, batch[0][0].embedding, batch[0][1].embedding, batch[0][2], vcfg)
            for a, b, y in batch[1:]:
                loss = loss + pair_loss(params, a.embedding, b.embedding, y, vcfg)
            loss = loss.scale(1.0 / len(batch))
            loss.backward()
            sgd_step(params.tensors(), lr)
            total += loss.item() * len(batch)
        mean_loss = total / len(order)
        if epoch_losses is not None:
            epoch_losses.append(mean_loss)
        log.info("attention epoch %d/%d lr=%.4g mean_loss=%.6f", epoch, cfg.epochs, lr, mean_loss)
    return params
