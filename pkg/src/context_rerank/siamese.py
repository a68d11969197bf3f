"""Two-graph comparison mode: one star graph per image, shared-weight GCN.

Each side's graph holds single-instance features (target first, then its
context co-travelers); the two branch readouts are concatenated before the
binary classifier. Kept as a baseline against the paired-node graph.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import SgdConfig, Tensor, glorot_uniform, sgd_step
from .embeddings import Instance, PartEmbedding, Scene, WHOLE
from .errors import ConfigError, DataError
from .expansion import expand
from .graph import READOUT_DIM, DEFAULT_LAYERS, normalize_adjacency, star_adjacency

log = logging.getLogger(__name__)


def _side_features(emb: PartEmbedding, node_feat: str) -> np.ndarray:
    if node_feat == "whole":
        return emb.parts[WHOLE]
    if node_feat == "allparts":
        return emb.parts.reshape(-1)
    raise ConfigError(f"node_feat must be 'whole' or 'allparts', got {node_feat!r}")


@dataclass(frozen=True)
class SiameseSample:
    xa: np.ndarray  # (N, f) probe-side node features
    xb: np.ndarray  # (N, f) gallery-side node features
    label: int


@dataclass
class SiameseParams:
    """Branch weights are shared; only the classifier sees both sides."""

    layers: list  # shared, (f, f) each
    readout_w: Tensor  # shared, (1024, N*f)
    readout_b: Tensor
    cls_w: Tensor  # (2, 2048)
    cls_b: Tensor

    @property
    def feat_dim(self) -> int:
        return self.layers[0].shape[0]

    def tensors(self):
        return list(self.layers) + [self.readout_w, self.readout_b, self.cls_w, self.cls_b]

    def to_entries(self) -> dict:
        entries = {f"siamese/layer{i}": w.data for i, w in enumerate(self.layers)}
        entries.update(
            {
                "siamese/readout_w": self.readout_w.data,
                "siamese/readout_b": self.readout_b.data,
                "siamese/cls_w": self.cls_w.data,
                "siamese/cls_b": self.cls_b.data,
            }
        )
        return entries

    @staticmethod
    def from_entries(entries: dict) -> "SiameseParams":
        layers = []
        i = 0
        while f"siamese/layer{i}" in entries:
            layers.append(Tensor(entries[f"siamese/layer{i}"], requires_grad=True))
            i += 1
        if not layers:
            raise DataError("checkpoint contains no Siamese GCN layers")
        try:
            return SiameseParams(
                layers=layers,
                readout_w=Tensor(entries["siamese/readout_w"], requires_grad=True),
                readout_b=Tensor(entries["siamese/readout_b"], requires_grad=True),
                cls_w=Tensor(entries["siamese/cls_w"], requires_grad=True),
                cls_b=Tensor(entries["siamese/cls_b"], requires_grad=True),
            )
        except KeyError as e:
            raise DataError(f"checkpoint is missing Siamese parameter {e}") from e


def init_siamese_params(
    rng: np.random.Generator,
    n_nodes: int,
    feat_dim: int,
    n_layers: int = DEFAULT_LAYERS,
    readout_dim: int = READOUT_DIM,
) -> SiameseParams:
    layers = [
        Tensor(glorot_uniform(rng, feat_dim, feat_dim), requires_grad=True) for _ in range(n_layers)
    ]
    return SiameseParams(
        layers=layers,
        readout_w=Tensor(glorot_uniform(rng, readout_dim, n_nodes * feat_dim), requires_grad=True),
        readout_b=Tensor(np.zeros((readout_dim, 1)), requires_grad=True),
        cls_w=Tensor(glorot_uniform(rng, 2, 2 * readout_dim), requires_grad=True),
        cls_b=Tensor(np.zeros((2, 1)), requires_grad=True),
    )


def branch_readout(params: SiameseParams, x: Tensor, a_hat: Tensor) -> Tensor:
    z = x
    for w in params.layers:
        z = (a_hat @ z @ w).relu()
    n, f = z.shape
    return (params.readout_w @ z.reshape(n * f, 1) + params.readout_b).relu()


def siamese_forward(params: SiameseParams, xa, xb, norm: str = "sym"):
    xa = xa if isinstance(xa, Tensor) else Tensor(np.asarray(xa))
    xb = xb if isinstance(xb, Tensor) else Tensor(np.asarray(xb))
    a_hat = Tensor(normalize_adjacency(star_adjacency(xa.shape[0]), norm))
    ha = branch_readout(params, xa, a_hat)
    hb = branch_readout(params, xb, a_hat)
    logits = params.cls_w @ ha.concat(hb) + params.cls_b
    probs = logits.softmax()
    return logits, float(probs.data.reshape(-1)[1])


def siamese_score_batch(params: SiameseParams, a_hat: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """Vectorized match scores for (B, N, f) side batches sharing one adjacency."""

    def branch(z):
        for w in params.layers:
            z = np.maximum(np.einsum("ij,bjf->bif", a_hat, z) @ w.data, 0.0)
        flat = z.reshape(z.shape[0], -1)
        return np.maximum(flat @ params.readout_w.data.T + params.readout_b.data.reshape(-1), 0.0)

    h = np.concatenate([branch(xa), branch(xb)], axis=1)
    logits = h @ params.cls_w.data.T + params.cls_b.data.reshape(-1)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=1, keepdims=True))[:, 1]


def train_siamese(samples, cfg: SgdConfig, norm: str = "sym", epoch_losses: list = None) -> SiameseParams:
    if not samples:
        raise DataError("no siamese samples to train on")
    if {s.label for s in samples} != {0, 1}:
        raise DataError("siamese training needs both labels")
    n, f = samples[0].xa.shape
    rng = np.random.default_rng(cfg.seed)
    params = init_siamese_params(rng, n, f)
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at_epoch(epoch)
        order = rng.permutation(len(samples))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start : start + cfg.batch_size]]
            logits, _ = siamese_forward(params, batch[0].xa, batch[0].xb, norm)
            loss = logits.cross_entropy_binary(batch[0].label)
            for s in batch[1:]:
                logits, _ = siamese_forward(params, s.xa, s.xb, norm)
                loss = loss + logits.cross_entropy_binary(s.label)
            loss = loss.scale(1.0 / len(batch))
            loss.backward()
            sgd_step(params.tensors(), lr)
            total += loss.item() * len(batch)
        mean_loss = total / len(order)
        if epoch_losses is not None:
            epoch_losses.append(mean_loss)
        log.info("siamese epoch %d/%d lr=%.4g mean_loss=%.6f", epoch, cfg.epochs, lr, mean_loss)
    return params


def side_matrices(ep, node_feat: str = "whole"):
    """Node feature matrices (probe side, gallery side) for an expanded pair."""
    probe, gallery = ep.target
    xa = [_side_features(probe.embedding, node_feat)]
    xb = [_side_features(gallery.embedding, node_feat)]
    for c in ep.contexts:
        xa.append(_side_features(c.probe_ctx.embedding, node_feat))
        xb.append(_side_features(c.gallery_ctx.embedding, node_feat))
    return np.stack(xa), np.stack(xb)


def siamese_graph_score(
    attn_scorer,
    params: SiameseParams,
    probe_scene: Scene,
    probe: Instance,
    gallery_scene: Scene,
    gallery: Instance,
    k: int = 3,
    seed: int = 0,
    node_feat: str = "whole",
    norm: str = "sym",
) -> float:
    ep = expand(probe_scene, probe, gallery_scene, gallery, attn_scorer, k=k, seed=seed)
    if ep.degenerate:
        return (attn_scorer(probe, gallery) + 1.0) / 2.0
    xa, xb = side_matrices(ep, node_feat)
    _, score = siamese_forward(params, xa, xb, norm)
    return score


def samples_from_expansions(expansions, node_feat: str = "whole"):
    """Turn (ExpandedPair, label) tuples into SiameseSamples."""
    out = []
    for ep, label in expansions:
        xa, xb = side_matrices(ep, node_feat)
        out.append(SiameseSample(xa=xa, xb=xb, label=label))
    return out
