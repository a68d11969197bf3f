"""Star context graph over a target pair and its K context pairs, plus the
GCN that turns the graph into a probe-gallery match probability.

Node 0 holds the target pair, nodes 1..K the context pairs in descending
score order. Every node connects to the target and to itself; propagation
is Z <- ReLU(A_hat Z W) for three layers, then a flattened readout feeds a
binary softmax classifier.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import SgdConfig, Tensor, glorot_uniform, sgd_step
from .embeddings import Instance, PartEmbedding, Scene, WHOLE
from .errors import ConfigError, DataError, DimensionError, UsageError
from .expansion import ExpandedPair, expand

log = logging.getLogger(__name__)

DEFAULT_LAYERS = 3
READOUT_DIM = 1024
NODE_FEAT_MODES = ("whole", "allparts")
NORM_MODES = ("sym", "row")


def star_adjacency(n: int) -> np.ndarray:
    """Target node adjacent to everything; other nodes only to the target and themselves."""
    if n < 1:
        raise UsageError(f"graph needs at least one node, got {n}")
    a = np.eye(n)
    a[0, :] = 1.0
    a[:, 0] = 1.0
    return a


def normalize_adjacency(a: np.ndarray, mode: str = "sym") -> np.ndarray:
    deg = a.sum(axis=1)
    if mode == "sym":
        inv_sqrt = 1.0 / np.sqrt(deg)
        return a * inv_sqrt[:, None] * inv_sqrt[None, :]
    if mode == "row":
        return a / deg[:, None]
    raise ConfigError(f"adjacency normalization must be one of {NORM_MODES}, got {mode!r}")


def _node_features(a: PartEmbedding, b: PartEmbedding, node_feat: str) -> np.ndarray:
    if node_feat == "whole":
        return np.concatenate([a.parts[WHOLE], b.parts[WHOLE]])
    if node_feat == "allparts":
        return np.concatenate([a.parts.reshape(-1), b.parts.reshape(-1)])
    raise ConfigError(f"node_feat must be one of {NODE_FEAT_MODES}, got {node_feat!r}")


@dataclass(frozen=True)
class ContextGraph:
    x: np.ndarray  # (N, f) node features, target pair in row 0
    adjacency: np.ndarray  # (N, N) binary
    norm_adjacency: np.ndarray  # (N, N)


@dataclass(frozen=True)
class GraphSample:
    graph: ContextGraph
    label: int  # 1 = same identity, 0 = different


def build_graph(ep: ExpandedPair, node_feat: str = "whole", norm: str = "sym") -> ContextGraph:
    if ep.degenerate or len(ep.contexts) != ep.k:
        raise UsageError(
            f"build_graph needs exactly K={ep.k} contexts, got {len(ep.contexts)}"
            + (" (degenerate target)" if ep.degenerate else "")
        )
    probe, gallery = ep.target
    rows = [_node_features(probe.embedding, gallery.embedding, node_feat)]
    for c in ep.contexts:
        rows.append(_node_features(c.probe_ctx.embedding, c.gallery_ctx.embedding, node_feat))
    widths = {r.shape[0] for r in rows}
    if len(widths) != 1:
        raise DataError(f"inconsistent node feature dimensions in graph: {sorted(widths)}")
    a = star_adjacency(len(rows))
    return ContextGraph(x=np.stack(rows), adjacency=a, norm_adjacency=normalize_adjacency(a, norm))


@dataclass
class GcnParams:
    layers: list  # L Tensors, each (f, f)
    readout_w: Tensor  # (1024, N*f)
    readout_b: Tensor  # (1024, 1)
    cls_w: Tensor  # (2, 1024)
    cls_b: Tensor  # (2, 1)

    @property
    def feat_dim(self) -> int:
        return self.layers[0].shape[0]

    @property
    def n_nodes(self) -> int:
        return self.readout_w.shape[1] // self.feat_dim

    def tensors(self):
        return list(self.layers) + [self.readout_w, self.readout_b, self.cls_w, self.cls_b]

    def to_entries(self) -> dict:
        entries = {f"gcn/layer{i}": w.data for i, w in enumerate(self.layers)}
        entries.update(
            {
                "gcn/readout_w": self.readout_w.data,
                "gcn/readout_b": self.readout_b.data,
                "gcn/cls_w": self.cls_w.data,
                "gcn/cls_b": self.cls_b.data,
            }
        )
        return entries

    @staticmethod
    def from_entries(entries: dict) -> "GcnParams":
        layers = []
        i = 0
        while f"gcn/layer{i}" in entries:
            layers.append(Tensor(entries[f"gcn/layer{i}"], requires_grad=True))
            i += 1
        if not layers:
            raise DataError("checkpoint contains no GCN layers")
        try:
            return GcnParams(
                layers=layers,
                readout_w=Tensor(entries["gcn/readout_w"], requires_grad=True),
                readout_b=Tensor(entries["gcn/readout_b"], requires_grad=True),
                cls_w=Tensor(entries["gcn/cls_w"], requires_grad=True),
                cls_b=Tensor(entries["gcn/cls_b"], requires_grad=True),
            )
        except KeyError as e:
            raise DataError(f"checkpoint is missing GCN parameter {e}") from e


def init_gcn_params(
    rng: np.random.Generator,
    n_nodes: int,
    feat_dim: int,
    n_layers: int = DEFAULT_LAYERS,
    readout_dim: int = READOUT_DIM,
) -> GcnParams:
    layers = [
        Tensor(glorot_uniform(rng, feat_dim, feat_dim), requires_grad=True) for _ in range(n_layers)
    ]
    flat = n_nodes * feat_dim
    return GcnParams(
        layers=layers,
        readout_w=Tensor(glorot_uniform(rng, readout_dim, flat), requires_grad=True),
        readout_b=Tensor(np.zeros((readout_dim, 1)), requires_grad=True),
        cls_w=Tensor(glorot_uniform(rng, 2, readout_dim), requires_grad=True),
        cls_b=Tensor(np.zeros((2, 1)), requires_grad=True),
    )


def gcn_forward(
    params: GcnParams,
    graph: ContextGraph,
    x: Tensor = None,
    activation: str = "relu",
):
    """Propagate, read out, classify. Returns (logits Tensor, match score).

    ``x`` may be supplied as a requires_grad leaf for gradient checks;
    ``activation='linear'`` disables the nonlinearity (oracle mode).
    """
    if x is None:
        x = Tensor(graph.x)
    n, f = x.shape
    if f != params.feat_dim:
        raise ConfigError(f"node feature dim {f} does not match parameters ({params.feat_dim})")
    if n * f != params.readout_w.shape[1]:
        raise ConfigError(
            f"graph has {n} nodes but readout expects {params.n_nodes} "
            f"(flatten width {params.readout_w.shape[1]})"
        )
    a_hat = Tensor(graph.norm_adjacency)
    z = x
    for w in params.layers:
        z = a_hat @ z @ w
        if activation == "relu":
            z = z.relu()
        elif activation != "linear":
            raise ConfigError(f"activation must be 'relu' or 'linear', got {activation!r}")
    flat = z.reshape(n * f, 1)
    h = (params.readout_w @ flat + params.readout_b).relu()
    logits = params.cls_w @ h + params.cls_b
    probs = logits.softmax()
    return logits, float(probs.data.reshape(-1)[1])


def gcn_score_batch(params: GcnParams, a_hat: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Vectorized match scores for a batch of graphs sharing one adjacency.

    ``xs`` has shape (B, N, f); returns (B,) positive-class probabilities.
    """
    z = xs
    for w in params.layers:
        z = np.maximum(np.einsum("ij,bjf->bif", a_hat, z) @ w.data, 0.0)
    flat = z.reshape(z.shape[0], -1)
    h = np.maximum(flat @ params.readout_w.data.T + params.readout_b.data.reshape(-1), 0.0)
    logits = h @ params.cls_w.data.T + params.cls_b.data.reshape(-1)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=1, keepdims=True))[:, 1]


def sample_loss(params: GcnParams, sample: GraphSample, x: Tensor = None) -> Tensor:
    logits, _ = gcn_forward(params, sample.graph, x=x)
    return logits.cross_entropy_binary(sample.label)


def train_gcn(samples, cfg: SgdConfig, epoch_losses: list = None) -> GcnParams:
    """Binary cross-entropy training over graph samples; deterministic per seed."""
    if not samples:
        raise DataError("no graph samples to train on")
    labels = {s.label for s in samples}
    if labels != {0, 1}:
        raise DataError(f"training needs both labels, got {sorted(labels)}")
    shapes = {s.graph.x.shape for s in samples}
    if len(shapes) != 1:
        raise DataError(f"all graph samples must share K; found node shapes {sorted(shapes)}")
    n, f = samples[0].graph.x.shape
    rng = np.random.default_rng(cfg.seed)
    params = init_gcn_params(rng, n, f)

    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at_epoch(epoch)
        order = rng.permutation(len(samples))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start : start + cfg.batch_size]]
            loss = sample_loss(params, batch[0])
            for s in batch[1:]:
                loss = loss + sample_loss(params, s)
            loss = loss.scale(1.0 / len(batch))
            loss.backward()
            sgd_step(params.tensors(), lr)
            total += loss.item() * len(batch)
        mean_loss = total / len(order)
        if epoch_losses is not None:
            epoch_losses.append(mean_loss)
        log.info("gcn epoch %d/%d lr=%.4g mean_loss=%.6f", epoch, cfg.epochs, lr, mean_loss)
    return params


def graph_score(
    attn_scorer,
    gcn_params: GcnParams,
    probe_scene: Scene,
    probe: Instance,
    gallery_scene: Scene,
    gallery: Instance,
    k: int = 3,
    seed: int = 0,
    node_feat: str = "whole",
    norm: str = "sym",
) -> float:
    """Expansion -> graph -> GCN probability; falls back to rescaled pair
    similarity for targets with no context at all."""
    ep = expand(probe_scene, probe, gallery_scene, gallery, attn_scorer, k=k, seed=seed)
    if ep.degenerate:
        return (attn_scorer(probe, gallery) + 1.0) / 2.0
    graph = build_graph(ep, node_feat=node_feat, norm=norm)
    _, score = gcn_forward(gcn_params, graph)
    return score


def build_labeled_expansions(
    scenes,
    attn_scorer,
    k: int = 3,
    seed: int = 0,
    neg_ratio: float = 1.0,
    max_positives: int = None,
):
    """Labeled (ExpandedPair, label) training targets.

    Every same-identity cross-scene pair becomes a positive, plus a seeded
    sample of different-identity pairs. Targets with zero context candidates
    are skipped, mirroring the training exclusion rule for single-person
    scenes.
    """
    rng = np.random.default_rng((seed, 0x6C7))
    scene_of = {s.scene_id: s for s in scenes}
    labeled = [i for s in scenes for i in s.instances if i.identity is not None]
    labeled.sort(key=lambda i: i.instance_id)
    by_identity = {}
    for inst in labeled:
        by_identity.setdefault(inst.identity, []).append(inst)

    def make_expansion(a, b):
        ep = expand(scene_of[a.scene_id], a, scene_of[b.scene_id], b, attn_scorer, k=k, seed=seed)
        return None if ep.degenerate else ep

    positive_pairs = []
    for insts in by_identity.values():
        for i in range(len(insts)):
            for j in range(i + 1, len(insts)):
                if insts[i].scene_id != insts[j].scene_id:
                    positive_pairs.append((insts[i], insts[j]))
    if max_positives is not None and len(positive_pairs) > max_positives:
        idx = rng.choice(len(positive_pairs), size=max_positives, replace=False)
        positive_pairs = [positive_pairs[i] for i in sorted(idx)]

    expansions = []
    for a, b in positive_pairs:
        ep = make_expansion(a, b)
        if ep is not None:
            expansions.append((ep, 1))

    n_pos = len(expansions)
    target_neg = int(round(neg_ratio * n_pos))
    n = len(labeled)
    n_neg = 0

    # hard negatives: wrong person drawn from a scene that holds a true match,
    # so context support alone cannot separate the classes
    for a, b in positive_pairs:
        if n_neg >= target_neg // 2:
            break
        decoys = [
            c
            for c in scene_of[b.scene_id].instances
            if c.identity is not None and c.identity != a.identity
        ]
        if not decoys:
            continue
        c = decoys[int(rng.integers(len(decoys)))]
        ep = make_expansion(a, c)
        if ep is not None:
            expansions.append((ep, 0))
            n_neg += 1

    attempts = 0
    while n_neg < target_neg and attempts < 100 * max(target_neg, 1):
        attempts += 1
        i, j = rng.integers(0, n, size=2)
        a, b = labeled[i], labeled[j]
        if a.identity == b.identity or a.scene_id == b.scene_id:
            continue
        ep = make_expansion(a, b)
        if ep is not None:
            expansions.append((ep, 0))
            n_neg += 1
    if n_pos == 0 or n_neg == 0:
        raise DataError(
            f"graph training set needs both labels; built {n_pos} positive and {n_neg} negative"
        )
    log.info("graph targets: %d positive, %d negative (K=%d)", n_pos, n_neg, k)
    return expansions


def build_graph_samples(
    scenes,
    attn_scorer,
    k: int = 3,
    seed: int = 0,
    neg_ratio: float = 1.0,
    node_feat: str = "whole",
    norm: str = "sym",
    max_positives: int = None,
):
    """Graph training set built from the labeled expansions."""
    expansions = build_labeled_expansions(
        scenes, attn_scorer, k=k, seed=seed, neg_ratio=neg_ratio, max_positives=max_positives
    )
    return [
        GraphSample(graph=build_graph(ep, node_feat=node_feat, norm=norm), label=label)
        for ep, label in expansions
    ]
