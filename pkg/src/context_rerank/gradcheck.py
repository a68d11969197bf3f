"""Finite-difference verification suites for every differentiable path.

Each suite runs many seeded random configurations at small dimensions and
reports the worst symmetric relative error between analytic gradients and
central differences (h=1e-5). Configurations that place a ReLU input within
1e-3 of its kink are resampled, since central differences are meaningless
across the kink.
"""

from __future__ import annotations

import numpy as np

from .attention import VerificationConfig, init_attention_params, pair_descriptor, pair_loss
from .autodiff import Tensor, max_rel_error, numeric_gradient, relu_kink_distance
from .embeddings import PartEmbedding, R_PARTS
from .graph import ContextGraph, GraphSample, init_gcn_params, normalize_adjacency, sample_loss, star_adjacency

FD_STEP = 1e-5
KINK_MARGIN = 1e-3


def check_gradients(build_loss, leaves, h: float = FD_STEP) -> float:
    """Worst relative error over ``leaves`` for a freshly built loss.

    ``build_loss`` must construct the tape from the leaves' current data on
    every call, so in-place perturbations of leaf data are observed.
    """
    for leaf in leaves:
        leaf.grad = None
    loss = build_loss()
    loss.backward()
    worst = 0.0
    for leaf in leaves:
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy()
        numeric = numeric_gradient(lambda _x: build_loss().item(), leaf.data, h=h)
        worst = max(worst, max_rel_error(analytic, numeric))
        leaf.grad = None
    return worst


def _with_resampling(make_trial, n_trials: int, seed: int) -> float:
    """Run trials, drawing a fresh sub-seed whenever one lands on a kink."""
    worst = 0.0
    draw = 0
    done = 0
    while done < n_trials:
        build_loss, leaves = make_trial(np.random.default_rng((seed, draw)))
        draw += 1
        if relu_kink_distance(build_loss()) < KINK_MARGIN:
            continue
        worst = max(worst, check_gradients(build_loss, leaves))
        done += 1
    return worst


def _random_embedding(rng, d) -> PartEmbedding:
    parts = rng.uniform(-1.0, 1.0, size=(R_PARTS, d))
    parts /= np.linalg.norm(parts, axis=1, keepdims=True)
    return PartEmbedding.from_array(parts)


def gradcheck_matmul(n_trials: int = 100, seed: int = 11) -> float:
    worst = 0.0
    for t in range(n_trials):
        rng = np.random.default_rng((seed, t))
        m, k, n = rng.integers(1, 5, size=3)
        a = Tensor(rng.uniform(-1, 1, (m, k)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, (k, n)), requires_grad=True)
        worst = max(worst, check_gradients(lambda: (a @ b).sum(), [a, b]))
    return worst


def gradcheck_elementwise(n_trials: int = 100, seed: int = 12) -> float:
    def make_trial(rng):
        n = int(rng.integers(1, 6))
        x = Tensor(rng.uniform(-1, 1, (n,)), requires_grad=True)
        y = Tensor(rng.uniform(-1, 1, (n,)), requires_grad=True)
        alpha = float(rng.uniform(-2, 2))

        def build():
            return (x.relu() * y + (x - y).scale(alpha)).sum()

        return build, [x, y]

    return _with_resampling(make_trial, n_trials, seed)


def gradcheck_softmax(n_trials: int = 100, seed: int = 13) -> float:
    worst = 0.0
    for t in range(n_trials):
        rng = np.random.default_rng((seed, t))
        n = int(rng.integers(1, 7))
        x = Tensor(rng.uniform(-1, 1, (n,)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (n,)))
        worst = max(worst, check_gradients(lambda: (x.softmax() * w).sum(), [x]))
    return worst


def gradcheck_cross_entropy(n_trials: int = 100, seed: int = 14) -> float:
    worst = 0.0
    for t in range(n_trials):
        rng = np.random.default_rng((seed, t))
        x = Tensor(rng.uniform(-1, 1, (2,)), requires_grad=True)
        label = int(rng.integers(0, 2))
        worst = max(worst, check_gradients(lambda: x.cross_entropy_binary(label), [x]))
    return worst


def gradcheck_attention(n_trials: int = 100, seed: int = 15) -> float:
    """End-to-end: descriptor -> MLP -> softmax weights -> fused similarity
    -> verification loss, gradients w.r.t. all head parameters and the input."""

    def make_trial(rng):
        d = int(rng.integers(2, 6))
        hidden = int(rng.integers(3, 9))
        params = init_attention_params(rng, d, hidden)
        a = _random_embedding(rng, d)
        b = _random_embedding(rng, d)
        y = 1 if rng.random() < 0.5 else -1
        vcfg = VerificationConfig(margin=float(rng.uniform(0.0, 0.5)))
        x = Tensor(pair_descriptor(a, b), requires_grad=True)
        leaves = params.tensors() + [x]

        def build():
            return pair_loss(params, a, b, y, vcfg, descriptor=x)

        return build, leaves

    return _with_resampling(make_trial, n_trials, seed)


def gradcheck_gcn(n_trials: int = 100, seed: int = 16) -> float:
    """Full graph pipeline: propagation, readout, classifier, cross-entropy;
    gradients w.r.t. all parameters and the node feature matrix."""

    def make_trial(rng):
        k = int(rng.integers(1, 4))
        f = 2 * int(rng.integers(2, 5))
        n = k + 1
        adjacency = star_adjacency(n)
        graph = ContextGraph(
            x=rng.uniform(-1, 1, (n, f)),
            adjacency=adjacency,
            norm_adjacency=normalize_adjacency(adjacency),
        )
        params = init_gcn_params(rng, n, f, readout_dim=int(rng.integers(3, 7)))
        sample = GraphSample(graph=graph, label=int(rng.integers(0, 2)))
        x = Tensor(graph.x, requires_grad=True)
        leaves = params.tensors() + [x]

        def build():
            return sample_loss(params, sample, x=x)

        return build, leaves

    return _with_resampling(make_trial, n_trials, seed)


def run_all(n_trials: int = 100, seed: int = 0) -> dict:
    """Every suite; returns {component: max relative error}."""
    return {
        "matmul": gradcheck_matmul(n_trials, seed + 11),
        "elementwise": gradcheck_elementwise(n_trials, seed + 12),
        "softmax": gradcheck_softmax(n_trials, seed + 13),
        "cross_entropy": gradcheck_cross_entropy(n_trials, seed + 14),
        "attention_end_to_end": gradcheck_attention(n_trials, seed + 15),
        "gcn_pipeline": gradcheck_gcn(n_trials, seed + 16),
    }
