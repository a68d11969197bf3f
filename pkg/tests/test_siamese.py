import numpy as np
import pytest

from context_rerank.autodiff import SgdConfig, load_checkpoint, save_checkpoint
from context_rerank.embeddings import Instance, PartEmbedding, Scene
from context_rerank.errors import DataError
from context_rerank.expansion import expand
from context_rerank.graph import normalize_adjacency, star_adjacency
from context_rerank.siamese import (
    SiameseParams,
    SiameseSample,
    init_siamese_params,
    samples_from_expansions,
    siamese_forward,
    siamese_graph_score,
    siamese_score_batch,
    side_matrices,
    train_siamese,
)


def make_instance(iid, scene_id, identity=None, d=8):
    rng = np.random.default_rng(abs(hash(iid)) % 2**32)
    parts = rng.standard_normal((4, d))
    parts /= np.linalg.norm(parts, axis=1, keepdims=True)
    return Instance(iid, scene_id, (0, 0, 10, 20), identity, PartEmbedding.from_array(parts))


def make_scene(scene_id, ids):
    return Scene(scene_id, "cam0", tuple(make_instance(i, scene_id) for i in ids))


def random_sides(rng, n, f):
    return rng.standard_normal((n, f)), rng.standard_normal((n, f))


class TestForward:
    def test_swapping_sides_swaps_branches_exactly(self):
        # shared weights: the branch readouts are the same function of each side
        rng = np.random.default_rng(0)
        params = init_siamese_params(rng, 4, 6, readout_dim=5)
        xa, xb = random_sides(rng, 4, 6)
        logits_ab, _ = siamese_forward(params, xa, xb)
        logits_ba, _ = siamese_forward(params, xb, xa)
        half = params.cls_w.shape[1] // 2
        w_swapped = np.concatenate(
            [params.cls_w.data[:, half:], params.cls_w.data[:, :half]], axis=1
        )
        # applying the swapped classifier to (a,b) equals the original on (b,a)
        from context_rerank.autodiff import Tensor

        ha = np.maximum(
            params.readout_w.data
            @ _propagate(params, xa).reshape(-1, 1)
            + params.readout_b.data,
            0.0,
        )
        hb = np.maximum(
            params.readout_w.data
            @ _propagate(params, xb).reshape(-1, 1)
            + params.readout_b.data,
            0.0,
        )
        manual_ba = w_swapped @ np.concatenate([ha, hb]) + params.cls_b.data
        assert np.allclose(logits_ba.data, manual_ba, atol=1e-12)
        assert not np.allclose(logits_ab.data, logits_ba.data)

    def test_score_in_unit_interval(self):
        rng = np.random.default_rng(1)
        params = init_siamese_params(rng, 3, 5, readout_dim=4)
        for _ in range(10):
            xa, xb = random_sides(rng, 3, 5)
            _, score = siamese_forward(params, xa, xb)
            assert 0.0 < score < 1.0

    def test_batch_matches_single(self):
        rng = np.random.default_rng(2)
        n, f = 4, 5
        params = init_siamese_params(rng, n, f, readout_dim=6)
        a_hat = normalize_adjacency(star_adjacency(n))
        sides = [random_sides(rng, n, f) for _ in range(5)]
        singles = [siamese_forward(params, xa, xb)[1] for xa, xb in sides]
        batched = siamese_score_batch(
            params, a_hat, np.stack([s[0] for s in sides]), np.stack([s[1] for s in sides])
        )
        assert np.allclose(batched, singles, atol=1e-12)


def _propagate(params, x):
    a_hat = normalize_adjacency(star_adjacency(x.shape[0]))
    z = x
    for w in params.layers:
        z = np.maximum(a_hat @ z @ w.data, 0.0)
    return z


class TestSideMatrices:
    def test_target_first_then_contexts(self):
        ps = make_scene("sp", ["pt", "p1", "p2"])
        gs = make_scene("sg", ["gt", "g1", "g2"])
        scorer = lambda p, g: float(np.dot(p.embedding.parts[0], g.embedding.parts[0]))
        ep = expand(ps, ps.instances[0], gs, gs.instances[0], scorer, k=2, seed=0)
        xa, xb = side_matrices(ep, "whole")
        assert xa.shape == (3, 8)
        assert np.array_equal(xa[0], ps.instances[0].embedding.parts[0])
        assert np.array_equal(xb[0], gs.instances[0].embedding.parts[0])

    def test_samples_from_expansions_labels(self):
        ps = make_scene("sp", ["pt", "p1"])
        gs = make_scene("sg", ["gt", "g1"])
        ep = expand(ps, ps.instances[0], gs, gs.instances[0], lambda p, g: 0.5, k=1, seed=0)
        samples = samples_from_expansions([(ep, 1), (ep, 0)])
        assert [s.label for s in samples] == [1, 0]
        assert samples[0].xa.shape == (2, 8)


class TestTraining:
    def _samples(self, rng, n=3, f=5, count=20):
        out = []
        for i in range(count):
            label = i % 2
            xa, xb = random_sides(rng, n, f)
            if label:
                xb = xa + 0.05 * rng.standard_normal((n, f))
            out.append(SiameseSample(xa=xa, xb=xb, label=label))
        return out

    def test_loss_decreases(self):
        rng = np.random.default_rng(3)
        samples = self._samples(rng)
        losses = []
        train_siamese(
            samples,
            SgdConfig(learning_rate=0.2, epochs=12, schedule=(), seed=0, batch_size=5),
            epoch_losses=losses,
        )
        assert losses[-1] < losses[0]

    def test_rejects_single_label(self):
        rng = np.random.default_rng(4)
        samples = [SiameseSample(*random_sides(rng, 3, 4), label=1) for _ in range(4)]
        with pytest.raises(DataError):
            train_siamese(samples, SgdConfig(epochs=1))


class TestGraphScore:
    def test_degenerate_fallback(self):
        ps = make_scene("sp", ["pt"])
        gs = make_scene("sg", ["gt"])
        rng = np.random.default_rng(5)
        params = init_siamese_params(rng, 2, 8, readout_dim=4)
        score = siamese_graph_score(
            lambda p, g: -0.5, params, ps, ps.instances[0], gs, gs.instances[0], k=1, seed=0
        )
        assert score == pytest.approx(0.25, abs=1e-12)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    params = init_siamese_params(rng, 3, 5, readout_dim=4)
    path = tmp_path / "siam.ckpt"
    save_checkpoint(path, params.to_entries())
    restored = SiameseParams.from_entries(load_checkpoint(path))
    for a, b in zip(params.tensors(), restored.tensors()):
        assert np.array_equal(a.data, b.data)
