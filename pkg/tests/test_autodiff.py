import numpy as np
import pytest

from context_rerank.autodiff import (
    SgdConfig,
    Tensor,
    load_checkpoint,
    max_rel_error,
    numeric_gradient,
    save_checkpoint,
    sgd_step,
)
from context_rerank.errors import ConfigError, DimensionError, NumericError, UsageError


def test_matmul_identity():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    eye = Tensor(np.eye(2))
    assert np.array_equal((eye @ m).data, m.data)


def test_matmul_hand_example():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[0.0], [1.0]])
    assert np.array_equal((a @ b).data, [[2.0], [4.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))


def test_matmul_gradient_is_ones_times_bt():
    rng = np.random.default_rng(7)
    a = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, (4, 2)))
    (a @ b).sum().backward()
    assert np.allclose(a.grad, np.ones((3, 2)) @ b.data.T)
    numeric = numeric_gradient(lambda x: float((x @ b.data).sum()), a.data.copy())
    assert max_rel_error(a.grad, numeric) < 1e-6


def test_relu_values_and_subgradient_at_zero():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    y = x.relu()
    assert np.array_equal(y.data, [0.0, 0.0, 2.0])
    y.sum().backward()
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])


def test_elementwise_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    xv = rng.uniform(0.1, 1, 5)
    yv = rng.uniform(0.1, 1, 5)
    x = Tensor(xv, requires_grad=True)
    y = Tensor(yv, requires_grad=True)
    ((x + y) * x - y.scale(0.5)).sum().backward()
    num_x = numeric_gradient(lambda v: float(((v + yv) * v - 0.5 * yv).sum()), xv.copy())
    assert max_rel_error(x.grad, num_x) < 1e-6


def test_softmax_uniform_for_equal_inputs():
    s = Tensor([3.3, 3.3, 3.3, 3.3]).softmax()
    assert np.allclose(s.data, 0.25, atol=1e-15)


def test_softmax_closed_form():
    s = Tensor([np.log(1.0), np.log(3.0)]).softmax()
    assert np.allclose(s.data, [0.25, 0.75])


def test_softmax_sums_to_one_and_rejects_nan():
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = Tensor(rng.uniform(-50, 50, 6)).softmax()
        assert abs(s.data.sum() - 1.0) < 1e-12
    with pytest.raises(NumericError):
        Tensor([np.nan, 0.0]).softmax()


def test_softmax_jacobian_matches_finite_differences():
    rng = np.random.default_rng(5)
    xv = rng.uniform(-1, 1, 4)
    for j in range(4):
        x = Tensor(xv, requires_grad=True)
        pick = np.zeros(4)
        pick[j] = 1.0
        (x.softmax() * Tensor(pick)).sum().backward()

        def f(v):
            e = np.exp(v - v.max())
            return float((e / e.sum())[j])

        assert max_rel_error(x.grad, numeric_gradient(f, xv.copy())) < 1e-6


def test_cross_entropy_symmetric_logits():
    loss = Tensor([0.0, 0.0]).cross_entropy_binary(1)
    assert abs(loss.item() - np.log(2.0)) < 1e-12


def test_cross_entropy_confident_logit():
    # -log(sigmoid(20)) evaluated in closed form
    expected = float(np.log1p(np.exp(-20.0)))
    loss = Tensor([0.0, 20.0]).cross_entropy_binary(1)
    assert abs(loss.item() - expected) < 1e-12
    assert abs(loss.item() - 2.061e-9) < 1e-11


def test_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    for label in (0, 1):
        xv = rng.uniform(-1, 1, 2)
        x = Tensor(xv, requires_grad=True)
        x.cross_entropy_binary(label).backward()

        def f(v):
            m = v.max()
            return float(m + np.log(np.exp(v - m).sum()) - v[label])

        assert max_rel_error(x.grad, numeric_gradient(f, xv.copy())) < 1e-6


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(UsageError):
        Tensor([0.0, 0.0]).cross_entropy_binary(2)


class TestSgd:
    def test_single_step(self):
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.array([2.0])
        sgd_step([p], 0.1)
        assert np.allclose(p.data, [0.8])
        assert p.grad is None

    def test_missing_grad_is_usage_error(self):
        with pytest.raises(UsageError):
            sgd_step([Tensor([1.0], requires_grad=True)], 0.1)

    def test_schedule_halves_after_epoch_10(self):
        cfg = SgdConfig(learning_rate=0.1, schedule=((10, 0.5),), epochs=20)
        assert cfg.lr_at_epoch(10) == pytest.approx(0.1)
        assert cfg.lr_at_epoch(11) == pytest.approx(0.05)
        assert cfg.lr_at_epoch(20) == pytest.approx(0.05)

    def test_two_steps_on_square(self):
        # f(p) = p^2, grad 2p: 1 -> 0.8 -> 0.64
        p = Tensor([1.0], requires_grad=True)
        for expected in (0.8, 0.64):
            (p * p).sum().backward()
            sgd_step([p], 0.1)
            assert np.allclose(p.data, [expected])

    def test_invalid_configs_rejected(self):
        with pytest.raises(ConfigError):
            SgdConfig(learning_rate=0.0)
        with pytest.raises(ConfigError):
            SgdConfig(epochs=0)
        with pytest.raises(ConfigError):
            SgdConfig(schedule=((10, 0.5), (5, 0.5)))


def test_backward_requires_scalar():
    with pytest.raises(UsageError):
        Tensor([1.0, 2.0], requires_grad=True).backward()


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    entries = {
        "a/w": rng.standard_normal((3, 5)),
        "a/b": rng.standard_normal(4),
        "scalar": np.array(3.14159),
    }
    path = tmp_path / "params.ckpt"
    save_checkpoint(path, entries)
    loaded = load_checkpoint(path)
    assert set(loaded) == set(entries)
    for name in entries:
        assert loaded[name].shape == entries[name].shape
        assert loaded[name].tobytes() == entries[name].tobytes()
    # byte-identical on re-save
    path2 = tmp_path / "params2.ckpt"
    save_checkpoint(path2, loaded)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    from context_rerank.errors import DataError

    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(DataError):
        load_checkpoint(path)
