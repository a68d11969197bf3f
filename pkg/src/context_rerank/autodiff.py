"""Tiny reverse-mode autodiff over dense float64 arrays, plus SGD.

The computation tape is rebuilt on every forward pass and torn down by
``backward``; there is no graph caching. Everything is 64-bit so analytic
gradients can be validated against central finite differences tightly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError, UsageError

__all__ = [
    "Tensor",
    "SgdConfig",
    "glorot_uniform",
    "sgd_step",
    "save_checkpoint",
    "load_checkpoint",
    "numeric_gradient",
    "max_rel_error",
    "relu_kink_distance",
]


class Tensor:
    """A node in the computation tape.

    ``data`` is always a float64 ndarray. Leaf tensors created with
    ``requires_grad=True`` receive a populated ``grad`` after ``backward()``
    on any scalar loss reachable from them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_kink")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._kink = None  # distance to nearest ReLU kink, set by relu()

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph construction helpers -------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        needs = any(p.requires_grad for p in parents)
        t = Tensor(data, requires_grad=needs)
        if needs:
            t._parents = tuple(parents)
            t._backward = backward
        return t

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- operations -----------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
        out = a @ b

        def backward(g):
            if self.requires_grad:
                self._accumulate(g @ b.T)
            if other.requires_grad:
                other._accumulate(a.T @ g)

        return Tensor._result(out, (self, other), backward)

    def __matmul__(self, other):
        return self.matmul(other)

    def _elementwise_check(self, other):
        if self.data.shape != other.data.shape:
            raise DimensionError(
                f"elementwise op: shape mismatch {self.data.shape} vs {other.data.shape}"
            )

    def add(self, other: "Tensor") -> "Tensor":
        self._elementwise_check(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g)
            if other.requires_grad:
                other._accumulate(g)

        return Tensor._result(self.data + other.data, (self, other), backward)

    def sub(self, other: "Tensor") -> "Tensor":
        self._elementwise_check(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g)
            if other.requires_grad:
                other._accumulate(-g)

        return Tensor._result(self.data - other.data, (self, other), backward)

    def mul(self, other: "Tensor") -> "Tensor":
        self._elementwise_check(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * other.data)
            if other.requires_grad:
                other._accumulate(g * self.data)

        return Tensor._result(self.data * other.data, (self, other), backward)

    __add__ = add
    __sub__ = sub
    __mul__ = mul

    def affine(self, alpha: float, beta: float = 0.0) -> "Tensor":
        """Elementwise alpha * x + beta with python scalars."""

        def backward(g):
            if self.requires_grad:
                self._accumulate(alpha * g)

        return Tensor._result(alpha * self.data + beta, (self,), backward)

    def scale(self, alpha: float) -> "Tensor":
        return self.affine(alpha)

    def relu(self) -> "Tensor":
        mask = self.data > 0  # adjoint at exactly 0 is 0 by convention

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * mask)

        out = Tensor._result(np.where(mask, self.data, 0.0), (self,), backward)
        out._kink = float(np.min(np.abs(self.data))) if self.data.size else np.inf
        return out

    def softmax(self) -> "Tensor":
        x = self.data
        if x.size == 0:
            raise DimensionError("softmax: empty input")
        if not np.all(np.isfinite(x)):
            raise NumericError("softmax: non-finite input")
        shifted = x - np.max(x)
        e = np.exp(shifted)
        s = e / np.sum(e)

        def backward(g):
            if self.requires_grad:
                self._accumulate(s * (g - np.sum(s * g)))

        return Tensor._result(s, (self,), backward)

    def cross_entropy_binary(self, label: int) -> "Tensor":
        """Negative log softmax probability of ``label`` for a 2-logit tensor."""
        if label not in (0, 1):
            raise UsageError(f"cross_entropy_binary: label must be 0 or 1, got {label!r}")
        x = self.data.reshape(-1)
        if x.size != 2:
            raise DimensionError(f"cross_entropy_binary: need 2 logits, got shape {self.data.shape}")
        if not np.all(np.isfinite(x)):
            raise NumericError("cross_entropy_binary: non-finite logits")
        m = np.max(x)
        lse = m + np.log(np.sum(np.exp(x - m)))
        loss = lse - x[label]
        probs = np.exp(x - lse)

        def backward(g):
            if self.requires_grad:
                grad = probs.copy()
                grad[label] -= 1.0
                self._accumulate((g * grad).reshape(self.data.shape))

        return Tensor._result(loss, (self,), backward)

    def sum(self) -> "Tensor":
        def backward(g):
            if self.requires_grad:
                self._accumulate(np.full_like(self.data, float(g)))

        return Tensor._result(self.data.sum(), (self,), backward)

    def reshape(self, *shape) -> "Tensor":
        old = self.data.shape

        def backward(g):
            if self.requires_grad:
                self._accumulate(np.asarray(g).reshape(old))

        return Tensor._result(self.data.reshape(*shape), (self,), backward)

    def concat(self, other: "Tensor") -> "Tensor":
        """Concatenate two column vectors / 1-D tensors along axis 0."""
        n = self.data.shape[0]

        def backward(g):
            if self.requires_grad:
                self._accumulate(g[:n])
            if other.requires_grad:
                other._accumulate(g[n:])

        return Tensor._result(
            np.concatenate([self.data, other.data], axis=0), (self, other), backward
        )

    def item(self) -> float:
        return float(self.data)

    # -- backward -------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise UsageError("backward() requires a scalar loss")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)


def relu_kink_distance(loss: Tensor) -> float:
    """Smallest |pre-activation| over every ReLU on the tape of ``loss``.

    Finite-difference checks are unreliable when a ReLU input sits within h
    of zero; callers resample such configurations.
    """
    best = np.inf
    seen = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._kink is not None:
            best = min(best, node._kink)
        stack.extend(node._parents)
    return best


# -- optimizer ----------------------------------------------------------


@dataclass(frozen=True)
class SgdConfig:
    """Plain SGD with a stepwise learning-rate schedule.

    ``schedule`` holds (epoch, multiplier) pairs; the multiplier applies to
    every epoch strictly after the listed one. Epochs are 1-based.
    """

    learning_rate: float = 0.1
    schedule: tuple = ((10, 0.5),)
    epochs: int = 20
    seed: int = 42
    batch_size: int = 32

    def __post_init__(self):
        from .errors import ConfigError

        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        marks = [e for e, _ in self.schedule]
        if marks != sorted(set(marks)):
            raise ConfigError(f"schedule epochs must be strictly increasing, got {marks}")

    def lr_at_epoch(self, epoch: int) -> float:
        lr = self.learning_rate
        for mark, mult in self.schedule:
            if epoch > mark:
                lr *= mult
        return lr


def sgd_step(params, lr: float):
    """p <- p - lr * grad for every parameter, then zero the grads."""
    for p in params:
        if p.grad is None:
            raise UsageError("sgd_step: parameter has no gradient (call backward first)")
        p.data -= lr * p.grad
        p.grad = None


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_out, fan_in)
    return rng.uniform(-limit, limit, size=shape)


# -- checkpoint format --------------------------------------------------

_CKPT_MAGIC = b"CRCKPT01"
_CKPT_VERSION = 1


def save_checkpoint(path, entries: dict):
    """Write named float64 arrays to ``path``; round-trips bit-exactly.

    Layout: magic, u32 version, u32 entry count, then per entry a u32
    name length + utf-8 name, u32 ndim, u32 dims, raw little-endian
    float64 values in row-major order.
    """
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(entries)))
        for name, arr in entries.items():
            arr = np.asarray(arr, dtype="<f8", order="C")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    from .errors import DataError

    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    off = len(_CKPT_MAGIC)
    version, count = struct.unpack_from("<II", blob, off)
    off += 8
    if version != _CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    entries = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        entries[name] = arr.astype(np.float64)
    return entries


# -- finite-difference oracle -------------------------------------------


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar-valued ``f`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Worst symmetric relative disagreement between two gradients.

    ``floor`` keeps near-zero coordinates (where central differences bottom
    out at round-off) from dominating the ratio.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.shape != n.shape:
        raise DimensionError(f"gradient shape mismatch {a.shape} vs {n.shape}")
    diff = np.abs(a - n)
    rel = diff / (np.abs(a) + np.abs(n) + floor)
    return float(rel.max()) if rel.size else 0.0
