"""Householder-parameterized orthogonal transform (Aligner / Restorer).

``Q = H_1 H_2 ... H_K`` with ``H_k = I - 2 v_k v_k^T / |v_k|^2``. Raw vectors
are stored unnormalized. Rows are signals: ``align(x) = x Q^T`` applies
``H_K`` first, ``restore(y) = y Q`` applies ``H_1`` first. Reflections whose
raw vector has norm below ``ZERO_NORM`` are the identity and get zero
gradient.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .rng import CounterRNG

ZERO_NORM = 1e-12


@dataclass
class HouseholderStack:
    vectors: np.ndarray  # (K, T), raw

    def __post_init__(self) -> None:
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise ValidationError("vectors must have shape (K, T)")
        if not np.all(np.isfinite(v)):
            raise ValidationError("Householder vectors must be finite")
        self.vectors = v

    @property
    def K(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def T(self) -> int:
        return int(self.vectors.shape[1])

    @classmethod
    def identity(cls, T: int) -> "HouseholderStack":
        return cls(np.zeros((0, T)))

    @classmethod
    def initialize(cls, K: int, T: int, seed: int = 0, mode: str = "paired",
                   tag: str = "harmonizer") -> "HouseholderStack":
        """``paired`` gives Q = I with independent trainable copies; ``random`` a random Q."""
        if K < 0 or T < 1:
            raise ValidationError("need K >= 0 and T >= 1")
        rng = CounterRNG(seed, tag)
        if mode == "random":
            v = rng.normal(K * T).reshape(K, T)
        elif mode == "paired":
            if K % 2:
                raise ValidationError("paired initialization needs an even K")
            half = rng.normal((K // 2) * T).reshape(K // 2, T)
            v = np.repeat(half, 2, axis=0)
        else:
            raise ValidationError(f"unknown init mode {mode!r}")
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        return cls(v / np.where(norms > 0, norms, 1.0))

    def unit(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        norms = np.linalg.norm(self.vectors, axis=1)
        active = norms >= ZERO_NORM
        vhat = np.zeros_like(self.vectors)
        vhat[active] = self.vectors[active] / norms[active, None]
        return vhat, norms, active

    def to_json(self) -> dict:
        return {"T": self.T, "K": self.K, "vectors": self.vectors.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "HouseholderStack":
        vectors = np.asarray(obj["vectors"], dtype=np.float64).reshape(int(obj["K"]), int(obj["T"]))
        return cls(vectors)

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def build_q(stack: HouseholderStack) -> np.ndarray:
    """Dense ``Q = H_1 ... H_K`` (diagnostics and inference fast path)."""
    return restore(stack, np.eye(stack.T))


def _check(stack: HouseholderStack, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != stack.T:
        raise ValidationError(f"length {x.shape[-1]} does not match transform dimension {stack.T}")
    return x


def _reflect(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return u - 2.0 * np.multiply.outer(u @ v, v)


def _order(stack: HouseholderStack, inverse: bool) -> range:
    return range(stack.K) if inverse else range(stack.K - 1, -1, -1)


def _apply(stack: HouseholderStack, x: np.ndarray, inverse: bool) -> np.ndarray:
    x = _check(stack, x)
    vhat, _, active = stack.unit()
    u = x.copy()
    for k in _order(stack, inverse):
        if active[k]:
            u = _reflect(u, vhat[k])
    return u


def align(stack: HouseholderStack, x) -> np.ndarray:
    """``x Q^T`` on the last axis via K rank-1 updates."""
    return _apply(stack, x, inverse=False)


def restore(stack: HouseholderStack, y) -> np.ndarray:
    """``y Q`` on the last axis; inverse of :func:`align`."""
    return _apply(stack, y, inverse=True)


def _backward(stack: HouseholderStack, x, upstream, inverse: bool):
    x = _check(stack, x)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != x.shape:
        raise ValidationError(f"upstream shape {g.shape} != input shape {x.shape}")
    vhat, norms, active = stack.unit()
    order = list(_order(stack, inverse))
    inputs = {}
    u = x.copy()
    for k in order:
        if active[k]:
            inputs[k] = u
            u = _reflect(u, vhat[k])
    grad_v = np.zeros_like(stack.vectors)
    flat_g = g.reshape(-1, stack.T)
    for k in reversed(order):
        if not active[k]:
            continue
        v = vhat[k]
        uk = inputs[k].reshape(-1, stack.T)
        uv = uk @ v
        gv = flat_g @ v
        d_vhat = -2.0 * (uv @ flat_g + gv @ uk)
        grad_v[k] = (d_vhat - v * (v @ d_vhat)) / norms[k]
        flat_g = flat_g - 2.0 * np.outer(gv, v)
    return grad_v, flat_g.reshape(g.shape)


def align_backward(stack: HouseholderStack, x, upstream):
    """Gradients of ``<upstream, align(stack, x)>`` w.r.t. raw vectors and ``x``.

    Batched inputs sum their vector gradients over the batch.
    """
    return _backward(stack, x, upstream, inverse=False)


def restore_backward(stack: HouseholderStack, y, upstream):
    return _backward(stack, y, upstream, inverse=True)
