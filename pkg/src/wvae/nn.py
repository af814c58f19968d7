"""Minimal dense-network substrate: forward/backward passes, ADAM, parameter packing.

All arithmetic is 64-bit. A model's parameters live in one flat float64
vector; layers hold views into it, so the optimizer updates everything with a
handful of vectorized operations. Only the fixed feed-forward topology the
clustering model needs is supported.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg.blas import daxpy as _daxpy, dscal as _dscal

DEFAULT_LEAKY_SLOPE = 0.01

_MAGIC = b"WVAE"
_BLOB_VERSION = 1


@dataclass
class DenseLayer:
    """Affine layer y = W x + b with weights of shape (out, in)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("weights must be 2-D and bias 1-D")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ValueError(
                f"bias length {self.bias.shape[0]} does not match "
                f"output dim {self.weights.shape[0]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input length {x.shape[-1]}, expected {self.in_dim}")
        return x @ self.weights.T + self.bias

    def backward(self, x: np.ndarray, dout: np.ndarray):
        """Gradients for a recorded forward pass: returns (dx, dweights, dbias)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        dout = np.atleast_2d(np.asarray(dout, dtype=float))
        dw = dout.T @ x
        db = dout.sum(axis=0)
        dx = dout @ self.weights
        return dx, dw, db


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)


def leaky_relu(x, slope: float = DEFAULT_LEAKY_SLOPE):
    if not 0.0 < slope < 1.0:
        raise ValueError("slope must lie in (0, 1)")
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0.0, x, slope * x)


def leaky_relu_grad(x, slope: float = DEFAULT_LEAKY_SLOPE):
    """Derivative of leaky_relu evaluated at the pre-activation x."""
    if not 0.0 < slope < 1.0:
        raise ValueError("slope must lie in (0, 1)")
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0.0, 1.0, slope)


def stable_softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, computed after subtracting the row max.

    -inf logits are allowed (they map to probability zero); NaN input and
    all -inf rows are rejected.
    """
    logits = np.asarray(logits, dtype=float)
    if np.any(np.isnan(logits)):
        raise ValueError("softmax input contains NaN")
    top = np.max(logits, axis=-1, keepdims=True)
    if np.any(np.isneginf(top)):
        raise ValueError("softmax input row is entirely -inf")
    shifted = logits - top
    # -inf - -inf would be NaN, but top is finite here, so shifted is well defined.
    out = np.exp(shifted)
    out /= out.sum(axis=-1, keepdims=True)
    return out


def glorot_uniform(shape, rng: np.random.Generator) -> np.ndarray:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out)) for a (out, in) weight."""
    out_dim, in_dim = shape
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class AdamState:
    """Bias-corrected ADAM moments for one flat parameter vector."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    t: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    _scratch: np.ndarray | None = field(default=None, repr=False, compare=False)

    @classmethod
    def for_params(cls, params: np.ndarray, learning_rate: float = 1e-3, **kw) -> "AdamState":
        z = np.zeros_like(np.asarray(params, dtype=float))
        return cls(first_moment=z.copy(), second_moment=z.copy(),
                   learning_rate=learning_rate, **kw)


def _fast_path_ok(*arrays) -> bool:
    return all(
        a.dtype == np.float64 and a.flags.c_contiguous for a in arrays
    )


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray):
    """One bias-corrected ADAM update.

    `params` and the moment buffers are updated in place (and returned), which
    keeps the training loop allocation-light; pass copies to keep the originals.
    The update folds the bias corrections into the step scale:

        params -= lr/(1-b1^t) * m / (sqrt(v) + eps*sqrt(1-b2^t)) * sqrt(1-b2^t)

    which is algebraically the standard corrected form.
    """
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ValueError("params, grads and moment buffers must share a shape")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    m, v = state.first_moment, state.second_moment
    bc1 = 1.0 - b1**state.t
    sq2 = np.sqrt(1.0 - b2**state.t)
    if _fast_path_ok(params, grads, m, v):
        if state._scratch is None or state._scratch.shape != m.shape:
            state._scratch = np.empty_like(m)
        s = state._scratch
        pf, gf, mf, vf, sf = (a.ravel() for a in (params, grads, m, v, s))
        _dscal(b1, mf)
        _daxpy(gf, mf, a=1.0 - b1)
        _dscal(b2, vf)
        np.multiply(gf, gf, out=sf)
        _daxpy(sf, vf, a=1.0 - b2)
        np.sqrt(vf, out=sf)
        sf += state.epsilon * sq2
        np.divide(mf, sf, out=sf)
        _daxpy(sf, pf, a=-(state.learning_rate * sq2) / bc1)
    else:
        np.multiply(m, b1, out=m)
        m += (1.0 - b1) * grads
        np.multiply(v, b2, out=v)
        v += (1.0 - b2) * np.square(grads)
        denom = np.sqrt(v) + state.epsilon * sq2
        params -= (state.learning_rate * sq2 / bc1) * m / denom
    return params, state


class ParamLayout:
    """Maps named array shapes onto segments of one flat parameter vector."""

    def __init__(self, shapes: list[tuple[str, tuple[int, ...]]]):
        self.names = [name for name, _ in shapes]
        self._specs: dict[str, tuple[slice, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in shapes:
            n = int(np.prod(shape)) if shape else 1
            self._specs[name] = (slice(offset, offset + n), tuple(shape))
            offset += n
        self.size = offset

    def shape(self, name: str) -> tuple[int, ...]:
        return self._specs[name][1]

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        sl, shape = self._specs[name]
        return flat[sl].reshape(shape)

    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        return {name: self.view(flat, name) for name in self.names}

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size, dtype=float)


@dataclass
class Stack:
    """Dense layers with a leaky-ReLU after each one (the probing module)."""

    layers: list[DenseLayer]
    slope: float = DEFAULT_LEAKY_SLOPE

    def forward(self, x: np.ndarray):
        """Returns (output, tape); the tape records inputs and pre-activations."""
        tape = []
        h = np.asarray(x, dtype=float)
        for layer in self.layers:
            pre = layer.forward(h)
            tape.append((h, pre))
            h = leaky_relu(pre, self.slope)
        return h, tape

    def backward(self, tape, dout: np.ndarray):
        """Reverse-mode gradients; returns (dinput, [(dW, db), ...] per layer)."""
        if len(tape) != len(self.layers):
            raise ValueError("tape does not match the layer stack")
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.layers)
        d = np.asarray(dout, dtype=float)
        for idx in range(len(self.layers) - 1, -1, -1):
            x, pre = tape[idx]
            d = d * leaky_relu_grad(pre, self.slope)
            d, dw, db = self.layers[idx].backward(x, d)
            grads[idx] = (dw, db)
        return d, grads


def save_blob(path, z_card: int, n_views: int, arrays: list[np.ndarray]) -> None:
    """Write a versioned little-endian parameter blob.

    Header: magic, version, |Z|, view count, array count, then each array's
    shape; payload: float64 data in declaration order.
    """
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIII", _BLOB_VERSION, z_card, n_views, len(arrays)))
        for arr in arrays:
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_blob(path):
    """Read a blob written by save_blob; returns (z_card, n_views, arrays)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a parameter blob (bad magic {magic!r})")
        version, z_card, n_views, n_arrays = struct.unpack("<IIII", fh.read(16))
        if version != _BLOB_VERSION:
            raise ValueError(f"unsupported blob version {version}")
        shapes = []
        for _ in range(n_arrays):
            (ndim,) = struct.unpack("<I", fh.read(4))
            shapes.append(struct.unpack(f"<{ndim}I", fh.read(4 * ndim)))
        arrays = []
        for shape in shapes:
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(float)
            arrays.append(data.reshape(shape))
        return z_card, n_views, arrays
