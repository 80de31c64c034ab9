"""Ternary (1.58-bit) weight quantization with straight-through gradients.

Weights keep a full-precision latent copy that the optimizer updates; every
forward pass re-derives the scaled ternary matrix from it.  Activations entering
a quantized projection pass through 8-bit per-row absmax fake quantization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, OpCounter, Tensor, _make, matmul

EPS = 1e-8
MODES = ("ternary", "binary")


@dataclass
class QuantizedLinear:
    W_latent: Tensor
    gamma: float
    W_quant: np.ndarray
    mode: str = "ternary"

    @property
    def effective(self) -> np.ndarray:
        return self.gamma * self.W_quant


def quantize_weights(W: Tensor, mode: str = "ternary") -> QuantizedLinear:
    """Absmean scaling; ternary rounds W/gamma into {-1, 0, 1}, binary takes its sign."""
    if mode not in MODES:
        raise ValueError(f"unknown quantization mode {mode!r}")
    gamma = float(np.abs(W.data).mean())
    if mode == "ternary":
        wq = np.round(np.clip(W.data / (gamma + EPS), -1.0, 1.0))
    else:
        wq = np.where(W.data >= 0, 1.0, -1.0)
    return QuantizedLinear(W, gamma, wq, mode)


def quantize_activations(x: np.ndarray, bits: int = 8) -> np.ndarray:
    """Per-row absmax fake quantization to signed ``bits``-bit levels."""
    qmax = 2 ** (bits - 1) - 1
    absmax = np.abs(x).max(axis=-1, keepdims=True)
    s = qmax / np.maximum(absmax, 1e-5)
    return np.clip(np.round(x * s), -qmax - 1, qmax) / s


def ste_grads(x_q: np.ndarray, q: QuantizedLinear, upstream: np.ndarray):
    """Straight-through gradients for ``out = x_q @ (gamma * W_quant)``.

    The latent weight receives the gradient of ``x_q @ W_latent``, zeroed where
    ``|W / gamma| > 1`` (outside the clip range).  The input gradient passes
    through the effective weight and the activation quantizer as identity.
    """
    inside = np.abs(q.W_latent.data) <= q.gamma + EPS
    grad_w = (x_q.T @ upstream) * inside
    grad_x = upstream @ q.effective.T
    return grad_x, grad_w


def quantized_forward(x: Tensor, W: Tensor, counter: OpCounter | None = None,
                      mode: str = "ternary") -> Tensor:
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"cannot multiply shapes {x.shape} and {W.shape}")
    q = quantize_weights(W, mode)
    x_q = quantize_activations(x.data)
    out = x_q @ q.effective
    if counter is not None:
        counter.record_matmul(x.shape[0], x.shape[1], W.shape[1])

    def backward(g):
        return ste_grads(x_q, q, g)

    return _make(out, (x, W), backward)


def linear(x: Tensor, W: Tensor, counter: OpCounter | None = None, quant: str | None = None) -> Tensor:
    """Projection ``x @ W``; quantized when ``quant`` names a mode, plain otherwise."""
    if quant is None:
        return matmul(x, W, counter)
    return quantized_forward(x, W, counter, quant)
