"""Linear synapse kernels shared by the ANN and SNN code paths.

Dense layers store weights as ``(out, in)`` and flatten their input.
Conv layers store ``(c_out, c_in, k, k)`` and take ``(B, C, H, W)`` input.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_output_hw(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv kernel {k} does not fit input {h}x{w}")
    return ho, wo


def _windows(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, k, k)


def conv2d(x: np.ndarray, weight: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    k = weight.shape[-1]
    return np.einsum("bchwij,ocij->bohw", _windows(x, k, stride, padding), weight, optimize=True)


def conv2d_weight_grad(
    grad_out: np.ndarray, x: np.ndarray, k: int, stride: int = 1, padding: int = 0
) -> np.ndarray:
    return np.einsum("bohw,bchwij->ocij", grad_out, _windows(x, k, stride, padding), optimize=True)


def conv2d_input_grad(
    grad_out: np.ndarray, weight: np.ndarray, in_hw: tuple[int, int], stride: int = 1, padding: int = 0
) -> np.ndarray:
    b, _, ho, wo = grad_out.shape
    c_in, k = weight.shape[1], weight.shape[-1]
    h, w = in_hw
    out = np.zeros((b, c_in, h + 2 * padding, w + 2 * padding), dtype=np.result_type(grad_out, weight))
    for i in range(k):
        for j in range(k):
            contrib = np.einsum("bohw,oc->bchw", grad_out, weight[:, :, i, j])
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def dense(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1) @ weight.T


def channel_view(param: np.ndarray, ndim: int) -> np.ndarray:
    """Reshape a per-channel vector to broadcast against a (B, C, ...) tensor."""
    return param.reshape((1, -1) + (1,) * (ndim - 2))


def reduce_channel(x: np.ndarray) -> np.ndarray:
    """Sum every axis except the channel axis 1."""
    axes = (0,) + tuple(range(2, x.ndim))
    return x.sum(axis=axes)
