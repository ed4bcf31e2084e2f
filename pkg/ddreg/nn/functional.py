"""
Differentiable 3D network operations

Tensors are laid out ``(batch, channels, x, y, z)``.
"""

import itertools
from typing import List, Sequence, Tuple

import numpy as np

from ddreg.errors import ShapeError
from ddreg.nn.tensor import Tensor, check_finite

OFFSETS = tuple(itertools.product(range(3), repeat=3))


def _check_5d(x: Tensor, op: str):
    if x.data.ndim != 5:
        raise ShapeError(f"{op} expects (batch, channels, x, y, z), got {x.shape}")


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """
    3x3x3 convolution, stride 1, zero padding 1

    `kernel` is (out, in, 3, 3, 3) and `bias` is (out,).
    """
    _check_5d(x, "conv3d")
    batch, channels, nx, ny, nz = x.shape
    out_channels = kernel.shape[0]
    if kernel.shape != (out_channels, channels, 3, 3, 3):
        raise ShapeError(f"conv3d kernel {kernel.shape} does not fit {channels} input channels")
    if bias.shape != (out_channels,):
        raise ShapeError(f"conv3d bias {bias.shape} does not fit {out_channels} output channels")

    n = nx * ny * nz
    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))

    def window(b, i, j, k):
        return padded[b, :, i : i + nx, j : j + ny, k : k + nz].reshape(channels, n)

    out = np.empty((batch, out_channels, nx, ny, nz))
    for b in range(batch):
        acc = np.zeros((out_channels, n))
        for i, j, k in OFFSETS:
            acc += kernel.data[:, :, i, j, k] @ window(b, i, j, k)
        out[b] = (acc + bias.data[:, None]).reshape(out_channels, nx, ny, nz)
    check_finite(out, "conv3d")

    def backward(grad: np.ndarray):
        flat = grad.reshape(batch, out_channels, n)
        if bias.requires_grad:
            bias.accumulate(flat.sum(axis=(0, 2)))
        if kernel.requires_grad:
            grad_kernel = np.zeros(kernel.shape)
            for b in range(batch):
                for i, j, k in OFFSETS:
                    grad_kernel[:, :, i, j, k] += flat[b] @ window(b, i, j, k).T
            kernel.accumulate(grad_kernel)
        if x.requires_grad:
            grad_padded = np.zeros(padded.shape)
            for b in range(batch):
                for i, j, k in OFFSETS:
                    grad_padded[b, :, i : i + nx, j : j + ny, k : k + nz] += (
                        kernel.data[:, :, i, j, k].T @ flat[b]
                    ).reshape(channels, nx, ny, nz)
            x.accumulate(grad_padded[:, :, 1:-1, 1:-1, 1:-1])

    return Tensor(out, (x, kernel, bias), backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """Identity for non-negative inputs, `slope` times the input otherwise"""
    positive = x.data >= 0
    out = np.where(positive, x.data, slope * x.data)

    def backward(grad: np.ndarray):
        if x.requires_grad:
            x.accumulate(np.where(positive, grad, slope * grad))

    return Tensor(out, (x,), backward)


def maxpool3d(x: Tensor) -> Tuple[Tensor, np.ndarray]:
    """
    2x2x2 max pooling with stride 2

    Returns the pooled tensor and the position (0..7) of the maximum in each
    window; ties go to the first position in x-major order.
    """
    _check_5d(x, "maxpool3d")
    batch, channels, nx, ny, nz = x.shape
    if nx % 2 or ny % 2 or nz % 2:
        raise ShapeError(f"maxpool3d needs even spatial dimensions, got {(nx, ny, nz)}")
    blocks = x.data.reshape(batch, channels, nx // 2, 2, ny // 2, 2, nz // 2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(batch, channels, nx // 2, ny // 2, nz // 2, 8)
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]

    def backward(grad: np.ndarray):
        if not x.requires_grad:
            return
        scattered = np.zeros(blocks.shape)
        np.put_along_axis(scattered, argmax[..., None], grad[..., None], axis=-1)
        scattered = scattered.reshape(batch, channels, nx // 2, ny // 2, nz // 2, 2, 2, 2)
        x.accumulate(scattered.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(x.shape))

    return Tensor(out, (x,), backward), argmax


def upsample_nn(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by 2 along each spatial axis"""
    _check_5d(x, "upsample_nn")
    out = x.data
    for axis in (2, 3, 4):
        out = np.repeat(out, 2, axis=axis)

    def backward(grad: np.ndarray):
        if x.requires_grad:
            batch, channels, nx, ny, nz = x.shape
            x.accumulate(grad.reshape(batch, channels, nx, 2, ny, 2, nz, 2).sum(axis=(3, 5, 7)))

    return Tensor(out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along the channel axis"""
    tensors = list(tensors)
    spatial = {t.shape[:axis] + t.shape[axis + 1 :] for t in tensors}
    if len(spatial) != 1:
        raise ShapeError(f"concat shapes disagree outside axis {axis}: {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(grad: np.ndarray):
        pieces: List[np.ndarray] = np.split(grad, bounds[1:-1], axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t.accumulate(piece)

    return Tensor(out, tensors, backward)
