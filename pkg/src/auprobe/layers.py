"""Forward and backward passes for every layer in the network.

Convolution is realized as an explicit matrix multiply over unrolled
patches (im2col). The unrolled-kernel matrix is the linear operator of
the convolution, so the backward/deconvolution path is literally its
transpose: `transpose_apply` and `backward` share one col2im scatter-add
that is the exact adjoint of the im2col gather.

All spatial ops work on single images shaped [channels, height, width];
batching is the trainer's job.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor


def im2col(x: Tensor, kernel_size: int, pad: int) -> Tensor:
    """Unroll x [C,H,W] into patch rows [H*W, C*k*k], zero padded."""
    c, h, w = x.shape
    k = kernel_size
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, k, k, h, w), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            cols[:, u, v] = xp[:, u : u + h, v : v + w]
    return cols.reshape(c * k * k, h * w).T


def col2im(cols: Tensor, shape: tuple[int, int, int], kernel_size: int, pad: int) -> Tensor:
    """Adjoint of im2col: scatter-add patch rows back to [C,H,W]."""
    c, h, w = shape
    k = kernel_size
    acc = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    colsr = cols.T.reshape(c, k, k, h, w)
    for u in range(k):
        for v in range(k):
            acc[:, u : u + h, v : v + w] += colsr[:, u, v]
    return acc[:, pad : pad + h, pad : pad + w]


def _init_std(mode: str, fan_in: int) -> float:
    if mode == "paper":
        return 1.0
    if mode == "scaled":
        return 1.0 / np.sqrt(fan_in)
    raise ValueError(f"unknown init_mode {mode!r}")


class ConvLayer:
    """Same-size convolution: stride 1, zero padding of kernel_size//2.

    kernels: [out_channels, in_channels, k, k], bias: [out_channels].
    Gradient buffers accumulate across calls until zero_grad().
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 5,
                 rng: np.random.Generator | None = None, init_mode: str = "scaled",
                 dtype=np.float64):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.pad = kernel_size // 2
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if rng is None:
            self.kernels = np.zeros(shape, dtype=dtype)
        else:
            std = _init_std(init_mode, in_channels * kernel_size * kernel_size)
            self.kernels = (rng.standard_normal(shape) * std).astype(dtype)
        self.bias = np.zeros(out_channels, dtype=dtype)
        self.grad_kernels = np.zeros_like(self.kernels)
        self.grad_bias = np.zeros_like(self.bias)

    @property
    def _kernel_matrix(self) -> Tensor:
        return self.kernels.reshape(self.out_channels, -1)

    def zero_grad(self) -> None:
        self.grad_kernels[...] = 0
        self.grad_bias[...] = 0

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[0] != self.in_channels:
            raise ShapeError(
                f"expected input [{self.in_channels},H,W], got {x.shape}"
            )
        _, h, w = x.shape
        cols = im2col(x, self.kernel_size, self.pad)
        out = cols @ self._kernel_matrix.T
        out += self.bias
        return out.T.reshape(self.out_channels, h, w)

    def backward(self, grad_out: Tensor, saved_input: Tensor) -> Tensor:
        """Accumulate parameter gradients, return gradient wrt input."""
        _, h, w = saved_input.shape
        if grad_out.shape != (self.out_channels, h, w):
            raise ShapeError(
                f"grad_out {grad_out.shape} does not match forward output "
                f"{(self.out_channels, h, w)}"
            )
        grad_mat = grad_out.reshape(self.out_channels, -1)
        cols = im2col(saved_input, self.kernel_size, self.pad)
        self.grad_kernels += (grad_mat @ cols).reshape(self.kernels.shape)
        self.grad_bias += grad_out.sum(axis=(1, 2))
        grad_cols = grad_mat.T @ self._kernel_matrix
        return col2im(grad_cols, saved_input.shape, self.kernel_size, self.pad)

    def transpose_apply(self, y: Tensor) -> Tensor:
        """Pure operator transpose (no bias, no gradient accumulation).

        Maps an output-shaped signal [out_channels,H,W] back to input
        space [in_channels,H,W]; the deconvolution building block.
        """
        if y.ndim != 3 or y.shape[0] != self.out_channels:
            raise ShapeError(
                f"expected output-shaped signal [{self.out_channels},H,W], got {y.shape}"
            )
        _, h, w = y.shape
        grad_cols = y.reshape(self.out_channels, -1).T @ self._kernel_matrix
        return col2im(grad_cols, (self.in_channels, h, w), self.kernel_size, self.pad)


class FCLayer:
    """Fully connected layer: y = W x + b on 1-D inputs."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, init_mode: str = "scaled",
                 dtype=np.float64):
        self.in_features = in_features
        self.out_features = out_features
        if rng is None:
            self.weights = np.zeros((out_features, in_features), dtype=dtype)
        else:
            std = _init_std(init_mode, in_features)
            self.weights = (rng.standard_normal((out_features, in_features)) * std).astype(dtype)
        self.bias = np.zeros(out_features, dtype=dtype)
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)

    def zero_grad(self) -> None:
        self.grad_weights[...] = 0
        self.grad_bias[...] = 0

    def forward(self, x: Tensor) -> Tensor:
        if x.shape != (self.in_features,):
            raise ShapeError(f"expected [{self.in_features}] input, got {x.shape}")
        return self.weights @ x + self.bias

    def backward(self, grad_out: Tensor, saved_input: Tensor) -> Tensor:
        if grad_out.shape != (self.out_features,):
            raise ShapeError(f"grad_out shape {grad_out.shape} != [{self.out_features}]")
        self.grad_weights += np.outer(grad_out, saved_input)
        self.grad_bias += grad_out
        return self.weights.T @ grad_out


def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def relu_backward(grad_out: Tensor, saved_input: Tensor) -> Tensor:
    # gradient at exactly 0 is defined as 0
    return np.where(saved_input > 0, grad_out, 0)


@dataclass
class SwitchRecord:
    """Per-window argmax coordinates recorded by maxpool_forward.

    rows/cols index into the pre-pool activation; ties are broken toward
    the smallest row-major index so unpooling is reproducible.
    """

    rows: Tensor
    cols: Tensor
    input_shape: tuple[int, int, int]

    @property
    def pooled_shape(self) -> tuple[int, int, int]:
        return self.rows.shape


def maxpool_forward(x: Tensor) -> tuple[Tensor, SwitchRecord]:
    """2x2 max pool; odd extents are padded with -inf (never selected)."""
    c, h, w = x.shape
    hp, wp = h + h % 2, w + w % 2
    if (hp, wp) != (h, w):
        xp = np.full((c, hp, wp), -np.inf, dtype=x.dtype)
        xp[:, :h, :w] = x
    else:
        xp = x
    oh, ow = hp // 2, wp // 2
    windows = xp.reshape(c, oh, 2, ow, 2).transpose(0, 1, 3, 2, 4).reshape(c, oh, ow, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(oh, dtype=np.int32)[None, :, None] + (idx // 2).astype(np.int32)
    cols = 2 * np.arange(ow, dtype=np.int32)[None, None, :] + (idx % 2).astype(np.int32)
    return out, SwitchRecord(rows=rows, cols=cols, input_shape=(c, h, w))


def unpool(values: Tensor, switches: SwitchRecord) -> Tensor:
    """Place each pooled-grid value at its recorded switch coordinate."""
    if values.shape != switches.pooled_shape:
        raise ShapeError(
            f"values shape {values.shape} does not match switch record "
            f"{switches.pooled_shape}"
        )
    c, h, w = switches.input_shape
    out = np.zeros((c, h, w), dtype=values.dtype)
    chan = np.arange(c)[:, None, None]
    out[chan, switches.rows, switches.cols] = values
    return out


def maxpool_backward(grad_out: Tensor, switches: SwitchRecord) -> Tensor:
    """Route each output gradient to its argmax location; zeros elsewhere."""
    return unpool(grad_out, switches)


def softmax_cross_entropy(logits: Tensor, label: int) -> tuple[float, Tensor]:
    """Return (loss, grad wrt logits) of -log softmax(logits)[label]."""
    n = logits.shape[0]
    if not 0 <= label < n:
        raise ValueError(f"label {label} outside class range [0, {n})")
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    total = exp.sum()
    probs = exp / total
    loss = float(np.log(total) - shifted[label])
    grad = probs.copy()
    grad[label] -= 1.0
    return loss, grad


def dropout_mask(shape: tuple[int, ...], p: float, rng: np.random.Generator,
                 dtype=np.float64) -> Tensor:
    """Inverted-dropout multiplier: 0 with probability p, else 1/(1-p)."""
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / (1.0 - p)
