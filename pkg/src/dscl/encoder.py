"""Small trainable convolutional encoder producing dense pixel embeddings.

Three 3x3 stages with total stride 4 by default; ReLU between stages, linear
final stage so embeddings are signed. Spatial output is ceil(input / stride)
per stage (zero padding, row-major im2col feeding one matmul per stage).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, matmul, pad2d


@dataclass
class ConvStage:
    weight: Tensor  # (kernel*kernel*c_in, c_out)
    bias: Tensor  # (c_out,)
    kernel: int
    stride: int
    c_in: int
    c_out: int


class TinyEncoder:
    def __init__(self, stages, relu_between=True):
        self.stages = stages
        self.relu_between = relu_between

    @property
    def out_depth(self):
        return self.stages[-1].c_out

    @property
    def total_stride(self):
        s = 1
        for st in self.stages:
            s *= st.stride
        return s

    def parameters(self):
        named = {}
        for i, st in enumerate(self.stages):
            named[f"enc.stage{i}.weight"] = st.weight
            named[f"enc.stage{i}.bias"] = st.bias
        return named

    @staticmethod
    def build(in_channels=3, widths=(16, 24, 32), strides=(2, 2, 1), kernels=None, seed=0):
        """Kaiming fan-in uniform init, one child RNG stream per stage."""
        if kernels is None:
            kernels = tuple(3 for _ in widths)
        if not (len(widths) == len(strides) == len(kernels)):
            raise ValueError("widths, strides, kernels must have equal length")
        entropy = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        streams = entropy.spawn(len(widths))
        stages = []
        c_in = in_channels
        for width, stride, kernel, ss in zip(widths, strides, kernels, streams):
            rng = np.random.default_rng(ss)
            fan_in = kernel * kernel * c_in
            bound = np.sqrt(6.0 / fan_in)
            weight = Tensor(
                rng.uniform(-bound, bound, size=(fan_in, width)), requires_grad=True
            )
            bias = Tensor(np.zeros(width), requires_grad=True)
            stages.append(ConvStage(weight, bias, kernel, stride, c_in, width))
            c_in = width
        return TinyEncoder(stages)


def _out_extent(extent, stride):
    return -(-extent // stride)  # ceil division


_COL_INDEX_CACHE = {}


def _im2col_indices(rows, cols, channels, kernel, stride):
    key = (rows, cols, channels, kernel, stride)
    cached = _COL_INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    out_r, out_c = _out_extent(rows, stride), _out_extent(cols, stride)
    pad_r = max((out_r - 1) * stride + kernel - rows, 0)
    pad_c = max((out_c - 1) * stride + kernel - cols, 0)
    pads = ((pad_r // 2, pad_r - pad_r // 2), (pad_c // 2, pad_c - pad_c // 2))
    padded_r, padded_c = rows + pad_r, cols + pad_c
    r0 = np.arange(out_r) * stride
    c0 = np.arange(out_c) * stride
    dr, dc = np.meshgrid(np.arange(kernel), np.arange(kernel), indexing="ij")
    # flat index into (padded_r, padded_c, channels), row-major
    patch = (dr.reshape(-1)[:, None] * padded_c + dc.reshape(-1)[:, None]) * channels + np.arange(
        channels
    )[None, :]
    patch = patch.reshape(-1)  # kernel*kernel*channels
    origins = (r0[:, None] * padded_c + c0[None, :]).reshape(-1) * channels
    idx = origins[:, None] + patch[None, :]
    result = (idx, pads, (out_r, out_c))
    _COL_INDEX_CACHE[key] = result
    return result


def conv_stage(x: Tensor, stage: ConvStage) -> Tensor:
    """One strided conv over a (rows, cols, c_in) tensor -> (rows', cols', c_out)."""
    if x.data.ndim != 3 or x.data.shape[2] != stage.c_in:
        raise ShapeError(
            f"conv expects (rows, cols, {stage.c_in}), got shape {x.data.shape}"
        )
    rows, cols, channels = x.data.shape
    idx, pads, (out_r, out_c) = _im2col_indices(rows, cols, channels, stage.kernel, stage.stride)
    padded = pad2d(x, *pads) if (pads[0] != (0, 0) or pads[1] != (0, 0)) else x
    patches = padded.take_flat(idx)
    out = matmul(patches, stage.weight) + stage.bias
    return out.reshape(out_r, out_c, stage.c_out)


def encode(enc: TinyEncoder, image: Tensor) -> Tensor:
    """Map an image to its (rows', cols', D) embedding; differentiable."""
    h = image
    last = len(enc.stages) - 1
    for i, stage in enumerate(enc.stages):
        h = conv_stage(h, stage)
        if enc.relu_between and i != last:
            h = h.relu()
    return h


def flatten_features(features: Tensor) -> Tensor:
    """View a (rows, cols, D) embedding as (V, D) with V = rows*cols."""
    r, c, d = features.data.shape
    return features.reshape(r * c, d)
