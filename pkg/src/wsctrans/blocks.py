"""Composite network blocks: conv stem, dense/res feature blocks, patch-merge
downsampling, transposed-conv upsampling, and additive skip fusion.

All parameters live in a :class:`ParamStore` under hierarchical dotted names
(e.g. ``encoder.dense1.conv_a.weight``); checkpoints address parameters by
exactly these names.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParamStore:
    """Registry of uniquely named trainable tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(array, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def named(self):
        return self._params.items()

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def count(self) -> int:
        return sum(t.size for t in self._params.values())


def conv_weight(rng: T.Rng, cout: int, cin: int, k: int, dtype) -> np.ndarray:
    """Fan-in scaled normal init for convolution kernels."""
    fan_in = cin * k ** 3
    w = rng.standard_normal((cout, cin, k, k, k), dtype)
    w *= float(np.sqrt(2.0 / fan_in))
    return w


class _ConvGnRelu:
    """conv3x3x3 (stride 1, pad 1) + group norm + relu."""

    def __init__(self, store, prefix, cin, cout, groups, rng, dtype):
        self.groups = groups
        self.w = store.add(f"{prefix}.conv.weight", conv_weight(rng, cout, cin, 3, dtype))
        self.b = store.add(f"{prefix}.conv.bias", np.zeros(cout, dtype))
        self.gamma = store.add(f"{prefix}.norm.gamma", np.ones(cout, dtype))
        self.beta = store.add(f"{prefix}.norm.beta", np.zeros(cout, dtype))

    def forward(self, x):
        y = T.conv3d(x, self.w, self.b, stride=1, padding=1)
        return T.relu(T.group_norm(y, self.groups, self.gamma, self.beta))


class ConvBlock:
    """Input stem lifting a single-channel volume to the base channel width."""

    def __init__(self, store, prefix, channels, groups, rng, dtype):
        self.channels = channels
        self.inner = _ConvGnRelu(store, prefix, 1, channels, groups, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != 1:
            raise ValueError(f"ConvBlock expects 1 input channel, got {x.shape[1]}")
        return self.inner.forward(x)


class DenseBlock:
    """Two norm-relu-conv stages whose outputs are concatenated and projected.

    x1 = conv3(relu(gn(x)));  x2 = conv3(relu(gn(x1)));
    y  = conv1(concat(x1, x2))          (2C channels projected back to C)
    Shape is preserved exactly.
    """

    def __init__(self, store, prefix, channels, groups, rng, dtype):
        c = self.channels = channels
        self.groups = groups
        self.gamma_a = store.add(f"{prefix}.norm_a.gamma", np.ones(c, dtype))
        self.beta_a = store.add(f"{prefix}.norm_a.beta", np.zeros(c, dtype))
        self.w_a = store.add(f"{prefix}.conv_a.weight", conv_weight(rng, c, c, 3, dtype))
        self.b_a = store.add(f"{prefix}.conv_a.bias", np.zeros(c, dtype))
        self.gamma_b = store.add(f"{prefix}.norm_b.gamma", np.ones(c, dtype))
        self.beta_b = store.add(f"{prefix}.norm_b.beta", np.zeros(c, dtype))
        self.w_b = store.add(f"{prefix}.conv_b.weight", conv_weight(rng, c, c, 3, dtype))
        self.b_b = store.add(f"{prefix}.conv_b.bias", np.zeros(c, dtype))
        self.w_p = store.add(f"{prefix}.proj.weight", conv_weight(rng, c, 2 * c, 1, dtype))
        self.b_p = store.add(f"{prefix}.proj.bias", np.zeros(c, dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(
                f"DenseBlock expects {self.channels} channels, got {x.shape[1]}")
        x1 = T.conv3d(T.relu(T.group_norm(x, self.groups, self.gamma_a, self.beta_a)),
                      self.w_a, self.b_a, stride=1, padding=1)
        x2 = T.conv3d(T.relu(T.group_norm(x1, self.groups, self.gamma_b, self.beta_b)),
                      self.w_b, self.b_b, stride=1, padding=1)
        return T.conv3d(T.concat([x1, x2], axis=1), self.w_p, self.b_p,
                        stride=1, padding=0)


class ResBlock:
    """Two norm-relu-conv stages combined by addition, then a final conv.

    x1 = conv3(relu(gn(x)));  x2 = conv3(relu(gn(x1)));  y = conv3(x1 + x2)
    """

    def __init__(self, store, prefix, channels, groups, rng, dtype):
        c = self.channels = channels
        self.groups = groups
        self.gamma_a = store.add(f"{prefix}.norm_a.gamma", np.ones(c, dtype))
        self.beta_a = store.add(f"{prefix}.norm_a.beta", np.zeros(c, dtype))
        self.w_a = store.add(f"{prefix}.conv_a.weight", conv_weight(rng, c, c, 3, dtype))
        self.b_a = store.add(f"{prefix}.conv_a.bias", np.zeros(c, dtype))
        self.gamma_b = store.add(f"{prefix}.norm_b.gamma", np.ones(c, dtype))
        self.beta_b = store.add(f"{prefix}.norm_b.beta", np.zeros(c, dtype))
        self.w_b = store.add(f"{prefix}.conv_b.weight", conv_weight(rng, c, c, 3, dtype))
        self.b_b = store.add(f"{prefix}.conv_b.bias", np.zeros(c, dtype))
        self.w_o = store.add(f"{prefix}.conv_out.weight", conv_weight(rng, c, c, 3, dtype))
        self.b_o = store.add(f"{prefix}.conv_out.bias", np.zeros(c, dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(
                f"ResBlock expects {self.channels} channels, got {x.shape[1]}")
        x1 = T.conv3d(T.relu(T.group_norm(x, self.groups, self.gamma_a, self.beta_a)),
                      self.w_a, self.b_a, stride=1, padding=1)
        x2 = T.conv3d(T.relu(T.group_norm(x1, self.groups, self.gamma_b, self.beta_b)),
                      self.w_b, self.b_b, stride=1, padding=1)
        return T.conv3d(T.add(x1, x2), self.w_o, self.b_o, stride=1, padding=1)


def space_to_channels(x: Tensor) -> Tensor:
    """Losslessly fold every 2x2x2 spatial neighborhood into the channel axis.

    [N,C,D,H,W] -> [N,8C,D/2,H/2,W/2]; output channel block j*C..(j+1)*C holds
    the voxels at within-cell offset j = ((od*2)+oh)*2+ow, row-major.
    """
    n, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ValueError(f"space_to_channels needs even extents, got {(d, h, w)}")
    y = T.reshape(x, (n, c, d // 2, 2, h // 2, 2, w // 2, 2))
    y = T.permute(y, (0, 3, 5, 7, 1, 2, 4, 6))
    return T.reshape(y, (n, 8 * c, d // 2, h // 2, w // 2))


def channels_to_space(x: Tensor) -> Tensor:
    """Exact inverse of :func:`space_to_channels`."""
    n, c8, d, h, w = x.shape
    if c8 % 8:
        raise ValueError(f"channels_to_space needs 8k channels, got {c8}")
    c = c8 // 8
    y = T.reshape(x, (n, 2, 2, 2, c, d, h, w))
    y = T.permute(y, (0, 4, 5, 1, 6, 2, 7, 3))
    return T.reshape(y, (n, c, 2 * d, 2 * h, 2 * w))


class PatchMergeDown:
    """Space-to-channel downsampling followed by a pointwise projection.

    The rearrangement concentrates each 2x2x2 cell into 8C channels at half
    resolution without discarding anything; a 1x1x1 convolution then projects
    8C down to 2C.
    """

    def __init__(self, store, prefix, channels, rng, dtype):
        self.channels = channels
        self.w = store.add(f"{prefix}.proj.weight",
                           conv_weight(rng, 2 * channels, 8 * channels, 1, dtype))
        self.b = store.add(f"{prefix}.proj.bias", np.zeros(2 * channels, dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(
                f"PatchMergeDown expects {self.channels} channels, got {x.shape[1]}")
        return T.conv3d(space_to_channels(x), self.w, self.b, stride=1, padding=0)


class UpBlock:
    """Kernel-2 stride-2 transposed convolution: halve channels, double extents."""

    def __init__(self, store, prefix, channels, rng, dtype):
        if channels % 2:
            raise ValueError(f"UpBlock needs an even channel count, got {channels}")
        self.channels = channels
        fan_in = channels * 8
        w = rng.standard_normal((channels, channels // 2, 2, 2, 2), dtype)
        w *= float(np.sqrt(2.0 / fan_in))
        self.w = store.add(f"{prefix}.weight", w)
        self.b = store.add(f"{prefix}.bias", np.zeros(channels // 2, dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(
                f"UpBlock expects {self.channels} channels, got {x.shape[1]}")
        return T.conv_transpose3d(x, self.w, self.b, stride=2)


def skip_fuse(decoder: Tensor, encoder_skip: Tensor) -> Tensor:
    """Merge a decoder feature map with its same-level encoder skip by addition."""
    if decoder.shape != encoder_skip.shape:
        raise ValueError(
            f"skip_fuse: shape mismatch {decoder.shape} vs {encoder_skip.shape}")
    return T.add(decoder, encoder_skip)
