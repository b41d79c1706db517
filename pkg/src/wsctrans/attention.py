"""Bottleneck attention: 3D window attention, shifted-window attention with
wrap masking, and channel self-attention, composed in series.

Window attention restricts self-attention to non-overlapping w**3 voxel
windows. The shifted variant cyclically rolls the volume by floor(w/2) per
axis first, attends with a mask that blocks pairs wrapped across the volume
boundary, and rolls back. Channel attention contracts over all spatial
positions and mixes channels globally, so every voxel sees every channel
pair; it never tokenizes space beyond the contraction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .blocks import ParamStore

MASK_BIAS = -1e4


@dataclass
class WscConfig:
    """Configuration of the bottleneck attention stack.

    composition: order of attention kinds, characters from {W, S, C}.
    depths: per-stage repeats of the full composition.
    """
    composition: str = "WSC"
    depths: tuple = (1, 1, 3, 1)
    heads: int = 8
    mlp_ratio: int = 4
    window_size: int = 2

    def validate(self):
        if not self.composition:
            raise ValueError("composition must be non-empty")
        bad = set(self.composition) - set("WSC")
        if bad:
            raise ValueError(f"composition may only contain W/S/C, got {bad}")
        if "S" in self.composition and self.window_size < 2:
            raise ValueError("shifted attention needs window_size >= 2")
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if not self.depths or any(d < 1 for d in self.depths):
            raise ValueError(f"depths must be positive, got {self.depths}")


@dataclass
class WindowLayout:
    """Partition bookkeeping for one (extents, window, shift) combination."""
    window: int
    extents: tuple            # (D, H, W)
    counts: tuple             # windows per axis
    shift: int = 0
    mask: np.ndarray | None = field(default=None, repr=False)

    @property
    def tokens_per_window(self) -> int:
        return self.window ** 3

    @property
    def num_windows(self) -> int:
        d, h, w = self.counts
        return d * h * w


def make_layout(extents, window: int, shifted: bool = False,
                dtype=np.float32) -> WindowLayout:
    d, h, w = extents
    if d % window or h % window or w % window:
        raise ValueError(f"window {window} does not divide extents {extents}")
    counts = (d // window, h // window, w // window)
    if not shifted:
        return WindowLayout(window, tuple(extents), counts, 0, None)
    shift = window // 2
    layout = WindowLayout(window, tuple(extents), counts, shift,
                          _shift_mask(extents, window, shift, dtype))
    return layout


def _shift_mask(extents, window, shift, dtype):
    """Additive [num_windows, T, T] mask for the rolled configuration.

    Voxels are labeled by which of the 3 per-axis bands they fall into after
    the roll; pairs with different labels inside one window originate from
    non-adjacent regions across the wrap boundary and get MASK_BIAS.
    """
    region = np.zeros(extents, dtype=np.int64)
    bands = []
    for e in extents:
        bands.append((slice(0, e - window),
                      slice(e - window, e - shift),
                      slice(e - shift, e)))
    cnt = 0
    for sd in bands[0]:
        for sh in bands[1]:
            for sw in bands[2]:
                region[sd, sh, sw] = cnt
                cnt += 1
    d, h, w = extents
    ww = window
    r = region.reshape(d // ww, ww, h // ww, ww, w // ww, ww)
    r = r.transpose(0, 2, 4, 1, 3, 5).reshape(-1, ww ** 3)
    diff = r[:, :, None] != r[:, None, :]
    return np.where(diff, MASK_BIAS, 0.0).astype(dtype)


def window_partition(x: Tensor, window: int) -> Tensor:
    """[N,C,D,H,W] -> [N*num_windows, window**3, C].

    Windows are ordered row-major over the window grid and tokens row-major
    within each window.
    """
    n, c, d, h, w = x.shape
    if d % window or h % window or w % window:
        raise ValueError(f"window {window} does not divide extents {(d, h, w)}")
    nd, nh, nw = d // window, h // window, w // window
    y = T.reshape(x, (n, c, nd, window, nh, window, nw, window))
    y = T.permute(y, (0, 2, 4, 6, 3, 5, 7, 1))
    return T.reshape(y, (n * nd * nh * nw, window ** 3, c))


def window_reverse(xw: Tensor, window: int, extents) -> Tensor:
    """Exact inverse of :func:`window_partition`."""
    d, h, w = extents
    nd, nh, nw = d // window, h // window, w // window
    c = xw.shape[2]
    n = xw.shape[0] // (nd * nh * nw)
    y = T.reshape(xw, (n, nd, nh, nw, window, window, window, c))
    y = T.permute(y, (0, 7, 1, 4, 2, 5, 3, 6))
    return T.reshape(y, (n, c, d, h, w))


class MhaParams:
    """Projection weights of one multi-head attention op."""

    def __init__(self, store: ParamStore, prefix: str, channels: int, rng, dtype):
        c = channels
        std = float(np.sqrt(1.0 / c))
        for name in ("q", "k", "v", "proj"):
            wdata = rng.standard_normal((c, c), dtype)
            wdata *= std
            w = store.add(f"{prefix}.{name}.weight", wdata)
            b = store.add(f"{prefix}.{name}.bias", np.zeros(c, dtype))
            setattr(self, f"{name}_w", w)
            setattr(self, f"{name}_b", b)


def _project_heads(tokens: Tensor, w: Tensor, b: Tensor, heads: int) -> Tensor:
    """[B,T,C] -> [B*heads, T, C/heads] through one linear projection."""
    bsz, t, c = tokens.shape
    hd = c // heads
    y = T.linear(T.reshape(tokens, (bsz * t, c)), w, b)
    y = T.reshape(y, (bsz, t, heads, hd))
    y = T.permute(y, (0, 2, 1, 3))
    return T.reshape(y, (bsz * heads, t, hd))


def _merge_heads(y: Tensor, heads: int) -> Tensor:
    """[B*heads, T, hd] -> [B, T, C]."""
    bh, t, hd = y.shape
    bsz = bh // heads
    y = T.reshape(y, (bsz, heads, t, hd))
    y = T.permute(y, (0, 2, 1, 3))
    return T.reshape(y, (bsz, t, heads * hd))


def _token_attention(tokens: Tensor, params: MhaParams, heads: int,
                     mask: np.ndarray | None) -> Tensor:
    """Multi-head self-attention over token sequences [B,T,C]."""
    bsz, t, c = tokens.shape
    hd = c // heads
    q = _project_heads(tokens, params.q_w, params.q_b, heads)
    k = _project_heads(tokens, params.k_w, params.k_b, heads)
    v = _project_heads(tokens, params.v_w, params.v_b, heads)
    scores = T.mul(T.bmm(q, T.permute(k, (0, 2, 1))), 1.0 / np.sqrt(hd))
    if mask is not None:
        scores = T.add(scores, Tensor(mask))
    attn = T.softmax(scores, axis=2)
    out = _merge_heads(T.bmm(attn, v), heads)
    out = T.linear(T.reshape(out, (bsz * t, c)), params.proj_w, params.proj_b)
    return T.reshape(out, (bsz, t, c))


def window_attention(x: Tensor, layout: WindowLayout, params: MhaParams,
                     heads: int) -> Tensor:
    """Per-window multi-head self-attention; windows never exchange information."""
    n, c = x.shape[0], x.shape[1]
    if c % heads:
        raise ValueError(f"{c} channels not divisible by {heads} heads")
    tokens = window_partition(x, layout.window)
    mask = None
    if layout.mask is not None:
        # [nw,T,T] -> [N*nw*heads,T,T]: each window's mask repeated per head,
        # the whole block tiled per batch element.
        m = layout.mask.astype(x.dtype, copy=False)
        mask = np.tile(np.repeat(m, heads, axis=0), (n, 1, 1))
    out = _token_attention(tokens, params, heads, mask)
    return window_reverse(out, layout.window, layout.extents)


def shifted_window_attention(x: Tensor, params: MhaParams, heads: int,
                             window: int) -> Tensor:
    """Window attention on a half-window cyclic shift, wrap pairs masked out."""
    if window < 2:
        raise ValueError("shifted window attention needs window >= 2")
    layout = make_layout(x.shape[2:], window, shifted=True, dtype=x.dtype)
    s = layout.shift
    rolled = T.roll(x, (-s, -s, -s), (2, 3, 4))
    out = window_attention(rolled, layout, params, heads)
    return T.roll(out, (s, s, s), (2, 3, 4))


def channel_self_attention(x: Tensor, params: MhaParams, heads: int) -> Tensor:
    """Attention over channels with spatial positions as the contraction axis.

    Per head the [Cg, Nt] query/key matrices form a [Cg, Cg] attention map
    (softmax over the second channel index, scaled by 1/sqrt(Nt)), which then
    mixes the value rows. Global by construction: every voxel contributes to
    every channel pair.
    """
    n, c, d, h, w = x.shape
    if c % heads:
        raise ValueError(f"{c} channels not divisible by {heads} heads")
    nt = d * h * w
    hd = c // heads
    tokens = T.permute(T.reshape(x, (n, c, nt)), (0, 2, 1))  # [N, Nt, C]

    def to_channel_major(tok, wmat, bvec):
        y = T.linear(T.reshape(tok, (n * nt, c)), wmat, bvec)
        y = T.reshape(y, (n, nt, heads, hd))
        y = T.permute(y, (0, 2, 3, 1))           # [N, heads, hd, Nt]
        return T.reshape(y, (n * heads, hd, nt))

    q = to_channel_major(tokens, params.q_w, params.q_b)
    k = to_channel_major(tokens, params.k_w, params.k_b)
    v = to_channel_major(tokens, params.v_w, params.v_b)
    scores = T.mul(T.bmm(q, T.permute(k, (0, 2, 1))), 1.0 / np.sqrt(nt))
    attn = T.softmax(scores, axis=2)             # [N*heads, Cg, Cg]
    out = T.bmm(attn, v)                         # [N*heads, Cg, Nt]
    out = T.reshape(out, (n, heads, hd, nt))
    out = T.permute(out, (0, 3, 1, 2))           # [N, Nt, heads, hd]
    out = T.linear(T.reshape(out, (n * nt, c)), params.proj_w, params.proj_b)
    out = T.permute(T.reshape(out, (n, nt, c)), (0, 2, 1))
    return T.reshape(out, (n, c, d, h, w))


class AttentionUnit:
    """One pre-norm attention sub-layer plus its pre-norm MLP, both residual.

    kind selects the attention op: 'W' window, 'S' shifted window,
    'C' channel.
    """

    def __init__(self, store: ParamStore, prefix: str, kind: str, channels: int,
                 heads: int, window: int, mlp_ratio: int, rng, dtype):
        if kind not in "WSC":
            raise ValueError(f"unknown attention kind {kind!r}")
        c = channels
        self.kind = kind
        self.heads = heads
        self.window = window
        self.norm1_g = store.add(f"{prefix}.norm1.gamma", np.ones(c, dtype))
        self.norm1_b = store.add(f"{prefix}.norm1.beta", np.zeros(c, dtype))
        self.attn = MhaParams(store, f"{prefix}.attn", c, rng, dtype)
        self.norm2_g = store.add(f"{prefix}.norm2.gamma", np.ones(c, dtype))
        self.norm2_b = store.add(f"{prefix}.norm2.beta", np.zeros(c, dtype))
        hidden = mlp_ratio * c
        fc1 = rng.standard_normal((c, hidden), dtype)
        fc1 *= float(np.sqrt(1.0 / c))
        fc2 = rng.standard_normal((hidden, c), dtype)
        fc2 *= float(np.sqrt(1.0 / hidden))
        self.fc1_w = store.add(f"{prefix}.mlp.fc1.weight", fc1)
        self.fc1_b = store.add(f"{prefix}.mlp.fc1.bias", np.zeros(hidden, dtype))
        self.fc2_w = store.add(f"{prefix}.mlp.fc2.weight", fc2)
        self.fc2_b = store.add(f"{prefix}.mlp.fc2.bias", np.zeros(c, dtype))

    def _norm(self, x5, gamma, beta):
        n, c, d, h, w = x5.shape
        tok = T.permute(T.reshape(x5, (n, c, d * h * w)), (0, 2, 1))
        tok = T.layer_norm(tok, gamma, beta)
        return T.reshape(T.permute(tok, (0, 2, 1)), (n, c, d, h, w))

    def _attend(self, x5):
        if self.kind == "W":
            layout = make_layout(x5.shape[2:], self.window, shifted=False)
            return window_attention(x5, layout, self.attn, self.heads)
        if self.kind == "S":
            return shifted_window_attention(x5, self.attn, self.heads, self.window)
        return channel_self_attention(x5, self.attn, self.heads)

    def _mlp(self, x5):
        n, c, d, h, w = x5.shape
        flat = T.reshape(T.permute(T.reshape(x5, (n, c, d * h * w)), (0, 2, 1)),
                         (n * d * h * w, c))
        y = T.linear(flat, self.fc1_w, self.fc1_b)
        y = T.linear(T.gelu(y), self.fc2_w, self.fc2_b)
        y = T.permute(T.reshape(y, (n, d * h * w, c)), (0, 2, 1))
        return T.reshape(y, (n, c, d, h, w))

    def forward(self, x: Tensor) -> Tensor:
        x = T.add(x, self._attend(self._norm(x, self.norm1_g, self.norm1_b)))
        x = T.add(x, self._mlp(self._norm(x, self.norm2_g, self.norm2_b)))
        return x


class WscStack:
    """The serial bottleneck: composition applied depths[s] times per stage.

    With the defaults (composition "WSC", depths (1,1,3,1)) the stack runs
    window, shifted-window, then channel units six times over, preserving
    shape throughout.
    """

    def __init__(self, store: ParamStore, prefix: str, channels: int,
                 config: WscConfig, rng, dtype):
        config.validate()
        if channels % config.heads:
            raise ValueError(
                f"bottleneck channels {channels} not divisible by heads {config.heads}")
        self.config = config
        self.units = []
        for s, depth in enumerate(config.depths):
            for r in range(depth):
                for u, kind in enumerate(config.composition):
                    name = f"{prefix}.stage{s}.rep{r}.unit{u}{kind.lower()}"
                    self.units.append(AttentionUnit(
                        store, name, kind, channels, config.heads,
                        config.window_size, config.mlp_ratio, rng, dtype))

    def forward(self, x: Tensor) -> Tensor:
        window = self.config.window_size
        for e in x.shape[2:]:
            if e % window:
                raise ValueError(
                    f"window {window} does not divide bottleneck extents {x.shape[2:]}")
        for unit in self.units:
            x = unit.forward(x)
        return x
