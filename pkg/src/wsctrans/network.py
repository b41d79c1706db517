"""Full encoder-decoder assembly, symbolic shape tracing, and checkpoint I/O.

The network runs a conv stem, then alternating dense blocks and patch-merge
downsampling, the serial attention stack at the lowest resolution, and a
mirrored decoder of transposed-conv upsampling, additive skip fusion, and res
blocks, finishing with a pointwise classifier and a channel softmax.

Checkpoint file layout (all integers little-endian):
    magic "WSCCKPT1" (8 bytes)
    version u32
    config block: u32 byte length + UTF-8 key=value lines
    records: [name length u32][name bytes][rank u32][extents u64 x rank]
             [float32 payload]
Reloading a checkpoint reproduces forward outputs bit-exactly for float32
models (the stored precision).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, Rng
from .attention import WscConfig, WscStack
from .blocks import (ParamStore, ConvBlock, DenseBlock, ResBlock,
                     PatchMergeDown, UpBlock, skip_fuse)

CHECKPOINT_MAGIC = b"WSCCKPT1"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Raised for malformed, truncated, or mismatched checkpoint files."""


@dataclass
class NetworkConfig:
    input_extent: int = 96
    base_channels: int = 32
    num_levels: int = 4
    num_classes: int = 6
    norm_groups: int = 8
    precision: str = "float32"
    wsc: WscConfig = field(default_factory=WscConfig)

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def level_channels(self, level: int) -> int:
        return self.base_channels * (1 << level)

    def level_extent(self, level: int) -> int:
        return self.input_extent >> level

    @property
    def bottom(self) -> int:
        return self.num_levels - 1

    def validate(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.num_levels < 2:
            raise ValueError(f"need at least 2 levels, got {self.num_levels}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")
        e = self.input_extent
        for level in range(self.num_levels):
            if level and e % 2:
                raise ValueError(
                    f"extent {self.level_extent(level - 1)} at level {level - 1} "
                    f"is odd; input extent {self.input_extent} does not support "
                    f"{self.num_levels} levels")
            e = self.input_extent >> level
        if self.base_channels % self.norm_groups:
            raise ValueError(
                f"base channels {self.base_channels} not divisible by "
                f"{self.norm_groups} norm groups")
        self.wsc.validate()
        bottom_extent = self.level_extent(self.bottom)
        if bottom_extent % self.wsc.window_size:
            raise ValueError(
                f"window {self.wsc.window_size} does not divide the bottleneck "
                f"extent {bottom_extent} at level {self.bottom}")
        bottom_channels = self.level_channels(self.bottom)
        if bottom_channels % self.wsc.heads:
            raise ValueError(
                f"bottleneck channels {bottom_channels} not divisible by "
                f"{self.wsc.heads} heads")


class Model:
    """Built network: parameter store plus the block graph."""

    def __init__(self, config: NetworkConfig, rng: Rng):
        config.validate()
        self.config = config
        self.store = ParamStore()
        dt = config.dtype
        groups = config.norm_groups
        levels = config.num_levels

        self.stem = ConvBlock(self.store, "stem", config.base_channels,
                              groups, rng, dt)
        self.dense = []
        self.down = []
        for i in range(levels):
            c = config.level_channels(i)
            self.dense.append(DenseBlock(
                self.store, f"encoder.dense{i + 1}", c, groups, rng, dt))
            if i < levels - 1:
                self.down.append(PatchMergeDown(
                    self.store, f"encoder.down{i + 1}", c, rng, dt))
        self.wsc = WscStack(self.store, "bottleneck",
                            config.level_channels(config.bottom),
                            config.wsc, rng, dt)
        # Decoder order mirrors the forward pass: bottom res block first,
        # then per level an up block (fed with the channels of the level
        # above) followed by the res block at the new resolution.
        self.res = [ResBlock(self.store, f"decoder.res{levels}",
                             config.level_channels(config.bottom), groups, rng, dt)]
        self.up = []
        for i in range(levels - 1, 0, -1):
            self.up.append(UpBlock(self.store, f"decoder.up{i}",
                                   config.level_channels(i), rng, dt))
            self.res.append(ResBlock(self.store, f"decoder.res{i}",
                                     config.level_channels(i - 1), groups, rng, dt))
        # Zero-initialized classifier: the first softmax output is uniform,
        # so no class starts saturated away under the dice loss (a non-zero
        # init reliably kills the rarest structure's logits for good).
        self.head_w = self.store.add(
            "head.weight",
            np.zeros((config.num_classes, config.base_channels, 1, 1, 1), dt))
        self.head_b = self.store.add("head.bias",
                                     np.zeros(config.num_classes, dt))

    def parameter_count(self) -> int:
        return self.store.count()

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.config
        e = cfg.input_extent
        if x.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (e, e, e):
            raise ValueError(
                f"expected input [N,1,{e},{e},{e}], got {tuple(x.shape)}")
        y = self.stem.forward(x)
        skips = []
        for i in range(cfg.num_levels):
            y = self.dense[i].forward(y)
            if i < cfg.num_levels - 1:
                skips.append(y)
                y = self.down[i].forward(y)
        y = self.wsc.forward(y)
        y = self.res[0].forward(y)
        for j, i in enumerate(range(cfg.num_levels - 1, 0, -1)):
            y = self.up[j].forward(y)
            y = skip_fuse(y, skips[i - 1])
            y = self.res[j + 1].forward(y)
        logits = T.conv3d(y, self.head_w, self.head_b, stride=1, padding=0)
        return T.softmax(logits, axis=1)

    def zero_grad(self):
        self.store.zero_grad()


def build(config: NetworkConfig, rng: Rng) -> Model:
    """Construct and initialize a model; raises on invalid configurations."""
    return Model(config, rng)


def _fmt(c, e):
    return f"{c}×{e}×{e}×{e}"


def shape_trace(config: NetworkConfig):
    """Symbolic per-layer (name, input shape, output shape) trace.

    No activations are allocated; the trace mirrors the forward pass layer
    for layer, 4*num_levels + 1 rows in total.
    """
    config.validate()
    levels = config.num_levels
    rows = []
    rows.append(("ConvBlock", _fmt(1, config.input_extent),
                 _fmt(config.base_channels, config.input_extent)))
    for i in range(levels):
        c, e = config.level_channels(i), config.level_extent(i)
        rows.append((f"Dense Block{i + 1}", _fmt(c, e), _fmt(c, e)))
        if i < levels - 1:
            rows.append((f"Down{i + 1}", _fmt(c, e), _fmt(2 * c, e // 2)))
    cb, eb = config.level_channels(levels - 1), config.level_extent(levels - 1)
    rows.append(("WSC", _fmt(cb, eb), _fmt(cb, eb)))
    rows.append((f"Res Block{levels}", _fmt(cb, eb), _fmt(cb, eb)))
    for i in range(levels - 1, 0, -1):
        c, e = config.level_channels(i), config.level_extent(i)
        rows.append((f"Up{i}", _fmt(c, e), _fmt(c // 2, e * 2)))
        rows.append((f"Res Block{i}", _fmt(c // 2, e * 2), _fmt(c // 2, e * 2)))
    rows.append(("Softmax", _fmt(config.base_channels, config.input_extent),
                 _fmt(config.num_classes, config.input_extent)))
    return rows


# ---------------------------------------------------------------------------
# Config <-> text (embedded in checkpoints and shared with the CLI)
# ---------------------------------------------------------------------------

def config_to_lines(config: NetworkConfig) -> list[str]:
    return [
        f"network.input_extent={config.input_extent}",
        f"network.base_channels={config.base_channels}",
        f"network.num_levels={config.num_levels}",
        f"network.num_classes={config.num_classes}",
        f"network.norm_groups={config.norm_groups}",
        f"network.precision={config.precision}",
        f"wsc.composition={config.wsc.composition}",
        f"wsc.depths={','.join(str(d) for d in config.wsc.depths)}",
        f"wsc.heads={config.wsc.heads}",
        f"wsc.mlp_ratio={config.wsc.mlp_ratio}",
        f"wsc.window_size={config.wsc.window_size}",
    ]


def apply_config_keys(config: NetworkConfig, items: dict) -> NetworkConfig:
    """Apply namespaced key=value overrides onto a NetworkConfig."""
    ints = {
        "network.input_extent": "input_extent",
        "network.base_channels": "base_channels",
        "network.num_levels": "num_levels",
        "network.num_classes": "num_classes",
        "network.norm_groups": "norm_groups",
    }
    wsc_ints = {
        "wsc.heads": "heads",
        "wsc.mlp_ratio": "mlp_ratio",
        "wsc.window_size": "window_size",
        "network.window_size": "window_size",
    }
    for key, value in items.items():
        if key in ints:
            setattr(config, ints[key], int(value))
        elif key in wsc_ints:
            setattr(config.wsc, wsc_ints[key], int(value))
        elif key == "network.precision":
            config.precision = value
        elif key == "wsc.composition":
            config.wsc.composition = value
        elif key == "wsc.depths":
            config.wsc.depths = tuple(int(d) for d in value.split(","))
        else:
            raise KeyError(f"unknown network config key: {key}")
    return config


def config_from_lines(lines) -> tuple[NetworkConfig, dict]:
    """Parse key=value lines; returns the config and any non-network keys."""
    config = NetworkConfig()
    extra = {}
    for raw in lines:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        try:
            apply_config_keys(config, {key: value})
        except KeyError:
            extra[key] = value
    return config, extra


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: Model, path, step: int = 0):
    cfg_lines = config_to_lines(model.config) + [f"train.step={step}"]
    blob = "\n".join(cfg_lines).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, t in model.store.named():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", t.ndim))
            f.write(struct.pack(f"<{t.ndim}Q", *t.shape))
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(
            f"truncated checkpoint while reading {what}: wanted {n} bytes, "
            f"got {len(buf)}")
    return buf


def load_checkpoint(path, config: NetworkConfig | None = None) -> tuple[Model, int]:
    """Rebuild a model from a checkpoint; returns (model, step).

    If ``config`` is given it must match the stored parameter inventory;
    otherwise the embedded config is used.
    """
    with open(path, "rb") as f:
        magic = _read_exact(f, 8, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(
                f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        version, = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version}, "
                f"expected {CHECKPOINT_VERSION}")
        blob_len, = struct.unpack("<I", _read_exact(f, 4, "config length"))
        blob = _read_exact(f, blob_len, "config block").decode("utf-8")
        stored_config, extra = config_from_lines(blob.splitlines())
        step = int(extra.get("train.step", 0))

        records = {}
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointError("truncated checkpoint in record header")
            name_len, = struct.unpack("<I", head)
            name = _read_exact(f, name_len, "record name").decode("utf-8")
            rank, = struct.unpack("<I", _read_exact(f, 4, f"rank of {name}"))
            shape = struct.unpack(f"<{rank}Q",
                                  _read_exact(f, 8 * rank, f"extents of {name}"))
            count = int(np.prod(shape)) if rank else 1
            payload = _read_exact(f, 4 * count, f"data of {name}")
            records[name] = np.frombuffer(payload, dtype="<f4").reshape(shape)

    target = config if config is not None else stored_config
    model = Model(target, Rng(0))
    model_names = [name for name, _ in model.store.named()]
    missing = [n for n in model_names if n not in records]
    if missing:
        raise CheckpointError(f"checkpoint is missing parameter {missing[0]!r}")
    extra_names = [n for n in records if n not in set(model_names)]
    if extra_names:
        raise CheckpointError(
            f"checkpoint has unexpected parameter {sorted(extra_names)[0]!r}")
    for name in model_names:
        t = model.store[name]
        if records[name].shape != t.shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {records[name].shape} in the "
                f"checkpoint but {tuple(t.shape)} in the model")
        t.data = records[name].astype(target.dtype)
    return model, step
