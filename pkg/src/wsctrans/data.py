"""Synthetic multi-structure phantoms, augmentation, volume file I/O, and
cross-validation splits.

A phantom holds five labeled structures in a noisy intensity volume:

    1 spiral      a spiral tube, the largest curved structure
    2 thin_tube   a long curved tube with the strictly smallest radius
    3 blob_chain  a chain of small touching blobs
    4 arc_tubes   three orthogonal circular arc tubes around one center
    5 ellipsoid   a single solid ellipsoid

Each class occupies a distinct intensity band over a dim background, total
foreground stays below 5% of the voxels, and generation is fully determined
by the supplied rng.

Volume file layout (little-endian): magic "WSCVOL1\\0", version u32, dtype
u32 (0 = float32 intensity, 1 = uint8 labels), rank u32 (always 3), extents
u64 x3 as (D,H,W), spacing float32 x3, then the raw payload row-major with W
fastest. Roundtrips are bit-exact.
"""

from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import Rng

VOLUME_MAGIC = b"WSCVOL1\x00"
VOLUME_VERSION = 1
DTYPE_INTENSITY = 0
DTYPE_LABELS = 1

STRUCTURE_NAMES = ("spiral", "thin_tube", "blob_chain", "arc_tubes", "ellipsoid")
NUM_CLASSES = 1 + len(STRUCTURE_NAMES)


class VolumeFormatError(Exception):
    """Raised for malformed or truncated volume files."""


@dataclass
class Volume:
    data: np.ndarray                      # float32 [D,H,W] in [0,1]
    spacing: tuple = (1.0, 1.0, 1.0)


@dataclass
class LabelMap:
    data: np.ndarray                      # uint8 [D,H,W], classes 0..5
    spacing: tuple = (1.0, 1.0, 1.0)


@dataclass
class PhantomSpec:
    """Geometry and intensity parameters of one synthetic phantom.

    Radii are fractions of the extent; ``radius_floor_vox`` keeps thin
    structures voxelizable at small extents. The thin tube must keep the
    strictly smallest radius on both scales.
    """
    extent: int = 32
    background: float = 0.15
    intensities: tuple = (0.78, 0.52, 0.97, 0.65, 0.40)
    noise_sigma: float = 0.03
    spiral_radius: float = 0.045
    thin_tube_radius: float = 0.022
    blob_radius: float = 0.036
    arc_radius: float = 0.028
    radius_floor_vox: tuple = (0.90, 0.62, 0.80, 0.80)

    def validate(self):
        if self.extent < 16:
            raise ValueError(
                f"extent {self.extent} too small to place all structures "
                f"(need >= 16)")
        others = (self.spiral_radius, self.blob_radius, self.arc_radius)
        if not all(self.thin_tube_radius < r for r in others):
            raise ValueError("thin tube must have the strictly smallest radius")
        floors = self.radius_floor_vox
        if not all(floors[1] < f for f in (floors[0], floors[2], floors[3])):
            raise ValueError("thin tube voxel floor must stay the smallest")
        if len(self.intensities) != 5:
            raise ValueError("need one intensity band per structure")


def _jitter(rng: Rng, scale: float):
    return rng.uniform(-scale, scale, 3)


def _stamp_balls(labels, centers_vox, radius_vox, cls):
    """Mark voxels within radius of any center; later classes win ties."""
    e = labels.shape[0]
    r = float(radius_vox)
    ri = int(np.ceil(r))
    for c in centers_vox:
        lo = np.maximum(np.floor(c - r - 0.5).astype(int), 0)
        hi = np.minimum(np.ceil(c + r + 0.5).astype(int) + 1, e)
        if np.any(lo >= hi):
            continue
        zz, yy, xx = np.mgrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        d2 = ((zz + 0.5 - c[0]) ** 2 + (yy + 0.5 - c[1]) ** 2
              + (xx + 0.5 - c[2]) ** 2)
        sub = labels[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        sub[d2 <= r * r] = cls
    del ri


def _bezier(p0, p1, p2, ts):
    p0, p1, p2 = (np.asarray(p) for p in (p0, p1, p2))
    ts = ts[:, None]
    return ((1 - ts) ** 2) * p0 + 2 * ts * (1 - ts) * p1 + (ts ** 2) * p2


def phantom_generate(spec: PhantomSpec, rng: Rng) -> tuple[Volume, LabelMap]:
    """Deterministic five-structure phantom for the given spec and rng."""
    spec.validate()
    e = spec.extent
    labels = np.zeros((e, e, e), dtype=np.uint8)

    def vox(points):
        return np.asarray(points) * e

    def radius(frac, floor):
        return max(frac * e, floor)

    f_spiral, f_thin, f_blob, f_arc = spec.radius_floor_vox

    # 1: spiral tube
    center = np.array([0.33, 0.33, 0.35]) + _jitter(rng, 0.02)
    ts = np.linspace(0.0, 1.0, 160)
    theta = 2.5 * np.pi * ts
    rho = 0.05 + 0.065 * ts
    pts = np.stack([center[0] + 0.10 * (ts - 0.5),
                    center[1] + rho * np.cos(theta),
                    center[2] + rho * np.sin(theta)], axis=1)
    _stamp_balls(labels, vox(pts), radius(spec.spiral_radius, f_spiral), 1)

    # 2: thin curved tube, strictly smallest radius
    p0 = np.array([0.22, 0.72, 0.30]) + _jitter(rng, 0.02)
    p1 = np.array([0.50, 0.88, 0.55]) + _jitter(rng, 0.02)
    p2 = np.array([0.78, 0.70, 0.42]) + _jitter(rng, 0.02)
    pts = _bezier(p0, p1, p2, np.linspace(0.0, 1.0, 200))
    _stamp_balls(labels, vox(pts), radius(spec.thin_tube_radius, f_thin), 2)

    # 3: chain of small blobs
    start = np.array([0.62, 0.25, 0.62]) + _jitter(rng, 0.02)
    step = np.array([0.068, 0.016, 0.010])
    centers = [start + i * step for i in range(4)]
    _stamp_balls(labels, vox(centers), radius(spec.blob_radius, f_blob), 3)

    # 4: three orthogonal arc tubes
    c4 = np.array([0.70, 0.68, 0.32]) + _jitter(rng, 0.02)
    angles = np.linspace(0.0, 2 * np.pi * (285.0 / 360.0), 140)
    big_r = 0.085
    arcs = []
    cos, sin = np.cos(angles), np.sin(angles)
    arcs.append(np.stack([c4[0] + big_r * cos, c4[1] + big_r * sin,
                          np.full_like(cos, c4[2])], axis=1))
    arcs.append(np.stack([np.full_like(cos, c4[0]), c4[1] + big_r * cos,
                          c4[2] + big_r * sin], axis=1))
    arcs.append(np.stack([c4[0] + big_r * sin, np.full_like(cos, c4[1]),
                          c4[2] + big_r * cos], axis=1))
    r4 = radius(spec.arc_radius, f_arc)
    for arc in arcs:
        _stamp_balls(labels, vox(arc), r4, 4)

    # 5: ellipsoid blob
    c5 = (np.array([0.30, 0.66, 0.68]) + _jitter(rng, 0.02)) * e
    semi = np.array([0.068, 0.050, 0.058]) * e
    semi = np.maximum(semi, 1.05)
    zz, yy, xx = np.mgrid[0:e, 0:e, 0:e].astype(np.float64) + 0.5
    q = (((zz - c5[0]) / semi[0]) ** 2 + ((yy - c5[1]) / semi[1]) ** 2
         + ((xx - c5[2]) / semi[2]) ** 2)
    labels[q <= 1.0] = 5

    intensity = np.full((e, e, e), spec.background, dtype=np.float64)
    for cls, band in enumerate(spec.intensities, start=1):
        intensity[labels == cls] = band
    intensity += spec.noise_sigma * rng.standard_normal((e, e, e), np.float64)
    lo, hi = intensity.min(), intensity.max()
    intensity = (intensity - lo) / (hi - lo)
    return Volume(intensity.astype(np.float32)), LabelMap(labels)


def mirror_lr(volume: Volume, labels: LabelMap) -> tuple[Volume, LabelMap]:
    """Reflect both grids along the lateral (last) axis; an involution."""
    return (Volume(np.ascontiguousarray(volume.data[:, :, ::-1]), volume.spacing),
            LabelMap(np.ascontiguousarray(labels.data[:, :, ::-1]), labels.spacing))


def _shift_filled(arr: np.ndarray, shifts, fill) -> np.ndarray:
    out = np.full_like(arr, fill)
    src = []
    dst = []
    for extent, s in zip(arr.shape, shifts):
        src.append(slice(max(0, -s), extent - max(0, s)))
        dst.append(slice(max(0, s), extent + min(0, s)))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def random_axis_shift(volume: Volume, labels: LabelMap, rng: Rng,
                      frac_range=(0.083, 0.104)) -> tuple[Volume, LabelMap]:
    """Translate both grids by the same random integer offsets.

    Per axis the magnitude is round(f * extent) with f drawn uniformly from
    ``frac_range`` and a random sign; vacated voxels become zero intensity
    and background labels.
    """
    shifts = []
    for extent in volume.data.shape:
        mag = int(round(rng.uniform(*frac_range) * extent))
        sign = 1 if rng.integers(0, 2) else -1
        shifts.append(sign * mag)
    return (Volume(_shift_filled(volume.data, shifts, 0.0), volume.spacing),
            LabelMap(_shift_filled(labels.data, shifts, 0), labels.spacing))


# ---------------------------------------------------------------------------
# Volume files
# ---------------------------------------------------------------------------

def write_volume(path, obj: Volume | LabelMap):
    data = obj.data
    if data.ndim != 3:
        raise VolumeFormatError(f"expected 3-D data, got shape {data.shape}")
    if data.dtype == np.float32:
        code = DTYPE_INTENSITY
        payload = data.astype("<f4", copy=False).tobytes()
    elif data.dtype == np.uint8:
        code = DTYPE_LABELS
        payload = data.tobytes()
    else:
        raise VolumeFormatError(f"unsupported dtype {data.dtype}")
    with open(path, "wb") as f:
        f.write(VOLUME_MAGIC)
        f.write(struct.pack("<I", VOLUME_VERSION))
        f.write(struct.pack("<I", code))
        f.write(struct.pack("<I", 3))
        f.write(struct.pack("<3Q", *data.shape))
        f.write(struct.pack("<3f", *obj.spacing))
        f.write(payload)


def read_volume(path) -> Volume | LabelMap:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != VOLUME_MAGIC:
        raise VolumeFormatError(
            f"bad magic {raw[:8]!r}, expected {VOLUME_MAGIC!r}")
    header = struct.calcsize("<III3Q3f")
    if len(raw) < 8 + header:
        raise VolumeFormatError(
            f"truncated header: have {len(raw)} bytes, need {8 + header}")
    version, code, rank, d, h, w, s0, s1, s2 = struct.unpack(
        "<III3Q3f", raw[8:8 + header])
    if version != VOLUME_VERSION:
        raise VolumeFormatError(f"unsupported version {version}")
    if rank != 3:
        raise VolumeFormatError(f"unsupported rank {rank}")
    count = d * h * w
    if code == DTYPE_INTENSITY:
        itemsize, dtype = 4, "<f4"
    elif code == DTYPE_LABELS:
        itemsize, dtype = 1, np.uint8
    else:
        raise VolumeFormatError(f"unknown dtype code {code}")
    expected = 8 + header + count * itemsize
    if len(raw) != expected:
        raise VolumeFormatError(
            f"payload size mismatch: expected {expected} bytes total, "
            f"got {len(raw)}")
    data = np.frombuffer(raw[8 + header:], dtype=dtype).reshape(d, h, w)
    spacing = (s0, s1, s2)
    if code == DTYPE_INTENSITY:
        return Volume(data.astype(np.float32), spacing)
    return LabelMap(data.copy(), spacing)


# ---------------------------------------------------------------------------
# Dataset directory conventions
# ---------------------------------------------------------------------------

@dataclass
class Case:
    name: str
    volume_path: str
    labels_path: str


def case_paths(directory, name):
    return (os.path.join(directory, f"{name}.vol"),
            os.path.join(directory, f"{name}.seg"))


def list_cases(directory) -> list[Case]:
    names = []
    for fn in sorted(os.listdir(directory)):
        if fn.endswith(".vol"):
            name = fn[:-4]
            vol, seg = case_paths(directory, name)
            if os.path.exists(seg):
                names.append(Case(name, vol, seg))
    return names


_MIRROR_RE = re.compile(r"^(?P<base>.+)m$")


def mirror_pairs(names) -> list[tuple[int, int]]:
    """Indices of (original, mirrored) cases; 'name' pairs with 'namem'."""
    index = {n: i for i, n in enumerate(names)}
    pairs = []
    for i, n in enumerate(names):
        m = _MIRROR_RE.match(n)
        if m and m.group("base") in index:
            pairs.append((index[m.group("base")], i))
    return pairs


def kfold_split(n_items: int, k: int = 4, rng: Rng | None = None,
                pairs=None) -> list[tuple[list, list]]:
    """Partition items into k validation folds, keeping paired items together.

    Returns one (train_indices, val_indices) tuple per fold; validation sets
    are disjoint and cover all items. Items linked through ``pairs`` always
    share a fold, which guards mirrored copies against train/val leakage.
    """
    if rng is None:
        rng = Rng(0)
    if n_items < k:
        raise ValueError(f"cannot make {k} folds from {n_items} items")
    parent = list(range(n_items))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in (pairs or []):
        parent[find(a)] = find(b)
    groups = {}
    for i in range(n_items):
        groups.setdefault(find(i), []).append(i)
    group_list = [groups[key] for key in sorted(groups, key=lambda r: min(groups[r]))]
    if len(group_list) < k:
        raise ValueError(
            f"only {len(group_list)} independent groups for {k} folds")
    order = rng.permutation(len(group_list))
    folds = [[] for _ in range(k)]
    for gi in order:
        smallest = min(range(k), key=lambda f: (len(folds[f]), f))
        folds[smallest].extend(group_list[gi])
    out = []
    all_items = set(range(n_items))
    for f in folds:
        val = sorted(f)
        train = sorted(all_items - set(val))
        out.append((train, val))
    return out
