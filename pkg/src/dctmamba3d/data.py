"""Hyperspectral scenes: container I/O, patch extraction, stratified split, normalisation."""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

HSIC_MAGIC = b"HSIC"
HSIC_VERSION = 1


class ContainerError(ValueError):
    """Base class for malformed HSIC containers."""


class BadMagicError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class ShapeMismatchError(ContainerError):
    pass


@dataclass
class HsiCube:
    reflectance: np.ndarray  # (H, W, C) float32
    labels: np.ndarray  # (H, W) int, 0 = background
    class_names: Optional[list] = None
    wavelengths: Optional[list] = None

    def __post_init__(self):
        self.reflectance = np.ascontiguousarray(self.reflectance, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels).astype(np.int64)
        if self.reflectance.ndim != 3:
            raise ValueError(f"reflectance must be H x W x C, got shape {self.reflectance.shape}")
        if self.labels.shape != self.reflectance.shape[:2]:
            raise ValueError(f"labels {self.labels.shape} do not match cube {self.reflectance.shape[:2]}")
        if not np.all(np.isfinite(self.reflectance)):
            raise ValueError("reflectance contains non-finite values")
        if self.labels.min() < 0:
            raise ValueError("labels must be >= 0")
        if self.class_names is not None and self.labels.max() > len(self.class_names):
            raise ValueError("labels exceed the declared number of classes")
        missing = [k for k in range(1, self.num_classes + 1) if not np.any(self.labels == k)]
        if missing:
            raise ValueError(f"declared classes without any pixel: {missing}")
        if self.wavelengths is not None and len(self.wavelengths) != self.bands:
            raise ValueError(f"{len(self.wavelengths)} wavelengths for {self.bands} bands")

    @property
    def height(self) -> int:
        return self.reflectance.shape[0]

    @property
    def width(self) -> int:
        return self.reflectance.shape[1]

    @property
    def bands(self) -> int:
        return self.reflectance.shape[2]

    @property
    def num_classes(self) -> int:
        if self.class_names is not None:
            return len(self.class_names)
        return int(self.labels.max())


# -- HSIC container -----------------------------------------------------------------
def encode_container(cube: HsiCube) -> bytes:
    h, w, c = cube.reflectance.shape
    header = {"H": h, "W": w, "C": c, "dtype": "float32",
              "class_names": cube.class_names, "wavelengths": cube.wavelengths}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    if cube.labels.max(initial=0) > 0xFFFF:
        raise ValueError("labels do not fit in u16")
    return b"".join([
        HSIC_MAGIC,
        struct.pack("<II", HSIC_VERSION, len(hb)),
        hb,
        cube.reflectance.astype("<f4").tobytes(),
        cube.labels.astype("<u2").tobytes(),
    ])


def save_container(cube: HsiCube, path) -> None:
    Path(path).write_bytes(encode_container(cube))


def decode_container(buf: bytes) -> HsiCube:
    if len(buf) < 4 or buf[:4] != HSIC_MAGIC:
        raise BadMagicError("not an HSIC container (bad magic)")
    if len(buf) < 12:
        raise TruncatedPayloadError("truncated payload: header length missing")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != HSIC_VERSION:
        raise ContainerError(f"unsupported HSIC version {version}")
    if len(buf) < 12 + hlen:
        raise TruncatedPayloadError("truncated payload: header cut short")
    try:
        header = json.loads(buf[12:12 + hlen].decode())
        h, w, c = int(header["H"]), int(header["W"]), int(header["C"])
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise ContainerError(f"malformed HSIC header: {exc}") from exc
    if header.get("dtype", "float32") != "float32":
        raise ContainerError(f"unsupported cube dtype {header.get('dtype')!r}")
    body = memoryview(buf)[12 + hlen:]
    expected = h * w * c * 4 + h * w * 2
    if len(body) != expected:
        cube_bytes = len(body) - h * w * 2
        if h * w and cube_bytes > 0 and cube_bytes % (h * w * 4) == 0:
            raise ShapeMismatchError(f"header declares {c} bands but payload holds "
                                     f"{cube_bytes // (h * w * 4)}")
        if len(body) < expected:
            raise TruncatedPayloadError(f"truncated payload: {len(body)} of {expected} bytes")
        raise ShapeMismatchError(f"payload has {len(body) - expected} unexpected trailing bytes")
    wl = header.get("wavelengths")
    if wl is not None and len(wl) != c:
        raise ShapeMismatchError(f"header lists {len(wl)} wavelengths for {c} bands")
    cube = np.frombuffer(body, dtype="<f4", count=h * w * c).reshape(h, w, c).astype(np.float32)
    labels = np.frombuffer(body, dtype="<u2", offset=h * w * c * 4).reshape(h, w)
    return HsiCube(cube, labels, header.get("class_names"), wl)


def load_container(path) -> HsiCube:
    return decode_container(Path(path).read_bytes())


def write_label_map_csv(coords: np.ndarray, labels: np.ndarray, path, extra: dict | None = None) -> None:
    """``row,col,label`` rows (plus any ``extra`` per-row columns)."""
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "label"] + list(extra))
        for i, (r, c) in enumerate(coords):
            w.writerow([int(r), int(c), int(labels[i])] + [int(v[i]) for v in extra.values()])


# -- patches -------------------------------------------------------------------------
@dataclass(frozen=True)
class PatchSet:
    patches: np.ndarray  # (N, 1, C, p, p)
    labels: np.ndarray  # (N,) in [0, K)
    coords: np.ndarray  # (N, 2) (row, col)
    split_tag: str = "all"
    num_classes: int = field(default=0)

    def __post_init__(self):
        for arr in (self.patches, self.labels, self.coords):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx: np.ndarray, tag: str) -> "PatchSet":
        idx = np.asarray(idx, dtype=np.intp)
        return PatchSet(self.patches[idx].copy(), self.labels[idx].copy(), self.coords[idx].copy(),
                        tag, self.num_classes)


def extract_patches(cube: HsiCube, patch_spatial: int, padding: str = "reflect",
                    reflectance: np.ndarray | None = None) -> PatchSet:
    """One ``p x p`` window per labelled pixel (row-major order), reflect-padded at borders."""
    if padding != "reflect":
        raise ValueError(f"unsupported padding {padding!r}")
    p = int(patch_spatial)
    if p < 1 or p % 2 == 0:
        raise ValueError(f"patch_spatial must be odd, got {p}")
    if p > 2 * min(cube.height, cube.width):
        raise ValueError(f"patch {p} is larger than twice the scene extent {cube.height}x{cube.width}")
    r = p // 2
    data = cube.reflectance if reflectance is None else reflectance
    padded = np.pad(data, ((r, r), (r, r), (0, 0)), mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (p, p), axis=(0, 1))  # (H, W, C, p, p)
    coords = np.argwhere(cube.labels != 0)
    patches = windows[coords[:, 0], coords[:, 1]][:, None].astype(np.float32)
    labels = cube.labels[coords[:, 0], coords[:, 1]] - 1
    return PatchSet(np.ascontiguousarray(patches), labels.astype(np.int64), coords, "all", cube.num_classes)


def stratified_split(patchset: PatchSet, train_fraction: float = 0.10, seed: int = 0,
                     num_classes: int | None = None) -> tuple[PatchSet, PatchSet]:
    """Per class, ``ceil(fraction * n_k)`` (at least one) samples go to train."""
    if not 0 < train_fraction <= 1:
        raise ValueError(f"train_fraction must be in (0, 1], got {train_fraction}")
    k = num_classes or patchset.num_classes or int(patchset.labels.max()) + 1
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for cls in range(k):
        members = np.flatnonzero(patchset.labels == cls)
        if members.size == 0:
            raise ValueError(f"class {cls} has no samples")
        # guard against 0.1 * 30 == 3.0000000000000004
        n_train = min(members.size, max(1, math.ceil(train_fraction * members.size - 1e-9)))
        perm = rng.permutation(members)
        train_idx.append(perm[:n_train])
        test_idx.append(perm[n_train:])
    tr = np.sort(np.concatenate(train_idx))
    te = np.sort(np.concatenate(test_idx))
    return patchset.subset(tr, "train"), patchset.subset(te, "test")


# -- normalisation -------------------------------------------------------------------
@dataclass
class BandStats:
    mean: np.ndarray
    std: np.ndarray


def fit_band_stats(pixels: np.ndarray) -> BandStats:
    """Per-band mean and population std of a ``(N, C)`` pixel array."""
    pixels = np.asarray(pixels, dtype=np.float64)
    return BandStats(pixels.mean(axis=0), pixels.std(axis=0))


def normalize(x: np.ndarray, stats: BandStats, band_axis: int = -1) -> np.ndarray:
    """Per-band standardisation; constant bands (std == 0) map to zeros."""
    x = np.asarray(x, dtype=np.float64)
    shape = [1] * x.ndim
    shape[band_axis] = -1
    mean = stats.mean.reshape(shape)
    std = stats.std.reshape(shape)
    safe = np.where(std > 0, std, 1.0)
    out = np.where(std > 0, (x - mean) / safe, 0.0)
    return out.astype(np.float32)


def train_pixel_stats(cube: HsiCube, train: PatchSet) -> BandStats:
    return fit_band_stats(cube.reflectance[train.coords[:, 0], train.coords[:, 1]])


def normalize_patches(ps: PatchSet, stats: BandStats) -> PatchSet:
    return PatchSet(normalize(ps.patches, stats, band_axis=2), ps.labels.copy(), ps.coords.copy(),
                    ps.split_tag, ps.num_classes)
