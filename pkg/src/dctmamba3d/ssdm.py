"""Spectral-spatial decorrelation: learnable stem plus the frozen 3-D DCT filter bank."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dct import DctBasis3D, basis_as_filter_bank, make_basis
from .nn import Module, broadcast_axis, parameter
from .tensor import Tensor


@dataclass
class SsdmConfig:
    stem_channels: int = 27
    patch_spatial: int = 13
    dct_extents: tuple = (3, 3, 3)
    norm_eps: float = 1e-5

    def __post_init__(self):
        self.dct_extents = tuple(self.dct_extents)
        if self.patch_spatial < 1 or self.patch_spatial % 2 == 0:
            raise ValueError(f"patch_spatial must be a positive odd integer, got {self.patch_spatial}")
        if self.stem_channels < 1:
            raise ValueError(f"stem_channels must be positive, got {self.stem_channels}")
        if self.norm_eps <= 0:
            raise ValueError("norm_eps must be positive")
        n_freq = int(np.prod(self.dct_extents))
        if self.stem_channels != n_freq:
            raise ValueError(f"stem_channels ({self.stem_channels}) must equal the number of "
                             f"DCT basis kernels ({n_freq})")


class Stem(Module):
    """Pointwise 3-D conv (1 -> S channels), channel layer norm, SiLU."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.weight = parameter(rng.normal(0.0, 1.0, (channels, 1, 1, 1, 1)), dtype)
        # a zero bias would make the channel norm depend only on sign(x)
        self.bias = parameter(rng.normal(0.0, 1.0, channels), dtype)
        self.norm_weight = parameter(np.ones(channels), dtype)
        self.norm_bias = parameter(np.zeros(channels), dtype)

    def __call__(self, patch: Tensor) -> Tensor:
        if patch.ndim != 5 or patch.shape[1] != 1:
            raise T.ShapeError(f"stem expects [B, 1, C, h, w], got {patch.shape}")
        z = T.conv3d(patch, self.weight)
        shape = z.shape
        z = z + broadcast_axis(self.bias, shape, 1)
        z = T.layer_norm(z, axis=1, eps=self.eps)
        z = z * broadcast_axis(self.norm_weight, shape, 1) + broadcast_axis(self.norm_bias, shape, 1)
        return T.silu(z)


def ssdm_forward(stem_out: Tensor, bank: Tensor) -> Tensor:
    """Average the stem channels into one plane, then apply the frozen DCT bank.

    Reflect padding of 1 with stride 1 keeps the (spectral, spatial, spatial)
    extents; the result has one channel per basis kernel.
    """
    if bank.requires_grad:
        raise ValueError("DCT filter bank must be frozen")
    if tuple(bank.shape[2:]) != (3, 3, 3):
        raise T.ShapeError(f"ssdm_forward needs a 3x3x3 basis, got kernels of {bank.shape[2:]}")
    plane = stem_out.mean(axis=1, keepdims=True)
    return T.conv3d(plane, bank, stride=1, padding=1, padding_mode="reflect")


class SSDM(Module):
    """Stem followed by the decorrelating DCT filter bank; output is X_freq."""

    def __init__(self, config: SsdmConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.config = config
        self.basis: DctBasis3D = make_basis(*config.dct_extents)
        self.stem = Stem(config.stem_channels, rng, dtype, config.norm_eps)
        self.bank = basis_as_filter_bank(self.basis, dtype)

    def __call__(self, patch: Tensor) -> Tensor:
        return ssdm_forward(self.stem(patch), self.bank)


# -- rank correlation ---------------------------------------------------------------
def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks of a 1-d sample; tied values share their mean rank."""
    x = np.asarray(x)
    n = x.shape[0]
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, sx[1:] != sx[:-1]])
    ends = np.r_[starts[1:], n]
    run_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(n)
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks


def spearman_matrix(samples: np.ndarray) -> np.ndarray:
    """Channel-pair Spearman correlation of a ``(samples, channels)`` array.

    Constant channels have no defined correlation; they get 0 off the diagonal.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ValueError(f"expected (samples, channels), got shape {samples.shape}")
    n, c = samples.shape
    if n < 2:
        raise ValueError(f"Spearman correlation needs at least 2 samples, got {n}")
    r = np.column_stack([average_ranks(samples[:, j]) for j in range(c)])
    r -= r.mean(axis=0)
    norm = np.sqrt(np.sum(r * r, axis=0))
    ok = norm > 0
    r[:, ok] /= norm[ok]
    rho = r.T @ r
    np.clip(rho, -1.0, 1.0, out=rho)
    np.fill_diagonal(rho, 1.0)
    return rho


def channels_last_samples(x, channel_axis: int) -> np.ndarray:
    """Flatten every axis except ``channel_axis`` into samples."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    arr = np.moveaxis(arr, channel_axis, -1)
    return arr.reshape(-1, arr.shape[-1])


def band_correlation(before, after) -> tuple[np.ndarray, np.ndarray]:
    """Spearman matrices for raw bands and for decorrelated channels.

    Both inputs are ``(samples, channels)``.
    """
    return spearman_matrix(channels_last_samples(before, -1)), spearman_matrix(channels_last_samples(after, -1))


def mean_abs_offdiag(matrix: np.ndarray) -> float:
    m = np.asarray(matrix)
    k = m.shape[0]
    if k < 2:
        return 0.0
    mask = ~np.eye(k, dtype=bool)
    return float(np.mean(np.abs(m[mask])))


def write_heatmap_csv(matrix: np.ndarray, path) -> None:
    m = np.asarray(matrix)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["band"] + [str(j) for j in range(m.shape[1])])
        for i, row in enumerate(m):
            w.writerow([str(i)] + [repr(float(v)) for v in row])


def read_heatmap_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in row[1:]] for row in rows[1:]])
