"""Orthonormal 3-D DCT-II: basis construction, whole-block transforms, filter bank."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


def alpha(n: int, N: int) -> float:
    """DCT-II normalisation factor for frequency ``n`` on an axis of length ``N``."""
    return np.sqrt(1.0 / N) if n == 0 else np.sqrt(2.0 / N)


def dct_matrix(N: int) -> np.ndarray:
    """Row ``n`` holds the 1-D basis vector ``alpha(n) * cos(pi * (2x + 1) * n / 2N)``."""
    if N < 1:
        raise ValueError(f"DCT extent must be >= 1, got {N}")
    n = np.arange(N)[:, None]
    x = np.arange(N)[None, :]
    m = np.cos(np.pi * (2 * x + 1) * n / (2 * N))
    m[0] *= np.sqrt(1.0 / N)
    m[1:] *= np.sqrt(2.0 / N)
    return m


def zigzag_order(extents) -> list[tuple[int, int, int]]:
    """Frequency triples sorted by total frequency, ties lexicographic."""
    triples = itertools.product(*(range(n) for n in extents))
    return sorted(triples, key=lambda t: (sum(t), t))


@dataclass(frozen=True)
class DctBasis3D:
    extents: tuple
    kernels: np.ndarray = field(repr=False)  # (count, N_d, N_h, N_w), zig-zag ordered
    ordering: tuple = field(repr=False)
    matrices: tuple = field(repr=False)

    @property
    def count(self) -> int:
        return len(self.ordering)

    def kernel(self, i: int, j: int, k: int) -> np.ndarray:
        return self.kernels[self.ordering.index((i, j, k))]

    def gram(self) -> np.ndarray:
        flat = self.kernels.reshape(self.count, -1)
        return flat @ flat.T


def make_basis(n_d: int, n_h: int, n_w: int) -> DctBasis3D:
    extents = (int(n_d), int(n_h), int(n_w))
    if min(extents) < 1:
        raise ValueError(f"basis extents must be >= 1, got {extents}")
    md, mh, mw = (dct_matrix(n) for n in extents)
    order = zigzag_order(extents)
    kernels = np.stack([np.einsum("x,y,z->xyz", md[i], mh[j], mw[k]) for i, j, k in order])
    kernels.setflags(write=False)
    return DctBasis3D(extents, kernels, tuple(order), (md, mh, mw))


@dataclass
class FreqCube:
    """Coefficients indexed by frequency triple: ``coefficients[i, j, k]``."""

    coefficients: np.ndarray
    extents: tuple

    def layout(self, position: tuple) -> tuple:
        return tuple(position)


def _as_array(block) -> np.ndarray:
    return block.data if isinstance(block, Tensor) else np.asarray(block, dtype=np.float64)


def dct3_forward(block, basis: DctBasis3D) -> FreqCube:
    x = _as_array(block)
    if x.shape != basis.extents:
        raise ValueError(f"block extents {x.shape} do not match basis extents {basis.extents}")
    md, mh, mw = basis.matrices
    # three 1-D passes
    c = np.tensordot(md, x, axes=([1], [0]))
    c = np.tensordot(mh, c, axes=([1], [1])).transpose(1, 0, 2)
    c = np.tensordot(c, mw, axes=([2], [1]))
    return FreqCube(c, basis.extents)


def dct3_inverse(freq: FreqCube, basis: DctBasis3D) -> np.ndarray:
    if tuple(freq.extents) != basis.extents or freq.coefficients.shape != basis.extents:
        raise ValueError(f"frequency layout {freq.coefficients.shape} does not match basis {basis.extents}")
    md, mh, mw = basis.matrices
    c = freq.coefficients
    x = np.tensordot(md.T, c, axes=([1], [0]))
    x = np.tensordot(mh.T, x, axes=([1], [1])).transpose(1, 0, 2)
    return np.tensordot(x, mw.T, axes=([2], [1]))


def dct3_direct(block) -> np.ndarray:
    """Literal triple sum over samples for every frequency triple (slow reference)."""
    x = _as_array(block)
    nd, nh, nw = x.shape
    out = np.zeros(x.shape)
    gx, gy, gz = np.meshgrid(np.arange(nd), np.arange(nh), np.arange(nw), indexing="ij")
    for i in range(nd):
        for j in range(nh):
            for k in range(nw):
                psi = (alpha(i, nd) * alpha(j, nh) * alpha(k, nw)
                       * np.cos(np.pi * (2 * gx + 1) * i / (2 * nd))
                       * np.cos(np.pi * (2 * gy + 1) * j / (2 * nh))
                       * np.cos(np.pi * (2 * gz + 1) * k / (2 * nw)))
                out[i, j, k] = np.sum(x * psi)
    return out


def basis_as_filter_bank(basis: DctBasis3D, dtype=np.float32) -> Tensor:
    """Frozen ``[count, 1, N_d, N_h, N_w]`` kernel tensor in zig-zag order."""
    bank = basis.kernels[:, None].astype(dtype)
    return Tensor(bank, requires_grad=False, dtype=dtype, name="dct_bank")
