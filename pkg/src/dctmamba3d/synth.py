"""Synthetic hyperspectral scenes for desk-scale experiments.

Each class gets a smooth spectral signature; pixels carry their class
signature plus AR(1) noise along the band axis, so adjacent bands of the
noise have correlation ``rho``. Labels form Voronoi blobs, a few of which are
left as background (label 0).
"""
from __future__ import annotations

import numpy as np

from .data import HsiCube


def class_signatures(k: int, c: int, rng: np.random.Generator) -> np.ndarray:
    grid = np.linspace(0.0, 1.0, c)
    base = 0.3 + 0.1 * np.sin(2 * np.pi * grid)
    sigs = np.empty((k + 1, c))
    for i in range(k + 1):
        s = base.copy()
        for _ in range(3):
            centre = rng.uniform(0, 1)
            width = rng.uniform(0.08, 0.25)
            s += rng.uniform(-0.15, 0.15) * np.exp(-0.5 * ((grid - centre) / width) ** 2)
        sigs[i] = s
    return sigs  # row 0 is the background signature


def ar1_noise(shape: tuple, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance AR(1) process along the last axis."""
    eps = rng.standard_normal(shape)
    out = np.empty(shape)
    out[..., 0] = eps[..., 0]
    innov = np.sqrt(1.0 - rho * rho)
    for j in range(1, shape[-1]):
        out[..., j] = rho * out[..., j - 1] + innov * eps[..., j]
    return out


def voronoi_labels(h: int, w: int, k: int, rng: np.random.Generator, cells_per_class: int = 3,
                   background_cells: int | None = None) -> np.ndarray:
    n_bg = max(1, k // 2) if background_cells is None else background_cells
    cell_class = np.concatenate([np.repeat(np.arange(1, k + 1), cells_per_class), np.zeros(n_bg, int)])
    rng.shuffle(cell_class)
    while True:
        seeds = rng.uniform(0, 1, (cell_class.size, 2)) * (h, w)
        rr, cc = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
        d2 = (rr[..., None] - seeds[:, 0]) ** 2 + (cc[..., None] - seeds[:, 1]) ** 2
        labels = cell_class[np.argmin(d2, axis=-1)]
        if np.all(np.isin(np.arange(1, k + 1), labels)):
            return labels


def generate_scene(classes: int, bands: int, height: int, width: int, band_correlation: float,
                   seed: int = 0, noise_std: float = 0.05) -> HsiCube:
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if not 0 <= band_correlation < 1:
        raise ValueError(f"band correlation must lie in [0, 1), got {band_correlation}")
    if bands < 2 or height < 1 or width < 1:
        raise ValueError("bands must be >= 2 and the scene non-empty")
    rng = np.random.default_rng(seed)
    sigs = class_signatures(classes, bands, rng)
    labels = voronoi_labels(height, width, classes, rng)
    noise = ar1_noise((height, width, bands), band_correlation, rng)
    cube = sigs[labels] + noise_std * noise
    names = [f"class_{i}" for i in range(1, classes + 1)]
    wavelengths = [float(v) for v in np.round(np.linspace(400.0, 2500.0, bands), 3)]
    return HsiCube(cube.astype(np.float32), labels, names, wavelengths)


def adjacent_band_correlation(cube: HsiCube, within_class: bool = True) -> float:
    """Mean sample correlation between neighbouring bands.

    With ``within_class`` the per-label mean spectrum is removed first, which
    isolates the noise process the generator's ``rho`` describes.
    """
    x = cube.reflectance.reshape(-1, cube.bands).astype(np.float64)
    if within_class:
        lab = cube.labels.reshape(-1)
        x = x.copy()
        for k in np.unique(lab):
            x[lab == k] -= x[lab == k].mean(axis=0)
    corr = np.corrcoef(x, rowvar=False)
    return float(np.mean(np.diag(corr, 1)))
