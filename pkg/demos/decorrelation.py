# %% [markdown]
# # Spectral decorrelation through the SSDM
#
# Neighbouring bands of a hyperspectral cube are strongly correlated. Passing
# the cube through the stem and the frozen DCT filter bank spreads it over 27
# frequency channels that are close to rank-uncorrelated.

# %%
import numpy as np

from dctmamba3d.cli import ssdm_channel_samples
from dctmamba3d.data import fit_band_stats
from dctmamba3d.model import DCTMamba3D, MambaConfig, ModelConfig
from dctmamba3d.ssdm import SsdmConfig, mean_abs_offdiag, spearman_matrix
from dctmamba3d.synth import adjacent_band_correlation, generate_scene

cube = generate_scene(4, 16, 64, 64, 0.95, seed=0)
print("adjacent-band correlation within classes: %.3f" % adjacent_band_correlation(cube))

# %%
pixels = cube.reflectance.reshape(-1, cube.bands)
raw = spearman_matrix(pixels)
print("raw bands, mean |off-diagonal| Spearman: %.3f" % mean_abs_offdiag(raw))

# %%
config = ModelConfig(num_classes=4, bands=16, ssdm=SsdmConfig(patch_spatial=7), mamba=MambaConfig(16, 4))
model = DCTMamba3D(config)
freq = ssdm_channel_samples(model, cube, fit_band_stats(pixels))
after = spearman_matrix(freq)
print("SSDM channels, mean |off-diagonal| Spearman: %.4f" % mean_abs_offdiag(after))

# %% [markdown]
# The largest leftover coupling, for the curious.

# %%
off = np.abs(after - np.diag(np.diag(after)))
i, j = np.unravel_index(off.argmax(), off.shape)
print("strongest pair: channels %d and %d, rho = %.3f" % (i, j, after[i, j]))
