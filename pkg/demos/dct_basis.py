# %% [markdown]
# # The 3-D DCT basis behind the SSDM filter bank
#
# A 3x3x3 orthonormal DCT-II basis has 27 kernels. We check that they are
# orthonormal, look at the zig-zag order and confirm that energy is kept.

# %%
import numpy as np

from dctmamba3d.dct import dct3_direct, dct3_forward, dct3_inverse, make_basis

basis = make_basis(3, 3, 3)
print("kernels:", basis.kernels.shape)
print("max |gram - I|:", np.abs(basis.gram() - np.eye(27)).max())
print("first frequency triples in zig-zag order:", basis.ordering[:8])

# %% [markdown]
# The DC kernel is constant; every other kernel sums to zero.

# %%
sums = basis.kernels.reshape(27, -1).sum(axis=1)
print("DC kernel sum: %.4f, max |sum| of the rest: %.1e" % (sums[0], np.abs(sums[1:]).max()))

# %% [markdown]
# Forward and inverse transforms on a random 4x5x6 block.

# %%
rng = np.random.default_rng(0)
block = rng.normal(size=(4, 5, 6))
b = make_basis(*block.shape)
coeffs = dct3_forward(block, b)
print("round trip error:", np.abs(dct3_inverse(coeffs, b) - block).max())
print("separable vs direct:", np.abs(coeffs.coefficients - dct3_direct(block)).max())
print("energy in / out: %.6f / %.6f" % ((block ** 2).sum(), (coeffs.coefficients ** 2).sum()))
