# %% [markdown]
# # File formats: HSIC containers, MAT-v5 input, DCM3 checkpoints

# %%
import tempfile
from pathlib import Path

import numpy as np
from scipy.io import savemat

from dctmamba3d.data import decode_container, encode_container, load_container
from dctmamba3d.matfile import load_mat_v5, mat_to_cube
from dctmamba3d.synth import generate_scene

tmp = Path(tempfile.mkdtemp())
cube = generate_scene(3, 5, 8, 8, 0.5, seed=1)
buf = encode_container(cube)
print("HSIC bytes: %d, magic %r" % (len(buf), buf[:4]))
print("re-encoding is byte identical:", encode_container(decode_container(buf)) == buf)

# %% [markdown]
# A MAT file written by scipy, read by our own level-5 parser.

# %%
savemat(tmp / "scene.mat", {"cube": cube.reflectance.astype(np.float64), "gt": cube.labels.astype(np.int32)})
arrays = load_mat_v5(tmp / "scene.mat")
print({k: v.shape for k, v in arrays.items()})
from_mat = mat_to_cube(arrays, "cube", "gt")
print("labels match:", np.array_equal(from_mat.labels, cube.labels))

# %% [markdown]
# The same conversion through the command line.

# %%
from dctmamba3d.cli import main

main(["convert", "--input", str(tmp / "scene.mat"), "--output", str(tmp / "scene.hsic"),
      "--cube-var", "cube", "--label-var", "gt"])
print(load_container(tmp / "scene.hsic").reflectance.shape)
