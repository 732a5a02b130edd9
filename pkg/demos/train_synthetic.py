# %% [markdown]
# # Training on a synthetic scene
#
# Four classes, 16 bands, 64x64 pixels, 10% of the labelled pixels for
# training. Full-batch Adam steps keep the loss curve smooth. Expect a few
# minutes on one CPU core.

# %%
from dctmamba3d.model import MambaConfig, ModelConfig, OptimConfig
from dctmamba3d.ssdm import SsdmConfig
from dctmamba3d.synth import generate_scene
from dctmamba3d.train import moving_average, run_experiment

cube = generate_scene(4, 16, 64, 64, 0.9, seed=0)
config = ModelConfig(num_classes=4, bands=16, ssdm=SsdmConfig(patch_spatial=7), mamba=MambaConfig(16, 4),
                     optim=OptimConfig(epochs=100, batch_size=4096, lr=3e-3))
exp = run_experiment(cube, config, train_fraction=0.10, split_seed=0)

# %%
curve = exp.result.curve
print("train patches: %d, test patches: %d" % (len(exp.train_set), len(exp.test_set)))
print("loss %.3f -> %.3f over %d steps" % (curve[0], curve[-1], len(curve)))
ma = moving_average(curve, 20)
print("20-step moving average never rises:", bool((ma[1:] <= ma[:-1]).all()))

# %%
sc = exp.scores
print("OA %.2f  AA %.2f  Kappa %.2f" % (100 * sc.oa, 100 * sc.aa, 100 * sc.kappa))
print(exp.cm)
