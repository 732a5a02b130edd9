# %% [markdown]
# # Parameter and FLOP budget per module

# %%
from dctmamba3d.model import MambaConfig, ModelConfig, count_flops_params
from dctmamba3d.ssdm import SsdmConfig

for d in (16, 64):
    config = ModelConfig(num_classes=16, bands=200, ssdm=SsdmConfig(patch_spatial=7), mamba=MambaConfig(d, 16))
    counts = count_flops_params(config)
    print("d_model =", d)
    for module, row in counts.items():
        print("  %-8s %14s flops %10s params" % (module, f"{row['flops']:,}", f"{row['params']:,}"))
