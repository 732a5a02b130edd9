"""DCT-Mamba3D: hyperspectral patch classification with a frozen 3-D DCT decorrelation
stage, bidirectional selective state-space scans, and a numpy autodiff core."""
from .dct import DctBasis3D, dct3_forward, dct3_inverse, make_basis
from .data import HsiCube, PatchSet, extract_patches, load_container, save_container, stratified_split
from .metrics import confusion, scores
from .model import ABLATIONS, DCTMamba3D, MambaConfig, ModelConfig, OptimConfig, count_flops_params
from .ssdm import SsdmConfig
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS", "DCTMamba3D", "DctBasis3D", "HsiCube", "MambaConfig", "ModelConfig", "OptimConfig",
    "PatchSet", "SsdmConfig", "Tensor", "confusion", "count_flops_params", "dct3_forward", "dct3_inverse",
    "extract_patches", "load_container", "make_basis", "save_container", "scores", "stratified_split",
]
