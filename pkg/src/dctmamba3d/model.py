"""Full classifier: SSDM -> 3-D Mamba -> global residual enhancement -> linear head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .mamba import Mamba3DBlock
from .nn import Linear, Module, parameter
from .ssdm import SSDM, SsdmConfig, ssdm_forward
from .tensor import Tensor

ABLATIONS = ("full", "ssdm_only", "mamba_only", "no_gre")


@dataclass
class MambaConfig:
    d_model: int = 64
    d_state: int = 16
    depth: int = 1

    def __post_init__(self):
        if min(self.d_model, self.d_state, self.depth) < 1:
            raise ValueError("d_model, d_state and depth must be positive")


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    checkpoint_every: int = 0  # steps; 0 disables periodic checkpoints


@dataclass
class ModelConfig:
    num_classes: int = 2
    bands: int = 0
    ssdm: SsdmConfig = field(default_factory=SsdmConfig)
    mamba: MambaConfig = field(default_factory=MambaConfig)
    gre_alpha_init: float = 0.1
    lambda_reg: float = 0.0
    ablation: str = "full"
    optim: OptimConfig = field(default_factory=OptimConfig)
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.ssdm, dict):
            self.ssdm = SsdmConfig(**self.ssdm)
        if isinstance(self.mamba, dict):
            self.mamba = MambaConfig(**self.mamba)
        if isinstance(self.optim, dict):
            self.optim = OptimConfig(**self.optim)
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.lambda_reg < 0:
            raise ValueError(f"lambda_reg must be >= 0, got {self.lambda_reg}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def n_freq(self) -> int:
        return int(np.prod(self.ssdm.dct_extents))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ssdm"]["dct_extents"] = list(self.ssdm.dct_extents)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def gre_fuse(y_mamba: Tensor, x_freq: Tensor, alpha: Tensor, proj: Linear) -> Tensor:
    """``y_mamba + alpha * proj(x_freq)``, both channels-last."""
    projected = proj(x_freq)
    if projected.shape != y_mamba.shape:
        raise T.ShapeError(f"GRE layout mismatch: {projected.shape} vs {y_mamba.shape}")
    return y_mamba + alpha * projected


def pool(features: Tensor) -> Tensor:
    """Global average over (band, row, col) of a channels-last volume."""
    return features.mean(axis=(1, 2, 3))


def correlation_penalty(features: Tensor, eps: float = 1e-8) -> Tensor:
    """Mean squared off-diagonal Pearson correlation between feature channels."""
    b, d = features.shape
    if b < 2:
        raise ValueError("correlation penalty needs a batch of at least 2")
    if d < 2:
        return T.scale(features.sum(), 0.0)
    centred = features - features.mean(axis=0, keepdims=True).expand(features.shape)
    std = T.sqrt(T.add((centred * centred).mean(axis=0, keepdims=True), eps))
    z = centred / std.expand(features.shape)
    corr = T.scale(z.transpose() @ z, 1.0 / b)
    mask = Tensor(1.0 - np.eye(d), dtype=features.dtype)
    off = corr * mask
    return T.scale((off * off).sum(), 1.0 / (d * (d - 1)))


def loss_fn(logits: Tensor, labels, features: Tensor | None = None, lambda_reg: float = 0.0) -> Tensor:
    ce = T.cross_entropy(logits, labels)
    if lambda_reg == 0:
        return ce
    if features is None:
        raise ValueError("features are required when lambda_reg > 0")
    if features.shape[0] < 2:
        raise ValueError("batch size must be >= 2 when lambda_reg > 0")
    return ce + T.scale(correlation_penalty(features), lambda_reg)


class DCTMamba3D(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        super().__init__()
        if config.bands < 2:
            raise ValueError(f"model needs the number of bands (>= 2), got {config.bands}")
        rng = np.random.default_rng(config.optim.seed) if rng is None else rng
        dtype = config.np_dtype
        self.config = config
        m = config.mamba
        self.ssdm = SSDM(config.ssdm, rng, dtype)
        feats = config.n_freq
        for i in range(m.depth):
            setattr(self, f"block{i}", Mamba3DBlock(config.bands, feats if i == 0 else m.d_model,
                                                     m.d_model, m.d_state, rng, dtype,
                                                     config.ssdm.norm_eps))
        self.gre_proj = Linear(feats, m.d_model, rng, dtype)
        self.alpha = parameter(np.asarray(config.gre_alpha_init), dtype)
        self.head = Linear(m.d_model, config.num_classes, rng, dtype)

    @property
    def blocks(self) -> list[Mamba3DBlock]:
        return [getattr(self, f"block{i}") for i in range(self.config.mamba.depth)]

    def features(self, patches: Tensor) -> Tensor:
        """F_out in channels-last layout ``[B, C, h, w, d_model]``."""
        mode = self.config.ablation
        stem_out = self.ssdm.stem(patches)
        if mode == "mamba_only":
            x = stem_out.transpose(0, 2, 3, 4, 1)
        else:
            x = ssdm_forward(stem_out, self.ssdm.bank).transpose(0, 2, 3, 4, 1)
        if mode == "ssdm_only":
            return self.gre_proj(x)
        y = x
        for block in self.blocks:
            y = block(y)
        if mode == "no_gre":
            return y
        return gre_fuse(y, x, self.alpha, self.gre_proj)

    def x_freq(self, patches: Tensor) -> Tensor:
        return ssdm_forward(self.ssdm.stem(patches), self.ssdm.bank)

    def __call__(self, patches: Tensor, return_features: bool = False):
        pooled = pool(self.features(patches))
        logits = self.head(pooled)
        return (logits, pooled) if return_features else logits

    def check_stability(self) -> None:
        for block in self.blocks:
            block.check_stability()

    def used_parameter_prefixes(self) -> list[str]:
        mode = self.config.ablation
        used = ["ssdm.", "head."]
        if mode != "ssdm_only":
            used += [f"block{i}." for i in range(self.config.mamba.depth)]
        if mode != "no_gre":
            used.append("gre_proj.")
        if mode not in ("no_gre", "ssdm_only"):
            used.append("alpha")
        return used


def build_ablation(config: ModelConfig, mode: str | None = None, rng=None) -> DCTMamba3D:
    """Wire the model for one ablation row (``mode`` overrides ``config.ablation``)."""
    if mode is not None:
        if mode not in ABLATIONS:
            raise ValueError(f"unknown ablation {mode!r}; expected one of {ABLATIONS}")
        config = ModelConfig.from_dict({**config.to_dict(), "ablation": mode})
    return DCTMamba3D(config, rng)


def classify(features: Tensor, head: Linear) -> Tensor:
    return head(pool(features))


# -- complexity ----------------------------------------------------------------------
def _linear_params(n_in: int, n_out: int, bias: bool = True) -> int:
    return n_in * n_out + (n_out if bias else 0)


def count_flops_params(config: ModelConfig, patch_spatial: int | None = None) -> dict:
    """Per-module multiply-accumulate and trainable-parameter counts for one patch.

    Counted MACs: convolutions, linear maps, and the two MACs per state entry
    per token of the scan (state update, output readout). Elementwise ops,
    norms and pooling are not counted. The frozen DCT bank contributes MACs
    but no trainable parameters.
    """
    p = config.ssdm.patch_spatial if patch_spatial is None else patch_spatial
    sites = p * p
    c = config.bands
    s = config.ssdm.stem_channels
    f = config.n_freq
    kvol = f  # kernel volume of the bank equals the number of kernels
    d, n, k = config.mamba.d_model, config.mamba.d_state, config.num_classes
    mode = config.ablation

    rows = {}
    ssdm_flops = s * c * sites
    if mode != "mamba_only":
        ssdm_flops += f * 1 * kvol * c * sites
    rows["ssdm"] = (ssdm_flops, 4 * s)

    mamba_flops = mamba_params = 0
    if mode != "ssdm_only":
        for i in range(config.mamba.depth):
            fin = f if i == 0 else d
            mamba_params += (_linear_params(c * fin, d) + _linear_params(fin, d) * 2)
            mamba_flops += sites * c * fin * d + c * fin * d + c * sites * fin * d
            ssm_params = 3 * d * n + d + _linear_params(d, d)
            mamba_params += 2 * ssm_params + 3 * d
            per_token = d * d + 2 * d * n + 2 * d * n
            mamba_flops += 2 * per_token * (sites + c)
    rows["mamba3d"] = (mamba_flops, mamba_params)

    if mode == "no_gre":
        rows["gre"] = (0, 0)
    else:
        gre_params = _linear_params(f, d) + (0 if mode == "ssdm_only" else 1)
        rows["gre"] = (c * sites * f * d, gre_params)
    rows["head"] = (d * k, _linear_params(d, k))
    rows["total"] = (sum(v[0] for v in rows.values()), sum(v[1] for v in rows.values()))
    return {name: {"flops": fl, "params": pa} for name, (fl, pa) in rows.items()}
