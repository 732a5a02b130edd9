"""3-D Mamba block: patch embeddings, bidirectional selective scans, gamma aggregation.

The selective scan follows the zero-order-hold discretisation used by
Mamba-style SSMs with a diagonal state matrix ``A = -exp(A_log)``::

    delta_t = softplus(W_delta u_t + b_delta)          (B, L, D)
    A_bar_t = exp(delta_t * A)                         (B, L, D, N)
    h_t     = A_bar_t * h_{t-1} + delta_t * B(u_t) * u_t
    y_t     = h_t . C(u_t) + D * u_t
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Linear, Module, broadcast_last, parameter
from .tensor import Tensor


class SsmBlockParams(Module):
    def __init__(self, d_model: int, d_state: int, rng: np.random.Generator, dtype=np.float32,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        self.d_model = d_model
        self.d_state = d_state
        self.A_log = parameter(np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_model, 1))), dtype)
        self.B_proj = Linear(d_model, d_state, rng, dtype, bias=False)
        self.C_proj = Linear(d_model, d_state, rng, dtype, bias=False)
        self.D_skip = parameter(np.ones(d_model), dtype)
        self.delta_proj = Linear(d_model, d_model, rng, dtype)
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), d_model))
        # inverse softplus so that softplus(bias) == dt at init
        self.delta_proj.bias.data[...] = (dt + np.log(-np.expm1(-dt))).astype(dtype)

    def state_matrix(self) -> np.ndarray:
        return -np.exp(self.A_log.data.astype(np.float64))

    def check_stability(self) -> None:
        """Raise if any diagonal entry of A is not finite and strictly negative.

        With softplus step sizes this keeps every exp(delta * A) inside (0, 1).
        """
        a = self.state_matrix()
        if not (np.all(np.isfinite(a)) and np.all(a < 0)):
            raise FloatingPointError("SSM state matrix left the stable region")


def scan_op(u: Tensor, delta: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor, D: Tensor) -> Tensor:
    """Fused discretise-and-scan over axis 1 with a hand-written backward pass.

    Shapes: u, delta ``(B, L, Dm)``; A ``(Dm, N)``; Bm, Cm ``(B, L, N)``; D ``(Dm,)``.
    """
    ud, dd, Ad, Bd, Cd, Dd = u.data, delta.data, A.data, Bm.data, Cm.data, D.data
    b, L, dm = ud.shape
    if L == 0:
        raise ValueError("selective scan needs a sequence of length >= 1")
    dA = np.exp(dd[..., None] * Ad)
    dBu = (dd * ud)[..., None] * Bd[:, :, None, :]
    hs = np.empty_like(dA)
    h = np.zeros_like(dA[:, 0])
    for t in range(L):
        h = dA[:, t] * h + dBu[:, t]
        hs[:, t] = h
    y = np.matmul(hs, Cd[..., None])[..., 0] + ud * Dd

    def vjp(g):
        gD = np.sum(g * ud, axis=(0, 1))
        gC = np.matmul(g[:, :, None, :], hs)[:, :, 0, :]
        ghs = np.empty_like(hs)
        acc = np.zeros_like(hs[:, 0])
        for t in range(L - 1, -1, -1):
            acc = g[:, t, :, None] * Cd[:, t, None, :] + (dA[:, t + 1] * acc if t + 1 < L else 0)
            ghs[:, t] = acc
        h_prev = np.concatenate([np.zeros_like(hs[:, :1]), hs[:, :-1]], axis=1)
        gx = ghs * h_prev * dA  # gradient wrt delta * A
        s = np.matmul(ghs, Bd[..., None])[..., 0]
        gdelta = np.sum(gx * Ad, axis=-1) + ud * s
        gA = np.einsum("bldn,bld->dn", gx, dd)
        gB = np.matmul((dd * ud)[:, :, None, :], ghs)[:, :, 0, :]
        gu = g * Dd + dd * s
        return gu, gdelta, gA, gB, gC, gD

    return Tensor.from_op("selective_scan", y, (u, delta, A, Bm, Cm, D), vjp)


def selective_scan(u: Tensor, params: SsmBlockParams, direction: str = "forward") -> Tensor:
    """Scan ``u[B, L, d_model]`` (already SiLU-activated) in one direction."""
    if u.ndim != 3 or u.shape[2] != params.d_model:
        raise T.ShapeError(f"selective_scan expects [B, L, {params.d_model}], got {u.shape}")
    if u.shape[1] == 0:
        raise ValueError("selective scan needs a sequence of length >= 1")
    if direction not in ("forward", "backward"):
        raise ValueError(f"unknown scan direction {direction!r}")
    if direction == "backward":
        u = T.flip(u, 1)
    delta = T.softplus(params.delta_proj(u))
    A = -T.exp(params.A_log)
    y = scan_op(u, delta, A, params.B_proj(u), params.C_proj(u), params.D_skip)
    return T.flip(y, 1) if direction == "backward" else y


def bidirectional_ssm(x: Tensor, params: SsmBlockParams, eps: float = 1e-5) -> Tensor:
    u = T.silu(x)
    return T.layer_norm(selective_scan(u, params, "forward") + selective_scan(u, params, "backward"),
                        axis=-1, eps=eps)


class PatchEmbeddings(Module):
    """Three learnable linear embeddings of a channels-last feature volume.

    Input ``x[B, C, h, w, F]``:

    * spatial: one token per site (row-major), features ``C * F`` -> d_model
    * spectral: one token per band, features averaged over sites, ``F`` -> d_model
    * residual: pointwise ``F`` -> d_model, layout preserved
    """

    def __init__(self, n_bands: int, n_features: int, d_model: int, rng, dtype=np.float32):
        super().__init__()
        self.spatial = Linear(n_bands * n_features, d_model, rng, dtype)
        self.spectral = Linear(n_features, d_model, rng, dtype)
        self.residual = Linear(n_features, d_model, rng, dtype)

    def __call__(self, x: Tensor):
        if x.ndim != 5:
            raise T.ShapeError(f"patch embeddings expect [B, C, h, w, F], got {x.shape}")
        b, c, h, w, f = x.shape
        sites = x.transpose(0, 2, 3, 1, 4).reshape(b, h * w, c * f)
        bands = x.mean(axis=(2, 3))
        return self.spatial(sites), self.spectral(bands), self.residual(x)


class AggregationParams(Module):
    def __init__(self, d_model: int, dtype=np.float32, branch_init: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma0 = parameter(np.ones(d_model), dtype)
        self.gamma1 = parameter(np.full(d_model, branch_init), dtype)
        self.gamma2 = parameter(np.full(d_model, branch_init), dtype)
        self.norm_eps = eps


def aggregate(h_spatial: Tensor, h_spectral: Tensor, x_residual: Tensor, params: AggregationParams) -> Tensor:
    """LN(g0 * x_residual + g1 * h_spatial + g2 * h_spectral) in the residual layout.

    Spatial tokens are unflattened to ``(h, w)`` and repeated over bands;
    spectral tokens are repeated over sites.
    """
    b, c, h, w, d = x_residual.shape
    if h_spatial.shape != (b, h * w, d) or h_spectral.shape != (b, c, d):
        raise T.ShapeError(f"cannot align spatial {h_spatial.shape} / spectral {h_spectral.shape} "
                           f"with residual {x_residual.shape}")
    shape = x_residual.shape
    spat = h_spatial.reshape(b, 1, h, w, d).expand(shape)
    spec = h_spectral.reshape(b, c, 1, 1, d).expand(shape)
    z = (x_residual * broadcast_last(params.gamma0, shape)
         + spat * broadcast_last(params.gamma1, shape)
         + spec * broadcast_last(params.gamma2, shape))
    return T.layer_norm(z, axis=-1, eps=params.norm_eps)


class Mamba3DBlock(Module):
    def __init__(self, n_bands: int, n_features: int, d_model: int, d_state: int, rng,
                 dtype=np.float32, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.embed = PatchEmbeddings(n_bands, n_features, d_model, rng, dtype)
        self.ssm_spatial = SsmBlockParams(d_model, d_state, rng, dtype)
        self.ssm_spectral = SsmBlockParams(d_model, d_state, rng, dtype)
        self.agg = AggregationParams(d_model, dtype, eps=eps)

    def __call__(self, x: Tensor) -> Tensor:
        x_spatial, x_spectral, x_residual = self.embed(x)
        h_spatial = bidirectional_ssm(x_spatial, self.ssm_spatial, self.eps)
        h_spectral = bidirectional_ssm(x_spectral, self.ssm_spectral, self.eps)
        return aggregate(h_spatial, h_spectral, x_residual, self.agg)

    def check_stability(self) -> None:
        self.ssm_spatial.check_stability()
        self.ssm_spectral.check_stability()
