"""Architectural building blocks.

Four pieces: the ConvNeXt block (depthwise 7x7, channel-last LayerNorm,
4x MLP expansion, learnable per-channel scale, stochastic depth),
the selective state-space scan and its Mamba wrapper, the parallel
vision-Mamba layer (4-way channel split, per-branch Mamba with a scaled
residual, concat, norm, projection), and the spatial/channel attention
bridge that refines multi-stage features.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import RngStream, Tensor

__all__ = [
    "ConvNeXtBlockParams",
    "MambaParams",
    "PVMLayerParams",
    "SCABParams",
    "init_convnext_block",
    "init_mamba",
    "init_pvm_layer",
    "init_scab",
    "convnext_forward",
    "drop_path",
    "ssm_discretize",
    "selective_scan",
    "mamba_forward",
    "pvm_forward",
    "spatial_attention",
    "channel_attention_bridge",
    "scab_forward",
]


def _uniform_fan_in(rng: RngStream, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    data = (rng.uniform(shape) * 2.0 - 1.0) * bound
    return Tensor(data.astype(dtype), requires_grad=True)


def _normal(rng: RngStream, shape, scale: float, dtype) -> Tensor:
    return Tensor(rng.normal(shape, scale).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


# -- ConvNeXt ------------------------------------------------------------------


@dataclass
class ConvNeXtBlockParams:
    """Depthwise 7x7 + LN + 4x MLP + per-channel scale, residual around it all."""

    dw_w: Tensor          # (C, 1, 7, 7)
    ln_g: Tensor          # (C,)
    ln_b: Tensor          # (C,)
    fc1_w: Tensor         # (4C, C)
    fc1_b: Tensor         # (4C,)
    fc2_w: Tensor         # (C, 4C)
    fc2_b: Tensor         # (C,)
    gamma_scale: Tensor   # (C,)
    drop_path_rate: float = 0.0

    def tensors(self):
        yield "dw_w", self.dw_w
        yield "ln_g", self.ln_g
        yield "ln_b", self.ln_b
        yield "fc1_w", self.fc1_w
        yield "fc1_b", self.fc1_b
        yield "fc2_w", self.fc2_w
        yield "fc2_b", self.fc2_b
        yield "gamma_scale", self.gamma_scale


def init_convnext_block(channels: int, rng: RngStream, dtype=np.float32,
                        drop_path_rate: float = 0.0,
                        gamma_init: float = 1e-6) -> ConvNeXtBlockParams:
    c = channels
    return ConvNeXtBlockParams(
        dw_w=_normal(rng, (c, 1, 7, 7), 0.02, dtype),
        ln_g=_ones((c,), dtype),
        ln_b=_zeros((c,), dtype),
        fc1_w=_uniform_fan_in(rng, (4 * c, c), c, dtype),
        fc1_b=_zeros((4 * c,), dtype),
        fc2_w=_uniform_fan_in(rng, (c, 4 * c), 4 * c, dtype),
        fc2_b=_zeros((c,), dtype),
        gamma_scale=Tensor(np.full((c,), gamma_init, dtype=dtype), requires_grad=True),
        drop_path_rate=drop_path_rate,
    )


def drop_path(x: Tensor, rate: float, rng: RngStream) -> Tensor:
    """Per-sample stochastic depth: zero the branch with probability ``rate``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"drop_path rate must be in [0,1), got {rate}")
    if rate == 0.0:
        return x
    bsz = x.shape[0]
    keep = (rng.uniform((bsz,) + (1,) * (x.ndim - 1)) >= rate)
    mask = keep.astype(x.dtype) / (1.0 - rate)
    return T.mul(x, Tensor(mask))


def convnext_forward(p: ConvNeXtBlockParams, x: Tensor, training: bool = False,
                     rng: Optional[RngStream] = None) -> Tensor:
    c = p.dw_w.shape[0]
    if x.ndim != 4 or x.shape[1] != c:
        raise DimensionError(f"convnext expects (B,{c},H,W), got {x.shape}")
    h = T.conv2d(x, p.dw_w, stride=1, padding=3, groups=c)
    h = T.permute(h, (0, 2, 3, 1))
    h = T.layer_norm(h, p.ln_g, p.ln_b, eps=1e-6)
    h = T.linear(h, p.fc1_w, p.fc1_b)
    h = T.gelu(h)
    h = T.linear(h, p.fc2_w, p.fc2_b)
    h = T.mul(h, p.gamma_scale)
    h = T.permute(h, (0, 3, 1, 2))
    if training and p.drop_path_rate > 0.0:
        if rng is None:
            raise ConfigError("drop_path active but no rng stream supplied")
        h = drop_path(h, p.drop_path_rate, rng)
    return T.add(x, h)


# -- selective state-space scan ---------------------------------------------------


def ssm_discretize(a: Tensor, delta: Tensor, b_seq: Tensor):
    """Zero-order-hold for A, Euler rule for B.

    a: (E,N) negative decay rates; delta: (...,L,E) positive step sizes
    (softplus upstream); b_seq: (...,L,N). Returns elementwise
    Abar = exp(delta*a) and Bbar = delta*b of shape (...,L,E,N).
    """
    d_exp = T.reshape(delta, delta.shape + (1,))
    abar = T.exp(T.mul(d_exp, a))
    b_exp = T.reshape(b_seq, b_seq.shape[:-1] + (1, b_seq.shape[-1]))
    bbar = T.mul(d_exp, b_exp)
    return abar, bbar


def selective_scan(abar: Tensor, bbar: Tensor, c_seq: Tensor, d: Tensor,
                   x: Tensor) -> Tensor:
    """Linear-time causal recurrence h_t = Abar_t*h_{t-1} + Bbar_t*x_t,
    y_t = <C_t, h_t> + D*x_t.

    abar, bbar: (L,E,N) or (B,L,E,N); c_seq: (L,N)/(B,L,N); d: (E,);
    x: (L,E)/(B,L,E). Saved state is one (B,L,E,N) buffer, linear in L.
    """
    squeeze = abar.ndim == 3
    ad = abar.data[None] if squeeze else abar.data
    bd = bbar.data[None] if squeeze else bbar.data
    cd = c_seq.data[None] if squeeze else c_seq.data
    xd = x.data[None] if squeeze else x.data
    bsz, length, e, n = ad.shape
    if cd.shape != (bsz, length, n) or xd.shape != (bsz, length, e):
        raise DimensionError(
            f"selective_scan shape mismatch: abar {ad.shape}, c {cd.shape}, x {xd.shape}"
        )

    hs = np.empty((bsz, length, e, n), dtype=ad.dtype)
    h = np.zeros((bsz, e, n), dtype=ad.dtype)
    ys = np.empty((bsz, length, e), dtype=ad.dtype)
    for t in range(length):
        h = ad[:, t] * h + bd[:, t] * xd[:, t, :, None]
        hs[:, t] = h
        ys[:, t] = (h * cd[:, t, None, :]).sum(axis=-1) + d.data * xd[:, t]
    selective_scan.last_state_bytes = hs.nbytes
    out = ys[0] if squeeze else ys

    def backward(g):
        gy = g[None] if squeeze else g
        dabar = np.empty_like(ad)
        dbbar = np.empty_like(bd)
        dc = np.empty_like(cd)
        dx = gy * d.data
        dh = np.zeros_like(h)
        for t in range(length - 1, -1, -1):
            dc[:, t] = np.einsum("be,ben->bn", gy[:, t], hs[:, t])
            dh = dh + gy[:, t, :, None] * cd[:, t, None, :]
            h_prev = hs[:, t - 1] if t > 0 else np.zeros_like(h)
            dabar[:, t] = dh * h_prev
            dbbar[:, t] = dh * xd[:, t, :, None]
            dx[:, t] += (dh * bd[:, t]).sum(axis=-1)
            dh = dh * ad[:, t]
        dd = (gy * xd).sum(axis=(0, 1))
        if squeeze:
            dabar, dbbar, dc, dx = dabar[0], dbbar[0], dc[0], dx[0]
        T._accum(abar, dabar)
        T._accum(bbar, dbbar)
        T._accum(c_seq, dc)
        T._accum(d, dd)
        T._accum(x, dx)

    return T._make(out, (abar, bbar, c_seq, d, x), backward)


selective_scan.last_state_bytes = 0


# -- Mamba block --------------------------------------------------------------------


@dataclass
class MambaParams:
    """Selective-SSM block: gated in-projection, causal depthwise conv,
    input-dependent (delta, B, C), negative diagonal A, skip D, out-projection."""

    in_w: Tensor       # (2E, C)
    conv_w: Tensor     # (E, k)
    delta_w: Tensor    # (E, E)
    delta_b: Tensor    # (E,)
    b_w: Tensor        # (N, E)
    c_w: Tensor        # (N, E)
    log_a: Tensor      # (E, N); A = -exp(log_a) stays strictly negative
    d_skip: Tensor     # (E,)
    out_w: Tensor      # (C, E)

    @property
    def width(self) -> int:
        return self.in_w.shape[1]

    @property
    def expanded(self) -> int:
        return self.in_w.shape[0] // 2

    def tensors(self):
        yield "in_w", self.in_w
        yield "conv_w", self.conv_w
        yield "delta_w", self.delta_w
        yield "delta_b", self.delta_b
        yield "b_w", self.b_w
        yield "c_w", self.c_w
        yield "log_a", self.log_a
        yield "d_skip", self.d_skip
        yield "out_w", self.out_w


def init_mamba(channels: int, rng: RngStream, dtype=np.float32, state: int = 8,
               expand: int = 1, kernel: int = 4,
               zero_out_proj: bool = False) -> MambaParams:
    e = channels * expand
    # softplus(delta_b) lands in [1e-3, 1e-1], the usual stable step-size range
    dt = np.exp(rng.uniform((e,)) * (np.log(1e-1) - np.log(1e-3)) + np.log(1e-3))
    delta_b = Tensor(np.log(np.expm1(dt)).astype(dtype), requires_grad=True)
    log_a = np.broadcast_to(np.log(np.arange(1, state + 1, dtype=np.float64)),
                            (e, state)).copy()
    out_w = (_zeros((channels, e), dtype) if zero_out_proj
             else _uniform_fan_in(rng, (channels, e), e, dtype))
    return MambaParams(
        in_w=_uniform_fan_in(rng, (2 * e, channels), channels, dtype),
        conv_w=_uniform_fan_in(rng, (e, kernel), kernel, dtype),
        delta_w=_uniform_fan_in(rng, (e, e), e, dtype),
        delta_b=delta_b,
        b_w=_uniform_fan_in(rng, (state, e), e, dtype),
        c_w=_uniform_fan_in(rng, (state, e), e, dtype),
        log_a=Tensor(log_a.astype(dtype), requires_grad=True),
        d_skip=_ones((e,), dtype),
        out_w=out_w,
    )


def mamba_forward(p: MambaParams, x: Tensor) -> Tensor:
    """x: (B, L, C) flattened spatial sequence -> (B, L, C), causal."""
    if x.ndim != 3 or x.shape[-1] != p.width:
        raise DimensionError(f"mamba expects (B,L,{p.width}), got {x.shape}")
    e = p.expanded
    xz = T.linear(x, p.in_w)
    a_part = T.narrow(xz, 2, 0, e)
    gate = T.narrow(xz, 2, e, e)
    u = T.silu(T.conv1d_depthwise_causal(a_part, p.conv_w))
    delta = T.softplus(T.linear(u, p.delta_w, p.delta_b))
    b_seq = T.linear(u, p.b_w)
    c_seq = T.linear(u, p.c_w)
    a = T.neg(T.exp(p.log_a))
    abar, bbar = ssm_discretize(a, delta, b_seq)
    y = selective_scan(abar, bbar, c_seq, p.d_skip, u)
    return T.linear(T.mul(y, T.silu(gate)), p.out_w)


# -- parallel vision-Mamba layer ------------------------------------------------------


@dataclass
class PVMLayerParams:
    """Pre-norm, 4-way channel split, per-branch Mamba + theta-scaled residual,
    concat, post-norm, channel projection."""

    ln1_g: Tensor
    ln1_b: Tensor
    branches: List[MambaParams]
    theta: Tensor      # scalar, shared by the four branches
    ln2_g: Tensor
    ln2_b: Tensor
    proj_w: Tensor     # (C, C)
    proj_b: Tensor     # (C,)

    @property
    def channels(self) -> int:
        return self.ln1_g.shape[0]

    def tensors(self):
        yield "ln1_g", self.ln1_g
        yield "ln1_b", self.ln1_b
        for i, br in enumerate(self.branches):
            for name, t in br.tensors():
                yield f"branch{i}.{name}", t
        yield "theta", self.theta
        yield "ln2_g", self.ln2_g
        yield "ln2_b", self.ln2_b
        yield "proj_w", self.proj_w
        yield "proj_b", self.proj_b


def init_pvm_layer(channels: int, rng: RngStream, dtype=np.float32, state: int = 8,
                   kernel: int = 4, theta_init: float = 1.0,
                   zero_out_proj: bool = False) -> PVMLayerParams:
    if channels % 4 != 0:
        raise ConfigError(f"PVM channels must be divisible by 4, got {channels}")
    width = channels // 4
    branches = [init_mamba(width, rng, dtype, state=state, kernel=kernel,
                           zero_out_proj=zero_out_proj) for _ in range(4)]
    return PVMLayerParams(
        ln1_g=_ones((channels,), dtype),
        ln1_b=_zeros((channels,), dtype),
        branches=branches,
        theta=Tensor(np.asarray(theta_init, dtype=dtype), requires_grad=True),
        ln2_g=_ones((channels,), dtype),
        ln2_b=_zeros((channels,), dtype),
        proj_w=_uniform_fan_in(rng, (channels, channels), channels, dtype),
        proj_b=_zeros((channels,), dtype),
    )


def _ln_nchw(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    t = T.permute(x, (0, 2, 3, 1))
    t = T.layer_norm(t, g, b, eps=1e-6)
    return T.permute(t, (0, 3, 1, 2))


def pvm_forward(p: PVMLayerParams, x: Tensor) -> Tensor:
    c = p.channels
    if x.ndim != 4 or x.shape[1] != c:
        raise DimensionError(f"pvm expects (B,{c},H,W), got {x.shape}")
    if c % 4 != 0:
        raise ConfigError(f"PVM channels must be divisible by 4, got {c}")
    bsz, _, h, w = x.shape
    width = c // 4
    xn = _ln_nchw(x, p.ln1_g, p.ln1_b)
    parts = T.split_channels(xn, 4)
    merged = []
    for part, mp in zip(parts, p.branches):
        seq = T.reshape(T.permute(part, (0, 2, 3, 1)), (bsz, h * w, width))
        vm = T.add(mamba_forward(mp, seq), T.mul(seq, p.theta))
        merged.append(T.permute(T.reshape(vm, (bsz, h, w, width)), (0, 3, 1, 2)))
    cat = T.concat_channels(merged)
    t = T.permute(cat, (0, 2, 3, 1))
    t = T.layer_norm(t, p.ln2_g, p.ln2_b, eps=1e-6)
    t = T.linear(t, p.proj_w, p.proj_b)
    return T.permute(t, (0, 3, 1, 2))


# -- spatial & channel attention bridge -------------------------------------------------


@dataclass
class SCABParams:
    """One 7x7 conv shared across stages for spatial attention, plus a
    bottlenecked FC stack over concatenated per-stage GAP vectors for
    channel attention."""

    spatial_w: Tensor            # (1, 2, 7, 7), shared by every bridged stage
    hidden_w: Tensor             # (hidden, sum(widths))
    hidden_b: Tensor             # (hidden,)
    head_ws: List[Tensor]        # per stage: (Ci, hidden)
    head_bs: List[Tensor]        # per stage: (Ci,)
    widths: List[int] = field(default_factory=list)

    def tensors(self):
        yield "spatial_w", self.spatial_w
        yield "hidden_w", self.hidden_w
        yield "hidden_b", self.hidden_b
        for i, (w, b) in enumerate(zip(self.head_ws, self.head_bs)):
            yield f"head{i}_w", w
            yield f"head{i}_b", b


def init_scab(widths: Sequence[int], rng: RngStream, dtype=np.float32,
              hidden: Optional[int] = None) -> SCABParams:
    widths = [int(w) for w in widths]
    total = sum(widths)
    if hidden is None:
        hidden = max(total // 4, 1)
    return SCABParams(
        spatial_w=_normal(rng, (1, 2, 7, 7), 0.02, dtype),
        hidden_w=_uniform_fan_in(rng, (hidden, total), total, dtype),
        hidden_b=_zeros((hidden,), dtype),
        head_ws=[_uniform_fan_in(rng, (w, hidden), hidden, dtype) for w in widths],
        head_bs=[_zeros((w,), dtype) for w in widths],
        widths=widths,
    )


def spatial_attention(p: SCABParams, x: Tensor) -> Tensor:
    """x * sigmoid(SharedConv7x7([max_over_C, avg_over_C]))."""
    mx = T.pool2d("channelwise_max_over_C", x)
    av = T.pool2d("channelwise_avg_over_C", x)
    m = T.sigmoid(T.conv2d(T.concat_channels([mx, av]), p.spatial_w, padding=3))
    return T.mul(x, m)


def channel_attention_bridge(p: SCABParams, stage_feats: Sequence[Tensor]) -> List[Tensor]:
    """Per-stage sigmoid gates from the concatenated GAP of all stages."""
    if len(stage_feats) != len(p.widths):
        raise ConfigError(
            f"bridge built for {len(p.widths)} stages, got {len(stage_feats)}"
        )
    gaps = []
    for f, w in zip(stage_feats, p.widths):
        if f.shape[1] != w:
            raise ConfigError(f"stage width mismatch: {f.shape[1]} vs {w}")
        gaps.append(T.reshape(T.pool2d("global_avg", f), (f.shape[0], w)))
    g = T.concat(gaps, axis=1)
    # gelu rather than relu: the narrow hidden layer must never go fully
    # dead, and gelu keeps gradient everywhere
    hidden = T.gelu(T.linear(g, p.hidden_w, p.hidden_b))
    out = []
    for f, w_h, b_h in zip(stage_feats, p.head_ws, p.head_bs):
        gate = T.sigmoid(T.linear(hidden, w_h, b_h))
        gate = T.reshape(gate, gate.shape + (1, 1))
        out.append(T.mul(f, gate))
    return out


def scab_forward(p: SCABParams, stage_feats: Sequence[Tensor]) -> List[Tensor]:
    """Full bridge: residual spatial refinement, then channel gating."""
    refined = [T.add(f, spatial_attention(p, f)) for f in stage_feats]
    return channel_attention_bridge(p, refined)
