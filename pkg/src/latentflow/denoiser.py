"""Conditional velocity predictor on the latent grid.

A transformer whose blocks alternate axial factorized attention with full
attention (final block full). Conditioning enters two ways: previous latent
frames are concatenated channelwise into the input stream, and (diffusion
time, system parameters) modulate every block through zero-initialized
scale/shift/gate heads. The final projection is zero-initialized, so an
untrained network predicts exactly zero velocity and the initial
flow-matching loss sits at the data-noise baseline.

The factorized attention kernels are built from axis-pooled global context:
for axis m the tensor is mean-pooled over the other axes, projected to
queries and keys, and the resulting S_m x S_m row-stochastic kernel is
contracted against the full value tensor along that axis. Axes are
processed sequentially, preserving the grid shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import MLP, Linear, LayerNorm, Module, MultiHeadSelfAttention
from .schedules import DiffusionPath, TimeGrid
from .tensor import ShapeError, Tensor, cat


def timestep_embed(k: float, width: int, max_period: float = 1e4) -> np.ndarray:
    """Sinusoidal features of the diffusion time k in [0, 1].

    The time is stretched by 1000 so the log-spaced frequencies resolve the
    unit interval; pairs of (sin, cos) fill the requested width.
    """
    if not (0.0 <= k <= 1.0):
        raise ValueError(f"diffusion time {k} outside [0, 1]")
    half = width // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    angles = 1000.0 * k * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)])
    if width % 2:
        emb = np.concatenate([emb, np.zeros(1)])
    return emb.astype(np.float32)


@dataclass
class ConditioningPack:
    """History frames, system parameters, and the diffusion time."""

    history: Tensor  # (B, h, S..., C)
    xi: Tensor  # (B, xi_dim)
    k: float = 0.0

    def batch(self) -> int:
        return self.history.shape[0]


@dataclass
class DenoiserConfig:
    dim: int = 2
    grid: int = 16
    channels: int = 8
    width: int = 64
    depth: int = 4
    heads: int = 4
    history: int = 2
    xi_dim: int = 1
    mlp_mult: int = 4
    pattern: str = "alternate"  # "alternate" | "all-full" | "all-factorized"
    parameterization: str = "velocity"  # "velocity" (flow) or "noise" (ablations)

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.dim not in (1, 2):
            raise ValueError("denoiser supports 1D and 2D latent grids")
        if self.parameterization not in ("velocity", "noise"):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        if self.pattern not in ("alternate", "all-full", "all-factorized"):
            raise ValueError(f"unknown layer pattern {self.pattern!r}")

    def to_dict(self) -> dict:
        return dict(vars(self))

    @staticmethod
    def from_dict(d: dict) -> "DenoiserConfig":
        return DenoiserConfig(**d)

    def layer_kinds(self) -> list[str]:
        if self.pattern == "all-full":
            return ["full"] * self.depth
        if self.pattern == "all-factorized":
            return ["factorized"] * self.depth
        # alternate factorized/full; the last block is always full
        kinds = ["factorized" if i % 2 == 0 else "full" for i in range(self.depth)]
        if kinds:
            kinds[-1] = "full"
        return kinds


class FactorizedAttention(Module):
    """Axial attention with kernels computed from axis-pooled context."""

    def __init__(self, dim_spatial: int, width: int, heads: int, rng: np.random.Generator):
        self.dim_spatial = dim_spatial
        self.heads = heads
        self.head_dim = width // heads
        self.to_q = [Linear(width, width, rng) for _ in range(dim_spatial)]
        self.to_k = [Linear(width, width, rng) for _ in range(dim_spatial)]
        self.to_v = Linear(width, width, rng)
        self.proj = Linear(width, width, rng)

    def kernels(self, x: Tensor) -> list[Tensor]:
        """Row-stochastic (B, H, S_m, S_m) attention kernel per axis."""
        B = x.shape[0]
        h, d = self.heads, self.head_dim
        out = []
        for axis in range(self.dim_spatial):
            pooled = x
            # mean over the other spatial axes, keeping axis `axis`
            for other in reversed(range(self.dim_spatial)):
                if other != axis:
                    pooled = pooled.mean(axis=1 + other)
            s_m = pooled.shape[1]
            q = self.to_q[axis](pooled).reshape(B, s_m, h, d).transpose((0, 2, 1, 3))
            k = self.to_k[axis](pooled).reshape(B, s_m, h, d).transpose((0, 2, 1, 3))
            scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(d))
            out.append(scores.softmax(axis=-1))
        return out

    def forward(self, x: Tensor) -> Tensor:
        B = x.shape[0]
        spatial = x.shape[1:-1]
        width = x.shape[-1]
        h, d = self.heads, self.head_dim
        kernels = self.kernels(x)
        v = self.to_v(x)

        if self.dim_spatial == 1:
            s1 = spatial[0]
            v = v.reshape(B, s1, h, d).transpose((0, 2, 1, 3))  # (B,H,S1,d)
            v = kernels[0] @ v
            out = v.transpose((0, 2, 1, 3)).reshape(B, s1, width)
        else:
            s1, s2 = spatial
            v = v.reshape(B, s1, s2, h, d)
            # contract axis 1: arrange as (B,H,S2,S1,d)
            v = v.transpose((0, 3, 2, 1, 4))
            a1 = kernels[0].reshape(B, h, 1, s1, s1)
            v = a1 @ v
            # contract axis 2: arrange as (B,H,S1,S2,d)
            v = v.transpose((0, 1, 3, 2, 4))
            a2 = kernels[1].reshape(B, h, 1, s2, s2)
            v = a2 @ v
            out = v.transpose((0, 2, 3, 1, 4)).reshape(B, s1, s2, width)
        return self.proj(out)


class FullAttention(Module):
    """Standard attention over the flattened grid, shape-preserving."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        self.attn = MultiHeadSelfAttention(width, heads, rng)

    def forward(self, x: Tensor) -> Tensor:
        lead = x.shape
        tokens = int(np.prod(lead[1:-1]))
        flat = x.reshape(lead[0], tokens, lead[-1])
        return self.attn(flat).reshape(lead)


def _modulate(x: Tensor, shift: Tensor, scale: Tensor, n_spatial: int) -> Tensor:
    shape = (shift.shape[0],) + (1,) * n_spatial + (shift.shape[-1],)
    return x * (scale.reshape(shape) + 1.0) + shift.reshape(shape)


class DiTBlock(Module):
    """Pre-norm attention + MLP with adaLN scale/shift/gate conditioning.

    The conditioning head is zero-initialized: with zero conditioning the
    modulation is the identity (scale 1, shift 0, gate 1).
    """

    def __init__(self, kind: str, cfg: DenoiserConfig, rng: np.random.Generator):
        w = cfg.width
        self.kind = kind
        self.norm1 = LayerNorm(w, affine=False)
        self.norm2 = LayerNorm(w, affine=False)
        if kind == "factorized":
            self.attn = FactorizedAttention(cfg.dim, w, cfg.heads, rng)
        else:
            self.attn = FullAttention(w, cfg.heads, rng)
        self.mlp = MLP(w, rng, cfg.mlp_mult)
        self.ada = Linear(w, 6 * w, rng, zero_init=True)
        self.n_spatial = cfg.dim

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        mods = self.ada(cond.silu())
        w = x.shape[-1]
        sh1, sc1, g1 = mods[:, 0 * w:1 * w], mods[:, 1 * w:2 * w], mods[:, 2 * w:3 * w]
        sh2, sc2, g2 = mods[:, 3 * w:4 * w], mods[:, 4 * w:5 * w], mods[:, 5 * w:6 * w]
        ns = self.n_spatial
        gate1 = (g1 + 1.0).reshape((x.shape[0],) + (1,) * ns + (w,))
        gate2 = (g2 + 1.0).reshape((x.shape[0],) + (1,) * ns + (w,))
        x = x + gate1 * self.attn(_modulate(self.norm1(x), sh1, sc1, ns))
        x = x + gate2 * self.mlp(_modulate(self.norm2(x), sh2, sc2, ns))
        return x


class Denoiser(Module):
    """Velocity (or noise) predictor v(x_k, k, c) on the latent grid."""

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        self.cfg = cfg
        w = cfg.width
        in_ch = (cfg.history + 1) * cfg.channels
        self.in_proj = Linear(in_ch, w, rng)
        spatial = (cfg.grid,) * cfg.dim
        self.pos_emb = Tensor(
            (0.02 * rng.standard_normal(spatial + (w,))).astype(np.float32),
            requires_grad=True)
        self.t_mlp = MLP(w, rng, 2)
        self.xi_proj = Linear(cfg.xi_dim, w, rng)
        self.blocks = [DiTBlock(kind, cfg, rng) for kind in cfg.layer_kinds()]
        self.final_norm = LayerNorm(w, affine=False)
        self.final_ada = Linear(w, 2 * w, rng, zero_init=True)
        self.out_proj = Linear(w, cfg.channels, rng, zero_init=True)

    @property
    def parameterization(self) -> str:
        return self.cfg.parameterization

    def _check_shapes(self, x_k: Tensor, pack: ConditioningPack):
        cfg = self.cfg
        spatial = (cfg.grid,) * cfg.dim
        if x_k.shape[1:] != spatial + (cfg.channels,):
            raise ShapeError(f"latent state shape {x_k.shape[1:]} != "
                             f"{spatial + (cfg.channels,)}")
        if pack.history.shape[1] != cfg.history:
            raise ShapeError(f"history length {pack.history.shape[1]} != "
                             f"configured {cfg.history}")
        if pack.history.shape[0] != x_k.shape[0] or pack.xi.shape[0] != x_k.shape[0]:
            raise ShapeError("batch size mismatch between state and conditioning")
        if pack.xi.shape[-1] != cfg.xi_dim:
            raise ShapeError(f"xi dim {pack.xi.shape[-1]} != configured {cfg.xi_dim}")

    def forward(self, x_k: Tensor, k: float, pack: ConditioningPack) -> Tensor:
        cfg = self.cfg
        self._check_shapes(x_k, pack)
        B = x_k.shape[0]
        spatial = (cfg.grid,) * cfg.dim

        # history frames become extra channels of the input stream
        hist = pack.history.transpose((0,) + tuple(range(2, 2 + cfg.dim)) + (1, 1 + cfg.dim + 1))
        hist = hist.reshape((B,) + spatial + (cfg.history * cfg.channels,))
        stream = cat([x_k, hist], axis=-1)

        x = self.in_proj(stream) + self.pos_emb
        temb = self.t_mlp(Tensor(timestep_embed(k, cfg.width)).reshape(1, cfg.width))
        cond = temb + self.xi_proj(pack.xi)

        for block in self.blocks:
            x = block(x, cond)

        mods = self.final_ada(cond.silu())
        w = cfg.width
        sh, sc = mods[:, :w], mods[:, w:]
        x = _modulate(self.final_norm(x), sh, sc, cfg.dim)
        return self.out_proj(x)

    def __call__(self, x: Tensor, t: float | None = None,
                 cond: ConditioningPack | None = None):
        if t is None or cond is None:
            raise TypeError("denoiser call needs (x, t, cond)")
        return self.forward(x, t, cond)

    def predict_velocity(self, x_k: Tensor, pack: ConditioningPack) -> Tensor:
        return self.forward(x_k, pack.k, pack)


def fm_loss(model, x0: Tensor, pack: ConditioningPack, path: DiffusionPath,
            grid: TimeGrid, rng: np.random.Generator) -> Tensor:
    """Flow-matching (or noise-target) loss on one batch.

    Draws one diffusion knot uniformly from the grid's nonzero knots
    (sampling never evaluates the model at t = 0), perturbs x0 along the
    path, and regresses the model output onto eps - x0 (velocity mode) or
    eps (noise mode). Mean squared error over all elements.
    """
    knots = grid.knots[1:]
    k = float(rng.choice(knots))
    eps = Tensor(rng.standard_normal(x0.shape).astype(x0.dtype))
    x_k = path.perturb(x0, k, eps)
    pred = model(x_k, k, pack)
    param = getattr(model, "parameterization", "velocity")
    if param == "velocity":
        target = eps - x0
    else:
        target = eps
    diff = pred - target
    return (diff * diff).mean()


# -- analytic cost model (used by the scaling tests and the benchmark) ------------


def factorized_attention_flops(spatial: tuple, width: int) -> int:
    """Multiply counts of one factorized attention layer on `spatial` grid."""
    s_tot = int(np.prod(spatial))
    total = 0
    for s_m in spatial:
        total += 2 * s_m * width * width  # q, k projections on pooled context
        total += s_m * s_m * width  # kernel scores
        total += s_tot * s_m * width  # value contraction along the axis
    total += 2 * s_tot * width * width  # value + output projections
    return total


def full_attention_flops(spatial: tuple, width: int) -> int:
    s_tot = int(np.prod(spatial))
    total = 4 * s_tot * width * width  # qkv + output projections
    total += 2 * s_tot * s_tot * width  # scores + contraction
    return total
