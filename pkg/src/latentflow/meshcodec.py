"""Autoencoder between scattered point-cloud fields and a uniform latent grid.

Encoding runs a learned, locally-supported kernel integral from the cloud
onto a fine uniform grid, then a strided conv stack down to the latent grid
with a variational (mean, log-variance) head. Decoding mirrors it:
transposed convs up to the fine grid, then a kernel integral from grid
nodes to arbitrary query points. Data that already lives on the fine grid
can bypass both integral stages (`cfg.bypass`).

The kernel weight for pair (center i, point j) is a small MLP of
(dist/r, offset/r) turned into a weight by a softmax over the neighborhood
with the quadrature weights folded in:

    w_ij = mu_j exp(l_ij) / sum_j' mu_j' exp(l_ij')

so constants are reproduced exactly for any kernel parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as KER
from .nn import (
    Conv1d,
    Conv2d,
    ConvTranspose1d,
    ConvTranspose2d,
    Linear,
    Module,
)
from .tensor import ShapeError, Tensor


class EmptyNeighborhoodError(ValueError):
    """A grid point has no cloud point within the ball radius."""


@dataclass
class PointCloudField:
    """Function samples at scattered points with quadrature weights."""

    points: np.ndarray  # (M, d)
    values: np.ndarray  # (M, C)
    weights: np.ndarray  # (M,)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float32)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.points.ndim != 2 or self.values.ndim != 2:
            raise ShapeError("points must be (M, d) and values (M, C)")
        if not (len(self.points) == len(self.values) == len(self.weights)):
            raise ShapeError("points, values, weights must agree in length")


@dataclass
class Neighborhoods:
    """CSR adjacency from centers to cloud points, with cached pair data."""

    indices: np.ndarray  # (nnz,) cloud indices
    offsets: np.ndarray  # (n_centers + 1,)
    seg_ids: np.ndarray  # (nnz,) center index per pair
    features: np.ndarray  # (nnz, 1 + d) [dist/r, offset/r]
    radius: float

    @property
    def n_centers(self) -> int:
        return len(self.offsets) - 1

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)


def build_neighborhoods(points: np.ndarray, centers: np.ndarray, radius: float,
                        domain_size: np.ndarray | None = None) -> Neighborhoods:
    """Ball adjacency B_r(center) for every center.

    With `domain_size` given, distances are periodic (minimum image); the
    query then runs on the point set tiled into neighboring periods. Raises
    EmptyNeighborhoodError naming the centers whose ball is empty.
    """
    if radius <= 0:
        raise ValueError(f"ball radius must be positive, got {radius}")
    points = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)

    if domain_size is not None:
        query_points, source_index = _tile_periodic(points, np.asarray(domain_size), radius)
    else:
        query_points, source_index = points, np.arange(len(points))

    indices, offsets = KER.ball_query(query_points, centers, radius)
    offsets = np.asarray(offsets, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)

    counts = np.diff(offsets)
    if np.any(counts == 0):
        empty = np.nonzero(counts == 0)[0]
        shown = ", ".join(str(centers[i]) for i in empty[:5])
        raise EmptyNeighborhoodError(
            f"{len(empty)} grid points have empty neighborhoods at r={radius} "
            f"(first offenders: {shown}); enlarge the radius")

    seg_ids = np.repeat(np.arange(len(counts), dtype=np.int64), counts)
    offsets_vec = query_points[indices] - centers[seg_ids]
    dist = np.linalg.norm(offsets_vec, axis=1)
    features = np.concatenate([(dist / radius)[:, None], offsets_vec / radius], axis=1)
    return Neighborhoods(source_index[indices], offsets, seg_ids,
                         features.astype(np.float32), radius)


def _tile_periodic(points: np.ndarray, size: np.ndarray, radius: float):
    """Replicate points into adjacent periods that can reach the base box."""
    d = points.shape[1]
    shifts = [np.zeros(d)]
    for axis in range(d):
        for sign in (-1.0, 1.0):
            base = np.zeros(d)
            base[axis] = sign * size[axis]
            shifts.append(base)
    if d == 2:  # corners matter once radius spans both axes
        for sx in (-1.0, 1.0):
            for sy in (-1.0, 1.0):
                shifts.append(np.array([sx * size[0], sy * size[1]]))
    tiled, source = [], []
    base_index = np.arange(len(points))
    for s in shifts:
        shifted = points + s
        keep = np.all((shifted > -radius - 1e-12), axis=1) & np.all(
            shifted < size + radius + 1e-12, axis=1)
        tiled.append(shifted[keep])
        source.append(base_index[keep])
    return np.concatenate(tiled, axis=0), np.concatenate(source)


# -- differentiable segment primitives ------------------------------------------


def segment_softmax(logits: Tensor, log_mu: np.ndarray, seg_ids: np.ndarray,
                    n_seg: int) -> Tensor:
    """Softmax of (logits + log_mu) within each segment."""
    z = logits.data.astype(np.float64) + log_mu
    seg_max = np.full(n_seg, -np.inf)
    np.maximum.at(seg_max, seg_ids, z)
    e = np.exp(z - seg_max[seg_ids])
    denom = np.bincount(seg_ids, weights=e, minlength=n_seg)
    w = (e / denom[seg_ids]).astype(logits.dtype)

    def backward(g):
        inner = np.bincount(seg_ids, weights=(w * g).astype(np.float64), minlength=n_seg)
        return ((w * (g - inner[seg_ids])).astype(logits.dtype),)

    return Tensor._from_op(w, (logits,), backward, "segment_softmax")


def segment_gather_sum(weights: Tensor, values: Tensor, indices: np.ndarray,
                       seg_ids: np.ndarray, n_seg: int) -> Tensor:
    """out[s, c] = sum over pairs e in segment s of weights[e] * values[indices[e], c]."""
    v = values.data
    w = weights.data
    n_ch = v.shape[1]
    gathered = v[indices]
    contrib = gathered * w[:, None]
    out = np.empty((n_seg, n_ch), dtype=v.dtype)
    for c in range(n_ch):
        out[:, c] = np.bincount(seg_ids, weights=contrib[:, c].astype(np.float64),
                                minlength=n_seg)

    def backward(g):
        g_seg = g[seg_ids]
        gw = (gathered * g_seg).sum(axis=1).astype(w.dtype)
        gv = np.zeros_like(v, dtype=np.float64)
        wg = w[:, None] * g_seg
        for c in range(n_ch):
            gv[:, c] = np.bincount(indices, weights=wg[:, c].astype(np.float64),
                                   minlength=v.shape[0])
        return gw, gv.astype(v.dtype)

    return Tensor._from_op(out, (weights, values), backward, "segment_gather_sum")


class KernelIntegral(Module):
    """Learned distance-kernel integral between discretizations.

    f(y_i) = sum_{j in B_r(y_i)} w_ij u(y_j), with w the mu-folded softmax
    of an MLP on normalized pair geometry. Channels share the scalar weight.
    """

    def __init__(self, dim: int, rng: np.random.Generator, width: int = 16):
        self.fc1 = Linear(1 + dim, width, rng)
        self.fc2 = Linear(width, 1, rng)

    def logits(self, nbrs: Neighborhoods) -> Tensor:
        h = self.fc1(Tensor(nbrs.features)).tanh()
        return self.fc2(h).reshape(len(nbrs.features))

    def forward(self, nbrs: Neighborhoods, values: Tensor, mu: np.ndarray) -> Tensor:
        if np.any(np.diff(nbrs.offsets) == 0):
            raise EmptyNeighborhoodError("kernel integral over empty neighborhood")
        log_mu = np.log(np.asarray(mu, dtype=np.float64))[nbrs.indices]
        w = segment_softmax(self.logits(nbrs), log_mu, nbrs.seg_ids, nbrs.n_centers)
        return segment_gather_sum(w, values, nbrs.indices, nbrs.seg_ids, nbrs.n_centers)


# -- the codec itself -------------------------------------------------------------


@dataclass
class CodecConfig:
    dim: int = 2
    in_channels: int = 1
    latent_channels: int = 8
    fine_grid: int = 64
    latent_grid: int = 16
    hidden: int = 24
    lift: int = 16
    radius: float = 0.35
    domain: tuple = (0.0, 2 * np.pi)
    bypass: bool = True
    kl_weight: float = 1e-6
    jerk_weight: float = 1e-3
    pad_mode: str = "periodic"

    def to_dict(self) -> dict:
        d = dict(vars(self))
        d["domain"] = list(self.domain)
        return d

    @staticmethod
    def from_dict(d: dict) -> "CodecConfig":
        d = dict(d)
        d["domain"] = tuple(d.get("domain", (0.0, 2 * np.pi)))
        return CodecConfig(**d)


@dataclass
class VariationalStats:
    """Per-element posterior mean and log variance of the latent."""

    mean: Tensor
    logvar: Tensor

    def kl(self) -> Tensor:
        """Mean KL(N(mean, exp(logvar)) || N(0, 1)) per latent element."""
        mu, lv = self.mean, self.logvar
        return ((mu * mu + lv.exp() - lv - 1.0) * 0.5).mean()


def grid_coordinates(n: int, dim: int, domain: tuple) -> np.ndarray:
    """Node coordinates of the uniform periodic lattice, shape (n^dim, dim)."""
    lo, hi = domain
    axis = lo + (hi - lo) * np.arange(n) / n
    if dim == 1:
        return axis[:, None]
    xs, ys = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


class MeshCodec(Module):
    """Encoder/decoder pair between (point clouds or grids) and latents.

    Latent tensors are channels-last: (..., S, C) in 1D and
    (..., S, S, C) in 2D. Grid-sampled physical frames are channels-last
    as well; the conv stacks permute internally.
    """

    def __init__(self, cfg: CodecConfig, rng: np.random.Generator):
        if cfg.dim not in (1, 2):
            raise ValueError(f"codec supports dim 1 or 2, got {cfg.dim}")
        if cfg.fine_grid % cfg.latent_grid:
            raise ValueError("fine grid must be a multiple of the latent grid")
        self.cfg = cfg
        h = cfg.hidden
        down = cfg.fine_grid // cfg.latent_grid
        if down & (down - 1):
            raise ValueError("fine/latent ratio must be a power of two")
        self.n_down = max(int(np.log2(down)), 0)

        conv = Conv1d if cfg.dim == 1 else Conv2d
        convt = ConvTranspose1d if cfg.dim == 1 else ConvTranspose2d
        pm = cfg.pad_mode

        if not cfg.bypass:
            self.enc_integral = KernelIntegral(cfg.dim, rng)
            self.dec_integral = KernelIntegral(cfg.dim, rng)
            self.lift = Linear(cfg.in_channels, cfg.lift, rng)
            enc_in = cfg.lift
        else:
            enc_in = cfg.in_channels

        chans = [enc_in] + [h * (2**i) for i in range(self.n_down)]
        self.enc_convs = [
            conv(chans[i], chans[i + 1], 3, rng, stride=2, padding=1, pad_mode=pm)
            for i in range(self.n_down)
        ]
        self.enc_head = conv(chans[-1], 2 * cfg.latent_channels, 3, rng, padding=1,
                             pad_mode=pm)

        dec_chans = [h * (2**i) for i in reversed(range(self.n_down))]
        self.dec_inproj = conv(cfg.latent_channels, dec_chans[0] if dec_chans else h,
                               3, rng, padding=1, pad_mode=pm)
        self.dec_convs = [
            convt(dec_chans[i], dec_chans[i + 1] if i + 1 < len(dec_chans) else h // 2,
                  4, rng, stride=2, padding=1, pad_mode=pm)
            for i in range(self.n_down)
        ]
        out_h = h // 2 if self.n_down else h
        if cfg.bypass:
            self.dec_head = conv(out_h, cfg.in_channels, 3, rng, padding=1, pad_mode=pm)
        else:
            self.dec_grid_head = conv(out_h, out_h, 3, rng, padding=1, pad_mode=pm)
            self.head = Linear(out_h, cfg.in_channels, rng)
            self._dec_channels = out_h

        size = cfg.domain[1] - cfg.domain[0]
        self._domain_size = np.full(cfg.dim, size)
        self._fine_coords = grid_coordinates(cfg.fine_grid, cfg.dim, cfg.domain)
        self._cloud_nbrs_cache: dict = {}

    # -- helpers -------------------------------------------------------------------

    def _to_first(self, x: Tensor) -> Tensor:
        # (B, S..., C) -> (B, C, S...)
        nd = self.cfg.dim
        order = (0, nd + 1) + tuple(range(1, nd + 1))
        return x.transpose(order)

    def _to_last(self, x: Tensor) -> Tensor:
        nd = self.cfg.dim
        order = (0,) + tuple(range(2, nd + 2)) + (1,)
        return x.transpose(order)

    def _check_in_domain(self, points: np.ndarray):
        lo, hi = self.cfg.domain
        if points.min() < lo - 1e-9 or points.max() > hi + 1e-9:
            raise ValueError(f"points outside declared domain [{lo}, {hi}]")

    def cloud_neighborhoods(self, points: np.ndarray) -> Neighborhoods:
        """Adjacency from cloud points to fine-grid centers (encode side)."""
        self._check_in_domain(points)
        return build_neighborhoods(points, self._fine_coords, self.cfg.radius,
                                   self._domain_size)

    def query_neighborhoods(self, queries: np.ndarray) -> Neighborhoods:
        """Adjacency from fine-grid nodes to query centers (decode side)."""
        self._check_in_domain(queries)
        return build_neighborhoods(self._fine_coords, queries, self.cfg.radius,
                                   self._domain_size)

    # -- encode -----------------------------------------------------------------------

    def encode_grid(self, frames: Tensor, rng: np.random.Generator | None = None,
                    train: bool = False):
        """frames: (T, S..., C_in) on the fine grid -> (z, VariationalStats)."""
        x = self._to_first(frames)
        for layer in self.enc_convs:
            x = layer(x).silu()
        moments = self._to_last(self.enc_head(x))
        c = self.cfg.latent_channels
        mean = moments[..., :c]
        logvar = moments[..., c:]
        stats = VariationalStats(mean, logvar)
        if train:
            if rng is None:
                raise ValueError("training-mode encode needs an rng for reparameterization")
            noise = Tensor(rng.standard_normal(mean.shape).astype(np.float32))
            z = mean + (logvar * 0.5).exp() * noise
        else:
            z = mean
        return z, stats

    def encode_cloud(self, fields: list[PointCloudField],
                     rng: np.random.Generator | None = None, train: bool = False):
        """Frames sampled on a shared point set -> (z, VariationalStats)."""
        cached = self._cloud_nbrs_cache.get("entry")
        if cached is not None and cached[0] is fields[0].points:
            nbrs = cached[1]
        else:
            for f in fields[1:]:
                if f.points is not fields[0].points and not np.array_equal(
                        f.points, fields[0].points):
                    raise ValueError("frames of one trajectory must share their point set")
            nbrs = self.cloud_neighborhoods(fields[0].points)
            self._cloud_nbrs_cache = {"entry": (fields[0].points, nbrs)}
        mu = fields[0].weights
        grids = []
        n = self.cfg.fine_grid
        spatial = (n,) * self.cfg.dim
        for f in fields:
            lifted = self.lift(Tensor(f.values))
            g = self.enc_integral(nbrs, lifted, mu)
            grids.append(g.reshape((1,) + spatial + (self.cfg.lift,)))
        from .tensor import cat

        stacked = cat(grids, axis=0)
        return self.encode_grid(stacked, rng=rng, train=train)

    def encode(self, frames, rng=None, train: bool = False):
        if self.cfg.bypass:
            if not isinstance(frames, Tensor):
                frames = Tensor(np.asarray(frames, dtype=np.float32))
            return self.encode_grid(frames, rng=rng, train=train)
        return self.encode_cloud(frames, rng=rng, train=train)

    # -- decode --------------------------------------------------------------------------

    def _decode_fine(self, z: Tensor) -> Tensor:
        x = self._to_first(z)
        x = self.dec_inproj(x).silu()
        for layer in self.dec_convs:
            x = layer(x).silu()
        return x  # channels-first fine-grid features

    def decode(self, z: Tensor, query_points: np.ndarray | None = None) -> Tensor:
        """Latent (T, S..., C_lat) -> field values.

        Grid mode (bypass or query_points None): (T, F..., C_in) on the fine
        grid. Query mode: (T, |queries|, C_in) at the given points.
        """
        fine = self._decode_fine(z)
        if self.cfg.bypass or query_points is None:
            if not self.cfg.bypass:
                fine = self.dec_grid_head(fine)
                feats = self._to_last(fine)
                return self.head(feats)
            return self._to_last(self.dec_head(fine))
        nbrs = self.query_neighborhoods(np.asarray(query_points, dtype=np.float64))
        fine = self.dec_grid_head(fine).silu()
        feats = self._to_last(fine)
        g = self.cfg.fine_grid ** self.cfg.dim
        mu = np.full(g, float(np.prod(self._domain_size)) / g)
        outs = []
        t_frames = feats.shape[0]
        flat = feats.reshape(t_frames, g, self._dec_channels)
        from .tensor import stack

        for m in range(t_frames):
            q = self.dec_integral(nbrs, flat[m], mu)
            outs.append(self.head(q))
        return stack(outs, axis=0)


def jerk_penalty(z_seq: Tensor) -> Tensor:
    """Mean squared discrete third time-difference of a latent sequence.

    z_seq: (T, ...) with T >= 4. Annihilates any sequence that is at most
    quadratic in the frame index, and is invariant to constant shifts.
    """
    T = z_seq.shape[0]
    if T < 4:
        raise ShapeError(f"jerk penalty needs at least 4 frames, got {T}")
    d3 = (z_seq[3:] - z_seq[2:-1] * 3.0) + (z_seq[1:-2] * 3.0 - z_seq[:-3])
    return (d3 * d3).mean()


def ae_loss(recon: Tensor, target: Tensor, stats: VariationalStats,
            z_seq: Tensor | None, beta: float, gamma: float) -> Tensor:
    """Reconstruction + beta * KL + gamma * temporal jerk.

    The jerk term is omitted when z_seq is None or shorter than 4 frames.
    """
    if beta < 0 or gamma < 0:
        raise ValueError(f"loss weights must be non-negative, got beta={beta}, gamma={gamma}")
    if recon.shape != target.shape:
        raise ShapeError(f"recon shape {recon.shape} != target shape {target.shape}")
    diff = recon - target
    loss = (diff * diff).mean()
    if beta:
        loss = loss + stats.kl() * beta
    if gamma and z_seq is not None and z_seq.shape[0] >= 4:
        loss = loss + jerk_penalty(z_seq) * gamma
    return loss
