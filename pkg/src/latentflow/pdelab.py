"""Toy PDE trajectory generation, scattered resampling, dataset files.

All problems live on periodic domains of size 2*pi with integer
wavenumbers, so single Fourier modes have closed-form behavior (mode k of
the heat equation decays by exp(-nu |k|^2 dt) per step, exactly what the
spectral integrator applies). Burgers runs a pseudo-spectral RK4 with 2/3
dealiasing; the vorticity solver is IMEX: Crank-Nicolson diffusion around
a Heun (RK2) advection step. Generators are pure functions of
(parameters, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .meshcodec import PointCloudField
from .serial import FormatError, load_container, save_container

MAGIC_DATASET = b"LFDS"

DOMAIN = (0.0, 2.0 * np.pi)


class CFLError(RuntimeError):
    """Advective CFL number exceeded 1; reduce dt (or increase substeps)."""


@dataclass
class Trajectory:
    """Time-ordered field snapshots plus system parameters."""

    frames: np.ndarray  # (T, *spatial, C) float32
    dt: float
    xi: np.ndarray  # (xi_dim,)
    domain: tuple = DOMAIN
    boundary: str = "periodic"

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.dtype not in (np.float32, np.float64):
            frames = frames.astype(np.float32)
        self.frames = frames
        self.xi = np.atleast_1d(np.asarray(self.xi, dtype=np.float64))
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("trajectory contains non-finite frames")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class Dataset:
    trajectories: list
    splits: dict = field(default_factory=lambda: {"train": [], "valid": [], "test": []})
    norm: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        return [self.trajectories[i] for i in self.splits[name]]

    def compute_normalization(self):
        """Per-channel mean/std from the train split, xi min/max likewise."""
        train = self.split("train")
        if not train:
            raise ValueError("dataset has no train split")
        stacked = np.concatenate([t.frames.reshape(-1, t.frames.shape[-1]) for t in train])
        xis = np.stack([t.xi for t in train])
        self.norm = {
            "mean": stacked.mean(axis=0).tolist(),
            "std": np.maximum(stacked.std(axis=0), 1e-12).tolist(),
            "xi_min": xis.min(axis=0).tolist(),
            "xi_max": xis.max(axis=0).tolist(),
        }
        return self.norm

    def normalize_frames(self, frames: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.norm["mean"], dtype=frames.dtype)
        std = np.asarray(self.norm["std"], dtype=frames.dtype)
        return (frames - mean) / std

    def denormalize_frames(self, frames: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.norm["mean"], dtype=frames.dtype)
        std = np.asarray(self.norm["std"], dtype=frames.dtype)
        return frames * std + mean

    def normalize_xi(self, xi: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.norm["xi_min"])
        hi = np.asarray(self.norm["xi_max"])
        span = hi - lo
        out = np.where(span > 0, (xi - lo) / np.where(span > 0, span, 1.0), 0.5)
        return out.astype(np.float32)


# -- initial conditions ----------------------------------------------------------


def _smooth_field_2d(n: int, rng: np.random.Generator, k_peak: float = 3.0,
                     k_max: int = 8) -> np.ndarray:
    kx = np.fft.fftfreq(n, 1.0 / n)
    k2 = kx[:, None] ** 2 + kx[None, :] ** 2
    white = np.fft.fft2(rng.standard_normal((n, n)))
    envelope = np.exp(-k2 / k_peak**2)
    envelope[k2 > k_max**2] = 0.0
    spec = white * envelope
    fieldv = np.fft.ifft2(spec).real
    return (fieldv / max(fieldv.std(), 1e-12)).astype(np.float64)


def _smooth_field_1d(n: int, rng: np.random.Generator, modes: int = 4) -> np.ndarray:
    x = 2.0 * np.pi * np.arange(n) / n
    u = np.zeros(n)
    for m in range(1, modes + 1):
        amp = rng.normal() / m
        phase = rng.uniform(0, 2 * np.pi)
        u += amp * np.cos(m * x + phase)
    return u / max(np.abs(u).max(), 1e-12)


def _require_power_of_two(n: int):
    if n < 2 or n & (n - 1):
        raise ValueError(f"grid extent must be a power of two, got {n}")


# -- heat equation (spectral exact) ------------------------------------------------


def gen_heat2d(nu: float, n: int, t_steps: int, dt: float, seed: int,
               init_field: np.ndarray | None = None,
               dtype=np.float32) -> Trajectory:
    """Exact per-mode decay: every frame applies exp(-nu |k|^2 dt) in spectrum."""
    if nu < 0:
        raise ValueError(f"viscosity must be non-negative, got {nu}")
    _require_power_of_two(n)
    rng = np.random.default_rng(seed)
    u = _smooth_field_2d(n, rng) if init_field is None else np.asarray(init_field, float)
    kx = np.fft.fftfreq(n, 1.0 / n)
    decay = np.exp(-nu * (kx[:, None] ** 2 + kx[None, :] ** 2) * dt)
    frames = np.empty((t_steps, n, n, 1), dtype=dtype)
    spec = np.fft.fft2(u)
    for m in range(t_steps):
        frames[m, :, :, 0] = np.fft.ifft2(spec).real
        spec = spec * decay
    return Trajectory(frames, dt, np.array([nu]))


# -- viscous Burgers (pseudo-spectral RK4) -----------------------------------------


def _dealias_mask_1d(n: int) -> np.ndarray:
    k = np.abs(np.fft.fftfreq(n, 1.0 / n))
    return k <= n // 3


def gen_burgers1d(nu: float, n: int, t_steps: int, dt: float, seed: int,
                  substeps: int = 1, init_field: np.ndarray | None = None,
                  dtype=np.float32) -> Trajectory:
    if nu < 0:
        raise ValueError(f"viscosity must be non-negative, got {nu}")
    _require_power_of_two(n)
    rng = np.random.default_rng(seed)
    u = _smooth_field_1d(n, rng) if init_field is None else np.asarray(init_field, float)
    k = np.fft.fftfreq(n, 1.0 / n)
    ik = 1j * k
    k2 = k**2
    mask = _dealias_mask_1d(n)
    dx = 2.0 * np.pi / n
    h = dt / substeps

    def rhs(spec):
        u_phys = np.fft.ifft(spec).real
        flux = np.fft.fft(0.5 * u_phys * u_phys) * mask
        return -ik * flux - nu * k2 * spec

    frames = np.empty((t_steps, n, 1), dtype=dtype)
    spec = np.fft.fft(u) * mask
    for m in range(t_steps):
        u_phys = np.fft.ifft(spec).real
        frames[m, :, 0] = u_phys
        cfl = np.abs(u_phys).max() * dt / dx
        if cfl > 1.0:
            raise CFLError(f"burgers1d CFL {cfl:.2f} > 1 at frame {m}; reduce dt "
                           f"below {dx / max(np.abs(u_phys).max(), 1e-12):.4g}")
        for _ in range(substeps):
            k1 = rhs(spec)
            k2_ = rhs(spec + 0.5 * h * k1)
            k3 = rhs(spec + 0.5 * h * k2_)
            k4 = rhs(spec + h * k3)
            spec = spec + (h / 6.0) * (k1 + 2 * k2_ + 2 * k3 + k4)
    return Trajectory(frames, dt, np.array([nu]))


# -- 2D vorticity (IMEX Crank-Nicolson / Heun) ---------------------------------------


def _dealias_mask_2d(n: int) -> np.ndarray:
    k = np.abs(np.fft.fftfreq(n, 1.0 / n))
    mask1 = k <= n // 3
    return mask1[:, None] & mask1[None, :]


def velocity_from_vorticity(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Divergence-free velocity via the streamfunction, u = (psi_y, -psi_x)."""
    n = w.shape[0]
    k = np.fft.fftfreq(n, 1.0 / n)
    kx = k[:, None]
    ky = k[None, :]
    k2 = kx**2 + ky**2
    k2[0, 0] = 1.0
    w_hat = np.fft.fft2(w)
    psi_hat = w_hat / k2
    psi_hat[0, 0] = 0.0
    u = np.fft.ifft2(1j * ky * psi_hat).real
    v = np.fft.ifft2(-1j * kx * psi_hat).real
    return u, v


def divergence(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    n = u.shape[0]
    k = np.fft.fftfreq(n, 1.0 / n)
    du = np.fft.ifft2(1j * k[:, None] * np.fft.fft2(u)).real
    dv = np.fft.ifft2(1j * k[None, :] * np.fft.fft2(v)).real
    return du + dv


def gen_vorticity2d(re: float, n: int, t_steps: int, dt: float, seed: int,
                    forcing_mode: int = 0, forcing_amp: float = 0.5,
                    substeps: int = 4, init_field: np.ndarray | None = None,
                    dtype=np.float32) -> Trajectory:
    """Vorticity trajectory at Reynolds number `re` (nu = 1/re)."""
    if re <= 0:
        raise ValueError(f"Reynolds number must be positive, got {re}")
    _require_power_of_two(n)
    nu = 1.0 / re
    rng = np.random.default_rng(seed)
    w = _smooth_field_2d(n, rng, k_peak=4.0, k_max=10) if init_field is None else \
        np.asarray(init_field, float)

    k = np.fft.fftfreq(n, 1.0 / n)
    kx = k[:, None]
    ky = k[None, :]
    k2 = kx**2 + ky**2
    k2_inv = k2.copy()
    k2_inv[0, 0] = 1.0
    mask = _dealias_mask_2d(n)
    dx = 2.0 * np.pi / n
    h = dt / substeps

    if forcing_mode:
        y = 2.0 * np.pi * np.arange(n) / n
        f_hat = np.fft.fft2(forcing_amp * np.cos(forcing_mode * y)[None, :]
                            * np.ones((n, 1)))
    else:
        f_hat = np.zeros((n, n), dtype=complex)

    def advection(w_hat):
        psi_hat = w_hat / k2_inv
        psi_hat[0, 0] = 0.0
        u = np.fft.ifft2(1j * ky * psi_hat).real
        v = np.fft.ifft2(-1j * kx * psi_hat).real
        wx = np.fft.ifft2(1j * kx * w_hat).real
        wy = np.fft.ifft2(1j * ky * w_hat).real
        adv = np.fft.fft2(u * wx + v * wy) * mask
        return adv, max(np.abs(u).max(), np.abs(v).max())

    cn_minus = 1.0 - 0.5 * h * nu * k2
    cn_plus = 1.0 + 0.5 * h * nu * k2

    frames = np.empty((t_steps, n, n, 1), dtype=dtype)
    w_hat = np.fft.fft2(w) * mask
    for m in range(t_steps):
        frames[m, :, :, 0] = np.fft.ifft2(w_hat).real
        for _ in range(substeps):
            adv1, vmax = advection(w_hat)
            cfl = vmax * h / dx
            if cfl > 1.0:
                raise CFLError(f"vorticity2d CFL {cfl:.2f} > 1 at frame {m}; "
                               f"reduce dt or increase substeps")
            rhs1 = -adv1 + f_hat
            w_star = (cn_minus * w_hat + h * rhs1) / cn_plus
            adv2, _ = advection(w_star)
            rhs2 = -adv2 + f_hat
            w_hat = (cn_minus * w_hat + 0.5 * h * (rhs1 + rhs2)) / cn_plus
    return Trajectory(frames, dt, np.array([re]))


# -- scattered resampling -------------------------------------------------------------


def bilinear_periodic(frame: np.ndarray, points: np.ndarray,
                      domain: tuple = DOMAIN) -> np.ndarray:
    """Sample a grid frame (*spatial, C) at continuous points, wrapping around."""
    lo, hi = domain
    size = hi - lo
    spatial = frame.shape[:-1]
    coords = (points - lo) / size * np.asarray(spatial)
    if len(spatial) == 1:
        n = spatial[0]
        i0 = np.floor(coords[:, 0]).astype(int)
        frac = coords[:, 0] - i0
        i0 %= n
        i1 = (i0 + 1) % n
        return (1 - frac)[:, None] * frame[i0] + frac[:, None] * frame[i1]
    n0, n1 = spatial
    ix = np.floor(coords[:, 0]).astype(int)
    iy = np.floor(coords[:, 1]).astype(int)
    fx = (coords[:, 0] - ix)[:, None]
    fy = (coords[:, 1] - iy)[:, None]
    ix %= n0
    iy %= n1
    ix1 = (ix + 1) % n0
    iy1 = (iy + 1) % n1
    return ((1 - fx) * (1 - fy) * frame[ix, iy] + fx * (1 - fy) * frame[ix1, iy]
            + (1 - fx) * fy * frame[ix, iy1] + fx * fy * frame[ix1, iy1])


def sample_scatter(traj: Trajectory, n_points: int, seed: int) -> list:
    """Fixed random point set for the trajectory; bilinear values per frame."""
    if n_points < 16:
        raise ValueError(f"need at least 16 points, got {n_points}")
    rng = np.random.default_rng(seed)
    dim = traj.frames.ndim - 2
    lo, hi = traj.domain
    points = rng.uniform(lo, hi, size=(n_points, dim))
    volume = (hi - lo) ** dim
    weights = np.full(n_points, volume / n_points)
    return [PointCloudField(points, bilinear_periodic(f, points, traj.domain), weights)
            for f in traj.frames]


# -- persistence ------------------------------------------------------------------------


def write_dataset(ds: Dataset, path):
    meta = {
        "schema": "latentflow-dataset",
        "splits": ds.splits,
        "norm": ds.norm,
        "trajectories": [
            {"dt": t.dt, "xi": t.xi.tolist(), "domain": list(t.domain),
             "boundary": t.boundary, "shape": list(t.frames.shape)}
            for t in ds.trajectories
        ],
    }
    tensors = {f"traj{i:04d}": t.frames for i, t in enumerate(ds.trajectories)}
    save_container(path, tensors, meta, magic=MAGIC_DATASET)


def read_dataset(path) -> Dataset:
    tensors, meta = load_container(path, magic=MAGIC_DATASET)
    if meta.get("schema") != "latentflow-dataset":
        raise FormatError(f"{path}: not a latentflow dataset")
    trajectories = []
    for i, desc in enumerate(meta["trajectories"]):
        frames = tensors[f"traj{i:04d}"]
        trajectories.append(Trajectory(frames, desc["dt"], np.array(desc["xi"]),
                                       tuple(desc["domain"]), desc["boundary"]))
    return Dataset(trajectories, meta["splits"], meta["norm"])


GENERATORS = {
    "heat2d": gen_heat2d,
    "burgers1d": gen_burgers1d,
    "vorticity2d": gen_vorticity2d,
}


def make_dataset(problem: str, n_grid: int, t_steps: int, dt: float,
                 n_train: int, n_valid: int, n_test: int, seed: int,
                 param_range: tuple, **gen_kwargs) -> Dataset:
    """Generate a split dataset, sweeping the system parameter per trajectory."""
    if problem not in GENERATORS:
        raise ValueError(f"unknown problem {problem!r}, expected one of "
                         f"{sorted(GENERATORS)}")
    gen = GENERATORS[problem]
    total = n_train + n_valid + n_test
    seeds = np.random.SeedSequence(seed).spawn(total)
    lo, hi = param_range
    params = np.random.default_rng(seed).uniform(lo, hi, size=total)
    trajectories = [
        gen(params[i], n_grid, t_steps, dt,
            seed=int(seeds[i].generate_state(1)[0]), **gen_kwargs)
        for i in range(total)
    ]
    splits = {
        "train": list(range(n_train)),
        "valid": list(range(n_train, n_train + n_valid)),
        "test": list(range(n_train + n_valid, total)),
    }
    ds = Dataset(trajectories, splits)
    ds.compute_normalization()
    return ds
