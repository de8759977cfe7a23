"""Training stages (autoencoder, flow matching, deterministic AR baseline),
autoregressive latent rollout, and ensemble prediction.

Rollout is latent-only: the initial physical frames are encoded once, every
autoregressive step happens in latent space (a reverse-diffusion sample for
the stochastic modes, a direct network step for "ar"), and decoding happens
once at the end for all frames. Ensemble members draw their per-step noise
from rng streams derived from (base seed, member index), so each member is
individually reproducible regardless of the ensemble size.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .denoiser import ConditioningPack, Denoiser, DenoiserConfig, DiTBlock, fm_loss
from .meshcodec import CodecConfig, MeshCodec, ae_loss
from .nn import LayerNorm, Linear, Module
from .optim import Adam, cosine_lr
from .pdelab import Dataset
from .samplers import sample
from .schedules import DiffusionPath, TimeGrid, make_grid
from .serial import config_digest, load_container, save_container
from .tensor import NonFiniteError, Tensor, check_finite, no_grad
from .denoiser import _modulate


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; message records the last finite step."""


@dataclass
class TrainConfig:
    stage: str = "ae"  # "ae" | "fm" | "ar"
    steps: int = 2000
    lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    batch: int = 2  # ae: windows per step; fm/ar: samples per step
    window: int = 4  # ae: frames per window (>= 4 activates the jerk term)
    seed: int = 0
    k_steps: int = 10  # fm: number of diffusion knots for training/sampling
    spacing: str = "uniform-t"
    history: int = 2
    log_every: int = 25
    lr_final_frac: float = 0.1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.steps <= 0:
            raise ValueError(f"steps must be positive, got {self.steps}")


def _loss_csv(rows) -> str:
    lines = ["step,loss,lr"]
    for step, loss, lr in rows:
        lines.append(f"{step},{loss!r},{lr!r}")
    return "\n".join(lines) + "\n"


# -- autoencoder stage -------------------------------------------------------------


def train_autoencoder(cfg: TrainConfig, ds: Dataset, codec_cfg: CodecConfig,
                      scatter_fields: dict | None = None):
    """Train the mesh codec on the train split.

    Returns (codec, loss_rows). Grid data trains through the conv bypass;
    pass `scatter_fields` (trajectory index -> list of PointCloudField with
    normalized values) to train the kernel-integral path instead.
    """
    rng = np.random.default_rng(cfg.seed)
    codec = MeshCodec(codec_cfg, rng)
    opt = Adam(codec.parameters(), lr=cfg.lr, betas=cfg.betas,
               weight_decay=cfg.weight_decay)
    train_idx = ds.splits["train"]
    rows = []
    last_finite = (0, float("nan"))
    for step in range(cfg.steps):
        lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_final_frac)
        loss = _ae_step(cfg, ds, codec, rng, train_idx, scatter_fields)
        try:
            check_finite(loss, "ae loss")
        except NonFiniteError as err:
            raise TrainingDiverged(
                f"ae loss non-finite at step {step}; last finite step "
                f"{last_finite[0]} had loss {last_finite[1]:.6g}") from err
        loss.backward()
        opt.step(lr)
        opt.zero_grad()
        last_finite = (step, loss.item())
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            rows.append((step, loss.item(), lr))
    return codec, rows


def _ae_step(cfg, ds, codec, rng, train_idx, scatter_fields):
    windows = []
    for _ in range(cfg.batch):
        ti = int(rng.choice(train_idx))
        traj = ds.trajectories[ti]
        t0 = int(rng.integers(0, traj.n_frames - cfg.window + 1))
        windows.append((ti, t0))

    if scatter_fields is None:
        frames = np.concatenate([
            ds.normalize_frames(ds.trajectories[ti].frames[t0:t0 + cfg.window])
            for ti, t0 in windows])
        target = Tensor(frames)
        z, stats = codec.encode(target, rng=rng, train=True)
        recon = codec.decode(z)
    else:
        # one window per step through the kernel-integral path: frames of a
        # trajectory share their point set, so neighborhoods are reused
        ti, t0 = windows[0]
        fields = scatter_fields[ti][t0:t0 + cfg.window]
        z, stats = codec.encode(fields, rng=rng, train=True)
        recon = codec.decode(z, fields[0].points)
        target = Tensor(np.stack([f.values for f in fields]))

    n_win = 1 if scatter_fields is not None else cfg.batch
    z_jerk = None
    if cfg.window >= 4:
        rest = int(np.prod(z.shape[1:]))
        z_jerk = z.reshape(n_win, cfg.window, rest).transpose((1, 0, 2))
    return ae_loss(recon, target, stats, z_jerk, codec.cfg.kl_weight,
                   codec.cfg.jerk_weight)


# -- latent encoding of a dataset ------------------------------------------------------


def encode_dataset(codec: MeshCodec, ds: Dataset, split: str,
                   chunk: int = 32) -> list[np.ndarray]:
    """Inference-mode latents (posterior means) for every trajectory of a split."""
    out = []
    with no_grad():
        for traj in ds.split(split):
            frames = ds.normalize_frames(traj.frames)
            zs = []
            for s in range(0, len(frames), chunk):
                z, _ = codec.encode(Tensor(frames[s:s + chunk]))
                zs.append(z.data)
            out.append(np.concatenate(zs, axis=0))
    return out


def latent_normalization(latents: list[np.ndarray]) -> dict:
    stacked = np.concatenate([z.reshape(-1, z.shape[-1]) for z in latents])
    return {
        "mean": stacked.mean(axis=0).tolist(),
        "std": np.maximum(stacked.std(axis=0), 1e-12).tolist(),
    }


def _apply_latent_norm(z: np.ndarray, norm: dict) -> np.ndarray:
    mean = np.asarray(norm["mean"], dtype=z.dtype)
    std = np.asarray(norm["std"], dtype=z.dtype)
    return (z - mean) / std


def _undo_latent_norm(z: np.ndarray, norm: dict) -> np.ndarray:
    mean = np.asarray(norm["mean"], dtype=z.dtype)
    std = np.asarray(norm["std"], dtype=z.dtype)
    return z * std + mean


# -- flow-matching stage ------------------------------------------------------------------


def _draw_windows(rng, latents, xis, history, batch):
    for ti, z in enumerate(latents):
        if len(z) < history + 2:
            raise ValueError(f"trajectory {ti} has {len(z)} frames; need at "
                             f"least history + 2 = {history + 2}")
    xs, hists, xi_rows = [], [], []
    for _ in range(batch):
        ti = int(rng.integers(0, len(latents)))
        z = latents[ti]
        m = int(rng.integers(history - 1, len(z) - 1))
        xs.append(z[m + 1])
        hists.append(z[m - history + 1:m + 1])
        xi_rows.append(xis[ti])
    return (Tensor(np.stack(xs)), Tensor(np.stack(hists)),
            Tensor(np.stack(xi_rows).astype(np.float32)))


def train_flow(cfg: TrainConfig, ds: Dataset, codec: MeshCodec,
               den_cfg: DenoiserConfig, path: DiffusionPath):
    """Train the velocity/noise predictor on frozen-codec latents."""
    rng = np.random.default_rng(cfg.seed)
    latents_raw = encode_dataset(codec, ds, "train")
    lat_norm = latent_normalization(latents_raw)
    latents = [_apply_latent_norm(z, lat_norm) for z in latents_raw]
    xis = [ds.normalize_xi(t.xi) for t in ds.split("train")]

    model = Denoiser(den_cfg, rng)
    grid = make_grid(path, cfg.k_steps, cfg.spacing)
    opt = Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas,
               weight_decay=cfg.weight_decay)
    rows = []
    last_finite = (0, float("nan"))
    for step in range(cfg.steps):
        lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_final_frac)
        x0, hist, xi = _draw_windows(rng, latents, xis, den_cfg.history, cfg.batch)
        pack = ConditioningPack(hist, xi)
        loss = fm_loss(model, x0, pack, path, grid, rng)
        try:
            check_finite(loss, "fm loss")
        except NonFiniteError as err:
            raise TrainingDiverged(
                f"fm loss non-finite at step {step}; last finite step "
                f"{last_finite[0]} had loss {last_finite[1]:.6g}") from err
        loss.backward()
        opt.step(lr)
        opt.zero_grad()
        last_finite = (step, loss.item())
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            rows.append((step, loss.item(), lr))
    return model, lat_norm, rows


# -- deterministic latent-AR baseline ----------------------------------------------------


class ARBaseline(Module):
    """Next-step latent regressor sharing the denoiser backbone.

    Differences from the denoiser: no diffusion state in the input stream
    (history frames only), no timestep embedding in the conditioning, and a
    persistence residual (the network predicts the correction to the most
    recent frame).
    """

    parameterization = "x0"

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        self.cfg = cfg
        w = cfg.width
        self.in_proj = Linear(cfg.history * cfg.channels, w, rng)
        spatial = (cfg.grid,) * cfg.dim
        self.pos_emb = Tensor(
            (0.02 * rng.standard_normal(spatial + (w,))).astype(np.float32),
            requires_grad=True)
        self.xi_proj = Linear(cfg.xi_dim, w, rng)
        self.blocks = [DiTBlock(kind, cfg, rng) for kind in cfg.layer_kinds()]
        self.final_norm = LayerNorm(w, affine=False)
        self.final_ada = Linear(w, 2 * w, rng, zero_init=True)
        self.out_proj = Linear(w, cfg.channels, rng, zero_init=True)

    def forward(self, history: Tensor, xi: Tensor) -> Tensor:
        cfg = self.cfg
        B = history.shape[0]
        spatial = (cfg.grid,) * cfg.dim
        hist = history.transpose((0,) + tuple(range(2, 2 + cfg.dim)) + (1, 2 + cfg.dim))
        stream = hist.reshape((B,) + spatial + (cfg.history * cfg.channels,))
        x = self.in_proj(stream) + self.pos_emb
        cond = self.xi_proj(xi)
        for block in self.blocks:
            x = block(x, cond)
        mods = self.final_ada(cond.silu())
        sh, sc = mods[:, :cfg.width], mods[:, cfg.width:]
        x = _modulate(self.final_norm(x), sh, sc, cfg.dim)
        last = history[:, -1]
        return last + self.out_proj(x)


def train_ar_baseline(cfg: TrainConfig, ds: Dataset, codec: MeshCodec,
                      den_cfg: DenoiserConfig):
    rng = np.random.default_rng(cfg.seed)
    latents_raw = encode_dataset(codec, ds, "train")
    lat_norm = latent_normalization(latents_raw)
    latents = [_apply_latent_norm(z, lat_norm) for z in latents_raw]
    xis = [ds.normalize_xi(t.xi) for t in ds.split("train")]

    model = ARBaseline(den_cfg, rng)
    opt = Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas,
               weight_decay=cfg.weight_decay)
    rows = []
    last_finite = (0, float("nan"))
    for step in range(cfg.steps):
        lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_final_frac)
        x0, hist, xi = _draw_windows(rng, latents, xis, den_cfg.history, cfg.batch)
        pred = model(hist, xi)
        diff = pred - x0
        loss = (diff * diff).mean()
        try:
            check_finite(loss, "ar loss")
        except NonFiniteError as err:
            raise TrainingDiverged(
                f"ar loss non-finite at step {step}; last finite step "
                f"{last_finite[0]} had loss {last_finite[1]:.6g}") from err
        loss.backward()
        opt.step(lr)
        opt.zero_grad()
        last_finite = (step, loss.item())
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            rows.append((step, loss.item(), lr))
    return model, lat_norm, rows


# -- checkpoints ---------------------------------------------------------------------------


def save_codec_checkpoint(path, codec: MeshCodec, ds_norm: dict):
    cfg = codec.cfg.to_dict()
    save_container(path, codec.state_dict(), {
        "kind": "codec",
        "config": cfg,
        "config_digest": config_digest(cfg),
        "data_norm": ds_norm,
    })


def load_codec_checkpoint(path):
    tensors, meta = load_container(path)
    if meta.get("kind") != "codec":
        raise ValueError(f"{path}: not a codec checkpoint")
    codec = MeshCodec(CodecConfig.from_dict(meta["config"]), np.random.default_rng(0))
    codec.load_state_dict(tensors)
    return codec, meta


def save_model_checkpoint(path, model, den_cfg: DenoiserConfig, kind: str,
                          path_cfg: dict, k_steps: int, spacing: str,
                          latent_norm: dict, codec_digest: str):
    cfg = den_cfg.to_dict()
    save_container(path, model.state_dict(), {
        "kind": kind,  # "denoiser" or "ar"
        "config": cfg,
        "config_digest": config_digest(cfg),
        "path": path_cfg,
        "k_steps": k_steps,
        "spacing": spacing,
        "latent_norm": latent_norm,
        "codec_digest": codec_digest,
    })


def load_model_checkpoint(path):
    tensors, meta = load_container(path)
    if meta.get("kind") == "denoiser":
        model = Denoiser(DenoiserConfig.from_dict(meta["config"]),
                         np.random.default_rng(0))
    elif meta.get("kind") == "ar":
        model = ARBaseline(DenoiserConfig.from_dict(meta["config"]),
                           np.random.default_rng(0))
    else:
        raise ValueError(f"{path}: not a model checkpoint")
    model.load_state_dict(tensors)
    return model, meta


def check_digests(codec_meta: dict, model_meta: dict):
    """Refuse mismatched codec/model pairs."""
    expect = model_meta.get("codec_digest")
    got = codec_meta.get("config_digest")
    if expect != got:
        raise ValueError(
            f"model was trained against codec digest {expect}, but the loaded "
            f"codec has digest {got}; refusing to mix checkpoints")


# -- rollout -------------------------------------------------------------------------------


@dataclass
class RolloutResult:
    """Decoded predictions plus per-member latent trajectories."""

    fields: np.ndarray  # (E, horizon, *spatial, C) physical units
    init_fields: np.ndarray  # (h, *spatial, C) decoded initial frames
    latents: np.ndarray  # (E, horizon, *latent, C)
    ens: int
    mode: str
    truncated: list = dc_field(default_factory=list)  # frames kept per member
    wall_time: float = 0.0

    def alive_members(self) -> list:
        return [e for e in range(self.ens) if self.truncated[e] == self.fields.shape[1]]


def rollout(codec: MeshCodec, model, ds: Dataset, init_frames: np.ndarray,
            xi: np.ndarray, horizon: int, ens: int, mode: str, seed: int,
            path: DiffusionPath | None = None, grid: TimeGrid | None = None,
            latent_norm: dict | None = None) -> RolloutResult:
    """Autoregress `horizon` steps in latent space from h physical frames.

    mode "ar" runs the deterministic baseline (ens forced to 1); the other
    modes draw a fresh latent noise initialization per step per member and
    integrate the reverse process with the given path/grid.
    """
    t_begin = time.perf_counter()
    if mode not in ("flow-euler", "ddim", "ancestral", "ar"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    if mode != "ar" and (path is None or grid is None):
        raise ValueError(f"mode {mode!r} needs a diffusion path and time grid")
    if mode == "ar":
        ens = 1
    h = init_frames.shape[0]

    with no_grad():
        z0, _ = codec.encode(Tensor(ds.normalize_frames(
            np.asarray(init_frames, dtype=np.float32))))
    z_hist = z0.data
    if latent_norm is not None:
        z_hist = _apply_latent_norm(z_hist, latent_norm)

    lat_shape = z_hist.shape[1:]
    xi_n = np.broadcast_to(ds.normalize_xi(np.asarray(xi)), (ens, len(np.atleast_1d(xi))))
    xi_t = Tensor(np.ascontiguousarray(xi_n).astype(np.float32))

    histories = np.broadcast_to(z_hist, (ens,) + z_hist.shape).copy()
    member_rngs = [np.random.default_rng(np.random.SeedSequence([seed, e]))
                   for e in range(ens)]
    sigma_bar = path.sigma_terminal if path is not None else 1.0

    alive = np.ones(ens, dtype=bool)
    kept = [0] * ens
    preds = np.zeros((ens, horizon) + lat_shape, dtype=np.float32)

    with no_grad():
        for step in range(horizon):
            hist_t = Tensor(np.ascontiguousarray(histories))
            pack = ConditioningPack(hist_t, xi_t)
            if mode == "ar":
                z_next = model(hist_t, xi_t).data
            else:
                noise = np.stack([
                    member_rngs[e].standard_normal(lat_shape).astype(np.float32)
                    for e in range(ens)])
                x_init = Tensor(noise * sigma_bar)
                if mode == "ancestral":
                    # per-member integration keeps each member's noise stream
                    # independent of the ensemble size
                    outs = []
                    for e in range(ens):
                        pack_e = ConditioningPack(hist_t[e:e + 1], xi_t[e:e + 1])
                        out_e, _ = sample(model, x_init[e:e + 1], pack_e, path, grid,
                                          mode, rng=member_rngs[e], keep_record=False)
                        outs.append(out_e.data[0])
                    z_next = np.stack(outs)
                else:
                    out, _ = sample(model, x_init, pack, path, grid, mode,
                                    keep_record=False)
                    z_next = out.data

            finite = np.isfinite(z_next.reshape(ens, -1)).all(axis=1)
            alive &= finite
            for e in range(ens):
                if alive[e]:
                    preds[e, step] = z_next[e]
                    kept[e] = step + 1
            if not alive.any():
                break
            z_safe = np.where(alive[:, None].reshape((ens,) + (1,) * len(lat_shape)),
                              z_next, 0.0)
            histories = np.concatenate([histories[:, 1:], z_safe[:, None]], axis=1)

        # decode everything at the end: initial frames and all predictions
        def decode_latents(z):
            if latent_norm is not None:
                z = _undo_latent_norm(z, latent_norm)
            out = codec.decode(Tensor(np.ascontiguousarray(z)))
            return ds.denormalize_frames(out.data)

        init_dec = decode_latents(z_hist)
        if horizon:
            flat = preds.reshape((ens * horizon,) + lat_shape)
            fields = decode_latents(flat)
            fields = fields.reshape((ens, horizon) + fields.shape[1:])
        else:
            spatial_c = init_dec.shape[1:]
            fields = np.zeros((ens, 0) + spatial_c, dtype=np.float32)

    return RolloutResult(fields, init_dec, preds, ens, mode, kept,
                         time.perf_counter() - t_begin)


def ensemble_mean(result: RolloutResult) -> np.ndarray:
    """Pointwise mean over members that survived the full horizon."""
    if result.ens < 1:
        raise ValueError("ensemble must have at least one member")
    horizon = result.fields.shape[1]
    members = [e for e in range(result.ens) if result.truncated[e] == horizon]
    if not members:
        raise ValueError("all ensemble members were truncated; nothing to average")
    return result.fields[members].mean(axis=0)
