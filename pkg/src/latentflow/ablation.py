"""Noise-schedule ablation harness: train matched models per diffusion path
and compare rollout NRMSE, reproducing the schedule-comparison table layout
(exponential refiner at several noise floors vs flow matching at several
step counts, plus the dense-train/50-step-sample variant).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .denoiser import DenoiserConfig
from .diagnostics import nrmse
from .forecast import TrainConfig, rollout, train_autoencoder, train_flow
from .meshcodec import CodecConfig
from .pdelab import Dataset
from .schedules import DiffusionPath, make_grid


@dataclass(frozen=True)
class ScheduleVariant:
    name: str
    path_cfg: dict
    k_train: int
    k_sample: int
    sampler_mode: str

    def path(self) -> DiffusionPath:
        return DiffusionPath.from_config(self.path_cfg)


def standard_variants() -> list:
    """The full comparison grid from the schedule-ablation table."""
    out = []
    for sigma_min in (1e-1, 1e-2, 1e-3, 1e-6):
        out.append(ScheduleVariant(
            f"exp-{sigma_min:g}",
            {"kind": "exponential", "sigma_min": sigma_min, "frame": "ve"},
            10, 10, "ddim"))
    out.append(ScheduleVariant("fm-5", {"kind": "flow-linear"}, 5, 5, "flow-euler"))
    out.append(ScheduleVariant("fm-10", {"kind": "flow-linear"}, 10, 10, "flow-euler"))
    # dense training discretization, 50-step sampling
    out.append(ScheduleVariant("fm-1000-50", {"kind": "flow-linear"}, 1000, 50,
                               "flow-euler"))
    return out


def trend_variants() -> list:
    """The subset that carries the headline ordering of the ablation."""
    all_variants = {v.name: v for v in standard_variants()}
    return [all_variants["fm-10"], all_variants["exp-0.1"], all_variants["exp-1e-06"]]


def evaluate_rollout_nrmse(codec, model, ds: Dataset, lat_norm: dict,
                           variant: ScheduleVariant, horizon: int,
                           history: int, seed: int = 0,
                           max_test: int | None = None) -> float:
    """Mean NRMSE of `horizon`-step rollouts over the test split."""
    path = variant.path()
    grid = make_grid(path, variant.k_sample)
    scores = []
    test = ds.split("test")
    if max_test is not None:
        test = test[:max_test]
    for traj in test:
        init = traj.frames[:history]
        ref = traj.frames[history:history + horizon]
        result = rollout(codec, model, ds, init, traj.xi, horizon, ens=1,
                         mode=variant.sampler_mode, seed=seed, path=path,
                         grid=grid, latent_norm=lat_norm)
        scores.append(nrmse(result.fields[0], ref))
    return float(np.mean(scores))


def run_schedule_ablation(ds: Dataset, codec_cfg: CodecConfig,
                          den_cfg: DenoiserConfig, variants: list, seeds: list,
                          ae_steps: int, fm_steps: int, horizon: int,
                          batch: int = 4, lr: float = 3e-4,
                          max_test: int | None = None,
                          out_dir=None) -> dict:
    """Train one codec per seed, then every schedule variant on top of it.

    Returns {"rows": [(variant, seed, nrmse)], "medians": {variant: value}}
    and writes schedule_ablation.csv when out_dir is given.
    """
    rows = []
    for seed in seeds:
        ae_cfg = TrainConfig(stage="ae", steps=ae_steps, batch=2, seed=seed, lr=lr)
        codec, _ = train_autoencoder(ae_cfg, ds, codec_cfg)
        for variant in variants:
            path = variant.path()
            vd = DenoiserConfig.from_dict({
                **den_cfg.to_dict(),
                "parameterization": path.default_parameterization,
            })
            fm_cfg = TrainConfig(stage="fm", steps=fm_steps, batch=batch,
                                 seed=seed, k_steps=variant.k_train, lr=lr)
            model, lat_norm, _ = train_flow(fm_cfg, ds, codec, vd, path)
            score = evaluate_rollout_nrmse(codec, model, ds, lat_norm, variant,
                                           horizon, vd.history, seed=seed,
                                           max_test=max_test)
            rows.append((variant.name, seed, score))

    medians = {}
    for variant in variants:
        vals = [r[2] for r in rows if r[0] == variant.name]
        medians[variant.name] = float(np.median(vals))

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["variant,seed,nrmse"]
        for name, seed, score in rows:
            lines.append(f"{name},{seed},{score:.9g}")
        lines.append("")
        (out / "schedule_ablation.csv").write_text("\n".join(lines))
        med_lines = ["variant,median_nrmse"]
        for name, value in medians.items():
            med_lines.append(f"{name},{value:.9g}")
        (out / "schedule_ablation_medians.csv").write_text("\n".join(med_lines) + "\n")
    return {"rows": rows, "medians": medians}
