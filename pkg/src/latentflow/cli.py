"""Command-line entry point: gen-data, train-ae, train-fm, train-ar,
rollout, eval, spectrum, ablate-schedules.

Every subcommand reads the same JSON experiment config (all fields have
per-problem defaults) and takes flag overrides for the common knobs. Heavy
imports happen inside the handlers so thread limits set by --deterministic
or LATENTFLOW_NUM_THREADS apply before numpy loads its BLAS.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path


def _set_threads(n: int):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentflow",
        description="Latent flow-matching neural PDE solver")
    parser.add_argument("--deterministic", action="store_true",
                        help="pin kernel threads to 1 for bit-reproducible runs")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, data=True, config=True, seed=True, out=True):
        if config:
            p.add_argument("--config", type=Path, default=None,
                           help="experiment config JSON (defaults per problem)")
        if data:
            p.add_argument("--data", type=Path, required=True, help="dataset file")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="rng seed override")
        if out:
            p.add_argument("--out", type=Path, required=True, help="output path")

    p = sub.add_parser("gen-data", help="generate a toy PDE dataset")
    p.add_argument("--problem", choices=["heat2d", "burgers1d", "vorticity2d"],
                   default=None)
    add_common(p, data=False)

    p = sub.add_parser("train-ae", help="train the mesh autoencoder")
    add_common(p)
    p.add_argument("--steps", type=int, default=None)

    for name, helptext in (("train-fm", "train the flow-matching denoiser"),
                           ("train-ar", "train the deterministic latent baseline")):
        p = sub.add_parser(name, help=helptext)
        add_common(p)
        p.add_argument("--codec", type=Path, required=True, help="codec checkpoint")
        p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("rollout", help="autoregressive latent rollout")
    add_common(p)
    p.add_argument("--codec", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--ens", type=int, default=None)
    p.add_argument("--mode", choices=["flow-euler", "ddim", "ancestral", "ar"],
                   default=None)
    p.add_argument("--traj", type=int, default=0, help="test-split trajectory index")
    p.add_argument("--dump-record", action="store_true",
                   help="dump one sampler audit record beside the rollout")

    p = sub.add_parser("eval", help="NRMSE + spectrum report on the test split")
    add_common(p)
    p.add_argument("--codec", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--ens", type=int, default=None)

    p = sub.add_parser("spectrum", help="windowed energy spectrum of a trajectory")
    add_common(p, config=False, seed=False)
    p.add_argument("--traj", type=int, default=0, help="trajectory index (global)")
    p.add_argument("--center", type=int, required=True)
    p.add_argument("--half-width", type=int, default=0)
    p.add_argument("--variable", type=int, default=0)

    p = sub.add_parser("ablate-schedules", help="noise-schedule comparison sweep")
    add_common(p, data=False)
    p.add_argument("--data", type=Path, default=None,
                   help="reuse an existing dataset instead of generating one")
    p.add_argument("--seeds", type=int, default=1, help="number of training seeds")
    p.add_argument("--quick", action="store_true",
                   help="tiny budgets for smoke/determinism runs")
    p.add_argument("--trend-only", action="store_true",
                   help="run only the fm-10 / exp-0.1 / exp-1e-06 subset")
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    if args.deterministic:
        _set_threads(1)
    elif os.environ.get("LATENTFLOW_NUM_THREADS"):
        _set_threads(int(os.environ["LATENTFLOW_NUM_THREADS"]))

    handler = {
        "gen-data": _cmd_gen_data,
        "train-ae": _cmd_train_ae,
        "train-fm": _cmd_train_model,
        "train-ar": _cmd_train_model,
        "rollout": _cmd_rollout,
        "eval": _cmd_eval,
        "spectrum": _cmd_spectrum,
        "ablate-schedules": _cmd_ablate,
    }[args.command]
    try:
        return handler(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


# -- handlers -------------------------------------------------------------------------


def _load_cfg(args, problem=None):
    from .config import load_config

    cfg = load_config(getattr(args, "config", None), problem=problem)
    if getattr(args, "seed", None) is not None:
        for section in ("data", "train_ae", "train_fm", "train_ar", "rollout", "eval"):
            cfg[section]["seed"] = args.seed
    return cfg


def _cmd_gen_data(args) -> int:
    from .pdelab import make_dataset, write_dataset

    cfg = _load_cfg(args, problem=args.problem)
    data_cfg = dict(cfg["data"])
    data_cfg["param_range"] = tuple(data_cfg["param_range"])
    ds = make_dataset(cfg["problem"], **data_cfg)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds.trajectories)} trajectories to {args.out}")
    return 0


def _codec_config(cfg):
    from .meshcodec import CodecConfig

    return CodecConfig.from_dict(cfg["codec"])


def _denoiser_config(cfg, parameterization="velocity"):
    from .denoiser import DenoiserConfig

    d = dict(cfg["denoiser"])
    d["parameterization"] = parameterization
    return DenoiserConfig.from_dict(d)


def _cmd_train_ae(args) -> int:
    from .forecast import TrainConfig, save_codec_checkpoint, train_autoencoder
    from .forecast import _loss_csv
    from .pdelab import read_dataset

    cfg = _load_cfg(args)
    ds = read_dataset(args.data)
    section = dict(cfg["train_ae"])
    if args.steps is not None:
        section["steps"] = args.steps
    tc = TrainConfig(stage="ae", **section)
    codec, rows = train_autoencoder(tc, ds, _codec_config(cfg))
    args.out.mkdir(parents=True, exist_ok=True)
    save_codec_checkpoint(args.out / "codec.lfnt", codec, ds.norm)
    (args.out / "ae_loss.csv").write_text(_loss_csv(rows))
    print(f"codec checkpoint: {args.out / 'codec.lfnt'} "
          f"(final loss {rows[-1][1]:.6g})")
    return 0


def _cmd_train_model(args) -> int:
    from .forecast import (TrainConfig, _loss_csv, load_codec_checkpoint,
                           save_model_checkpoint, train_ar_baseline, train_flow)
    from .pdelab import read_dataset
    from .schedules import DiffusionPath

    cfg = _load_cfg(args)
    ds = read_dataset(args.data)
    codec, codec_meta = load_codec_checkpoint(args.codec)

    is_fm = args.command == "train-fm"
    section = dict(cfg["train_fm" if is_fm else "train_ar"])
    if args.steps is not None:
        section["steps"] = args.steps
    args.out.mkdir(parents=True, exist_ok=True)

    if is_fm:
        path = DiffusionPath.from_config(cfg["path"])
        den_cfg = _denoiser_config(cfg, path.default_parameterization)
        tc = TrainConfig(stage="fm", **section)
        model, lat_norm, rows = train_flow(tc, ds, codec, den_cfg, path)
        save_model_checkpoint(args.out / "denoiser.lfnt", model, den_cfg,
                              "denoiser", path.to_config(), tc.k_steps, tc.spacing,
                              lat_norm, codec_meta["config_digest"])
        (args.out / "fm_loss.csv").write_text(_loss_csv(rows))
        print(f"denoiser checkpoint: {args.out / 'denoiser.lfnt'} "
              f"(final loss {rows[-1][1]:.6g})")
    else:
        den_cfg = _denoiser_config(cfg)
        tc = TrainConfig(stage="ar", **section)
        model, lat_norm, rows = train_ar_baseline(tc, ds, codec, den_cfg)
        save_model_checkpoint(args.out / "ar.lfnt", model, den_cfg, "ar",
                              cfg["path"], 0, "uniform-t", lat_norm,
                              codec_meta["config_digest"])
        (args.out / "ar_loss.csv").write_text(_loss_csv(rows))
        print(f"ar checkpoint: {args.out / 'ar.lfnt'} "
              f"(final loss {rows[-1][1]:.6g})")
    return 0


def _load_pair(args):
    from .forecast import check_digests, load_codec_checkpoint, load_model_checkpoint

    codec, codec_meta = load_codec_checkpoint(args.codec)
    model, model_meta = load_model_checkpoint(args.model)
    check_digests(codec_meta, model_meta)
    return codec, codec_meta, model, model_meta


def _rollout_objects(cfg, model_meta, args):
    from .schedules import DiffusionPath, make_grid

    section = dict(cfg["rollout"])
    for key in ("horizon", "ens", "mode"):
        value = getattr(args, key, None)
        if value is not None:
            section[key] = value
    if getattr(args, "seed", None) is not None:
        section["seed"] = args.seed
    mode = section["mode"]
    if model_meta["kind"] == "ar":
        mode = "ar"
    path = grid = None
    if mode != "ar":
        path = DiffusionPath.from_config(model_meta["path"])
        grid = make_grid(path, model_meta["k_steps"], model_meta["spacing"])
    return section, mode, path, grid


def _cmd_rollout(args) -> int:
    from .diagnostics import nrmse
    from .forecast import ensemble_mean, rollout
    from .pdelab import Dataset, Trajectory, read_dataset, write_dataset

    cfg = _load_cfg(args)
    ds = read_dataset(args.data)
    codec, codec_meta, model, model_meta = _load_pair(args)
    section, mode, path, grid = _rollout_objects(cfg, model_meta, args)

    history = model_meta["config"]["history"]
    test_ids = ds.splits["test"]
    if not (0 <= args.traj < len(test_ids)):
        raise ValueError(f"--traj {args.traj} outside test split of {len(test_ids)}")
    traj = ds.trajectories[test_ids[args.traj]]
    horizon = section["horizon"]
    if history + horizon > traj.n_frames:
        raise ValueError(f"horizon {horizon} plus history {history} exceeds "
                         f"trajectory length {traj.n_frames}")

    result = rollout(codec, model, ds, traj.frames[:history], traj.xi, horizon,
                     section["ens"], mode, section["seed"], path=path, grid=grid,
                     latent_norm=model_meta.get("latent_norm"))

    args.out.mkdir(parents=True, exist_ok=True)
    mean = ensemble_mean(result)
    members = [Trajectory(mean, traj.dt, traj.xi, traj.domain, traj.boundary)]
    members += [Trajectory(result.fields[e], traj.dt, traj.xi, traj.domain,
                           traj.boundary) for e in range(result.ens)]
    out_ds = Dataset(members, {"mean": [0],
                               "members": list(range(1, len(members)))}, ds.norm)
    write_dataset(out_ds, args.out / "rollout.lfds")

    ref = traj.frames[history:history + horizon]
    lines = ["frame,nrmse_mean"]
    for m in range(horizon):
        lines.append(f"{m},{nrmse(mean[m:m + 1], ref[m:m + 1]):.9g}")
    (args.out / "rollout_nrmse.csv").write_text("\n".join(lines) + "\n")

    if args.dump_record:
        _dump_record(args, codec, model, ds, traj, history, model_meta, path, grid,
                     mode, section["seed"])
    print(f"rollout written to {args.out} (mode={mode}, ens={result.ens}, "
          f"horizon={horizon})")
    return 0


def _dump_record(args, codec, model, ds, traj, history, model_meta, path, grid,
                 mode, seed):
    import numpy as np

    from .forecast import _apply_latent_norm
    from .samplers import sample
    from .serial import save_container
    from .tensor import Tensor, no_grad
    from .denoiser import ConditioningPack

    if mode == "ar":
        return
    with no_grad():
        z0, _ = codec.encode(Tensor(ds.normalize_frames(
            traj.frames[:history].astype("float32"))))
    z = z0.data
    if model_meta.get("latent_norm"):
        z = _apply_latent_norm(z, model_meta["latent_norm"])
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    x_init = Tensor((rng.standard_normal(z.shape[1:])[None] * path.sigma_terminal)
                    .astype("float32"))
    pack = ConditioningPack(Tensor(z[None]), Tensor(ds.normalize_xi(traj.xi)[None]))
    with no_grad():
        _, record = sample(model, x_init, pack, path, grid, mode, rng=rng)
    tensors = {"times": np.asarray(record.times, dtype="float64")}
    for i, (eps, state) in enumerate(zip(record.eps_hats, record.states[1:])):
        tensors[f"eps_{i:03d}"] = eps
        tensors[f"state_{i + 1:03d}"] = state
    tensors["state_000"] = record.states[0]
    save_container(args.out / "record.lfnt", tensors,
                   {"kind": "sample-record", "mode": record.mode})


def _cmd_eval(args) -> int:
    import numpy as np

    from .config import experiment_digest
    from .diagnostics import EvalReport, emit_report, nrmse, windowed_spectrum
    from .forecast import ensemble_mean, rollout
    from .pdelab import read_dataset

    cfg = _load_cfg(args)
    ds = read_dataset(args.data)
    codec, codec_meta, model, model_meta = _load_pair(args)
    section = dict(cfg["eval"])
    if args.ens is not None:
        section["ens"] = args.ens
    if args.seed is not None:
        section["seed"] = args.seed
    _, mode, path, grid = _rollout_objects(cfg, model_meta, args)

    history = model_meta["config"]["history"]
    horizons = sorted(section["horizons"])
    max_h = horizons[-1]
    label = model_meta["kind"]

    report = EvalReport(meta={
        "experiment_digest": experiment_digest(cfg),
        "codec_digest": codec_meta["config_digest"],
        "model_digest": model_meta["config_digest"],
        "ens": section["ens"],
        "seed": section["seed"],
    })

    n_ch = ds.trajectories[0].frames.shape[-1]
    per_h = {(h, c): [] for h in horizons for c in range(n_ch)}
    spec_pred: dict = {}
    spec_ref: dict = {}
    spec_proto = None
    dim = ds.trajectories[0].frames.ndim - 2
    first_pred = None
    for traj in ds.split("test"):
        if traj.n_frames < history + max_h:
            raise ValueError("test trajectory shorter than history + max horizon")
        result = rollout(codec, model, ds, traj.frames[:history], traj.xi, max_h,
                         section["ens"], mode, section["seed"], path=path,
                         grid=grid, latent_norm=model_meta.get("latent_norm"))
        mean = ensemble_mean(result)
        if first_pred is None:
            first_pred = (mean, traj)
        ref = traj.frames[history:history + max_h]
        for h in horizons:
            for c in range(n_ch):
                per_h[(h, c)].append(nrmse(mean[:h], ref[:h], variable=c))
        if dim == 2:
            hw = section["half_width"]
            for center in section["spectrum_centers"]:
                pred_spec = windowed_spectrum(mean, center, hw)
                spec_proto = pred_spec
                spec_pred.setdefault(center, []).append(pred_spec.energy)
                spec_ref.setdefault(center, []).append(
                    windowed_spectrum(ref, center, hw).energy)

    for h in horizons:
        for c in range(n_ch):
            report.add_metric(label, f"ch{c}", h, float(np.mean(per_h[(h, c)])))
    from .diagnostics import Spectrum

    for center in sorted(spec_pred):
        report.add_spectrum(label, center, Spectrum(
            spec_proto.wavenumbers, np.mean(spec_pred[center], axis=0),
            spec_proto.counts))
        report.add_spectrum("reference", center, Spectrum(
            spec_proto.wavenumbers, np.mean(spec_ref[center], axis=0),
            spec_proto.counts))
    if dim == 2 and first_pred is not None:
        mean, traj = first_pred
        report.images.append((f"{label}_final", mean[-1, :, :, 0]))
        report.images.append(("reference_final",
                              traj.frames[history + max_h - 1, :, :, 0]))
    emit_report(report, args.out)
    print(f"eval report written to {args.out}")
    return 0


def _cmd_spectrum(args) -> int:
    from .diagnostics import EvalReport, emit_report, windowed_spectrum
    from .pdelab import read_dataset

    ds = read_dataset(args.data)
    if not (0 <= args.traj < len(ds.trajectories)):
        raise ValueError(f"--traj {args.traj} outside dataset of "
                         f"{len(ds.trajectories)} trajectories")
    traj = ds.trajectories[args.traj]
    if traj.frames.ndim != 4:
        raise ValueError("spectrum subcommand needs 2D trajectories")
    spec = windowed_spectrum(traj.frames, args.center, args.half_width,
                             args.variable)
    report = EvalReport(meta={"traj": args.traj, "center": args.center,
                              "half_width": args.half_width})
    report.add_spectrum("data", args.center, spec)
    emit_report(report, args.out)
    print(f"spectrum written to {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    from .ablation import run_schedule_ablation, standard_variants, trend_variants
    from .denoiser import DenoiserConfig
    from .meshcodec import CodecConfig
    from .pdelab import make_dataset, read_dataset

    cfg = _load_cfg(args, problem="burgers1d")
    if args.data is not None:
        ds = read_dataset(args.data)
    else:
        data_cfg = dict(cfg["data"])
        data_cfg["param_range"] = tuple(data_cfg["param_range"])
        if args.quick:
            data_cfg.update(n_train=4, n_valid=1, n_test=2, t_steps=40)
        ds = make_dataset(cfg["problem"], **data_cfg)

    codec_cfg = CodecConfig.from_dict(cfg["codec"])
    den_cfg = DenoiserConfig.from_dict(dict(cfg["denoiser"]))
    variants = trend_variants() if args.trend_only else standard_variants()
    if args.quick:
        ae_steps, fm_steps, horizon = 40, 40, 5
    else:
        ae_steps = cfg["train_ae"]["steps"]
        fm_steps = cfg["train_fm"]["steps"]
        horizon = cfg["rollout"]["horizon"]
    seeds = [cfg["train_fm"]["seed"] + i for i in range(args.seeds)]
    out = run_schedule_ablation(ds, codec_cfg, den_cfg, variants, seeds,
                                ae_steps=ae_steps, fm_steps=fm_steps,
                                horizon=horizon, out_dir=args.out)
    for name, med in out["medians"].items():
        print(f"{name}: median NRMSE {med:.6g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
