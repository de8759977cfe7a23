"""Evaluation metrics: NRMSE over horizons, radially averaged energy
spectra with time-window averaging, and report/image emission.

Conventions fixed here (the normalizations matter when comparing absolute
numbers): NRMSE is RMSE divided by the root-mean-square of the reference
over the same window, per variable. Spectrum energy is |X_k|^2 / N^4, so a
constant field c has bin-0 energy c^2 and the sum of bin energies times bin
multiplicities equals the mean square of the field (Parseval).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fft import fft2_real


def nrmse(pred: np.ndarray, ref: np.ndarray, window: tuple = None,
          variable: int = 0) -> float:
    """RMSE / reference-RMS over a frame window, for one channel.

    pred, ref: (T, *spatial, C) arrays of equal shape. `window` is a
    (start, stop) frame range, defaulting to the full trajectory.
    """
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs ref {ref.shape}")
    start, stop = window if window is not None else (0, ref.shape[0])
    if not (0 <= start < stop <= ref.shape[0]):
        raise ValueError(f"window {window} outside trajectory of {ref.shape[0]} frames")
    p = pred[start:stop, ..., variable]
    r = ref[start:stop, ..., variable]
    ref_rms = np.sqrt((r**2).mean())
    if ref_rms == 0.0:
        raise ZeroDivisionError("reference window has zero RMS; NRMSE undefined")
    return float(np.sqrt(((p - r) ** 2).mean()) / ref_rms)


@dataclass
class Spectrum:
    """Radially binned energy: mean energy and multiplicity per integer bin."""

    wavenumbers: np.ndarray
    energy: np.ndarray  # mean |X|^2 / N^4 within the bin
    counts: np.ndarray

    def total(self) -> float:
        """Sum over bins with multiplicity == mean square of the field."""
        return float((self.energy * self.counts).sum())


def energy_spectrum(frame: np.ndarray) -> Spectrum:
    """Radially averaged energy spectrum of one square periodic 2D frame."""
    frame = np.asarray(frame)
    if frame.ndim == 3 and frame.shape[-1] == 1:
        frame = frame[..., 0]
    if frame.ndim != 2 or frame.shape[0] != frame.shape[1]:
        raise ValueError(f"energy_spectrum expects a square 2D field, got {frame.shape}")
    n = frame.shape[0]
    spec = np.abs(fft2_real(frame.astype(np.float64))) ** 2 / float(n) ** 4
    k = np.fft.fftfreq(n, 1.0 / n)
    k_mag = np.sqrt(k[:, None] ** 2 + k[None, :] ** 2)
    bins = np.floor(k_mag).astype(int)
    n_bins = bins.max() + 1
    counts = np.bincount(bins.ravel(), minlength=n_bins)
    sums = np.bincount(bins.ravel(), weights=spec.ravel(), minlength=n_bins)
    return Spectrum(np.arange(n_bins), sums / counts, counts)


def windowed_spectrum(frames: np.ndarray, center: int, half_width: int,
                      variable: int = 0) -> Spectrum:
    """Mean of per-frame spectra over frames [center-hw, center+hw]."""
    frames = np.asarray(frames)
    lo, hi = center - half_width, center + half_width + 1
    if lo < 0 or hi > frames.shape[0]:
        raise ValueError(f"window [{lo}, {hi}) outside trajectory of "
                         f"{frames.shape[0]} frames")
    spectra = [energy_spectrum(frames[m, ..., variable]) for m in range(lo, hi)]
    energy = np.mean([s.energy for s in spectra], axis=0)
    return Spectrum(spectra[0].wavenumbers, energy, spectra[0].counts)


# -- report emission -------------------------------------------------------------------


@dataclass
class EvalReport:
    """Long-format metric rows plus spectra and optional field images."""

    metrics: list = field(default_factory=list)  # (model, variable, horizon, value)
    spectra: list = field(default_factory=list)  # (model, center, Spectrum)
    images: list = field(default_factory=list)  # (name, 2D array)
    meta: dict = field(default_factory=dict)

    def add_metric(self, model: str, variable: str, horizon: int, value: float):
        if value < 0:
            raise ValueError(f"NRMSE must be non-negative, got {value}")
        self.metrics.append((model, variable, horizon, value))

    def add_spectrum(self, model: str, center: int, spectrum: Spectrum):
        if np.any(spectrum.energy < 0):
            raise ValueError("spectrum energies must be non-negative")
        self.spectra.append((model, center, spectrum))


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def write_pgm(path, frame: np.ndarray):
    """8-bit binary PGM with per-frame min-max scaling; scale in a sidecar."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise ValueError(f"PGM output expects a 2D field, got shape {frame.shape}")
    lo, hi = float(frame.min()), float(frame.max())
    span = hi - lo if hi > lo else 1.0
    scaled = np.round((frame - lo) / span * 255.0).astype(np.uint8)
    h, w = frame.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(scaled.tobytes())
    sidecar = Path(str(path) + ".scale.json")
    sidecar.write_text(json.dumps({"min": lo, "max": hi, "levels": 255},
                                  sort_keys=True) + "\n")


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM")
    parts = raw.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def emit_report(report: EvalReport, out_dir):
    """Write metrics.csv, spectra.csv, meta.json and PGM images."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    lines = ["model,variable,horizon,value"]
    for model, variable, horizon, value in report.metrics:
        lines.append(f"{model},{variable},{horizon},{_fmt(value)}")
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")

    lines = ["model,center,wavenumber,energy"]
    for model, center, spec in report.spectra:
        for k, e in zip(spec.wavenumbers, spec.energy):
            lines.append(f"{model},{center},{int(k)},{_fmt(float(e))}")
    (out / "spectra.csv").write_text("\n".join(lines) + "\n")

    (out / "meta.json").write_text(
        json.dumps(report.meta, sort_keys=True, indent=2) + "\n")

    for name, frame in report.images:
        write_pgm(out / f"{name}.pgm", frame)
    return out


def read_metrics_csv(path) -> list:
    rows = []
    lines = Path(path).read_text().strip().split("\n")
    for line in lines[1:]:
        model, variable, horizon, value = line.split(",")
        rows.append((model, variable, int(horizon), float(value)))
    return rows
