"""Reverse-process integrators: DDIM, ancestral SDE, and flow-ODE Euler.

A model passed to `sample` is any callable `model(x, t, cond) -> Tensor`
with a `parameterization` attribute, either "velocity" or "noise". The
velocity parameterization is native to the linear flow path and stays
regular at t = 1, where alpha vanishes; noise-parameterized models can only
be integrated on paths whose alpha is positive at every grid knot.

`multistep_decompose` reconstructs the DDIM output as the linear
combination of recorded noise predictions in lambda space,
x~_0 = x~_K - sum_i eps_i (lambda_i - lambda_{i-1}); it is used as an exact
cross-check of the step-by-step sampler.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedules import FLOW_LINEAR, DiffusionPath, TimeGrid
from .tensor import Tensor

MODES = ("ddim", "ancestral", "flow-euler")

PARAMS = ("velocity", "noise", "x0")


def convert(pred: Tensor, from_param: str, to_param: str, x_t: Tensor, t: float,
            path: DiffusionPath) -> Tensor:
    """Convert between prediction parameterizations at state (x_t, t).

    Velocity is defined by the linear flow interpolant (v = eps - x0), so
    velocity conversions require the flow-linear path. Noise <-> x0
    conversions on general paths divide by alpha or sigma and raise where
    the divisor vanishes.
    """
    if from_param not in PARAMS or to_param not in PARAMS:
        raise ValueError(f"unknown parameterization {from_param!r} -> {to_param!r}")
    if from_param == to_param:
        return pred
    if "velocity" in (from_param, to_param) and path.kind != FLOW_LINEAR:
        raise ValueError("velocity parameterization is defined on the flow-linear path only")

    alpha, sigma = path.alpha_sigma(t)
    if from_param == "velocity":
        if to_param == "noise":
            return x_t + pred * (1.0 - t)
        return x_t - pred * t  # x0
    if from_param == "noise":
        if to_param == "x0":
            if alpha == 0.0:
                raise ZeroDivisionError(f"noise->x0 undefined at t={t}: alpha = 0")
            return (x_t - pred * sigma) * (1.0 / alpha)
        # noise -> velocity (flow path): v = (eps - x_t) / (1 - t)
        if t >= 1.0:
            raise ZeroDivisionError("noise->velocity undefined at t=1")
        return (pred - x_t) * (1.0 / (1.0 - t))
    # from x0
    if to_param == "noise":
        if sigma == 0.0:
            raise ZeroDivisionError(f"x0->noise undefined at t={t}: sigma = 0")
        return (x_t - pred * alpha) * (1.0 / sigma)
    if t <= 0.0:
        raise ZeroDivisionError("x0->velocity undefined at t=0")
    return (x_t - pred) * (1.0 / t)  # v = (x_t - x0) / t


def ddim_step(x_k: Tensor, eps_hat: Tensor, t_k: float, t_s: float,
              path: DiffusionPath) -> Tensor:
    """x_s = (a_s/a_k) x_k - a_s (s_k/a_k - s_s/a_s) eps_hat."""
    _check_times(t_k, t_s)
    a_k, s_k = path.alpha_sigma(t_k)
    a_s, s_s = path.alpha_sigma(t_s)
    if a_k == 0.0:
        raise ZeroDivisionError(
            f"ddim_step undefined at t={t_k}: alpha = 0 (use a velocity-native "
            f"model via sample(), or a path with positive alpha)")
    return x_k * (a_s / a_k) - eps_hat * (a_s * (s_k / a_k - s_s / a_s))


def ancestral_step(x_k: Tensor, eps_hat: Tensor, t_k: float, t_s: float,
                   path: DiffusionPath, rng: np.random.Generator) -> Tensor:
    """Euler step in lambda space with matched-variance noise injection."""
    _check_times(t_k, t_s)
    a_k, _ = path.alpha_sigma(t_k)
    a_s, _ = path.alpha_sigma(t_s)
    if a_k == 0.0:
        raise ZeroDivisionError(f"ancestral_step undefined at t={t_k}: alpha = 0")
    lam_k = path.lambda_of(t_k)
    lam_s = path.lambda_of(t_s)
    if lam_k < lam_s:
        raise ValueError(f"ancestral_step requires lambda_k >= lambda_s, "
                         f"got {lam_k} < {lam_s}")
    x_tilde = x_k * (1.0 / a_k)
    step = x_tilde - eps_hat * (2.0 * (lam_k - lam_s))
    var = lam_k * lam_k - lam_s * lam_s
    if var > 0.0:
        noise = rng.standard_normal(x_k.shape).astype(x_k.dtype)
        step = step + Tensor(noise) * float(np.sqrt(var))
    return step * a_s


def flow_euler_step(x_t: Tensor, v_hat: Tensor, dt: float) -> Tensor:
    """One reverse Euler step of the flow ODE: x_{t-dt} = x_t - dt * v_hat."""
    if dt <= 0.0:
        raise ValueError(f"flow_euler_step requires dt > 0, got {dt}")
    return x_t - v_hat * dt


def _check_times(t_k: float, t_s: float):
    if not (0.0 <= t_s < t_k <= 1.0):
        raise ValueError(f"sampler step requires 0 <= t_s < t_k <= 1, got "
                         f"t_k={t_k}, t_s={t_s}")


@dataclass
class SampleRecord:
    """Per-step audit trail of one reverse integration.

    times: diffusion times visited, strictly decreasing, length K+1.
    eps_hats: noise-parameterized prediction at each evaluated knot, length K.
    states: x at each time, length K+1 (states[0] is the initialization).
    """

    times: list
    eps_hats: list
    states: list
    mode: str

    def __post_init__(self):
        if len(self.times) != len(self.states) or len(self.eps_hats) != len(self.times) - 1:
            raise ValueError("inconsistent record lengths")
        if any(b >= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("record times must be strictly decreasing")


def sample(model, x_init: Tensor, cond, path: DiffusionPath, grid: TimeGrid,
           mode: str = "flow-euler", rng: np.random.Generator | None = None,
           keep_record: bool = True):
    """Integrate the reverse process from t = 1 to t = 0 over the grid knots.

    Returns (x0_hat, SampleRecord). The model is evaluated at knots
    t_K, ..., t_1 (never at t_0 = 0). For "ddim" the update is applied in
    its (x0_hat, eps_hat) form, which is algebraically identical to the
    lambda-space step wherever alpha > 0 and extends continuously to an
    alpha = 0 start knot when the model is velocity-native.
    """
    if mode not in MODES:
        raise ValueError(f"unknown sampler mode {mode!r}, expected one of {MODES}")
    if mode == "ancestral" and rng is None:
        raise ValueError("ancestral mode needs a seeded rng")
    param = getattr(model, "parameterization", path.default_parameterization)

    knots = grid.knots
    x = x_init
    times = [float(knots[-1])]
    eps_hats: list[np.ndarray] = []
    states = [np.array(x.data, copy=True)]

    for i in range(grid.steps, 0, -1):
        t_k, t_s = float(knots[i]), float(knots[i - 1])
        pred = model(x, t_k, cond)
        if pred.shape != x.shape:
            raise ValueError(f"model prediction shape {pred.shape} != state shape {x.shape}")
        eps_hat = convert(pred, param, "noise", x, t_k, path)
        if mode == "flow-euler":
            v_hat = convert(pred, param, "velocity", x, t_k, path)
            x = flow_euler_step(x, v_hat, t_k - t_s)
        elif mode == "ddim":
            x0_hat = _to_x0(pred, param, x, t_k, path)
            a_s, s_s = path.alpha_sigma(t_s)
            x = x0_hat * a_s + eps_hat * s_s
        else:
            x = ancestral_step(x, eps_hat, t_k, t_s, path, rng)
        if keep_record:
            eps_hats.append(np.array(eps_hat.data, copy=True))
            states.append(np.array(x.data, copy=True))
            times.append(t_s)

    record = SampleRecord(times, eps_hats, states, mode) if keep_record else None
    return x, record


def _to_x0(pred: Tensor, param: str, x: Tensor, t: float, path: DiffusionPath) -> Tensor:
    if param == "velocity":
        return convert(pred, "velocity", "x0", x, t, path)
    if param == "x0":
        return pred
    return convert(pred, "noise", "x0", x, t, path)


def multistep_decompose(record: SampleRecord, path: DiffusionPath) -> np.ndarray:
    """Rebuild the DDIM output as a lambda-weighted sum of noise predictions.

    Telescopes from the highest knot whose alpha is positive (on the linear
    flow path the start knot t = 1 has alpha = 0, so the sum starts from the
    recorded state one step in); the result must match the sampler output to
    floating-point accuracy.
    """
    if record.mode != "ddim":
        raise ValueError(f"multistep decomposition applies to ddim records, got "
                         f"{record.mode!r}")
    times = record.times
    n_steps = len(record.eps_hats)

    start = 0  # index into times/states: largest t with alpha > 0
    while start <= n_steps and path.alpha_sigma(times[start])[0] == 0.0:
        start += 1
    if start > n_steps:
        raise ValueError("no knot with positive alpha in record")

    a_start, _ = path.alpha_sigma(times[start])
    x_tilde = np.asarray(record.states[start], dtype=np.float64) / a_start
    lam = [path.lambda_of(t) for t in times[start:]]
    for j, m in enumerate(range(start, n_steps)):
        eps = np.asarray(record.eps_hats[m], dtype=np.float64)
        x_tilde = x_tilde - eps * (lam[j] - lam[j + 1])
    a_final, _ = path.alpha_sigma(times[-1])
    return x_tilde * a_final
