"""Diffusion paths: flow-matching linear, exponential refiner, and VP-DDPM.

Convention used throughout: t = 0 is clean data, t = 1 is noise, and the
marginal is x_t = alpha(t) * x0 + sigma(t) * eps. The signal-to-noise
change of variable is lambda(t) = sigma(t) / alpha(t), strictly increasing
in t wherever alpha > 0.

Concrete forms:

* flow-linear:     alpha = 1 - t, sigma = t (the straight interpolant).
* exponential:     sigma(t) = sigma_min ** (1 - t), i.e. geometric from a
                   residual noise floor sigma_min at the data end up to 1
                   at the noise end. In the "ve" frame alpha is identically
                   1 (this matches treating the refiner update as an Euler
                   step in lambda space, where the rescaled state equals
                   the state itself); in the "vp" frame
                   alpha = sqrt(1 - sigma^2) with sigma clipped just below
                   1 so alpha stays positive at t = 1. The "ve" frame is
                   the default: it keeps lambda finite on the whole grid,
                   so noise-prediction sampling can start at t = 1.
* vp-ddpm:         continuous-time linear beta(t) = b0 + t*(b1 - b0) with
                   (b0, b1) = (0.1, 20), the [1e-4, 2e-2] x 1000-step
                   discrete schedule mapped to the unit interval.

Note the exponential path does not reach sigma = 0 at the data end; its
residual floor is exactly sigma_min, which is the property the schedule
ablation exercises.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor

FLOW_LINEAR = "flow-linear"
EXPONENTIAL = "exponential"
VP_DDPM = "vp-ddpm"

_KINDS = (FLOW_LINEAR, EXPONENTIAL, VP_DDPM)

# vp-frame clip: sigma <= sqrt(1 - ALPHA_MIN^2) so alpha >= ALPHA_MIN
_ALPHA_MIN = 1e-2


@dataclass(frozen=True)
class DiffusionPath:
    """Noise schedule (alpha_t, sigma_t) plus its SDE coefficients."""

    kind: str
    sigma_min: float | None = None  # exponential only
    beta_range: tuple[float, float] = (0.1, 20.0)  # vp-ddpm only
    frame: str = "ve"  # exponential only: "ve" or "vp"

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown path kind {self.kind!r}, expected one of {_KINDS}")
        if self.kind == EXPONENTIAL:
            if self.sigma_min is None or not (0.0 < self.sigma_min < 1.0):
                raise ValueError("exponential path requires 0 < sigma_min < 1")
            if self.frame not in ("ve", "vp"):
                raise ValueError(f"exponential frame must be 've' or 'vp', got {self.frame!r}")
        if self.kind == VP_DDPM and not (0 < self.beta_range[0] < self.beta_range[1]):
            raise ValueError(f"invalid beta range {self.beta_range}")

    # -- schedule ---------------------------------------------------------------

    def alpha_sigma(self, t: float) -> tuple[float, float]:
        if not (0.0 <= t <= 1.0):
            raise ValueError(f"diffusion time {t} outside [0, 1]")
        if self.kind == FLOW_LINEAR:
            return 1.0 - t, t
        if self.kind == EXPONENTIAL:
            sigma = self.sigma_min ** (1.0 - t)
            if self.frame == "ve":
                return 1.0, sigma
            sigma = min(sigma, math.sqrt(1.0 - _ALPHA_MIN**2))
            return math.sqrt(1.0 - sigma * sigma), sigma
        # vp-ddpm
        log_alpha = self._vpddpm_log_alpha(t)
        alpha = math.exp(log_alpha)
        return alpha, math.sqrt(max(1.0 - alpha * alpha, 0.0))

    def _vpddpm_log_alpha(self, t: float) -> float:
        b0, b1 = self.beta_range
        return -0.25 * t * t * (b1 - b0) - 0.5 * t * b0

    def lambda_of(self, t: float) -> float:
        alpha, sigma = self.alpha_sigma(t)
        if alpha <= 0.0:
            raise ZeroDivisionError(f"lambda undefined at t={t}: alpha(t) = 0")
        return sigma / alpha

    def drift_diffusion(self, t: float) -> tuple[float, float]:
        """(f, g^2) with f = dlog(alpha)/dt, g^2 = d(sigma^2)/dt - 2 f sigma^2."""
        if not (0.0 < t < 1.0):
            raise ValueError(f"drift/diffusion needs interior t, got {t}")
        alpha, sigma = self.alpha_sigma(t)
        if alpha <= 0.0:
            raise ZeroDivisionError(f"drift undefined at t={t}: alpha(t) = 0")
        if self.kind == FLOW_LINEAR:
            f = -1.0 / (1.0 - t)
            g2 = 2.0 * t - 2.0 * f * t * t
            return f, g2
        if self.kind == EXPONENTIAL:
            L = math.log(self.sigma_min)  # negative
            s2 = sigma * sigma
            if self.frame == "ve":
                return 0.0, -2.0 * L * s2
            if s2 >= 1.0 - _ALPHA_MIN**2:  # inside the clip: schedule is flat
                return 0.0, 0.0
            f = L * s2 / (1.0 - s2)
            return f, -2.0 * L * s2 / (1.0 - s2)
        b0, b1 = self.beta_range
        beta = b0 + t * (b1 - b0)
        return -0.5 * beta, beta

    # -- derived quantities -------------------------------------------------------

    @property
    def sigma_terminal(self) -> float:
        """Standard deviation of the t = 1 endpoint (initialization scale)."""
        return self.alpha_sigma(1.0)[1]

    @property
    def sigma_floor(self) -> float:
        """Residual noise at the data end: 0 except for the exponential path."""
        return self.alpha_sigma(0.0)[1]

    @property
    def default_parameterization(self) -> str:
        return "velocity" if self.kind == FLOW_LINEAR else "noise"

    def perturb(self, x0: Tensor, t: float, eps: Tensor) -> Tensor:
        """x_t = alpha(t) * x0 + sigma(t) * eps, exactly."""
        if x0.shape != eps.shape:
            raise ShapeError(f"perturb: x0 shape {x0.shape} != eps shape {eps.shape}")
        alpha, sigma = self.alpha_sigma(t)
        return x0 * alpha + eps * sigma

    # -- config round trip ---------------------------------------------------------

    def to_config(self) -> dict:
        cfg = {"kind": self.kind}
        if self.kind == EXPONENTIAL:
            cfg["sigma_min"] = self.sigma_min
            cfg["frame"] = self.frame
        if self.kind == VP_DDPM:
            cfg["beta_range"] = list(self.beta_range)
        return cfg

    @staticmethod
    def from_config(cfg: dict) -> "DiffusionPath":
        kind = cfg["kind"]
        if kind == EXPONENTIAL:
            return DiffusionPath(kind, sigma_min=cfg["sigma_min"],
                                 frame=cfg.get("frame", "ve"))
        if kind == VP_DDPM:
            return DiffusionPath(kind, beta_range=tuple(cfg.get("beta_range", (0.1, 20.0))))
        return DiffusionPath(kind)


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing diffusion-time knots t_0 = 0 < ... < t_K = 1."""

    knots: np.ndarray = field(repr=False)

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=np.float64)
        object.__setattr__(self, "knots", knots)
        if knots.ndim != 1 or len(knots) < 2:
            raise ValueError("TimeGrid needs at least two knots")
        if knots[0] != 0.0 or knots[-1] != 1.0:
            raise ValueError(f"TimeGrid endpoints must be exactly 0 and 1, got "
                             f"[{knots[0]}, {knots[-1]}]")
        if not np.all(np.diff(knots) > 0):
            raise ValueError("TimeGrid knots must be strictly increasing")

    @property
    def steps(self) -> int:
        return len(self.knots) - 1

    def __len__(self):
        return len(self.knots)


def make_grid(path: DiffusionPath, steps: int, spacing: str = "uniform-t") -> TimeGrid:
    """Discretize [0, 1] into `steps` intervals.

    "uniform-t" places knots at i/steps. "uniform-lambda-log" spaces the
    interior knots geometrically in lambda; endpoints stay pinned at exactly
    0 and 1, and paths whose lambda vanishes or diverges at an endpoint are
    anchored slightly inside before inverting.
    """
    if steps < 1:
        raise ValueError(f"grid needs steps >= 1, got {steps}")
    if spacing == "uniform-t":
        return TimeGrid(np.linspace(0.0, 1.0, steps + 1))
    if spacing != "uniform-lambda-log":
        raise ValueError(f"unknown spacing {spacing!r}")

    eps = 1.0 / (10.0 * steps)
    lam_lo = path.lambda_of(0.0) if path.sigma_floor > 0 else path.lambda_of(eps)
    try:
        lam_hi = path.lambda_of(1.0)
    except ZeroDivisionError:
        lam_hi = path.lambda_of(1.0 - eps)
    lams = np.geomspace(lam_lo, lam_hi, steps + 1)
    knots = np.array([_invert_lambda(path, lam) for lam in lams])
    knots[0], knots[-1] = 0.0, 1.0
    knots = np.maximum.accumulate(knots)
    if not np.all(np.diff(knots) > 0):
        raise ValueError("lambda-log spacing produced a degenerate grid; "
                         "use fewer steps or uniform-t")
    return TimeGrid(knots)


def _invert_lambda(path: DiffusionPath, lam: float) -> float:
    """Bisection inverse of the strictly increasing map t -> lambda(t)."""
    lo, hi = 0.0, 1.0
    f_lo = path.lambda_of(lo) - lam if path.sigma_floor > 0 else -lam
    if f_lo >= 0:
        return 0.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        try:
            val = path.lambda_of(mid) - lam
        except ZeroDivisionError:
            val = float("inf")
        if val < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
