"""Samplers: step formulas, parameterization conversions, telescoping."""

import numpy as np
import pytest

from latentflow.samplers import (
    SampleRecord,
    ancestral_step,
    convert,
    ddim_step,
    flow_euler_step,
    multistep_decompose,
    sample,
)
from latentflow.schedules import DiffusionPath, make_grid
from latentflow.tensor import Tensor

FLOW = DiffusionPath("flow-linear")
EXP = DiffusionPath("exponential", sigma_min=1e-2)
VPD = DiffusionPath("vp-ddpm")


class EpsOracle:
    """Returns the true noise for a fixed (x0, eps) forward pair."""

    parameterization = "noise"

    def __init__(self, path, x0):
        self.path = path
        self.x0 = x0

    def __call__(self, x, t, cond):
        alpha, sigma = self.path.alpha_sigma(t)
        return (x - Tensor(self.x0) * alpha) * (1.0 / sigma)


class VelocityOracle:
    """Constant true velocity eps - x0 of the linear flow path."""

    parameterization = "velocity"

    def __init__(self, x0, eps):
        self.v = Tensor(eps - x0)

    def __call__(self, x, t, cond):
        return self.v


class RandomNet:
    """Deterministic nonlinear stand-in for an untrained denoiser."""

    parameterization = "noise"

    def __init__(self, rng, n):
        self.w1 = rng.normal(size=(n, n)) / np.sqrt(n)
        self.w2 = rng.normal(size=(n, n)) / np.sqrt(n)

    def __call__(self, x, t, cond):
        h = np.tanh(x.data @ self.w1 + t)
        return Tensor(h @ self.w2)


class TestConvert:
    def test_round_trips_exact(self, rng):
        x0 = rng.normal(size=8)
        eps = rng.normal(size=8)
        t = 0.37
        x_t = Tensor((1 - t) * x0 + t * eps, dtype=np.float64)
        v = Tensor(eps - x0, dtype=np.float64)
        for a, b in [("velocity", "noise"), ("velocity", "x0"), ("noise", "x0")]:
            p = v if a == "velocity" else convert(v, "velocity", a, x_t, t, FLOW)
            back = convert(convert(p, a, b, x_t, t, FLOW), b, a, x_t, t, FLOW)
            np.testing.assert_allclose(back.data, p.data, atol=1e-12)

    def test_true_velocity_gives_true_noise(self, rng):
        x0 = rng.normal(size=16)
        eps = rng.normal(size=16)
        for t in (0.1, 0.5, 0.9):
            x_t = Tensor((1 - t) * x0 + t * eps, dtype=np.float64)
            eps_hat = convert(Tensor(eps - x0, dtype=np.float64), "velocity", "noise",
                              x_t, t, FLOW)
            np.testing.assert_allclose(eps_hat.data, eps, atol=1e-12)

    def test_x0_at_clean_endpoint(self, rng):
        x = Tensor(rng.normal(size=4))
        out = convert(Tensor(np.zeros(4)), "velocity", "x0", x, 0.0, FLOW)
        np.testing.assert_array_equal(out.data, x.data)

    def test_velocity_requires_flow_path(self):
        with pytest.raises(ValueError, match="flow-linear"):
            convert(Tensor(np.zeros(3)), "velocity", "noise", Tensor(np.zeros(3)), 0.5, EXP)

    def test_singular_conversions_raise(self):
        x = Tensor(np.zeros(3))
        with pytest.raises(ZeroDivisionError):
            convert(Tensor(np.zeros(3)), "noise", "x0", x, 1.0, FLOW)
        with pytest.raises(ZeroDivisionError):
            convert(Tensor(np.zeros(3)), "x0", "noise", x, 0.0, FLOW)


class TestDDIMStep:
    def test_perfect_eps_recovers_x0(self, rng):
        x0 = rng.normal(size=8)
        eps = rng.normal(size=8)
        for path in (VPD, EXP, FLOW):
            t_k = 0.6
            a, s = path.alpha_sigma(t_k)
            x_k = Tensor(a * x0 + s * eps, dtype=np.float64)
            out = ddim_step(x_k, Tensor(eps, dtype=np.float64), t_k, 0.0, path)
            a0, s0 = path.alpha_sigma(0.0)
            np.testing.assert_allclose(out.data, a0 * x0 + s0 * eps, atol=1e-12)

    def test_endpoint_full_step(self, rng):
        # vp-ddpm keeps alpha(1) > 0, so the t=1 -> 0 step is regular and
        # exact noise prediction recovers x0 exactly
        x0 = rng.normal(size=8)
        eps = rng.normal(size=8)
        a, s = VPD.alpha_sigma(1.0)
        x_k = Tensor(a * x0 + s * eps, dtype=np.float64)
        out = ddim_step(x_k, Tensor(eps, dtype=np.float64), 1.0, 0.0, VPD)
        np.testing.assert_allclose(out.data, x0, atol=1e-10)

    def test_zero_eps_is_pure_rescaling(self, rng):
        x_k = Tensor(rng.normal(size=8), dtype=np.float64)
        t_k, t_s = 0.8, 0.3
        out = ddim_step(x_k, Tensor(np.zeros(8)), t_k, t_s, FLOW)
        a_k, _ = FLOW.alpha_sigma(t_k)
        a_s, _ = FLOW.alpha_sigma(t_s)
        np.testing.assert_allclose(out.data, (a_s / a_k) * x_k.data, atol=1e-12)

    def test_non_decreasing_time_pair_rejected(self):
        x = Tensor(np.zeros(3))
        with pytest.raises(ValueError, match="t_s < t_k"):
            ddim_step(x, x, 0.3, 0.5, FLOW)

    def test_alpha_zero_start_rejected(self):
        x = Tensor(np.zeros(3))
        with pytest.raises(ZeroDivisionError, match="alpha = 0"):
            ddim_step(x, x, 1.0, 0.5, FLOW)


class TestAncestralStep:
    def test_equal_lambda_is_rescaled_noop(self, rng):
        # nearly coincident times: injected variance ~ 0, update ~ rescaling
        x_k = Tensor(rng.normal(size=64), dtype=np.float64)
        t_k, t_s = 0.5 + 1e-13, 0.5
        out = ancestral_step(x_k, Tensor(np.zeros(64)), t_k, t_s, EXP,
                             np.random.default_rng(0))
        a_k, _ = EXP.alpha_sigma(t_k)
        a_s, _ = EXP.alpha_sigma(t_s)
        np.testing.assert_allclose(out.data, (a_s / a_k) * x_k.data, atol=1e-9)

    def test_injected_variance_matches(self):
        t_k, t_s = 0.9, 0.5
        lam_k, lam_s = EXP.lambda_of(t_k), EXP.lambda_of(t_s)
        rng = np.random.default_rng(3)
        draws = np.empty(10_000)
        zero = Tensor(np.zeros(1), dtype=np.float64)
        a_s, _ = EXP.alpha_sigma(t_s)
        for i in range(draws.size):
            out = ancestral_step(zero, zero, t_k, t_s, EXP, rng)
            draws[i] = out.data[0] / a_s
        target = lam_k**2 - lam_s**2
        assert abs(draws.var() - target) / target < 0.05

    def test_seeded_determinism(self, rng):
        x_k = Tensor(rng.normal(size=16), dtype=np.float64)
        eps = Tensor(rng.normal(size=16), dtype=np.float64)
        a = ancestral_step(x_k, eps, 0.8, 0.4, EXP, np.random.default_rng(42))
        b = ancestral_step(x_k, eps, 0.8, 0.4, EXP, np.random.default_rng(42))
        assert np.array_equal(a.data, b.data)

    def test_decreasing_lambda_required(self):
        x = Tensor(np.zeros(3))
        with pytest.raises(ValueError, match="t_s < t_k"):
            ancestral_step(x, x, 0.2, 0.6, EXP, np.random.default_rng(0))


class TestFlowEuler:
    def test_constant_velocity_lands_exactly(self, rng):
        x0 = rng.normal(size=8)
        eps = rng.normal(size=8)
        v = Tensor(eps - x0, dtype=np.float64)
        for steps in (1, 3, 10):
            x = Tensor(eps, dtype=np.float64)
            for i in range(steps):
                x = flow_euler_step(x, v, 1.0 / steps)
            np.testing.assert_allclose(x.data, x0, atol=1e-12)

    def test_zero_velocity_identity(self, rng):
        x = Tensor(rng.normal(size=8))
        out = flow_euler_step(x, Tensor(np.zeros(8)), 0.1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_nonpositive_dt_rejected(self):
        with pytest.raises(ValueError, match="dt > 0"):
            flow_euler_step(Tensor(np.zeros(2)), Tensor(np.zeros(2)), 0.0)

    def test_first_order_on_nonlinear_field(self):
        # synthetic bending velocity field, reference from very fine Euler
        def v(x, t):
            return np.sin(x) + t * x

        def integrate(steps):
            ts = np.linspace(1.0, 0.0, steps + 1)
            x = np.array([0.7])
            for i in range(steps):
                x = x - (ts[i] - ts[i + 1]) * v(x, ts[i])
            return x

        ref = integrate(16384)
        err_c = np.abs(integrate(128) - ref).max()
        err_f = np.abs(integrate(256) - ref).max()
        assert 1.7 <= err_c / err_f <= 2.4


class TestSample:
    def test_single_step_ddim_oracle_exact(self, rng):
        x0 = rng.normal(size=(4, 4))
        eps = rng.normal(size=(4, 4))
        model = EpsOracle(VPD, x0)
        a1, s1 = VPD.alpha_sigma(1.0)
        x_init = Tensor(a1 * x0 + s1 * eps, dtype=np.float64)
        out, record = sample(model, x_init, None, VPD, make_grid(VPD, 1), "ddim")
        np.testing.assert_allclose(out.data, x0, atol=1e-10)
        assert record.mode == "ddim" and len(record.eps_hats) == 1

    def test_ddim_oracle_exact_any_k(self, rng):
        x0 = rng.normal(size=(3, 5))
        eps = rng.normal(size=(3, 5))
        model = EpsOracle(VPD, x0)
        a1, s1 = VPD.alpha_sigma(1.0)
        x_init = Tensor(a1 * x0 + s1 * eps, dtype=np.float64)
        for k in (1, 5, 10):
            out, _ = sample(model, x_init, None, VPD, make_grid(VPD, k), "ddim")
            np.testing.assert_allclose(out.data, x0, atol=1e-10)

    def test_flow_euler_oracle_exact_any_k(self, rng):
        x0 = rng.normal(size=(4, 4))
        eps = rng.normal(size=(4, 4))
        model = VelocityOracle(x0, eps)
        for k in (1, 5, 10):
            out, _ = sample(model, Tensor(eps, dtype=np.float64), None, FLOW,
                            make_grid(FLOW, k), "flow-euler")
            np.testing.assert_allclose(out.data, x0, atol=1e-10)

    def test_ddim_velocity_native_oracle_on_flow(self, rng):
        # alpha(1) = 0 on the flow path: ddim must still start from t=1 when
        # the model is velocity-parameterized
        x0 = rng.normal(size=6)
        eps = rng.normal(size=6)
        model = VelocityOracle(x0, eps)
        out, _ = sample(model, Tensor(eps, dtype=np.float64), None, FLOW,
                        make_grid(FLOW, 4), "ddim")
        np.testing.assert_allclose(out.data, x0, atol=1e-10)

    def test_ddim_noise_native_on_flow_raises_at_boundary(self, rng):
        model = EpsOracle(FLOW, rng.normal(size=4))
        with pytest.raises(ZeroDivisionError):
            sample(model, Tensor(np.zeros(4)), None, FLOW, make_grid(FLOW, 4), "ddim")

    def test_ancestral_seeded_determinism(self, rng):
        net = RandomNet(np.random.default_rng(5), 8)
        x_init = Tensor(rng.normal(size=(3, 8)), dtype=np.float64)
        outs = []
        for _ in range(2):
            out, _ = sample(net, x_init, None, EXP, make_grid(EXP, 6), "ancestral",
                            rng=np.random.default_rng(123))
            outs.append(out.data.copy())
        assert np.array_equal(outs[0], outs[1])

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="unknown sampler mode"):
            sample(lambda x, t, c: x, Tensor(np.zeros(2)), None, FLOW,
                   make_grid(FLOW, 2), "heun")


class TestMultistepDecompose:
    def test_matches_sampler_k1(self, rng):
        net = RandomNet(np.random.default_rng(2), 8)
        x_init = Tensor(rng.normal(size=(2, 8)), dtype=np.float64)
        out, record = sample(net, x_init, None, EXP, make_grid(EXP, 1), "ddim")
        np.testing.assert_allclose(multistep_decompose(record, EXP), out.data,
                                   atol=1e-12)

    @pytest.mark.parametrize("path", [EXP, VPD], ids=["exponential", "vp-ddpm"])
    def test_matches_sampler_k10_random_net(self, path, rng):
        net = RandomNet(np.random.default_rng(9), 16)
        x_init = Tensor(rng.normal(size=(4, 16)), dtype=np.float64)
        out, record = sample(net, x_init, None, path, make_grid(path, 10), "ddim")
        decomposed = multistep_decompose(record, path)
        assert np.abs(decomposed - out.data).max() <= 1e-9

    def test_flow_path_velocity_native_decomposition(self, rng):
        # lambda(1) is infinite on the flow path; the decomposition starts
        # from the first recorded state with positive alpha and must still
        # reproduce the sampler output exactly
        x0 = rng.normal(size=8)
        eps = rng.normal(size=8)
        model = VelocityOracle(x0, eps)
        out, record = sample(model, Tensor(eps, dtype=np.float64), None, FLOW,
                             make_grid(FLOW, 8), "ddim")
        decomposed = multistep_decompose(record, FLOW)
        assert np.abs(decomposed - out.data).max() <= 1e-9

    def test_requires_ddim_record(self, rng):
        x0 = rng.normal(size=4)
        model = VelocityOracle(x0, rng.normal(size=4))
        _, record = sample(model, Tensor(np.zeros(4)), None, FLOW,
                           make_grid(FLOW, 3), "flow-euler")
        with pytest.raises(ValueError, match="ddim"):
            multistep_decompose(record, FLOW)

    def test_record_times_strictly_decreasing(self):
        with pytest.raises(ValueError, match="decreasing"):
            SampleRecord([1.0, 0.5, 0.5], [np.zeros(2), np.zeros(2)],
                         [np.zeros(2)] * 3, "ddim")
