"""Convolution identities and gradients; FFT round trips vs a naive DFT."""

import numpy as np
import pytest
from conftest import central_diff_grad, rel_err

from latentflow import fft
from latentflow.conv import conv1d, conv2d, conv_transpose1d, conv_transpose2d
from latentflow.tensor import ShapeError, Tensor


class TestConvForward:
    def test_one_by_one_identity_2d(self, rng):
        x = rng.normal(size=(2, 3, 5, 5))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        out = conv2d(Tensor(x), Tensor(w))
        np.testing.assert_allclose(out.data, x, atol=1e-12)

    def test_delta_reproduces_kernel(self, rng):
        x = np.zeros((1, 1, 9, 9))
        x[0, 0, 4, 4] = 1.0
        w = rng.normal(size=(1, 1, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), padding=1)
        # correlation of a delta gives the flipped... here kernels correlate,
        # so the kernel appears reversed around the delta
        np.testing.assert_allclose(out.data[0, 0, 3:6, 3:6], w[0, 0, ::-1, ::-1], atol=1e-12)

    def test_output_extent_formula(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 11, 13)))
        w = Tensor(rng.normal(size=(4, 2, 3, 3)))
        out = conv2d(x, w, stride=2, padding=1)
        assert out.shape == (1, 4, (11 + 2 - 3) // 2 + 1, (13 + 2 - 3) // 2 + 1)

    def test_kernel_larger_than_padded_input(self, rng):
        with pytest.raises(ShapeError, match="kernel .* larger"):
            conv2d(Tensor(rng.normal(size=(1, 1, 2, 2))),
                   Tensor(rng.normal(size=(1, 1, 5, 5))))

    def test_periodic_constant_field(self, rng):
        x = np.full((1, 1, 8, 8), 2.5)
        w = rng.normal(size=(1, 1, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), padding=1, pad_mode="periodic")
        np.testing.assert_allclose(out.data, 2.5 * w.sum(), rtol=1e-10)

    def test_conv1d_identity(self, rng):
        x = rng.normal(size=(2, 1, 8))
        out = conv1d(Tensor(x), Tensor(np.ones((1, 1, 1))))
        np.testing.assert_allclose(out.data, x, atol=1e-12)

    def test_conv_transpose_shapes(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 8, 8)))
        w = Tensor(rng.normal(size=(3, 5, 4, 4)))
        out = conv_transpose2d(x, w, stride=2, padding=1)
        assert out.shape == (1, 5, 16, 16)
        x1 = Tensor(rng.normal(size=(1, 3, 8)))
        w1 = Tensor(rng.normal(size=(3, 5, 4)))
        assert conv_transpose1d(x1, w1, stride=2, padding=1).shape == (1, 5, 16)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError, match="channels"):
            conv2d(Tensor(rng.normal(size=(1, 2, 4, 4))),
                   Tensor(rng.normal(size=(1, 3, 3, 3))))


@pytest.mark.parametrize("pad_mode", ["zero", "periodic"])
@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_grads_match_finite_differences(pad_mode, stride, rng):
    x = rng.uniform(-1, 1, size=(2, 2, 6, 6))
    w = rng.uniform(-1, 1, size=(3, 2, 3, 3))
    b = rng.uniform(-1, 1, size=3)
    proj = rng.normal(size=conv2d(Tensor(x), Tensor(w), Tensor(b), stride, 1, pad_mode).shape)

    tx, tw, tb = (Tensor(v, requires_grad=True) for v in (x, w, b))
    (conv2d(tx, tw, tb, stride, 1, pad_mode) * Tensor(proj)).sum().backward()

    def f(x_, w_, b_):
        out = conv2d(Tensor(x_), Tensor(w_), Tensor(b_), stride, 1, pad_mode)
        return float((out.data * proj).sum())

    args = [x.copy(), w.copy(), b.copy()]
    assert rel_err(tx.grad, central_diff_grad(f, args, 0)) <= 1e-4
    assert rel_err(tw.grad, central_diff_grad(f, args, 1)) <= 1e-4
    assert rel_err(tb.grad, central_diff_grad(f, args, 2)) <= 1e-4


@pytest.mark.parametrize("pad_mode", ["zero", "periodic"])
def test_conv1d_grads_match_finite_differences(pad_mode, rng):
    x = rng.uniform(-1, 1, size=(2, 3, 8))
    w = rng.uniform(-1, 1, size=(2, 3, 3))
    proj = rng.normal(size=conv1d(Tensor(x), Tensor(w), None, 2, 1, pad_mode).shape)

    tx, tw = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
    (conv1d(tx, tw, None, 2, 1, pad_mode) * Tensor(proj)).sum().backward()

    def f(x_, w_):
        return float((conv1d(Tensor(x_), Tensor(w_), None, 2, 1, pad_mode).data * proj).sum())

    args = [x.copy(), w.copy()]
    assert rel_err(tx.grad, central_diff_grad(f, args, 0)) <= 1e-4
    assert rel_err(tw.grad, central_diff_grad(f, args, 1)) <= 1e-4


@pytest.mark.parametrize("pad_mode", ["zero", "periodic"])
def test_conv_transpose2d_grads(pad_mode, rng):
    x = rng.uniform(-1, 1, size=(1, 2, 4, 4))
    w = rng.uniform(-1, 1, size=(2, 3, 4, 4))
    b = rng.uniform(-1, 1, size=3)
    proj = rng.normal(size=conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), 2, 1, pad_mode).shape)

    tx, tw, tb = (Tensor(v, requires_grad=True) for v in (x, w, b))
    (conv_transpose2d(tx, tw, tb, 2, 1, pad_mode) * Tensor(proj)).sum().backward()

    def f(x_, w_, b_):
        out = conv_transpose2d(Tensor(x_), Tensor(w_), Tensor(b_), 2, 1, pad_mode)
        return float((out.data * proj).sum())

    args = [x.copy(), w.copy(), b.copy()]
    assert rel_err(tx.grad, central_diff_grad(f, args, 0)) <= 1e-4
    assert rel_err(tw.grad, central_diff_grad(f, args, 1)) <= 1e-4
    assert rel_err(tb.grad, central_diff_grad(f, args, 2)) <= 1e-4


def test_conv_transpose1d_grads(rng):
    x = rng.uniform(-1, 1, size=(2, 2, 5))
    w = rng.uniform(-1, 1, size=(2, 2, 4))
    proj = rng.normal(size=conv_transpose1d(Tensor(x), Tensor(w), None, 2, 1).shape)
    tx, tw = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
    (conv_transpose1d(tx, tw, None, 2, 1) * Tensor(proj)).sum().backward()

    def f(x_, w_):
        return float((conv_transpose1d(Tensor(x_), Tensor(w_), None, 2, 1).data * proj).sum())

    args = [x.copy(), w.copy()]
    assert rel_err(tx.grad, central_diff_grad(f, args, 0)) <= 1e-4
    assert rel_err(tw.grad, central_diff_grad(f, args, 1)) <= 1e-4


def naive_dft(x):
    n = len(x)
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) @ x


class TestFFT:
    def test_constant_energy_in_dc(self):
        spec = fft.fft_real(np.full(16, 3.0))
        assert abs(spec[0] - 48.0) < 1e-12
        np.testing.assert_allclose(np.abs(spec[1:]), 0.0, atol=1e-12)

    def test_single_mode_peak(self):
        n = 64
        x = np.cos(2 * np.pi * 3 * np.arange(n) / n)
        spec = np.abs(fft.fft_real(x))
        assert spec[3] > 1.0 and spec[n - 3] > 1.0
        mask = np.ones(n, bool)
        mask[[3, n - 3]] = False
        assert spec[mask].max() < 1e-10

    def test_round_trip_against_naive_dft(self, rng):
        x = rng.normal(size=64)
        spec = fft.fft_real(x)
        np.testing.assert_allclose(spec, naive_dft(x), atol=1e-9)
        back = fft.ifft_real(spec)
        assert np.abs(back - x).max() <= 1e-10

    def test_2d_round_trip(self, rng):
        x = rng.normal(size=(16, 16))
        back = fft.ifft2_real(fft.fft2_real(x))
        assert np.abs(back - x).max() <= 1e-10

    def test_non_power_of_two_raises(self):
        with pytest.raises(ValueError, match="power of two"):
            fft.fft_real(np.zeros(12))
        with pytest.raises(ValueError, match="power of two"):
            fft.fft2_real(np.zeros((16, 24)))

    def test_parseval(self, rng):
        x = rng.normal(size=128)
        spec = fft.fft_real(x)
        lhs = (x ** 2).sum()
        rhs = (np.abs(spec) ** 2).sum() / len(x)
        assert abs(lhs - rhs) / abs(lhs) <= 1e-9
