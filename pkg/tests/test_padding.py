import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pppad.padding import (
    CLASSIC_MODES,
    PaddingMode,
    pad,
    pad_backward,
    partial_conv2d,
    partial_conv2d_backward,
    partial_scale,
)
from pppad.tensor import ConvKernel, DimensionError, conv2d_valid, gradient_check

NUMPY_MODE = {"zero": "constant", "reflect": "reflect", "replicate": "edge", "circular": "wrap"}


def row(values):
    return np.array(values, dtype=np.float32).reshape(1, 1, 1, -1)


def pad_row(values, mode, p=1):
    """Pad a single row along W only by padding a 3-row copy and taking the middle row."""
    x = np.repeat(row(values), 3, axis=2)
    return pad(x, mode, p)[0, 0, p + 1].tolist()


def index_oracle(length, p, mode):
    """Source index for padded position i, written as plain conditionals."""
    out = []
    for i in range(-p, length + p):
        if 0 <= i < length:
            out.append(i)
        elif mode == "zero":
            out.append(None)
        elif mode == "replicate":
            out.append(0 if i < 0 else length - 1)
        elif mode == "circular":
            out.append(i % length)
        elif mode == "reflect":
            out.append(-i if i < 0 else 2 * (length - 1) - i)
    return out


class TestPad:
    def test_zero(self):
        assert pad_row([1, 2, 3], "zero") == [0, 1, 2, 3, 0]

    def test_replicate(self):
        assert pad_row([1, 2, 3], "replicate") == [1, 1, 2, 3, 3]

    def test_circular(self):
        assert pad_row([1, 2, 3], "circular") == [3, 1, 2, 3, 1]

    def test_reflect(self):
        assert pad_row([1, 2, 3], "reflect") == [2, 1, 2, 3, 2]

    @pytest.mark.parametrize("mode", CLASSIC_MODES)
    def test_index_map_oracle(self, rng, mode):
        x = rng.standard_normal((1, 1, 1, 6)).astype(np.float32)
        x3 = np.repeat(x, 5, axis=2)
        padded = pad(x3, mode, 2)[0, 0, 3]
        for got, src in zip(padded, index_oracle(6, 2, mode)):
            assert got == (0 if src is None else x[0, 0, 0, src])

    @pytest.mark.parametrize("mode", CLASSIC_MODES)
    def test_matches_numpy_pad(self, rng, mode):
        x = rng.standard_normal((2, 3, 5, 7)).astype(np.float32)
        expected = np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)), mode=NUMPY_MODE[mode])
        assert np.array_equal(pad(x, mode, 2), expected)

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from(CLASSIC_MODES), st.integers(2, 7), st.integers(2, 7), st.integers(0, 1))
    def test_interior_preserved(self, mode, h, w, p):
        x = np.arange(h * w, dtype=np.float32).reshape(1, 1, h, w)
        out = pad(x, mode, p)
        assert out.shape == (1, 1, h + 2 * p, w + 2 * p)
        assert np.array_equal(out[:, :, p:p + h, p:p + w], x)

    def test_reflect_too_wide(self):
        with pytest.raises(ValueError):
            pad(np.zeros((1, 1, 3, 3), np.float32), "reflect", 3)

    def test_partial_is_not_a_standalone_pad(self):
        with pytest.raises(ValueError):
            pad(np.zeros((1, 1, 3, 3), np.float32), "partial", 1)

    def test_circular_conv_commutes_with_cyclic_shift(self, rng):
        x = rng.standard_normal((1, 3, 10, 10)).astype(np.float32)
        k = ConvKernel(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
        out = conv2d_valid(pad(x, "circular", 1), k)
        for dy, dx in [(1, 0), (3, 7), (9, 9)]:
            shifted = conv2d_valid(pad(np.roll(x, (dy, dx), axis=(2, 3)), "circular", 1), k)
            assert np.array_equal(np.roll(out, (dy, dx), axis=(2, 3)), shifted)


class TestPadBackward:
    def test_zero_crops(self, rng):
        g = rng.standard_normal((1, 1, 5, 5))
        assert np.array_equal(pad_backward(g, "zero", 1, (1, 1, 3, 3)), g[:, :, 1:4, 1:4])

    def test_replicate_row(self):
        a, b, c, d, e = 1.0, 2.0, 3.0, 4.0, 5.0
        g = np.zeros((1, 1, 3, 5))
        g[0, 0, 1] = [a, b, c, d, e]
        # a single-row map: the zero gradient in the two padded rows adds nothing
        grad = pad_backward(g, "replicate", 1, (1, 1, 1, 3))
        assert grad[0, 0, 0].tolist() == [a + b, c, d + e]

    @pytest.mark.parametrize("mode", CLASSIC_MODES)
    @pytest.mark.parametrize("seed", range(3))
    def test_dot_product_identity(self, mode, seed):
        r = np.random.default_rng(seed)
        x = r.standard_normal((2, 3, 5, 6)).astype(np.float32)
        g = r.standard_normal((2, 3, 9, 10)).astype(np.float32)
        lhs = float(np.sum(pad(x, mode, 2).astype(np.float64) * g))
        rhs = float(np.sum(x.astype(np.float64) * pad_backward(g, mode, 2, x.shape)))
        assert lhs == pytest.approx(rhs, rel=1e-4)

    @pytest.mark.parametrize("mode", CLASSIC_MODES)
    def test_gradient_check(self, rng, mode):
        x = rng.standard_normal((1, 2, 4, 5))
        err = gradient_check(lambda x: pad(x, mode, 1), lambda g, x: [pad_backward(g, mode, 1, x.shape)], [x])
        assert err < 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            pad_backward(np.zeros((1, 1, 4, 4)), "zero", 1, (1, 1, 3, 3))


class TestPartialConv:
    def test_corner_and_center_on_ones(self):
        x = np.ones((1, 1, 3, 3), np.float32)
        out = partial_conv2d(x, ConvKernel(np.ones((1, 1, 3, 3), np.float32)), 1)
        # corner window sees 4 in-image ones, scaled by 9/4
        assert out[0, 0, 0, 0] == 9
        assert out[0, 0, 1, 1] == 9
        assert np.all(out == 9)

    def test_interior_equals_zero_pad_conv(self, rng):
        x = rng.standard_normal((1, 2, 7, 7)).astype(np.float32)
        k = ConvKernel(rng.standard_normal((3, 2, 3, 3)).astype(np.float32), rng.standard_normal(3).astype(np.float32))
        plain = conv2d_valid(pad(x, "zero", 1), k)
        part = partial_conv2d(x, k, 1)
        assert np.array_equal(part[:, :, 1:-1, 1:-1], plain[:, :, 1:-1, 1:-1])

    def test_scale_map_brute_force(self):
        h, w, p = 4, 6, 1
        scale = partial_scale(h, w, 3, 3, p)
        for i in range(h):
            for j in range(w):
                n_valid = sum(
                    1 for a in range(3) for b in range(3) if 0 <= i - p + a < h and 0 <= j - p + b < w
                )
                assert scale[i, j] == 9 / n_valid

    def test_scale_precomputed_is_identical(self, rng):
        x = rng.standard_normal((1, 1, 6, 6)).astype(np.float32)
        k = ConvKernel(rng.standard_normal((1, 1, 3, 3)).astype(np.float32))
        # per-call scale: count in-image cells with a ones-mask convolution
        n_valid = conv2d_valid(pad(np.ones_like(x), "zero", 1), ConvKernel(np.ones((1, 1, 3, 3), np.float32)))
        per_call = conv2d_valid(pad(x, "zero", 1), k) * (np.float32(9) / n_valid)
        assert np.array_equal(partial_conv2d(x, k, 1), per_call)
        assert np.array_equal(partial_conv2d(x, k, 1), per_call)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            partial_conv2d(np.zeros((1, 1, 4, 4), np.float32), ConvKernel(np.zeros((1, 1, 2, 2), np.float32)), 1)

    def test_gradient_check(self, rng):
        x, w, b = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((2, 2, 3, 3)), rng.standard_normal(2)
        err = gradient_check(
            lambda x, w, b: partial_conv2d(x, ConvKernel(w, b), 1),
            lambda g, x, w, b: partial_conv2d_backward(g, x, ConvKernel(w, b), 1),
            [x, w, b],
        )
        assert err < 1e-5


def test_padding_mode_names():
    assert PaddingMode.parse("Zero").tag == "zero"
    assert PaddingMode.parse("pp-pad").pp_config.h_p == 2
    with pytest.raises(ValueError):
        PaddingMode.parse("cap")
