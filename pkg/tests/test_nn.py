"""Tests for nn module."""

import numpy as np
import pytest

from src.demt.config import BN_EPS
from src.demt.exceptions import ShapeError, ValidationError
from src.demt.nn import (
    LinearParams,
    avg_pool,
    batch_norm,
    bilinear_sample,
    conv2d,
    gelu,
    init_batch_norm,
    init_layer_norm,
    init_linear,
    interpolation_matrix,
    l2_normalize,
    layer_norm,
    linear,
    named_norms,
    named_tensors,
    pointwise_conv,
    upsample_bilinear,
)
from src.demt.tensor import Tensor, backward, finite_diff_grad, parameter, reduce_sum


def _loop_conv(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded stride-1 cross-correlation, one output element at a time."""
    b, h, w, _ = x.shape
    cout, k, _, _ = kernel.shape
    half = k // 2
    out = np.zeros((b, h, w, cout))
    for n in range(b):
        for i in range(h):
            for j in range(w):
                for o in range(cout):
                    total = 0.0
                    for ky in range(k):
                        for kx in range(k):
                            y, xx = i + ky - half, j + kx - half
                            if 0 <= y < h and 0 <= xx < w:
                                total += float(kernel[o, ky, kx] @ x[n, y, xx])
                    out[n, i, j, o] = total
    return out


class TestLinear:
    """Test cases for linear and pointwise convolution."""

    def test_identity_weight(self):
        """Test identity weight with zero bias."""
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)))
        p = LinearParams(Tensor(np.eye(4)), Tensor(np.zeros(4)))
        assert np.allclose(linear(x, p).data, x.data)

    def test_row_sum(self):
        """Test weight [1,1,1] on [1,2,3]."""
        out = linear(Tensor([[1.0, 2.0, 3.0]]), LinearParams(Tensor([[1.0, 1.0, 1.0]])))
        assert out.data.tolist() == [[6.0]]

    def test_extent_mismatch(self):
        """Test input channel validation."""
        p = init_linear(np.random.default_rng(1), 3, 2)
        with pytest.raises(ShapeError):
            linear(Tensor(np.ones((1, 4))), p)

    def test_pointwise_identity(self):
        """Test 1x1 convolution with identity weight."""
        x = Tensor(np.random.default_rng(2).normal(size=(1, 3, 3, 2)))
        assert np.allclose(pointwise_conv(x, Tensor(np.eye(2)), None).data, x.data)

    def test_conv_k1_equals_pointwise_bitwise(self):
        """Test conv2d with a 1x1 kernel against pointwise_conv and linear."""
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(2, 4, 5, 3)))
        w = Tensor(rng.normal(size=(6, 3)))
        b = Tensor(rng.normal(size=6))
        conv = conv2d(x, Tensor(w.data.reshape(6, 1, 1, 3)), b).data
        pw = pointwise_conv(x, w, b).data
        lin = linear(x, LinearParams(w, b)).data
        assert np.array_equal(conv, pw)
        assert np.array_equal(pw, lin)


class TestConv2d:
    """Test cases for 3x3 convolution."""

    def test_average_kernel_on_constant(self):
        """Test that an averaging kernel keeps a constant interior."""
        x = Tensor(np.full((1, 5, 5, 1), 3.0))
        w = Tensor(np.full((1, 3, 3, 1), 1.0 / 9.0))
        out = conv2d(x, w).data
        assert np.allclose(out[0, 1:-1, 1:-1, 0], 3.0)
        assert out[0, 0, 0, 0] < 3.0

    def test_even_kernel_rejected(self):
        """Test kernel validation."""
        with pytest.raises(ShapeError, match="odd"):
            conv2d(Tensor(np.ones((1, 4, 4, 1))), Tensor(np.ones((1, 2, 2, 1))))

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_loop(self, seed):
        """Test 3x3 and 5x5 kernels with bias against an explicit loop."""
        rng = np.random.default_rng(200 + seed)
        x = rng.normal(size=(2, 5, 4, 3))
        for k in (3, 5):
            kernel = rng.normal(size=(2, k, k, 3))
            bias = rng.normal(size=2)
            out = conv2d(Tensor(x), Tensor(kernel), Tensor(bias)).data
            assert np.abs(out - _loop_conv(x, kernel) - bias).max() < 1e-10

    def test_gradient(self):
        """Test conv2d input and weight gradients."""
        rng = np.random.default_rng(4)
        x = parameter(rng.normal(size=(1, 4, 4, 2)))
        w = parameter(rng.normal(size=(3, 3, 3, 2)))
        proj = Tensor(rng.normal(size=(1, 4, 4, 3)))

        def f(_):
            return reduce_sum(conv2d(x, w) * proj)

        backward(f(None))
        for t in (x, w):
            num = finite_diff_grad(f, t).data
            assert np.abs(t.grad - num).max() / np.abs(num).max() < 1e-6


class TestNormalization:
    """Test cases for layer and batch normalisation."""

    def test_layer_norm_constant_is_zero(self):
        """Test that a constant channel vector normalises to beta (zero)."""
        out = layer_norm(Tensor(np.full((2, 3, 4), 5.0)), init_layer_norm(4))
        assert np.allclose(out.data, 0.0)

    def test_layer_norm_shift_invariance(self):
        """Test invariance to per-position additive shifts."""
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 6))
        shift = rng.normal(size=(3, 1)) * 10
        p = init_layer_norm(6)
        a = layer_norm(Tensor(x), p).data
        b = layer_norm(Tensor(x + shift), p).data
        assert np.abs(a - b).max() < 1e-8

    def test_batch_norm_eval_identity_statistics(self):
        """Test eval mode with running mean 0 and variance 1."""
        x = np.random.default_rng(6).normal(size=(2, 3, 3, 4))
        out = batch_norm(Tensor(x), init_batch_norm(4), "eval")
        assert np.allclose(out.data, x / np.sqrt(1.0 + BN_EPS))

    def test_batch_norm_train_constant_batch(self):
        """Test that a constant batch normalises to zero."""
        x = Tensor(np.full((2, 2, 2, 3), 4.0))
        out = batch_norm(x, init_batch_norm(3), "train")
        assert np.allclose(out.data, 0.0)

    def test_batch_norm_train_output_statistics(self):
        """Test mean 0 and variance 1 per channel after train-mode normalisation."""
        x = np.random.default_rng(7).normal(loc=3.0, scale=2.0, size=(4, 5, 5, 3))
        out = batch_norm(Tensor(x), init_batch_norm(3), "train").data
        assert np.abs(out.mean(axis=(0, 1, 2))).max() < 1e-8
        assert np.abs(out.var(axis=(0, 1, 2)) - 1.0).max() < 1e-4

    def test_batch_norm_running_statistics(self):
        """Test momentum update with the unbiased variance."""
        x = np.random.default_rng(8).normal(size=(2, 2, 2, 2))
        p = init_batch_norm(2, momentum=0.1)
        batch_norm(Tensor(x), p, "train")
        flat = x.reshape(-1, 2)
        assert np.allclose(p.running_mean, 0.1 * flat.mean(axis=0))
        assert np.allclose(p.running_var, 0.9 + 0.1 * flat.var(axis=0, ddof=1))
        assert np.all(p.running_var >= 0)

    def test_batch_norm_unknown_mode(self):
        """Test mode validation."""
        with pytest.raises(ValidationError):
            batch_norm(Tensor(np.ones((1, 2, 2, 1))), init_batch_norm(1), "test")

    def test_batch_norm_single_value_rejected(self):
        """Test that train mode needs at least two values per channel."""
        with pytest.raises(ValidationError, match="B\\*H\\*W"):
            batch_norm(Tensor(np.ones((1, 1, 1, 2))), init_batch_norm(2), "train")


class TestActivations:
    """Test cases for GELU and l2 normalisation."""

    def test_gelu_zero(self):
        """Test gelu(0) == 0."""
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_gelu_exact_value(self):
        """Test gelu(1) == Phi(1)."""
        assert abs(gelu(Tensor([1.0])).data[0] - 0.8413447460685429) < 1e-12

    def test_l2_normalize_unit_length(self):
        """Test unit-length output vectors."""
        x = Tensor(np.random.default_rng(9).normal(size=(3, 4, 3)))
        out = l2_normalize(x).data
        assert np.allclose(np.linalg.norm(out, axis=-1), 1.0)


class TestBilinearSample:
    """Test cases for deformable sampling."""

    def _grid(self, h: int, w: int, k: int = 1) -> np.ndarray:
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        coords = np.stack([ys, xs], axis=-1).astype(np.float64)
        return np.broadcast_to(coords[None, :, :, None, :], (1, h, w, k, 2)).copy()

    def test_integer_grid_is_exact_gather(self):
        """Test sampling at the pixel grid returns x exactly."""
        x = np.random.default_rng(10).normal(size=(1, 3, 4, 2))
        out = bilinear_sample(Tensor(x), Tensor(self._grid(3, 4))).data
        assert np.array_equal(out[:, :, :, 0, :], x)

    def test_centre_of_four_pixels(self):
        """Test (0.5, 0.5) on [[1,2],[3,4]] reads 2.5."""
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
        coords = Tensor(np.full((1, 2, 2, 1, 2), 0.5))
        assert np.allclose(bilinear_sample(x, coords).data, 2.5)

    def test_out_of_range_reads_zero(self):
        """Test zero padding outside the map."""
        x = Tensor(np.ones((1, 2, 2, 1)))
        coords = Tensor(np.full((1, 2, 2, 1, 2), -5.0))
        out = bilinear_sample(x, coords).data
        assert np.array_equal(out, np.zeros((1, 2, 2, 1, 1)))

    def test_half_outside_reads_half(self):
        """Test that a tap half over the edge weights the padded zero."""
        x = Tensor(np.ones((1, 2, 2, 1)))
        coords = self._grid(2, 2)
        coords[..., 1] = 1.5
        out = bilinear_sample(x, Tensor(coords)).data
        assert np.allclose(out, 0.5)

    def test_coords_shape_checked(self):
        """Test coordinate shape validation."""
        with pytest.raises(ShapeError):
            bilinear_sample(
                Tensor(np.ones((1, 2, 2, 1))), Tensor(np.ones((1, 2, 2, 1)))
            )

    def test_gradient_at_fractional_coords(self):
        """Test feature and coordinate gradients away from integer kinks."""
        rng = np.random.default_rng(11)
        x = parameter(rng.normal(size=(1, 3, 3, 2)))
        coords = self._grid(3, 3, 2) + rng.uniform(0.2, 0.8, size=(1, 3, 3, 2, 2))
        c = parameter(coords)
        proj = Tensor(rng.normal(size=(1, 3, 3, 2, 2)))

        def f(_):
            return reduce_sum(bilinear_sample(x, c) * proj)

        backward(f(None))
        for t in (x, c):
            num = finite_diff_grad(f, t, eps=1e-6).data
            err = np.abs(t.grad - num).max() / max(np.abs(num).max(), 1e-6)
            assert err < 1e-6


class TestResampling:
    """Test cases for upsampling and pooling."""

    def test_upsample_known_values(self):
        """Test 2x upsampling of [1, 3]."""
        x = Tensor(np.array([1.0, 3.0]).reshape(1, 1, 2, 1))
        out = upsample_bilinear(x, 1, 4).data.reshape(-1)
        assert np.allclose(out, [1.0, 1.5, 2.5, 3.0])

    def test_upsample_same_size_is_identity(self):
        """Test out == in returns x bitwise."""
        x = np.random.default_rng(12).normal(size=(1, 3, 4, 2))
        assert np.array_equal(upsample_bilinear(Tensor(x), 3, 4).data, x)

    def test_upsample_constant(self):
        """Test a constant map stays constant."""
        out = upsample_bilinear(Tensor(np.full((1, 2, 2, 1), 7.0)), 8, 8).data
        assert np.allclose(out, 7.0)

    def test_upsample_cannot_shrink(self):
        """Test that downsampling is rejected."""
        with pytest.raises(ShapeError):
            upsample_bilinear(Tensor(np.ones((1, 4, 4, 1))), 2, 2)

    def test_interpolation_rows_sum_to_one(self):
        """Test interpolation weights form a partition of unity."""
        assert np.allclose(interpolation_matrix(3, 12).sum(axis=1), 1.0)

    def test_avg_pool(self):
        """Test 2x2 average pooling."""
        x = Tensor(np.arange(16.0).reshape(1, 4, 4, 1))
        out = avg_pool(x, 2).data.reshape(2, 2)
        assert out.tolist() == [[2.5, 4.5], [10.5, 12.5]]

    def test_avg_pool_indivisible(self):
        """Test factor validation."""
        with pytest.raises(ShapeError):
            avg_pool(Tensor(np.ones((1, 3, 3, 1))), 2)


class TestParameterWalk:
    """Test cases for parameter name walking."""

    def test_named_tensors_and_norms(self):
        """Test dotted names over nested dataclasses and lists."""
        rng = np.random.default_rng(13)
        tree = [init_linear(rng, 2, 3), init_batch_norm(3)]
        names = [name for name, _ in named_tensors(tree)]
        assert names == ["0.weight", "0.bias", "1.gamma", "1.beta"]
        assert [name for name, _ in named_norms(tree)] == ["1"]
