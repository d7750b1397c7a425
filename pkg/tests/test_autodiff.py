import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import csfold.autodiff as ad
import oracles
from csfold.autodiff import Tape, Tensor, backward
from csfold.errors import ConfigurationError, ContractError, DimensionError, NumericalError
from csfold.gradcheck import check_function, check_primitives


class TestConv2d:
    def test_1x1_channel_sum(self):
        x = Tensor(np.array([[[1.0]], [[2.0]]]))
        w = Tensor(np.ones((1, 2, 1, 1)))
        b = Tensor(np.zeros(1))
        out = ad.conv2d(x, w, b)
        assert out.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == pytest.approx(3.0)

    def test_depthwise_identity_kernel(self, rng):
        x = Tensor(rng.normal(size=(3, 5, 5)))
        kernel = np.zeros((3, 1, 3, 3))
        kernel[:, 0, 1, 1] = 1.0
        out = ad.conv2d(x, Tensor(kernel), None, padding=1, groups=3)
        np.testing.assert_array_equal(out.data, x.data)

    @pytest.mark.parametrize("seed", range(3))
    def test_weight_gradient_matches_finite_differences(self, seed):
        gen = np.random.default_rng(seed)
        x = Tensor(gen.normal(size=(1, 4, 4)), requires_grad=True)
        w = Tensor(gen.normal(size=(1, 1, 2, 2)), requires_grad=True)
        probe = gen.normal(size=(1, 3, 3))

        def build():
            return ad.sum_all(ad.mul(ad.conv2d(x, w), Tensor(probe)))

        for result in check_function("conv", build, [("weight", w), ("input", x)], tol=1e-3):
            assert result.passed, f"{result.name}: {result.error:.2e}"

    @pytest.mark.parametrize(
        "cin,cout,k,stride,pad,groups",
        [
            (3, 3, 3, 1, 1, 3),   # depthwise
            (2, 4, 3, 1, 1, 1),   # general
            (2, 4, 1, 1, 0, 1),   # pointwise
            (1, 3, 2, 2, 0, 1),   # strided
            (4, 6, 3, 1, 1, 2),   # grouped, non-depthwise
        ],
    )
    def test_matches_quadruple_loop_oracle(self, rng, cin, cout, k, stride, pad, groups):
        x = rng.normal(size=(cin, 8, 8))
        w = rng.normal(size=(cout, cin // groups, k, k))
        b = rng.normal(size=cout)
        got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad, groups=groups)
        want = oracles.conv2d(x, w, b, stride=stride, padding=pad, groups=groups)
        np.testing.assert_allclose(got.data, want, atol=1e-6)

    def test_batched_matches_stacked(self, rng):
        xs = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)))
        b = Tensor(rng.normal(size=4))
        batched = ad.conv2d(Tensor(xs), w, b, padding=1)
        for i in range(2):
            single = ad.conv2d(Tensor(xs[i]), w, b, padding=1)
            np.testing.assert_array_equal(batched.data[i], single.data)

    def test_shape_errors(self, rng):
        x = Tensor(rng.normal(size=(3, 4, 4)))
        with pytest.raises(DimensionError):
            ad.conv2d(x, Tensor(rng.normal(size=(2, 2, 1, 1))))  # wants Cin=2
        with pytest.raises(ConfigurationError):
            ad.conv2d(x, Tensor(rng.normal(size=(2, 1, 1, 1))), groups=2)  # 3 % 2 != 0


class TestMatmul:
    def test_identity(self):
        b = Tensor(np.arange(9.0).reshape(3, 3))
        out = ad.matmul(Tensor(np.eye(3)), b)
        np.testing.assert_allclose(out.data, b.data)

    def test_row_sums(self):
        out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_allclose(out.data, [[3.0], [7.0]])

    def test_inner_dim_mismatch(self):
        with pytest.raises(DimensionError):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestSoftmax:
    def test_uniform_on_constant(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-6)

    def test_large_logits_stable(self):
        out = ad.softmax(Tensor([1000.0, 0.0]), axis=0)
        assert np.all(np.isfinite(out.data))
        assert out.data[0] == pytest.approx(1.0, abs=1e-6)
        assert out.data[1] == pytest.approx(0.0, abs=1e-6)

    @given(
        hnp.arrays(
            np.float32,
            hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=6),
            elements=st.floats(-50, 50, width=32),
        )
    )
    @settings(max_examples=40, deadline=None)
    def test_slices_sum_to_one(self, arr):
        out = ad.softmax(Tensor(arr), axis=0)
        sums = out.data.sum(axis=0)
        np.testing.assert_allclose(sums, np.ones_like(sums), atol=1e-5)
        assert np.all(out.data > 0.0)


class TestLayerNorm:
    def test_standardizes_channels(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1))
        out = ad.layer_norm(x, 0, Tensor(np.ones((3, 1, 1))), Tensor(np.zeros((3, 1, 1))))
        np.testing.assert_allclose(out.data.ravel(), [-1.2247, 0.0, 1.2247], atol=1e-3)

    def test_affine_collapse(self, rng):
        x = Tensor(rng.normal(size=(4, 2, 2)))
        out = ad.layer_norm(x, 0, Tensor(np.zeros((4, 1, 1))), Tensor(np.full((4, 1, 1), 2.5)))
        np.testing.assert_allclose(out.data, np.full((4, 2, 2), 2.5), atol=1e-6)

    def test_matches_oracle(self, rng):
        x = rng.normal(size=(5, 3, 3))
        gamma = rng.normal(size=5)
        beta = rng.normal(size=5)
        got = ad.layer_norm(Tensor(x), 0, Tensor(gamma.reshape(5, 1, 1)), Tensor(beta.reshape(5, 1, 1)))
        np.testing.assert_allclose(got.data, oracles.channel_layer_norm(x, gamma, beta), atol=1e-5)

    def test_single_element_axis_is_finite(self):
        x = Tensor(np.array([[[3.0, -1.0], [0.5, 2.0]]]))  # one channel
        out = ad.layer_norm(x, 0, Tensor(np.ones((1, 1, 1))), Tensor(np.full((1, 1, 1), 7.0)))
        np.testing.assert_allclose(out.data, np.full((1, 2, 2), 7.0), atol=1e-6)


class TestGelu:
    def test_reference_values(self):
        out = ad.gelu(Tensor([0.0, 1.0, -1.0]))
        np.testing.assert_allclose(out.data, [0.0, 0.841345, -0.158655], atol=1e-5)

    def test_matches_oracle(self, rng):
        x = rng.normal(size=(3, 4))
        np.testing.assert_allclose(ad.gelu(Tensor(x)).data, oracles.gelu(x), atol=1e-6)


class TestStructuralOps:
    def test_concat_slice_roundtrip(self, rng):
        x = Tensor(rng.normal(size=(5, 3, 3)))
        a = ad.slice_channels(x, 0, 2)
        b = ad.slice_channels(x, 2, 5)
        np.testing.assert_array_equal(ad.concat([a, b], axis=0).data, x.data)

    def test_slice_range_validation(self, rng):
        x = Tensor(rng.normal(size=(3, 2, 2)))
        with pytest.raises(DimensionError):
            ad.slice_axis(x, 0, 2, 2)
        with pytest.raises(DimensionError):
            ad.slice_axis(x, 0, 0, 4)

    def test_transpose2d_and_permute(self, rng):
        x = rng.normal(size=(3, 5)).astype(np.float32)
        np.testing.assert_array_equal(ad.transpose2d(Tensor(x)).data, x.T)
        y = rng.normal(size=(2, 3, 4)).astype(np.float32)
        np.testing.assert_array_equal(ad.permute(Tensor(y), (2, 0, 1)).data, np.transpose(y, (2, 0, 1)))

    def test_scale_by_learnable_scalar(self, rng):
        x = Tensor(rng.normal(size=(2, 2)))
        s = Tensor(np.array([0.5]))
        np.testing.assert_allclose(ad.scale(x, s).data, 0.5 * x.data, atol=1e-7)
        with pytest.raises(ContractError):
            ad.scale(x, Tensor(np.ones(3)))


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        with Tape():
            backward(ad.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4), dtype=np.float32))

    def test_half_square_norm_gives_x(self, rng):
        x = Tensor(rng.normal(size=(5,)), requires_grad=True)
        with Tape():
            loss = ad.scale(ad.sum_all(ad.mul(x, x)), 0.5)
            backward(loss)
        np.testing.assert_allclose(x.grad, x.data, atol=1e-6)

    def test_double_use_accumulates_both_paths(self, rng):
        x = Tensor(rng.normal(size=(4,)), requires_grad=True)
        a = rng.normal(size=4).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        with Tape():
            loss = ad.add(ad.sum_all(ad.mul(x, Tensor(a))), ad.sum_all(ad.mul(x, Tensor(b))))
            backward(loss)
        np.testing.assert_allclose(x.grad, a + b, atol=1e-6)

    def test_repeated_backward_accumulates(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with Tape():
            loss = ad.sum_all(x)
            backward(loss)
            backward(loss)
        np.testing.assert_array_equal(x.grad, np.full(3, 2.0, dtype=np.float32))

    def test_non_scalar_loss_rejected(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with Tape():
            y = ad.mul(x, x)
            with pytest.raises(ContractError):
                backward(y)

    def test_backward_needs_tape(self, rng):
        x = Tensor(rng.normal(size=(1,)), requires_grad=True)
        with pytest.raises(ContractError):
            backward(x)
        with Tape():
            with pytest.raises(ContractError):
                backward(x)  # tape is empty

    def test_no_tape_means_no_recording(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        y = ad.mul(x, x)
        assert not y.requires_grad

    def test_clear_frees_records(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with Tape() as tape:
            ad.mul(x, x)
            assert len(tape) == 1
            tape.clear()
            assert len(tape) == 0

    def test_grad_only_flows_to_requires_grad(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        c = Tensor(rng.normal(size=(3,)))
        with Tape():
            backward(ad.sum_all(ad.mul(x, c)))
        assert c.grad is None
        np.testing.assert_allclose(x.grad, c.data, atol=1e-7)


class TestDebugChecks:
    def test_nan_output_raises_when_enabled(self):
        ad.set_debug_checks(True)
        bad = Tensor([1.0, -1.0])
        with pytest.raises(NumericalError):
            ad.mul(bad, Tensor([np.inf, 1.0]))

    def test_disabled_by_default(self):
        out = ad.mul(Tensor([np.inf]), Tensor([0.0]))
        assert np.isnan(out.data).any()


class TestPrecisionModes:
    def test_precision_context_switches_dtype(self):
        assert Tensor([1.0]).dtype == np.float32
        with ad.precision("float64"):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_rejects_unknown_dtype(self):
        with pytest.raises(ConfigurationError):
            ad.set_default_dtype("int32")


@pytest.mark.parametrize("seed", range(2))
@pytest.mark.parametrize("mode", ["float32", "float64"])
def test_primitive_gradient_suite(seed, mode):
    """Spot check of the per-op finite-difference suite in both precisions
    (the acceptance module runs all 10 seeds)."""
    with ad.precision(mode):
        failures = [r for r in check_primitives(seed) if not r.passed]
    assert not failures, [f"{r.name}: {r.error:.2e}" for r in failures]
