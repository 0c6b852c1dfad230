"""Structured ops against oracles: convolution, normalization, upsampling,
linear maps, l2 normalization and voxel gathering."""

import numpy as np
import pytest

import voxrep.functional as F
from voxrep import backend
from voxrep.autograd import Tape, Tensor, backward, parameter, tsum, mul
from voxrep.errors import ContractError

from _util import conv3d_oracle, gradcheck


@pytest.fixture(params=sorted(backend.BACKENDS))
def kernel_backend(request):
    previous = backend.use(request.param)
    yield request.param
    backend.use(previous)


class TestConv3d:
    def test_identity_kernel(self, kernel_backend):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((1, 1, 4, 4, 4)).astype(np.float32))
        w = Tensor(np.ones((1, 1, 1, 1, 1), np.float32))
        out = F.conv3d(x, w)
        np.testing.assert_array_equal(out.data, x.data)

    def test_averaging_constant_field(self, kernel_backend):
        x = Tensor(np.full((1, 1, 8, 8, 4), 2.0, np.float32))
        w = Tensor(np.full((1, 1, 3, 3, 3), 1.0 / 27.0, np.float32))
        out = F.conv3d(x, w)
        assert out.data.shape == (1, 1, 6, 6, 2)
        np.testing.assert_allclose(out.data, 2.0, rtol=1e-6)

    def test_strided_shape_and_values(self, kernel_backend):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 3, 8, 8, 4)).astype(np.float32)
        w = rng.standard_normal((16, 3, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(16).astype(np.float32)
        out = F.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=(2, 2, 2), padding=(1, 1, 1))
        assert out.data.shape == (1, 16, 4, 4, 2)
        want = conv3d_oracle(x, w, b, stride=(2, 2, 2), padding=(1, 1, 1))
        np.testing.assert_allclose(out.data, want, rtol=0, atol=1e-5)

    @pytest.mark.parametrize("seed", range(6))
    def test_random_against_nested_loop_oracle(self, kernel_backend, seed):
        rng = np.random.default_rng(200 + seed)
        b, ci, co = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 5)
        kx, ky, kz = rng.integers(1, 4, size=3)
        sx, sy, sz = rng.integers(1, 3, size=3)
        px, py, pz = rng.integers(0, 2, size=3)
        ix = rng.integers(kx, 9)
        iy = rng.integers(ky, 9)
        iz = rng.integers(kz, 9)
        x = rng.standard_normal((b, ci, ix, iy, iz)).astype(np.float32)
        w = rng.standard_normal((co, ci, kx, ky, kz)).astype(np.float32)
        bias = rng.standard_normal(co).astype(np.float32)
        out = F.conv3d(Tensor(x), Tensor(w), Tensor(bias),
                       stride=(sx, sy, sz), padding=(px, py, pz))
        want = conv3d_oracle(x, w, bias, (int(sx), int(sy), int(sz)), (int(px), int(py), int(pz)))
        np.testing.assert_allclose(out.data, want, rtol=0, atol=1e-5)

    def test_channel_mismatch_raises(self):
        x = Tensor(np.zeros((1, 2, 4, 4, 4), np.float32))
        w = Tensor(np.zeros((3, 5, 1, 1, 1), np.float32))
        with pytest.raises(ContractError):
            F.conv3d(x, w)

    def test_kernel_exceeding_padded_input_raises(self):
        x = Tensor(np.zeros((1, 1, 2, 2, 2), np.float32))
        w = Tensor(np.zeros((1, 1, 5, 1, 1), np.float32))
        with pytest.raises(ContractError):
            F.conv3d(x, w)

    @pytest.mark.parametrize("stride,padding", [((1, 1, 1), (1, 1, 1)), ((2, 1, 2), (0, 1, 0))])
    def test_gradcheck(self, kernel_backend, stride, padding):
        rng = np.random.default_rng(5)
        x = parameter(rng.standard_normal((2, 2, 4, 5, 3)), dtype=np.float64)
        w = parameter(rng.standard_normal((3, 2, 3, 3, 2)), dtype=np.float64)
        b = parameter(rng.standard_normal(3), dtype=np.float64)

        def loss():
            y = F.conv3d(x, w, b, stride=stride, padding=padding)
            return tsum(mul(y, y))

        gradcheck(loss, [x, w, b])

    def test_pointwise_fast_path_matches_oracle(self, kernel_backend):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((2, 3, 4, 4, 2)).astype(np.float32)
        w = rng.standard_normal((5, 3, 1, 1, 1)).astype(np.float32)
        b = rng.standard_normal(5).astype(np.float32)
        out = F.conv3d(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, conv3d_oracle(x, w, b), rtol=0, atol=1e-5)

    def test_backends_agree_in_float64(self):
        if len(backend.BACKENDS) < 2:
            pytest.skip("compiled backend unavailable")
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 3, 6, 5, 4))
        w = rng.standard_normal((4, 3, 3, 3, 3))
        outs = {}
        for name in backend.BACKENDS:
            previous = backend.use(name)
            try:
                xt = parameter(x.copy())
                wt = parameter(w.copy())
                with Tape() as tape:
                    y = F.conv3d(xt, wt, padding=(1, 1, 1))
                    loss = tsum(mul(y, y))
                backward(loss, tape)
                outs[name] = (y.data, xt.grad, wt.grad)
            finally:
                backend.use(previous)
        for a, b in zip(outs["compiled"], outs["numpy"]):
            np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-11)


class TestInstanceNorm:
    def test_constant_slice_collapses_to_shift(self):
        x = Tensor(np.full((1, 2, 3, 3, 3), 7.0, np.float32))
        scale = Tensor(np.ones(2, np.float32))
        shift = Tensor(np.zeros(2, np.float32))
        out = F.instance_norm3d(x, scale, shift, eps=1e-5)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-5)

    def test_already_standardized_values(self):
        vals = np.array([-1.0, 1.0] * 4, np.float64).reshape(1, 1, 2, 2, 2)
        out = F.instance_norm3d(Tensor(vals), Tensor(np.ones(1)), Tensor(np.zeros(1)), eps=1e-12)
        np.testing.assert_allclose(out.data, vals, atol=1e-6)

    def test_random_against_direct_statistics(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 4, 4, 4, 4)).astype(np.float32) * 3 + 1
        scale = rng.standard_normal(4).astype(np.float32)
        shift = rng.standard_normal(4).astype(np.float32)
        eps = 1e-6
        out = F.instance_norm3d(Tensor(x), Tensor(scale), Tensor(shift), eps=eps).data
        want = np.empty_like(x)
        for b in range(2):
            for c in range(4):
                sl = x[b, c].astype(np.float64)
                want[b, c] = scale[c] * (sl - sl.mean()) / np.sqrt(sl.var() + eps) + shift[c]
        assert np.abs(out - want).max() <= 1e-6

    def test_division_guard(self):
        x = Tensor(np.ones((1, 1, 1, 1, 1), np.float32))
        one = Tensor(np.ones(1, np.float32))
        zero = Tensor(np.zeros(1, np.float32))
        with pytest.raises(ContractError):
            F.instance_norm3d(x, one, zero, eps=0.0)

    def test_gradcheck(self):
        rng = np.random.default_rng(9)
        x = parameter(rng.standard_normal((2, 3, 3, 2, 2)), dtype=np.float64)
        scale = parameter(rng.standard_normal(3) + 2.0, dtype=np.float64)
        shift = parameter(rng.standard_normal(3), dtype=np.float64)

        def loss():
            y = F.instance_norm3d(x, scale, shift, eps=1e-3)
            return tsum(mul(y, y))

        gradcheck(loss, [x, scale, shift], tol=1e-6)


class TestUpsample:
    def test_identity_factor(self):
        x = Tensor(np.arange(8.0, dtype=np.float32).reshape(1, 1, 2, 2, 2))
        out = F.nearest_upsample3d(x, (1, 1, 1))
        np.testing.assert_array_equal(out.data, x.data)

    def test_single_voxel_block(self):
        x = Tensor(np.full((1, 1, 1, 1, 1), 3.5, np.float32))
        out = F.nearest_upsample3d(x, (2, 2, 2))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2, 2), 3.5))

    def test_upsample_then_subsample_recovers(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((2, 3, 3, 4, 2)).astype(np.float32)
        up = F.nearest_upsample3d(Tensor(x), (2, 2, 2)).data
        np.testing.assert_array_equal(up[:, :, ::2, ::2, ::2], x)
        # floor-division indexing postcondition
        for (ox, oy, oz) in [(1, 5, 3), (5, 0, 1)]:
            np.testing.assert_array_equal(up[..., ox, oy, oz], x[..., ox // 2, oy // 2, oz // 2])

    def test_bad_factor(self):
        with pytest.raises(ContractError):
            F.nearest_upsample3d(Tensor(np.zeros((1, 1, 2, 2, 2), np.float32)), (0, 1, 1))

    def test_gradcheck(self):
        rng = np.random.default_rng(11)
        x = parameter(rng.standard_normal((1, 2, 2, 3, 2)), dtype=np.float64)

        def loss():
            y = F.nearest_upsample3d(x, (2, 1, 3))
            return tsum(mul(y, y))

        gradcheck(loss, [x])


class TestLinear:
    def test_identity(self):
        x = Tensor(np.arange(6.0, dtype=np.float32).reshape(2, 3))
        w = Tensor(np.eye(3, dtype=np.float32))
        b = Tensor(np.zeros(3, np.float32))
        np.testing.assert_array_equal(F.linear(x, w, b).data, x.data)

    def test_hand_sum(self):
        out = F.linear(Tensor(np.array([[2.0, 3.0]], np.float32)),
                       Tensor(np.array([[1.0, 1.0]], np.float32)),
                       Tensor(np.array([1.0], np.float32)))
        np.testing.assert_allclose(out.data, [[6.0]])

    def test_random_against_dot_oracle(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((4, 3, 5)).astype(np.float32)
        w = rng.standard_normal((7, 5)).astype(np.float32)
        b = rng.standard_normal(7).astype(np.float32)
        out = F.linear(Tensor(x), Tensor(w), Tensor(b)).data
        want = np.zeros((4, 3, 7))
        for i in range(4):
            for j in range(3):
                for o in range(7):
                    want[i, j, o] = float(np.dot(x[i, j].astype(np.float64),
                                                 w[o].astype(np.float64))) + b[o]
        np.testing.assert_allclose(out, want, rtol=0, atol=1e-6)

    def test_dim_mismatch(self):
        with pytest.raises(ContractError):
            F.linear(Tensor(np.zeros((2, 3), np.float32)), Tensor(np.zeros((4, 5), np.float32)))

    def test_gradcheck(self):
        rng = np.random.default_rng(13)
        x = parameter(rng.standard_normal((3, 4)), dtype=np.float64)
        w = parameter(rng.standard_normal((2, 4)), dtype=np.float64)
        b = parameter(rng.standard_normal(2), dtype=np.float64)
        gradcheck(lambda: tsum(mul(F.linear(x, w, b), F.linear(x, w, b))), [x, w, b])


class TestL2Normalize:
    def test_three_four_five(self):
        out = F.l2_normalize(Tensor(np.array([3.0, 4.0], np.float32)))
        np.testing.assert_allclose(out.data, [0.6, 0.8], rtol=1e-6)

    def test_unit_vector_unchanged(self):
        v = np.array([0.0, 1.0, 0.0], np.float32)
        np.testing.assert_allclose(F.l2_normalize(Tensor(v)).data, v, atol=1e-7)

    def test_random_norms(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((50, 128)).astype(np.float32)
        norms = np.linalg.norm(F.l2_normalize(Tensor(x)).data, axis=-1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_zero_vector_floor(self):
        out = F.l2_normalize(Tensor(np.zeros((2, 4), np.float32)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_gradcheck(self):
        rng = np.random.default_rng(15)
        x = parameter(rng.standard_normal((5, 6)) + 0.5, dtype=np.float64)
        gradcheck(lambda: tsum(mul(F.l2_normalize(x), F.l2_normalize(x))), [x])


class TestMatmulGather:
    def test_matmul_gradcheck(self):
        rng = np.random.default_rng(16)
        a = parameter(rng.standard_normal((3, 4)), dtype=np.float64)
        b = parameter(rng.standard_normal((4, 2)), dtype=np.float64)
        gradcheck(lambda: tsum(mul(F.matmul(a, b), F.matmul(a, b))), [a, b])

    def test_gather_reads_expected_vectors(self):
        rng = np.random.default_rng(17)
        fm = rng.standard_normal((2, 5, 3, 4, 2)).astype(np.float32)
        batch = np.array([0, 1, 1])
        coords = np.array([[2, 3, 1], [0, 0, 0], [1, 2, 1]])
        out = F.gather_voxels(Tensor(fm), batch, coords).data
        for n in range(3):
            cx, cy, cz = coords[n]
            np.testing.assert_array_equal(out[n], fm[batch[n], :, cx, cy, cz])

    def test_gather_out_of_range(self):
        fm = Tensor(np.zeros((1, 2, 2, 2, 2), np.float32))
        with pytest.raises(ContractError):
            F.gather_voxels(fm, np.array([0]), np.array([[0, 0, 2]]))

    def test_gather_gradcheck_with_duplicates(self):
        rng = np.random.default_rng(18)
        fm = parameter(rng.standard_normal((2, 3, 2, 2, 2)), dtype=np.float64)
        batch = np.array([0, 0, 1, 0])
        coords = np.array([[0, 1, 1], [0, 1, 1], [1, 0, 0], [1, 1, 0]])

        def loss():
            y = F.gather_voxels(fm, batch, coords)
            return tsum(mul(y, y))

        gradcheck(loss, [fm])
