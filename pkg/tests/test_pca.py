import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caecodec.errors import ContainerError, ShapeError
from caecodec.pca import (
    compute_covariance,
    dequantize_U,
    eigendecompose,
    fit_rotation,
    inverse_rotate,
    pack_rotation,
    quantize_U,
    rotate,
    side_info_bits,
    u_step,
    unpack_rotation,
)

SQRT_HALF = np.sqrt(0.5)


class TestCovariance:
    def test_zero_samples(self):
        np.testing.assert_array_equal(compute_covariance(np.zeros((5, 3))), np.zeros((3, 3)))

    def test_single_sample(self):
        np.testing.assert_array_equal(compute_covariance([[1.0, 2.0]]), [[1, 2], [2, 4]])

    def test_two_samples(self):
        np.testing.assert_array_equal(compute_covariance([[1.0, 0.0], [0.0, 1.0]]), [[0.5, 0], [0, 0.5]])

    def test_no_mean_removal(self):
        np.testing.assert_array_equal(compute_covariance(np.full((4, 2), 3.0)), np.full((2, 2), 9.0))

    def test_empty(self):
        with pytest.raises(ShapeError):
            compute_covariance(np.zeros((0, 4)))


class TestEigendecompose:
    def test_diagonal(self):
        rot = eigendecompose(np.diag([4.0, 1.0]))
        np.testing.assert_array_equal(rot.U, np.eye(2))
        np.testing.assert_array_equal(rot.eigenvalues, [4.0, 1.0])

    def test_diagonal_reordered(self):
        rot = eigendecompose(np.diag([1.0, 4.0]))
        np.testing.assert_array_equal(rot.U, [[0, 1], [1, 0]])
        np.testing.assert_array_equal(rot.eigenvalues, [4.0, 1.0])

    def test_two_by_two(self):
        cov = np.array([[2.0, 1.0], [1.0, 2.0]])
        rot = eigendecompose(cov)
        np.testing.assert_allclose(rot.eigenvalues, [3.0, 1.0], atol=1e-14)
        np.testing.assert_allclose(rot.U, [[SQRT_HALF, SQRT_HALF], [SQRT_HALF, -SQRT_HALF]], atol=1e-14)
        np.testing.assert_allclose(rot.U @ np.diag(rot.eigenvalues) @ rot.U.T, cov, atol=1e-14)

    def test_identity_tie_break(self):
        rot = eigendecompose(np.eye(2))
        np.testing.assert_array_equal(rot.U, np.eye(2))
        np.testing.assert_array_equal(rot.eigenvalues, [1.0, 1.0])

    def test_degenerate_subspace_is_canonical(self):
        # rotate diag(5, 2, 2) by an orthogonal Q; the 2-D eigenspace basis must
        # come out the same regardless of how Jacobi happened to converge
        rng = np.random.default_rng(0)
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        cov = q @ np.diag([5.0, 2.0, 2.0]) @ q.T
        rot = eigendecompose(cov)
        np.testing.assert_allclose(rot.eigenvalues, [5, 2, 2], atol=1e-12)
        sub = rot.U[:, 1:]
        proj = sub @ sub.T
        e0 = proj[:, 0] / np.linalg.norm(proj[:, 0])
        np.testing.assert_allclose(np.abs(sub[:, 0]), np.abs(e0), atol=1e-10)

    def test_asymmetric(self):
        with pytest.raises(ShapeError):
            eigendecompose(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_zero_matrix(self):
        rot = eigendecompose(np.zeros((3, 3)))
        np.testing.assert_array_equal(rot.U, np.eye(3))

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_lapack_eigenvalues(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(40, 12))
        cov = compute_covariance(a)
        rot = eigendecompose(cov)
        np.testing.assert_allclose(rot.eigenvalues, np.linalg.eigvalsh(cov)[::-1], rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(rot.U.T @ rot.U, np.eye(12), atol=1e-8)

    def test_signs_deterministic(self):
        rng = np.random.default_rng(4)
        cov = compute_covariance(rng.normal(size=(50, 6)))
        rot = eigendecompose(cov)
        for k in range(6):
            col = rot.U[:, k]
            assert col[np.argmax(np.abs(col))] > 0
        again = eigendecompose(cov.copy())
        assert rot.U.tobytes() == again.U.tobytes()


class TestRotation:
    def test_identity(self):
        y = np.random.default_rng(0).normal(size=(7, 3))
        np.testing.assert_array_equal(rotate(y, np.eye(3)), y)
        np.testing.assert_array_equal(inverse_rotate(y, np.eye(3)), y)

    def test_known_vector(self):
        U = eigendecompose(np.array([[2.0, 1.0], [1.0, 2.0]])).U
        np.testing.assert_allclose(rotate(np.array([[1.0, 1.0]]), U), [[np.sqrt(2), 0.0]], atol=1e-14)
        np.testing.assert_allclose(inverse_rotate(np.array([[np.sqrt(2), 0.0]]), U), [[1.0, 1.0]], atol=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            rotate(np.zeros((2, 3)), np.eye(2))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 16), st.integers(1, 40), st.integers(0, 2**31))
    def test_roundtrip_and_energy(self, n, m, seed):
        rng = np.random.default_rng(seed)
        y = rng.normal(size=(m, n))
        rot = eigendecompose(compute_covariance(y))
        yr = rotate(y, rot.U)
        np.testing.assert_allclose(inverse_rotate(yr, rot.U), y, atol=1e-10)
        assert np.sum(yr**2) == pytest.approx(np.sum(y**2), rel=1e-9)
        energy = np.mean(yr**2, axis=0)
        np.testing.assert_allclose(energy, rot.eigenvalues, atol=1e-8 * max(1.0, rot.eigenvalues[0]))


class TestQuantizeU:
    def test_identity_exact(self):
        codes, _ = quantize_U(np.eye(4))
        np.testing.assert_array_equal(dequantize_U(codes), np.eye(4))

    def test_half(self):
        codes, step = quantize_U(np.array([[0.5]]))
        assert abs(dequantize_U(codes)[0, 0] - 0.5) <= step / 2

    def test_error_bound(self):
        U = np.random.default_rng(0).uniform(-1, 1, size=(64, 64))
        codes, step = quantize_U(U)
        assert codes.min() >= 0 and codes.max() <= 2**16 - 2
        assert np.max(np.abs(dequantize_U(codes) - U)) <= step / 2
        assert step == u_step(16)

    def test_side_info_cost(self):
        assert side_info_bits(32) == 32 * 32 * 16 + 16 == 16384 + 16
        codes, _ = quantize_U(np.eye(32))
        assert len(pack_rotation(codes)) * 8 == side_info_bits(32)

    def test_pack_roundtrip(self):
        _, codes, _ = fit_rotation(np.random.default_rng(1).normal(size=(30, 5)))
        blob = b"xx" + pack_rotation(codes)
        out, bits, end = unpack_rotation(blob, 2)
        assert bits == 16 and end == len(blob)
        np.testing.assert_array_equal(out, codes)

    def test_truncated_block(self):
        codes, _ = quantize_U(np.eye(3))
        with pytest.raises(ContainerError):
            unpack_rotation(pack_rotation(codes)[:-1])

    def test_quantized_roundtrip_close_to_identity(self):
        y = np.random.default_rng(2).normal(size=(256, 32))
        _, _, U_hat = fit_rotation(y)
        back = inverse_rotate(rotate(y, U_hat), U_hat)
        assert np.max(np.linalg.norm(back - y, axis=1) / np.linalg.norm(y, axis=1)) < 1e-3
