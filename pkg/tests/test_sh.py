import numpy as np
import pytest
from scipy.special import expit

from octrf.errors import ConfigError, InputError
from octrf.octree import LeafPayload
from octrf.sh import (
    SH_C0,
    decode_color,
    eval_sh_basis,
    eval_sh_basis_many,
    sh_from_rgb,
)


def random_unit_dirs(n, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(0.0, 1.0, (n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class TestBasis:
    def test_constant_band(self):
        for d in random_unit_dirs(32, 11):
            vals = eval_sh_basis(3, d)
            assert vals[0] == SH_C0

    def test_degree1_at_plus_z(self):
        vals = eval_sh_basis(1, (0.0, 0.0, 1.0))
        np.testing.assert_allclose(vals[1:], [0.0, 0.4886025119, 0.0], atol=1e-9)

    def test_degree1_closed_form(self):
        for d in random_unit_dirs(16, 3):
            vals = eval_sh_basis(1, d)
            np.testing.assert_allclose(
                vals[1:],
                [-0.4886025119029199 * d[1],
                 0.4886025119029199 * d[2],
                 -0.4886025119029199 * d[0]],
                rtol=1e-12,
            )

    def test_monte_carlo_orthonormality(self):
        # Gram matrix of the 16 basis functions over the sphere, estimated
        # with 1e5 uniform directions: must match the identity within 0.02.
        dirs = random_unit_dirs(100_000, 2718)
        basis = eval_sh_basis_many(3, dirs)
        gram = 4.0 * np.pi * (basis.T @ basis) / len(dirs)
        np.testing.assert_allclose(gram, np.eye(16), atol=0.02)

    def test_shapes(self):
        assert eval_sh_basis(0, (1.0, 0.0, 0.0)).shape == (1,)
        assert eval_sh_basis(2, (1.0, 0.0, 0.0)).shape == (9,)
        assert eval_sh_basis_many(3, random_unit_dirs(7, 0)).shape == (7, 16)

    def test_non_unit_direction_rejected(self):
        with pytest.raises(InputError):
            eval_sh_basis(1, (0.5, 0.0, 0.0))

    def test_bad_degree_rejected(self):
        with pytest.raises(ConfigError):
            eval_sh_basis(4, (0.0, 0.0, 1.0))


class TestDecodeColor:
    def test_zero_sh_is_mid_gray(self):
        rgb = decode_color(np.zeros(12), (0.0, 0.0, 1.0))
        np.testing.assert_allclose(rgb, [0.5, 0.5, 0.5])

    def test_single_band_inversion(self):
        t = 1.3
        sh = np.zeros(3)
        sh[:] = 0.0
        payload = LeafPayload(1.0, np.array([t / SH_C0, -t / SH_C0, 0.0],
                                            dtype=np.float32))
        rgb = decode_color(payload, (0.0, 1.0, 0.0))
        np.testing.assert_allclose(
            rgb, [expit(t), expit(-t), 0.5], rtol=1e-6)

    def test_compositional_oracle(self):
        rng = np.random.default_rng(55)
        for basis_count, degree in ((1, 0), (4, 1), (9, 2), (16, 3)):
            sh = rng.normal(0.0, 1.0, 3 * basis_count)
            d = random_unit_dirs(1, int(basis_count))[0]
            got = decode_color(sh, d)
            basis = eval_sh_basis(degree, d)
            want = expit(sh.reshape(3, basis_count) @ basis)
            np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_open_interval_for_moderate_inputs(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            sh = rng.normal(0.0, 3.0, 12)
            rgb = decode_color(sh, random_unit_dirs(1, 1)[0])
            assert np.all(rgb > 0.0) and np.all(rgb < 1.0)

    def test_degree0_direction_invariant(self):
        sh = np.array([2.0, -1.0, 0.5])
        a = decode_color(sh, (0.0, 0.0, 1.0))
        b = decode_color(sh, random_unit_dirs(1, 4)[0])
        np.testing.assert_array_equal(a, b)

    def test_odd_band_view_dependence(self):
        sh = np.zeros(12)
        sh[1] = 1.5  # red channel, band (-0.4886 * y)
        d = np.array([0.0, 1.0, 0.0])
        a = decode_color(sh, d)
        b = decode_color(sh, -d)
        assert abs(a[0] - b[0]) > 1e-3
        np.testing.assert_array_equal(a[1:], b[1:])


class TestShFromRgb:
    def test_roundtrip(self):
        rgb = np.array([0.25, 0.5, 0.9])
        sh = sh_from_rgb(rgb, 4)
        assert sh.shape == (12,)
        got = decode_color(sh, (0.0, 0.0, 1.0))
        np.testing.assert_allclose(got, rgb, rtol=1e-10)

    def test_saturated_inputs_stay_finite(self):
        sh = sh_from_rgb([0.0, 1.0, 0.5], 1)
        assert np.isfinite(sh).all()
