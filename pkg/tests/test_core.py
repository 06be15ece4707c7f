import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from privrelease.core import (
    Dataset,
    RandomStream,
    ScalingMatrix,
    induced_inf_to_2_norm,
    matrix_power,
    read_csv,
    write_csv,
)


def spd_matrices(max_p=6):
    def build(args):
        p, vals = args
        a = np.array(vals[: p * p]).reshape(p, p)
        return a @ a.T + 0.5 * np.eye(p)

    return st.integers(1, max_p).flatmap(
        lambda p: st.tuples(st.just(p), st.lists(st.floats(-3, 3), min_size=p * p, max_size=p * p))
    ).map(build)


class TestMatrixPower:
    def test_identity_sqrt(self):
        np.testing.assert_array_equal(matrix_power(ScalingMatrix.identity(2), 0.5), np.eye(2))

    def test_diag_inverse_sqrt(self):
        out = matrix_power(ScalingMatrix.diagonal([4.0, 1.0]), -0.5)
        np.testing.assert_allclose(out, np.diag([0.5, 1.0]), rtol=1e-14)
        # cross-check: squaring and inverting recovers the input
        np.testing.assert_allclose(np.linalg.inv(out @ out), np.diag([4.0, 1.0]), rtol=1e-13)

    def test_scalar_fourth_root(self):
        np.testing.assert_allclose(matrix_power(ScalingMatrix([[16.0]]), 0.25), [[2.0]], rtol=1e-14)

    def test_rejects_indefinite_with_eigenvalue(self):
        with pytest.raises(ValueError, match="eigenvalue"):
            ScalingMatrix(np.diag([1.0, -2.0]))

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError, match="symmetric"):
            ScalingMatrix([[1.0, 0.1], [0.0, 1.0]])

    @settings(max_examples=60, deadline=None)
    @given(spd_matrices())
    def test_sqrt_squares_back(self, m):
        s = ScalingMatrix(m)
        r = s.sqrt()
        assert np.linalg.norm(r @ r - m) <= 1e-10 * np.linalg.norm(m)
        np.testing.assert_allclose(r, r.T, atol=0)

    @settings(max_examples=40, deadline=None)
    @given(spd_matrices(), st.sampled_from([-1.0, -0.5, 0.25, 0.5]))
    def test_power_commutes_and_has_powered_spectrum(self, m, e):
        s = ScalingMatrix(m)
        r = s.power(e)
        scale = np.linalg.norm(m) * np.linalg.norm(r)
        assert np.linalg.norm(r @ m - m @ r) <= 1e-10 * scale
        np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(r)), np.sort(s.eigenvalues**e), rtol=1e-9)


class TestInducedNorm:
    def test_identity(self):
        assert induced_inf_to_2_norm(np.eye(2)) == pytest.approx(np.sqrt(2), rel=1e-15)

    def test_scalar(self):
        assert induced_inf_to_2_norm([[3.0]]) == 3.0

    def test_diag(self):
        assert induced_inf_to_2_norm(np.diag([1.0, 2.0])) == pytest.approx(np.sqrt(5), rel=1e-15)

    def test_matches_frozen_brute_force(self, oracle):
        for case in oracle["inf2_norm"]:
            assert induced_inf_to_2_norm(np.array(case["matrix"])) == pytest.approx(case["value"], rel=1e-13)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8).flatmap(lambda p: arrays(float, (3, p), elements=st.floats(-5, 5))))
    def test_matches_enumeration(self, m):
        brute = max(np.linalg.norm(m @ np.array(s)) for s in itertools.product((-1.0, 1.0), repeat=m.shape[1]))
        assert induced_inf_to_2_norm(m) == pytest.approx(brute, rel=1e-12, abs=1e-12)

    def test_large_p_requires_flag(self):
        m = np.eye(26)
        with pytest.raises(ValueError, match="upper_bound"):
            induced_inf_to_2_norm(m)
        assert induced_inf_to_2_norm(m, upper_bound=True) == pytest.approx(np.sqrt(26))


class TestRandomStream:
    def test_identical_keys_identical_bytes(self):
        a = RandomStream(5, 9).uniform_open(1000)
        b = RandomStream(5, 9).uniform_open(1000)
        assert a.tobytes() == b.tobytes()

    def test_different_streams_differ(self):
        assert not np.array_equal(RandomStream(5, 9).uniform_open(10), RandomStream(5, 10).uniform_open(10))

    def test_fork_is_pure(self):
        s = RandomStream(1, 2)
        assert s.fork(3, 4) == s.fork(3, 4)
        assert s.fork(3, 4) != s.fork(4, 3)

    def test_open_interval(self):
        u = RandomStream(0).uniform_open(10**5)
        assert u.min() > 0 and u.max() < 1

    def test_range_checked(self):
        with pytest.raises(ValueError):
            RandomStream(-1)
        with pytest.raises(ValueError):
            RandomStream(0, 2**64)


class TestDataset:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            Dataset([[np.nan]], [1.0])

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            Dataset([[1.0], [2.0]], [1.0])

    def test_binary_check(self):
        assert Dataset([[1.0], [2.0]], [-1, 1]).is_binary
        with pytest.raises(ValueError, match="-1/\\+1"):
            Dataset([[1.0], [2.0]], [0, 1]).require_binary()

    def test_read_only(self):
        d = Dataset([[1.0]], [1.0])
        with pytest.raises(ValueError):
            d.features[0, 0] = 3.0


class TestCsv:
    def test_label_encoding_and_roundtrip(self, tmp_path):
        src = tmp_path / "in.csv"
        src.write_text("a,cls,b\n1.5,M,2\n-1,B,0.25\n3,M,1\n")
        t = read_csv(src, "cls")
        assert t.dataset.p == 2
        np.testing.assert_array_equal(t.dataset.labels, [1.0, -1.0, 1.0])
        assert t.label_map == {"B": -1.0, "M": 1.0}
        out = tmp_path / "out.csv"
        write_csv(out, t, t.dataset.features)
        assert out.read_text() == "a,cls,b\n1.5,M,2.0\n-1.0,B,0.25\n3.0,M,1.0\n"

    def test_zero_one_labels(self, tmp_path):
        src = tmp_path / "in.csv"
        src.write_text("x,y\n1,0\n2,1\n")
        np.testing.assert_array_equal(read_csv(src, 1).dataset.labels, [-1.0, 1.0])

    def test_standardize_keeps_scales(self, tmp_path):
        src = tmp_path / "in.csv"
        src.write_text("x,y\n1,1\n3,-1\n5,1\n")
        t = read_csv(src, "y", standardize=True)
        np.testing.assert_allclose(t.dataset.features[:, 0] * t.scales + t.means, [1, 3, 5])

    def test_bad_row(self, tmp_path):
        src = tmp_path / "in.csv"
        src.write_text("x,y\n1,1\nfoo,-1\n")
        with pytest.raises(ValueError, match=":3:"):
            read_csv(src, "y")
