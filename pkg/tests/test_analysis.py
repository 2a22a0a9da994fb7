import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gftnav.analysis import (analyze_transforms, read_ppm, reference_mean, smooth, svd_decompose, to_gray,
                             transform_fingerprint, write_gray_ppm, write_ppm)


def check_svd(M, res, tol=1e-10):
    n = M.shape[-1]
    I = np.eye(n)
    err = np.linalg.norm(res.reconstruct() - M, axis=(-2, -1))
    assert np.all(err <= tol * np.maximum(np.linalg.norm(M, axis=(-2, -1)), 1e-300))
    assert np.max(np.abs(np.swapaxes(res.U, -1, -2) @ res.U - I)) <= tol
    assert np.max(np.abs(np.swapaxes(res.V, -1, -2) @ res.V - I)) <= tol
    s = res.singular_values
    assert np.all(s >= 0)
    assert np.all(np.diff(s, axis=-1) <= 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2 ** 31 - 1))
def test_svd_random(n, seed):
    M = np.random.default_rng(seed).normal(size=(n, n))
    res = svd_decompose(M)
    check_svd(M, res)
    np.testing.assert_allclose(res.singular_values, np.linalg.svd(M, compute_uv=False), rtol=1e-12, atol=1e-13)


def test_svd_diagonal_case():
    M = np.diag([1.0, 3.0, 2.0])
    res = svd_decompose(M)
    np.testing.assert_allclose(res.singular_values, [3, 2, 1], atol=1e-15)
    check_svd(M, res)


def test_svd_rank_deficient_keeps_orthogonal_bases():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(6, 2)), rng.normal(size=(2, 6))
    M = a @ b
    res = svd_decompose(M)
    check_svd(M, res)
    assert np.all(res.singular_values[2:] < 1e-12)


def test_svd_zero_and_orthogonal_matrices():
    check_svd(np.zeros((4, 4)), svd_decompose(np.zeros((4, 4))))
    Q, _ = np.linalg.qr(np.random.default_rng(1).normal(size=(5, 5)))
    res = svd_decompose(Q)
    np.testing.assert_allclose(res.singular_values, 1.0, atol=1e-13)


def test_svd_sign_convention():
    res = svd_decompose(np.random.default_rng(2).normal(size=(5, 5)))
    idx = np.argmax(np.abs(res.U), axis=0)
    assert np.all(res.U[idx, np.arange(5)] >= 0)


def test_svd_batch_matches_single():
    M = np.random.default_rng(3).normal(size=(20, 6, 6))
    batch = svd_decompose(M)
    for k in (0, 17):
        one = svd_decompose(M[k])
        np.testing.assert_allclose(batch.singular_values[k], one.singular_values, atol=1e-13)


def test_svd_rejects_bad_input():
    with pytest.raises(ValueError):
        svd_decompose(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        svd_decompose(np.array([[np.nan]]))


# ---------------------------------------------------------------- fingerprints

def test_smooth_box_filter_interior():
    M = np.zeros((15, 15))
    M[7, 7] = 49.0
    S = smooth(M)
    assert S[7, 7] == pytest.approx(1.0)
    assert S[4, 4] == pytest.approx(1.0) and S[3, 3] == 0.0
    assert S.sum() == pytest.approx(49.0)


def test_smooth_constant_is_fixed_point():
    np.testing.assert_allclose(smooth(np.full((5, 9), 2.5)), 2.5)


def test_single_reference_fingerprint_is_zero():
    T1 = [np.random.default_rng(0).normal(size=(4, 5))]
    mean = reference_mean([T1])
    assert np.all(transform_fingerprint(T1, mean)[0] == 0.0)


def test_mean_of_fingerprints_vanishes():
    rng = np.random.default_rng(1)
    stacks = [[rng.normal(size=(6, 7)), rng.normal(size=(6, 7))] for _ in range(50)]
    mean = reference_mean(stacks)
    fps = [transform_fingerprint(s, mean) for s in stacks]
    for j in range(2):
        assert np.max(np.abs(np.mean([f[j] for f in fps], axis=0))) <= 1e-10


def test_fingerprint_shape_mismatch():
    with pytest.raises(ValueError):
        transform_fingerprint([np.zeros((2, 3))], [np.zeros((2, 3)), np.zeros((2, 3))])
    with pytest.raises(ValueError):
        transform_fingerprint([np.zeros((2, 3))], [np.zeros((3, 3))])
    with pytest.raises(ValueError):
        reference_mean([])


def test_gray_mapping():
    g = to_gray(np.array([[-2.0, 0.0, 2.0]]))
    assert g.tolist() == [[0, 128, 255]]
    assert np.all(to_gray(np.zeros((2, 2))) == 128)


def test_ppm_round_trip(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", rgb)
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), rgb)
    write_gray_ppm(tmp_path / "g.ppm", np.eye(3))
    assert read_ppm(tmp_path / "g.ppm").shape == (3, 3, 3)


def test_analyze_transforms_writes_files(tmp_path):
    def transforms_of(tokens):
        v = float(sum(tokens))
        return [np.full((3, 4), v), np.full((3, 4), -v)]

    res = analyze_transforms(transforms_of, [([1, 2], [2, 1])], [[0], [6]], tmp_path)
    fa, fb = res[0]
    # the two commands have the same bag of words, hence identical fingerprints
    np.testing.assert_array_equal(fa[0], fb[0])
    np.testing.assert_allclose(fa[0], 0.0)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert len(names) == 8 and "pair0_a_T1.csv" in names
    np.testing.assert_allclose(np.loadtxt(tmp_path / "pair0_a_T2.csv", delimiter=","), fa[1])
