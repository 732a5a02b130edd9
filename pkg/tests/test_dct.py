import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dctmamba3d import tensor as T
from dctmamba3d.dct import (FreqCube, alpha, basis_as_filter_bank, dct3_direct, dct3_forward,
                            dct3_inverse, make_basis, zigzag_order)

RNG = np.random.default_rng(7)
B333 = make_basis(3, 3, 3)


def test_alpha_factors_for_three_samples():
    assert alpha(0, 3) == pytest.approx(0.57735, abs=1e-5)
    assert alpha(1, 3) == pytest.approx(0.81650, abs=1e-5)
    assert alpha(2, 3) == pytest.approx(0.81650, abs=1e-5)


def test_basis_has_27_orthonormal_kernels():
    # the 3x3x3 transform has 27 basis functions
    assert B333.count == 27
    assert B333.kernels.shape == (27, 3, 3, 3)
    np.testing.assert_allclose(B333.gram(), np.eye(27), atol=1e-6)


def test_dc_kernel_is_constant():
    np.testing.assert_allclose(B333.kernel(0, 0, 0), np.full((3, 3, 3), 1 / np.sqrt(27)), atol=1e-12)
    assert B333.kernel(0, 0, 0)[0, 0, 0] == pytest.approx(0.19245, abs=1e-5)


def test_zigzag_order():
    order = zigzag_order((3, 3, 3))
    assert order[0] == (0, 0, 0)
    assert order[1:4] == [(0, 0, 1), (0, 1, 0), (1, 0, 0)]
    assert order[-1] == (2, 2, 2)
    assert [sum(t) for t in order] == sorted(sum(t) for t in order)


def test_kernels_match_cosine_products():
    for idx, (i, j, k) in enumerate(B333.ordering):
        for x, y, z in np.ndindex(3, 3, 3):
            v = (alpha(i, 3) * alpha(j, 3) * alpha(k, 3) * np.cos(np.pi * (2 * x + 1) * i / 6)
                 * np.cos(np.pi * (2 * y + 1) * j / 6) * np.cos(np.pi * (2 * z + 1) * k / 6))
            assert B333.kernels[idx, x, y, z] == pytest.approx(v, abs=1e-12)


def test_basis_rejects_empty_extent():
    with pytest.raises(ValueError):
        make_basis(0, 3, 3)


def test_constant_block_has_only_dc_energy():
    c = dct3_forward(np.ones((3, 3, 3)), B333).coefficients
    assert c[0, 0, 0] == pytest.approx(np.sqrt(27), abs=1e-6)
    c[0, 0, 0] = 0
    assert np.max(np.abs(c)) < 1e-6


def test_two_sample_case():
    b = make_basis(2, 1, 1)
    c = dct3_forward(np.array([1.0, 0.0]).reshape(2, 1, 1), b).coefficients.ravel()
    np.testing.assert_allclose(c, [0.70711, 0.70711], atol=1e-5)
    np.testing.assert_allclose(c, dct3_direct(np.array([1.0, 0.0]).reshape(2, 1, 1)).ravel(), atol=1e-12)


def test_forward_rejects_wrong_extents():
    with pytest.raises(ValueError):
        dct3_forward(np.ones((3, 3, 4)), B333)


def test_inverse_examples():
    np.testing.assert_array_equal(dct3_inverse(FreqCube(np.zeros((3, 3, 3)), (3, 3, 3)), B333), 0)
    c = np.zeros((3, 3, 3))
    c[0, 0, 0] = 2.5
    np.testing.assert_allclose(dct3_inverse(FreqCube(c, (3, 3, 3)), B333), 2.5 / np.sqrt(27), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2 ** 32 - 1))
def test_separable_matches_direct_and_round_trips(nd, nh, nw, seed):
    x = np.random.default_rng(seed).normal(size=(nd, nh, nw))
    b = make_basis(nd, nh, nw)
    c = dct3_forward(x, b)
    np.testing.assert_allclose(c.coefficients, dct3_direct(x), atol=1e-6)
    np.testing.assert_allclose(dct3_inverse(c, b), x, atol=1e-6)
    # Parseval
    assert np.sum(c.coefficients ** 2) == pytest.approx(np.sum(x ** 2), rel=1e-5)


def test_filter_bank_layout():
    bank = basis_as_filter_bank(B333)
    assert bank.shape == (27, 1, 3, 3, 3)
    assert not bank.requires_grad
    np.testing.assert_allclose(bank.data[0, 0], 0.19245, atol=1e-5)


def test_filter_bank_on_constant_cube_excites_only_dc():
    bank = basis_as_filter_bank(B333, np.float64)
    x = T.Tensor(np.full((1, 1, 5, 5, 5), 3.0), dtype=np.float64)
    out = T.conv3d(x, bank).data[0]
    assert np.all(np.abs(out[0]) > 1.0)
    assert np.max(np.abs(out[1:])) < 1e-12
