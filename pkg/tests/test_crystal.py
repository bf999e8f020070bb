import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crystal_ldm.crystal import (CrystalStructure, LatticeError, cell_volume, matrix_to_params,
                                 min_image_displacement, niggli_reduce, niggli_reduce_matrix,
                                 normalize_lattice_lengths, pairwise_min_image, params_to_matrix,
                                 random_translate, wrap_fractional)

from oracles import brute_min_image, random_lattice, random_structure

CUBIC5 = np.array([5, 5, 5, np.pi / 2, np.pi / 2, np.pi / 2])


def test_cubic_matrix():
    assert np.allclose(params_to_matrix(CUBIC5), 5 * np.eye(3), atol=1e-12)


def test_matrix_params_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(200):
        lat = random_lattice(rng)
        assert np.allclose(matrix_to_params(params_to_matrix(lat)), lat, atol=1e-9)


def test_orthorhombic_volume():
    assert cell_volume([3, 4, 5, np.pi / 2, np.pi / 2, np.pi / 2]) == pytest.approx(60.0)


@pytest.mark.parametrize("lat", [
    [0, 5, 5, 1.5, 1.5, 1.5],
    [5, 5, 5, 0.5, 1.5, 1.5],
    [5, 5, 5, np.pi / 3, np.pi / 3, 2 * np.pi / 3 + 0.01],
])
def test_bad_lattices_rejected(lat):
    with pytest.raises(LatticeError):
        CrystalStructure([6], [[0, 0, 0]], lat)


def test_wrap_examples():
    assert wrap_fractional(0.5) == 0.5
    assert wrap_fractional(1.25) == 0.25
    assert wrap_fractional(-0.25) == 0.75
    assert wrap_fractional(1.0) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e3, 1e3, allow_nan=False))
def test_wrap_half_open(x):
    w = wrap_fractional(x)
    assert 0.0 <= w < 1.0


def test_translate_identity_and_simple_case():
    s = CrystalStructure([6], [[0.9, 0.0, 0.0]], CUBIC5)
    assert random_translate(s, np.zeros(3)).same_as(s)
    assert random_translate(s, [0.2, 0, 0]).frac[0, 0] == pytest.approx(0.1)


def test_translate_preserves_min_image_distances():
    rng = np.random.default_rng(1)
    for _ in range(50):
        s = random_structure(rng)
        t = random_translate(s, rng.random(3))
        assert np.allclose(pairwise_min_image(s.frac, s.lattice)[1],
                           pairwise_min_image(t.frac, t.lattice)[1], atol=1e-9)


def test_min_image_seam():
    lat = [10, 10, 10, np.pi / 2, np.pi / 2, np.pi / 2]
    v = min_image_displacement([0.05, 0, 0], [0.95, 0, 0], lat)
    assert np.linalg.norm(v) == pytest.approx(1.0)
    assert np.allclose(min_image_displacement([0.3] * 3, [0.3] * 3, lat), 0.0)


def test_min_image_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(200):
        lat = random_lattice(rng)
        fi, fj = rng.random(3), rng.random(3)
        assert np.linalg.norm(min_image_displacement(fi, fj, lat)) == pytest.approx(
            brute_min_image(fi, fj, lat), abs=1e-9)


def test_niggli_keeps_reduced_cubic():
    assert np.allclose(niggli_reduce(CUBIC5), CUBIC5)


def test_niggli_example_basis():
    m = np.array([[2.0, 0, 0], [4, 1, 0], [0, 0, 3]])
    red, t = niggli_reduce_matrix(m)
    lat = matrix_to_params(red)
    assert np.allclose(lat[:3], [1, 2, 3])
    assert np.allclose(lat[3:], np.pi / 2)
    assert abs(np.linalg.det(red)) == pytest.approx(6.0)
    assert round(np.linalg.det(t)) == 1


def test_niggli_idempotent():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        once = niggli_reduce(random_lattice(rng))
        assert np.allclose(niggli_reduce(once), once, atol=1e-9)


def test_normalized_lengths():
    assert np.allclose(normalize_lattice_lengths([2, 2, 2, 1.5, 1.5, 1.5], 8), 0.0)
    assert normalize_lattice_lengths([np.e, 1, 1, 1.5, 1.5, 1.5], 1)[0] == pytest.approx(1.0)
    assert normalize_lattice_lengths([6, 6, 6, 1.5, 1.5, 1.5], 27)[0] == pytest.approx(np.log(2))


def test_structure_invariants():
    with pytest.raises(ValueError):
        CrystalStructure([], np.zeros((0, 3)), CUBIC5)
    with pytest.raises(ValueError):
        CrystalStructure([6], [[1.0, 0, 0]], CUBIC5)
    with pytest.raises(ValueError):
        CrystalStructure([6, 6], [[0.1, 0, 0]], CUBIC5)
