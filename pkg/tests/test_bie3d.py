import mpmath
import numpy as np
import pytest

from resona.bie3d import (
    DensityPair,
    NearBoundaryError,
    QuadratureError,
    SphereScene,
    assemble_A,
    assemble_layer_blocks,
    cross_quadrature_degree,
    evaluate_field,
    exterior_dtn_symbol,
    resonant_channels,
    self_symbols_by_quadrature,
    sphere_layer_symbols,
)
from resona.specfun import degree_of_index, harmonic_index, neumann_zeros, real_harmonics_xyz


def funk_hecke_single_layer(k, R, ell):
    """2 pi R^2 int_{-1}^{1} G(R sqrt(2 - 2t)) P_ell(t) dt by tanh-sinh quadrature."""

    def integrand(t):
        r = R * mpmath.sqrt(2 - 2 * t)
        return -mpmath.exp(1j * k * r) / (4 * mpmath.pi * r) * mpmath.legendre(ell, t)

    with mpmath.workdps(25):
        return complex(2 * mpmath.pi * R * R * mpmath.quad(integrand, [-1, 1]))


def test_self_block_diagonal_with_degeneracy():
    scene = SphereScene.single(1.0)
    S, K = assemble_layer_blocks(1.0, scene, 5)
    assert np.count_nonzero(S - np.diag(np.diag(S))) == 0
    d = np.diag(S)
    ell = degree_of_index(5)
    for l in range(5):
        block = d[ell == l]
        assert block.size == 2 * l + 1
        assert np.allclose(block, block[0], rtol=0, atol=0)


@pytest.mark.parametrize("ell", [0, 1, 2, 3])
def test_self_symbol_against_surface_integral(ell):
    s, _ = sphere_layer_symbols(1.0, 1.0, 4)
    assert abs(s[ell] - funk_hecke_single_layer(1.0, 1.0, ell)) <= 1e-10 * abs(s[ell])


def test_static_limit():
    R = 1.3
    s, kst = sphere_layer_symbols(1e-10, R, 6)
    ells = np.arange(6)
    assert np.allclose(s, -R / (2 * ells + 1), rtol=1e-8)
    assert np.allclose(kst, 1 / (2 * (2 * ells + 1)), rtol=1e-8, atol=1e-12)
    # Laplace kernel by direct integration
    with mpmath.workdps(20):
        lap = 2 * mpmath.pi * R * R * mpmath.quad(
            lambda t: -mpmath.legendre(2, t) / (4 * mpmath.pi * R * mpmath.sqrt(2 - 2 * t)), [-1, 1]
        )
    assert float(lap) == pytest.approx(-R / 5, rel=1e-12)


@pytest.mark.parametrize("kR", [0.5, 3.0, 10.0])
def test_analytic_self_blocks_match_quadrature(kR):
    s, kst = sphere_layer_symbols(kR, 1.0, 6)
    sq, kq = self_symbols_by_quadrature(kR, 1.0, 6, nodes=160)
    assert np.max(np.abs(s - sq) / np.abs(s)) <= 1e-8
    assert np.max(np.abs(kst - kq) / np.maximum(np.abs(kst), 1e-3)) <= 1e-8


def test_cross_block_bound_and_decay():
    R, k, L = 1.0, 1.0, 3
    norms = []
    for dist in (10.0, 20.0):
        S, _ = assemble_layer_blocks(k, SphereScene.dimer(dist, R), L)
        n = L * L
        cross = S[:n, n:]
        # |<b_a, S b_b>| <= max|G| ||b_a||_1 ||b_b||_1 with ||b||_1 <= sqrt(4 pi) R
        gmax = 1 / (4 * np.pi * (dist - 2 * R))
        assert np.abs(cross).max() <= gmax * 4 * np.pi * R * R
        norms.append(np.linalg.norm(cross))
    assert norms[0] / norms[1] == pytest.approx(2.0, rel=0.05)


def test_single_layer_bilinear_symmetry():
    scene = SphereScene(np.array([[0, 0, 0], [2.6, 0.3, 0], [0.4, 2.9, 1.0]]), [1.0, 0.8, 1.1], 1.0, 0.0)
    for k in (0.7, 2.3 + 0.4j):
        S, _ = assemble_layer_blocks(k, scene, 4)
        assert np.linalg.norm(S - S.T) / np.linalg.norm(S) <= 1e-10


def test_cross_quadrature_refinement():
    scene = SphereScene.dimer(3.0, 1.0)  # separation 1.5 x radius sum
    k, L = 2.0816, 5
    deg = cross_quadrature_degree(k, scene, 0, 1, L)
    S1, K1 = assemble_layer_blocks(k, scene, L, quad_degree=deg)
    S2, K2 = assemble_layer_blocks(k, scene, L, quad_degree=2 * deg)
    assert np.abs(S1 - S2).max() <= 1e-8 * np.abs(S2).max()
    assert np.abs(K1 - K2).max() <= 1e-8 * np.abs(K2).max()
    assemble_layer_blocks(k, scene, L, quad_tol=1e-8)


def test_quadrature_error_flagged():
    scene = SphereScene.dimer(2.2, 1.0)
    with pytest.raises(QuadratureError):
        assemble_layer_blocks(2.0, scene, 4, quad_degree=4, quad_tol=1e-8)


def test_limiting_operator_has_zero_lower_right_block():
    scene = SphereScene.dimer(3.5, 1.0, delta=0.0)
    A = assemble_A(2.0, scene, 3)
    assert np.all(A.block(1, 1) == 0)
    assert A.entries.shape == (2 * 2 * 9, 2 * 2 * 9)


def test_contrast_enters_lower_right_block_only():
    scene = SphereScene.dimer(3.5, 1.0)
    A0 = assemble_A(2.0 - 0.1j, scene.with_delta(0.0), 3).entries
    A1 = assemble_A(2.0 - 0.1j, scene.with_delta(1e-2), 3).entries
    A2 = assemble_A(2.0 - 0.1j, scene.with_delta(2e-2), 3).entries
    h = A0.shape[0] // 2
    diff = A1 - A0
    assert np.all(diff[:h] == 0) and np.all(diff[:, :h] == 0)
    assert np.allclose(A2 - A0, 2 * diff, rtol=1e-14, atol=1e-16)


def test_matched_media_has_no_real_resonance():
    scene = SphereScene.single(1.0, speed=1.0, delta=1.0)
    ratios = []
    for w in np.linspace(0.2, 3.5, 34):
        s = np.linalg.svd(assemble_A(w, scene, 4).entries, compute_uv=False)
        ratios.append(s[-1] / s[0])
    assert min(ratios) > 1e-3


def test_zero_density_zero_field():
    scene = SphereScene.single(1.0)
    dens = DensityPair(np.zeros(9), np.zeros(9))
    pts = np.array([[0.2, 0.1, 0.0], [2.0, 1.0, 0.5]])
    assert np.all(evaluate_field(dens, 1.3, scene, pts) == 0)


def test_far_field_of_monopole_density():
    R, k = 1.0, 0.1
    scene = SphereScene.single(R)
    phi = np.zeros(1, dtype=complex)
    phi[0] = 1.0
    dens = DensityPair(np.zeros(1), phi)
    x = np.array([[0.0, 30.0, 40.0]])
    charge = np.sqrt(4 * np.pi) * R  # integral of b_00 over the sphere
    dist = 50.0
    expected = charge * (-np.exp(1j * k * dist) / (4 * np.pi * dist))
    assert abs(evaluate_field(dens, k, scene, x)[0] - expected) <= 0.01 * abs(expected)


def one_sided_derivative(f, R, direction, sign, h=1e-3):
    """Derivative at R along +direction from a cubic fit on one side."""
    t = sign * h * np.arange(1, 5)
    vals = f((R + t)[:, None] * direction[None, :])
    coef = np.polyfit(t, vals, 3)
    return coef[-2]


def test_jump_of_normal_derivative():
    R, k, L = 1.0, 1.7, 4
    scene = SphereScene.single(R, speed=1.0)  # interior single layer uses the same k
    rng = np.random.default_rng(5)
    phi = rng.standard_normal(L * L) + 1j * rng.standard_normal(L * L)
    dens = DensityPair(phi, phi)
    direction = np.array([0.3, -0.5, 0.81])
    direction /= np.linalg.norm(direction)
    f = lambda p: evaluate_field(dens, k, scene, p)  # noqa: E731
    d_out = one_sided_derivative(f, R, direction, +1)
    d_in = one_sided_derivative(f, R, direction, -1)
    Y = real_harmonics_xyz(L, direction[None, :])[:, 0]
    density_value = phi @ Y / R
    assert abs((d_out - d_in) - density_value) <= 1e-6 * abs(density_value)
    # the potential itself is continuous
    assert abs(f([(R + 1e-5) * direction])[0] - f([(R - 1e-5) * direction])[0]) <= 1e-3


def test_near_boundary_rejected():
    scene = SphereScene.single(1.0)
    dens = DensityPair(np.ones(4), np.ones(4))
    with pytest.raises(NearBoundaryError, match="from the boundary"):
        evaluate_field(dens, 1.0, scene, [[0.0, 0.0, 1.0 + 1e-8]])


def test_overlapping_spheres_rejected():
    with pytest.raises(ValueError, match="overlap"):
        SphereScene.dimer(1.5, 1.0)


def test_resonant_channels_of_dimer():
    scene = SphereScene.dimer(3.5, 1.0)
    ch = resonant_channels(scene, float(neumann_zeros(1, 1)[0]), 4)
    assert [(c[0], c[1]) for c in ch] == [(0, 1), (1, 1)]


def test_exterior_symbol_sign():
    sym = exterior_dtn_symbol(2.0, 1.0, 3)
    assert np.all(sym.imag > 0)
    assert harmonic_index(2, -2) == 4
