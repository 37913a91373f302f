import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resona.bie3d import SphereScene, assemble_A
from resona.nep import (
    ConvergenceError,
    decoupled_blocks,
    det_scan,
    find_resonance_cluster,
    find_roots,
    hausdorff,
    log_abs_det,
    log_det,
    muller_root,
    scan_minima,
)
from resona.specfun import neumann_zeros

OMEGA_L1 = float(neumann_zeros(1, 1)[0])


def test_log_det_of_scaled_identity():
    assert log_abs_det(2 * np.eye(2)) == pytest.approx(np.log(4), abs=1e-15)
    phase, _ = log_det(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert phase == pytest.approx(-1)


def test_log_det_against_numpy_on_badly_scaled_matrix():
    rng = np.random.default_rng(0)
    M = rng.standard_normal((6, 6)) + 1j * rng.standard_normal((6, 6))
    sign, logabs = np.linalg.slogdet(M)
    # row scaling shifts log|det| by the log of the factors and keeps the phase
    M[2] *= 1e-200
    M[4] *= 1e150
    phase, mine = log_det(M)
    assert mine == pytest.approx(logabs - 50 * np.log(10), rel=1e-12)
    assert abs(phase - sign) <= 1e-12


def test_det_scan_records_failures_as_nan():
    def build(w):
        if w == 1.0:
            return np.array([[np.nan, 0], [0, 1]])
        return 2 * np.eye(2)

    with pytest.warns(RuntimeWarning, match="factorisation failed"):
        scan = det_scan(build, [0.0, 1.0, 2.0])
    assert scan[0][1] == pytest.approx(np.log(4))
    assert np.isnan(scan[1][1])
    with pytest.raises(ValueError):
        det_scan(build, [])


def test_scan_minima_orders_by_depth():
    grid = np.linspace(0, 7, 701)
    # the dip at 2 pi is lifted, so the one at pi is deepest
    scan = [(w, np.log(abs(np.sin(w)) + 1e-6 + 1e-2 * (w > 4))) for w in grid]
    mins = scan_minima(scan)
    assert len(mins) == 2
    assert abs(mins[0] - np.pi) < 0.01
    assert abs(mins[1] - 2 * np.pi) < 0.01


def test_muller_finds_plus_i():
    res = muller_root(lambda z: z * z + 1, (0.5 + 0.5j, 0.6 + 0.9j, 0.1 + 1.2j))
    assert abs(res.root - 1j) <= 1e-12
    assert res.residual <= 1e-12


def test_muller_on_sine():
    res = muller_root(np.sin, (3.0, 3.1, 3.2))
    assert res.root == pytest.approx(np.pi, abs=1e-12)


def test_deflation_recovers_all_polynomial_roots():
    roots = np.array([1.0, -2.0, 0.5 + 1.5j, 0.5 - 1.5j])
    f = lambda z: np.prod(z - roots)  # noqa: E731
    found = find_roots(f, [0.1 + 0.1j] * 4, 4, lambda z: abs(z) < 10, spread=0.1)
    assert hausdorff([r.root for r in found], roots) <= 1e-10


def test_muller_non_convergence_carries_trace():
    with pytest.raises(ConvergenceError) as info:
        muller_root(lambda z: np.exp(z), (0.0, 0.5, 1.0), max_iter=5)
    assert len(info.value.trace) == 3 + 5
    with pytest.raises(ValueError):
        muller_root(np.sin, (1.0, 1.0, 2.0))


def test_decoupled_blocks_of_axial_dimer():
    scene = SphereScene.dimer(3.5, 1.0, delta=1e-3)
    A = assemble_A(2.0 - 0.1j, scene, 3).entries
    blocks = decoupled_blocks([A])
    # azimuthal orders m and -m separate; 2L - 1 = 5 classes
    assert len(blocks) == 5
    assert sorted(sum((b.tolist() for b in blocks), [])) == list(range(A.shape[0]))


def test_zero_contrast_roots_are_neumann_frequencies():
    res = find_resonance_cluster(OMEGA_L1, 0.0, SphereScene.single(1.0), 3, radius=1e-2)
    assert len(res) == 3
    assert np.allclose(res.values, OMEGA_L1, atol=1e-8)


def test_single_sphere_cluster_is_outgoing_and_scales_with_delta():
    scene = SphereScene.single(1.0)
    shifts = []
    for delta in (1e-3, 5e-4):
        res = find_resonance_cluster(OMEGA_L1, delta, scene, 3)
        assert len(res) == 3
        assert np.all(res.values.imag < 0)
        # rotational symmetry: the three roots coincide
        assert np.ptp(res.values.real) <= 1e-9 and np.ptp(res.values.imag) <= 1e-9
        assert res.multiplicities == [3, 3, 3]
        shifts.append(res.values[0] - OMEGA_L1)
    ratio = shifts[0] / shifts[1]
    assert abs(ratio - 2) <= 0.01


def test_dimer_cluster_has_six_roots():
    res = find_resonance_cluster(OMEGA_L1, 1e-3, SphereScene.dimer(3.5, 1.0), 3)
    assert len(res) == 6
    assert np.all(res.values.imag < 0)
    assert np.all(res.residual_norms <= 1e-8)
    assert not res.notes


def test_non_neumann_center_noted():
    res = find_resonance_cluster(1.5, 1e-3, SphereScene.single(1.0), 2, radius=1e-3)
    assert len(res) == 0
    assert "not a Neumann frequency" in res.notes[0]


def test_hausdorff_trivial_cases():
    assert hausdorff([1 + 1j], [1 + 1j]) == 0.0
    assert hausdorff([0], [3, 4j]) == 4.0
    with pytest.raises(ValueError):
        hausdorff([], [1])


def test_hausdorff_against_brute_force():
    rng = np.random.default_rng(2)
    a = rng.standard_normal(5) + 1j * rng.standard_normal(5)
    b = rng.standard_normal(7) + 1j * rng.standard_normal(7)
    d_ab = max(min(abs(x - y) for y in b) for x in a)
    d_ba = max(min(abs(x - y) for x in a) for y in b)
    assert hausdorff(a, b) == pytest.approx(max(d_ab, d_ba), abs=1e-15)


points = st.lists(st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False), min_size=1, max_size=6)


@settings(max_examples=60, deadline=None)
@given(points, points, points)
def test_hausdorff_metric_properties(a, b, c):
    assert hausdorff(a, b) == pytest.approx(hausdorff(b, a), abs=1e-12)
    assert hausdorff(a, c) <= hausdorff(a, b) + hausdorff(b, c) + 1e-9
    assert hausdorff(a, a) == 0.0


def test_real_axis_scan_dips_near_neumann_frequency():
    scene = SphereScene.single(1.0, delta=1e-3)
    grid = np.linspace(1.9, 2.3, 41)
    scan = det_scan(lambda w: assemble_A(w, scene, 3).entries, grid)
    mins = scan_minima(scan)
    assert abs(mins[0] - OMEGA_L1) <= 0.01
