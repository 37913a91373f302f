"""Frequency-dependent capacitance matrix of a resonator collection at a
Neumann frequency, its leading-order predictions and diagnostics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .bie3d import (
    DensityPair,
    SphereScene,
    assemble_layer_blocks,
    evaluate_field,
    resonant_channels,
    sphere_layer_symbols,
)
from .specfun import (
    ball_mode_normalisation,
    degree_of_index,
    harmonic_index,
    neumann_ball_spectrum,
    sph_bessel_all,
)


class PreconditionError(ValueError):
    """Inputs violate a mathematical precondition of the requested computation."""


@dataclass
class NeumannModeSet:
    """L2(D_j)-normalised Neumann modes resonant at omega0 and their traces."""

    omega0: float
    L: int
    labels: list[tuple[int, int, int]]  # (sphere, ell, m)
    betas: np.ndarray
    normalisation: np.ndarray
    traces: np.ndarray  # columns: coefficient vectors in the boundary basis

    @property
    def count(self) -> int:
        return len(self.labels)

    @property
    def owners(self) -> np.ndarray:
        return np.array([lab[0] for lab in self.labels], dtype=int)

    def trace_norms(self) -> np.ndarray:
        return np.linalg.norm(self.traces, axis=0)


def _nearest_neumann(scene: SphereScene, omega0: float) -> float:
    best = None
    for j in range(scene.count):
        spec = neumann_ball_spectrum(scene.radii[j] / scene.interior_speeds[j], 8, 4)
        for f in spec:
            if best is None or abs(f.omega - omega0) < abs(best - omega0):
                best = f.omega
    return float(best)


def neumann_modes(scene: SphereScene, omega0: float, L: int = 6) -> NeumannModeSet:
    """Neumann eigenmodes of the resonators at omega0 with analytic traces."""
    channels = resonant_channels(scene, omega0, L)
    if not channels:
        raise PreconditionError(
            f"no resonator has a Neumann frequency at omega0={omega0}; "
            f"nearest is {_nearest_neumann(scene, omega0):.12g} (or raise L)"
        )
    n = L * L
    labels, betas, norms, cols = [], [], [], []
    for j, ell, _, beta in channels:
        R = scene.radii[j]
        c = ball_mode_normalisation(ell, beta, R)
        jl = sph_bessel_all("j", ell, beta)[0][ell].real
        for m in range(-ell, ell + 1):
            col = np.zeros(scene.count * n)
            col[j * n + harmonic_index(ell, m)] = c * jl * R
            labels.append((j, ell, m))
            betas.append(beta)
            norms.append(c)
            cols.append(col)
    return NeumannModeSet(float(omega0), L, labels, np.array(betas), np.array(norms), np.array(cols).T)


def exterior_dtn_matrix(k0: complex, scene: SphereScene, L: int, blocks=None, cond_limit: float = 1e10,
                        contour_radius: float = 1e-2, contour_points: int = 12) -> np.ndarray:
    """Galerkin matrix of the outgoing exterior Dirichlet-to-Neumann map.

    Computed as (1/2 + K*) S^{-1}. When S is nearly singular (k0 at an
    interior Dirichlet eigenvalue of a resonator, where the exterior map is
    still analytic) the value is taken as the mean over a small circle in the
    complex k plane around k0, which is exact for the removable singularity
    up to a geometrically small error.
    """
    S, K = blocks if blocks is not None else assemble_layer_blocks(k0, scene, L)
    eye = np.eye(S.shape[0])
    cond = float(np.linalg.cond(S))
    if cond <= cond_limit:
        return (0.5 * eye + K) @ np.linalg.inv(S)
    warnings.warn(
        f"single layer nearly singular at k={k0} (condition {cond:.3e}); "
        "evaluating the exterior map by a contour mean",
        RuntimeWarning,
        stacklevel=2,
    )
    total = np.zeros_like(S)
    for t in range(contour_points):
        kt = k0 + contour_radius * np.exp(2j * np.pi * (t + 0.5) / contour_points)
        St, Kt = assemble_layer_blocks(kt, scene, L)
        total += (0.5 * eye + Kt) @ np.linalg.inv(St)
    return total / contour_points


def exterior_normal_derivative(g, k0: complex, scene: SphereScene, L: int, blocks=None):
    """Outgoing exterior flux (1/2 + K*) S^{-1} g for boundary data ``g``
    (one or several coefficient columns)."""
    return exterior_dtn_matrix(k0, scene, L, blocks) @ np.asarray(g, dtype=complex)


@dataclass
class CapacitanceMatrix:
    omega0: float
    C: np.ndarray
    scrC: np.ndarray
    Dhat: np.ndarray
    modes: NeumannModeSet
    L: int

    @property
    def symmetry_defect(self) -> float:
        nrm = np.linalg.norm(self.scrC)
        return float(np.linalg.norm(self.scrC - self.scrC.T) / nrm) if nrm else 0.0

    def to_dict(self) -> dict:
        pair = lambda M: [[[float(z.real), float(z.imag)] for z in row] for row in M]  # noqa: E731
        ev = np.linalg.eigvals(self.C) if self.C.size else np.array([])
        return {
            "omega0": self.omega0,
            "C": pair(self.C),
            "scrC": pair(self.scrC),
            "Dhat": [[float(z.real), float(z.imag)] for z in np.diag(self.Dhat)],
            "eigenvalues": [[float(z.real), float(z.imag)] for z in ev],
            "symmetry_defect": self.symmetry_defect,
            "modes": [list(map(int, lab)) for lab in self.modes.labels],
        }


def capacitance_matrix(omega0: float, scene: SphereScene, L: int = 6, blocks=None) -> CapacitanceMatrix:
    """C = (1/2 omega0) Dhat scrC with scrC = -<Lambda_ext g_b, g_a> (bilinear)."""
    modes = neumann_modes(scene, omega0, L)
    k0 = omega0 / scene.background_speed
    flux = exterior_normal_derivative(modes.traces, k0, scene, L, blocks)
    scrC = -modes.traces.T @ flux
    own = modes.owners
    weights = scene.contrasts[own] * scene.interior_speeds[own] ** 2
    Dhat = np.diag(weights.astype(complex))
    C = (Dhat @ scrC) / (2 * omega0)
    return CapacitanceMatrix(float(omega0), C, scrC, Dhat, modes, L)


@dataclass
class LeadingOrderPrediction:
    omega0: float
    eigenvalues: np.ndarray
    frequencies: np.ndarray
    eigenvectors: np.ndarray
    jordan_sizes: np.ndarray

    @property
    def imag_signs(self) -> np.ndarray:
        return np.sign(self.eigenvalues.imag)


def _numerical_rank(M: np.ndarray, tol: float) -> int:
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s > tol))


def jordan_sizes(C: np.ndarray, eigenvalues: np.ndarray, rel_tol: float = 1e-8) -> np.ndarray:
    """Largest Jordan block per eigenvalue from ranks of (C - lambda I)^p."""
    m = C.shape[0]
    nrm = np.linalg.norm(C, 2) if m else 0.0
    if nrm == 0:
        return np.ones(m, dtype=int)
    group_tol = 1e-6 * nrm
    out = np.ones(m, dtype=int)
    for i, lam in enumerate(eigenvalues):
        alg = int(np.sum(np.abs(eigenvalues - lam) <= group_tol))
        shifted = C - lam * np.eye(m)
        power = np.eye(m, dtype=complex)
        q = 1
        for p in range(1, alg + 1):
            power = power @ shifted
            if _numerical_rank(power, rel_tol * max(nrm, 1.0) ** p) <= m - alg:
                q = p
                break
            q = p + 1
        out[i] = min(q, alg)
    return out


def leading_resonances(cap: CapacitanceMatrix) -> LeadingOrderPrediction:
    """Eigen-decomposition of C with predictions omega0 + lambda."""
    C = cap.C
    lam, vec = np.linalg.eig(C) if C.size else (np.array([]), np.zeros((0, 0)))
    nrm = np.linalg.norm(C, 2) if C.size else 0.0
    # orthonormalise eigenvectors inside numerically degenerate groups
    done = np.zeros(lam.size, dtype=bool)
    for i in range(lam.size):
        if done[i]:
            continue
        grp = np.nonzero(np.abs(lam - lam[i]) <= 1e-8 * max(nrm, 1e-300))[0]
        done[grp] = True
        if grp.size > 1:
            q, _ = np.linalg.qr(vec[:, grp])
            vec[:, grp] = q
    for i in range(lam.size):
        vec[:, i] /= np.linalg.norm(vec[:, i])
    q = jordan_sizes(C, lam)
    return LeadingOrderPrediction(cap.omega0, lam, cap.omega0 + lam, vec, q)


def eigenmode_leading(
    prediction: LeadingOrderPrediction | None,
    modes: NeumannModeSet,
    omega0: float,
    scene: SphereScene,
    L: int,
    points,
    index: int = 0,
    coefficients=None,
) -> np.ndarray:
    """Leading-order resonant field sum_a a_{j,l} (S^{k0}[phi_{j,l}] / S~[psi_{j,l}]).

    The coefficient vector is the ``index``-th eigenvector of the prediction
    unless ``coefficients`` is given.
    """
    a = np.asarray(coefficients if coefficients is not None else prediction.eigenvectors[:, index], dtype=complex)
    nrm = np.linalg.norm(a)
    if nrm == 0:
        raise PreconditionError("mode coefficients must be nonzero")
    a = a / nrm
    g = modes.traces @ a
    k0 = omega0 / scene.background_speed
    S, _ = assemble_layer_blocks(k0, scene, L)
    phi = np.linalg.solve(S, g)
    n = L * L
    ell = degree_of_index(L)
    psi = np.zeros_like(phi)
    for j in range(scene.count):
        s, _ = sphere_layer_symbols(omega0 / scene.interior_speeds[j], scene.radii[j], L)
        blk = slice(j * n, (j + 1) * n)
        psi[blk] = np.divide(g[blk], s[ell], out=np.zeros(n, dtype=complex), where=g[blk] != 0)
    return evaluate_field(DensityPair(psi, phi), omega0, scene, points)


@dataclass
class ResidueCheck:
    omega0: float
    extracted: np.ndarray
    expected: np.ndarray
    resonant: np.ndarray
    error: float


def _ntd(omega, vb, R, ell_max):
    k = omega / vb
    j, dj = sph_bessel_all("j", ell_max, k * R)
    return j / (k * dj)


def interior_ntd_residue_check(omega0: float, scene: SphereScene, step: float = 1e-5, ell_max: int | None = None) -> ResidueCheck:
    """Residue of the interior Neumann-to-Dirichlet map per harmonic channel
    against -Pi, Pi[h] = (v_b^2 / 2 omega0) sum <h, g> g.

    The limit (omega - omega0) NtD(omega) is extracted from symmetric
    samples at omega0 +- h and h/2 followed by one Richardson step.
    """
    if scene.count != 1:
        raise PreconditionError("residue check needs a single resonator")
    channels = resonant_channels(scene, omega0, 40)
    if not channels:
        raise PreconditionError(f"omega0={omega0} is not a Neumann frequency; nearest {_nearest_neumann(scene, omega0):.12g}")
    vb, R = scene.interior_speeds[0], scene.radii[0]
    if ell_max is None:
        ell_max = max(c[1] for c in channels) + 2

    def sym(h):
        return 0.5 * (h * _ntd(omega0 + h, vb, R, ell_max) - h * _ntd(omega0 - h, vb, R, ell_max))

    extracted = (4 * sym(step / 2) - sym(step)) / 3
    expected = np.zeros(ell_max + 1, dtype=complex)
    resonant = np.zeros(ell_max + 1, dtype=bool)
    for _, ell, _, beta in channels:
        if ell <= ell_max:
            g2 = (ball_mode_normalisation(ell, beta, R) * sph_bessel_all("j", ell, beta)[0][ell].real * R) ** 2
            expected[ell] = -(vb**2 / (2 * omega0)) * g2
            resonant[ell] = True
    scale = np.abs(expected[resonant]).max()
    err = np.where(resonant, np.abs(extracted - expected) / np.where(resonant, np.abs(expected), 1.0), np.abs(extracted) / scale)
    return ResidueCheck(float(omega0), extracted, expected, resonant, float(err.max()))


# ---------------------------------------------------------------------------
# diagnostics


def loglog_slope(x, y) -> float:
    """Least-squares slope of log y against log x."""
    x = np.log(np.asarray(x, dtype=float))
    y = np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class DiagnosticsReport:
    frequencies: np.ndarray
    symmetry_defects: np.ndarray
    scrC_norms: np.ndarray
    norm_exponent: float
    trace_norms: dict = field(default_factory=dict)
    trace_exponents: dict = field(default_factory=dict)
    indicators: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "frequencies": self.frequencies.tolist(),
            "symmetry_defects": self.symmetry_defects.tolist(),
            "scrC_norms": self.scrC_norms.tolist(),
            "norm_exponent": self.norm_exponent,
            "trace_exponents": {str(k): v for k, v in self.trace_exponents.items()},
            "uniform_regime_indicator": None if self.indicators is None else self.indicators.tolist(),
        }


def uniform_regime_indicator(delta: float, k0: float) -> float:
    """delta (1 + k0); small values mean the cluster asymptotics are uniform."""
    return float(abs(delta) * (1.0 + abs(k0)))


def diagnostics(
    scene: SphereScene,
    frequencies,
    delta: float | None = None,
    L: int | None = None,
    orders=(0.0, 0.5, 1.0),
) -> DiagnosticsReport:
    """Symmetry defects, norm growth of scrC and trace-norm growth over a set
    of Neumann frequencies."""
    freqs = np.asarray(sorted(frequencies), dtype=float)
    if freqs.size < 4:
        raise PreconditionError("at least 4 frequencies are needed for the growth fits")
    defects, norms = [], []
    tn = {s: [] for s in orders}
    v_star = min(scene.background_speed, scene.interior_speeds.min())
    for w in freqs:
        Lw = L
        if Lw is None:
            ells = [c[1] for c in resonant_channels(scene, w, 60)]
            Lw = max(ells) + 2 if ells else 6
        cap = capacitance_matrix(w, scene, Lw)
        defects.append(cap.symmetry_defect)
        norms.append(np.linalg.norm(cap.scrC, 2))
        base = cap.modes.trace_norms()
        ell = np.array([lab[1] for lab in cap.modes.labels])
        own = cap.modes.owners
        for s in orders:
            hs = base * (1.0 + ell * (ell + 1) / scene.radii[own] ** 2) ** (s / 2)
            tn[s].append(hs.max())
    growth = 1.0 + freqs / v_star
    report = DiagnosticsReport(
        freqs,
        np.array(defects),
        np.array(norms),
        loglog_slope(growth, norms),
        {s: np.array(v) for s, v in tn.items()},
        {s: loglog_slope(1.0 + freqs / scene.interior_speeds.min(), v) for s, v in tn.items()},
    )
    if delta is not None:
        report.indicators = np.array([uniform_regime_indicator(delta, w / scene.background_speed) for w in freqs])
    return report
