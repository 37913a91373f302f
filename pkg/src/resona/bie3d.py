"""Galerkin boundary-integral operators for collections of spheres.

Green function convention: G^k(x) = -exp(ik|x|) / (4 pi |x|).

Densities on sphere j are expanded in b_a(x) = Y_a((x - c_j)/R_j) / R_j, the
real harmonics scaled to be orthonormal in L2 of the sphere surface, so a
Galerkin matrix is also the matrix of the operator in that basis and the
plain dot product of coefficient vectors is the bilinear surface pairing.
Global unknowns are ordered sphere by sphere, L**2 harmonics per sphere.
"""

from __future__ import annotations

import warnings
from functools import lru_cache
from dataclasses import dataclass, replace

import numpy as np

from .specfun import degree_of_index, real_harmonics_xyz, sph_bessel_all, sphere_quadrature


class QuadratureError(RuntimeError):
    """Raised when refining a cross-block quadrature changes it beyond tolerance."""


class NearBoundaryError(ValueError):
    """Raised when a field point lies too close to a resonator boundary."""


@dataclass(frozen=True)
class SphereScene:
    """Disjoint spherical resonators in a homogeneous background."""

    centers: np.ndarray
    radii: np.ndarray
    interior_speeds: np.ndarray
    contrasts: np.ndarray
    background_speed: float = 1.0

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=float))
        n = c.shape[0]
        r = np.broadcast_to(np.asarray(self.radii, dtype=float), (n,)).copy()
        vi = np.broadcast_to(np.asarray(self.interior_speeds, dtype=float), (n,)).copy()
        dl = np.broadcast_to(np.asarray(self.contrasts, dtype=complex), (n,)).copy()
        if c.shape[1] != 3:
            raise ValueError("centers must be 3-vectors")
        if np.any(r <= 0):
            raise ValueError("radii must be positive")
        if np.any(vi <= 0) or self.background_speed <= 0:
            raise ValueError("wave speeds must be positive")
        for i in range(n):
            for j in range(i + 1, n):
                d = np.linalg.norm(c[i] - c[j])
                if d <= r[i] + r[j]:
                    raise ValueError(f"spheres {i} and {j} overlap (distance {d:g})")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "radii", r)
        object.__setattr__(self, "interior_speeds", vi)
        object.__setattr__(self, "contrasts", dl)
        object.__setattr__(self, "background_speed", float(self.background_speed))

    @property
    def count(self) -> int:
        return self.centers.shape[0]

    def with_delta(self, delta) -> "SphereScene":
        """Copy with every contrast set to ``delta``."""
        return replace(self, contrasts=np.full(self.count, delta, dtype=complex))

    def scaled_contrasts(self, factor) -> "SphereScene":
        return replace(self, contrasts=self.contrasts * factor)

    @classmethod
    def single(cls, radius=1.0, speed=1.0, delta=0.0, background_speed=1.0):
        return cls(np.zeros((1, 3)), [radius], [speed], [delta], background_speed)

    @classmethod
    def dimer(cls, distance, radius=1.0, speed=1.0, delta=0.0, background_speed=1.0, axis=2):
        c = np.zeros((2, 3))
        c[0, axis] = -distance / 2
        c[1, axis] = distance / 2
        return cls(c, [radius, radius], [speed, speed], [delta, delta], background_speed)


@dataclass
class BlockOperatorMatrix:
    """Galerkin matrix of the transmission operator at one frequency.

    Unknowns are (psi, phi); each half has ``N * L**2`` entries.
    """

    omega: complex
    delta_scale: complex
    L: int
    entries: np.ndarray
    interior: str = "self"

    @property
    def half(self) -> int:
        return self.entries.shape[0] // 2

    def block(self, row: int, col: int) -> np.ndarray:
        n = self.half
        return self.entries[row * n : (row + 1) * n, col * n : (col + 1) * n]


@dataclass
class DensityPair:
    psi: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=complex)
        self.phi = np.asarray(self.phi, dtype=complex)
        if self.psi.shape != self.phi.shape:
            raise ValueError("psi and phi must have equal length")

    @classmethod
    def from_vector(cls, x) -> "DensityPair":
        x = np.asarray(x)
        n = x.size // 2
        return cls(x[:n], x[n:])


# ---------------------------------------------------------------------------
# self blocks


def sphere_layer_symbols(k: complex, radius: float, L: int) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues of the single layer and of K* on one sphere, per degree ell < L."""
    R = float(radius)
    if k == 0:
        ells = np.arange(L)
        return -R / (2 * ells + 1.0) + 0j, 1.0 / (2 * (2 * ells + 1.0)) + 0j
    z = k * R
    j, dj = sph_bessel_all("j", L - 1, z)
    h, dh = sph_bessel_all("h1", L - 1, z)
    s = -1j * k * R * R * j * h
    kstar = -0.5j * k * k * R * R * (dj * h + j * dh)
    return s, kstar


def interior_dtn_symbol(k: complex, radius: float, L: int) -> np.ndarray:
    """Interior Dirichlet-to-Neumann symbol k j_ell'(kR) / j_ell(kR) of a ball."""
    j, dj = sph_bessel_all("j", L - 1, k * radius)
    return k * dj / j


def exterior_dtn_symbol(k: complex, radius: float, L: int) -> np.ndarray:
    """Outgoing exterior Dirichlet-to-Neumann symbol k h_ell'(kR) / h_ell(kR)."""
    h, dh = sph_bessel_all("h1", L - 1, k * radius)
    return k * dh / h


def self_symbols_by_quadrature(k: complex, radius: float, L: int, nodes: int = 96):
    """Single layer and K* eigenvalues on a sphere by direct surface quadrature.

    The kernels are zonal on the sphere, so the Funk-Hecke formula reduces the
    double surface integral to one integral over the cosine t of the angle
    between x and y. Substituting t = 1 - 2u^2 absorbs the 1/|x - y|
    singularity; Gauss-Legendre in u then converges spectrally.
    """
    R = float(radius)
    x, w = np.polynomial.legendre.leggauss(nodes)
    u = 0.5 * (x + 1.0)
    w = 0.5 * w
    t = 1.0 - 2.0 * u * u
    legendre = np.empty((L, u.size))
    legendre[0] = 1.0
    if L > 1:
        legendre[1] = t
    for ell in range(2, L):
        legendre[ell] = ((2 * ell - 1) * t * legendre[ell - 1] - (ell - 1) * legendre[ell - 2]) / ell
    phase = np.exp(2j * k * R * u)
    # G(2Ru) * 4u and dG/dn(x) * 4u after cancelling the singular factors
    s_int = -phase / (2 * np.pi * R)
    k_int = -phase * (2j * k * R * u - 1.0) / (4 * np.pi * R * R)
    s = 2 * np.pi * R * R * (legendre * s_int) @ w
    kstar = 2 * np.pi * R * R * (legendre * k_int) @ w
    return s, kstar


# ---------------------------------------------------------------------------
# cross blocks


def cross_quadrature_degree(k: complex, scene: SphereScene, i: int, j: int, L: int, tol: float = 1e-15) -> int:
    """Exactness degree for the (i, j) interaction so that the neglected
    harmonic content of the smooth kernel stays below ``tol``."""
    d = np.linalg.norm(scene.centers[i] - scene.centers[j])
    Ri, Rj = scene.radii[i], scene.radii[j]
    rho = max(Rj / (d - Ri), Ri / (d - Rj))
    extra = int(np.ceil(np.log(tol) / np.log(rho)))
    osc = int(np.ceil(2 * abs(k) * max(Ri, Rj)))
    return int(min(L - 1 + extra + osc, 160))


# node pairs above which geometry is streamed in row chunks instead of cached
_PAIR_CACHE_LIMIT = 2_500_000


def _geometry_rows(x, y, nodes_x, nodes_y):
    diff = x[:, None, :] - y[None, :, :]
    r = np.sqrt(np.einsum("pqc,pqc->pq", diff, diff))
    proj_x = np.einsum("pqc,pc->pq", diff, nodes_x) / r
    proj_y = -np.einsum("pqc,qc->pq", diff, nodes_y) / r
    return r, proj_x, proj_y


@lru_cache(maxsize=16)
def _pair_geometry(ci: tuple, Ri: float, cj: tuple, Rj: float, L: int, degree: int):
    quad = sphere_quadrature(degree)
    nodes = quad.points
    wy = quad.harmonics(L) * quad.weights
    x = np.asarray(ci) + Ri * nodes
    y = np.asarray(cj) + Rj * nodes
    return (wy, *_geometry_rows(x, y, nodes, nodes))


def pair_contract(ci, Ri: float, cj, Rj: float, L: int, degree: int, kernel) -> list[np.ndarray]:
    """Galerkin blocks sum_pq wy[:, p] M[p, q] wy[:, q] for each matrix M in
    ``kernel(r, proj_x, proj_y)`` over the tensor rule on two spheres.

    Small rules reuse cached geometry; large ones are streamed in row chunks
    so memory stays bounded.
    """
    quad = sphere_quadrature(degree)
    n = quad.size
    if n * n <= _PAIR_CACHE_LIMIT:
        wy, r, px, py = _pair_geometry(tuple(map(float, ci)), float(Ri), tuple(map(float, cj)), float(Rj), L, degree)
        return [wy @ M @ wy.T for M in kernel(r, px, py)]
    nodes = quad.points
    wy = quad.harmonics(L) * quad.weights
    x = np.asarray(ci, dtype=float) + Ri * nodes
    y = np.asarray(cj, dtype=float) + Rj * nodes
    rows = max(1, _PAIR_CACHE_LIMIT // n)
    out = None
    for start in range(0, n, rows):
        sl = slice(start, start + rows)
        parts = [wy[:, sl] @ M @ wy.T for M in kernel(*_geometry_rows(x[sl], y, nodes[sl], nodes))]
        out = parts if out is None else [a + b for a, b in zip(out, parts)]
    return out


def _cross_pair(k, ci, Ri, cj, Rj, L, degree):
    def kernel(r, proj_x, proj_y):
        g = -np.exp(1j * k * r) / (4 * np.pi * r)
        dg = g * (1j * k * r - 1.0) / r
        return g, dg * proj_x, dg * proj_y

    s_ij, k_ij, k_ji_t = pair_contract(ci, Ri, cj, Rj, L, degree, kernel)
    return Ri * Rj * s_ij, Ri * Rj * k_ij, Ri * Rj * k_ji_t.T


def assemble_layer_blocks(
    k: complex,
    scene: SphereScene,
    L: int,
    quad_degree: int | None = None,
    quad_tol: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Galerkin matrices of the single layer S^k and of K^{k,*} on all spheres.

    Self blocks are diagonal and analytic; cross blocks use a tensor
    Gauss-Legendre x trapezoid rule whose degree follows the sphere
    separation unless ``quad_degree`` is given. With ``quad_tol`` set, each
    cross block is recomputed at a finer rule and compared.
    """
    if L < 1:
        raise ValueError("truncation L must be at least 1")
    k = complex(k)
    n = L * L
    N = scene.count
    S = np.zeros((N * n, N * n), dtype=complex)
    K = np.zeros((N * n, N * n), dtype=complex)
    ell = degree_of_index(L)
    for i in range(N):
        s, kst = sphere_layer_symbols(k, scene.radii[i], L)
        idx = slice(i * n, (i + 1) * n)
        S[idx, idx] = np.diag(s[ell])
        K[idx, idx] = np.diag(kst[ell])
    for i in range(N):
        for j in range(i + 1, N):
            deg = quad_degree if quad_degree is not None else cross_quadrature_degree(k, scene, i, j, L)
            args = (k, scene.centers[i], scene.radii[i], scene.centers[j], scene.radii[j], L)
            s_ij, k_ij, k_ji = _cross_pair(*args, deg)
            if quad_tol is not None:
                s2, k2, _ = _cross_pair(*args, 2 * deg)
                scale = max(np.abs(s2).max(), np.abs(k2).max(), 1e-300)
                change = max(np.abs(s2 - s_ij).max(), np.abs(k2 - k_ij).max()) / scale
                if change > quad_tol:
                    raise QuadratureError(
                        f"cross block ({i},{j}) changed by {change:.3e} on refinement (degree {deg})"
                    )
            bi = slice(i * n, (i + 1) * n)
            bj = slice(j * n, (j + 1) * n)
            S[bi, bj] = s_ij
            S[bj, bi] = s_ij.T
            K[bi, bj] = k_ij
            K[bj, bi] = k_ji
    return S, K


def _interior_blocks(omega: complex, scene: SphereScene, L: int, interior: str, quad_degree):
    n = L * L
    N = scene.count
    ell = degree_of_index(L)
    if interior == "self":
        St = np.zeros((N * n, N * n), dtype=complex)
        Kt = np.zeros_like(St)
        for j in range(N):
            s, kst = sphere_layer_symbols(omega / scene.interior_speeds[j], scene.radii[j], L)
            idx = slice(j * n, (j + 1) * n)
            St[idx, idx] = np.diag(s[ell])
            Kt[idx, idx] = np.diag(kst[ell])
        return St, Kt
    if interior == "full":
        St = np.empty((N * n, N * n), dtype=complex)
        Kt = np.empty_like(St)
        cache: dict[float, tuple[np.ndarray, np.ndarray]] = {}
        for j in range(N):
            vj = float(scene.interior_speeds[j])
            if vj not in cache:
                cache[vj] = assemble_layer_blocks(omega / vj, scene, L, quad_degree)
            rows = slice(j * n, (j + 1) * n)
            St[rows] = cache[vj][0][rows]
            Kt[rows] = cache[vj][1][rows]
        return St, Kt
    raise ValueError("interior must be 'self' or 'full'")


def assemble_A(
    omega: complex,
    scene: SphereScene,
    L: int,
    interior: str = "self",
    quad_degree: int | None = None,
) -> BlockOperatorMatrix:
    """Block matrix [[S~, -S], [-1/2 + K~*, -delta (1/2 + K*)]] at frequency omega.

    ``interior="self"`` represents the field inside D_j by the single layer of
    D_j alone at k_j = omega / v_j, which makes the interior blocks diagonal and
    exact. ``interior="full"`` uses the single layer over all of the boundary
    at k_j, row by row.
    """
    omega = complex(omega)
    k = omega / scene.background_speed
    S, K = assemble_layer_blocks(k, scene, L, quad_degree)
    St, Kt = _interior_blocks(omega, scene, L, interior, quad_degree)
    n = L * L
    half = scene.count * n
    eye = np.eye(half)
    row_delta = np.repeat(scene.contrasts, n)
    A = np.empty((2 * half, 2 * half), dtype=complex)
    A[:half, :half] = St
    A[:half, half:] = -S
    A[half:, :half] = -0.5 * eye + Kt
    A[half:, half:] = -row_delta[:, None] * (0.5 * eye + K)
    scale = scene.contrasts[np.argmax(np.abs(scene.contrasts))] if scene.count else 0.0
    return BlockOperatorMatrix(omega, complex(scale), L, A, interior)


# ---------------------------------------------------------------------------
# fields


def _sphere_potential(k: complex, center, radius, coeffs, L, points) -> np.ndarray:
    """Single layer of sphere (center, radius) with coefficients in the b basis."""
    d = points - center
    r = np.linalg.norm(d, axis=-1)
    Y = real_harmonics_xyz(L, d)
    R = radius
    inside = r < R
    r_small = np.where(inside, r, R)
    r_big = np.where(inside, R, r)
    ell = degree_of_index(L)
    j, _ = sph_bessel_all("j", L - 1, k * r_small)
    h, _ = sph_bessel_all("h1", L - 1, k * r_big)
    radial = -1j * k * R * j[ell] * h[ell]
    return np.einsum("a,ap->p", coeffs, radial * Y)


def _check_points(scene: SphereScene, points: np.ndarray) -> np.ndarray:
    """Index of the containing sphere per point, -1 outside every sphere."""
    owner = np.full(points.shape[0], -1)
    for j in range(scene.count):
        r = np.linalg.norm(points - scene.centers[j], axis=-1)
        gap = np.abs(r - scene.radii[j])
        if np.any(gap <= 1e-6 * scene.radii[j]):
            bad = int(np.argmin(gap))
            raise NearBoundaryError(
                f"point {points[bad]} lies {gap[bad]:.3e} from the boundary of sphere {j}"
            )
        owner[r < scene.radii[j]] = j
    return owner


def evaluate_field(
    densities: DensityPair,
    omega: complex,
    scene: SphereScene,
    points,
    interior: str = "self",
) -> np.ndarray:
    """u = S^k[phi] outside the spheres and S~^omega[psi] inside.

    Potentials are summed from the exact separated expansion of each
    sphere's single layer, so accuracy does not degrade near the boundary;
    points within 1e-6 R of a boundary are still rejected.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n_basis = densities.phi.size // scene.count
    L = int(round(np.sqrt(n_basis)))
    owner = _check_points(scene, pts)
    out = np.zeros(pts.shape[0], dtype=complex)
    k = complex(omega) / scene.background_speed
    outside = owner < 0
    n = L * L
    if np.any(outside):
        for j in range(scene.count):
            out[outside] += _sphere_potential(
                k, scene.centers[j], scene.radii[j], densities.phi[j * n : (j + 1) * n], L, pts[outside]
            )
    for j in range(scene.count):
        sel = owner == j
        if not np.any(sel):
            continue
        kj = complex(omega) / scene.interior_speeds[j]
        sources = [j] if interior == "self" else range(scene.count)
        for i in sources:
            out[sel] += _sphere_potential(
                kj, scene.centers[i], scene.radii[i], densities.psi[i * n : (i + 1) * n], L, pts[sel]
            )
    return out


def single_layer_condition(S: np.ndarray, limit: float = 1e12) -> float:
    """Condition number of a single-layer matrix, warning above ``limit``."""
    cond = float(np.linalg.cond(S))
    if cond > limit:
        warnings.warn(f"single layer nearly singular (condition {cond:.3e})", RuntimeWarning, stacklevel=2)
    return cond


def resonant_channels(scene: SphereScene, omega0: float, L: int, rtol: float = 1e-8) -> list[tuple[int, int, int, float]]:
    """Resonators and degrees whose interior Neumann frequency equals omega0.

    Returns (sphere, ell, n, beta) for each match with ell < L.
    """
    from .specfun import neumann_zeros

    out = []
    for j in range(scene.count):
        beta = float(np.real(omega0)) * scene.radii[j] / scene.interior_speeds[j]
        for ell in range(L):
            zeros = neumann_zeros(ell, max(1, int(beta / np.pi) + 2))
            hit = np.nonzero(np.abs(zeros - beta) <= rtol * beta)[0]
            if hit.size:
                out.append((j, ell, int(hit[0]) + 1, float(zeros[hit[0]])))
    return out
