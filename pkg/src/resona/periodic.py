"""Quasiperiodic layer potentials for lattices of spherical resonators,
Bloch capacitance matrices, band structure and Dirac-cone analysis.

The alpha-quasiperiodic Green function is

    G^alpha(x) = sum_m exp(i alpha.m) G(x - m),   G(x) = -exp(ik|x|) / (4 pi |x|),

summed over the lattice. It is evaluated by Ewald splitting: a spectral sum
over p = q + alpha (q in the dual lattice) damped by exp((k^2 - |p|^2)/(4 eta^2)),
plus a real-space sum of the complementary erfc-damped kernel. Galerkin
matrices use the same boundary basis as :mod:`resona.bie3d`; because
exp(i p.x) has an explicit harmonic expansion on a sphere, the spectral part
of every block is a sum of rank-one terms and is Hermitian by construction.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq
from scipy.special import erfcx

from .bie3d import (
    NearBoundaryError,
    SphereScene,
    _sphere_potential,
    pair_contract,
    interior_dtn_symbol,
    resonant_channels,
    self_symbols_by_quadrature,
    sphere_layer_symbols,
)
from .capmat import PreconditionError, neumann_modes
from .nep import ConvergenceError, ResonanceSet
from .specfun import (
    ball_mode_normalisation,
    degree_of_index,
    harmonic_index,
    neumann_zeros,
    real_harmonics_xyz,
    sph_bessel_all,
    sphere_quadrature,
)


class ThresholdError(ValueError):
    """The wavenumber sits on (or too near) a diffraction threshold |q + alpha|."""


# ---------------------------------------------------------------------------
# lattices


@dataclass(frozen=True)
class Lattice3D:
    """Bravais lattice spanned by the rows of ``generators``."""

    generators: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.generators, dtype=float)
        if g.shape != (3, 3):
            raise ValueError("a 3D lattice needs three generators of length 3")
        det = np.linalg.det(g)
        if abs(det) < 1e-12 * np.prod(np.linalg.norm(g, axis=1)):
            raise ValueError("lattice generators are linearly dependent")
        object.__setattr__(self, "generators", g)

    @property
    def dual(self) -> np.ndarray:
        """Rows alpha_i with alpha_i . l_j = 2 pi delta_ij."""
        return 2 * np.pi * np.linalg.inv(self.generators).T

    @property
    def volume(self) -> float:
        return float(abs(np.linalg.det(self.generators)))

    @classmethod
    def cubic(cls, a: float = 1.0) -> "Lattice3D":
        return cls(a * np.eye(3))

    @classmethod
    def hexagonal_prism(cls, a: float = 1.0, height: float = 1.0) -> "Lattice3D":
        """Hexagonal in the xy-plane with period ``height`` along z."""
        return cls(np.array([[a, 0, 0], [a / 2, a * np.sqrt(3) / 2, 0], [0, 0, height]]))

    def points(self, integers) -> np.ndarray:
        return np.asarray(integers, dtype=float) @ self.generators

    def _integer_box(self, basis: np.ndarray, radius: float) -> np.ndarray:
        # |n_i| <= radius |b*_i| where b*_i is the dual row of basis
        inv = np.linalg.inv(basis).T
        reach = np.ceil(radius * np.linalg.norm(inv, axis=1)).astype(int)
        axes = [np.arange(-r, r + 1) for r in reach]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)

    def vectors_within(self, radius: float, center=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
        """Lattice vectors m with |m - center| <= radius and their integer labels."""
        n = self._integer_box(self.generators, radius + np.linalg.norm(center))
        m = n @ self.generators
        keep = np.linalg.norm(m - np.asarray(center), axis=1) <= radius
        return m[keep], n[keep]

    def dual_vectors_within(self, radius: float, shift=(0.0, 0.0, 0.0)) -> np.ndarray:
        """Points q + shift, q in the dual lattice, with |q + shift| <= radius."""
        shift = np.asarray(shift, dtype=float)
        n = self._integer_box(self.dual, radius + np.linalg.norm(shift))
        p = n @ self.dual + shift
        return p[np.linalg.norm(p, axis=1) <= radius]

    def contains(self, vector, tol: float = 1e-9) -> bool:
        """Whether ``vector`` is a lattice vector."""
        c = np.asarray(vector, dtype=float) @ np.linalg.inv(self.generators)
        return bool(np.all(np.abs(c - np.round(c)) <= tol))

    def in_dual(self, vector, tol: float = 1e-9) -> bool:
        c = np.asarray(vector, dtype=float) @ np.linalg.inv(self.dual)
        return bool(np.all(np.abs(c - np.round(c)) <= tol))

    def brillouin_grid(self, n: int) -> np.ndarray:
        """n**3 points sum_i (t_i / n) alpha_i with t_i centred on zero."""
        if n < 1:
            raise ValueError("grid size must be positive")
        t = np.arange(n) - (n - 1) // 2
        tt = np.stack(np.meshgrid(t, t, t, indexing="ij"), axis=-1).reshape(-1, 3)
        return (tt / n) @ self.dual

    def high_symmetry_point(self, name: str) -> np.ndarray:
        """Gamma, M, K or K' of the in-plane lattice spanned by the first two
        generators. K is located as the shortest point (n1 alpha_1 + n2 alpha_2)/3
        that is fixed modulo the dual lattice by the rotation through 2 pi / 3
        about z but is not itself a dual vector."""
        key = name.replace("’", "'").lower()
        if key in ("gamma", "g", "0"):
            return np.zeros(3)
        a1, a2 = self.dual[0], self.dual[1]
        if key == "m":
            return a1 / 2
        if key not in ("k", "k'", "kp"):
            raise ValueError(f"unknown high-symmetry point {name!r}")
        rot = rotation_about_z(2 * np.pi / 3)
        best = None
        for n1, n2 in itertools.product(range(-2, 3), repeat=2):
            K = (n1 * a1 + n2 * a2) / 3
            if self.in_dual(K) or not self.in_dual(rot @ K - K):
                continue
            if best is None or np.linalg.norm(K) < np.linalg.norm(best) - 1e-12:
                best = K
        if best is None:
            raise PreconditionError("lattice has no 2 pi / 3 rotation-invariant K point")
        return best if key == "k" else -best

    def path(self, names, count: int) -> np.ndarray:
        """``count`` points spaced evenly along the polyline through named points."""
        corners = [self.high_symmetry_point(n) for n in names]
        seg = [np.linalg.norm(b - a) for a, b in zip(corners[:-1], corners[1:])]
        total = sum(seg)
        out = []
        for s in np.linspace(0, total, count):
            i = 0
            while i < len(seg) - 1 and s > seg[i]:
                s -= seg[i]
                i += 1
            t = s / seg[i] if seg[i] else 0.0
            out.append(corners[i] + t * (corners[i + 1] - corners[i]))
        return np.array(out)


def rotation_about_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def cubic_group() -> list[np.ndarray]:
    """The 48 signed permutation matrices (full octahedral group)."""
    out = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            Q = np.zeros((3, 3))
            for r, c in enumerate(perm):
                Q[r, c] = signs[r]
            out.append(Q)
    return out


def rotation_representation(Q: np.ndarray, L: int) -> np.ndarray:
    """Matrix D with D_ab = integral of Y_a(Q x) Y_b(x) over the unit sphere.

    Block diagonal in ell; maps the coefficients of f to those of f o Q^-1.
    """
    quad = sphere_quadrature(2 * L)
    pts = quad.points
    Y = real_harmonics_xyz(L, pts)
    YQ = real_harmonics_xyz(L, pts @ np.asarray(Q).T)
    D = (YQ * quad.weights) @ Y.T
    ell = degree_of_index(L)
    D[ell[:, None] != ell[None, :]] = 0.0
    return D


def symmetry_operator(Q: np.ndarray, scene: SphereScene, lattice: Lattice3D, L: int, origin=(0.0, 0.0, 0.0)):
    """Density transform phi -> phi o Q^-1 for the point map x -> origin + Q (x - origin).

    Returns the (N L^2) square matrix and the lattice shifts taking each
    image sphere back into the cell; raises if the cell is not invariant.
    """
    n = L * L
    N = scene.count
    origin = np.asarray(origin, dtype=float)
    D = rotation_representation(Q, L)
    T = np.zeros((N * n, N * n))
    shifts = np.zeros((N, 3))
    for i in range(N):
        image = origin + Q @ (scene.centers[i] - origin)
        hit = None
        for j in range(N):
            if lattice.contains(image - scene.centers[j], 1e-8) and abs(scene.radii[i] - scene.radii[j]) <= 1e-12 * scene.radii[i]:
                if scene.interior_speeds[i] == scene.interior_speeds[j]:
                    hit = j
                    break
        if hit is None:
            raise PreconditionError(f"sphere {i} has no partner under the symmetry {Q.tolist()}")
        T[hit * n : (hit + 1) * n, i * n : (i + 1) * n] = D
        shifts[i] = image - scene.centers[hit]
    return T, shifts


# ---------------------------------------------------------------------------
# Ewald kernels


def _ewald_parts(r: np.ndarray, k: complex, eta: float):
    """r g(r) and r^2 g'(r) for the erfc-damped real-space kernel
    g(r) = [e^{ikr} erfc(eta r + ik/2eta) + e^{-ikr} erfc(eta r - ik/2eta)] / (8 pi r)."""
    r = np.asarray(r, dtype=float)
    a = 1j * k / (2 * eta)
    env = np.exp(-(eta * r) ** 2 + k * k / (4 * eta * eta))
    xp = erfcx(eta * r + a)
    xm = erfcx(eta * r - a)
    rg = env * (xp + xm) / (8 * np.pi)
    r2dg = r * env * (1j * k * (xp - xm) - 4 * eta / np.sqrt(np.pi)) / (8 * np.pi) - rg
    return rg, r2dg


def ewald_kernel(r, k: complex, eta: float) -> tuple[np.ndarray, np.ndarray]:
    """The real-space kernel g and its radial derivative."""
    r = np.asarray(r, dtype=float)
    rg, r2dg = _ewald_parts(r, k, eta)
    return rg / r, r2dg / (r * r)


def _free_parts(r, k):
    e = np.exp(1j * k * r)
    return e / (4 * np.pi), e * (1j * k * r - 1.0) / (4 * np.pi)


# ---------------------------------------------------------------------------
# context


def _scene_key(scene: SphereScene) -> tuple:
    return (scene.centers.tobytes(), scene.radii.tobytes())


@dataclass
class QuasiPeriodicContext:
    """Lattice, Bloch vector and Ewald truncation settings.

    ``eta=None`` picks the splitting per scene so that only the self term of
    the real-space sum is non-negligible (see :meth:`split_for`). ``tol``
    bounds the neglected Gaussian tails of both sums.
    """

    lattice: Lattice3D
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(3))
    eta: float | None = None
    tol: float = 1e-15
    threshold_margin: float = 1e-6
    max_reciprocal: int = 400_000
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(3)
        if self.eta is not None and self.eta <= 0:
            raise ValueError("Ewald splitting parameter must be positive")

    def at(self, alpha) -> "QuasiPeriodicContext":
        """Same settings (and cache) at another Bloch vector."""
        out = replace(self, alpha=np.asarray(alpha, dtype=float))
        out._cache = self._cache
        return out

    @property
    def log_tol(self) -> float:
        return float(-np.log(self.tol))

    def default_pointwise_split(self) -> float:
        return float(np.sqrt(np.pi) / self.lattice.volume ** (1 / 3))

    def reciprocal_radius(self, k: complex, eta: float) -> float:
        return float(np.sqrt(max(np.real(k * k), 0.0) + 4 * eta * eta * self.log_tol))

    def real_radius(self, k: complex, eta: float) -> float:
        return float(np.sqrt(self.log_tol + max(np.real(k * k), 0.0) / (4 * eta * eta)) / eta)

    def reciprocal_count(self, radius: float) -> float:
        return 4 * np.pi * radius**3 / 3 * self.lattice.volume / (2 * np.pi) ** 3

    def split_for(self, scene: SphereScene) -> float:
        """Splitting parameter for a scene: the user's eta, or the value that
        pushes every non-self real-space interaction below ``tol``, capped so
        that the spectral sum stays within ``max_reciprocal`` terms."""
        if self.eta is not None:
            return float(self.eta)
        gap = min_image_gap(scene, self.lattice)
        eta = 1.02 * np.sqrt(self.log_tol) / gap
        cap = (self.max_reciprocal * 3 * (2 * np.pi) ** 3 / (4 * np.pi * self.lattice.volume)) ** (1 / 3)
        cap /= 2 * np.sqrt(self.log_tol)
        return float(min(eta, cap))

    def dual_points(self, alpha, radius: float) -> np.ndarray:
        key = ("dual", np.asarray(alpha, dtype=float).tobytes())
        hit = self._cache.get(key)
        if hit is None or hit[0] < radius:
            if self.reciprocal_count(radius) > 1.3 * self.max_reciprocal:
                raise ConvergenceError(
                    f"spectral sum needs about {self.reciprocal_count(radius):.0f} dual vectors "
                    f"(limit {self.max_reciprocal}); lower eta"
                )
            pts = self.lattice.dual_vectors_within(radius, alpha)
            pts = pts[np.argsort(np.linalg.norm(pts, axis=1), kind="stable")]
            hit = (radius, pts)
            self._cache[key] = hit
        pts = hit[1]
        return pts[np.linalg.norm(pts, axis=1) <= radius]

    def check_threshold(self, alpha, k: complex) -> float:
        """Distance from Re k to the nearest |q + alpha|; raises within the margin
        when k is real."""
        kr = float(np.real(k))
        pts = self.lattice.dual_vectors_within(abs(kr) + 2 * np.pi / min(np.linalg.norm(self.lattice.generators, axis=1)) + 1.0, alpha)
        dist = float(np.min(np.abs(np.linalg.norm(pts, axis=1) - abs(kr)))) if pts.size else np.inf
        if abs(np.imag(k)) < 1e-14 and dist <= self.threshold_margin:
            raise ThresholdError(f"k={kr:.12g} is within {dist:.2e} of a diffraction threshold |q+alpha|")
        return dist


def min_image_gap(scene: SphereScene, lattice: Lattice3D) -> float:
    """Smallest surface-to-surface distance between a sphere and any other
    sphere or periodic image; raises if spheres touch or overlap."""
    c = scene.centers
    spread = float(np.max(np.linalg.norm(c[:, None] - c[None], axis=-1)))
    reach = spread + 2 * float(scene.radii.max()) + float(np.linalg.norm(lattice.generators, axis=1).max())
    m, n = lattice.vectors_within(reach)
    best = np.inf
    for i in range(scene.count):
        for j in range(scene.count):
            d = np.linalg.norm(c[i] - c[j] - m, axis=1) - scene.radii[i] - scene.radii[j]
            if i == j:
                d = d[np.any(n != 0, axis=1)]
            if d.size:
                best = min(best, float(d.min()))
    if best <= 0:
        raise PreconditionError("resonators overlap their periodic images")
    return best


def _real_space_terms(scene: SphereScene, lattice: Lattice3D, reach: float):
    """(i, j, m) with m a lattice vector, excluding (i, i, 0), whose surfaces
    come within ``reach`` of each other."""
    c = scene.centers
    spread = float(np.max(np.linalg.norm(c[:, None] - c[None], axis=-1)))
    m, n = lattice.vectors_within(spread + 2 * float(scene.radii.max()) + reach)
    out = []
    for i in range(scene.count):
        for j in range(scene.count):
            d = np.linalg.norm(c[i] - c[j] - m, axis=1) - scene.radii[i] - scene.radii[j]
            for idx in np.nonzero(d < reach)[0]:
                if i == j and not np.any(n[idx]):
                    continue
                out.append((i, j, m[idx]))
    return out


# ---------------------------------------------------------------------------
# pointwise Green function


def qp_green(x, alpha, k: complex, ctx: QuasiPeriodicContext, eta: float | None = None) -> np.ndarray:
    """G^alpha(x) = sum_m e^{i alpha.m} G(x - m) by Ewald splitting.

    ``x`` may be one point or an array of points (..., 3). Agrees with the
    spectral series -(1/|Y|) sum_p e^{ip.x} / (|p|^2 - k^2) where the latter
    converges.
    """
    alpha = np.asarray(alpha, dtype=float)
    x = np.asarray(x, dtype=float)
    shape = x.shape[:-1]
    pts = x.reshape(-1, 3)
    eta = float(eta if eta is not None else (ctx.eta or ctx.default_pointwise_split()))
    ctx.check_threshold(alpha, k)
    lat = ctx.lattice
    # spectral part
    p = ctx.dual_points(alpha, ctx.reciprocal_radius(k, eta))
    p2 = np.einsum("pc,pc->p", p, p)
    weight = np.exp((k * k - p2) / (4 * eta * eta)) / (p2 - k * k)
    out = np.zeros(pts.shape[0], dtype=complex)
    for start in range(0, pts.shape[0], 64):
        ph = np.exp(1j * pts[start : start + 64] @ p.T)
        out[start : start + 64] = -(ph @ weight) / lat.volume
    # real-space part
    rcut = ctx.real_radius(k, eta)
    for idx, xi in enumerate(pts):
        m, _ = lat.vectors_within(rcut + 1e-12, center=xi)
        r = np.linalg.norm(xi - m, axis=1)
        if np.any(r < 1e-12):
            raise ValueError(f"x={xi} lies on the source lattice")
        rg, _ = _ewald_parts(r, k, eta)
        out[idx] -= np.sum(np.exp(1j * (m @ alpha)) * rg / r)
    return out.reshape(shape) if shape else out[0]


def qp_green_regular(x, alpha, k: complex, ctx: QuasiPeriodicContext, eta: float | None = None) -> np.ndarray:
    """G^alpha(x) - G(x): the smooth part near the origin."""
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    return qp_green(x, alpha, k, ctx, eta) + np.exp(1j * k * r) / (4 * np.pi * r)


# ---------------------------------------------------------------------------
# Galerkin matrices


def _fh_nodes(k, R, eta, L):
    n = 64 + 16 * int(np.ceil(2 * eta * R)) + 2 * L + int(np.ceil(2 * abs(k) * R))
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _legendre_rows(L, t):
    P = np.empty((L, t.size))
    P[0] = 1.0
    if L > 1:
        P[1] = t
    for ell in range(2, L):
        P[ell] = ((2 * ell - 1) * t * P[ell - 1] - (ell - 1) * P[ell - 2]) / ell
    return P


def ewald_self_correction(k: complex, radius: float, eta: float, L: int):
    """Per-degree symbols of the smooth kernel d = g - e^{ikr}/(4 pi r) on a
    sphere (single layer and normal-derivative parts), by Funk-Hecke
    quadrature in u with t = 1 - 2u^2, r = 2Ru."""
    R = float(radius)
    u, w = _fh_nodes(k, R, eta, L)
    r = 2 * R * u
    rg, r2dg = _ewald_parts(r, k, eta)
    fr, fr2d = _free_parts(r, k)
    rd = rg - fr
    r2dd = r2dg - fr2d
    P = _legendre_rows(L, 1.0 - 2.0 * u * u)
    s_corr = 4 * np.pi * R * (P * rd) @ w
    k_corr = 2 * np.pi * (P * r2dd) @ w
    return s_corr, k_corr


def _spectral_factors(ctx: QuasiPeriodicContext, alpha, scene: SphereScene, L: int, eta: float, radius: float):
    """Plane-wave projections onto the boundary basis, cached per alpha.

    Returns p (np, 3), and per sphere the real arrays J (np, L^2) holding
    j_ell(|p| R) Y_a(p/|p|) and dJ holding |p| j_ell'(|p| R) Y_a, and the
    phases exp(i p.c_j).
    """
    key = ("spec", np.asarray(alpha, dtype=float).tobytes(), _scene_key(scene), L, eta)
    hit = ctx._cache.get(key)
    if hit is not None and hit[0] >= radius:
        keep = hit[1]["norm"] <= radius
        return {name: val[keep] if name != "spheres" else [tuple(a[keep] for a in s) for s in val] for name, val in hit[1].items()}
    p = ctx.dual_points(alpha, radius)
    norm = np.linalg.norm(p, axis=1)
    dirs = np.where(norm[:, None] > 0, p, np.array([0.0, 0.0, 1.0]))
    Y = real_harmonics_xyz(L, dirs).T
    ell = degree_of_index(L)
    spheres = []
    for j in range(scene.count):
        R = scene.radii[j]
        jv, jd = sph_bessel_all("j", L - 1, norm * R)
        J = Y * jv.real.T[:, ell]
        dJ = Y * (norm[:, None] * jd.real.T[:, ell])
        phase = np.exp(1j * p @ scene.centers[j])
        spheres.append((J, dJ, phase))
    data = {"p": p, "norm": norm, "spheres": spheres}
    # keep few entries: each holds several dense arrays
    stale = [kk for kk in ctx._cache if kk[0] == "spec"]
    for kk in stale[:-3]:
        del ctx._cache[kk]
    ctx._cache[key] = (radius, data)
    return data


def _check_cell(scene: SphereScene, lattice: Lattice3D):
    min_image_gap(scene, lattice)


def assemble_qp_operators(alpha, k: complex, scene: SphereScene, L: int, ctx: QuasiPeriodicContext):
    """Galerkin matrices (S, K*) of the alpha-quasiperiodic single layer and
    of the normal derivative of the quasiperiodic single layer on the spheres
    of one cell.

    Self blocks are the analytic free-space symbols minus the Funk-Hecke
    symbols of the smooth difference between the real-space Ewald kernel and
    the free kernel; other real-space terms (present only when the
    splitting parameter is small relative to the gaps) use tensor-product
    sphere quadrature.
    """
    alpha = np.asarray(alpha, dtype=float)
    _check_cell(scene, ctx.lattice)
    ctx.check_threshold(alpha, k)
    eta = ctx.split_for(scene)
    n = L * L
    N = scene.count
    ell = degree_of_index(L)
    S = np.zeros((N * n, N * n), dtype=complex)
    K = np.zeros_like(S)

    radius = ctx.reciprocal_radius(k, eta)
    data = _spectral_factors(ctx, alpha, scene, L, eta, radius)
    p2 = data["norm"] ** 2
    weight = np.exp((k * k - p2) / (4 * eta * eta)) / (p2 - k * k)
    ifac = (1j) ** ell
    chunk = 20000
    for start in range(0, p2.size, chunk):
        sl = slice(start, start + chunk)
        U = []
        dU = []
        for j in range(N):
            J, dJ, phase = data["spheres"][j]
            fac = 4 * np.pi * scene.radii[j] * ifac
            U.append(J[sl] * phase[sl, None] * fac)
            dU.append(dJ[sl] * phase[sl, None] * fac)
        U = np.concatenate(U, axis=1)
        dU = np.concatenate(dU, axis=1)
        wU = np.conj(U) * weight[sl, None]
        S += U.T @ wU
        K += dU.T @ wU
    S *= -1.0 / ctx.lattice.volume
    K *= -1.0 / ctx.lattice.volume

    for j in range(N):
        R = scene.radii[j]
        s_free, k_free = sphere_layer_symbols(k, R, L)
        s_corr, k_corr = ewald_self_correction(k, R, eta, L)
        blk = slice(j * n, (j + 1) * n)
        S[blk, blk] += np.diag((s_free - s_corr)[ell])
        K[blk, blk] += np.diag((k_free - k_corr)[ell])

    reach = ctx.real_radius(k, eta)
    for i, j, m in _real_space_terms(scene, ctx.lattice, reach):
        s_ij, k_ij = _real_space_block(k, eta, alpha, scene, i, j, m, L)
        S[i * n : (i + 1) * n, j * n : (j + 1) * n] += s_ij
        K[i * n : (i + 1) * n, j * n : (j + 1) * n] += k_ij
    return S, K


def _real_space_degree(k, eta, Ri, Rj, d, L, tol=1e-15):
    rho = max(Rj / (d - Ri), Ri / (d - Rj))
    extra = int(np.ceil(np.log(tol) / np.log(rho))) if rho < 1 else 160
    return int(min(L - 1 + extra + int(np.ceil(2 * abs(k) * max(Ri, Rj) + 4 * eta * max(Ri, Rj))), 160))


def _real_space_block(k, eta, alpha, scene, i, j, m, L):
    ci, cj = scene.centers[i], scene.centers[j] + m
    Ri, Rj = scene.radii[i], scene.radii[j]
    d = float(np.linalg.norm(ci - cj))
    deg = _real_space_degree(k, eta, Ri, Rj, d, L)
    ph = np.exp(1j * float(alpha @ m))

    def kernel(r, proj_x, _):
        rg, r2dg = _ewald_parts(r, k, eta)
        return -ph * rg / r, -ph * r2dg / (r * r) * proj_x

    s_ij, k_ij = pair_contract(ci, Ri, cj, Rj, L, deg, kernel)
    return Ri * Rj * s_ij, Ri * Rj * k_ij


# ---------------------------------------------------------------------------
# exterior Dirichlet-to-Neumann map


def exterior_qp_dtn_matrix(alpha, omega: complex, scene: SphereScene, L: int, ctx: QuasiPeriodicContext,
                           cond_limit: float = 1e12, blocks=None) -> tuple[np.ndarray, float]:
    """(1/2 + K*) S^-1 at k = omega / v and the condition number of S."""
    k = complex(omega) / scene.background_speed
    S, K = blocks if blocks is not None else assemble_qp_operators(alpha, k, scene, L, ctx)
    cond = float(np.linalg.cond(S))
    if cond > cond_limit:
        warnings.warn(
            f"quasiperiodic single layer nearly singular at omega={omega} (condition {cond:.3e}); "
            "omega is close to a quasiperiodic exterior Dirichlet eigenfrequency",
            RuntimeWarning,
            stacklevel=2,
        )
    lam = np.linalg.solve(S.T, (0.5 * np.eye(S.shape[0]) + K).T).T
    return lam, cond


def exterior_qp_dtn(alpha, omega: complex, traces, scene: SphereScene, L: int, ctx: QuasiPeriodicContext) -> np.ndarray:
    """Outward flux of the alpha-quasiperiodic exterior solution with the given
    boundary values (coefficient vector or columns)."""
    g = np.asarray(traces, dtype=complex)
    if not np.any(g):
        return np.zeros_like(g)
    lam, _ = exterior_qp_dtn_matrix(alpha, omega, scene, L, ctx)
    return lam @ g


# ---------------------------------------------------------------------------
# capacitance matrices


@dataclass
class QPCapMatrices:
    """Quasiperiodic capacitance data at one (alpha, omega0)."""

    alpha: np.ndarray
    omega0: float
    case1: np.ndarray | None = None
    gamma: np.ndarray | None = None
    case2: np.ndarray | None = None
    case3: np.ndarray | None = None
    exterior_fluxes: np.ndarray | None = None
    exterior_wavenumber: float | None = None
    condition: float | None = None
    labels: list = field(default_factory=list)

    @staticmethod
    def _defect(M):
        if M is None or not M.size:
            return 0.0
        nrm = np.linalg.norm(M)
        return float(np.linalg.norm(M - M.conj().T) / nrm) if nrm else 0.0

    @property
    def hermiticity_defect(self) -> float:
        return max(self._defect(M) for M in (self.case1, self.case2, self.case3))

    def eigenvalues(self, which: str = "case1") -> np.ndarray:
        M = getattr(self, which)
        return np.linalg.eigvalsh(0.5 * (M + M.conj().T))

    def predictions(self, delta: float, which: str = "case1") -> np.ndarray:
        """Leading-order Bloch frequencies near omega0."""
        lam = self.eigenvalues(which)
        if which == "case2":
            pos = lam[lam > 1e-12 * max(1.0, np.abs(lam).max())]
            zero = lam.size - pos.size
            root = np.sqrt(delta * pos)
            return np.sort(np.concatenate([self.omega0 - root, self.omega0 + root, np.full(zero, self.omega0)]))
        return self.omega0 + delta * lam

    def to_dict(self) -> dict:
        pair = lambda M: None if M is None else [[[float(z.real), float(z.imag)] for z in row] for row in np.atleast_2d(M)]  # noqa: E731
        return {
            "alpha": self.alpha.tolist(),
            "omega0": self.omega0,
            "case1": pair(self.case1),
            "gamma": pair(self.gamma),
            "case2": pair(self.case2),
            "case3": pair(self.case3),
            "hermiticity_defect": self.hermiticity_defect,
            "condition": self.condition,
        }


def _uniform_interior_speed(scene: SphereScene) -> float:
    vb = scene.interior_speeds
    if np.any(np.abs(vb - vb[0]) > 1e-14 * vb[0]):
        raise PreconditionError("quasiperiodic capacitance matrices assume one interior wave speed")
    return float(vb[0])


def regular_capacitance(alpha, omega0: float, traces, scene: SphereScene, L: int, ctx: QuasiPeriodicContext,
                        cond_limit: float = 1e10) -> tuple[np.ndarray, float]:
    """-(v_b^2 / 2 omega0) G^H Lambda_ext G for trace columns G, and cond(S)."""
    vb = _uniform_interior_speed(scene)
    G = np.asarray(traces, dtype=complex)
    lam, cond = exterior_qp_dtn_matrix(alpha, omega0, scene, L, ctx, cond_limit=np.inf)
    if cond > cond_limit:
        raise PreconditionError(
            f"exterior problem nearly singular at alpha={np.round(alpha, 6).tolist()}, omega0={omega0} "
            f"(condition {cond:.3e}): a quasiperiodic Dirichlet eigenfrequency is close; "
            "use the singular (case 2) capacitance matrix"
        )
    return -(vb * vb / (2 * omega0)) * (G.conj().T @ lam @ G), cond


def capmat_case1(alpha, omega0: float, scene: SphereScene, L: int, ctx: QuasiPeriodicContext) -> QPCapMatrices:
    """Regular quasiperiodic capacitance matrix over all Neumann modes at omega0."""
    modes = neumann_modes(scene, omega0, L)
    C, cond = regular_capacitance(alpha, omega0, modes.traces, scene, L, ctx)
    return QPCapMatrices(np.asarray(alpha, dtype=float), float(omega0), case1=C, condition=cond, labels=modes.labels)


def capmat_case2(gamma, omega0: float, v: float, v_b: float) -> QPCapMatrices:
    """Singular capacitance matrix (v_b^2 v^2 / 4 omega0^2) Gamma^H Gamma from
    the coupling Gamma[s, p] = <g_p, psi_s>."""
    G = np.atleast_2d(np.asarray(gamma, dtype=complex))
    C = (v_b * v_b * v * v / (4 * omega0 * omega0)) * (G.conj().T @ G)
    return QPCapMatrices(np.zeros(3), float(omega0), gamma=G, case2=C)


def capmat_case3(exterior_fluxes, omega0: float, scene: SphereScene, L: int) -> QPCapMatrices:
    """B[s, t] = -(v^2 / 2 omega0) <Lambda_in^-1 psi_t, psi_s> with the
    analytic interior Neumann-to-Dirichlet map of each ball."""
    Psi = np.asarray(exterior_fluxes, dtype=complex)
    if Psi.ndim == 1:
        Psi = Psi[:, None]
    if resonant_channels(scene, omega0, L):
        raise PreconditionError(
            f"omega0={omega0} is an interior Neumann frequency; use the singular (case 2) capacitance matrix"
        )
    ntd = interior_ntd_diagonal(omega0, scene, L)
    v = scene.background_speed
    B = -(v * v / (2 * omega0)) * (Psi.conj().T @ (ntd[:, None] * Psi))
    return QPCapMatrices(np.zeros(3), float(omega0), case3=B, exterior_fluxes=Psi)


def interior_ntd_diagonal(omega: complex, scene: SphereScene, L: int) -> np.ndarray:
    """Diagonal of the interior Neumann-to-Dirichlet map j / (k_b j') per basis entry."""
    ell = degree_of_index(L)
    out = []
    for j in range(scene.count):
        lam = interior_dtn_symbol(omega / scene.interior_speeds[j], scene.radii[j], L)
        out.append(1.0 / lam[ell])
    return np.concatenate(out)


def interior_dtn_diagonal(omega: complex, scene: SphereScene, L: int) -> np.ndarray:
    ell = degree_of_index(L)
    return np.concatenate([
        interior_dtn_symbol(omega / scene.interior_speeds[j], scene.radii[j], L)[ell] for j in range(scene.count)
    ])


# ---------------------------------------------------------------------------
# direct Bloch oracle


def _resonant_indices(scene: SphereScene, omega0: float, L: int) -> np.ndarray:
    n = L * L
    rows = []
    for j, ell, _, _ in resonant_channels(scene, omega0, L):
        rows.extend(j * n + harmonic_index(ell, m) for m in range(-ell, ell + 1))
    return np.array(sorted(rows), dtype=int)


def bloch_reduced_matrix(omega: float, alpha, delta: float, omega0: float, scene: SphereScene, L: int,
                         ctx: QuasiPeriodicContext, rows=None) -> np.ndarray:
    """Schur complement of Lambda_in - delta Lambda_ext onto the channels
    resonant at omega0. It is singular exactly where the full Galerkin
    matrix is, and Hermitian at real omega."""
    rows = _resonant_indices(scene, omega0, L) if rows is None else rows
    lam, _ = exterior_qp_dtn_matrix(alpha, omega, scene, L, ctx, cond_limit=np.inf)
    lam = 0.5 * (lam + lam.conj().T)
    din = interior_dtn_diagonal(omega, scene, L)
    other = np.setdiff1d(np.arange(lam.shape[0]), rows)
    T = np.diag(din[rows]).astype(complex) - delta * lam[np.ix_(rows, rows)]
    if other.size and delta != 0:
        ntd = 1.0 / din[other]
        E_nn = lam[np.ix_(other, other)]
        inner = np.linalg.solve(np.eye(other.size) - delta * ntd[:, None] * E_nn, ntd[:, None] * lam[np.ix_(other, rows)])
        T -= delta * delta * lam[np.ix_(rows, other)] @ inner
    return T


def bloch_direct(alpha, delta: float, omega0: float, scene: SphereScene, L: int, ctx: QuasiPeriodicContext,
                 radius: float | None = None, scan_points: int = 41, tol: float = 1e-13,
                 expected: int | None = None) -> ResonanceSet:
    """Real Bloch eigenfrequencies within ``radius`` of omega0 from the full
    Galerkin transmission problem.

    Each sorted eigenvalue of the Hermitian reduced matrix is continuous in
    omega; its sign changes on a real scan are refined by Brent's method.
    Sign changes through a pole of the exterior map are discarded.
    ``expected`` is the root count to check against (default: the Neumann
    multiplicity; a tuned pole doubles the coupled roots).
    """
    alpha = np.asarray(alpha, dtype=float)
    rows = _resonant_indices(scene, omega0, L)
    if rows.size == 0:
        raise PreconditionError(f"omega0={omega0} is not an interior Neumann frequency")
    if radius is None:
        C = capmat_case1(alpha, omega0, scene, L, ctx).case1
        radius = max(4 * abs(delta) * np.linalg.norm(C, 2), 1e-7 * omega0)

    def branches(w):
        T = bloch_reduced_matrix(w, alpha, delta, omega0, scene, L, ctx, rows)
        return np.linalg.eigvalsh(0.5 * (T + T.conj().T))

    grid = omega0 + np.linspace(-radius, radius, scan_points)
    vals = np.array([branches(w) for w in grid])
    scale = np.abs(vals).max()
    roots, residuals, notes = [], [], []
    for b in range(rows.size):
        f = lambda w, b=b: branches(w)[b]  # noqa: E731
        for i in range(scan_points - 1):
            if vals[i, b] == 0:
                root = grid[i]
            elif vals[i, b] * vals[i + 1, b] < 0:
                root = brentq(f, grid[i], grid[i + 1], xtol=tol * omega0, rtol=1e-15)
            else:
                continue
            res = abs(f(root))
            if res > 1e-6 * scale:
                notes.append(f"discarded a sign change through a pole near omega={root:.12g}")
                continue
            roots.append(root)
            residuals.append(res)
    order = np.argsort(roots)
    values = np.array(roots, dtype=float)[order].astype(complex)
    residuals = np.array(residuals)[order]
    expected = rows.size if expected is None else expected
    if values.size != expected:
        msg = f"found {values.size} Bloch frequencies, expected {expected}"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    mult = [int(np.sum(np.abs(values - v) <= 1e-9 * omega0)) for v in values]
    return ResonanceSet(values, residuals, mult, [0] * values.size, notes)


# ---------------------------------------------------------------------------
# bands


@dataclass
class BandSweep:
    alphas: np.ndarray
    omega0: float
    delta: float
    eigenvalues: np.ndarray  # (n_alpha, m), real
    notes: list[str] = field(default_factory=list)
    hermiticity_defects: np.ndarray | None = None

    @property
    def frequencies(self) -> np.ndarray:
        return self.omega0 + self.delta * self.eigenvalues

    def rows(self):
        """(alpha_index, alpha_x, alpha_y, alpha_z, band_index, omega) records."""
        for i, a in enumerate(self.alphas):
            for b, w in enumerate(self.frequencies[i]):
                yield i, float(a[0]), float(a[1]), float(a[2]), b, float(w)


def _label_by_continuity(vals, vecs):
    from scipy.optimize import linear_sum_assignment

    out_vals = [vals[0]]
    prev = vecs[0]
    for lam, vec in zip(vals[1:], vecs[1:]):
        overlap = np.abs(prev.conj().T @ vec)
        _, cols = linear_sum_assignment(-overlap)
        out_vals.append(lam[cols])
        prev = vec[:, cols]
    return np.array(out_vals)


def band_sweep(alpha_grid, omega0: float, delta: float, scene: SphereScene, L: int, ctx: QuasiPeriodicContext,
               traces=None, labelling: str = "sorted") -> BandSweep:
    """Leading-order Bloch bands omega0 + delta lambda_j(alpha) over a grid.

    ``labelling="continuity"`` follows eigenvectors between consecutive grid
    points (meaningful along a path); the default sorts eigenvalues, which is
    continuous for Hermitian families.
    """
    alphas = np.atleast_2d(np.asarray(alpha_grid, dtype=float))
    G = neumann_modes(scene, omega0, L).traces if traces is None else np.asarray(traces)
    vals, vecs, defects, notes = [], [], [], []
    for a in alphas:
        C, _ = regular_capacitance(a, omega0, G, scene, L, ctx)
        nrm = np.linalg.norm(C)
        defects.append(float(np.linalg.norm(C - C.conj().T) / nrm) if nrm else 0.0)
        lam, vec = np.linalg.eigh(0.5 * (C + C.conj().T))
        vals.append(lam)
        vecs.append(vec)
    vals = np.array(vals)
    if labelling == "continuity":
        vals = _label_by_continuity(vals, vecs)
    elif labelling != "sorted":
        raise ValueError("labelling must be 'sorted' or 'continuity'")
    scale = max(np.abs(vals).max(), 1e-300)
    for i in range(alphas.shape[0]):
        gaps = np.diff(np.sort(vals[i]))
        for b in np.nonzero(gaps < 1e-6 * scale)[0]:
            notes.append(f"bands {b} and {b + 1} touch at alpha index {i}: labels there are ambiguous")
    return BandSweep(alphas, float(omega0), float(delta), vals, notes, np.array(defects))


def sector_traces(scene: SphereScene, omega0: float, L: int, sector: str = "group") -> np.ndarray:
    """Trace columns for one Neumann branch.

    ``group``: every mode of the branch. ``a1g``: the combinations within each
    degree-ell branch fixed by the 48 cubic symmetries about the sphere centre.
    """
    modes = neumann_modes(scene, omega0, L)
    if sector == "group":
        return modes.traces
    if sector != "a1g":
        raise ValueError("sector must be 'group' or 'a1g'")
    n = L * L
    group = cubic_group()
    cols = []
    for j, ell, _, beta in resonant_channels(scene, omega0, L):
        R = scene.radii[j]
        scale = ball_mode_normalisation(ell, beta, R) * sph_bessel_all("j", ell, beta)[0][ell].real * R
        idx = np.arange(ell * ell, (ell + 1) * (ell + 1))
        P = sum(rotation_representation(Q, ell + 1)[np.ix_(idx, idx)] for Q in group) / len(group)
        w, V = np.linalg.eigh(0.5 * (P + P.T))
        fixed = V[:, w > 0.5]
        for c in fixed.T:
            col = np.zeros(scene.count * n)
            col[j * n + idx] = scale * c
            cols.append(col)
    if not cols:
        raise PreconditionError(f"no cubic-invariant mode in the branch at omega0={omega0}")
    return np.array(cols).T


def neumann_branches(scene: SphereScene, count: int, L: int | None = None, rtol: float = 1e-9) -> list[float]:
    """The ``count`` lowest distinct nonzero Neumann frequencies of the
    resonators, restricted to degrees below L when L is given."""
    from .specfun import neumann_ball_spectrum

    freqs = []
    ell_max = count + 2 if L is None else L - 1
    for j in range(scene.count):
        spec = neumann_ball_spectrum(scene.radii[j] / scene.interior_speeds[j], ell_max, count)
        freqs.extend(f.omega for f in spec)
    freqs.sort()
    out = []
    for f in freqs:
        if not out or abs(f - out[-1]) > rtol * f:
            out.append(f)
    return out[:count]


def sector_branches(scene: SphereScene, J: int, L: int, sector: str = "group") -> list[tuple[float, np.ndarray]]:
    """First J distinct Neumann branches (frequency, trace columns) with a
    nonempty ``sector``."""
    out = []
    for w0 in neumann_branches(scene, 4 * J + 8, L):
        try:
            out.append((w0, sector_traces(scene, w0, L, sector)))
        except PreconditionError:
            continue
        if len(out) == J:
            return out
    raise PreconditionError(f"fewer than {J} Neumann branches with a {sector} sector below degree {L}")


@dataclass
class BandgapReport:
    omega0: np.ndarray  # branch frequencies
    gamma: float
    capacitance_bound: float
    band_branch: np.ndarray  # branch of each band
    lambda_sup: np.ndarray
    lambda_inf: np.ndarray
    delta_threshold: float
    delta_sufficient: float
    deltas: np.ndarray
    band_sup: np.ndarray  # (n_delta, n_bands)
    band_inf: np.ndarray
    gaps_open: np.ndarray  # (n_delta, n_branches - 1)
    grid_size: int
    sector: str
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "omega0": self.omega0.tolist(),
            "gamma": self.gamma,
            "capacitance_bound": self.capacitance_bound,
            "band_branch": self.band_branch.tolist(),
            "lambda_sup": self.lambda_sup.tolist(),
            "lambda_inf": self.lambda_inf.tolist(),
            "delta_threshold": self.delta_threshold,
            "delta_sufficient": self.delta_sufficient,
            "deltas": self.deltas.tolist(),
            "band_sup": self.band_sup.tolist(),
            "band_inf": self.band_inf.tolist(),
            "gaps_open": self.gaps_open.tolist(),
            "grid_size": self.grid_size,
            "sector": self.sector,
            "notes": self.notes,
        }


def bandgap_report(scene: SphereScene, lattice: Lattice3D, J: int, delta_list, grid, L: int,
                   ctx: QuasiPeriodicContext | None = None, sector: str = "group") -> BandgapReport:
    """Leading-order band edges of the first J Neumann branches over a
    Brillouin grid and the contrasts at which the J - 1 gaps are open.

    ``sector="a1g"`` keeps only the cubic-invariant combination of each
    branch and skips branches that have none; off the Brillouin-zone centre
    this is a compression of the capacitance matrix, not an invariant block.

    ``grid`` is n (an n**3 grid) or an explicit array of Bloch vectors.
    """
    if J < 2:
        raise ValueError("need at least two branches for a gap")
    ctx = ctx or QuasiPeriodicContext(lattice)
    alphas = lattice.brillouin_grid(grid) if np.isscalar(grid) else np.atleast_2d(np.asarray(grid, dtype=float))
    chosen = sector_branches(scene, J, L, sector)
    branches = [w0 for w0, _ in chosen]
    gamma = float(np.min(np.diff(branches)))
    lam_sup, lam_inf, owner = [], [], []
    bound = 0.0
    bad = []
    for b, (w0, G) in enumerate(chosen):
        per_alpha = []
        for a in alphas:
            try:
                C, _ = regular_capacitance(a, w0, G, scene, L, ctx)
            except (PreconditionError, ThresholdError) as exc:
                bad.append(f"alpha={np.round(a, 6).tolist()} at omega0={w0:.10g}: {exc}")
                continue
            lam = np.linalg.eigvalsh(0.5 * (C + C.conj().T))
            bound = max(bound, float(np.linalg.norm(C, 2)))
            per_alpha.append(lam)
        if bad:
            continue
        per_alpha = np.array(per_alpha)
        lam_sup.extend(per_alpha.max(axis=0))
        lam_inf.extend(per_alpha.min(axis=0))
        owner.extend([b] * per_alpha.shape[1])
    if bad:
        raise PreconditionError("regular case fails on the grid: " + "; ".join(bad))
    lam_sup, lam_inf, owner = np.array(lam_sup), np.array(lam_inf), np.array(owner)
    w = np.asarray(branches)
    top = np.array([lam_sup[owner == b].max() for b in range(J)])
    bottom = np.array([lam_inf[owner == b].min() for b in range(J)])
    thresholds = []
    for b in range(J - 1):
        spread = top[b] - bottom[b + 1]
        thresholds.append((w[b + 1] - w[b]) / spread if spread > 0 else np.inf)
    deltas = np.atleast_1d(np.asarray(delta_list, dtype=float))
    wb = w[owner]
    band_sup = wb[None, :] + deltas[:, None] * lam_sup[None, :]
    band_inf = wb[None, :] + deltas[:, None] * lam_inf[None, :]
    gaps = np.array([[band_sup[i, owner == b].max() < band_inf[i, owner == b + 1].min() for b in range(J - 1)]
                     for i in range(deltas.size)])
    n_grid = int(grid) if np.isscalar(grid) else alphas.shape[0]
    return BandgapReport(w, gamma, bound, owner, lam_sup, lam_inf, float(min(thresholds)),
                         gamma / (2 * bound) if bound else np.inf, deltas, band_sup, band_inf, gaps, n_grid, sector)


# ---------------------------------------------------------------------------
# exterior Dirichlet poles (cases 2 and 3)


def _hermitian_single_layer(alpha, k, scene, L, ctx):
    S, K = assemble_qp_operators(alpha, k, scene, L, ctx)
    return 0.5 * (S + S.conj().T), K


def find_exterior_dirichlet(alpha, k_window, scene: SphereScene, L: int, ctx: QuasiPeriodicContext,
                            scan_points: int = 41) -> list[float]:
    """Wavenumbers in ``k_window`` at which an eigenvalue of the Hermitian
    quasiperiodic single layer crosses zero (exterior Dirichlet eigenvalues)."""
    k0, k1 = k_window
    grid = np.linspace(k0, k1, scan_points)

    def branches(k):
        return np.linalg.eigvalsh(_hermitian_single_layer(alpha, k, scene, L, ctx)[0])

    vals = np.array([branches(k) for k in grid])
    out = []
    for b in range(vals.shape[1]):
        for i in range(scan_points - 1):
            if vals[i, b] * vals[i + 1, b] < 0:
                out.append(brentq(lambda k, b=b: branches(k)[b], grid[i], grid[i + 1], xtol=1e-14, rtol=1e-15))
    return sorted(out)


def tune_case2(alpha, scene: SphereScene, L: int, ctx: QuasiPeriodicContext, k_window=(0.5, 3.0),
               branch: int = 0) -> tuple[SphereScene, float, float]:
    """Background speed making the lowest exterior Dirichlet wavenumber in the
    window coincide with the ``branch``-th distinct Neumann frequency.

    Returns (tuned scene, k_D, omega0).
    """
    poles = find_exterior_dirichlet(alpha, k_window, scene, L, ctx)
    if not poles:
        raise ConvergenceError(f"no exterior Dirichlet eigenvalue in k window {k_window}")
    k_d = poles[0]
    omega0 = neumann_branches(scene, branch + 1, L)[branch]
    return replace(scene, background_speed=omega0 / k_d), float(k_d), float(omega0)


def _derivative(fun, x, h):
    d1 = (fun(x + h) - fun(x - h)) / (2 * h)
    d2 = (fun(x + h / 2) - fun(x - h / 2)) / h
    return (4 * d2 - d1) / 3


def exterior_eigendata(alpha, k_d: float, scene: SphereScene, L: int, ctx: QuasiPeriodicContext,
                       rtol: float = 1e-6, step: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Normal derivatives psi_s of L2-orthonormal exterior Dirichlet modes at k_d.

    The densities phi_s span the near-kernel of S(k_d); u_s = S[phi_s] then
    vanishes on the spheres and its outward flux is (1/2 + K*) phi_s. Green's
    identity for d/dk of S[phi] gives <u_s, u_t> = -(1/2k) psi_t^H S'(k) phi_s,
    which fixes the normalisation. Returns (psi columns, Gram matrix before
    normalisation).
    """
    S, K = _hermitian_single_layer(alpha, k_d, scene, L, ctx)
    w, V = np.linalg.eigh(S)
    null = np.abs(w) <= rtol * np.abs(w).max()
    if not np.any(null):
        raise ConvergenceError(f"single layer is not singular at k={k_d} (smallest |eigenvalue| {np.abs(w).min():.3e})")
    Phi = V[:, null]
    dS = _derivative(lambda k: assemble_qp_operators(alpha, k, scene, L, ctx)[0], k_d, step * k_d)
    Psi = (0.5 * np.eye(S.shape[0]) + K) @ Phi
    gram = -(Psi.conj().T @ dS @ Phi) / (2 * k_d)
    gram = 0.5 * (gram + gram.conj().T)
    ev, U = np.linalg.eigh(gram)
    if np.any(ev <= 0):
        raise ConvergenceError("exterior mode Gram matrix is not positive definite")
    inv_sqrt = U @ np.diag(ev**-0.5) @ U.conj().T
    return Psi @ inv_sqrt, gram


def coupling_matrix(exterior_fluxes, traces) -> np.ndarray:
    """Gamma[s, p] = <g_p, psi_s> with the conjugate on psi."""
    return np.asarray(exterior_fluxes).conj().T @ np.asarray(traces)


@dataclass
class ResidueConnection:
    numerical: np.ndarray
    formula: np.ndarray
    relative_error: float
    k_d: float
    gamma: np.ndarray


def qp_residue_connection(alpha, omega0: float, scene: SphereScene, L: int, ctx: QuasiPeriodicContext,
                          steps=(2e-3, 1e-3, 5e-4), pole_tol: float = 1e-8) -> ResidueConnection:
    """Residue of omega -> C^reg(omega) at a tuned pole against the singular
    capacitance matrix built from normalised exterior modes.

    The residue is extrapolated from the symmetric differences
    h (C(omega0 + h) - C(omega0 - h)) / 2, which cancel the regular part to
    second order, by Richardson extrapolation in h^2.
    """
    alpha = np.asarray(alpha, dtype=float)
    v = scene.background_speed
    vb = _uniform_interior_speed(scene)
    k_guess = omega0 / v
    poles = find_exterior_dirichlet(alpha, (k_guess * (1 - 1e-3), k_guess * (1 + 1e-3)), scene, L, ctx, scan_points=5)
    if not poles or min(abs(p - k_guess) for p in poles) > pole_tol * k_guess:
        raise ConvergenceError(
            f"no exterior Dirichlet eigenvalue within {pole_tol:g} of k={k_guess:.15g} (found {poles})"
        )
    k_d = min(poles, key=lambda p: abs(p - k_guess))
    G = neumann_modes(scene, omega0, L).traces

    def creg(w):
        lam, _ = exterior_qp_dtn_matrix(alpha, w, scene, L, ctx, cond_limit=np.inf)
        return -(vb * vb / (2 * omega0)) * (G.conj().T @ lam @ G) * (omega0 / w)

    table = [[h * omega0 * (creg(omega0 * (1 + h)) - creg(omega0 * (1 - h))) / 2 for h in steps]]
    for level in range(1, len(steps)):
        prev = table[-1]
        fac = (steps[0] / steps[1]) ** (2 * level)
        table.append([(fac * prev[i + 1] - prev[i]) / (fac - 1) for i in range(len(prev) - 1)])
    numerical = table[-1][0]
    Psi, _ = exterior_eigendata(alpha, k_d, scene, L, ctx)
    gamma = coupling_matrix(Psi, G)
    formula = capmat_case2(gamma, omega0, v, vb).case2
    err = float(np.linalg.norm(numerical - formula) / np.linalg.norm(formula))
    return ResidueConnection(numerical, formula, err, float(k_d), gamma)


# ---------------------------------------------------------------------------
# honeycomb Dirac cone


def honeycomb_dimer(radius: float = 0.15, a: float = 1.0, interior_speed: float = 1.0,
                    background_speed: float = 1.0) -> tuple[SphereScene, Lattice3D]:
    """Two equal spheres at the A and B sites of a hexagonal-prism cell."""
    lat = Lattice3D.hexagonal_prism(a, a)
    l1, l2 = lat.generators[0], lat.generators[1]
    centers = np.array([(l1 + l2) / 3, 2 * (l1 + l2) / 3])
    return SphereScene(centers, [radius, radius], [interior_speed] * 2, [0.0, 0.0], background_speed), lat


def check_honeycomb_symmetry(scene: SphereScene, lattice: Lattice3D):
    """Raise unless lattice and cell are invariant under the rotation by
    2 pi / 3 about z and under inversion through the origin."""
    ops = {"rotation by 2 pi/3": rotation_about_z(2 * np.pi / 3), "inversion": -np.eye(3)}
    for name, Q in ops.items():
        for l in lattice.generators:
            if not lattice.contains(Q @ l, 1e-9):
                raise PreconditionError(f"lattice is not invariant under {name}")
        for i in range(scene.count):
            image = Q @ scene.centers[i]
            partners = [
                j for j in range(scene.count)
                if lattice.contains(image - scene.centers[j], 1e-8)
                and abs(scene.radii[j] - scene.radii[i]) <= 1e-12 * scene.radii[i]
                and scene.interior_speeds[j] == scene.interior_speeds[i]
            ]
            if not partners:
                raise PreconditionError(f"cell is not invariant under {name}: sphere {i} has no partner")


@dataclass
class HoneycombCone:
    K: np.ndarray
    omega0: float
    c_K: float
    v_K: float
    fit_r2: float
    degeneracy_defect: float
    xi: np.ndarray
    eigenvalues: np.ndarray  # (n_xi, 2)
    trace_offsets: np.ndarray  # tr C(K + xi) / 2 - c_K
    c_inf: complex
    mu: float
    kappa: float
    rho: float

    def to_dict(self) -> dict:
        return {
            "K": self.K.tolist(),
            "omega0": self.omega0,
            "c_K": self.c_K,
            "v_K": self.v_K,
            "fit_r2": self.fit_r2,
            "degeneracy_defect": self.degeneracy_defect,
            "xi": self.xi.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "trace_offsets": self.trace_offsets.tolist(),
            "c_inf": [float(np.real(self.c_inf)), float(np.imag(self.c_inf))],
            "mu": self.mu,
            "kappa": self.kappa,
            "rho": self.rho,
        }


def honeycomb_cone(scene: SphereScene, omega0: float, xi_samples, L: int, ctx: QuasiPeriodicContext,
                   direction=(1.0, 0.0, 0.0)) -> HoneycombCone:
    """2x2 capacitance matrices near the K point of a honeycomb dimer.

    ``xi_samples`` holds offsets from K: magnitudes (taken along
    ``direction``) or in-plane vectors. The eigenvalue splitting is fitted
    by 2 v_K |xi| through the origin.
    """
    lattice = ctx.lattice
    check_honeycomb_symmetry(scene, lattice)
    K = lattice.high_symmetry_point("K")
    xi = np.asarray(xi_samples, dtype=float)
    if xi.ndim == 1:
        d = np.asarray(direction, dtype=float)
        xi = xi[:, None] * (d / np.linalg.norm(d))[None, :]
    capK = capmat_case1(K, omega0, scene, L, ctx)
    if capK.case1.shape != (2, 2):
        raise PreconditionError(f"expected one simple Neumann mode per sphere, got {capK.case1.shape[0]} modes")
    CK = capK.case1
    lamK = np.linalg.eigvalsh(0.5 * (CK + CK.conj().T))
    c_K = float(np.real(np.trace(CK)) / 2)
    defect = float(abs(lamK[1] - lamK[0]) / max(abs(c_K), np.linalg.norm(CK, 2)))
    eig, offs = [], []
    for x in xi:
        C = capmat_case1(K + x, omega0, scene, L, ctx).case1
        eig.append(np.linalg.eigvalsh(0.5 * (C + C.conj().T)))
        offs.append(float(np.real(np.trace(C)) / 2 - c_K))
    eig = np.array(eig)
    size = np.linalg.norm(xi, axis=1)
    gap = eig[:, 1] - eig[:, 0]
    slope = float(size @ gap / (size @ size))
    ss_res = float(np.sum((gap - slope * size) ** 2))
    ss_tot = float(np.sum((gap - gap.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    j, ell, _, beta = resonant_channels(scene, omega0, L)[0]
    r = scene.background_speed / scene.interior_speeds[j]
    c_inf = c_infinity(beta * beta, r, scene.interior_speeds[j])
    rho = float(scene.radii[j] / np.linalg.norm(lattice.generators[0]))
    return HoneycombCone(K, float(omega0), c_K, slope / 2, r2, defect, xi, eig, np.array(offs),
                         c_inf, float(beta * beta), float(beta / r), rho)


# ---------------------------------------------------------------------------
# small-radius limit


def _neumann_degree(beta: float, rtol: float = 1e-9, ell_max: int = 30) -> int:
    for ell in range(ell_max + 1):
        zeros = neumann_zeros(ell, max(1, int(beta / np.pi) + 2))
        if np.any(np.abs(zeros - beta) <= rtol * beta):
            return ell
    raise PreconditionError(f"sqrt(mu)={beta} is not a Neumann frequency of the unit ball")


def c_infinity(mu: float, r: float, v_b: float = 1.0, harmonic: int | None = None,
               method: str = "analytic", nodes: int = 200) -> complex:
    """-(v_b / 2 sqrt(mu)) times the boundary pairing of the unit-ball Neumann
    mode U with the normal derivative of the outgoing exterior solution W at
    kappa = sqrt(mu) / r that equals U on the sphere.

    Branches with ell > 0 are degenerate and need an explicit ``harmonic`` m.
    ``method="quadrature"`` solves for the single-layer density with
    Funk-Hecke quadrature symbols and integrates the pairing on a sphere rule.
    """
    beta = float(np.sqrt(mu))
    ell = _neumann_degree(beta)
    if ell > 0 and harmonic is None:
        raise PreconditionError(f"the Neumann eigenvalue {mu} has multiplicity {2 * ell + 1}; pass harmonic=m")
    m = 0 if harmonic is None else int(harmonic)
    if abs(m) > ell:
        raise ValueError("|m| must not exceed ell")
    kappa = beta / r
    trace = ball_mode_normalisation(ell, beta, 1.0) * sph_bessel_all("j", ell, beta)[0][ell].real
    pref = -v_b / (2 * beta)
    if method == "analytic":
        h, dh = sph_bessel_all("h1", ell, kappa)
        return complex(pref * trace * trace * np.conj(kappa * dh[ell] / h[ell]))
    if method != "quadrature":
        raise ValueError("method must be 'analytic' or 'quadrature'")
    s, kstar = self_symbols_by_quadrature(kappa, 1.0, ell + 1, nodes)
    density = trace / s[ell]
    flux = (0.5 + kstar[ell]) * density
    quad = sphere_quadrature(2 * ell + 2)
    Y = quad.harmonics(ell + 1)[harmonic_index(ell, m)]
    pairing = np.sum(quad.weights * (trace * Y) * np.conj(flux * Y))
    return complex(pref * pairing)


# ---------------------------------------------------------------------------
# Bloch modes


def _image_owner(scene: SphereScene, lattice: Lattice3D, points: np.ndarray):
    """(sphere, lattice shift) of the image sphere containing each point, or
    (-1, 0); rejects points within 1e-6 R of any image boundary."""
    owner = np.full(points.shape[0], -1)
    shift = np.zeros_like(points)
    for j in range(scene.count):
        R = scene.radii[j]
        for idx, x in enumerate(points):
            m, _ = lattice.vectors_within(R * (1 + 1e-6) + 1e-12, center=x - scene.centers[j])
            for mv in m:
                r = np.linalg.norm(x - scene.centers[j] - mv)
                if abs(r - R) <= 1e-6 * R:
                    raise NearBoundaryError(f"point {x} lies {abs(r - R):.3e} from an image of sphere {j}")
                if r < R:
                    owner[idx] = j
                    shift[idx] = mv
    return owner, shift


def qp_single_layer(density, alpha, k: complex, scene: SphereScene, L: int, ctx: QuasiPeriodicContext, points) -> np.ndarray:
    """alpha-quasiperiodic single layer of a density (boundary-basis
    coefficients) at points off the spheres.

    Images close to a point use the exact free-space sphere potential minus
    a sphere-quadrature of the smooth Ewald difference; the rest comes from
    the damped spectral sum.
    """
    alpha = np.asarray(alpha, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    phi = np.asarray(density, dtype=complex)
    eta = ctx.split_for(scene)
    n = L * L
    N = scene.count
    ell = degree_of_index(L)
    radius = ctx.reciprocal_radius(k, eta)
    data = _spectral_factors(ctx, alpha, scene, L, eta, radius)
    p = data["p"]
    p2 = data["norm"] ** 2
    weight = np.exp((k * k - p2) / (4 * eta * eta)) / (p2 - k * k)
    ifac = (1j) ** ell
    proj = np.zeros(p2.size, dtype=complex)
    for j in range(N):
        J, _, phase = data["spheres"][j]
        U = J * phase[:, None] * (4 * np.pi * scene.radii[j] * ifac)
        proj += np.conj(U) @ phi[j * n : (j + 1) * n]
    wp = weight * proj
    out = np.zeros(pts.shape[0], dtype=complex)
    for start in range(0, pts.shape[0], 32):
        out[start : start + 32] = -(np.exp(1j * pts[start : start + 32] @ p.T) @ wp) / ctx.lattice.volume
    rcut = ctx.real_radius(k, eta)
    for j in range(N):
        R = scene.radii[j]
        coeff = phi[j * n : (j + 1) * n]
        deg = int(min(L + 20 + 4 * eta * R + 2 * abs(k) * R, 120))
        quad = sphere_quadrature(deg)
        nodes = scene.centers[j] + R * quad.points
        dens = (coeff @ quad.harmonics(L)) * R * quad.weights
        for idx, x in enumerate(pts):
            m, _ = lattice_near(ctx.lattice, x - scene.centers[j], rcut + R)
            for mv in m:
                y = x - mv
                free = _sphere_potential(k, scene.centers[j], R, coeff, L, y[None, :])[0]
                r = np.linalg.norm(y - nodes, axis=1)
                rg, _ = _ewald_parts(r, k, eta)
                fr, _ = _free_parts(r, k)
                smooth = np.sum(np.where(r > 0, (rg - fr) / np.where(r > 0, r, 1.0), 0.0) * dens)
                out[idx] += np.exp(1j * float(alpha @ mv)) * (free - smooth)
    return out


def lattice_near(lattice: Lattice3D, x, radius: float):
    return lattice.vectors_within(radius, center=x)


def evaluate_bloch_mode(coefficients, alpha, omega: float, scene: SphereScene, L: int, ctx: QuasiPeriodicContext,
                        points, omega0: float | None = None) -> np.ndarray:
    """Leading-order Bloch mode sum_p a_p u_p: inside each (image) sphere the
    interior solution at omega / v_b with the Neumann-mode trace as boundary
    value, outside the quasiperiodic single layer at omega / v with the same
    boundary value."""
    alpha = np.asarray(alpha, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    omega0 = omega if omega0 is None else omega0
    modes = neumann_modes(scene, omega0, L)
    a = np.asarray(coefficients, dtype=complex)
    g = modes.traces @ a
    out = np.zeros(pts.shape[0], dtype=complex)
    if not np.any(a):
        return out
    owner, shift = _image_owner(scene, ctx.lattice, pts)
    n = L * L
    ell = degree_of_index(L)
    for j in range(scene.count):
        sel = owner == j
        if not np.any(sel):
            continue
        R = scene.radii[j]
        kb = omega / scene.interior_speeds[j]
        local = pts[sel] - shift[sel] - scene.centers[j]
        rr = np.linalg.norm(local, axis=1)
        jr, _ = sph_bessel_all("j", L - 1, kb * rr)
        jR, _ = sph_bessel_all("j", L - 1, kb * R)
        radial = jr[ell] / jR[ell][:, None]
        Y = real_harmonics_xyz(L, local)
        vals = np.einsum("a,ap->p", g[j * n : (j + 1) * n] / R, radial * Y)
        out[sel] = np.exp(1j * shift[sel] @ alpha) * vals
    outside = owner < 0
    if np.any(outside):
        k = omega / scene.background_speed
        S, _ = assemble_qp_operators(alpha, k, scene, L, ctx)
        phi = np.linalg.solve(S, g)
        out[outside] = qp_single_layer(phi, alpha, k, scene, L, ctx, pts[outside])
    return out
