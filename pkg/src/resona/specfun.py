"""Spherical Bessel functions, Neumann zeros of the ball, real harmonics and
sphere quadrature."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.optimize import brentq

KINDS = ("j", "y", "h1")


class HarmonicIndex(NamedTuple):
    ell: int
    m: int

    def flat(self) -> int:
        return harmonic_index(self.ell, self.m)


def harmonic_index(ell: int, m: int) -> int:
    """Position of (ell, m) in the flattened basis ordered by degree then order."""
    if ell < 0 or abs(m) > ell:
        raise ValueError(f"invalid harmonic index ({ell}, {m})")
    return ell * ell + ell + m


def harmonic_labels(L: int) -> list[HarmonicIndex]:
    """All (ell, m) with ell < L, in flattened order (L**2 entries)."""
    return [HarmonicIndex(ell, m) for ell in range(L) for m in range(-ell, ell + 1)]


def degree_of_index(L: int) -> np.ndarray:
    return np.array([lab.ell for lab in harmonic_labels(L)], dtype=int)


# ---------------------------------------------------------------------------
# spherical Bessel and Hankel functions


def _miller_start(L: int, zmax: float) -> int:
    return int(max(L, zmax) + 30 + 4.0 * zmax ** (1.0 / 3.0))


def _j_table(L: int, z: np.ndarray) -> np.ndarray:
    """j_0..j_{L+1} at every z by normalised downward recurrence."""
    out = np.zeros((L + 2,) + z.shape, dtype=complex)
    zero = z == 0
    zs = np.where(zero, 1.0, z)
    start = _miller_start(L + 1, float(np.max(np.abs(z), initial=0.0)))
    f_next = np.zeros(z.shape, dtype=complex)
    f_cur = np.full(z.shape, 1e-300, dtype=complex)
    for ell in range(start, 0, -1):
        f_prev = (2 * ell + 1) / zs * f_cur - f_next
        f_next, f_cur = f_cur, f_prev
        if ell - 1 <= L + 1:
            out[ell - 1] = f_cur
        big = np.abs(f_cur) > 1e200
        if np.any(big):
            f_cur = np.where(big, f_cur * 1e-200, f_cur)
            f_next = np.where(big, f_next * 1e-200, f_next)
            out[:, big] *= 1e-200
    # out[0] holds the unnormalised j_0 and out[1] the unnormalised j_1
    with np.errstate(all="ignore"):
        j0 = np.sin(zs) / zs
        j1 = np.sin(zs) / zs**2 - np.cos(zs) / zs
    use0 = (np.abs(j0) >= np.abs(j1)) & (out[0] != 0) | (out[1] == 0)
    with np.errstate(all="ignore"):
        scale = np.where(use0, j0 / out[0], j1 / out[1])
    out *= scale
    if np.any(zero):
        out[:, zero] = 0.0
        out[0, zero] = 1.0
    return out


def _upward_table(kind: str, L: int, z: np.ndarray) -> np.ndarray:
    out = np.empty((L + 2,) + z.shape, dtype=complex)
    if kind == "y":
        out[0] = -np.cos(z) / z
        out[1] = -np.cos(z) / z**2 - np.sin(z) / z
    else:
        e = np.exp(1j * z)
        out[0] = -1j * e / z
        out[1] = -e * (z + 1j) / z**2
    for ell in range(1, L + 1):
        out[ell + 1] = (2 * ell + 1) / z * out[ell] - out[ell - 1]
    return out


def sph_bessel_all(kind: str, L: int, z) -> tuple[np.ndarray, np.ndarray]:
    """Values and derivatives for degrees 0..L at every point of ``z``.

    Returns two arrays of shape ``(L + 1,) + z.shape``.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    if L < 0:
        raise ValueError("L must be nonnegative")
    z = np.asarray(z, dtype=complex)
    if kind == "j":
        tab = _j_table(L, z)
    else:
        if np.any(z == 0):
            raise ValueError(f"spherical Bessel kind {kind!r} is singular at z = 0")
        with np.errstate(over="ignore", invalid="ignore"):
            tab = _upward_table(kind, L, z)
        if not np.all(np.isfinite(tab[: L + 1])):
            raise OverflowError(f"{kind}_ell overflows for ell <= {L} at the given z")
    val = tab[: L + 1]
    der = np.empty_like(val)
    der[0] = -tab[1]
    if L >= 1:
        zs = np.where(z == 0, 1.0, z)
        ells = np.arange(1, L + 1).reshape((-1,) + (1,) * z.ndim)
        der[1:] = tab[: L] - (ells + 1) / zs * tab[1 : L + 1]
        if kind == "j" and np.any(z == 0):
            der[1:, z == 0] = 0.0
            der[1, z == 0] = 1.0 / 3.0
    return val, der


def sph_bessel(kind: str, ell: int, z) -> tuple[complex, complex]:
    """Value and derivative of j_ell, y_ell or h1_ell at a single complex point."""
    val, der = sph_bessel_all(kind, ell, np.asarray(z, dtype=complex))
    return complex(val[ell]), complex(der[ell])


# ---------------------------------------------------------------------------
# Neumann spectrum of the ball


class NeumannFrequency(NamedTuple):
    ell: int
    n: int
    omega: float
    multiplicity: int


def _djl(ell: int, x: float) -> float:
    return float(sph_bessel_all("j", ell, np.array(x))[1][ell].real)


def neumann_zeros(ell: int, n_max: int) -> np.ndarray:
    """First ``n_max`` positive zeros of j_ell'.

    Sign changes are bracketed on a pi/8 grid and then refined to full
    double precision.
    """
    if ell < 0 or n_max < 1:
        raise ValueError("need ell >= 0 and n_max >= 1")
    step = np.pi / 8
    zeros: list[float] = []
    a = step
    fa = _djl(ell, a)
    while len(zeros) < n_max:
        b = a + step
        fb = _djl(ell, b)
        if fa == 0.0:
            zeros.append(a)
        elif fa * fb < 0:
            zeros.append(brentq(lambda x: _djl(ell, x), a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200))
        a, fa = b, fb
    return np.array(zeros[:n_max])


def neumann_ball_spectrum(radius: float, ell_max: int, n_max: int) -> list[NeumannFrequency]:
    """Nonzero Neumann eigenfrequencies beta_{ell,n}/radius of a ball (unit speed),
    sorted ascending, each tagged with its multiplicity 2*ell + 1."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if ell_max < 0 or n_max < 1:
        raise ValueError("need ell_max >= 0 and n_max >= 1")
    out = []
    for ell in range(ell_max + 1):
        for n, beta in enumerate(neumann_zeros(ell, n_max), start=1):
            out.append(NeumannFrequency(ell, n, beta / radius, 2 * ell + 1))
    out.sort(key=lambda f: f.omega)
    return out


def lowest_neumann_frequencies(radius: float, count: int) -> list[NeumannFrequency]:
    """The ``count`` lowest distinct Neumann frequencies of a ball."""
    ell_max = count + 2
    spec = neumann_ball_spectrum(radius, ell_max, count)
    return spec[:count]


def ball_mode_normalisation(ell: int, beta: float, radius: float = 1.0) -> float:
    """Constant c making c * j_ell(beta r / R) Y_lm unit-norm in L2 of the ball."""
    x, w = np.polynomial.legendre.leggauss(max(40, int(2 * beta) + 40))
    s = 0.5 * (x + 1.0)
    jl = sph_bessel_all("j", ell, s * beta)[0][ell].real
    integral = 0.5 * np.sum(w * jl**2 * s**2)
    return 1.0 / np.sqrt(radius**3 * integral)


# ---------------------------------------------------------------------------
# real spherical harmonics


def _legendre_table(L: int, x: np.ndarray) -> np.ndarray:
    """Orthonormal associated Legendre factors p[ell, m] (m >= 0, no phase),
    normalised so that p * exp(i m phi) is unit-norm on the sphere."""
    x = np.asarray(x, dtype=float)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    p = np.zeros((L, L) + x.shape)
    if L == 0:
        return p
    p[0, 0] = 1.0 / np.sqrt(4 * np.pi)
    for m in range(1, L):
        p[m, m] = np.sqrt((2 * m + 1) / (2.0 * m)) * s * p[m - 1, m - 1]
    for m in range(0, L - 1):
        p[m + 1, m] = np.sqrt(2 * m + 3.0) * x * p[m, m]
    for m in range(0, L):
        for ell in range(m + 2, L):
            a = np.sqrt((4.0 * ell * ell - 1) / (ell * ell - m * m))
            b = np.sqrt(((ell - 1.0) ** 2 - m * m) / (4.0 * (ell - 1) ** 2 - 1))
            p[ell, m] = a * (x * p[ell - 1, m] - b * p[ell - 2, m])
    return p


def real_harmonics(L: int, theta, phi) -> np.ndarray:
    """All real orthonormal harmonics with ell < L; shape ``(L**2,) + theta.shape``."""
    theta = np.asarray(theta, dtype=float)
    phi = np.broadcast_to(np.asarray(phi, dtype=float), theta.shape)
    p = _legendre_table(L, np.cos(theta))
    out = np.empty((L * L,) + theta.shape)
    r2 = np.sqrt(2.0)
    for ell in range(L):
        base = ell * ell + ell
        out[base] = p[ell, 0]
        for m in range(1, ell + 1):
            out[base + m] = r2 * p[ell, m] * np.cos(m * phi)
            out[base - m] = r2 * p[ell, m] * np.sin(m * phi)
    return out


def real_harmonics_xyz(L: int, directions) -> np.ndarray:
    """Real harmonics at unit (or nonzero) direction vectors of shape (..., 3)."""
    d = np.asarray(directions, dtype=float)
    r = np.linalg.norm(d, axis=-1)
    r = np.where(r == 0, 1.0, r)
    cos_t = np.clip(d[..., 2] / r, -1.0, 1.0)
    theta = np.arccos(cos_t)
    phi = np.arctan2(d[..., 1], d[..., 0])
    return real_harmonics(L, theta, phi)


def sph_harmonic(idx: HarmonicIndex | tuple[int, int], theta, phi):
    """Real orthonormal spherical harmonic Y_ell^m at (theta, phi)."""
    ell, m = idx
    if abs(m) > ell:
        raise ValueError(f"|m| must not exceed ell, got ({ell}, {m})")
    if np.any(np.asarray(theta) < 0) or np.any(np.asarray(theta) > np.pi):
        raise ValueError("theta must lie in [0, pi]")
    vals = real_harmonics(ell + 1, theta, phi)[harmonic_index(ell, m)]
    return vals if np.ndim(vals) else float(vals)


# ---------------------------------------------------------------------------
# sphere quadrature


@dataclass(frozen=True)
class SphereQuadrature:
    theta: np.ndarray
    phi: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def points(self) -> np.ndarray:
        st = np.sin(self.theta)
        return np.stack([st * np.cos(self.phi), st * np.sin(self.phi), np.cos(self.theta)], axis=-1)

    @property
    def size(self) -> int:
        return self.weights.size

    def harmonics(self, L: int) -> np.ndarray:
        return real_harmonics(L, self.theta, self.phi)


def sphere_quadrature(exactness_degree: int) -> SphereQuadrature:
    """Gauss-Legendre in cos(theta) times the trapezoidal rule in phi.

    Exact for polynomials on the sphere of total degree up to
    ``exactness_degree``.
    """
    p = int(exactness_degree)
    if p < 0:
        raise ValueError("exactness degree must be nonnegative")
    n_theta = p // 2 + 1
    n_phi = p + 1
    x, w = np.polynomial.legendre.leggauss(n_theta)
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    theta = np.arccos(x)
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    ww = np.outer(w, np.full(n_phi, 2 * np.pi / n_phi))
    return SphereQuadrature(tt.ravel(), pp.ravel(), ww.ravel(), p)
