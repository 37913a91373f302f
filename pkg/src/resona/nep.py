"""Determinant scans, Muller iteration and resonance clusters of det A(omega)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.linalg import lu_factor
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .bie3d import SphereScene, assemble_A, resonant_channels


class ConvergenceError(RuntimeError):
    """Raised when an iteration does not converge; carries the iterate trace."""

    def __init__(self, message: str, trace: Sequence[complex] = ()):
        super().__init__(message)
        self.trace = list(trace)


@dataclass
class ResonanceSet:
    values: np.ndarray
    residual_norms: np.ndarray
    multiplicities: list[int] = field(default_factory=list)
    iterations: list[int] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)


# ---------------------------------------------------------------------------
# determinants


def log_det(matrix: np.ndarray) -> tuple[complex, float]:
    """Phase and log|det| through a row-equilibrated pivoted LU factorisation."""
    M = np.asarray(matrix, dtype=complex)
    if M.size == 0:
        return 1.0 + 0j, 0.0
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    scale = np.abs(M).max(axis=1)
    if np.any(scale == 0):
        return 0j, -np.inf
    lu, piv = lu_factor(M / scale[:, None], check_finite=True)
    d = np.diag(lu)
    if np.any(d == 0):
        return 0j, -np.inf
    swaps = np.count_nonzero(piv != np.arange(piv.size))
    phase = (-1.0) ** swaps * np.prod(d / np.abs(d))
    return complex(phase), float(np.sum(np.log(np.abs(d))) + np.sum(np.log(scale)))


def log_abs_det(matrix: np.ndarray) -> float:
    return log_det(matrix)[1]


def det_scan(matrix_builder: Callable[[complex], np.ndarray], grid: Iterable[complex]) -> list[tuple[complex, float]]:
    """log|det| of ``matrix_builder(omega)`` at each grid point.

    A failed factorisation is recorded as NaN and the scan continues.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("grid must be nonempty")
    out = []
    for w in grid:
        try:
            value = log_abs_det(matrix_builder(w))
        except (np.linalg.LinAlgError, ValueError) as exc:
            warnings.warn(f"factorisation failed at omega={w}: {exc}", RuntimeWarning, stacklevel=2)
            value = float("nan")
        out.append((w, value))
    return out


def scan_minima(scan: Sequence[tuple[complex, float]]) -> list[complex]:
    """Interior local minima of a scan, deepest first."""
    w = np.array([p[0] for p in scan])
    v = np.array([p[1] for p in scan], dtype=float)
    idx = [i for i in range(1, len(v) - 1) if v[i] <= v[i - 1] and v[i] <= v[i + 1] and np.isfinite(v[i])]
    idx.sort(key=lambda i: v[i])
    return [complex(w[i]) for i in idx]


# ---------------------------------------------------------------------------
# Muller


@dataclass
class MullerResult:
    root: complex
    iterations: int
    residual: float
    trace: list[complex]


def muller_root(
    f: Callable[[complex], complex],
    seeds: Sequence[complex],
    tol: float = 1e-12,
    ftol: float = 0.0,
    max_iter: int = 60,
    deflate: Sequence[complex] = (),
) -> MullerResult:
    """Muller's method from three distinct seeds.

    Stops when the step falls below ``tol * max(1, |z|)`` or |f| below
    ``ftol``. Roots listed in ``deflate`` are divided out of ``f``.
    """
    deflate = [complex(r) for r in deflate]

    def g(z):
        val = complex(f(z))
        for r in deflate:
            val /= z - r
        return val

    x0, x1, x2 = (complex(s) for s in seeds)
    if len({x0, x1, x2}) < 3:
        raise ValueError("Muller needs three distinct seeds")
    f0, f1, f2 = g(x0), g(x1), g(x2)
    trace = [x0, x1, x2]
    for it in range(1, max_iter + 1):
        if f2 == 0:
            return MullerResult(x2, it, 0.0, trace)
        h1, h2 = x1 - x0, x2 - x1
        d1, d2 = (f1 - f0) / h1, (f2 - f1) / h2
        a = (d2 - d1) / (h2 + h1)
        b = a * h2 + d2
        disc = np.sqrt(b * b - 4 * a * f2 + 0j)
        den = b + disc if abs(b + disc) >= abs(b - disc) else b - disc
        step = -2 * f2 / den if den != 0 else 1e-3 * (1 + abs(x2))
        if not np.isfinite(step):
            raise ConvergenceError("Muller produced a non-finite step", trace)
        x3 = x2 + step
        f3 = g(x3)
        trace.append(x3)
        x0, x1, x2, f0, f1, f2 = x1, x2, x3, f1, f2, f3
        if abs(step) <= tol * max(1.0, abs(x3)) or abs(f3) <= ftol:
            return MullerResult(x3, it, abs(f(x3)) if deflate else abs(f3), trace)
    raise ConvergenceError(f"Muller did not converge in {max_iter} iterations", trace)


def find_roots(
    f: Callable[[complex], complex],
    seed_points: Sequence[complex],
    count: int | None,
    inside: Callable[[complex], bool],
    spread: float = 1e-4,
    tol: float = 1e-12,
    distinct: float = 1e-10,
) -> list[MullerResult]:
    """Successive deflated Muller runs from each seed point.

    Each seed point z spawns seeds z(1 -+ spread) -+ i spread. Converged roots
    are polished on the undeflated function. Stops after ``count`` roots.
    """
    roots: list[MullerResult] = []
    found: list[complex] = []
    for z in seed_points:
        while count is None or len(found) < count:
            seeds = (z * (1 - spread) - 1j * spread, z * (1 + spread) + 1j * spread, z - 1j * spread * 0.5)
            try:
                res = muller_root(f, seeds, tol=tol, deflate=found)
            except ConvergenceError:
                break
            if not inside(res.root):
                break
            try:
                eps = max(abs(res.root), 1.0) * 1e-9
                pol = muller_root(f, (res.root - eps, res.root + eps, res.root + 1j * eps), tol=tol)
                root = pol.root if abs(pol.root - res.root) < 1e-6 * max(1.0, abs(res.root)) else res.root
            except ConvergenceError:
                root = res.root
            if any(abs(root - r) <= distinct * max(1.0, abs(r)) for r in found):
                # polishing slid onto a known root: keep the deflated estimate
                root = res.root
                if any(abs(root - r) <= distinct * max(1.0, abs(r)) for r in found):
                    break
            found.append(root)
            roots.append(MullerResult(root, res.iterations, abs(f(root)), res.trace))
        if count is not None and len(found) >= count:
            break
    return roots


# ---------------------------------------------------------------------------
# resonance clusters


def decoupled_blocks(matrices: Sequence[np.ndarray], tol: float = 1e-13) -> list[np.ndarray]:
    """Index sets of the diagonal blocks into which every matrix decouples.

    Entries below ``tol`` times the largest entry are treated as zero; the
    determinant then factorises over the connected components of the
    sparsity graph.
    """
    pattern = None
    for M in matrices:
        mask = np.abs(M) > tol * np.abs(M).max()
        pattern = mask if pattern is None else pattern | mask
    pattern = pattern | pattern.T
    ncomp, labels = connected_components(csr_matrix(pattern), directed=False)
    return [np.nonzero(labels == c)[0] for c in range(ncomp)]


def _group_multiplicities(values: np.ndarray, tol: float) -> list[int]:
    mult = []
    for v in values:
        mult.append(int(np.sum(np.abs(values - v) <= tol * max(1.0, abs(v)))))
    return mult


def find_resonance_cluster(
    omega0: float,
    delta: complex,
    scene: SphereScene,
    L: int,
    radius: float | None = None,
    interior: str = "self",
    scan_points: int = 41,
    tol: float = 1e-12,
) -> ResonanceSet:
    """All roots of det A_L(omega, delta) within ``radius`` of omega0.

    The determinant is factorised over decoupled diagonal blocks of A (for
    example the azimuthal orders of an axis-aligned dimer), so symmetry-forced
    repeated roots are found as simple roots of separate factors. Within each
    factor roots are located by deflated Muller runs seeded from minima of a
    real-axis scan.
    """
    delta = complex(delta)
    if radius is None:
        radius = 10 * abs(delta) * omega0 + 1e-3
    sc = scene.with_delta(delta)
    n = L * L
    half = sc.count * n
    cache: dict[complex, np.ndarray] = {}

    def build(w: complex) -> np.ndarray:
        w = complex(w)
        if w not in cache:
            if len(cache) > 256:
                cache.clear()
            cache[w] = assemble_A(w, sc, L, interior).entries
        return cache[w]

    probe = build(omega0 + 0.37 * radius - 0.21j * radius)
    blocks = decoupled_blocks([build(omega0), probe])
    channels = resonant_channels(sc, omega0, L)
    resonant_rows = []
    for j, ell, _, _ in channels:
        for m in range(-ell, ell + 1):
            resonant_rows.append(j * n + ell * ell + ell + m)
    expected_total = len(resonant_rows)
    notes = []
    if not channels:
        notes.append(f"omega0={omega0} is not a Neumann frequency of any resonator")

    counts = []
    for blk in blocks:
        c = sum(1 for r in resonant_rows if r in set(blk.tolist()))
        counts.append(c if channels else None)

    edge = omega0 + radius
    grid = omega0 + np.linspace(-radius, radius, scan_points)
    inside = lambda z: abs(z - omega0) <= radius  # noqa: E731
    values, residuals, iterations = [], [], []
    for blk, count in zip(blocks, counts):
        if count == 0:
            continue
        sub = np.ix_(blk, blk)
        _, ref = log_det(build(edge)[sub])

        def f(w, sub=sub, ref=ref):
            phase, logabs = log_det(build(w)[sub])
            return phase * np.exp(logabs - ref)

        scan = [(w, log_det(build(w)[sub])[1]) for w in grid]
        seeds = scan_minima(scan)
        seeds += [omega0 - 0.1j * radius, omega0 + 0.5 * radius - 0.05j * radius, omega0 - 0.5 * radius - 0.05j * radius]
        if delta == 0:
            seeds = [omega0] + seeds
        spread = min(1e-4, 0.05 * radius)
        for res in find_roots(f, seeds, count, inside, spread=spread / max(1.0, abs(omega0)), tol=tol):
            values.append(res.root)
            residuals.append(res.residual)
            iterations.append(res.iterations)
    values = np.array(values, dtype=complex)
    order = np.lexsort((values.imag, values.real)) if values.size else np.array([], dtype=int)
    values = values[order]
    residuals = np.array(residuals)[order] if values.size else np.array([])
    iterations = [iterations[i] for i in order]
    if channels and values.size != expected_total:
        msg = f"found {values.size} roots but the Neumann multiplicity at omega0 is {expected_total}"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    mult = _group_multiplicities(values, 1e-8)
    return ResonanceSet(values, residuals, mult, iterations, notes)


def hausdorff(a: Iterable[complex], b: Iterable[complex]) -> float:
    """Hausdorff distance between two finite sets of complex numbers."""
    a = np.asarray(list(a), dtype=complex)
    b = np.asarray(list(b), dtype=complex)
    if a.size == 0 or b.size == 0:
        raise ValueError("Hausdorff distance needs nonempty sets")
    d = np.abs(a[:, None] - b[None, :])
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))
