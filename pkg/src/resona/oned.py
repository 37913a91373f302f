"""One-dimensional resonator chains: exterior DtN matrix, ODE capacitance
matrix, Fabry-Perot blocks and an exact transfer-matrix oracle."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .nep import ConvergenceError, ResonanceSet, find_roots


class SingularDtNError(ValueError):
    """An exterior spacing is at a Dirichlet eigenvalue, so the DtN map is undefined."""


class RunConditionError(ValueError):
    """A Fabry-Perot run does not satisfy its resonance conditions."""


def _near_integer(x: complex, tol: float) -> int | None:
    n = round(float(np.real(x)))
    return n if abs(x - n) <= tol * max(1.0, abs(n)) else None


@dataclass(frozen=True)
class Layout1D:
    """Resonators (x_j^-, x_j^+) on the line in increasing order."""

    left: np.ndarray
    right: np.ndarray
    interior_speeds: np.ndarray
    contrasts: np.ndarray
    background_speed: float = 1.0

    def __post_init__(self):
        for name in ("left", "right", "interior_speeds"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        object.__setattr__(self, "contrasts", np.atleast_1d(np.asarray(self.contrasts, dtype=complex)))
        n = self.left.size
        if n == 0 or any(a.size != n for a in (self.right, self.interior_speeds, self.contrasts)):
            raise ValueError("left, right, interior_speeds and contrasts must have one entry per resonator")
        pts = np.column_stack([self.left, self.right]).ravel()
        if np.any(np.diff(pts) <= 0):
            raise ValueError("endpoints must be strictly increasing: x1- < x1+ < x2- < ...")
        if np.any(self.interior_speeds <= 0) or self.background_speed <= 0:
            raise ValueError("wave speeds must be positive")

    @classmethod
    def from_lengths(cls, lengths, spacings, interior_speeds=1.0, contrasts=0.0, background_speed=1.0, start=0.0):
        lengths = np.atleast_1d(np.asarray(lengths, dtype=float))
        spacings = np.atleast_1d(np.asarray(spacings, dtype=float)) if len(lengths) > 1 else np.zeros(0)
        if spacings.size != lengths.size - 1:
            raise ValueError("need exactly one spacing between consecutive resonators")
        left = start + np.concatenate([[0.0], np.cumsum(lengths[:-1] + spacings)])
        n = lengths.size
        return cls(
            left,
            left + lengths,
            np.broadcast_to(np.asarray(interior_speeds, dtype=float), (n,)).copy(),
            np.broadcast_to(np.asarray(contrasts, dtype=complex), (n,)).copy(),
            background_speed,
        )

    @property
    def count(self) -> int:
        return self.left.size

    @property
    def lengths(self) -> np.ndarray:
        return self.right - self.left

    @property
    def spacings(self) -> np.ndarray:
        return self.left[1:] - self.right[:-1]

    def with_delta(self, delta) -> "Layout1D":
        return replace(self, contrasts=np.full(self.count, delta, dtype=complex))

    def neumann_order(self, j: int, omega0: float, tol: float = 1e-10) -> int | None:
        """n with omega0 l_j / v_j = n pi, or None."""
        n = _near_integer(omega0 * self.lengths[j] / (self.interior_speeds[j] * np.pi), tol)
        return n if n is not None and n >= 1 else None

    def resonant_set(self, omega0: float, tol: float = 1e-10) -> list[tuple[int, int]]:
        """Resonators with a Neumann frequency at omega0, as (index, order) pairs."""
        out = []
        for j in range(self.count):
            n = self.neumann_order(j, omega0, tol)
            if n is not None:
                out.append((j, n))
        return out

    def to_dict(self) -> dict:
        return {
            "lengths": self.lengths.tolist(),
            "spacings": self.spacings.tolist(),
            "start": float(self.left[0]),
            "interior_speeds": self.interior_speeds.tolist(),
            "contrasts": [float(c.real) for c in self.contrasts],
            "background_speed": self.background_speed,
        }


@dataclass
class DtN1D:
    """Exterior DtN matrix on (f_1^-, f_1^+, ..., f_N^-, f_N^+)."""

    k: complex
    matrix: np.ndarray

    def __matmul__(self, other):
        return self.matrix @ other


def spacing_block(k: complex, length: float) -> np.ndarray:
    """[[-k cot(kl), k csc(kl)], [k csc(kl), -k cot(kl)]]."""
    s = np.sin(k * length)
    c = np.cos(k * length)
    return np.array([[-k * c / s, k / s], [k / s, -k * c / s]], dtype=complex)


def dtn_1d(k: complex, layout: Layout1D, tol: float = 1e-10) -> DtN1D:
    """Outgoing exterior DtN matrix at wavenumber k."""
    k = complex(k)
    N = layout.count
    T = np.zeros((2 * N, 2 * N), dtype=complex)
    T[0, 0] = 1j * k
    T[-1, -1] = 1j * k
    for i, ell in enumerate(layout.spacings):
        if _near_integer(k * ell / np.pi, tol) is not None:
            raise SingularDtNError(
                f"spacing {i} (between resonators {i} and {i + 1}, length {ell}) is at a Dirichlet "
                f"eigenvalue: k*l/pi = {k * ell / np.pi}"
            )
        sl = slice(2 * i + 1, 2 * i + 3)
        T[sl, sl] = spacing_block(k, ell)
    return DtN1D(k, T)


def neumann_traces(layout: Layout1D, members: list[tuple[int, int]]) -> np.ndarray:
    """Columns g_j with g_j(x_j^-) = a_j, g_j(x_j^+) = (-1)^{n_j} a_j, a_j = sqrt(2/l_j)."""
    G = np.zeros((2 * layout.count, len(members)))
    for col, (j, n) in enumerate(members):
        a = np.sqrt(2.0 / layout.lengths[j])
        G[2 * j, col] = a
        G[2 * j + 1, col] = (-1) ** n * a
    return G


def ode_capacitance(omega: complex, layout: Layout1D, members: list[tuple[int, int]]) -> np.ndarray:
    """C_ij(omega) = -(delta_i v_i^2 / 2 omega) <T_k g_j, g_i> in closed form.

    Only nearest neighbours in the chain couple; the traces are fixed by the
    Neumann orders in ``members``.
    """
    omega = complex(omega)
    v = layout.background_speed
    k = omega / v
    lengths, spacings = layout.lengths, layout.spacings
    N = layout.count
    for i, ell in enumerate(spacings):
        if _near_integer(k * ell / np.pi, 1e-10) is not None:
            raise SingularDtNError(f"spacing {i} (length {ell}) is at a Dirichlet eigenvalue: k*l/pi = {k * ell / np.pi}")
    cot = 1 / np.tan(k * spacings)
    csc = 1 / np.sin(k * spacings)
    m = len(members)
    C = np.zeros((m, m), dtype=complex)
    for a, (i, n_i) in enumerate(members):
        w = layout.contrasts[i] * layout.interior_speeds[i] ** 2
        # flux at each endpoint of g_i divided by -k a_i (times its own sign)
        left = cot[i - 1] if i > 0 else -1j
        right = cot[i] if i < N - 1 else -1j
        C[a, a] = w / (v * lengths[i]) * (left + right)
        for b, (j, _) in enumerate(members):
            if j == i + 1:
                C[a, b] = -w / (v * np.sqrt(lengths[i] * lengths[j])) * (-1) ** n_i * csc[i]
            elif j == i - 1:
                n_j = members[b][1]
                C[a, b] = -w / (v * np.sqrt(lengths[i] * lengths[j])) * (-1) ** n_j * csc[j]
    return C


def capmat_1d(omega0: float, layout: Layout1D, tol: float = 1e-10) -> np.ndarray:
    """Tridiagonal ODE capacitance matrix over the resonators resonant at omega0."""
    members = layout.resonant_set(omega0, tol)
    if not members:
        raise ValueError(f"no resonator has a Neumann frequency at omega0={omega0}")
    return ode_capacitance(omega0, layout, members)


# ---------------------------------------------------------------------------
# transfer-matrix oracle


def _propagator(k: complex, length: float) -> np.ndarray:
    c, s = np.cos(k * length), np.sin(k * length)
    sinc = length * np.sinc(k * length / np.pi)
    return np.array([[c, sinc], [-k * s, c]], dtype=complex)


def transfer_function(omega: complex, layout: Layout1D) -> complex:
    """Outgoing defect u' - i k u at the right end for the left-outgoing start.

    Entire in omega; its zeros (other than omega = 0) are the resonances.
    """
    omega = complex(omega)
    v = layout.background_speed
    k = omega / v
    state = np.array([1.0, -1j * k], dtype=complex)
    N = layout.count
    for j in range(N):
        delta = layout.contrasts[j]
        state[1] *= delta
        state = _propagator(omega / layout.interior_speeds[j], layout.lengths[j]) @ state
        state[1] /= delta
        if j < N - 1:
            state = _propagator(k, layout.spacings[j]) @ state
    return complex(state[1] - 1j * k * state[0])


def _rectangle_winding(f, window, per_side: int = 400) -> int:
    x0, x1, y0, y1 = window
    corners = [complex(x0, y0), complex(x1, y0), complex(x1, y1), complex(x0, y1), complex(x0, y0)]
    total = 0.0
    for a, b in zip(corners[:-1], corners[1:]):
        t = np.linspace(0.0, 1.0, per_side + 1)
        vals = np.array([f(a + (b - a) * s) for s in t])
        jumps = np.angle(vals[1:] / vals[:-1])
        if np.max(np.abs(jumps)) > 1.0:
            return _rectangle_winding(f, window, per_side * 4) if per_side < 12800 else -1
        total += jumps.sum()
    return int(round(total / (2 * np.pi)))


def transfer_resonances(
    layout: Layout1D,
    delta: complex,
    window: tuple[float, float, float, float],
    grid: tuple[int, int] = (81, 41),
    tol: float = 1e-13,
) -> ResonanceSet:
    """Resonances in the rectangle (re_min, re_max, im_min, im_max) from the
    exact transfer function; the count is confirmed by the argument principle."""
    x0, x1, y0, y1 = map(float, window)
    if not (x0 < x1 and y0 < y1):
        raise ValueError("window must be (re_min, re_max, im_min, im_max) with positive extent")
    lay = layout.with_delta(delta)
    scale = abs(transfer_function(complex(x1, y1), lay)) or 1.0

    def f(w):
        return transfer_function(w, lay) / scale

    notes = []
    expected = _rectangle_winding(f, (x0, x1, y0, y1))
    if expected < 0:
        notes.append("argument principle unresolved on the window boundary")
    xs = np.linspace(x0, x1, grid[0])
    ys = np.linspace(y0, y1, grid[1])
    Z = xs[None, :] + 1j * ys[:, None]
    V = np.log(np.abs(np.vectorize(f)(Z)) + 1e-300)
    seeds = []
    for a in range(V.shape[0]):
        for b in range(V.shape[1]):
            nb = V[max(a - 1, 0) : a + 2, max(b - 1, 0) : b + 2]
            if V[a, b] <= nb.min():
                seeds.append((V[a, b], Z[a, b]))
    seeds = [z for _, z in sorted(seeds, key=lambda p: p[0])]
    inside = lambda z: x0 <= z.real <= x1 and y0 <= z.imag <= y1  # noqa: E731
    spread = 1e-3 * min(x1 - x0, y1 - y0) / max(1.0, abs(complex(x1, y1)))
    count = expected if expected >= 0 else None
    roots = find_roots(f, seeds, count, inside, spread=spread, tol=tol) if count != 0 else []
    values = np.array([r.root for r in roots], dtype=complex)
    order = np.lexsort((values.imag, values.real)) if values.size else np.array([], dtype=int)
    values = values[order]
    res = np.array([abs(transfer_function(z, lay)) for z in values])
    if count is not None and values.size != count:
        notes.append(f"argument principle counts {count} roots but {values.size} were located")
    return ResonanceSet(values, res, [1] * values.size, [roots[i].iterations for i in order], notes)


# ---------------------------------------------------------------------------
# Fabry-Perot runs


@dataclass
class FPBlock:
    """Resonant run p..q (0-based, inclusive) and its symmetrised FP matrix."""

    p: int
    q: int
    n: tuple[int, ...]
    m: tuple[int, ...]
    C_sym: np.ndarray
    sigma: np.ndarray
    t: np.ndarray
    theta: np.ndarray
    r: float

    @property
    def signs(self) -> np.ndarray:
        return np.diag(self.sigma)

    def conjugated(self) -> np.ndarray:
        return self.sigma @ self.C_sym @ self.sigma


def structural_vector(layout: Layout1D, r: float) -> np.ndarray:
    """(r l_1, l_12, r l_2, ..., l_{N-1,N}, r l_N)."""
    t = np.empty(2 * layout.count - 1)
    t[0::2] = r * layout.lengths
    t[1::2] = layout.spacings
    return t


def fp_block(k0: float, layout: Layout1D, run: tuple[int, int], tol: float = 1e-10) -> FPBlock:
    """Symmetrised Fabry-Perot block and sign matrix for a maximal resonant run."""
    p, q = map(int, run)
    N = layout.count
    if not (0 <= p < q < N):
        raise RunConditionError(f"a run needs 0 <= p < q < N={N}; got p={p}, q={q}")
    speeds = layout.interior_speeds[p : q + 1]
    contrasts = layout.contrasts[p : q + 1]
    if np.ptp(speeds) > tol * speeds[0] or np.max(np.abs(contrasts - contrasts[0])) > tol * max(abs(contrasts[0]), 1.0):
        raise RunConditionError("resonators in a run must share one interior speed and one contrast")
    v = layout.background_speed
    vb = float(speeds[0])
    r = v / vb
    lengths, spacings = layout.lengths, layout.spacings
    n, m = [], []
    for i in range(p, q + 1):
        ni = _near_integer(k0 * r * lengths[i] / np.pi, tol)
        if ni is None or ni < 1:
            raise RunConditionError(f"resonator {i} is not Neumann resonant: k_b l/pi = {k0 * r * lengths[i] / np.pi}")
        n.append(ni)
    for i in range(p, q):
        mi = _near_integer(k0 * spacings[i] / np.pi, tol)
        if mi is None:
            raise RunConditionError(f"spacing {i} inside the run is not Dirichlet resonant: k l/pi = {k0 * spacings[i] / np.pi}")
        m.append(mi)
    if p > 0 and _near_integer(k0 * spacings[p - 1] / np.pi, tol) is not None:
        raise RunConditionError(f"run is not maximal: spacing {p - 1} before it is resonant")
    if q < N - 1 and _near_integer(k0 * spacings[q] / np.pi, tol) is not None:
        raise RunConditionError(f"run is not maximal: spacing {q} after it is resonant")

    size = q - p + 1
    C = np.zeros((size, size))
    for a in range(size - 1):
        i = p + a
        gap = spacings[i]
        C[a, a] += 1.0 / (r * lengths[i] * gap)
        C[a + 1, a + 1] += 1.0 / (r * lengths[i + 1] * gap)
        C[a, a + 1] = C[a + 1, a] = -1.0 / (r * gap * np.sqrt(lengths[i] * lengths[i + 1]))
    tau = np.ones(size)
    for a in range(size - 1):
        tau[a + 1] = tau[a] * (-1) ** (n[a] + m[a])

    t = structural_vector(layout, r)
    tk = np.array([tj if _near_integer(k0 * tj / np.pi, tol) is not None else np.inf for tj in t])
    theta = 1.0 / (tk[:-1] * tk[1:])
    return FPBlock(p, q, tuple(n), tuple(m), C, np.diag(tau), t, theta, r)


def splitting_prediction(lam: float, delta: float, v: float, r: float) -> tuple[float, float]:
    """Offsets +-v sqrt(lam / r) delta^(1/2) of a split pair."""
    if lam <= 0:
        raise ValueError("eigenvalue must be positive; zero eigenvalues carry no square-root splitting")
    if delta <= 0:
        raise ValueError("delta must be positive")
    s = v * np.sqrt(lam / r) * np.sqrt(delta)
    return float(s), float(-s)


def residue_extraction_1d(
    omega0: float,
    layout: Layout1D,
    run: tuple[int, int],
    steps: tuple[float, ...] = (1e-3, 5e-4, 2.5e-4),
    tol: float = 1e-4,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Residue of the ODE capacitance block at omega0 by Richardson
    extrapolation, against delta v v_b Sigma C_sym Sigma."""
    v = layout.background_speed
    block = fp_block(omega0 / v, layout, run)
    members = [(i, block.n[i - block.p]) for i in range(block.p, block.q + 1)]
    delta = layout.contrasts[block.p]
    vb = float(layout.interior_speeds[block.p])

    table = [[h * ode_capacitance(omega0 + h, layout, members) for h in steps]]
    for level in range(1, len(steps)):
        prev = table[-1]
        ratio = steps[0] / steps[1]
        factor = ratio**level
        table.append([(factor * prev[i + 1] - prev[i]) / (factor - 1) for i in range(len(prev) - 1)])
    numerical = table[-1][0]
    if len(table) >= 2:
        spread = np.linalg.norm(table[-1][0] - table[-2][-1]) / max(np.linalg.norm(numerical), 1e-300)
        if spread > tol:
            raise ConvergenceError(f"residue extrapolation did not settle (spread {spread:.3e})")
    formula = delta * v * vb * block.conjugated()
    err = float(np.linalg.norm(numerical - formula) / np.linalg.norm(formula))
    return numerical, formula, err


def regular_case_residual(layout: Layout1D, omega0: float, delta: float, window_halfwidth: float | None = None):
    """Distance between the exact resonances near omega0 and omega0 + eig(C(omega0))."""
    lay = layout.with_delta(delta)
    pred = omega0 + np.linalg.eigvals(capmat_1d(omega0, lay))
    h = window_halfwidth or max(20 * delta * max(1.0, omega0), 1e-6)
    oracle = transfer_resonances(layout, delta, (omega0 - h, omega0 + h, -h, h))
    if len(oracle) == 0:
        raise ConvergenceError(f"no exact resonance found near omega0={omega0} at delta={delta}")
    d = np.abs(oracle.values[:, None] - pred[None, :])
    return float(d.min(axis=0).max()), pred, oracle.values


def singular_case_split(layout: Layout1D, omega0: float, run: tuple[int, int], delta: float):
    """Predicted and exact split pairs around omega0 for the largest FP eigenvalue.

    Returns ((pred_plus, pred_minus), (oracle_plus, oracle_minus)) as complex offsets
    from omega0.
    """
    v = layout.background_speed
    block = fp_block(omega0 / v, layout, run)
    lam = float(np.max(np.linalg.eigvalsh(block.C_sym)))
    plus, minus = splitting_prediction(lam, delta, v, block.r)
    h = 3 * abs(plus) + 20 * delta
    oracle = transfer_resonances(layout, delta, (omega0 - h, omega0 + h, -h, h))
    offsets = oracle.values - omega0
    if offsets.size == 0:
        raise ConvergenceError(f"no exact resonance near omega0={omega0} at delta={delta}")
    op = offsets[np.argmin(np.abs(offsets - plus))]
    om = offsets[np.argmin(np.abs(offsets - minus))]
    return (plus, minus), (complex(op), complex(om))
