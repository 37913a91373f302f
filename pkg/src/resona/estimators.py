"""scikit-learn style wrappers around the solvers.

An estimator is configured with numerical parameters, ``fit`` binds it to a
geometry (a :class:`SphereScene` or :class:`Layout1D`) and does the
delta-independent work, and ``predict`` maps contrasts or Bloch vectors to
frequencies. Parameters follow the usual ``get_params``/``set_params``
protocol so estimators can be cloned and swept.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .bie3d import SphereScene
from .capmat import capacitance_matrix
from .nep import find_resonance_cluster
from .oned import Layout1D, capmat_1d, transfer_resonances
from .periodic import Lattice3D, QuasiPeriodicContext, neumann_branches, regular_capacitance, sector_traces


def _lowest_neumann(scene: SphereScene, L: int) -> float:
    return neumann_branches(scene, 1, L)[0]


def _deltas(X) -> np.ndarray:
    return np.atleast_1d(np.asarray(X, dtype=complex)).ravel()


class _Fitted:
    def _check(self, *names):
        for name in names:
            if not hasattr(self, name):
                raise NotFittedError(f"{type(self).__name__} is not fitted; call fit(scene) first")


class CapacitanceResonanceEstimator(BaseEstimator, _Fitted):
    """Leading-order resonances omega0 + eig(C(omega0)) as functions of delta.

    The capacitance matrix is linear in the contrast, so ``fit`` assembles it
    once at unit contrast and ``predict`` rescales.
    """

    def __init__(self, omega0: float | None = None, L: int = 6):
        self.omega0 = omega0
        self.L = L

    def fit(self, scene: SphereScene, y=None):
        self.omega0_ = self.omega0 if self.omega0 is not None else _lowest_neumann(scene, self.L)
        cap = capacitance_matrix(self.omega0_, scene.with_delta(1.0), self.L)
        self.capacitance_ = cap
        self.unit_eigenvalues_ = np.linalg.eigvals(cap.C)
        self.n_modes_ = cap.C.shape[0]
        return self

    def predict(self, X) -> np.ndarray:
        """Predicted frequencies, one row per contrast in X."""
        self._check("unit_eigenvalues_")
        d = _deltas(X)
        out = self.omega0_ + d[:, None] * self.unit_eigenvalues_[None, :]
        return np.sort_complex(out)


class DirectClusterEstimator(BaseEstimator, _Fitted):
    """Exact roots of det A_L(omega, delta) near omega0 for each contrast."""

    def __init__(self, omega0: float | None = None, L: int = 6, radius_factor: float = 10.0,
                 min_radius: float = 1e-3):
        self.omega0 = omega0
        self.L = L
        self.radius_factor = radius_factor
        self.min_radius = min_radius

    def fit(self, scene: SphereScene, y=None):
        self.scene_ = scene
        self.omega0_ = self.omega0 if self.omega0 is not None else _lowest_neumann(scene, self.L)
        return self

    def predict(self, X) -> list[np.ndarray]:
        self._check("scene_")
        out = []
        for d in _deltas(X):
            radius = self.radius_factor * abs(d) * self.omega0_ + self.min_radius
            res = find_resonance_cluster(self.omega0_, d, self.scene_, self.L, radius=radius)
            out.append(res.values)
        return out


class ChainResonanceEstimator(BaseEstimator, _Fitted):
    """1D chain: ODE capacitance predictions, with the exact transfer-matrix
    roots available through ``predict_exact``."""

    def __init__(self, omega0: float | None = None, window_factor: float = 20.0):
        self.omega0 = omega0
        self.window_factor = window_factor

    def fit(self, layout: Layout1D, y=None):
        self.layout_ = layout
        if self.omega0 is None:
            # lowest interior Neumann frequency pi v_j / l_j along the chain
            self.omega0_ = float(np.min(np.pi * layout.interior_speeds / layout.lengths))
        else:
            self.omega0_ = self.omega0
        self.unit_matrix_ = capmat_1d(self.omega0_, layout.with_delta(1.0))
        self.unit_eigenvalues_ = np.linalg.eigvals(self.unit_matrix_)
        return self

    def predict(self, X) -> np.ndarray:
        self._check("unit_eigenvalues_")
        d = _deltas(X)
        return np.sort_complex(self.omega0_ + d[:, None] * self.unit_eigenvalues_[None, :])

    def predict_exact(self, X) -> list[np.ndarray]:
        self._check("layout_")
        out = []
        for d in _deltas(X):
            h = max(self.window_factor * abs(d) * max(1.0, self.omega0_), 1e-6)
            res = transfer_resonances(self.layout_, d, (self.omega0_ - h, self.omega0_ + h, -h, h))
            out.append(res.values)
        return out


class BlochBandEstimator(BaseEstimator, _Fitted):
    """Leading-order Bloch bands omega0 + delta lambda_j(alpha) of a
    periodic array; ``predict`` takes Bloch vectors, one per row."""

    def __init__(self, omega0: float | None = None, delta: float = 1e-3, L: int = 4,
                 lattice: Lattice3D | None = None, sector: str = "group", ewald_tol: float = 1e-15):
        self.omega0 = omega0
        self.delta = delta
        self.L = L
        self.lattice = lattice
        self.sector = sector
        self.ewald_tol = ewald_tol

    def fit(self, scene: SphereScene, y=None):
        lattice = self.lattice if self.lattice is not None else Lattice3D.cubic(1.0)
        self.context_ = QuasiPeriodicContext(lattice, tol=self.ewald_tol)
        self.scene_ = scene
        self.omega0_ = self.omega0 if self.omega0 is not None else _lowest_neumann(scene, self.L)
        self.traces_ = sector_traces(scene, self.omega0_, self.L, self.sector)
        return self

    def eigenvalues(self, alphas) -> np.ndarray:
        """Sorted eigenvalues of the regular capacitance matrix per Bloch vector."""
        self._check("traces_")
        A = np.atleast_2d(np.asarray(alphas, dtype=float))
        rows = []
        for a in A:
            C, _ = regular_capacitance(a, self.omega0_, self.traces_, self.scene_, self.L, self.context_)
            rows.append(np.linalg.eigvalsh(0.5 * (C + C.conj().T)))
        return np.array(rows)

    def predict(self, X) -> np.ndarray:
        self._check("traces_")
        return self.omega0_ + self.delta * self.eigenvalues(X)
