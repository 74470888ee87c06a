"""Model-based control oracles: Riccati/Lyapunov solvers, gains, costs.

The continuous algebraic Riccati equation is solved by the ordered-Schur
invariant subspace of the Hamiltonian matrix, refined with Newton-Kleinman
steps (one Lyapunov solve each) until the residual contract holds.  Lyapunov
equations go through scipy's dense Bartels-Stewart solver; tests check it
against an independent Kronecker linear-solve oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConvergenceError, NotHurwitzError, UnstabilizableError
from .model import SmallSignalModel

CARE_RTOL = 1e-8
LYAP_RTOL = 1e-9
_SYM_ATOL = 1e-10


@dataclass(frozen=True)
class CostWeights:
    """Quadratic cost weights: Q symmetric PSD, R symmetric PD."""

    q: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        q = np.atleast_2d(np.asarray(self.q, dtype=float))
        r = np.atleast_2d(np.asarray(self.r, dtype=float))
        _check_symmetric(q, "Q")
        _check_symmetric(r, "R")
        if np.linalg.eigvalsh(q).min() < -_SYM_ATOL * max(1.0, np.abs(q).max()):
            raise ValueError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(r).min() <= 0:
            raise ValueError("R must be positive definite")
        q.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)

    @classmethod
    def from_scalars(cls, n: int, m: int, q: float = 1.0, r: float = 1.0):
        return cls(q=q * np.eye(n), r=r * np.eye(m))

    @classmethod
    def speed_weighted(cls, model, q_angle: float = 1.0, q_speed: float = 10.0,
                       q_other: float = 0.01, r: float = 1.0):
        """Diagonal Q keyed off state labels; the damping-centric default.

        States labeled ``*.speed`` get ``q_speed``, ``*.angle`` get
        ``q_angle``, everything else ``q_other``.  Falls back to uniform
        ``q_angle`` when the model carries no labels.
        """
        diag = np.full(model.n, q_angle)
        for i, lab in enumerate(model.labels):
            name = str(lab)
            if name.endswith(".speed"):
                diag[i] = q_speed
            elif name.endswith(".angle"):
                diag[i] = q_angle
            else:
                diag[i] = q_other
        return cls(q=np.diag(diag), r=r * np.eye(model.m))


@dataclass(frozen=True)
class Kernel:
    """Symmetric Q-function kernel on the stacked (state, input) vector."""

    g: np.ndarray
    n: int
    m: int

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.g, dtype=float))
        if g.shape != (self.n + self.m, self.n + self.m):
            raise ValueError(f"kernel must be {(self.n + self.m,) * 2}, got {g.shape}")
        _check_symmetric(g, "G")
        g.setflags(write=False)
        object.__setattr__(self, "g", g)

    @property
    def g11(self) -> np.ndarray:
        return self.g[: self.n, : self.n]

    @property
    def g12(self) -> np.ndarray:
        return self.g[: self.n, self.n:]

    @property
    def g21(self) -> np.ndarray:
        return self.g[self.n:, : self.n]

    @property
    def g22(self) -> np.ndarray:
        return self.g[self.n:, self.n:]

    def greedy_gain(self) -> np.ndarray:
        """Gain implied by the kernel minimizer, u = -(G22^-1 G21) x."""
        return np.linalg.solve(self.g22, self.g21)


def _check_symmetric(mat, name):
    scale = max(1.0, np.abs(mat).max()) if mat.size else 1.0
    if not np.allclose(mat, mat.T, rtol=0, atol=_SYM_ATOL * scale):
        raise ValueError(f"{name} must be symmetric")


def spectral_abscissa(a) -> float:
    """Max real part of the eigenvalues; negative means Hurwitz."""
    return float(np.linalg.eigvals(np.asarray(a, dtype=float)).real.max())


def care(a, b, q, r) -> np.ndarray:
    """Stabilizing solution of A'P + PA - P B R^-1 B' P + Q = 0.

    Raises UnstabilizableError when the Hamiltonian has no n-dimensional
    stable invariant subspace and ConvergenceError when Newton refinement
    cannot reach the residual tolerance.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b[:, None]
    q = np.atleast_2d(np.asarray(q, dtype=float))
    r = np.atleast_2d(np.asarray(r, dtype=float))
    n = a.shape[0]

    s = b @ np.linalg.solve(r, b.T)
    ham = np.block([[a, -s], [-q, -a.T]])
    try:
        _, z, sdim = scipy.linalg.schur(ham, sort="lhp")
    except np.linalg.LinAlgError as exc:
        raise UnstabilizableError(f"Hamiltonian Schur decomposition failed: {exc}")
    if sdim != n:
        raise UnstabilizableError(
            f"Hamiltonian has {sdim} stable eigenvalues, expected {n}: "
            "(A, B) not stabilizable or CARE has no stabilizing solution"
        )
    u1 = z[:n, :n]
    u2 = z[n:, :n]
    try:
        p = scipy.linalg.solve(u1.T, u2.T).T
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise UnstabilizableError(f"stable subspace is singular: {exc}")
    p = 0.5 * (p + p.T)

    # Newton-Kleinman polish: each step solves one closed-loop Lyapunov
    # equation, quadratic convergence near the solution.
    best_p, best_res = p, _care_residual(a, s, q, p)
    for _ in range(25):
        if best_res <= CARE_RTOL * (1.0 + np.linalg.norm(best_p, "fro")):
            break
        a_cl = a - s @ best_p
        if spectral_abscissa(a_cl) >= 0:
            break
        rhs = q + best_p @ s @ best_p
        p_new = lyap(a_cl, rhs)
        res = _care_residual(a, s, q, p_new)
        if not np.isfinite(res) or res >= best_res:
            break
        best_p, best_res = p_new, res
    p = best_p
    if best_res > CARE_RTOL * (1.0 + np.linalg.norm(p, "fro")):
        raise ConvergenceError(
            f"CARE residual {best_res:.3e} above tolerance after refinement"
        )
    k = np.linalg.solve(r, b.T @ p)
    if spectral_abscissa(a - b @ k) >= 0:
        raise UnstabilizableError("CARE solution does not stabilize the closed loop")
    scale = max(1.0, np.abs(p).max())
    if np.linalg.eigvalsh(p).min() < -1e-8 * scale:
        raise UnstabilizableError("CARE solution is not positive semidefinite")
    return p


def _care_residual(a, s, q, p) -> float:
    return float(np.linalg.norm(a.T @ p + p @ a - p @ s @ p + q, "fro"))


def lyap(a_cl, m_rhs) -> np.ndarray:
    """Solve A_cl' X + X A_cl + M = 0 for symmetric X (A_cl Hurwitz)."""
    a_cl = np.atleast_2d(np.asarray(a_cl, dtype=float))
    m_rhs = np.atleast_2d(np.asarray(m_rhs, dtype=float))
    if spectral_abscissa(a_cl) >= 0:
        raise NotHurwitzError(
            "Lyapunov solve needs a Hurwitz matrix (infinite-horizon cost undefined)"
        )
    x = scipy.linalg.solve_continuous_lyapunov(a_cl.T, -m_rhs)
    x = 0.5 * (x + x.T)
    res = np.linalg.norm(a_cl.T @ x + x @ a_cl + m_rhs, "fro")
    if res > LYAP_RTOL * (1.0 + np.linalg.norm(x, "fro")):
        raise ConvergenceError(f"Lyapunov residual {res:.3e} above tolerance")
    return x


# Model-level wrappers ------------------------------------------------------

def solve_care(model: SmallSignalModel, w: CostWeights) -> np.ndarray:
    return care(model.a, model.b, w.q, w.r)


def solve_lyapunov(a_cl, m_rhs) -> np.ndarray:
    return lyap(a_cl, m_rhs)


def gain(a, b, q, r) -> np.ndarray:
    p = care(a, b, q, r)
    return np.linalg.solve(r, np.asarray(b, dtype=float).T @ p)


def lqr_gain(model: SmallSignalModel, w: CostWeights) -> np.ndarray:
    """Optimal gain K = R^-1 B' P under the u = -K x convention."""
    return gain(model.a, model.b, w.q, w.r)


def evaluate_cost(model: SmallSignalModel, w: CostWeights, k, x0) -> float:
    """Infinite-horizon quadratic cost of u = -K x from x0; +inf if unstable."""
    k = np.asarray(getattr(k, "k", k), dtype=float)
    x0 = np.asarray(x0, dtype=float).ravel()
    a_cl = model.a - model.b @ k
    if spectral_abscissa(a_cl) >= 0:
        return float("inf")
    x = lyap(a_cl, w.q + k.T @ w.r @ k)
    return float(x0 @ x @ x0)


def evaluate_cost_finite(model, w, k, x0, t_end,
                         sample_period: float = 0.02, substeps: int = 20) -> float:
    """Trajectory-integrated cost over [0, t_end]; +inf on divergence."""
    from .sim import run_closed_loop

    traj = run_closed_loop(model, k, x0, w, t_end,
                           sample_period=sample_period, substeps=substeps)
    if traj.diverged:
        return float("inf")
    return float(traj.window_costs.sum())


def nominal_kernel(model0: SmallSignalModel, w: CostWeights,
                   include_p_term: bool = True) -> Kernel:
    """Q-function kernel assembled from the nominal Riccati solution.

    The upper-left block is P0 A0 + A0' P0 + Q + P0 (the extra P0 is what
    makes the on-policy restriction of the kernel equal the value kernel);
    ``include_p_term=False`` drops it for sensitivity studies.  Off-diagonal
    blocks use the symmetric completion P0 B0 / B0' P0, so the greedy gain
    equals the LQR gain exactly.
    """
    p0 = solve_care(model0, w)
    a0, b0 = model0.a, model0.b
    g11 = p0 @ a0 + a0.T @ p0 + w.q
    if include_p_term:
        g11 = g11 + p0
    g12 = p0 @ b0
    g = np.block([[g11, g12], [g12.T, w.r]])
    g = 0.5 * (g + g.T)
    return Kernel(g=g, n=model0.n, m=model0.m)
