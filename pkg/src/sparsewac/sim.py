"""Continuous-time plant simulator and the opaque plant interface.

The state and the running quadratic cost are integrated jointly with
classical RK4; controls are re-evaluated at every substep (quasi-continuous
feedback), only measurements are windowed.  The plant handle exposes nothing
beyond "apply a control law for one window" and "read the current state",
which is the model-freeness boundary the learner is tested against.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError
from .lqr import CostWeights
from .model import SmallSignalModel

_OVERFLOW_NORM = 1e150


@dataclass
class Trajectory:
    """Sampled closed-loop run: N+1 instants, N windows."""

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    window_costs: np.ndarray
    diverged: bool = False

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.window_costs = np.asarray(self.window_costs, dtype=float)
        k = len(self.times)
        if self.states.shape[0] != k or self.inputs.shape[0] != k:
            raise ValueError("trajectory arrays have inconsistent lengths")
        if len(self.window_costs) != max(k - 1, 0):
            raise ValueError("window_costs must have one entry per window")

    @property
    def total_cost(self) -> float:
        return float(self.window_costs.sum())

    def to_csv(self, path) -> None:
        """Header then time, x_1..x_n, u_1..u_m, window_cost (0.0 on row 0)."""
        import os
        import tempfile

        n = self.states.shape[1]
        m = self.inputs.shape[1]
        directory = os.path.dirname(str(path)) or "."
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(
                    ["time"]
                    + [f"x_{i + 1}" for i in range(n)]
                    + [f"u_{j + 1}" for j in range(m)]
                    + ["window_cost"]
                )
                for k, t in enumerate(self.times):
                    cost = self.window_costs[k - 1] if k > 0 else 0.0
                    writer.writerow(
                        [repr(float(t))]
                        + [repr(float(v)) for v in self.states[k]]
                        + [repr(float(v)) for v in self.inputs[k]]
                        + [repr(float(cost))]
                    )
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


@dataclass(frozen=True)
class Disturbance:
    """Initial-state impulse cleared at t = 0.

    ``sample`` draws x0 uniformly on the sphere of the given magnitude,
    restricted to the masked states.
    """

    magnitude: float = 1.0
    mask: tuple = ()
    seed: int = 0

    def sample(self, n: int, draw: int = 0) -> np.ndarray:
        if not np.isfinite(self.magnitude):
            raise ValueError("disturbance magnitude must be finite")
        idx = np.asarray(self.mask if self.mask else range(n), dtype=int)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ValueError("disturbance mask outside state range")
        rng = np.random.default_rng(np.random.PCG64(self.seed))
        vs = rng.standard_normal((draw + 1, idx.size))
        v = vs[draw]
        v *= self.magnitude / np.linalg.norm(v)
        x0 = np.zeros(n)
        x0[idx] = v
        return x0


def step_window(model: SmallSignalModel, x_t, control_fn, w: CostWeights,
                t_window: float, substeps: int = 20, t_start: float = 0.0):
    """Integrate one measurement window, returning (x_next, window_cost).

    ``control_fn(t, x)`` is evaluated at every RK4 stage.  Raises
    DivergenceError (with the last finite state attached) on overflow.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    a, b = model.a, model.b
    q, r = w.q, w.r
    x = np.asarray(x_t, dtype=float).ravel().copy()
    cost = 0.0
    h = t_window / substeps

    def rhs(t, x):
        u = np.asarray(control_fn(t, x), dtype=float).ravel()
        return a @ x + b @ u, float(x @ q @ x + u @ r @ u)

    t = t_start
    for _ in range(substeps):
        k1x, k1c = rhs(t, x)
        k2x, k2c = rhs(t + 0.5 * h, x + 0.5 * h * k1x)
        k3x, k3c = rhs(t + 0.5 * h, x + 0.5 * h * k2x)
        k4x, k4c = rhs(t + h, x + h * k3x)
        x_new = x + (h / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        cost += (h / 6.0) * (k1c + 2.0 * k2c + 2.0 * k3c + k4c)
        if not np.all(np.isfinite(x_new)) or np.linalg.norm(x_new) > _OVERFLOW_NORM:
            raise DivergenceError(
                f"state overflow during window starting at t={t_start:.6g}",
                last_state=x,
            )
        x = x_new
        t += h
    return x, cost


def run_closed_loop(model: SmallSignalModel, k, x0, w: CostWeights, t_end: float,
                    sample_period: float = 0.02, substeps: int = 20) -> Trajectory:
    """Simulate u = -K x over [0, t_end]; divergence truncates with a flag."""
    k = np.asarray(getattr(k, "k", k), dtype=float)
    x0 = np.asarray(x0, dtype=float).ravel()
    n_windows = int(round(t_end / sample_period))
    times = [0.0]
    states = [x0.copy()]
    inputs = [-k @ x0]
    costs = []
    x = x0
    diverged = False

    def control(t, xv):
        return -k @ xv

    for i in range(n_windows):
        try:
            x, cost = step_window(model, x, control, w, sample_period,
                                  substeps=substeps, t_start=i * sample_period)
        except DivergenceError:
            diverged = True
            break
        times.append((i + 1) * sample_period)
        states.append(x.copy())
        inputs.append(-k @ x)
        costs.append(cost)
    return Trajectory(
        times=np.array(times),
        states=np.array(states),
        inputs=np.array(inputs),
        window_costs=np.array(costs),
        diverged=diverged,
    )


class Plant:
    """Opaque plant handle: apply a control law per window, read the state.

    The system matrices are deliberately kept behind name-mangled attributes;
    the learner contract is exercised through :func:`plant_interface`, which
    returns this handle.
    """

    def __init__(self, model: SmallSignalModel, w: CostWeights, sample_period: float,
                 substeps: int, x0):
        self.__model = model
        self.__w = w
        self.__period = float(sample_period)
        self.__substeps = int(substeps)
        self.__x = np.asarray(x0, dtype=float).ravel().copy()
        self.__t = 0.0
        self.__windows = 0
        self.__history_t = [0.0]
        self.__history_x = [self.__x.copy()]
        self.__history_u = []
        self.__history_cost = []

    def current_state(self) -> np.ndarray:
        return self.__x.copy()

    @property
    def time(self) -> float:
        return self.__t

    @property
    def sample_period(self) -> float:
        return self.__period

    def apply(self, control_fn):
        """Drive the plant with control_fn(t, x) for one window."""
        x_new, cost = step_window(
            self.__model, self.__x, control_fn, self.__w,
            self.__period, substeps=self.__substeps, t_start=self.__t,
        )
        u_start = np.asarray(control_fn(self.__t, self.__x), dtype=float).ravel()
        self.__x = x_new
        self.__windows += 1
        self.__t = self.__windows * self.__period
        self.__history_t.append(self.__t)
        self.__history_x.append(x_new.copy())
        self.__history_u.append(u_start)
        self.__history_cost.append(cost)
        return x_new.copy(), cost

    def history(self, final_control_fn=None) -> Trajectory:
        """Trajectory of everything applied so far."""
        m = self.__model.m
        u_rows = list(self.__history_u)
        if final_control_fn is not None:
            u_rows.append(
                np.asarray(final_control_fn(self.__t, self.__x), dtype=float).ravel()
            )
        else:
            u_rows.append(np.zeros(m))
        return Trajectory(
            times=np.array(self.__history_t),
            states=np.array(self.__history_x),
            inputs=np.array(u_rows),
            window_costs=np.array(self.__history_cost),
        )


def plant_interface(model: SmallSignalModel, w: CostWeights,
                    sample_period: float = 0.02, substeps: int = 20,
                    x0=None) -> Plant:
    """Build the measurement-channel abstraction around a model."""
    if x0 is None:
        x0 = np.zeros(model.n)
    return Plant(model, w, sample_period, substeps, x0)
