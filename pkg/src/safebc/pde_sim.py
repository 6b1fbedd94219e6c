"""Finite-difference simulators for two unstable 1-D boundary-controlled
plants, scripted nominal controllers, rollouts, and a stabilization reward.

Both plants live on x in [0, 1], are actuated through the Dirichlet condition
at x = 1, and are observed at a single output location:

* transport with recirculation (hyperbolic): u_t = u_x + beta * u(0, t),
  output Y = u(0, t). First-order upwind in space. The grid step subdivides
  into `substeps` upwind substeps so the CFL bound dt_sub <= dx holds even
  when the control grid is coarser than the spatial grid; the boundary value
  ramps linearly across the substeps between consecutive control samples,
  which keeps the pure-transport delay identity exact for ramp inputs.

* reaction-diffusion (parabolic): u_t = eps * u_xx + lam * u with u(0, t) = 0,
  output Y = u(0.5, t). Crank-Nicolson diffusion plus trapezoidal reaction,
  unconditionally stable in dt.

Rollouts start from the constant profile u(x, 0) = U0 and are pure functions
of (config, controller, U0, grid, episode_seed).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .checkpoint import fmt


class ConfigurationError(ValueError):
    """Raised for invalid simulator or controller configuration."""


class SimulationDivergedError(RuntimeError):
    """Raised when a step produces non-finite state; carries the step index."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid t_m = m * dt, m = 0..M, with dt = T / M."""

    T: float
    M: int

    def __post_init__(self):
        if not (self.T > 0.0 and math.isfinite(self.T)):
            raise ConfigurationError(f"horizon T must be positive, got {self.T}")
        if self.M < 2:
            raise ConfigurationError(f"need at least 2 steps, got M={self.M}")

    @property
    def dt(self):
        return self.T / self.M

    def times(self):
        return np.arange(self.M + 1) * self.dt


class PdeState1D:
    """Spatial samples of u(., t) on the uniform grid over [0, 1]."""

    def __init__(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or values.size < 3:
            raise ConfigurationError("state needs at least 3 spatial points")
        if not np.all(np.isfinite(values)):
            raise SimulationDivergedError("non-finite state values")
        self.values = values

    @property
    def n_points(self):
        return self.values.size

    @property
    def dx(self):
        return 1.0 / (self.n_points - 1)


def _default_hyperbolic_grid():
    return TimeGrid(5.0, 50)


def _default_parabolic_grid():
    return TimeGrid(1.0, 1000)


@dataclass(frozen=True)
class HyperbolicConfig:
    """Transport plant u_t = u_x + beta * u(0,t); output at x = 0.

    substeps=None picks the smallest count satisfying the CFL bound
    (ceil(dt/dx) with a 1e-9 tolerance against floating roundoff).
    """

    beta: float = 5.0
    n_points: int = 101
    grid: TimeGrid = field(default_factory=_default_hyperbolic_grid)
    substeps: int | None = None

    def __post_init__(self):
        if self.n_points < 3:
            raise ConfigurationError("need at least 3 spatial points")
        if not math.isfinite(self.beta):
            raise ConfigurationError("beta must be finite")
        if self.substeps is not None and self.substeps < 1:
            raise ConfigurationError("substeps must be >= 1")

    @property
    def dx(self):
        return 1.0 / (self.n_points - 1)

    def effective_substeps(self):
        if self.substeps is not None:
            return self.substeps
        return max(1, math.ceil(self.grid.dt / self.dx - 1e-9))

    @property
    def output_index(self):
        return 0


@dataclass(frozen=True)
class ParabolicConfig:
    """Reaction-diffusion plant u_t = eps*u_xx + lam*u; output at x_out."""

    eps: float = 0.05
    lam: float = 1.0
    n_points: int = 101
    grid: TimeGrid = field(default_factory=_default_parabolic_grid)
    x_out: float = 0.5

    def __post_init__(self):
        if self.eps <= 0.0:
            raise ConfigurationError("diffusivity eps must be positive")
        if self.n_points < 3:
            raise ConfigurationError("need at least 3 spatial points")
        if not 0.0 <= self.x_out <= 1.0:
            raise ConfigurationError("x_out must lie in [0, 1]")

    @property
    def dx(self):
        return 1.0 / (self.n_points - 1)

    @property
    def output_index(self):
        return int(round(self.x_out * (self.n_points - 1)))


def step_hyperbolic(state, u_boundary, cfg):
    """Advance the transport plant by one grid step dt.

    The step runs cfg.effective_substeps() upwind substeps
    u_i <- u_i + (dt_sub/dx)(u_{i+1} - u_i) + dt_sub * beta * u_0 for
    i = 0..N-2, writing the (linearly ramped) boundary value into the
    rightmost point after each substep.

    Raises ConfigurationError if the substep size violates dt_sub <= dx.
    """
    if not np.isfinite(u_boundary):
        raise ConfigurationError("boundary value must be finite")
    u = state.values
    dx = state.dx
    n_sub = cfg.effective_substeps()
    dt_sub = cfg.grid.dt / n_sub
    if dt_sub > dx * (1.0 + 1e-9):
        raise ConfigurationError(
            f"CFL violation: substep {dt_sub:g} exceeds dx {dx:g}; "
            f"increase substeps or refine the time grid")
    r = dt_sub / dx
    b_prev = u[-1]
    new = u.copy()
    for j in range(1, n_sub + 1):
        incr = r * (new[1:] - new[:-1]) + dt_sub * cfg.beta * new[0]
        new[:-1] += incr
        new[-1] = b_prev + (j / n_sub) * (u_boundary - b_prev)
    if not np.all(np.isfinite(new)):
        raise SimulationDivergedError("transport step diverged")
    return PdeState1D(new)


def step_parabolic(state, u_boundary, cfg):
    """Advance the reaction-diffusion plant by one grid step dt.

    Crank-Nicolson in the diffusion term (tridiagonal solve) and trapezoidal
    treatment of the reaction term. `u_boundary` is the Dirichlet value at
    x = 1 at the new time level; the old level's value is read from the state.
    """
    if not np.isfinite(u_boundary):
        raise ConfigurationError("boundary value must be finite")
    u = state.values
    dx = state.dx
    dt = cfg.grid.dt
    a = cfg.eps / dx**2
    n_int = u.size - 2
    ab = np.zeros((3, n_int))
    ab[0, 1:] = -0.5 * dt * a
    ab[1, :] = 1.0 + dt * a - 0.5 * dt * cfg.lam
    ab[2, :-1] = -0.5 * dt * a
    lap = u[2:] - 2.0 * u[1:-1] + u[:-2]
    rhs = u[1:-1] + 0.5 * dt * (a * lap + cfg.lam * u[1:-1])
    rhs[-1] += 0.5 * dt * a * u_boundary  # new-time right boundary
    sol = solve_banded((1, 1), ab, rhs, overwrite_ab=True, overwrite_b=True,
                       check_finite=False)
    new = np.empty_like(u)
    new[0] = 0.0
    new[1:-1] = sol
    new[-1] = u_boundary
    if not np.all(np.isfinite(new)):
        raise SimulationDivergedError("reaction-diffusion step diverged")
    return PdeState1D(new)


def _stepper(cfg):
    if isinstance(cfg, HyperbolicConfig):
        return step_hyperbolic
    if isinstance(cfg, ParabolicConfig):
        return step_parabolic
    raise ConfigurationError(f"unknown environment config {type(cfg).__name__}")


class Controller:
    """Scripted nominal controller interface.

    reset is called once per episode; control produces U_m for m >= 1 given
    the latest measured output Y_{m-1}. U_0 is always the episode's U0.
    """

    def reset(self, U0, grid, episode_seed=None):
        pass

    def control(self, m, t, y_prev):
        raise NotImplementedError

    def describe(self):
        return type(self).__name__


class Proportional(Controller):
    """Output feedback U_m = -gain * Y_{m-1}."""

    def __init__(self, gain):
        self.gain = float(gain)

    def control(self, m, t, y_prev):
        return -self.gain * y_prev

    def describe(self):
        return f"proportional:gain={self.gain:g}"


class Constant(Controller):
    """Holds a fixed value; value=None holds the episode's U0."""

    def __init__(self, value=None):
        self.value = None if value is None else float(value)
        self._held = 0.0

    def reset(self, U0, grid, episode_seed=None):
        self._held = U0 if self.value is None else self.value

    def control(self, m, t, y_prev):
        return self._held

    def describe(self):
        return "constant:hold-U0" if self.value is None else f"constant:value={self.value:g}"


class SmoothRandom(Controller):
    """U0 plus a random multi-sine that vanishes at t = 0.

    The episode seed (when given) is mixed with the controller's own seed, so
    a shared instance still produces distinct signals across collected
    trajectories while staying deterministic.
    """

    def __init__(self, seed=0, num_modes=3, amplitude=2.0,
                 min_frequency=0.2, max_frequency=1.5):
        if num_modes < 1:
            raise ConfigurationError("need at least one mode")
        if not 0.0 < min_frequency <= max_frequency:
            raise ConfigurationError("bad frequency range")
        self.seed = int(seed)
        self.num_modes = int(num_modes)
        self.amplitude = float(amplitude)
        self.min_frequency = float(min_frequency)
        self.max_frequency = float(max_frequency)
        self._U0 = 0.0
        self._amps = np.zeros(num_modes)
        self._freqs = np.ones(num_modes)

    def reset(self, U0, grid, episode_seed=None):
        key = self.seed if episode_seed is None else (self.seed, int(episode_seed))
        rng = np.random.default_rng(key)
        self._amps = rng.uniform(-self.amplitude, self.amplitude, self.num_modes)
        self._freqs = rng.uniform(self.min_frequency, self.max_frequency,
                                  self.num_modes)
        self._U0 = U0

    def control(self, m, t, y_prev):
        return self._U0 + float(np.sum(self._amps * np.sin(self._freqs * t)))

    def describe(self):
        return (f"smooth:seed={self.seed},modes={self.num_modes},"
                f"amplitude={self.amplitude:g}")


class FromFile(Controller):
    """Replays the U column of a boundary trajectory CSV (step,t,U[,Y])."""

    def __init__(self, path):
        self.path = str(path)
        self._U = read_trajectory_csv(self.path)

    @property
    def U(self):
        return self._U.copy()

    def reset(self, U0, grid, episode_seed=None):
        if self._U.size != grid.M + 1:
            raise ConfigurationError(
                f"{self.path}: trajectory has {self._U.size} samples, "
                f"grid wants {grid.M + 1}")

    def control(self, m, t, y_prev):
        return self._U[m]

    def describe(self):
        return f"file:{self.path}"


class RolloutResult:
    """Boundary input/output trajectories plus the full state history."""

    def __init__(self, U, Y, states):
        self.U = U
        self.Y = Y
        self.states = states

    def __iter__(self):  # allow U, Y, states = rollout(...)
        return iter((self.U, self.Y, self.states))


def rollout(env_cfg, controller, U0, grid=None, episode_seed=None):
    """Run one closed-loop episode from the constant profile u(x,0) = U0."""
    if not np.isfinite(U0):
        raise ConfigurationError("U0 must be finite")
    grid = grid if grid is not None else env_cfg.grid
    if grid != env_cfg.grid:
        env_cfg = _with_grid(env_cfg, grid)
    step = _stepper(env_cfg)
    out = env_cfg.output_index
    dt = grid.dt
    state = PdeState1D(np.full(env_cfg.n_points, float(U0)))
    U = np.empty(grid.M + 1)
    Y = np.empty(grid.M + 1)
    states = [state]
    U[0] = float(U0)
    Y[0] = state.values[out]
    controller.reset(float(U0), grid, episode_seed)
    for m in range(1, grid.M + 1):
        u_m = float(controller.control(m, m * dt, Y[m - 1]))
        if not np.isfinite(u_m):
            raise ConfigurationError(f"controller produced non-finite U at step {m}")
        try:
            state = step(state, u_m, env_cfg)
        except SimulationDivergedError as exc:
            exc.step = m
            raise
        U[m] = u_m
        Y[m] = state.values[out]
        states.append(state)
    return RolloutResult(U, Y, states)


def rollout_inputs(env_cfg, U, grid=None):
    """Run one episode applying a precomputed boundary input sequence.

    Replaying the U recorded by a closed-loop rollout reproduces its states
    bitwise (the step arithmetic is identical).
    """
    grid = grid if grid is not None else env_cfg.grid
    U = np.asarray(U, dtype=np.float64)
    if U.shape != (grid.M + 1,):
        raise ConfigurationError(
            f"input trajectory has shape {U.shape}, grid wants {(grid.M + 1,)}")
    if grid != env_cfg.grid:
        env_cfg = _with_grid(env_cfg, grid)
    step = _stepper(env_cfg)
    out = env_cfg.output_index
    state = PdeState1D(np.full(env_cfg.n_points, float(U[0])))
    Y = np.empty(grid.M + 1)
    states = [state]
    Y[0] = state.values[out]
    for m in range(1, grid.M + 1):
        try:
            state = step(state, U[m], env_cfg)
        except SimulationDivergedError as exc:
            exc.step = m
            raise
        Y[m] = state.values[out]
        states.append(state)
    return RolloutResult(U.copy(), Y, states)


def _with_grid(cfg, grid):
    if isinstance(cfg, HyperbolicConfig):
        return HyperbolicConfig(cfg.beta, cfg.n_points, grid, cfg.substeps)
    return ParabolicConfig(cfg.eps, cfg.lam, cfg.n_points, grid, cfg.x_out)


_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def stabilization_reward(states):
    """-(1/n) sum_m ||u(., t_m)||^2_{L2[0,1]} with trapezoidal quadrature."""
    if len(states) == 0:
        raise ConfigurationError("empty state sequence")
    total = 0.0
    for s in states:
        values = s.values if isinstance(s, PdeState1D) else np.asarray(s, float)
        total += _trapezoid(values**2, dx=1.0 / (values.size - 1))
    return -total / len(states)


def write_states_csv(path, states, grid):
    """State-snapshot CSV: header step,t,x,u; one row per (step, spatial point)."""
    dt = grid.dt
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "t", "x", "u"])
        for m, s in enumerate(states):
            values = s.values if isinstance(s, PdeState1D) else np.asarray(s, float)
            dx = 1.0 / (values.size - 1)
            t = fmt(m * dt)
            for i, v in enumerate(values):
                writer.writerow([m, t, fmt(i * dx), fmt(v)])


def write_trajectory_csv(path, U, grid, Y=None):
    """Boundary trajectory CSV: step,t,U[,Y]."""
    U = np.asarray(U, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["step", "t", "U"] + (["Y"] if Y is not None else [])
        writer.writerow(header)
        for m in range(U.size):
            row = [m, fmt(m * grid.dt), fmt(U[m])]
            if Y is not None:
                row.append(fmt(Y[m]))
            writer.writerow(row)


def read_trajectory_csv(path):
    """Read back the U column of a boundary trajectory CSV."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or "U" not in header:
            raise ConfigurationError(f"{path}: missing U column")
        u_col = header.index("U")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out.append(float(row[u_col]))
            except (ValueError, IndexError) as exc:
                raise ConfigurationError(f"{path}:{lineno}: bad row") from exc
    return np.asarray(out, dtype=np.float64)
