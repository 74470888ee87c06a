"""Online actor-critic Q-learning with hard-sparsity support pursuit.

The critic tracks the half-vectorized kernel of the quadratic state-action
value; the actor is a feedback gain whose off-diagonal-block cardinality is
capped at a budget ``s``.  Learning starts from the Riccati solution of the
nominal model and runs against an opaque plant handle (measurements only),
alternating normalized-gradient critic updates with restricted-Newton actor
steps whose descent support is pursued from the largest gradient entries and
pruned back to the budget after every step.  Once the critic settles, the
support is frozen and only the surviving gains keep adapting.
"""

from __future__ import annotations

import time as _time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DivergenceError, IllConditionedError
from .lqr import CostWeights, Kernel, lqr_gain, nominal_kernel
from .model import BlockStructure, SmallSignalModel, card_off

_G22_MAX_COND = 1e8


# ---------------------------------------------------------------------------
# Half-vectorization and the quadratic regression basis
# ---------------------------------------------------------------------------

def _triu_pairs(d: int):
    iu, ju = np.triu_indices(d)
    return iu, ju


def vech_dim(d: int) -> int:
    return d * (d + 1) // 2


def vech(g) -> np.ndarray:
    """Upper-triangular stack of a symmetric matrix, off-diagonals doubled.

    The weighting makes ``vech(G) @ basis(U) == U @ G @ U`` hold exactly for
    every symmetric G, which is what the critic regression relies on.
    """
    g = np.atleast_2d(np.asarray(g, dtype=float))
    scale = max(1.0, np.abs(g).max()) if g.size else 1.0
    if not np.allclose(g, g.T, rtol=0, atol=1e-10 * scale):
        raise ValueError("vech requires a symmetric matrix")
    iu, ju = _triu_pairs(g.shape[0])
    w = g[iu, ju].copy()
    w[iu != ju] *= 2.0
    return w


def unvech(w) -> np.ndarray:
    """Inverse of :func:`vech`; always returns an exactly symmetric matrix."""
    w = np.asarray(w, dtype=float).ravel()
    d = int((np.sqrt(8 * w.size + 1) - 1) / 2)
    if vech_dim(d) != w.size:
        raise ValueError(f"vector of length {w.size} is not a half-vectorization")
    iu, ju = _triu_pairs(d)
    g = np.zeros((d, d))
    vals = np.where(iu == ju, w, 0.5 * w)
    g[iu, ju] = vals
    g[ju, iu] = vals
    return g


def basis(u_vec) -> np.ndarray:
    """Quadratic regression features U_i U_j, i <= j, row-major order."""
    u = np.asarray(u_vec, dtype=float).ravel()
    iu, ju = _triu_pairs(u.size)
    return u[iu] * u[ju]


# ---------------------------------------------------------------------------
# Learner state
# ---------------------------------------------------------------------------

@dataclass
class CriticState:
    """Kernel weight vector and its convergence bookkeeping."""

    w: np.ndarray
    alpha_c: float
    eps_w: float
    converged: bool = False

    def kernel(self, n: int, m: int) -> Kernel:
        return Kernel(g=unvech(self.w), n=n, m=m)


@dataclass
class Actor:
    """Feedback gain with explicit support and off-block cardinality budget."""

    k: np.ndarray
    support: np.ndarray
    budget_s: int
    alpha_a: float
    eps_k: float
    support_frozen: bool = False

    def card_off(self, blocks: BlockStructure) -> int:
        return card_off(self.k, blocks)


@dataclass(frozen=True)
class ExplorationNoise:
    """Multi-sine probe: per-channel amplitude times a sum of sinusoids."""

    duration: float
    frequencies: np.ndarray
    amplitudes: np.ndarray
    phases: np.ndarray

    def __post_init__(self):
        if self.duration < 0:
            raise ValueError("noise duration must be >= 0")
        freqs = np.asarray(self.frequencies, dtype=float).ravel()
        amps = np.asarray(self.amplitudes, dtype=float).ravel()
        phases = np.atleast_2d(np.asarray(self.phases, dtype=float))
        if phases.shape != (amps.size, freqs.size):
            raise ValueError("phases must be (channels, frequencies)")
        object.__setattr__(self, "frequencies", freqs)
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "phases", phases)


def exploration_input(noise: ExplorationNoise, t: float) -> np.ndarray:
    """u_PE(t): active for t <= duration, identically zero afterwards."""
    if t > noise.duration:
        return np.zeros(noise.amplitudes.size)
    s = np.sin(noise.frequencies[None, :] * t + noise.phases).sum(axis=1)
    return noise.amplitudes * s


def default_noise(m: int, p: int, amplitude: float, rng,
                  duration: float = 2.0, n_freq: int | None = None,
                  freq_lo: float = 0.1, freq_hi: float = 60.0) -> ExplorationNoise:
    """Log-spaced probe frequencies, at least 120 and at least p/2 of them."""
    if n_freq is None:
        n_freq = max(120, -(-p // 2))
    freqs = np.geomspace(freq_lo, freq_hi, n_freq)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(m, n_freq))
    return ExplorationNoise(
        duration=duration,
        frequencies=freqs,
        amplitudes=np.full(m, float(amplitude)),
        phases=phases,
    )


@dataclass
class LearnerConfig:
    """Tuning knobs of one learning run (Table-style symbols in comments)."""

    sample_period: float = 0.02      # T
    alpha_c: float = 100.0           # critic rate
    alpha_a: float = 1.0             # actor rate (gradient fallback)
    eps_w: float = 1e-5
    eps_k: float = 1e-5
    budget_s: int | None = None      # None = m*n (no off-block constraint)
    newton_step: float = 0.5         # lambda
    max_iters: int = 4000
    cg_iters: int = 50
    cg_damping: float = 1e-6
    substeps: int = 20
    critic_patience: int = 10        # consecutive small critic steps before freeze
    count_self_links: bool = False
    include_p_term: bool = True
    divergence_factor: float = 1e6
    # Subtract the known injected probe's pathwise contribution from the
    # critic regressor.  Without it the raw window regression admits the
    # "greedy gain equals current policy" kernel as a stationary point and
    # the loop cannot leave its warm start; compensation makes the regression
    # exactly Bellman-consistent and reduces to the raw form once the probe
    # is off.
    noise_compensation: bool = True
    comp_quad_points: int = 33       # per-window quadrature grid (odd)

    def __post_init__(self):
        if self.sample_period <= 0:
            raise ValueError("sample_period must be positive")
        if not 0.0 < self.newton_step <= 1.0:
            raise ValueError("newton_step must lie in (0, 1]")
        if self.alpha_c < 10.0 * self.alpha_a:
            warnings.warn(
                "critic rate should dominate the actor rate (alpha_c >= 10*alpha_a)",
                stacklevel=2,
            )


# ---------------------------------------------------------------------------
# Critic
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransitionWindow:
    """Endpoint (state, input) stacks and the running-cost integral."""

    u_start: np.ndarray
    u_end: np.ndarray
    cost: float


def critic_error(w, window: TransitionWindow) -> float:
    """Bellman window error: w . (basis(U_t) - basis(U_{t-T})) + window cost."""
    w = np.asarray(w, dtype=float).ravel()
    u0 = np.asarray(window.u_start, dtype=float).ravel()
    u1 = np.asarray(window.u_end, dtype=float).ravel()
    if u0.size != u1.size or vech_dim(u0.size) != w.size:
        raise ValueError("window endpoints do not match the critic dimension")
    sigma = basis(u1) - basis(u0)
    return float(w @ sigma + window.cost)


def critic_update(w, e_c: float, sigma, alpha_c: float, dt: float) -> np.ndarray:
    """Normalized gradient step w - dt * alpha_c * sigma * e_c / (1+|sigma|^2)^2."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    w = np.asarray(w, dtype=float).ravel()
    sigma = np.asarray(sigma, dtype=float).ravel()
    denom = (1.0 + sigma @ sigma) ** 2
    return w - dt * alpha_c * sigma * (e_c / denom)


def probe_compensation(x_start, x_end, k_policy, noise: ExplorationNoise,
                       t_start: float, t_end: float,
                       quad_points: int = 33) -> np.ndarray:
    """Regressor correction removing the known probe signal from a window.

    Along x' = A x + B(-Kx + e) the policy-consistent kernel G satisfies,
    pathwise and for any probe e,

        d/dt [U'GU] + x'Qx + u'Ru
            = d/dt [2x'(G12 - K'G22)e + e'G22 e]
              + 2e'(G21 - G22 K)x + e'G22 e,

    so subtracting the right-hand side (a known linear form in G, since e is
    the injected probe) from the raw window error leaves a regression whose
    exact solution is the consistent kernel.  Returns that linear form in
    half-vectorized coordinates; subtract it from sigma.  The intra-window
    state is approximated by linear interpolation between the endpoints
    (O(T^2) quadrature bias); the probe itself is evaluated exactly.
    """
    x0 = np.asarray(x_start, dtype=float).ravel()
    x1 = np.asarray(x_end, dtype=float).ravel()
    k_policy = np.asarray(k_policy, dtype=float)
    m, n = k_policy.shape
    if quad_points < 3 or quad_points % 2 == 0:
        raise ValueError("quad_points must be odd and >= 3")

    taus = np.linspace(t_start, t_end, quad_points)
    # probe samples (m, P); zero beyond the probe duration
    angle = (noise.frequencies[None, :, None] * taus[None, None, :]
             + noise.phases[:, :, None])
    e_grid = noise.amplitudes[:, None] * np.sin(angle).sum(axis=1)
    e_grid[:, taus > noise.duration] = 0.0
    # linear state interpolant (n, P)
    frac = (taus - t_start) / (t_end - t_start)
    x_grid = x0[:, None] * (1.0 - frac)[None, :] + x1[:, None] * frac[None, :]

    h = (t_end - t_start) / (quad_points - 1)
    weights = np.ones(quad_points)
    weights[1:-1:2] = 4.0
    weights[2:-1:2] = 2.0
    weights *= h / 3.0

    m_cross = (x_grid * weights[None, :]) @ e_grid.T        # int x e'
    n_ee = (e_grid * weights[None, :]) @ e_grid.T           # int e e'
    e0, e1 = e_grid[:, 0], e_grid[:, -1]
    s = m_cross + (np.outer(x1, e1) - np.outer(x0, e0))
    t2 = n_ee + (np.outer(e1, e1) - np.outer(e0, e0))
    ks = k_policy @ s
    phi = np.zeros((n + m, n + m))
    phi[:n, n:] = s
    phi[n:, :n] = s.T
    phi[n:, n:] = t2 - (ks + ks.T)
    iu, ju = _triu_pairs(n + m)
    return phi[iu, ju]


# ---------------------------------------------------------------------------
# Actor
# ---------------------------------------------------------------------------

def _greedy_gain(kernel: Kernel) -> np.ndarray:
    cond = np.linalg.cond(kernel.g22)
    if not np.isfinite(cond) or cond > _G22_MAX_COND:
        raise IllConditionedError(
            f"critic G22 block is ill conditioned (cond={cond:.3e}); halting"
        )
    return kernel.greedy_gain()


def actor_error(k, kernel_hat: Kernel, x) -> np.ndarray:
    """Gap between the actor policy and the critic-greedy policy at x."""
    k = np.asarray(getattr(k, "k", k), dtype=float)
    x = np.asarray(x, dtype=float).ravel()
    return k @ x - _greedy_gain(kernel_hat) @ x


def actor_gradient(k, kernel_hat: Kernel, x) -> np.ndarray:
    """Exact gradient of |e_a|^2 in the gain for fixed kernel and state."""
    x = np.asarray(x, dtype=float).ravel()
    return 2.0 * np.outer(actor_error(k, kernel_hat, x), x)


def _stable_top_mask(values: np.ndarray, candidates: np.ndarray, count: int) -> np.ndarray:
    """Support of the `count` largest-magnitude candidate entries.

    Ties break deterministically: larger magnitude first, then row-major
    index order.  Zero entries are never selected (they are not in the
    support of anything).
    """
    mask = np.zeros_like(candidates, dtype=bool)
    if count <= 0:
        return mask
    flat_idx = np.flatnonzero(candidates.ravel())
    vals = np.abs(values.ravel()[flat_idx])
    order = np.argsort(-vals, kind="stable")
    kept = [flat_idx[i] for i in order[:count] if vals[i] != 0.0]
    mask.ravel()[kept] = True
    return mask


def prune_gain(k: np.ndarray, s: int, blocks: BlockStructure,
               count_self_links: bool = False):
    """[K]_s: keep the s largest-magnitude budgeted entries, zero the rest.

    With the default convention only off-diagonal-block entries are ranked
    and pruned; self-block entries all survive.  With ``count_self_links``
    every entry competes (the mode in which sufficiently small budgets strip
    self-feedback too).
    """
    k = np.asarray(k, dtype=float)
    ranked = np.ones_like(k, dtype=bool) if count_self_links \
        else blocks.off_block_mask()
    keep = _stable_top_mask(k, ranked, s)
    if not count_self_links:
        keep |= ~ranked
    k_new = np.where(keep, k, 0.0)
    return k_new, k_new != 0.0


def _cg(matvec, b: np.ndarray, max_iters: int, tol: float = 1e-12):
    """Plain conjugate gradient; returns (solution, converged_cleanly)."""
    x = np.zeros_like(b)
    r = b.copy()
    rs = float(r @ r)
    b_norm = np.sqrt(rs)
    if b_norm <= tol:
        return x, True
    p = r.copy()
    for _ in range(max_iters):
        ap = matvec(p)
        pap = float(p @ ap)
        if not np.isfinite(pap) or pap <= 0.0:
            return x, False
        alpha = rs / pap
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = float(r @ r)
        if np.sqrt(rs_new) <= tol * max(1.0, b_norm):
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, True


def grasp_step(actor: Actor, kernel_hat: Kernel, sample_batch, config: LearnerConfig,
               blocks: BlockStructure):
    """One support-pursuit actor update over a batch of state samples.

    Selects the descent support from the 2s largest gradient entries merged
    with the current support, takes a damped restricted Newton step computed
    by conjugate gradient on the batch Gauss-Newton system, then prunes back
    to the cardinality budget.  Returns (new_actor, used_gradient_fallback).
    """
    xs = [np.asarray(x, dtype=float).ravel() for x in sample_batch]
    if not xs:
        raise ValueError("sample batch must be nonempty")
    k = actor.k
    kg = _greedy_gain(kernel_hat)
    xmat = np.stack(xs)                       # (batch, n)
    gram = xmat.T @ xmat
    grad = 2.0 * (k - kg) @ gram              # batch-summed gradient of |e_a|^2

    ranked = np.ones_like(k, dtype=bool) if config.count_self_links \
        else blocks.off_block_mask()
    if actor.support_frozen:
        tau = actor.support.copy()
    else:
        z = _stable_top_mask(grad, ranked, 2 * actor.budget_s)
        tau = z | actor.support
        if not config.count_self_links:
            tau |= ~ranked

    delta = np.zeros_like(k)
    fallback = False
    for r in range(k.shape[0]):
        cols = np.flatnonzero(tau[r])
        if cols.size == 0:
            continue
        xb = xmat[:, cols]

        def matvec(v, xb=xb):
            return 2.0 * (xb.T @ (xb @ v)) + config.cg_damping * v

        sol, ok = _cg(matvec, grad[r, cols], config.cg_iters)
        if not ok:
            fallback = True
            break
        delta[r, cols] = sol

    if fallback:
        k_mid = k - actor.alpha_a * np.where(tau, grad, 0.0)
    else:
        k_mid = k - config.newton_step * delta
    k_new, support = prune_gain(k_mid, actor.budget_s, blocks,
                                count_self_links=config.count_self_links)
    return replace(actor, k=k_new, support=support), fallback


# ---------------------------------------------------------------------------
# The learning loop
# ---------------------------------------------------------------------------

@dataclass
class LearnLog:
    """Per-iteration learning diagnostics."""

    iteration: list = field(default_factory=list)
    time: list = field(default_factory=list)
    e_c: list = field(default_factory=list)
    e_a_norm: list = field(default_factory=list)
    card_off: list = field(default_factory=list)
    dk: list = field(default_factory=list)
    dw: list = field(default_factory=list)
    phase: list = field(default_factory=list)
    support_changed: list = field(default_factory=list)
    window_cost: list = field(default_factory=list)

    def append(self, **kw):
        for name, value in kw.items():
            getattr(self, name).append(value)

    def __len__(self):
        return len(self.iteration)

    def to_csv(self, path) -> None:
        import csv
        import os
        import tempfile

        cols = ["iteration", "time", "e_c", "e_a_norm", "card_off",
                "dk", "dw", "phase", "support_changed", "window_cost"]
        directory = os.path.dirname(str(path)) or "."
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(cols)
                for row in zip(*(getattr(self, c) for c in cols)):
                    writer.writerow([
                        v if isinstance(v, (int, bool)) else repr(float(v))
                        for v in row
                    ])
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


@dataclass
class LearnResult:
    actor: Actor
    critic: CriticState
    log: LearnLog
    converged: bool
    iterations: int
    simulated_seconds: float
    stationarity: float
    wall_seconds: float
    warnings: list


def _random_init(n: int, m: int, rng):
    """Unstructured starting point: Wishart kernel, N(0, 1/sqrt(n)) gain."""
    d = n + m
    l = rng.standard_normal((d, d))
    g = (l @ l.T) / np.sqrt(d)
    k = rng.standard_normal((m, n)) / np.sqrt(n)
    return Kernel(g=g, n=n, m=m), k


def learn(plant, nominal: SmallSignalModel, w: CostWeights, config: LearnerConfig,
          x0, noise: ExplorationNoise | None = None, rng=None,
          init: str = "nominal") -> LearnResult:
    """Run the sparsity-constrained learning loop against a plant handle.

    The plant exposes only ``apply(control_fn) -> (x_next, window_cost)`` and
    ``current_state()``; the actual system matrices are never consulted.
    Raises DivergenceError (iterations and log attached) when the state
    exceeds ``divergence_factor`` times the initial magnitude.
    """
    t_wall = _time.perf_counter()
    rng = rng if rng is not None else np.random.default_rng(np.random.PCG64(0))
    n, m = nominal.n, nominal.m
    blocks = nominal.blocks
    p = vech_dim(n + m)
    budget = config.budget_s if config.budget_s is not None else m * n
    warn_list = []

    if init == "nominal":
        kern0 = nominal_kernel(nominal, w, include_p_term=config.include_p_term)
        k0_dense = lqr_gain(nominal, w)
    elif init == "random":
        kern0, k0_dense = _random_init(n, m, rng)
    else:
        raise ValueError(f"unknown init mode {init!r}")
    w_vec = vech(kern0.g)
    k0, support0 = prune_gain(k0_dense, budget, blocks,
                              count_self_links=config.count_self_links)
    actor = Actor(k=k0, support=support0, budget_s=budget,
                  alpha_a=config.alpha_a, eps_k=config.eps_k)
    critic = CriticState(w=w_vec, alpha_c=config.alpha_c, eps_w=config.eps_w)

    x0 = np.asarray(x0, dtype=float).ravel()
    if noise is None:
        amp = 0.05 * float(np.abs(k0_dense @ x0).max()) if x0.size else 0.0
        noise = default_noise(m, p, amp, rng)
    if noise.frequencies.size < p / 2:
        msg = (f"exploration noise has {noise.frequencies.size} frequencies, "
               f"persistence-of-excitation heuristic asks for >= {p / 2:.0f}")
        warnings.warn(msg, stacklevel=2)
        warn_list.append(msg)

    log = LearnLog()
    x = plant.current_state()
    t = plant.time
    x0_scale = max(np.linalg.norm(x0), 1e-12)
    T = config.sample_period
    consec_small = 0
    converged = False
    best = (np.inf, actor, 0)
    last_x = x

    for i in range(config.max_iters):
        k_now = actor.k

        def control(tt, xv, k_now=k_now):
            u = -k_now @ xv
            if tt <= noise.duration:
                u = u + exploration_input(noise, tt)
            return u

        u_prev = control(t, x)
        try:
            x_new, cost = plant.apply(control)
        except DivergenceError as exc:
            raise DivergenceError(
                f"plant overflow at iteration {i}: {exc}",
                last_state=exc.last_state, iterations=i, log=log,
            ) from exc
        t_new = plant.time
        if np.linalg.norm(x_new) > config.divergence_factor * x0_scale:
            raise DivergenceError(
                f"state norm {np.linalg.norm(x_new):.3e} exceeded "
                f"{config.divergence_factor:.0e} x |x0| at iteration {i}",
                last_state=x_new, iterations=i, log=log,
            )
        u_new = control(t_new, x_new)

        sigma = basis(np.concatenate([x_new, u_new])) \
            - basis(np.concatenate([x, u_prev]))
        e_c = float(critic.w @ sigma + cost)
        if not critic.converged:
            w_new = critic_update(critic.w, e_c, sigma, critic.alpha_c, T)
            dw = float(np.linalg.norm(w_new - critic.w))
            critic.w = w_new
            consec_small = consec_small + 1 if dw < critic.eps_w else 0
            if consec_small >= config.critic_patience:
                critic.converged = True
                actor.support_frozen = True
        else:
            dw = 0.0

        kernel = critic.kernel(n, m)
        actor_new, used_fallback = grasp_step(actor, kernel, [x_new], config, blocks)
        if used_fallback:
            warn_list.append(f"iteration {i}: CG breakdown, gradient step used")
        dk = float(np.linalg.norm(actor_new.k - actor.k))
        e_a = actor_error(actor_new.k, kernel, x_new)
        e_a_norm = float(np.linalg.norm(e_a))

        log.append(
            iteration=i,
            time=t_new,
            e_c=e_c,
            e_a_norm=e_a_norm,
            card_off=actor_new.card_off(blocks),
            dk=dk,
            dw=dw,
            phase=2 if critic.converged else 1,
            support_changed=bool(np.any(actor_new.support != actor.support)),
            window_cost=cost,
        )

        actor = actor_new
        x, t, last_x = x_new, t_new, x_new
        gap = e_a_norm / max(np.linalg.norm(x_new), 1e-12)
        if gap < best[0]:
            best = (gap, actor, i)
        if dk < config.eps_k:
            converged = True
            break

    iterations = len(log)
    if not converged:
        msg = (f"actor did not converge within {config.max_iters} iterations; "
               f"returning best-so-far from iteration {best[2]}")
        warnings.warn(msg, stacklevel=2)
        warn_list.append(msg)
        actor = best[1]

    kernel = critic.kernel(n, m)
    grad = actor_gradient(actor.k, kernel, last_x)
    on_support = grad[actor.support]
    stationarity = float(np.abs(on_support).max()) if on_support.size else 0.0

    return LearnResult(
        actor=actor,
        critic=critic,
        log=log,
        converged=converged,
        iterations=iterations,
        simulated_seconds=iterations * T,
        stationarity=stationarity,
        wall_seconds=_time.perf_counter() - t_wall,
        warnings=warn_list,
    )
