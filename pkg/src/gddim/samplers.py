"""Sampling schemes driven by an opaque eps-callable ``(u_batch, t) -> eps_batch``.

Grids are stored increasing, ``t_0 = eps_start < ... < t_N = T``; sampling
walks them backwards and step ``i`` maps t_i to t_{i-1}.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import solve_ivp

from .coeffs import MultistepCoeffs, ddpm_sigma_sq
from .errors import CacheError, ConfigError, InvalidSigmaError, SolverAccuracyError, StiffnessError
from .oracle import EpsParameterization
from .rng import NoiseStream

log = logging.getLogger(__name__)

SCHEMES = ("gddim-det", "gddim-multistep", "gddim-pc", "gddim-stoch", "ddim-closed", "em", "prob-flow-adaptive")
GRID_KINDS = ("quadratic", "uniform")
STOCHASTIC = ("gddim-stoch", "em", "ddim-closed")


def make_time_grid(kind, N, eps_start, horizon):
    """Increasing sample grid with N steps from eps_start to horizon."""
    if N < 1:
        raise ConfigError("N must be >= 1")
    x = np.linspace(0.0, 1.0, N + 1)
    if kind == "uniform":
        g = eps_start + (horizon - eps_start) * x
    elif kind == "quadratic":
        g = eps_start + (horizon - eps_start) * x**2
    else:
        raise ConfigError(f"unknown grid kind {kind!r}; expected one of {GRID_KINDS}")
    g[0], g[-1] = eps_start, horizon
    return g


@dataclass
class SamplerConfig:
    scheme: str = "gddim-det"
    lam: float = 0.0
    N: int = 20
    q: int = 1
    param_kind: str = "R"
    grid_kind: str = "quadratic"
    rng_seed: int = 0
    batch: int = 1
    sample_grid: np.ndarray | None = None
    record_trajectory: bool = False
    record_eps: bool = False
    threads: int = 1
    rtol: float = 1e-3
    atol: float = 1e-6

    def validate(self, spec=None):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ConfigError("lambda must be a finite nonnegative number")
        if self.lam != 0 and self.scheme not in STOCHASTIC:
            raise ConfigError(f"lambda must be 0 for scheme {self.scheme}")
        if self.param_kind not in ("R", "L", "sqrt"):
            raise ConfigError(f"unknown param_kind {self.param_kind!r}")
        if self.grid_kind not in GRID_KINDS:
            raise ConfigError(f"unknown grid kind {self.grid_kind!r}")
        if self.sample_grid is not None:
            g = np.asarray(self.sample_grid, dtype=float)
            if g.ndim != 1 or g.size < 2 or np.any(np.diff(g) <= 0):
                raise ConfigError("sample_grid must be strictly increasing (stored eps_start .. T)")
            n_steps = g.size - 1
        else:
            n_steps = self.N
        if n_steps < 1:
            raise ConfigError("N must be >= 1")
        if self.q < 1 or self.q > n_steps:
            raise ConfigError(f"q={self.q} must satisfy 1 <= q <= N={n_steps}")
        if self.scheme == "gddim-det" and self.q != 1:
            raise ConfigError("gddim-det is the q = 1 scheme")
        if self.scheme == "ddim-closed" and spec is not None and spec.kind != "ddpm":
            raise ConfigError("ddim-closed is only defined for DDPM")
        if self.batch < 1 or self.threads < 1:
            raise ConfigError("batch and threads must be >= 1")
        return self

    def grid(self, eps_start, horizon):
        if self.sample_grid is not None:
            return np.asarray(self.sample_grid, dtype=float)
        return make_time_grid(self.grid_kind, self.N, eps_start, horizon)

    def to_dict(self):
        d = {k: getattr(self, k) for k in ("scheme", "lam", "N", "q", "param_kind", "grid_kind", "rng_seed", "batch")}
        if self.sample_grid is not None:
            d["sample_grid"] = [float(x) for x in self.sample_grid]
        return d


@dataclass
class RunResult:
    samples: np.ndarray
    times: np.ndarray  # visited times, T first
    nfe: int
    trajectories: np.ndarray | None = None  # (len(times), batch, D)
    eps: np.ndarray | None = None  # (n_eval_steps, batch, D) at the visited times
    diagnostics: dict = field(default_factory=dict)
    wall_time: float = 0.0


class CountingEps:
    """Wraps an eps-callable, counting logical evaluations (one per batch call).

    With ``threads > 1`` the batch is split into contiguous chunks evaluated
    in a thread pool; results are concatenated in order, so the output does
    not depend on the thread count.
    """

    def __init__(self, fn, threads=1, min_chunk=256):
        self.fn = fn
        self.count = 0
        self.threads = threads
        self.min_chunk = min_chunk

    def __call__(self, u, t):
        self.count += 1
        n = u.shape[0]
        if self.threads <= 1 or n < 2 * self.min_chunk:
            return np.asarray(self.fn(u, t), dtype=float)
        parts = np.array_split(np.arange(n), min(self.threads, n // self.min_chunk))
        with ThreadPoolExecutor(self.threads) as ex:
            outs = list(ex.map(lambda idx: np.asarray(self.fn(u[idx], t), dtype=float), parts))
        return np.concatenate(outs, axis=0)


def _counting(fn, config):
    return fn if isinstance(fn, CountingEps) else CountingEps(fn, threads=config.threads)


def prior_draw(table, config, dim):
    """u(T) ~ N(0, Sigma_T) from the config's prior stream."""
    from .oracle import sample_prior

    return sample_prior(table.spec, table, NoiseStream(config.rng_seed, "prior"), n=config.batch)


def _check_coeffs(coeffs, config, need_q=None):
    need_q = config.q if need_q is None else need_q
    if coeffs is None:
        raise CacheError("coefficients missing; run precompute first")
    if not isinstance(coeffs, MultistepCoeffs):
        raise CacheError("expected MultistepCoeffs")
    if coeffs.q != need_q or coeffs.kind != config.param_kind:
        raise CacheError(f"coefficients for q={coeffs.q}, kind={coeffs.kind} do not match q={need_q}, kind={config.param_kind}")


# ---------------------------------------------------------------------------
# deterministic exponential-integrator steps


def step_deterministic_gddim(coeffs: MultistepCoeffs, u_t, eps_t, i):
    """u(t_{i-1}) = Psi(t_{i-1}, t_i) u + C_i0 eps, with q = 1 weights."""
    if coeffs is None or not (1 <= i <= coeffs.N):
        raise CacheError(f"no coefficients for step {i}")
    if coeffs.q != 1:
        raise CacheError("step_deterministic_gddim needs q = 1 coefficients")
    return u_t @ coeffs.psi_step[i - 1].T + eps_t @ coeffs.predictor[i - 1, 0].T


def _multistep_update(coeffs, u, hist, i, which="p"):
    psi = coeffs.psi_step[i - 1]
    if which == "p":
        C, order = coeffs.predictor[i - 1], coeffs.pred_order[i - 1]
    else:
        C, order = coeffs.corrector[i - 1], coeffs.corr_order[i - 1]
    out = u @ psi.T
    for j in range(order):
        out = out + hist[j] @ C[j].T
    return out


def _finish(u, times, nfe, traj, eps_log, t0, **diag):
    return RunResult(
        samples=u,
        times=np.asarray(times),
        nfe=nfe,
        trajectories=None if traj is None else np.stack(traj),
        eps=None if eps_log is None else np.stack(eps_log),
        diagnostics=diag,
        wall_time=time.perf_counter() - t0,
    )


def run_multistep_predictor(coeffs: MultistepCoeffs, eps_fn, config: SamplerConfig, u_T):
    """Exponential multistep predictor with warm-start order ramp; nfe = N."""
    _check_coeffs(coeffs, config, config.q)
    t0 = time.perf_counter()
    f = _counting(eps_fn, config)
    start = f.count
    grid = coeffs.sample_grid
    N = coeffs.N
    u = np.array(u_T, dtype=float)
    hist = []  # eps at t_i, t_{i+1}, ... (most recent first)
    traj = [u.copy()] if config.record_trajectory else None
    eps_log = [] if config.record_eps else None
    for i in range(N, 0, -1):
        e = f(u, grid[i])
        hist.insert(0, e)
        del hist[config.q :]
        if eps_log is not None:
            eps_log.append(e)
        if config.q == 1:
            u = step_deterministic_gddim(coeffs, u, e, i)
        else:
            u = _multistep_update(coeffs, u, hist, i, "p")
        if traj is not None:
            traj.append(u.copy())
    return _finish(u, grid[::-1], f.count - start, traj, eps_log, t0)


def run_predictor_corrector(coeffs: MultistepCoeffs, eps_fn, config: SamplerConfig, u_T):
    """Predict, evaluate at the predicted point, correct; no corrector on the last step.

    Each step evaluates eps at the corrected state, plus once at the predicted
    state except on the final step, giving nfe = 2N - 1.
    """
    _check_coeffs(coeffs, config, config.q)
    t0 = time.perf_counter()
    f = _counting(eps_fn, config)
    start = f.count
    grid = coeffs.sample_grid
    N = coeffs.N
    u = np.array(u_T, dtype=float)
    hist = []
    traj = [u.copy()] if config.record_trajectory else None
    eps_log = [] if config.record_eps else None
    for i in range(N, 0, -1):
        e = f(u, grid[i])
        hist.insert(0, e)
        del hist[config.q :]
        if eps_log is not None:
            eps_log.append(e)
        pred = _multistep_update(coeffs, u, hist, i, "p")
        if i > 1:
            e_pred = f(pred, grid[i - 1])
            u = _multistep_update(coeffs, u, [e_pred] + hist, i, "c")
        else:
            u = pred
        if traj is not None:
            traj.append(u.copy())
    return _finish(u, grid[::-1], f.count - start, traj, eps_log, t0)


# ---------------------------------------------------------------------------
# stochastic steps


def noise_factor(P, tol=1e-10):
    """Cholesky factor of P_st; eigenvalues in [-tol, 0] are clipped to zero."""
    P = 0.5 * (P + P.T)
    if not np.any(P):
        return np.zeros_like(P)
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        pass
    w, v = np.linalg.eigh(P)
    if w.min() < -tol:
        raise SolverAccuracyError(f"P_st has eigenvalue {w.min():.3g} below -{tol:g}")
    log.info("P_st clipped: min eigenvalue %.3g", w.min())
    w = np.clip(w, 0.0, None)
    # triangularize the root so the factor is still lower triangular
    root = v * np.sqrt(w)
    _, r = np.linalg.qr(root.T)
    L = r.T
    return L * np.where(np.diag(L) < 0, -1.0, 1.0)[None, :]


def step_stochastic_gddim(coeffs: MultistepCoeffs, u_s, eps_s, i, z, factor=None):
    """Draw u(t_{i-1}) ~ N(Psi u + (Psi_hat - Psi) K_s eps_s, P) with normals z."""
    if coeffs is None or not (1 <= i <= coeffs.N):
        raise CacheError(f"no coefficients for step {i}")
    psi = coeffs.psi_step[i - 1]
    hat = coeffs.hat_step[i - 1]
    K_s = coeffs.K_grid[i]
    L = noise_factor(coeffs.P_step[i - 1]) if factor is None else factor
    mean = u_s @ psi.T + eps_s @ ((hat - psi) @ K_s).T
    return mean + z @ L.T


def run_stochastic_gddim(coeffs: MultistepCoeffs, eps_fn, config: SamplerConfig, u_T):
    _check_coeffs(coeffs, config, coeffs.q if coeffs is not None else 1)
    if coeffs.lam != config.lam:
        raise CacheError(f"coefficients built for lambda={coeffs.lam}, run asks for {config.lam}")
    t0 = time.perf_counter()
    f = _counting(eps_fn, config)
    start = f.count
    grid = coeffs.sample_grid
    stream = NoiseStream(config.rng_seed, "step")
    u = np.array(u_T, dtype=float)
    D = u.shape[1]
    traj = [u.copy()] if config.record_trajectory else None
    eps_log = [] if config.record_eps else None
    for i in range(coeffs.N, 0, -1):
        e = f(u, grid[i])
        if eps_log is not None:
            eps_log.append(e)
        z = stream.block(i, u.shape[0], D)
        u = step_stochastic_gddim(coeffs, u, e, i, z, noise_factor(coeffs.P_step[i - 1]))
        if traj is not None:
            traj.append(u.copy())
    return _finish(u, grid[::-1], f.count - start, traj, eps_log, t0)


def step_ddim_closed_form(schedule, u, eps, s, t, sigma_choice=0.0, z=None):
    """DDIM update from s down to t on DDPM.

    ``sigma_choice`` is either a number (sigma itself) or ``("lambda", lam)``
    to use the sigma of the lambda-family.
    """
    a_s, a_t = float(schedule.alpha(s)), float(schedule.alpha(t))
    if isinstance(sigma_choice, tuple) and sigma_choice[0] == "lambda":
        sig2 = ddpm_sigma_sq(a_s, a_t, sigma_choice[1])
    else:
        sig2 = float(sigma_choice) ** 2
    if sig2 > 1 - a_t:
        raise InvalidSigmaError(f"sigma^2={sig2:.6g} exceeds 1 - alpha_t = {1 - a_t:.6g}")
    ratio = math.sqrt(a_t / a_s)
    coef = math.sqrt(1 - a_t - sig2) - math.sqrt(1 - a_s) * ratio
    out = ratio * u + coef * eps
    if sig2 > 0:
        if z is None:
            raise ValueError("noise z required for sigma > 0")
        out = out + math.sqrt(sig2) * z
    return out


def run_ddim_closed(spec, eps_fn, config: SamplerConfig, u_T, eps_start):
    from .process import _schedule_from

    if spec.kind != "ddpm":
        raise ConfigError("ddim-closed is only defined for DDPM")
    if config.param_kind != "R":
        raise ConfigError("ddim-closed uses the R (= sqrt(1 - alpha)) parameterization")
    sched = _schedule_from(spec.params["schedule"])
    t0 = time.perf_counter()
    f = _counting(eps_fn, config)
    start = f.count
    grid = config.grid(eps_start, spec.horizon)
    stream = NoiseStream(config.rng_seed, "step")
    u = np.array(u_T, dtype=float)
    traj = [u.copy()] if config.record_trajectory else None
    eps_log = [] if config.record_eps else None
    for i in range(grid.size - 1, 0, -1):
        e = f(u, grid[i])
        if eps_log is not None:
            eps_log.append(e)
        z = stream.block(i, u.shape[0], u.shape[1]) if config.lam > 0 else None
        u = step_ddim_closed_form(sched, u, e, grid[i], grid[i - 1], ("lambda", config.lam), z)
        if traj is not None:
            traj.append(u.copy())
    return _finish(u, grid[::-1], f.count - start, traj, eps_log, t0)


# ---------------------------------------------------------------------------
# baselines on the reverse SDE / ODE


def run_em(spec, eps_fn, config: SamplerConfig, u_T, param: EpsParameterization, eps_start):
    """Euler-Maruyama on du = [F u - (1+lam^2)/2 G G^T s] dt + lam G dw, backwards."""
    t0 = time.perf_counter()
    f = _counting(eps_fn, config)
    start = f.count
    grid = config.grid(eps_start, spec.horizon)
    stream = NoiseStream(config.rng_seed, "step")
    lam = config.lam
    u = np.array(u_T, dtype=float)
    traj = [u.copy()] if config.record_trajectory else None
    eps_log = [] if config.record_eps else None
    for i in range(grid.size - 1, 0, -1):
        t = grid[i]
        h = t - grid[i - 1]
        e = f(u, t)
        if eps_log is not None:
            eps_log.append(e)
        s = param.score_from_eps(t, e)
        F = spec.drift(t)
        GG = spec.diffusion_sq(t)
        drift = u @ F.T - 0.5 * (1 + lam * lam) * s @ GG.T
        u = u - h * drift
        if lam > 0:
            G = spec.diffusion(t)
            z = stream.block(i, u.shape[0], u.shape[1])
            u = u + lam * math.sqrt(h) * z @ G.T
        if traj is not None:
            traj.append(u.copy())
    return _finish(u, grid[::-1], f.count - start, traj, eps_log, t0)


def run_adaptive_prob_flow(spec, eps_fn, config: SamplerConfig, u_T, param: EpsParameterization, eps_start,
                           rtol=None, atol=None):
    """Dormand-Prince 4(5) on the probability-flow ODE from T down to eps_start."""
    t0 = time.perf_counter()
    f = _counting(eps_fn, config)
    start = f.count
    rtol = config.rtol if rtol is None else rtol
    atol = config.atol if atol is None else atol
    u0 = np.array(u_T, dtype=float)
    shape = u0.shape

    def rhs(t, y):
        u = y.reshape(shape)
        s = param.score_from_eps(t, f(u, t))
        du = u @ spec.drift(t).T - 0.5 * s @ spec.diffusion_sq(t).T
        return du.ravel()

    sol = solve_ivp(rhs, (spec.horizon, eps_start), u0.ravel(), method="RK45", rtol=rtol, atol=atol)
    if sol.status == -1:
        t_fail = float(sol.t[-1])
        raise StiffnessError(f"adaptive solver failed: {sol.message}", t=t_fail)
    u = sol.y[:, -1].reshape(shape)
    return _finish(u, np.array([spec.horizon, eps_start]), f.count - start, None, None, t0,
                   n_steps=int(sol.t.size - 1))


# ---------------------------------------------------------------------------
# dispatcher


def run(config: SamplerConfig, spec, eps_fn, table, coeffs=None, u_T=None):
    """Run one configured scheme. ``coeffs`` must match (grid, q, lambda, kind)."""
    config.validate(spec)
    if u_T is None:
        u_T = prior_draw(table, config, spec.dim_state)
    u_T = np.atleast_2d(np.asarray(u_T, dtype=float))
    eps_start = table.eps_start
    if config.scheme in ("gddim-det", "gddim-multistep"):
        cfg = config if config.scheme == "gddim-multistep" else replace(config, q=1)
        return run_multistep_predictor(coeffs, eps_fn, cfg, u_T)
    if config.scheme == "gddim-pc":
        return run_predictor_corrector(coeffs, eps_fn, config, u_T)
    if config.scheme == "gddim-stoch":
        return run_stochastic_gddim(coeffs, eps_fn, config, u_T)
    if config.scheme == "ddim-closed":
        return run_ddim_closed(spec, eps_fn, config, u_T, eps_start)
    param = EpsParameterization(table, config.param_kind)
    if config.scheme == "em":
        return run_em(spec, eps_fn, config, u_T, param, eps_start)
    return run_adaptive_prob_flow(spec, eps_fn, config, u_T, param, eps_start)
