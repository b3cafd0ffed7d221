"""Diagnostics: sliced Wasserstein, moment errors, eps traces, convergence
orders, an independent reference solver and CSV/SVG report emission."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.linalg import expm

from . import kernels
from .errors import InputError
from .kernels import PSI, SIG
from .oracle import GaussianMixture
from .process import DEFAULT_RK4_STEP, _closed_form_psi0, _closed_form_sigma0

# ---------------------------------------------------------------------------
# metrics


def _directions(dim, n, rng):
    if dim == 1:
        return np.ones((n, 1))
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _quantiles(sorted_x, m):
    # left-continuous inverse CDF at midpoints (k + 1/2) / m
    idx = np.floor((np.arange(m) + 0.5) / m * sorted_x.shape[0]).astype(np.int64)
    return sorted_x[idx]


def sliced_wasserstein(samples_a, samples_b, n_projections=128, rng=None):
    """Sliced 2-Wasserstein: sqrt of the mean squared W2 over random unit directions."""
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise InputError("sliced_wasserstein needs non-empty sample sets")
    if a.shape[1] != b.shape[1]:
        raise InputError("sample sets differ in dimension")
    if n_projections < 1:
        raise InputError("n_projections must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    dirs = _directions(a.shape[1], n_projections, rng)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    if pa.shape[0] != pb.shape[0]:
        m = max(pa.shape[0], pb.shape[0])
        pa, pb = _quantiles(pa, m), _quantiles(pb, m)
    return float(math.sqrt(np.mean((pa - pb) ** 2)))


def data_part(samples, spec):
    """The data channel of state samples (position block for CLD)."""
    return np.asarray(samples)[:, : spec.dim_data]


def moment_errors(samples, reference_mixture: GaussianMixture, spec=None):
    """(|mean - mu|, ||cov - C||_F) against the mixture's analytic moments."""
    x = np.asarray(samples, dtype=float)
    if spec is not None:
        x = data_part(x, spec)
    mu = reference_mixture.mean()
    C = reference_mixture.cov()
    m = x.mean(axis=0)
    c = np.cov(x, rowvar=False, ddof=1).reshape(C.shape) if x.shape[0] > 1 else np.zeros_like(C)
    return float(np.linalg.norm(m - mu)), float(np.linalg.norm(c - C))


# ---------------------------------------------------------------------------
# independent reference solver


def reference_grid(eps_start, horizon, n_steps):
    x = np.linspace(0.0, 1.0, n_steps + 1)
    g = eps_start + (horizon - eps_start) * x**2
    g[0], g[-1] = eps_start, horizon
    return g


def _frozen_components(means, covs, psi, sig):
    """Means, precisions and log-determinants of every component at every stage time."""
    m_t = np.einsum("sij,mj->smi", psi, means)
    C = psi[:, None] @ covs[None] @ np.swapaxes(psi, -1, -2)[:, None] + sig[:, None]
    C = 0.5 * (C + np.swapaxes(C, -1, -2))
    L = np.linalg.cholesky(C)
    Linv = np.linalg.inv(L)
    prec = np.swapaxes(Linv, -1, -2) @ Linv
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return m_t, prec, logdet


def _mixture_score_frozen(m_t, prec, logdet, log_w, u):
    if m_t.shape[0] == 1:
        return -(u - m_t[0]) @ prec[0]
    diff = u[None] - m_t[:, None, :]  # (M, n, D)
    pd = diff @ prec  # precisions are symmetric
    logp = log_w[:, None] - 0.5 * ((diff * pd).sum(-1) + logdet[:, None])
    logp -= logp.max(axis=0, keepdims=True)
    r = np.exp(logp)
    r /= r.sum(axis=0, keepdims=True)
    return -(r[..., None] * pd).sum(0)


def _van_loan_moments(spec, t):
    """Psi(t,0) and Sigma_t for a time-invariant block process via one matrix exponential.

    expm([[F, GG], [0, -F^T]] t) = [[e^{Ft}, X], [0, e^{-F^T t}]] and the
    zero-start covariance is X e^{F^T t}.
    """
    F, GG = spec.blocks(np.zeros(1))
    F, GG = F[0], GG[0]  # (b, k, k)
    b, k, _ = F.shape
    M = np.zeros((b, 2 * k, 2 * k))
    M[:, :k, :k] = F
    M[:, :k, k:] = GG
    M[:, k:, k:] = -np.swapaxes(F, -1, -2)
    E = expm(np.asarray(t)[:, None, None, None] * M[None])
    psi = E[..., :k, :k]
    sig0 = E[..., :k, k:] @ np.swapaxes(psi, -1, -2)
    sig = psi @ spec.init_block[None] @ np.swapaxes(psi, -1, -2) + sig0
    return psi, 0.5 * (sig + np.swapaxes(sig, -1, -2))


def reference_prob_flow(spec, mixture: GaussianMixture, u_T, eps_start, n_steps=10_000, rk4_step=None,
                        record_every=0):
    """Classical RK4 on the probability-flow ODE in state space, T -> eps_start.

    Psi(t,0) and Sigma_t at every RK4 stage come from closed forms (DDPM,
    BDM), a matrix exponential (CLD) or a forward transition/Lyapunov sweep, so this shares no code with the R_t or
    quadrature machinery it is used to check. Steps follow a quadratic grid.
    Returns (u_end, times, states) with states recorded every ``record_every``
    steps (empty when 0).
    """
    rk4_step = DEFAULT_RK4_STEP if rk4_step is None else rk4_step
    grid = reference_grid(eps_start, spec.horizon, n_steps)
    stage_t = np.empty(2 * n_steps + 1)
    stage_t[0::2] = grid
    stage_t[1::2] = 0.5 * (grid[:-1] + grid[1:])
    psi_b, sig_b = _closed_form_psi0(spec, stage_t), _closed_form_sigma0(spec, stage_t)
    if (psi_b is None or sig_b is None) and spec.kind == "cld":
        psi_b, sig_b = _van_loan_moments(spec, stage_t)
    if psi_b is None or sig_b is None:
        Y = kernels.initial_state(spec)
        rec = kernels.advance(spec, 0.0, Y, stage_t, rk4_step, phase=0, slots=[PSI, SIG])
        psi_b, sig_b = rec[:, 0], rec[:, 1]
    psi = spec.expand(psi_b)
    sig = spec.expand(sig_b)
    F, GG = spec.blocks(stage_t)
    F, GG = spec.expand(F), spec.expand(GG)
    means, covs = mixture.lift(spec)
    log_w = np.log(mixture.weights)
    m_t, prec, logdet = _frozen_components(means, covs, psi, sig)

    def rhs(k, u):
        s = _mixture_score_frozen(m_t[k], prec[k], logdet[k], log_w, u)
        return u @ F[k].T - 0.5 * s @ GG[k].T

    u = np.atleast_2d(np.array(u_T, dtype=float))
    times, states = [], []
    for n in range(n_steps, 0, -1):
        if record_every and (n_steps - n) % record_every == 0:
            times.append(grid[n])
            states.append(u.copy())
        h = grid[n - 1] - grid[n]
        k1 = rhs(2 * n, u)
        k2 = rhs(2 * n - 1, u + 0.5 * h * k1)
        k3 = rhs(2 * n - 1, u + 0.5 * h * k2)
        k4 = rhs(2 * n - 2, u + h * k3)
        u = u + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if record_every:
        times.append(grid[0])
        states.append(u.copy())
    return u, np.array(times), (np.stack(states) if states else np.empty((0,) + u.shape))


# ---------------------------------------------------------------------------
# eps traces


@dataclass
class EpsTrace:
    kind: str
    times: np.ndarray  # decreasing, T first
    eps: np.ndarray  # (n_times, n_traj, D)
    max_deviation: np.ndarray  # per trajectory: max_t |eps(t) - eps(T)|
    band_variation: dict = field(default_factory=dict)


def eps_constancy_trace(spec, table, oracle, param_kind, n_trajectories, grid=None, seed=0, n_steps=10_000,
                        n_record=200, u_T=None):
    """Integrate the probability-flow ODE and record eps(u(t), t) under K = ``param_kind``.

    ``grid`` (decreasing or increasing times) overrides the recording times;
    they must be a subset of the reference steps, so by default every
    ``n_steps / n_record``-th step is recorded.
    """
    from .oracle import EpsParameterization, sample_prior
    from .rng import NoiseStream

    if u_T is None:
        u_T = sample_prior(spec, table, NoiseStream(seed, "prior"), n=n_trajectories)
    every = max(1, n_steps // n_record)
    if grid is not None:
        n_steps = len(grid) - 1
        every = 1
    _, times, states = reference_prob_flow(spec, oracle.mixture, u_T, table.eps_start, n_steps=n_steps,
                                           rk4_step=table.rk4_step, record_every=every)
    param = EpsParameterization(table, param_kind)
    eps = np.stack([param.eps_from_score(t, oracle.score(t, u)) for t, u in zip(times, states)])
    dev = np.linalg.norm(eps - eps[0][None], axis=-1).max(axis=0)
    return EpsTrace(param_kind, times, eps, dev, _band_variation(eps))


def _band_variation(eps):
    """Total variation of eps in the first decile, middle and last decile of the trace."""
    steps = np.linalg.norm(np.diff(eps, axis=0), axis=-1).mean(axis=1)
    n = steps.size
    k = max(1, n // 10)
    return {"first": float(steps[:k].sum()), "middle": float(steps[k : n - k].sum()), "last": float(steps[n - k :].sum())}


# ---------------------------------------------------------------------------
# convergence


@dataclass
class ConvergenceResult:
    scheme: str
    q: int
    N_list: list
    errors: list
    slope: float
    fit_range: tuple
    exact_regime: bool = False


def fit_order(N_list, errors, floor=1e-11):
    """Least-squares slope of -log(err) vs log(N), dropping points at the error floor."""
    N = np.asarray(N_list, dtype=float)
    e = np.asarray(errors, dtype=float)
    keep = e > floor
    if keep.sum() < 2:
        return float("nan"), (), True
    idx = np.nonzero(keep)[0]
    slope = -np.polyfit(np.log(N[idx]), np.log(e[idx]), 1)[0]
    return float(slope), (int(N[idx[0]]), int(N[idx[-1]])), False


def convergence_study(spec, mixture, scheme, q, N_list, u_T, eps_start=None, param_kind="R", floor=1e-11,
                      reference=None, reference_steps=10_000, grid_kind="quadratic", table=None):
    """Endpoint error vs N against an independent RK4 reference, with a fitted order."""
    from .coeffs import CoefficientTable, build_multistep
    from .oracle import EpsParameterization, ExactEps, ScoreOracle
    from .samplers import SamplerConfig, make_time_grid, run

    if len(N_list) < 3:
        raise InputError("convergence_study needs at least three N values")
    eps_start = 1e-4 * spec.horizon if eps_start is None else eps_start
    u_T = np.atleast_2d(u_T)
    if reference is None:
        reference, _, _ = reference_prob_flow(spec, mixture, u_T, eps_start, n_steps=reference_steps)
    grids = [make_time_grid(grid_kind, n, eps_start, spec.horizon) for n in N_list]
    if table is None:
        table = CoefficientTable.build(spec, 0.0, eps_start, extra_knots=np.concatenate(grids))
    oracle = ScoreOracle(mixture, spec, table)
    eps_fn = ExactEps(oracle, EpsParameterization(table, param_kind))
    errors = []
    for n, g in zip(N_list, grids):
        cfg = SamplerConfig(scheme=scheme, q=q if scheme in ("gddim-multistep", "gddim-pc") else 1, N=n,
                            param_kind=param_kind, grid_kind=grid_kind)
        coeffs = None
        if scheme.startswith("gddim"):
            coeffs = build_multistep(spec, g, qs=(cfg.q,), kinds=(param_kind,), rk4_step=table.rk4_step)[(cfg.q, param_kind)]
        res = run(cfg, spec, eps_fn, table, coeffs, u_T=u_T)
        errors.append(float(np.max(np.linalg.norm(res.samples - reference, axis=-1))))
    slope, rng_, exact = fit_order(N_list, errors, floor)
    return ConvergenceResult(scheme, q, list(N_list), errors, slope, rng_, exact)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    scheme: str
    param_kind: str
    lam: float
    q: int
    N: int
    nfe: int
    sliced_wasserstein: float
    mean_err: float
    cov_err: float
    seed: int = 0
    wall_time: float = field(default=0.0, compare=False)

    def __post_init__(self):
        for name in ("sliced_wasserstein", "mean_err", "cov_err", "wall_time"):
            v = getattr(self, name)
            if not (v >= 0 or math.isinf(v)):
                raise InputError(f"{name} must be nonnegative, got {v}")


REPORT_FIELDS = [f.name for f in fields(MetricReport) if f.name != "wall_time"]
_INT_FIELDS = {"q", "N", "nfe", "seed"}
_FLOAT_FIELDS = {"lam", "sliced_wasserstein", "mean_err", "cov_err", "wall_time"}


def _fmt(v):
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


def write_report_csv(reports, path, with_timing=False):
    cols = REPORT_FIELDS + (["wall_time"] if with_timing else [])
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for r in reports:
            d = asdict(r)
            w.writerow([_fmt(d[c]) for c in cols])


def read_report_csv(path):
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            kw = {}
            for k, v in row.items():
                kw[k] = int(v) if k in _INT_FIELDS else float(v) if k in _FLOAT_FIELDS else v
            out.append(MetricReport(**kw))
    return out


def emit_report(reports, out_dir, name="metrics", metric="sliced_wasserstein"):
    """Write ``<name>.csv`` (deterministic), ``<name>.timing.csv`` and one SVG of metric vs NFE.

    Wall times go to the separate timing file so the metrics file is
    byte-reproducible. Curves are grouped by (scheme, param_kind, lam, q).
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {"csv": os.path.join(out_dir, f"{name}.csv"), "timing": os.path.join(out_dir, f"{name}.timing.csv"),
             "svg": os.path.join(out_dir, f"{name}_{metric}.svg")}
    write_report_csv(reports, paths["csv"])
    with open(paths["timing"], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scheme", "param_kind", "lam", "q", "N", "wall_time"])
        for r in reports:
            w.writerow([r.scheme, r.param_kind, _fmt(r.lam), r.q, r.N, _fmt(r.wall_time)])
    curves = {}
    for r in reports:
        key = f"{r.scheme} K={r.param_kind} lam={r.lam:g} q={r.q}"
        curves.setdefault(key, []).append((r.nfe, getattr(r, metric)))
    svg = line_plot_svg({k: sorted(v) for k, v in curves.items()}, xlabel="NFE", ylabel=metric, logy=True)
    with open(paths["svg"], "w") as f:
        f.write(svg)
    return paths


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#7f7f7f"]


def line_plot_svg(curves, xlabel="", ylabel="", logy=False, width=640, height=400, title=""):
    """Minimal static SVG line plot; ``curves`` maps label -> [(x, y), ...]."""
    pad_l, pad_r, pad_t, pad_b = 70, 190, 30, 50
    pts = [(x, y) for c in curves.values() for x, y in c if np.isfinite(y) and (y > 0 or not logy)]
    head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">\n'
    if not pts:
        return head + f'<text x="{width / 2}" y="{height / 2}" text-anchor="middle">no data</text>\n</svg>\n'
    tf = (lambda y: math.log10(y)) if logy else (lambda y: y)
    xs = [p[0] for p in pts]
    ys = [tf(p[1]) for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def sx(x):
        return pad_l + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return pad_t + ph - (tf(y) - y0) / (y1 - y0) * ph

    parts = [head, f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>\n']
    if title:
        parts.append(f'<text x="{pad_l + pw / 2:.1f}" y="18" text-anchor="middle">{title}</text>\n')
    for k in range(5):
        xv = x0 + (x1 - x0) * k / 4
        yv = y0 + (y1 - y0) * k / 4
        parts.append(f'<text x="{sx(xv):.1f}" y="{pad_t + ph + 16}" text-anchor="middle">{xv:.4g}</text>\n')
        ylab = f"1e{yv:.2g}" if logy else f"{yv:.3g}"
        ypix = pad_t + ph - (yv - y0) / (y1 - y0) * ph
        parts.append(f'<text x="{pad_l - 6}" y="{ypix + 4:.1f}" text-anchor="end">{ylab}</text>\n')
    parts.append(f'<text x="{pad_l + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{xlabel}</text>\n')
    parts.append(f'<text x="16" y="{pad_t + ph / 2:.1f}" text-anchor="middle" transform="rotate(-90 16 {pad_t + ph / 2:.1f})">{ylabel}</text>\n')
    for n, (label, c) in enumerate(curves.items()):
        col = _PALETTE[n % len(_PALETTE)]
        good = [(x, y) for x, y in c if np.isfinite(y) and (y > 0 or not logy)]
        if good:
            path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in good)
            parts.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{path}"/>\n')
            for x, y in good:
                parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2.5" fill="{col}"/>\n')
        ly = pad_t + 14 * n + 8
        parts.append(f'<line x1="{width - pad_r + 10}" y1="{ly}" x2="{width - pad_r + 28}" y2="{ly}" stroke="{col}" stroke-width="2"/>\n')
        parts.append(f'<text x="{width - pad_r + 32}" y="{ly + 4}">{label}</text>\n')
    parts.append("</svg>\n")
    return "".join(parts)


def emit_trace_svgs(traces, out_dir, name="eps_trace", coords=None, trajectory=0):
    """One SVG per state coordinate with the R and L traces of one trajectory side by side."""
    os.makedirs(out_dir, exist_ok=True)
    D = traces[0].eps.shape[-1]
    coords = range(D) if coords is None else coords
    paths = []
    for c in coords:
        curves = {f"K={tr.kind}": list(zip(tr.times.tolist(), tr.eps[:, trajectory, c].tolist())) for tr in traces}
        p = os.path.join(out_dir, f"{name}_coord{c}.svg")
        with open(p, "w") as f:
            f.write(line_plot_svg(curves, xlabel="t", ylabel=f"eps[{c}]", title=f"coordinate {c}"))
        paths.append(p)
    return paths
