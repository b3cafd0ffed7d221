"""Sampler coefficients: R_t, Psi_hat, P_st, Cholesky factors and multistep weights.

Everything is obtained from the joint RK4 sweep in :mod:`gddim.kernels` and
kept in reduced block form where the layout allows it. Results are persisted
as ``<name>.npz`` plus a ``<name>.json`` manifest carrying a version hash.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import CacheError, ConditioningError, DecompositionError, DomainError, SolverAccuracyError
from .kernels import HAT, P, PSI, RF, SIG, W
from .process import DEFAULT_RK4_STEP, DiffusionSpec, _schedule_from

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_KNOTS = 10_000
DEFAULT_QUAD_STEP = 1e-5
NODE_CHUNK = 20_000
PARAM_KINDS = ("R", "L", "sqrt")


def default_eps_start(spec):
    return 1e-4 * spec.horizon


def spec_token(spec: DiffusionSpec):
    """JSON-able identity of a spec; callables fall back to their repr."""
    try:
        return spec.to_config()
    except Exception:
        return {"kind": spec.kind, "unserializable": repr(spec.params)}


def version_hash(payload):
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(blob.encode()).hexdigest()


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(type(obj))


def _sym(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def sym_sqrt(a):
    w, v = np.linalg.eigh(_sym(a))
    return np.einsum("...ij,...j,...kj->...ik", v, np.sqrt(np.clip(w, 0.0, None)), v)


def cholesky_L(sigma):
    """Lower Cholesky factor of a PSD matrix (or a stack of them)."""
    sigma = np.asarray(sigma, dtype=float)
    try:
        return np.linalg.cholesky(_sym(sigma))
    except np.linalg.LinAlgError as e:
        raise DecompositionError("matrix is not positive definite") from e


def cld_cholesky_block(sig):
    """Closed-form Cholesky of a 2x2 position/velocity covariance block."""
    sxx, sxv, svv = sig[..., 0, 0], sig[..., 0, 1], sig[..., 1, 1]
    det = sxx * svv - sxv * sxv
    if np.any(sxx <= 0) or np.any(det <= 0):
        raise DecompositionError("2x2 block is not positive definite")
    L = np.zeros(np.shape(sig))
    L[..., 0, 0] = np.sqrt(sxx)
    L[..., 1, 0] = sxv / np.sqrt(sxx)
    L[..., 1, 1] = np.sqrt(det / sxx)
    return L


def _reducible(spec, kind):
    # the Cholesky factor is not diagonal in the frequency basis
    return not (kind == "L" and spec.layout == "freq" and spec.n_blocks > 1)


def factor_blocks(spec, kind, sigma_blocks, R_blocks=None):
    """K_t in reduced form for kinds that keep the layout structure."""
    if kind == "R":
        return R_blocks
    if kind == "sqrt":
        return sym_sqrt(sigma_blocks)
    if kind == "L":
        if not _reducible(spec, kind):
            raise ValueError("L factor is dense for this layout")
        return cholesky_L(sigma_blocks)
    raise ValueError(f"unknown param kind {kind!r}")


def dense_factor(spec, kind, sigma_blocks, R_blocks=None):
    """K_t as a dense (..., D, D) matrix."""
    if _reducible(spec, kind):
        return spec.expand(factor_blocks(spec, kind, sigma_blocks, R_blocks))
    return cholesky_L(spec.expand(sigma_blocks))


def _initial_factor_state(spec, eps_start, rk4_step, lam):
    Y = kernels.initial_state(spec)
    if eps_start > 0:
        kernels.advance(spec, 0.0, Y, [eps_start], rk4_step, lam=lam, phase=0)
    return kernels.start_factor(Y)


# ---------------------------------------------------------------------------
# CoefficientTable


@dataclass(eq=False)
class CoefficientTable:
    """Psi(t,0), Sigma_t, R_t and Psi_hat(t, eps_start) on a dense knot grid.

    Arrays are reduced blocks of shape (n_knots, b, k, k). ``psihat0`` is
    referenced to ``eps_start`` because F_hat is singular at t = 0; transitions
    Psi_hat(t, s) do not depend on the reference point.
    """

    spec: DiffusionSpec
    lam: float
    eps_start: float
    grid: np.ndarray
    psi0: np.ndarray
    sigma: np.ndarray
    R: np.ndarray
    psihat0: np.ndarray
    rk4_step: float = DEFAULT_RK4_STEP
    interpolation: str = "rk4"
    version_hash: str = ""
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, spec, lam=0.0, eps_start=None, n_knots=DEFAULT_KNOTS, extra_knots=(), rk4_step=DEFAULT_RK4_STEP):
        eps = default_eps_start(spec) if eps_start is None else float(eps_start)
        if not (0 < eps < spec.horizon):
            raise DomainError(f"eps_start={eps} must lie in (0, T)")
        extra = np.asarray(extra_knots, dtype=float)
        spec.check_time(extra, lo=eps) if extra.size else None
        grid = table_knots(spec, eps, n_knots, extra)
        Y = _initial_factor_state(spec, eps, rk4_step, lam)
        rec = kernels.advance(spec, eps, Y, grid, rk4_step, lam=lam, phase=1, slots=[PSI, SIG, RF, HAT])
        table = cls(
            spec=spec,
            lam=float(lam),
            eps_start=eps,
            grid=grid,
            psi0=rec[:, 0],
            sigma=rec[:, 1],
            R=rec[:, 2],
            psihat0=rec[:, 3],
            rk4_step=rk4_step,
        )
        table.version_hash = table.expected_hash()
        return table

    def settings(self):
        return table_settings(self.spec, self.lam, self.eps_start, self.grid, self.rk4_step)

    def expected_hash(self):
        return version_hash({"table": self.settings()})

    # -- queries ----------------------------------------------------------

    def _blocks_at(self, t):
        """(psi0, sigma, R, psihat0) reduced blocks at time t."""
        t = float(t)
        self.spec.check_time(t, lo=self.eps_start)
        t = min(max(t, self.eps_start), self.spec.horizon)
        i = int(np.searchsorted(self.grid, t, side="right")) - 1
        i = max(0, min(i, self.grid.size - 1))
        if self.grid[i] == t:
            return self.psi0[i], self.sigma[i], self.R[i], self.psihat0[i]
        hit = self._cache.get(t)
        if hit is not None:
            return hit
        if self.interpolation == "linear" and i + 1 < self.grid.size:
            a = (t - self.grid[i]) / (self.grid[i + 1] - self.grid[i])
            out = tuple((1 - a) * arr[i] + a * arr[i + 1] for arr in (self.psi0, self.sigma, self.R, self.psihat0))
        else:
            Y = np.zeros((kernels.N_SLOTS,) + self.psi0.shape[1:])
            Y[PSI], Y[SIG], Y[RF], Y[HAT] = self.psi0[i], self.sigma[i], self.R[i], self.psihat0[i]
            Y[W] = np.eye(self.psi0.shape[-1])
            rec = kernels.advance(self.spec, self.grid[i], Y, [t], self.rk4_step, lam=self.lam, phase=1, slots=[PSI, SIG, RF, HAT])
            out = tuple(rec[0, j] for j in range(4))
        self._cache[t] = out
        return out

    def psi0_at(self, t):
        return self.spec.expand(self._blocks_at(t)[0])

    def sigma_at(self, t):
        return self.spec.expand(self._blocks_at(t)[1])

    def R_at(self, t):
        return self.spec.expand(self._blocks_at(t)[2])

    def factor(self, t, kind="R"):
        _, sig, R, _ = self._blocks_at(t)
        return dense_factor(self.spec, kind, sig, R)

    def transition(self, t, s):
        """Psi(t, s) from the tabulated Psi(., 0)."""
        if t == s:
            return np.eye(self.spec.dim_state)
        pt, ps = self._blocks_at(t)[0], self._blocks_at(s)[0]
        return self.spec.expand(pt @ np.linalg.inv(ps))

    def hat_transition(self, t, s):
        if t == s:
            return np.eye(self.spec.dim_state)
        ht, hs = self._blocks_at(t)[3], self._blocks_at(s)[3]
        return self.spec.expand(ht @ np.linalg.inv(hs))

    def factor_residual(self):
        """max_k ||R R^T - Sigma||_F / ||Sigma||_F over the knots (dense norms)."""
        res = self.R @ np.swapaxes(self.R, -1, -2) - self.sigma
        # Frobenius norms of the expanded matrices; the layouts are orthogonal maps
        scale = self._dense_fro_weight()
        num = np.sqrt(np.sum(scale * np.sum(res**2, axis=(-1, -2)), axis=-1))
        den = np.sqrt(np.sum(scale * np.sum(self.sigma**2, axis=(-1, -2)), axis=-1))
        return float(np.max(num / den))

    def _dense_fro_weight(self):
        if self.spec.layout == "kron":
            return self.spec.dim_data
        return 1.0

    # -- persistence --------------------------------------------------------

    def save(self, directory, name=None):
        name = name or f"table_lam{self.lam:g}"
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, name)
        np.savez(path + ".npz", grid=self.grid, psi0=self.psi0, sigma=self.sigma, R=self.R, psihat0=self.psihat0)
        manifest = {"type": "CoefficientTable", "version_hash": self.version_hash, "settings": self.settings(),
                    "n_knots": int(self.grid.size), "block_shape": list(self.psi0.shape[1:])}
        with open(path + ".json", "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True, default=_json_default)
        return path

    @classmethod
    def load(cls, path, spec, expected_hash=None):
        man = _read_manifest(path)
        if expected_hash is not None and man["version_hash"] != expected_hash:
            raise CacheError(f"stale coefficient cache at {path}: hash {man['version_hash'][:12]} != {expected_hash[:12]}")
        with np.load(path + ".npz") as z:
            arrs = {k: z[k] for k in z.files}
        s = man["settings"]
        table = cls(spec=spec, lam=s["lambda"], eps_start=s["eps_start"], rk4_step=s["rk4_step"],
                    version_hash=man["version_hash"], **arrs)
        if table.expected_hash() != man["version_hash"]:
            raise CacheError(f"coefficient cache at {path} does not match the given spec")
        return table


def table_knots(spec, eps_start, n_knots=DEFAULT_KNOTS, extra_knots=()):
    """The knot grid ``CoefficientTable.build`` would use."""
    extra = np.asarray(extra_knots, dtype=float)
    return np.unique(np.concatenate([np.linspace(eps_start, spec.horizon, n_knots), extra]))


def table_settings(spec, lam, eps_start, grid, rk4_step):
    return {
        "spec": spec_token(spec),
        "lambda": float(lam),
        "eps_start": float(eps_start),
        "grid_sha": hashlib.sha256(np.ascontiguousarray(grid, dtype=float).tobytes()).hexdigest(),
        "rk4_step": rk4_step,
        "version": FORMAT_VERSION,
    }


def table_hash(spec, lam, eps_start, grid, rk4_step=DEFAULT_RK4_STEP):
    return version_hash({"table": table_settings(spec, lam, eps_start, grid, rk4_step)})


def read_manifest(path):
    return _read_manifest(path)


def _read_manifest(path):
    try:
        with open(path + ".json") as f:
            return json.load(f)
    except (OSError, ValueError) as e:
        raise CacheError(f"cannot read cache manifest {path}.json: {e}") from e


# ---------------------------------------------------------------------------
# stand-alone solves


def solve_R(spec, eps_start=None, n_knots=DEFAULT_KNOTS, rk4_step=DEFAULT_RK4_STEP):
    """Knots and dense R_t solving dR/dt = (F + 1/2 G G^T Sigma^{-1}) R."""
    table = CoefficientTable.build(spec, 0.0, eps_start, n_knots=n_knots, rk4_step=rk4_step)
    return table.grid, spec.expand(table.R)


def _ddpm_alpha(spec, t):
    return float(_schedule_from(spec.params["schedule"]).alpha(t))


def solve_hat_transition(spec, lam, t, s, eps_start=None, rk4_step=DEFAULT_RK4_STEP):
    """Psi_hat(t, s), the transition matrix of F + (1+lam^2)/2 G G^T Sigma^{-1}."""
    eps = default_eps_start(spec) if eps_start is None else eps_start
    spec.check_time([t, s], lo=eps)
    if t == s:
        return np.eye(spec.dim_state)
    if spec.kind == "ddpm":
        at, as_ = _ddpm_alpha(spec, t), _ddpm_alpha(spec, s)
        val = ((1 - at) / (1 - as_)) ** ((1 + lam * lam) / 2) * (as_ / at) ** (lam * lam / 2)
        return val * np.eye(spec.dim_state)
    rec = kernels.integrate_forward(spec, [t, s], rk4_step, lam=lam, eps_start=eps)
    h = rec["psihat"]
    return spec.expand(h[0] @ np.linalg.inv(h[1]))


def ddpm_sigma_sq(alpha_s, alpha_t, lam):
    """Closed-form noise variance of one DDPM step s -> t (t < s)."""
    r = ((1 - alpha_t) / (1 - alpha_s)) ** (lam * lam) * (alpha_s / alpha_t) ** (lam * lam)
    return (1 - alpha_t) * (1 - r)


def check_psd(P, tol=1e-10, what="P_st"):
    w = np.linalg.eigvalsh(_sym(P))
    if np.any(w < -tol):
        raise SolverAccuracyError(f"{what} has eigenvalue {w.min():.3g} below -{tol:g}")
    return w


def solve_P(spec, lam, s, t, eps_start=None, rk4_step=DEFAULT_RK4_STEP):
    """Covariance P_st of the exact stochastic step from s down to t (s >= t)."""
    eps = default_eps_start(spec) if eps_start is None else eps_start
    spec.check_time([t, s], lo=eps)
    if s < t:
        raise DomainError("solve_P expects s >= t (a reverse-time step)")
    D = spec.dim_state
    if lam == 0 or s == t:
        return np.zeros((D, D))
    if spec.kind == "ddpm":
        return ddpm_sigma_sq(_ddpm_alpha(spec, s), _ddpm_alpha(spec, t), lam) * np.eye(D)
    Y = _initial_factor_state(spec, eps, rk4_step, lam)
    rec = kernels.advance(spec, eps, Y, [t, s], rk4_step, lam=lam, phase=1, slots=[P], reset=[True, False])
    out = _sym(spec.expand(rec[1, 0]))
    check_psd(out)
    return out


# ---------------------------------------------------------------------------
# multistep coefficients


def lagrange_basis(nodes, tau):
    """ell_j(tau) for each node j; shape (len(tau), len(nodes))."""
    nodes = np.asarray(nodes, dtype=float)
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    out = np.ones((tau.size, nodes.size))
    for j in range(nodes.size):
        for k in range(nodes.size):
            if k != j:
                out[:, j] *= (tau - nodes[k]) / (nodes[j] - nodes[k])
    return out


def predictor_nodes(grid, i, q):
    """Node times t_{i+j}, j = 0..q_cur-1, for the step t_i -> t_{i-1}."""
    N = grid.size - 1
    qc = min(q, N - i + 1)
    return grid[i : i + qc]


def corrector_nodes(grid, i, q):
    """Node times t_{i+j}, j = -1..q_cur-2."""
    N = grid.size - 1
    qc = min(q, N - i + 2)
    return grid[i - 1 : i - 1 + qc]


def quadrature_rule(a, b, step, rule="gauss3"):
    n = max(1, int(math.ceil((b - a) / step - 1e-9)))
    edges = np.linspace(a, b, n + 1)
    h = np.diff(edges)
    if rule == "midpoint":
        return edges[:-1] + 0.5 * h, h.copy()
    if rule == "gauss3":
        x, w = np.polynomial.legendre.leggauss(3)
        nodes = edges[:-1, None] + 0.5 * h[:, None] * (x[None, :] + 1.0)
        weights = 0.5 * h[:, None] * w[None, :]
        return nodes.ravel(), weights.ravel()
    raise ValueError(f"unknown quadrature rule {rule!r}")


@dataclass(eq=False)
class MultistepCoeffs:
    """Per-step coefficients for a fixed sample grid, order q, lambda and kind.

    ``sample_grid`` is increasing (t_0 = eps_start, t_N = T); step ``i`` moves
    t_i -> t_{i-1} and is stored at index ``i - 1``. Matrices are dense.
    """

    sample_grid: np.ndarray
    q: int
    lam: float
    kind: str
    psi_step: np.ndarray  # (N, D, D) Psi(t_{i-1}, t_i)
    predictor: np.ndarray  # (N, q, D, D), j = 0..q-1
    pred_order: np.ndarray  # (N,)
    corrector: np.ndarray  # (N, q, D, D), j = -1..q-2 stored at slot j+1
    corr_order: np.ndarray
    hat_step: np.ndarray  # (N, D, D) Psi_hat(t_{i-1}, t_i)
    P_step: np.ndarray  # (N, D, D) covariance of the stochastic step
    K_grid: np.ndarray  # (N+1, D, D) factor K at the grid points
    settings: dict = field(default_factory=dict)
    version_hash: str = ""

    @property
    def N(self):
        return self.sample_grid.size - 1

    def save(self, directory, name=None):
        name = name or f"multistep_q{self.q}_lam{self.lam:g}_{self.kind}"
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, name)
        arrs = {k: getattr(self, k) for k in _MS_ARRAYS}
        np.savez(path + ".npz", **arrs)
        man = {"type": "MultistepCoeffs", "version_hash": self.version_hash, "settings": self.settings,
               "q": self.q, "lambda": self.lam, "kind": self.kind}
        with open(path + ".json", "w") as f:
            json.dump(man, f, indent=1, sort_keys=True, default=_json_default)
        return path

    @classmethod
    def load(cls, path, expected_hash=None):
        man = _read_manifest(path)
        if expected_hash is not None and man["version_hash"] != expected_hash:
            raise CacheError(f"stale multistep cache at {path}")
        with np.load(path + ".npz") as z:
            arrs = {k: z[k] for k in z.files}
        return cls(q=man["q"], lam=man["lambda"], kind=man["kind"], settings=man["settings"],
                   version_hash=man["version_hash"], **arrs)


_MS_ARRAYS = ("sample_grid", "psi_step", "predictor", "pred_order", "corrector", "corr_order",
              "hat_step", "P_step", "K_grid")


def multistep_settings(spec, sample_grid, q, lam, kind, rk4_step, quad_step, rule):
    return {
        "spec": spec_token(spec),
        "sample_grid": [float(x) for x in sample_grid],
        "q": int(q),
        "lambda": float(lam),
        "kind": kind,
        "rk4_step": rk4_step,
        "quad_step": quad_step,
        "quadrature": rule,
        "version": FORMAT_VERSION,
    }


def build_multistep(spec, sample_grid, qs=(1,), lam=0.0, kinds=("R",), rk4_step=DEFAULT_RK4_STEP,
                    quad_step=DEFAULT_QUAD_STEP, rule="gauss3", return_table=False):
    """Multistep and stochastic-step coefficients from a single sweep.

    Returns ``{(q, kind): MultistepCoeffs}``; with ``return_table`` also a
    CoefficientTable whose knots are the sample grid (enough for samplers
    that only query grid times). The C_ij integrals are
    C_ij = 1/2 Psi(t_{i-1}, 0) int_{t_i}^{t_{i-1}} Psi(tau, 0)^{-1} G G^T K_tau^{-T} ell_j(tau) dtau,
    an integral against the direction of time, evaluated by composite quadrature.
    """
    grid = np.asarray(sample_grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise DomainError("sample grid must be strictly increasing with at least two points")
    eps = grid[0]
    spec.check_time(grid, lo=eps)
    if eps <= 0:
        raise DomainError("sample grid must start at eps_start > 0")
    qs = sorted({int(q) for q in qs})
    if qs[0] < 1:
        raise ValueError("q must be >= 1")
    N = grid.size - 1
    D = spec.dim_state
    Y = _initial_factor_state(spec, eps, rk4_step, lam)

    # node sets per step, deduplicated across q
    sets = {i: [] for i in range(1, N + 1)}
    for q in qs:
        for i in range(1, N + 1):
            for nodes in (predictor_nodes(grid, i, q), corrector_nodes(grid, i, q)):
                if tuple(nodes) not in sets[i]:
                    sets[i].append(tuple(nodes))

    psi_grid = np.empty((N + 1, D, D))
    hat_step = np.empty((N, D, D))
    P_step = np.empty((N, D, D))
    K_grid = {kind: np.empty((N + 1, D, D)) for kind in kinds}
    integrals = {kind: {} for kind in kinds}
    psi_blocks = np.empty((N + 1,) + Y.shape[1:])
    grid_state = np.empty((N + 1, 4) + Y.shape[1:])

    def record_grid(idx, state):
        psi_blocks[idx] = state[PSI]
        grid_state[idx] = state[[PSI, SIG, RF, HAT]]
        psi_grid[idx] = spec.expand(state[PSI])
        for kind in kinds:
            K_grid[kind][idx] = dense_factor(spec, kind, state[SIG], state[RF])

    record_grid(0, Y)
    for i in range(1, N + 1):
        a, b = grid[i - 1], grid[i]
        nodes, weights = quadrature_rule(a, b, quad_step, rule)
        step_sets = sets[i]
        acc = {kind: {ns: 0.0 for ns in step_sets} for kind in kinds}
        t_cur = a
        for c0 in range(0, nodes.size, NODE_CHUNK):
            tn = nodes[c0 : c0 + NODE_CHUNK]
            wn = weights[c0 : c0 + NODE_CHUNK]
            rec = kernels.advance(spec, t_cur, Y, tn, rk4_step, lam=lam, phase=1, slots=[PSI, SIG, RF])
            t_cur = tn[-1]
            _, GG = spec.blocks(tn)
            for kind in kinds:
                M = _integrand(spec, kind, rec[:, 0], rec[:, 1], rec[:, 2], GG)
                for ns in step_sets:
                    ell = lagrange_basis(ns, tn) * wn[:, None]
                    acc[kind][ns] = acc[kind][ns] + np.einsum("nj,n...->j...", ell, M)
        end = kernels.advance(spec, t_cur, Y, [b], rk4_step, lam=lam, phase=1, reset=[True])
        # the reset happened after recording, so ``end`` holds W and P of this segment
        hat_step[i - 1] = spec.expand(end[0, W])
        P_step[i - 1] = _sym(spec.expand(end[0, P]))
        record_grid(i, end[0])
        left = psi_blocks[i - 1]
        for kind in kinds:
            for ns, val in acc[kind].items():
                integrals[kind][(i, ns)] = -0.5 * _left_mul(spec, left, val)

    psi_step = np.empty((N, D, D))
    for i in range(1, N + 1):
        psi_step[i - 1] = spec.expand(psi_blocks[i - 1] @ np.linalg.inv(psi_blocks[i]))
    if lam > 0:
        for i in range(N):
            check_psd(P_step[i], what=f"P_st on step {i + 1}")

    out = {}
    for q in qs:
        pred = np.zeros((N, q, D, D))
        corr = np.zeros((N, q, D, D))
        po = np.zeros(N, dtype=np.int64)
        co = np.zeros(N, dtype=np.int64)
        for kind in kinds:
            for i in range(1, N + 1):
                pn = tuple(predictor_nodes(grid, i, q))
                cn = tuple(corrector_nodes(grid, i, q))
                po[i - 1], co[i - 1] = len(pn), len(cn)
                pred[i - 1, : len(pn)] = integrals[kind][(i, pn)]
                corr[i - 1, : len(cn)] = integrals[kind][(i, cn)]
            st = multistep_settings(spec, grid, q, lam, kind, rk4_step, quad_step, rule)
            out[(q, kind)] = MultistepCoeffs(
                sample_grid=grid.copy(), q=q, lam=float(lam), kind=kind, psi_step=psi_step.copy(),
                predictor=pred.copy(), pred_order=po.copy(), corrector=corr.copy(), corr_order=co.copy(),
                hat_step=hat_step.copy(), P_step=P_step.copy(), K_grid=K_grid[kind].copy(),
                settings=st, version_hash=version_hash({"multistep": st}),
            )
    if return_table:
        table = CoefficientTable(spec=spec, lam=float(lam), eps_start=float(eps), grid=grid.copy(),
                                 psi0=grid_state[:, 0], sigma=grid_state[:, 1], R=grid_state[:, 2],
                                 psihat0=grid_state[:, 3], rk4_step=rk4_step)
        table.version_hash = table.expected_hash()
        return out, table
    return out


def _integrand(spec, kind, psi, sig, R, GG):
    """Psi(tau,0)^{-1} G G^T K^{-T} at each node; reduced or dense."""
    if _reducible(spec, kind):
        K = factor_blocks(spec, kind, sig, R)
        rhs = GG @ np.swapaxes(np.linalg.inv(K), -1, -2)
        return np.linalg.solve(psi, rhs)
    K = cholesky_L(spec.expand(sig))
    rhs = spec.expand(GG) @ np.swapaxes(np.linalg.inv(K), -1, -2)
    return np.linalg.solve(spec.expand(psi), rhs)


def _left_mul(spec, left_blocks, val):
    """Psi(t_{i-1}, 0) @ val with val reduced (j, b, k, k) or dense (j, D, D)."""
    if val.ndim == 4:
        return spec.expand(left_blocks @ val)
    return spec.expand(left_blocks) @ val


def predictor_coeffs(spec, sample_grid, q, kind="R", **kw):
    """Predictor coefficients C_ij, shape (N, q, D, D), and the per-step order."""
    ms = build_multistep(spec, sample_grid, qs=(q,), kinds=(kind,), **kw)[(q, kind)]
    return ms.predictor, ms.pred_order


def corrector_coeffs(spec, sample_grid, q, kind="R", **kw):
    """Corrector coefficients, slot j+1 holding C_ij for j = -1..q-2."""
    ms = build_multistep(spec, sample_grid, qs=(q,), kinds=(kind,), **kw)[(q, kind)]
    return ms.corrector, ms.corr_order


def check_factor(K, sigma, tol=1e-6, t=None):
    res = np.linalg.norm(K @ K.T - sigma) / np.linalg.norm(sigma)
    if res > tol:
        raise ConditioningError(f"factor residual {res:.3g} exceeds {tol:g}", t=t)
    return res
