"""Exact scores for Gaussian-mixture data and the epsilon parameterization.

The data distribution lives on the data channel (dimension d). For augmented
processes (CLD) each component is lifted to the full state with a zero
velocity block; the velocity's initial spread enters through the process's
conditional covariance Sigma_t, so a Dirac in position stays a Dirac.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ConditioningError, InputError
from .rng import NoiseStream


@dataclass
class GaussianMixture:
    """Mixture over the data channel: weights (M,), means (M, d), covs (M, d, d)."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        M, d = self.means.shape
        if self.covs is None:
            self.covs = np.zeros((M, d, d))
        self.covs = np.asarray(self.covs, dtype=float).reshape(M, d, d)
        if self.weights.shape != (M,) or np.any(self.weights <= 0):
            raise InputError("mixture weights must be positive, one per component")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise InputError(f"mixture weights sum to {self.weights.sum()!r}, not 1")
        for c in self.covs:
            if not np.allclose(c, c.T, atol=1e-12) or np.linalg.eigvalsh(c).min() < -1e-12:
                raise InputError("component covariances must be symmetric PSD")

    @property
    def n_components(self):
        return self.weights.size

    @property
    def dim(self):
        return self.means.shape[1]

    def mean(self):
        return self.weights @ self.means

    def cov(self):
        m = self.mean()
        dev = self.means - m
        return np.einsum("m,mij->ij", self.weights, self.covs) + np.einsum("m,mi,mj->ij", self.weights, dev, dev)

    def sample(self, n, rng):
        """Draw n data points with a numpy Generator."""
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        chol = np.array([_psd_root(c) for c in self.covs])
        return self.means[comp] + np.einsum("nij,nj->ni", chol[comp], z)

    def lift(self, spec):
        """State-space means (M, D) and covs (M, D, D) for ``spec``."""
        D, d = spec.dim_state, self.dim
        if spec.dim_data != d:
            raise InputError(f"mixture dimension {d} does not match the process data dimension {spec.dim_data}")
        means = np.zeros((self.n_components, D))
        covs = np.zeros((self.n_components, D, D))
        means[:, :d] = self.means
        covs[:, :d, :d] = self.covs
        return means, covs

    def to_config(self):
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "covs": self.covs.tolist()}

    @classmethod
    def from_config(cls, cfg):
        """Build from {weights, means, covs | stds}; missing covs mean Dirac components."""
        cfg = dict(cfg)
        if "preset" in cfg:
            return preset_mixture(**cfg)
        means = np.atleast_2d(np.asarray(cfg["means"], dtype=float))
        M, d = means.shape
        weights = cfg.get("weights", np.full(M, 1.0 / M))
        if "covs" in cfg:
            covs = cfg["covs"]
        elif "stds" in cfg:
            stds = np.broadcast_to(np.asarray(cfg["stds"], dtype=float), (M,))
            covs = stds[:, None, None] ** 2 * np.eye(d)[None]
        else:
            covs = None
        return cls(weights, means, covs)


def _psd_root(c):
    w, v = np.linalg.eigh(c)
    return v * np.sqrt(np.clip(w, 0, None))


def dirac(point):
    point = np.atleast_1d(np.asarray(point, dtype=float))
    return GaussianMixture([1.0], point[None], None)


def single_gaussian(mean, cov):
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    return GaussianMixture([1.0], mean[None], np.asarray(cov, dtype=float)[None])


def grid_mixture(side=3, spacing=2.0, std=0.05):
    """side x side isotropic components on a square lattice centred at 0."""
    axis = spacing * (np.arange(side) - (side - 1) / 2)
    means = np.array([[x, y] for x in axis for y in axis])
    M = means.shape[0]
    return GaussianMixture(np.full(M, 1.0 / M), means, std**2 * np.eye(2)[None].repeat(M, 0))


def preset_mixture(preset, **kw):
    if preset == "grid":
        return grid_mixture(**kw)
    if preset == "two-mode-1d":
        sep = kw.get("separation", 1.0)
        std = kw.get("std", 0.0)
        covs = None if std == 0 else np.full((2, 1, 1), std**2)
        return GaussianMixture([0.5, 0.5], [[-sep], [sep]], covs)
    raise InputError(f"unknown mixture preset {preset!r}")


class ScoreOracle:
    """Exact score of the mixture pushed through a diffusion process.

    Component m at time t is N(Psi(t,0) mu_m, Psi cov_m Psi^T + Sigma_t) with
    Sigma_t the table's conditional covariance. Per-time quantities are cached.
    """

    def __init__(self, mixture: GaussianMixture, spec, table):
        self.mixture = mixture
        self.spec = spec
        self.table = table
        self.means, self.covs = mixture.lift(spec)
        self.log_w = np.log(mixture.weights)
        self._cache = {}

    def _frozen(self, t):
        t = float(t)
        hit = self._cache.get(t)
        if hit is not None:
            return hit
        psi = self.table.psi0_at(t)
        sig = self.table.sigma_at(t)
        m_t = self.means @ psi.T
        C = psi[None] @ self.covs @ psi.T[None] + sig[None]
        C = 0.5 * (C + np.swapaxes(C, -1, -2))
        try:
            L = np.linalg.cholesky(C)
        except np.linalg.LinAlgError as e:
            raise ConditioningError("component covariance is singular", t=t) from e
        eye = np.broadcast_to(np.eye(C.shape[-1]), C.shape)
        Linv = np.linalg.solve(L, eye)
        prec = np.swapaxes(Linv, -1, -2) @ Linv
        logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
        out = (m_t, prec, logdet)
        self._cache[t] = out
        return out

    def log_components(self, t, u):
        """Per-component log(w_m N(u; ...)) and precision-weighted residuals."""
        m_t, prec, logdet = self._frozen(t)
        u = np.atleast_2d(u)
        diff = u[:, None, :] - m_t[None]
        pd = np.einsum("mij,nmj->nmi", prec, diff)
        quad = np.einsum("nmi,nmi->nm", diff, pd)
        D = u.shape[-1]
        logp = self.log_w[None] - 0.5 * (quad + logdet[None] + D * np.log(2 * np.pi))
        return logp, pd

    def responsibilities(self, t, u):
        logp, _ = self.log_components(t, u)
        return np.exp(logp - logsumexp(logp, axis=1, keepdims=True))

    def log_density(self, t, u):
        logp, _ = self.log_components(t, u)
        return logsumexp(logp, axis=1)

    def score(self, t, u):
        """grad log p_t(u) for a batch u of shape (n, D)."""
        self.spec.check_time(t, lo=self.table.eps_start)
        logp, pd = self.log_components(t, u)
        r = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        return -np.einsum("nm,nmi->ni", r, pd)


def mixture_score(mix, spec, t, u, table):
    """Score of ``mix`` under ``spec`` at time t; u is (D,) or (n, D)."""
    u = np.asarray(u, dtype=float)
    out = ScoreOracle(mix, spec, table).score(t, np.atleast_2d(u))
    return out[0] if u.ndim == 1 else out


class EpsParameterization:
    """eps = -K_t^T score for K in {R, L, sqrt}."""

    def __init__(self, table, kind="R"):
        if kind not in ("R", "L", "sqrt"):
            raise InputError(f"unknown parameterization kind {kind!r}")
        self.table = table
        self.kind = kind
        self._cache = {}

    def K(self, t):
        return self._factors(t)[0]

    def _factors(self, t):
        t = float(t)
        hit = self._cache.get(t)
        if hit is None:
            K = self.table.factor(t, self.kind)
            if np.linalg.cond(K) > 1e14:
                raise ConditioningError(f"K_t ({self.kind}) is singular", t=t)
            hit = (K, np.linalg.inv(K))
            self._cache[t] = hit
        return hit

    def eps_from_score(self, t, score):
        K, _ = self._factors(t)
        return -np.asarray(score) @ K

    def score_from_eps(self, t, eps):
        _, Kinv = self._factors(t)
        return -np.asarray(eps) @ Kinv


def eps_from_score(param: EpsParameterization, t, score):
    return param.eps_from_score(t, score)


def score_from_eps(param: EpsParameterization, t, eps):
    return param.score_from_eps(t, eps)


class ExactEps:
    """The opaque eps-callable ``(u_batch, t) -> eps_batch`` backed by an oracle."""

    def __init__(self, oracle: ScoreOracle, param: EpsParameterization):
        self.oracle = oracle
        self.param = param

    @property
    def kind(self):
        return self.param.kind

    def __call__(self, u, t):
        return self.param.eps_from_score(t, self.oracle.score(t, u))


def recovered_score(spec, table, s, u_s, score_s, t, u):
    """Score at (t, u) rebuilt from one evaluation at (s, u_s).

    Sigma_t^{-1} Psi(t,s) Sigma_s score_s - Sigma_t^{-1} (u - Psi(t,s) u_s);
    exact when the data is a point mass.
    """
    psi = table.transition(t, s)
    sig_t = table.sigma_at(t)
    sig_s = table.sigma_at(s)
    u_s, score_s, u = (np.asarray(x, dtype=float) for x in (u_s, score_s, u))
    rhs = score_s @ sig_s.T @ psi.T - (u - u_s @ psi.T)
    return np.linalg.solve(sig_t, rhs.T).T


def gddim_eps_approximator(table, s, u_s, eps_s, tau, u):
    """R_tau^{-1} Psi(tau,s) R_s eps_s + R_tau^{-1} (u - Psi(tau,s) u_s)."""
    psi = table.transition(tau, s)
    R_tau = table.R_at(tau)
    R_s = table.R_at(s)
    u_s, eps_s, u = (np.asarray(x, dtype=float) for x in (u_s, eps_s, u))
    rhs = eps_s @ R_s.T @ psi.T + u - u_s @ psi.T
    return np.linalg.solve(R_tau, rhs.T).T


def sample_prior(spec, table, rng_stream: NoiseStream, n=None, step=0):
    """u(T) = R_T z with z drawn from the stream; a single vector when n is None."""
    R_T = table.R_at(spec.horizon)
    z = rng_stream.block(step, 1 if n is None else n, spec.dim_state)
    out = z @ R_T.T
    return out[0] if n is None else out
