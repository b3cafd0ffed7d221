"""Linear-SDE diffusion processes.

A process is ``du = F_t u dt + G_t dw`` on ``[0, T]``. Every built-in kind has
exploitable structure, so F_t and G_t G_t^T are evaluated in a *reduced* form:
a stack of ``b`` independent ``k x k`` blocks that expands to the dense
``D x D`` matrix through one of three layouts:

* ``kron``  -- dense = kron(block, I_d)        (DDPM: k=1, CLD: k=2)
* ``freq``  -- dense = V diag(blocks) V^T      (BDM: b=D, k=1, V the inverse DCT)
* ``dense`` -- dense = block                   (custom: b=1, k=D)

All coefficient solvers work on the reduced blocks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.fft

from .errors import DomainError, InputError, ScheduleInconsistentError, ScheduleInvalidError

KINDS = ("ddpm", "cld", "bdm", "custom")
STRUCTURE_HINTS = ("scalar-isotropic", "kron-2x2", "freq-diagonal", "dense")
DEFAULT_RK4_STEP = 1e-6

_PROBE = np.linspace(0.0, 1.0, 2001)


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class DdpmSchedule:
    """alpha_t for the VP / DDPM process.

    ``vp-linear``: alpha_t = exp(-(beta_min t + (beta_max - beta_min) t^2 / 2)),
    ``exp``: alpha_t = exp(-rate t).
    """

    kind: str = "vp-linear"
    beta_min: float = 0.1
    beta_max: float = 20.0
    rate: float = 1.0

    def log_alpha(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "vp-linear":
            return -(self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t**2)
        if self.kind == "exp":
            return -self.rate * t
        raise ScheduleInvalidError(f"unknown alpha schedule {self.kind!r}")

    def alpha(self, t):
        return np.exp(self.log_alpha(t))

    def beta(self, t):
        """-d log(alpha)/dt, i.e. G_t^2 of the DDPM SDE."""
        t = np.asarray(t, dtype=float)
        if self.kind == "vp-linear":
            return self.beta_min + (self.beta_max - self.beta_min) * t
        if self.kind == "exp":
            return np.full_like(t, self.rate)
        raise ScheduleInvalidError(f"unknown alpha schedule {self.kind!r}")

    def validate(self, horizon):
        b = self.beta(_PROBE * horizon)
        if not np.all(np.isfinite(b)) or np.any(b <= 0.0):
            raise ScheduleInvalidError(f"alpha schedule {self} is not strictly decreasing on [0, {horizon}]")

    def to_dict(self):
        if self.kind == "exp":
            return {"kind": "exp", "rate": self.rate}
        return {"kind": self.kind, "beta_min": self.beta_min, "beta_max": self.beta_max}


@dataclass(frozen=True)
class CldParams:
    beta: float = 4.0
    damping: float = 1.0  # Gamma
    mass: float = 0.25  # M
    init_velocity_scale: float = 0.04  # velocity channel starts at N(0, gamma M I)

    def validate(self):
        for name in ("beta", "damping", "mass", "init_velocity_scale"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ScheduleInvalidError(f"CLD parameter {name} must be > 0, got {v}")


@dataclass(frozen=True)
class BdmSchedule:
    """Blurring diffusion concretized as d_k(t) = a(t) exp(-lambda_k tau(t)).

    a(t) = sqrt(alpha_t) of ``alpha``, tau(t) = tau_max t / T and the noise
    variance is sigma_t^2 = 1 - a(t)^2 unless ``noise`` is given. ``noise`` is
    a Python callable t -> (sigma^2, d sigma^2/dt); it is not serializable.
    """

    grid_shape: tuple = (4, 4)
    alpha: DdpmSchedule = field(default_factory=DdpmSchedule)
    tau_max: float = 1.0
    noise: Callable | None = None

    def freq_eigenvalues(self):
        h, w = self.grid_shape
        fi = (np.pi * np.arange(h) / h) ** 2
        fj = (np.pi * np.arange(w) / w) ** 2
        return (fi[:, None] + fj[None, :]).ravel()


# ---------------------------------------------------------------------------
# DiffusionSpec


def dct_basis(grid_shape):
    """Orthonormal inverse 2-D DCT as a matrix V acting on row-major images."""
    h, w = grid_shape
    ch = scipy.fft.dct(np.eye(h), norm="ortho", axis=0)
    cw = scipy.fft.dct(np.eye(w), norm="ortho", axis=0)
    return np.kron(ch, cw).T


@dataclass(frozen=True, eq=False)
class DiffusionSpec:
    kind: str
    dim_data: int
    dim_state: int
    horizon: float
    structure_hint: str
    layout: str
    params: dict
    init_block: np.ndarray  # (b, k, k) reduced init_cond_cov
    _blocks: Callable = field(repr=False)
    basis: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_blocks(self):
        return self.init_block.shape[0]

    @property
    def block_size(self):
        return self.init_block.shape[1]

    def blocks(self, t):
        """Reduced (F, G G^T) at times ``t``; each of shape (n, b, k, k)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return self._blocks(t)

    def expand(self, blocks):
        """Reduced blocks (..., b, k, k) -> dense (..., D, D)."""
        blocks = np.asarray(blocks, dtype=float)
        if self.layout == "kron":
            eye = np.eye(self.dim_data)
            blk = blocks[..., 0, :, :]
            out = blk[..., :, None, :, None] * eye[None, :, None, :]
            return out.reshape(*blk.shape[:-2], self.dim_state, self.dim_state)
        if self.layout == "freq":
            diag = blocks[..., 0, 0]
            return np.einsum("ik,...k,jk->...ij", self.basis, diag, self.basis)
        return blocks[..., 0, :, :].copy()

    def reduce(self, dense):
        """Inverse of :meth:`expand` for matrices that carry the layout structure."""
        dense = np.asarray(dense, dtype=float)
        if self.layout == "kron":
            d, k = self.dim_data, self.block_size
            blk = dense.reshape(*dense.shape[:-2], k, d, k, d)[..., :, 0, :, 0]
            return blk[..., None, :, :]
        if self.layout == "freq":
            diag = np.einsum("ik,...ij,jk->...k", self.basis, dense, self.basis)
            return diag[..., None, None]
        return dense[..., None, :, :]

    def drift(self, t):
        F, _ = self.blocks(t)
        out = self.expand(F)
        return out[0] if np.ndim(t) == 0 else out

    def diffusion_sq(self, t):
        """G_t G_t^T."""
        _, GG = self.blocks(t)
        out = self.expand(GG)
        return out[0] if np.ndim(t) == 0 else out

    def diffusion(self, t):
        """The symmetric square root of G_t G_t^T (same law as G_t dw)."""
        GG = self.diffusion_sq(np.atleast_1d(t))
        w, v = np.linalg.eigh(GG)
        G = np.einsum("...ij,...j,...kj->...ik", v, np.sqrt(np.clip(w, 0.0, None)), v)
        return G[0] if np.ndim(t) == 0 else G

    @property
    def init_cond_cov(self):
        return self.expand(self.init_block)

    def check_time(self, t, lo=0.0):
        t = np.asarray(t, dtype=float)
        tol = 1e-12 * max(1.0, self.horizon)
        if np.any(t < lo - tol) or np.any(t > self.horizon + tol) or not np.all(np.isfinite(t)):
            raise DomainError(f"time {t} outside [{lo}, {self.horizon}]")

    def to_config(self):
        if self.params.get("python_callables"):
            raise InputError("spec built from Python callables cannot be serialized")
        cfg = {"kind": self.kind, "horizon": float(self.horizon), "dim_data": int(self.dim_data)}
        cfg.update(self.params)
        return cfg

    @classmethod
    def from_config(cls, cfg):
        cfg = dict(cfg)
        kind = cfg.pop("kind")
        return instantiate_process(kind, cfg)


def _kron_spec(kind, hint, dim_data, horizon, params, init, fn):
    return DiffusionSpec(
        kind=kind,
        dim_data=dim_data,
        dim_state=dim_data * init.shape[-1],
        horizon=float(horizon),
        structure_hint=hint,
        layout="kron",
        params=params,
        init_block=init,
        _blocks=fn,
    )


def _ddpm(dim_data, horizon, schedule: DdpmSchedule):
    schedule.validate(horizon)

    def fn(t):
        b = schedule.beta(t)[:, None, None, None]
        return -0.5 * b, b.copy()

    params = {"schedule": schedule.to_dict()}
    return _kron_spec("ddpm", "scalar-isotropic", dim_data, horizon, params, np.zeros((1, 1, 1)), fn)


def _cld(dim_data, horizon, p: CldParams):
    p.validate()
    minv = 1.0 / p.mass
    F = np.array([[0.0, p.beta * minv], [-p.beta, -p.damping * p.beta * minv]])
    GG = np.array([[0.0, 0.0], [0.0, 2.0 * p.damping * p.beta]])
    init = np.array([[[0.0, 0.0], [0.0, p.init_velocity_scale * p.mass]]])

    def fn(t):
        n = t.shape[0]
        return np.broadcast_to(F, (n, 1, 2, 2)).copy(), np.broadcast_to(GG, (n, 1, 2, 2)).copy()

    params = {
        "beta": p.beta,
        "damping": p.damping,
        "mass": p.mass,
        "init_velocity_scale": p.init_velocity_scale,
    }
    return _kron_spec("cld", "kron-2x2", dim_data, horizon, params, init, fn)


def _bdm(horizon, s: BdmSchedule):
    s.alpha.validate(horizon)
    if not (np.isfinite(s.tau_max) and s.tau_max >= 0):
        raise ScheduleInvalidError("dissipation tau(t) must be non-decreasing (tau_max >= 0)")
    lam = s.freq_eigenvalues()
    D = lam.size
    V = dct_basis(s.grid_shape)
    tau_rate = s.tau_max / horizon

    def fn(t):
        # d/dt log d_k(t) = d/dt log a(t) - lambda_k tau'(t)
        dlog_a = -0.5 * s.alpha.beta(t)
        f = dlog_a[:, None] - lam[None, :] * tau_rate
        if s.noise is None:
            sig2 = 1.0 - s.alpha.alpha(t)
            dsig2 = -2.0 * dlog_a * (1.0 - sig2)
        else:
            sig2, dsig2 = (np.asarray(x, dtype=float) for x in s.noise(t))
        g2 = dsig2[:, None] - 2.0 * f * sig2[:, None]
        if np.any(g2 < -1e-12):
            bad = t[np.nonzero(np.any(g2 < -1e-12, axis=1))[0][0]]
            raise ScheduleInconsistentError(f"negative radicand in BDM diffusion at t={bad}")
        g2 = np.maximum(g2, 0.0)
        return f[:, :, None, None], g2[:, :, None, None]

    fn(_PROBE * horizon)
    params = {
        "grid_shape": list(s.grid_shape),
        "schedule": s.alpha.to_dict(),
        "tau_max": s.tau_max,
    }
    if s.noise is not None:
        params["python_callables"] = True
    return DiffusionSpec(
        kind="bdm",
        dim_data=D,
        dim_state=D,
        horizon=float(horizon),
        structure_hint="freq-diagonal",
        layout="freq",
        params=params,
        init_block=np.zeros((D, 1, 1)),
        _blocks=fn,
        basis=V,
    )


def _custom(horizon, params):
    """Dense spec. Either linear-in-time matrices (F0, F1, G0, G1) or callables.

    Callables ``drift_fn(t)`` and ``diffusion_fn(t)`` take an array of times
    and return (n, D, D) arrays.
    """
    init = params.get("init_cond_cov")
    if "drift_fn" in params:
        drift_fn, diff_fn = params["drift_fn"], params["diffusion_fn"]
        D = np.asarray(drift_fn(np.zeros(1))).shape[-1]
        stored = {"python_callables": True}
    else:
        F0, F1 = np.asarray(params["F0"], float), np.asarray(params.get("F1", np.zeros_like(params["F0"])), float)
        G0, G1 = np.asarray(params["G0"], float), np.asarray(params.get("G1", np.zeros_like(params["G0"])), float)
        D = F0.shape[0]

        def drift_fn(t):
            return F0[None] + t[:, None, None] * F1[None]

        def diff_fn(t):
            return G0[None] + t[:, None, None] * G1[None]

        stored = {"F0": F0.tolist(), "F1": F1.tolist(), "G0": G0.tolist(), "G1": G1.tolist()}
    init = np.zeros((D, D)) if init is None else np.asarray(init, dtype=float)
    if init.shape != (D, D) or not np.allclose(init, init.T) or np.linalg.eigvalsh(init).min() < -1e-12:
        raise InputError("init_cond_cov must be a symmetric PSD D x D matrix")
    stored["init_cond_cov"] = init.tolist()

    def fn(t):
        G = np.asarray(diff_fn(t), dtype=float)
        F = np.asarray(drift_fn(t), dtype=float)
        return F[:, None], (G @ np.swapaxes(G, -1, -2))[:, None]

    if "drift_fn" in params:
        stored.update(drift_fn=params["drift_fn"], diffusion_fn=params["diffusion_fn"])
    F, _ = fn(_PROBE * horizon)
    if not np.all(np.isfinite(F)):
        raise ScheduleInvalidError("custom drift is not finite on [0, T]")
    return DiffusionSpec(
        kind="custom",
        dim_data=D,
        dim_state=D,
        horizon=float(horizon),
        structure_hint="dense",
        layout="dense",
        params=stored,
        init_block=init[None],
        _blocks=fn,
    )


def _schedule_from(obj):
    if isinstance(obj, DdpmSchedule):
        return obj
    obj = dict(obj or {})
    return DdpmSchedule(**obj)


def instantiate_process(kind, params=None) -> DiffusionSpec:
    """Build a DiffusionSpec of the given kind.

    ``params`` keys by kind:

    * ddpm: dim_data, horizon, schedule (DdpmSchedule or dict)
    * cld: dim_data, horizon, beta, damping, mass, init_velocity_scale
    * bdm: horizon, grid_shape, schedule, tau_max, noise (callable, optional)
    * custom: horizon, F0, F1, G0, G1, init_cond_cov -- or drift_fn, diffusion_fn
    """
    params = dict(params or {})
    horizon = float(params.pop("horizon", 1.0))
    if not (horizon > 0 and math.isfinite(horizon)):
        raise ScheduleInvalidError("horizon must be positive")
    if kind == "ddpm":
        return _ddpm(int(params.get("dim_data", 1)), horizon, _schedule_from(params.get("schedule")))
    if kind == "cld":
        dim = int(params.pop("dim_data", 1))
        return _cld(dim, horizon, CldParams(**params))
    if kind == "bdm":
        params.pop("dim_data", None)
        sched = BdmSchedule(
            grid_shape=tuple(params.get("grid_shape", (4, 4))),
            alpha=_schedule_from(params.get("schedule")),
            tau_max=float(params.get("tau_max", 1.0)),
            noise=params.get("noise"),
        )
        return _bdm(horizon, sched)
    if kind == "custom":
        params.pop("dim_data", None)
        return _custom(horizon, params)
    raise InputError(f"unknown process kind {kind!r}; expected one of {KINDS}")


# ---------------------------------------------------------------------------
# transitions and moments


def _closed_form_psi0(spec, t):
    """Reduced Psi(t, 0) for kinds with a closed form, else None."""
    if spec.kind == "ddpm":
        sched = _schedule_from(spec.params["schedule"])
        return np.sqrt(sched.alpha(t))[..., None, None, None]
    if spec.kind == "bdm":
        sched = _schedule_from(spec.params["schedule"])
        lam = BdmSchedule(grid_shape=tuple(spec.params["grid_shape"])).freq_eigenvalues()
        tau = spec.params["tau_max"] * np.asarray(t) / spec.horizon
        d = np.sqrt(sched.alpha(t))[..., None] * np.exp(-lam * np.asarray(tau)[..., None])
        return d[..., None, None]
    return None


def _closed_form_sigma0(spec, t):
    """Reduced zero-initial Sigma_t for kinds with a closed form, else None."""
    if spec.kind == "ddpm":
        sched = _schedule_from(spec.params["schedule"])
        return (1.0 - sched.alpha(t))[..., None, None, None]
    if spec.kind == "bdm" and "python_callables" not in spec.params:
        sched = _schedule_from(spec.params["schedule"])
        s2 = 1.0 - sched.alpha(t)
        return np.broadcast_to(np.asarray(s2)[..., None, None, None], np.shape(t) + (spec.n_blocks, 1, 1)).copy()
    return None


def _numeric_psi_sigma(spec, t, rk4_step):
    from .kernels import integrate_forward

    rec = integrate_forward(spec, np.atleast_1d(t), rk4_step=rk4_step, with_factor=False)
    return rec["psi"], rec["sigma"], rec["cond"]


def transition(spec: DiffusionSpec, t, s, rk4_step=DEFAULT_RK4_STEP):
    """Psi(t, s), the transition matrix of F (dense D x D).

    Closed form for DDPM and BDM; otherwise RK4 on dPsi/dt = F Psi and
    Psi(t, s) = Psi(t, 0) Psi(s, 0)^{-1}.
    """
    spec.check_time([t, s])
    if t == s:
        return np.eye(spec.dim_state)
    ts = np.array([s, t], dtype=float)
    psi = _closed_form_psi0(spec, ts)
    if psi is None:
        psi, _, _ = _numeric_psi_sigma(spec, ts, rk4_step)
    inv_s = invert_blocks(psi[0], what="Psi(s, 0)", t=s)
    return spec.expand(psi[1] @ inv_s)


def invert_blocks(blocks, what="matrix", t=None, warn_cond=1e8):
    """LU inverse of stacked blocks with a conditioning warning."""
    import logging

    cond = np.linalg.cond(blocks)
    if np.any(~np.isfinite(cond)):
        from .errors import ConditioningError

        raise ConditioningError(f"{what} is singular", t=t)
    if np.max(cond) > warn_cond:
        logging.getLogger(__name__).warning("%s has condition number %.3g at t=%s", what, np.max(cond), t)
    return np.linalg.inv(blocks)


def marginal_moments(spec: DiffusionSpec, t, mean0, cov0, rk4_step=DEFAULT_RK4_STEP):
    """Mean and covariance of u(t) when u(0) ~ N(mean0, cov0)."""
    spec.check_time(t)
    mean0 = np.asarray(mean0, dtype=float)
    cov0 = np.asarray(cov0, dtype=float)
    D = spec.dim_state
    if mean0.shape != (D,) or cov0.shape != (D, D):
        raise InputError(f"expected mean0 ({D},) and cov0 ({D},{D})")
    if not np.allclose(cov0, cov0.T, atol=1e-12) or np.linalg.eigvalsh(cov0).min() < -1e-10:
        raise InputError("cov0 must be symmetric PSD")
    if t == 0:
        return mean0.copy(), cov0.copy()
    ts = np.array([t], dtype=float)
    psi = _closed_form_psi0(spec, ts)
    sig0 = _closed_form_sigma0(spec, ts)
    if psi is None or sig0 is None:
        from .kernels import integrate_forward

        rec = integrate_forward(spec, ts, rk4_step=rk4_step, with_factor=False, zero_init=True)
        psi, sig0 = rec["psi"], rec["sigma"]
    P = spec.expand(psi[0])
    cov = P @ cov0 @ P.T + spec.expand(sig0[0])
    return P @ mean0, 0.5 * (cov + cov.T)


def simulate_forward(spec: DiffusionSpec, u0, t, n_steps, rng):
    """Euler-Maruyama forward paths from states ``u0`` (n, D) to time ``t``."""
    u = np.array(u0, dtype=float, copy=True)
    grid = np.linspace(0.0, t, n_steps + 1)
    for a, b in zip(grid[:-1], grid[1:]):
        h = b - a
        F = spec.drift(a)
        G = spec.diffusion(a)
        z = rng.standard_normal(u.shape)
        u = u + h * u @ F.T + math.sqrt(h) * z @ G.T
    return u
