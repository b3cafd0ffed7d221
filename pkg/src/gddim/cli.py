"""Command-line front end: ``gddim {precompute,sample,sweep,diagnose} CONFIG``.

Experiments are described by a YAML file (see :class:`ExperimentConfig`).
Relative ``output_dir`` paths are resolved against the config file's
directory. Exit codes: 0 success, 2 config error, 3 cache error, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import coeffs as co
from . import eval as ev
from .errors import (
    CacheError,
    ConditioningError,
    ConfigError,
    DecompositionError,
    DomainError,
    GddimError,
    InputError,
    InvalidSigmaError,
    ScheduleInconsistentError,
    ScheduleInvalidError,
    SolverAccuracyError,
    StiffnessError,
)
from .oracle import EpsParameterization, ExactEps, GaussianMixture, ScoreOracle
from .process import DEFAULT_RK4_STEP, DiffusionSpec
from .rng import NoiseStream
from .samplers import SamplerConfig, make_time_grid, run

log = logging.getLogger("gddim")

EXIT_OK, EXIT_CONFIG, EXIT_CACHE, EXIT_NUMERICAL = 0, 2, 3, 4
RUN_FIELDS = ("scheme", "lam", "N", "q", "param_kind", "grid_kind", "rng_seed", "batch",
              "record_trajectory", "record_eps", "rtol", "atol")
MULTISTEP_SCHEMES = ("gddim-det", "gddim-multistep", "gddim-pc", "gddim-stoch")
CONSTANT_TRACE_TOL = 1e-5


# ---------------------------------------------------------------------------
# config


class _LineLoader(yaml.SafeLoader):
    """SafeLoader that remembers the source line of every mapping and sequence."""


def _construct_mapping(loader, node):
    out = loader.construct_mapping(node, deep=True)
    loader.lines[id(out)] = node.start_mark.line + 1
    return out


def _construct_seq(loader, node):
    out = loader.construct_sequence(node, deep=True)
    loader.lines[id(out)] = node.start_mark.line + 1
    return out


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)
_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_SEQUENCE_TAG, _construct_seq)


def _as_list(x):
    if x is None:
        return []
    return list(x) if isinstance(x, (list, tuple)) else [x]


@dataclass
class CoeffBlock:
    N: list = field(default_factory=lambda: [20])
    q: list = field(default_factory=lambda: [1])
    lam: list = field(default_factory=lambda: [0.0])
    kinds: list = field(default_factory=lambda: ["R"])
    grid_kind: str = "quadratic"
    n_knots: int = co.DEFAULT_KNOTS
    eps_start: float | None = None
    rk4_step: float = DEFAULT_RK4_STEP
    quad_step: float = co.DEFAULT_QUAD_STEP
    quadrature: str = "gauss3"

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown coeff keys {sorted(unknown)}")
        out = cls(**d)
        out.N = [int(n) for n in _as_list(out.N)]
        out.q = sorted({int(q) for q in _as_list(out.q)})
        out.lam = sorted({float(x) for x in _as_list(out.lam)})
        out.kinds = list(dict.fromkeys(_as_list(out.kinds)))
        out.n_knots = int(out.n_knots)
        out.rk4_step = float(out.rk4_step)
        out.quad_step = float(out.quad_step)
        if out.eps_start is not None:
            out.eps_start = float(out.eps_start)
        if not out.N or min(out.N) < 1 or not out.q or min(out.q) < 1 or not out.lam or min(out.lam) < 0:
            raise ConfigError("coeff block needs N >= 1, q >= 1 and lambda >= 0 lists")
        if any(k not in co.PARAM_KINDS for k in out.kinds) or not out.kinds:
            raise ConfigError(f"coeff kinds must be drawn from {co.PARAM_KINDS}")
        if out.n_knots < 2:
            raise ConfigError("n_knots must be >= 2")
        return out

    def to_dict(self):
        return {"N": list(self.N), "q": list(self.q), "lambda": list(self.lam), "kinds": list(self.kinds),
                "grid_kind": self.grid_kind, "n_knots": self.n_knots, "eps_start": self.eps_start,
                "rk4_step": self.rk4_step, "quad_step": self.quad_step, "quadrature": self.quadrature}


@dataclass
class EvalBlock:
    metrics: list = field(default_factory=lambda: ["sliced_wasserstein", "moments"])
    batch: int = 2000
    seeds: list = field(default_factory=lambda: [0])
    reference_samples: int = 10_000
    n_projections: int = 128

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        if "seed" in d:
            d["seeds"] = d.pop("seed")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown eval keys {sorted(unknown)}")
        out = cls(**d)
        out.metrics = _as_list(out.metrics)
        out.seeds = [int(s) for s in _as_list(out.seeds)]
        if not out.seeds:
            raise ConfigError("eval.seeds must list at least one explicit seed")
        return out

    def to_dict(self):
        return {"metrics": list(self.metrics), "batch": self.batch, "seeds": list(self.seeds),
                "reference_samples": self.reference_samples, "n_projections": self.n_projections}


def _run_defaults():
    d = SamplerConfig().to_dict()
    d.update(record_trajectory=False, record_eps=False, rtol=1e-3, atol=1e-6)
    return d


@dataclass
class ExperimentConfig:
    """Declarative experiment: process, data, coefficients, runs, evaluation, output dir."""

    process: dict
    data: dict
    coeff: CoeffBlock
    runs: list
    eval: EvalBlock = field(default_factory=EvalBlock)
    output_dir: str = "out"
    name: str = "experiment"
    sweep: dict = field(default_factory=dict)
    diagnose: dict = field(default_factory=dict)
    source: str | None = field(default=None, compare=False)
    lines: dict = field(default_factory=dict, compare=False, repr=False)

    # -- parsing ------------------------------------------------------------

    @classmethod
    def from_yaml(cls, text, source=None):
        loader = _LineLoader(text)
        loader.lines = {}
        try:
            raw = loader.get_single_data()
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            where = f"{source or '<config>'}:{mark.line + 1}" if mark else (source or "<config>")
            raise ConfigError(f"{where}: cannot parse YAML: {getattr(e, 'problem', e)}") from e
        finally:
            loader.dispose()
        if not isinstance(raw, dict):
            raise ConfigError(f"{source or '<config>'}: top level must be a mapping")
        return cls.from_dict(raw, source=source, lines=loader.lines)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_yaml(text, source=str(path))

    @classmethod
    def from_dict(cls, raw, source=None, lines=None):
        lines = lines or {}
        where = source or "<config>"

        def ctx(node, msg):
            line = lines.get(id(node))
            return f"{where}:{line}: {msg}" if line else f"{where}: {msg}"

        known = {"name", "output_dir", "process", "data", "coeff", "runs", "eval", "sweep", "diagnose"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(ctx(raw, f"unknown top-level keys {sorted(unknown)}"))
        for key in ("process", "data", "runs"):
            if key not in raw:
                raise ConfigError(ctx(raw, f"missing required block {key!r}"))
        process = raw["process"]
        if not isinstance(process, dict) or "kind" not in process:
            raise ConfigError(ctx(process, "process block needs a 'kind'"))
        try:
            coeff = CoeffBlock.from_dict(raw.get("coeff"))
        except (ConfigError, TypeError, ValueError) as e:
            raise ConfigError(ctx(raw.get("coeff") or raw, str(e))) from e
        try:
            evb = EvalBlock.from_dict(raw.get("eval"))
        except (ConfigError, TypeError, ValueError) as e:
            raise ConfigError(ctx(raw.get("eval") or raw, str(e))) from e
        runs_raw = raw["runs"]
        if not isinstance(runs_raw, list) or not runs_raw:
            raise ConfigError(ctx(runs_raw, "runs must be a non-empty list"))
        runs, ids = [], set()
        for k, r in enumerate(runs_raw):
            if not isinstance(r, dict):
                raise ConfigError(ctx(runs_raw, f"run {k} must be a mapping"))
            r = dict(r)
            rid = str(r.pop("id", f"run{k}"))
            if rid in ids:
                raise ConfigError(ctx(runs_raw[k], f"duplicate run id {rid!r}"))
            ids.add(rid)
            if "lambda" in r:
                r["lam"] = r.pop("lambda")
            bad = set(r) - set(RUN_FIELDS)
            if bad:
                raise ConfigError(ctx(runs_raw[k], f"run {rid!r}: unknown keys {sorted(bad)}"))
            full = _run_defaults()
            full.update(r)
            full["lam"] = float(full["lam"])
            full["id"] = rid
            runs.append(full)
        sweep = dict(raw.get("sweep") or {})
        if "lambda" in sweep:
            sweep["lam"] = sweep.pop("lambda")
        if set(sweep) - {"N", "q", "lam"}:
            raise ConfigError(ctx(raw.get("sweep"), "sweep axes must be among N, q, lambda"))
        sweep = {k: _as_list(v) for k, v in sweep.items()}
        cfg = cls(process=dict(process), data=dict(raw["data"]), coeff=coeff, runs=runs, eval=evb,
                  output_dir=str(raw.get("output_dir", "out")), name=str(raw.get("name", "experiment")),
                  sweep=sweep, diagnose=dict(raw.get("diagnose") or {}), source=source, lines=lines)
        cfg._run_nodes = list(runs_raw)
        cfg.validate(ctx)
        return cfg

    # -- validation -------------------------------------------------------------

    def validate(self, ctx=None):
        ctx = ctx or (lambda node, msg: msg)
        try:
            spec = self.spec()
        except (GddimError, TypeError, ValueError, KeyError) as e:
            raise ConfigError(ctx(self.process, f"invalid process block: {e}")) from e
        try:
            mix = self.mixture()
            mix.lift(spec)
        except (GddimError, TypeError, ValueError, KeyError) as e:
            raise ConfigError(ctx(self.data, f"invalid data block: {e}")) from e
        have = self.produced_entries()
        nodes = getattr(self, "_run_nodes", [None] * len(self.runs))
        for run_d, node in zip(self.runs, nodes):
            for r in self.expand_run(run_d):
                try:
                    self.sampler_config(r).validate(spec)
                except ConfigError as e:
                    raise ConfigError(ctx(node, f"run {r['id']!r}: {e}")) from e
                need = self.required_entry(r)
                if need is not None and need not in have:
                    N, q, lam, kind = need
                    raise ConfigError(ctx(node, f"run {r['id']!r} needs coefficients (N={N}, q={q}, lambda={lam:g}, "
                                                f"kind={kind}) that the coeff block does not produce"))
                if r["grid_kind"] != self.coeff.grid_kind and r["scheme"] in MULTISTEP_SCHEMES:
                    raise ConfigError(ctx(node, f"run {r['id']!r} uses grid {r['grid_kind']!r} but coefficients "
                                                f"are built on {self.coeff.grid_kind!r}"))
        return self

    # -- derived objects -----------------------------------------------------

    def spec(self) -> DiffusionSpec:
        return DiffusionSpec.from_config(self.process)

    def mixture(self) -> GaussianMixture:
        return GaussianMixture.from_config(self.data)

    def eps_start(self, spec=None):
        spec = spec or self.spec()
        return co.default_eps_start(spec) if self.coeff.eps_start is None else self.coeff.eps_start

    def expand_run(self, run_d):
        """The run crossed with the sweep axes. A swept q of 0 means gddim-det."""
        axes = [(k, v) for k, v in self.sweep.items() if v]
        if not axes:
            return [dict(run_d)]
        out = []
        for combo in itertools.product(*[v for _, v in axes]):
            r = dict(run_d)
            for (k, _), v in zip(axes, combo):
                r[k] = float(v) if k == "lam" else int(v)
            if "q" in self.sweep:
                r["q_label"] = r["q"]
                if r["q"] == 0:
                    r["scheme"], r["q"] = "gddim-det", 1
            if "lam" in self.sweep and r["scheme"] not in ("gddim-stoch", "em", "ddim-closed"):
                r["lam"] = 0.0
            out.append(r)
        # a lambda axis on a deterministic run collapses to one entry
        seen, uniq = set(), []
        for r in out:
            key = tuple(sorted((k, v) for k, v in r.items()))
            if key not in seen:
                seen.add(key)
                uniq.append(r)
        return uniq

    def expanded_runs(self):
        return [r for run_d in self.runs for r in self.expand_run(run_d)]

    def sampler_config(self, r, threads=1, seed=None, batch=None):
        return SamplerConfig(scheme=r["scheme"], lam=float(r["lam"]), N=int(r["N"]), q=int(r["q"]),
                             param_kind=r["param_kind"], grid_kind=r["grid_kind"],
                             rng_seed=int(r["rng_seed"] if seed is None else seed),
                             batch=int(r["batch"] if batch is None else batch),
                             record_trajectory=bool(r["record_trajectory"]), record_eps=bool(r["record_eps"]),
                             threads=threads, rtol=float(r["rtol"]), atol=float(r["atol"]))

    @staticmethod
    def required_entry(r):
        """(N, q, lambda, kind) of the multistep set a run needs, or None."""
        if r["scheme"] not in MULTISTEP_SCHEMES:
            return None
        q = 1 if r["scheme"] == "gddim-det" else int(r["q"])
        lam = float(r["lam"]) if r["scheme"] == "gddim-stoch" else 0.0
        return (int(r["N"]), q, lam, r["param_kind"])

    def produced_entries(self):
        c = self.coeff
        return {(n, q, lam, k) for n in c.N for q in c.q for lam in c.lam for k in c.kinds}

    def sample_grids(self, spec=None):
        spec = spec or self.spec()
        eps = self.eps_start(spec)
        return {n: make_time_grid(self.coeff.grid_kind, n, eps, spec.horizon) for n in self.coeff.N}

    # -- serialization -------------------------------------------------------

    def to_dict(self):
        runs = []
        for r in self.runs:
            d = {"id": r["id"]}
            d.update({k: r[k] for k in RUN_FIELDS})
            d["lambda"] = d.pop("lam")
            runs.append(d)
        out = {"name": self.name, "output_dir": self.output_dir, "process": self.process, "data": self.data,
               "coeff": self.coeff.to_dict(), "runs": runs, "eval": self.eval.to_dict()}
        if self.sweep:
            sw = dict(self.sweep)
            if "lam" in sw:
                sw["lambda"] = sw.pop("lam")
            out["sweep"] = sw
        if self.diagnose:
            out["diagnose"] = self.diagnose
        return _plain(out)

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def config_hash(self):
        return co.version_hash(self.to_dict())

    def resolve_output(self, override=None):
        out = override or self.output_dir
        if not os.path.isabs(out) and self.source:
            out = os.path.join(os.path.dirname(os.path.abspath(self.source)), out)
        return os.path.abspath(out)


def _plain(obj):
    """Deep copy into plain Python types (YAML/JSON-safe)."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return copy.deepcopy(obj)


# ---------------------------------------------------------------------------
# coefficient cache


def _table_name(lam):
    return f"table_lam{lam:g}"


def _ms_name(N, q, lam, kind):
    return f"ms_N{N}_q{q}_lam{lam:g}_{kind}"


class CachePlan:
    """Expected artifacts and their version hashes for a config."""

    def __init__(self, cfg: ExperimentConfig, cache_dir):
        self.cfg = cfg
        self.dir = cache_dir
        self.spec = cfg.spec()
        self.eps = cfg.eps_start(self.spec)
        self.grids = cfg.sample_grids(self.spec)
        c = cfg.coeff
        extra = np.concatenate(list(self.grids.values()))
        self.knots = co.table_knots(self.spec, self.eps, c.n_knots, extra)
        self.tables = {lam: co.table_hash(self.spec, lam, self.eps, self.knots, c.rk4_step) for lam in c.lam}
        self.multistep = {}
        for (N, q, lam, kind) in sorted(cfg.produced_entries()):
            st = co.multistep_settings(self.spec, self.grids[N], q, lam, kind, c.rk4_step, c.quad_step, c.quadrature)
            self.multistep[(N, q, lam, kind)] = co.version_hash({"multistep": st})

    def path(self, name):
        return os.path.join(self.dir, name)

    def _valid(self, name, expected):
        if not os.path.exists(self.path(name) + ".npz"):
            return False
        try:
            return co.read_manifest(self.path(name))["version_hash"] == expected
        except CacheError:
            return False

    def stale(self):
        tabs = [lam for lam, h in self.tables.items() if not self._valid(_table_name(lam), h)]
        ms = [key for key, h in self.multistep.items() if not self._valid(_ms_name(*key), h)]
        return tabs, ms

    def n_artifacts(self):
        return len(self.tables) + len(self.multistep)

    def load_table(self, lam=None):
        lams = list(self.tables)
        lam = (0.0 if 0.0 in self.tables else lams[0]) if lam is None else lam
        if lam not in self.tables:
            raise CacheError(f"no table for lambda={lam:g} in the coeff block")
        name = _table_name(lam)
        if not os.path.exists(self.path(name) + ".npz"):
            raise CacheError(f"coefficient cache {self.dir} is missing {name}; run `gddim precompute` first")
        return co.CoefficientTable.load(self.path(name), self.spec, expected_hash=self.tables[lam])

    def load_multistep(self, key):
        if key not in self.multistep:
            raise CacheError(f"no multistep coefficients for {key} in the coeff block")
        name = _ms_name(*key)
        if not os.path.exists(self.path(name) + ".npz"):
            raise CacheError(f"coefficient cache {self.dir} is missing {name}; run `gddim precompute` first")
        return co.MultistepCoeffs.load(self.path(name), expected_hash=self.multistep[key])

    def manifest(self):
        return {
            "config_hash": self.cfg.config_hash(),
            "tables": {_table_name(lam): h for lam, h in self.tables.items()},
            "multistep": {_ms_name(*k): h for k, h in self.multistep.items()},
        }


def precompute(cfg: ExperimentConfig, cache_dir, frozen=False, out=None):
    """Build every stale artifact. Returns (n_built, n_solves)."""
    plan = CachePlan(cfg, cache_dir)
    stale_tabs, stale_ms = plan.stale()
    if not stale_tabs and not stale_ms:
        print("cache hit, 0 solves", file=out or sys.stdout)
        return 0, 0
    if frozen:
        names = [_table_name(lam) for lam in stale_tabs] + [_ms_name(*k) for k in stale_ms]
        raise CacheError(f"stale coefficient cache in {cache_dir} (--frozen): {', '.join(names)}")
    os.makedirs(cache_dir, exist_ok=True)
    c = cfg.coeff
    solves = 0
    for lam in stale_tabs:
        log.info("building table lambda=%g on %d knots", lam, plan.knots.size)
        table = co.CoefficientTable.build(plan.spec, lam, plan.eps, n_knots=c.n_knots,
                                          extra_knots=np.concatenate(list(plan.grids.values())), rk4_step=c.rk4_step)
        table.save(cache_dir, _table_name(lam))
        solves += 1
    groups = {}
    for (N, q, lam, kind) in stale_ms:
        groups.setdefault((N, lam), []).append((q, kind))
    for (N, lam), members in sorted(groups.items()):
        qs = sorted({q for q, _ in members})
        kinds = sorted({k for _, k in members})
        log.info("building multistep N=%d lambda=%g q=%s kinds=%s", N, lam, qs, kinds)
        sets = co.build_multistep(plan.spec, plan.grids[N], qs=qs, lam=lam, kinds=kinds, rk4_step=c.rk4_step,
                                  quad_step=c.quad_step, rule=c.quadrature)
        for q, kind in members:
            sets[(q, kind)].save(cache_dir, _ms_name(N, q, lam, kind))
        solves += 1
    with open(os.path.join(cache_dir, "manifest.json"), "w") as f:
        json.dump(plan.manifest(), f, indent=1, sort_keys=True)
    n_built = len(stale_tabs) + len(stale_ms)
    print(f"built {n_built} of {plan.n_artifacts()} artifacts, {solves} solves", file=out or sys.stdout)
    return n_built, solves


# ---------------------------------------------------------------------------
# running


def _write_matrix_csv(path, arr, header):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in arr:
            w.writerow(["%.17g" % float(v) for v in row])


def _execute(cfg, plan, r, threads=1, seed=None, batch=None, table=None):
    spec = plan.spec
    scfg = cfg.sampler_config(r, threads=threads, seed=seed, batch=batch)
    table = plan.load_table() if table is None else table
    need = cfg.required_entry(r)
    ms = plan.load_multistep(need) if need is not None else None
    oracle = ScoreOracle(cfg.mixture(), spec, table)
    eps_fn = ExactEps(oracle, EpsParameterization(table, scfg.param_kind))
    return scfg, run(scfg, spec, eps_fn, table, ms)


def cmd_sample(cfg: ExperimentConfig, run_id, cache_dir, out_dir, threads=1, frozen=False, out=None):
    plan = CachePlan(cfg, cache_dir)
    matches = [r for r in cfg.expanded_runs() if r["id"] == run_id]
    if not matches:
        raise ConfigError(f"no run with id {run_id!r}; known ids: {[r['id'] for r in cfg.runs]}")
    if len(matches) > 1:
        raise ConfigError(f"run {run_id!r} expands over sweep axes; use `gddim sweep`")
    r = matches[0]
    scfg, res = _execute(cfg, plan, r, threads=threads)
    run_dir = os.path.join(out_dir, "runs", run_id)
    os.makedirs(run_dir, exist_ok=True)
    D = res.samples.shape[1]
    cols = [f"u{j}" for j in range(D)]
    _write_matrix_csv(os.path.join(run_dir, "samples.csv"), res.samples, cols)
    if res.trajectories is not None:
        T, B, _ = res.trajectories.shape
        rows = np.concatenate([np.column_stack([np.full(B, k), np.full(B, res.times[k]), np.arange(B),
                                                res.trajectories[k]]) for k in range(T)])
        _write_matrix_csv(os.path.join(run_dir, "trajectory.csv"), rows, ["step", "t", "trajectory"] + cols)
    manifest = {"run_id": run_id, "config_hash": cfg.config_hash(), "sampler": _plain(scfg.to_dict()),
                "nfe": int(res.nfe), "coefficients": _ms_name(*cfg.required_entry(r)) if cfg.required_entry(r) else None}
    with open(os.path.join(run_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    with open(os.path.join(run_dir, "timing.json"), "w") as f:
        json.dump({"wall_time": res.wall_time}, f)
    print(f"{run_id}: {res.samples.shape[0]} samples, nfe={res.nfe}, wall_time={res.wall_time:.3f}s -> {run_dir}",
          file=out or sys.stdout)
    return res


def _reference_samples(cfg, seed):
    mix = cfg.mixture()
    return mix.sample(cfg.eval.reference_samples, NoiseStream(seed, "data").generator(0))


def cmd_sweep(cfg: ExperimentConfig, cache_dir, out_dir, threads=1, out=None):
    plan = CachePlan(cfg, cache_dir)
    table = plan.load_table()
    spec = plan.spec
    mix = cfg.mixture()
    reports, labels = [], []
    for seed in cfg.eval.seeds:
        ref = _reference_samples(cfg, seed)
        for r in cfg.expanded_runs():
            scfg, res = _execute(cfg, plan, r, threads=threads, seed=seed, batch=cfg.eval.batch, table=table)
            x = ev.data_part(res.samples, spec)
            sw = ev.sliced_wasserstein(x, ref, cfg.eval.n_projections, NoiseStream(seed, "eval").generator(0))
            m_err, c_err = ev.moment_errors(x, mix)
            reports.append(ev.MetricReport(scheme=scfg.scheme, param_kind=scfg.param_kind, lam=scfg.lam, q=scfg.q,
                                           N=scfg.N, nfe=res.nfe, sliced_wasserstein=sw, mean_err=m_err,
                                           cov_err=c_err, seed=seed, wall_time=res.wall_time))
            labels.append(r)
            print(f"{r['id']} {scfg.scheme} K={scfg.param_kind} lam={scfg.lam:g} q={scfg.q} N={scfg.N} "
                  f"seed={seed}: SW={sw:.5g} nfe={res.nfe}", file=out or sys.stdout)
    sweep_dir = os.path.join(out_dir, "sweep")
    paths = ev.emit_report(reports, sweep_dir)
    if "q" in cfg.sweep and "N" in cfg.sweep:
        paths.update(_emit_q_by_N(reports, labels, cfg, sweep_dir))
    if "lam" in cfg.sweep:
        paths.update(_emit_lambda_curve(reports, labels, cfg, sweep_dir))
    with open(os.path.join(sweep_dir, "manifest.json"), "w") as f:
        json.dump({"config_hash": cfg.config_hash(), "n_reports": len(reports),
                   "files": sorted(os.path.basename(p) for p in paths.values())}, f, indent=1, sort_keys=True)
    return reports


def _emit_q_by_N(reports, labels, cfg, out_dir):
    """One q x N table of mean SW per run id, rows in the swept q order."""
    paths = {}
    for rid in dict.fromkeys(r["id"] for r in labels):
        cells = {}
        for rep, lab in zip(reports, labels):
            if lab["id"] == rid:
                cells.setdefault((lab["q_label"], rep.N), []).append(rep.sliced_wasserstein)
        qs, Ns = [int(q) for q in cfg.sweep["q"]], [int(n) for n in cfg.sweep["N"]]
        p = os.path.join(out_dir, f"table_q_by_N_{rid}.csv")
        with open(p, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["q"] + [f"N={n}" for n in Ns])
            for q in qs:
                w.writerow([q] + ["%.17g" % float(np.mean(cells[(q, n)])) if (q, n) in cells else "" for n in Ns])
        paths[f"q_by_N_{rid}"] = p
    return paths


def _emit_lambda_curve(reports, labels, cfg, out_dir):
    curves = {}
    for rep, lab in zip(reports, labels):
        curves.setdefault(f"{lab['id']} N={rep.N}", {}).setdefault(rep.lam, []).append(rep.sliced_wasserstein)
    data = {k: sorted((lam, float(np.mean(v))) for lam, v in d.items()) for k, d in curves.items()}
    p_csv = os.path.join(out_dir, "sw_vs_lambda.csv")
    with open(p_csv, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["curve", "lambda", "sliced_wasserstein"])
        for k, pts in data.items():
            for lam, v in pts:
                w.writerow([k, "%.17g" % lam, "%.17g" % v])
    p_svg = os.path.join(out_dir, "sw_vs_lambda.svg")
    with open(p_svg, "w") as f:
        f.write(ev.line_plot_svg(data, xlabel="lambda", ylabel="sliced_wasserstein"))
    return {"lambda_csv": p_csv, "lambda_svg": p_svg}


def cmd_diagnose(cfg: ExperimentConfig, cache_dir, out_dir, out=None):
    plan = CachePlan(cfg, cache_dir)
    table = plan.load_table()
    spec = plan.spec
    d = dict(cfg.diagnose)
    kinds = _as_list(d.get("kinds", ["R", "L"]))
    n_traj = int(d.get("n_trajectories", 4))
    n_steps = int(d.get("n_steps", 10_000))
    n_record = int(d.get("n_record", 200))
    seed = int(d.get("seed", cfg.eval.seeds[0]))
    coords = d.get("coords")
    oracle = ScoreOracle(cfg.mixture(), spec, table)
    u_T = NoiseStream(seed, "prior").block(0, n_traj, spec.dim_state) @ table.R_at(spec.horizon).T
    traces = [ev.eps_constancy_trace(spec, table, oracle, k, n_traj, seed=seed, n_steps=n_steps, n_record=n_record,
                                     u_T=u_T) for k in kinds]
    diag_dir = os.path.join(out_dir, "diagnose")
    svgs = ev.emit_trace_svgs(traces, diag_dir, coords=coords)
    path = os.path.join(diag_dir, "eps_trace_summary.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["kind", "trajectory", "max_deviation", "constant"])
        for tr in traces:
            for k, dev in enumerate(tr.max_deviation):
                w.writerow([tr.kind, k, "%.17g" % dev, int(dev <= CONSTANT_TRACE_TOL)])
    for tr in traces:
        worst = float(tr.max_deviation.max())
        flag = "constant" if worst <= CONSTANT_TRACE_TOL else "varying"
        print(f"K={tr.kind}: max deviation {worst:.3e} ({flag})", file=out or sys.stdout)
    with open(os.path.join(diag_dir, "manifest.json"), "w") as f:
        json.dump({"config_hash": cfg.config_hash(), "kinds": kinds, "n_trajectories": n_traj,
                   "files": sorted([os.path.basename(p) for p in svgs] + [os.path.basename(path)])},
                  f, indent=1, sort_keys=True)
    return traces


# ---------------------------------------------------------------------------
# entry point


def _parser():
    p = argparse.ArgumentParser(prog="gddim", description="gDDIM samplers for linear-SDE diffusion models")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="experiment YAML file")
        sp.add_argument("--coeff-cache", help="coefficient cache directory (default: <output_dir>/coeffs)")
        sp.add_argument("--output-dir", help="override the config's output_dir")
        sp.add_argument("--frozen", action="store_true", help="fail instead of rebuilding a stale cache")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--seed", type=int, help="override every run seed and the eval seeds")
        sp.add_argument("--N", type=int, dest="N", help="override N for every run and the coeff grid")

    common(sub.add_parser("precompute", help="build the coefficient cache"))
    sp = sub.add_parser("sample", help="execute one run")
    common(sp)
    sp.add_argument("run_id")
    common(sub.add_parser("sweep", help="run every run x seed and emit metric reports"))
    common(sub.add_parser("diagnose", help="eps-constancy traces for K = R and L"))
    return p


def _apply_overrides(cfg: ExperimentConfig, args):
    if args.seed is None and args.N is None:
        return cfg
    cfg = copy.copy(cfg)
    cfg.runs = [dict(r) for r in cfg.runs]
    cfg.coeff = copy.copy(cfg.coeff)
    cfg.eval = copy.copy(cfg.eval)
    cfg.sweep = dict(cfg.sweep)
    if args.seed is not None:
        for r in cfg.runs:
            r["rng_seed"] = args.seed
        cfg.eval.seeds = [args.seed]
        cfg.diagnose = dict(cfg.diagnose, seed=args.seed)
    if args.N is not None:
        for r in cfg.runs:
            r["N"] = args.N
        cfg.coeff.N = [args.N]
        cfg.sweep.pop("N", None)
    cfg._run_nodes = [None] * len(cfg.runs)
    return cfg.validate()


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(ExperimentConfig.load(args.config), args)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        out_dir = cfg.resolve_output(args.output_dir)
        cache_dir = os.path.abspath(args.coeff_cache) if args.coeff_cache else os.path.join(out_dir, "coeffs")
        t0 = time.perf_counter()
        if args.command == "precompute":
            precompute(cfg, cache_dir, frozen=args.frozen)
        else:
            if args.frozen:
                tabs, ms = CachePlan(cfg, cache_dir).stale()
                if tabs or ms:
                    raise CacheError(f"stale coefficient cache in {cache_dir} (--frozen)")
            if args.command == "sample":
                cmd_sample(cfg, args.run_id, cache_dir, out_dir, threads=args.threads)
            elif args.command == "sweep":
                cmd_sweep(cfg, cache_dir, out_dir, threads=args.threads)
            else:
                cmd_diagnose(cfg, cache_dir, out_dir)
        log.info("%s finished in %.2fs", args.command, time.perf_counter() - t0)
        return EXIT_OK
    except CacheError as e:
        print(f"cache error: {e}", file=sys.stderr)
        return EXIT_CACHE
    except (ConfigError, InputError, DomainError, InvalidSigmaError, ScheduleInvalidError,
            ScheduleInconsistentError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConditioningError, StiffnessError, SolverAccuracyError, DecompositionError, FloatingPointError,
            np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
