"""Experiment configuration, the solve-and-certify pipeline, and report files.

A config is a YAML mapping::

    instance:
      generator: {cardinality: 2, interior_count: 1, seed: 42,
                  dirichlet_concentration: 1.0, eps_floor: 1.0e-3}
      # or explicit: {initial: [...], transitions: [[[...]]], mu: [...], nu: [...], coupling: [[...]]}
    imf: {max_iterations: 100, stop_kl: 1.0e-14, record_gradients: true}
    oracle: {tolerance: 1.0e-13, max_iterations: 100000}
    checks: [lemma2, {lemma3: {trials: 1000}}, lemma4, theorem1, spectrum, gradients]
    output: {directory: out, formats: [json, csv]}

For sweeps the generator takes ``seeds: [...]`` or ``seed_range: [start, stop]``
instead of ``seed``, and ``cardinality`` / ``interior_count`` may be lists;
the i-th seed then uses the i-th geometry of their product, cycling.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .imf import TABLE_COLUMNS, ImfConfig, IterationTrace, check_lemma1, run_imf
from .oracle import SinkhornConfig, brute_force_opt, kl_gap, solve_bridge, solve_static
from .process import (
    GeneratorSpec,
    Instance,
    bridge_conditional,
    build_markov_joint,
    endpoint_coupling,
    explicit_instance,
    init_p0,
    random_instance,
)
from .theory import (
    DEFAULT_TOL,
    CertificateReport,
    SubspaceId,
    build_constraint_operator,
    check_convexity_spectrum,
    check_lemma3,
    check_operator_algebra,
    check_theorem1,
    compute_constants,
    finite_difference_check,
    inequality,
    project_onto_subspace,
    upper_bound,
)

log = logging.getLogger(__name__)

KNOWN_CHECKS = ("lemma1", "lemma2", "lemma3", "lemma4", "theorem1", "spectrum", "gradients", "oracle")
RANDOMIZED_CHECKS = {"lemma1", "lemma3", "gradients"}
MASS_TOL = 1e-13
KL_TOL = 1e-12
NOISE_FLOOR = 1e-13


class ConfigError(ValueError):
    pass


# -- configuration ----------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    cardinality: Any = 2
    interior_count: Any = 1
    dirichlet_concentration: float = 1.0
    eps_floor: float = 1e-3
    seed: Optional[int] = None
    seeds: Optional[tuple] = None

    def geometries(self) -> list:
        ks = self.cardinality if isinstance(self.cardinality, (list, tuple)) else [self.cardinality]
        ns = self.interior_count if isinstance(self.interior_count, (list, tuple)) else [self.interior_count]
        return list(itertools.product(ks, ns))

    def spec(self, index: int = 0, seed: Optional[int] = None) -> GeneratorSpec:
        k, n = self.geometries()[index % len(self.geometries())]
        seed = self.seed if seed is None else seed
        return GeneratorSpec(int(k), int(n), int(seed), float(self.dirichlet_concentration), float(self.eps_floor))


@dataclass(frozen=True)
class ExplicitConfig:
    initial: tuple
    transitions: tuple
    mu: tuple
    nu: tuple
    coupling: Optional[tuple] = None


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "imf_out"
    formats: tuple = ("json", "csv")


@dataclass(frozen=True)
class ExperimentConfig:
    generator: Optional[GeneratorConfig] = None
    explicit: Optional[ExplicitConfig] = None
    imf: ImfConfig = ImfConfig()
    oracle: SinkhornConfig = SinkhornConfig()
    checks: dict = field(default_factory=dict)
    output: OutputConfig = OutputConfig()
    seed: Optional[int] = None

    @property
    def check_seed(self) -> Optional[int]:
        if self.seed is not None:
            return self.seed
        return self.generator.seed if self.generator is not None else None

    def with_seed(self, index: int, seed: int) -> "ExperimentConfig":
        """Single-instance config for the index-th entry of a sweep."""
        k, n = self.generator.geometries()[index % len(self.generator.geometries())]
        gen = replace(self.generator, cardinality=k, interior_count=n, seed=seed, seeds=None)
        return replace(self, generator=gen)


def _section(raw: dict, key: str, cls):
    body = raw.get(key) or {}
    if not isinstance(body, dict):
        raise ConfigError(f"'{key}' must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(body) - names
    if unknown:
        raise ConfigError(f"unknown keys in '{key}': {sorted(unknown)}")
    try:
        return cls(**body)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{key}': {exc}") from exc


def _parse_checks(raw) -> dict:
    if raw is None:
        return {name: {} for name in ("lemma2", "lemma3", "lemma4", "theorem1", "spectrum", "gradients")}
    if not isinstance(raw, list):
        raise ConfigError("'checks' must be a list")
    out = {}
    for item in raw:
        if isinstance(item, str):
            name, opts = item, {}
        elif isinstance(item, dict) and len(item) == 1:
            name, opts = next(iter(item.items()))
            opts = opts or {}
        else:
            raise ConfigError(f"bad check entry {item!r}")
        if name not in KNOWN_CHECKS:
            raise ConfigError(f"unknown check '{name}'; known: {', '.join(KNOWN_CHECKS)}")
        if not isinstance(opts, dict):
            raise ConfigError(f"options for check '{name}' must be a mapping")
        out[name] = dict(opts)
    return out


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(raw) - {"instance", "imf", "oracle", "checks", "output", "seed"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    inst = raw.get("instance")
    if not isinstance(inst, dict):
        raise ConfigError("'instance' section is required")
    has_gen, has_exp = "generator" in inst, "explicit" in inst
    if has_gen == has_exp:
        raise ConfigError("instance needs exactly one of 'generator' or 'explicit'")
    generator = explicit = None
    if has_gen:
        body = dict(inst["generator"] or {})
        if "seed_range" in body:
            start, stop = body.pop("seed_range")
            body["seeds"] = list(range(int(start), int(stop)))
        if "seeds" in body:
            body["seeds"] = tuple(int(s) for s in body["seeds"])
            if len(set(body["seeds"])) != len(body["seeds"]):
                raise ConfigError("seed list has duplicates")
        generator = _section({"generator": body}, "generator", GeneratorConfig)
        if generator.seed is None and generator.seeds is None:
            raise ConfigError("generator requires 'seed' (or 'seeds' / 'seed_range' for a sweep)")
    else:
        body = dict(inst["explicit"] or {})
        explicit = _section({"explicit": body}, "explicit", ExplicitConfig)
    checks = _parse_checks(raw.get("checks"))
    seed = raw.get("seed")
    cfg = ExperimentConfig(
        generator=generator,
        explicit=explicit,
        imf=_section(raw, "imf", ImfConfig),
        oracle=_section(raw, "oracle", SinkhornConfig),
        checks=checks,
        output=_section(raw, "output", OutputConfig),
        seed=None if seed is None else int(seed),
    )
    if RANDOMIZED_CHECKS & set(checks) and cfg.check_seed is None and not (generator and generator.seeds):
        raise ConfigError(f"a seed is required for randomized checks {sorted(RANDOMIZED_CHECKS & set(checks))}")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return parse_config(raw)


def build_instance(cfg: ExperimentConfig) -> Instance:
    if cfg.generator is not None:
        return random_instance(cfg.generator.spec())
    e = cfg.explicit
    return explicit_instance(e.initial, e.transitions, e.mu, e.nu, e.coupling)


# -- report -----------------------------------------------------------------


def _clean(x):
    """NaN and inf become None so JSON stays standard."""
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        return _clean(x.item())
    return x


@dataclass
class RunReport:
    instance: dict
    constants: dict
    table: list
    certificates: list
    oracle: dict
    passed: bool
    timings: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        """Serializable form. Timings are omitted so reruns are byte-identical."""
        return _clean(
            {
                "instance": self.instance,
                "constants": self.constants,
                "oracle": self.oracle,
                "passed": self.passed,
                "certificates": self.certificates,
                "table": self.table,
            }
        )

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        def nan(v):
            return float("nan") if v is None else v

        table = [{k: nan(v) for k, v in row.items()} for row in d["table"]]
        return cls(d["instance"], d["constants"], table, d["certificates"], d["oracle"], d["passed"])

    def certificate(self, name: str) -> dict:
        for c in self.certificates:
            if c["name"] == name:
                return c
        raise KeyError(name)

    def per_step_ratio(self) -> float:
        """Largest KL(p_k)/KL(p_{k-1}) over integer steps still above the noise floor."""
        ints = [r for r in self.table if float(r["k"]).is_integer()]
        ratios = [
            b["kl_to_opt"] / a["kl_to_opt"]
            for a, b in zip(ints, ints[1:])
            if a["kl_to_opt"] > NOISE_FLOOR and b["kl_to_opt"] > NOISE_FLOOR
        ]
        return max(ratios) if ratios else float("nan")


def format_float(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return f"{x:.17g}"


def table_csv(table: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for row in table:
        w.writerow([format_float(float(row[c])) if c != "k" else f"{row['k']:g}" for c in TABLE_COLUMNS])
    return buf.getvalue()


def _dump(obj) -> str:
    return json.dumps(_clean(obj), indent=2, allow_nan=False) + "\n"


def write_report(report: RunReport, directory, formats=("json", "csv")) -> Path:
    out = Path(directory)
    (out / "certificates").mkdir(parents=True, exist_ok=True)
    if "csv" in formats:
        (out / "convergence.csv").write_text(table_csv(report.table))
    if "json" in formats:
        (out / "report.json").write_text(_dump(report.to_dict()))
    for cert in report.certificates:
        (out / "certificates" / f"{cert['name']}.json").write_text(_dump(cert))
    summary = {
        "passed": report.passed,
        "instance": report.instance,
        "constants": report.constants,
        "oracle": report.oracle,
        "certificates": {
            c["name"]: {"passed": c["passed"], "min_slack": c["min_slack"]} for c in report.certificates
        },
    }
    (out / "summary.json").write_text(_dump(summary))
    return out


def read_report(directory) -> RunReport:
    return RunReport.from_dict(json.loads((Path(directory) / "report.json").read_text()))


# -- pipeline ---------------------------------------------------------------


def _trace_table(trace: IterationTrace) -> list:
    return [{c: float(getattr(r, c)) for c in TABLE_COLUMNS} for r in trace.rows]


def run_experiment(cfg: ExperimentConfig, tolerance: Optional[float] = None) -> RunReport:
    """Instance, oracle, IMF, then every enabled certificate."""
    tol = DEFAULT_TOL if tolerance is None else tolerance
    timings = {}
    t0 = time.perf_counter()
    inst = build_instance(cfg)
    q = build_markov_joint(inst.spec)
    bridge = bridge_conditional(q)
    constants = compute_constants(bridge, inst.marginals)
    timings["build"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    sol = solve_bridge(q, inst.marginals, cfg.oracle, bridge)
    opt = sol.lifted
    timings["oracle"] = time.perf_counter() - t0

    checks = cfg.checks
    keep = bool({"spectrum", "lemma1"} & set(checks))
    imf_cfg = replace(cfg.imf, keep_iterates=keep or cfg.imf.keep_iterates, tolerance=tol)
    t0 = time.perf_counter()
    p0 = init_p0(bridge, inst.coupling, inst.marginals)
    trace = run_imf(p0, bridge, opt, imf_cfg, constants, inst.marginals)
    timings["imf"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    seed = cfg.check_seed
    certs = []
    space = inst.space

    if "lemma1" in checks:
        opts = checks["lemma1"]
        rng = np.random.default_rng([seed, 1])
        rep = CertificateReport("lemma1")
        its = trace.iterates
        for k in range(int(opts.get("iterations", 3))):
            if 2 * k + 2 >= len(its):
                break
            rep.extend(
                check_lemma1(
                    its[2 * k], its[2 * k + 1], its[2 * k + 2], opt, constants.m / 2,
                    int(opts.get("perturbations", 100)), rng, tol=KL_TOL,
                )
            )
        certs.append(rep.summarize())

    if "lemma2" in checks:
        rep = CertificateReport("lemma2")
        for r in trace.rows[1:]:
            rep.add(inequality("mass_bound", r.min_mass, constants.m, MASS_TOL))
            rep.add(upper_bound("marginals_preserved", r.marginal_error, 0.0, 1e-11))
        rep.add(
            upper_bound("m_two_ways", abs(constants.m - constants.m_direct) / constants.m_direct, 0.0, 1e-15)
        )
        certs.append(rep.summarize())

    if "lemma3" in checks:
        certs.append(check_lemma3(space, int(checks["lemma3"].get("trials", 1000)), seed, tol))

    if "lemma4" in checks:
        max_k = checks["lemma4"].get("max_k")
        rep = CertificateReport("lemma4")
        for r in trace.integer_rows():
            if r.k < 1 or math.isnan(r.lemma4_slack) or (max_k is not None and r.k > max_k):
                continue
            rep.add(inequality("markov_halfstep", r.markov_halfstep_slack, 0.0, tol))
            rep.add(inequality("reciprocal_halfstep", r.reciprocal_halfstep_slack, 0.0, tol))
            rep.add(inequality("lemma4", r.lemma4_slack, 0.0, tol))
        if not rep.checks:
            rep.notes.append("fewer than two iterations with k >= 1; nothing to check")
        certs.append(rep.summarize())

    if "theorem1" in checks:
        certs.append(check_theorem1(trace, constants, tol))

    if "spectrum" in checks:
        rep = CertificateReport("spectrum")
        for p in trace.iterates[1:]:
            rep.extend(check_convexity_spectrum(p, constants))
        certs.append(rep.summarize())

    if "gradients" in checks:
        opts = checks["gradients"]
        rng = np.random.default_rng([seed, 2])
        op = build_constraint_operator(space, SubspaceId.LC)
        point = p0 if p0.min_mass() > 0 else trace.final
        dirs = [project_onto_subspace(rng.standard_normal(space.shape), op).values for _ in range(int(opts.get("directions", 20)))]
        rep = finite_difference_check(point, opt, dirs, rtol=float(opts.get("rtol", 1e-6)))
        rep.extend(check_operator_algebra(space, int(opts.get("trials", 10)), int(rng.integers(2**31)), tol))
        certs.append(rep.summarize())

    if "oracle" in checks:
        rep = CertificateReport("oracle")
        if space.cardinality <= 3 and space.interior_count <= 2:
            bf = brute_force_opt(q, inst.marginals)
            rep.add(upper_bound("brute_force_agreement", kl_gap(bf, opt), 0.0, 1e-8))
        else:
            rep.notes.append("instance too large for brute_force_opt")
        other = solve_static(endpoint_coupling(q), inst.marginals, cfg.oracle, v0=np.linspace(0.5, 2.0, space.cardinality))
        gap = float(np.max(np.abs(other.coupling.matrix - sol.static_coupling.matrix)))
        rep.add(upper_bound("unique_fixed_point", gap, 0.0, tol))
        certs.append(rep)
    timings["checks"] = time.perf_counter() - t0

    cert_dicts = [c.as_dict() for c in certs]
    instance_info = {"cardinality": space.cardinality, "interior_count": space.interior_count}
    if cfg.generator is not None:
        g = cfg.generator.spec()
        instance_info.update(
            seed=g.seed, dirichlet_concentration=g.dirichlet_concentration, eps_floor=g.eps_floor
        )
    return RunReport(
        instance=instance_info,
        constants=constants.as_dict(),
        table=_trace_table(trace),
        certificates=cert_dicts,
        oracle={
            "residual": sol.residual,
            "iterations": sol.iterations_used,
            "kl_p0": trace.kl0,
            "kl_final": trace.rows[-1].kl_to_opt,
            "iterations_run": trace.iterations,
        },
        passed=all(c.passed for c in certs),
        timings=timings,
    )
