"""Scoring and benchmarking of generated amplifiers.

Fitness is a hinge penalty over twelve scored metrics: class A wants
the achieved value at least as large as required, class B at most as
large, each miss contributing its relative shortfall beyond the
tolerance. The load capacitance is an operating condition rather than
a scored metric.  FOM and the generation-efficiency index CGEI are the
usual closed forms.  run_bench drives the whole sample -> generate ->
expand -> evaluate -> score loop and keeps failed samples as explicit
invalid rows.

The REFERENCE_* tables hold published measurements from the comparison
study this harness mirrors; they are rendered alongside measured
numbers for context, never asserted against.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import NORMALIZATION, normalize_metrics, sample_spec
from .devicelib import expand
from .diffusion import NoiseSchedule
from .graph import graph_hash
from .neural.generate import generate
from .perf import METRIC_NAMES, PerfConfig, evaluate

CLASS_A = ("gain_db", "gbw_hz", "pm_deg", "srp", "srn", "voh",
           "cmrr_db", "psrr_db")
CLASS_B = ("pdiss", "vol", "noise_1k", "noise_1g")

_METRIC_INDEX = {name: i for i, name in enumerate(METRIC_NAMES)}


@dataclass(frozen=True)
class FitnessConfig:
    tol: float = 0.0
    class_a: tuple = CLASS_A
    class_b: tuple = CLASS_B

    def __post_init__(self):
        if self.tol < 0:
            raise ValueError("tolerance must be non-negative")
        a, b = set(self.class_a), set(self.class_b)
        if a & b:
            raise ValueError(f"metrics in both classes: {sorted(a & b)}")
        unknown = (a | b) - set(METRIC_NAMES)
        if unknown:
            raise ValueError(f"unknown metrics: {sorted(unknown)}")
        if not (a | b):
            raise ValueError("no scored metrics")

    @property
    def np_(self) -> int:
        return len(self.class_a) + len(self.class_b)


def _as_array(metrics) -> np.ndarray:
    if hasattr(metrics, "to_array"):
        metrics = metrics.to_array()
    arr = np.asarray(metrics, dtype=float)
    if arr.shape != (len(METRIC_NAMES),):
        raise ValueError(f"expected {len(METRIC_NAMES)} metrics, "
                         f"got shape {arr.shape}")
    return arr


def fitness(required, actual, cfg: FitnessConfig | None = None) -> float:
    """Hinge score in (-inf, 1]; 1 means every requirement is met.

    Both vectors must use the same units per metric (raw or normalized,
    the ratios are identical either way).
    """
    cfg = cfg or FitnessConfig()
    req = _as_array(required)
    act = _as_array(actual)
    total = 1.0
    for name in cfg.class_a:
        yi = req[_METRIC_INDEX[name]]
        if yi == 0.0:
            raise ValueError(f"required {name} is zero")
        miss = (yi - act[_METRIC_INDEX[name]]) / yi - cfg.tol
        total -= max(0.0, miss) / cfg.np_
    for name in cfg.class_b:
        ya = act[_METRIC_INDEX[name]]
        if ya == 0.0:
            raise ValueError(f"actual {name} is zero")
        miss = (ya - req[_METRIC_INDEX[name]]) / ya - cfg.tol
        total -= max(0.0, miss) / cfg.np_
    return total


def fom(gbw_mhz: float, cl_pf: float, pdiss_mw: float) -> float:
    """GBW(MHz) * CL(pF) / Pdiss(mW)."""
    if pdiss_mw <= 0.0:
        raise ValueError("pdiss must be positive")
    return gbw_mhz * cl_pf / pdiss_mw


def cgei(fom_value: float, seconds: float) -> float:
    """Generation efficiency: FOM per second of wall time."""
    if seconds <= 0.0:
        raise ValueError("time must be positive")
    return fom_value / seconds


# who achieved what, per the published comparison study
REFERENCE_INTERVAL_ROWS = (
    # (interval, fitness mean, fitness std, seconds mean, seconds std)
    (1, 0.853, 0.092, 7.67, 0.15),
    (5, 0.804, 0.181, 1.57, 0.08),
    (10, 0.757, 0.182, 0.86, 0.08),
    (20, 0.711, 0.244, 0.81, 0.09),
)
REFERENCE_SPACE_ROWS = (
    # (space, best fom, mean fom, fom std, fitness, fitness std, valid rate)
    ("external", 4530.0, 2401.0, 723.0, 0.814, 0.115, 0.88),
    ("high", 1837.0, 1250.0, 430.0, 0.845, 0.119, 0.88),
    ("medium", 745.0, 499.0, 207.0, 0.866, 0.120, 0.84),
    ("low", 523.0, 238.0, 153.0, 0.901, 0.081, 0.90),
)
REFERENCE_CGEI_ROWS = (
    # (method, variant, fom, seconds, cgei)
    ("cktgnn", "-", 13.27, 0.13, 102.0),
    ("ladac", "1", 102.0, 289.0, 0.35),
    ("ladac", "2", 1250.0, 444.0, 2.81),
    ("mace", "1", 478.0, 7035.0, 0.068),
    ("mace", "2", 386.0, 7612.0, 0.051),
    ("mace", "3", 129.0, 7377.0, 0.017),
    ("ampagent", "worst", 458.0, 545.0, 1.19),
    ("ampagent", "best", 179077.0, 696.0, 257.3),
    ("diffusion-reference", "worst", 86.0, 7.69, 11.2),
    ("diffusion-reference", "best", 4530.0, 7.97, 568.0),
)


@dataclass
class ModelBundle:
    """Trained networks plus the schedule they were trained against."""

    count: object
    discrete: object
    continuous: object
    sched: NoiseSchedule


@dataclass
class BenchRow:
    index: int
    spec_norm: np.ndarray
    graph_id: str | None
    n: int
    structural_valid: bool
    valid: bool
    fitness: float | None
    fom: float | None
    cgei: float | None
    seconds: float
    reason: str | None
    metrics_norm: np.ndarray | None


@dataclass
class BenchReport:
    space: str
    interval: int
    tol: float
    config_hash: str
    rows: list[BenchRow] = field(default_factory=list)

    def aggregates(self) -> dict:
        """Summary statistics; keys with no supporting rows are absent."""
        out: dict = {"samples": len(self.rows)}
        if not self.rows:
            return out
        out["structural_rate"] = float(
            np.mean([r.structural_valid for r in self.rows]))
        out["valid_rate"] = float(np.mean([r.valid for r in self.rows]))
        out["mean_seconds"] = float(np.mean([r.seconds for r in self.rows]))
        fits = [r.fitness for r in self.rows if r.fitness is not None]
        if fits:
            out["mean_fitness"] = float(np.mean(fits))
            out["std_fitness"] = float(np.std(fits))
        foms = [r.fom for r in self.rows if r.fom is not None]
        if foms:
            out["mean_fom"] = float(np.mean(foms))
            out["best_fom"] = float(np.max(foms))
        cgeis = [r.cgei for r in self.rows if r.cgei is not None]
        if cgeis:
            out["mean_cgei"] = float(np.mean(cgeis))
            out["best_cgei"] = float(np.max(cgeis))
        return out


def run_bench(space: str, samples: int, interval: int, models: ModelBundle,
              rng: np.random.Generator, *, tol: float = 0.0,
              perf_cfg: PerfConfig | None = None,
              clock=time.perf_counter, config_hash: str = "") -> BenchReport:
    """Sample specs, generate circuits and score them.

    Wall time covers the generation path only (count prediction, both
    denoising phases, io binding); clock is injectable so reports can be
    byte-deterministic under test.
    """
    fc = FitnessConfig(tol=tol)
    report = BenchReport(space, interval, tol, config_hash)
    for i in range(samples):
        spec = sample_spec(space, rng)
        t0 = clock()
        res = generate(spec, models.count, models.discrete,
                       models.continuous, models.sched, rng,
                       interval=interval)
        seconds = clock() - t0
        row = BenchRow(index=i, spec_norm=spec, graph_id=None, n=res.n,
                       structural_valid=res.valid, valid=False, fitness=None,
                       fom=None, cgei=None, seconds=seconds,
                       reason=res.reason, metrics_norm=None)
        if res.valid:
            row.graph_id = graph_hash(res.graph)
            cl = spec[_METRIC_INDEX["cl"]] * NORMALIZATION[_METRIC_INDEX["cl"]]
            ev = evaluate(expand(res.graph), cl, perf_cfg)
            if ev.valid:
                row.valid = True
                row.metrics_norm = normalize_metrics(ev.metrics.to_array())
                try:
                    row.fitness = fitness(spec, row.metrics_norm, fc)
                except ValueError as exc:
                    row.reason = f"fitness: {exc}"
                m = ev.metrics
                row.fom = fom(m.gbw_hz / 1e6, cl / 1e-12, m.pdiss / 1e-3)
                if seconds > 0.0:
                    row.cgei = cgei(row.fom, seconds)
            else:
                row.reason = "evaluate: " + ";".join(ev.reasons)
        report.rows.append(row)
    return report


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, np.ndarray):
        return json.dumps([float(x) for x in value])
    if isinstance(value, float):
        return repr(value)
    return str(value)


_CSV_FIELDS = ("index", "n", "structural_valid", "valid", "fitness", "fom",
               "cgei", "seconds", "reason", "graph_id", "spec_norm",
               "metrics_norm")


def write_csv(report: BenchReport, path) -> None:
    """One row per sample; vectors are stored as JSON cells."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_CSV_FIELDS)
        for row in report.rows:
            writer.writerow([_cell(getattr(row, f)) for f in _CSV_FIELDS])


def write_json(report: BenchReport, path) -> None:
    """Aggregate block plus full rows, with the producing config hash."""
    doc = {
        "schema": "ckt-bench-v1",
        "space": report.space,
        "interval": report.interval,
        "tol": report.tol,
        "config_hash": report.config_hash,
        "aggregates": report.aggregates(),
        "reference": {
            "intervals": [list(r) for r in REFERENCE_INTERVAL_ROWS],
            "spaces": [list(r) for r in REFERENCE_SPACE_ROWS],
            "cgei": [list(r) for r in REFERENCE_CGEI_ROWS],
        },
        "rows": [
            {f: (getattr(r, f).tolist()
                 if isinstance(getattr(r, f), np.ndarray)
                 else getattr(r, f))
             for f in _CSV_FIELDS}
            for r in report.rows
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_report(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema") != "ckt-bench-v1":
        raise ValueError(f"not a bench report: {path}")
    return doc


def fitness_vs_tolerance(report: BenchReport,
                         tols=None) -> list[tuple[float, float]]:
    """Mean fitness over the scored rows as the tolerance widens."""
    if tols is None:
        tols = [round(0.02 * k, 2) for k in range(26)]
    scored = [(r.spec_norm, r.metrics_norm) for r in report.rows
              if r.metrics_norm is not None]
    curve = []
    for tol in tols:
        fc = FitnessConfig(tol=tol)
        if scored:
            vals = [fitness(spec, act, fc) for spec, act in scored]
            curve.append((tol, float(np.mean(vals))))
        else:
            curve.append((tol, float("nan")))
    return curve


def emit_plot_data(report: BenchReport, path) -> None:
    """gnuplot-friendly columns: fitness-vs-tolerance, then CGEI bars."""
    lines = ["# block 0: tolerance mean_fitness"]
    for tol, val in fitness_vs_tolerance(report):
        lines.append(f"{tol:.2f} {val!r}")
    lines.append("")
    lines.append("")
    lines.append("# block 1: label cgei")
    agg = report.aggregates()
    if "best_cgei" in agg:
        lines.append(f"\"measured-best\" {agg['best_cgei']!r}")
    if "mean_cgei" in agg:
        lines.append(f"\"measured-mean\" {agg['mean_cgei']!r}")
    for method, variant, _, _, value in REFERENCE_CGEI_ROWS:
        lines.append(f"\"{method}/{variant}\" {value!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
