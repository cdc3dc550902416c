"""Synthetic training data and specification-vector sampling.

A record is one sampled structure with uniformly sampled normalized
parameters, expanded and pushed through the analytic evaluator.  Records
are stored as JSON Lines (gzip by extension) behind a one-line header;
files are byte-reproducible for a fixed master seed no matter how many
worker processes build them, because every record derives its own rng
from (master seed, record index) and the writer keeps file order.
"""
from __future__ import annotations

import gzip
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path

import numpy as np

from .devicelib import expand, sample_structure, structure_ids
from .graph import PARAM_WIDTH, CircuitGraph, graph_from_json, graph_to_json
from .perf import METRIC_NAMES, MetricsVector, evaluate

SCHEMA = "ckt-dataset-v1"

# per-metric divisor, aligned with METRIC_NAMES
NORMALIZATION = np.array([
    1e-3,    # pdiss, W
    100.0,   # gain, dB
    1e7,     # gbw, Hz
    180.0,   # pm, degrees
    1e7,     # srp, V/s
    1e7,     # srn, V/s
    1.2,     # vol, V
    1.2,     # voh, V
    100.0,   # cmrr, dB
    100.0,   # psrr, dB
    1e-6,    # noise @ 1 kHz, V/sqrt(Hz)
    1e-7,    # noise @ 1 GHz, V/sqrt(Hz)
    1e-11,   # cl, F
])


def normalize_metrics(raw) -> np.ndarray:
    """Raw metric vector (or MetricsVector) to normalized units."""
    if isinstance(raw, MetricsVector):
        raw = raw.to_array()
    return np.asarray(raw, dtype=float) / NORMALIZATION


def denormalize_metrics(y) -> np.ndarray:
    return np.asarray(y, dtype=float) * NORMALIZATION


# ---------------------------------------------------------------------------
# specification sampling spaces

@dataclass(frozen=True)
class SamplingSpace:
    name: str
    lo: np.ndarray
    hi: np.ndarray

    def contains(self, y) -> bool:
        y = np.asarray(y, dtype=float)
        return bool(np.all(y >= self.lo) and np.all(y <= self.hi))


# normalized (lo, hi) per metric, columns external / high / medium / low
_RANGE_TABLE = {
    "pdiss":    ((0.03, 0.20), (0.05, 0.35), (0.35, 0.65), (0.65, 1.00)),
    "gain_db":  ((0.80, 1.00), (0.60, 0.80), (0.53, 0.67), (0.40, 0.53)),
    "gbw_hz":   ((1.0, 3.0),   (0.7, 1.0),   (0.4, 0.7),   (0.1, 0.4)),
    "pm_deg":   ((0.31, 0.33), (0.31, 0.33), (0.28, 0.31), (0.25, 0.28)),
    "srp":      ((0.35, 0.5),  (0.35, 0.5),  (0.2, 0.35),  (0.1, 0.20)),
    "srn":      ((0.35, 0.5),  (0.35, 0.5),  (0.2, 0.35),  (0.1, 0.2)),
    "vol":      ((0.1, 0.2),   (0.1, 0.2),   (0.2, 0.35),  (0.35, 0.5)),
    "voh":      ((0.8, 0.9),   (0.8, 0.9),   (0.65, 0.8),  (0.5, 0.65)),
    "cmrr_db":  ((0.6, 0.7),   (0.53, 0.7),  (0.37, 0.53), (0.2, 0.37)),
    "psrr_db":  ((0.6, 0.7),   (0.53, 0.7),  (0.37, 0.53), (0.2, 0.37)),
    "noise_1k": ((0.5, 0.67),  (0.5, 0.67),  (0.67, 0.83), (0.83, 1.0)),
    "noise_1g": ((0.5, 0.67),  (0.5, 0.67),  (0.67, 0.83), (0.83, 1.0)),
    "cl":       ((1.0, 2.0),   (0.7, 1.0),   (0.4, 0.7),   (0.1, 0.4)),
}

SPACE_NAMES = ("external", "high", "medium", "low")


def _space(col: int, name: str) -> SamplingSpace:
    lo = np.array([_RANGE_TABLE[m][col][0] for m in METRIC_NAMES])
    hi = np.array([_RANGE_TABLE[m][col][1] for m in METRIC_NAMES])
    lo.flags.writeable = False
    hi.flags.writeable = False
    return SamplingSpace(name, lo, hi)


SPACES = {name: _space(col, name) for col, name in enumerate(SPACE_NAMES)}

# training loads span the union of every space's CL column
CL_NORM_RANGE = (0.1, 2.0)


def sample_spec(space: SamplingSpace | str, rng: np.random.Generator) -> np.ndarray:
    """One target vector, uniform per entry in the space's intervals."""
    if isinstance(space, str):
        space = SPACES[space]
    return rng.uniform(space.lo, space.hi)


# ---------------------------------------------------------------------------
# record construction

def randomize_params(g: CircuitGraph, rng: np.random.Generator) -> CircuitGraph:
    """Fresh uniform [0,1] values on each node's active slots; the rest 0."""
    params = np.zeros((g.n, PARAM_WIDTH))
    for i, node in enumerate(g.nodes):
        k = len(node.kind.slots)
        params[i, :k] = rng.uniform(size=k)
    return g.with_params(params)


def _record(index: int, seed: int, sids):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))
    g = randomize_params(sample_structure(rng, sids), rng)
    cl = float(rng.uniform(*CL_NORM_RANGE) * NORMALIZATION[-1])
    res = evaluate(expand(g), cl)
    raw = res.metrics.to_array()
    doc = {
        "id": index,
        "graph": json.loads(graph_to_json(g)),
        "metrics_raw": [float(x) for x in raw],
        "metrics_norm": [float(x) for x in normalize_metrics(raw)],
        "valid": bool(res.valid),
    }
    line = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return line, g.n, res.valid


@dataclass(frozen=True)
class DatasetSummary:
    path: str
    count: int
    valid_count: int
    node_histogram: dict[int, int]

    @property
    def invalid_fraction(self) -> float:
        return 1.0 - self.valid_count / self.count


def _open_text_writer(path: Path, gz: bool):
    if gz:
        raw = open(path, "wb")
        # fixed mtime and no embedded name keep gzip output reproducible
        gz = gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0)
        wrapper = io.TextIOWrapper(gz, encoding="utf-8", newline="\n")
        wrapper._raw_file = raw  # closed via _close_writer
        return wrapper
    return open(path, "w", encoding="utf-8", newline="\n")


def _close_writer(fh) -> None:
    raw = getattr(fh, "_raw_file", None)
    fh.close()
    if raw is not None:
        raw.close()


def build_dataset(count: int, seed: int, out_path, structure_ids_=None,
                  jobs: int = 1, meta: dict | None = None) -> DatasetSummary:
    """Sample, evaluate and store `count` records; returns the summary."""
    if count < 1:
        raise ValueError("count must be at least 1")
    known = structure_ids()
    sids = tuple(structure_ids_) if structure_ids_ else tuple(known)
    unknown = [s for s in sids if s not in known]
    if unknown:
        raise ValueError(f"unknown structure ids: {unknown}")

    header = {"schema": SCHEMA, "seed": seed, "count": count,
              "library": list(sids)}
    if meta:
        header.update(meta)

    path = Path(out_path)
    tmp = path.with_name(path.name + ".tmp")
    make = partial(_record, seed=seed, sids=sids)
    hist: dict[int, int] = {}
    valid_count = 0
    fh = _open_text_writer(tmp, gz=path.suffix == ".gz")
    try:
        fh.write(json.dumps(header, sort_keys=True,
                            separators=(",", ":")) + "\n")
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                results = ex.map(make, range(count), chunksize=64)
                for line, n, valid in results:
                    fh.write(line + "\n")
                    hist[n] = hist.get(n, 0) + 1
                    valid_count += valid
        else:
            for index in range(count):
                line, n, valid = make(index)
                fh.write(line + "\n")
                hist[n] = hist.get(n, 0) + 1
                valid_count += valid
        _close_writer(fh)
    except BaseException:
        _close_writer(fh)
        tmp.unlink(missing_ok=True)
        raise
    os.replace(tmp, path)
    return DatasetSummary(str(path), count, valid_count,
                          dict(sorted(hist.items())))


# ---------------------------------------------------------------------------
# reading

@dataclass(frozen=True, eq=False)
class DatasetRecord:
    id: int
    graph: CircuitGraph
    metrics_raw: np.ndarray
    metrics_norm: np.ndarray
    valid: bool

    def __eq__(self, other):
        if not isinstance(other, DatasetRecord):
            return NotImplemented
        return (self.id == other.id and self.graph == other.graph
                and np.array_equal(self.metrics_raw, other.metrics_raw)
                and np.array_equal(self.metrics_norm, other.metrics_norm)
                and self.valid == other.valid)


def _parse_record(doc: dict) -> DatasetRecord:
    g = graph_from_json(json.dumps(doc["graph"]))
    return DatasetRecord(
        int(doc["id"]), g,
        np.array(doc["metrics_raw"], dtype=float),
        np.array(doc["metrics_norm"], dtype=float),
        bool(doc["valid"]))


def load_dataset(path, valid_only: bool = False):
    """Returns (header, records).  valid_only keeps the training subset."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rt", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != SCHEMA:
            raise ValueError(f"not a dataset file: {path}")
        records = [_parse_record(json.loads(line)) for line in fh if line.strip()]
    if valid_only:
        records = [r for r in records if r.valid]
    return header, records
