"""Gate-distribution analytics over logs collected at evaluation.

A GateLog is the binary gate matrix for a whole eval set (one row per
sample, one column per gated filter) plus each gate's (layer, filter)
address and the sample labels. Everything here is a pure function of that
log: the three-way gate taxonomy (always on / always off / input
dependent), per-layer distributions, on-count and fired-count histograms,
and a PCA reduction of the per-sample usage vectors for external
embedding tools.

Logs are collected in eval mode only, where gates are exactly binary and
deterministic.
"""

from __future__ import annotations

import csv
import io
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gaternet.persist import CheckpointError, atomic_write_bytes, atomic_write_text
from gaternet.tensor import Array, Tensor

GATELOG_MAGIC = b"GLOG"
GATELOG_VERSION = 1
CATEGORIES = ("always_on", "always_off", "input_dependent")
ALWAYS_ON, ALWAYS_OFF, INPUT_DEPENDENT = range(3)


@dataclass(frozen=True)
class GateLog:
    """Binary gates for an eval set: rows are samples, columns are gates."""

    gates: Array       # uint8 [n, c], entries 0/1
    labels: Array      # int64 [n]
    layer_ids: Array   # int64 [c], backbone layer index of each gate
    filter_ids: Array  # int64 [c], filter index within that layer

    def __post_init__(self):
        g = np.ascontiguousarray(self.gates, dtype=np.uint8)
        object.__setattr__(self, "gates", g)
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        object.__setattr__(self, "layer_ids", np.asarray(self.layer_ids, dtype=np.int64))
        object.__setattr__(self, "filter_ids", np.asarray(self.filter_ids, dtype=np.int64))
        if g.ndim != 2:
            raise ValueError(f"gates must be 2-D [samples, gates], got {g.shape}")
        n, c = g.shape
        if not np.all((g == 0) | (g == 1)):
            raise ValueError("gate entries must all be 0 or 1")
        if self.labels.shape != (n,):
            raise ValueError(f"labels must have shape ({n},), got {self.labels.shape}")
        if self.layer_ids.shape != (c,) or self.filter_ids.shape != (c,):
            raise ValueError(
                f"layer_ids and filter_ids must have shape ({c},), got "
                f"{self.layer_ids.shape} and {self.filter_ids.shape}"
            )
        pairs = set(zip(self.layer_ids.tolist(), self.filter_ids.tolist()))
        if len(pairs) != c:
            raise ValueError("(layer, filter) addresses must be unique per gate")

    @property
    def num_samples(self) -> int:
        return self.gates.shape[0]

    @property
    def num_gates(self) -> int:
        return self.gates.shape[1]


def save_gate_log(path: str | Path, log: GateLog) -> None:
    """Packed binary log: header, addresses, labels, then one bit per gate."""
    n, c = log.gates.shape
    parts = [
        GATELOG_MAGIC,
        struct.pack("<IIII", GATELOG_VERSION, n, c, 0),
        log.layer_ids.astype("<i8").tobytes(),
        log.filter_ids.astype("<i8").tobytes(),
        log.labels.astype("<i8").tobytes(),
        np.packbits(log.gates, axis=1).tobytes(),
    ]
    atomic_write_bytes(path, b"".join(parts))


def load_gate_log(path: str | Path) -> GateLog:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"gate log not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != GATELOG_MAGIC:
        raise CheckpointError(f"{path}: not a gate log (bad magic {raw[:4]!r})")
    version, n, c, _ = struct.unpack_from("<IIII", raw, 4)
    if version != GATELOG_VERSION:
        raise CheckpointError(f"{path}: unsupported gate log version {version}")
    off = 4 + 16
    row_bytes = -(-c // 8)
    need = off + 8 * c + 8 * c + 8 * n + n * row_bytes
    if len(raw) != need:
        raise CheckpointError(
            f"{path}: expected {need} bytes for {n} samples x {c} gates, "
            f"got {len(raw)}"
        )

    def take(count, dtype):
        nonlocal off
        out = np.frombuffer(raw, dtype=dtype, count=count, offset=off).copy()
        off += count * np.dtype(dtype).itemsize
        return out

    layer_ids = take(c, "<i8")
    filter_ids = take(c, "<i8")
    labels = take(n, "<i8")
    packed = take(n * row_bytes, np.uint8).reshape(n, row_bytes)
    gates = np.unpackbits(packed, axis=1)[:, :c]
    return GateLog(gates=gates, labels=labels, layer_ids=layer_ids,
                   filter_ids=filter_ids)


def collect_gate_log(model, x: Array, labels: Array, batch_size: int = 256) -> GateLog:
    """Eval-mode forward over a dataset, keeping each sample's binary gates."""
    if model.spec.gated_filter_total == 0:
        raise ValueError("model has no gated filters, nothing to log")
    rows = []
    for lo in range(0, len(x), batch_size):
        _, bundle = model.forward(Tensor(x[lo : lo + batch_size]), training=False)
        rows.append(bundle.g_beta.data.astype(np.uint8))
    return GateLog(
        gates=np.concatenate(rows, axis=0),
        labels=np.asarray(labels, dtype=np.int64),
        layer_ids=model.gate_map.layer_ids,
        filter_ids=model.gate_map.filter_ids,
    )


@dataclass(frozen=True)
class GateTaxonomy:
    """Per-gate category plus per-layer counts and fractions.

    categories holds one code per gate (ALWAYS_ON / ALWAYS_OFF /
    INPUT_DEPENDENT); layers lists the distinct layer ids in ascending
    order, and counts[i, k] is how many of layer i's gates fall in
    category k. Rows of fractions sum to 1.
    """

    categories: Array  # int8 [c]
    layers: Array      # int64 [L]
    counts: Array      # int64 [L, 3]
    fractions: Array   # float64 [L, 3]

    def total(self, category: int) -> int:
        return int((self.categories == category).sum())


def classify_gates(log: GateLog) -> GateTaxonomy:
    """always_on iff a column is all ones, always_off iff all zeros,
    input_dependent otherwise. Needs at least one sample."""
    n, c = log.gates.shape
    if n < 1:
        raise ValueError("cannot classify gates from an empty log")
    on_counts = log.gates.sum(axis=0, dtype=np.int64)
    categories = np.full(c, INPUT_DEPENDENT, dtype=np.int8)
    categories[on_counts == n] = ALWAYS_ON
    categories[on_counts == 0] = ALWAYS_OFF
    layers = np.unique(log.layer_ids)
    counts = np.zeros((len(layers), 3), dtype=np.int64)
    for i, layer in enumerate(layers):
        mask = log.layer_ids == layer
        for k in range(3):
            counts[i, k] = int((categories[mask] == k).sum())
    totals = counts.sum(axis=1, keepdims=True)
    fractions = counts / totals
    return GateTaxonomy(categories=categories, layers=layers, counts=counts,
                        fractions=fractions)


def layer_distribution(tax: GateTaxonomy) -> list[dict]:
    """One row per layer with both absolute counts and fractions."""
    rows = []
    for i, layer in enumerate(tax.layers.tolist()):
        row = {"layer_id": layer, "total": int(tax.counts[i].sum())}
        for k, name in enumerate(CATEGORIES):
            row[name] = int(tax.counts[i, k])
        for k, name in enumerate(CATEGORIES):
            row[f"frac_{name}"] = float(tax.fractions[i, k])
        rows.append(row)
    return rows


@dataclass(frozen=True)
class Histogram:
    counts: Array  # int64 [bins]
    edges: Array   # float64 [bins + 1]


@dataclass(frozen=True)
class OnCountReport:
    """How often each input-dependent gate fires across the eval set."""

    gate_indices: Array  # int64, which gates are input-dependent
    on_counts: Array     # int64, ones per such gate
    histogram: Histogram


def on_count_histogram(log: GateLog, bins: int = 100) -> OnCountReport:
    """Histogram of per-gate on-counts, input-dependent gates only, over
    equal-width bins spanning [0, num_samples]."""
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    n = log.num_samples
    tax = classify_gates(log)
    dep = np.flatnonzero(tax.categories == INPUT_DEPENDENT)
    on_counts = log.gates[:, dep].sum(axis=0, dtype=np.int64)
    counts, edges = np.histogram(on_counts, bins=bins, range=(0, n))
    return OnCountReport(
        gate_indices=dep.astype(np.int64),
        on_counts=on_counts,
        histogram=Histogram(counts=counts.astype(np.int64), edges=edges),
    )


@dataclass(frozen=True)
class FiredCountReport:
    """How many gates each sample turns on."""

    per_sample: Array  # int64 [n]
    total: int         # exact integer: sum over the whole log
    min: int
    max: int
    mean: float        # total / n
    histogram: Histogram


def fired_count_per_sample(log: GateLog, bins: int = 100) -> FiredCountReport:
    """Row sums with summary stats; histogram spans [0, num_gates]."""
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    per_sample = log.gates.sum(axis=1, dtype=np.int64)
    total = int(per_sample.sum())
    counts, edges = np.histogram(per_sample, bins=bins, range=(0, log.num_gates))
    return FiredCountReport(
        per_sample=per_sample,
        total=total,
        min=int(per_sample.min()),
        max=int(per_sample.max()),
        mean=total / log.num_samples,
        histogram=Histogram(counts=counts.astype(np.int64), edges=edges),
    )


@dataclass(frozen=True)
class PCAResult:
    reduced: Array                   # float64 [n, k]
    components: Array                # float64 [k, d], rows orthonormal
    explained_variance_ratio: Array  # float64 [k], non-increasing
    mean: Array                      # float64 [d], the subtracted column means
    rank_deficient: bool


def pca_reduce(vectors: Array, k: int) -> PCAResult:
    """Project centered rows onto the top-k principal directions.

    Uses a singular decomposition of the centered data in float64.
    Components are ordered by descending variance; each component's
    largest-magnitude coordinate is made positive so signs are
    reproducible. Ratios are against the total variance of the data, so
    they sum to at most 1. Asking for more components than the data's
    rank is allowed: the trailing components carry zero variance and the
    result is flagged rank_deficient.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"vectors must be 2-D [samples, features], got {x.shape}")
    n, d = x.shape
    if not 1 <= k <= min(n, d):
        raise ValueError(f"k must be in [1, min(n, d)] = [1, {min(n, d)}], got {k}")
    mean = x.mean(axis=0)
    xc = x - mean
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    tol = s[0] * max(n, d) * np.finfo(np.float64).eps if s.size else 0.0
    rank = int((s > tol).sum())
    rank_deficient = k > rank
    if rank_deficient:
        warnings.warn(
            f"requested {k} components but the centered data has rank {rank}; "
            f"trailing components carry zero variance",
            stacklevel=2,
        )
    components = vt[:k].copy()
    for i in range(k):
        j = int(np.abs(components[i]).argmax())
        if components[i, j] < 0:
            components[i] = -components[i]
    reduced = xc @ components.T
    total_var = float((s * s).sum())
    if total_var > 0:
        ratios = (s[:k] * s[:k]) / total_var
    else:
        ratios = np.zeros(k, dtype=np.float64)
    return PCAResult(reduced=reduced, components=components,
                     explained_variance_ratio=ratios, mean=mean,
                     rank_deficient=rank_deficient)


def _csv_text(fieldnames: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def write_taxonomy_csv(path: str | Path, log: GateLog, tax: GateTaxonomy) -> None:
    rows = [
        {
            "gate_index": j,
            "layer_id": int(log.layer_ids[j]),
            "filter_id": int(log.filter_ids[j]),
            "category": CATEGORIES[tax.categories[j]],
        }
        for j in range(log.num_gates)
    ]
    atomic_write_text(path, _csv_text(
        ["gate_index", "layer_id", "filter_id", "category"], rows))


def write_layer_distribution_csv(path: str | Path, tax: GateTaxonomy) -> None:
    rows = layer_distribution(tax)
    names = ["layer_id", "total", *CATEGORIES, *(f"frac_{c}" for c in CATEGORIES)]
    out = []
    for row in rows:
        formatted = dict(row)
        for c in CATEGORIES:
            formatted[f"frac_{c}"] = f"{row[f'frac_{c}']:.8e}"
        out.append(formatted)
    atomic_write_text(path, _csv_text(names, out))


def write_histogram_csv(path: str | Path, hist: Histogram) -> None:
    rows = [
        {"bin_lo": f"{hist.edges[i]:.8e}", "bin_hi": f"{hist.edges[i + 1]:.8e}",
         "count": int(hist.counts[i])}
        for i in range(len(hist.counts))
    ]
    atomic_write_text(path, _csv_text(["bin_lo", "bin_hi", "count"], rows))


def export_usage_vectors(log: GateLog, pca_k: int, path: str | Path) -> PCAResult:
    """Per-sample PCA-reduced usage vectors with labels, as CSV."""
    result = pca_reduce(log.gates.astype(np.float64), pca_k)
    names = ["label"] + [f"pc{i}" for i in range(pca_k)]
    rows = []
    for i in range(log.num_samples):
        row = {"label": int(log.labels[i])}
        for j in range(pca_k):
            row[f"pc{j}"] = f"{result.reduced[i, j]:.8e}"
        rows.append(row)
    atomic_write_text(path, _csv_text(names, rows))
    return result
