"""Memory cost model and scaling benchmarks.

The analytic model counts pairwise score elements only: a blocked pass holds
m blocks of r x r feature-level score maps plus one m x m map over block
summaries, against n x n for attention over the whole sequence.  The profiler
measures what actually happens — peak concurrently-live tensor elements from
the process-global allocation meter — over one forward and one
gradient pass, so the analytic count is a lower bound on the measurement.

Peak figures exclude leaf buffers (parameters, the input, position masks):
the point of the sweep is how the memory the computation itself allocates
grows with sequence length.  Backward runs in training mode with interior
values freed as the sweep retreats, the way a training step would run.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff import METER, Graph, ParamStore, reduce_sum
from .encoder import (
    EncoderConfig,
    biblosa,
    full_san_context,
    init_encoder_params,
    select_block_length,
)
from .seeding import substream

__all__ = [
    "CSV_HEADER",
    "CostModel",
    "ProfileRecord",
    "count_score_elements",
    "loglog_slope",
    "profile_run",
    "scaling_experiment",
    "write_csv",
]

KINDS = ("biblosa", "full_san")
CSV_HEADER = "kind,n,r,m,analytic_elems,measured_peak_elems,forward_ms,backward_ms"


@dataclass(frozen=True)
class CostModel:
    """Score-element counts for one (n, r, width) setting."""

    n: int
    r: int
    m: int
    d_e: int
    intra_elems: int
    inter_elems: int
    full_san_elems: int

    def total(self, kind: str) -> int:
        if kind == "biblosa":
            return self.intra_elems + self.inter_elems
        if kind == "full_san":
            return self.full_san_elems
        raise ValueError(f"unknown model kind: {kind}")


def count_score_elements(n: int, r: int, d_e: int = 1) -> CostModel:
    """Exact score-element counts with m = ceil(n/r) and width w = d_e."""
    if n < 1 or r < 1 or d_e < 1:
        raise ValueError("n, r and d_e must all be >= 1")
    m = -(-n // r)
    return CostModel(n=n, r=r, m=m, d_e=d_e,
                     intra_elems=m * r * r * d_e,
                     inter_elems=m * m * d_e,
                     full_san_elems=n * n * d_e)


@dataclass(frozen=True)
class ProfileRecord:
    kind: str
    n: int
    r: int
    m: int
    analytic_elems: int
    measured_peak_elems: int
    forward_ms: float
    backward_ms: float


def profile_run(kind: str, n: int, d_e: int, r: int, repeats: int = 5, *,
                seed: int = 0) -> ProfileRecord:
    """Measure one encoder kind at one length.

    Runs a forward pass and a gradient pass ``repeats`` times after one
    untimed warm-up; reports median wall times and the peak live activation
    elements.  "Activation" means buffers the computation itself produced:
    the meter peak minus every leaf buffer (parameters, the input, masks),
    with interior values freed during the training-mode backward sweep just
    as a training step would free them.  Out-of-memory surfaces as
    AllocationError with the failing request size.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown model kind: {kind}")
    if repeats < 3:
        raise ValueError("need at least 3 repeats")
    cost = count_score_elements(n, r, d_e)
    rng = substream(seed, "bench")
    store = init_encoder_params(ParamStore(), EncoderConfig(d_e=d_e, d_h=d_e, r=r),
                                rng).astype(np.float32)
    x_data = rng.normal(size=(d_e, n)).astype(np.float32)

    forward_times, backward_times, peaks = [], [], []
    with threadpool_limits(limits=1):  # wall times must not depend on core count
        for it in range(repeats + 1):
            start = METER.current
            METER.reset_peak()
            with Graph(np.float32) as g:
                t0 = time.perf_counter()
                x = g.leaf(x_data)
                if kind == "biblosa":
                    u = biblosa(g, x, store, r)
                else:
                    u = full_san_context(g, x, store)
                t1 = time.perf_counter()
                loss = reduce_sum(g, u, axis=None)
                leaf_elems = g.leaf_elems()
                wrt = list(g._param_leaves.values())
                g.backward(loss, wrt=wrt, free_values=True)
                t2 = time.perf_counter()
                peaks.append(METER.peak - start - leaf_elems)
            if it == 0:
                continue  # warm-up
            forward_times.append((t1 - t0) * 1000.0)
            backward_times.append((t2 - t1) * 1000.0)

    return ProfileRecord(
        kind=kind, n=n,
        r=r if kind == "biblosa" else n,
        m=cost.m if kind == "biblosa" else 1,
        analytic_elems=cost.total(kind),
        measured_peak_elems=max(peaks),
        forward_ms=float(np.median(forward_times)),
        backward_ms=float(np.median(backward_times)),
    )


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    if xs.size != ys.size or xs.size < 2:
        raise ValueError("need at least two points")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ValueError("log-log fit needs positive values")
    lx, ly = np.log(xs), np.log(ys)
    slope, _ = np.polyfit(lx, ly, 1)
    return float(slope)


def scaling_experiment(lengths, d_e: int = 32, kinds=KINDS, repeats: int = 5, *,
                       seed: int = 0, csv_path=None):
    """Profile every kind over the given ascending lengths.

    Returns (records, slopes) where slopes maps each kind to the fitted
    log-log slope of measured peak elements against length.  Optionally dumps
    all records as CSV.
    """
    lengths = list(lengths)
    if len(lengths) < 2:
        raise ValueError("need at least two lengths")
    if sorted(lengths) != lengths:
        raise ValueError("lengths must be ascending")
    records = []
    for kind in kinds:
        for n in lengths:
            r = select_block_length(n)
            records.append(profile_run(kind, n, d_e, r, repeats, seed=seed))
    slopes = {
        kind: loglog_slope([rec.n for rec in records if rec.kind == kind],
                           [rec.measured_peak_elems for rec in records if rec.kind == kind])
        for kind in kinds
    }
    if csv_path is not None:
        write_csv(records, csv_path)
    return records, slopes


def write_csv(records, path) -> None:
    """Emit profile records under the fixed benchmark header."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER.split(","))
        for rec in records:
            writer.writerow([rec.kind, rec.n, rec.r, rec.m, rec.analytic_elems,
                             rec.measured_peak_elems,
                             f"{rec.forward_ms:.3f}", f"{rec.backward_ms:.3f}"])
