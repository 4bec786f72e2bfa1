"""Cost model, profiler, and scaling-fit checks.

Measured runs here are kept tiny (short lengths, few repeats) so the suite
stays fast; the full-scale sweep lives in the acceptance tests.
"""

import csv

import numpy as np
import pytest

from blockattn.bench import (
    CSV_HEADER,
    count_score_elements,
    loglog_slope,
    profile_run,
    scaling_experiment,
    write_csv,
)
from blockattn.encoder import select_block_length


# ---------------------------------------------------------------------------
# analytic counts
# ---------------------------------------------------------------------------

def test_count_examples_by_hand():
    # n=4, r=2: two blocks of 2x2 scores plus one 2x2 summary map
    cost = count_score_elements(4, 2, d_e=1)
    assert (cost.m, cost.intra_elems, cost.inter_elems) == (2, 8, 4)
    assert cost.total("biblosa") == 12
    assert cost.total("full_san") == 16

    # worked mid-scale example: m = ceil(384/9) = 43
    cost = count_score_elements(384, 9, d_e=1)
    assert cost.m == 43
    assert cost.intra_elems == 43 * 81
    assert cost.inter_elems == 43 * 43
    assert cost.total("biblosa") == 3483 + 1849
    assert cost.total("full_san") == 384 * 384


def test_counts_scale_linearly_in_width():
    thin = count_score_elements(96, 6, d_e=1)
    wide = count_score_elements(96, 6, d_e=32)
    assert wide.intra_elems == 32 * thin.intra_elems
    assert wide.inter_elems == 32 * thin.inter_elems
    assert wide.full_san_elems == 32 * thin.full_san_elems


def test_single_block_degenerates_to_full_attention():
    cost = count_score_elements(50, 50, d_e=1)
    assert cost.m == 1
    assert cost.total("biblosa") == 50 * 50 + 1  # one full map plus a 1x1 summary


def test_count_rejects_bad_arguments():
    with pytest.raises(ValueError):
        count_score_elements(0, 3)
    with pytest.raises(ValueError):
        count_score_elements(8, 0)
    with pytest.raises(ValueError):
        count_score_elements(8, 2, d_e=0)
    with pytest.raises(ValueError, match="unknown model kind"):
        count_score_elements(8, 2).total("transformer")


def test_selected_block_length_nearly_minimises_the_count():
    for n in (16, 40, 64, 100, 256, 333, 512):
        totals = [count_score_elements(n, r).total("biblosa") for r in range(1, n + 1)]
        best_r = int(np.argmin(totals)) + 1
        assert abs(select_block_length(n) - best_r) <= 1, f"n={n}"


def test_blocked_count_beats_full_attention_at_scale():
    for n in range(16, 513, 16):
        cost = count_score_elements(n, select_block_length(n))
        assert cost.total("biblosa") < cost.total("full_san")


# ---------------------------------------------------------------------------
# log-log fitting
# ---------------------------------------------------------------------------

def test_slope_of_exact_quadratic_is_two():
    ns = [64, 128, 192, 256]
    assert loglog_slope(ns, [n * n for n in ns]) == pytest.approx(2.0, abs=1e-9)


def test_slope_of_scaled_linear_is_one():
    ns = [10, 20, 40, 80]
    assert loglog_slope(ns, [7 * n for n in ns]) == pytest.approx(1.0, abs=1e-9)


def test_slope_rejects_degenerate_input():
    with pytest.raises(ValueError):
        loglog_slope([10], [100])
    with pytest.raises(ValueError):
        loglog_slope([10, 20], [0, 100])
    with pytest.raises(ValueError):
        loglog_slope([10, 20, 30], [1, 2])


def test_analytic_slopes_sit_in_their_windows():
    ns = list(range(64, 513, 64))
    blocked = [count_score_elements(n, select_block_length(n)).total("biblosa")
               for n in ns]
    full = [count_score_elements(n, select_block_length(n)).total("full_san")
            for n in ns]
    assert 1.25 <= loglog_slope(ns, blocked) <= 1.45  # theory: n^(4/3)
    assert 1.95 <= loglog_slope(ns, full) <= 2.05


# ---------------------------------------------------------------------------
# measured profiles (tiny settings)
# ---------------------------------------------------------------------------

def test_profile_is_deterministic_in_elements():
    a = profile_run("biblosa", 32, 8, select_block_length(32), repeats=3, seed=7)
    b = profile_run("biblosa", 32, 8, select_block_length(32), repeats=3, seed=7)
    assert a.measured_peak_elems == b.measured_peak_elems
    assert a.analytic_elems == b.analytic_elems


def test_measured_peak_dominates_analytic_count():
    for kind in ("biblosa", "full_san"):
        rec = profile_run(kind, 48, 8, select_block_length(48), repeats=3)
        assert rec.measured_peak_elems > rec.analytic_elems


def test_measured_peak_grows_with_length():
    peaks = [profile_run("biblosa", n, 8, select_block_length(n), repeats=3)
             .measured_peak_elems for n in (32, 64, 96)]
    assert peaks == sorted(peaks) and peaks[0] < peaks[-1]


def test_full_san_record_reports_whole_sequence_as_one_block():
    rec = profile_run("full_san", 32, 8, select_block_length(32), repeats=3)
    assert (rec.r, rec.m) == (32, 1)


def test_profile_rejects_bad_arguments():
    with pytest.raises(ValueError, match="unknown model kind"):
        profile_run("lstm", 32, 8, 4)
    with pytest.raises(ValueError, match="repeats"):
        profile_run("biblosa", 32, 8, 4, repeats=2)


def test_experiment_validates_lengths():
    with pytest.raises(ValueError, match="two lengths"):
        scaling_experiment([64], d_e=8, repeats=3)
    with pytest.raises(ValueError, match="ascending"):
        scaling_experiment([128, 64], d_e=8, repeats=3)


def test_experiment_fits_slopes_and_writes_csv(tmp_path):
    out = tmp_path / "scaling.csv"
    records, slopes = scaling_experiment([24, 48, 96], d_e=8, repeats=3,
                                         seed=3, csv_path=out)
    assert set(slopes) == {"biblosa", "full_san"}
    assert len(records) == 6
    # a quadratic method should already be growing faster at these sizes
    assert slopes["full_san"] > slopes["biblosa"] > 0.5

    raw = out.read_bytes()
    assert b"\r" not in raw
    lines = raw.decode().splitlines()
    assert lines[0] == CSV_HEADER
    rows = list(csv.DictReader(raw.decode().splitlines()))
    assert len(rows) == 6
    for row, rec in zip(rows, records):
        assert row["kind"] == rec.kind
        assert int(row["n"]) == rec.n
        assert int(row["measured_peak_elems"]) == rec.measured_peak_elems
        assert float(row["forward_ms"]) == pytest.approx(rec.forward_ms, abs=5e-4)


def test_csv_header_is_frozen():
    assert CSV_HEADER == ("kind,n,r,m,analytic_elems,measured_peak_elems,"
                          "forward_ms,backward_ms")
