import math

import pytest

from reis_sim.engine import SearchParams, search_batch
from reis_sim.report import COLUMNS, ReportRow, RunReport, breakdown_table, format_table, merge_reports, row_from_results


def make_row(preset="reis-ssd1", qps=100.0, nprobe=1, host=5000.0, mean=1000.0):
    return ReportRow(preset, "ivf", nprobe, 200, "df+pl+mpibc", 10, qps, mean, 900.0, 1900.0, 12.5, 0.93, 98.5, 40.0,
                     host)


def test_speedup_column():
    r = make_row()
    assert r.speedup_vs_host == 5.0
    assert math.isnan(make_row(host=0.0).speedup_vs_host)
    header = RunReport([r]).to_csv().splitlines()[0].split(",")
    assert header == COLUMNS + ["speedup_vs_host"]
    assert RunReport([r]).to_csv().splitlines()[1].endswith(",5.0")


def test_csv_and_json_round_trip(tmp_path):
    rep = RunReport([make_row(), make_row("reis-ssd2", qps=260.0, nprobe=4)])
    c, j = rep.save(tmp_path)
    assert RunReport.load(c) == rep
    assert RunReport.load(j) == rep
    assert RunReport.from_csv(rep.to_csv()).to_csv() == rep.to_csv()


def test_load_errors(tmp_path):
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(ValueError):
        RunReport.load(tmp_path / "empty.csv")
    with pytest.raises(ValueError):
        RunReport.from_csv("a,b\n1,2\n")
    with pytest.raises(ValueError):
        RunReport.from_json("{}")


def test_merge_keyed_by_preset():
    a = RunReport([make_row(qps=100.0), make_row(qps=50.0, nprobe=8)])
    b = RunReport([make_row("reis-ssd2", qps=260.0), make_row("reis-ssd2", qps=120.0, nprobe=8)])
    merged = merge_reports([a, b])
    assert len(merged) == 2
    assert merged[0]["qps[reis-ssd1]"] == 100.0 and merged[0]["qps[reis-ssd2]"] == 260.0
    assert merged[1]["nprobe"] == 8 and merged[1]["qps[reis-ssd2]"] == 120.0
    table = format_table(merged)
    assert "qps[reis-ssd2]" in table.splitlines()[0]
    with pytest.raises(ValueError):
        merge_reports([])
    with pytest.raises(ValueError):
        merge_reports([RunReport([])])


def test_row_from_results(small_data, small_flat):
    _, queries = small_data
    res = search_batch(queries[:5], small_flat, SearchParams(filter_threshold=100))
    row = row_from_results(res, preset="reis-ssd1", mode="flat", nprobe=1, threshold=100, opts="df+pl+mpibc",
                           recalls=[1.0] * 5)
    total = sum(r.metrics["latency_us"] for r in res)
    assert row.qps == pytest.approx(5 / (total * 1e-6))
    assert row.queries == 5 and row.recall_at_10 == 1.0
    scanned = sum(r.metrics["embeddings_scanned"] for r in res)
    filtered = sum(r.metrics["entries_filtered"] for r in res)
    assert row.filtered_pct == pytest.approx(100 * filtered / scanned)


def test_breakdown_table_text():
    text = breakdown_table([("Generation", 1.0, 50.0), ("Encoding", 1.0, 50.0)], 2.0)
    assert "End-to-End" in text and "50.00%" in text
