"""Benchmark run reports: one row per (preset, mode, nprobe, threshold, opts)."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np


@dataclass
class ReportRow:
    preset: str
    mode: str
    nprobe: int
    threshold: int
    opts: str
    queries: int
    qps: float
    mean_latency_us: float
    p50_latency_us: float
    p99_latency_us: float
    energy_uj_per_query: float
    recall_at_10: float
    filtered_pct: float
    pages_read: float
    host_latency_us: float = 0.0

    @property
    def speedup_vs_host(self) -> float:
        if not self.host_latency_us or not self.mean_latency_us:
            return float("nan")
        return self.host_latency_us / self.mean_latency_us


COLUMNS = [f.name for f in fields(ReportRow)]
_TYPES = {f.name: f.type for f in fields(ReportRow)}


def _coerce(name, raw):
    t = _TYPES[name]
    if t in ("int", int):
        return int(raw)
    if t in ("float", float):
        return float(raw)
    return str(raw)


def row_from_results(results, *, preset, mode, nprobe, threshold, opts, recalls, host_latency_us=0.0) -> ReportRow:
    """Aggregate engine ``SearchResult`` objects of one configuration."""
    lat = np.array([r.metrics["latency_us"] for r in results], dtype=np.float64)
    scanned = sum(r.metrics["embeddings_scanned"] for r in results)
    filtered = sum(r.metrics["entries_filtered"] for r in results)
    return ReportRow(
        preset=preset,
        mode=mode,
        nprobe=int(nprobe),
        threshold=int(threshold),
        opts=opts,
        queries=len(results),
        qps=float(len(results) / (lat.sum() * 1e-6)),
        mean_latency_us=float(lat.mean()),
        p50_latency_us=float(np.percentile(lat, 50)),
        p99_latency_us=float(np.percentile(lat, 99)),
        energy_uj_per_query=float(np.mean([r.metrics["energy_uj"] for r in results])),
        recall_at_10=float(np.mean(recalls)),
        filtered_pct=100.0 * filtered / scanned if scanned else 0.0,
        pages_read=float(np.mean([r.metrics["pages_read"] for r in results])),
        host_latency_us=float(host_latency_us),
    )


@dataclass
class RunReport:
    rows: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS + ["speedup_vs_host"])
        for r in self.rows:
            d = asdict(r)
            w.writerow([_fmt(d[c]) for c in COLUMNS] + [_fmt(r.speedup_vs_host)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": [asdict(r) for r in self.rows]}, indent=2, sort_keys=True) + "\n"

    def save(self, out_dir, stem="report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        c, j = out / f"{stem}.csv", out / f"{stem}.json"
        c.write_text(self.to_csv())
        j.write_text(self.to_json())
        return c, j

    @classmethod
    def from_csv(cls, text: str) -> "RunReport":
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or not set(COLUMNS) <= set(reader.fieldnames):
            raise ValueError("CSV is missing report columns")
        return cls([ReportRow(**{c: _coerce(c, rec[c]) for c in COLUMNS}) for rec in reader])

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        data = json.loads(text)
        if "rows" not in data:
            raise ValueError("JSON report has no rows")
        return cls([ReportRow(**{c: _coerce(c, rec[c]) for c in COLUMNS}) for rec in data["rows"]])

    @classmethod
    def load(cls, path) -> "RunReport":
        path = Path(path)
        text = path.read_text()
        if not text.strip():
            raise ValueError(f"{path} is empty")
        return cls.from_json(text) if path.suffix == ".json" else cls.from_csv(text)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def merge_reports(reports) -> list[dict]:
    """Join runs into one comparison table keyed by configuration.

    Each output row holds the configuration key plus ``qps[<preset>]`` and
    ``speedup[<preset>]`` for every preset that ran it; rows keep first-seen order.
    """
    reports = list(reports)
    if not reports or not any(r.rows for r in reports):
        raise ValueError("no report rows to merge")
    table: dict[tuple, dict] = {}
    for rep in reports:
        for r in rep.rows:
            key = (r.mode, r.nprobe, r.threshold, r.opts)
            rec = table.setdefault(key, {"mode": r.mode, "nprobe": r.nprobe, "threshold": r.threshold, "opts": r.opts})
            rec[f"qps[{r.preset}]"] = r.qps
            rec[f"recall[{r.preset}]"] = r.recall_at_10
            rec[f"speedup[{r.preset}]"] = r.speedup_vs_host
    return list(table.values())


def format_table(records: list[dict]) -> str:
    cols = []
    for rec in records:
        for k in rec:
            if k not in cols:
                cols.append(k)

    def cell(v):
        if isinstance(v, float):
            return f"{v:.4g}"
        return "" if v is None else str(v)

    body = [[cell(rec.get(c)) for c in cols] for rec in records]
    widths = [max(len(c), *(len(row[i]) for row in body)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in body]
    return "\n".join(lines) + "\n"


def breakdown_table(rows, total) -> str:
    lines = [f"{'stage':<28}{'seconds':>12}{'percent':>10}"]
    for label, s, pct in rows:
        lines.append(f"{label:<28}{s:>12.4f}{pct:>9.2f}%")
    lines.append(f"{'End-to-End':<28}{total:>12.4f}")
    return "\n".join(lines) + "\n"
