"""``reis-sim`` command-line tool.

Exit codes: 0 success, 2 usage error, 3 data error. ``REIS_SIM_CONFIG``
overrides ``--config``.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datasets
from .engine import OPT_LEVELS, SearchParams, calibrate_filter_threshold, search, search_batch
from .host import GroundTruth, HostCostModel, PipelineConstants, end_to_end_breakdown, exact_ground_truth, host_search
from .host import recall_at_k
from .ivf import KmeansParams, build_index, default_nlist
from .layout import LayoutError, deploy_flat, deploy_ivf, image_digest, load_image, pack_rdb, pack_rivf, save_image
from .report import RunReport, breakdown_table, format_table, merge_reports, row_from_results
from .ssd import load_config
from .vectors import DimensionError, train_quantizer

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
CONFIG_ENV = "REIS_SIM_CONFIG"
GLOBAL_FLAGS = ("config", "preset", "seed", "out")


class UsageError(Exception):
    pass


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _strs(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS lets a global flag given before the subcommand survive the subparser
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="INI file with [ssd]/[geometry]/[timing]/[energy]/[host] sections")
    common.add_argument("--preset", help="SSD preset (reis-ssd1, reis-ssd2)")
    common.add_argument("--seed", type=_seed, help="64-bit seed for all randomness")
    common.add_argument("--out", help="output directory (or file for trace)")

    p = argparse.ArgumentParser(prog="reis-sim", parents=[common], description="In-storage RAG retrieval simulator")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic clustered dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--d", type=int, default=1024)
    g.add_argument("--clusters", type=int, default=100)
    g.add_argument("--queries", type=int, default=100)
    g.add_argument("--latent", type=int, default=16)
    g.add_argument("--spread", type=float, default=1.0)
    g.add_argument("--noise", type=float, default=0.3)
    g.add_argument("--chunk-bytes", type=int, default=0, help="pad document chunks to this size")
    g.add_argument("--name", default="synthetic")

    i = sub.add_parser("ingest", parents=[common], help="validate vector/document files and write a manifest")
    i.add_argument("--vectors", required=True)
    i.add_argument("--documents", required=True)
    i.add_argument("--queries")
    i.add_argument("--ground-truth")
    i.add_argument("--name", default="dataset")

    d = sub.add_parser("deploy", parents=[common], help="deploy a dataset onto the modeled SSD")
    d.add_argument("--dataset", required=True, help="dataset manifest.json")
    d.add_argument("--mode", choices=("flat", "ivf"), default="flat")
    d.add_argument("--nlist", type=int, help="IVF clusters (default: sqrt(n))")
    d.add_argument("--db-id", type=int, default=0)
    d.add_argument("--no-int8", action="store_true", help="skip the INT8 rerank copies")

    s = sub.add_parser("search", parents=[common], help="run queries against a deployed image")
    _search_args(s)
    s.add_argument("--engine", choices=("reis", "host"), default="reis")
    s.add_argument("--trace", help="write the flash-command stream (JSON lines) here")

    b = sub.add_parser("bench", parents=[common], help="sweep configurations and emit a run report")
    b.add_argument("--dataset", required=True)
    b.add_argument("--mode", choices=("flat", "ivf"), default="flat")
    b.add_argument("--nlist", type=int)
    b.add_argument("--k", type=int, default=10)
    b.add_argument("--nprobe", type=_ints, default=None, help="comma-separated nprobe sweep (ivf)")
    b.add_argument("--opts", type=_strs, default=["df+pl+mpibc"], help=f"levels from {list(OPT_LEVELS)}")
    b.add_argument("--presets", type=_strs, default=None)
    b.add_argument("--keep", type=float, default=0.01, help="fraction of entries the calibrated filter keeps")
    b.add_argument("--max-queries", type=int)

    r = sub.add_parser("report", parents=[common], help="merge run reports and print comparison tables")
    r.add_argument("runs", nargs="+", help="report .json or .csv files")
    r.add_argument("--retrieval-s", type=float, help="also print an end-to-end breakdown for this retrieval time")

    t = sub.add_parser("trace", parents=[common], help="dump the flash-command stream of one query")
    _search_args(t)
    t.add_argument("--query-index", type=int, default=0)
    return p


def _search_args(p):
    p.add_argument("--image", required=True)
    p.add_argument("--queries", required=True, help="query .rvec file")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--nprobe", type=int, default=1)
    p.add_argument("--threshold", type=int, help="Hamming filter threshold")
    p.add_argument("--opts", choices=list(OPT_LEVELS), default="df+pl+mpibc")


def _config_path(args):
    return os.environ.get(CONFIG_ENV) or args.config


def _ssd_config(args, preset_name=None):
    return load_config(_config_path(args), preset_name or args.preset)


def _host_cost(args) -> HostCostModel:
    path = _config_path(args)
    kw = {}
    if path:
        parser = configparser.ConfigParser()
        parser.read(path)
        if parser.has_section("host"):
            for key, raw in parser.items("host"):
                kw[key] = raw.lower() in ("1", "true", "yes", "on") if key == "load_per_query" else float(raw)
    if "hamming_vectors_per_us" in kw:
        return HostCostModel(**kw)
    return HostCostModel.calibrate(**kw)


def _out_dir(args, default) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(path):
    manifest = datasets.DatasetManifest.load(path)
    base = Path(path).parent
    manifest.validate(base)
    x = datasets.read_vectors(manifest.resolve(base, "vectors"))
    docs = datasets.read_documents(manifest.resolve(base, "documents"))
    q = datasets.read_vectors(manifest.resolve(base, "queries")) if manifest.queries else None
    return manifest, base, x, docs, q


def _deploy(x, docs, mode, nlist, config, seed, db_id=0, with_int8=True):
    quantizer = train_quantizer(x)
    if mode == "flat":
        return deploy_flat(x, docs, quantizer, config, db_id=db_id, with_int8=with_int8)
    index = build_index(x, KmeansParams(nlist=nlist or default_nlist(x.shape[0]), seed=seed))
    return deploy_ivf(x, docs, index, quantizer, config, db_id=db_id, with_int8=with_int8)


# Commands ----------------------------------------------------------------------


def cmd_generate(args):
    out = _out_dir(args, "dataset")
    m = datasets.generate_dataset(
        out,
        n=args.n,
        d=args.d,
        clusters=args.clusters,
        seed=args.seed or 0,
        n_queries=args.queries,
        latent=args.latent,
        spread=args.spread,
        noise=args.noise,
        chunk_bytes=args.chunk_bytes,
        name=args.name,
    )
    print(f"wrote {m.n_vectors} x {m.D} vectors and {m.n_queries} queries to {out}")


def cmd_ingest(args):
    out = _out_dir(args, ".")
    manifest = datasets.DatasetManifest(
        name=args.name,
        D=0,
        n_vectors=0,
        vectors=str(Path(args.vectors).resolve()),
        documents=str(Path(args.documents).resolve()),
        seed=args.seed,
    )
    x = datasets.read_vectors(args.vectors, mmap=True)
    manifest.n_vectors, manifest.D = x.shape
    if args.queries:
        q = datasets.read_vectors(args.queries, mmap=True)
        if q.shape[1] != manifest.D:
            raise datasets.DataError(f"queries have D={q.shape[1]}, vectors have D={manifest.D}")
        manifest.queries = str(Path(args.queries).resolve())
        manifest.n_queries = q.shape[0]
    if args.ground_truth:
        GroundTruth.load(args.ground_truth)
        manifest.ground_truth = str(Path(args.ground_truth).resolve())
    manifest.validate(out, _ssd_config(args).geometry.page_size)
    path = manifest.save(out / "manifest.json")
    print(f"ingested {manifest.n_vectors} x {manifest.D}; manifest at {path}")


def cmd_deploy(args):
    config = _ssd_config(args)
    _, _, x, docs, _ = _load_dataset(args.dataset)
    db = _deploy(x, docs, args.mode, args.nlist, config, args.seed or 0, args.db_id, not args.no_int8)
    out = save_image(db, _out_dir(args, "image"))
    print(f"R-DB[{db.db_id}] {pack_rdb(db.rdb).hex()}")
    for c, e in enumerate(db.rivf):
        print(f"R-IVF[{c}] {pack_rivf(e).hex()}")
    for name, (lo, hi) in db.sub_regions().items():
        print(f"{name:<10} pages {lo}..{hi}")
    print(f"footprint {db.footprint_bytes()} B, image sha256 {image_digest(out)}")


def _params(args, db) -> SearchParams:
    p = SearchParams(k=args.k, nprobe=min(args.nprobe, db.nlist) if db.is_ivf else 1, filter_threshold=args.threshold)
    return p.with_opts(args.opts)


def cmd_search(args):
    db = load_image(args.image)
    q = datasets.read_vectors(args.queries)
    params = _params(args, db)
    records = []
    if args.engine == "host":
        hr = host_search(q, db, k=args.k, nprobe=params.nprobe, cost=_host_cost(args))
        for i, (ids, lat) in enumerate(zip(hr.indices, hr.latency_s)):
            records.append({"query": i, "indices": ids, "latency_us": lat * 1e6})
    else:
        trace = [] if args.trace else None
        for i, res in enumerate(search_batch(q, db, params, trace)):
            records.append(
                {
                    "query": i,
                    "indices": res.indices,
                    "distances": [h.distance for h in res.topk],
                    "documents": [h.document.decode("utf-8", "replace") for h in res.topk],
                    "metrics": res.metrics,
                }
            )
        if args.trace:
            _write_jsonl(args.trace, trace)
    text = json.dumps({"engine": args.engine, "results": records}, indent=2) + "\n"
    if args.out:
        out = _out_dir(args, ".")
        (out / "results.json").write_text(text)
    else:
        sys.stdout.write(text)


def _write_jsonl(path, events):
    with open(path, "w") as fh:
        for ev in events:
            fh.write(json.dumps(ev, sort_keys=True) + "\n")


def cmd_trace(args):
    db = load_image(args.image)
    q = datasets.read_vectors(args.queries)
    if not 0 <= args.query_index < q.shape[0]:
        raise UsageError(f"--query-index must be in [0, {q.shape[0]})")
    trace = []
    search(q[args.query_index], db, _params(args, db), trace)
    if args.out:
        _write_jsonl(args.out, trace)
    else:
        for ev in trace:
            sys.stdout.write(json.dumps(ev, sort_keys=True) + "\n")


def cmd_bench(args):
    manifest, base, x, docs, q = _load_dataset(args.dataset)
    if q is None:
        raise datasets.DataError("bench needs a dataset with queries")
    if args.max_queries:
        q = q[: args.max_queries]
    for level in args.opts:
        if level not in OPT_LEVELS:
            raise UsageError(f"unknown optimization level {level!r}")
    gt_path = manifest.resolve(base, "ground_truth")
    truth = GroundTruth.load(gt_path) if gt_path else exact_ground_truth(q, x, args.k)
    presets = args.presets or [args.preset or "reis-ssd1"]
    host_cost = _host_cost(args)
    rows = []
    for name in presets:
        config = _ssd_config(args, name)
        db = _deploy(x, docs, args.mode, args.nlist, config, args.seed or 0)
        threshold = calibrate_filter_threshold(db, q, args.keep, k=args.k * 10)
        nprobes = (args.nprobe or [1]) if db.is_ivf else [1]
        for npb in nprobes:
            if db.is_ivf and not 1 <= npb <= db.nlist:
                raise UsageError(f"nprobe {npb} outside [1, {db.nlist}]")
            hr = host_search(q, db, k=args.k, nprobe=npb, cost=host_cost)
            for level in args.opts:
                p = SearchParams(k=args.k, nprobe=npb, filter_threshold=threshold).with_opts(level)
                res = search_batch(q, db, p)
                recalls = [recall_at_k(r.indices, t, args.k) for r, t in zip(res, truth)]
                rows.append(
                    row_from_results(
                        res,
                        preset=name,
                        mode=args.mode,
                        nprobe=npb,
                        threshold=p.effective_threshold(db.dim),
                        opts=level,
                        recalls=recalls,
                        host_latency_us=hr.mean_latency_s * 1e6,
                    )
                )
    report = RunReport(rows)
    csv_path, json_path = report.save(_out_dir(args, "bench"))
    sys.stdout.write(report.to_csv())
    print(f"wrote {csv_path} and {json_path}")


def cmd_report(args):
    reports = [RunReport.load(p) for p in args.runs]
    merged = merge_reports(reports)
    sys.stdout.write(format_table(merged))
    if args.retrieval_s is not None:
        rows, total = end_to_end_breakdown(PipelineConstants(), args.retrieval_s)
        sys.stdout.write(breakdown_table(rows, total))
    if args.out:
        combined = RunReport([r for rep in reports for r in rep.rows])
        combined.save(_out_dir(args, "."), stem="merged")


COMMANDS = {
    "generate": cmd_generate,
    "ingest": cmd_ingest,
    "deploy": cmd_deploy,
    "search": cmd_search,
    "bench": cmd_bench,
    "report": cmd_report,
    "trace": cmd_trace,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    for name in GLOBAL_FLAGS:
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        if _config_path(args):
            _ssd_config(args)
        COMMANDS[args.command](args)
    except (UsageError, KeyError) as exc:
        print(f"reis-sim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (datasets.DataError, LayoutError, DimensionError, ValueError, OSError, configparser.Error) as exc:
        print(f"reis-sim: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
