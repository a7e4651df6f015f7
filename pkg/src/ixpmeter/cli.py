"""Command-line entry point: ``ixpmeter <command> ...``."""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import signal
import sys
from collections import defaultdict
from pathlib import Path

from . import __version__
from .classify import classify_stream, write_classified
from .collector import Batch, CollectorClient, CollectorError, load_config, make_server
from .core import AddressScope, PrefixError, RecordError, read_netblocks, read_traces
from .metrics import PERCENTILE_METHOD, build_weekly_report, interhop_series, write_report_csvs
from .services import DEFAULT_PORTS, load_scan_history, write_service_counts
from .simnet import SCENARIOS, SimBackend, SimError, TopologySpec, scenario
from .targets import build_targets, read_targets, write_targets_jsonl, write_targets_text
from .tracer import (US, BackendUnavailable, DailyFileSink, DutyWindow, IcmpBackend,
                     SweepAborted, TraceConfig, run_daily)

log = logging.getLogger("ixpmeter")


class CliError(Exception):
    pass


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _utcnow() -> str:
    return dt.datetime.now(dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


class RunManifest:
    def __init__(self, args: argparse.Namespace, inputs: list):
        self.argv = list(sys.argv)
        cfg = {k: str(v) for k, v in sorted(vars(args).items()) if k != "func"}
        self.config_digest = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()
        self.config = cfg
        self.seed = getattr(args, "seed", None)
        self.inputs = {str(p): file_digest(p) for p in inputs if p}
        self.started = _utcnow()

    def write(self, path, outputs=()) -> None:
        doc = {
            "command_line": self.argv,
            "config": self.config,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "input_digests": self.inputs,
            "output_digests": {str(p): file_digest(p) for p in outputs},
            "tool_version": __version__,
            "percentile_method": PERCENTILE_METHOD,
            "started_utc": self.started,
            "finished_utc": _utcnow(),
        }
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --- targets ------------------------------------------------------------------

def cmd_targets(args) -> int:
    prefixes = read_netblocks(args.country_prefixes)
    if not prefixes:
        raise CliError(f"{args.country_prefixes}: no netblocks found")
    if args.ixp_prefixes:
        read_netblocks(args.ixp_prefixes)
    active = set()
    if args.scan_csv:
        active = load_scan_history(args.scan_csv).active_set()
    manifest = RunManifest(args, [args.country_prefixes, args.ixp_prefixes, args.scan_csv])
    targets = build_targets(prefixes, active, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "targets.jsonl", "w") as fh:
        write_targets_jsonl(targets, fh)
    with open(out / "targets.txt", "w") as fh:
        write_targets_text(targets, fh)
    manifest.write(out / "targets.manifest.json", [out / "targets.jsonl", out / "targets.txt"])
    print(f"{len(targets)} targets written to {out}")
    return 0


# --- probe --------------------------------------------------------------------

def _parse_start(text: str) -> int:
    try:
        d = dt.datetime.strptime(text, "%Y-%m-%d").replace(tzinfo=dt.timezone.utc)
    except ValueError:
        raise CliError(f"--start must be YYYY-MM-DD, got {text!r}") from None
    return int(d.timestamp()) * US


def _make_backend(args, cfg: TraceConfig):
    kind, _, arg = args.backend.partition(":")
    if kind == "real":
        try:
            backend = IcmpBackend(timeout_ms=cfg.per_probe_timeout_ms)
        except BackendUnavailable as e:
            raise CliError(str(e)) from None
        return backend, args.probe_id or "probe"
    if kind == "simnet":
        try:
            spec = scenario(arg, args.seed)
        except SimError as e:
            raise CliError(str(e)) from None
    elif kind == "topology":
        spec = TopologySpec.load(arg)
    else:
        raise CliError(f"unknown backend {args.backend!r}; use real, simnet:<scenario> "
                       "or topology:<file.json>")
    probe_id = args.probe_id or next(iter(spec.probes), None)
    if probe_id is None:
        raise CliError("topology defines no probes; pass --probe-id <source address>")
    start = _parse_start(args.start)
    backend = SimBackend(spec, probe_id, start_us=start, timeout_ms=cfg.per_probe_timeout_ms)
    return backend, probe_id


def cmd_probe(args) -> int:
    cfg = TraceConfig(max_ttl=args.max_ttl, attempts_per_ttl=args.attempts,
                      per_probe_timeout_ms=args.timeout_ms, flow_id=args.flow_id,
                      gap_limit=args.gap_limit, probes_per_second=args.pps)
    window = DutyWindow.parse(args.window)
    targets = read_targets(args.targets)
    if args.limit:
        targets = targets[:args.limit]
    manifest = RunManifest(args, [args.targets])
    backend, probe_id = _make_backend(args, cfg)
    sink = DailyFileSink(args.out, probe_id)
    interrupted = False

    def on_sigint(signum, frame):
        raise KeyboardInterrupt

    old = signal.signal(signal.SIGINT, on_sigint)
    try:
        summaries = run_daily(targets, cfg, window, sink, backend, probe_id, args.days)
    except SimError as e:
        raise CliError(f"simulated network: {e}") from None
    except SweepAborted as e:
        raise CliError(f"{e} (partial output marked)") from None
    except KeyboardInterrupt:
        interrupted = True
        summaries = []
    finally:
        sink.close()
        signal.signal(signal.SIGINT, old)
    manifest.write(Path(args.out) / f"probe-{probe_id}.manifest.json", sink.paths)
    reached = sum(s.reached for s in summaries)
    unreached = sum(s.unreached for s in summaries)
    print(json.dumps({"probe_id": probe_id, "reached": reached, "unreached": unreached,
                      "files": [str(p) for p in sink.paths]}))
    return 130 if interrupted else 0


# --- report -------------------------------------------------------------------

def _trace_files(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        out.extend(sorted(p.glob("traces-*.jsonl")) if p.is_dir() else [p])
    return out


def cmd_report(args) -> int:
    scope = AddressScope.from_files(args.country_prefixes, args.ixp_prefixes)
    files = _trace_files(args.traces)
    if not files:
        raise CliError("no trace files given")
    manifest = RunManifest(args, files + [args.country_prefixes, args.ixp_prefixes, args.scan_csv])
    diagnostics: list = []
    stats = {"rejected": 0}
    classified = []
    for f in files:
        classified.extend(classify_stream(read_traces(f, diagnostics), scope, stats))
    for src, lineno, msg in diagnostics:
        print(f"warning: {src}:{lineno}: {msg}", file=sys.stderr)
    if not classified:
        raise CliError("no completed traces in input")
    classified.sort(key=lambda c: (c.trace.ts, c.trace.probe_id, c.trace.trace_id))
    reports = build_weekly_report(classified)
    series = interhop_series(classified, scope)
    probes = {c.trace.probe_id for c in classified}
    probe_series = None
    if args.by_probe or len(probes) > 1:
        probe_series = interhop_series(classified, scope, by_probe=True)
    out = Path(args.out)
    written = write_report_csvs(reports, series, out, probe_series)
    if args.scan_csv:
        store = load_scan_history(args.scan_csv, DEFAULT_PORTS)
        write_service_counts(store, out / "service_counts.csv")
        written.append(out / "service_counts.csv")
    if args.classified_out:
        with open(args.classified_out, "w") as fh:
            write_classified(classified, fh)
    manifest.write(out / "report.manifest.json", written)
    print(json.dumps({"classified": len(classified), "rejected": stats["rejected"],
                      "malformed": len(diagnostics), "weeks": len(reports)}))
    return 0


# --- services -----------------------------------------------------------------

def cmd_services(args) -> int:
    ports = [int(p) for p in args.ports.split(",")] if args.ports else DEFAULT_PORTS
    store = load_scan_history(args.scan_csv, ports)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_service_counts(store, out / "service_counts.csv")
    with open(out / "active_services.csv", "w") as fh:
        fh.write("addr,port\n")
        for addr, port in sorted(store.active_set()):
            fh.write(f"{addr},{port}\n")
    RunManifest(args, [args.scan_csv]).write(
        out / "services.manifest.json", [out / "service_counts.csv", out / "active_services.csv"])
    return 0


# --- collector ----------------------------------------------------------------

def cmd_serve(args) -> int:
    try:
        cfg = load_config(args.config)
    except (OSError, ValueError) as e:
        raise CliError(f"bad config: {e}") from None
    try:
        server = make_server(cfg)
    except OSError as e:
        raise CliError(f"cannot listen on {cfg.listen}: {e}") from None
    host, port = server.server_address[:2]
    print(f"collector listening on {host}:{port}, data in {cfg.data_dir}", flush=True)

    def stop(signum, frame):
        raise KeyboardInterrupt

    signal.signal(signal.SIGTERM, stop)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_push(args) -> int:
    by_key: dict[tuple, list] = defaultdict(list)
    for f in _trace_files(args.traces):
        for rec in read_traces(f):
            day = dt.datetime.fromtimestamp(rec.ts, dt.timezone.utc).strftime("%Y%m%d")
            by_key[(rec.probe_id, day)].append(rec)
    client = CollectorClient(args.collector, args.token)
    results = {}
    for (probe_id, day), recs in sorted(by_key.items()):
        ack = client.submit(Batch.make(probe_id, day, recs))
        results[f"{probe_id}-{day}"] = ack.value
    print(json.dumps(results, sort_keys=True))
    return 0


def cmd_scenario(args) -> int:
    try:
        spec = scenario(args.name, args.seed)
    except SimError as e:
        raise CliError(str(e)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "topology.json").write_text(spec.dumps() + "\n")
    (out / "country.txt").write_text(
        f"# {spec.name} country netblocks\n" + "".join(p + "\n" for p in spec.country_prefixes))
    (out / "ixp.txt").write_text(
        f"# {spec.name} IXP prefix\n" + "".join(p + "\n" for p in spec.ixp_prefixes))
    print(json.dumps({"probes": spec.probes, "dir": str(out)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ixpmeter", description="Traceroute-based IXP usage and performance measurement.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("targets", help="split country netblocks into /24 targets")
    p.add_argument("--country-prefixes", required=True, help="netblock file of the country")
    p.add_argument("--ixp-prefixes", help="IXP netblock file (validated, recorded in manifest)")
    p.add_argument("--scan-csv", help="scan history (round_id,ts,addr,port,open) for service targets")
    p.add_argument("--seed", type=int, default=0, help="seed for random target choice")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_targets)

    p = sub.add_parser("probe", help="run daily Paris-traceroute sweeps")
    p.add_argument("--targets", required=True, help="targets.jsonl or one address per line")
    p.add_argument("--backend", default="simnet:linear",
                   help="real, simnet:<scenario> or topology:<file.json>")
    p.add_argument("--scenario", dest="backend", type=lambda s: f"simnet:{s}",
                   help="shorthand for --backend simnet:<scenario>")
    p.add_argument("--probe-id", help="probe name (simnet: one of the topology's probes)")
    p.add_argument("--out", required=True, help="directory for traces-<probe>-<day>.jsonl")
    p.add_argument("--window", default="20h", help="daily duty window, e.g. 20h or 02:00-22:00")
    p.add_argument("--days", type=int, default=1, help="number of daily sweeps")
    p.add_argument("--start", default="2024-01-01", help="first day (UTC) of a simulated run")
    p.add_argument("--seed", type=int, default=0, help="scenario seed")
    p.add_argument("--limit", type=int, default=0, help="probe only the first N targets")
    p.add_argument("--max-ttl", type=int, default=30)
    p.add_argument("--attempts", type=int, default=2, help="probes per TTL before a star")
    p.add_argument("--timeout-ms", type=int, default=2000)
    p.add_argument("--gap-limit", type=int, default=5, help="consecutive stars before giving up")
    p.add_argument("--flow-id", type=int, default=1, help="Paris flow identifier")
    p.add_argument("--pps", type=float, default=20, help="probe rate cap per second")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("report", help="classify traces and write metric CSVs")
    p.add_argument("--traces", nargs="+", required=True, help="trace JSONL files or directories")
    p.add_argument("--country-prefixes", required=True)
    p.add_argument("--ixp-prefixes", required=True)
    p.add_argument("--scan-csv", help="scan history; adds service_counts.csv")
    p.add_argument("--by-probe", action="store_true", help="always write interhop_by_probe.csv")
    p.add_argument("--classified-out", help="also write classified traces as JSONL")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("services", help="apply the 3-of-5 rule to a scan history")
    p.add_argument("--scan-csv", required=True)
    p.add_argument("--ports", help="comma separated port list")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_services)

    p = sub.add_parser("serve", help="run the central collector")
    p.add_argument("--config", required=True, help="TOML with listen, data_dir, tokens")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("push", help="upload daily trace batches to a collector")
    p.add_argument("--collector", required=True, help="base URL, e.g. http://host:8650")
    p.add_argument("--token", required=True)
    p.add_argument("traces", nargs="+")
    p.set_defaults(func=cmd_push)

    p = sub.add_parser("scenario", help="write a simnet scenario and its scope files")
    p.add_argument("name", help="|".join(SCENARIOS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scenario)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, CollectorError, PrefixError, RecordError, SimError, OSError,
            ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
