"""Central collector: idempotent batch ingestion and trace queries.

On-disk layout, one directory per batch date::

    <data_dir>/<YYYYMMDD>/manifest.jsonl    committed batches, one JSON line each
    <data_dir>/<YYYYMMDD>/seg-<batch>.jsonl records of one batch

A batch becomes visible only when its manifest line is fully written. The
segment is written to a temp file and renamed first, so a crash at any point
leaves the batch either fully queryable or absent. Orphan segments and torn
manifest tails are cleaned up when the store is opened.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import json
import logging
import os
import re
import threading
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Optional

from .core import RecordError, TraceRecord

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

_DATE_RE = re.compile(r"^\d{8}$")


class BatchRejected(ValueError):
    pass


class ChecksumMismatch(BatchRejected):
    pass


class BatchConflict(BatchRejected):
    pass


class Ack(enum.Enum):
    ACCEPTED = "accepted"
    DUPLICATE = "duplicate"


def canonical_payload(records: Iterable[dict]) -> bytes:
    return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n"
                   for r in records).encode()


def batch_checksum(records: Iterable) -> str:
    dicts = [r.to_json() if isinstance(r, TraceRecord) else r for r in records]
    return hashlib.sha256(canonical_payload(dicts)).hexdigest()


def _check_date(date: str) -> str:
    if not _DATE_RE.match(date or ""):
        raise ValueError(f"date must be YYYYMMDD, got {date!r}")
    return date


@dataclass
class Batch:
    batch_id: str
    probe_id: str
    date: str
    records: list
    checksum: str

    @classmethod
    def make(cls, probe_id: str, date: str, records: list) -> "Batch":
        _check_date(date)
        return cls(f"{probe_id}-{date}", probe_id, date, list(records), batch_checksum(records))

    def to_json(self) -> dict:
        return {"batch_id": self.batch_id, "probe_id": self.probe_id, "date": self.date,
                "checksum": self.checksum, "records": [r.to_json() for r in self.records]}

    @classmethod
    def from_json(cls, obj: dict) -> "Batch":
        """Parse a wire batch; any malformed record rejects the whole batch."""
        try:
            raw = obj["records"]
            if not isinstance(raw, list):
                raise BatchRejected("records must be a list")
            batch = cls(str(obj["batch_id"]), str(obj["probe_id"]), _check_date(obj["date"]),
                        [], str(obj["checksum"]))
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, BatchRejected):
                raise
            raise BatchRejected(f"malformed batch: {e}") from None
        if batch_checksum(raw) != batch.checksum:
            raise ChecksumMismatch(f"checksum mismatch for batch {batch.batch_id}")
        try:
            batch.records = [TraceRecord.from_json(r) for r in raw]
        except (RecordError, AttributeError) as e:
            raise BatchRejected(f"batch {batch.batch_id}: {e}") from None
        return batch

    def validate(self) -> None:
        if not self.batch_id or "/" in self.batch_id or self.batch_id.startswith("."):
            raise BatchRejected(f"bad batch id {self.batch_id!r}")
        _check_date(self.date)
        for r in self.records:
            if r.probe_id != self.probe_id:
                raise BatchRejected(
                    f"record {r.trace_id} has probe {r.probe_id}, batch is {self.probe_id}")
        if batch_checksum(self.records) != self.checksum:
            raise ChecksumMismatch(f"checksum mismatch for batch {self.batch_id}")


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


def _segment_name(batch_id: str) -> str:
    return "seg-" + re.sub(r"[^A-Za-z0-9_.-]", "_", batch_id) + "-" + \
        hashlib.sha1(batch_id.encode()).hexdigest()[:8] + ".jsonl"


class TraceStore:
    """Append-only batch store. ``fault`` is a test hook called at commit steps."""

    def __init__(self, data_dir, fault: Optional[Callable[[str], None]] = None):
        self.root = Path(data_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.fault = fault or (lambda point: None)
        self.index: dict[str, dict] = {}
        self._index_lock = threading.Lock()
        self._date_locks: dict[str, threading.Lock] = {}
        self._recover()

    def _lock_for(self, date: str) -> threading.Lock:
        with self._index_lock:
            return self._date_locks.setdefault(date, threading.Lock())

    def _recover(self) -> None:
        for ddir in sorted(p for p in self.root.iterdir() if p.is_dir() and _DATE_RE.match(p.name)):
            manifest = ddir / "manifest.jsonl"
            live = set()
            if manifest.exists():
                data = manifest.read_bytes()
                cut = data.rfind(b"\n") + 1
                if cut != len(data):
                    log.warning("truncating torn manifest tail in %s", manifest)
                    with open(manifest, "r+b") as fh:
                        fh.truncate(cut)
                        os.fsync(fh.fileno())
                for line in data[:cut].splitlines():
                    entry = json.loads(line)
                    self.index[entry["batch_id"]] = entry
                    live.add(entry["segment"])
            for f in ddir.iterdir():
                if f.name.startswith(".tmp-") or (f.name.startswith("seg-") and f.name not in live):
                    log.warning("removing uncommitted file %s", f)
                    f.unlink()

    def __len__(self) -> int:
        return len(self.index)

    def submit_batch(self, batch: Batch) -> Ack:
        batch.validate()
        with self._lock_for(batch.date):
            existing = self.index.get(batch.batch_id)
            if existing is not None:
                if existing["checksum"] != batch.checksum:
                    raise BatchConflict(
                        f"batch {batch.batch_id} already committed with different content")
                return Ack.DUPLICATE
            ddir = self.root / batch.date
            ddir.mkdir(exist_ok=True)
            seg = _segment_name(batch.batch_id)
            tmp = ddir / f".tmp-{seg}-{os.getpid()}-{threading.get_ident()}"
            self.fault("before_segment")
            with open(tmp, "wb") as fh:
                fh.write(canonical_payload(r.to_json() for r in batch.records))
                fh.flush()
                os.fsync(fh.fileno())
            self.fault("segment_written")
            os.replace(tmp, ddir / seg)
            _fsync_dir(ddir)
            self.fault("segment_renamed")
            entry = {"batch_id": batch.batch_id, "probe_id": batch.probe_id, "date": batch.date,
                     "checksum": batch.checksum, "count": len(batch.records), "segment": seg}
            line = (json.dumps(entry, sort_keys=True) + "\n").encode()
            with open(ddir / "manifest.jsonl", "ab") as fh:
                half = len(line) // 2
                fh.write(line[:half])
                fh.flush()
                self.fault("manifest_partial")
                fh.write(line[half:])
                fh.flush()
                os.fsync(fh.fileno())
            self.fault("manifest_written")
            with self._index_lock:
                self.index[batch.batch_id] = entry
        return Ack.ACCEPTED

    def query_traces(self, date_from: str, date_to: str,
                     probe: Optional[str] = None) -> Iterator[TraceRecord]:
        """Committed records with batch date in [date_from, date_to], ordered by
        (date, probe_id, trace_id). The range is checked before streaming starts."""
        _check_date(date_from)
        _check_date(date_to)
        if date_from > date_to:
            raise ValueError(f"invalid range {date_from}..{date_to}")
        with self._index_lock:
            entries = [e for e in self.index.values()
                       if date_from <= e["date"] <= date_to
                       and (probe is None or e["probe_id"] == probe)]
        return self._stream(entries)

    def _stream(self, entries: list) -> Iterator[TraceRecord]:
        groups: dict[tuple, list] = {}
        for e in entries:
            groups.setdefault((e["date"], e["probe_id"]), []).append(e)
        for key in sorted(groups):
            recs = []
            for e in groups[key]:
                with open(self.root / e["date"] / e["segment"]) as fh:
                    recs.extend(TraceRecord.from_json(json.loads(l)) for l in fh if l.strip())
            recs.sort(key=lambda r: r.trace_id)
            yield from recs


def merge_probe_views(streams: Mapping[str, Iterable]) -> Iterator:
    """Concatenate per-probe streams in probe-id order, keeping each stream's order.

    Items may be TraceRecords or ClassifiedTraces; each must carry the probe
    id it is filed under.
    """
    for probe_id in sorted(streams):
        for item in streams[probe_id]:
            if item.probe_id != probe_id:
                raise ValueError(f"record from probe {item.probe_id} filed under {probe_id}")
            yield item


# --- configuration ----------------------------------------------------------

@dataclass
class CollectorConfig:
    listen: str = "127.0.0.1:8650"
    data_dir: str = "collector-data"
    tokens: dict = field(default_factory=dict)

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.listen.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"listen must be host:port, got {self.listen!r}")
        return host, int(port)


def load_config(path) -> CollectorConfig:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    unknown = set(raw) - {"listen", "data_dir", "tokens"}
    if unknown:
        raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
    tokens = raw.get("tokens", {})
    if isinstance(tokens, list):
        tokens = {f"*{i}": t for i, t in enumerate(tokens)}
    if not isinstance(tokens, dict) or not all(isinstance(v, str) for v in tokens.values()):
        raise ValueError(f"{path}: tokens must map probe ids to token strings")
    cfg = CollectorConfig(listen=raw.get("listen", CollectorConfig.listen),
                          data_dir=raw.get("data_dir", CollectorConfig.data_dir),
                          tokens=tokens)
    cfg.host_port
    return cfg


# --- HTTP transport -----------------------------------------------------------

class CollectorServer(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 128

    def __init__(self, address, store: TraceStore, tokens: Mapping[str, str]):
        super().__init__(address, _Handler)
        self.store = store
        self.tokens = dict(tokens)

    def probe_for_token(self, token: str) -> Optional[str]:
        """Probe id owning ``token``; ``"*"`` for tokens valid for any probe."""
        for probe, t in self.tokens.items():
            if hmac.compare_digest(t.encode(), token.encode()):
                return "*" if probe.startswith("*") else probe
        return None


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: CollectorServer

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _json(self, status: int, obj: dict) -> None:
        body = json.dumps(obj).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _auth(self) -> Optional[str]:
        header = self.headers.get("Authorization", "")
        token = header[7:] if header.startswith("Bearer ") else ""
        probe = self.server.probe_for_token(token) if token else None
        if probe is None:
            self._json(HTTPStatus.UNAUTHORIZED, {"error": "bad or missing token"})
        return probe

    def do_GET(self):
        url = urllib.parse.urlsplit(self.path)
        if url.path == "/v1/health":
            return self._json(HTTPStatus.OK, {"status": "ok", "batches": len(self.server.store)})
        if url.path != "/v1/traces":
            return self._json(HTTPStatus.NOT_FOUND, {"error": "not found"})
        if self._auth() is None:
            return
        q = urllib.parse.parse_qs(url.query)
        try:
            records = self.server.store.query_traces(q["from"][0], q["to"][0],
                                                     q.get("probe", [None])[0])
        except (KeyError, ValueError) as e:
            return self._json(HTTPStatus.BAD_REQUEST, {"error": f"invalid range: {e}"})
        self.send_response(HTTPStatus.OK)
        self.send_header("Content-Type", "application/x-ndjson")
        self.send_header("Transfer-Encoding", "chunked")
        self.end_headers()
        for rec in records:
            data = (json.dumps(rec.to_json(), separators=(",", ":")) + "\n").encode()
            self.wfile.write(f"{len(data):x}\r\n".encode() + data + b"\r\n")
        self.wfile.write(b"0\r\n\r\n")

    def do_POST(self):
        if urllib.parse.urlsplit(self.path).path != "/v1/batches":
            return self._json(HTTPStatus.NOT_FOUND, {"error": "not found"})
        probe = self._auth()
        if probe is None:
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            obj = json.loads(self.rfile.read(length))
            batch = Batch.from_json(obj)
            if probe != "*" and batch.probe_id != probe:
                return self._json(HTTPStatus.FORBIDDEN,
                                  {"error": f"token does not belong to probe {batch.probe_id}"})
            ack = self.server.store.submit_batch(batch)
        except ChecksumMismatch as e:
            return self._json(HTTPStatus.UNPROCESSABLE_ENTITY, {"error": str(e)})
        except BatchConflict as e:
            return self._json(HTTPStatus.CONFLICT, {"error": str(e)})
        except (BatchRejected, ValueError) as e:
            return self._json(HTTPStatus.BAD_REQUEST, {"error": str(e)})
        status = HTTPStatus.CREATED if ack is Ack.ACCEPTED else HTTPStatus.OK
        self._json(status, {"ack": ack.value, "batch_id": batch.batch_id})


def make_server(cfg: CollectorConfig) -> CollectorServer:
    return CollectorServer(cfg.host_port, TraceStore(cfg.data_dir), cfg.tokens)


class CollectorError(RuntimeError):
    def __init__(self, status: int, message: str):
        super().__init__(f"HTTP {status}: {message}")
        self.status = status


class CollectorClient:
    """Minimal probe-side client for the collector HTTP API."""

    def __init__(self, base_url: str, token: Optional[str] = None, timeout: float = 30):
        self.base = base_url.rstrip("/")
        self.token = token
        self.timeout = timeout

    def _request(self, method: str, path: str, body: Optional[bytes] = None):
        req = urllib.request.Request(self.base + path, data=body, method=method)
        if self.token:
            req.add_header("Authorization", f"Bearer {self.token}")
        if body is not None:
            req.add_header("Content-Type", "application/json")
        try:
            return urllib.request.urlopen(req, timeout=self.timeout)
        except urllib.error.HTTPError as e:
            try:
                msg = json.loads(e.read()).get("error", e.reason)
            except ValueError:
                msg = e.reason
            raise CollectorError(e.code, msg) from None

    def health(self) -> dict:
        with self._request("GET", "/v1/health") as resp:
            return json.loads(resp.read())

    def submit(self, batch: Batch) -> Ack:
        body = json.dumps(batch.to_json(), separators=(",", ":")).encode()
        with self._request("POST", "/v1/batches", body) as resp:
            return Ack(json.loads(resp.read())["ack"])

    def traces(self, date_from: str, date_to: str, probe: Optional[str] = None) -> list[TraceRecord]:
        q = {"from": date_from, "to": date_to}
        if probe:
            q["probe"] = probe
        with self._request("GET", "/v1/traces?" + urllib.parse.urlencode(q)) as resp:
            return [TraceRecord.from_json(json.loads(l)) for l in resp.read().splitlines() if l.strip()]
