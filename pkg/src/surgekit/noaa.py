"""Client for the public tides-and-currents data API with an on-disk cache.

Cache layout: one directory (``$SURGEKIT_CACHE_DIR`` or
``~/.cache/surgekit``) holding, per request chunk, ``<fingerprint>.json``
(the raw payload bytes) and ``<fingerprint>.meta.json`` (normalized query,
fetch time, payload sha256). The fingerprint is the sha256 of the
normalized query serialized as sorted-key compact JSON.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .data.series import (
    HOUR, MAX_GAP_HOURS, GaugeSeries, HarmonicSeries, _atomic_write, fill_short_gaps, format_time,
    parse_time,
)
from .errors import ConfigError, NoDataError, ParseError, TransportError

API_URL = "https://api.tidesandcurrents.noaa.gov/api/prod/datagetter"
CACHE_ENV = "SURGEKIT_CACHE_DIR"
CHUNK_DAYS = 30
MAX_WORKERS = 4
ATTEMPTS = 3
PRODUCTS = {"hourly_height": GaugeSeries, "predictions": HarmonicSeries}


@dataclass(frozen=True)
class StationQuery:
    """Inclusive hourly range ``[begin, end]`` in UTC for one product."""

    begin: np.datetime64
    end: np.datetime64
    product: str = "hourly_height"
    station_id: str = "8726520"
    datum: str = "MSL"
    units: str = "metric"

    def __post_init__(self):
        object.__setattr__(self, "begin", parse_time(self.begin))
        object.__setattr__(self, "end", parse_time(self.end))
        if self.product not in PRODUCTS:
            raise ConfigError(f"unknown product {self.product!r}; expected one of {sorted(PRODUCTS)}")
        if self.begin >= self.end:
            raise ConfigError(f"begin {format_time(self.begin)} must be before end {format_time(self.end)}")

    def params(self) -> dict:
        p = {
            "station": self.station_id, "product": self.product, "datum": self.datum,
            "units": self.units, "time_zone": "gmt", "format": "json",
            "begin_date": _api_time(self.begin), "end_date": _api_time(self.end),
            "application": "surgekit",
        }
        if self.product == "predictions":
            p["interval"] = "h"
        return p

    def chunks(self, days: int = CHUNK_DAYS) -> list["StationQuery"]:
        out, start, span = [], self.begin, np.timedelta64(days * 24, "h")
        while start <= self.end:
            stop = min(start + span - HOUR, self.end)
            if stop == start:
                # a one-hour tail still needs begin < end for the API
                out[-1] = StationQuery(out[-1].begin, stop, self.product, self.station_id, self.datum, self.units)
                break
            out.append(StationQuery(start, stop, self.product, self.station_id, self.datum, self.units))
            start = stop + HOUR
        return out

    def normalized(self) -> dict:
        return {"station": self.station_id, "product": self.product, "datum": self.datum.upper(),
                "units": self.units.lower(), "begin": format_time(self.begin), "end": format_time(self.end)}

    def fingerprint(self) -> str:
        blob = json.dumps(self.normalized(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _api_time(t) -> str:
    return np.datetime_as_string(np.datetime64(t, "m")).replace("-", "").replace("T", " ")


def default_cache_dir() -> Path:
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else Path.home() / ".cache" / "surgekit"


def requests_transport(url: str, params: dict, timeout: float = 30.0) -> bytes:
    import requests

    try:
        resp = requests.get(url, params=params, timeout=timeout)
    except requests.RequestException as exc:
        raise TransportError(f"request failed: {exc}") from exc
    if resp.status_code >= 400:
        raise TransportError(f"HTTP {resp.status_code} from {url}")
    return resp.content


class ResponseCache:
    def __init__(self, directory=None):
        self.directory = Path(directory) if directory is not None else default_cache_dir()

    def _paths(self, fp: str) -> tuple[Path, Path]:
        return self.directory / f"{fp}.json", self.directory / f"{fp}.meta.json"

    def get(self, query: StationQuery) -> bytes | None:
        payload, meta = self._paths(query.fingerprint())
        if payload.exists() and meta.exists():
            return payload.read_bytes()
        return None

    def put(self, query: StationQuery, payload: bytes) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        fp = query.fingerprint()
        path, meta_path = self._paths(fp)
        if path.exists() and meta_path.exists():
            return  # entries are immutable
        meta = {"fingerprint": fp, "query": query.normalized(),
                "fetched_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
                "sha256": hashlib.sha256(payload).hexdigest()}
        _atomic_write(path, [payload])
        _atomic_write(meta_path, [json.dumps(meta, sort_keys=True).encode("utf-8")])

    def entries(self) -> list[dict]:
        if not self.directory.exists():
            return []
        out = []
        for meta_path in sorted(self.directory.glob("*.meta.json")):
            meta = json.loads(meta_path.read_text())
            meta["payload"] = str(meta_path.with_name(meta["fingerprint"] + ".json"))
            out.append(meta)
        return out

    def clear(self) -> int:
        n = 0
        if self.directory.exists():
            for path in self.directory.glob("*.json"):
                path.unlink()
                n += path.name.endswith(".meta.json")
        return n

    def verify(self) -> list[dict]:
        """One ``{"fingerprint", "ok", "reason"}`` record per entry."""
        report = []
        for meta in self.entries():
            fp, reason = meta["fingerprint"], ""
            blob = json.dumps(meta["query"], sort_keys=True, separators=(",", ":"))
            payload = Path(meta["payload"])
            if hashlib.sha256(blob.encode("utf-8")).hexdigest() != fp:
                reason = "fingerprint does not match stored query"
            elif not payload.exists():
                reason = "payload missing"
            elif hashlib.sha256(payload.read_bytes()).hexdigest() != meta["sha256"]:
                reason = "payload checksum mismatch"
            report.append({"fingerprint": fp, "ok": not reason, "reason": reason})
        return report


def cache_management(directory, op: str):
    cache = ResponseCache(directory)
    if not cache.directory.exists() and op != "clear":
        raise OSError(f"cache directory {cache.directory} does not exist")
    if op == "list":
        return cache.entries()
    if op == "clear":
        return cache.clear()
    if op == "verify":
        return cache.verify()
    raise ConfigError(f"unknown cache operation {op!r}")


def parse_payload(payload: bytes, product: str):
    """``(timestamps, values)`` from one API JSON payload; blank values are skipped as gaps."""
    try:
        doc = json.loads(payload)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"payload is not JSON: {exc}", offset=getattr(exc, "pos", None)) from exc
    if not isinstance(doc, dict):
        raise ParseError("payload is not a JSON object")
    if "error" in doc:
        message = str(doc["error"].get("message", doc["error"])) if isinstance(doc["error"], dict) else str(doc["error"])
        if "no data" in message.lower():
            raise NoDataError(message)
        raise ParseError(f"API error: {message}")
    key = "predictions" if product == "predictions" else "data"
    records = doc.get(key)
    if not isinstance(records, list):
        raise ParseError(f"payload has no {key!r} list")
    stamps, values = [], []
    for i, rec in enumerate(records):
        try:
            t = np.datetime64(str(rec["t"]).replace(" ", "T"), "m")
            if t.astype(np.int64) % 60:
                raise ValueError("timestamp is not on the hour")
            raw = str(rec["v"]).strip()
            if not raw:
                continue
            v = float(raw)
            if not np.isfinite(v):
                raise ValueError("non-finite value")
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad record #{i} {rec!r}: {exc}") from exc
        stamps.append(t.astype("datetime64[h]"))
        values.append(v)
    return np.array(stamps, dtype="datetime64[h]"), np.array(values, dtype=np.float64)


class NoaaClient:
    """Cached, chunked, retrying fetcher. ``transport(url, params) -> bytes`` is injectable."""

    def __init__(self, cache_dir=None, transport=None, attempts: int = ATTEMPTS, backoff_s: float = 0.5,
                 sleep=time.sleep, max_workers: int = MAX_WORKERS, use_cache: bool = True):
        self.cache = ResponseCache(cache_dir) if use_cache else None
        self.transport = transport or requests_transport
        self.attempts = attempts
        self.backoff_s = backoff_s
        self.sleep = sleep
        self.max_workers = max_workers
        self.request_count = 0
        self._lock = threading.Lock()

    def _request(self, query: StationQuery) -> bytes:
        last = None
        for attempt in range(self.attempts):
            with self._lock:
                self.request_count += 1
            try:
                return self.transport(API_URL, query.params())
            except (TransportError, OSError) as exc:
                last = exc
                if attempt + 1 < self.attempts:
                    self.sleep(self.backoff_s * 2 ** attempt)
        raise TransportError(f"{query.product} {format_time(query.begin)}..{format_time(query.end)} "
                             f"failed after {self.attempts} attempts: {last}")

    def _chunk(self, query: StationQuery):
        payload = self.cache.get(query) if self.cache else None
        if payload is None:
            payload = self._request(query)
            try:
                result = parse_payload(payload, query.product)
            except NoDataError:
                return np.array([], dtype="datetime64[h]"), np.array([])
            if self.cache:
                self.cache.put(query, payload)
            return result
        try:
            return parse_payload(payload, query.product)
        except NoDataError:
            return np.array([], dtype="datetime64[h]"), np.array([])

    def fetch_series(self, query: StationQuery, max_gap_hours: int = MAX_GAP_HOURS):
        chunks = query.chunks()
        with ThreadPoolExecutor(max_workers=min(self.max_workers, len(chunks))) as pool:
            parts = list(pool.map(self._chunk, chunks))
        ts = np.concatenate([p[0] for p in parts])
        vals = np.concatenate([p[1] for p in parts])
        if ts.size == 0:
            raise NoDataError(f"no {query.product} records for station {query.station_id} between "
                              f"{format_time(query.begin)} and {format_time(query.end)}")
        order = np.argsort(ts, kind="stable")
        ts, vals = ts[order], vals[order]
        keep = np.concatenate([[True], np.diff(ts.astype(np.int64)) > 0])
        ts, vals = fill_short_gaps(ts[keep], vals[keep], max_gap_hours)
        return PRODUCTS[query.product](ts, vals, station_id=query.station_id)


def fetch_series(query: StationQuery, client: NoaaClient | None = None):
    return (client or NoaaClient()).fetch_series(query)


def fetch_station(station_id: str, begin, end, client: NoaaClient | None = None):
    """``(GaugeSeries, HarmonicSeries)`` for the same inclusive range."""
    client = client or NoaaClient()
    gauge = client.fetch_series(StationQuery(begin, end, "hourly_height", station_id))
    tide = client.fetch_series(StationQuery(begin, end, "predictions", station_id))
    return gauge, tide


__all__ = ["StationQuery", "NoaaClient", "ResponseCache", "cache_management", "fetch_series",
           "fetch_station", "parse_payload"]
