"""Schema registry, ingestion and the canonical time-sorted store.

Rows are held column-wise per sensor.  Numeric, port and timestamp fields
are float64 arrays (NaN = missing); categorical, ip_address and text fields
are int32 codes into a per-field vocabulary (-1 = missing).

Store directory layout (``Store.save`` / ``Store.load``)::

    registry.json            schema registry (see SchemaRegistry.to_dict)
    manifest.json            ingested files, base offsets, row counts
    <sensor>.jsonl           one record per line, time-sorted
    <sensor>.index.json      sidecar: timestamps, raw indices, byte offsets
    rejects.jsonl            rows skipped during ingestion
"""

from __future__ import annotations

import csv
import heapq
import ipaddress
import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DuplicateSensorError, SchemaError, UnknownSensorError

REGISTRY_VERSION = 1
MISSING_MARKERS = {"", "-", "(empty)", None}


class FieldKind(str, Enum):
    NUMERIC = "numeric"
    CATEGORICAL = "categorical"
    IP_ADDRESS = "ip_address"
    PORT = "port"
    TIMESTAMP = "timestamp"
    TEXT = "text"


NUMERIC_KINDS = {FieldKind.NUMERIC, FieldKind.PORT, FieldKind.TIMESTAMP}


@dataclass(frozen=True)
class Field:
    name: str
    kind: FieldKind

    @property
    def numeric(self) -> bool:
        return self.kind in NUMERIC_KINDS


@dataclass(frozen=True)
class SensorSchema:
    """Field layout of one sensor's records.

    ``context`` holds optional per-row aggregate definitions used by the row
    encoders (see ``encoding.SensorEncoder``); it does not affect ingestion.
    """

    sensor_id: str
    fields: Tuple[Field, ...]
    timestamp_field: str
    context: Tuple[dict, ...] = ()

    def __post_init__(self) -> None:
        if not self.sensor_id:
            raise SchemaError("sensor_id must be non-empty")
        if not self.fields:
            raise SchemaError(f"schema {self.sensor_id!r} has no fields")
        names = [f.name for f in self.fields]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SchemaError(f"schema {self.sensor_id!r} repeats field names {dupes}")
        stamps = [f.name for f in self.fields if f.kind == FieldKind.TIMESTAMP]
        if len(stamps) != 1:
            raise SchemaError(
                f"schema {self.sensor_id!r} needs exactly one timestamp field, found {stamps}"
            )
        if stamps[0] != self.timestamp_field:
            raise SchemaError(
                f"schema {self.sensor_id!r}: timestamp_field {self.timestamp_field!r} "
                f"does not name the timestamp-kind field {stamps[0]!r}"
            )

    @property
    def field_names(self) -> List[str]:
        return [f.name for f in self.fields]

    def kind_of(self, name: str) -> str:
        for f in self.fields:
            if f.name == name:
                return f.kind.value
        raise KeyError(name)

    @property
    def value_fields(self) -> List[Field]:
        """All fields except the timestamp."""
        return [f for f in self.fields if f.kind != FieldKind.TIMESTAMP]

    def to_dict(self) -> dict:
        out = {
            "sensor_id": self.sensor_id,
            "timestamp_field": self.timestamp_field,
            "fields": [{"name": f.name, "kind": f.kind.value} for f in self.fields],
        }
        if self.context:
            out["context"] = [dict(c) for c in self.context]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SensorSchema":
        try:
            fields = tuple(Field(f["name"], FieldKind(f["kind"])) for f in data.get("fields", ()))
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"bad field entry in schema {data.get('sensor_id')!r}: {exc}")
        stamp = data.get("timestamp_field")
        if stamp is None:
            found = [f.name for f in fields if f.kind == FieldKind.TIMESTAMP]
            stamp = found[0] if found else ""
        return cls(
            sensor_id=data.get("sensor_id", ""),
            fields=fields,
            timestamp_field=stamp,
            context=tuple(data.get("context", ())),
        )


class SchemaRegistry:
    """sensor_id -> SensorSchema, persisted as ``{"version": 1, "sensors": [...]}``."""

    def __init__(self, schemas: Iterable[SensorSchema] = ()):
        self._schemas: Dict[str, SensorSchema] = {}
        for s in schemas:
            self.register(s)

    def register(self, schema: SensorSchema) -> SensorSchema:
        if schema.sensor_id in self._schemas:
            raise DuplicateSensorError(f"sensor {schema.sensor_id!r} already registered")
        self._schemas[schema.sensor_id] = schema
        return schema

    def get(self, sensor_id: str) -> SensorSchema:
        try:
            return self._schemas[sensor_id]
        except KeyError:
            raise UnknownSensorError(f"unknown sensor {sensor_id!r}") from None

    def __contains__(self, sensor_id: str) -> bool:
        return sensor_id in self._schemas

    @property
    def sensors(self) -> List[str]:
        return list(self._schemas)

    def to_dict(self) -> dict:
        return {
            "version": REGISTRY_VERSION,
            "sensors": [s.to_dict() for s in self._schemas.values()],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SchemaRegistry":
        if data.get("version", REGISTRY_VERSION) != REGISTRY_VERSION:
            raise SchemaError(f"unsupported registry version {data.get('version')!r}")
        return cls(SensorSchema.from_dict(s) for s in data.get("sensors", ()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SchemaRegistry":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class SensorRecord:
    sensor_id: str
    raw_index: int
    timestamp: float
    values: Dict[str, Any]

    @property
    def key(self) -> Tuple[str, int]:
        return (self.sensor_id, self.raw_index)


@dataclass
class Reject:
    path: str
    line: int
    reason: str


@dataclass
class IngestReport:
    sensor_id: str
    path: str
    ingested: int
    rejects: List[Reject] = field(default_factory=list)

    def __int__(self) -> int:
        return self.ingested


# -- value parsing ----------------------------------------------------------


def parse_timestamp(value: Any) -> float:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        out = float(value)
    else:
        text = str(value).strip()
        try:
            out = float(text)
        except ValueError:
            if text.endswith("Z"):
                text = text[:-1] + "+00:00"
            out = datetime.fromisoformat(text).timestamp()
    if not math.isfinite(out):
        raise ValueError(f"non-finite timestamp {value!r}")
    return out


def parse_value(kind: FieldKind, value: Any) -> Any:
    """Convert a raw field to its stored form; raises ValueError if malformed."""
    if isinstance(value, str):
        value = value.strip()
    if value in MISSING_MARKERS:
        return math.nan if kind in NUMERIC_KINDS else None
    if kind == FieldKind.TIMESTAMP:
        return parse_timestamp(value)
    if kind == FieldKind.NUMERIC:
        if isinstance(value, bool):
            return float(value)
        out = float(value)
        if math.isinf(out):
            raise ValueError(f"infinite value {value!r}")
        return out
    if kind == FieldKind.PORT:
        port = float(value)
        if port != int(port) or not 0 <= port <= 65535:
            raise ValueError(f"bad port {value!r}")
        return port
    if kind == FieldKind.IP_ADDRESS:
        return str(ipaddress.ip_address(str(value)))
    return str(value)


# -- columnar tables --------------------------------------------------------


class SensorTable:
    """Column storage for one sensor, sorted by (timestamp, raw_index)."""

    def __init__(self, schema: SensorSchema):
        self.schema = schema
        self.timestamps = np.zeros(0, dtype=np.float64)
        self.raw_index = np.zeros(0, dtype=np.int64)
        self.source = np.zeros(0, dtype=np.int32)
        self.line = np.zeros(0, dtype=np.int64)
        self.numeric: Dict[str, np.ndarray] = {}
        self.codes: Dict[str, np.ndarray] = {}
        self.vocab: Dict[str, List[str]] = {}
        self._lookup: Dict[str, Dict[str, int]] = {}
        for f in schema.value_fields:
            if f.numeric:
                self.numeric[f.name] = np.zeros(0, dtype=np.float64)
            else:
                self.codes[f.name] = np.zeros(0, dtype=np.int32)
                self.vocab[f.name] = []
                self._lookup[f.name] = {}
        self._position: Optional[Dict[int, int]] = None

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def sensor_id(self) -> str:
        return self.schema.sensor_id

    def code_of(self, name: str, value: str) -> int:
        return self._lookup[name].get(value, -1)

    def _encode(self, name: str, values: Sequence[Optional[str]]) -> np.ndarray:
        lookup = self._lookup[name]
        vocab = self.vocab[name]
        out = np.empty(len(values), dtype=np.int32)
        for i, v in enumerate(values):
            if v is None:
                out[i] = -1
                continue
            code = lookup.get(v)
            if code is None:
                code = len(vocab)
                lookup[v] = code
                vocab.append(v)
            out[i] = code
        return out

    def append(self, rows: List[Tuple[float, int, int, int, Dict[str, Any]]]) -> None:
        """Append parsed rows ``(ts, raw_index, source_id, line, values)`` and re-sort."""
        if not rows:
            return
        ts = np.fromiter((r[0] for r in rows), dtype=np.float64, count=len(rows))
        raw = np.fromiter((r[1] for r in rows), dtype=np.int64, count=len(rows))
        src = np.fromiter((r[2] for r in rows), dtype=np.int32, count=len(rows))
        line = np.fromiter((r[3] for r in rows), dtype=np.int64, count=len(rows))
        self.timestamps = np.concatenate([self.timestamps, ts])
        self.raw_index = np.concatenate([self.raw_index, raw])
        self.source = np.concatenate([self.source, src])
        self.line = np.concatenate([self.line, line])
        for name in self.numeric:
            col = np.fromiter(
                (r[4].get(name, math.nan) for r in rows), dtype=np.float64, count=len(rows)
            )
            self.numeric[name] = np.concatenate([self.numeric[name], col])
        for name in self.codes:
            col = self._encode(name, [r[4].get(name) for r in rows])
            self.codes[name] = np.concatenate([self.codes[name], col])
        self._sort()

    def _sort(self) -> None:
        order = np.lexsort((self.raw_index, self.timestamps))
        if np.array_equal(order, np.arange(len(order))):
            self._position = None
            return
        self.take(order)

    def take(self, order: np.ndarray) -> None:
        self.timestamps = self.timestamps[order]
        self.raw_index = self.raw_index[order]
        self.source = self.source[order]
        self.line = self.line[order]
        for name in self.numeric:
            self.numeric[name] = self.numeric[name][order]
        for name in self.codes:
            self.codes[name] = self.codes[name][order]
        self._position = None

    def value(self, name: str, i: int) -> Any:
        if name == self.schema.timestamp_field:
            return float(self.timestamps[i])
        if name in self.numeric:
            return float(self.numeric[name][i])
        code = int(self.codes[name][i])
        return None if code < 0 else self.vocab[name][code]

    def values(self, i: int) -> Dict[str, Any]:
        out: Dict[str, Any] = {self.schema.timestamp_field: float(self.timestamps[i])}
        for name, col in self.numeric.items():
            out[name] = float(col[i])
        for name, col in self.codes.items():
            code = int(col[i])
            out[name] = None if code < 0 else self.vocab[name][code]
        return out

    def decoded(self, name: str) -> np.ndarray:
        """Object array of string values (None for missing)."""
        vocab = np.array(list(self.vocab[name]) + [None], dtype=object)
        return vocab[self.codes[name]]

    def record(self, i: int) -> SensorRecord:
        return SensorRecord(
            sensor_id=self.sensor_id,
            raw_index=int(self.raw_index[i]),
            timestamp=float(self.timestamps[i]),
            values=self.values(i),
        )

    def position(self, raw_index: int) -> int:
        """Row position for ``raw_index``; KeyError if absent."""
        if self._position is None:
            self._position = {int(r): i for i, r in enumerate(self.raw_index)}
        return self._position[int(raw_index)]

    def has(self, raw_index: int) -> bool:
        try:
            self.position(raw_index)
        except KeyError:
            return False
        return True

    def entity_codes(self, names: Sequence[str]) -> np.ndarray:
        """One int64 code per row identifying the tuple of ``names`` values."""
        if not names:
            return np.zeros(len(self), dtype=np.int64)
        cols = []
        for name in names:
            if name in self.codes:
                cols.append(self.codes[name].astype(np.int64))
            elif name in self.numeric:
                col = self.numeric[name]
                _, inv = np.unique(np.nan_to_num(col, nan=-1.0), return_inverse=True)
                cols.append(inv.astype(np.int64))
            elif name == self.schema.timestamp_field:
                _, inv = np.unique(self.timestamps, return_inverse=True)
                cols.append(inv.astype(np.int64))
            else:
                raise KeyError(name)
        if len(cols) == 1:
            return cols[0]
        stacked = np.stack(cols, axis=1)
        _, inv = np.unique(stacked, axis=0, return_inverse=True)
        return inv.reshape(-1).astype(np.int64)

    def subset(self, mask: np.ndarray) -> "SensorTable":
        """New table holding the rows selected by a boolean mask or index array."""
        out = SensorTable(self.schema)
        out.vocab = self.vocab
        out._lookup = self._lookup
        out.timestamps = self.timestamps[mask]
        out.raw_index = self.raw_index[mask]
        out.source = self.source[mask]
        out.line = self.line[mask]
        out.numeric = {k: v[mask] for k, v in self.numeric.items()}
        out.codes = {k: v[mask] for k, v in self.codes.items()}
        return out


# -- file parsing -----------------------------------------------------------


def _read_rows(path: Path, fmt: str, schema: SensorSchema) -> Iterator[Tuple[int, Any]]:
    """Yield ``(line_number, mapping_or_error)`` for every data line of a file."""
    names = schema.field_names
    if fmt == "jsonl":
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    yield lineno, ValueError(f"bad json: {exc.msg}")
                    continue
                if not isinstance(obj, dict):
                    yield lineno, ValueError("json line is not an object")
                    continue
                yield lineno, obj
        return
    if fmt == "tsv":
        with open(path, "r", encoding="utf-8") as fh:
            columns = names
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                if line.startswith("#"):
                    if line.startswith("#fields"):
                        columns = line.split("\t")[1:]
                    continue
                parts = line.split("\t")
                if len(parts) != len(columns):
                    yield lineno, ValueError(f"expected {len(columns)} columns, got {len(parts)}")
                    continue
                yield lineno, dict(zip(columns, parts))
        return
    if fmt == "csv":
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = None
            for row in reader:
                lineno = reader.line_num
                if not row:
                    continue
                if header is None:
                    header = row
                    continue
                if len(row) != len(header):
                    yield lineno, ValueError(f"expected {len(header)} columns, got {len(row)}")
                    continue
                yield lineno, dict(zip(header, row))
        return
    raise ValueError(f"unknown format {fmt!r}; expected tsv, csv or jsonl")


def guess_format(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix in (".jsonl", ".json", ".ndjson"):
        return "jsonl"
    if suffix == ".csv":
        return "csv"
    return "tsv"


def parse_row(schema: SensorSchema, raw: Dict[str, Any]) -> Tuple[float, Dict[str, Any]]:
    values: Dict[str, Any] = {}
    ts = None
    for f in schema.fields:
        if f.name not in raw:
            if f.kind == FieldKind.TIMESTAMP:
                raise ValueError(f"missing timestamp field {f.name!r}")
            values[f.name] = math.nan if f.numeric else None
            continue
        try:
            v = parse_value(f.kind, raw[f.name])
        except (ValueError, TypeError) as exc:
            raise ValueError(f"field {f.name!r}: {exc}") from None
        if f.kind == FieldKind.TIMESTAMP:
            if isinstance(v, float) and math.isnan(v):
                raise ValueError(f"missing timestamp field {f.name!r}")
            ts = v
        else:
            values[f.name] = v
    return ts, values


# -- the store --------------------------------------------------------------


class Store:
    """Per-sensor time-sorted tables plus provenance back to raw files."""

    def __init__(self, registry: SchemaRegistry):
        self.registry = registry
        self.tables: Dict[str, SensorTable] = {}
        self.files: List[dict] = []
        self.rejects: List[Reject] = []
        self._next_raw: Dict[str, int] = {}

    def table(self, sensor_id: str) -> SensorTable:
        if sensor_id not in self.tables:
            schema = self.registry.get(sensor_id)
            self.tables[sensor_id] = SensorTable(schema)
        return self.tables[sensor_id]

    @property
    def sensors(self) -> List[str]:
        return [s for s in self.registry.sensors if s in self.tables]

    def __len__(self) -> int:
        return sum(len(t) for t in self.tables.values())

    def ingest_file(self, sensor_id: str, path, fmt: Optional[str] = None) -> IngestReport:
        """Parse ``path`` and merge its rows; malformed rows are skipped and reported.

        ``raw_index`` is the data-line ordinal within the file plus the count of
        data lines already ingested for this sensor, so it is unique per sensor
        and maps back to exactly one (file, line).
        """
        schema = self.registry.get(sensor_id)
        fmt = fmt or guess_format(path)
        path = Path(path)
        table = self.table(sensor_id)
        source_id = len(self.files)
        base = self._next_raw.get(sensor_id, 0)
        rows = []
        rejects: List[Reject] = []
        ordinal = 0
        for lineno, raw in _read_rows(path, fmt, schema):
            raw_index = base + ordinal
            ordinal += 1
            if isinstance(raw, Exception):
                rejects.append(Reject(str(path), lineno, str(raw)))
                continue
            try:
                ts, values = parse_row(schema, raw)
            except ValueError as exc:
                rejects.append(Reject(str(path), lineno, str(exc)))
                continue
            rows.append((ts, raw_index, source_id, lineno, values))
        table.append(rows)
        self._next_raw[sensor_id] = base + ordinal
        self.files.append(
            {
                "sensor_id": sensor_id,
                "path": str(path),
                "format": fmt,
                "base": base,
                "data_lines": ordinal,
                "ingested": len(rows),
                "rejected": len(rejects),
            }
        )
        self.rejects.extend(rejects)
        return IngestReport(sensor_id, str(path), len(rows), rejects)

    def add_records(self, sensor_id: str, records: Iterable[Tuple[float, Dict[str, Any]]]) -> int:
        """Append in-memory rows (already-parsed values); returns the count added."""
        schema = self.registry.get(sensor_id)
        table = self.table(sensor_id)
        base = self._next_raw.get(sensor_id, 0)
        source_id = len(self.files)
        rows = []
        for i, (ts, values) in enumerate(records):
            raw = {schema.timestamp_field: ts, **values}
            ts_parsed, parsed = parse_row(schema, raw)
            rows.append((ts_parsed, base + i, source_id, i + 1, parsed))
        table.append(rows)
        self._next_raw[sensor_id] = base + len(rows)
        self.files.append(
            {"sensor_id": sensor_id, "path": "<memory>", "format": "memory", "base": base,
             "data_lines": len(rows), "ingested": len(rows), "rejected": 0}
        )
        return len(rows)

    # -- lookup and iteration ---------------------------------------------

    def resolve(self, sensor_id: str, raw_index: int) -> SensorRecord:
        """The stored record for a provenance key; KeyError if absent."""
        if sensor_id not in self.tables:
            raise KeyError((sensor_id, raw_index))
        table = self.tables[sensor_id]
        try:
            return table.record(table.position(raw_index))
        except KeyError:
            raise KeyError((sensor_id, raw_index)) from None

    def source_of(self, sensor_id: str, raw_index: int) -> Tuple[str, int]:
        """(file path, line number) the row was read from."""
        table = self.tables[sensor_id]
        i = table.position(raw_index)
        return self.files[int(table.source[i])]["path"], int(table.line[i])

    def merged_order(self, sensors: Optional[Sequence[str]] = None) -> Tuple[np.ndarray, np.ndarray]:
        """(sensor position, row position) arrays in global (ts, sensor_id, raw_index) order.

        Sensor positions index into ``sorted(sensors)``.
        """
        names = sorted(sensors if sensors is not None else self.tables)
        ts, sid, raw, row = [], [], [], []
        for k, name in enumerate(names):
            t = self.tables.get(name)
            if t is None or not len(t):
                continue
            ts.append(t.timestamps)
            raw.append(t.raw_index)
            sid.append(np.full(len(t), k, dtype=np.int32))
            row.append(np.arange(len(t), dtype=np.int64))
        if not ts:
            return np.zeros(0, dtype=np.int32), np.zeros(0, dtype=np.int64)
        ts_all = np.concatenate(ts)
        sid_all = np.concatenate(sid)
        raw_all = np.concatenate(raw)
        row_all = np.concatenate(row)
        order = np.lexsort((raw_all, sid_all, ts_all))
        return sid_all[order], row_all[order]

    def iter_merged(self, sensors: Optional[Sequence[str]] = None) -> Iterator[SensorRecord]:
        """Records from all sensors in (timestamp, sensor_id, raw_index) order."""
        names = sorted(sensors if sensors is not None else self.tables)

        def stream(name):
            t = self.tables[name]
            for i in range(len(t)):
                yield (float(t.timestamps[i]), name, int(t.raw_index[i]), i)

        streams = [stream(n) for n in names if n in self.tables]
        for ts, name, raw, i in heapq.merge(*streams):
            yield self.tables[name].record(i)

    def time_range(self) -> Tuple[float, float]:
        lo = [t.timestamps[0] for t in self.tables.values() if len(t)]
        hi = [t.timestamps[-1] for t in self.tables.values() if len(t)]
        if not lo:
            return (0.0, 0.0)
        return float(min(lo)), float(max(hi))

    # -- persistence ------------------------------------------------------

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.registry.save(directory / "registry.json")
        for name, table in self.tables.items():
            offsets = []
            pos = 0
            with open(directory / f"{name}.jsonl", "w", encoding="utf-8") as fh:
                for i in range(len(table)):
                    rec = {
                        "raw_index": int(table.raw_index[i]),
                        "ts": float(table.timestamps[i]),
                        "source": int(table.source[i]),
                        "line": int(table.line[i]),
                        "values": _jsonable(table.values(i), table.schema.timestamp_field),
                    }
                    text = json.dumps(rec, separators=(",", ":"), sort_keys=True) + "\n"
                    offsets.append(pos)
                    pos += len(text.encode("utf-8"))
                    fh.write(text)
            index = {
                "sensor_id": name,
                "timestamps": table.timestamps.tolist(),
                "raw_index": table.raw_index.tolist(),
                "offsets": offsets,
            }
            (directory / f"{name}.index.json").write_text(json.dumps(index))
        manifest = {
            "version": REGISTRY_VERSION,
            "files": self.files,
            "next_raw": self._next_raw,
            "sensors": {n: len(t) for n, t in self.tables.items()},
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        with open(directory / "rejects.jsonl", "w", encoding="utf-8") as fh:
            for r in self.rejects:
                fh.write(json.dumps({"path": r.path, "line": r.line, "reason": r.reason}) + "\n")

    @classmethod
    def load(cls, directory) -> "Store":
        directory = Path(directory)
        registry = SchemaRegistry.load(directory / "registry.json")
        store = cls(registry)
        manifest = json.loads((directory / "manifest.json").read_text())
        store.files = manifest["files"]
        store._next_raw = {k: int(v) for k, v in manifest["next_raw"].items()}
        for name in manifest["sensors"]:
            schema = registry.get(name)
            rows = []
            with open(directory / f"{name}.jsonl", "r", encoding="utf-8") as fh:
                for line in fh:
                    rec = json.loads(line)
                    values = rec["values"]
                    for f in schema.value_fields:
                        if f.numeric and values.get(f.name) is None:
                            values[f.name] = math.nan
                    rows.append((rec["ts"], rec["raw_index"], rec["source"], rec["line"], values))
            store.table(name).append(rows)
        rej = directory / "rejects.jsonl"
        if rej.exists():
            for line in rej.read_text().splitlines():
                if line.strip():
                    store.rejects.append(Reject(**json.loads(line)))
        return store


def _jsonable(values: Dict[str, Any], ts_field: str) -> Dict[str, Any]:
    out = {}
    for k, v in values.items():
        if k == ts_field:
            continue
        if isinstance(v, float) and math.isnan(v):
            v = None
        out[k] = v
    return out


def read_index(directory, sensor_id: str) -> dict:
    """Load a sensor's sidecar index (timestamps, raw indices, byte offsets)."""
    return json.loads((Path(directory) / f"{sensor_id}.index.json").read_text())


def read_stored_row(directory, sensor_id: str, raw_index: int) -> dict:
    """Random access to one stored record through the sidecar index."""
    index = read_index(directory, sensor_id)
    try:
        pos = index["raw_index"].index(int(raw_index))
    except ValueError:
        raise KeyError((sensor_id, raw_index)) from None
    with open(Path(directory) / f"{sensor_id}.jsonl", "rb") as fh:
        fh.seek(index["offsets"][pos])
        return json.loads(fh.readline())


def default_registry_path() -> Path:
    return Path(__file__).parent / "data" / "schemas.json"


def load_default_registry() -> SchemaRegistry:
    return SchemaRegistry.load(default_registry_path())


def store_size_bytes(directory) -> int:
    return sum(os.path.getsize(p) for p in Path(directory).iterdir() if p.is_file())
