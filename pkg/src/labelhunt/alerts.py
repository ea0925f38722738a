"""Smart alerts: cluster matches joined with labels, explanations and provenance.

Outbox layout: one ``<alert_id>.json`` per alert in the spool directory,
written to a temporary name first and renamed into place.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
import time
import uuid
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import jsonschema

from .errors import IntegrityError, LabelHuntError
from .hunter import ClusterMatch
from .log_store import Store

ALERT_VERSION = 1
NO_ANNOTATION = "no annotation"


class OutboxError(LabelHuntError):
    pass


@dataclass(frozen=True)
class AlertRow:
    sensor_id: str
    raw_index: int
    ts: float
    labels: Tuple[str, ...]
    annotation: Optional[str] = None
    source: Optional[Tuple[str, int]] = None
    values: Tuple[Tuple[str, Any], ...] = ()


@dataclass(frozen=True)
class SmartAlert:
    alert_id: str
    cluster_id: str
    span: Tuple[float, float]
    bind: Tuple[Tuple[str, str], ...]
    rows: Tuple[AlertRow, ...]
    severity: float
    generated_at: float
    narrative: str = ""

    def comparable(self) -> "SmartAlert":
        """Copy with the per-build fields (id, timestamp) blanked."""
        return replace(self, alert_id="", generated_at=0.0)


def build_alert(match: ClusterMatch, store: Store, row_labels: Mapping[Tuple[str, int], Sequence[str]],
                severity: Mapping[str, float], annotations: Optional[Mapping[Tuple[str, int], str]] = None,
                now: Optional[float] = None) -> SmartAlert:
    """Join a match with its rows' labels and annotations.

    Raises IntegrityError if any contributing row is missing from the store.
    """
    rows = []
    total = 0.0
    for sensor, raw in match.rows:
        try:
            rec = store.resolve(sensor, raw)
            source = store.source_of(sensor, raw)
        except KeyError:
            raise IntegrityError(f"alert row ({sensor}, {raw}) does not resolve to stored data") from None
        labels = tuple(row_labels.get((sensor, raw), ()))
        total += sum(float(severity.get(l, 0.0)) for l in labels)
        note = annotations.get((sensor, raw)) if annotations is not None else None
        values = tuple(sorted((k, None if isinstance(v, float) and math.isnan(v) else v)
                              for k, v in rec.values.items()))
        rows.append(AlertRow(sensor, int(raw), rec.timestamp, labels, note, source, values))
    alert = SmartAlert(
        alert_id=uuid.uuid4().hex,
        cluster_id=match.cluster_id,
        span=tuple(match.span),
        bind=tuple(match.bind),
        rows=tuple(rows),
        severity=total,
        generated_at=time.time() if now is None else now,
    )
    return replace(alert, narrative=narrative(alert))


def narrative(alert: SmartAlert) -> str:
    who = ", ".join(f"{k}={v}" for k, v in alert.bind) or "unbound"
    steps = " -> ".join(sorted(set(l for r in alert.rows for l in r.labels), key=lambda l: l)) or "none"
    secs = alert.span[1] - alert.span[0]
    return (f"Cluster {alert.cluster_id} for {who}: {len(alert.rows)} row(s) over {secs:.1f} s "
            f"with labels {steps}; aggregate severity {alert.severity:g}.")


def alert_to_dict(alert: SmartAlert) -> dict:
    return {
        "version": ALERT_VERSION,
        "alert_id": alert.alert_id,
        "cluster_id": alert.cluster_id,
        "span": list(alert.span),
        "bind": dict(alert.bind),
        "severity": alert.severity,
        "generated_at": alert.generated_at,
        "narrative": alert.narrative,
        "rows": [
            {"sensor_id": r.sensor_id, "raw_index": r.raw_index, "ts": r.ts, "labels": list(r.labels),
             "annotation": r.annotation, "source": list(r.source) if r.source else None,
             "values": dict(r.values)}
            for r in alert.rows
        ],
    }


def alert_from_dict(d: dict) -> SmartAlert:
    return SmartAlert(
        alert_id=d["alert_id"],
        cluster_id=d["cluster_id"],
        span=tuple(d["span"]),
        bind=tuple(d["bind"].items()),
        rows=tuple(AlertRow(r["sensor_id"], r["raw_index"], r["ts"], tuple(r["labels"]),
                            r["annotation"], tuple(r["source"]) if r.get("source") else None,
                            tuple(sorted(r.get("values", {}).items())))
                   for r in d["rows"]),
        severity=d["severity"],
        generated_at=d["generated_at"],
        narrative=d.get("narrative", ""),
    )


def alert_schema_path() -> Path:
    return Path(__file__).parent / "data" / "alert.schema.json"


_SCHEMA: Optional[dict] = None


def validate_alert(doc: dict) -> None:
    """Raise jsonschema.ValidationError if ``doc`` does not match the shipped schema."""
    global _SCHEMA
    if _SCHEMA is None:
        _SCHEMA = json.loads(alert_schema_path().read_text())
    jsonschema.validate(doc, _SCHEMA)


def render(alert: SmartAlert, fmt: str = "text") -> str:
    if fmt == "json":
        doc = alert_to_dict(alert)
        validate_alert(doc)
        return json.dumps(doc, indent=2, sort_keys=True)
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}; expected 'text' or 'json'")
    lines = [
        f"ALERT {alert.alert_id}  cluster={alert.cluster_id}  severity={alert.severity:g}",
        alert.narrative,
        "Evidence:",
    ]
    for r in alert.rows:
        labels = ",".join(r.labels) or "Normal"
        where = f" {r.source[0]}:{r.source[1]}" if r.source else ""
        lines.append(f"  [{r.sensor_id}#{r.raw_index}] t={r.ts:.3f} labels={labels}{where}")
        lines.append(f"      why: {r.annotation if r.annotation else NO_ANNOTATION}")
    return "\n".join(lines) + "\n"


class Reporter(Protocol):
    def publish(self, alert: SmartAlert) -> str: ...


class FileOutbox:
    """Spool directory holding one JSON file per alert."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def publish(self, alert: SmartAlert) -> str:
        return str(write_outbox(alert, self.directory))


def write_outbox(alert: SmartAlert, directory) -> Path:
    directory = Path(directory)
    doc = alert_to_dict(alert)
    validate_alert(doc)
    target = directory / f"{alert.alert_id}.json"
    try:
        directory.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, target)
    except OSError as exc:
        raise OutboxError(f"cannot write alert to outbox {directory}: {exc}") from exc
    return target
