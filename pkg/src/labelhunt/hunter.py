"""Cluster search over labeled rows, plus data-driven rank-and-expand.

Cluster definition file (``"version": 1``)::

    {"version": 1, "clusters": [
       {"cluster_id": "brute_force_compromise",
        "sequence": ["failed_logon_burst", "logon_after_failures"],
        "window_seconds": 1800, "bind": ["user", "src_ip"]}]}

Match semantics, per (definition, binding of the ``bind`` fields):

* a match is rows r1 < ... < rm in stream order, row k carrying label k of
  the sequence, all rows sharing the bound values, t(rm) - t(r1) <= T;
* the reported match is the one completing earliest; among those, the
  lexicographically latest row tuple (tightest span);
* after a match starting at time s, the next match for that binding must
  start after the completing row and no earlier than s + T.
"""

from __future__ import annotations

import json
import zlib
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .errors import RuleLoadError
from .log_store import SchemaRegistry, Store

CLUSTER_VERSION = 1


@dataclass(frozen=True)
class ClusterDefinition:
    cluster_id: str
    sequence: Tuple[str, ...]
    window_seconds: float
    bind: Tuple[str, ...] = ()


@dataclass(frozen=True)
class HuntRow:
    ts: float
    sensor_id: str
    raw_index: int
    labels: frozenset
    values: Tuple[Tuple[str, Optional[str]], ...] = ()

    def get(self, name: str) -> Optional[str]:
        for k, v in self.values:
            if k == name:
                return v
        return None

    @property
    def key(self) -> Tuple[str, int]:
        return (self.sensor_id, self.raw_index)


@dataclass(frozen=True)
class ClusterMatch:
    cluster_id: str
    rows: Tuple[Tuple[str, int], ...]
    bind: Tuple[Tuple[str, str], ...]
    span: Tuple[float, float]
    steps: Tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"cluster_id": self.cluster_id, "rows": [list(r) for r in self.rows],
                "bind": dict(self.bind), "span": list(self.span), "steps": list(self.steps)}

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterMatch":
        return cls(d["cluster_id"], tuple(tuple(r) for r in d["rows"]),
                   tuple(sorted(d["bind"].items())), tuple(d["span"]), tuple(d.get("steps", ())))


def load_clusters(source, registry: Optional[SchemaRegistry] = None,
                  label_sensors: Optional[Dict[str, str]] = None) -> List[ClusterDefinition]:
    """Parse and validate definitions; RuleLoadError lists every defect.

    With ``registry`` and ``label_sensors`` (label -> sensor), bind fields are
    checked against the schema of each step's sensor.
    """
    data = source if isinstance(source, dict) else json.loads(Path(source).read_text())
    if data.get("version", CLUSTER_VERSION) != CLUSTER_VERSION:
        raise RuleLoadError([f"unsupported cluster file version {data.get('version')!r}"])
    errors: List[str] = []
    out: List[ClusterDefinition] = []
    seen = set()
    for i, c in enumerate(data.get("clusters", ())):
        where = f"clusters[{i}] ({c.get('cluster_id')})"
        cid = c.get("cluster_id")
        seq = tuple(c.get("sequence", ()))
        bind = tuple(c.get("bind", ()))
        try:
            window = float(c.get("window_seconds", 0))
        except (TypeError, ValueError):
            window = 0.0
        local = []
        if not cid or cid in seen:
            local.append(f"{where}: missing or duplicate cluster_id")
        if not seq:
            local.append(f"{where}: sequence must hold at least one label")
        if not window > 0:
            local.append(f"{where}: window_seconds must be > 0")
        if registry is not None and label_sensors is not None:
            for label in seq:
                sensor = label_sensors.get(label)
                if sensor is None:
                    local.append(f"{where}: unknown label {label!r}")
                    continue
                names = registry.get(sensor).field_names
                for b in bind:
                    if b not in names:
                        local.append(f"{where}: bind field {b!r} missing from sensor {sensor!r}")
        errors.extend(local)
        if not local:
            seen.add(cid)
            out.append(ClusterDefinition(cid, seq, window, bind))
    if errors:
        raise RuleLoadError(errors)
    return out


def default_clusters_path() -> Path:
    return Path(__file__).parent / "data" / "clusters.json"


# -- building the labeled stream ------------------------------------------------


def build_stream(store: Store, labels: Sequence[str], matrices: Dict[str, np.ndarray],
                 fields: Sequence[str], keep: Optional[Iterable[str]] = None,
                 include_normal: bool = False) -> List[HuntRow]:
    """Merge labeled rows from every sensor into one time-sorted stream.

    ``matrices`` maps sensor -> (rows x labels) boolean array aligned with the
    store tables.  Only rows carrying a label in ``keep`` (default: any) are
    emitted unless ``include_normal``.
    """
    cols = list(range(len(labels))) if keep is None else [j for j, l in enumerate(labels) if l in set(keep)]
    rows: List[HuntRow] = []
    for sensor in sorted(matrices):
        table = store.tables[sensor]
        m = matrices[sensor]
        if include_normal:
            idx = np.arange(len(table))
        else:
            idx = np.flatnonzero(m[:, cols].any(axis=1)) if cols else np.zeros(0, dtype=np.int64)
        present = [f for f in fields if f in table.codes or f in table.numeric]
        decoded = {f: (table.decoded(f) if f in table.codes else table.numeric[f]) for f in present}
        ts = table.timestamps[idx].tolist()
        raw = table.raw_index[idx].tolist()
        hit = m[idx]
        for k, i in enumerate(idx.tolist()):
            labs = frozenset(labels[j] for j in np.flatnonzero(hit[k]))
            values = tuple(sorted((f, _text(decoded[f][i])) for f in present))
            rows.append(HuntRow(ts[k], sensor, raw[k], labs, values))
    rows.sort(key=lambda r: (r.ts, r.sensor_id, r.raw_index))
    return rows


def _text(v) -> Optional[str]:
    if v is None:
        return None
    if isinstance(v, float):
        if v != v:
            return None
        return str(int(v)) if v.is_integer() else repr(v)
    return str(v)


def prefilter(stream: Sequence[HuntRow], definitions: Sequence[ClusterDefinition]) -> List[HuntRow]:
    """Rows carrying at least one label used by some definition."""
    wanted = set()
    for d in definitions:
        wanted.update(d.sequence)
    return [r for r in stream if r.labels & wanted]


# -- streaming search -----------------------------------------------------------------


class _BindingState:
    __slots__ = ("levels", "block")

    def __init__(self, m: int):
        self.levels: List[Optional[Tuple[int, ...]]] = [None] * m   # level j -> positions of j+1 rows
        self.block = -np.inf


def search(stream: Sequence[HuntRow], definitions: Sequence[ClusterDefinition],
           partitions: int = 1) -> List[ClusterMatch]:
    """One-pass sequence matching; results sorted by (completion time, cluster_id, bind)."""
    if partitions > 1:
        out: List[ClusterMatch] = []
        for p in range(partitions):
            out.extend(_search(stream, definitions, (partitions, p)))
        return _ordered(out, stream)
    return _ordered(_search(stream, definitions, None), stream)


def _ordered(matches: List[ClusterMatch], stream) -> List[ClusterMatch]:
    return sorted(matches, key=lambda m: (m.span[1], m.cluster_id, m.bind, m.rows))


def _search(stream, definitions, part) -> List[ClusterMatch]:
    matches: List[ClusterMatch] = []
    states: List[Dict[tuple, _BindingState]] = [dict() for _ in definitions]
    ts = [r.ts for r in stream]
    for pos, row in enumerate(stream):
        if not row.labels:
            continue
        for d_i, d in enumerate(definitions):
            if not (row.labels & set(d.sequence)):
                continue
            bind = tuple(row.get(f) for f in d.bind)
            if any(v is None for v in bind):
                continue
            if part is not None and zlib.crc32(repr((d.cluster_id, bind)).encode()) % part[0] != part[1]:
                continue
            st = states[d_i].get(bind)
            if st is None:
                st = states[d_i][bind] = _BindingState(len(d.sequence))
            done = _step(d, st, pos, row, ts)
            if done is not None:
                matches.append(ClusterMatch(
                    d.cluster_id, tuple(stream[p].key for p in done),
                    tuple(zip(d.bind, bind)), (ts[done[0]], ts[done[-1]]), d.sequence))
    return matches


def _step(d: ClusterDefinition, st: _BindingState, pos: int, row: HuntRow, ts) -> Optional[Tuple[int, ...]]:
    seq = d.sequence
    m = len(seq)
    t = row.ts
    T = d.window_seconds
    old = list(st.levels)
    # drop partial matches that can no longer complete in time
    for j in range(m):
        if old[j] is not None and t - ts[old[j][0]] > T:
            old[j] = None
            st.levels[j] = None
    completed: Optional[Tuple[int, ...]] = None
    for j in range(m - 1, -1, -1):
        if seq[j] not in row.labels:
            continue
        if j == 0:
            cand = (pos,) if t >= st.block else None
        else:
            prev = old[j - 1]
            cand = prev + (pos,) if prev is not None else None
        if cand is None:
            continue
        if j == m - 1:
            if completed is None or cand > completed:
                completed = cand
        elif st.levels[j] is None or cand > st.levels[j]:
            st.levels[j] = cand
    if completed is not None:
        st.levels = [None] * m
        st.block = ts[completed[0]] + T
    return completed


# -- rank and expand ------------------------------------------------------------------------


@dataclass
class ThreatRanking:
    scores: Dict[str, float]
    ranked: List[Tuple[str, float]]
    seeds: List[str]
    depth: int
    subgraphs: Dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"ranked": [[ip, s] for ip, s in self.ranked], "seeds": self.seeds,
                "depth": self.depth, "subgraphs": self.subgraphs}


def threat_scores(store: Store, labels: Sequence[str], matrices: Dict[str, np.ndarray],
                  severity: Dict[str, float], ip_field: str = "src_ip") -> Dict[str, float]:
    """Per IP: sum over labeled rows of the severities of the fired labels."""
    w = np.array([float(severity.get(l, 0.0)) for l in labels])
    scores: Dict[str, float] = {}
    for sensor, m in matrices.items():
        table = store.tables[sensor]
        if ip_field not in table.codes:
            continue
        codes = table.codes[ip_field]
        row_score = m.astype(np.float64) @ w
        ok = codes >= 0
        sums = np.bincount(codes[ok], weights=row_score[ok], minlength=len(table.vocab[ip_field]))
        vocab = table.vocab[ip_field]
        for c in np.flatnonzero(np.bincount(codes[ok], minlength=len(vocab))):
            scores[vocab[c]] = scores.get(vocab[c], 0.0) + float(sums[c])
    return scores


def _adjacency(store: Store, sensors=("conn", "web", "netflow")) -> Dict[str, Set[str]]:
    adj: Dict[str, Set[str]] = {}
    for s in sensors:
        table = store.tables.get(s)
        if table is None or "src_ip" not in table.codes or "dst_ip" not in table.codes:
            continue
        a, b = table.codes["src_ip"], table.codes["dst_ip"]
        ok = (a >= 0) & (b >= 0)
        pairs = np.unique(np.stack([a[ok], b[ok]], axis=1), axis=0)
        va, vb = table.vocab["src_ip"], table.vocab["dst_ip"]
        for x, y in pairs.tolist():
            u, v = va[x], vb[y]
            adj.setdefault(u, set()).add(v)
            adj.setdefault(v, set()).add(u)
    return adj


def rank_and_expand(store: Store, labels: Sequence[str], matrices: Dict[str, np.ndarray],
                    severity: Dict[str, float], n: int = 5, depth: int = 2,
                    fanout: int = 10) -> ThreatRanking:
    """Top-``n`` IPs by weighted label score, each expanded breadth-first.

    At every hop the unvisited neighbours are re-ranked by score (ties by
    address) and at most ``fanout`` are kept.  ``depth`` is capped at 3.
    """
    if not 0 <= depth <= 3:
        raise ValueError("depth must be in [0, 3]")
    scores = threat_scores(store, labels, matrices, severity)
    adj = _adjacency(store)
    for ip in adj:
        scores.setdefault(ip, 0.0)
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    seeds = [ip for ip, _ in ranked[:n]]
    summary = _label_summary(store, labels, matrices)
    subgraphs = {}
    for seed in seeds:
        nodes = {seed: 0}
        edges = []
        frontier = [seed]
        for hop in range(1, depth + 1):
            nxt = []
            for u in frontier:
                cand = sorted((v for v in adj.get(u, ()) if v not in nodes),
                              key=lambda v: (-scores.get(v, 0.0), v))[:fanout]
                for v in cand:
                    if v not in nodes:
                        nodes[v] = hop
                        nxt.append(v)
                    edges.append([u, v])
            frontier = sorted(nxt, key=lambda v: (-scores.get(v, 0.0), v))
            if not frontier:
                break
        subgraphs[seed] = {
            "nodes": [{"ip": ip, "hop": h, "score": scores.get(ip, 0.0), "labels": summary.get(ip, {})}
                      for ip, h in sorted(nodes.items(), key=lambda kv: (kv[1], -scores.get(kv[0], 0.0), kv[0]))],
            "edges": edges,
        }
    return ThreatRanking(scores, ranked, seeds, depth, subgraphs)


def _label_summary(store: Store, labels, matrices) -> Dict[str, Dict[str, int]]:
    out: Dict[str, Dict[str, int]] = {}
    for sensor, m in matrices.items():
        table = store.tables[sensor]
        if "src_ip" not in table.codes:
            continue
        idx = np.flatnonzero(m.any(axis=1))
        ips = table.decoded("src_ip")[idx]
        for k, i in enumerate(idx.tolist()):
            if ips[k] is None:
                continue
            d = out.setdefault(ips[k], {})
            for j in np.flatnonzero(m[i]):
                d[labels[j]] = d.get(labels[j], 0) + 1
    return out


def save_matches(matches: Sequence[ClusterMatch], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in matches:
            fh.write(json.dumps(m.to_dict(), sort_keys=True) + "\n")


def load_matches(path) -> List[ClusterMatch]:
    return [ClusterMatch.from_dict(json.loads(line))
            for line in Path(path).read_text().splitlines() if line.strip()]
