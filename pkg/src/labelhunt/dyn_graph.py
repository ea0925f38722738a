"""Streaming communication graph with sliding-window aggregates.

Nodes are IP addresses and edges directed (src, dst) pairs.  Every node and
edge keeps its own deque of recent events, so each aggregate is exact over
the window (t - W, t].  Sums are running totals, maxima come from monotonic
deques and distinct counts from multiplicity counters.  Expiry happens
lazily on ingest; queries never mutate state and instead discount stale
events on the fly.
"""

from __future__ import annotations

import json
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import OutOfOrderError
from .log_store import Store

CATALOG_VERSION = 1
TOLERANCE = 1.0

_DIRECTIONAL = ("events", "bytes_total", "bytes_max", "bytes_mean", "pkts_total", "pkts_mean",
                "distinct_peers", "distinct_ports")
NODE_FEATURES: Tuple[str, ...] = tuple(f"node.{d}_{n}" for d in ("out", "in") for n in _DIRECTIONAL)
EDGE_FEATURES: Tuple[str, ...] = ("edge.events", "edge.bytes_total", "edge.bytes_max", "edge.bytes_mean",
                                  "edge.pkts_total", "edge.pkts_max", "edge.pkts_mean",
                                  "edge.distinct_ports")
CATALOG: Tuple[str, ...] = NODE_FEATURES + EDGE_FEATURES


@dataclass(frozen=True)
class GraphEvent:
    ts: float
    src: str
    dst: str
    port: int
    bytes: float
    pkts: float


@dataclass(frozen=True)
class ForgettingPolicy:
    window: float = 300.0
    grace: float = 60.0
    edge_cap: int = 10_000
    auto_evict: bool = True

    def __post_init__(self):
        if not self.window > 0:
            raise ValueError("window length W must be > 0")
        if self.grace < 0:
            raise ValueError("grace period must be >= 0")
        if self.edge_cap < 1:
            raise ValueError("edge cap must be >= 1")


class _MaxQueue:
    """Monotonic deque of (seq, ts, value) giving the max of a FIFO's live suffix."""

    __slots__ = ("q",)

    def __init__(self):
        self.q: deque = deque()

    def push(self, seq: int, ts: float, v: float) -> None:
        q = self.q
        while q and q[-1][2] <= v:
            q.pop()
        q.append((seq, ts, v))

    def drop_through(self, seq: int) -> None:
        q = self.q
        while q and q[0][0] <= seq:
            q.popleft()

    def max_after(self, cutoff: float) -> float:
        for _, ts, v in self.q:
            if ts > cutoff:
                return v
        return 0.0


class Accumulator:
    """Exact window aggregates over one time-ordered FIFO of (seq, ts, bytes, pkts, peer, port)."""

    __slots__ = ("events", "bytes", "pkts", "bmax", "pmax", "peers", "ports", "last", "dropped", "_seq")

    def __init__(self):
        self.events: deque = deque()
        self.bytes = 0.0
        self.pkts = 0.0
        self.bmax = _MaxQueue()
        self.pmax = _MaxQueue()
        self.peers: Counter = Counter()
        self.ports: Counter = Counter()
        self.last = -np.inf
        self.dropped = 0
        self._seq = 0

    def __len__(self) -> int:
        return len(self.events)

    def push(self, ev: GraphEvent, peer) -> None:
        self._seq += 1
        item = (self._seq, ev.ts, ev.bytes, ev.pkts, peer, ev.port)
        if self.events and ev.ts < self.events[-1][1]:
            # late event within tolerance: insert in time order, renumber, rebuild maxima
            pos = len(self.events)
            while pos > 0 and self.events[pos - 1][1] > ev.ts:
                pos -= 1
            self.events.insert(pos, item)
            self.events = deque((k, *e[1:]) for k, e in enumerate(self.events, 1))
            self._seq = len(self.events)
            self.bmax, self.pmax = _MaxQueue(), _MaxQueue()
            for e in self.events:
                self.bmax.push(e[0], e[1], e[2])
                self.pmax.push(e[0], e[1], e[3])
        else:
            self.events.append(item)
            self.bmax.push(self._seq, ev.ts, ev.bytes)
            self.pmax.push(self._seq, ev.ts, ev.pkts)
        self.bytes += ev.bytes
        self.pkts += ev.pkts
        self.peers[peer] += 1
        self.ports[ev.port] += 1
        self.last = max(self.last, ev.ts)

    def _pop(self) -> None:
        seq, ts, b, p, peer, port = self.events.popleft()
        self.bytes -= b
        self.pkts -= p
        _dec(self.peers, peer)
        _dec(self.ports, port)
        self.bmax.drop_through(seq)
        self.pmax.drop_through(seq)
        if not self.events:
            self.bytes = 0.0
            self.pkts = 0.0

    def expire(self, cutoff: float) -> int:
        n = 0
        while self.events and self.events[0][1] <= cutoff:
            self._pop()
            n += 1
        return n

    def cap(self, limit: int) -> int:
        n = 0
        while len(self.events) > limit:
            self._pop()
            n += 1
        self.dropped += n
        return n

    def stats(self, t: float, window: float) -> Tuple[int, float, float, float, float, int, int]:
        """(count, bytes total, bytes max, pkts total, pkts max, distinct peers, distinct ports) in (t-W, t]."""
        lo_cut = t - window
        ev = self.events
        size = len(ev)
        head = 0
        while head < size and ev[head][1] <= lo_cut:
            head += 1
        tail = 0
        while tail < size - head and ev[size - 1 - tail][1] > t:
            tail += 1
        n = size - head - tail
        if n <= 0:
            return 0, 0.0, 0.0, 0.0, 0.0, 0, 0
        if tail:
            live = [ev[i] for i in range(head, size - tail)]
            return (n, float(sum(e[2] for e in live)), float(max(e[2] for e in live)),
                    float(sum(e[3] for e in live)), float(max(e[3] for e in live)),
                    len({e[4] for e in live}), len({e[5] for e in live}))
        b, p = self.bytes, self.pkts
        dpeers, dports = len(self.peers), len(self.ports)
        if head:
            stale_peer: Counter = Counter()
            stale_port: Counter = Counter()
            for i in range(head):
                e = ev[i]
                b -= e[2]
                p -= e[3]
                stale_peer[e[4]] += 1
                stale_port[e[5]] += 1
            dpeers -= sum(1 for k, c in stale_peer.items() if self.peers[k] == c)
            dports -= sum(1 for k, c in stale_port.items() if self.ports[k] == c)
        return n, float(b), self.bmax.max_after(lo_cut), float(p), self.pmax.max_after(lo_cut), dpeers, dports


def _dec(c: Counter, k) -> None:
    v = c[k] - 1
    if v:
        c[k] = v
    else:
        del c[k]


@dataclass
class GraphNode:
    ip: str
    out: Accumulator = field(default_factory=Accumulator)
    inc: Accumulator = field(default_factory=Accumulator)

    @property
    def last_activity(self) -> float:
        return max(self.out.last, self.inc.last)


@dataclass
class GraphEdge:
    src: str
    dst: str
    acc: Accumulator = field(default_factory=Accumulator)

    @property
    def last_activity(self) -> float:
        return self.acc.last


@dataclass(frozen=True)
class FeatureSnapshot:
    t: float
    ip: str
    peer: Optional[str]
    values: Tuple[float, ...]
    capped: bool = False
    names: Tuple[str, ...] = CATALOG

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.names, self.values))

    def __getitem__(self, name: str) -> float:
        return self.values[self.names.index(name)]


@dataclass
class EvictionReport:
    nodes: int
    edges: int


class DynamicGraph:
    """Single-writer streaming graph; reads between ingests are side-effect free."""

    def __init__(self, policy: Optional[ForgettingPolicy] = None):
        self.policy = policy or ForgettingPolicy()
        self.nodes: Dict[str, GraphNode] = {}
        self.edges: Dict[Tuple[str, str], GraphEdge] = {}
        self.last_ts = -np.inf
        self.ingested = 0
        self._last_evict = -np.inf

    # -- writes --------------------------------------------------------------------

    def ingest_event(self, ev: GraphEvent) -> None:
        if ev.ts < self.last_ts - TOLERANCE:
            raise OutOfOrderError(f"event at {ev.ts} is more than {TOLERANCE}s before the latest ({self.last_ts})")
        self.last_ts = max(self.last_ts, ev.ts)
        w = self.policy.window
        cutoff = self.last_ts - w - TOLERANCE
        src = self.nodes.get(ev.src) or self.nodes.setdefault(ev.src, GraphNode(ev.src))
        src.out.expire(cutoff)
        src.out.push(ev, ev.dst)
        dst = self.nodes.get(ev.dst) or self.nodes.setdefault(ev.dst, GraphNode(ev.dst))
        dst.inc.expire(cutoff)
        dst.inc.push(ev, ev.src)
        key = (ev.src, ev.dst)
        edge = self.edges.get(key) or self.edges.setdefault(key, GraphEdge(ev.src, ev.dst))
        edge.acc.expire(cutoff)
        edge.acc.push(ev, ev.dst)
        edge.acc.cap(self.policy.edge_cap)
        self.ingested += 1
        # sweeping at least every G seconds keeps retained events inside (now - W - G, now]
        every = min(self.policy.grace, w / 4) if self.policy.grace > 0 else w / 4
        if self.policy.auto_evict and self.last_ts - self._last_evict > every:
            self.evict(self.last_ts)

    def ingest(self, events: Iterable[GraphEvent]) -> None:
        for ev in events:
            self.ingest_event(ev)

    def evict(self, now: float) -> EvictionReport:
        """Drop nodes and edges idle for longer than W + G, and expire old events."""
        limit = now - self.policy.window - self.policy.grace
        cutoff = now - self.policy.window - TOLERANCE
        gone_edges = [k for k, e in self.edges.items() if e.last_activity < limit]
        for k in gone_edges:
            del self.edges[k]
        gone_nodes = [k for k, n in self.nodes.items() if n.last_activity < limit]
        for k in gone_nodes:
            del self.nodes[k]
        for n in self.nodes.values():
            n.out.expire(cutoff)
            n.inc.expire(cutoff)
        for e in self.edges.values():
            e.acc.expire(cutoff)
        self._last_evict = now
        return EvictionReport(len(gone_nodes), len(gone_edges))

    # -- reads ---------------------------------------------------------------------

    def retained_events(self) -> int:
        return (sum(len(n.out) + len(n.inc) for n in self.nodes.values())
                + sum(len(e.acc) for e in self.edges.values()))

    def _check_time(self, t: float) -> None:
        if t < self.last_ts - TOLERANCE:
            raise OutOfOrderError(f"query at {t} is more than {TOLERANCE}s before the latest event ({self.last_ts})")

    def node_features(self, ip: str, t: float) -> Tuple[float, ...]:
        self._check_time(t)
        node = self.nodes.get(ip)
        if node is None:
            return (0.0,) * len(NODE_FEATURES)
        out: List[float] = []
        for acc in (node.out, node.inc):
            n, b, bmax, p, _, dpeer, dport = acc.stats(t, self.policy.window)
            out += [float(n), b, bmax, b / n if n else 0.0, p, p / n if n else 0.0, float(dpeer), float(dport)]
        return tuple(out)

    def edge_features(self, src: str, dst: str, t: float) -> Tuple[Tuple[float, ...], bool]:
        self._check_time(t)
        edge = self.edges.get((src, dst))
        if edge is None:
            return (0.0,) * len(EDGE_FEATURES), False
        n, b, bmax, p, pmax, _, dport = edge.acc.stats(t, self.policy.window)
        vals = (float(n), b, bmax, b / n if n else 0.0, p, pmax, p / n if n else 0.0, float(dport))
        return vals, edge.acc.dropped > 0

    def query_features(self, ip: str, t: float, peer: Optional[str] = None) -> FeatureSnapshot:
        """Node features of ``ip`` and, if ``peer`` is given, edge features of (ip, peer).

        Unknown addresses yield zeros.
        """
        node = self.node_features(ip, t)
        if peer is None:
            edge, capped = (0.0,) * len(EDGE_FEATURES), False
        else:
            edge, capped = self.edge_features(ip, peer, t)
        return FeatureSnapshot(float(t), ip, peer, node + edge, capped)


# -- stream adapters ------------------------------------------------------------------


def events_from_store(store: Store, sensor: str = "conn") -> Tuple[List[GraphEvent], np.ndarray]:
    """Graph events for every row of a flow sensor, plus their raw indices."""
    table = store.tables[sensor]
    names = {f.name for f in table.schema.fields}
    src = table.decoded("src_ip")
    dst = table.decoded("dst_ip")
    port = np.nan_to_num(table.numeric["dst_port"]).astype(np.int64)
    if "bytes" in names:
        nbytes = np.nan_to_num(table.numeric["bytes"])
    else:
        nbytes = np.nan_to_num(table.numeric.get("bytes_out", np.zeros(len(table)))) + \
            np.nan_to_num(table.numeric.get("bytes_in", np.zeros(len(table))))
    pk = "pkts" if "pkts" in names else "packets"
    pkts = np.nan_to_num(table.numeric[pk]) if pk in names else np.zeros(len(table))
    ts = table.timestamps
    events = [GraphEvent(float(ts[i]), str(src[i]), str(dst[i]), int(port[i]), float(nbytes[i]), float(pkts[i]))
              for i in range(len(table))]
    return events, table.raw_index.copy()


def row_features(events: Sequence[GraphEvent], policy: Optional[ForgettingPolicy] = None) -> np.ndarray:
    """Catalog features for each event, queried right after ingesting it (src node + edge)."""
    g = DynamicGraph(policy)
    out = np.zeros((len(events), len(CATALOG)))
    for i, ev in enumerate(events):
        g.ingest_event(ev)
        out[i] = g.query_features(ev.src, g.last_ts, ev.dst).values
    return out


def export_snapshots(path, sensor: str, raw_index: np.ndarray, features: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for raw, row in zip(raw_index.tolist(), features.tolist()):
            fh.write(json.dumps({"sensor_id": sensor, "raw_index": raw, "features": dict(zip(CATALOG, row))}) + "\n")


def catalog_path() -> Path:
    return Path(__file__).parent / "data" / "graph_features.json"


def load_catalog() -> dict:
    return json.loads(catalog_path().read_text())


def brute_force_features(events: Sequence[GraphEvent], ip: str, t: float, window: float,
                         peer: Optional[str] = None) -> Tuple[float, ...]:
    """Reference recomputation over the raw event list (used by the tests and the harness)."""
    live = [e for e in events if t - window < e.ts <= t]
    vals: List[float] = []
    for sel, peer_of in ((lambda e: e.src == ip, lambda e: e.dst), (lambda e: e.dst == ip, lambda e: e.src)):
        es = [e for e in live if sel(e)]
        n = len(es)
        b = float(sum(e.bytes for e in es))
        p = float(sum(e.pkts for e in es))
        vals += [float(n), b, max((e.bytes for e in es), default=0.0), b / n if n else 0.0,
                 p, p / n if n else 0.0, float(len({peer_of(e) for e in es})), float(len({e.port for e in es}))]
    es = [e for e in live if peer is not None and e.src == ip and e.dst == peer]
    n = len(es)
    b = float(sum(e.bytes for e in es))
    p = float(sum(e.pkts for e in es))
    vals += [float(n), b, max((e.bytes for e in es), default=0.0), b / n if n else 0.0,
             p, max((e.pkts for e in es), default=0.0), p / n if n else 0.0, float(len({e.port for e in es}))]
    return tuple(vals)
