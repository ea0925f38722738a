"""Brute-force reference implementations used by the tests.

Each oracle re-derives its answer from the raw rule/definition JSON and
plain Python row dicts, sharing no evaluation code with the package.
"""

from __future__ import annotations

import bisect
import itertools
import math
from collections import Counter, defaultdict
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np


# -- rows ---------------------------------------------------------------------------


def table_rows(table) -> List[Dict[str, Any]]:
    """Plain dicts of every row of a SensorTable (stream order), with ``_ts`` added."""
    out = []
    for i in range(len(table)):
        rec = dict(table.values(i))
        rec["_ts"] = float(table.timestamps[i])
        out.append(rec)
    return out


def _missing(v) -> bool:
    return v is None or (isinstance(v, float) and math.isnan(v))


# -- row predicates -------------------------------------------------------------------


def row_pred(tree, rec: Dict[str, Any], numeric: set) -> bool:
    if not tree:
        return True
    if "all" in tree:
        return all(row_pred(t, rec, numeric) for t in tree["all"])
    if "any" in tree:
        return any(row_pred(t, rec, numeric) for t in tree["any"])
    if "not" in tree:
        return not row_pred(tree["not"], rec, numeric)
    field, op, value = tree["field"], tree["op"], tree.get("value")
    v = rec.get(field)
    if op == "exists":
        return not _missing(v)
    if op == "missing":
        return _missing(v)
    if _missing(v):
        return False
    if field in numeric:
        v = float(v)
        cast = float
    else:
        v = str(v)
        cast = str
    if op in ("in", "not_in"):
        hit = v in {cast(x) for x in value}
        return hit if op == "in" else not hit
    r = cast(value)
    return {"<": v < r if field in numeric else False, "<=": v <= r if field in numeric else False,
            ">": v > r if field in numeric else False, ">=": v >= r if field in numeric else False,
            "==": v == r, "!=": v != r}[op]


def _holds(op: str, n: float, value: float) -> bool:
    return {"<": n < value, "<=": n <= value, ">": n > value, ">=": n >= value,
            "==": n == value, "!=": n != value}[op]


def window_pred(tree, rows: Sequence[dict], current: dict, after: Sequence[dict], numeric: set) -> bool:
    """Evaluate a window predicate over ``rows`` (window), ``current`` and lookahead rows ``after``."""
    if "all" in tree:
        return all(window_pred(t, rows, current, after, numeric) for t in tree["all"])
    if "any" in tree:
        return any(window_pred(t, rows, current, after, numeric) for t in tree["any"])
    if "not" in tree:
        return not window_pred(tree["not"], rows, current, after, numeric)
    if "count" in tree:
        n = sum(row_pred(tree["count"], r, numeric) for r in rows)
        return _holds(tree.get("op", ">"), n, float(tree.get("value", 0)))
    if "distinct" in tree:
        f = tree["distinct"]
        vals = {r.get(f) for r in rows if row_pred(tree.get("where"), r, numeric) and not _missing(r.get(f))}
        return _holds(tree.get("op", ">"), len(vals), float(tree.get("value", 0)))
    if "absent" in tree:
        return not any(row_pred(tree["absent"], r, numeric) for r in rows)
    if "absent_after" in tree:
        return not any(row_pred(tree["absent_after"], r, numeric) for r in after)
    if "row" in tree:
        return row_pred(tree["row"], current, numeric)
    raise ValueError(f"unknown window term {tree}")


# -- labeling -------------------------------------------------------------------------


def _numeric_fields(schema) -> set:
    return {f.name for f in schema.fields if f.kind.value in ("numeric", "port", "timestamp")}


def brute_rule(spec: dict, rows: List[dict], schema, baselines: Dict[str, dict],
               train_range: Optional[Tuple[float, float]] = None) -> np.ndarray:
    """Fire mask of one rule (JSON spec) over a sensor's rows in stream order."""
    numeric = _numeric_fields(schema)
    n = len(rows)
    out = np.zeros(n, dtype=bool)
    kind = spec["kind"]
    if kind == "single_row":
        for i, r in enumerate(rows):
            out[i] = row_pred(spec["predicate"], r, numeric)
        return out
    if kind == "statistical":
        b = baselines[spec["baseline"]]
        counts: Dict[tuple, Counter] = defaultdict(Counter)
        for r in rows:
            if train_range is None or train_range[0] <= r["_ts"] < train_range[1]:
                g = tuple(r.get(x) for x in b["group"])
                counts[g][tuple(r.get(x) for x in b["fields"])] += 1
        for i, r in enumerate(rows):
            g = tuple(r.get(x) for x in b["group"])
            if g not in counts:
                out[i] = b.get("unseen_group", "fire") == "fire"
                continue
            total = sum(counts[g].values())
            freq = counts[g][tuple(r.get(x) for x in b["fields"])] / total
            out[i] = freq < b["threshold"]
        return out
    ent = spec.get("entity", [])
    groups: Dict[tuple, List[int]] = defaultdict(list)
    for i, r in enumerate(rows):
        groups[tuple(r.get(x) for x in ent) if ent else (i,)].append(i)
    if kind == "fixed_window":
        k = spec["rows"]
        for idx in groups.values():
            for p, i in enumerate(idx):
                if p + 1 < k and not spec.get("partial", False):
                    continue
                block = [rows[j] for j in idx[max(0, p + 1 - k):p + 1]]
                out[i] = window_pred(spec["predicate"], block, rows[i], [], numeric)
        return out
    # rolling time window
    w = float(spec["seconds"])
    for idx in groups.values():
        times = [rows[j]["_ts"] for j in idx]
        for p, i in enumerate(idx):
            cur = rows[i]
            if not row_pred(spec.get("at"), cur, numeric):
                continue
            t = cur["_ts"]
            lo = bisect.bisect_right(times, t - w)
            hi = bisect.bisect_right(times, t + w)
            window = [rows[j] for j in idx[lo:p + 1]]
            after = [rows[j] for j in idx[p + 1:hi]]
            out[i] = window_pred(spec["predicate"], window, cur, after, numeric)
    return out


def brute_label(store, ruleset_doc: dict, train_range=None) -> Dict[str, np.ndarray]:
    """sensor -> (rows x labels) bool matrix, label order as in the ruleset file."""
    labels = [r["label"] for r in ruleset_doc["rules"]]
    baselines = {b["id"]: b for b in ruleset_doc.get("baselines", [])}
    out = {}
    cache = {}
    for s, table in store.tables.items():
        out[s] = np.zeros((len(table), len(labels)), dtype=bool)
    for j, spec in enumerate(ruleset_doc["rules"]):
        s = spec["sensor"]
        if s not in store.tables:
            continue
        if s not in cache:
            cache[s] = table_rows(store.tables[s])
        out[s][:, j] = brute_rule(spec, cache[s], store.tables[s].schema, baselines, train_range)
    return out


# -- cluster hunting --------------------------------------------------------------------


def brute_matches(stream, definitions) -> List[tuple]:
    """Enumerate every valid row tuple per (definition, binding), then apply the reporting policy.

    Policy: report the valid tuple completing earliest, ties to the lexicographically
    latest; the next reported tuple must start after the completing row and no earlier
    than (previous start + window).
    """
    found = []
    for d in definitions:
        by_bind: Dict[tuple, List[int]] = defaultdict(list)
        for p, row in enumerate(stream):
            if not (row.labels & set(d.sequence)):
                continue
            vals = dict(row.values)
            b = tuple(vals.get(f) for f in d.bind)
            if any(v is None for v in b):
                continue
            by_bind[b].append(p)
        m = len(d.sequence)
        for b, pos in by_bind.items():
            cands = []
            for combo in itertools.combinations(pos, m):
                if all(d.sequence[k] in stream[combo[k]].labels for k in range(m)) and \
                        stream[combo[-1]].ts - stream[combo[0]].ts <= d.window_seconds:
                    cands.append(combo)
            last_end, block = -1, -math.inf
            while True:
                ok = [c for c in cands if c[0] > last_end and stream[c[0]].ts >= block]
                if not ok:
                    break
                end = min(c[-1] for c in ok)
                best = max(c for c in ok if c[-1] == end)
                found.append((d.cluster_id, tuple(stream[p].key for p in best), tuple(zip(d.bind, b))))
                last_end, block = best[-1], stream[best[0]].ts + d.window_seconds
    return sorted(found)


# -- dynamic graph --------------------------------------------------------------------


def brute_graph(events, ip: str, t: float, window: float, peer: Optional[str] = None) -> List[float]:
    """Node (out/in) and edge aggregates over events with t - window < ts <= t."""
    live = [e for e in events if t - window < e.ts <= t]

    def agg(sel, peer_of):
        if not sel:
            return [0.0] * 8
        b = [e.bytes for e in sel]
        k = [e.pkts for e in sel]
        return [float(len(sel)), float(sum(b)), float(max(b)), float(sum(b)) / len(sel),
                float(sum(k)), float(sum(k)) / len(sel), float(len({peer_of(e) for e in sel})),
                float(len({e.port for e in sel}))]

    out = agg([e for e in live if e.src == ip], lambda e: e.dst)
    inn = agg([e for e in live if e.dst == ip], lambda e: e.src)
    if peer is None:
        edge = [0.0] * 8
    else:
        sel = [e for e in live if e.src == ip and e.dst == peer]
        if sel:
            b = [e.bytes for e in sel]
            k = [e.pkts for e in sel]
            edge = [float(len(sel)), float(sum(b)), float(max(b)), float(sum(b)) / len(sel),
                    float(sum(k)), float(max(k)), float(sum(k)) / len(sel), float(len({e.port for e in sel}))]
        else:
            edge = [0.0] * 8
    return out + inn + edge


# -- windows ----------------------------------------------------------------------------


def reference_windows(n_rows: int, n: int) -> List[List[int]]:
    """Consecutive row blocks of length ``n`` (last one short)."""
    return [list(range(i, min(i + n, n_rows))) for i in range(0, n_rows, n)]
