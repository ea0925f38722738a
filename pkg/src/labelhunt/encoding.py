"""Row encoders: per-field numeric encodings plus per-entity context aggregates.

Context aggregates are declared on the sensor schema (``context`` list)::

    {"name": "user_fail_300s_before", "agg": "count", "entity": ["user"],
     "where": {...}, "seconds": 300, "direction": "before"}
    {"name": "src_distinct_dport_100r", "agg": "distinct", "entity": ["src_ip"],
     "field": "dst_port", "rows": 100}
    {"name": "tls_pair_freq", "agg": "group_frequency", "group": ["dst_ip"],
     "fields": ["tls_version", "cipher"]}

``before`` windows cover (t - seconds, t], ``after`` windows (t, t + seconds].
``distinct`` counts distinct values over the entity's trailing ``rows`` rows,
current row included.  ``group_frequency`` is the relative frequency of the
row's field tuple within its group, fit on training rows (unseen -> 0).
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .log_store import FieldKind, SensorSchema, SensorTable
from .predicates import compile_row_predicate

ENCODER_VERSION = 1
ONE_HOT_MAX = 16      # fields with at most this many training values also get indicator columns


# -- vectorized aggregates --------------------------------------------------


def count_le(data_e: np.ndarray, data_t: np.ndarray, q_e: np.ndarray, q_t: np.ndarray,
             strict: bool = False) -> np.ndarray:
    """For each query, the number of data points with the same entity and t <= q_t.

    With ``strict`` the comparison is t < q_t.
    """
    nd, nq = len(data_e), len(q_e)
    if nq == 0:
        return np.zeros(0, dtype=np.int64)
    if nd == 0:
        return np.zeros(nq, dtype=np.int64)
    e = np.concatenate([data_e, q_e])
    t = np.concatenate([data_t, q_t])
    # data sorts before queries at equal (e, t) for <=, after them for <
    flag = np.concatenate([np.zeros(nd, np.int8), np.ones(nq, np.int8)])
    if strict:
        flag = 1 - flag
    order = np.lexsort((flag, t, e))
    is_data = np.zeros(nd + nq, dtype=np.int64)
    is_data[:nd] = 1
    cum = np.cumsum(is_data[order])
    pos = np.empty(nd + nq, dtype=np.int64)
    pos[order] = np.arange(nd + nq)
    q_pos = pos[nd:]
    before_q = cum[q_pos] - is_data[order][q_pos]
    sorted_e = np.sort(data_e)
    smaller = np.searchsorted(sorted_e, q_e, side="left")
    return before_q - smaller


def count_in_time_window(entity: np.ndarray, times: np.ndarray, mask: np.ndarray,
                         seconds: float, direction: str = "before") -> np.ndarray:
    """Per row: masked rows of the same entity in the row's time window."""
    de, dt = entity[mask], times[mask]
    if direction == "before":
        return count_le(de, dt, entity, times) - count_le(de, dt, entity, times - seconds)
    if direction == "after":
        return count_le(de, dt, entity, times + seconds) - count_le(de, dt, entity, times)
    raise ValueError(f"direction must be 'before' or 'after', got {direction!r}")


def distinct_in_trailing_rows(entity: np.ndarray, values: np.ndarray, rows: int,
                              mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Per row: distinct ``values`` over the entity's last ``rows`` masked rows.

    Rows are taken in their given order.  Unmasked rows get 0.
    """
    n = len(entity)
    out = np.zeros(n, dtype=np.int64)
    idx = np.arange(n) if mask is None else np.flatnonzero(mask)
    if len(idx) == 0:
        return out
    e = entity[idx]
    v = np.asarray(values)[idx]
    order = np.lexsort((np.arange(len(idx)), e))
    es, vs = e[order], v[order]
    m = len(order)
    seg_start = np.zeros(m, dtype=np.int64)
    new_seg = np.ones(m, dtype=bool)
    new_seg[1:] = es[1:] != es[:-1]
    starts = np.flatnonzero(new_seg)
    seg_start = starts[np.cumsum(new_seg) - 1]
    # previous position (in sorted order) holding the same (entity, value)
    _, vcode = np.unique(vs, return_inverse=True)
    o2 = np.lexsort((np.arange(m), vcode, es))
    prev = np.full(m, -1, dtype=np.int64)
    same = (es[o2][1:] == es[o2][:-1]) & (vcode[o2][1:] == vcode[o2][:-1])
    prev[o2[1:][same]] = o2[:-1][same]
    pos = np.arange(m)
    lo = np.maximum(seg_start, pos - rows + 1)
    dup = np.zeros(m, dtype=np.int64)
    for d in range(min(rows, m)):
        j = pos - d
        ok = j >= lo
        jj = np.where(ok, j, 0)
        dup += ok & (prev[jj] >= lo)
    distinct = (pos - lo + 1) - dup
    res = np.empty(m, dtype=np.int64)
    res[order] = distinct
    out[idx] = res
    return out


# -- encoders ---------------------------------------------------------------


def _is_internal(ip: Optional[str]) -> float:
    if ip is None:
        return 0.0
    try:
        return float(ipaddress.ip_address(ip).is_private)
    except ValueError:
        return 0.0


@dataclass
class FrequencyRank:
    """Value -> frequency rank encoding; most frequent -> 1, unseen -> 0."""

    ranks: Dict[str, float] = field(default_factory=dict)
    freqs: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def fit(cls, values: Sequence[Optional[str]]) -> "FrequencyRank":
        counts: Dict[str, int] = {}
        for v in values:
            if v is not None:
                counts[v] = counts.get(v, 0) + 1
        total = sum(counts.values())
        ordered = sorted(counts, key=lambda k: (-counts[k], k))
        n = len(ordered)
        ranks = {v: 1.0 - i / n for i, v in enumerate(ordered)}
        freqs = {v: counts[v] / total for v in ordered} if total else {}
        return cls(ranks, freqs)

    def table_lookup(self, vocab: Sequence[str], which: str = "rank") -> np.ndarray:
        """Array indexed by code (+1 slot for missing at the end)."""
        src = self.ranks if which == "rank" else self.freqs
        return np.array([src.get(v, 0.0) for v in vocab] + [0.0], dtype=np.float64)


def _count_codes(table: SensorTable, name: str, rows: np.ndarray) -> FrequencyRank:
    codes = table.codes[name][rows]
    codes = codes[codes >= 0]
    counts = np.bincount(codes, minlength=len(table.vocab[name]))
    vocab = table.vocab[name]
    total = int(counts.sum())
    seen = [(vocab[c], int(counts[c])) for c in np.flatnonzero(counts)]
    seen.sort(key=lambda kv: (-kv[1], kv[0]))
    n = len(seen)
    ranks = {v: 1.0 - i / n for i, (v, _) in enumerate(seen)}
    freqs = {v: c / total for v, c in seen} if total else {}
    return FrequencyRank(ranks, freqs)


def _string_tuples(table: SensorTable, names: Sequence[str]) -> Tuple[np.ndarray, List[tuple]]:
    """(per-row combo id, list of value tuples per combo id)."""
    if not len(table):
        return np.zeros(0, dtype=np.int64), []
    cols = [table.codes[n].astype(np.int64) for n in names]
    stacked = np.stack(cols, axis=1)
    uniq, inv = np.unique(stacked, axis=0, return_inverse=True)
    tuples = []
    for row in uniq:
        tuples.append(tuple(None if c < 0 else table.vocab[n][c] for n, c in zip(names, row)))
    return inv.reshape(-1), tuples


@dataclass
class GroupFrequency:
    """Relative frequency of a field tuple within its group, from training rows."""

    group: Tuple[str, ...]
    fields: Tuple[str, ...]
    table: Dict[tuple, Dict[tuple, float]] = field(default_factory=dict)

    @classmethod
    def fit(cls, table: SensorTable, rows: np.ndarray, group: Sequence[str],
            fields: Sequence[str]) -> "GroupFrequency":
        sub = table.subset(rows)
        names = list(group) + list(fields)
        combo, tuples = _string_tuples(sub, names)
        counts = np.bincount(combo, minlength=len(tuples)) if len(tuples) else np.zeros(0)
        freq: Dict[tuple, Dict[tuple, float]] = {}
        totals: Dict[tuple, int] = {}
        ng = len(group)
        for tup, c in zip(tuples, counts):
            g, f = tup[:ng], tup[ng:]
            freq.setdefault(g, {})[f] = int(c)
            totals[g] = totals.get(g, 0) + int(c)
        for g, inner in freq.items():
            for f in inner:
                inner[f] = inner[f] / totals[g]
        return cls(tuple(group), tuple(fields), freq)

    def lookup(self, key_group: tuple, key_fields: tuple) -> Tuple[float, bool]:
        """(frequency, group_seen)."""
        inner = self.table.get(key_group)
        if inner is None:
            return 0.0, False
        return inner.get(key_fields, 0.0), True

    def transform(self, table: SensorTable) -> Tuple[np.ndarray, np.ndarray]:
        """Per-row (frequency, group_seen) arrays."""
        names = list(self.group) + list(self.fields)
        combo, tuples = _string_tuples(table, names)
        ng = len(self.group)
        f_per = np.zeros(len(tuples))
        seen_per = np.zeros(len(tuples), dtype=bool)
        for k, tup in enumerate(tuples):
            f_per[k], seen_per[k] = self.lookup(tup[:ng], tup[ng:])
        return f_per[combo], seen_per[combo]

    def to_dict(self) -> dict:
        return {
            "group": list(self.group),
            "fields": list(self.fields),
            "table": [[list(g), [[list(f), v] for f, v in inner.items()]]
                      for g, inner in self.table.items()],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GroupFrequency":
        table = {tuple(g): {tuple(f): v for f, v in inner} for g, inner in data["table"]}
        return cls(tuple(data["group"]), tuple(data["fields"]), table)


def compute_context(table: SensorTable, spec: dict,
                    fitted: Optional[GroupFrequency] = None) -> np.ndarray:
    """Raw (unscaled) values of one context aggregate for every row."""
    agg = spec["agg"]
    if agg == "group_frequency":
        if fitted is None:
            raise ValueError(f"context {spec['name']!r} must be fit before use")
        return fitted.transform(table)[0]
    entity = table.entity_codes(spec.get("entity", ()))
    where = compile_row_predicate(spec.get("where"), table.schema, f"context {spec['name']}")
    mask = where.mask(table)
    if agg == "count":
        return count_in_time_window(
            entity, table.timestamps, mask, float(spec["seconds"]), spec.get("direction", "before")
        ).astype(np.float64)
    if agg == "distinct":
        name = spec["field"]
        values = table.numeric[name] if name in table.numeric else table.codes[name]
        return distinct_in_trailing_rows(entity, values, int(spec["rows"]), mask).astype(np.float64)
    raise ValueError(f"unknown context aggregate {agg!r}")


class SensorEncoder:
    """Fit-on-training encoder turning a SensorTable into a float matrix."""

    def __init__(self, schema: SensorSchema):
        self.schema = schema
        self.numeric_stats: Dict[str, Tuple[float, float]] = {}
        self.categorical: Dict[str, FrequencyRank] = {}
        self.group_freq: Dict[str, GroupFrequency] = {}
        self.context_stats: Dict[str, Tuple[float, float]] = {}
        self.one_hot: Dict[str, List[Any]] = {}
        self.feature_names: List[str] = []
        self.fitted = False

    @property
    def width(self) -> int:
        return len(self.feature_names)

    def fit(self, table: SensorTable, rows: Optional[np.ndarray] = None) -> "SensorEncoder":
        if rows is None:
            rows = np.arange(len(table))
        names: List[str] = []
        for f in self.schema.value_fields:
            if f.kind == FieldKind.NUMERIC:
                x = _slog(table.numeric[f.name][rows])
                x = x[~np.isnan(x)]
                mu = float(x.mean()) if len(x) else 0.0
                sd = float(x.std()) if len(x) else 1.0
                self.numeric_stats[f.name] = (mu, sd if sd > 1e-9 else 1.0)
                names.append(f.name)
                raw = table.numeric[f.name][rows]
                vals = np.unique(raw[~np.isnan(raw)])
                if 1 < len(vals) <= ONE_HOT_MAX and np.all(vals == np.round(vals)):
                    self.one_hot[f.name] = [float(v) for v in vals]
            elif f.kind == FieldKind.PORT:
                names.append(f.name)
            else:
                self.categorical[f.name] = _count_codes(table, f.name, rows)
                names.extend([f"{f.name}:rank", f"{f.name}:freq"])
                if f.kind == FieldKind.IP_ADDRESS:
                    names.append(f"{f.name}:internal")
                elif 1 < len(self.categorical[f.name].ranks) <= ONE_HOT_MAX:
                    self.one_hot[f.name] = sorted(self.categorical[f.name].ranks)
            names.extend(f"{f.name}={v:g}" if isinstance(v, float) else f"{f.name}={v}"
                         for v in self.one_hot.get(f.name, ()))
        for spec in self.schema.context:
            if spec["agg"] == "group_frequency":
                self.group_freq[spec["name"]] = GroupFrequency.fit(
                    table, rows, spec["group"], spec["fields"]
                )
                names.append(spec["name"])
            else:
                # counts get a log column and a linear column standardized on training rows
                raw = compute_context(table, spec)[rows]
                sd = float(raw.std()) if len(raw) else 1.0
                self.context_stats[spec["name"]] = (float(raw.mean()) if len(raw) else 0.0,
                                                    sd if sd > 1e-9 else 1.0)
                names.extend([spec["name"], f"{spec['name']}:lin"])
        self.feature_names = names
        self.fitted = True
        return self

    def context_columns(self, table: SensorTable) -> Dict[str, np.ndarray]:
        return {
            spec["name"]: compute_context(table, spec, self.group_freq.get(spec["name"]))
            for spec in self.schema.context
        }

    def transform(self, table: SensorTable, context: Optional[Dict[str, np.ndarray]] = None) -> np.ndarray:
        if not self.fitted:
            raise RuntimeError("encoder not fitted")
        n = len(table)
        cols: List[np.ndarray] = []
        for f in self.schema.value_fields:
            if f.kind == FieldKind.NUMERIC:
                mu, sd = self.numeric_stats[f.name]
                cols.append(np.nan_to_num((_slog(table.numeric[f.name]) - mu) / sd))
                raw = table.numeric[f.name]
                cols.extend((raw == v).astype(np.float64) for v in self.one_hot.get(f.name, ()))
            elif f.kind == FieldKind.PORT:
                cols.append(np.nan_to_num(table.numeric[f.name] / 65535.0))
            else:
                enc = self.categorical[f.name]
                codes = table.codes[f.name]
                vocab = table.vocab[f.name]
                cols.append(enc.table_lookup(vocab, "rank")[codes])
                cols.append(enc.table_lookup(vocab, "freq")[codes])
                if f.kind == FieldKind.IP_ADDRESS:
                    flags = np.array([_is_internal(v) for v in vocab] + [0.0])
                    cols.append(flags[codes])
                for v in self.one_hot.get(f.name, ()):
                    cols.append(np.array([u == v for u in vocab] + [False], dtype=np.float64)[codes])
        if context is None:
            context = self.context_columns(table)
        for spec in self.schema.context:
            raw = context[spec["name"]]
            if spec["agg"] == "group_frequency":
                cols.append(raw)
            else:
                mu, sd = self.context_stats[spec["name"]]
                cols.append(np.log1p(raw))
                cols.append((raw - mu) / sd)
        if not cols:
            return np.zeros((n, 0))
        return np.stack(cols, axis=1).astype(np.float64)

    def to_dict(self) -> dict:
        return {
            "version": ENCODER_VERSION,
            "schema": self.schema.to_dict(),
            "numeric_stats": {k: list(v) for k, v in self.numeric_stats.items()},
            "categorical": {k: {"ranks": v.ranks, "freqs": v.freqs} for k, v in self.categorical.items()},
            "group_freq": {k: v.to_dict() for k, v in self.group_freq.items()},
            "context_stats": {k: list(v) for k, v in self.context_stats.items()},
            "one_hot": self.one_hot,
            "feature_names": self.feature_names,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SensorEncoder":
        enc = cls(SensorSchema.from_dict(data["schema"]))
        enc.numeric_stats = {k: tuple(v) for k, v in data["numeric_stats"].items()}
        enc.categorical = {k: FrequencyRank(v["ranks"], v["freqs"]) for k, v in data["categorical"].items()}
        enc.group_freq = {k: GroupFrequency.from_dict(v) for k, v in data["group_freq"].items()}
        enc.context_stats = {k: tuple(v) for k, v in data.get("context_stats", {}).items()}
        enc.one_hot = {k: list(v) for k, v in data.get("one_hot", {}).items()}
        enc.feature_names = list(data["feature_names"])
        enc.fitted = True
        return enc


def _slog(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.log1p(np.abs(x))


def raw_numeric_matrix(table: SensorTable) -> np.ndarray:
    """Unfitted fallback view: numeric and port columns as-is, NaN -> 0."""
    cols = [np.nan_to_num(table.numeric[f.name]) for f in table.schema.value_fields if f.numeric]
    if not cols:
        return np.zeros((len(table), 0))
    return np.stack(cols, axis=1)
