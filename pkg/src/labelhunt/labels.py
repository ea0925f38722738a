"""Elemental labeling rules and the engine that applies them to a store.

Ruleset file (``"version": 1``)::

    {"version": 1,
     "baselines": [{"id": "...", "sensor": "web", "group": ["dst_ip"],
                    "fields": ["tls_version", "cipher"], "threshold": 0.05,
                    "unseen_group": "fire" | "skip"}],
     "rules": [
       {"label": "...", "sensor": "auth", "severity": 3, "kind": "single_row",
        "predicate": <row predicate>},
       {"label": "...", "kind": "fixed_window", "rows": 100, "entity": ["src_ip"],
        "partial": false, "predicate": <window predicate>},
       {"label": "...", "kind": "rolling_time_window", "seconds": 300,
        "entity": ["user"], "at": <row predicate>, "predicate": <window predicate>},
       {"label": "...", "kind": "statistical", "baseline": "<baseline id>"}]}

Row predicates are described in ``predicates``.  A window predicate combines
terms with ``all`` / ``any`` / ``not``:

    {"count": <row pred>, "op": ">=", "value": 10}     rows matching in window
    {"distinct": "dst_port", "where": <row pred>, "op": ">=", "value": 40}
    {"absent": <row pred>}                              no matching row in window
    {"absent_after": <row pred>}                        none in (t, t + seconds]
    {"row": <row pred>}                                 test the current row

Comparisons default to strict ``>`` when ``op`` is omitted.

Window scopes.  A fixed window is the entity's trailing ``rows`` rows ending
at the current row; blocks shorter than ``rows`` (stream head) are evaluated
only with ``"partial": true``.  A rolling window for row i covers the
entity's rows j <= i (stream order) with t_j > t_i - seconds; ``absent_after``
looks at the entity's rows after i with t_j <= t_i + seconds.  Rolling rules
are evaluated at rows satisfying ``at`` (default: every row).  Firing is
attributed to the row the window ends at.
"""

from __future__ import annotations

import json
from collections import Counter, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .encoding import GroupFrequency
from .errors import RuleLoadError, UnknownSensorError
from .log_store import SchemaRegistry, SensorTable, Store
from .predicates import ALL_OPS, ORDER_OPS, EQUALITY_OPS, RowPredicate, compare, compare_array, compile_row_predicate

RULESET_VERSION = 1
KINDS = ("single_row", "fixed_window", "rolling_time_window", "statistical")
FIXED_ROWS_RANGE = (2, 1000)
EXPENSIVE_SECONDS = 3600.0
_COUNT_OPS = ORDER_OPS | EQUALITY_OPS


# -- window predicate compilation ---------------------------------------------


@dataclass(frozen=True)
class Term:
    kind: str                     # count | distinct | absent | absent_after | row
    pred: RowPredicate
    op: str = ">"
    value: float = 0.0
    field: Optional[str] = None   # distinct only

    def holds(self, n: float) -> bool:
        return compare(self.op, n, self.value)


@dataclass(frozen=True)
class WindowPredicate:
    tree: Any                     # ("all"|"any", [...]) | ("not", x) | ("term", i)
    terms: Tuple[Term, ...]

    def evaluate(self, values: Sequence[Any]) -> Any:
        """Evaluate the tree given one value per term (bools or bool arrays)."""
        return _eval_tree(self.tree, values)

    @property
    def has_lookahead(self) -> bool:
        return any(t.kind == "absent_after" for t in self.terms)


def _eval_tree(node, values):
    tag = node[0]
    if tag == "term":
        return values[node[1]]
    if tag == "not":
        v = _eval_tree(node[1], values)
        return ~v if isinstance(v, np.ndarray) else not v
    parts = [_eval_tree(sub, values) for sub in node[1]]
    if tag == "all":
        out = True
        for p in parts:
            out = out & p
        return out
    out = False
    for p in parts:
        out = out | p
    return out


def compile_window_predicate(tree: Any, schema, where: str, errors: List[str],
                             allow_lookahead: bool) -> Optional[WindowPredicate]:
    terms: List[Term] = []

    def pred(sub, path):
        try:
            return compile_row_predicate(sub, schema, path)
        except RuleLoadError as exc:
            errors.extend(exc.problems)
            return None

    def threshold(node, path):
        op = node.get("op", ">")
        if op not in _COUNT_OPS:
            errors.append(f"{path}: unknown comparison {op!r}")
            return None
        try:
            return op, float(node.get("value", 0))
        except (TypeError, ValueError):
            errors.append(f"{path}: threshold {node.get('value')!r} is not numeric")
            return None

    def walk(node, path):
        if not isinstance(node, dict) or not node:
            errors.append(f"{path}: window predicate must be a non-empty object")
            return None
        for key in ("all", "any"):
            if key in node:
                subs = [walk(s, f"{path}.{key}[{i}]") for i, s in enumerate(node[key])]
                if not subs:
                    errors.append(f"{path}.{key}: empty list")
                return (key, subs)
        if "not" in node:
            return ("not", walk(node["not"], f"{path}.not"))
        if "count" in node:
            p, th = pred(node["count"], f"{path}.count"), threshold(node, path)
            if p is None or th is None:
                return None
            terms.append(Term("count", p, th[0], th[1]))
        elif "distinct" in node:
            name = node["distinct"]
            if name not in schema.field_names:
                errors.append(f"{path}: distinct field {name!r} not in schema {schema.sensor_id!r}")
                return None
            p, th = pred(node.get("where"), f"{path}.where"), threshold(node, path)
            if p is None or th is None:
                return None
            terms.append(Term("distinct", p, th[0], th[1], field=name))
        elif "absent" in node:
            p = pred(node["absent"], f"{path}.absent")
            if p is None:
                return None
            terms.append(Term("absent", p, "==", 0.0))
        elif "absent_after" in node:
            if not allow_lookahead:
                errors.append(f"{path}: absent_after is only valid in rolling_time_window rules")
                return None
            p = pred(node["absent_after"], f"{path}.absent_after")
            if p is None:
                return None
            terms.append(Term("absent_after", p, "==", 0.0))
        elif "row" in node:
            p = pred(node["row"], f"{path}.row")
            if p is None:
                return None
            terms.append(Term("row", p))
        else:
            errors.append(f"{path}: unrecognised window predicate keys {sorted(node)}")
            return None
        return ("term", len(terms) - 1)

    root = walk(tree, where)
    if root is None or errors:
        return None
    return WindowPredicate(root, tuple(terms))


# -- rules and rulesets ---------------------------------------------------------


@dataclass
class StatisticalBaseline:
    """Per-group relative frequencies of a field tuple, fit on training rows."""

    baseline_id: str
    sensor: str
    group: Tuple[str, ...]
    fields: Tuple[str, ...]
    threshold: float
    unseen_group: str = "fire"
    frequencies: Optional[GroupFrequency] = None

    @property
    def fitted(self) -> bool:
        return self.frequencies is not None

    def frequency(self, group_key: tuple, field_key: tuple) -> Tuple[float, bool]:
        if self.frequencies is None:
            raise RuntimeError(f"baseline {self.baseline_id!r} not fitted")
        return self.frequencies.lookup(tuple(group_key), tuple(field_key))

    def to_dict(self) -> dict:
        out = {
            "id": self.baseline_id, "sensor": self.sensor, "group": list(self.group),
            "fields": list(self.fields), "threshold": self.threshold,
            "unseen_group": self.unseen_group,
        }
        if self.frequencies is not None:
            out["table"] = self.frequencies.to_dict()["table"]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "StatisticalBaseline":
        base = cls(data["id"], data["sensor"], tuple(data["group"]), tuple(data["fields"]),
                   float(data["threshold"]), data.get("unseen_group", "fire"))
        if "table" in data:
            base.frequencies = GroupFrequency.from_dict(
                {"group": data["group"], "fields": data["fields"], "table": data["table"]})
        return base


@dataclass
class ElementalRule:
    label: str
    sensor: str
    severity: int
    kind: str
    predicate: Any = None              # RowPredicate (single_row) or WindowPredicate
    rows: int = 0
    seconds: float = 0.0
    entity: Tuple[str, ...] = ()
    at: Optional[RowPredicate] = None
    partial: bool = False
    baseline_id: Optional[str] = None
    expensive: bool = False
    spec: dict = field(default_factory=dict)


@dataclass
class Ruleset:
    rules: List[ElementalRule]
    baselines: Dict[str, StatisticalBaseline]
    version: int = RULESET_VERSION

    @property
    def labels(self) -> List[str]:
        return [r.label for r in self.rules]

    @property
    def severity(self) -> Dict[str, int]:
        return {r.label: r.severity for r in self.rules}

    def labels_of(self, sensor: str) -> List[str]:
        return [r.label for r in self.rules if r.sensor == sensor]

    def sensor_of(self, label: str) -> str:
        for r in self.rules:
            if r.label == label:
                return r.sensor
        raise KeyError(label)


def _compile_rule(spec: dict, registry: SchemaRegistry, baselines: Dict[str, dict],
                  where: str, errors: List[str]) -> Optional[ElementalRule]:
    label = spec.get("label")
    if not label:
        errors.append(f"{where}: missing label")
        return None
    where = f"{where} ({label})"
    sensor = spec.get("sensor")
    kind = spec.get("kind")
    if kind not in KINDS:
        errors.append(f"{where}: unknown kind {kind!r}")
        return None
    if kind == "statistical":
        bid = spec.get("baseline")
        if bid not in baselines:
            errors.append(f"{where}: unknown baseline {bid!r}")
            return None
        sensor = sensor or baselines[bid]["sensor"]
    if sensor not in registry:
        errors.append(f"{where}: sensor {sensor!r} has no registered schema")
        return None
    schema = registry.get(sensor)
    try:
        severity = int(spec.get("severity", 1))
    except (TypeError, ValueError):
        errors.append(f"{where}: severity must be an integer")
        return None
    rule = ElementalRule(label=label, sensor=sensor, severity=severity, kind=kind, spec=dict(spec))
    local: List[str] = []
    entity = tuple(spec.get("entity", ()))
    for name in entity:
        if name not in schema.field_names:
            local.append(f"{where}: entity field {name!r} not in schema {sensor!r}")
    rule.entity = entity
    if kind == "single_row":
        try:
            rule.predicate = compile_row_predicate(spec.get("predicate"), schema, f"{where}.predicate")
        except RuleLoadError as exc:
            local.extend(exc.problems)
    elif kind == "fixed_window":
        rows = spec.get("rows")
        if not isinstance(rows, int) or not FIXED_ROWS_RANGE[0] <= rows <= FIXED_ROWS_RANGE[1]:
            local.append(f"{where}: rows must be an integer in [2, 1000], got {rows!r}")
        else:
            rule.rows = rows
        rule.partial = bool(spec.get("partial", False))
        rule.predicate = compile_window_predicate(spec.get("predicate"), schema,
                                                  f"{where}.predicate", local, False)
    elif kind == "rolling_time_window":
        try:
            seconds = float(spec.get("seconds", 0))
        except (TypeError, ValueError):
            seconds = 0.0
        if not seconds > 0:
            local.append(f"{where}: seconds must be > 0")
        rule.seconds = seconds
        rule.expensive = seconds > EXPENSIVE_SECONDS or bool(spec.get("expensive", False))
        try:
            rule.at = compile_row_predicate(spec.get("at"), schema, f"{where}.at")
        except RuleLoadError as exc:
            local.extend(exc.problems)
        rule.predicate = compile_window_predicate(spec.get("predicate"), schema,
                                                  f"{where}.predicate", local, True)
    else:
        rule.baseline_id = spec["baseline"]
        if baselines[rule.baseline_id]["sensor"] != sensor:
            local.append(f"{where}: baseline {rule.baseline_id!r} belongs to another sensor")
    errors.extend(local)
    return None if local else rule


def load_ruleset(source, registry: SchemaRegistry) -> Ruleset:
    """Load a ruleset from a path or dict; RuleLoadError lists every defect."""
    data = source if isinstance(source, dict) else json.loads(Path(source).read_text())
    errors: List[str] = []
    if data.get("version", RULESET_VERSION) != RULESET_VERSION:
        raise RuleLoadError([f"unsupported ruleset version {data.get('version')!r}"])
    raw_baselines: Dict[str, dict] = {}
    baselines: Dict[str, StatisticalBaseline] = {}
    for i, b in enumerate(data.get("baselines", ())):
        where = f"baselines[{i}]"
        bid = b.get("id")
        if not bid or bid in raw_baselines:
            errors.append(f"{where}: missing or duplicate id {bid!r}")
            continue
        sensor = b.get("sensor")
        if sensor not in registry:
            errors.append(f"{where} ({bid}): sensor {sensor!r} has no registered schema")
            continue
        names = registry.get(sensor).field_names
        bad = [n for n in list(b.get("group", ())) + list(b.get("fields", ())) if n not in names]
        if bad:
            errors.append(f"{where} ({bid}): fields {bad} not in schema {sensor!r}")
            continue
        threshold = b.get("threshold")
        if not isinstance(threshold, (int, float)) or not 0 < threshold < 1:
            errors.append(f"{where} ({bid}): threshold must be in (0, 1)")
            continue
        if b.get("unseen_group", "fire") not in ("fire", "skip"):
            errors.append(f"{where} ({bid}): unseen_group must be 'fire' or 'skip'")
            continue
        raw_baselines[bid] = b
        baselines[bid] = StatisticalBaseline.from_dict(b)
    rules: List[ElementalRule] = []
    seen = set()
    for i, spec in enumerate(data.get("rules", ())):
        rule = _compile_rule(spec, registry, raw_baselines, f"rules[{i}]", errors)
        if rule is None:
            continue
        if rule.label in seen:
            errors.append(f"rules[{i}]: duplicate label {rule.label!r}")
            continue
        seen.add(rule.label)
        rules.append(rule)
    if errors:
        raise RuleLoadError(errors)
    return Ruleset(rules, baselines)


def default_ruleset_path() -> Path:
    return Path(__file__).parent / "data" / "default_ruleset.json"


def load_default_ruleset(registry: SchemaRegistry) -> Ruleset:
    return load_ruleset(default_ruleset_path(), registry)


# -- single-row and statistical -------------------------------------------------


def eval_single_row(rule: ElementalRule, values: Dict[str, Any]) -> bool:
    if rule.kind != "single_row":
        raise ValueError(f"rule {rule.label!r} is {rule.kind}, not single_row")
    return rule.predicate.test(values)


def fit_statistical_baseline(store: Store, baseline: StatisticalBaseline,
                             train_range: Optional[Tuple[float, float]] = None) -> StatisticalBaseline:
    """Fit frequencies on rows with timestamps in [start, end) of ``train_range``."""
    table = store.tables.get(baseline.sensor)
    if table is None:
        table = SensorTable(store.registry.get(baseline.sensor))
    rows = _range_rows(table, train_range)
    baseline.frequencies = GroupFrequency.fit(table, rows, baseline.group, baseline.fields)
    return baseline


def _range_rows(table: SensorTable, train_range) -> np.ndarray:
    if train_range is None:
        return np.arange(len(table))
    lo, hi = train_range
    return np.flatnonzero((table.timestamps >= lo) & (table.timestamps < hi))


def eval_statistical(baseline: StatisticalBaseline, values: Dict[str, Any]) -> bool:
    """Fires iff the tuple's frequency in its group is below the threshold."""
    g = tuple(values.get(n) for n in baseline.group)
    f = tuple(values.get(n) for n in baseline.fields)
    freq, seen = baseline.frequency(g, f)
    if not seen:
        return baseline.unseen_group == "fire"
    return freq < baseline.threshold


def _statistical_mask(baseline: StatisticalBaseline, table: SensorTable) -> np.ndarray:
    freq, seen = baseline.frequencies.transform(table)
    fire = freq < baseline.threshold
    if baseline.unseen_group == "fire":
        return fire | ~seen
    return fire & seen


# -- fixed windows (vectorized) -------------------------------------------------


def _group_layout(entity: np.ndarray):
    """Stable entity grouping: (order, index-within-group, group start in sorted order)."""
    n = len(entity)
    order = np.lexsort((np.arange(n), entity))
    es = entity[order]
    new = np.ones(n, dtype=bool)
    new[1:] = es[1:] != es[:-1]
    starts = np.flatnonzero(new)
    seg_start = starts[np.cumsum(new) - 1] if n else np.zeros(0, dtype=np.int64)
    return order, np.arange(n) - seg_start, seg_start


def _column(table: SensorTable, name: str) -> Tuple[np.ndarray, np.ndarray]:
    """(values, present) for a field, values comparable by equality."""
    if name == table.schema.timestamp_field:
        return table.timestamps, np.ones(len(table), dtype=bool)
    if name in table.numeric:
        col = table.numeric[name]
        return np.nan_to_num(col, nan=-1.0), ~np.isnan(col)
    col = table.codes[name]
    return col.astype(np.int64), col >= 0


def trailing_distinct(entity: np.ndarray, values: np.ndarray, valid: np.ndarray, k: int) -> np.ndarray:
    """Distinct ``values`` among valid rows of each row's trailing ``k`` entity rows."""
    n = len(entity)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order, rank, seg_start = _group_layout(entity)
    vs = values[order]
    ok = valid[order]
    es = entity[order]
    pos = np.arange(n)
    # previous sorted position with same entity and value among valid rows
    _, vcode = np.unique(vs, return_inverse=True)
    vcode = vcode.reshape(-1)
    o2 = np.lexsort((pos, vcode, es, ~ok))
    prev = np.full(n, -1, dtype=np.int64)
    a, b = o2[:-1], o2[1:]
    same = ok[a] & ok[b] & (es[a] == es[b]) & (vcode[a] == vcode[b])
    prev[b[same]] = a[same]
    lo = np.maximum(seg_start, pos - k + 1)
    distinct = np.zeros(n, dtype=np.int64)
    for d in range(min(k, n)):
        j = pos - d
        inside = j >= lo
        jj = np.where(inside, j, 0)
        distinct += inside & ok[jj] & (prev[jj] < lo)
    out = np.empty(n, dtype=np.int64)
    out[order] = distinct
    return out


def trailing_count(entity: np.ndarray, mask: np.ndarray, k: int) -> np.ndarray:
    """Masked rows among each row's trailing ``k`` entity rows."""
    n = len(entity)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order, rank, seg_start = _group_layout(entity)
    c = np.concatenate([[0], np.cumsum(mask[order].astype(np.int64))])
    pos = np.arange(n)
    lo = np.maximum(seg_start, pos - k + 1)
    out = np.empty(n, dtype=np.int64)
    out[order] = c[pos + 1] - c[lo]
    return out


def fixed_window_mask(rule: ElementalRule, table: SensorTable) -> np.ndarray:
    n = len(table)
    if n == 0:
        return np.zeros(0, dtype=bool)
    entity = table.entity_codes(rule.entity)
    order, rank, _ = _group_layout(entity)
    eligible = np.empty(n, dtype=bool)
    eligible[order] = rank >= rule.rows - 1
    if rule.partial:
        eligible[:] = True
    values = []
    for term in rule.predicate.terms:
        m = term.pred.mask(table)
        if term.kind == "count":
            values.append(compare_array(term.op, trailing_count(entity, m, rule.rows), term.value))
        elif term.kind == "absent":
            values.append(trailing_count(entity, m, rule.rows) == 0)
        elif term.kind == "distinct":
            col, present = _column(table, term.field)
            d = trailing_distinct(entity, col, m & present, rule.rows)
            values.append(compare_array(term.op, d, term.value))
        else:  # row
            values.append(m)
    return eligible & np.asarray(rule.predicate.evaluate(values), dtype=bool)


def eval_fixed_window(rule: ElementalRule, block: Sequence[Dict[str, Any]]) -> bool:
    """Evaluate one block of an entity's consecutive rows (last row = attribution)."""
    if not block:
        return False
    if len(block) < rule.rows and not rule.partial:
        return False
    block = list(block)[-rule.rows:]
    values = []
    for term in rule.predicate.terms:
        hits = [r for r in block if term.pred.test(r)]
        if term.kind == "count":
            values.append(term.holds(len(hits)))
        elif term.kind == "absent":
            values.append(not hits)
        elif term.kind == "distinct":
            vals = {r.get(term.field) for r in hits}
            vals.discard(None)
            vals = {v for v in vals if not (isinstance(v, float) and v != v)}
            values.append(term.holds(len(vals)))
        else:
            values.append(term.pred.test(block[-1]))
    return bool(rule.predicate.evaluate(values))


# -- rolling time windows (streaming) -------------------------------------------


@dataclass
class Firing:
    """A rolling-window firing attributed to ``row`` over the window (start, end]."""

    row: int
    start: float
    end: float


class RollingEvaluator:
    """Streaming evaluator for one rolling_time_window rule.

    Feed rows in stream order (any chunking); ``finish`` flushes rows still
    waiting on an ``absent_after`` deadline.  State holds only events inside
    the trailing window plus rows waiting on lookahead.
    """

    def __init__(self, rule: ElementalRule):
        if rule.kind != "rolling_time_window":
            raise ValueError(f"rule {rule.label!r} is {rule.kind}")
        self.rule = rule
        self.w = rule.seconds
        self.terms = rule.predicate.terms
        self._counted = [i for i, t in enumerate(self.terms) if t.kind in ("count", "absent")]
        self._distinct = [i for i, t in enumerate(self.terms) if t.kind == "distinct"]
        self._after = [i for i, t in enumerate(self.terms) if t.kind == "absent_after"]
        self._events: deque = deque()                 # (t, entity, counted flags, distinct vals)
        self._counts: Dict[Any, List[int]] = {}
        self._sets: Dict[Any, List[Counter]] = {}
        self._pending: deque = deque()                # [t, row, entity, values]
        self._pending_by_entity: Dict[Any, List[list]] = {}
        self.fired: List[Firing] = []
        self.max_events = 0

    def feed(self, t: float, row: int, entity: Any, at: bool,
             counted: Sequence[bool], distinct: Sequence[Any], after: Sequence[bool],
             rowterms: Dict[int, bool]) -> None:
        """Process one row.

        ``counted`` holds the row-predicate outcome for each count/absent term,
        ``distinct`` the value (None when excluded) for each distinct term,
        ``after`` the outcome for each absent_after term, ``rowterms`` maps
        row-term index -> outcome.
        """
        w = self.w
        pending = self._pending
        while pending and not (t <= pending[0][0] + w):
            self._resolve(pending.popleft())
        if any(after):
            for entry in self._pending_by_entity.get(entity, ()):
                vals = entry[3]
                for j, hit in zip(self._after, after):
                    if hit:
                        vals[j] = False
        events = self._events
        cutoff = t - w
        while events and not (events[0][0] > cutoff):
            _, e, flags, dvals = events.popleft()
            cnt = self._counts[e]
            for k, f in enumerate(flags):
                cnt[k] -= f
            sets = self._sets.get(e)
            if sets is not None:
                for c, v in zip(sets, dvals):
                    if v is not None:
                        c[v] -= 1
                        if not c[v]:
                            del c[v]
            if not any(cnt) and not any(sets or ()):
                del self._counts[e]
                self._sets.pop(e, None)
        if any(counted) or any(v is not None for v in distinct):
            cnt = self._counts.get(entity)
            if cnt is None:
                cnt = self._counts[entity] = [0] * len(self._counted)
                if self._distinct:
                    self._sets[entity] = [Counter() for _ in self._distinct]
            for k, f in enumerate(counted):
                cnt[k] += f
            for c, v in zip(self._sets.get(entity, ()), distinct):
                if v is not None:
                    c[v] += 1
            events.append((t, entity, tuple(bool(f) for f in counted), tuple(distinct)))
            if len(events) > self.max_events:
                self.max_events = len(events)
        if not at:
            return
        vals: List[Any] = [None] * len(self.terms)
        cnt = self._counts.get(entity)
        for k, i in enumerate(self._counted):
            n = cnt[k] if cnt else 0
            vals[i] = self.terms[i].holds(n)
        sets = self._sets.get(entity)
        for k, i in enumerate(self._distinct):
            n = len(sets[k]) if sets else 0
            vals[i] = self.terms[i].holds(n)
        for i, v in rowterms.items():
            vals[i] = bool(v)
        if self._after:
            for i in self._after:
                vals[i] = True
            entry = [t, row, entity, vals]
            pending.append(entry)
            self._pending_by_entity.setdefault(entity, []).append(entry)
        elif self.rule.predicate.evaluate(vals):
            self.fired.append(Firing(row, t - w, t))

    def _resolve(self, entry) -> None:
        t, row, entity, vals = entry
        lst = self._pending_by_entity[entity]
        lst.remove(entry)
        if not lst:
            del self._pending_by_entity[entity]
        if self.rule.predicate.evaluate(vals):
            self.fired.append(Firing(row, t - self.w, t))

    def finish(self) -> List[Firing]:
        while self._pending:
            self._resolve(self._pending.popleft())
        self.fired.sort(key=lambda f: f.row)
        return self.fired


def _rolling_inputs(rule: ElementalRule, table: SensorTable):
    """Per-row term inputs and the mask of rows that can affect the rule."""
    n = len(table)
    terms = rule.predicate.terms
    at = rule.at.mask(table) if rule.at is not None else np.ones(n, dtype=bool)
    relevant = at.copy()
    counted, distinct, after, rowterms = [], [], [], {}
    for i, term in enumerate(terms):
        m = term.pred.mask(table)
        if term.kind in ("count", "absent"):
            counted.append(m)
            relevant |= m
        elif term.kind == "distinct":
            col, present = _column(table, term.field)
            ok = m & present
            distinct.append((col, ok))
            relevant |= ok
        elif term.kind == "absent_after":
            after.append(m)
            relevant |= m
        else:
            rowterms[i] = m
    return at, relevant, counted, distinct, after, rowterms


def rolling_window_firings(rule: ElementalRule, table: SensorTable,
                           rows: Optional[np.ndarray] = None,
                           chunk: Optional[int] = None) -> List[Firing]:
    """Stream the (optionally restricted) rows of ``table`` through a RollingEvaluator."""
    n = len(table)
    if n == 0:
        return []
    entity = table.entity_codes(rule.entity)
    at, relevant, counted, distinct, after, rowterms = _rolling_inputs(rule, table)
    if rows is not None:
        keep = np.zeros(n, dtype=bool)
        keep[rows] = True
        relevant &= keep
    idx = np.flatnonzero(relevant)
    ev = RollingEvaluator(rule)
    ts = table.timestamps[idx].tolist()
    ent = entity[idx].tolist()
    at_l = at[idx].tolist()
    cnt_l = [m[idx].tolist() for m in counted]
    dist_l = [np.where(ok[idx], col[idx], np.nan).tolist() for col, ok in distinct]
    aft_l = [m[idx].tolist() for m in after]
    row_l = {i: m[idx].tolist() for i, m in rowterms.items()}
    rows_l = idx.tolist()
    step = chunk or len(idx) or 1
    for lo in range(0, len(idx), step):
        for k in range(lo, min(lo + step, len(idx))):
            dv = [None if v != v else v for v in (d[k] for d in dist_l)]
            ev.feed(ts[k], rows_l[k], ent[k], at_l[k],
                    [c[k] for c in cnt_l], dv, [a[k] for a in aft_l],
                    {i: r[k] for i, r in row_l.items()})
    return ev.finish()


def eval_rolling_window(rule: ElementalRule, records: Sequence[Dict[str, Any]],
                        ts_field: str = "ts") -> List[Firing]:
    """Evaluate one entity's time-sorted records (dicts); returns firings by index."""
    ev = RollingEvaluator(rule)
    terms = rule.predicate.terms
    for k, rec in enumerate(records):
        at = rule.at.test(rec) if rule.at is not None else True
        counted = [terms[i].pred.test(rec) for i in ev._counted]
        dist = []
        for i in ev._distinct:
            v = rec.get(terms[i].field)
            ok = terms[i].pred.test(rec) and v is not None and not (isinstance(v, float) and v != v)
            dist.append(v if ok else None)
        after = [terms[i].pred.test(rec) for i in ev._after]
        rowterms = {i: t.pred.test(rec) for i, t in enumerate(terms) if t.kind == "row"}
        ev.feed(float(rec[ts_field]), k, 0, at, counted, dist, after, rowterms)
    return ev.finish()


# -- applying a whole ruleset ---------------------------------------------------


@dataclass(frozen=True)
class LabelVector:
    sensor_id: str
    raw_index: int
    labels: Tuple[str, ...]

    @property
    def normal(self) -> bool:
        return not self.labels


class LabeledStore:
    """Per-sensor boolean label matrices aligned with the store's table rows."""

    def __init__(self, labels: Sequence[str], severity: Dict[str, int],
                 matrices: Dict[str, np.ndarray], raw_index: Dict[str, np.ndarray],
                 timestamps: Dict[str, np.ndarray]):
        self.labels = list(labels)
        self.severity = dict(severity)
        self.matrices = matrices
        self.raw_index = raw_index
        self.timestamps = timestamps
        self._pos: Dict[str, Dict[int, int]] = {}

    def column(self, sensor: str, label: str) -> np.ndarray:
        return self.matrices[sensor][:, self.labels.index(label)]

    def row_labels(self, sensor: str, pos: int) -> Tuple[str, ...]:
        hit = self.matrices[sensor][pos]
        return tuple(l for l, h in zip(self.labels, hit) if h)

    def position(self, sensor: str, raw_index: int) -> int:
        if sensor not in self._pos:
            self._pos[sensor] = {int(r): i for i, r in enumerate(self.raw_index[sensor])}
        return self._pos[sensor][int(raw_index)]

    def vector(self, sensor: str, raw_index: int) -> LabelVector:
        return LabelVector(sensor, int(raw_index), self.row_labels(sensor, self.position(sensor, raw_index)))

    def vectors(self) -> Iterator[LabelVector]:
        """LabelVectors for every row in (timestamp, sensor_id, raw_index) order."""
        keys = []
        for s in sorted(self.matrices):
            for i in range(len(self.raw_index[s])):
                keys.append((float(self.timestamps[s][i]), s, int(self.raw_index[s][i]), i))
        keys.sort()
        for _, s, raw, i in keys:
            yield LabelVector(s, raw, self.row_labels(s, i))

    def counts(self) -> Dict[str, int]:
        out = {l: 0 for l in self.labels}
        for m in self.matrices.values():
            for j, l in enumerate(self.labels):
                out[l] += int(m[:, j].sum())
        return out

    def save(self, path) -> None:
        """JSON-lines: a header line, then one LabelVector per row, time-sorted."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"version": RULESET_VERSION, "labels": self.labels,
                                 "severity": self.severity}, sort_keys=True) + "\n")
            for v, ts in self._with_ts():
                fh.write(json.dumps({"sensor_id": v.sensor_id, "raw_index": v.raw_index,
                                     "ts": ts, "labels": list(v.labels)},
                                    separators=(",", ":")) + "\n")

    def _with_ts(self):
        keys = []
        for s in sorted(self.matrices):
            ts = self.timestamps[s].tolist()
            raw = self.raw_index[s].tolist()
            keys.extend((t, s, r, i) for i, (t, r) in enumerate(zip(ts, raw)))
        keys.sort()
        for t, s, raw, i in keys:
            yield LabelVector(s, raw, self.row_labels(s, i)), t

    @classmethod
    def load(cls, path) -> "LabeledStore":
        with open(path, "r", encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            labels = header["labels"]
            col = {l: j for j, l in enumerate(labels)}
            rows: Dict[str, List[Tuple[float, int, List[str]]]] = {}
            for line in fh:
                rec = json.loads(line)
                rows.setdefault(rec["sensor_id"], []).append((rec["ts"], rec["raw_index"], rec["labels"]))
        matrices, raws, stamps = {}, {}, {}
        for s, items in rows.items():
            items.sort(key=lambda r: (r[0], r[1]))
            m = np.zeros((len(items), len(labels)), dtype=bool)
            for i, (_, _, ls) in enumerate(items):
                for l in ls:
                    m[i, col[l]] = True
            matrices[s] = m
            raws[s] = np.array([r[1] for r in items], dtype=np.int64)
            stamps[s] = np.array([r[0] for r in items], dtype=np.float64)
        return cls(labels, header.get("severity", {}), matrices, raws, stamps)

    @classmethod
    def empty_like(cls, store: Store, labels: Sequence[str], severity: Dict[str, int]) -> "LabeledStore":
        return cls(
            labels, severity,
            {s: np.zeros((len(t), len(labels)), dtype=bool) for s, t in store.tables.items()},
            {s: t.raw_index.copy() for s, t in store.tables.items()},
            {s: t.timestamps.copy() for s, t in store.tables.items()},
        )


def rule_mask(rule: ElementalRule, table: SensorTable, ruleset: Ruleset,
              rows: Optional[np.ndarray] = None) -> np.ndarray:
    """Boolean fire mask of one rule over a table (optionally an entity partition)."""
    n = len(table)
    if rule.kind == "single_row":
        out = rule.predicate.mask(table)
    elif rule.kind == "statistical":
        base = ruleset.baselines[rule.baseline_id]
        if not base.fitted:
            raise RuntimeError(f"baseline {base.baseline_id!r} not fitted")
        out = _statistical_mask(base, table)
    elif rule.kind == "fixed_window":
        if rows is not None:
            sub = table.subset(rows)
            out = np.zeros(n, dtype=bool)
            out[rows] = fixed_window_mask(rule, sub)
            return out
        out = fixed_window_mask(rule, table)
    else:
        out = np.zeros(n, dtype=bool)
        for f in rolling_window_firings(rule, table, rows):
            out[f.row] = True
        return out
    if rows is not None:
        keep = np.zeros(n, dtype=bool)
        keep[rows] = True
        out = out & keep
    return out


def _partitions(table: SensorTable, rule: ElementalRule, k: int) -> List[np.ndarray]:
    codes = table.entity_codes(rule.entity) if rule.entity else np.arange(len(table))
    return [np.flatnonzero(codes % k == p) for p in range(k)]


def apply_ruleset(store: Store, ruleset: Ruleset, train_range: Optional[Tuple[float, float]] = None,
                  partitions: int = 1, workers: int = 1) -> LabeledStore:
    """Label every stored row.

    Unfitted statistical baselines are fit on ``train_range`` first.  With
    ``partitions`` > 1 each rule is evaluated per entity partition (optionally
    on a thread pool) and the results merged; output is identical either way.
    """
    for base in ruleset.baselines.values():
        if not base.fitted:
            fit_statistical_baseline(store, base, train_range)
    out = LabeledStore.empty_like(store, ruleset.labels, ruleset.severity)
    jobs = []
    for j, rule in enumerate(ruleset.rules):
        table = store.tables.get(rule.sensor)
        if table is None or not len(table):
            continue
        if partitions > 1 and rule.kind in ("fixed_window", "rolling_time_window"):
            for part in _partitions(table, rule, partitions):
                jobs.append((j, rule, table, part))
        else:
            jobs.append((j, rule, table, None))

    def run(job):
        j, rule, table, part = job
        return rule.sensor, j, rule_mask(rule, table, ruleset, part)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]
    for sensor, j, mask in results:
        out.matrices[sensor][:, j] |= mask
    return out
