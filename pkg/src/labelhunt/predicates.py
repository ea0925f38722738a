"""Declarative row predicates.

A predicate is a JSON tree::

    {"field": "event_id", "op": "in", "value": [4719, 4715]}
    {"all": [p, ...]}   {"any": [p, ...]}   {"not": p}
    {}  or  None        (always true)

Ordering operators (``<``, ``<=``, ``>``, ``>=``) are only valid on numeric,
port and timestamp fields.  Values for categorical/ip/text fields are
compared as strings.  A missing value fails every comparison; use the
``exists``/``missing`` operators to test for it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .errors import RuleLoadError

ORDER_OPS = {"<", "<=", ">", ">="}
EQUALITY_OPS = {"==", "!="}
SET_OPS = {"in", "not_in"}
PRESENCE_OPS = {"exists", "missing"}
ALL_OPS = ORDER_OPS | EQUALITY_OPS | SET_OPS | PRESENCE_OPS

_NUMERIC_KINDS = {"numeric", "port", "timestamp"}


def compare(op: str, left: float, right: float) -> bool:
    if op == "<":
        return left < right
    if op == "<=":
        return left <= right
    if op == ">":
        return left > right
    if op == ">=":
        return left >= right
    if op == "==":
        return left == right
    if op == "!=":
        return left != right
    raise ValueError(f"unknown comparison {op!r}")


def compare_array(op: str, left: np.ndarray, right: Any) -> np.ndarray:
    if op == "<":
        return left < right
    if op == "<=":
        return left <= right
    if op == ">":
        return left > right
    if op == ">=":
        return left >= right
    if op == "==":
        return left == right
    if op == "!=":
        return left != right
    raise ValueError(f"unknown comparison {op!r}")


@dataclass(frozen=True)
class RowPredicate:
    """A compiled predicate bound to one sensor schema."""

    tree: Any
    fields: frozenset
    _test: Callable[[Mapping[str, Any]], bool]
    _mask: Callable[[Any], np.ndarray]

    @property
    def is_true(self) -> bool:
        return not self.tree

    def test(self, values: Mapping[str, Any]) -> bool:
        """Evaluate against one record's field values."""
        return self._test(values)

    def mask(self, table) -> np.ndarray:
        """Evaluate against every row of a SensorTable."""
        return self._mask(table)


def _coerce(kind: str, value: Any, where: str) -> Any:
    if kind in _NUMERIC_KINDS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            try:
                return float(value)
            except (TypeError, ValueError):
                raise RuleLoadError([f"{where}: value {value!r} is not numeric"])
        return float(value)
    return str(value)


def compile_row_predicate(tree: Any, schema, where: str = "predicate") -> RowPredicate:
    """Compile ``tree`` against ``schema``; raises RuleLoadError on any defect."""
    errors: List[str] = []
    fields: set = set()
    test, mask = _compile(tree, schema, where, errors, fields)
    if errors:
        raise RuleLoadError(errors)
    return RowPredicate(tree=tree or {}, fields=frozenset(fields), _test=test, _mask=mask)


def _always_true_mask(table) -> np.ndarray:
    return np.ones(len(table), dtype=bool)


def _compile(tree, schema, where, errors, fields):
    if not tree:
        return (lambda values: True), _always_true_mask
    if not isinstance(tree, dict):
        errors.append(f"{where}: predicate must be an object, got {type(tree).__name__}")
        return (lambda values: False), _always_true_mask
    if "all" in tree or "any" in tree:
        key = "all" if "all" in tree else "any"
        parts = [
            _compile(sub, schema, f"{where}.{key}[{i}]", errors, fields)
            for i, sub in enumerate(tree[key])
        ]
        tests = [p[0] for p in parts]
        masks = [p[1] for p in parts]
        if key == "all":
            def test(values, tests=tests):
                return all(t(values) for t in tests)

            def mask(table, masks=masks):
                out = np.ones(len(table), dtype=bool)
                for m in masks:
                    out &= m(table)
                return out
        else:
            def test(values, tests=tests):
                return any(t(values) for t in tests)

            def mask(table, masks=masks):
                out = np.zeros(len(table), dtype=bool)
                for m in masks:
                    out |= m(table)
                return out
        return test, mask
    if "not" in tree:
        inner_test, inner_mask = _compile(tree["not"], schema, f"{where}.not", errors, fields)
        return (lambda values: not inner_test(values)), (lambda table: ~inner_mask(table))
    if "field" in tree:
        return _compile_leaf(tree, schema, where, errors, fields)
    errors.append(f"{where}: unrecognised predicate keys {sorted(tree)}")
    return (lambda values: False), _always_true_mask


def _is_missing(value: Any) -> bool:
    return value is None or (isinstance(value, float) and math.isnan(value))


def _compile_leaf(tree, schema, where, errors, fields):
    name = tree["field"]
    op = tree.get("op", "==")
    fail = (lambda values: False), _always_true_mask
    if name not in schema.field_names:
        errors.append(f"{where}: field {name!r} not in schema {schema.sensor_id!r}")
        return fail
    if op not in ALL_OPS:
        errors.append(f"{where}: unknown operator {op!r}")
        return fail
    kind = schema.kind_of(name)
    numeric = kind in _NUMERIC_KINDS
    if op in ORDER_OPS and not numeric:
        errors.append(f"{where}: operator {op!r} needs a numeric field, {name!r} is {kind}")
        return fail
    fields.add(name)

    if op in PRESENCE_OPS:
        want_missing = op == "missing"

        def test(values):
            return _is_missing(values.get(name)) == want_missing

        def mask(table):
            if numeric:
                missing = np.isnan(table.numeric[name])
            else:
                missing = table.codes[name] < 0
            return missing if want_missing else ~missing

        return test, mask

    raw = tree.get("value")
    try:
        if op in SET_OPS:
            if not isinstance(raw, (list, tuple)):
                errors.append(f"{where}: operator {op!r} needs a list value")
                return fail
            value: Any = [_coerce(kind, v, where) for v in raw]
        else:
            value = _coerce(kind, raw, where)
    except RuleLoadError as exc:
        errors.extend(exc.problems)
        return fail

    if op in SET_OPS:
        members = frozenset(value)
        negate = op == "not_in"

        def test(values):
            v = values.get(name)
            if _is_missing(v):
                return False
            v = float(v) if numeric else str(v)
            return (v in members) != negate

        def mask(table):
            if numeric:
                col = table.numeric[name]
                hit = np.isin(col, np.array(sorted(members), dtype=float))
                present = ~np.isnan(col)
            else:
                codes = table.codes[name]
                wanted = [table.code_of(name, m) for m in members]
                hit = np.isin(codes, np.array([c for c in wanted if c >= 0], dtype=np.int32))
                present = codes >= 0
            return present & (~hit if negate else hit)

        return test, mask

    def test(values):
        v = values.get(name)
        if _is_missing(v):
            return False
        if numeric:
            return compare(op, float(v), value)
        return compare(op, str(v), value)

    def mask(table):
        if numeric:
            col = table.numeric[name]
            with np.errstate(invalid="ignore"):
                return compare_array(op, col, value) & ~np.isnan(col)
        codes = table.codes[name]
        code = table.code_of(name, value)
        if op == "==":
            return codes == code if code >= 0 else np.zeros(len(codes), dtype=bool)
        return (codes != code) & (codes >= 0)

    return test, mask


def predicate_fields(tree: Any) -> List[str]:
    """Field names referenced anywhere in ``tree``."""
    out: List[str] = []

    def walk(node):
        if not node or not isinstance(node, dict):
            return
        if "field" in node:
            out.append(node["field"])
        for key in ("all", "any"):
            for sub in node.get(key, ()):
                walk(sub)
        if "not" in node:
            walk(node["not"])

    walk(tree)
    return out


def compile_many(trees: Sequence[Any], schema, where: str) -> List[RowPredicate]:
    problems: List[str] = []
    out: List[RowPredicate] = []
    for i, tree in enumerate(trees):
        try:
            out.append(compile_row_predicate(tree, schema, f"{where}[{i}]"))
        except RuleLoadError as exc:
            problems.extend(exc.problems)
    if problems:
        raise RuleLoadError(problems)
    return out

