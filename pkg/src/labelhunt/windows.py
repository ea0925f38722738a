"""Time-aligned window batches across sensors.

A window element holds up to N rows per sensor taken from a contiguous
stretch of the merged (timestamp, sensor_id, raw_index) stream.  The element
closes just before the row that would give its sensor an (N+1)-th row, so
the densest sensor sets the pace and every stored row lands in exactly one
element.  Sensors with no rows in an element are zero-filled and flagged
absent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .encoding import raw_numeric_matrix
from .log_store import Store


@dataclass
class WindowPlan:
    """Element boundaries: for each sensor, row ranges [start, stop) per element."""

    sensors: List[str]
    n: int
    starts: Dict[str, np.ndarray]
    counts: Dict[str, np.ndarray]
    spans: np.ndarray  # (elements, 2) first/last timestamp

    @property
    def size(self) -> int:
        return len(self.spans)

    def element_of_rows(self, sensor: str, n_rows: int) -> np.ndarray:
        """Element index for every row of ``sensor`` (-1 if outside the plan)."""
        out = np.full(n_rows, -1, dtype=np.int64)
        st, ct = self.starts[sensor], self.counts[sensor]
        for e in np.flatnonzero(ct):
            out[st[e]:st[e] + ct[e]] = e
        return out


def build_plan(store: Store, n: int, sensors: Sequence[str]) -> WindowPlan:
    if n < 1:
        raise ValueError("window length N must be >= 1")
    names = sorted(sensors)
    present = [s for s in names if s in store.tables and len(store.tables[s])]
    sid, rows = store.merged_order(present)
    # present[k] corresponds to sid == k
    k_count = len(present)
    starts: List[List[int]] = [[] for _ in names]
    counts: List[List[int]] = [[] for _ in names]
    spans: List[Tuple[float, float]] = []
    col = {s: names.index(s) for s in present}
    cur = [0] * k_count
    first = [0] * k_count
    t_first = None
    t_last = None
    ts = {s: store.tables[s].timestamps for s in present}

    def close():
        for j, s in enumerate(names):
            if s in col:
                k = present.index(s)
                starts[j].append(first[k])
                counts[j].append(cur[k])
            else:
                starts[j].append(0)
                counts[j].append(0)
        spans.append((t_first, t_last))

    sid_list = sid.tolist()
    row_list = rows.tolist()
    opened = False
    for k, r in zip(sid_list, row_list):
        if opened and cur[k] >= n:
            close()
            for j in range(k_count):
                first[j] += cur[j]
                cur[j] = 0
            opened = False
        if not opened:
            t_first = float(ts[present[k]][r])
            opened = True
        cur[k] += 1
        t_last = float(ts[present[k]][r])
    if opened:
        close()
    return WindowPlan(
        sensors=names,
        n=n,
        starts={s: np.array(starts[j], dtype=np.int64) for j, s in enumerate(names)},
        counts={s: np.array(counts[j], dtype=np.int64) for j, s in enumerate(names)},
        spans=np.array(spans, dtype=np.float64).reshape(-1, 2),
    )


@dataclass
class WindowCursor:
    """Independent read position; one per reader."""

    position: int = 0
    _plan: Optional[WindowPlan] = field(default=None, repr=False)
    _key: Optional[tuple] = field(default=None, repr=False)

    def plan_for(self, store: Store, n: int, sensors: Sequence[str]) -> WindowPlan:
        key = (id(store), n, tuple(sorted(sensors)))
        if self._plan is None or self._key != key:
            self._plan = build_plan(store, n, sensors)
            self._key = key
        return self._plan


@dataclass
class WindowBatch:
    sensors: List[str]
    blocks: Dict[str, np.ndarray]      # (B, N, width) float
    row_mask: Dict[str, np.ndarray]    # (B, N) True for real rows, False for padding
    presence: np.ndarray               # (B, S) sensor has >= 1 row in the element
    raw_index: Dict[str, np.ndarray]   # (B, N) raw index, -1 for padding
    rows: Dict[str, np.ndarray]        # (B, N) row position in the sensor table, -1 for padding
    spans: np.ndarray                  # (B, 2)
    elements: np.ndarray               # (B,) element numbers within the plan

    @property
    def size(self) -> int:
        return len(self.elements)

    @property
    def n(self) -> int:
        for b in self.row_mask.values():
            return b.shape[1]
        return 0

    def zeroed(self, sensor: str) -> "WindowBatch":
        """Copy with ``sensor`` zero-filled and flagged absent."""
        blocks = dict(self.blocks)
        blocks[sensor] = np.zeros_like(self.blocks[sensor])
        mask = dict(self.row_mask)
        mask[sensor] = np.zeros_like(self.row_mask[sensor])
        presence = self.presence.copy()
        presence[:, self.sensors.index(sensor)] = False
        raw = dict(self.raw_index)
        raw[sensor] = np.full_like(self.raw_index[sensor], -1)
        rows = dict(self.rows)
        rows[sensor] = np.full_like(self.rows[sensor], -1)
        return WindowBatch(self.sensors, blocks, mask, presence, raw, rows, self.spans, self.elements)


def _feature_matrix(store: Store, sensor: str, features: Optional[Dict[str, np.ndarray]]) -> np.ndarray:
    if features is not None and sensor in features:
        return features[sensor]
    if sensor in store.tables:
        return raw_numeric_matrix(store.tables[sensor])
    schema = store.registry.get(sensor)
    return np.zeros((0, sum(1 for f in schema.value_fields if f.numeric)))


def gather(store: Store, plan: WindowPlan, elements: np.ndarray,
           features: Optional[Dict[str, np.ndarray]] = None) -> WindowBatch:
    """Assemble the batch for the given plan element numbers."""
    b = len(elements)
    n = plan.n
    blocks, masks, raws, rows = {}, {}, {}, {}
    presence = np.zeros((b, len(plan.sensors)), dtype=bool)
    for j, s in enumerate(plan.sensors):
        mat = _feature_matrix(store, s, features)
        width = mat.shape[1]
        st = plan.starts[s][elements]
        ct = plan.counts[s][elements]
        offs = np.arange(n)
        valid = offs[None, :] < ct[:, None]
        idx = np.where(valid, st[:, None] + offs[None, :], -1)
        block = np.zeros((b, n, width))
        if valid.any():
            block[valid] = mat[idx[valid]]
        raw = np.full((b, n), -1, dtype=np.int64)
        if valid.any():
            raw[valid] = store.tables[s].raw_index[idx[valid]]
        blocks[s] = block
        masks[s] = valid
        raws[s] = raw
        rows[s] = idx
        presence[:, j] = ct > 0
    return WindowBatch(
        sensors=list(plan.sensors),
        blocks=blocks,
        row_mask=masks,
        presence=presence,
        raw_index=raws,
        rows=rows,
        spans=plan.spans[elements],
        elements=np.asarray(elements, dtype=np.int64),
    )


def fetch_window(store: Store, cursor: WindowCursor, b: int, n: int, sensors: Sequence[str],
                 features: Optional[Dict[str, np.ndarray]] = None) -> WindowBatch:
    """Next ``b`` window elements from ``cursor``; advances it.

    Returns a short batch at the end of the store, then an empty batch.
    ``features`` maps sensor -> encoded row matrix aligned to the table; without
    it the numeric columns are used as-is.
    """
    if b < 1 or n < 1:
        raise ValueError("B and N must be >= 1")
    plan = cursor.plan_for(store, n, sensors)
    lo = cursor.position
    hi = min(plan.size, lo + b)
    cursor.position = hi
    return gather(store, plan, np.arange(lo, hi), features)


def window_means(plan: WindowPlan, sensor: str, x: np.ndarray) -> np.ndarray:
    """Per row, the mean of ``x`` over the rows of its own element and sensor."""
    out = np.zeros_like(x)
    st, ct = plan.starts[sensor], plan.counts[sensor]
    nz = np.flatnonzero(ct)
    if not len(nz) or not len(x):
        return out
    sums = np.add.reduceat(x, st[nz], axis=0)
    means = sums / ct[nz][:, None]
    elem = np.repeat(np.arange(len(nz)), ct[nz])
    rows = np.concatenate([np.arange(st[e], st[e] + ct[e]) for e in nz])
    out[rows] = means[elem]
    return out
