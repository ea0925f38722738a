"""Row explanations: per-label feature selection and sentence learning over row features.

The feature space of a sensor's rows is the dynamic-graph catalog, queried
for the row's (src_ip, dst_ip) at the row's time on a graph built from the
flow sensors, plus the row's own fields and context aggregates in raw
units.  Per label, the genetic search picks a small subset of those
features.  In full mode a sentence set is then learned on the subset and
each labeled row is annotated with its best firing sentence.  Light mode
stops after selection and annotates rows with the selected feature names.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import dyn_graph
from .encoding import compute_context
from .feature_select import GAConfig, SelectionResult, ga_search
from .forest import ForestConfig
from .log_store import FieldKind, SensorTable, Store
from .sentences import (Annotation, DiscreteEncoder, SentenceConfig, SentenceSet, annotate, compress_set,
                        prune, train_sentences)

FLOW_SENSORS = ("conn", "netflow")


@dataclass
class RowFeatures:
    """Raw feature columns for selected rows of one sensor."""

    sensor: str
    rows: np.ndarray                 # positions in the sensor table
    names: List[str]
    columns: Dict[str, np.ndarray]   # name -> values (float, or object for discrete)
    discrete: List[str]


def own_columns(table: SensorTable) -> Tuple[Dict[str, np.ndarray], List[str]]:
    """The sensor's numeric and categorical fields (ip fields excluded) plus context aggregates."""
    cols: Dict[str, np.ndarray] = {}
    discrete: List[str] = []
    for f in table.schema.value_fields:
        if f.numeric:
            cols[f.name] = table.numeric[f.name]
        elif f.kind == FieldKind.CATEGORICAL:
            cols[f.name] = table.decoded(f.name)
            discrete.append(f.name)
    for spec in table.schema.context:
        if spec["agg"] == "group_frequency":
            continue
        cols[spec["name"]] = compute_context(table, spec).astype(np.float64)
    return cols, discrete


def graph_columns(store: Store, queries: Dict[str, np.ndarray],
                  policy: Optional[dyn_graph.ForgettingPolicy] = None) -> Dict[str, np.ndarray]:
    """Graph catalog features for the requested rows (sensor -> row positions).

    One pass over the merged flow events; each query is answered right after
    every event at or before its timestamp has been ingested.
    """
    events: List[dyn_graph.GraphEvent] = []
    for s in FLOW_SENSORS:
        if s in store.tables and len(store.tables[s]):
            evs, _ = dyn_graph.events_from_store(store, s)
            events.extend(evs)
    events.sort(key=lambda e: e.ts)
    q: List[Tuple[float, str, int, Optional[str], Optional[str]]] = []
    for s, rows in queries.items():
        table = store.tables[s]
        src = table.decoded("src_ip") if "src_ip" in table.codes else None
        dst = table.decoded("dst_ip") if "dst_ip" in table.codes else None
        for k, i in enumerate(rows.tolist()):
            q.append((float(table.timestamps[i]), s, k,
                      None if src is None else src[i], None if dst is None else dst[i]))
    q.sort(key=lambda t: (t[0], t[1], t[2]))
    out = {s: np.zeros((len(rows), len(dyn_graph.CATALOG))) for s, rows in queries.items()}
    g = dyn_graph.DynamicGraph(policy)
    e = 0
    for t, s, k, src, dst in q:
        while e < len(events) and events[e].ts <= t:
            g.ingest_event(events[e])
            e += 1
        if src is None:
            continue
        out[s][k] = g.query_features(src, t, dst).values
    return out


def row_features(store: Store, queries: Dict[str, np.ndarray],
                 policy: Optional[dyn_graph.ForgettingPolicy] = None) -> Dict[str, RowFeatures]:
    graph = graph_columns(store, queries, policy)
    out = {}
    for s, rows in queries.items():
        table = store.tables[s]
        own, discrete = own_columns(table)
        cols = {name: graph[s][:, j] for j, name in enumerate(dyn_graph.CATALOG)}
        for name, col in own.items():
            cols[name] = col[rows]
        out[s] = RowFeatures(s, rows, list(cols), cols, discrete)
    return out


@dataclass
class ExplainConfig:
    mode: str = "full"                 # "full" or "light"
    feed: str = "gme"                  # "gme" (flagged rows plus contrast sample) or "all"
    max_rows: int = 1500
    contrast: float = 1.0              # unflagged rows sampled per flagged row
    ga: GAConfig = field(default_factory=lambda: GAConfig(population=16, generations=8))
    forest: ForestConfig = field(default_factory=lambda: ForestConfig(n_trees=20))
    sentences: SentenceConfig = field(default_factory=lambda: SentenceConfig(rounds=6, epochs=10))
    prune_tolerance: float = 0.01
    graph_window: float = 300.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("full", "light"):
            raise ValueError("mode must be 'full' or 'light'")
        if self.feed not in ("gme", "all"):
            raise ValueError("feed must be 'gme' or 'all'")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "ExplainConfig":
        d = dict(d or {})
        seed = int(d.get("seed", 0))
        ga = GAConfig(**{"population": 16, "generations": 8, "seed": seed, **d.pop("ga", {})})
        forest = ForestConfig(**{"n_trees": 20, "seed": seed, **d.pop("forest", {})})
        sc = d.pop("sentences", {})
        sentences = SentenceConfig(**{"rounds": 6, "epochs": 10, "seed": seed, **sc})
        return cls(ga=ga, forest=forest, sentences=sentences, **d)


def feed_rows(flagged: np.ndarray, n_rows: int, cfg: ExplainConfig, rng: np.random.Generator) -> np.ndarray:
    """Rows handed to the explainer for one sensor."""
    if cfg.feed == "all":
        rows = np.arange(n_rows)
        if len(rows) > cfg.max_rows:
            keep = np.flatnonzero(flagged)
            rest = np.setdiff1d(rows, keep)
            extra = rng.choice(rest, size=max(cfg.max_rows - len(keep), 0), replace=False) if len(rest) else rest
            rows = np.sort(np.concatenate([keep, extra]))
        return rows
    hit = np.flatnonzero(flagged)
    if len(hit) > cfg.max_rows:
        hit = np.sort(rng.choice(hit, size=cfg.max_rows, replace=False))
    rest = np.flatnonzero(~flagged)
    k = min(len(rest), int(round(cfg.contrast * len(hit))))
    extra = rng.choice(rest, size=k, replace=False) if k else np.zeros(0, dtype=np.int64)
    return np.sort(np.concatenate([hit, extra]).astype(np.int64))


@dataclass
class LabelFeatures:
    """Encoded feature rows of one label: the training feed and the rows to annotate."""

    label: str
    sensor: str
    names: List[str]
    encoder: DiscreteEncoder
    x: np.ndarray            # feed rows
    y: np.ndarray
    note_x: np.ndarray       # rows to annotate
    note_raw: np.ndarray


def build_features(store: Store, labels: Sequence[str], label_sensor: Mapping[str, str],
                   targets: Dict[str, np.ndarray], annotate_masks: Optional[Dict[str, np.ndarray]] = None,
                   config: ExplainConfig = ExplainConfig()) -> Tuple[Dict[str, LabelFeatures], Dict[str, str]]:
    """Per-label encoded features.

    ``targets`` maps sensor -> (rows x labels) bool matrix of the labels to
    explain (usually the GME output).  ``annotate_masks`` optionally marks
    extra cells to annotate, e.g. rule labels used by the hunt.
    """
    rng = np.random.default_rng(config.seed)
    queries: Dict[str, np.ndarray] = {}
    fed: Dict[str, np.ndarray] = {}
    for s in sorted(targets):
        if s not in store.tables:
            continue
        m = targets[s]
        rows = feed_rows(m.any(axis=1), len(m), config, rng)
        extra = np.flatnonzero(annotate_masks[s].any(axis=1)) if annotate_masks and s in annotate_masks else []
        fed[s] = rows
        queries[s] = np.union1d(rows, extra).astype(np.int64)
    feats = row_features(store, queries, dyn_graph.ForgettingPolicy(window=config.graph_window))
    out: Dict[str, LabelFeatures] = {}
    skipped: Dict[str, str] = {}
    for j, label in enumerate(labels):
        s = label_sensor.get(label)
        if s not in feats:
            skipped[label] = "sensor not available"
            continue
        rf = feats[s]
        pos_in = np.searchsorted(rf.rows, fed[s])
        y = targets[s][fed[s], j]
        if y.all() or not y.any():
            skipped[label] = "needs positive and negative rows"
            continue
        enc = DiscreteEncoder(rf.names, rf.discrete).fit({n: c[pos_in] for n, c in rf.columns.items()})
        x_all = enc.transform(rf.columns)
        cells = targets[s][rf.rows, j].copy()
        if annotate_masks and s in annotate_masks:
            cells |= annotate_masks[s][rf.rows, j]
        note = np.flatnonzero(cells)
        out[label] = LabelFeatures(label, s, rf.names, enc, x_all[pos_in], y, x_all[note],
                                   store.tables[s].raw_index[rf.rows][note])
    return out, skipped


def select_features(features: Dict[str, LabelFeatures], config: ExplainConfig = ExplainConfig()
                    ) -> Dict[str, SelectionResult]:
    return {label: ga_search(f.x, f.y, f.names, label, config.ga, config.forest)
            for label, f in features.items()}


def learn_sentences(features: Dict[str, LabelFeatures], selected: Mapping[str, Sequence[str]],
                    config: ExplainConfig = ExplainConfig()) -> Tuple[Dict[str, SentenceSet], List[Annotation]]:
    """Sentence sets on each label's selected features (full mode) and the row annotations.

    In light mode no sentences are learned; rows are annotated with the selected feature names.
    """
    sets: Dict[str, SentenceSet] = {}
    notes: List[Annotation] = []
    for label in sorted(features):
        if label not in selected:
            continue
        f = features[label]
        idx = [f.names.index(n) for n in selected[label]]
        if config.mode == "light":
            text = f"{label}: features " + ", ".join(selected[label])
            notes.extend(Annotation(f.sensor, int(r), label, -1, text) for r in f.note_raw.tolist())
            continue
        ss = train_sentences(f.x[:, idx], f.y, list(selected[label]), label, config.sentences)
        ss = compress_set(prune(ss, f.x[:, idx], f.y, config.prune_tolerance), f.x[:, idx])
        sets[label] = ss
        notes.extend(annotate({label: ss}, f.note_x[:, idx], f.sensor, f.note_raw,
                              encoder=f.encoder))
    return sets, notes


def save_features(features: Dict[str, LabelFeatures], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {}
    meta = {}
    for k, (label, f) in enumerate(sorted(features.items())):
        for name in ("x", "y", "note_x", "note_raw"):
            arrays[f"{k}_{name}"] = getattr(f, name)
        meta[label] = {"key": k, "sensor": f.sensor, "names": f.names, "encoder": f.encoder.to_dict()}
    np.savez(directory / "features.npz", **arrays)
    (directory / "features.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_features(directory) -> Dict[str, LabelFeatures]:
    directory = Path(directory)
    meta = json.loads((directory / "features.json").read_text())
    out = {}
    with np.load(directory / "features.npz") as z:
        for label, m in meta.items():
            k = m["key"]
            out[label] = LabelFeatures(label, m["sensor"], m["names"], DiscreteEncoder.from_dict(m["encoder"]),
                                       z[f"{k}_x"], z[f"{k}_y"], z[f"{k}_note_x"], z[f"{k}_note_raw"])
    return out
