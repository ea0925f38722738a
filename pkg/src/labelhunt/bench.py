"""Throughput benchmark: labeling + GME inference + cluster hunting, single process.

Setup (scenario generation, ingestion, model training) is not timed.  The
timed path is what runs per batch of incoming rows once models exist.
"""

from __future__ import annotations

import json
import tempfile
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional

from . import gme, hunter
from .labels import apply_ruleset, load_default_ruleset
from .log_store import Store, load_default_registry
from .scenario import FILES, ScenarioSpec, generate


@dataclass
class BenchResult:
    rows: int
    label_seconds: float
    infer_seconds: float
    hunt_seconds: float
    matches: int
    setup_seconds: float

    @property
    def total_seconds(self) -> float:
        return self.label_seconds + self.infer_seconds + self.hunt_seconds

    @property
    def rows_per_second(self) -> float:
        return self.rows / self.total_seconds if self.total_seconds > 0 else float("inf")

    def to_dict(self) -> dict:
        return {**asdict(self), "total_seconds": self.total_seconds, "rows_per_second": self.rows_per_second}


def bench_scenario(duration: float = 15000.0, per_kind: int = 20, seed: int = 0) -> ScenarioSpec:
    """About 13 rows/s over ``duration`` seconds; the default yields roughly 2e5 rows."""
    return ScenarioSpec(seed=seed, duration=duration, random_injections={"per_kind": per_kind})


def run_bench(spec: Optional[ScenarioSpec] = None, config: Optional[gme.TrainingConfig] = None,
              workdir: Optional[Path] = None, repeats: int = 1) -> BenchResult:
    """Time the hot path on a generated corpus; the best of ``repeats`` is reported per phase."""
    spec = spec or bench_scenario()
    config = config or gme.TrainingConfig()
    t0 = time.perf_counter()
    with tempfile.TemporaryDirectory() as tmp:
        d = Path(workdir or tmp)
        paths = generate(spec).write(d)
        registry = load_default_registry()
        store = Store(registry)
        for s in FILES:
            store.ingest_file(s, paths[s])
    ruleset = load_default_ruleset(registry)
    lo, hi = store.time_range()
    train = (lo, lo + 0.5 * (hi - lo))
    val = (train[1], lo + 0.6 * (hi - lo))
    labeled = apply_ruleset(store, ruleset, train_range=(lo, val[1]))
    label_sensor = {r.label: r.sensor for r in ruleset.rules}
    model = gme.fit_all(store, labeled, label_sensor, config, train, val)
    defs = hunter.load_clusters(hunter.default_clusters_path())
    fields = sorted({f for d_ in defs for f in d_.bind})
    keep = {l for d_ in defs for l in d_.sequence}
    setup = time.perf_counter() - t0

    best: Dict[str, float] = {}
    matches = 0
    for _ in range(max(1, repeats)):
        rs = load_default_ruleset(registry)
        t = time.perf_counter()
        labeled = apply_ruleset(store, rs, train_range=(lo, val[1]))
        t_label = time.perf_counter() - t
        t = time.perf_counter()
        gme.predict_store(model, store)
        t_infer = time.perf_counter() - t
        t = time.perf_counter()
        stream = hunter.build_stream(store, labeled.labels, labeled.matrices, fields, keep=keep)
        matches = len(hunter.search(stream, defs))
        t_hunt = time.perf_counter() - t
        for k, v in (("label", t_label), ("infer", t_infer), ("hunt", t_hunt)):
            best[k] = min(best.get(k, float("inf")), v)
    return BenchResult(len(store), best["label"], best["infer"], best["hunt"], matches, setup)


def write_result(result: BenchResult, path) -> None:
    Path(path).write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
