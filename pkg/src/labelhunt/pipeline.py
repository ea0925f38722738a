"""Stage orchestration driven by one JSON config file.

Stages run in dependency order.  Each stage records a fingerprint (its
config slice, the seed and the content hashes of its inputs) together with
the hashes of its outputs in ``<workdir>/.stages.json``; a stage whose
fingerprint and outputs are unchanged is skipped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import alerts as alerts_mod
from . import explain, gme, hunter
from .errors import ConfigError
from .feature_select import save_report
from .labels import LabeledStore, apply_ruleset, load_ruleset
from .log_store import Store, load_default_registry
from .scenario import FILES, ScenarioSpec, generate
from .sentences import AnnotationStore, save_sets

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
REPORT_VERSION = 1

STAGES = ("gen", "ingest", "label", "train-expert", "train-gme", "infer",
          "select-features", "train-ppmtl", "hunt", "report")

DATA_DIR = Path(__file__).parent / "data"
BUNDLED_CONFIGS = {"demo": DATA_DIR / "demo_config.json", "control": DATA_DIR / "control_config.json"}


@dataclass
class PipelineConfig:
    workdir: Path
    ruleset: Path
    clusters: Path
    scenario: Optional[dict] = None
    inputs: Dict[str, List[Path]] = field(default_factory=dict)
    window: int = 100
    batch: int = 64
    seed: int = 0
    split: Dict[str, float] = field(default_factory=lambda: {"train": 0.5, "val": 0.1})
    gme: Dict[str, Any] = field(default_factory=dict)
    ppmtl: Dict[str, Any] = field(default_factory=dict)
    hunt: Dict[str, Any] = field(default_factory=lambda: {"source": "rules"})
    stages: List[str] = field(default_factory=lambda: list(STAGES))
    source: Optional[Path] = None

    # -- loading -----------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict, base: Path = Path(".")) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        if data.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError(f"version: unsupported config version {data.get('version')!r}")
        known = {"version", "workdir", "ruleset", "clusters", "scenario", "inputs", "window", "batch", "seed",
                 "split", "gme", "ppmtl", "hunt", "stages"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        for name in ("workdir", "ruleset"):
            if not data.get(name):
                raise ConfigError(f"{name}: required field is missing")

        def resolve(v: str, name: str) -> Path:
            if v == "default":
                return DATA_DIR / {"ruleset": "default_ruleset.json", "clusters": "clusters.json"}[name]
            p = Path(v)
            return p if p.is_absolute() else base / p

        inputs: Dict[str, List[Path]] = {}
        for sensor, paths in (data.get("inputs") or {}).items():
            paths = [paths] if isinstance(paths, str) else list(paths)
            inputs[sensor] = [resolve(p, "inputs") for p in paths]
        stages = list(data.get("stages", STAGES))
        bad = [s for s in stages if s not in STAGES]
        if bad:
            raise ConfigError(f"stages: unknown stage(s) {bad}")
        split = {"train": 0.5, "val": 0.1, **(data.get("split") or {})}
        if not (0 < split["train"] and 0 <= split["val"] and split["train"] + split["val"] < 1):
            raise ConfigError("split: need 0 < train, 0 <= val and train + val < 1")
        hunt = {"source": "rules", **(data.get("hunt") or {})}
        if hunt["source"] not in ("rules", "gme"):
            raise ConfigError("hunt.source: must be 'rules' or 'gme'")
        cfg = cls(
            workdir=resolve(data["workdir"], "workdir"),
            ruleset=resolve(data["ruleset"], "ruleset"),
            clusters=resolve(data.get("clusters", "default"), "clusters"),
            scenario=data.get("scenario"),
            inputs=inputs,
            window=int(data.get("window", 100)),
            batch=int(data.get("batch", 64)),
            seed=int(data.get("seed", 0)),
            split=split,
            gme=dict(data.get("gme") or {}),
            ppmtl=dict(data.get("ppmtl") or {}),
            hunt=hunt,
            stages=stages,
        )
        if cfg.window < 1 or cfg.batch < 1:
            raise ConfigError("window/batch: must be >= 1")
        try:
            cfg.explain_config()
            cfg.training_config()
            if cfg.scenario is not None:
                cfg.scenario_spec()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid stage settings: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path, workdir: Optional[str] = None) -> "PipelineConfig":
        """Load a config file, or a bundled one by name ("demo", "control")."""
        bundled = str(path) in BUNDLED_CONFIGS
        p = BUNDLED_CONFIGS[str(path)] if bundled else Path(path)
        try:
            data = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {p} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
        if workdir is not None and isinstance(data, dict):
            data["workdir"] = workdir
        base = Path.cwd() if bundled else p.resolve().parent
        cfg = cls.from_dict(data, base)
        cfg.source = p
        return cfg

    # -- derived settings --------------------------------------------------

    def scenario_spec(self) -> ScenarioSpec:
        return ScenarioSpec.from_dict({"seed": self.seed, **(self.scenario or {})})

    def training_config(self) -> gme.TrainingConfig:
        return gme.TrainingConfig.from_dict({"seed": self.seed, "window": self.window,
                                             "batch_size": self.batch, **self.gme})

    def explain_config(self) -> explain.ExplainConfig:
        return explain.ExplainConfig.from_dict({"seed": self.seed, **self.ppmtl})

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION, "workdir": str(self.workdir), "ruleset": str(self.ruleset),
            "clusters": str(self.clusters), "scenario": self.scenario,
            "inputs": {k: [str(p) for p in v] for k, v in self.inputs.items()},
            "window": self.window, "batch": self.batch, "seed": self.seed, "split": self.split,
            "gme": self.gme, "ppmtl": self.ppmtl, "hunt": self.hunt, "stages": self.stages,
        }


# -- hashing ---------------------------------------------------------------------


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def content_digest(path: Path) -> Optional[str]:
    """sha256 over a file, or over the sorted (relative path, file hash) pairs of a directory."""
    path = Path(path)
    if path.is_file():
        return file_digest(path)
    if path.is_dir():
        h = hashlib.sha256()
        for p in sorted(q for q in path.rglob("*") if q.is_file()):
            h.update(str(p.relative_to(path)).encode())
            h.update(file_digest(p).encode())
        return h.hexdigest()
    return None


def _json_digest(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


# -- stage context ----------------------------------------------------------------


class StageError(Exception):
    pass


@dataclass
class StageSpec:
    name: str
    depends: Tuple[str, ...]
    inputs: Callable[["Context"], List[Path]]
    outputs: Callable[["Context"], List[Path]]
    settings: Callable[["Context"], Any]
    run: Callable[["Context"], dict]


class Context:
    """Shared state of one pipeline run: resolved paths plus lazily loaded artifacts."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.work = Path(cfg.workdir)
        self._store: Optional[Store] = None
        self._ruleset = None

    def path(self, name: str) -> Path:
        return self.work / name

    @property
    def registry(self):
        return load_default_registry()

    def store(self) -> Store:
        if self._store is None:
            d = self.path("store")
            if not (d / "manifest.json").exists():
                raise StageError(f"store not found at {d}; run the ingest stage first")
            self._store = Store.load(d)
        return self._store

    def ruleset(self):
        if not self.cfg.ruleset.exists():
            raise StageError(f"ruleset file {self.cfg.ruleset} does not exist")
        return load_ruleset(self.cfg.ruleset, self.store().registry)

    def label_sensor(self) -> Dict[str, str]:
        return {r.label: r.sensor for r in self.ruleset().rules}

    def labeled(self) -> LabeledStore:
        p = self.path("labels.jsonl")
        if not p.exists():
            raise StageError(f"{p} not found; run the label stage first")
        return LabeledStore.load(p)

    def ranges(self) -> Tuple[Tuple[float, float], Tuple[float, float]]:
        lo, hi = self.store().time_range()
        span = hi - lo
        t1 = lo + self.cfg.split["train"] * span
        t2 = t1 + self.cfg.split["val"] * span
        return (lo, t1), (t1, t2)

    def ingest_files(self) -> Dict[str, List[Path]]:
        if self.cfg.inputs:
            return self.cfg.inputs
        scen = self.path("scenario")
        return {s: [scen / name] for s, name in FILES.items()}

    def aligned(self, labeled: LabeledStore) -> Dict[str, np.ndarray]:
        """Label matrices aligned with the store tables."""
        store = self.store()
        out = {}
        for s, m in labeled.matrices.items():
            if s in store.tables and not np.array_equal(labeled.raw_index[s], store.tables[s].raw_index):
                raise StageError(f"labels for {s!r} are not aligned with the store")
            out[s] = m
        return out

    def predictions(self) -> Tuple[List[str], Dict[str, np.ndarray]]:
        p = self.path("predictions.npz")
        if not p.exists():
            raise StageError(f"{p} not found; run the infer stage first")
        with np.load(p) as z:
            labels = [str(x) for x in z["labels"]]
            fired = {k[len("fired/"):]: z[k] for k in z.files if k.startswith("fired/")}
        return labels, fired

    def hunt_matrices(self) -> Tuple[List[str], Dict[str, np.ndarray], Dict[str, int]]:
        labeled = self.labeled()
        if self.cfg.hunt["source"] == "gme":
            labels, fired = self.predictions()
            return labels, fired, labeled.severity
        return labeled.labels, self.aligned(labeled), labeled.severity


# -- stages -----------------------------------------------------------------------


def _gen(ctx: Context) -> dict:
    if ctx.cfg.scenario is None:
        raise StageError("gen stage needs a 'scenario' section in the config")
    out = ctx.path("scenario")
    if out.exists():
        shutil.rmtree(out)
    sc = generate(ctx.cfg.scenario_spec())
    sc.write(out)
    return {"rows": sc.truth.rows, "injections": len(sc.injections), "clusters": len(sc.truth.clusters)}


def _ingest(ctx: Context) -> dict:
    files = ctx.ingest_files()
    store = Store(load_default_registry())
    for sensor in sorted(files):
        for p in files[sensor]:
            if not Path(p).exists():
                raise StageError(f"input file {p} for sensor {sensor!r} does not exist")
            store.ingest_file(sensor, p)
    for f in store.files:
        try:
            f["path"] = str(Path(f["path"]).resolve().relative_to(ctx.work.resolve()))
        except ValueError:
            pass
    out = ctx.path("store")
    if out.exists():
        shutil.rmtree(out)
    store.save(out)
    ctx._store = store
    return {"rows": {s: len(t) for s, t in store.tables.items()}, "rejected": len(store.rejects)}


def _label(ctx: Context) -> dict:
    store = ctx.store()
    train, val = ctx.ranges()
    labeled = apply_ruleset(store, ctx.ruleset(), train_range=(train[0], val[1]))
    labeled.save(ctx.path("labels.jsonl"))
    return {"counts": labeled.counts()}


def _train_expert(ctx: Context) -> dict:
    store = ctx.store()
    labeled = ctx.labeled()
    cfg = ctx.cfg.training_config()
    train, val = ctx.ranges()
    sensors = sorted(s for s in store.tables if len(store.tables[s]))
    encoders = gme.fit_encoders(store, sensors, (train[0], val[1]))
    ls = ctx.label_sensor()
    labels = [l for l in labeled.labels if ls.get(l) in sensors]
    prep = gme.prepare(store, encoders, labeled, labels, cfg.window, sensors, cfg.zero_sensors)
    experts = gme.train_experts(prep, ls, cfg, train)
    doc = {"version": 1, "seed": cfg.seed, "sensors": sensors, "labels": labels,
           "encoders": {s: e.to_dict() for s, e in encoders.items()},
           "experts": {s: e.to_dict() for s, e in experts.items()}}
    ctx.path("models").mkdir(exist_ok=True)
    ctx.path("models/experts.json").write_text(json.dumps(doc) + "\n")
    return {"sensors": sensors, "digests": {s: e.digest() for s, e in experts.items()}}


def _train_gme(ctx: Context) -> dict:
    from .encoding import SensorEncoder
    store = ctx.store()
    labeled = ctx.labeled()
    cfg = ctx.cfg.training_config()
    train, val = ctx.ranges()
    p = ctx.path("models/experts.json")
    if not p.exists():
        raise StageError(f"{p} not found; run the train-expert stage first")
    doc = json.loads(p.read_text())
    encoders = {s: SensorEncoder.from_dict(e) for s, e in doc["encoders"].items()}
    experts = {s: gme.ExpertModel.from_dict(e) for s, e in doc["experts"].items()}
    prep = gme.prepare(store, encoders, labeled, doc["labels"], cfg.window, doc["sensors"], cfg.zero_sensors)
    model = gme.train_gme(experts, encoders, prep, ctx.label_sensor(), cfg, train,
                          val if ctx.cfg.split["val"] > 0 else None)
    model.save(ctx.path("models/gme.json"))
    return {"loss": model.history[-1] if model.history else None, "tau": model.tau_report}


def _infer(ctx: Context) -> dict:
    p = ctx.path("models/gme.json")
    if not p.exists():
        raise StageError(f"{p} not found; run the train-gme stage first")
    model = gme.GMEModel.load(p)
    store = ctx.store()
    pred = gme.predict_store(model, store)
    arrays = {"labels": np.array(pred.labels)}
    for s in pred.sensors:
        arrays[f"fired/{s}"] = pred.fired[s]
        arrays[f"probs/{s}"] = pred.probs[s].astype(np.float32)
    np.savez_compressed(ctx.path("predictions.npz"), **arrays)
    rows = gme.filter_labeled(pred, store)
    gme.save_filtered(rows, ctx.path("predictions.jsonl"))
    return {"flagged_rows": len(rows),
            "per_label": {l: int(sum(pred.fired[s][:, j].sum() for s in pred.sensors))
                          for j, l in enumerate(pred.labels)}}


def _select_features(ctx: Context) -> dict:
    store = ctx.store()
    cfg = ctx.cfg.explain_config()
    labeled = ctx.labeled()
    rules = ctx.aligned(labeled)
    if ctx.path("predictions.npz").exists():
        labels, targets = ctx.predictions()
        target_source = "gme"
    else:
        labels, targets = labeled.labels, rules
        target_source = "rules"
    # annotate the rows the hunt will cite as well
    note = {s: rules[s][:, [labeled.labels.index(l) for l in labels]] for s in rules if s in targets}
    feats, skipped = explain.build_features(store, labels, ctx.label_sensor(), targets, note, cfg)
    results = explain.select_features(feats, cfg)
    explain.save_features(feats, ctx.path("explain"))
    save_report(results, ctx.path("selection.json"))
    doc = json.loads(ctx.path("selection.json").read_text())
    doc.update({"seed": ctx.cfg.seed, "target_source": target_source, "skipped": skipped})
    ctx.path("selection.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return {"selected": {l: r.selected for l, r in results.items()}, "skipped": skipped}


def _train_ppmtl(ctx: Context) -> dict:
    cfg = ctx.cfg.explain_config()
    p = ctx.path("selection.json")
    if not p.exists():
        raise StageError(f"{p} not found; run the select-features stage first")
    sel = json.loads(p.read_text())
    selected = {l: r["selected"] for l, r in sel["labels"].items()}
    feats = explain.load_features(ctx.path("explain"))
    sets, notes = explain.learn_sentences(feats, selected, cfg)
    save_sets(sets, ctx.path("sentences.json"))
    doc = json.loads(ctx.path("sentences.json").read_text())
    doc.update({"seed": ctx.cfg.seed, "mode": cfg.mode,
                "encoders": {l: f.encoder.to_dict() for l, f in feats.items() if l in sets}})
    ctx.path("sentences.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    store = AnnotationStore()
    store.add(notes)
    store.save(ctx.path("annotations.jsonl"))
    return {"sentences": {l: len(s.sentences) for l, s in sets.items()}, "annotated_rows": len(store)}


def _hunt(ctx: Context) -> dict:
    store = ctx.store()
    labels, matrices, severity = ctx.hunt_matrices()
    if not ctx.cfg.clusters.exists():
        raise StageError(f"cluster file {ctx.cfg.clusters} does not exist")
    defs = hunter.load_clusters(ctx.cfg.clusters, store.registry, ctx.label_sensor())
    fields = sorted({f for d in defs for f in d.bind})
    keep = {l for d in defs for l in d.sequence}
    stream = hunter.build_stream(store, labels, matrices, fields, keep=keep)
    matches = hunter.search(stream, defs)
    hunter.save_matches(matches, ctx.path("matches.jsonl"))
    ranking = hunter.rank_and_expand(store, labels, matrices, severity)
    ctx.path("ranking.json").write_text(json.dumps(ranking.to_dict(), indent=2, sort_keys=True) + "\n")
    per = {}
    for m in matches:
        per[m.cluster_id] = per.get(m.cluster_id, 0) + 1
    return {"stream_rows": len(stream), "matches": len(matches), "per_cluster": per}


def _report(ctx: Context) -> dict:
    store = ctx.store()
    p = ctx.path("matches.jsonl")
    if not p.exists():
        raise StageError(f"{p} not found; run the hunt stage first")
    matches = hunter.load_matches(p)
    labels, matrices, severity = ctx.hunt_matrices()
    row_labels: Dict[Tuple[str, int], Tuple[str, ...]] = {}
    for m in matches:
        for s, raw in m.rows:
            i = store.tables[s].position(raw)
            row_labels[(s, raw)] = tuple(l for l, f in zip(labels, matrices[s][i]) if f)
    ann_path = ctx.path("annotations.jsonl")
    annotations = AnnotationStore(ann_path).as_mapping() if ann_path.exists() else None
    now = time.time()
    built = [alerts_mod.build_alert(m, store, row_labels, severity, annotations, now) for m in matches]
    outbox = ctx.path("outbox")
    if outbox.exists():
        shutil.rmtree(outbox)
    box = alerts_mod.FileOutbox(outbox)
    for a in built:
        box.publish(a)
    doc = {"version": 1, "seed": ctx.cfg.seed, "alerts": [alerts_mod.alert_to_dict(a) for a in built]}
    ctx.path("alerts.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    ctx.path("alerts.txt").write_text("\n".join(alerts_mod.render(a) for a in built))
    return {"alerts": len(built)}


def _p(*names: str) -> Callable[[Context], List[Path]]:
    return lambda ctx: [ctx.path(n) for n in names]


def _ingest_inputs(ctx: Context) -> List[Path]:
    return [p for s in sorted(ctx.ingest_files()) for p in ctx.ingest_files()[s]]


def _select_inputs(ctx: Context) -> List[Path]:
    return [ctx.path("store"), ctx.path("labels.jsonl"), ctx.path("predictions.npz"), ctx.cfg.ruleset]


def _hunt_inputs(ctx: Context) -> List[Path]:
    extra = [ctx.path("predictions.npz")] if ctx.cfg.hunt["source"] == "gme" else []
    return [ctx.path("store"), ctx.path("labels.jsonl"), ctx.cfg.ruleset, ctx.cfg.clusters] + extra


SPECS: Dict[str, StageSpec] = {s.name: s for s in [
    StageSpec("gen", (), lambda ctx: [], _p("scenario"),
              lambda ctx: {"scenario": ctx.cfg.scenario, "seed": ctx.cfg.seed}, _gen),
    StageSpec("ingest", ("gen",), _ingest_inputs, _p("store"),
              lambda ctx: {"inputs": {k: [str(p) for p in v] for k, v in ctx.ingest_files().items()}}, _ingest),
    StageSpec("label", ("ingest",), lambda ctx: [ctx.path("store"), ctx.cfg.ruleset], _p("labels.jsonl"),
              lambda ctx: {"split": ctx.cfg.split}, _label),
    StageSpec("train-expert", ("label",), lambda ctx: [ctx.path("store"), ctx.path("labels.jsonl"), ctx.cfg.ruleset],
              _p("models/experts.json"),
              lambda ctx: {"gme": asdict(ctx.cfg.training_config()), "split": ctx.cfg.split}, _train_expert),
    StageSpec("train-gme", ("train-expert",),
              lambda ctx: [ctx.path("store"), ctx.path("labels.jsonl"), ctx.path("models/experts.json")],
              _p("models/gme.json"),
              lambda ctx: {"gme": asdict(ctx.cfg.training_config()), "split": ctx.cfg.split}, _train_gme),
    StageSpec("infer", ("train-gme",), lambda ctx: [ctx.path("store"), ctx.path("models/gme.json")],
              _p("predictions.npz", "predictions.jsonl"), lambda ctx: {}, _infer),
    StageSpec("select-features", ("infer",), _select_inputs, _p("explain", "selection.json"),
              lambda ctx: {"ppmtl": ctx.cfg.ppmtl, "seed": ctx.cfg.seed}, _select_features),
    StageSpec("train-ppmtl", ("select-features",), _p("explain", "selection.json"),
              _p("sentences.json", "annotations.jsonl"),
              lambda ctx: {"ppmtl": ctx.cfg.ppmtl, "seed": ctx.cfg.seed}, _train_ppmtl),
    StageSpec("hunt", ("label",), _hunt_inputs, _p("matches.jsonl", "ranking.json"),
              lambda ctx: {"hunt": ctx.cfg.hunt}, _hunt),
    StageSpec("report", ("hunt",),
              lambda ctx: [ctx.path("store"), ctx.path("labels.jsonl"), ctx.path("matches.jsonl"),
                           ctx.path("annotations.jsonl")] +
              ([ctx.path("predictions.npz")] if ctx.cfg.hunt["source"] == "gme" else []),
              _p("outbox", "alerts.json", "alerts.txt"), lambda ctx: {"hunt": ctx.cfg.hunt}, _report),
]}


# -- runner -----------------------------------------------------------------------


@dataclass
class StageResult:
    name: str
    status: str                      # ran | unchanged | disabled | failed | skipped
    seconds: float = 0.0
    fingerprint: Optional[str] = None
    detail: dict = field(default_factory=dict)
    error: Optional[str] = None


@dataclass
class RunReport:
    exit_code: int
    seed: int
    stages: List[StageResult]
    failed_stage: Optional[str] = None

    def to_dict(self) -> dict:
        return {"version": REPORT_VERSION, "exit_code": self.exit_code, "seed": self.seed,
                "failed_stage": self.failed_stage, "stages": [asdict(s) for s in self.stages]}

    def status(self, name: str) -> Optional[str]:
        for s in self.stages:
            if s.name == name:
                return s.status
        return None


def _fingerprint(ctx: Context, spec: StageSpec) -> str:
    inputs = {str(p): content_digest(p) for p in spec.inputs(ctx)}
    return _json_digest({"stage": spec.name, "settings": spec.settings(ctx), "seed": ctx.cfg.seed,
                         "inputs": inputs})


def _outputs_digest(ctx: Context, spec: StageSpec) -> Dict[str, Optional[str]]:
    return {str(p.relative_to(ctx.work)): content_digest(p) for p in spec.outputs(ctx)}


def run(cfg: PipelineConfig, stages: Optional[Sequence[str]] = None, force: bool = False) -> RunReport:
    """Run the enabled stages in dependency order and write ``stage_report.json``.

    ``stages`` restricts the run further (``--stages``).  A failing stage
    stops the run: later stages are reported as skipped and the exit code is 1.
    """
    wanted = list(cfg.stages)
    if stages is not None:
        bad = [s for s in stages if s not in STAGES]
        if bad:
            raise ConfigError(f"stages: unknown stage(s) {bad}")
        wanted = [s for s in wanted if s in stages]
    ctx = Context(cfg)
    ctx.work.mkdir(parents=True, exist_ok=True)
    state_path = ctx.path(".stages.json")
    state = json.loads(state_path.read_text()) if state_path.exists() else {}
    results: List[StageResult] = []
    failed: Optional[str] = None
    for name in STAGES:
        spec = SPECS[name]
        if name not in wanted:
            results.append(StageResult(name, "disabled"))
            continue
        if failed is not None:
            results.append(StageResult(name, "skipped", error=f"upstream stage {failed!r} failed"))
            continue
        t0 = time.perf_counter()
        try:
            fp = _fingerprint(ctx, spec)
            prev = state.get(name)
            if (not force and prev and prev.get("fingerprint") == fp
                    and prev.get("outputs") == _outputs_digest(ctx, spec)):
                results.append(StageResult(name, "unchanged", time.perf_counter() - t0, fp, prev.get("detail", {})))
                continue
            log.info("stage %s: running", name)
            detail = spec.run(ctx)
            outputs = _outputs_digest(ctx, spec)
            state[name] = {"fingerprint": fp, "outputs": outputs, "detail": detail}
            state_path.write_text(json.dumps(state, indent=1, sort_keys=True, default=str) + "\n")
            results.append(StageResult(name, "ran", time.perf_counter() - t0, fp, _jsonable(detail)))
        except Exception as exc:  # any stage error ends the run with exit code 1
            log.error("stage %s failed: %s", name, exc)
            state.pop(name, None)
            state_path.write_text(json.dumps(state, indent=1, sort_keys=True, default=str) + "\n")
            results.append(StageResult(name, "failed", time.perf_counter() - t0,
                                       error=f"{type(exc).__name__}: {exc}"))
            failed = name
    report = RunReport(1 if failed else 0, cfg.seed, results, failed)
    ctx.path("stage_report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True,
                                                        default=str) + "\n")
    return report


def _jsonable(obj: Any) -> Any:
    return json.loads(json.dumps(obj, default=str))
