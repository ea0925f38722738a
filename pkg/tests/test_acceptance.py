"""End-to-end acceptance checks.  Each test prints one PASS/FAIL line."""

import bisect
import json
import time

import numpy as np
import pytest

from conftest import Corpus
from oracles import brute_graph, brute_label, brute_matches
from labelhunt import gme
from labelhunt.bench import run_bench
from labelhunt.cli import main
from labelhunt.dyn_graph import CATALOG, TOLERANCE, DynamicGraph, ForgettingPolicy, GraphEvent
from labelhunt.feature_select import GAConfig, ga_search
from labelhunt.hunter import build_stream, default_clusters_path, load_clusters, prefilter, search
from labelhunt.labels import apply_ruleset, default_ruleset_path, load_default_ruleset
from labelhunt.nn import f1_score, flatten, unflatten
from labelhunt.scenario import GroundTruth, ScenarioSpec
from labelhunt.sentences import (RelaxationParams, SentenceConfig, compress_set, crisp_eval, prune,
                                 set_loss_grad, soft_eval, train_sentences)

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    def report(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return report


@pytest.fixture(scope="module")
def corpora(tmp_path_factory):
    """Three seeded corpora of about 1e5 rows each."""
    out = []
    for seed in range(3):
        spec = ScenarioSpec(seed=seed, duration=7600.0, random_injections={"per_kind": 5})
        out.append(Corpus(spec, tmp_path_factory.mktemp(f"acc{seed}"), train_fraction=0.5))
    return out


def _as_tuples(matches):
    return sorted((m.cluster_id, m.rows, m.bind) for m in matches)


# 1 ---------------------------------------------------------------------------------------------

def test_labeling_oracle_equivalence(corpora, verdict):
    doc = json.loads(default_ruleset_path().read_text())
    details, ok = [], True
    for c in corpora:
        rows = len(c.store)
        t = time.perf_counter()
        out = apply_ruleset(c.store, load_default_ruleset(c.registry), train_range=c.train_range)
        secs = time.perf_counter() - t
        ref = brute_label(c.store, doc, c.train_range)
        same = set(ref) == set(out.matrices) and all(np.array_equal(ref[s], out.matrices[s]) for s in ref)
        ok &= same and secs < 60 and rows >= 100_000
        details.append(f"seed {c.spec.seed}: {rows} rows, exact={same}, {secs:.2f}s")
    verdict(1, ok, "labeling equals brute force; " + "; ".join(details))


# 2 ---------------------------------------------------------------------------------------------

def test_ground_truth_recovery(corpora, large_corpus, verdict):
    tp = fp = fn = 0
    for c in corpora + [large_corpus]:
        got = {(v.sensor_id, v.raw_index, l) for v in c.labeled.vectors() for l in v.labels}
        want = {(s, r, l) for (s, r), labs in c.truth.labels.items() for l in labs}
        tp += len(got & want)
        fp += len(got - want)
        fn += len(want - got)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    verdict(2, precision == 1.0 and recall == 1.0 and tp > 0,
            f"precision={precision:.4f} recall={recall:.4f} over {tp} injected row labels")


# 3 ---------------------------------------------------------------------------------------------

def _label_f1(model, c, pred):
    out = {}
    for j, label in enumerate(model.labels):
        s = c.label_sensor[label]
        if s not in pred.fired:
            continue
        ts = c.store.tables[s].timestamps
        rows = (ts >= c.test_range[0]) & (ts < c.test_range[1])
        y = c.labeled.column(s, label)[rows]
        if y.any():
            out[label] = f1_score(pred.fired[s][rows, j], y)
    return out


def _gates(model, store, zero=()):
    prep = gme.prepare(store, model.encoders, None, model.labels, model.window, model.sensors, zero_sensors=zero)
    H = gme.expert_features(model.experts, prep)
    U, _, present = gme.element_arrays(model.sensors, prep, H, model.window,
                                       {s: model.encoders[s].width for s in model.sensors})
    g, _ = gme.gate_weights(model.params, U, present)
    return g, present


def test_gme_training(large_corpus, verdict):
    c = large_corpus
    rows = len(c.store)
    benign = 1 - sum(int(m.any(axis=1).sum()) for m in c.labeled.matrices.values()) / rows
    cfg = gme.TrainingConfig()
    sensors = sorted(c.store.tables)
    enc = gme.fit_encoders(c.store, sensors, (c.fit_range[0], c.val_range[1]))
    prep = gme.prepare(c.store, enc, c.labeled, c.labeled.labels, cfg.window, sensors)
    experts = gme.train_experts(prep, c.label_sensor, cfg, c.fit_range)
    before = {s: e.digest() for s, e in experts.items()}
    model = gme.train_gme(experts, enc, prep, c.label_sensor, cfg, c.fit_range, c.val_range)
    frozen = {s: e.digest() for s, e in model.experts.items()} == before

    f1 = _label_f1(model, c, gme.predict_store(model, c.store))
    macro = float(np.mean(list(f1.values())))
    dropped = {s: float(np.mean(list(_label_f1(model, c, gme.predict_store(model, c.store, drop=[s])).values())))
               for s in model.sensors}

    g, present = _gates(model, c.store)
    live = present.any(axis=1)
    sums_ok = bool(np.all(np.abs(g[live].sum(axis=1) - 1) <= 1e-6) and np.all(g[~present] == 0))

    zero_gate = {}
    for z in model.sensors:
        zcfg = gme.TrainingConfig(zero_sensors=(z,))
        zm = gme.fit_all(c.store, c.labeled, c.label_sensor, zcfg, c.fit_range, c.val_range)
        zg, zp = _gates(zm, c.store, zero=(z,))
        i = zm.sensors.index(z)
        zero_gate[z] = float(zg[zp[:, i], i].mean())

    ok = (rows >= 150_000 and benign >= 0.99 and min(f1.values()) >= 0.9
          and all(v >= 0.6 * macro for v in dropped.values())
          and max(zero_gate.values()) < 0.1 and sums_ok and frozen)
    verdict(3, ok, f"{rows} rows, benign {benign:.4f}; min label F1 {min(f1.values()):.3f} "
                   f"(macro {macro:.3f}); one-sensor-out macro "
                   + ", ".join(f"{s}={v:.3f}" for s, v in dropped.items())
                   + "; zeroed gate " + ", ".join(f"{s}={v:.3f}" for s, v in zero_gate.items())
                   + f"; gate sums ok={sums_ok}; experts unchanged={frozen}")


# 4 ---------------------------------------------------------------------------------------------

def _rel_err(num, ana):
    return float(np.linalg.norm(num - ana) / max(np.linalg.norm(num) + np.linalg.norm(ana), 1e-12))


def _gme_trial(rng):
    p = gme.init_gme_params([1, 1], 1, 1, 1, 1, rng)
    for k in p:
        p[k] = rng.normal(0, 1, p[k].shape)
    keys = sorted(p)
    E, R = 3, 5
    pres = rng.random((E, 2)) < 0.8
    pres[:, 0] |= ~pres.any(axis=1)
    re = rng.integers(0, E, R)
    rs = np.array([rng.choice(np.flatnonzero(pres[e])) for e in re])
    data = gme.GMEData([rng.normal(size=(E, 1)) for _ in range(2)], rng.normal(size=(E, 2, 1)), pres, re, rs,
                       rng.normal(size=(R, 1)), (rng.random((R, 1)) < 0.5).astype(float),
                       rng.uniform(0.5, 3, (R, 1)))
    _, grad = gme.gme_loss_grad(p, data)
    theta = flatten(p, keys)
    num = np.zeros_like(theta)
    h = 1e-6
    for i in range(len(theta)):
        a, b = theta.copy(), theta.copy()
        a[i] += h
        b[i] -= h
        num[i] = (gme.gme_loss_grad(unflatten(a, p, keys), data, False)[0]
                  - gme.gme_loss_grad(unflatten(b, p, keys), data, False)[0]) / (2 * h)
    return len(theta), _rel_err(num, flatten(grad, keys))


def _sentence_trial(rng):
    S, K, d = 2, 2, 3
    M = rng.random((S, K, d)) < 0.6
    M[..., 0] |= ~M.any(axis=2)
    W = rng.normal(size=(S, K, d)) * M
    B = rng.normal(size=(S, K))
    act = np.ones((S, K), bool)
    x = rng.normal(size=(20, d))
    y = rng.random(20) < 0.5
    rp = RelaxationParams(k=float(rng.uniform(0.5, 3)), alpha=float(rng.uniform(0, 1)), beta=float(rng.uniform(0, .1)))
    _, dW, dB = set_loss_grad(W, B, M, act, x, y, rp)
    slots = [(W, i) for i in zip(*np.nonzero(M))] + [(B, i) for i in np.ndindex(B.shape)]
    num, ana = [], []
    h = 1e-6
    for arr, idx in slots:
        old = arr[idx]
        arr[idx] = old + h
        up = set_loss_grad(W, B, M, act, x, y, rp)[0]
        arr[idx] = old - h
        dn = set_loss_grad(W, B, M, act, x, y, rp)[0]
        arr[idx] = old
        num.append((up - dn) / (2 * h))
        ana.append((dW if arr is W else dB)[idx])
    return len(slots), _rel_err(np.array(num), np.array(ana))


def test_gradient_checks(verdict):
    g = [_gme_trial(np.random.default_rng(t)) for t in range(100)]
    s = [_sentence_trial(np.random.default_rng(1000 + t)) for t in range(100)]
    worst_g = max(e for _, e in g)
    worst_s = max(e for _, e in s)
    sizes_ok = max(n for n, _ in g + s) <= 20
    verdict(4, worst_g <= 1e-4 and worst_s <= 1e-4 and sizes_ok,
            f"100 GME trials worst rel err {worst_g:.2e} ({g[0][0]} params); "
            f"100 sentence trials worst {worst_s:.2e} (<= {max(n for n, _ in s)} params)")


# 5 ---------------------------------------------------------------------------------------------

def test_dynamic_graph_oracle(verdict):
    rng = np.random.default_rng(0)
    n, window, grace = 100_000, 30.0, 5.0
    ts = np.round(np.cumsum(rng.exponential(0.05, n)), 3)
    late = rng.random(n) < 0.02
    ts[late] -= np.round(rng.uniform(0, 0.9, late.sum()), 3)      # out of order, within tolerance
    ips = [f"10.0.0.{i}" for i in range(30)]
    src, dst = rng.integers(0, 30, n), rng.integers(0, 30, n)
    ports = rng.choice([22, 53, 80, 443, 8080], n)
    nbytes, pkts = rng.integers(0, 5000, n), rng.integers(1, 50, n)
    events = [GraphEvent(float(ts[i]), ips[src[i]], ips[dst[i]], int(ports[i]), float(nbytes[i]), float(pkts[i]))
              for i in range(n)]
    order = np.argsort(ts, kind="stable")
    sorted_ts = ts[order].tolist()
    pol = ForgettingPolicy(window=window, grace=grace)
    g = DynamicGraph(pol)
    mean_cols = {3, 5, 11, 13, 19, 22}     # everything else is a count, sum or max of integers
    exact, close, queries, mem_ok = True, True, 0, True
    for i, e in enumerate(events):
        g.ingest_event(e)
        if i % 97:
            continue
        queries += 1
        tq = g.last_ts + float(rng.uniform(-0.9, 3))
        a, b = ips[rng.integers(30)], ips[rng.integers(30)]
        got = np.array(g.query_features(a, tq, b).values)
        lo = bisect.bisect_right(sorted_ts, tq - window)
        hi = bisect.bisect_right(sorted_ts, tq)
        seen = [events[j] for j in order[lo:hi] if j <= i]
        want = np.array(brute_graph(seen, a, tq, window, b))
        int_like = np.array([k not in mean_cols for k in range(len(want))])
        exact &= bool(np.array_equal(got[int_like], want[int_like]))
        close &= bool(np.allclose(got[~int_like], want[~int_like], rtol=1e-9, atol=0))
        floor = bisect.bisect_right(sorted_ts, g.last_ts - window - grace - TOLERANCE)
        mem_ok &= g.retained_events() <= 3 * (i + 1 - min(floor, i + 1))
    g.evict(float(ts.max()) + 10 * window)
    drained = g.retained_events() == 0 and not g.nodes and not g.edges
    verdict(5, exact and close and mem_ok and drained,
            f"{n} events, {queries} queries: counts/sums/maxima exact={exact}, means within 1e-9={close}, "
            f"retention bounded={mem_ok}, drained after eviction={drained}")


# 6 ---------------------------------------------------------------------------------------------

def test_feature_selection_planted_recovery(verdict):
    wins, monotone, notes = 0, True, []
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        x = rng.normal(size=(600, 24))
        y = (x[:, 2] > 0) & (x[:, 17] > -0.3)
        r = ga_search(x, y, list(CATALOG), "planted", GAConfig(seed=seed))
        best = [h.best_fitness for h in r.history]
        monotone &= all(q >= p for p, q in zip(best, best[1:]))
        good = {2, 17} <= set(r.best.indices()) and r.best.size <= 5 and r.best.f1 >= 0.95
        wins += good
        notes.append(f"{seed}:{r.best.indices()}/{r.best.f1:.3f}")
    verdict(6, wins >= 9 and monotone, f"{wins}/10 seeds recover both planted features; elitism monotone="
                                       f"{monotone}; " + " ".join(notes))


# 7 ---------------------------------------------------------------------------------------------

def _boxes(x):
    return ((x[:, 0] <= 0.3) & (x[:, 1] <= 0.5)) | (x[:, 2] >= 0.8)


def test_sentence_planted_recovery(verdict):
    rng = np.random.default_rng(0)
    x, xt = rng.random((3000, 4)), rng.random((3000, 4))
    y = _boxes(x)
    ss = train_sentences(x, y, ["a", "b", "c", "d"], "boxes", SentenceConfig(seed=0))
    f1 = f1_score(ss.crisp(xt), _boxes(xt))
    pruned = prune(ss, x, y, 0.01)
    comp = compress_set(pruned, x)
    unchanged = bool(np.array_equal(comp.crisp(x), pruned.crisp(x)))
    # points whose every word sits at least 0.05 from its boundary
    probe = rng.random((20000, 4))
    margins = np.concatenate([[w.b - probe @ w.w for w in s.words] for s in comp.sentences]).T
    far = np.all(np.abs(margins) >= 0.05, axis=1)
    soft = soft_eval(comp, probe[far], 100.0) > 0.5
    crisp, _ = crisp_eval(comp, probe[far])
    agree = bool(np.array_equal(soft, crisp)) and far.sum() > 1000
    verdict(7, f1 >= 0.95 and len(pruned.sentences) <= 3 and unchanged and agree,
            f"held-out F1 {f1:.3f}; {len(ss.sentences)} -> {len(pruned.sentences)} sentences after prune; "
            f"compress keeps decisions={unchanged}; soft/crisp agree on {int(far.sum())} margin points={agree}")


# 8 ---------------------------------------------------------------------------------------------

def test_cluster_hunting(corpora, verdict):
    ok, details = True, []
    for c in corpora:
        defs = load_clusters(default_clusters_path(), c.registry, c.label_sensor)
        fields = sorted({f for d in defs for f in d.bind})
        full = build_stream(c.store, c.labeled.labels, c.labeled.matrices, fields, include_normal=True)
        got = search(full, defs)
        same = _as_tuples(got) == brute_matches(full, defs)
        kept = prefilter(full, defs)
        preserved = _as_tuples(search(kept, defs)) == _as_tuples(got)
        removed = 1 - len(kept) / len(full)
        ok &= same and preserved and removed >= 0.5 and len(full) >= 100_000 and len(got) > 0
        details.append(f"seed {c.spec.seed}: {len(full)} rows, {len(got)} matches, exhaustive={same}, "
                       f"prefilter preserved={preserved}, removed {removed:.1%}")
    verdict(8, ok, "; ".join(details))


# 9 ---------------------------------------------------------------------------------------------

def _comparable(path):
    doc = json.loads(path.read_text())
    for a in doc["alerts"]:
        a.pop("alert_id")
        a.pop("generated_at")
    return doc


def _match_truth(work):
    truth = GroundTruth.load(work / "scenario" / "truth.json")
    alerts = json.loads((work / "alerts.json").read_text())["alerts"]
    used = set()
    for a in alerts:
        rows = {(r["sensor_id"], r["raw_index"]) for r in a["rows"]}
        hits = [i for i, t in enumerate(truth.clusters)
                if t.cluster_id == a["cluster_id"] and rows <= {tuple(m) for m in t.members}]
        if len(hits) != 1 or hits[0] in used:
            return False, len(alerts), len(truth.clusters)
        used.add(hits[0])
    return len(used) == len(truth.clusters), len(alerts), len(truth.clusters)


def test_end_to_end_demo(tmp_path, verdict):
    t = time.perf_counter()
    codes = [main(["run", "--config", "demo", "--workdir", str(tmp_path / f"demo{k}")]) for k in (1, 2)]
    codes.append(main(["run", "--config", "control", "--workdir", str(tmp_path / "control")]))
    secs = time.perf_counter() - t
    one_each, n_alerts, n_truth = _match_truth(tmp_path / "demo1")
    deterministic = _comparable(tmp_path / "demo1" / "alerts.json") == _comparable(tmp_path / "demo2" / "alerts.json")
    control = len(json.loads((tmp_path / "control" / "alerts.json").read_text())["alerts"])
    verdict(9, codes == [0, 0, 0] and one_each and n_truth > 0 and deterministic and control == 0 and secs < 600,
            f"demo: {n_alerts} alerts for {n_truth} injected clusters, one-to-one={one_each}; "
            f"identical across runs={deterministic}; control alerts={control}; {secs:.0f}s for three runs")


# 10 --------------------------------------------------------------------------------------------

def test_throughput(verdict):
    r = run_bench()
    verdict(10, r.rows_per_second >= 50_000 and r.rows >= 150_000,
            f"{r.rows} rows in {r.total_seconds:.2f}s (label {r.label_seconds:.2f}s, infer {r.infer_seconds:.2f}s, "
            f"hunt {r.hunt_seconds:.2f}s) = {r.rows_per_second:,.0f} rows/s")
