import json

import numpy as np
import pytest

from labelhunt.errors import ScenarioError
from labelhunt.labels import default_ruleset_path
from labelhunt.log_store import Store, load_default_registry
from labelhunt.scenario import AUDIT_EVENTS, FILES, ScenarioSpec, Stream, generate, inject_behavior
from oracles import brute_label


def _bytes(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


def test_same_seed_is_byte_identical(tmp_path):
    spec = ScenarioSpec(seed=1, duration=1500, random_injections={"per_kind": 1})
    generate(spec).write(tmp_path / "a")
    generate(spec).write(tmp_path / "b")
    assert _bytes(tmp_path / "a") == _bytes(tmp_path / "b")


def test_different_seed_differs(tmp_path):
    generate(ScenarioSpec(seed=1, duration=600)).write(tmp_path / "a")
    generate(ScenarioSpec(seed=2, duration=600)).write(tmp_path / "b")
    assert _bytes(tmp_path / "a")["conn.log"] != _bytes(tmp_path / "b")["conn.log"]


def test_no_injections_means_all_normal():
    sc = generate(ScenarioSpec(seed=4, duration=1800))
    assert sc.truth.labels == {} and sc.truth.clusters == []


def test_brute_force_truth_matches_scan(tmp_path):
    spec = ScenarioSpec(seed=2, duration=1500, injections=[{"kind": "brute_force", "start": 100}])
    sc = generate(spec)
    paths = sc.write(tmp_path)
    fails = [k for k, i in sc.truth.injected.items() if sc.rows[k[0]][k[1]]["event_id"] == 4625]
    wins = [k for k, i in sc.truth.injected.items() if sc.rows[k[0]][k[1]]["event_id"] == 4624]
    assert (len(fails), len(wins)) == (20, 1)
    # annotations sit only on injected rows
    assert set(sc.truth.labels) <= set(sc.truth.injected)
    assert {c.cluster_id for c in sc.truth.clusters} == {"password_guessing", "brute_force_compromise"}
    # rescan the written rows with the rule definitions
    store = Store(load_default_registry())
    for s in FILES:
        store.ingest_file(s, paths[s])
    doc = json.loads(default_ruleset_path().read_text())
    scanned = brute_label(store, doc, (spec.start, spec.start + spec.duration))
    labels = [r["label"] for r in doc["rules"]]
    found = {}
    for s, m in scanned.items():
        for i in np.flatnonzero(m.any(axis=1)):
            found[(s, int(store.tables[s].raw_index[i]))] = {labels[j] for j in np.flatnonzero(m[i])}
    assert found == {k: set(v) for k, v in sc.truth.labels.items()}
    for c in sc.truth.clusters:
        assert set(c.members) <= set(sc.truth.labels)


def test_port_scan_construction():
    stream = Stream()
    keys = inject_behavior("port_scan", {"src_ip": "10.9.9.9", "ports": 50}, stream, 0, 0.0)
    rows = [stream.rows["conn"][r] for _, r in keys]
    assert len(rows) == 50 and {r["src_ip"] for r in rows} == {"10.9.9.9"}
    assert len({r["dst_port"] for r in rows}) == 50


def test_audit_policy_change_event():
    stream = Stream()
    keys = inject_behavior("audit_policy_change", {}, stream, 3, 0.0)
    assert len(keys) == 1
    assert stream.rows["auth"][keys[0][1]]["event_id"] in AUDIT_EVENTS
    assert set(AUDIT_EVENTS) == {4719, 4715, 4812, 4885}


def test_beaconing_inter_arrival():
    stream = Stream()
    keys = inject_behavior("beaconing", {"period": 60.0, "count": 10, "jitter": 5.0}, stream, 0, 0.0)
    ts = np.array([stream.rows["conn"][r]["ts"] for _, r in keys])
    gaps = np.diff(ts)
    assert len(ts) == 10
    assert np.all(np.abs(gaps - 60.0) <= 10.0)


def test_bad_specs():
    with pytest.raises(ScenarioError):
        generate(ScenarioSpec(duration=600, injections=[{"kind": "teleport", "start": 1}]))
    with pytest.raises(ScenarioError):
        generate(ScenarioSpec(duration=600, injections=[{"kind": "brute_force", "start": 500}]))
    with pytest.raises(ScenarioError):
        ScenarioSpec.from_dict({"sed": 1})
