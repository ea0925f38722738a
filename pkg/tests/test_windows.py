import numpy as np
from hypothesis import given, settings, strategies as st

from labelhunt.log_store import Store, load_default_registry
from labelhunt.windows import WindowCursor, build_plan, fetch_window
from oracles import reference_windows


def _store(counts, seed=0):
    """Random rows for the named sensors, with ``counts[s]`` rows each."""
    rng = np.random.default_rng(seed)
    store = Store(load_default_registry())
    for s, n in counts.items():
        ts = np.sort(rng.uniform(0, 1000, n)).round(3)
        store.add_records(s, [(float(t), {"src_ip": "10.0.0.1", "dst_ip": "10.0.0.2", "bytes_out": float(k)})
                              for k, t in enumerate(ts)])
    return store


def test_full_batch_shapes_all_present():
    store = _store({"conn": 3000, "auth": 3000, "web": 3000})
    batch = fetch_window(store, WindowCursor(), 2, 100, ["conn", "auth", "web"])
    for s in batch.sensors:
        width = sum(1 for f in store.registry.get(s).value_fields if f.numeric)
        assert batch.blocks[s].shape == (2, 100, width)
    assert batch.presence.all()


def test_absent_sensor_is_zero_and_masked():
    store = _store({"conn": 500, "web": 200})
    with_auth = fetch_window(store, WindowCursor(), 2, 100, ["conn", "auth", "web"])
    without = fetch_window(store, WindowCursor(), 2, 100, ["conn", "web"])
    j = with_auth.sensors.index("auth")
    assert not with_auth.presence[:, j].any()
    assert not with_auth.blocks["auth"].any() and not with_auth.row_mask["auth"].any()
    for s in ("conn", "web"):
        assert np.array_equal(with_auth.blocks[s], without.blocks[s])


def test_short_tail_is_padded():
    store = _store({"conn": 150})
    cur = WindowCursor()
    first = fetch_window(store, cur, 1, 100, ["conn"])
    second = fetch_window(store, cur, 1, 100, ["conn"])
    third = fetch_window(store, cur, 1, 100, ["conn"])
    ref = reference_windows(150, 100)
    assert first.row_mask["conn"].sum() == 100 and second.row_mask["conn"].sum() == 50
    assert first.rows["conn"][0].tolist() == ref[0]
    assert second.rows["conn"][0, :50].tolist() == ref[1]
    assert (second.raw_index["conn"][0, 50:] == -1).all()
    assert third.size == 0


def test_zeroed_copy():
    store = _store({"conn": 300, "web": 300})
    batch = fetch_window(store, WindowCursor(), 2, 50, ["conn", "web"])
    z = batch.zeroed("web")
    assert not z.blocks["web"].any() and not z.presence[:, 1].any()
    assert np.array_equal(z.blocks["conn"], batch.blocks["conn"])


def test_independent_cursors():
    store = _store({"conn": 400})
    a, b = WindowCursor(), WindowCursor()
    fetch_window(store, a, 2, 50, ["conn"])
    first_b = fetch_window(store, b, 1, 50, ["conn"])
    assert first_b.elements.tolist() == [0] and a.position == 2


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 120), st.integers(0, 120), st.integers(1, 40), st.integers(0, 10_000))
def test_every_row_in_exactly_one_element(n_conn, n_web, n, seed):
    store = _store({"conn": n_conn, "web": n_web}, seed)
    plan = build_plan(store, n, ["conn", "web"])
    for s, count in (("conn", n_conn), ("web", n_web)):
        elem = plan.element_of_rows(s, count) if count else np.zeros(0, dtype=int)
        assert (elem >= 0).all()
        assert (plan.counts[s] <= n).all() and plan.counts[s].sum() == count
        # elements are contiguous and in order
        assert np.all(np.diff(elem) >= 0)
