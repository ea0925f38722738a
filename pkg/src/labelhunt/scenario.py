"""Seeded synthetic multi-sensor scenarios with ground truth.

A scenario spec is a JSON object::

    {"seed": 1, "duration": 7200, "start": 1700000000,
     "hosts": 40, "users": 30, "servers": 12,
     "rates": {"conn": 10.0, "auth": 0.5, "web": 3.0},
     "injections": [{"kind": "brute_force", "start": 1200, ...}],
     "random_injections": {"per_kind": 2, "kinds": [...], "span": [0.05, 0.95]}}

Rates are rows per second (Poisson arrivals).  Injection ``start`` is
seconds from the scenario start.  Output files: ``conn.log`` (tab-separated
with a ``#fields`` header), ``auth.jsonl``, ``web.csv`` and ``truth.json``.

Benign traffic is constructed so that none of the default rules fire on it:
hosts talk to at most 12 service ports, established connections always send
at least 1000 bytes, a benign failed logon is a single typo followed by a
success 5-20 s later (at least 700 s apart per user), web servers never
redirect and each server's (TLS version, cipher) pairs have probability
>= 0.2.  Each injection uses its own reserved actor addresses or accounts so
its rows never mix with benign entities.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ScenarioError

KINDS = (
    "abandoned_logon", "brute_force", "port_scan", "audit_policy_change",
    "anomalous_cipher", "beaconing", "http_redirect_chain",
)
AUDIT_EVENTS = (4719, 4715, 4812, 4885)
REDIRECT_STATUS = (301, 302, 303, 307, 308)

CONN_FIELDS = ["ts", "src_ip", "src_port", "dst_ip", "dst_port", "proto", "service",
               "duration", "bytes_out", "bytes_in", "pkts", "conn_state"]
AUTH_FIELDS = ["ts", "host", "user", "src_ip", "event_id", "logon_type"]
WEB_FIELDS = ["ts", "src_ip", "dst_ip", "dst_port", "server_name", "method", "status",
              "tls_version", "cipher", "bytes_out", "bytes_in"]
FILES = {"conn": "conn.log", "auth": "auth.jsonl", "web": "web.csv"}

SERVICES = [(53, "udp", "dns"), (80, "tcp", "http"), (443, "tcp", "ssl"), (22, "tcp", "ssh"),
            (25, "tcp", "smtp"), (123, "udp", "ntp"), (445, "tcp", "smb"), (3389, "tcp", "rdp"),
            (8080, "tcp", "http"), (993, "tcp", "imaps"), (389, "tcp", "ldap"), (88, "tcp", "krb")]
TLS_PAIRS = [("TLSv1.2", "ECDHE-RSA-AES128-GCM-SHA256"), ("TLSv1.2", "ECDHE-RSA-AES256-GCM-SHA384"),
             ("TLSv1.3", "TLS_AES_128_GCM_SHA256"), ("TLSv1.3", "TLS_AES_256_GCM_SHA384"),
             ("TLSv1.3", "TLS_CHACHA20_POLY1305_SHA256")]
WEAK_PAIRS = [("TLSv1.0", "RC4-MD5"), ("SSLv3", "EXP-RC4-MD5"), ("TLSv1.0", "DES-CBC3-SHA")]

# cluster definitions each injection kind is expected to produce
CLUSTER_OF = {
    "abandoned_logon": "password_guessing",
    "brute_force": "brute_force_compromise",
    "port_scan": "network_recon",
    "audit_policy_change": "audit_tampering",
    "anomalous_cipher": "tls_anomaly",
    "beaconing": "c2_beaconing",
    "http_redirect_chain": "redirect_chain",
}

DEFAULTS = {
    "seed": 0, "duration": 3600.0, "start": 1_700_000_000.0,
    "hosts": 40, "users": 30, "servers": 12,
    "rates": {"conn": 10.0, "auth": 0.5, "web": 3.0},
    "injections": [],
}


@dataclass
class ScenarioSpec:
    seed: int = 0
    duration: float = 3600.0
    start: float = 1_700_000_000.0
    hosts: int = 40
    users: int = 30
    servers: int = 12
    rates: Dict[str, float] = field(default_factory=lambda: dict(DEFAULTS["rates"]))
    injections: List[dict] = field(default_factory=list)
    random_injections: Optional[dict] = None

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ScenarioError(f"unknown scenario keys {sorted(unknown)}")
        spec = cls(**{k: v for k, v in data.items()})
        spec.rates = {**DEFAULTS["rates"], **(data.get("rates") or {})}
        return spec

    @classmethod
    def load(cls, path) -> "ScenarioSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "duration": self.duration, "start": self.start,
            "hosts": self.hosts, "users": self.users, "servers": self.servers,
            "rates": dict(self.rates), "injections": list(self.injections),
            "random_injections": self.random_injections,
        }


@dataclass
class TruthCluster:
    injection: int
    kind: str
    cluster_id: str
    bind: Dict[str, str]
    members: List[Tuple[str, int]]
    span: Tuple[float, float]


@dataclass
class GroundTruth:
    labels: Dict[Tuple[str, int], Tuple[str, ...]]
    clusters: List[TruthCluster]
    injected: Dict[Tuple[str, int], int]          # row key -> injection number
    rows: Dict[str, int]

    def labels_of(self, sensor: str, raw_index: int) -> Tuple[str, ...]:
        return self.labels.get((sensor, int(raw_index)), ())

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "rows": self.rows,
            "labels": [{"sensor_id": s, "raw_index": r, "labels": list(ls)}
                       for (s, r), ls in sorted(self.labels.items())],
            "injected": [{"sensor_id": s, "raw_index": r, "injection": i}
                         for (s, r), i in sorted(self.injected.items())],
            "clusters": [
                {"injection": c.injection, "kind": c.kind, "cluster_id": c.cluster_id,
                 "bind": c.bind, "members": [list(m) for m in c.members], "span": list(c.span)}
                for c in self.clusters
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GroundTruth":
        return cls(
            labels={(d["sensor_id"], d["raw_index"]): tuple(d["labels"]) for d in data["labels"]},
            clusters=[TruthCluster(c["injection"], c["kind"], c["cluster_id"], c["bind"],
                                   [tuple(m) for m in c["members"]], tuple(c["span"]))
                      for c in data["clusters"]],
            injected={(d["sensor_id"], d["raw_index"]): d["injection"] for d in data["injected"]},
            rows=dict(data["rows"]),
        )

    @classmethod
    def load(cls, path) -> "GroundTruth":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- the row stream ---------------------------------------------------------------


class Stream:
    """Unsorted per-sensor rows plus the truth attached to injected rows."""

    def __init__(self):
        self.rows: Dict[str, List[dict]] = {"conn": [], "auth": [], "web": []}
        self.truth: Dict[Tuple[str, int], Tuple[str, ...]] = {}
        self.owner: Dict[Tuple[str, int], int] = {}
        self.clusters: List[dict] = []

    def add(self, sensor: str, row: dict, labels: Sequence[str] = (), injection: int = -1) -> Tuple[str, int]:
        row["ts"] = _ts(row["ts"])
        key = (sensor, len(self.rows[sensor]))
        self.rows[sensor].append(row)
        if injection >= 0:
            self.owner[key] = injection
            if labels:
                self.truth[key] = tuple(labels)
        return key


def _ts(t: float) -> float:
    """Round to the precision written to disk so truth and files agree."""
    return float(f"{t:.6f}")


# -- benign traffic ------------------------------------------------------------------


class _World:
    def __init__(self, spec: ScenarioSpec, rng: np.random.Generator):
        self.hosts = [f"10.0.{2 + i // 250}.{i % 250 + 1}" for i in range(spec.hosts)]
        self.host_names = [f"ws-{i:03d}" for i in range(spec.hosts)]
        self.users = [f"u{i:03d}" for i in range(spec.users)]
        self.user_host = {u: int(rng.integers(spec.hosts)) for u in self.users}
        self.servers = [f"93.184.216.{i + 10}" for i in range(spec.servers)]
        self.server_names = [f"site-{i:02d}.example" for i in range(spec.servers)]
        self.server_pairs = []
        for _ in range(spec.servers):
            k = int(rng.integers(1, 4))
            pick = rng.choice(len(TLS_PAIRS), size=k, replace=False)
            # probabilities >= 0.2 each
            raw = rng.uniform(1.0, 2.0, size=k)
            probs = raw / raw.sum()
            self.server_pairs.append(([TLS_PAIRS[j] for j in pick], probs))
        self.port_profile = []
        for _ in range(spec.hosts):
            k = int(rng.integers(4, 9))
            self.port_profile.append(rng.choice(len(SERVICES), size=k, replace=False))
        self.internal_servers = [f"10.0.1.{i}" for i in range(2, 12)]
        self.external = [f"151.101.{i // 250}.{i % 250 + 1}" for i in range(30)]


def _arrivals(rng: np.random.Generator, rate: float, duration: float) -> np.ndarray:
    n = int(rng.poisson(rate * duration))
    return np.sort(rng.uniform(0.0, duration, size=n))


def _benign_conn(stream: Stream, world: _World, rng, t0: float, times: np.ndarray) -> None:
    n = len(times)
    hosts = rng.integers(len(world.hosts), size=n)
    pick = rng.random(n)
    src_port = rng.integers(1024, 65536, size=n)
    dur = rng.exponential(2.0, size=n)
    out = 1000 + np.floor(rng.lognormal(7.0, 1.2, size=n))
    inn = np.floor(rng.lognormal(8.0, 1.5, size=n))
    pk = 2 + np.floor((out + inn) / 900)
    state_u = rng.random(n)
    dst_u = rng.random(n)
    for i in range(n):
        h = int(hosts[i])
        prof = world.port_profile[h]
        port, proto, service = SERVICES[int(prof[int(pick[i] * len(prof))])]
        if port in (80, 443, 8080, 123):
            dst = world.external[int(dst_u[i] * len(world.external))]
        else:
            dst = world.internal_servers[int(dst_u[i] * len(world.internal_servers))]
        s = state_u[i]
        if s < 0.92:
            state, b_out, b_in, pkts = "SF", int(out[i]), int(inn[i]), int(pk[i])
        elif s < 0.96:
            state, b_out, b_in, pkts = "S0", 0, 0, 1
        elif s < 0.98:
            state, b_out, b_in, pkts = "REJ", 0, 0, 2
        else:
            state, b_out, b_in, pkts = "RSTO", int(out[i]), int(inn[i] // 4), int(pk[i])
        stream.add("conn", {
            "ts": t0 + times[i], "src_ip": world.hosts[h], "src_port": int(src_port[i]),
            "dst_ip": dst, "dst_port": port, "proto": proto, "service": service,
            "duration": round(float(dur[i]), 6), "bytes_out": b_out, "bytes_in": b_in,
            "pkts": pkts, "conn_state": state,
        })


def _benign_auth(stream: Stream, world: _World, rng, t0: float, times: np.ndarray,
                 duration: float) -> None:
    n = len(times)
    users = rng.integers(len(world.users), size=n)
    kind = rng.random(n)
    dc = rng.integers(2, size=n)
    last_fail = {u: -1e18 for u in world.users}
    for i in range(n):
        u = world.users[int(users[i])]
        h = world.user_host[u]
        t = float(times[i])
        base = {"host": f"dc{int(dc[i]) + 1:02d}", "user": u, "src_ip": world.hosts[h]}
        k = kind[i]
        if k < 0.03 and t - last_fail[u] >= 700.0 and t + 25.0 < duration:
            last_fail[u] = t
            stream.add("auth", {"ts": t0 + t, **base, "event_id": 4625, "logon_type": 3})
            delay = float(rng.uniform(5.0, 20.0))
            stream.add("auth", {"ts": t0 + t + delay, **base, "event_id": 4624, "logon_type": 3})
            continue
        if k < 0.60:
            ev, lt = 4624, int(rng.choice([2, 3, 3, 10]))
        elif k < 0.85:
            ev, lt = 4634, 3
        elif k < 0.95:
            ev, lt = 4672, 3
        else:
            ev, lt = 4648, 2
        stream.add("auth", {"ts": t0 + t, **base, "event_id": ev, "logon_type": lt})


def _benign_web(stream: Stream, world: _World, rng, t0: float, times: np.ndarray) -> None:
    n = len(times)
    hosts = rng.integers(len(world.hosts), size=n)
    servers = rng.integers(len(world.servers), size=n)
    u_pair = rng.random(n)
    u_status = rng.random(n)
    method = rng.random(n)
    b_out = np.floor(rng.lognormal(6.0, 0.8, size=n))
    b_in = np.floor(rng.lognormal(9.0, 1.5, size=n))
    for i in range(n):
        s = int(servers[i])
        pairs, probs = world.server_pairs[s]
        j = int(np.searchsorted(np.cumsum(probs), u_pair[i] * probs.sum(), side="right"))
        version, cipher = pairs[min(j, len(pairs) - 1)]
        us = u_status[i]
        status = 200 if us < 0.85 else 304 if us < 0.92 else 404 if us < 0.97 else 204 if us < 0.99 else 500
        stream.add("web", {
            "ts": t0 + times[i], "src_ip": world.hosts[int(hosts[i])], "dst_ip": world.servers[s],
            "dst_port": 443, "server_name": world.server_names[s],
            "method": "GET" if method[i] < 0.8 else "POST", "status": status,
            "tls_version": version, "cipher": cipher,
            "bytes_out": int(b_out[i]), "bytes_in": int(b_in[i]),
        })


# -- injections -------------------------------------------------------------------


def _actor(i: int) -> str:
    return f"185.220.{100 + i // 250}.{i % 250 + 1}"


def _client(i: int) -> str:
    return f"10.66.{i // 250}.{i % 250 + 1}"


def _count_in(times: Sequence[float], lo: float, hi: float) -> int:
    """Number of ``times`` in (lo, hi]."""
    return sum(1 for x in times if lo < x <= hi)


def _auth_truth(fails: List[float], success: Optional[float]) -> Tuple[List[List[str]], List[str]]:
    """Labels implied for a failure sequence (and optional success) of one account."""
    fail_labels = []
    for k, t in enumerate(fails):
        labels = []
        if _count_in(fails[:k + 1], t - 300.0, t) >= 2 and not (success is not None and t < success <= t + 300.0):
            labels.append("abandoned_logon")
        if _count_in(fails[:k + 1], t - 600.0, t) >= 10:
            labels.append("failed_logon_burst")
        fail_labels.append(labels)
    success_labels = []
    if success is not None and _count_in(fails, success - 600.0, success) >= 5:
        success_labels.append("logon_after_failures")
    return fail_labels, success_labels


def inject_behavior(kind: str, params: dict, stream: Stream, number: int, t0: float,
                    world: Optional[_World] = None, rng: Optional[np.random.Generator] = None) -> List[Tuple[str, int]]:
    """Append one behavior's rows to ``stream``; returns the row keys added.

    ``params["start"]`` is seconds from the scenario start.  Truth labels and
    expected clusters are recorded on the stream.
    """
    if kind not in KINDS:
        raise ScenarioError(f"unknown injection kind {kind!r}; expected one of {list(KINDS)}")
    rng = rng if rng is not None else np.random.default_rng(number)
    p = dict(params)
    start = t0 + float(p.get("start", 0.0))
    keys: List[Tuple[str, int]] = []
    clusters: List[Tuple[str, Dict[str, str], List[Tuple[str, int]]]] = []

    if kind in ("abandoned_logon", "brute_force"):
        brute = kind == "brute_force"
        user = p.get("user", f"svc_{'bf' if brute else 'pg'}{number:03d}")
        src = p.get("src_ip", _actor(number))
        host = p.get("host", "dc01")
        n = int(p.get("failures", 20 if brute else 3))
        gap = float(p.get("spacing", 30.0 if brute else 20.0))
        fails = [_ts(start + k * gap) for k in range(n)]
        success = _ts(fails[-1] + float(p.get("success_delay", gap))) if p.get("success", brute) else None
        fail_labels, success_labels = _auth_truth(fails, success)
        for t, labels in zip(fails, fail_labels):
            keys.append(stream.add("auth", {"ts": t, "host": host, "user": user, "src_ip": src,
                                            "event_id": 4625, "logon_type": 3}, labels, number))
        if success is not None:
            keys.append(stream.add("auth", {"ts": success, "host": host, "user": user, "src_ip": src,
                                            "event_id": 4624, "logon_type": 3}, success_labels, number))
        bind_user = {"user": user}
        abandoned = [k for k in keys if "abandoned_logon" in stream.truth.get(k, ())]
        burst = [k for k in keys if "failed_logon_burst" in stream.truth.get(k, ())]
        after = [k for k in keys if "logon_after_failures" in stream.truth.get(k, ())]
        if abandoned:
            clusters.append(("password_guessing", bind_user, abandoned))
        if burst and after:
            clusters.append(("brute_force_compromise", {"user": user, "src_ip": src}, burst + after))

    elif kind == "port_scan":
        src = p.get("src_ip", _actor(number))
        dst = p.get("dst_ip") or (world.hosts[int(rng.integers(len(world.hosts)))] if world else "10.0.2.1")
        n = int(p.get("ports", 50))
        gap = float(p.get("spacing", 0.2))
        ports = rng.choice(np.arange(1, 10000), size=n, replace=False)
        for k in range(n):
            labels = ["port_scan"] if k + 1 >= 40 else []
            keys.append(stream.add("conn", {
                "ts": start + k * gap, "src_ip": src, "src_port": int(40000 + k), "dst_ip": dst,
                "dst_port": int(ports[k]), "proto": "tcp", "service": "-", "duration": 0.0,
                "bytes_out": 0, "bytes_in": 0, "pkts": 2, "conn_state": "REJ"}, labels, number))
        hits = [k for k in keys if k in stream.truth]
        if hits:
            clusters.append(("network_recon", {"src_ip": src}, hits))

    elif kind == "audit_policy_change":
        host = p.get("host") or (world.host_names[number % len(world.host_names)] if world else "ws-000")
        event = int(p.get("event_id", AUDIT_EVENTS[int(rng.integers(len(AUDIT_EVENTS)))]))
        if event not in AUDIT_EVENTS:
            raise ScenarioError(f"audit_policy_change event_id must be one of {AUDIT_EVENTS}")
        key = stream.add("auth", {"ts": start, "host": host, "user": p.get("user", f"svc_adm{number:03d}"),
                                  "src_ip": p.get("src_ip", _client(number)), "event_id": event,
                                  "logon_type": 3}, ["audit_policy_change"], number)
        keys.append(key)
        clusters.append(("audit_tampering", {"host": host}, [key]))

    elif kind == "anomalous_cipher":
        src = p.get("src_ip", _client(number))
        s = int(p.get("server", rng.integers(len(world.servers)) if world else 0))
        dst = world.servers[s] if world else "93.184.216.10"
        name = world.server_names[s] if world else "site-00.example"
        version, cipher = p.get("pair") or WEAK_PAIRS[int(rng.integers(len(WEAK_PAIRS)))]
        for k in range(int(p.get("count", 3))):
            keys.append(stream.add("web", {
                "ts": start + k * float(p.get("spacing", 5.0)), "src_ip": src, "dst_ip": dst,
                "dst_port": 443, "server_name": name, "method": "GET", "status": 200,
                "tls_version": version, "cipher": cipher, "bytes_out": 420, "bytes_in": 5100},
                ["anomalous_cipher"], number))
        clusters.append(("tls_anomaly", {"src_ip": src, "dst_ip": dst}, list(keys)))

    elif kind == "beaconing":
        src = p.get("src_ip", f"10.99.{number // 250}.{number % 250 + 1}")
        dst = p.get("dst_ip", f"203.0.{113 + number // 250}.{number % 250 + 1}")
        period = float(p.get("period", 60.0))
        jitter = float(p.get("jitter", 5.0))
        count = int(p.get("count", 10))
        offsets = rng.uniform(-jitter, jitter, size=count)
        times = [_ts(start + k * period + float(offsets[k]) + jitter) for k in range(count)]
        for k, t in enumerate(times):
            labels = ["beaconing"] if _count_in(times[:k + 1], t - 900.0, t) >= 6 else []
            keys.append(stream.add("conn", {
                "ts": t, "src_ip": src, "src_port": int(50000 + k), "dst_ip": dst,
                "dst_port": int(p.get("dst_port", 443)), "proto": "tcp", "service": "ssl",
                "duration": 0.35, "bytes_out": int(200 + rng.integers(0, 500)), "bytes_in": 320,
                "pkts": 6, "conn_state": "SF"}, labels, number))
        hits = [k for k in keys if k in stream.truth]
        if hits:
            clusters.append(("c2_beaconing", {"src_ip": src, "dst_ip": dst}, hits))

    elif kind == "http_redirect_chain":
        src = p.get("src_ip", _client(1000 + number))
        s = int(p.get("server", rng.integers(len(world.servers)) if world else 0))
        dst = world.servers[s] if world else "93.184.216.10"
        name = world.server_names[s] if world else "site-00.example"
        pair = world.server_pairs[s][0][int(np.argmax(world.server_pairs[s][1]))] if world else TLS_PAIRS[0]
        hops = int(p.get("hops", 4))
        times = [_ts(start + k * float(p.get("spacing", 2.0))) for k in range(hops)]
        for k, t in enumerate(times):
            labels = ["http_redirect_chain"] if _count_in(times[:k + 1], t - 30.0, t) >= 3 else []
            keys.append(stream.add("web", {
                "ts": t, "src_ip": src, "dst_ip": dst, "dst_port": 443, "server_name": name,
                "method": "GET", "status": REDIRECT_STATUS[k % 2], "tls_version": pair[0],
                "cipher": pair[1], "bytes_out": 380, "bytes_in": 240}, labels, number))
        hits = [k for k in keys if k in stream.truth]
        if hits:
            clusters.append(("redirect_chain", {"src_ip": src}, hits))

    for cid, bind, members in clusters:
        stream.clusters.append({"injection": number, "kind": kind, "cluster_id": cid,
                                "bind": bind, "members": members})
    return keys


_SPAN = {"abandoned_logon": 400.0, "brute_force": 1000.0, "port_scan": 20.0,
         "audit_policy_change": 1.0, "anomalous_cipher": 20.0, "beaconing": 1000.0,
         "http_redirect_chain": 20.0}


def _expand_random(spec: ScenarioSpec, rng: np.random.Generator) -> List[dict]:
    cfg = spec.random_injections
    if not cfg:
        return []
    kinds = cfg.get("kinds", list(KINDS))
    per = int(cfg.get("per_kind", 1))
    lo, hi = cfg.get("span", [0.05, 0.95])
    out = []
    for kind in kinds:
        for _ in range(per):
            latest = hi * spec.duration - _SPAN.get(kind, 60.0)
            earliest = lo * spec.duration
            if latest <= earliest:
                raise ScenarioError(f"duration {spec.duration} too short for random {kind} injections")
            out.append({"kind": kind, "start": round(float(rng.uniform(earliest, latest)), 3)})
    return out


# -- generation ------------------------------------------------------------------------


@dataclass
class Scenario:
    spec: ScenarioSpec
    rows: Dict[str, List[dict]]          # time-sorted, index = raw_index
    truth: GroundTruth
    injections: List[dict]

    def write(self, directory) -> Dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {}
        for sensor, name in FILES.items():
            path = directory / name
            path.write_text(render_sensor(sensor, self.rows[sensor]), encoding="utf-8")
            paths[sensor] = path
        truth = directory / "truth.json"
        truth.write_text(json.dumps(self.truth.to_dict(), sort_keys=True) + "\n")
        paths["truth"] = truth
        (directory / "scenario.json").write_text(
            json.dumps({"spec": self.spec.to_dict(), "injections": self.injections},
                       indent=2, sort_keys=True) + "\n")
        return paths


def render_sensor(sensor: str, rows: List[dict]) -> str:
    if sensor == "conn":
        out = ["#separator \\x09", "#fields\t" + "\t".join(CONN_FIELDS)]
        for r in rows:
            out.append("\t".join(_fmt(r[f]) if f != "ts" else f"{r['ts']:.6f}" for f in CONN_FIELDS))
        return "\n".join(out) + "\n"
    if sensor == "auth":
        return "".join(
            json.dumps({"ts": float(f"{r['ts']:.6f}"), **{f: r[f] for f in AUTH_FIELDS[1:]}},
                       separators=(",", ":")) + "\n"
            for r in rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(WEB_FIELDS)
    for r in rows:
        w.writerow([f"{r['ts']:.6f}"] + [_fmt(r[f]) for f in WEB_FIELDS[1:]])
    return buf.getvalue()


def _fmt(v: Any) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def generate(spec: ScenarioSpec) -> Scenario:
    """Build the full scenario in memory (call ``.write`` to emit files)."""
    if isinstance(spec, dict):
        spec = ScenarioSpec.from_dict(spec)
    if spec.duration <= 0:
        raise ScenarioError("duration must be > 0")
    rng = np.random.default_rng(spec.seed)
    world = _World(spec, rng)
    injections = list(spec.injections) + _expand_random(spec, rng)
    for i, inj in enumerate(injections):
        kind = inj.get("kind")
        if kind not in KINDS:
            raise ScenarioError(f"injection {i}: unknown kind {kind!r}")
        start = float(inj.get("start", -1))
        if not 0 <= start or start + _SPAN[kind] > spec.duration:
            raise ScenarioError(
                f"injection {i} ({kind}) at {start} s does not fit in duration {spec.duration} s")
    stream = Stream()
    t0 = float(spec.start)
    _benign_conn(stream, world, rng, t0, _arrivals(rng, spec.rates.get("conn", 0.0), spec.duration))
    _benign_auth(stream, world, rng, t0, _arrivals(rng, spec.rates.get("auth", 0.0), spec.duration),
                 spec.duration)
    _benign_web(stream, world, rng, t0, _arrivals(rng, spec.rates.get("web", 0.0), spec.duration))
    for i, inj in enumerate(injections):
        params = {k: v for k, v in inj.items() if k != "kind"}
        inject_behavior(inj["kind"], params, stream, i, t0, world,
                        np.random.default_rng([spec.seed, i]))
    # sort each sensor by time (stable) and remap keys to file ordinals
    rows: Dict[str, List[dict]] = {}
    remap: Dict[Tuple[str, int], Tuple[str, int]] = {}
    for sensor, items in stream.rows.items():
        ts = np.array([r["ts"] for r in items], dtype=np.float64)
        order = np.argsort(ts, kind="stable")
        rows[sensor] = [items[j] for j in order]
        for new, old in enumerate(order.tolist()):
            remap[(sensor, old)] = (sensor, new)
    labels = {remap[k]: v for k, v in stream.truth.items()}
    owner = {remap[k]: v for k, v in stream.owner.items()}
    clusters = []
    for c in stream.clusters:
        members = sorted(remap[m] for m in c["members"])
        times = [rows[s][r]["ts"] for s, r in members]
        clusters.append(TruthCluster(c["injection"], c["kind"], c["cluster_id"], c["bind"],
                                     members, (min(times), max(times))))
    truth = GroundTruth(labels, clusters, owner, {s: len(r) for s, r in rows.items()})
    return Scenario(spec, rows, truth, injections)


def generate_to(spec: ScenarioSpec, directory) -> Tuple[Dict[str, Path], GroundTruth]:
    scenario = generate(spec)
    return scenario.write(directory), scenario.truth
