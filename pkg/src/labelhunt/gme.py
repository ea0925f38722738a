"""Gated mixture of experts: multilabel row classification across sensors.

Per sensor s, an expert maps each row's input ``[x_r, mean of x over the
row's window element]`` through two ReLU layers to a feature vector h_r.
Experts are pretrained as standalone per-row classifiers on their sensor's
labels, then frozen.

For a window element e the gate sees, per present sensor, the window mean of
the encoded rows plus the fraction of the N slots filled, and produces one
logit per sensor (tanh hidden layer).  A softmax over the present sensors
gives weights g_es (absent sensors get exactly 0).  The context vector is
c_e = sum_s g_es * m_es where m_es is the mean expert feature of sensor s in
e.  Each row is classified by a shared head on ``[g_es * h_r, c_e,
onehot(s)]`` -> tanh -> one sigmoid per label, trained with class-weighted
binary cross-entropy.  Gradients are derived by hand.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .encoding import SensorEncoder
from .errors import FrozenModelError, SchemaError, TrainingDivergedError, TrainingError
from .labels import LabeledStore
from .log_store import SensorSchema, Store
from .nn import (Momentum, Params, bce_with_logits, f1_score, glorot_init, he_init, params_from_json,
                 params_hash, params_to_json, sigmoid)
from .windows import WindowBatch, WindowPlan, build_plan, window_means

CHECKPOINT_VERSION = 1


@dataclass
class TrainingConfig:
    batch_size: int = 64            # window elements per inference batch (B)
    window: int = 100               # rows per sensor per element (N)
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 30
    expert_epochs: int = 40
    batch_rows: int = 512
    neg_per_epoch: int = 20000
    max_pos_weight: float = 20.0
    sensor_dropout: float = 0.15
    gate_hidden: int = 8
    head_hidden: int = 32
    expert_widths: Tuple[int, int] = (64, 32)
    weight_decay: float = 1e-3
    tau: float = 0.5
    tune_tau: bool = True
    seed: int = 0
    zero_sensors: Tuple[str, ...] = ()

    def __post_init__(self):
        self.expert_widths = tuple(self.expert_widths)
        self.zero_sensors = tuple(self.zero_sensors)
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.window < 1 or self.batch_size < 1:
            raise ValueError("window and batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "TrainingConfig":
        return cls(**(d or {}))


# -- experts ------------------------------------------------------------------------


class ExpertModel:
    """Two-layer ReLU encoder for one sensor; pretrained with a detachable head."""

    def __init__(self, sensor_id: str, input_width: int, widths: Sequence[int], labels: Sequence[str],
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        w0, w1 = widths
        self.sensor_id = sensor_id
        self.input_width = input_width
        self.widths = (int(w0), int(w1))
        self.labels = list(labels)
        self.params: Params = {
            "W1": he_init(rng, input_width, w0), "b1": np.zeros(w0),
            "W2": he_init(rng, w0, w1), "b2": np.zeros(w1),
        }
        self.head: Optional[Params] = {"W3": glorot_init(rng, w1, len(labels)), "b3": np.zeros(len(labels))}
        self.probe_head: Optional[Params] = None
        self.frozen = False
        self.history: List[float] = []

    @property
    def feature_width(self) -> int:
        return self.widths[1]

    def features(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.input_width:
            raise SchemaError(f"expert {self.sensor_id!r} expects width {self.input_width}, got {x.shape[1]}")
        p = self.params
        h1 = np.maximum(x @ p["W1"].T + p["b1"], 0.0)
        return np.maximum(h1 @ p["W2"].T + p["b2"], 0.0)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """Per-label probabilities from the pretraining head."""
        head = self.head if self.head is not None else self.probe_head
        if head is None:
            raise TrainingError("expert has no classifier head")
        return sigmoid(self.features(x) @ head["W3"].T + head["b3"])

    def loss_grad(self, x: np.ndarray, y: np.ndarray, w: np.ndarray) -> Tuple[float, Params]:
        p, hd = self.params, self.head
        a1 = x @ p["W1"].T + p["b1"]
        h1 = np.maximum(a1, 0.0)
        a2 = h1 @ p["W2"].T + p["b2"]
        h2 = np.maximum(a2, 0.0)
        o = h2 @ hd["W3"].T + hd["b3"]
        n = len(x)
        loss = float((w * bce_with_logits(o, y)).sum() / n)
        do = w * (sigmoid(o) - y) / n
        g = {"W3": do.T @ h2, "b3": do.sum(0)}
        dh2 = (do @ hd["W3"]) * (a2 > 0)
        g["W2"] = dh2.T @ h1
        g["b2"] = dh2.sum(0)
        dh1 = (dh2 @ p["W2"]) * (a1 > 0)
        g["W1"] = dh1.T @ x
        g["b1"] = dh1.sum(0)
        return loss, g

    def apply_update(self, opt: Momentum, grads: Params) -> None:
        if self.frozen:
            raise FrozenModelError(f"expert {self.sensor_id!r} is frozen")
        both = {**{f"e.{k}": v for k, v in self.params.items()}, **{f"e.{k}": v for k, v in self.head.items()}}
        opt.step(both, {f"e.{k}": v for k, v in grads.items()})
        for k in self.params:
            self.params[k] = both[f"e.{k}"]
        for k in self.head:
            self.head[k] = both[f"e.{k}"]

    def freeze(self) -> None:
        """Detach the classifier head from the model and make parameters read-only.

        The detached head stays available as ``probe_head`` for evaluation only.
        """
        if self.head is not None:
            self.probe_head = self.head
        self.head = None
        for v in list(self.params.values()) + list((self.probe_head or {}).values()):
            v.setflags(write=False)
        self.frozen = True

    def digest(self) -> str:
        return params_hash(self.params)

    def to_dict(self) -> dict:
        return {
            "sensor_id": self.sensor_id, "input_width": self.input_width, "widths": list(self.widths),
            "labels": self.labels, "frozen": self.frozen, "history": self.history,
            "params": params_to_json(self.params),
            "head": params_to_json(self.head or self.probe_head) if (self.head or self.probe_head) else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExpertModel":
        e = cls.__new__(cls)
        e.sensor_id = d["sensor_id"]
        e.input_width = int(d["input_width"])
        e.widths = tuple(d["widths"])
        e.labels = list(d["labels"])
        e.params = params_from_json(d["params"])
        e.head = params_from_json(d["head"]) if d.get("head") else None
        e.probe_head = None
        e.history = list(d.get("history", []))
        e.frozen = False
        if d.get("frozen"):
            e.freeze()
        return e


def _pos_weights(y: np.ndarray, n_neg: int, cap: float) -> np.ndarray:
    npos = y.sum(axis=0)
    return np.clip(np.sqrt(n_neg / np.maximum(npos, 1.0)), 1.0, cap)


def _epoch_rows(rng, pos: np.ndarray, neg: np.ndarray, k: int) -> np.ndarray:
    take = neg if len(neg) <= k else rng.choice(neg, size=k, replace=False)
    rows = np.concatenate([pos, take])
    rng.shuffle(rows)
    return rows


def train_expert(sensor_id: str, x: np.ndarray, y: np.ndarray, labels: Sequence[str],
                 config: TrainingConfig, freeze: bool = True) -> ExpertModel:
    """Pretrain an expert on rows ``x`` with per-row targets ``y`` (its sensor's labels)."""
    if y.shape[1] == 0 or not y.any():
        raise TrainingError(
            f"no positive examples for any label of sensor {sensor_id!r}; "
            "regenerate the scenario with injections for this sensor or widen the training range")
    rng = np.random.default_rng([config.seed, _stable(sensor_id)])
    model = ExpertModel(sensor_id, x.shape[1], config.expert_widths, labels, rng)
    pos = np.flatnonzero(y.any(axis=1))
    neg = np.flatnonzero(~y.any(axis=1))
    n_neg = min(len(neg), config.neg_per_epoch)
    pw = _pos_weights(y[pos], n_neg, config.max_pos_weight)
    opt = Momentum(config.lr, config.momentum, config.weight_decay)
    for epoch in range(config.expert_epochs):
        rows = _epoch_rows(rng, pos, neg, config.neg_per_epoch)
        total, count = 0.0, 0
        for lo in range(0, len(rows), config.batch_rows):
            b = rows[lo:lo + config.batch_rows]
            yb = y[b].astype(np.float64)
            w = np.where(yb > 0, pw, 1.0)
            loss, grads = model.loss_grad(x[b], yb, w)
            if not np.isfinite(loss):
                raise TrainingDivergedError("expert training diverged",
                                            {"sensor": sensor_id, "epoch": epoch, "loss": loss})
            model.apply_update(opt, grads)
            total += loss * len(b)
            count += len(b)
        model.history.append(total / max(count, 1))
    if freeze:
        model.freeze()
    return model


def _stable(text: str) -> int:
    return int.from_bytes(text.encode()[:8].ljust(8, b"\0"), "little") % (2 ** 31)


# -- gating + head math ---------------------------------------------------------------


@dataclass
class GMEData:
    """Arrays for one loss evaluation.

    U[i]: (E, d_i + 1) gate inputs of sensor i;  M: (E, S, F) mean expert
    features;  present: (E, S);  per row: element, sensor, expert features H,
    targets Y and loss weights W.
    """

    U: List[np.ndarray]
    M: np.ndarray
    present: np.ndarray
    row_elem: np.ndarray
    row_sensor: np.ndarray
    H: np.ndarray
    Y: np.ndarray
    W: np.ndarray


def init_gme_params(gate_widths: Sequence[int], feature_width: int, n_labels: int,
                    gate_hidden: int, head_hidden: int, rng: np.random.Generator) -> Params:
    """``gate_widths[i]`` is the gate input width of sensor i (encoded width + 1)."""
    p: Params = {}
    for i, d in enumerate(gate_widths):
        p[f"g{i}.A"] = glorot_init(rng, d, gate_hidden)
        p[f"g{i}.a"] = np.zeros(gate_hidden)
        p[f"g{i}.v"] = rng.normal(0.0, 0.1, size=gate_hidden)
        p[f"g{i}.c"] = np.zeros(1)
    s = len(gate_widths)
    q = 2 * feature_width + s
    p["h.Wh"] = glorot_init(rng, q, head_hidden)
    p["h.bh"] = np.zeros(head_hidden)
    p["h.Wo"] = glorot_init(rng, head_hidden, n_labels)
    p["h.bo"] = np.full(n_labels, -3.0)
    return p


def masked_softmax(z: np.ndarray, present: np.ndarray) -> np.ndarray:
    """Row-wise softmax over present entries; absent -> 0, all-absent rows -> 0."""
    zm = np.where(present, z, -np.inf)
    top = zm.max(axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    ex = np.where(present, np.exp(np.where(present, z, 0.0) - top), 0.0)
    den = ex.sum(axis=1, keepdims=True)
    return np.divide(ex, den, out=np.zeros_like(ex), where=den > 0)


def gate_weights(params: Params, U: Sequence[np.ndarray], present: np.ndarray):
    E, S = present.shape
    z = np.zeros((E, S))
    Zs = []
    for i in range(S):
        Z = np.tanh(U[i] @ params[f"g{i}.A"].T + params[f"g{i}.a"])
        Zs.append(Z)
        z[:, i] = Z @ params[f"g{i}.v"] + params[f"g{i}.c"][0]
    return masked_softmax(z, present), Zs


def head_logits(params: Params, g: np.ndarray, M: np.ndarray, row_elem, row_sensor, H):
    S = g.shape[1]
    ctx = np.einsum("es,esf->ef", g, M)
    gr = g[row_elem, row_sensor]
    onehot = np.eye(S)[row_sensor]
    q = np.concatenate([gr[:, None] * H, ctx[row_elem], onehot], axis=1)
    a = np.tanh(q @ params["h.Wh"].T + params["h.bh"])
    o = a @ params["h.Wo"].T + params["h.bo"]
    return o, (ctx, gr, q, a)


def gme_loss_grad(params: Params, data: GMEData, need_grad: bool = True) -> Tuple[float, Params]:
    """Class-weighted BCE averaged over rows, and its gradient w.r.t. gate and head."""
    g, Zs = gate_weights(params, data.U, data.present)
    o, (ctx, gr, q, a) = head_logits(params, g, data.M, data.row_elem, data.row_sensor, data.H)
    R = max(len(o), 1)
    loss = float((data.W * bce_with_logits(o, data.Y)).sum() / R)
    if not need_grad:
        return loss, {}
    E, S = data.present.shape
    F = data.H.shape[1]
    do = data.W * (sigmoid(o) - data.Y) / R
    grads: Params = {"h.Wo": do.T @ a, "h.bo": do.sum(0)}
    dpre = (do @ params["h.Wo"]) * (1.0 - a * a)
    grads["h.Wh"] = dpre.T @ q
    grads["h.bh"] = dpre.sum(0)
    dq = dpre @ params["h.Wh"]
    dq_h, dq_c = dq[:, :F], dq[:, F:2 * F]
    dg = np.zeros((E, S))
    np.add.at(dg, (data.row_elem, data.row_sensor), (dq_h * data.H).sum(axis=1))
    dctx = np.zeros((E, F))
    np.add.at(dctx, data.row_elem, dq_c)
    dg += np.einsum("ef,esf->es", dctx, data.M)
    dz = g * (dg - (g * dg).sum(axis=1, keepdims=True))
    for i in range(S):
        Z = Zs[i]
        v = params[f"g{i}.v"]
        grads[f"g{i}.v"] = dz[:, i] @ Z
        grads[f"g{i}.c"] = np.array([dz[:, i].sum()])
        dpz = (dz[:, i, None] * v[None, :]) * (1.0 - Z * Z)
        grads[f"g{i}.A"] = dpz.T @ data.U[i]
        grads[f"g{i}.a"] = dpz.sum(0)
    return loss, grads


# -- the model ---------------------------------------------------------------------------


class GMEModel:
    def __init__(self, sensors: Sequence[str], labels: Sequence[str], label_sensor: Dict[str, str],
                 encoders: Dict[str, SensorEncoder], experts: Dict[str, ExpertModel],
                 params: Params, thresholds: np.ndarray, window: int, config: TrainingConfig):
        self.sensors = list(sensors)
        self.labels = list(labels)
        self.label_sensor = dict(label_sensor)
        self.encoders = encoders
        self.experts = experts
        self.params = params
        self.thresholds = np.asarray(thresholds, dtype=np.float64)
        self.window = int(window)
        self.config = config
        self.history: List[float] = []
        self.tau_report: Dict[str, dict] = {}

    @property
    def feature_width(self) -> int:
        return next(iter(self.experts.values())).feature_width

    def sensor_index(self, sensor: str) -> int:
        return self.sensors.index(sensor)

    def encode(self, store: Store, sensors: Optional[Sequence[str]] = None) -> Dict[str, np.ndarray]:
        out = {}
        for s in sensors or self.sensors:
            if s in store.tables and s in self.encoders:
                out[s] = self.encoders[s].transform(store.tables[s])
        return out

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "kind": "gme",
            "sensors": self.sensors,
            "labels": self.labels,
            "label_sensor": self.label_sensor,
            "window": self.window,
            "thresholds": self.thresholds.tolist(),
            "config": {**asdict(self.config), "expert_widths": list(self.config.expert_widths),
                       "zero_sensors": list(self.config.zero_sensors)},
            "encoders": {s: e.to_dict() for s, e in self.encoders.items()},
            "experts": {s: e.to_dict() for s, e in self.experts.items()},
            "params": params_to_json(self.params),
            "history": self.history,
            "tau_report": self.tau_report,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "GMEModel":
        if d.get("version") != CHECKPOINT_VERSION or d.get("kind") != "gme":
            raise ValueError("not a GME checkpoint of a supported version")
        m = cls(d["sensors"], d["labels"], d["label_sensor"],
                {s: SensorEncoder.from_dict(e) for s, e in d["encoders"].items()},
                {s: ExpertModel.from_dict(e) for s, e in d["experts"].items()},
                params_from_json(d["params"]), np.array(d["thresholds"]), d["window"],
                TrainingConfig.from_dict(d["config"]))
        m.history = list(d.get("history", []))
        m.tau_report = d.get("tau_report", {})
        return m

    @classmethod
    def load(cls, path) -> "GMEModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- data preparation -----------------------------------------------------------------------


@dataclass
class Prepared:
    """Encoded rows, window layout and targets for every sensor of a store."""

    sensors: List[str]
    labels: List[str]
    plan: WindowPlan
    X: Dict[str, np.ndarray]
    WM: Dict[str, np.ndarray]
    elem: Dict[str, np.ndarray]
    Y: Dict[str, np.ndarray]
    timestamps: Dict[str, np.ndarray]

    def expert_input(self, s: str) -> np.ndarray:
        return np.concatenate([self.X[s], self.WM[s]], axis=1)


def fit_encoders(store: Store, sensors: Sequence[str], train_range: Optional[Tuple[float, float]]):
    out = {}
    for s in sensors:
        table = store.tables[s]
        rows = np.arange(len(table)) if train_range is None else np.flatnonzero(
            (table.timestamps >= train_range[0]) & (table.timestamps < train_range[1]))
        out[s] = SensorEncoder(table.schema).fit(table, rows)
    return out


def prepare(store: Store, encoders: Dict[str, SensorEncoder], labeled: Optional[LabeledStore],
            labels: Sequence[str], window: int, sensors: Sequence[str],
            zero_sensors: Sequence[str] = ()) -> Prepared:
    sensors = [s for s in sorted(sensors) if s in store.tables and len(store.tables[s])]
    plan = build_plan(store, window, sensors)
    X, WM, elem, Y, ts = {}, {}, {}, {}, {}
    for s in sensors:
        table = store.tables[s]
        x = encoders[s].transform(table)
        if s in zero_sensors:
            x = np.zeros_like(x)
        X[s] = x
        WM[s] = window_means(plan, s, x)
        elem[s] = plan.element_of_rows(s, len(table))
        ts[s] = table.timestamps
        if labeled is not None:
            mat = labeled.matrices[s]
            cols = [labeled.labels.index(l) for l in labels]
            Y[s] = mat[:, cols].astype(np.float64)
        else:
            Y[s] = np.zeros((len(table), len(labels)))
    return Prepared(sensors, list(labels), plan, X, WM, elem, Y, ts)


def element_arrays(model_sensors: Sequence[str], prep: Prepared, H: Dict[str, np.ndarray],
                   window: int, widths: Dict[str, int]):
    """Per element: gate inputs U[i], mean expert features M and presence."""
    E = prep.plan.size
    S = len(model_sensors)
    F = next(iter(H.values())).shape[1] if H else 0
    U = [np.zeros((E, widths[s] + 1)) for s in model_sensors]
    M = np.zeros((E, S, F))
    present = np.zeros((E, S), dtype=bool)
    for i, s in enumerate(model_sensors):
        if s not in prep.X:
            continue
        st, ct = prep.plan.starts[s], prep.plan.counts[s]
        nz = np.flatnonzero(ct)
        if not len(nz):
            continue
        sums_x = np.add.reduceat(prep.X[s], st[nz], axis=0)
        sums_h = np.add.reduceat(H[s], st[nz], axis=0)
        U[i][nz, :-1] = sums_x / ct[nz][:, None]
        U[i][nz, -1] = ct[nz] / window
        M[nz, i, :] = sums_h / ct[nz][:, None]
        present[nz, i] = True
    return U, M, present


# -- training -------------------------------------------------------------------------------


def _time_mask(ts: np.ndarray, rng_: Optional[Tuple[float, float]]) -> np.ndarray:
    if rng_ is None:
        return np.ones(len(ts), dtype=bool)
    return (ts >= rng_[0]) & (ts < rng_[1])


def train_experts(prep: Prepared, label_sensor: Dict[str, str], config: TrainingConfig,
                  train_range: Optional[Tuple[float, float]] = None) -> Dict[str, ExpertModel]:
    experts = {}
    for s in prep.sensors:
        own = [j for j, l in enumerate(prep.labels) if label_sensor.get(l) == s]
        rows = np.flatnonzero(_time_mask(prep.timestamps[s], train_range))
        x = prep.expert_input(s)[rows]
        y = prep.Y[s][rows][:, own] > 0
        experts[s] = train_expert(s, x, y, [prep.labels[j] for j in own], config)
    return experts


def expert_features(experts: Dict[str, ExpertModel], prep: Prepared) -> Dict[str, np.ndarray]:
    return {s: experts[s].features(prep.expert_input(s)) for s in prep.sensors if s in experts}


def train_gme(experts: Dict[str, ExpertModel], encoders: Dict[str, SensorEncoder], prep: Prepared,
              label_sensor: Dict[str, str], config: TrainingConfig,
              train_range: Optional[Tuple[float, float]] = None,
              val_range: Optional[Tuple[float, float]] = None) -> GMEModel:
    """Train gate and head on top of frozen experts."""
    for s, e in experts.items():
        if not e.frozen:
            raise TrainingError(f"expert {s!r} must be frozen before GME training")
    digests = {s: e.digest() for s, e in experts.items()}
    sensors = list(prep.sensors)
    widths = {s: encoders[s].width for s in sensors}
    H = expert_features(experts, prep)
    U, M, present = element_arrays(sensors, prep, H, prep.plan.n, widths)
    F = next(iter(experts.values())).feature_width
    L = len(prep.labels)
    rng = np.random.default_rng([config.seed, 7])
    params = init_gme_params([widths[s] + 1 for s in sensors], F, L, config.gate_hidden,
                             config.head_hidden, rng)
    # flat row table over all sensors in the training range
    row_s, row_i = [], []
    for i, s in enumerate(sensors):
        if s in config.zero_sensors:
            continue
        idx = np.flatnonzero(_time_mask(prep.timestamps[s], train_range) & (prep.elem[s] >= 0))
        row_s.append(np.full(len(idx), i))
        row_i.append(idx)
    row_s = np.concatenate(row_s) if row_s else np.zeros(0, dtype=np.int64)
    row_i = np.concatenate(row_i) if row_i else np.zeros(0, dtype=np.int64)
    Yall = np.concatenate([prep.Y[sensors[i]][row_i[row_s == i]] for i in range(len(sensors))
                           if (row_s == i).any()]) if len(row_s) else np.zeros((0, L))
    # keep row order consistent with Yall
    order = np.argsort(row_s, kind="stable")
    row_s, row_i = row_s[order], row_i[order]
    Hall = np.concatenate([H[sensors[i]][row_i[row_s == i]] for i in range(len(sensors))
                           if (row_s == i).any()]) if len(row_s) else np.zeros((0, F))
    Eall = np.concatenate([prep.elem[sensors[i]][row_i[row_s == i]] for i in range(len(sensors))
                           if (row_s == i).any()]) if len(row_s) else np.zeros(0, dtype=np.int64)
    if not Yall.any():
        raise TrainingError("no positive rows in the GME training range")
    pos = np.flatnonzero(Yall.any(axis=1))
    neg = np.flatnonzero(~Yall.any(axis=1))
    n_neg = min(len(neg), config.neg_per_epoch)
    pw = _pos_weights(Yall[pos], n_neg, config.max_pos_weight)
    opt = Momentum(config.lr, config.momentum, config.weight_decay)
    model = GMEModel(sensors, prep.labels, label_sensor, encoders, experts, params,
                     np.full(L, config.tau), prep.plan.n, config)
    for epoch in range(config.epochs):
        rows = _epoch_rows(rng, pos, neg, config.neg_per_epoch)
        total, count = 0.0, 0
        for lo in range(0, len(rows), config.batch_rows):
            b = rows[lo:lo + config.batch_rows]
            data = _minibatch(b, Eall, row_s, Hall, Yall, pw, U, M, present, config.sensor_dropout, rng)
            if data is None:
                continue
            loss, grads = gme_loss_grad(params, data)
            if not np.isfinite(loss):
                raise TrainingDivergedError("GME training diverged", {"epoch": epoch, "loss": loss,
                                                                      "batch_start": lo})
            opt.step(params, grads)
            total += loss * len(data.Y)
            count += len(data.Y)
        model.history.append(total / max(count, 1))
    for s, e in experts.items():
        if e.digest() != digests[s]:
            raise TrainingError(f"expert {s!r} changed during GME training")
    if config.tune_tau and val_range is not None:
        tune_thresholds(model, prep, val_range, H=H, arrays=(U, M, present))
    return model


def _minibatch(b, Eall, row_s, Hall, Yall, pw, U, M, present, dropout, rng) -> Optional[GMEData]:
    elems, inv = np.unique(Eall[b], return_inverse=True)
    inv = inv.reshape(-1)
    pres = present[elems].copy()
    if dropout > 0:
        drop = rng.random(pres.shape) < dropout
        keep_one = pres & ~drop
        # never drop every present sensor of an element
        none_left = ~keep_one.any(axis=1)
        drop[none_left] = False
        pres &= ~drop
    keep = pres[inv, row_s[b]]
    if not keep.any():
        return None
    b, inv = b[keep], inv[keep]
    y = Yall[b]
    return GMEData(
        U=[u[elems] for u in U], M=M[elems], present=pres, row_elem=inv, row_sensor=row_s[b],
        H=Hall[b], Y=y, W=np.where(y > 0, pw, 1.0),
    )


def tune_thresholds(model: GMEModel, prep: Prepared, val_range: Tuple[float, float],
                    H=None, arrays=None) -> np.ndarray:
    """Pick per-label thresholds maximizing validation F1 (ties -> closest to 0.5)."""
    probs = _prepared_probs(model, prep, H=H, arrays=arrays)
    grid = np.round(np.arange(0.05, 0.96, 0.05), 2)
    taus = np.full(len(model.labels), model.config.tau)
    report = {}
    for j, label in enumerate(model.labels):
        s = model.label_sensor.get(label)
        if s not in probs:
            continue
        rows = _time_mask(prep.timestamps[s], val_range)
        y = prep.Y[s][rows, j] > 0
        p = probs[s][rows, j]
        if not y.any():
            report[label] = {"tau": float(taus[j]), "positives": 0}
            continue
        scores = [(f1_score(p > t, y), -abs(t - 0.5), t) for t in grid]
        best = max(scores)
        taus[j] = best[2]
        report[label] = {"tau": float(best[2]), "val_f1": best[0], "positives": int(y.sum())}
    model.thresholds = taus
    model.tau_report = report
    return taus


# -- inference --------------------------------------------------------------------------------


@dataclass
class InferenceResult:
    """Batch inference output: per sensor (B, N, |L|) probabilities and label flags."""

    labels: List[str]
    probs: Dict[str, np.ndarray]
    fired: Dict[str, np.ndarray]
    gates: np.ndarray
    batch: WindowBatch

    def label_sets(self, sensor: str) -> List[List[Tuple[str, ...]]]:
        out = []
        f = self.fired[sensor]
        mask = self.batch.row_mask[sensor]
        for b in range(f.shape[0]):
            out.append([tuple(l for l, h in zip(self.labels, f[b, r]) if h) if mask[b, r] else ()
                        for r in range(f.shape[1])])
        return out


def infer(model: GMEModel, batch: WindowBatch) -> InferenceResult:
    """Classify every row of a batch whose blocks hold model-encoded features."""
    unknown = [s for s in batch.sensors if s not in model.sensors]
    if unknown:
        raise SchemaError(f"batch sensors {unknown} are not known to the model")
    B = batch.size
    N = batch.n
    S = len(model.sensors)
    F = model.feature_width
    L = len(model.labels)
    U = [np.zeros((B, model.encoders[s].width + 1)) for s in model.sensors]
    M = np.zeros((B, S, F))
    present = np.zeros((B, S), dtype=bool)
    feats: Dict[str, np.ndarray] = {}
    for s in batch.sensors:
        i = model.sensor_index(s)
        block = batch.blocks[s]
        width = model.encoders[s].width
        if block.shape[2] != width:
            raise SchemaError(f"sensor {s!r}: block width {block.shape[2]} != encoder width {width}")
        mask = batch.row_mask[s]
        cnt = mask.sum(axis=1)
        wm = (block * mask[:, :, None]).sum(axis=1) / np.maximum(cnt, 1)[:, None]
        x = np.concatenate([block, np.broadcast_to(wm[:, None, :], block.shape)], axis=2)
        h = model.experts[s].features(x.reshape(B * N, -1)).reshape(B, N, F)
        feats[s] = h
        has = batch.presence[:, batch.sensors.index(s)] & (cnt > 0)
        U[i][has, :-1] = wm[has]
        U[i][has, -1] = cnt[has] / model.window
        M[has, i, :] = (h * mask[:, :, None]).sum(axis=1)[has] / cnt[has][:, None]
        present[has, i] = True
    g, _ = gate_weights(model.params, U, present)
    probs, fired = {}, {}
    for s in batch.sensors:
        i = model.sensor_index(s)
        mask = batch.row_mask[s] & present[:, i][:, None]
        e_idx = np.repeat(np.arange(B), N)
        o, _ = head_logits(model.params, g, M, e_idx, np.full(B * N, i), feats[s].reshape(B * N, F))
        p = sigmoid(o).reshape(B, N, L) * mask[:, :, None]
        probs[s] = p
        fired[s] = (p > model.thresholds) & mask[:, :, None]
    return InferenceResult(list(model.labels), probs, fired, g, batch)


def encoded_features(model: GMEModel, store: Store) -> Dict[str, np.ndarray]:
    """Feature matrices to pass to ``windows.fetch_window`` for ``infer``."""
    return model.encode(store)


@dataclass
class RowPredictions:
    """Store-aligned GME output for every row of every sensor present."""

    labels: List[str]
    probs: Dict[str, np.ndarray]
    fired: Dict[str, np.ndarray]
    raw_index: Dict[str, np.ndarray]
    timestamps: Dict[str, np.ndarray]
    gates: np.ndarray
    sensors: List[str]

    def as_labeled(self, severity: Dict[str, int]) -> LabeledStore:
        return LabeledStore(self.labels, severity, dict(self.fired), dict(self.raw_index),
                            dict(self.timestamps))


def _prepared_probs(model: GMEModel, prep: Prepared, H=None, arrays=None) -> Dict[str, np.ndarray]:
    if H is None:
        H = expert_features(model.experts, prep)
    widths = {s: model.encoders[s].width for s in model.sensors}
    if arrays is None:
        arrays = element_arrays(model.sensors, prep, H, model.window, widths)
    U, M, present = arrays
    g, _ = gate_weights(model.params, U, present)
    out = {}
    for s in prep.sensors:
        i = model.sensor_index(s)
        e = prep.elem[s]
        o, _ = head_logits(model.params, g, M, e, np.full(len(e), i), H[s])
        out[s] = sigmoid(o)
    return out


def predict_store(model: GMEModel, store: Store, drop: Sequence[str] = ()) -> RowPredictions:
    """Vectorized inference over the whole store (same result as batched ``infer``).

    Sensors in ``drop`` are treated as missing from the data altogether.
    """
    sensors = [s for s in model.sensors if s in store.tables and len(store.tables[s]) and s not in drop]
    prep = prepare(store, model.encoders, None, model.labels, model.window, sensors)
    H = expert_features(model.experts, prep)
    widths = {s: model.encoders[s].width for s in model.sensors}
    U, M, present = element_arrays(model.sensors, prep, H, model.window, widths)
    probs = _prepared_probs(model, prep, H=H, arrays=(U, M, present))
    g, _ = gate_weights(model.params, U, present)
    fired = {s: probs[s] > model.thresholds for s in prep.sensors}
    return RowPredictions(
        labels=list(model.labels), probs=probs, fired=fired,
        raw_index={s: store.tables[s].raw_index.copy() for s in prep.sensors},
        timestamps={s: store.tables[s].timestamps.copy() for s in prep.sensors},
        gates=g, sensors=list(prep.sensors),
    )


@dataclass(frozen=True)
class FilteredRow:
    sensor_id: str
    raw_index: int
    ts: float
    labels: Tuple[str, ...]
    probs: Tuple[float, ...]


def filter_labeled(pred: RowPredictions, store: Store) -> List[FilteredRow]:
    """Rows with at least one predicted label, each resolvable to its stored row."""
    out = []
    for s in sorted(pred.fired):
        hit = np.flatnonzero(pred.fired[s].any(axis=1))
        table = store.tables[s]
        for i in hit.tolist():
            raw = int(pred.raw_index[s][i])
            if table.raw_index[i] != raw:
                raise SchemaError(f"prediction for {s!r} is not aligned with the store")
            labs = tuple(l for l, f in zip(pred.labels, pred.fired[s][i]) if f)
            probs = tuple(float(p) for p, f in zip(pred.probs[s][i], pred.fired[s][i]) if f)
            out.append(FilteredRow(s, raw, float(pred.timestamps[s][i]), labs, probs))
    out.sort(key=lambda r: (r.ts, r.sensor_id, r.raw_index))
    return out


def save_filtered(rows: Sequence[FilteredRow], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps({"sensor_id": r.sensor_id, "raw_index": r.raw_index, "ts": r.ts,
                                 "labels": list(r.labels), "probs": list(r.probs)}) + "\n")


def fit_all(store: Store, labeled: LabeledStore, label_sensor: Dict[str, str], config: TrainingConfig,
            train_range: Tuple[float, float], val_range: Optional[Tuple[float, float]] = None,
            sensors: Optional[Sequence[str]] = None) -> GMEModel:
    """Encoders, experts and GME in one call (training on ``train_range``)."""
    sensors = sorted(sensors or [s for s in store.tables if len(store.tables[s])])
    fit_range = (train_range[0], val_range[1]) if val_range is not None else train_range
    encoders = fit_encoders(store, sensors, fit_range)
    labels = [l for l in labeled.labels if label_sensor.get(l) in sensors]
    prep = prepare(store, encoders, labeled, labels, config.window, sensors, config.zero_sensors)
    experts = train_experts(prep, label_sensor, config, train_range)
    return train_gme(experts, encoders, prep, label_sensor, config, train_range, val_range)
