"""Interpretable per-label rules: OR over sentences, each an AND of linear inequality words.

A word is ``w . x <= b`` over a masked subset of features.  For training the
crisp logic is relaxed: a word scores ``sigmoid(k (b - w . x))``, a sentence
multiplies its word scores and a sentence set takes the maximum over its
sentences (the gradient of the max goes to the winning sentence only).
Coefficients and offsets are fit by gradient descent; word masks are evolved
between gradient rounds by a small genetic step scored with crisp
``TPR - FPR - mu * complexity``.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .nn import Momentum, f1_score, sigmoid

EPS = 1e-7


# -- encoding --------------------------------------------------------------------------


class DiscreteEncoder:
    """Discrete columns become training relative frequencies; continuous ones are min-max scaled."""

    def __init__(self, feature_names: Sequence[str], discrete: Sequence[str] = ()):
        self.feature_names = list(feature_names)
        self.discrete = set(discrete)
        self.freqs: Dict[str, Dict[str, float]] = {}
        self.ranges: Dict[str, Tuple[float, float]] = {}

    def fit(self, columns: Dict[str, Sequence]) -> "DiscreteEncoder":
        for name in self.feature_names:
            col = columns[name]
            if name in self.discrete:
                counts = Counter(_key(v) for v in col)
                n = sum(counts.values())
                self.freqs[name] = {k: c / n for k, c in counts.items()} if n else {}
            else:
                arr = np.asarray(col, dtype=np.float64)
                arr = arr[~np.isnan(arr)]
                self.ranges[name] = (float(arr.min()), float(arr.max())) if len(arr) else (0.0, 0.0)
        return self

    def transform(self, columns: Dict[str, Sequence]) -> np.ndarray:
        out = []
        for name in self.feature_names:
            col = columns[name]
            if name in self.discrete:
                table = self.freqs[name]
                out.append(np.array([table.get(_key(v), 0.0) for v in col], dtype=np.float64))
            else:
                lo, hi = self.ranges[name]
                arr = np.nan_to_num(np.asarray(col, dtype=np.float64), nan=lo)
                out.append((arr - lo) / (hi - lo) if hi > lo else np.zeros(len(arr)))
        return np.stack(out, axis=1) if out else np.zeros((0, 0))

    def raw_value(self, name: str, scaled: float) -> float:
        """Map a scaled threshold on a continuous feature back to its original units."""
        lo, hi = self.ranges[name]
        return lo + scaled * (hi - lo)

    def to_dict(self) -> dict:
        return {"feature_names": self.feature_names, "discrete": sorted(self.discrete),
                "freqs": self.freqs, "ranges": {k: list(v) for k, v in self.ranges.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "DiscreteEncoder":
        e = cls(d["feature_names"], d["discrete"])
        e.freqs = {k: dict(v) for k, v in d["freqs"].items()}
        e.ranges = {k: tuple(v) for k, v in d["ranges"].items()}
        return e


def _key(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return str(v)


# -- model ------------------------------------------------------------------------------


@dataclass
class Word:
    mask: np.ndarray     # (d,) bool
    w: np.ndarray        # (d,) zero outside the mask
    b: float

    def crisp(self, x: np.ndarray) -> np.ndarray:
        return x @ (self.w * self.mask) <= self.b

    @property
    def complexity(self) -> int:
        return int(self.mask.sum())


@dataclass
class Sentence:
    words: List[Word]
    fitness: float = 0.0
    tpr: float = 0.0
    fpr: float = 0.0

    @property
    def complexity(self) -> int:
        return sum(w.complexity for w in self.words)

    def crisp(self, x: np.ndarray) -> np.ndarray:
        out = np.ones(len(x), dtype=bool)
        for w in self.words:
            out &= w.crisp(x)
        return out


@dataclass
class SentenceSet:
    label: str
    feature_names: List[str]
    sentences: List[Sentence]

    def crisp(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros(len(x), dtype=bool)
        for s in self.sentences:
            out |= s.crisp(x)
        return out

    def firing(self, x: np.ndarray) -> np.ndarray:
        """(n, S) crisp value of every sentence."""
        if not self.sentences:
            return np.zeros((len(x), 0), dtype=bool)
        return np.stack([s.crisp(x) for s in self.sentences], axis=1)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "feature_names": self.feature_names,
            "sentences": [
                {"fitness": s.fitness, "tpr": s.tpr, "fpr": s.fpr,
                 "words": [{"mask": w.mask.astype(int).tolist(), "w": w.w.tolist(), "b": w.b} for w in s.words]}
                for s in self.sentences
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SentenceSet":
        return cls(d["label"], list(d["feature_names"]), [
            Sentence([Word(np.array(w["mask"], dtype=bool), np.array(w["w"], dtype=np.float64), float(w["b"]))
                      for w in s["words"]], s.get("fitness", 0.0), s.get("tpr", 0.0), s.get("fpr", 0.0))
            for s in d["sentences"]
        ])


@dataclass(frozen=True)
class RelaxationParams:
    k: float = 20.0
    bce: float = 1.0
    alpha: float = 0.5
    beta: float = 1e-4
    gamma: float = 0.0

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("sharpness k must be > 0")
        if min(self.bce, self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be >= 0")


# -- dense parameterization used for training ---------------------------------------


@dataclass
class DenseSet:
    """Fixed-shape view: S sentences x K word slots over d features."""

    W: np.ndarray       # (S, K, d)
    B: np.ndarray       # (S, K)
    M: np.ndarray       # (S, K, d) bool
    active: np.ndarray  # (S, K) bool, word slot in use

    @classmethod
    def from_set(cls, ss: SentenceSet) -> "DenseSet":
        S = len(ss.sentences)
        K = max((len(s.words) for s in ss.sentences), default=1)
        d = len(ss.feature_names)
        W = np.zeros((S, K, d))
        B = np.zeros((S, K))
        M = np.zeros((S, K, d), dtype=bool)
        act = np.zeros((S, K), dtype=bool)
        for i, s in enumerate(ss.sentences):
            for j, w in enumerate(s.words):
                W[i, j] = w.w
                B[i, j] = w.b
                M[i, j] = w.mask
                act[i, j] = True
        return cls(W, B, M, act)

    def to_set(self, label: str, names: Sequence[str], old: Optional[SentenceSet] = None) -> SentenceSet:
        sents = []
        for i in range(self.W.shape[0]):
            words = [Word(self.M[i, j].copy(), self.W[i, j] * self.M[i, j], float(self.B[i, j]))
                     for j in range(self.W.shape[1]) if self.active[i, j]]
            sents.append(Sentence(words))
        return SentenceSet(label, list(names), sents)


def word_scores(W, B, M, active, x: np.ndarray, k: float) -> np.ndarray:
    """(n, S, K) relaxed word scores; inactive slots score 1."""
    z = k * (B[None] - np.einsum("skd,nd->nsk", W * M, x))
    s = sigmoid(z)
    return np.where(active[None], s, 1.0)


def soft_eval(ss: SentenceSet, x: np.ndarray, k: float) -> np.ndarray:
    if not ss.sentences:
        return np.zeros(len(x))
    d = DenseSet.from_set(ss)
    return word_scores(d.W, d.B, d.M, d.active, x, k).prod(axis=2).max(axis=1)


def crisp_eval(ss: SentenceSet, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Crisp decisions and, per row, the selected firing sentence (-1 if none)."""
    fire = ss.firing(x)
    hit = fire.any(axis=1) if fire.size else np.zeros(len(x), dtype=bool)
    idx = np.full(len(x), -1, dtype=np.int64)
    if hit.any():
        order = best_order(ss)
        rank = np.empty(len(order), dtype=np.int64)
        rank[order] = np.arange(len(order))
        masked = np.where(fire, rank[None, :], len(order))
        pos = masked.min(axis=1)
        idx[hit] = np.array(order)[pos[hit]]
    return hit, idx


def set_loss_grad(W, B, M, active, x: np.ndarray, y: np.ndarray, rp: RelaxationParams):
    """Relaxed loss and gradients w.r.t. W (masked) and B."""
    n = len(x)
    ws = word_scores(W, B, M, active, x, rp.k)          # (n, S, K)
    sent = ws.prod(axis=2)                               # (n, S)
    win = sent.argmax(axis=1)
    p = sent[np.arange(n), win]
    pc = np.clip(p, EPS, 1 - EPS)
    neg = ~y.astype(bool)
    yf = y.astype(np.float64)
    loss = rp.bce * float(-(yf * np.log(pc) + (1 - yf) * np.log(1 - pc)).mean())
    n_neg = int(neg.sum())
    if n_neg and rp.alpha:
        loss += rp.alpha * float(p[neg].mean())
    Wm = W * M
    loss += rp.beta * float((Wm ** 2).sum()) + rp.gamma * float(M[active].sum())
    # dL/dp
    inside = (p > EPS) & (p < 1 - EPS)
    dp = rp.bce * np.where(inside, (pc - yf) / (pc * (1 - pc)), 0.0) / n
    if n_neg and rp.alpha:
        dp = dp + rp.alpha * neg / n_neg
    # only the winning sentence receives gradient: dp/dz_word = p * (1 - s_word)
    sw = ws[np.arange(n), win]                             # (n, K)
    dz = (dp * p)[:, None] * (1.0 - sw) * active[win]      # (n, K)
    dB = np.zeros_like(B)
    dW = np.zeros_like(W)
    np.add.at(dB, win, rp.k * dz)
    # z = k (b - w.x)  ->  dz/dw = -k x
    contrib = -rp.k * dz[:, :, None] * x[:, None, :]       # (n, K, d)
    np.add.at(dW, win, contrib)
    dW = dW * M + 2 * rp.beta * Wm
    return loss, dW, dB


# -- training ------------------------------------------------------------------------------


@dataclass(frozen=True)
class SentenceConfig:
    sentences: int = 8
    words: int = 3
    rounds: int = 12             # GA steps
    epochs: int = 15             # gradient epochs between GA steps
    batch: int = 256
    lr: float = 0.05
    momentum: float = 0.9
    mu: float = 0.01             # complexity weight in sentence fitness
    mutation: float = 0.2
    max_word_features: int = 1
    k_start: float = 5.0
    relax: RelaxationParams = RelaxationParams()
    seed: int = 0


def sentence_fitness(s: Sentence, x: np.ndarray, y: np.ndarray, mu: float) -> Tuple[float, float, float]:
    c = s.crisp(x)
    pos = y.astype(bool)
    tpr = float(c[pos].mean()) if pos.any() else 0.0
    fpr = float(c[~pos].mean()) if (~pos).any() else 0.0
    return tpr - fpr - mu * s.complexity, tpr, fpr


def _random_word(rng, d: int, max_feat: int, anchor: np.ndarray) -> Word:
    m = np.zeros(d, dtype=bool)
    m[rng.choice(d, size=int(rng.integers(1, min(max_feat, d) + 1)), replace=False)] = True
    w = np.where(m, rng.choice([-1.0, 1.0], size=d) * rng.uniform(0.5, 1.5, size=d), 0.0)
    b = float(w @ anchor) + rng.uniform(0.05, 0.3)
    return Word(m, w, b)


def _random_sentence(rng, d: int, cfg: SentenceConfig, anchor: np.ndarray) -> Sentence:
    return Sentence([_random_word(rng, d, cfg.max_word_features, anchor) for _ in range(cfg.words)])


def initialize(label: str, names: Sequence[str], x: np.ndarray, y: np.ndarray, cfg: SentenceConfig,
               rng: np.random.Generator) -> SentenceSet:
    pos = np.flatnonzero(y)
    d = x.shape[1]
    sents = [_random_sentence(rng, d, cfg, x[rng.choice(pos)]) for _ in range(cfg.sentences)]
    return SentenceSet(label, list(names), sents)


def train_sentences(x: np.ndarray, y: np.ndarray, feature_names: Sequence[str], label: str = "",
                    config: SentenceConfig = SentenceConfig()) -> SentenceSet:
    y = np.asarray(y, dtype=bool)
    if not y.any():
        raise ValueError(f"no positive examples for label {label!r}")
    rng = np.random.default_rng(config.seed)
    ss = initialize(label, feature_names, x, y, config, rng)
    dense = DenseSet.from_set(ss)
    n = len(x)
    total_epochs = config.rounds * config.epochs
    done = 0
    for r in range(config.rounds):
        opt = Momentum(config.lr, config.momentum, clip=0.0)
        for _ in range(config.epochs):
            frac = done / max(total_epochs - 1, 1)
            k = config.k_start * (config.relax.k / config.k_start) ** frac
            rp = RelaxationParams(k, config.relax.bce, config.relax.alpha, config.relax.beta, config.relax.gamma)
            order = rng.permutation(n)
            for lo in range(0, n, config.batch):
                b = order[lo:lo + config.batch]
                _, dW, dB = set_loss_grad(dense.W, dense.B, dense.M, dense.active, x[b], y[b], rp)
                params = {"W": dense.W, "B": dense.B}
                opt.step(params, {"W": dW, "B": dB})
            done += 1
        dense = _ga_step(dense, x, y, config, rng, last=(r == config.rounds - 1))
    out = dense.to_set(label, feature_names)
    for s in out.sentences:
        s.fitness, s.tpr, s.fpr = sentence_fitness(s, x, y, config.mu)
    return out


def _ga_step(dense: DenseSet, x, y, cfg: SentenceConfig, rng, last: bool) -> DenseSet:
    """Keep the fitter half of the sentences; refill with mutated copies or fresh sentences."""
    S, K, d = dense.W.shape
    ss = dense.to_set("", [""] * d)
    fit = np.array([sentence_fitness(s, x, y, cfg.mu)[0] for s in ss.sentences])
    if last:
        return dense
    # rank by fitness, but sentences adding no new true positives over better ones sink to the bottom
    fire = [sn.crisp(x) & y for sn in ss.sentences]
    covered = np.zeros(len(x), dtype=bool)
    useful, redundant = [], []
    for i in np.argsort(-fit, kind="stable"):
        if (fire[i] & ~covered).any():
            useful.append(i)
            covered |= fire[i]
        else:
            redundant.append(i)
    order = np.array(useful + redundant)
    keep = order[: max(1, min(len(useful), S // 2))]
    W, B, M, act = dense.W.copy(), dense.B.copy(), dense.M.copy(), dense.active.copy()
    covered = np.zeros(len(x), dtype=bool)
    for i in keep:
        covered |= fire[i]
    missed = np.flatnonzero(y & ~covered)
    for i in order[len(keep):]:
        if rng.random() < 0.7 and len(missed):
            # resample a fresh sentence anchored on a positive that no kept sentence covers
            fresh = _random_sentence(rng, d, cfg, x[rng.choice(missed)])
            for j, w in enumerate(fresh.words):
                W[i, j], B[i, j], M[i, j], act[i, j] = w.w, w.b, w.mask, True
            continue
        parent = keep[int(rng.integers(len(keep)))]
        W[i], B[i], M[i], act[i] = W[parent], B[parent], M[parent], act[parent]
        for j in range(K):
            flip = rng.random(d) < cfg.mutation / max(d, 1)
            if flip.any():
                m = M[i, j] ^ flip
                if m.sum() == 0 or m.sum() > cfg.max_word_features:
                    continue
                added = m & ~M[i, j]
                W[i, j] = np.where(added, rng.choice([-1.0, 1.0], size=d) * 0.5, W[i, j]) * m
                M[i, j] = m
        B[i] += rng.normal(0, 0.02, size=K)
    return DenseSet(W, B, M, act)


# -- simplification --------------------------------------------------------------------


def prune(ss: SentenceSet, x: np.ndarray, y: np.ndarray, tolerance: float = 0.01) -> SentenceSet:
    """Greedily drop sentences while train F1 stays within ``tolerance`` of the original."""
    y = np.asarray(y, dtype=bool)
    fire = ss.firing(x)
    base = f1_score(fire.any(axis=1), y) if fire.size else f1_score(np.zeros(len(y), bool), y)
    keep = list(range(len(ss.sentences)))
    while len(keep) > 1:
        best = None
        for i in keep:
            rest = [j for j in keep if j != i]
            f = f1_score(fire[:, rest].any(axis=1), y)
            if f >= base - tolerance - 1e-12 and (best is None or f > best[0]):
                best = (f, i)
        if best is None:
            break
        keep.remove(best[1])
    return SentenceSet(ss.label, ss.feature_names, [ss.sentences[i] for i in keep])


def compress(s: Sentence, x: np.ndarray) -> Sentence:
    """Remove words (and zero-coefficient mask bits) without changing any train decision."""
    ref = s.crisp(x)
    words = [Word(w.mask & (w.w != 0), w.w * (w.mask & (w.w != 0)), w.b) for w in s.words]
    words = [w for w in words if w.mask.any()] or words[:1]
    if not np.array_equal(Sentence(words).crisp(x), ref):
        words = list(s.words)
    changed = True
    while changed and len(words) > 1:
        changed = False
        # try the loosest words first: those satisfied by the most rows
        order = sorted(range(len(words)), key=lambda j: -int(words[j].crisp(x).sum()))
        for j in order:
            trial = words[:j] + words[j + 1:]
            if np.array_equal(Sentence(trial).crisp(x), ref):
                words = trial
                changed = True
                break
    return Sentence(words, s.fitness, s.tpr, s.fpr)


def compress_set(ss: SentenceSet, x: np.ndarray) -> SentenceSet:
    return SentenceSet(ss.label, ss.feature_names, [compress(s, x) for s in ss.sentences])


def best_order(ss: SentenceSet) -> List[int]:
    """Sentence indices by preference: lower complexity, higher fitness, lower index."""
    return sorted(range(len(ss.sentences)),
                  key=lambda i: (ss.sentences[i].complexity, -ss.sentences[i].fitness, i))


def select_best(ss: SentenceSet, firing: Sequence[int]) -> int:
    firing = list(firing)
    if not firing:
        raise ValueError("no firing sentence to select from")
    allowed = set(firing)
    for i in best_order(ss):
        if i in allowed:
            return i
    raise ValueError("firing indices are not sentences of this set")


def render_word(w: Word, names: Sequence[str], encoder: Optional[DiscreteEncoder] = None) -> str:
    idx = np.flatnonzero(w.mask)
    if len(idx) == 1:
        j = int(idx[0])
        coef = float(w.w[j])
        name = names[j]
        if coef == 0:
            return "true" if w.b >= 0 else "false"
        thr = w.b / coef
        op = "≤" if coef > 0 else "≥"
        if encoder is not None and name in encoder.ranges:
            thr = encoder.raw_value(name, thr)
        elif encoder is not None and name in encoder.discrete:
            name = f"freq({name})"
        return f"{name} {op} {thr:g}"
    terms = " + ".join(f"{float(w.w[j]):.3g}·{names[j]}" for j in idx)
    return f"{terms} ≤ {w.b:.3g}"


def render_sentence(s: Sentence, names: Sequence[str], encoder: Optional[DiscreteEncoder] = None) -> str:
    return " AND ".join(render_word(w, names, encoder) for w in s.words)


# -- annotation store ---------------------------------------------------------------------


@dataclass(frozen=True)
class Annotation:
    sensor_id: str
    raw_index: int
    label: str
    sentence: int
    text: str


def annotate(sets: Dict[str, SentenceSet], x: np.ndarray, sensor: str, raw_index: np.ndarray,
             labels_of_row: Optional[Sequence[Iterable[str]]] = None,
             encoder: Optional[DiscreteEncoder] = None) -> List[Annotation]:
    """One annotation per (row, label) where the label's sentence set fires.

    With ``labels_of_row``, only labels already assigned to the row are explained.
    """
    out = []
    for label in sorted(sets):
        ss = sets[label]
        hit, idx = crisp_eval(ss, x)
        for r in np.flatnonzero(hit).tolist():
            if labels_of_row is not None and label not in set(labels_of_row[r]):
                continue
            i = int(idx[r])
            out.append(Annotation(sensor, int(raw_index[r]), label, i,
                                  f"{label}: {render_sentence(ss.sentences[i], ss.feature_names, encoder)}"))
    return out


class AnnotationStore:
    """JSON-lines file of annotations with an in-memory (sensor, raw_index) index."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.index: Dict[Tuple[str, int], List[Annotation]] = {}
        if self.path is not None and self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    d = json.loads(line)
                    self._add(Annotation(d["sensor_id"], int(d["raw_index"]), d["label"], int(d["sentence"]), d["text"]))

    def _add(self, a: Annotation) -> None:
        self.index.setdefault((a.sensor_id, a.raw_index), []).append(a)

    def add(self, items: Iterable[Annotation]) -> None:
        for a in items:
            self._add(a)

    def get(self, sensor: str, raw_index: int) -> Optional[str]:
        found = self.index.get((sensor, int(raw_index)))
        if not found:
            return None
        return "; ".join(a.text for a in sorted(found, key=lambda a: a.label))

    def as_mapping(self) -> Dict[Tuple[str, int], str]:
        return {k: self.get(*k) for k in self.index}

    def __len__(self) -> int:
        return len(self.index)

    def save(self, path=None) -> None:
        target = Path(path) if path is not None else self.path
        with open(target, "w", encoding="utf-8") as fh:
            for key in sorted(self.index):
                for a in sorted(self.index[key], key=lambda a: a.label):
                    fh.write(json.dumps({"sensor_id": a.sensor_id, "raw_index": a.raw_index, "label": a.label,
                                         "sentence": a.sentence, "text": a.text}) + "\n")


def save_sets(sets: Dict[str, SentenceSet], path, encoder: Optional[DiscreteEncoder] = None) -> None:
    doc = {"version": 1, "sets": {k: v.to_dict() for k, v in sets.items()},
           "encoder": encoder.to_dict() if encoder is not None else None}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_sets(path) -> Tuple[Dict[str, SentenceSet], Optional[DiscreteEncoder]]:
    doc = json.loads(Path(path).read_text())
    enc = DiscreteEncoder.from_dict(doc["encoder"]) if doc.get("encoder") else None
    return {k: SentenceSet.from_dict(v) for k, v in doc["sets"].items()}, enc
