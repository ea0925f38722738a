"""Random forest classifier (binary) built from numpy primitives.

Trees grow level by level and all trees of the ensemble grow together: at
each depth one weighted ``bincount`` per feature yields the class histogram
of every (tree, node, bin) at once.  Features are pre-binned on quantiles of
the training data, so candidate thresholds are bin edges.  Per-feature
utility is the total weighted Gini decrease, normalized to sum to 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .nn import f1_score


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 50
    max_depth: int = 8
    max_bins: int = 32
    min_leaf: int = 1
    max_features: Optional[int] = None   # per split; default ceil(sqrt(d))
    bootstrap: bool = True
    seed: int = 0


@dataclass
class TreeEnsembleModel:
    feature: np.ndarray      # (nodes,) split feature, -1 for leaves
    threshold: np.ndarray    # (nodes,) go left if x <= threshold
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray        # (nodes,) P(y=1) at the node
    roots: np.ndarray        # (trees,)
    utilities: np.ndarray    # (d,)
    depth: int

    @property
    def n_trees(self) -> int:
        return len(self.roots)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        n = len(x)
        node = np.broadcast_to(self.roots[:, None], (self.n_trees, n)).copy()
        cols = np.broadcast_to(np.arange(n)[None, :], node.shape)
        for _ in range(self.depth + 1):
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                break
            xv = x[cols[inner], f[inner]]
            go_left = xv <= self.threshold[node[inner]]
            nxt = np.where(go_left, self.left[node[inner]], self.right[node[inner]])
            node[inner] = nxt
        return self.value[node].mean(axis=0)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.predict_proba(x) >= 0.5


def _bin_edges(x: np.ndarray, max_bins: int):
    """Per feature, sorted candidate thresholds (midpoints between distinct quantile values)."""
    edges = []
    for j in range(x.shape[1]):
        col = x[:, j]
        vals = np.unique(col)
        if len(vals) > max_bins:
            vals = np.unique(np.quantile(col, np.linspace(0, 1, max_bins + 1)))
        edges.append((vals[:-1] + vals[1:]) / 2.0 if len(vals) > 1 else np.zeros(0))
    return edges


def train_forest(x: np.ndarray, y: np.ndarray, config: ForestConfig = ForestConfig()) -> TreeEnsembleModel:
    y = np.asarray(y, dtype=bool)
    if y.all() or not y.any():
        raise ValueError("forest training needs at least one positive and one negative example")
    n, d = x.shape
    rng = np.random.default_rng(config.seed)
    T = config.n_trees
    k_feat = config.max_features or max(1, int(np.ceil(np.sqrt(d))))
    edges = _bin_edges(x, config.max_bins)
    nb = max((len(e) for e in edges), default=0) + 1
    xb = np.zeros((n, d), dtype=np.int64)
    for j in range(d):
        xb[:, j] = np.searchsorted(edges[j], x[:, j], side="left")
    if config.bootstrap:
        w = rng.multinomial(n, np.full(n, 1.0 / n), size=T).astype(np.float64)
    else:
        w = np.ones((T, n))
    yi = y.astype(np.int64)
    # node storage, grown one level at a time
    feature = np.full(T, -1, dtype=np.int64)
    threshold = np.zeros(T)
    left = np.full(T, -1, dtype=np.int64)
    right = np.full(T, -1, dtype=np.int64)
    pos_w = (w * y).sum(axis=1)
    tot_w = w.sum(axis=1)
    value = pos_w / np.maximum(tot_w, 1e-12)
    roots = np.arange(T)
    util = np.zeros(d)
    node_of = np.broadcast_to(roots[:, None], (T, n)).copy()   # global node id per (tree, row)
    active = list(range(T))
    depth = 0
    for depth in range(config.max_depth):
        if not active:
            break
        act = np.array(active)
        local = np.full(len(feature), -1, dtype=np.int64)
        local[act] = np.arange(len(act))
        ln = local[node_of]                       # (T, n) local index or -1
        live = (ln >= 0) & (w > 0)
        ti, ri = np.nonzero(live)
        lnode = ln[ti, ri]
        ww = w[ti, ri]
        yy = yi[ri]
        A = len(act)
        best_gain = np.zeros(A)
        best_f = np.full(A, -1)
        best_k = np.zeros(A, dtype=np.int64)
        node_tot = np.bincount(lnode, weights=ww, minlength=A)
        node_pos = np.bincount(lnode, weights=ww * yy, minlength=A)
        parent_imp = node_tot * _gini(node_pos, node_tot)
        # sqrt(d) candidate features per node: the k smallest of a random key per (node, feature)
        keys = rng.random((A, d))
        allowed = keys <= np.sort(keys, axis=1)[:, min(k_feat, d) - 1:min(k_feat, d)]
        for j in range(d):
            if not len(edges[j]):
                continue
            key = lnode * nb + xb[ri, j]
            hist_t = np.bincount(key, weights=ww, minlength=A * nb).reshape(A, nb)
            hist_p = np.bincount(key, weights=ww * yy, minlength=A * nb).reshape(A, nb)
            lt = np.cumsum(hist_t, axis=1)[:, :len(edges[j])]
            lp = np.cumsum(hist_p, axis=1)[:, :len(edges[j])]
            rt = node_tot[:, None] - lt
            rp = node_pos[:, None] - lp
            child = lt * _gini(lp, lt) + rt * _gini(rp, rt)
            gain = parent_imp[:, None] - child
            ok = (lt >= config.min_leaf) & (rt >= config.min_leaf)
            gain = np.where(ok, gain, -np.inf)
            k = np.argmax(gain, axis=1)
            g = gain[np.arange(A), k]
            better = allowed[:, j] & (g > best_gain + 1e-12)
            best_gain[better] = g[better]
            best_f[better] = j
            best_k[better] = k[better]
        split = np.flatnonzero(best_f >= 0)
        base = len(feature)
        remap_left = np.full(A, -1, dtype=np.int64)
        remap_right = np.full(A, -1, dtype=np.int64)
        remap_left[split] = base + 2 * np.arange(len(split))
        remap_right[split] = remap_left[split] + 1
        gids = act[split]
        feature[gids] = best_f[split]
        for j in np.unique(best_f[split]):
            sel = best_f[split] == j
            threshold[gids[sel]] = edges[j][best_k[split][sel]]
        np.add.at(util, best_f[split], best_gain[split])
        left[gids] = remap_left[split]
        right[gids] = remap_right[split]
        grow = 2 * len(split)
        feature = np.concatenate([feature, np.full(grow, -1, dtype=np.int64)])
        threshold = np.concatenate([threshold, np.zeros(grow)])
        left = np.concatenate([left, np.full(grow, -1, dtype=np.int64)])
        right = np.concatenate([right, np.full(grow, -1, dtype=np.int64)])
        value = np.concatenate([value, np.zeros(grow)])
        # route rows of split nodes to children
        split_rows = best_f[lnode] >= 0 if len(lnode) else np.zeros(0, dtype=bool)
        ti_s, ri_s, ln_s = ti[split_rows], ri[split_rows], lnode[split_rows]
        goes_left = xb[ri_s, best_f[ln_s]] <= best_k[ln_s]
        node_of[ti_s, ri_s] = np.where(goes_left, remap_left[ln_s], remap_right[ln_s])
        # child values (zero-weight bootstrap rows never reach the statistics, so they are not routed)
        if grow:
            cid = node_of[ti_s, ri_s] - base
            tw = np.bincount(cid, weights=ww[split_rows], minlength=grow)
            pw = np.bincount(cid, weights=ww[split_rows] * yy[split_rows], minlength=grow)
            ids = np.arange(base, base + grow)
            value[ids] = pw / np.maximum(tw, 1e-12)
            # pure or tiny children stop growing
            impure = (pw > 0) & (pw < tw) & (tw >= 2 * config.min_leaf)
            active = ids[impure].tolist()
        else:
            active = []
    s = util.sum()
    util = util / s if s > 0 else util
    return TreeEnsembleModel(
        feature=feature,
        threshold=threshold,
        left=left,
        right=right,
        value=value,
        roots=roots,
        utilities=np.maximum(util, 0.0),
        depth=config.max_depth,
    )


def _gini(pos: np.ndarray, tot: np.ndarray) -> np.ndarray:
    p = np.divide(pos, tot, out=np.zeros_like(pos, dtype=np.float64), where=tot > 0)
    return 2.0 * p * (1.0 - p)


def stratified_split(y: np.ndarray, test_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic stratified train/test row indices."""
    rng = np.random.default_rng(seed)
    y = np.asarray(y, dtype=bool)
    train, test = [], []
    for cls in (False, True):
        idx = np.flatnonzero(y == cls)
        rng.shuffle(idx)
        k = int(round(len(idx) * test_fraction))
        if len(idx) >= 2:
            k = min(max(k, 1), len(idx) - 1)
        test.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def fit_and_score(x: np.ndarray, y: np.ndarray, config: ForestConfig = ForestConfig(),
                  test_fraction: float = 0.3, split_seed: int = 0) -> Tuple[TreeEnsembleModel, float]:
    """Train on a stratified split and return the model with its held-out F1."""
    y = np.asarray(y, dtype=bool)
    if y.all() or not y.any():
        raise ValueError("forest training needs at least one positive and one negative example")
    tr, te = stratified_split(y, test_fraction, split_seed)
    model = train_forest(x[tr], y[tr], config)
    return model, f1_score(model.predict(x[te]), y[te])
