"""Per-label feature subset selection: forest utilities guiding a genetic search.

Each candidate is a bit mask over the feature catalog.  Its fitness is the
held-out F1 of a forest trained on the masked columns minus ``penalty`` per
selected feature; masks above ``max_features`` are infeasible.  Evaluations
are cached by mask.  The search keeps the best candidates (elitism), picks
parents by tournament, mixes them with uniform crossover and mutates bits.
Mutation is guided by forest utilities: a selected feature with high
utility is less likely to be switched off.  Oversized children are repaired
by dropping their least useful features.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .forest import ForestConfig, fit_and_score


@dataclass(frozen=True)
class GAConfig:
    population: int = 40
    generations: int = 30
    mutation_rate: float = 0.1
    crossover_rate: float = 0.9
    penalty: float = 0.01
    tournament: int = 3
    elite: int = 2
    max_features: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        for name in ("mutation_rate", "crossover_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.tournament < 1 or self.max_features < 1:
            raise ValueError("tournament and max_features must be >= 1")
        if not 0 <= self.elite <= self.population:
            raise ValueError("elite must lie in [0, population]")


@dataclass
class CandidateSubset:
    mask: Tuple[bool, ...]
    f1: float
    fitness: float
    utilities: Tuple[float, ...]   # over the catalog; zero outside the mask

    @property
    def size(self) -> int:
        return sum(self.mask)

    def indices(self) -> List[int]:
        return [i for i, b in enumerate(self.mask) if b]


def fitness(f1: float, size: int, penalty: float = 0.01, max_features: int = 5) -> float:
    if size == 0 or size > max_features:
        return float("-inf")
    return f1 - penalty * size


@dataclass
class GenerationStats:
    generation: int
    best_fitness: float
    mean_fitness: float
    best_mask: Tuple[int, ...]


@dataclass
class SelectionResult:
    label: str
    feature_names: List[str]
    best: CandidateSubset
    history: List[GenerationStats]
    evaluations: int

    @property
    def selected(self) -> List[str]:
        return [self.feature_names[i] for i in self.best.indices()]

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "selected": self.selected,
            "f1": self.best.f1,
            "fitness": self.best.fitness,
            "utilities": {self.feature_names[i]: self.best.utilities[i] for i in self.best.indices()},
            "evaluations": self.evaluations,
            "history": [asdict(h) | {"best_mask": list(h.best_mask)} for h in self.history],
        }


class Evaluator:
    """Trains and scores a forest per mask, with a cache."""

    def __init__(self, x: np.ndarray, y: np.ndarray, config: GAConfig, forest: ForestConfig,
                 test_fraction: float = 0.3):
        self.x = x
        self.y = np.asarray(y, dtype=bool)
        if self.y.all() or not self.y.any():
            raise ValueError("feature selection needs positive and negative examples")
        self.config = config
        self.forest = forest
        self.test_fraction = test_fraction
        self.cache: Dict[Tuple[bool, ...], CandidateSubset] = {}

    def __call__(self, mask: Tuple[bool, ...]) -> CandidateSubset:
        hit = self.cache.get(mask)
        if hit is not None:
            return hit
        idx = [i for i, b in enumerate(mask) if b]
        d = self.x.shape[1]
        if not idx or len(idx) > self.config.max_features:
            cand = CandidateSubset(mask, 0.0, float("-inf"), (0.0,) * d)
        else:
            model, f1 = fit_and_score(self.x[:, idx], self.y, self.forest, self.test_fraction,
                                      split_seed=self.forest.seed)
            util = np.zeros(d)
            util[idx] = model.utilities
            cand = CandidateSubset(mask, f1, fitness(f1, len(idx), self.config.penalty,
                                                     self.config.max_features), tuple(util.tolist()))
        self.cache[mask] = cand
        return cand


def _random_mask(rng: np.random.Generator, d: int, cap: int) -> Tuple[bool, ...]:
    k = int(rng.integers(1, min(cap, d) + 1))
    on = rng.choice(d, size=k, replace=False)
    m = np.zeros(d, dtype=bool)
    m[on] = True
    return tuple(m.tolist())


def _repair(mask: np.ndarray, prior: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    mask = mask.copy()
    while mask.sum() > cap:
        on = np.flatnonzero(mask)
        score = prior[on] + rng.random(len(on)) * 1e-9
        mask[on[np.argmin(score)]] = False
    if not mask.any():
        mask[int(np.argmax(prior + rng.random(len(prior)) * 1e-9))] = True
    return mask


def ga_search(x: np.ndarray, y: np.ndarray, feature_names: Sequence[str], label: str = "",
              config: GAConfig = GAConfig(), forest: Optional[ForestConfig] = None) -> SelectionResult:
    rng = np.random.default_rng(config.seed)
    forest = forest or ForestConfig(seed=config.seed)
    d = x.shape[1]
    if d < 1:
        raise ValueError("feature catalog is empty")
    evaluate = Evaluator(x, y, config, forest)
    # running utility estimate per feature, used for repair and for unseen bits
    prior_sum = np.zeros(d)
    prior_cnt = np.zeros(d)

    def prior() -> np.ndarray:
        return np.where(prior_cnt > 0, prior_sum / np.maximum(prior_cnt, 1), 1.0 / config.max_features)

    def score(mask) -> CandidateSubset:
        fresh = mask not in evaluate.cache
        c = evaluate(mask)
        if fresh and np.isfinite(c.fitness):
            on = np.array(c.mask)
            prior_sum[on] += np.array(c.utilities)[on]
            prior_cnt[on] += 1
        return c

    pop = [score(_random_mask(rng, d, config.max_features)) for _ in range(config.population)]
    history: List[GenerationStats] = []

    def record(gen: int) -> None:
        best = max(pop, key=_rank_key)
        fits = [c.fitness for c in pop if np.isfinite(c.fitness)]
        history.append(GenerationStats(gen, best.fitness, float(np.mean(fits)) if fits else float("-inf"),
                                       tuple(int(b) for b in best.mask)))

    record(0)
    for gen in range(1, config.generations + 1):
        ranked = sorted(pop, key=_rank_key, reverse=True)
        nxt = ranked[:config.elite]
        while len(nxt) < config.population:
            a = _tournament(pop, config.tournament, rng)
            b = _tournament(pop, config.tournament, rng)
            pa, pb = np.array(a.mask), np.array(b.mask)
            if rng.random() < config.crossover_rate:
                child = np.where(rng.random(d) < 0.5, pa, pb)
            else:
                child = pa.copy()
            util = np.maximum(np.array(a.utilities), np.array(b.utilities))
            flip = rng.random(d)
            on = child.copy()
            # selected bits survive in proportion to their utility; unselected bits flip at the base rate
            off_prob = config.mutation_rate * (1.0 - util / max(util.max(), 1e-12))
            child = np.where(on, ~(flip < off_prob), flip < config.mutation_rate)
            child = _repair(child, np.where(util > 0, util, prior()), config.max_features, rng)
            nxt.append(score(tuple(child.tolist())))
        pop = nxt
        record(gen)
    best = max(pop, key=_rank_key)
    return SelectionResult(label, list(feature_names), best, history, len(evaluate.cache))


def _rank_key(c: CandidateSubset):
    # higher fitness first; ties prefer smaller subsets, then lexically smaller masks
    return (c.fitness, -c.size, tuple(not b for b in c.mask))


def _tournament(pop: Sequence[CandidateSubset], k: int, rng: np.random.Generator) -> CandidateSubset:
    picks = rng.choice(len(pop), size=min(k, len(pop)), replace=False)
    return max((pop[i] for i in picks), key=_rank_key)


def select_for_labels(x: np.ndarray, targets: Dict[str, np.ndarray], feature_names: Sequence[str],
                      config: GAConfig = GAConfig(), forest: Optional[ForestConfig] = None,
                      ) -> Dict[str, SelectionResult]:
    """Run the search independently per label; labels lacking either class are skipped."""
    out = {}
    for label in sorted(targets):
        y = np.asarray(targets[label], dtype=bool)
        if y.all() or not y.any():
            continue
        out[label] = ga_search(x, y, feature_names, label, config, forest)
    return out


def save_report(results: Dict[str, SelectionResult], path) -> None:
    doc = {"version": 1, "labels": {k: v.to_dict() for k, v in results.items()}}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())
