import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from labelhunt.gme import TrainingConfig, fit_all
from labelhunt.labels import apply_ruleset, load_default_ruleset
from labelhunt.log_store import Store, load_default_registry
from labelhunt.scenario import FILES, ScenarioSpec, generate


class Corpus:
    """A generated scenario written to disk and ingested into a store."""

    def __init__(self, spec: ScenarioSpec, directory: Path, train_fraction: float = 0.6):
        self.spec = spec
        self.scenario = generate(spec)
        self.paths = self.scenario.write(directory)
        self.registry = load_default_registry()
        self.store = Store(self.registry)
        for s in FILES:
            self.store.ingest_file(s, self.paths[s])
        self.ruleset = load_default_ruleset(self.registry)
        lo = spec.start
        self.train_range = (lo, lo + train_fraction * spec.duration)
        self.labeled = apply_ruleset(self.store, self.ruleset, train_range=self.train_range)
        self.label_sensor = {r.label: r.sensor for r in self.ruleset.rules}
        # model training uses [start, 50%) and tunes thresholds on [50%, 60%)
        self.fit_range = (lo, lo + 0.5 * spec.duration)
        self.val_range = (self.fit_range[1], self.train_range[1])
        self.test_range = (self.train_range[1], lo + spec.duration + 1.0)

    @property
    def truth(self):
        return self.scenario.truth


@pytest.fixture(scope="session")
def registry():
    return load_default_registry()


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """About 40k rows with three injections of every behavior kind."""
    spec = ScenarioSpec(seed=1, duration=3000.0, random_injections={"per_kind": 3})
    return Corpus(spec, tmp_path_factory.mktemp("small"))


@pytest.fixture(scope="session")
def small_model(small_corpus):
    c = small_corpus
    cfg = TrainingConfig(epochs=12, expert_epochs=12, neg_per_epoch=8000)
    return fit_all(c.store, c.labeled, c.label_sensor, cfg, c.fit_range, c.val_range)


@pytest.fixture(scope="session")
def large_corpus(tmp_path_factory):
    """About 2e5 rows with twenty injections of every behavior kind."""
    spec = ScenarioSpec(seed=3, duration=15000.0, random_injections={"per_kind": 20})
    return Corpus(spec, tmp_path_factory.mktemp("large"))


@pytest.fixture(scope="session")
def large_model(large_corpus):
    c = large_corpus
    return fit_all(c.store, c.labeled, c.label_sensor, TrainingConfig(), c.fit_range, c.val_range)
