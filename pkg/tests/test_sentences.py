import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from labelhunt.nn import f1_score
from labelhunt.sentences import (AnnotationStore, DiscreteEncoder, RelaxationParams, Sentence, SentenceConfig,
                                 SentenceSet, Word, annotate, compress, compress_set, crisp_eval, initialize,
                                 load_sets, prune, render_sentence, render_word, save_sets, select_best,
                                 set_loss_grad, soft_eval, train_sentences, DenseSet)


def word(d, j, coef, b):
    m = np.zeros(d, bool)
    m[j] = True
    w = np.zeros(d)
    w[j] = coef
    return Word(m, w, b)


def concept(x):
    return ((x[:, 0] <= 0.3) & (x[:, 1] <= 0.5)) | (x[:, 2] >= 0.8)


# -- encoding ---------------------------------------------------------------------------

def test_encoder_examples():
    flags = [True] * 3 + [False] * 7
    cont = np.linspace(2.0, 12.0, 10)
    enc = DiscreteEncoder(["flag", "proto", "bytes"], discrete=["flag", "proto"]).fit(
        {"flag": flags, "proto": ["tcp"] * 10, "bytes": cont})
    x = enc.transform({"flag": [True, False], "proto": ["tcp", "icmp"], "bytes": [12.0, 2.0]})
    assert x[0, 0] == pytest.approx(0.3) and x[1, 0] == pytest.approx(0.7)
    assert x[1, 1] == 0.0 and x[0, 1] == 1.0
    assert x[0, 2] == 1.0 and x[1, 2] == 0.0
    back = DiscreteEncoder.from_dict(enc.to_dict())
    assert np.array_equal(back.transform({"flag": flags, "proto": ["tcp"] * 10, "bytes": cont}),
                          enc.transform({"flag": flags, "proto": ["tcp"] * 10, "bytes": cont}))


# -- evaluation -------------------------------------------------------------------------

def test_soft_scores():
    x = np.array([[2.0, 0.0]])
    s = SentenceSet("l", ["a", "b"], [Sentence([Word(np.array([True, True]), np.array([1.0, 3.0]), 2.0)])])
    assert soft_eval(s, x, k=7.0)[0] == pytest.approx(0.5)
    # product over words: 0.5 * ~1
    s2 = SentenceSet("l", ["a", "b"], [Sentence([word(2, 0, 1.0, 2.0), word(2, 1, 1.0, 1e6)])])
    assert soft_eval(s2, x, k=7.0)[0] == pytest.approx(0.5)
    # max over sentences
    k = 1.0
    lo = np.log(0.2 / 0.8)      # sigmoid(lo) = 0.2
    hi = np.log(0.7 / 0.3)
    s3 = SentenceSet("l", ["a", "b"], [Sentence([word(2, 0, 1.0, 2.0 + lo)]), Sentence([word(2, 0, 1.0, 2.0 + hi)])])
    assert soft_eval(s3, x, k)[0] == pytest.approx(0.7)


def test_crisp_boundary_is_inclusive():
    ss = SentenceSet("l", ["x1"], [Sentence([word(1, 0, 1.0, 5.0)])])
    hit, idx = crisp_eval(ss, np.array([[5.0], [6.0]]))
    assert hit.tolist() == [True, False] and idx.tolist() == [0, -1]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.floats(-2, 2))
def test_soft_tends_to_crisp(xs, b):
    # away from the boundary, a sharp relaxation agrees with the crisp decision
    x = np.array([xs])
    ss = SentenceSet("l", list("abcd"), [Sentence([Word(np.array([1, 1, 0, 0], bool), np.array([1.0, -1.0, 0, 0]), b)])])
    margin = b - (xs[0] - xs[1])
    if abs(margin) < 0.05:
        return
    assert (soft_eval(ss, x, 1000.0)[0] > 0.5) == ss.crisp(x)[0]


# -- loss ----------------------------------------------------------------------------------

def _dense(rng, S=2, K=2, d=3):
    M = rng.random((S, K, d)) < 0.6
    M[..., 0] |= ~M.any(axis=2)
    W = rng.normal(size=(S, K, d)) * M
    return W, rng.normal(size=(S, K)), M, np.ones((S, K), bool)


def test_plain_bce_when_extra_weights_zero():
    rng = np.random.default_rng(0)
    W, B, M, act = _dense(rng)
    x = rng.random((30, 3))
    y = rng.random(30) < 0.5
    loss, _, _ = set_loss_grad(W, B, M, act, x, y, RelaxationParams(k=3.0, alpha=0, beta=0, gamma=0))
    p = DenseSet(W, B, M, act)
    ss = p.to_set("l", list("abc"))
    s = soft_eval(ss, x, 3.0)
    bce = -np.mean(np.where(y, np.log(s), np.log(1 - s)))
    assert loss == pytest.approx(bce, rel=1e-12)


def test_perfect_rejector_loss_vanishes():
    x = np.random.default_rng(1).random((20, 1))
    losses = []
    for b in (0.0, -0.5, -1.0, -2.0, -50.0):     # the word x <= b holds less and less often
        loss, _, _ = set_loss_grad(np.ones((1, 1, 1)), np.full((1, 1), b), np.ones((1, 1, 1), bool),
                                   np.ones((1, 1), bool), x, np.zeros(20, bool), RelaxationParams(k=20.0, beta=0.0))
        losses.append(loss)
    assert all(q < p for p, q in zip(losses, losses[1:]))
    assert losses[-1] < 1e-6        # only the log clipping floor remains


def test_gradient_matches_finite_differences():
    # two sentences of one word each over three features: six free parameters
    rng = np.random.default_rng(7)
    M = np.array([[[True, True, False]], [[False, True, True]]])
    W = rng.normal(size=(2, 1, 3)) * M
    B = rng.normal(size=(2, 1))
    act = np.ones((2, 1), bool)
    x = rng.normal(size=(25, 3))
    y = rng.random(25) < 0.4
    rp = RelaxationParams(k=2.0, alpha=0.3, beta=0.05)
    _, dW, dB = set_loss_grad(W, B, M, act, x, y, rp)
    h = 1e-6
    for arr, grad in ((W, dW), (B, dB)):
        for idx in zip(*np.nonzero(M if arr is W else np.ones_like(B, bool))):
            old = arr[idx]
            arr[idx] = old + h
            up = set_loss_grad(W, B, M, act, x, y, rp)[0]
            arr[idx] = old - h
            dn = set_loss_grad(W, B, M, act, x, y, rp)[0]
            arr[idx] = old
            num = (up - dn) / (2 * h)
            assert abs(num - grad[idx]) <= 1e-4 * max(abs(num), abs(grad[idx]), 1e-8)


def test_relaxation_validation():
    with pytest.raises(ValueError):
        RelaxationParams(k=0)
    with pytest.raises(ValueError):
        RelaxationParams(alpha=-1)


# -- training ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def planted():
    rng = np.random.default_rng(0)
    x = rng.random((3000, 4))
    xt = rng.random((3000, 4))
    ss = train_sentences(x, concept(x), list("abcd"), "p", SentenceConfig(seed=0))
    return x, xt, ss


def test_planted_concept_recovered(planted):
    x, xt, ss = planted
    assert f1_score(ss.crisp(xt), concept(xt)) >= 0.95
    p = prune(ss, x, concept(x), 0.01)
    assert len(p.sentences) <= 3
    c = compress_set(p, x)
    assert np.array_equal(c.crisp(x), p.crisp(x))


def test_zero_rounds_returns_initialization():
    rng = np.random.default_rng(2)
    x = rng.random((200, 3))
    y = x[:, 0] < 0.4
    cfg = SentenceConfig(rounds=0, epochs=0, seed=11)
    got = train_sentences(x, y, list("abc"), "l", cfg)
    init = initialize("l", list("abc"), x, y, cfg, np.random.default_rng(11))
    for a, b in zip(got.sentences, init.sentences):
        for wa, wb in zip(a.words, b.words):
            assert np.array_equal(wa.mask, wb.mask) and np.array_equal(wa.w, wb.w) and wa.b == wb.b


def test_training_deterministic_and_needs_positives():
    rng = np.random.default_rng(3)
    x = rng.random((300, 3))
    y = x[:, 1] > 0.6
    cfg = SentenceConfig(rounds=2, epochs=2, seed=5)
    a = train_sentences(x, y, list("abc"), "l", cfg)
    b = train_sentences(x, y, list("abc"), "l", cfg)
    assert a.to_dict() == b.to_dict()
    for s in a.sentences:
        assert all(np.all(w.w[~w.mask] == 0) and w.mask.any() for w in s.words)
    with pytest.raises(ValueError):
        train_sentences(x, np.zeros(300, bool), list("abc"), "l", cfg)


# -- pruning and compression -------------------------------------------------------------------

def test_prune_removes_duplicate():
    x = np.linspace(0, 1, 50)[:, None]
    y = x[:, 0] <= 0.4
    s = Sentence([word(1, 0, 1.0, 0.4)])
    ss = SentenceSet("l", ["a"], [s, Sentence([word(1, 0, 1.0, 0.4)])])
    p = prune(ss, x, y, 0.0)
    assert len(p.sentences) == 1 and f1_score(p.crisp(x), y) == 1.0


def test_prune_keeps_necessary_sentences():
    x = np.linspace(0, 1, 50)[:, None]
    y = (x[:, 0] <= 0.2) | (x[:, 0] >= 0.8)
    ss = SentenceSet("l", ["a"], [Sentence([word(1, 0, 1.0, 0.2)]), Sentence([word(1, 0, -1.0, -0.8)])])
    assert len(prune(ss, x, y, 0.0).sentences) == 2


def test_prune_coverage_instance():
    rng = np.random.default_rng(4)
    x = rng.random((1000, 2))
    y = (x[:, 0] <= 0.25) | (x[:, 1] <= 0.25)
    sents = [Sentence([word(2, 0, 1.0, 0.25)]), Sentence([word(2, 1, 1.0, 0.25)])]
    # eight sentences covering strict subsets of the positives
    for t in np.linspace(0.02, 0.2, 8):
        sents.append(Sentence([word(2, int(t * 100) % 2, 1.0, float(t))]))
    order = rng.permutation(10)
    ss = SentenceSet("l", ["a", "b"], [sents[i] for i in order])
    p = prune(ss, x, y, 0.01)
    assert len(p.sentences) <= 3
    assert all(any(s is q for q in ss.sentences) for s in p.sentences)
    assert f1_score(p.crisp(x), y) >= f1_score(ss.crisp(x), y) - 0.01


def test_compress_examples():
    x = np.random.default_rng(5).random((200, 2))
    vacuous = Sentence([word(2, 0, 1.0, 1e9), word(2, 1, 1.0, 0.5)])
    c = compress(vacuous, x)
    assert len(c.words) == 1 and c.words[0].mask[1]
    dominated = Sentence([word(2, 0, 1.0, 0.3), word(2, 0, 1.0, 0.5)])
    c = compress(dominated, x)
    assert len(c.words) == 1 and c.words[0].b == 0.3
    again = compress(c, x)
    assert len(again.words) == 1 and again.words[0].b == c.words[0].b
    # a zero coefficient bit is dropped from the mask
    w = Word(np.array([True, True]), np.array([1.0, 0.0]), 0.4)
    c = compress(Sentence([w]), x)
    assert c.words[0].mask.tolist() == [True, False]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_compress_never_changes_decisions(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((100, 3))
    words = [word(3, int(rng.integers(3)), float(rng.choice([-1, 1])), float(rng.uniform(-1, 1)))
             for _ in range(int(rng.integers(1, 5)))]
    s = Sentence(words)
    assert np.array_equal(compress(s, x).crisp(x), s.crisp(x))


# -- selection and rendering -------------------------------------------------------------------

def test_select_best_rules():
    big = Sentence([Word(np.array([1, 1, 1, 1], bool), np.ones(4), 9.0)], fitness=0.9)
    small = Sentence([Word(np.array([1, 1, 0, 0], bool), np.array([1.0, 1, 0, 0]), 9.0)], fitness=0.1)
    tie = Sentence([Word(np.array([0, 0, 1, 1], bool), np.array([0, 0, 1.0, 1]), 9.0)], fitness=0.5)
    ss = SentenceSet("l", list("abcd"), [big, small, tie])
    assert select_best(ss, [0, 1]) == 1
    assert select_best(ss, [1, 2]) == 2
    with pytest.raises(ValueError):
        select_best(ss, [])


def test_render_word():
    names = ["bytes_out", "distinct_ports"]
    assert render_word(word(2, 1, 1.0, 40.0), names) == "distinct_ports ≤ 40"
    assert render_word(word(2, 0, -2.0, -10.0), names) == "bytes_out ≥ 5"
    s = Sentence([word(2, 1, 1.0, 40.0), word(2, 0, -2.0, -10.0)])
    assert render_sentence(s, names) == "distinct_ports ≤ 40 AND bytes_out ≥ 5"


def test_annotations_and_persistence(tmp_path):
    ss = SentenceSet("scan", ["distinct_ports"], [Sentence([word(1, 0, -1.0, -40.0)])])
    x = np.array([[10.0], [50.0], [41.0]])
    notes = annotate({"scan": ss}, x, "conn", np.array([7, 8, 9]), labels_of_row=[[], ["scan"], []])
    assert [(a.raw_index, a.text) for a in notes] == [(8, "scan: distinct_ports ≥ 40")]
    store = AnnotationStore(tmp_path / "a.jsonl")
    store.add(notes)
    store.save()
    assert AnnotationStore(tmp_path / "a.jsonl").get("conn", 8) == "scan: distinct_ports ≥ 40"
    save_sets({"scan": ss}, tmp_path / "s.json")
    back, enc = load_sets(tmp_path / "s.json")
    assert enc is None and back["scan"].to_dict() == ss.to_dict()
