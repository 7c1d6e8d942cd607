import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streetrank.textmine import (
    LdaModel,
    TermSet,
    default_gazetteers,
    default_manual_terms,
    extract_entities,
    lda_fit,
    lda_infer,
    manual_topic_counts,
    tokenize,
)


def test_tokenize_splits_and_filters():
    assert tokenize("sleeping-bag by tesco's door") == ["sleeping", "bag", "tesco", "door"]


def test_tokenize_empty_and_stopwords():
    assert tokenize("") == []
    assert tokenize("a a a") == []


def test_entity_extraction_fixture():
    gaz = (TermSet.from_terms("location", ["station", "park", "train station"]),
           TermSet.from_terms("activity", ["begging", "sleeping"]))
    hits = extract_entities(["tent", "outside", "station"], gaz)
    assert dict(hits["location_entities"]) == {"station": 1}
    assert dict(hits["activity_entities"]) == {}


def test_entity_extraction_no_matches():
    gaz = (TermSet.from_terms("location", ["park"]),
           TermSet.from_terms("activity", ["begging"]))
    hits = extract_entities(["red", "coat"], gaz)
    assert not hits["location_entities"] and not hits["activity_entities"]


def test_bigram_matched_before_unigram():
    gaz = TermSet.from_terms("location", ["station", "train station"])
    assert dict(gaz.match(["train", "station"])) == {"train station": 1}
    assert dict(gaz.match(["station", "train"])) == {"station": 1}


def test_default_gazetteers_cover_spec_example():
    hits = extract_entities(["tent", "outside", "station"])
    assert dict(hits["location_entities"]) == {"station": 1}
    assert dict(hits["activity_entities"]) == {}


def test_empty_gazetteer_rejected():
    with pytest.raises(ValueError):
        TermSet.from_terms("location", [])


def test_manual_counts_sleep_words():
    counts = manual_topic_counts(tokenize("tent and duvet"))
    assert counts["sleep_count"] == 2


def test_manual_counts_beg_bigram():
    counts = manual_topic_counts(tokenize("small change"))
    assert counts["beg_count"] == 1


def test_manual_counts_no_hits():
    assert manual_topic_counts(["purple", "umbrella"]) == {"sleep_count": 0, "beg_count": 0}


@given(st.lists(st.sampled_from(
    ["small", "change", "beg", "money", "tent", "bag", "random", "words"]),
    max_size=12),
    st.randoms(use_true_random=False))
def test_manual_counts_order_invariant(tokens, rng):
    before = manual_topic_counts(tokens)
    shuffled = list(tokens)
    rng.shuffle(shuffled)
    assert manual_topic_counts(shuffled) == before


# ---------------------------------------------------------------------------
# LDA


def planted_corpus(seed=7, docs_per_topic=150, doc_len=20):
    rng = np.random.default_rng(seed)
    vocab_a = [f"a{i}" for i in range(10)]
    vocab_b = [f"b{i}" for i in range(10)]
    corpus = []
    for vocab in (vocab_a, vocab_b):
        for _ in range(docs_per_topic):
            corpus.append(list(rng.choice(vocab, size=doc_len)))
    return corpus, vocab_a, vocab_b


def topic_mass(model, words):
    cols = [model.vocabulary.tokens.index(w) for w in words
            if w in model.vocabulary.tokens]
    return model.phi[:, cols].sum(axis=1)


def test_lda_recovers_disjoint_topics():
    corpus, vocab_a, vocab_b = planted_corpus()
    model = lda_fit(corpus, k=2, sweeps=500, seed=11)
    mass_a = topic_mass(model, vocab_a)
    mass_b = topic_mass(model, vocab_b)
    purity = max(mass_a[0] + mass_b[1], mass_a[1] + mass_b[0]) / 2.0
    assert purity >= 0.9


def test_lda_single_topic_collapses_to_unigram():
    corpus = [["x", "y"], ["y", "y"], ["z", "x", "y"]]
    model = lda_fit(corpus, k=1, sweeps=50, seed=0, beta=0.01)
    counts = {"x": 2, "y": 4, "z": 1}
    total = sum(counts.values())
    vsize = len(counts)
    expected = np.array([(counts[t] + 0.01) / (total + vsize * 0.01)
                         for t in model.vocabulary.tokens])
    assert np.allclose(model.phi[0], expected, atol=1e-12)


def test_lda_deterministic_per_seed():
    corpus, _, _ = planted_corpus(docs_per_topic=20, doc_len=8)
    one = lda_fit(corpus, k=3, sweeps=60, seed=42)
    two = lda_fit(corpus, k=3, sweeps=60, seed=42)
    other = lda_fit(corpus, k=3, sweeps=60, seed=43)
    assert np.array_equal(one.phi, two.phi)
    assert not np.array_equal(one.phi, other.phi)


def test_lda_rows_are_distributions():
    corpus, _, _ = planted_corpus(docs_per_topic=20, doc_len=8)
    model = lda_fit(corpus, k=4, sweeps=40, seed=1)
    assert (model.phi >= 0).all()
    assert np.allclose(model.phi.sum(axis=1), 1.0, atol=1e-9)


def test_lda_needs_enough_documents():
    with pytest.raises(ValueError):
        lda_fit([["x"], []], k=2, sweeps=10, seed=0)


def test_infer_empty_document_is_uniform():
    corpus, _, _ = planted_corpus(docs_per_topic=20, doc_len=8)
    model = lda_fit(corpus, k=2, sweeps=40, seed=5)
    assert np.allclose(lda_infer(model, []), [0.5, 0.5])


def test_infer_unseen_vocabulary_is_uniform():
    corpus, _, _ = planted_corpus(docs_per_topic=20, doc_len=8)
    model = lda_fit(corpus, k=2, sweeps=40, seed=5)
    assert np.allclose(lda_infer(model, ["zebra", "quux"]), [0.5, 0.5])


def test_infer_matches_planted_topic():
    corpus, vocab_a, vocab_b = planted_corpus()
    model = lda_fit(corpus, k=2, sweeps=500, seed=11)
    topic_for_a = int(np.argmax(topic_mass(model, vocab_a)))
    theta = lda_infer(model, vocab_a * 2, sweeps=100, seed=3)
    assert int(np.argmax(theta)) == topic_for_a


@settings(max_examples=25, deadline=None)
@given(st.lists(st.sampled_from([f"a{i}" for i in range(10)] + ["unseen"]),
                max_size=30),
       st.integers(min_value=0, max_value=2**31))
def test_infer_returns_simplex(doc, seed):
    model = _SIMPLEX_MODEL
    theta = lda_infer(model, doc, sweeps=20, seed=seed)
    assert (theta >= 0).all()
    assert abs(theta.sum() - 1.0) <= 1e-9


_SIMPLEX_MODEL = lda_fit(planted_corpus(docs_per_topic=20, doc_len=8)[0],
                         k=3, sweeps=30, seed=9)


def test_model_roundtrip(tmp_path):
    corpus, _, _ = planted_corpus(docs_per_topic=20, doc_len=8)
    model = lda_fit(corpus, k=2, sweeps=30, seed=2)
    path = tmp_path / "topics.npz"
    model.save(path)
    loaded = LdaModel.load(path)
    assert np.array_equal(loaded.phi, model.phi)
    assert loaded.vocabulary.tokens == model.vocabulary.tokens
    doc = ["a1", "a2", "b3"]
    assert np.array_equal(lda_infer(loaded, doc, seed=1), lda_infer(model, doc, seed=1))


def test_model_rejects_unknown_version(tmp_path):
    corpus, _, _ = planted_corpus(docs_per_topic=20, doc_len=8)
    model = lda_fit(corpus, k=2, sweeps=10, seed=2)
    path = tmp_path / "topics.npz"
    np.savez(path, version=np.int64(99), phi=model.phi,
             tokens=np.array(model.vocabulary.tokens, dtype=np.str_),
             doc_freq=model.vocabulary.doc_freq,
             params=np.array([1.0, 0.01, 10, 2]))
    with pytest.raises(ValueError):
        LdaModel.load(path)


def test_default_term_lists_load():
    sleep, beg = default_manual_terms()
    loc, act = default_gazetteers()
    assert "tent" in sleep.unigrams and ("small", "change") in beg.bigrams
    assert "station" in loc.unigrams and "sleeping" in act.unigrams
