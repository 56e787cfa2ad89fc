import numpy as np
import pytest

from tokenrec.decoder import (CatalogTrie, RankedRecommendations, build_trie,
                              constrained_beam_search, decode_topn,
                              leaf_scores, rank_for_dist, rank_of_item)
from tokenrec.errors import ConfigError, DataError
from tokenrec.fsq import ItemTokenSequence
from tokenrec.model import ModelConfig, SequenceModel, TokenizedSequence


def seqs_from(pairs):
    return [ItemTokenSequence(item, tuple(toks)) for item, toks in pairs]


def random_dist(rng, k, vocab, zeros=0):
    """Random slot distributions; optionally zero out some probabilities."""
    d = rng.dirichlet(np.ones(vocab), size=k)
    for _ in range(zeros):
        d[rng.integers(k), rng.integers(vocab)] = 0.0
    return d / d.sum(axis=1, keepdims=True)


def brute_force_topn(dist, sequences, n):
    """Independent oracle: score every catalog sequence, sort by the
    deterministic total order, take the first n item entries."""
    with np.errstate(divide="ignore"):
        logp = np.log(np.asarray(dist))
    scored = []
    for seq in sequences:
        s = float(sum(logp[k, t] for k, t in enumerate(seq.tokens)))
        scored.append((-s, tuple(seq.tokens), seq.item_id))
    scored.sort()
    return [(item, -neg) for neg, _, item in scored[:n]]


# --- trie ---------------------------------------------------------------


def test_trie_distinct_sequences():
    trie = build_trie(seqs_from([("a", (0, 1)), ("b", (1, 1)), ("c", (2, 0))]))
    assert trie.depth == 2
    assert trie.n_leaves == 3
    assert trie.item_count == 3
    assert trie.node_count <= 1 + 3 + 3


def test_trie_shared_sequence_shares_leaf():
    trie = build_trie(seqs_from([("b", (0, 1)), ("a", (0, 1))]))
    assert trie.n_leaves == 1
    assert trie._leaf_items[0] == ["a", "b"]  # sorted by item_id


def test_trie_empty_catalog_decodes_empty(rng):
    trie = build_trie([], tokens_per_item=2)
    assert trie.node_count == 1
    result = constrained_beam_search(random_dist(rng, 2, 6), trie, 4, 3)
    assert result.entries == []


def test_trie_rejects_inconsistent_length():
    with pytest.raises(DataError):
        build_trie(seqs_from([("a", (0, 1)), ("b", (0, 1, 2))]))


def test_trie_rejects_duplicate_items():
    with pytest.raises(DataError):
        build_trie(seqs_from([("a", (0, 1)), ("a", (1, 1))]))


def test_trie_tokens_of():
    trie = build_trie(seqs_from([("a", (3, 4))]))
    assert trie.tokens_of("a") == (3, 4)
    with pytest.raises(DataError):
        trie.tokens_of("zz")


# --- beam search ----------------------------------------------------------


def test_beam_single_item_scores_sum_of_slot_logprobs(rng):
    dist = random_dist(rng, 3, 8)
    trie = build_trie(seqs_from([("only", (2, 5, 1))]))
    result = constrained_beam_search(dist, trie, 4, 5)
    assert result.item_ids() == ["only"]
    expected = float(np.log(dist[0, 2]) + np.log(dist[1, 5]) + np.log(dist[2, 1]))
    assert abs(result.entries[0][1] - expected) < 1e-12


def test_beam_never_emits_off_catalog_combination(rng):
    # the globally best token combination (0,0) is absent from the catalog
    dist = np.array([[0.9, 0.05, 0.05], [0.9, 0.05, 0.05]])
    trie = build_trie(seqs_from([("a", (1, 2)), ("b", (2, 1))]))
    result = constrained_beam_search(dist, trie, 8, 8)
    assert set(result.item_ids()) == {"a", "b"}


def test_beam_equals_brute_force_on_random_instances(rng):
    for trial in range(40):
        vocab = int(rng.integers(4, 14))
        k = int(rng.integers(2, 4))
        n_items = int(rng.integers(1, 60))
        sequences = seqs_from(
            [(f"it{i:03d}", tuple(rng.integers(0, vocab, size=k)))
             for i in range(n_items)])
        # collisions across items are possible and intended
        dedup = {}
        for s in sequences:
            dedup.setdefault(s.item_id, s)
        trie = build_trie(sequences)
        dist = random_dist(rng, k, vocab, zeros=int(rng.integers(0, 3)))
        n = int(rng.integers(1, n_items + 2))
        beam_width = trie.n_leaves  # >= distinct sequence count
        got = constrained_beam_search(dist, trie, beam_width, n)
        expected = brute_force_topn(dist, sequences, n)
        assert got.item_ids() == [i for i, _ in expected]
        for (gi, gs), (ei, es) in zip(got.entries, expected):
            assert gi == ei
            assert np.isclose(gs, es) or (np.isneginf(gs) and np.isneginf(es))


def test_beam_ties_broken_by_token_then_item(rng):
    vocab = 4
    dist = np.full((2, vocab), 1.0 / vocab)  # all sequences tie
    sequences = seqs_from([("z", (0, 1)), ("y", (0, 1)), ("x", (1, 0)),
                           ("w", (0, 0))])
    trie = build_trie(sequences)
    result = constrained_beam_search(dist, trie, 10, 10)
    assert result.item_ids() == ["w", "y", "z", "x"]


def test_beam_shared_leaf_items_emitted_consecutively(rng):
    dist = random_dist(rng, 2, 6)
    sequences = seqs_from([("b", (2, 2)), ("a", (2, 2)), ("c", (1, 1))])
    trie = build_trie(sequences)
    result = constrained_beam_search(dist, trie, 4, 3)
    ids = result.item_ids()
    ia, ib = ids.index("a"), ids.index("b")
    assert abs(ia - ib) == 1 and ia < ib


def test_beam_respects_requested_count(rng):
    sequences = seqs_from([(f"i{i}", (i, i)) for i in range(6)])
    trie = build_trie(sequences)
    dist = random_dist(rng, 2, 6)
    assert len(constrained_beam_search(dist, trie, 6, 2).entries) == 2
    assert len(constrained_beam_search(dist, trie, 6, 99).entries) == 6


def test_beam_rejects_zero_width(rng):
    trie = build_trie(seqs_from([("a", (0, 1))]))
    with pytest.raises(ConfigError):
        constrained_beam_search(random_dist(rng, 2, 4), trie, 0, 1)


def test_beam_rejects_slot_mismatch(rng):
    trie = build_trie(seqs_from([("a", (0, 1))]))
    with pytest.raises(DataError):
        constrained_beam_search(random_dist(rng, 3, 4), trie, 2, 1)


def test_beam_expansion_counter_bounded(rng):
    """Materialized candidates stay within depth * beam_width * branching."""
    for trial in range(20):
        vocab = 8
        k = 3
        sequences = seqs_from(
            [(f"i{i:03d}", tuple(rng.integers(0, vocab, size=k)))
             for i in range(80)])
        trie = build_trie(sequences)
        beam_width = int(rng.integers(1, 12))
        result = constrained_beam_search(random_dist(rng, k, vocab), trie,
                                         beam_width, 5)
        max_branching = vocab
        assert result.expansions <= k * beam_width * max_branching


# --- full-catalog ranking ---------------------------------------------------


def test_rank_single_item_catalog(rng):
    trie = build_trie(seqs_from([("solo", (1, 2))]))
    assert rank_for_dist(random_dist(rng, 2, 5), trie, "solo") == 1


def test_rank_uniform_scores_follow_tiebreak_order(rng):
    vocab = 5
    dist = np.full((2, vocab), 1.0 / vocab)
    sequences = seqs_from([("c", (0, 1)), ("a", (0, 2)), ("b", (0, 1))])
    trie = build_trie(sequences)
    # order: tokens (0,1) items [b, c], then (0,2) item a
    assert rank_for_dist(dist, trie, "b") == 1
    assert rank_for_dist(dist, trie, "c") == 2
    assert rank_for_dist(dist, trie, "a") == 3


def test_rank_matches_decode_position_with_full_beam(rng):
    for trial in range(15):
        vocab = 9
        k = 2
        sequences = seqs_from(
            [(f"i{i:03d}", tuple(rng.integers(0, vocab, size=k)))
             for i in range(30)])
        trie = build_trie(sequences)
        dist = random_dist(rng, k, vocab)
        decoded = constrained_beam_search(dist, trie, trie.n_leaves, 30)
        for pos, (item, _) in enumerate(decoded.entries, start=1):
            assert rank_for_dist(dist, trie, item) == pos


def test_rank_unknown_target(rng):
    trie = build_trie(seqs_from([("a", (0, 1))]))
    with pytest.raises(DataError):
        rank_for_dist(random_dist(rng, 2, 4), trie, "nope")


# --- model integration -------------------------------------------------------


def _tiny_model_and_history(rng, vocab=12, k=2):
    cfg = ModelConfig(vocab_size=vocab, width=8, n_layers=1, n_heads=2,
                      max_tokens=16, tokens_per_item=k, feature_dim=3)
    model = SequenceModel(cfg, seed=0)
    tokens = rng.integers(0, vocab, size=(3, k))
    feats = rng.normal(size=(3, k, cfg.feature_dim))
    return model, TokenizedSequence(tokens, feats, "u")


def test_decode_topn_deterministic_and_catalog_only(rng):
    model, history = _tiny_model_and_history(rng)
    sequences = seqs_from(
        [(f"i{i:02d}", tuple(rng.integers(0, 12, size=2))) for i in range(20)])
    trie = build_trie(sequences)
    r1 = decode_topn(history, model, trie, beam_width=8, n=5)
    r2 = decode_topn(history, model, trie, beam_width=8, n=5)
    assert r1.entries == r2.entries
    assert len(r1.entries) == 5
    catalog_ids = {s.item_id for s in sequences}
    assert set(r1.item_ids()) <= catalog_ids


def test_decode_topn_length_capped_by_reachable(rng):
    model, history = _tiny_model_and_history(rng)
    sequences = seqs_from([("a", (0, 1)), ("b", (0, 1)), ("c", (3, 3))])
    trie = build_trie(sequences)
    result = decode_topn(history, model, trie, beam_width=10, n=10)
    assert len(result.entries) == 3


def test_decode_topn_rejects_depth_mismatch(rng):
    model, history = _tiny_model_and_history(rng, k=2)
    trie = build_trie(seqs_from([("a", (0, 1, 2))]))
    with pytest.raises(ConfigError):
        decode_topn(history, model, trie, beam_width=4, n=2)


def test_rank_of_item_via_model(rng):
    model, history = _tiny_model_and_history(rng)
    sequences = seqs_from(
        [(f"i{i:02d}", tuple(rng.integers(0, 12, size=2))) for i in range(15)])
    trie = build_trie(sequences)
    decoded = decode_topn(history, model, trie, trie.n_leaves, 15)
    target = decoded.entries[0][0]
    assert rank_of_item(history, model, trie, target) == 1


def test_recommendation_records_format(rng):
    result = RankedRecommendations(entries=[("b", -0.5), ("a", -1.25)])
    lines = result.records().splitlines()
    assert lines == ["1 b -0.5", "2 a -1.25"]


def test_decode_trained_cycle_ranks_truth_first(rng):
    """Deterministic 5-item cycle: after training, the true next item is
    decoded at rank 1 for >= 90% of held-out contexts."""
    from tokenrec.model import ModelHyper, train_model

    cfg = ModelConfig(vocab_size=12, width=16, n_layers=1, n_heads=2,
                      max_tokens=24, tokens_per_item=2, feature_dim=4)
    item_tokens = np.array([[2 * i, 2 * i + 1] for i in range(5)])
    item_feats = np.random.default_rng(99).normal(size=(5, 2, cfg.feature_dim))
    def seq_of(start, length):
        idx = np.array([(start + j) % 5 for j in range(length)])
        return TokenizedSequence(item_tokens[idx], item_feats[idx])
    train = [seq_of(int(rng.integers(5)), 8) for _ in range(80)]
    model = SequenceModel(cfg, seed=0)
    model, _ = train_model(train, model, ModelHyper(epochs=40, lr=5e-3, seed=0))

    trie = build_trie(seqs_from(
        [(f"item{i}", tuple(item_tokens[i])) for i in range(5)]))
    hits = 0
    cases = 50
    for c in range(cases):
        start = c % 5
        length = 2 + c % 5
        history = seq_of(start, length)
        truth = f"item{(start + length) % 5}"
        top = decode_topn(history, model, trie, beam_width=5, n=1)
        hits += top.entries[0][0] == truth
    assert hits >= 0.9 * cases, f"rank-1 accuracy {hits}/{cases}"
