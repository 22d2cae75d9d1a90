import itertools

import numpy as np
import pytest

from avasr.decoder import (
    Grammar,
    Lexicon,
    aggregate_wer,
    build_graph,
    compute_wer,
    frame_accuracy,
    load_grammar,
    load_lexicon,
    render_score_report,
    save_grammar,
    save_lexicon,
    viterbi_decode,
    wer_percent,
)
from avasr.errors import DataError

GRAMMAR = Grammar(slots=[("cmd", ["go", "stop"]), ("col", ["red", "blue", "tan"])])
LEXICON = Lexicon(pron={"go": (0, 1), "stop": (2,), "red": (3, 0), "blue": (1, 2, 3), "tan": (4,)})


def _brute_force(posteriors, graph, priors=None, lexicon=LEXICON):
    """Enumerate every sentence and force-align it exactly.

    Independent oracle: per-sentence DP over its phone-state chain using
    the same self-loop/advance costs, returning the best (score, words)
    with ties broken toward the lexicographically smallest rank tuple.
    """
    post = np.asarray(posteriors, dtype=np.float64)
    T = post.shape[0]
    em = np.log(np.maximum(post, 1e-300))
    if priors is not None:
        em = em - np.log(np.asarray(priors, dtype=np.float64))[None, :]
    grammar = graph.grammar
    best = None
    for sentence in itertools.product(*(words for _, words in grammar.slots)):
        phones = []
        for slot, word in enumerate(sentence):
            phones.extend(lexicon.pron[word])
        S = len(phones)
        if S > T:
            continue
        prev = np.full(S, -np.inf)
        prev[0] = em[0, phones[0]]
        for t in range(1, T):
            cur = np.full(S, -np.inf)
            for s in range(S):
                stay = prev[s] + graph.log_self
                enter = prev[s - 1] + graph.log_adv if s > 0 else -np.inf
                cur[s] = max(stay, enter) + em[t, phones[s]]
            prev = cur
        score = prev[S - 1]
        ranks = tuple(
            sorted(words).index(word)
            for (_, words), word in zip(grammar.slots, sentence)
        )
        key = (-score, ranks)
        if best is None or key < best[0]:
            best = (key, list(sentence), score)
    return best[1], best[2]


def _random_posteriors(rng, T, K):
    post = rng.uniform(0.01, 1.0, size=(T, K))
    return post / post.sum(axis=1, keepdims=True)


# ----------------------------------------------------------- grammar/lexicon


def test_grammar_counts():
    assert GRAMMAR.num_slots == 2
    assert GRAMMAR.num_sentences == 6


def test_grammar_validation():
    with pytest.raises(DataError):
        Grammar(slots=[])
    with pytest.raises(DataError):
        Grammar(slots=[("a", [])])
    with pytest.raises(DataError):
        Grammar(slots=[("a", ["x", "x"])])
    with pytest.raises(DataError):
        Grammar(slots=[("a", ["x"]), ("a", ["y"])])


def test_lexicon_validation():
    assert LEXICON.num_phonemes == 5
    with pytest.raises(DataError):
        Lexicon(pron={})
    with pytest.raises(DataError):
        Lexicon(pron={"w": ()})
    with pytest.raises(DataError):
        Lexicon(pron={"w": (-1,)})


def test_grammar_file_roundtrip(tmp_path):
    path = tmp_path / "g.txt"
    save_grammar(GRAMMAR, path)
    loaded = load_grammar(path)
    assert loaded.slots == GRAMMAR.slots
    with pytest.raises(DataError):
        load_grammar(path, expected_slots=3)


def test_lexicon_file_roundtrip(tmp_path):
    path = tmp_path / "l.txt"
    save_lexicon(LEXICON, path)
    assert load_lexicon(path).pron == LEXICON.pron


def test_grammar_file_errors(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("slot_without_colon go stop\n")
    with pytest.raises(DataError):
        load_grammar(path)
    path.write_text("")
    with pytest.raises(DataError):
        load_grammar(path)


# ------------------------------------------------------------------ graph


def test_graph_state_layout():
    graph = build_graph(GRAMMAR, LEXICON)
    # states = total phones over each slot's words
    assert graph.num_states == (2 + 1) + (2 + 3 + 1)
    assert graph.min_path_states == 1 + 1  # shortest word per slot
    np.testing.assert_array_equal(np.unique(graph.state_slot), [0, 1])
    # first/last states delimit each word's chain
    for slot, (_, words) in enumerate(GRAMMAR.slots):
        firsts, lasts = graph.first_states[slot], graph.last_states[slot]
        assert len(firsts) == len(words)
        for w, word in enumerate(words):
            chain = np.arange(firsts[w], lasts[w] + 1)
            np.testing.assert_array_equal(
                graph.state_phone[chain], np.asarray(LEXICON.pron[word])
            )


def test_graph_transition_costs():
    graph = build_graph(GRAMMAR, LEXICON, self_loop_prob=0.25)
    assert graph.log_self == pytest.approx(np.log(0.25))
    assert graph.log_adv == pytest.approx(np.log(0.75))
    with pytest.raises(DataError):
        build_graph(GRAMMAR, LEXICON, self_loop_prob=1.0)


def test_graph_rejects_unknown_word():
    grammar = Grammar(slots=[("cmd", ["go", "missing"])])
    with pytest.raises(DataError):
        build_graph(grammar, LEXICON)


# ---------------------------------------------------------------- decoding


def test_decode_matches_brute_force_random():
    graph = build_graph(GRAMMAR, LEXICON)
    rng = np.random.default_rng(0)
    for trial in range(40):
        T = int(rng.integers(graph.min_path_states, 25))
        post = _random_posteriors(rng, T, 5)
        priors = None
        if trial % 2:
            priors = rng.uniform(0.05, 0.4, size=5)
            priors = priors / priors.sum()
        result = viterbi_decode(post, graph, priors=priors)
        words, score = _brute_force(post, graph, priors)
        assert result.words == words
        assert result.score == pytest.approx(score, abs=1e-9)


def test_decode_recovers_planted_sentence():
    graph = build_graph(GRAMMAR, LEXICON)
    rng = np.random.default_rng(1)
    for words in itertools.product(["go", "stop"], ["red", "blue", "tan"]):
        phones = [p for w in words for p in LEXICON.pron[w]]
        frames = [p for p in phones for _ in range(3)]
        post = np.full((len(frames), 5), 0.02)
        post[np.arange(len(frames)), frames] = 1.0 - 0.02 * 4
        result = viterbi_decode(post, graph)
        assert result.words == list(words)


def test_decode_state_path_consistent():
    graph = build_graph(GRAMMAR, LEXICON)
    rng = np.random.default_rng(2)
    post = _random_posteriors(rng, 12, 5)
    result = viterbi_decode(post, graph)
    states = result.states
    assert states.shape == (12,)
    # path starts at a first state of slot 0 and ends at a last state of the final slot
    assert states[0] in graph.first_states[0]
    assert states[-1] in graph.last_states[-1]
    # moves only by self-loop or single advance
    for a, b in zip(states[:-1], states[1:]):
        assert b in (a, a + 1) or (
            graph.state_slot[b] == graph.state_slot[a] + 1
            and b in graph.first_states[graph.state_slot[b]]
            and a in graph.last_states[graph.state_slot[a]]
        )


def test_decode_ties_break_lexicographically():
    """Identical columns force score ties between word choices."""
    grammar = Grammar(slots=[("s", ["bb", "aa"])])
    lexicon = Lexicon(pron={"bb": (0,), "aa": (1,)})
    graph = build_graph(grammar, lexicon)
    post = np.full((4, 2), 0.5)  # phones 0 and 1 indistinguishable
    result = viterbi_decode(post, graph)
    assert result.words == ["aa"]


def test_decode_tie_on_longer_grammar():
    grammar = Grammar(slots=[("a", ["y", "x"]), ("b", ["q", "p"])])
    lexicon = Lexicon(pron={"y": (0, 1), "x": (2, 3), "q": (0,), "p": (2,)})
    graph = build_graph(grammar, lexicon)
    rng = np.random.default_rng(3)
    for _ in range(20):
        # two identical pairs of posterior columns => systematic ties
        base = rng.uniform(0.1, 1.0, size=(9, 2))
        post = np.concatenate([base, base], axis=1)
        post = post / post.sum(axis=1, keepdims=True)
        result = viterbi_decode(post, graph)
        words, score = _brute_force(post, graph, lexicon=lexicon)
        assert result.words == words
        assert result.score == pytest.approx(score, abs=1e-9)


def test_decode_too_few_frames():
    graph = build_graph(GRAMMAR, LEXICON)
    post = np.full((1, 5), 0.2)
    with pytest.raises(DataError):
        viterbi_decode(post, graph)


def test_decode_rejects_bad_priors():
    graph = build_graph(GRAMMAR, LEXICON)
    post = np.full((6, 5), 0.2)
    with pytest.raises(DataError):
        viterbi_decode(post, graph, priors=np.zeros(5))
    with pytest.raises(DataError):
        viterbi_decode(post, graph, priors=np.ones(3))


def test_decode_needs_enough_posterior_columns():
    graph = build_graph(GRAMMAR, LEXICON)
    post = np.full((6, 3), 1 / 3)
    with pytest.raises(DataError):
        viterbi_decode(post, graph)


# --------------------------------------------------------------------- wer


def test_wer_identity_is_zero():
    rep = compute_wer(["a", "b", "c"], ["a", "b", "c"])
    assert (rep.substitutions, rep.deletions, rep.insertions) == (0, 0, 0)
    assert rep.wer == 0.0


def test_wer_empty_hypothesis_all_deletions():
    rep = compute_wer(["a", "b", "c"], [])
    assert (rep.substitutions, rep.deletions, rep.insertions) == (0, 3, 0)
    assert rep.wer == 1.0


def test_wer_single_substitution():
    rep = compute_wer("a b c d e f".split(), "a b x d e f".split())
    assert (rep.substitutions, rep.deletions, rep.insertions) == (1, 0, 0)
    assert wer_percent(rep.wer) == "16.7%"


def test_wer_insertion_and_deletion():
    rep = compute_wer(["a", "b"], ["a", "x", "b"])
    assert (rep.substitutions, rep.deletions, rep.insertions) == (0, 0, 1)
    rep = compute_wer(["a", "b", "c"], ["a", "c"])
    assert (rep.substitutions, rep.deletions, rep.insertions) == (0, 1, 0)


def test_wer_can_exceed_one():
    rep = compute_wer(["a"], ["x", "y", "z"])
    assert rep.errors == 3
    assert rep.wer == 3.0


def test_wer_counts_match_edit_distance_property():
    """S+D+I equals the Levenshtein distance computed independently."""
    rng = np.random.default_rng(4)
    vocab = list("abcde")
    for _ in range(200):
        ref = [vocab[i] for i in rng.integers(0, 5, size=rng.integers(1, 10))]
        hyp = [vocab[i] for i in rng.integers(0, 5, size=rng.integers(0, 10))]
        rep = compute_wer(ref, hyp)
        # textbook two-row Levenshtein
        prev = list(range(len(hyp) + 1))
        for i, r in enumerate(ref, 1):
            cur = [i]
            for j, h in enumerate(hyp, 1):
                cur.append(min(prev[j - 1] + (r != h), prev[j] + 1, cur[-1] + 1))
            prev = cur
        assert rep.errors == prev[-1]
        assert rep.ref_words == len(ref)
        # decomposition consistency
        assert len(hyp) == rep.ref_words - rep.deletions + rep.insertions


def test_wer_rejects_empty_reference():
    with pytest.raises(DataError):
        compute_wer([], ["a"])


def test_aggregate_pools_counts():
    reports = [compute_wer(["a", "b"], ["a", "x"]), compute_wer(["c"], [])]
    total = aggregate_wer(reports)
    assert total.substitutions == 1 and total.deletions == 1
    assert total.ref_words == 3
    assert total.wer == pytest.approx(2 / 3)


def test_render_score_report_layout():
    items = [("u1", compute_wer(["a", "b"], ["a", "b"])),
             ("u2", compute_wer(["a", "b"], ["x", "b"]))]
    text = render_score_report(items)
    lines = text.strip().split("\n")
    assert lines[0] == "u1 S=0 D=0 I=0 N=2 WER=0.0%"
    assert lines[1] == "u2 S=1 D=0 I=0 N=2 WER=50.0%"
    assert lines[2] == "TOTAL S=1 D=0 I=0 N=4 WER=25.0%"


def test_frame_accuracy_against_alignment():
    post = np.zeros((6, 4))
    post[np.arange(6), [0, 0, 1, 1, 2, 3]] = 1.0
    segments = [(0, 0, 2), (1, 2, 4), (2, 4, 6)]
    assert frame_accuracy(post, segments) == pytest.approx(5 / 6)
