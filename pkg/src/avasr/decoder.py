"""Grammar-constrained Viterbi decoding and WER scoring.

The decode graph is a left-to-right chain of grammar slots; each slot
expands every word into a left-to-right chain of one state per phoneme
with self-loop probability p and advance probability 1-p. A complete
path therefore spells exactly one word per slot.

Emission scores are log posteriors, optionally divided by label priors
(log posterior - log prior) when priors are supplied.

Score ties are broken toward the lexicographically smaller word
sequence. The fast vectorized pass detects whether any finite-score tie
occurred anywhere in the lattice; if so, decoding reruns as an exact
dynamic program whose cell values carry (score, per-slot word ranks) so
the returned sentence is provably the smallest among the argmax set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import alignment_labels
from .errors import DataError

POSTERIOR_FLOOR = 1e-300


@dataclass
class Grammar:
    slots: list  # [(slot_name, [word, ...]), ...] in sentence order

    def __post_init__(self):
        if not self.slots:
            raise DataError("grammar has no slots")
        seen_names = set()
        for name, words in self.slots:
            if name in seen_names:
                raise DataError(f"duplicate slot name {name!r}")
            seen_names.add(name)
            if not words:
                raise DataError(f"slot {name!r} is empty")
            if len(set(words)) != len(words):
                dupes = sorted({w for w in words if words.count(w) > 1})
                raise DataError(f"slot {name!r} repeats word(s) {dupes}")

    @property
    def num_slots(self) -> int:
        return len(self.slots)

    @property
    def num_sentences(self) -> int:
        n = 1
        for _, words in self.slots:
            n *= len(words)
        return n

    def slot_vocabulary(self, slot: int) -> list:
        return self.slots[slot][1]


@dataclass
class Lexicon:
    pron: dict  # word -> tuple of phoneme ids

    def __post_init__(self):
        if not self.pron:
            raise DataError("lexicon is empty")
        for word, phones in self.pron.items():
            phones = tuple(int(p) for p in phones)
            if not phones:
                raise DataError(f"word {word!r} has an empty pronunciation")
            if min(phones) < 0:
                raise DataError(f"word {word!r} uses a negative phoneme id")
            self.pron[word] = phones

    @property
    def num_phonemes(self) -> int:
        return 1 + max(max(p) for p in self.pron.values())


def load_grammar(path, expected_slots: int | None = None) -> Grammar:
    """Parse "slot_name: w1 w2 ..." lines, one slot per line."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read grammar {path}: {exc}") from exc
    slots = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if ":" not in line:
            raise DataError(f"{path}:{lineno}: expected 'slot_name: words...'")
        name, _, rest = line.partition(":")
        name = name.strip()
        words = rest.split()
        if not name:
            raise DataError(f"{path}:{lineno}: missing slot name")
        if not words:
            raise DataError(f"{path}:{lineno}: slot {name!r} has no words")
        slots.append((name, words))
    grammar = Grammar(slots=slots)
    if expected_slots is not None and grammar.num_slots != expected_slots:
        raise DataError(
            f"{path}: grammar has {grammar.num_slots} slots, expected {expected_slots}"
        )
    return grammar


def save_grammar(grammar: Grammar, path) -> None:
    with Path(path).open("w") as fh:
        for name, words in grammar.slots:
            fh.write(f"{name}: {' '.join(words)}\n")


def load_lexicon(path) -> Lexicon:
    """Parse "word ph1 ph2 ..." lines with integer phoneme ids."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read lexicon {path}: {exc}") from exc
    pron = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise DataError(f"{path}:{lineno}: expected 'word ph1 ph2 ...'")
        word = parts[0]
        if word in pron:
            raise DataError(f"{path}:{lineno}: duplicate word {word!r}")
        try:
            pron[word] = tuple(int(p) for p in parts[1:])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: non-integer phoneme id ({exc})") from exc
    return Lexicon(pron=pron)


def save_lexicon(lexicon: Lexicon, path) -> None:
    with Path(path).open("w") as fh:
        for word in sorted(lexicon.pron):
            fh.write(f"{word} {' '.join(str(p) for p in lexicon.pron[word])}\n")


@dataclass
class DecodeGraph:
    grammar: Grammar
    log_self: float
    log_adv: float
    state_phone: np.ndarray  # phoneme id per state
    state_slot: np.ndarray  # slot index per state
    state_word: np.ndarray  # word index (grammar order) per state
    state_pos: np.ndarray  # position within the word per state
    state_rank: np.ndarray  # rank of the word among its slot's sorted words
    first_states: list = field(repr=False)  # per slot: array of word first states
    last_states: list = field(repr=False)  # per slot: array of word last states
    min_path_states: int = 0

    @property
    def num_states(self) -> int:
        return self.state_phone.shape[0]


def build_graph(grammar: Grammar, lexicon: Lexicon, self_loop_prob: float = 0.5) -> DecodeGraph:
    if not 0.0 < self_loop_prob < 1.0:
        raise DataError(f"self_loop_prob {self_loop_prob} outside (0, 1)")
    phone, slot_ix, word_ix, pos_ix, rank_ix = [], [], [], [], []
    first_states, last_states = [], []
    min_path = 0
    for s, (slot_name, words) in enumerate(grammar.slots):
        sorted_words = sorted(words)
        firsts, lasts = [], []
        for w, word in enumerate(words):
            if word not in lexicon.pron:
                raise DataError(
                    f"word {word!r} (slot {slot_name!r}) missing from lexicon"
                )
            phones = lexicon.pron[word]
            firsts.append(len(phone))
            for i, p in enumerate(phones):
                phone.append(p)
                slot_ix.append(s)
                word_ix.append(w)
                pos_ix.append(i)
                rank_ix.append(sorted_words.index(word))
            lasts.append(len(phone) - 1)
        first_states.append(np.asarray(firsts, dtype=np.int64))
        last_states.append(np.asarray(lasts, dtype=np.int64))
        min_path += min(len(lexicon.pron[w]) for w in words)
    return DecodeGraph(
        grammar=grammar,
        log_self=float(np.log(self_loop_prob)),
        log_adv=float(np.log1p(-self_loop_prob)),
        state_phone=np.asarray(phone, dtype=np.int64),
        state_slot=np.asarray(slot_ix, dtype=np.int64),
        state_word=np.asarray(word_ix, dtype=np.int64),
        state_pos=np.asarray(pos_ix, dtype=np.int64),
        state_rank=np.asarray(rank_ix, dtype=np.int64),
        first_states=first_states,
        last_states=last_states,
        min_path_states=min_path,
    )


@dataclass
class DecodeResult:
    words: list
    score: float
    states: np.ndarray  # graph state index per frame
    exact_tiebreak: bool = False  # True when the tie-handling pass decided


def _emission_matrix(posteriors, graph: DecodeGraph, priors) -> np.ndarray:
    post = np.asarray(posteriors, dtype=np.float64)
    if post.ndim != 2:
        raise DataError("posteriors must be a T x K matrix")
    K = post.shape[1]
    if int(graph.state_phone.max()) >= K:
        raise DataError(
            f"graph uses phoneme id {int(graph.state_phone.max())}, "
            f"posteriors have only {K} columns"
        )
    logpost = np.log(np.maximum(post, POSTERIOR_FLOOR))
    if priors is not None:
        priors = np.asarray(priors, dtype=np.float64).ravel()
        if priors.shape[0] != K:
            raise DataError(f"priors length {priors.shape[0]} != {K} labels")
        if priors.min() <= 0:
            raise DataError("label priors must be strictly positive")
        logpost = logpost - np.log(priors)[None, :]
    return logpost[:, graph.state_phone]


def viterbi_decode(posteriors, graph: DecodeGraph, priors=None) -> DecodeResult:
    """Best grammar-legal word sequence for a T x K posterior matrix.

    Maximizes sum_t (emission + transition log-probs); exactly one word
    per slot. Raises if T is too short to traverse the shortest sentence.
    """
    em = _emission_matrix(posteriors, graph, priors)
    T = em.shape[0]
    if T < graph.min_path_states:
        raise DataError(
            f"{T} frames cannot cover the shortest sentence "
            f"({graph.min_path_states} states)"
        )
    S = graph.num_states
    num_slots = graph.grammar.num_slots
    pos0 = graph.state_pos == 0

    alpha = np.full(S, -np.inf)
    starts0 = graph.first_states[0]
    alpha[starts0] = em[0, starts0]
    pred_adv = np.zeros((T, S), dtype=bool)
    boundary_choice = np.full((T, num_slots), -1, dtype=np.int64)
    tie_seen = False

    for t in range(1, T):
        cand_self = alpha + graph.log_self
        cand_adv = np.empty(S)
        cand_adv[0] = -np.inf
        cand_adv[1:] = alpha[:-1] + graph.log_adv
        cand_adv[pos0] = -np.inf
        for s in range(1, num_slots):
            vals = alpha[graph.last_states[s - 1]] + graph.log_adv
            best = int(np.argmax(vals))
            bv = vals[best]
            if np.isfinite(bv):
                if int((vals == bv).sum()) > 1:
                    tie_seen = True
                boundary_choice[t, s] = graph.last_states[s - 1][best]
                cand_adv[graph.first_states[s]] = bv
        if not tie_seen:
            eq = np.isfinite(cand_self) & (cand_self == cand_adv)
            if bool(eq.any()):
                tie_seen = True
        pred_adv[t] = cand_adv > cand_self
        alpha = np.maximum(cand_self, cand_adv) + em[t]

    finals = graph.last_states[-1]
    fvals = alpha[finals]
    best_final = int(np.argmax(fvals))
    score = float(fvals[best_final])
    if not np.isfinite(score):
        raise DataError("no complete path through the decode graph")
    if int((fvals == fvals[best_final]).sum()) > 1:
        tie_seen = True

    if tie_seen:
        return _decode_exact(em, graph)

    states = np.empty(T, dtype=np.int64)
    states[T - 1] = finals[best_final]
    for t in range(T - 1, 0, -1):
        cur = states[t]
        if not pred_adv[t, cur]:
            states[t - 1] = cur
        elif graph.state_pos[cur] > 0:
            states[t - 1] = cur - 1
        else:
            states[t - 1] = boundary_choice[t, graph.state_slot[cur]]
    words = _words_from_states(graph, states)
    return DecodeResult(words=words, score=score, states=states)


def _words_from_states(graph: DecodeGraph, states: np.ndarray) -> list:
    words = []
    seen_slot = -1
    for st in states:
        s = int(graph.state_slot[st])
        if s != seen_slot:
            words.append(graph.grammar.slot_vocabulary(s)[int(graph.state_word[st])])
            seen_slot = s
    return words


def _decode_exact(em: np.ndarray, graph: DecodeGraph) -> DecodeResult:
    """Tie-exact pass: cell values are (score, word-rank tuple) and ties
    keep the lexicographically smallest rank tuple."""
    T = em.shape[0]
    S = graph.num_states
    num_slots = graph.grammar.num_slots
    pos = graph.state_pos
    slot = graph.state_slot
    rank = graph.state_rank
    log_self, log_adv = graph.log_self, graph.log_adv

    vals: list = [None] * S
    for st in graph.first_states[0]:
        vals[st] = (em[0, st], (int(rank[st]),))
    for t in range(1, T):
        boundary: list = [None] * num_slots
        for s in range(1, num_slots):
            best = None
            for last in graph.last_states[s - 1]:
                v = vals[last]
                if v is None:
                    continue
                cand = (v[0] + log_adv, v[1])
                if best is None or cand[0] > best[0] or (
                    cand[0] == best[0] and cand[1] < best[1]
                ):
                    best = cand
            boundary[s] = best
        new_vals: list = [None] * S
        for st in range(S):
            best = None
            v = vals[st]
            if v is not None:
                best = (v[0] + log_self, v[1])
            if pos[st] > 0:
                v = vals[st - 1]
                if v is not None:
                    cand = (v[0] + log_adv, v[1])
                    if best is None or cand[0] > best[0] or (
                        cand[0] == best[0] and cand[1] < best[1]
                    ):
                        best = cand
            elif slot[st] > 0:
                b = boundary[slot[st]]
                if b is not None:
                    cand = (b[0], b[1] + (int(rank[st]),))
                    if best is None or cand[0] > best[0] or (
                        cand[0] == best[0] and cand[1] < best[1]
                    ):
                        best = cand
            if best is not None:
                new_vals[st] = (best[0] + em[t, st], best[1])
        vals = new_vals

    best = None
    for last in graph.last_states[-1]:
        v = vals[last]
        if v is None:
            continue
        if best is None or v[0] > best[0] or (v[0] == best[0] and v[1] < best[1]):
            best = v
    if best is None:
        raise DataError("no complete path through the decode graph")
    score, ranks = best
    words = [
        sorted(graph.grammar.slot_vocabulary(s))[r] for s, r in enumerate(ranks)
    ]
    states = _force_align_states(em, graph, words)
    return DecodeResult(words=words, score=float(score), states=states, exact_tiebreak=True)


def _force_align_states(em: np.ndarray, graph: DecodeGraph, words: list) -> np.ndarray:
    """Best state path for a fixed sentence (self-loop preferred on ties)."""
    chain = []
    for s, word in enumerate(words):
        w = graph.grammar.slot_vocabulary(s).index(word)
        first = int(graph.first_states[s][w])
        last = int(graph.last_states[s][w])
        chain.extend(range(first, last + 1))
    chain_arr = np.asarray(chain, dtype=np.int64)
    M = chain_arr.shape[0]
    T = em.shape[0]
    val = np.full((T, M), -np.inf)
    val[0, 0] = em[0, chain_arr[0]]
    came_diag = np.zeros((T, M), dtype=bool)
    for t in range(1, T):
        stay = val[t - 1] + graph.log_self
        diag = np.empty(M)
        diag[0] = -np.inf
        diag[1:] = val[t - 1, :-1] + graph.log_adv
        came_diag[t] = diag > stay
        val[t] = np.maximum(stay, diag) + em[t, chain_arr]
    states = np.empty(T, dtype=np.int64)
    m = M - 1
    states[T - 1] = chain_arr[m]
    for t in range(T - 1, 0, -1):
        if came_diag[t, m]:
            m -= 1
        states[t - 1] = chain_arr[m]
    return states


@dataclass
class WerReport:
    substitutions: int
    deletions: int
    insertions: int
    ref_words: int

    def __post_init__(self):
        if self.ref_words <= 0:
            raise DataError("reference word count must be positive")

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return self.errors / self.ref_words


def compute_wer(reference, hypothesis) -> WerReport:
    """Minimal-edit-distance alignment with unit costs.

    The S/D/I decomposition is canonicalized by backtrace preference
    match/substitution, then deletion, then insertion.
    """
    ref = list(reference)
    hyp = list(hypothesis)
    if not ref:
        raise DataError("empty reference")
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i, j] = min(sub, d[i - 1, j] + 1, d[i, j - 1] + 1)
    S = D = I = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            S += ref[i - 1] != hyp[j - 1]
            i -= 1
            j -= 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            D += 1
            i -= 1
        else:
            I += 1
            j -= 1
    return WerReport(substitutions=int(S), deletions=D, insertions=I, ref_words=n)


def aggregate_wer(reports) -> WerReport:
    reports = list(reports)
    if not reports:
        raise DataError("no utterances to aggregate")
    return WerReport(
        substitutions=sum(r.substitutions for r in reports),
        deletions=sum(r.deletions for r in reports),
        insertions=sum(r.insertions for r in reports),
        ref_words=sum(r.ref_words for r in reports),
    )


def wer_percent(wer: float) -> str:
    """Format a WER fraction the way the reports do: one decimal place."""
    return f"{100.0 * wer:.1f}%"


def frame_accuracy(posteriors, alignment) -> float:
    """Fraction of frames whose argmax posterior matches the alignment."""
    post = np.asarray(posteriors, dtype=np.float64)
    if post.ndim != 2:
        raise DataError("posteriors must be a T x K matrix")
    labels = alignment_labels(alignment, post.shape[0])
    return float(np.mean(np.argmax(post, axis=1) == labels))


def render_score_report(items) -> str:
    """Per-utterance S/D/I lines plus the corpus aggregate.

    ``items`` is a list of (utt_id, WerReport) pairs.
    """
    items = list(items)
    lines = []
    for utt_id, rep in items:
        lines.append(
            f"{utt_id} S={rep.substitutions} D={rep.deletions} "
            f"I={rep.insertions} N={rep.ref_words} WER={wer_percent(rep.wer)}"
        )
    total = aggregate_wer(rep for _, rep in items)
    lines.append(
        f"TOTAL S={total.substitutions} D={total.deletions} I={total.insertions} "
        f"N={total.ref_words} WER={wer_percent(total.wer)}"
    )
    return "\n".join(lines) + "\n"
