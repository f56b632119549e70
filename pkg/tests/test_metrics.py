"""Word/phrase novelty and diversity metrics against brute-force oracles."""

import numpy as np
import pytest

from wakavt import _simindex_py
from wakavt.corpus import (EOS, SEP, UNK, Vocabulary, build_vocab,
                           encode_corpus, generate_synthetic_corpus,
                           parse_poem_line, toy_vocab_spec)
from wakavt.metrics import (MetricsError, backend_name, dice,
                            diversity_phrase, diversity_word, eval_ppl_kld,
                            evaluation_report, extract_phrases, novelty_phrase,
                            novelty_word, N_SPECIALS, _brute_max_dice,
                            _max_dice)
from wakavt.models import build_model

from test_models import tiny_config, tiny_data


def toks(*words):
    """Content token ids from small integers (offset past the specials)."""
    return [w + N_SPECIALS for w in words]


# ---------------------------------------------------------------- dice

def test_dice_identical_and_disjoint():
    assert dice(toks(0, 1, 2), toks(2, 1, 0)) == 1.0
    assert dice(toks(0, 1), toks(2, 3)) == 0.0


def test_dice_half_overlap():
    # types {a,b} vs {b,c}: 2*1/(2+2)
    assert dice(toks(0, 1), toks(1, 2)) == 0.5


def test_dice_ignores_separators_and_specials():
    a = toks(0, 1) + [SEP, UNK, EOS]
    b = toks(1, 2) + [SEP]
    assert dice(a, b) == 0.5


def test_dice_empty_poems():
    assert dice([], []) == 1.0
    assert dice([SEP], [SEP]) == 1.0
    assert dice([], toks(0)) == 0.0


def test_dice_symmetry_random():
    rng = np.random.default_rng(5)
    for _ in range(100):
        a = toks(*rng.integers(0, 10, size=rng.integers(0, 6)))
        b = toks(*rng.integers(0, 10, size=rng.integers(0, 6)))
        assert dice(a, b) == dice(b, a)
        assert dice(a, b, multiset=True) == dice(b, a, multiset=True)


def test_dice_multiset_flag():
    # counts {a:2, b:1} vs {a:1}: 2*1/(3+1)
    a = toks(0, 0, 1)
    b = toks(0)
    assert dice(a, b, multiset=True) == 0.5
    # type mode collapses the repeat: {a,b} vs {a} -> 2/3
    assert dice(a, b) == pytest.approx(2.0 / 3.0)


def test_dice_type_mode_deduplicates():
    assert dice(toks(0, 0, 0), toks(0)) == 1.0


# ------------------------------------------- word novelty / diversity

def rand_instance(rng, n_s, n_c, vocab=10):
    def poem():
        size = int(rng.integers(0, 7))
        return toks(*rng.integers(0, vocab, size=size))
    return ([poem() for _ in range(n_s)], [poem() for _ in range(n_c)])


def test_novelty_word_verbatim_subset_zero():
    corpus = [toks(0, 1, 2), toks(3, 4), toks(5)]
    assert novelty_word(corpus[:2], corpus) == 0.0


def test_novelty_word_disjoint_one():
    assert novelty_word([toks(0, 1)], [toks(2, 3), toks(4)]) == 1.0


def test_novelty_word_three_poem_oracle():
    s = [toks(0, 1), toks(2, 3, 4), toks(5)]
    c = [toks(1, 2), toks(4, 5), toks(0, 1, 2)]
    want = np.mean([1 - max(dice(a, b) for b in c) for a in s])
    assert novelty_word(s, c) == pytest.approx(want, abs=1e-15)


def test_diversity_word_identical_zero():
    assert diversity_word([toks(0, 1)] * 3) == 0.0


def test_diversity_word_disjoint_one():
    assert diversity_word([toks(0), toks(1), toks(2)]) == 1.0


def test_diversity_word_requires_two():
    with pytest.raises(MetricsError):
        diversity_word([toks(0)])


def test_novelty_word_empty_corpus_rejected():
    with pytest.raises(MetricsError):
        novelty_word([toks(0)], [])


def test_word_metrics_brute_force_oracle():
    # All sizes |S|,|C| <= 6 over a 10-word vocabulary, many random draws.
    rng = np.random.default_rng(11)
    for n_s in range(1, 7):
        for n_c in range(1, 7):
            for _ in range(6):
                s, c = rand_instance(rng, n_s, n_c)
                want_nov = np.mean(
                    1 - _brute_max_dice(s, c, False, False))
                assert novelty_word(s, c) == pytest.approx(
                    want_nov, abs=1e-12)
                if n_s >= 2:
                    want_div = np.mean(
                        1 - _brute_max_dice(s, s, True, False))
                    assert diversity_word(s) == pytest.approx(
                        want_div, abs=1e-12)


def test_word_metrics_multiset_oracle():
    rng = np.random.default_rng(12)
    for _ in range(25):
        s, c = rand_instance(rng, 4, 5)
        want = np.mean(1 - _brute_max_dice(s, c, False, True))
        assert novelty_word(s, c, multiset=True) == pytest.approx(
            want, abs=1e-12)
        want = np.mean(1 - _brute_max_dice(s, s, True, True))
        assert diversity_word(s, multiset=True) == pytest.approx(
            want, abs=1e-12)


def test_empty_poems_in_index_paths():
    # Dice(empty, empty) = 1 must survive the inverted-index shortcut.
    s = [[], toks(0)]
    c = [[], toks(1)]
    assert novelty_word(s, c) == pytest.approx(
        np.mean([1 - 1.0, 1 - 0.0]))
    assert diversity_word([[], []]) == 0.0
    assert diversity_word([[], toks(0)]) == 1.0
    # novelty with more generated poems than corpus poems
    assert novelty_word([toks(0), toks(1), []], [toks(0)]) == pytest.approx(
        np.mean([0.0, 1.0, 1.0]))


def test_backends_agree():
    rng = np.random.default_rng(13)
    sets = [frozenset(toks(*rng.integers(0, 9, size=rng.integers(0, 6))))
            for _ in range(40)]
    corpus = [frozenset(toks(*rng.integers(0, 9, size=rng.integers(0, 6))))
              for _ in range(60)]
    import wakavt.metrics as metrics_mod
    active = metrics_mod._kernel
    try:
        for exclude_self in (False, True):
            q = corpus if exclude_self else sets
            metrics_mod._kernel = _simindex_py
            pure = _max_dice(list(q), list(corpus), exclude_self)
            metrics_mod._kernel = active
            mixed = _max_dice(list(q), list(corpus), exclude_self)
            np.testing.assert_array_equal(pure, mixed)
    finally:
        metrics_mod._kernel = active


def test_backend_name_reports():
    assert backend_name() in ("compiled", "pure")


# --------------------------------------------------- phrase metrics

@pytest.fixture(scope="module")
def single_word_vocab():
    """Every phrase is one word: ya/ka are 5-morae, ta/na/sa 7-morae."""
    return Vocabulary(["ya", "ka", "ta", "na", "sa"], [5, 5, 7, 7, 7])


def body(vocab, p1, p2, p3, p4, p5):
    ids = vocab.encode([p1, p2, p3, p4, p5])
    return [ids[0], SEP, ids[1], SEP, ids[2], SEP, ids[3], SEP, ids[4]]


def test_extract_phrases_counts(single_word_vocab):
    v = single_word_vocab
    table = v.morae_table()
    poems = [body(v, "ya", "ta", "ya", "na", "ta")]
    ps5 = extract_phrases(poems, 5, table)
    ps7 = extract_phrases(poems, 7, table)
    ya = (v.encode(["ya"])[0],)
    ta = (v.encode(["ta"])[0],)
    na = (v.encode(["na"])[0],)
    assert ps5.counts == {ya: 2}
    assert ps5.total() == 2 and ps5.distinct() == 1
    assert ps7.counts == {ta: 2, na: 1}
    assert ps7.total() == 3 and ps7.distinct() == 2
    assert ps5.skipped == 0


def test_extract_phrases_skips_invalid(single_word_vocab):
    v = single_word_vocab
    table = v.morae_table()
    bad = [v.encode(["ya"])[0]]  # one phrase, no separators
    good = body(v, "ya", "ta", "ka", "na", "sa")
    with pytest.warns(UserWarning):
        ps = extract_phrases([good, bad], 5, table)
    assert ps.skipped == 1
    assert ps.total() == 2


def test_extract_phrases_multiword_oracle():
    # Phrases from the pattern-check boundaries must equal a naive
    # split-on-separator slicing.
    spec = toy_vocab_spec(n_words=14, max_morae=5, seed=3)
    lines = generate_synthetic_corpus(30, spec, seed=9)
    raws = [parse_poem_line(ln, i + 1) for i, ln in enumerate(lines)]
    vocab = build_vocab(raws)
    poems, report = encode_corpus(raws, vocab)
    assert len(report) == 0
    table = vocab.morae_table()
    for n in (5, 7):
        got = extract_phrases(poems, n, table)
        want = {}
        slots = {5: (0, 2), 7: (1, 3, 4)}[n]
        for poem in poems:
            groups, cur = [], []
            for t in poem.tokens:
                if t == SEP:
                    groups.append(tuple(cur))
                    cur = []
                else:
                    cur.append(int(t))
            groups.append(tuple(cur))
            assert len(groups) == 5
            for slot in slots:
                want[groups[slot]] = want.get(groups[slot], 0) + 1
        assert got.counts == want
        assert all(sum(table.morae(t) for t in p) == n for p in got.counts)


def test_novelty_phrase_cases(single_word_vocab):
    v = single_word_vocab
    table = v.morae_table()
    c = [body(v, "ya", "ta", "ya", "na", "ta")]
    assert novelty_phrase(c, c, 5, table) == 0.0
    s_disjoint = [body(v, "ka", "sa", "ka", "sa", "sa")]
    assert novelty_phrase(s_disjoint, c, 5, table) == 1.0
    assert novelty_phrase(s_disjoint, c, 7, table) == 1.0
    # distinct 5-phrases {ya, ka}: ya known, ka new
    s_half = [body(v, "ya", "ta", "ka", "na", "ta")]
    assert novelty_phrase(s_half, c, 5, table) == 0.5


def test_novelty_phrase_no_valid_poems(single_word_vocab):
    v = single_word_vocab
    table = v.morae_table()
    c = [body(v, "ya", "ta", "ya", "na", "ta")]
    with pytest.raises(MetricsError), pytest.warns(UserWarning):
        novelty_phrase([[SEP]], c, 5, table)


def test_diversity_phrase_repeat(single_word_vocab):
    v = single_word_vocab
    table = v.morae_table()
    # every 5-morae slot is "ya": one distinct phrase, k = 4 occurrences
    s = [body(v, "ya", "ta", "ya", "na", "ta"),
         body(v, "ya", "na", "ya", "ta", "sa")]
    assert diversity_phrase(s, 5, table) == pytest.approx(1.0 / 4.0)


def test_diversity_phrase_unique_then_duplicated(single_word_vocab):
    v = single_word_vocab
    table = v.morae_table()
    s = [body(v, "ya", "ta", "ka", "na", "sa")]
    assert diversity_phrase(s, 5, table) == 1.0
    assert diversity_phrase(s, 7, table) == 1.0
    assert diversity_phrase(s + s, 5, table) == 0.5
    assert diversity_phrase(s + s, 7, table) == 0.5


# ------------------------------------------------------ model metrics

def test_eval_ppl_kld_and_report():
    poems, vocab = tiny_data()
    rng = np.random.default_rng(3)
    tlm = build_model(tiny_config("tlm"), vocab, np.random.default_rng(0))
    ppl, kld = eval_ppl_kld(tlm, poems, rng)
    assert ppl >= 1.0 and kld is None

    wak = build_model(tiny_config("wakavt"), vocab, np.random.default_rng(0))
    ppl, kld = eval_ppl_kld(wak, poems, rng)
    assert ppl >= 1.0 and kld >= 0.0

    report = evaluation_report(poems[:4], poems, poems[4:], wak,
                               np.random.default_rng(7))
    assert set(report) == {"nov_w", "nov_s5", "nov_s7", "div_w", "div_s5",
                           "div_s7", "ppl", "kld", "skipped"}
    for key in ("nov_w", "nov_s5", "nov_s7", "div_w", "div_s5", "div_s7"):
        assert 0.0 <= report[key] <= 1.0
    assert report["ppl"] >= 1.0
    assert report["kld"] >= 0.0
    assert report["skipped"] == 0
    # generated drawn from the reference corpus: nothing novel
    assert report["nov_w"] == 0.0
    assert report["nov_s5"] == 0.0 and report["nov_s7"] == 0.0
