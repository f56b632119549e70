"""Objective evaluation: word/phrase novelty and diversity, test PPL/KLD.

Word-level metrics compare poems by Sorensen-Dice coefficient over their
distinct content-word types (separator and special tokens excluded; a
multiset variant is available behind a flag).  The max-over-corpus search
runs on an inverted word -> poem index in CSR form so poems sharing no
word are never scored; the inner loop is the compiled wakavt._simindex
kernel when available, with a pure-numpy fallback.

Phrase-level metrics operate on the sets of distinct 5-morae phrases
(phrases 1 and 3 of each poem) and 7-morae phrases (phrases 2, 4, 5),
keyed by exact token sequence.
"""

import os
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .constraint import MoraeTable, validate_pattern
from .corpus import SPECIAL_SURFACES, Poem

if os.environ.get("WAKAVT_PURE"):
    from . import _simindex_py as _kernel

    _BACKEND = "pure"
else:
    try:
        from . import _simindex as _kernel  # type: ignore[attr-defined]

        _BACKEND = "compiled"
    except ImportError:
        from . import _simindex_py as _kernel

        _BACKEND = "pure"

N_SPECIALS = len(SPECIAL_SURFACES)

# Phrase slots contributing to each morae class, 0-based within the
# 5-7-5-7-7 pattern.
PHRASE_SLOTS = {5: (0, 2), 7: (1, 3, 4)}

REPORT_FIELDS = ("nov_w", "nov_s5", "nov_s7", "div_w", "div_s5", "div_s7",
                 "ppl", "kld", "skipped")


class MetricsError(ValueError):
    pass


def backend_name() -> str:
    """Which max-Dice kernel is active: "compiled" or "pure"."""
    return _BACKEND


def _token_ids(poem) -> Sequence[int]:
    return poem.tokens if isinstance(poem, Poem) else poem


def _content_types(poem) -> frozenset:
    return frozenset(int(t) for t in _token_ids(poem) if int(t) >= N_SPECIALS)


def _content_counts(poem) -> Counter:
    return Counter(int(t) for t in _token_ids(poem) if int(t) >= N_SPECIALS)


def dice(a, b, multiset: bool = False) -> float:
    """2|A n B| / (|A| + |B|) over content words; two empty poems -> 1."""
    if multiset:
        ca, cb = _content_counts(a), _content_counts(b)
        na, nb = sum(ca.values()), sum(cb.values())
        if na + nb == 0:
            return 1.0
        shared = sum(min(ca[w], cb[w]) for w in ca.keys() & cb.keys())
        return 2.0 * shared / (na + nb)
    sa, sb = _content_types(a), _content_types(b)
    if not sa and not sb:
        return 1.0
    return 2.0 * len(sa & sb) / (len(sa) + len(sb))


def _csr_from_sets(sets: List[frozenset], word_ids: Dict[int, int]):
    """Flatten type-sets to (idx, ptr, sizes) CSR arrays; words missing
    from word_ids are dropped from idx but still counted in sizes."""
    idx: List[int] = []
    ptr = [0]
    sizes = []
    for s in sets:
        idx.extend(word_ids[w] for w in sorted(s) if w in word_ids)
        ptr.append(len(idx))
        sizes.append(len(s))
    return (np.asarray(idx, dtype=np.int32),
            np.asarray(ptr, dtype=np.int64),
            np.asarray(sizes, dtype=np.int32))


def _max_dice(query_sets: List[frozenset], corpus_sets: List[frozenset],
              exclude_self: bool) -> np.ndarray:
    """Max Dice per query over the corpus (optionally skipping the poem
    with the same index), via the inverted-index kernel."""
    word_ids: Dict[int, int] = {}
    postings: List[List[int]] = []
    for j, s in enumerate(corpus_sets):
        for w in sorted(s):
            wid = word_ids.get(w)
            if wid is None:
                wid = word_ids[w] = len(postings)
                postings.append([])
            postings[wid].append(j)
    post_idx = np.asarray(
        [j for plist in postings for j in plist], dtype=np.int32)
    post_ptr = np.zeros(len(postings) + 1, dtype=np.int64)
    np.cumsum([len(p) for p in postings], out=post_ptr[1:])
    c_sizes = np.asarray([len(s) for s in corpus_sets], dtype=np.int32)

    q_idx, q_ptr, q_sizes = _csr_from_sets(query_sets, word_ids)
    if exclude_self:
        exclude = np.arange(len(query_sets), dtype=np.int64)
    else:
        exclude = np.full(len(query_sets), -1, dtype=np.int64)
    best = np.asarray(_kernel.max_dice_many(
        q_idx, q_ptr, q_sizes, post_idx, post_ptr, c_sizes, exclude))

    # Empty sets never meet in the index; Dice(empty, empty) is 1.  With
    # exclude_self the query list IS the corpus list, so an empty query
    # discounts itself from the empty-poem count.
    n_empty = int(np.sum(c_sizes == 0))
    for i, s in enumerate(query_sets):
        if s:
            continue
        if n_empty - (1 if exclude_self else 0) > 0:
            best[i] = 1.0
    return best


def _brute_max_dice(query, corpus, exclude_self: bool,
                    multiset: bool) -> np.ndarray:
    out = np.zeros(len(query))
    for i, a in enumerate(query):
        best = 0.0
        for j, b in enumerate(corpus):
            if exclude_self and i == j:
                continue
            best = max(best, dice(a, b, multiset=multiset))
        out[i] = best
    return out


def novelty_word(generated: Sequence, corpus: Sequence,
                 multiset: bool = False) -> float:
    """Mean over generated poems of 1 - max Dice against any corpus poem."""
    if len(corpus) == 0:
        raise MetricsError("novelty_word needs a non-empty reference corpus")
    if len(generated) == 0:
        raise MetricsError("novelty_word needs at least one generated poem")
    if multiset:
        best = _brute_max_dice(list(generated), list(corpus), False, True)
    else:
        best = _max_dice([_content_types(p) for p in generated],
                         [_content_types(p) for p in corpus], False)
    return float(np.mean(1.0 - best))


def diversity_word(generated: Sequence, multiset: bool = False) -> float:
    """Mean over poems of 1 - max Dice against any *other* generated poem."""
    if len(generated) < 2:
        raise MetricsError("diversity_word needs at least two poems")
    if multiset:
        best = _brute_max_dice(list(generated), list(generated), True, True)
    else:
        sets = [_content_types(p) for p in generated]
        best = _max_dice(sets, sets, True)
    return float(np.mean(1.0 - best))


@dataclass
class PhraseSet:
    """Distinct n-morae phrases of a collection with occurrence counts."""

    n: int
    counts: Dict[Tuple[int, ...], int] = field(default_factory=dict)
    skipped: int = 0

    def distinct(self) -> int:
        return len(self.counts)

    def total(self) -> int:
        return sum(self.counts.values())


def extract_phrases(poems: Sequence, n: int, table: MoraeTable) -> PhraseSet:
    """Collect the n-morae phrases of every valid poem; invalid poems are
    skipped with a warning and tallied."""
    if n not in PHRASE_SLOTS:
        raise MetricsError(f"phrase morae class must be 5 or 7, got {n}")
    out = PhraseSet(n=n)
    for poem in poems:
        tokens = [int(t) for t in _token_ids(poem)]
        ok, bounds = validate_pattern(tokens, table)
        if not ok:
            line = getattr(poem, "line_no", None)
            where = f" (line {line})" if line is not None else ""
            warnings.warn(f"skipping invalid poem{where} in phrase extraction")
            out.skipped += 1
            continue
        cuts = [-1] + list(bounds) + [len(tokens)]
        for slot in PHRASE_SLOTS[n]:
            phrase = tuple(tokens[cuts[slot] + 1 : cuts[slot + 1]])
            out.counts[phrase] = out.counts.get(phrase, 0) + 1
    return out


def novelty_phrase(generated: Sequence, corpus: Sequence, n: int,
                   table: MoraeTable) -> float:
    """Fraction of the generated collection's distinct n-morae phrases
    absent from the corpus."""
    ps = extract_phrases(generated, n, table)
    if not ps.counts:
        raise MetricsError("no valid generated poems for phrase novelty")
    pc = extract_phrases(corpus, n, table)
    fresh = ps.counts.keys() - pc.counts.keys()
    return len(fresh) / ps.distinct()


def diversity_phrase(generated: Sequence, n: int, table: MoraeTable) -> float:
    """Distinct n-morae phrases over total n-morae phrase occurrences."""
    ps = extract_phrases(generated, n, table)
    if not ps.counts:
        raise MetricsError("no valid generated poems for phrase diversity")
    return ps.distinct() / ps.total()


def eval_ppl_kld(model, test_poems: Sequence[Poem], rng,
                 batch_size: int = 32) -> Tuple[float, Optional[float]]:
    """Test-set perplexity (posterior-sample reconstruction, dropout off)
    and mean per-poem KL divergence; KLD is None for latent-free models."""
    from .models import evaluate_nll_kld, perplexity

    nll_token, kld = evaluate_nll_kld(model, test_poems, rng,
                                      batch_size=batch_size)
    return perplexity(nll_token), kld


def evaluation_report(generated: Sequence[Poem], train_poems: Sequence[Poem],
                      test_poems: Sequence[Poem], model, rng,
                      batch_size: int = 32,
                      multiset: bool = False) -> Dict[str, object]:
    """The full objective suite as a JSON-ready dict.

    skipped counts generated poems rejected during phrase extraction
    (same poems for the 5- and 7-morae passes, so tallied once).
    """
    table = model.vocab.morae_table()
    ps5 = extract_phrases(generated, 5, table)
    ppl, kld = eval_ppl_kld(model, test_poems, rng, batch_size=batch_size)
    return {
        "nov_w": novelty_word(generated, train_poems, multiset=multiset),
        "nov_s5": novelty_phrase(generated, train_poems, 5, table),
        "nov_s7": novelty_phrase(generated, train_poems, 7, table),
        "div_w": diversity_word(generated, multiset=multiset),
        "div_s5": diversity_phrase(generated, 5, table),
        "div_s7": diversity_phrase(generated, 7, table),
        "ppl": ppl,
        "kld": kld,
        "skipped": ps5.skipped,
    }
