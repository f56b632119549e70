"""Corpus ingestion, vocabulary, keywords, splits, synthetic data.

File format: UTF-8, one poem per line, tokens space-separated. Content
tokens carry their morae count as a ``word:m`` suffix; the phrase
separator is a bare ``|``. An optional keyword column may precede the
poem, separated by a tab. Example line::

    yama\tyama:3 kawa:2 | tori:2 naku:2 koe:3 | ...

Poems that do not scan 5-7-5-7-7 are rejected at ingestion and listed
in a rejection report rather than silently dropped.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from wakavt.attention import SegmentLayout
from wakavt.constraint import MoraeTable, validate_pattern

PAD, UNK, SOS, EOS, SEP, CLS = range(6)
SPECIAL_SURFACES = ("<pad>", "<unk>", "<s>", "</s>", "|", "<cls>")
UNK_MORAE = 8  # wider than any budget, so the unknown token never fits


class CorpusFormatError(ValueError):
    """Malformed corpus/vocabulary input, reported with a line number."""


@dataclass
class RawPoem:
    """Surface form straight from a corpus line."""

    words: List[str]  # includes "|" separators
    morae: List[int]  # 0 for separators
    keyword: Optional[str] = None
    line_no: int = 0

    def content_words(self) -> List[str]:
        return [w for w in self.words if w != "|"]


@dataclass
class Poem:
    """Encoded poem: vocabulary ids (separators included) plus keyword id."""

    tokens: List[int]
    keyword: int
    line_no: int = 0

    @property
    def length(self) -> int:
        return len(self.tokens)

    def layout(self, n_prefix: int) -> SegmentLayout:
        return SegmentLayout.from_body(self.tokens, SEP, n_prefix)


class Vocabulary:
    """Dense id space: six specials first, then words in first-seen order."""

    def __init__(self, words: Sequence[str], morae: Sequence[int]):
        if len(words) != len(morae):
            raise ValueError("words/morae length mismatch")
        self.id2word: List[str] = list(SPECIAL_SURFACES) + list(words)
        self.word2id: Dict[str, int] = {w: i for i, w in enumerate(self.id2word)}
        if len(self.word2id) != len(self.id2word):
            raise ValueError("duplicate word in vocabulary")
        counts = [0, UNK_MORAE, 0, 0, 0, 0] + [int(m) for m in morae]
        self.morae = np.asarray(counts, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.id2word)

    def __contains__(self, word: str) -> bool:
        return word in self.word2id

    def encode_word(self, word: str) -> int:
        return self.word2id.get(word, UNK)

    def encode(self, words: Sequence[str]) -> List[int]:
        return [self.encode_word(w) for w in words]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.id2word[int(i)] for i in ids]

    def morae_table(self) -> MoraeTable:
        return MoraeTable(counts=self.morae.copy(), sep_id=SEP, end_id=EOS,
                          blocked_ids=(PAD, SOS, CLS))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, word in enumerate(self.id2word):
                fh.write(f"{i}\t{word}\t{int(self.morae[i])}\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        words, morae = [], []
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise CorpusFormatError(f"vocab line {line_no}: expected id<TAB>word<TAB>morae")
                try:
                    idx, count = int(parts[0]), int(parts[2])
                except ValueError as exc:
                    raise CorpusFormatError(f"vocab line {line_no}: {exc}") from None
                if idx != line_no - 1:
                    raise CorpusFormatError(f"vocab line {line_no}: ids must be dense from 0")
                words.append(parts[1])
                morae.append(count)
        if words[: len(SPECIAL_SURFACES)] != list(SPECIAL_SURFACES):
            raise CorpusFormatError("vocab file must start with the six special tokens")
        return cls(words[len(SPECIAL_SURFACES):], morae[len(SPECIAL_SURFACES):])

    def to_jsonable(self) -> list:
        return [[w, int(self.morae[len(SPECIAL_SURFACES) + i])]
                for i, w in enumerate(self.id2word[len(SPECIAL_SURFACES):])]

    @classmethod
    def from_jsonable(cls, entries: list) -> "Vocabulary":
        return cls([w for w, _ in entries], [m for _, m in entries])


# ---------------------------------------------------------------------------
# parsing


def parse_poem_line(line: str, line_no: int) -> RawPoem:
    keyword = None
    body = line.rstrip("\n")
    if "\t" in body:
        keyword, body = body.split("\t", 1)
        keyword = keyword.strip()
        if not keyword:
            raise CorpusFormatError(f"line {line_no}: empty keyword column")
    words: List[str] = []
    morae: List[int] = []
    for tok in body.split():
        if tok == "|":
            words.append("|")
            morae.append(0)
            continue
        word, sep, count = tok.rpartition(":")
        if not sep or not word:
            raise CorpusFormatError(f"line {line_no}: token {tok!r} lacks a morae suffix")
        try:
            m = int(count)
        except ValueError:
            raise CorpusFormatError(f"line {line_no}: bad morae count in {tok!r}") from None
        if m < 1:
            raise CorpusFormatError(f"line {line_no}: content word {word!r} needs morae >= 1")
        if word in SPECIAL_SURFACES:
            raise CorpusFormatError(f"line {line_no}: {word!r} collides with a special token")
        words.append(word)
        morae.append(m)
    if not words:
        raise CorpusFormatError(f"line {line_no}: empty poem")
    return RawPoem(words=words, morae=morae, keyword=keyword, line_no=line_no)


def parse_corpus_file(path: str) -> List[RawPoem]:
    poems = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            poems.append(parse_poem_line(line, line_no))
    return poems


def format_poem_line(raw: RawPoem) -> str:
    toks = [w if w == "|" else f"{w}:{m}" for w, m in zip(raw.words, raw.morae)]
    body = " ".join(toks)
    return f"{raw.keyword}\t{body}" if raw.keyword else body


# ---------------------------------------------------------------------------
# vocabulary construction


def build_vocab(raws: Sequence[RawPoem], min_freq: int = 1) -> Vocabulary:
    """First-seen order with a frequency floor; conflicting morae for the
    same surface form are an error (the table must be a function)."""
    freq: Counter = Counter()
    seen_morae: Dict[str, int] = {}
    order: List[str] = []
    for raw in raws:
        for word, m in zip(raw.words, raw.morae):
            if word == "|":
                continue
            if word in seen_morae:
                if seen_morae[word] != m:
                    raise CorpusFormatError(
                        f"line {raw.line_no}: {word!r} has conflicting morae "
                        f"({seen_morae[word]} vs {m})"
                    )
            else:
                seen_morae[word] = m
                order.append(word)
            freq[word] += 1
    kept = [w for w in order if freq[w] >= min_freq]
    return Vocabulary(kept, [seen_morae[w] for w in kept])


@dataclass
class RejectionReport:
    """Per-file account of poems dropped at ingestion."""

    rejected: List[Tuple[int, str]] = field(default_factory=list)

    def add(self, line_no: int, reason: str) -> None:
        self.rejected.append((line_no, reason))

    def __len__(self) -> int:
        return len(self.rejected)

    def summary(self) -> str:
        if not self.rejected:
            return "no rejected poems"
        lines = [f"rejected {len(self.rejected)} poem(s):"]
        lines += [f"  line {n}: {reason}" for n, reason in self.rejected]
        return "\n".join(lines)


def encode_corpus(
    raws: Sequence[RawPoem], vocab: Vocabulary
) -> Tuple[List[Poem], RejectionReport]:
    """Encode and pattern-check; fills missing keywords via TextRank."""
    table = vocab.morae_table()
    poems: List[Poem] = []
    report = RejectionReport()
    for raw in raws:
        ids = vocab.encode(raw.words)
        if UNK in ids:
            bad = [w for w, i in zip(raw.words, ids) if i == UNK]
            report.add(raw.line_no, f"out-of-vocabulary words: {bad[:3]}")
            continue
        ok, _ = validate_pattern(ids, table)
        if not ok:
            report.add(raw.line_no, "morae pattern is not 5-7-5-7-7")
            continue
        keyword = raw.keyword or textrank_keyword(raw.words)
        kid = vocab.encode_word(keyword)
        if kid == UNK:
            report.add(raw.line_no, f"keyword {keyword!r} not in vocabulary")
            continue
        poems.append(Poem(tokens=ids, keyword=kid, line_no=raw.line_no))
    return poems, report


def load_corpus(
    path: str, vocab: Optional[Vocabulary] = None, min_freq: int = 1
) -> Tuple[List[Poem], Vocabulary, RejectionReport]:
    raws = parse_corpus_file(path)
    if vocab is None:
        vocab = build_vocab(raws, min_freq=min_freq)
    poems, report = encode_corpus(raws, vocab)
    return poems, vocab, report


# ---------------------------------------------------------------------------
# keyword extraction


def textrank_keyword(words: Sequence[str], window: int = 2, damping: float = 0.85,
                     iterations: int = 30) -> str:
    """Highest-scoring content word under TextRank over the co-occurrence
    graph (undirected, edges within `window` positions, weights = counts).
    Ties break toward the earliest position in the poem."""
    content = [w for w in words if w != "|"]
    if not content:
        raise ValueError("poem has no content words")
    nodes = sorted(set(content))
    index = {w: i for i, w in enumerate(nodes)}
    n = len(nodes)
    weights = np.zeros((n, n))
    for i, w in enumerate(content):
        for j in range(i + 1, min(i + window + 1, len(content))):
            u = content[j]
            if u == w:
                continue
            weights[index[w], index[u]] += 1.0
            weights[index[u], index[w]] += 1.0
    out_sum = weights.sum(axis=1)
    norm = np.divide(weights, out_sum[None, :], out=np.zeros_like(weights),
                     where=out_sum[None, :] > 0)
    scores = np.ones(n)
    for _ in range(iterations):
        nxt = (1.0 - damping) + damping * norm @ scores
        if np.max(np.abs(nxt - scores)) < 1e-12:
            scores = nxt
            break
        scores = nxt
    first_pos = {}
    for pos, w in enumerate(content):
        first_pos.setdefault(w, pos)
    best = max(nodes, key=lambda w: (scores[index[w]], -first_pos[w]))
    return best


# ---------------------------------------------------------------------------
# splits


FULL_SPLIT = (156801, 10000, 5000)  # reference proportions


@dataclass
class SplitManifest:
    train: List[int]
    val: List[int]
    test: List[int]
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {"seed": self.seed, "train": self.train, "val": self.val, "test": self.test}
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        d = json.loads(text)
        return cls(train=d["train"], val=d["val"], test=d["test"], seed=d["seed"])


def split_dataset(n: int, seed: int) -> SplitManifest:
    """Shuffled disjoint exhaustive split at the reference train/val/test
    proportions (each part at least 1)."""
    if n < 3:
        raise ValueError(f"cannot split {n} poems three ways")
    total = sum(FULL_SPLIT)
    n_val = max(1, round(n * FULL_SPLIT[1] / total))
    n_test = max(1, round(n * FULL_SPLIT[2] / total))
    if n_val + n_test >= n:
        n_val = n_test = 1
    perm = np.random.default_rng(seed).permutation(n)
    test = sorted(int(i) for i in perm[:n_test])
    val = sorted(int(i) for i in perm[n_test : n_test + n_val])
    train = sorted(int(i) for i in perm[n_test + n_val :])
    return SplitManifest(train=train, val=val, test=test, seed=seed)


# ---------------------------------------------------------------------------
# synthetic corpora


_SYLLABLES = (
    "ka ki ku ke ko sa shi su se so ta chi tsu te to na ni nu ne no "
    "ha hi fu he ho ma mi mu me mo ya yu yo ra ri ru re ro wa"
).split()


def toy_vocab_spec(n_words: int = 30, max_morae: int = 5, seed: int = 0) -> List[Tuple[str, int]]:
    """Deterministic synthetic vocabulary; morae = syllable count.
    Always includes a 1-morae word so the budget automaton never stalls."""
    rng = np.random.default_rng(seed)
    spec: List[Tuple[str, int]] = []
    used = set()
    lengths = [1] + [int(rng.integers(1, max_morae + 1)) for _ in range(n_words * 4)]
    for m in lengths:
        if len(spec) >= n_words:
            break
        word = "".join(rng.choice(_SYLLABLES) for _ in range(m))
        if word in used or word in SPECIAL_SURFACES:
            continue
        used.add(word)
        spec.append((word, m))
    if len(spec) < n_words:
        raise ValueError("could not build enough distinct words; raise max_morae")
    return spec


def generate_synthetic_corpus(
    size: int, vocab_spec: Sequence[Tuple[str, int]], seed: int
) -> List[str]:
    """Corpus lines sampled by walking the budget automaton.

    Word choice mixes a Zipf-like base distribution with per-poem topic
    multipliers, which gives poems repeated-theme structure (so TextRank
    keywords mean something) while staying fully seed-deterministic.
    """
    from wakavt.constraint import additive_mask, advance_budget, initial_state

    words = [w for w, _ in vocab_spec]
    morae = np.array([m for _, m in vocab_spec], dtype=np.int64)
    if 1 not in set(morae.tolist()):
        raise ValueError("vocab spec needs a 1-morae word to avoid dead ends")
    vocab = Vocabulary(words, morae.tolist())
    table = vocab.morae_table()
    base = 1.0 / (np.arange(len(words)) + 2.7)
    rng = np.random.default_rng(seed)
    n_words = len(words)
    lines: List[str] = []
    for _ in range(size):
        topic = np.exp(1.2 * rng.standard_normal(n_words))
        weight = base * topic
        state = initial_state()
        body: List[str] = []
        while not state.finished:
            mask = additive_mask(state, table)
            open_ids = np.flatnonzero(mask == 0.0)
            if open_ids.size == 1:
                tok = int(open_ids[0])
            else:
                w = weight[open_ids - len(SPECIAL_SURFACES)]
                tok = int(rng.choice(open_ids, p=w / w.sum()))
            body.append(vocab.id2word[tok])
            state = advance_budget(state, tok, table)
        raw = RawPoem(
            words=body,
            morae=[0 if w == "|" else int(morae[words.index(w)]) for w in body],
        )
        raw.keyword = textrank_keyword(raw.words)
        lines.append(format_poem_line(raw))
    return lines
