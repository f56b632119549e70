"""Morae-constrained beam search.

Every live hypothesis carries its budget automaton state; at each step
the model's logits receive that hypothesis's additive mask before the
softmax, so closed tokens score -inf and can never be selected. A
hypothesis whose budget completes emits the end token at zero cost (the
mask forces it with probability one) and retires to the finished pool.
The search is synchronized: all live hypotheses share a length, so one
batched model call scores every expansion.

Latents: the per-token latent model draws one prior sample per live
hypothesis per step; children inherit their ancestor's latent history
unchanged. The single-latent model draws one latent per poem, shared by
all hypotheses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from wakavt.constraint import (
    BudgetState,
    MoraeTable,
    additive_mask,
    advance_budget,
    initial_state,
    validate_pattern,
)
from wakavt.corpus import SOS, SPECIAL_SURFACES, Poem, RawPoem, Vocabulary, format_poem_line


class GenerationError(RuntimeError):
    """Beam search could not produce a finished poem."""


@dataclass
class GenerationConfig:
    beam_width: int = 20
    max_len: int = 64           # body-token cap
    seed: int = 0
    length_exponent: float = 1.0
    strict_keyword: bool = False

    def validate(self) -> "GenerationConfig":
        if self.beam_width < 1:
            raise ValueError("beam width must be >= 1")
        if self.max_len < 9:
            raise ValueError("max_len must allow at least the shortest poem (9 tokens)")
        return self


@dataclass
class Beam:
    keyword: int
    tokens: List[int]
    state: BudgetState
    logprob: float
    z: Optional[np.ndarray]  # [t, d_z] prior samples, per-token latent model only
    finished: bool = False

    def contains_keyword(self) -> bool:
        return self.keyword in self.tokens


def masked_log_probs(logits: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """log softmax(logits + masks) rows; a forced row (single open token)
    yields exactly 0 there and -inf elsewhere."""
    s = logits + masks
    m = s.max(axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise GenerationError("a hypothesis has no admissible token")
    e = np.exp(s - m)
    return s - m - np.log(e.sum(axis=-1, keepdims=True))


def select_candidates(cum_scores: np.ndarray, width: int) -> List[Tuple[int, int]]:
    """Top-``width`` (beam, token) pairs by score; ties break toward the
    lowest token id, then the earliest beam."""
    flat = cum_scores.ravel()
    open_idx = np.flatnonzero(np.isfinite(flat))
    beam_idx, tok_idx = np.divmod(open_idx, cum_scores.shape[1])
    order = np.lexsort((beam_idx, tok_idx, -flat[open_idx]))
    return [(int(beam_idx[o]), int(tok_idx[o])) for o in order[:width]]


def rank_finished(pool: Sequence[Beam], keyword: int, exponent: float) -> List[int]:
    """Pool indices, best first: normalized score, then keyword containment,
    then token ids, then pool order."""

    def key(j: int):
        b = pool[j]
        norm = b.logprob / (len(b.tokens) ** exponent)
        return (-norm, keyword not in b.tokens, b.tokens, j)

    return sorted(range(len(pool)), key=key)


def sample_prior_step(model, beam: Beam, noise_source) -> Tuple[np.ndarray, Beam]:
    """Draw the next prior latent for one hypothesis and extend its latent
    history; descendants share the ancestor's samples by construction."""
    if model.config.kind != "wakavt":
        raise ValueError("prior latent steps only apply to the per-token latent model")
    ids = np.array([[beam.keyword, SOS, *beam.tokens]], dtype=np.int64)
    layouts = [model.prefix_layout(beam.tokens)]
    mu, logvar = model.prior_at_last(ids, layouts)
    noise = noise_source.standard_normal((model.config.d_z,))
    z_t = mu[0] + np.exp(0.5 * logvar[0]) * noise
    z = beam.z if beam.z is not None else np.zeros((0, model.config.d_z))
    return z_t, Beam(beam.keyword, list(beam.tokens), beam.state, beam.logprob,
                     np.concatenate([z, z_t[None]], axis=0), beam.finished)


def _resolve_keyword(model, keyword) -> int:
    vocab: Vocabulary = model.vocab
    if isinstance(keyword, str):
        if keyword not in vocab:
            raise GenerationError(f"keyword {keyword!r} is not in the vocabulary")
        kw = vocab.word2id[keyword]
    else:
        kw = int(keyword)
    if not 0 <= kw < len(vocab) or kw < len(SPECIAL_SURFACES):
        raise GenerationError(f"keyword id {kw} is not a content word")
    return kw


def beam_search_generate(model, keyword, config: GenerationConfig,
                         collect: Optional[list] = None) -> Poem:
    """Constrained beam search; the returned poem always scans 5-7-5-7-7.

    ``collect``: optional list receiving (name, attention weights) entries
    from a deterministic replay of the winning hypothesis.
    """
    config.validate()
    kw = _resolve_keyword(model, keyword)
    table: MoraeTable = model.table
    kind = model.config.kind
    d_z = model.config.d_z
    rng = np.random.default_rng(config.seed)
    width = config.beam_width

    z_poem = None
    if kind == "tvae":
        mu, logvar = model.prior_for_keywords(np.array([kw]))
        z_poem = mu[0] + np.exp(0.5 * logvar[0]) * rng.standard_normal(d_z)

    live = [Beam(kw, [], initial_state(), 0.0,
                 np.zeros((0, d_z)) if kind == "wakavt" else None)]
    pool: List[Beam] = []

    for _ in range(config.max_len):
        if not live or len(pool) >= width:
            break
        n = len(live)
        ids = np.array([[b.keyword, SOS, *b.tokens] for b in live], dtype=np.int64)
        layouts = [model.prefix_layout(b.tokens) for b in live]
        z_full = None
        if kind == "tlm":
            logits = model.next_logits(ids, layouts)
        elif kind == "tvae":
            logits = model.next_logits(ids, np.repeat(z_poem[None], n, axis=0), layouts)
        else:
            noise = rng.standard_normal((n, d_z))
            logits, z_full = model.next_logits_and_latent(
                ids, np.stack([b.z for b in live]), noise, layouts)
        masks = np.stack([additive_mask(b.state, table) for b in live])
        cum = np.array([b.logprob for b in live])[:, None] + masked_log_probs(logits, masks)
        next_live: List[Beam] = []
        for i, v in select_candidates(cum, width):
            parent = live[i]
            new_state = advance_budget(parent.state, v, table)
            child = Beam(kw, parent.tokens + [v], new_state, float(cum[i, v]),
                         None if z_full is None else z_full[i])
            if new_state.finished:
                # the next mask admits only the end token (probability 1,
                # zero cost): emit it implicitly and retire the hypothesis
                child.finished = True
                pool.append(child)
            else:
                next_live.append(child)
        live = next_live

    if not pool:
        raise GenerationError(
            f"no hypothesis finished within {config.max_len} steps (width {width})")
    candidates = pool
    if config.strict_keyword:
        candidates = [b for b in pool if b.contains_keyword()]
        if not candidates:
            raise GenerationError(
                f"no finished poem contains the keyword {model.vocab.id2word[kw]!r}")
    best = candidates[rank_finished(candidates, kw, config.length_exponent)[0]]
    ok, _ = validate_pattern(best.tokens, table)
    if not ok:
        raise GenerationError("finished hypothesis fails the pattern check")
    if collect is not None:
        _replay_attention(model, best, z_poem, collect)
    return Poem(tokens=list(best.tokens), keyword=kw)


def _replay_attention(model, beam: Beam, z_poem, collect: list) -> None:
    """Deterministic re-run of the winning hypothesis's generator pass,
    collecting every stack's attention weights."""
    ids = np.array([[beam.keyword, SOS, *beam.tokens[:-1]]], dtype=np.int64)
    layouts = [model.prefix_layout(beam.tokens[:-1])]
    kind = model.config.kind
    if kind == "tlm":
        model.next_logits(ids, layouts, collect=collect)
    elif kind == "tvae":
        model.next_logits(ids, z_poem[None], layouts, collect=collect)
    else:
        model.replay_logits(ids, beam.z[None], layouts, collect=collect)


def attention_dump_tokens(vocab: Vocabulary, poem: Poem) -> List[str]:
    """Surface labels for the replayed decoder input."""
    return [vocab.id2word[poem.keyword], vocab.id2word[SOS]] + [
        vocab.id2word[t] for t in poem.tokens[:-1]
    ]


def format_generation_line(vocab: Vocabulary, poem: Poem) -> str:
    """Interchange format: keyword column plus word:morae tokens."""
    words = [vocab.id2word[t] for t in poem.tokens]
    morae = [int(vocab.morae[t]) for t in poem.tokens]
    raw = RawPoem(words=words, morae=morae, keyword=vocab.id2word[poem.keyword])
    return format_poem_line(raw)
