"""Morae budget automaton for the 5-7-5-7-7 pattern.

A poem body is five phrases whose morae counts sum to 5, 7, 5, 7, 7,
joined by a zero-morae separator token. The automaton tracks
(phrase index, remaining budget, finished) and exposes, per state, an
additive vocabulary mask in {0, -inf}: legal continuations keep their
logit, everything else is pushed to -inf before the softmax.

Rules realized here:
  * a content word is legal iff its morae count fits the remaining budget;
  * the separator is legal exactly when the budget hits 0 mid-poem, and
    is then the only legal choice;
  * the end token is legal exactly when all five phrases are complete,
    and is then the only legal choice (no trailing separator);
  * non-content specials (pad, start, ...) are never legal in a body.

validate_pattern is an independent check (split at separators, compare
sums) — deliberately not implemented via the automaton, so the two can
cross-check each other.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

PATTERN: Tuple[int, ...] = (5, 7, 5, 7, 7)

NEG_INF = float("-inf")


class BudgetViolationError(ValueError):
    """An advance that the current budget state does not admit."""


@dataclass(frozen=True)
class MoraeTable:
    """Vocabulary-id -> morae count, plus the ids with special roles.

    ``counts`` covers every id; separator and end carry 0, the unknown
    token carries 8 (one more than the widest budget, so no remaining
    budget ever admits it). ``blocked_ids`` are body-illegal specials
    (pad, start, CLS, ...).
    """

    counts: np.ndarray
    sep_id: int
    end_id: int
    blocked_ids: Tuple[int, ...] = ()

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "counts", counts)
        if counts.ndim != 1:
            raise ValueError("morae counts must be a flat per-id array")
        if (counts < 0).any():
            raise ValueError("morae counts must be nonnegative")
        if counts[self.sep_id] != 0:
            raise ValueError("separator must carry 0 morae")
        if counts[self.end_id] != 0:
            raise ValueError("end token must carry 0 morae")

    @property
    def vocab_size(self) -> int:
        return int(self.counts.size)

    def morae(self, token_id: int) -> int:
        return int(self.counts[token_id])

    def is_content(self, token_id: int) -> bool:
        return token_id != self.sep_id and token_id != self.end_id and token_id not in self.blocked_ids


@dataclass(frozen=True)
class BudgetState:
    """Position inside the pattern: current phrase, morae left, done."""

    phrase: int = 0
    remaining: int = PATTERN[0]
    finished: bool = False


def initial_state() -> BudgetState:
    return BudgetState(0, PATTERN[0], False)


def advance_budget(state: BudgetState, token_id: int, table: MoraeTable) -> BudgetState:
    """Consume one token; raises BudgetViolationError on an illegal move."""
    if state.finished:
        if token_id == table.end_id:
            return state
        raise BudgetViolationError("finished state admits only the end token")
    if token_id == table.end_id:
        raise BudgetViolationError("end token before the pattern completed")
    if token_id == table.sep_id:
        if state.remaining != 0:
            raise BudgetViolationError(
                f"separator with {state.remaining} morae still open in phrase {state.phrase}"
            )
        if state.phrase >= len(PATTERN) - 1:
            raise BudgetViolationError("separator after the final phrase")
        nxt = state.phrase + 1
        return BudgetState(nxt, PATTERN[nxt], False)
    if not table.is_content(token_id):
        raise BudgetViolationError(f"token {token_id} is not generable in a poem body")
    if state.remaining == 0:
        raise BudgetViolationError("phrase budget exhausted; separator required")
    s = table.morae(token_id)
    if s > state.remaining:
        raise BudgetViolationError(
            f"word of {s} morae does not fit remaining budget {state.remaining}"
        )
    rem = state.remaining - s
    done = state.phrase == len(PATTERN) - 1 and rem == 0
    return BudgetState(state.phrase, rem, done)


def additive_mask(state: BudgetState, table: MoraeTable) -> np.ndarray:
    """Per-vocabulary additive mask in {0, -inf} for the next emission."""
    mask = np.full(table.vocab_size, NEG_INF, dtype=np.float64)
    if state.finished:
        mask[table.end_id] = 0.0
        return mask
    if state.remaining == 0:
        # mid-poem boundary: the separator is forced
        mask[table.sep_id] = 0.0
        return mask
    fits = table.counts <= state.remaining
    mask[fits] = 0.0
    mask[table.sep_id] = NEG_INF
    mask[table.end_id] = NEG_INF
    for b in table.blocked_ids:
        mask[b] = NEG_INF
    return mask


def replay(tokens: Sequence[int], table: MoraeTable) -> BudgetState:
    """Advance from the initial state through a token sequence."""
    state = initial_state()
    for t in tokens:
        state = advance_budget(state, int(t), table)
    return state


def validate_pattern(
    tokens: Sequence[int], table: MoraeTable
) -> Tuple[bool, Optional[Tuple[int, int, int, int]]]:
    """Check a body against the 5-7-5-7-7 pattern by direct summation.

    Returns (valid, boundaries); boundaries are the 0-based positions of
    the four separators when valid. Independent of the automaton.
    """
    toks = [int(t) for t in tokens]
    sep_positions = []
    for pos, t in enumerate(toks):
        if t < 0 or t >= table.vocab_size:
            return False, None
        if t == table.sep_id:
            sep_positions.append(pos)
        elif not table.is_content(t):
            return False, None
    if len(sep_positions) != 4:
        return False, None
    groups = []
    start = 0
    for pos in sep_positions + [len(toks)]:
        groups.append(toks[start:pos])
        start = pos + 1
    for group, budget in zip(groups, PATTERN):
        if sum(table.morae(t) for t in group) != budget:
            return False, None
    return True, tuple(sep_positions)


def phrase_ids(tokens: Sequence[int], sep_id: int) -> np.ndarray:
    """Phrase index (0..4) per body position; separators attach to the
    phrase they close. Works on partial prefixes too (beam search)."""
    out = np.zeros(len(tokens), dtype=np.int64)
    phrase = 0
    for pos, t in enumerate(tokens):
        out[pos] = phrase
        if int(t) == sep_id:
            phrase += 1
    return out


def sentence_ids(tokens: Sequence[int], sep_id: int) -> np.ndarray:
    """Sentence index per body position: phrases 0-2 form sentence 0
    (kami-no-ku), phrases 3-4 sentence 1 (shimo-no-ku)."""
    return (phrase_ids(tokens, sep_id) >= 3).astype(np.int64)
