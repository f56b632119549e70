"""Self-attention with multilevel masks and gated fusion.

Three mask granularities over a poem: phrase-local, sentence-local
(phrases 1-3 vs 4-5), and whole-poem. A fused layer runs one multi-head
branch per granularity, each with its own residual + layer norm, and
merges the three with a gated multimodal unit before the usual
position-wise feed-forward block. Conditioning prefix positions
(keyword, start token) carry a sentinel segment id and stay visible to
every query at every granularity.

Alignment weights are returned alongside every attention output so
callers can export them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from wakavt import tensor as T
from wakavt.constraint import phrase_ids, sentence_ids
from wakavt.tensor import ParameterStore, Tensor

SENTINEL = -1
LEVELS = ("phrase", "sentence", "poem")
NEG_INF = float("-inf")


@dataclass(frozen=True)
class SegmentLayout:
    """Per-position phrase / sentence ids for one input sequence.

    Prefix positions (keyword control code, start token) get SENTINEL,
    which matches every segment at every level.
    """

    phrase: np.ndarray
    sentence: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "phrase", np.asarray(self.phrase, dtype=np.int64))
        object.__setattr__(self, "sentence", np.asarray(self.sentence, dtype=np.int64))
        if self.phrase.shape != self.sentence.shape or self.phrase.ndim != 1:
            raise ValueError("phrase/sentence id arrays must be equal-length 1-D")

    def __len__(self) -> int:
        return int(self.phrase.size)

    @classmethod
    def from_body(cls, body_tokens: Sequence[int], sep_id: int, n_prefix: int) -> "SegmentLayout":
        """Layout for [prefix x n, body...]: prefixes sentinel, body labeled
        by the phrase each token belongs to (separators close their phrase)."""
        ph = phrase_ids(body_tokens, sep_id)
        se = sentence_ids(body_tokens, sep_id)
        pre = np.full(n_prefix, SENTINEL, dtype=np.int64)
        return cls(np.concatenate([pre, ph]), np.concatenate([pre, se]))


@dataclass(frozen=True)
class AttentionMaskMatrix:
    """Additive {0, -inf} mask plus the settings that produced it."""

    matrix: np.ndarray
    level: str
    causal: bool


def _allowed(layout: SegmentLayout, level: str) -> np.ndarray:
    if level == "poem":
        n = len(layout)
        return np.ones((n, n), dtype=bool)
    ids = layout.phrase if level == "phrase" else layout.sentence
    same = ids[:, None] == ids[None, :]
    sentinel = (ids[:, None] == SENTINEL) | (ids[None, :] == SENTINEL)
    return same | sentinel


def build_mask(layout: SegmentLayout, level: str, causal: bool) -> AttentionMaskMatrix:
    """Additive mask for one granularity; self-positions are always open."""
    if level not in LEVELS:
        raise ValueError(f"unknown mask level {level!r}, expected one of {LEVELS}")
    allowed = _allowed(layout, level)
    if causal:
        allowed = allowed & np.tril(np.ones(allowed.shape, dtype=bool))
    matrix = np.where(allowed, 0.0, NEG_INF)
    return AttentionMaskMatrix(matrix=matrix, level=level, causal=causal)


def padded_mask_stack(
    layouts: Sequence[SegmentLayout], level: str, causal: bool, total_len: int
) -> np.ndarray:
    """[B, 1, total_len, total_len] additive masks for a padded batch.

    Padded key positions are closed everywhere; padded query rows attend
    to themselves only (their outputs are discarded by the loss masks,
    but softmax must still see one open entry).
    """
    batch = np.full((len(layouts), 1, total_len, total_len), NEG_INF, dtype=np.float64)
    for b, layout in enumerate(layouts):
        n = len(layout)
        if n > total_len:
            raise ValueError(f"layout length {n} exceeds padded length {total_len}")
        batch[b, 0, :n, :n] = build_mask(layout, level, causal).matrix
        for t in range(n, total_len):
            batch[b, 0, t, t] = 0.0
    return batch


# ---------------------------------------------------------------------------
# attention primitives


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_k) + mask) v; returns (output, weights)."""
    dk = q.shape[-1]
    scores = T.matmul(q, T.transpose(k)) * (1.0 / math.sqrt(dk))
    if mask is not None:
        scores = scores + (mask if isinstance(mask, Tensor) else Tensor(mask))
    weights = T.softmax(scores, axis=-1)
    return T.matmul(weights, v), weights


@dataclass
class MultiHeadParams:
    """Per-head projections live as column blocks of fused matrices."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    n_heads: int


def init_multi_head(store: ParameterStore, prefix: str, d_model: int, n_heads: int,
                    partition: str, rng) -> MultiHeadParams:
    if d_model % n_heads != 0:
        raise ValueError(f"d_model {d_model} not divisible by {n_heads} heads")

    def mat(name):
        return store.add(f"{prefix}.{name}", glorot(rng, d_model, d_model), partition)

    return MultiHeadParams(wq=mat("wq"), wk=mat("wk"), wv=mat("wv"), wo=mat("wo"), n_heads=n_heads)


def glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # [..., t, d] -> [..., h, t, d/h]
    *lead, t, d = x.shape
    y = T.reshape(x, (*lead, t, n_heads, d // n_heads))
    axes = list(range(y.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return T.transpose(y, axes)


def _merge_heads(x: Tensor) -> Tensor:
    # [..., h, t, dk] -> [..., t, h*dk]
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    y = T.transpose(x, axes)
    *lead, t, h, dk = y.shape
    return T.reshape(y, (*lead, t, h * dk))


def multi_head_attention(x: Tensor, params: MultiHeadParams, mask=None) -> Tuple[Tensor, Tensor]:
    """Fused-projection multi-head self-attention.

    x: [..., t, d_model]; mask broadcasts against [..., h, t, t].
    Returns (output [..., t, d_model], weights [..., h, t, t]).
    """
    q = _split_heads(T.matmul(x, params.wq), params.n_heads)
    k = _split_heads(T.matmul(x, params.wk), params.n_heads)
    v = _split_heads(T.matmul(x, params.wv), params.n_heads)
    ctx, weights = scaled_dot_attention(q, k, v, mask)
    out = T.matmul(_merge_heads(ctx), params.wo)
    return out, weights


# ---------------------------------------------------------------------------
# feed-forward and layer norm plumbing


@dataclass
class FFNParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def init_ffn(store, prefix, d_model, d_inner, partition, rng) -> FFNParams:
    return FFNParams(
        w1=store.add(f"{prefix}.w1", glorot(rng, d_model, d_inner), partition),
        b1=store.add(f"{prefix}.b1", np.zeros(d_inner), partition),
        w2=store.add(f"{prefix}.w2", glorot(rng, d_inner, d_model), partition),
        b2=store.add(f"{prefix}.b2", np.zeros(d_model), partition),
    )


def position_ffn(x: Tensor, p: FFNParams) -> Tensor:
    return T.add(T.matmul(T.relu(T.add(T.matmul(x, p.w1), p.b1)), p.w2), p.b2)


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor


def init_layer_norm(store, prefix, d_model, partition) -> LayerNormParams:
    return LayerNormParams(
        gamma=store.add(f"{prefix}.gamma", np.ones(d_model), partition),
        beta=store.add(f"{prefix}.beta", np.zeros(d_model), partition),
    )


def _ln(x: Tensor, p: LayerNormParams) -> Tensor:
    return T.layer_norm(x, p.gamma, p.beta)


def _drop(x: Tensor, rate: float, mode: str, rng) -> Tensor:
    if rate == 0.0 or mode == "infer":
        return x
    return T.dropout_apply(x, rate, mode, rng)


# ---------------------------------------------------------------------------
# gated multimodal fusion


@dataclass
class GMUParams:
    w_h: List[Tensor]  # one d x d map per branch
    w_z: List[Tensor]  # one 3d x d gate map per branch


def init_gmu(store, prefix, d_model, n_branches, partition, rng) -> GMUParams:
    w_h = [store.add(f"{prefix}.wh{i}", glorot(rng, d_model, d_model), partition)
           for i in range(n_branches)]
    w_z = [store.add(f"{prefix}.wz{i}", glorot(rng, n_branches * d_model, d_model), partition)
           for i in range(n_branches)]
    return GMUParams(w_h=w_h, w_z=w_z)


def gmu_fuse(branches: Sequence[Tensor], params: GMUParams) -> Tensor:
    """sum_i sigmoid(W_zi [all branches]) * tanh(W_hi branch_i)."""
    if len(branches) != len(params.w_h):
        raise ValueError(f"expected {len(params.w_h)} branches, got {len(branches)}")
    joint = T.concat(list(branches), axis=-1)
    out = None
    for x, wh, wz in zip(branches, params.w_h, params.w_z):
        h = T.tanh(T.matmul(x, wh))
        gate = T.sigmoid(T.matmul(joint, wz))
        term = T.mul(gate, h)
        out = term if out is None else T.add(out, term)
    return out


# ---------------------------------------------------------------------------
# full layers


@dataclass
class TransformerLayerParams:
    mha: MultiHeadParams
    ln1: LayerNormParams
    ffn: FFNParams
    ln2: LayerNormParams


def init_transformer_layer(store, prefix, d_model, n_heads, d_inner, partition, rng) -> TransformerLayerParams:
    return TransformerLayerParams(
        mha=init_multi_head(store, f"{prefix}.attn", d_model, n_heads, partition, rng),
        ln1=init_layer_norm(store, f"{prefix}.ln1", d_model, partition),
        ffn=init_ffn(store, f"{prefix}.ffn", d_model, d_inner, partition, rng),
        ln2=init_layer_norm(store, f"{prefix}.ln2", d_model, partition),
    )


def transformer_layer(
    x: Tensor,
    params: TransformerLayerParams,
    mask,
    mode: str = "train",
    rng=None,
    dropout: float = 0.0,
    collect: Optional[list] = None,
    name: str = "",
) -> Tensor:
    """Post-norm residual block: LN(x + attn), then LN(. + ffn)."""
    attn, weights = multi_head_attention(x, params.mha, mask)
    if collect is not None:
        collect.append((f"{name}.attn", np.array(weights.data)))
    h = _ln(T.add(x, _drop(attn, dropout, mode, rng)), params.ln1)
    f = position_ffn(h, params.ffn)
    return _ln(T.add(h, _drop(f, dropout, mode, rng)), params.ln2)


@dataclass
class FMSALayerParams:
    branches: List[MultiHeadParams]  # phrase, sentence, poem
    branch_ln: List[LayerNormParams]
    gmu: GMUParams
    ffn: FFNParams
    ln_out: LayerNormParams


def init_fmsa_layer(store, prefix, d_model, n_heads, d_inner, partition, rng) -> FMSALayerParams:
    branches = [init_multi_head(store, f"{prefix}.{lvl}", d_model, n_heads, partition, rng)
                for lvl in LEVELS]
    branch_ln = [init_layer_norm(store, f"{prefix}.{lvl}.ln", d_model, partition) for lvl in LEVELS]
    return FMSALayerParams(
        branches=branches,
        branch_ln=branch_ln,
        gmu=init_gmu(store, f"{prefix}.gmu", d_model, len(LEVELS), partition, rng),
        ffn=init_ffn(store, f"{prefix}.ffn", d_model, d_inner, partition, rng),
        ln_out=init_layer_norm(store, f"{prefix}.ln_out", d_model, partition),
    )


def fmsa_layer(
    x: Tensor,
    params: FMSALayerParams,
    masks: Dict[str, np.ndarray],
    mode: str = "train",
    rng=None,
    dropout: float = 0.0,
    collect: Optional[list] = None,
    name: str = "",
) -> Tensor:
    """Fused multilevel block: one attention branch per granularity, each
    with its own residual + layer norm, merged by the GMU, then FFN with
    residual + layer norm."""
    outs = []
    for level, mha, ln in zip(LEVELS, params.branches, params.branch_ln):
        attn, weights = multi_head_attention(x, mha, masks[level])
        if collect is not None:
            collect.append((f"{name}.{level}", np.array(weights.data)))
        outs.append(_ln(T.add(x, _drop(attn, dropout, mode, rng)), ln))
    fused = gmu_fuse(outs, params.gmu)
    f = position_ffn(fused, params.ffn)
    return _ln(T.add(fused, _drop(f, dropout, mode, rng)), params.ln_out)


# ---------------------------------------------------------------------------
# positions and export


def sinusoidal_positions(n_positions: int, d_model: int) -> np.ndarray:
    """Fixed sin/cos position table, [n_positions, d_model]."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    dim = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(dim / 2.0) / d_model)
    table = np.zeros((n_positions, d_model))
    table[:, 0::2] = np.sin(angle[:, 0::2])
    table[:, 1::2] = np.cos(angle[:, 1::2])
    return table


def format_alignment_dump(entries: Sequence[Tuple[str, np.ndarray]], tokens: Sequence[str]) -> str:
    """Text dump of collected alignment weights.

    Each entry is (name, weights) with weights [h, t, t] (a leading batch
    axis of size 1 is squeezed). Emits one section per head plus the
    head-mean, one row of floats per query position.
    """
    lines = [f"# tokens: {' '.join(tokens)}"]
    for name, w in entries:
        w = np.asarray(w)
        if w.ndim == 4:
            if w.shape[0] != 1:
                raise ValueError("alignment dump expects a single sequence")
            w = w[0]
        heads = [(f"head {i}", w[i]) for i in range(w.shape[0])]
        heads.append(("head-mean", w.mean(axis=0)))
        for label, matrix in heads:
            lines.append(f"# layer {name} {label}")
            for row in matrix:
                lines.append(" ".join(f"{v:.6f}" for v in row))
    return "\n".join(lines) + "\n"
