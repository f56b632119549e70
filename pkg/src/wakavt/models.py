"""Model assembly: causal language model, single-latent variational model,
per-token latent-sequence model, with plain or multilevel-fused attention.

Shared conventions:
  * decoder input is ``[keyword, SOS, x_1 .. x_{T-1}]``; outputs at
    positions ``1..T`` score targets ``x_1 .. x_T`` (the keyword slot
    predicts nothing, and there is no end-of-sequence target because the
    budget automaton forces the end token with probability 1),
  * morae masks computed from the gold prefix are added to logits before
    the softmax, so a forced token (separator on an exhausted budget)
    contributes exactly zero reconstruction loss,
  * objective terms are per-poem sums averaged over the batch:
    ``total = NLL + anneal_weight * KL + alpha * AUX``.

Parameter partitions: ``theta`` generator, ``phi_r`` recognition,
``phi_p`` prior, ``xi`` bag-of-words auxiliaries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from wakavt import tensor as T
from wakavt.attention import (
    LEVELS,
    SegmentLayout,
    init_fmsa_layer,
    init_transformer_layer,
    fmsa_layer,
    glorot,
    padded_mask_stack,
    sinusoidal_positions,
    transformer_layer,
)
from wakavt.constraint import MoraeTable, additive_mask, advance_budget, initial_state
from wakavt.corpus import CLS, PAD, SEP, SOS, Poem, Vocabulary
from wakavt.latent import (
    DiagGaussian,
    init_fusion,
    init_gaussian_projection,
    fuse_latent,
    kl_elements,
    project_gaussian,
    reparameterize,
)
from wakavt.tensor import ParameterStore, Tensor, backward, clip_gradients, no_grad

POSITION_CAP = 512

KINDS = ("tlm", "tvae", "wakavt")
ATTENTIONS = ("standard", "fmsa")


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class ModelConfig:
    kind: str = "wakavt"
    attention: str = "standard"
    d_model: int = 128
    n_heads: int = 4
    ffn_width: int = 512
    n1: int = 2
    n2: int = 2
    d_z: int = 128
    alpha: float = 1.0
    sbow_len: int = 5
    dropout: float = 0.1
    kl_anneal_steps: int = 10000
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    grad_clip: float = 5.0
    embed_init_range: float = 0.05
    train_steps: int = 1000
    log_every: int = 50
    checkpoint_every: int = 0  # 0: only a final checkpoint
    max_len: int = 64  # generation safety cap, body tokens

    def validate(self) -> "ModelConfig":
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.attention not in ATTENTIONS:
            raise ValueError(f"unknown attention kind {self.attention!r}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.kind == "tvae" and self.d_z != self.d_model:
            raise ValueError("tvae adds z to the start-token embedding; needs d_z == d_model")
        if self.kind != "tlm" and self.d_z < 1:
            raise ValueError("d_z must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.kl_anneal_steps < 1:
            raise ValueError("kl_anneal_steps must be >= 1")
        if self.sbow_len < 1:
            raise ValueError("sbow_len must be >= 1")
        if min(self.n1, self.n2) < 1:
            raise ValueError("layer counts must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        return self

    def to_jsonable(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_jsonable(), sort_keys=True)

    @classmethod
    def from_jsonable(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_jsonable(json.loads(text))

    def replaced(self, **kw) -> "ModelConfig":
        return replace(self, **kw).validate()


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    tokens: np.ndarray       # [B, Tm] int64, PAD beyond each poem
    keywords: np.ndarray     # [B] int64
    lengths: np.ndarray      # [B] int64
    target_mask: np.ndarray  # [B, Tm] float64, 1 at real targets
    morae_masks: np.ndarray  # [B, Tm, V] additive {0, -inf}; zero rows when padded

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_tokens(self) -> int:
        return int(self.target_mask.sum())


def make_batch(poems: Sequence[Poem], table: MoraeTable) -> Batch:
    """Pad poems and precompute per-position budget masks by replaying the
    gold prefix through the automaton (poems must already scan)."""
    n = len(poems)
    t_max = max(p.length for p in poems)
    v = table.vocab_size
    tokens = np.full((n, t_max), PAD, dtype=np.int64)
    keywords = np.zeros(n, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    masks = np.zeros((n, t_max, v), dtype=np.float64)
    for b, poem in enumerate(poems):
        keywords[b] = poem.keyword
        lengths[b] = poem.length
        state = initial_state()
        for j, tok in enumerate(poem.tokens):
            tokens[b, j] = tok
            masks[b, j] = additive_mask(state, table)
            state = advance_budget(state, tok, table)
        if not state.finished:
            raise ValueError(f"poem (line {poem.line_no}) does not complete the pattern")
    target_mask = (tokens != PAD).astype(np.float64)
    return Batch(tokens=tokens, keywords=keywords, lengths=lengths,
                 target_mask=target_mask, morae_masks=masks)


def decoder_inputs(batch: Batch) -> Tuple[np.ndarray, List[SegmentLayout]]:
    """``[keyword, SOS, x_1..x_{T-1}]`` ids plus per-sample segment layouts."""
    n, t_max = batch.tokens.shape
    ids = np.full((n, t_max + 1), PAD, dtype=np.int64)
    ids[:, 0] = batch.keywords
    ids[:, 1] = SOS
    ids[:, 2:] = batch.tokens[:, :-1]
    layouts = []
    for b in range(n):
        body = batch.tokens[b, : batch.lengths[b] - 1].tolist()
        ids[b, 2 + len(body):] = PAD
        layouts.append(SegmentLayout.from_body(body, SEP, n_prefix=2))
    return ids, layouts


def observer_inputs(batch: Batch, first_token: Optional[int] = None):
    """``[head, x_1..x_T]`` ids for non-causal stacks; head defaults to the
    per-poem keyword, or a fixed id (e.g. the CLS token)."""
    n, t_max = batch.tokens.shape
    ids = np.empty((n, t_max + 1), dtype=np.int64)
    ids[:, 0] = batch.keywords if first_token is None else first_token
    ids[:, 1:] = batch.tokens
    layouts = [
        SegmentLayout.from_body(batch.tokens[b, : batch.lengths[b]].tolist(), SEP, n_prefix=1)
        for b in range(n)
    ]
    return ids, layouts


# ---------------------------------------------------------------------------
# small shared pieces


@dataclass
class MLPParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def init_mlp(store, prefix, d_in, d_hidden, d_out, partition, rng) -> MLPParams:
    return MLPParams(
        w1=store.add(f"{prefix}.w1", glorot(rng, d_in, d_hidden), partition),
        b1=store.add(f"{prefix}.b1", np.zeros(d_hidden), partition),
        w2=store.add(f"{prefix}.w2", glorot(rng, d_hidden, d_out), partition),
        b2=store.add(f"{prefix}.b2", np.zeros(d_out), partition),
    )


def mlp_apply(x: Tensor, p: MLPParams) -> Tensor:
    return T.linear(T.tanh(T.linear(x, p.w1, p.b1)), p.w2, p.b2)


@dataclass
class ForwardTrace:
    log_probs: Tensor                 # [B, Tm, V], morae-masked
    nll_per_poem: Tensor              # [B]
    n_tokens: int
    kl_per_poem: Optional[Tensor]     # [B] or None (causal-only model)
    aux_per_poem: Optional[Tensor]    # [B] or None


def bow_loss(z: Tensor, kw_emb: Tensor, counts: np.ndarray, params: MLPParams) -> Tensor:
    """Per-poem bag cross-entropy, [B]: one shared vocabulary distribution
    from [z, keyword embedding] scores every target token, order-free."""
    lp = T.log_softmax(mlp_apply(T.concat([z, kw_emb], axis=-1), params), axis=-1)
    return T.neg(T.tensor_sum(T.mul(lp, Tensor(counts)), axis=-1))


def sbow_loss(z: Tensor, o_body: Tensor, counts: np.ndarray, params: MLPParams) -> Tensor:
    """Per-poem summed bag cross-entropy, [B]: position t's distribution
    from [z_t, trunk state] scores the next ``bag_len`` targets."""
    lp = T.log_softmax(mlp_apply(T.concat([z, o_body], axis=-1), params), axis=-1)
    return T.neg(T.tensor_sum(T.mul(lp, Tensor(counts)), axis=(1, 2)))


def bag_counts(tokens: np.ndarray, lengths: np.ndarray, vocab_size: int,
               bag_len: int) -> np.ndarray:
    """counts[b, t, v] = multiplicity of v among targets x_{t+1..t+bag_len}
    (0-based t, truncated at each poem's end)."""
    n, t_max = tokens.shape
    counts = np.zeros((n, t_max, vocab_size), dtype=np.float64)
    for k in range(bag_len):
        j = np.arange(t_max - k)
        valid_b, valid_j = np.nonzero(j[None, :] + k < lengths[:, None])
        np.add.at(counts, (valid_b, valid_j, tokens[valid_b, valid_j + k]), 1.0)
    return counts


def poem_counts(tokens: np.ndarray, lengths: np.ndarray, vocab_size: int) -> np.ndarray:
    """counts[b, v] = multiplicity of v among x_1..x_T of poem b."""
    n, t_max = tokens.shape
    counts = np.zeros((n, vocab_size), dtype=np.float64)
    valid_b, valid_j = np.nonzero(np.arange(t_max)[None, :] < lengths[:, None])
    np.add.at(counts, (valid_b, tokens[valid_b, valid_j]), 1.0)
    return counts


# ---------------------------------------------------------------------------
# model core


class _Core:
    """Embedding, position table, output head, stack plumbing."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, rng,
                 embeddings: Optional[np.ndarray] = None):
        config.validate()
        self.config = config
        self.vocab = vocab
        self.table = vocab.morae_table()
        self.store = ParameterStore()
        self.pos_table = sinusoidal_positions(POSITION_CAP, config.d_model)
        v = len(vocab)
        if embeddings is not None:
            emb = np.asarray(embeddings, dtype=np.float64)
            if emb.shape != (v, config.d_model):
                raise ValueError(f"embeddings must be [{v}, {config.d_model}], got {emb.shape}")
        else:
            r = config.embed_init_range
            emb = rng.uniform(-r, r, size=(v, config.d_model))
        self.embed = self.store.add("embed.table", emb, "theta")
        self.out_w = self.store.add("out.w", glorot(rng, config.d_model, v), "theta")
        self.out_b = self.store.add("out.b", np.zeros(v), "theta")
        self._build(rng)

    def _build(self, rng) -> None:
        raise NotImplementedError

    def _init_stack(self, prefix: str, n_layers: int, partition: str, rng) -> list:
        cfg = self.config
        init = init_fmsa_layer if cfg.attention == "fmsa" else init_transformer_layer
        return [
            init(self.store, f"{prefix}.{i}", cfg.d_model, cfg.n_heads,
                 cfg.ffn_width, partition, rng)
            for i in range(n_layers)
        ]

    def _mask_set(self, layouts: Sequence[SegmentLayout], causal: bool,
                  total_len: int) -> Dict[str, np.ndarray]:
        if self.config.attention == "fmsa":
            return {lvl: padded_mask_stack(layouts, lvl, causal, total_len) for lvl in LEVELS}
        return {"poem": padded_mask_stack(layouts, "poem", causal, total_len)}

    def _run_stack(self, x: Tensor, layers: list, mask_set, mode, rng,
                   collect, name: str) -> Tensor:
        cfg = self.config
        for i, layer in enumerate(layers):
            if cfg.attention == "fmsa":
                x = fmsa_layer(x, layer, mask_set, mode, rng, cfg.dropout,
                               collect, f"{name}{i}")
            else:
                x = transformer_layer(x, layer, mask_set["poem"], mode, rng,
                                      cfg.dropout, collect, f"{name}{i}")
        return x

    def _embed_ids(self, ids: np.ndarray, mode: str, rng) -> Tensor:
        if ids.shape[-1] > POSITION_CAP:
            raise ValueError(f"sequence length {ids.shape[-1]} exceeds {POSITION_CAP}")
        e = T.embedding(self.embed, ids)
        e = T.add(e, Tensor(self.pos_table[: ids.shape[-1]]))
        return T.dropout_apply(e, self.config.dropout, mode, rng)

    def _project_out(self, h: Tensor) -> Tensor:
        return T.linear(h, self.out_w, self.out_b)

    def _nll(self, logits: Tensor, batch: Batch) -> Tuple[Tensor, Tensor]:
        """Masked log-probs and per-poem summed NLL."""
        log_probs = T.log_softmax(T.add(logits, Tensor(batch.morae_masks)), axis=-1)
        picked = T.take_along_last(log_probs, batch.tokens)
        masked = T.mul(picked, Tensor(batch.target_mask))
        nll = T.neg(T.tensor_sum(masked, axis=1))
        return log_probs, nll

    # generation hooks ------------------------------------------------

    def prefix_layout(self, body_ids: Sequence[int]) -> SegmentLayout:
        return SegmentLayout.from_body(list(body_ids), SEP, n_prefix=2)

    def forward(self, batch: Batch, mode: str = "train", rng=None,
                collect: Optional[list] = None) -> ForwardTrace:
        raise NotImplementedError


class TLMModel(_Core):
    """Keyword-conditioned causal transformer, no latent variables."""

    kind = "tlm"

    def _build(self, rng) -> None:
        n_layers = self.config.n1 + self.config.n2
        self.dec_layers = self._init_stack("dec", n_layers, "theta", rng)

    def forward(self, batch, mode="train", rng=None, collect=None) -> ForwardTrace:
        ids, layouts = decoder_inputs(batch)
        mask_set = self._mask_set(layouts, True, ids.shape[1])
        h = self._embed_ids(ids, mode, rng)
        h = self._run_stack(h, self.dec_layers, mask_set, mode, rng, collect, "dec")
        logits = self._project_out(h[:, 1:, :])
        log_probs, nll = self._nll(logits, batch)
        return ForwardTrace(log_probs, nll, batch.n_tokens, None, None)

    def next_logits(self, ids: np.ndarray, layouts, collect=None) -> np.ndarray:
        """Raw (unmasked) logits for the next position, [B, V]."""
        with no_grad():
            mask_set = self._mask_set(layouts, True, ids.shape[1])
            h = self._embed_ids(ids, "infer", None)
            h = self._run_stack(h, self.dec_layers, mask_set, "infer", None, collect, "dec")
            return self._project_out(h[:, -1, :]).data


class TVAEModel(_Core):
    """One latent per poem: a non-causal observer stack over [CLS, x]
    feeds a recognition head; the latent is added to the start-token
    embedding of a causal decoder; bag-of-words auxiliary loss."""

    kind = "tvae"

    def _build(self, rng) -> None:
        cfg = self.config
        self.enc_layers = self._init_stack("enc", cfg.n1, "phi_r", rng)
        self.recog = init_gaussian_projection(
            self.store, "recog", 2 * cfg.d_model, cfg.d_model, cfg.d_z, "phi_r", rng)
        self.prior = init_gaussian_projection(
            self.store, "prior", cfg.d_model, cfg.d_model, cfg.d_z, "phi_p", rng)
        self.dec_layers = self._init_stack("dec", cfg.n2, "theta", rng)
        self.bow = init_mlp(self.store, "bow", cfg.d_z + cfg.d_model,
                            cfg.d_model, len(self.vocab), "xi", rng)

    def _posterior(self, batch, mode, rng, collect):
        ids, layouts = observer_inputs(batch, first_token=CLS)
        mask_set = self._mask_set(layouts, False, ids.shape[1])
        h = self._embed_ids(ids, mode, rng)
        h = self._run_stack(h, self.enc_layers, mask_set, mode, rng, collect, "enc")
        cls_repr = h[:, 0, :]
        kw_emb = T.embedding(self.embed, batch.keywords)
        q = project_gaussian(T.concat([cls_repr, kw_emb], axis=-1), self.recog)
        return q, kw_emb

    def _decode(self, ids, layouts, z, mode, rng, collect) -> Tensor:
        """Causal stack with z added to the start-token slot; returns
        full-sequence hidden states."""
        n, length = ids.shape
        e = T.embedding(self.embed, ids)
        e = T.add(e, Tensor(self.pos_table[:length]))
        pad_cols = np.zeros((n, length - 2, self.config.d_z))
        z_lane = T.concat(
            [Tensor(np.zeros((n, 1, self.config.d_z))), z.reshape((n, 1, self.config.d_z)),
             Tensor(pad_cols)],
            axis=1,
        )
        e = T.add(e, z_lane)
        e = T.dropout_apply(e, self.config.dropout, mode, rng)
        mask_set = self._mask_set(layouts, True, length)
        return self._run_stack(e, self.dec_layers, mask_set, mode, rng, collect, "dec")

    def forward(self, batch, mode="train", rng=None, collect=None) -> ForwardTrace:
        if rng is None:
            raise ValueError("latent models need an rng for posterior sampling")
        q, kw_emb = self._posterior(batch, mode, rng, collect)
        p = project_gaussian(kw_emb, self.prior)
        z = reparameterize(q, rng.standard_normal(q.mu.shape))
        ids, layouts = decoder_inputs(batch)
        h = self._decode(ids, layouts, z, mode, rng, collect)
        logits = self._project_out(h[:, 1:, :])
        log_probs, nll = self._nll(logits, batch)
        kl = T.tensor_sum(kl_elements(q, p), axis=-1)
        counts = poem_counts(batch.tokens, batch.lengths, len(self.vocab))
        aux = bow_loss(z, kw_emb, counts, self.bow)
        return ForwardTrace(log_probs, nll, batch.n_tokens, kl, aux)

    def prior_for_keywords(self, kw_ids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Prior (mu, logvar) per keyword, as arrays."""
        with no_grad():
            kw_emb = T.embedding(self.embed, kw_ids)
            p = project_gaussian(kw_emb, self.prior)
            return p.mu.data, p.logvar.data

    def next_logits(self, ids: np.ndarray, z: np.ndarray, layouts, collect=None) -> np.ndarray:
        with no_grad():
            h = self._decode(ids, layouts, Tensor(z), "infer", None, collect)
            return self._project_out(h[:, -1, :]).data


class WakaVTModel(_Core):
    """Latent sequence model: one latent per target position, recognized
    from a non-causal observer stack, fused into a causal trunk, decoded
    by a second causal stack; sequential bag-of-words auxiliary loss."""

    kind = "wakavt"

    def _build(self, rng) -> None:
        cfg = self.config
        self.post_layers = self._init_stack("post", cfg.n1, "phi_r", rng)
        self.recog = init_gaussian_projection(
            self.store, "recog", cfg.d_model, cfg.d_model, cfg.d_z, "phi_r", rng)
        self.pre_layers = self._init_stack("pre", cfg.n1, "theta", rng)
        self.prior = init_gaussian_projection(
            self.store, "prior", cfg.d_model, cfg.d_model, cfg.d_z, "phi_p", rng)
        self.fuse = init_fusion(self.store, "fuse", cfg.d_z, cfg.d_model, "theta", rng)
        self.dec_layers = self._init_stack("dec", cfg.n2, "theta", rng)
        self.sbow = init_mlp(self.store, "sbow", cfg.d_z + cfg.d_model,
                             cfg.d_model, len(self.vocab), "xi", rng)

    def _observer(self, batch, mode, rng, collect) -> Tensor:
        """Non-causal pass over [keyword, x]; body states, [B, Tm, d]."""
        ids, layouts = observer_inputs(batch)
        mask_set = self._mask_set(layouts, False, ids.shape[1])
        h = self._embed_ids(ids, mode, rng)
        h = self._run_stack(h, self.post_layers, mask_set, mode, rng, collect, "post")
        return h[:, 1:, :]

    def _trunk(self, ids, layouts, mode, rng, collect) -> Tensor:
        """Causal pass over [keyword, SOS, x_{<T}]; full states, [B, L, d]."""
        mask_set = self._mask_set(layouts, True, ids.shape[1])
        h = self._embed_ids(ids, mode, rng)
        return self._run_stack(h, self.pre_layers, mask_set, mode, rng, collect, "pre")

    def _head(self, o_p: Tensor, z: Tensor, layouts, mode, rng, collect) -> Tensor:
        """Fuse latents into trunk states (keyword slot bypasses fusion)
        and run the after-latent causal stack; logits for positions 1..L-1."""
        fused = fuse_latent(z, o_p[:, 1:, :], self.fuse, mode, rng, self.config.dropout)
        seq = T.concat([o_p[:, :1, :], fused], axis=1)
        mask_set = self._mask_set(layouts, True, seq.shape[1])
        h = self._run_stack(seq, self.dec_layers, mask_set, mode, rng, collect, "dec")
        return self._project_out(h[:, 1:, :])

    def forward(self, batch, mode="train", rng=None, collect=None) -> ForwardTrace:
        if rng is None:
            raise ValueError("latent models need an rng for posterior sampling")
        o_r = self._observer(batch, mode, rng, collect)
        q = project_gaussian(o_r, self.recog)
        ids, layouts = decoder_inputs(batch)
        o_p = self._trunk(ids, layouts, mode, rng, collect)
        o_p_body = o_p[:, 1:, :]
        p = project_gaussian(o_p_body, self.prior)
        z = reparameterize(q, rng.standard_normal(q.mu.shape))
        logits = self._head(o_p, z, layouts, mode, rng, collect)
        log_probs, nll = self._nll(logits, batch)
        kl_pos = T.mul(T.tensor_sum(kl_elements(q, p), axis=-1), Tensor(batch.target_mask))
        kl = T.tensor_sum(kl_pos, axis=1)
        counts = bag_counts(batch.tokens, batch.lengths, len(self.vocab),
                            self.config.sbow_len)
        aux = sbow_loss(z, o_p_body, counts, self.sbow)
        return ForwardTrace(log_probs, nll, batch.n_tokens, kl, aux)

    def prior_at_last(self, ids: np.ndarray, layouts) -> Tuple[np.ndarray, np.ndarray]:
        """Prior (mu, logvar) for the newest position, as arrays [B, d_z]."""
        with no_grad():
            o_p = self._trunk(ids, layouts, "infer", None, None)
            p = project_gaussian(o_p[:, -1, :], self.prior)
            return p.mu.data, p.logvar.data

    def replay_logits(self, ids: np.ndarray, z: np.ndarray, layouts,
                      collect=None) -> np.ndarray:
        """Re-run the generator with fixed latents (z one per body position);
        raw logits [B, L-1, V]. Used for attention inspection and rescoring."""
        with no_grad():
            o_p = self._trunk(ids, layouts, "infer", None, collect)
            return self._head(o_p, Tensor(z), layouts, "infer", None, collect).data

    def next_logits_and_latent(
        self, ids: np.ndarray, z_prefix: np.ndarray, noise: np.ndarray,
        layouts, collect=None,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """One generation step: prior latent at the newest position
        (``z = mu + sigma * noise``), fused decode, last-position logits.

        ``z_prefix`` is [B, t-1, d_z] from the ancestors; returns
        (logits [B, V], z_full [B, t, d_z]).
        """
        with no_grad():
            o_p = self._trunk(ids, layouts, "infer", None, collect)
            p = project_gaussian(o_p[:, -1, :], self.prior)
            z_new = p.mu.data + np.exp(0.5 * p.logvar.data) * noise
            z_full = np.concatenate([z_prefix, z_new[:, None, :]], axis=1)
            logits = self._head(o_p, Tensor(z_full), layouts, "infer", None, collect)
            return logits[:, -1, :].data, z_full


def build_model(config: ModelConfig, vocab: Vocabulary, rng,
                embeddings: Optional[np.ndarray] = None) -> _Core:
    cls = {"tlm": TLMModel, "tvae": TVAEModel, "wakavt": WakaVTModel}[config.kind]
    return cls(config, vocab, rng, embeddings)


# ---------------------------------------------------------------------------
# external embeddings


def load_external_embeddings(path: str, vocab: Vocabulary, d_model: int,
                             init_range: float, rng) -> Tuple[np.ndarray, int]:
    """Text format: optional ``count dim`` header, then ``word v1 .. vd``.
    Words absent from the file keep the uniform init; returns the table
    and the number of vocabulary words that were found."""
    table = rng.uniform(-init_range, init_range, size=(len(vocab), d_model))
    loaded = 0
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            if line_no == 1 and len(parts) == 2:
                continue  # header
            word, vals = parts[0], parts[1:]
            if len(vals) != d_model:
                raise ValueError(f"line {line_no}: expected {d_model} values, got {len(vals)}")
            if word in vocab:
                table[vocab.word2id[word]] = [float(x) for x in vals]
                loaded += 1
    return table, loaded


# ---------------------------------------------------------------------------
# objective and optimizer


@dataclass
class LossParts:
    total: Tensor
    nll: float
    kl: float
    aux: float
    weight: float
    nll_token: float
    n_tokens: int

    def log_line(self, step: int) -> str:
        return f"{step},{self.nll:.6f},{self.kl:.6f},{self.aux:.6f},{self.weight:.6f}"


LOG_HEADER = "step,nll,kl,aux,anneal_weight"


def compute_loss(trace: ForwardTrace, anneal_weight: float, alpha: float) -> LossParts:
    nll_mean = T.tensor_mean(trace.nll_per_poem)
    total = nll_mean
    kl_val = 0.0
    aux_val = 0.0
    if trace.kl_per_poem is not None:
        kl_mean = T.tensor_mean(trace.kl_per_poem)
        total = T.add(total, kl_mean * anneal_weight)
        kl_val = kl_mean.item()
    if trace.aux_per_poem is not None:
        aux_mean = T.tensor_mean(trace.aux_per_poem)
        total = T.add(total, aux_mean * alpha)
        aux_val = aux_mean.item()
    token_nll = float(np.sum(trace.nll_per_poem.data)) / max(trace.n_tokens, 1)
    return LossParts(total=total, nll=nll_mean.item(), kl=kl_val, aux=aux_val,
                     weight=anneal_weight, nll_token=token_nll, n_tokens=trace.n_tokens)


def kl_anneal(step: int, total_steps: int) -> float:
    """Linear ramp from 0 to 1 over ``total_steps`` updates."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    return min(1.0, step / total_steps)


@dataclass
class TrainState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(store: ParameterStore, state: TrainState, config: ModelConfig) -> None:
    b1, b2 = config.adam_beta1, config.adam_beta2
    t = state.step + 1
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for path in store.paths():
        g = store.grad(path)
        m = state.m.setdefault(path, np.zeros_like(g))
        v = state.v.setdefault(path, np.zeros_like(g))
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        step_dir = (m / corr1) / (np.sqrt(v / corr2) + config.adam_eps)
        tensor = store[path]
        tensor.data = tensor.data - config.learning_rate * step_dir


def train_step(model: _Core, batch: Batch, state: TrainState, rng,
               collect: Optional[list] = None) -> LossParts:
    cfg = model.config
    weight = kl_anneal(state.step, cfg.kl_anneal_steps) if cfg.kind != "tlm" else 0.0
    model.store.zero_grad()
    trace = model.forward(batch, mode="train", rng=rng, collect=collect)
    parts = compute_loss(trace, weight, cfg.alpha)
    if not np.isfinite(parts.total.item()):
        raise TrainingDivergedError(
            f"non-finite loss at step {state.step}: nll={parts.nll} "
            f"kl={parts.kl} aux={parts.aux}"
        )
    backward(parts.total, model.store)
    clip_gradients(model.store, cfg.grad_clip)
    adam_update(model.store, state, cfg)
    state.step += 1
    return parts


# ---------------------------------------------------------------------------
# evaluation


def evaluate_nll_kld(model: _Core, poems: Sequence[Poem], rng,
                     batch_size: Optional[int] = None) -> Tuple[float, Optional[float]]:
    """Token-mean reconstruction NLL (posterior samples, dropout off) and
    per-poem mean of the summed KL; KL is None for the causal-only model."""
    bs = batch_size or model.config.batch_size
    nll_sum = 0.0
    n_tokens = 0
    kl_sum = 0.0
    has_latent = model.config.kind != "tlm"
    with no_grad():
        for i in range(0, len(poems), bs):
            batch = make_batch(poems[i : i + bs], model.table)
            trace = model.forward(batch, mode="infer", rng=rng)
            nll_sum += float(np.sum(trace.nll_per_poem.data))
            n_tokens += trace.n_tokens
            if has_latent:
                kl_sum += float(np.sum(trace.kl_per_poem.data))
    nll_token = nll_sum / max(n_tokens, 1)
    kld = kl_sum / len(poems) if has_latent else None
    return nll_token, kld


def perplexity(nll_token: float) -> float:
    return float(np.exp(nll_token))


# ---------------------------------------------------------------------------
# persistence


def save_model(path: str, model: _Core, state: TrainState) -> None:
    """Self-sufficient archive: parameters, optimizer slots, config, vocab."""
    from wakavt import checkpoint as ckpt

    meta = {
        "format": 1,
        "step": state.step,
        "config": model.config.to_jsonable(),
        "vocab": model.vocab.to_jsonable(),
    }
    opt: Dict[str, np.ndarray] = {}
    for name, arr in state.m.items():
        opt[f"m/{name}"] = arr
    for name, arr in state.v.items():
        opt[f"v/{name}"] = arr
    ckpt.save_checkpoint(path, model.store, meta, opt)


def load_model(path: str) -> Tuple[_Core, TrainState]:
    """Rebuild a model and its optimizer state from an archive alone."""
    from wakavt import checkpoint as ckpt

    params, meta, opt = ckpt.load_checkpoint(path)
    config = ModelConfig.from_jsonable(meta["config"])
    vocab = Vocabulary.from_jsonable(meta["vocab"])
    model = build_model(config, vocab, np.random.default_rng(0))
    restored = {name: arr for name, (_, arr) in params.items()}
    missing = set(model.store.paths()) - set(restored)
    if missing:
        raise ckpt.CheckpointError(f"archive lacks parameters: {sorted(missing)[:3]}")
    for name in model.store.paths():
        tensor = model.store[name]
        if tensor.data.shape != restored[name].shape:
            raise ckpt.CheckpointError(f"shape mismatch for {name!r}")
        tensor.data = restored[name]
    state = TrainState(step=int(meta["step"]))
    for name, arr in opt.items():
        slot, _, param = name.partition("/")
        if slot == "m":
            state.m[param] = arr
        elif slot == "v":
            state.v[param] = arr
    return model, state
