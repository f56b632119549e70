"""Command-line pipeline: train, generate, evaluate, synthesize-corpus.

Every command draws all randomness from one --seed via fixed SeedSequence
spawning, and every artifact-producing run writes exactly one manifest
(config snapshot, seed, checkpoint name, sha256 of corpus inputs; file
names recorded as basenames so reruns in different directories compare
byte-identically).  No timestamps anywhere.
"""

import argparse
import hashlib
import json
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from .attention import format_alignment_dump
from .corpus import (Poem, UNK, generate_synthetic_corpus, load_corpus,
                     parse_corpus_file, toy_vocab_spec)
from .decoding import (GenerationConfig, GenerationError,
                       attention_dump_tokens, beam_search_generate,
                       format_generation_line)
from .metrics import evaluation_report
from .models import (ATTENTIONS, KINDS, LOG_HEADER, ModelConfig, TrainState,
                     build_model, load_model, make_batch, save_model,
                     train_step)

# Fixed stream order; spawning by name keeps each consumer's randomness
# independent of how many draws the others make.
STREAMS = ("init", "shuffle", "noise", "eval")


def derive_rngs(seed: int) -> Dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(c)
            for name, c in zip(STREAMS, children)}


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(path: str, command: str, seed: int,
                   config: Optional[dict], checkpoint: Optional[str],
                   corpus_paths: List[str], extra: Optional[dict] = None
                   ) -> None:
    manifest = {
        "command": command,
        "seed": seed,
        "config": config,
        "checkpoint": os.path.basename(checkpoint) if checkpoint else None,
        "corpus_sha256": {os.path.basename(p): file_sha256(p)
                          for p in corpus_paths},
    }
    if extra:
        manifest.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# train


def _load_config(ns, parser) -> ModelConfig:
    base = {}
    if ns.config:
        try:
            with open(ns.config, "r", encoding="utf-8") as fh:
                base = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {ns.config}: {exc}")
    if ns.model:
        base["kind"] = ns.model
    if ns.attention:
        base["attention"] = ns.attention
    try:
        return ModelConfig.from_jsonable(base).validate()
    except (TypeError, ValueError) as exc:
        parser.error(f"invalid config: {exc}")


def cmd_train(ns, parser) -> int:
    rngs = derive_rngs(ns.seed)
    if ns.checkpoint:
        if ns.config or ns.model or ns.attention:
            parser.error("--checkpoint resumes with the stored config; "
                         "drop --config/--model/--attention")
        model, state = load_model(ns.checkpoint)
        poems, _, rejects = load_corpus(ns.corpus, vocab=model.vocab)
    else:
        config = _load_config(ns, parser)
        poems, vocab, rejects = load_corpus(ns.corpus)
        model = build_model(config, vocab, rngs["init"])
        state = TrainState()
    if len(rejects):
        print(rejects.summary(), file=sys.stderr)
    if not poems:
        parser.error(f"no valid poems in {ns.corpus}")

    cfg = model.config
    table = model.vocab.morae_table()
    os.makedirs(ns.out, exist_ok=True)
    log_path = os.path.join(ns.out, "train_log.csv")
    final_path = os.path.join(ns.out, "model.ckpt")

    with open(log_path, "w", encoding="utf-8") as log:
        log.write(LOG_HEADER + "\n")
        while state.step < cfg.train_steps:
            order = rngs["shuffle"].permutation(len(poems))
            for lo in range(0, len(order), cfg.batch_size):
                chunk = [poems[i] for i in order[lo:lo + cfg.batch_size]]
                batch = make_batch(chunk, table)
                parts = train_step(model, batch, state, rngs["noise"])
                done = state.step
                if done % cfg.log_every == 0 or done == cfg.train_steps:
                    log.write(parts.log_line(done) + "\n")
                if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                    save_model(os.path.join(ns.out, f"model-{done:06d}.ckpt"),
                               model, state)
                if done >= cfg.train_steps:
                    break

    save_model(final_path, model, state)
    write_manifest(os.path.join(ns.out, "manifest.json"), "train", ns.seed,
                   cfg.to_jsonable(), final_path, [ns.corpus],
                   extra={"steps": state.step})
    return 0


# ---------------------------------------------------------------------------
# generate


def _read_keywords(ns, parser) -> List[str]:
    if (ns.keyword is None) == (ns.keywords_file is None):
        parser.error("exactly one of --keyword/--keywords-file is required")
    if ns.keyword is not None:
        return [ns.keyword]
    with open(ns.keywords_file, "r", encoding="utf-8") as fh:
        words = [line.strip() for line in fh]
    words = [w for w in words if w]
    if not words:
        parser.error(f"no keywords in {ns.keywords_file}")
    return words


def cmd_generate(ns, parser) -> int:
    model, _ = load_model(ns.checkpoint)
    keywords = _read_keywords(ns, parser)
    seeds = np.random.SeedSequence(ns.seed).generate_state(len(keywords))
    if ns.dump_attention:
        os.makedirs(ns.dump_attention, exist_ok=True)

    lines: List[str] = []
    failures = 0
    for i, (word, sub_seed) in enumerate(zip(keywords, seeds)):
        config = GenerationConfig(
            beam_width=ns.beam_width, max_len=model.config.max_len,
            seed=int(sub_seed), strict_keyword=ns.strict_keyword).validate()
        collect: Optional[list] = [] if ns.dump_attention else None
        try:
            poem = beam_search_generate(model, word, config, collect=collect)
        except GenerationError as exc:
            print(f"keyword {word!r}: {exc}", file=sys.stderr)
            failures += 1
            continue
        lines.append(format_generation_line(model.vocab, poem))
        if ns.dump_attention:
            dump = format_alignment_dump(
                collect, attention_dump_tokens(model.vocab, poem))
            dump_path = os.path.join(ns.dump_attention, f"{i:04d}_{word}.txt")
            with open(dump_path, "w", encoding="utf-8") as fh:
                fh.write(dump)

    with open(ns.out, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")
    corpus_inputs = [ns.keywords_file] if ns.keywords_file else []
    write_manifest(ns.out + ".manifest.json", "generate", ns.seed,
                   model.config.to_jsonable(), ns.checkpoint, corpus_inputs,
                   extra={"beam_width": ns.beam_width,
                          "strict_keyword": ns.strict_keyword,
                          "keywords": len(keywords), "failed": failures})
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# evaluate


def _load_generated(path: str, vocab) -> List[Poem]:
    """Lenient ingestion for generated files: no pattern check here, so
    the metrics' skip-and-tally path sees malformed poems."""
    poems = []
    for raw in parse_corpus_file(path):
        tokens = vocab.encode(raw.words)
        keyword = vocab.encode_word(raw.keyword) if raw.keyword else UNK
        poems.append(Poem(tokens=tokens, keyword=keyword,
                          line_no=raw.line_no))
    return poems


def cmd_evaluate(ns, parser) -> int:
    model, _ = load_model(ns.checkpoint)
    generated = _load_generated(ns.generated, model.vocab)
    if not generated:
        parser.error(f"no poems in {ns.generated}")
    train_poems, _, train_rej = load_corpus(ns.corpus, vocab=model.vocab)
    test_poems, _, test_rej = load_corpus(ns.test, vocab=model.vocab)
    for rejects in (train_rej, test_rej):
        if len(rejects):
            print(rejects.summary(), file=sys.stderr)

    rng = derive_rngs(ns.seed)["eval"]
    report = evaluation_report(generated, train_poems, test_poems, model,
                               rng, batch_size=model.config.batch_size)
    text = json.dumps(report, sort_keys=True)
    print(text)
    if ns.out:
        os.makedirs(ns.out, exist_ok=True)
        with open(os.path.join(ns.out, "report.json"), "w",
                  encoding="utf-8") as fh:
            fh.write(text + "\n")
        write_manifest(os.path.join(ns.out, "manifest.json"), "evaluate",
                       ns.seed, model.config.to_jsonable(), ns.checkpoint,
                       [ns.generated, ns.corpus, ns.test])
    return 0


# ---------------------------------------------------------------------------
# synth


def cmd_synth(ns, parser) -> int:
    spec_seed, corpus_seed = (
        int(s) for s in np.random.SeedSequence(ns.seed).generate_state(2))
    spec = toy_vocab_spec(n_words=ns.vocab_size, max_morae=ns.max_morae,
                          seed=spec_seed)
    lines = generate_synthetic_corpus(ns.size, spec, seed=corpus_seed)
    with open(ns.out, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")
    write_manifest(ns.out + ".manifest.json", "synth", ns.seed, None, None,
                   [ns.out], extra={"size": ns.size,
                                    "vocab_size": ns.vocab_size,
                                    "max_morae": ns.max_morae})
    return 0


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="wakavt",
        description="Morae-constrained poem generation pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on a corpus")
    t.add_argument("--config", help="model/training config JSON")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--model", choices=sorted(KINDS))
    t.add_argument("--attention", choices=sorted(ATTENTIONS))
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="beam-search poems from keywords")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--keyword")
    g.add_argument("--keywords-file")
    g.add_argument("--out", required=True, help="output poem file")
    g.add_argument("--beam-width", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dump-attention", metavar="DIR",
                   help="write per-poem attention alignments here")
    g.add_argument("--strict-keyword", action="store_true")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="objective metric report (JSON)")
    e.add_argument("--generated", required=True)
    e.add_argument("--corpus", required=True, help="training corpus")
    e.add_argument("--test", required=True, help="held-out corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="also write report + manifest here")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("synth", help="write a synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--vocab-size", type=int, default=30)
    s.add_argument("--max-morae", type=int, default=5)
    s.set_defaults(func=cmd_synth)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    return ns.func(ns, parser)


if __name__ == "__main__":
    sys.exit(main())
