"""Benchmark the max-Dice search kernels: compiled extension vs pure numpy.

Builds a synthetic workload shaped like the full-scale novelty_word call
(default |S|=1000 queries against |C|=150,000 corpus poems, ~13 distinct
content words each over a 6,649-word vocabulary) and times both backends
on identical CSR inputs.

    python benchmarks/bench_similarity.py [--queries N] [--corpus N]
        [--vocab N] [--words N] [--repeat K]
"""

import argparse
import time

import numpy as np

from wakavt import _simindex_py


def make_workload(rng, n_queries, n_corpus, vocab, words_per_poem):
    """CSR arrays for a Zipf-ish word distribution (matches corpus shape)."""
    weights = 1.0 / (np.arange(vocab) + 2.7)
    weights /= weights.sum()

    def draw_sets(n):
        sets = []
        for _ in range(n):
            k = max(1, int(rng.normal(words_per_poem, 2)))
            sets.append(np.unique(rng.choice(vocab, size=k, p=weights)))
        return sets

    corpus_sets = draw_sets(n_corpus)
    query_sets = draw_sets(n_queries)

    postings = [[] for _ in range(vocab)]
    for j, s in enumerate(corpus_sets):
        for w in s:
            postings[w].append(j)
    post_idx = np.asarray(
        [j for plist in postings for j in plist], dtype=np.int32)
    post_ptr = np.zeros(vocab + 1, dtype=np.int64)
    np.cumsum([len(p) for p in postings], out=post_ptr[1:])
    c_sizes = np.asarray([len(s) for s in corpus_sets], dtype=np.int32)

    q_idx = np.concatenate(query_sets).astype(np.int32)
    q_ptr = np.zeros(n_queries + 1, dtype=np.int64)
    np.cumsum([len(s) for s in query_sets], out=q_ptr[1:])
    q_sizes = np.asarray([len(s) for s in query_sets], dtype=np.int32)
    exclude = np.full(n_queries, -1, dtype=np.int64)
    return q_idx, q_ptr, q_sizes, post_idx, post_ptr, c_sizes, exclude


def bench(kernel, args_tuple, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = kernel.max_dice_many(*args_tuple)
        best = min(best, time.perf_counter() - t0)
    return best, np.asarray(out)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--queries", type=int, default=1000)
    ap.add_argument("--corpus", type=int, default=150_000)
    ap.add_argument("--vocab", type=int, default=6_649)
    ap.add_argument("--words", type=int, default=13)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ns = ap.parse_args()

    rng = np.random.default_rng(ns.seed)
    work = make_workload(rng, ns.queries, ns.corpus, ns.vocab, ns.words)
    print(f"workload: |S|={ns.queries} |C|={ns.corpus} vocab={ns.vocab} "
          f"postings={len(work[3])}")

    t_pure, out_pure = bench(_simindex_py, work, ns.repeat)
    print(f"pure numpy : {t_pure:8.3f} s")

    try:
        from wakavt import _simindex
    except ImportError:
        print("compiled   : unavailable (extension not built)")
        return
    t_fast, out_fast = bench(_simindex, work, ns.repeat)
    print(f"compiled   : {t_fast:8.3f} s  ({t_pure / t_fast:.1f}x)")
    if not np.array_equal(out_pure, out_fast):
        raise SystemExit("backend mismatch!")
    print("outputs identical")


if __name__ == "__main__":
    main()
