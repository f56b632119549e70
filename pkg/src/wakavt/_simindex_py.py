"""Pure-numpy fallback for the max-Dice search kernel.

Selected at import time by wakavt.metrics when the compiled extension
is unavailable. Same contract as wakavt._simindex.
"""

import numpy as np


def max_dice_many(q_idx, q_ptr, q_sizes, post_idx, post_ptr, c_sizes, exclude):
    """For each query i: max over corpus poems j != exclude[i] of
    2*|Q_i & C_j| / (|Q_i| + |C_j|). Zero-overlap poems contribute 0.
    """
    n_queries = len(q_sizes)
    n_poems = len(c_sizes)
    out = np.zeros(n_queries, dtype=np.float64)
    sizes = np.asarray(c_sizes, dtype=np.float64)
    for i in range(n_queries):
        words = q_idx[q_ptr[i] : q_ptr[i + 1]]
        if len(words) == 0:
            continue
        segments = [post_idx[post_ptr[w] : post_ptr[w + 1]] for w in words]
        candidates = np.concatenate(segments)
        if candidates.size == 0:
            continue
        overlap = np.bincount(candidates, minlength=n_poems)
        dice = 2.0 * overlap / (sizes + float(q_sizes[i]))
        if exclude[i] >= 0:
            dice[exclude[i]] = -1.0
        out[i] = max(float(dice.max()), 0.0)
    return out
