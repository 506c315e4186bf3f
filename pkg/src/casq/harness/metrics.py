"""Token error metrics: Levenshtein distance and corpus error rate."""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np


class EditResult(NamedTuple):
    distance: int
    rate: float
    empty_ref: bool


def edit_distance(ref: Sequence[int], hyp: Sequence[int]) -> EditResult:
    """Unit-cost Levenshtein distance and the error rate distance/|ref|.

    An empty reference has no denominator; by convention the rate is then
    |hyp| (everything is an insertion) and empty_ref flags the case.
    """
    n, m = len(ref), len(hyp)
    if n == 0:
        return EditResult(m, float(m), True)
    if m == 0:
        return EditResult(n, 1.0, False)
    # two-row dynamic program over the edit grid
    prev = np.arange(m + 1)
    cur = np.empty(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            sub = prev[j - 1] + (ref[i - 1] != hyp[j - 1])
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, sub)
        prev, cur = cur, prev
    dist = int(prev[m])
    return EditResult(dist, dist / n, False)


def corpus_error_rate(pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> dict:
    """Pooled error rate: total edit distance over total reference length.

    Empty references contribute their hypothesis length to the distance
    and nothing to the denominator; n_empty_ref reports how many there
    were. An all-empty corpus gets rate 0.0 when distance is 0, else inf.
    """
    total_dist = 0
    total_ref = 0
    n_empty = 0
    for ref, hyp in pairs:
        r = edit_distance(ref, hyp)
        total_dist += r.distance
        total_ref += len(ref)
        n_empty += r.empty_ref
    if total_ref == 0:
        rate = 0.0 if total_dist == 0 else float("inf")
    else:
        rate = total_dist / total_ref
    return {
        "error_rate": rate,
        "distance": total_dist,
        "ref_tokens": total_ref,
        "n_utts": len(pairs),
        "n_empty_ref": n_empty,
    }
