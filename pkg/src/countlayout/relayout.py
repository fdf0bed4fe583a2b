"""Layout correction toward a target instance count.

Over-generation trims the smallest channels; under-generation repeatedly
shrinks the layout toward the grid center ("zoom out" to make room) and runs
the k -> k+1 network until the count is hit. Matching between k and k+1
layouts uses a minimum-cost assignment with cost = 1 - Dice plus a small
centroid-distance tie-breaker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .localize import InstanceLayout, canonical_order, count_instances

MAX_TARGET = 10
MAX_INSERT_ITERS = 12
SHRINK_FACTOR = 0.92
BINARIZE_THRESHOLD = 0.5
CENTROID_WEIGHT = 0.1


class CorrectionError(RuntimeError):
    """Iteration cap hit before reaching the target count.

    Carries the best layout achieved so callers can still inspect it.
    """

    def __init__(self, message, best_layout=None, iterations=0):
        super().__init__(message)
        self.best_layout = best_layout
        self.iterations = iterations


@dataclass
class LayoutPair:
    """Matched (k, k+1) training example.

    correspondence maps each source channel to its target channel; the one
    target channel left unmatched is the inserted object (new_channel).
    """

    source: InstanceLayout
    target: InstanceLayout
    correspondence: dict
    new_channel: int

    def validate(self):
        k = self.source.count
        if self.target.count != k + 1:
            raise ValueError(f"target count {self.target.count} != source count {k} + 1")
        if sorted(self.correspondence) != list(range(k)):
            raise ValueError("correspondence must cover every source channel")
        tgt = list(self.correspondence.values())
        if len(set(tgt)) != len(tgt):
            raise ValueError("correspondence is not injective")
        unmatched = set(range(k + 1)) - set(tgt)
        if unmatched != {self.new_channel}:
            raise ValueError(
                f"unmatched target channels {sorted(unmatched)} != new_channel {self.new_channel}"
            )

    def aligned_target_channels(self):
        """Target channels reordered so channel i supervises source channel i
        and the inserted object lands on channel k."""
        k = self.source.count
        out = np.zeros((k + 1,) + self.target.channels.shape[1:], dtype=np.uint8)
        for s, t in self.correspondence.items():
            out[s] = self.target.channels[t]
        out[k] = self.target.channels[self.new_channel]
        return out


@dataclass
class MatchResult:
    assignment: list       # (source_idx, target_idx) pairs, source order
    total_cost: float
    unmatched_target: int


def hungarian(cost):
    """Minimum-cost injective assignment of rows to columns (rows <= cols).

    Standard O(n^2 m) shortest augmenting path formulation with potentials.
    Returns assign where assign[i] is the column matched to row i.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise ValueError(f"need rows <= cols, got {cost.shape}")
    INF = float("inf")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j] = 1-based row assigned to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assign = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j] > 0:
            assign[p[j] - 1] = j - 1
    return assign


def dice_coefficient(a, b):
    """2|A n B| / (|A| + |B|) for binary masks; 0 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 0.0
    return 2.0 * np.logical_and(a, b).sum() / denom


def match_cost_matrix(src, tgt):
    """cost(i, j) = 1 - Dice + 0.1 * centroid distance / image diagonal."""
    h, w = src.channels.shape[1:]
    diag = math.hypot(h, w)
    k, m = src.count, tgt.count
    cost = np.zeros((k, m))
    for i in range(k):
        for j in range(m):
            d = dice_coefficient(src.channels[i], tgt.channels[j])
            cdist = math.hypot(*(src.centroids[i] - tgt.centroids[j]))
            cost[i, j] = 1.0 - d + CENTROID_WEIGHT * cdist / diag
    return cost


def match_layouts(src, tgt):
    """Optimal source -> target channel matching for a (k, k+1) layout pair."""
    if tgt.count != src.count + 1:
        raise ValueError(f"target count {tgt.count} != source count {src.count} + 1")
    cost = match_cost_matrix(src, tgt)
    assign = hungarian(cost)
    pairs = [(i, int(assign[i])) for i in range(src.count)]
    total = float(sum(cost[i, j] for i, j in pairs))
    unmatched = (set(range(tgt.count)) - {j for _, j in pairs}).pop()
    return MatchResult(assignment=pairs, total_cost=total, unmatched_target=int(unmatched))


def pair_from_match(src, tgt):
    """Build a LayoutPair from two layouts via Hungarian matching."""
    res = match_layouts(src, tgt)
    pair = LayoutPair(
        source=src,
        target=tgt,
        correspondence={i: j for i, j in res.assignment},
        new_channel=res.unmatched_target,
    )
    pair.validate()
    return pair


def trim_layout(layout, target):
    """Remove the (count - target) smallest-area channels.

    Surviving channels are untouched pixel-wise; the result is canonical.
    Equal areas are broken by canonical order (the earlier channel is kept).
    """
    layout = layout.canonicalize()
    if not 1 <= target < layout.count:
        raise ValueError(f"target {target} must satisfy 1 <= target < count {layout.count}")
    order = sorted(range(layout.count), key=lambda k: (-int(layout.areas[k]), k))
    keep = sorted(order[:target])
    return InstanceLayout.from_channels(layout.channels[keep])


def shrink_layout(layout, factor=SHRINK_FACTOR):
    """Scale all channels toward the grid center (nearest neighbor).

    factor 0.92 leaves ~4% padding per side; applied once per insertion
    iteration, so padding accumulates across iterations.
    """
    channels = np.asarray(layout.channels)
    k, h, w = channels.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows = np.floor((np.arange(h) - cy) / factor + cy + 0.5).astype(np.int64)
    cols = np.floor((np.arange(w) - cx) / factor + cx + 0.5).astype(np.int64)
    rv = (rows >= 0) & (rows < h)
    cv = (cols >= 0) & (cols < w)
    out = np.zeros_like(channels)
    rr = rows[rv]
    cc = cols[cv]
    out[np.ix_(np.arange(k), np.nonzero(rv)[0], np.nonzero(cv)[0])] = \
        channels[np.ix_(np.arange(k), rr, cc)]
    return InstanceLayout.from_channels(out)


def binarize_scores(scores, threshold=BINARIZE_THRESHOLD):
    """Threshold CxHxW scores into disjoint channels.

    Contested pixels (above threshold in several channels) go to the channel
    with the larger pre-threshold score.
    """
    scores = np.asarray(scores, dtype=np.float64)
    above = scores > threshold
    winner = np.argmax(scores, axis=0)
    channels = np.zeros_like(scores, dtype=np.uint8)
    any_above = above.any(axis=0)
    rows, cols = np.nonzero(any_above)
    # the argmax winner might itself be below threshold only if no channel is
    # above, which any_above already excludes
    channels[winner[rows, cols], rows, cols] = 1
    return channels


def correct_layout(layout, target, model, max_iters=MAX_INSERT_ITERS):
    """Correct a layout to `target` instances.

    count > target: deterministic trim. count == target: identity. Otherwise
    iterate {shrink 0.92, network forward, binarize, canonicalize} until the
    count is reached (overshoot past the target is trimmed) or the iteration
    cap fires, in which case CorrectionError carries the best attempt.
    """
    if not 1 <= target <= MAX_TARGET:
        raise ValueError(f"target {target} outside [1, {MAX_TARGET}]")
    layout = layout.canonicalize()
    count = count_instances(layout)
    if count < 1:
        raise ValueError("layout has no instances")
    if count > target:
        return trim_layout(layout, target)
    if count == target:
        return layout

    from .relayout_net import forward  # deferred: torch import is heavy

    best = layout
    current = layout
    for iteration in range(1, max_iters + 1):
        current = shrink_layout(current)
        k = count_instances(current)
        if k == 0:
            break
        if k > 9:
            current = trim_layout(current, 9)
            k = 9
        x = np.zeros((9,) + current.channels.shape[1:], dtype=np.float32)
        x[:k] = current.channels[:k]
        # one forward pass adds one instance: read the first k+1 channels
        scores = forward(model, x)[: k + 1]
        channels = binarize_scores(scores)
        current = InstanceLayout.from_channels(channels).canonicalize()
        count = count_instances(current)
        if abs(count - target) <= abs(count_instances(best) - target):
            best = current
        if count == target:
            return current
        if count > target:
            return trim_layout(current, target)
        if count == 0:
            break
    raise CorrectionError(
        f"did not reach target {target} within {max_iters} iterations "
        f"(best achieved: {count_instances(best)})",
        best_layout=best,
        iterations=max_iters,
    )
