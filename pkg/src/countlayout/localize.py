"""Instance localization: aggregated cross-attention -> foreground mask ->
feature clustering -> per-instance layout.

The pipeline is: mean the object-token cross-attention maps, threshold them
with Otsu's method to get a foreground mask, then cluster the self-attention
feature vectors of the foreground pixels with DBSCAN under cosine distance.
Each cluster becomes one instance channel; noise pixels are folded into the
nearest cluster so the channel union always equals the foreground mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

EPS_MIN_DEFAULT = 0.10
EPS_MAX_DEFAULT = 0.20
EPS_STEP = 0.01
EPS_FALLBACK = 0.15
OTSU_BINS = 256


class DegenerateMapError(ValueError):
    """Constant (zero-variance) score map: no threshold separates anything."""


class NoForegroundError(ValueError):
    """Foreground mask is empty; clustering has nothing to work on."""


class NoInstancesError(ValueError):
    """Every epsilon in the sweep labels all points as noise."""


@dataclass
class ForegroundMask:
    grid: np.ndarray      # HxW uint8 in {0,1}
    threshold: float
    coverage: float


@dataclass
class InstanceLayout:
    """Multi-channel binary mask, one channel per object instance.

    `count` is the number of nonempty channels; padded/empty channels are
    tolerated (they show up when layouts come back from fixed-width blobs).
    """

    channels: np.ndarray   # KxHxW uint8 in {0,1}
    count: int
    areas: np.ndarray      # per-channel pixel counts
    centroids: np.ndarray  # per-channel (row, col), NaN for empty channels

    @classmethod
    def from_channels(cls, channels):
        channels = np.asarray(channels)
        if channels.ndim != 3:
            raise ValueError(f"channels must be KxHxW, got shape {channels.shape}")
        channels = (channels > 0).astype(np.uint8)
        areas = channels.sum(axis=(1, 2)).astype(np.int64)
        centroids = np.full((channels.shape[0], 2), np.nan)
        for k in range(channels.shape[0]):
            if areas[k] > 0:
                rows, cols = np.nonzero(channels[k])
                centroids[k] = (rows.mean(), cols.mean())
        return cls(channels=channels, count=int((areas > 0).sum()),
                   areas=areas, centroids=centroids)

    def union(self):
        return (self.channels.sum(axis=0) > 0).astype(np.uint8)

    def is_disjoint(self):
        return bool((self.channels.sum(axis=0) <= 1).all())

    def canonicalize(self):
        """Drop empty channels and order the rest by centroid (row, then col)."""
        order = canonical_order(self.channels)
        return InstanceLayout.from_channels(self.channels[order])


def canonical_order(channels):
    """Indices of nonempty channels sorted by centroid row, then column."""
    channels = np.asarray(channels)
    keys = []
    for k in range(channels.shape[0]):
        rows, cols = np.nonzero(channels[k])
        if rows.size:
            keys.append((rows.mean(), cols.mean(), k))
    keys.sort()
    return [k for _, _, k in keys]


def aggregate_cross_attention(bundle):
    """Mean over the object-token cross maps, then min-max normalized to [0,1]."""
    maps = [bundle.cross_maps[t] for t in bundle.token_indices]
    if not maps:
        raise ValueError("bundle has no object-token cross-attention maps")
    mean = np.mean(np.stack(maps, axis=0), axis=0).astype(np.float64)
    if not np.all(np.isfinite(mean)):
        raise ValueError("cross-attention maps contain non-finite values")
    lo, hi = mean.min(), mean.max()
    if hi > lo:
        mean = (mean - lo) / (hi - lo)
    else:
        mean = np.zeros_like(mean)
    return mean


def otsu_mask(score_map):
    """Threshold a score map by maximizing between-class variance (256 bins).

    Returns a ForegroundMask whose grid is `score_map > threshold`; the
    threshold is placed midway between the two classes so the comparison
    reproduces the histogram split exactly and is invariant under strictly
    increasing affine rescaling of the map.
    """
    values = np.asarray(score_map, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("score map contains non-finite values")
    lo, hi = values.min(), values.max()
    if hi <= lo:
        raise DegenerateMapError("constant score map has no Otsu threshold")

    frac = (values - lo) / (hi - lo)
    bin_idx = np.minimum((frac * OTSU_BINS).astype(np.int64), OTSU_BINS - 1)
    hist = np.bincount(bin_idx.ravel(), minlength=OTSU_BINS).astype(np.float64)
    centers = (np.arange(OTSU_BINS) + 0.5) / OTSU_BINS

    # Between-class variance w0*w1*(mu1-mu0)^2 for every split k (class 0 is
    # bins [0, k), class 1 is bins [k, 256)); argmax takes the first maximum.
    w0 = np.cumsum(hist)[:-1]
    w1 = hist.sum() - w0
    m0 = np.cumsum(hist * centers)[:-1]
    m1 = (hist * centers).sum() - m0
    valid = (w0 > 0) & (w1 > 0)
    score = np.zeros(OTSU_BINS - 1)
    score[valid] = w0[valid] * w1[valid] * (m1[valid] / w1[valid] - m0[valid] / w0[valid]) ** 2
    if not valid.any():
        raise DegenerateMapError("all values fall into a single histogram bin")
    k = int(np.argmax(score)) + 1  # split index into bin space

    low_max = values[bin_idx < k].max()
    high_min = values[bin_idx >= k].min()
    threshold = 0.5 * (low_max + high_min)
    grid = (values > threshold).astype(np.uint8)
    coverage = float(grid.sum()) / grid.size
    return ForegroundMask(grid=grid, threshold=float(threshold), coverage=coverage)


def cosine_distance_matrix(features):
    """Pairwise cosine distances (1 - cos) between rows of `features`."""
    feats = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(feats, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero feature vector has no cosine distance")
    unit = feats / norms[:, None]
    return np.clip(1.0 - unit @ unit.T, 0.0, 2.0)


def dbscan_cosine(features, eps, min_pts, dist=None):
    """DBSCAN under cosine distance, deterministic and order-independent.

    Clusters are the connected components of the eps-graph restricted to
    core points; border points join their nearest core point. Labels are
    renumbered by each cluster's smallest member index so the result does
    not depend on point enumeration order. Returns (labels, core_mask)
    with -1 marking noise.
    """
    if dist is None:
        dist = cosine_distance_matrix(features)
    n = dist.shape[0]
    adj = dist <= eps
    core = adj.sum(axis=1) >= min_pts  # neighborhood includes the point itself

    labels = np.full(n, -1, dtype=np.int64)
    if core.any():
        core_idx = np.nonzero(core)[0]
        sub = adj[np.ix_(core_idx, core_idx)]
        n_comp, comp = connected_components(csr_matrix(sub), directed=False)
        # canonical component ids: ranked by smallest original point index
        first = np.full(n_comp, n, dtype=np.int64)
        for local, c in enumerate(comp):
            first[c] = min(first[c], core_idx[local])
        rank = {c: r for r, c in enumerate(np.argsort(first))}
        for local, c in enumerate(comp):
            labels[core_idx[local]] = rank[c]

        # border points: nearest core neighbor within eps (ties -> lower label)
        border = np.nonzero(~core)[0]
        if border.size:
            d_bc = dist[np.ix_(border, core_idx)]
            within = d_bc <= eps
            for row, p in enumerate(border):
                if not within[row].any():
                    continue
                cand = np.nonzero(within[row])[0]
                best = min(cand, key=lambda j: (d_bc[row, j], labels[core_idx[j]]))
                labels[p] = labels[core_idx[best]]
    return labels, core


def sweep_epsilon(dist, min_pts, eps_min=EPS_MIN_DEFAULT, eps_max=EPS_MAX_DEFAULT):
    """Dynamic epsilon rule: scan [eps_min, eps_max] in 0.01 steps and take the
    smallest eps whose (nonzero) cluster count repeats for three consecutive
    steps; fall back to 0.15, then to the smallest eps producing any cluster.
    """
    eps_values = np.round(np.arange(eps_min, eps_max + EPS_STEP / 2, EPS_STEP), 10)
    counts = []
    for eps in eps_values:
        labels, _ = dbscan_cosine(None, eps, min_pts, dist=dist)
        counts.append(int(labels.max()) + 1 if labels.max() >= 0 else 0)
    for i in range(len(counts) - 2):
        if counts[i] >= 1 and counts[i] == counts[i + 1] == counts[i + 2]:
            return float(eps_values[i]), counts
    nonzero = [i for i, c in enumerate(counts) if c >= 1]
    if not nonzero:
        raise NoInstancesError("all points labeled noise at every epsilon in the sweep")
    fallback = EPS_FALLBACK if min(eps_values) <= EPS_FALLBACK <= max(eps_values) else None
    if fallback is not None:
        i_fb = int(np.argmin(np.abs(eps_values - fallback)))
        if counts[i_fb] >= 1:
            return float(eps_values[i_fb]), counts
    return float(eps_values[nonzero[0]]), counts


def cluster_instances(bundle, fg, eps_min=EPS_MIN_DEFAULT, eps_max=EPS_MAX_DEFAULT):
    """Cluster foreground self-attention features into an InstanceLayout.

    minPts = max(4, round(0.02 * foreground pixels)). Noise points are
    assigned to the nearest cluster by cosine distance to the cluster's mean
    feature vector, so the union of channels equals the foreground grid.
    """
    grid = np.asarray(fg.grid)
    rows, cols = np.nonzero(grid)
    n = rows.size
    if n == 0:
        raise NoForegroundError("foreground mask is empty")
    feats = np.asarray(bundle.self_features, dtype=np.float64)[rows, cols]
    min_pts = max(4, int(round(0.02 * n)))

    dist = cosine_distance_matrix(feats)
    eps, _ = sweep_epsilon(dist, min_pts, eps_min=eps_min, eps_max=eps_max)
    labels, _ = dbscan_cosine(None, eps, min_pts, dist=dist)
    n_clusters = int(labels.max()) + 1
    if n_clusters == 0:
        raise NoInstancesError("chosen epsilon produced no clusters")

    noise = np.nonzero(labels < 0)[0]
    if noise.size:
        unit = feats / np.linalg.norm(feats, axis=1)[:, None]
        cents = np.stack([unit[labels == c].mean(axis=0) for c in range(n_clusters)])
        cents /= np.linalg.norm(cents, axis=1)[:, None]
        d = 1.0 - unit[noise] @ cents.T
        labels[noise] = np.argmin(d, axis=1)

    h, w = grid.shape
    channels = np.zeros((n_clusters, h, w), dtype=np.uint8)
    channels[labels, rows, cols] = 1
    layout = InstanceLayout.from_channels(channels).canonicalize()
    return layout


def count_instances(layout):
    """Number of nonempty channels in a layout."""
    return int((np.asarray(layout.areas) > 0).sum())


def components_layout(mask):
    """InstanceLayout whose channels are the 8-connected components of a mask.

    The structural notion of "one instance" for binary masks; used to verify
    that corrected layouts decompose into spatially separate instances.
    """
    from scipy.ndimage import label

    mask = (np.asarray(mask) > 0).astype(np.uint8)
    labeled, n = label(mask, structure=np.ones((3, 3), dtype=np.int64))
    if n == 0:
        return InstanceLayout.from_channels(np.zeros((0,) + mask.shape, dtype=np.uint8))
    channels = np.stack([(labeled == i + 1).astype(np.uint8) for i in range(n)])
    return InstanceLayout.from_channels(channels).canonicalize()


def localize_bundle(bundle, eps_min=EPS_MIN_DEFAULT, eps_max=EPS_MAX_DEFAULT):
    """Full pipeline: aggregate -> Otsu -> cluster. Returns (layout, fg)."""
    agg = aggregate_cross_attention(bundle)
    fg = otsu_mask(agg)
    layout = cluster_instances(bundle, fg, eps_min=eps_min, eps_max=eps_max)
    return layout, fg
