"""Synthetic (k, k+1) layout corpus and synthetic attention bundles.

Scenes place non-overlapping instances (min 1 px gap) in one of five
patterns on the canonical 32x32 grid. A pair's target extends the source
pattern by one instance in the pattern's natural growth spot (rows append at
the end, grids fill the next cell, clusters grow at the periphery), so the
composition is preserved and the channel correspondence is known exactly.

`make_bundle` fabricates attention tensors for a layout: per-instance unit
feature directions (mutually orthogonal) with small noise, a noisy
background direction, and a softened-indicator cross-attention map. Emitted
pairs are verified by running the localization pipeline on such bundles.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation, gaussian_filter

from . import tensor_io
from .localize import InstanceLayout, canonical_order, count_instances, localize_bundle
from .relayout import LayoutPair
from .tensor_io import AttentionBundle, CANONICAL_HW

PATTERNS = ("row", "grid", "arc", "cluster", "scatter")
SHAPES = ("disc", "square", "blob")
GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
MAX_DIRECTION_COUNT = 10
FEATURE_NOISE = 0.1          # scaled by 1/sqrt(D); keeps in-instance cosine dist <= 0.05
BACKGROUND_NOISE = 1.0       # large: background pixels must not form their own cluster
CROSS_NOISE_AMP = 0.05


class InfeasibleSpecError(ValueError):
    """Pattern cannot fit count+1 instances at the requested size."""


@dataclass
class SceneSpec:
    pattern: str
    count: int
    shape: str
    size_px: int
    jitter: float
    seed: int

    def validate(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}")
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if not 1 <= self.count <= 9:
            raise ValueError(f"count {self.count} outside [1, 9]")
        if self.size_px < 2:
            raise ValueError(f"size_px {self.size_px} too small")
        if self.jitter < 0:
            raise ValueError("jitter must be nonnegative")


def _stamp(shape, size, rng):
    """Small binary mask for one instance."""
    if shape == "square":
        return np.ones((size, size), dtype=np.uint8)
    if shape == "disc":
        c = (size - 1) / 2.0
        yy, xx = np.mgrid[0:size, 0:size]
        return ((yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0) ** 2).astype(np.uint8)
    # blob: disc warped by low-frequency radial noise
    box = int(math.ceil(size * 1.3)) + 1
    c = (box - 1) / 2.0
    yy, xx = np.mgrid[0:box, 0:box]
    dy, dx = yy - c, xx - c
    theta = np.arctan2(dy, dx)
    p1, p2 = rng.uniform(0, 2 * math.pi, 2)
    r = (size / 2.0) * (1.0 + 0.22 * np.sin(2 * theta + p1) + 0.14 * np.sin(3 * theta + p2))
    mask = (np.hypot(dy, dx) <= np.maximum(r, 1.0)).astype(np.uint8)
    return mask


def _min_separation(shape, size, jitter):
    # center-to-center spacing that keeps a >=1 px gap after jitter/rounding;
    # jitter moves each instance by at most floor(jitter/2) whole pixels
    if shape == "square":
        base = math.sqrt(2.0) * (size + 1)
    elif shape == "blob":
        base = 1.3 * size + 1
    else:
        base = size + 1
    return base + 1.0 + 2.0 * math.floor(jitter / 2.0)


def _slot_centers(pattern, n, minsep, extent, rng):
    """n slot centers (floats) for a pattern; slot n-1 is the growth slot."""
    margin = extent + 1.0
    lo, hi = margin, CANONICAL_HW - 1 - margin
    usable = hi - lo
    if usable <= 0:
        raise InfeasibleSpecError(f"instance extent {extent} leaves no room")

    if pattern == "row":
        if n == 1:
            return [(rng.uniform(lo, hi), rng.uniform(lo, hi))]
        # lines may run at any angle; the diagonal buys extra span for long rows
        def _max_len(theta):
            dy, dx = abs(math.sin(theta)), abs(math.cos(theta))
            return dy, dx, min(usable / dy if dy > 1e-9 else float("inf"),
                               usable / dx if dx > 1e-9 else float("inf"))

        theta = rng.uniform(0, math.pi)
        dy, dx, max_len = _max_len(theta)
        if (n - 1) * minsep > max_len:
            theta = math.pi / 4
            dy, dx, max_len = _max_len(theta)
        if (n - 1) * minsep > max_len:
            raise InfeasibleSpecError(f"row of {n} at spacing {minsep:.1f} exceeds grid")
        step = rng.uniform(minsep, max_len / (n - 1))
        span_y, span_x = (n - 1) * step * dy, (n - 1) * step * dx
        y0 = lo + rng.uniform(0, usable - span_y)
        x0 = lo + rng.uniform(0, usable - span_x)
        # growth end must be identifiable from geometry alone: rows grow at
        # the max-x end; near-vertical rows always grow downward
        sy = 1.0 if (dx < 0.3 or rng.random() < 0.5) else -1.0
        if sy < 0:
            y0 += span_y
        return [(y0 + sy * i * step * dy, x0 + i * step * dx) for i in range(n)]

    if pattern == "grid":
        cell = minsep
        ncols = int(usable // cell) + 1
        if ncols < 1 or n > ncols * ncols:
            raise InfeasibleSpecError(
                f"grid capacity {max(ncols, 0) ** 2} < {n} at cell {cell:.1f}"
            )
        nrows = int(math.ceil(n / ncols))
        y0 = lo + rng.uniform(0, usable - (nrows - 1) * cell)
        x0 = lo + rng.uniform(0, usable - (min(n, ncols) - 1) * cell)
        return [(y0 + (i // ncols) * cell, x0 + (i % ncols) * cell) for i in range(n)]

    if pattern == "arc":
        r_max = (CANONICAL_HW - 1) / 2.0 - margin
        if r_max < minsep / 2.0:
            raise InfeasibleSpecError("arc radius too small for spacing")
        radius = rng.uniform(max(0.6 * r_max, minsep / 2.0), r_max)
        dtheta = 2.0 * math.asin(min(minsep / (2.0 * radius), 1.0))
        if n > 1 and (n - 1) * dtheta > 2 * math.pi * 0.83:
            raise InfeasibleSpecError(f"arc of {n} at spacing {minsep:.1f} exceeds the circle")
        theta0 = rng.uniform(0, 2 * math.pi)
        cy = cx = (CANONICAL_HW - 1) / 2.0
        return [
            (cy + radius * math.sin(theta0 + i * dtheta),
             cx + radius * math.cos(theta0 + i * dtheta))
            for i in range(n)
        ]

    if pattern == "cluster":
        # sunflower spiral: radius ~ sqrt(i), so the growth slot is peripheral
        a = minsep / 2.2
        theta0 = rng.uniform(0, 2 * math.pi)
        for _ in range(30):
            pts = [
                ((a * math.sqrt(i)) * math.sin(theta0 + i * GOLDEN_ANGLE),
                 (a * math.sqrt(i)) * math.cos(theta0 + i * GOLDEN_ANGLE))
                for i in range(n)
            ]
            d = _min_pairwise(pts)
            if d >= minsep or n == 1:
                break
            a *= 1.06
        else:
            raise InfeasibleSpecError("cluster spiral could not reach the spacing")
        r_needed = max(math.hypot(*p) for p in pts)
        r_avail = (CANONICAL_HW - 1) / 2.0 - margin
        if r_needed > r_avail:
            raise InfeasibleSpecError(f"cluster of {n} needs radius {r_needed:.1f} > {r_avail:.1f}")
        cy = cx = (CANONICAL_HW - 1) / 2.0
        shift = r_avail - r_needed
        cy += rng.uniform(-shift, shift) * 0.5
        cx += rng.uniform(-shift, shift) * 0.5
        return [(cy + p[0], cx + p[1]) for p in pts]

    if pattern == "scatter":
        pts = []
        for _ in range(max(n - 1, 1)):
            for _ in range(300):
                cand = (rng.uniform(lo, hi), rng.uniform(lo, hi))
                if all(math.hypot(cand[0] - p[0], cand[1] - p[1]) >= minsep for p in pts):
                    pts.append(cand)
                    break
            else:
                raise InfeasibleSpecError(f"could not scatter {n} instances at spacing {minsep:.1f}")
        if n > 1:
            # growth slot: the feasible spot nearest the grid center, so the
            # insertion position is a deterministic function of the layout
            c = (CANONICAL_HW - 1) / 2.0
            best = None
            for gy in np.arange(lo, hi + 1e-9, 0.5):
                for gx in np.arange(lo, hi + 1e-9, 0.5):
                    if all(math.hypot(gy - p[0], gx - p[1]) >= minsep for p in pts):
                        d = math.hypot(gy - c, gx - c)
                        if best is None or d < best[0]:
                            best = (d, (gy, gx))
            if best is None:
                raise InfeasibleSpecError(
                    f"no free spot left for the scatter growth slot at spacing {minsep:.1f}"
                )
            pts.append(best[1])
        return pts

    raise ValueError(f"unknown pattern {pattern!r}")


def _min_pairwise(pts):
    if len(pts) < 2:
        return float("inf")
    return min(
        math.hypot(a[0] - b[0], a[1] - b[1])
        for i, a in enumerate(pts) for b in pts[i + 1:]
    )


def _place(stamp_mask, center):
    """Stamp onto the canonical grid at an integer center; None if clipped."""
    h = w = CANONICAL_HW
    sh, sw = stamp_mask.shape
    top = int(round(center[0])) - sh // 2
    left = int(round(center[1])) - sw // 2
    if top < 0 or left < 0 or top + sh > h or left + sw > w:
        return None
    grid = np.zeros((h, w), dtype=np.uint8)
    grid[top:top + sh, left:left + sw] = stamp_mask
    return grid


def _gap_ok(masks):
    """Every pair of masks separated by at least one empty pixel (8-conn)."""
    dilated = [binary_dilation(m, np.ones((3, 3), dtype=bool)) for m in masks]
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            if np.logical_and(dilated[i], masks[j]).any():
                return False
    return True


def _scene_masks(spec, n_instances):
    """Slot centers, per-slot stamps, and the scene rng (growth slot last)."""
    rng = np.random.default_rng([spec.seed, 17])
    stamps = [
        _stamp(spec.shape, spec.size_px, np.random.default_rng([spec.seed, 101, i]))
        for i in range(n_instances)
    ]
    extent = max(s.shape[0] for s in stamps) / 2.0
    minsep = _min_separation(spec.shape, spec.size_px, spec.jitter)
    slots = _slot_centers(spec.pattern, n_instances, minsep, extent, rng)
    return slots, stamps, rng


def _jitter_offsets(rng, jitter, n):
    half = int(math.floor(jitter / 2.0))
    if half == 0:
        return np.zeros((n, 2), dtype=np.int64)
    return rng.integers(-half, half + 1, size=(n, 2))


def generate_layout(spec, count_override=None):
    """Single layout with spec.count instances (canonical channel order).

    count_override allows up to 10 instances (a pair's target count) without
    going through pair generation.
    """
    n = spec.count if count_override is None else count_override
    if not 1 <= n <= 10:
        raise ValueError(f"layout count {n} outside [1, 10]")
    slots, stamps, rng = _scene_masks(spec, n)
    offsets = _jitter_offsets(rng, spec.jitter, n)
    for _ in range(20):
        masks = []
        ok = True
        for i in range(n):
            m = _place(stamps[i], (slots[i][0] + offsets[i][0], slots[i][1] + offsets[i][1]))
            if m is None or not m.any():
                ok = False
                break
            masks.append(m)
        if ok and _gap_ok(masks):
            order = canonical_order(np.stack(masks))
            return InstanceLayout.from_channels(np.stack([masks[i] for i in order]))
        offsets = _jitter_offsets(rng, spec.jitter, n)
    raise InfeasibleSpecError(f"could not rasterize {n} instances without contact")


def generate_pair(spec):
    """LayoutPair whose target extends the source pattern by one instance.

    Matched instances shift by at most spec.jitter pixels; the inserted
    instance occupies the pattern's growth slot. Correspondence and
    new_channel index the canonicalized channel orders.
    """
    spec.validate()
    n = spec.count
    slots, stamps, rng = _scene_masks(spec, n + 1)

    for _ in range(20):
        src_off = _jitter_offsets(rng, spec.jitter, n)
        tgt_off = _jitter_offsets(rng, spec.jitter, n + 1)
        src_masks, tgt_masks = [], []
        ok = True
        for i in range(n + 1):
            if i < n:
                m = _place(stamps[i], (slots[i][0] + src_off[i][0], slots[i][1] + src_off[i][1]))
                if m is None or not m.any():
                    ok = False
                    break
                src_masks.append(m)
            m = _place(stamps[i], (slots[i][0] + tgt_off[i][0], slots[i][1] + tgt_off[i][1]))
            if m is None or not m.any():
                ok = False
                break
            tgt_masks.append(m)
        if ok and _gap_ok(src_masks) and _gap_ok(tgt_masks):
            break
    else:
        raise InfeasibleSpecError(
            f"could not rasterize a {spec.pattern} pair of {n}+1 without contact"
        )

    src_order = canonical_order(np.stack(src_masks))
    tgt_order = canonical_order(np.stack(tgt_masks))
    tgt_pos = {slot: ch for ch, slot in enumerate(tgt_order)}
    pair = LayoutPair(
        source=InstanceLayout.from_channels(np.stack([src_masks[i] for i in src_order])),
        target=InstanceLayout.from_channels(np.stack([tgt_masks[i] for i in tgt_order])),
        correspondence={s: tgt_pos[slot] for s, slot in enumerate(src_order)},
        new_channel=tgt_pos[n],
    )
    pair.validate()
    return pair


def make_bundle(layout, feature_dim=16, seed=0, noise_amp=CROSS_NOISE_AMP,
                smooth_sigma=0.8):
    """Synthetic AttentionBundle for a layout.

    Instance pixels get distinct orthonormal unit feature directions plus
    small noise (in-instance cosine distance <= 0.05, cross-instance >= 0.5);
    background pixels get a separate direction with much larger noise so they
    never form a cluster of their own. The cross-attention map is a softened
    indicator of the layout union plus uniform noise of the given amplitude.
    """
    k = count_instances(layout)
    if k == 0:
        raise ValueError("empty layout")
    if feature_dim < 3:
        raise ValueError(f"feature_dim {feature_dim} < 3")
    cap = min(MAX_DIRECTION_COUNT, feature_dim - 1)
    if k > cap:
        raise ValueError(f"{k} instances exceed the {cap} representable directions")

    rng = np.random.default_rng(seed)
    h = w = CANONICAL_HW
    basis, _ = np.linalg.qr(rng.standard_normal((feature_dim, k + 1)))
    basis = basis.T  # rows: k instance directions then the background direction

    label = np.full((h, w), k, dtype=np.int64)
    nonempty = [i for i in range(layout.channels.shape[0]) if layout.areas[i] > 0]
    for ch, i in enumerate(nonempty):
        label[layout.channels[i] > 0] = ch

    feats = basis[label]
    sigma = np.where(label == k, BACKGROUND_NOISE, FEATURE_NOISE) / math.sqrt(feature_dim)
    feats = feats + rng.standard_normal((h, w, feature_dim)) * sigma[:, :, None]
    feats /= np.linalg.norm(feats, axis=2, keepdims=True)

    union = layout.union().astype(np.float64)
    smooth = gaussian_filter(union, sigma=smooth_sigma)
    if smooth.max() > 0:
        smooth = smooth / smooth.max()
    cross = 0.55 * union + 0.45 * smooth
    if noise_amp > 0:
        cross = cross + rng.uniform(-noise_amp, noise_amp, size=(h, w))
    cross = np.clip(cross, 0.0, 1.0)

    return AttentionBundle(
        prompt=f"synthetic layout with {k} instances",
        token_indices=[0],
        timestep=500,
        layer_id="up_52",
        self_features=feats.astype(np.float32),
        cross_maps={0: cross.astype(np.float32)},
        source_resolution=(h, w),
    )


def localization_count(layout, seed=0, feature_dim=16):
    """Instance count of an arbitrary layout as seen by the full pipeline.

    The layout union is split into 8-connected components (the structural
    notion of an instance), a synthetic bundle is built from them, and the
    localization pipeline reports the count; -1 when the union does not
    decompose into a representable number of instances. A layout only passes
    for its nominal count when its channels really are spatially separate
    instances.
    """
    from .localize import components_layout

    comp = components_layout(layout.union())
    cap = min(MAX_DIRECTION_COUNT, feature_dim - 1)
    if comp.count == 0 or comp.count > cap:
        return -1
    bundle = make_bundle(comp, feature_dim=feature_dim, seed=seed)
    try:
        found, _ = localize_bundle(bundle)
    except ValueError:
        return -1
    return count_instances(found)


def verify_pair(pair, seed=0, feature_dim=16):
    """The emission filter: localization must recover k and k+1 exactly."""
    for layout, expected in ((pair.source, pair.source.count),
                             (pair.target, pair.target.count)):
        bundle = make_bundle(layout, feature_dim=feature_dim, seed=seed)
        try:
            found, _ = localize_bundle(bundle)
        except ValueError:
            return False
        if count_instances(found) != expected:
            return False
    return True


def _spec_seed(*parts):
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _rough_max_size(pattern, shape, n_slots):
    """Largest size that plausibly fits n_slots; generation re-checks exactly."""
    for size in range(8, 1, -1):
        minsep = _min_separation(shape, size, 0.0)
        usable = CANONICAL_HW - 2 - 1.4 * size
        ok = {
            "row": (n_slots - 1) * minsep <= usable * math.sqrt(2.0),
            "grid": n_slots <= (int(usable // minsep) + 1) ** 2,
            "arc": minsep <= 2 * (14.5 - size) and
                   (n_slots - 1) * 2 * math.asin(min(minsep / (2 * (14.5 - size)), 1.0)) < 5.2,
            "cluster": minsep / 2.0 * math.sqrt(n_slots - 1) <= 14 - size,
            "scatter": n_slots * minsep ** 2 * 1.30 <= usable ** 2,
        }[pattern]
        if ok:
            return size
    return 2


def sample_spec(rng, seed, count):
    """Draw a random SceneSpec for a fixed count. Feasibility is re-checked
    exactly by generation; infeasible draws are retried by the caller."""
    pattern = PATTERNS[rng.integers(len(PATTERNS))]
    shape = SHAPES[rng.integers(len(SHAPES))]
    max_size = _rough_max_size(pattern, shape, count + 1)
    lo_size = 3 if max_size >= 3 else 2  # prefer instances the net can paint
    size = int(rng.integers(lo_size, max_size + 1)) if max_size > lo_size else lo_size
    jitter = 0.0 if rng.random() < 0.4 else 2.0
    if _rough_max_size(pattern, shape, count + 1) <= size + 1:
        jitter = 0.0  # tight fits cannot afford jitter spacing
    return SceneSpec(pattern=pattern, count=count, shape=shape, size_px=size,
                     jitter=jitter, seed=seed)


def generate_dataset(n_pairs, seed, count_range=(1, 9), verify=True,
                     max_attempts=80):
    """Deterministic list of verified LayoutPairs.

    Each pair derives its own seed from (seed, index, attempt), so failures
    of one pair never influence another and two runs are bit-identical.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    lo, hi = count_range
    pairs = []
    for i in range(n_pairs):
        count = lo + i % (hi - lo + 1)  # exactly uniform over the count range
        for attempt in range(max_attempts):
            rng = np.random.default_rng([seed, i, attempt])
            spec = sample_spec(rng, _spec_seed(seed, i, attempt), count)
            try:
                pair = generate_pair(spec)
            except InfeasibleSpecError:
                continue
            if verify and not verify_pair(pair, seed=_spec_seed(seed, i, attempt, 7)):
                continue
            pairs.append(pair)
            break
        else:
            raise RuntimeError(f"pair {i}: no verified pair in {max_attempts} attempts")
    return pairs


def sample_layout(count, seed, max_attempts=80):
    """Random verified-shape single layout with exactly `count` instances."""
    if not 1 <= count <= 10:
        raise ValueError(f"count {count} outside [1, 10]")
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, count, attempt])
        spec = sample_spec(rng, _spec_seed(seed, count, attempt), min(count, 9))
        try:
            return generate_layout(spec, count_override=count)
        except InfeasibleSpecError:
            continue
    raise RuntimeError(f"no feasible layout of {count} instances in {max_attempts} attempts")


def save_pair(pair_dir, pair, spec=None):
    os.makedirs(pair_dir, exist_ok=True)
    tensor_io.save_layout(os.path.join(pair_dir, "source"), pair.source)
    tensor_io.save_layout(os.path.join(pair_dir, "target"), pair.target)
    corr = ",".join(f"{s}:{t}" for s, t in sorted(pair.correspondence.items()))
    lines = [
        "format: countlayout-pair/1",
        f"correspondence: {corr}",
        f"new_channel: {pair.new_channel}",
    ]
    if spec is not None:
        lines += [
            f"pattern: {spec.pattern}",
            f"count: {spec.count}",
            f"shape: {spec.shape}",
            f"size_px: {spec.size_px}",
            f"jitter: {spec.jitter}",
            f"seed: {spec.seed}",
        ]
    with open(os.path.join(pair_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_pair(pair_dir):
    kv = dict(tensor_io._parse_kv_lines(os.path.join(pair_dir, "manifest.txt")))
    if kv.get("format") != "countlayout-pair/1":
        raise tensor_io.ManifestError(f"{pair_dir}: not a pair manifest")
    corr = {}
    if kv.get("correspondence"):
        for item in kv["correspondence"].split(","):
            s, t = item.split(":")
            corr[int(s)] = int(t)
    pair = LayoutPair(
        source=tensor_io.load_layout(os.path.join(pair_dir, "source")),
        target=tensor_io.load_layout(os.path.join(pair_dir, "target")),
        correspondence=corr,
        new_channel=int(kv["new_channel"]),
    )
    pair.validate()
    return pair


def build_dataset(n_pairs, seed, out_dir, count_range=(1, 9), verify=True):
    """Generate and write a dataset directory: out/pair_%06d/{source,target,manifest}."""
    pairs = generate_dataset(n_pairs, seed, count_range=count_range, verify=verify)
    os.makedirs(out_dir, exist_ok=True)
    for i, pair in enumerate(pairs):
        save_pair(os.path.join(out_dir, f"pair_{i:06d}"), pair)
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("format: countlayout-dataset/1\n"
                 f"n_pairs: {n_pairs}\nseed: {seed}\n")
    return out_dir


def load_dataset(root):
    names = sorted(d for d in os.listdir(root) if d.startswith("pair_"))
    if not names:
        raise FileNotFoundError(f"no pair_* directories under {root}")
    return [load_pair(os.path.join(root, d)) for d in names]
