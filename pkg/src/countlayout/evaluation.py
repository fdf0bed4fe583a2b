"""Benchmark harness: box extraction, mask adherence metrics, count-accuracy
tallies, and the 200-prompt counting benchmark recipe.

The detector stand-in is a tight bounding box per layout channel; externally
produced detections can be supplied as a text file with one `r0 c0 r1 c1
label` line per box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .localize import count_instances

COVERAGE_THRESHOLD = 0.6

BENCH_OBJECTS = [
    "car", "airplane", "bird", "cat", "dog", "horse", "sheep", "cow",
    "elephant", "bear", "backpack", "tie", "sports ball", "baseball glove",
    "cup", "bowl", "apple", "donut", "cell phone", "clock",
]
BENCH_COUNTS = [("two", 2, 34), ("three", 3, 34), ("four", 4, 33),
                ("five", 5, 33), ("seven", 7, 33), ("ten", 10, 33)]
BENCH_SCENES = ["on the grass", "on the road", "on the ground"]


@dataclass
class BoxSet:
    """Half-open boxes (row0, col0, row1, col1) with row1 > row0, col1 > col0."""

    boxes: list

    def validate(self, grid_hw=None):
        for b in self.boxes:
            r0, c0, r1, c1 = b
            if r1 <= r0 or c1 <= c0:
                raise ValueError(f"degenerate box {b}")
            if grid_hw is not None:
                h, w = grid_hw
                if r0 < 0 or c0 < 0 or r1 > h or c1 > w:
                    raise ValueError(f"box {b} outside {h}x{w} grid")

    def union_mask(self, grid_hw):
        out = np.zeros(grid_hw, dtype=np.uint8)
        for r0, c0, r1, c1 in self.boxes:
            out[r0:r1, c0:c1] = 1
        return out


@dataclass
class MaskMetrics:
    precision: float
    recall: float
    iou: float
    empty_boxes: bool = False


@dataclass
class CountReport:
    per_prompt: list                  # (target, detected, correct)
    accuracy: float
    confusion: np.ndarray = field(default=None)  # 10x10, target vs detected


def boxes_from_layout(layout):
    """Tight bounding box per nonempty channel."""
    boxes = []
    for k in range(layout.channels.shape[0]):
        rows, cols = np.nonzero(layout.channels[k])
        if rows.size == 0:
            continue
        boxes.append((int(rows.min()), int(cols.min()),
                      int(rows.max()) + 1, int(cols.max()) + 1))
    return BoxSet(boxes=boxes)


def mask_metrics(boxes, mask):
    """Precision / recall / IoU of a box set against a binary mask.

    Per-box score is |box n mask| / |box| (coverage); a box counts toward
    precision when coverage > 0.6. Recall is the mask fraction covered by the
    box union; IoU compares the box union with the mask. An empty mask is an
    error; an empty box set reports precision 0 with `empty_boxes` set.
    """
    m = (np.asarray(mask) > 0)
    if m.sum() == 0:
        raise ValueError("recall is undefined for an empty mask")
    boxes.validate(grid_hw=m.shape)
    if not boxes.boxes:
        return MaskMetrics(precision=0.0, recall=0.0, iou=0.0, empty_boxes=True)
    hits = 0
    for r0, c0, r1, c1 in boxes.boxes:
        area = (r1 - r0) * (c1 - c0)
        inside = int(m[r0:r1, c0:c1].sum())
        if inside / area > COVERAGE_THRESHOLD:
            hits += 1
    union = boxes.union_mask(m.shape) > 0
    inter = np.logical_and(union, m).sum()
    return MaskMetrics(
        precision=hits / len(boxes.boxes),
        recall=float(inter) / float(m.sum()),
        iou=float(inter) / float(np.logical_or(union, m).sum()),
    )


def count_accuracy(reports):
    """Tally detected vs target counts into accuracy and a 10x10 confusion
    matrix (rows: target 1..10; columns: detected clamped into [1, 10])."""
    per_prompt = []
    confusion = np.zeros((10, 10), dtype=np.int64)
    for target, layout in reports:
        if not 1 <= target <= 10:
            raise ValueError(f"target {target} outside [1, 10]")
        detected = count_instances(layout)
        per_prompt.append((target, detected, detected == target))
        confusion[target - 1, int(np.clip(detected, 1, 10)) - 1] += 1
    accuracy = float(np.mean([c for _, _, c in per_prompt])) if per_prompt else 0.0
    return CountReport(per_prompt=per_prompt, accuracy=accuracy, confusion=confusion)


def cococount_prompts(seed=0):
    """The 200-prompt benchmark: 'a photo of {number} {object}' over 20 object
    classes, counts two/three (34 each) and four/five/seven/ten (33 each),
    with one of three scene suffixes on exactly half the prompts."""
    rng = np.random.default_rng(seed)
    prompts = []
    for word, _, n in BENCH_COUNTS:
        for obj_idx in rng.integers(0, len(BENCH_OBJECTS), size=n):
            prompts.append(f"a photo of {word} {BENCH_OBJECTS[obj_idx]}")
    with_scene = set(rng.permutation(len(prompts))[: len(prompts) // 2])
    scenes = rng.integers(0, len(BENCH_SCENES), size=len(prompts))
    return [
        p + f" {BENCH_SCENES[scenes[i]]}" if i in with_scene else p
        for i, p in enumerate(prompts)
    ]


def prompt_targets(prompts):
    """Recover the requested count from each benchmark prompt."""
    words = {w: v for w, v, _ in BENCH_COUNTS}
    targets = []
    for p in prompts:
        parts = p.split()
        if len(parts) < 4 or parts[3] not in words:
            raise ValueError(f"not a benchmark prompt: {p!r}")
        targets.append(words[parts[3]])
    return targets


def parse_box_file(path):
    """External detections: one 'r0 c0 r1 c1 label' line per box."""
    boxes = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 4:
                raise ValueError(f"{path}:{lineno}: need 'r0 c0 r1 c1 [label]'")
            boxes.append(tuple(int(v) for v in parts[:4]))
    bs = BoxSet(boxes=boxes)
    bs.validate()
    return bs
