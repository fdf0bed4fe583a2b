"""Layout-guided generation losses and a surrogate optimization loop.

Two mechanisms: a foreground-weighted binary cross-entropy between
cross-attention scores and the layout mask (weight 10 on mask pixels), and
self-attention masking that zeroes background-row -> foreground-column
entries. The surrogate replaces a denoiser with a learnable per-pixel logit
field so both mechanisms can be exercised and measured without a diffusion
backbone; "timestep" maps linearly from 1000 down to 0 over the optimization
steps so the schedule constants keep their meaning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_io
from .localize import DegenerateMapError, ForegroundMask, otsu_mask

CLAMP_EPS = 1e-7
DEFAULT_FG_WEIGHT = 10.0


class DivergenceError(RuntimeError):
    """Surrogate optimization produced non-finite values."""


@dataclass
class GuidanceConfig:
    fg_weight: float = DEFAULT_FG_WEIGHT
    loss_t_range: tuple = (1000, 500)     # (upper, lower), inclusive
    sa_mask_t_range: tuple = (1000, 900)
    sa_mask_layers: tuple = ("decoder",)
    opt_steps: int = 500
    step_size: float = 0.5

    def validate(self):
        for upper, lower in (self.loss_t_range, self.sa_mask_t_range):
            if not (0 <= lower <= upper <= 1000):
                raise ValueError(f"bad timestep range ({upper}, {lower})")
        if self.opt_steps < 0:
            raise ValueError("opt_steps must be >= 0")


@dataclass
class SelfAttentionMap:
    scores: np.ndarray  # NxN, N = H*W pixels, row-major pixel order
    layer: str
    timestep: int


def layout_loss(cross, mask, fg_weight=DEFAULT_FG_WEIGHT):
    """Weighted BCE: -sum_i w_i (m_i log c_i + (1-m_i) log(1-c_i)).

    w_i = fg_weight on mask pixels, 1 elsewhere. Scores are clamped to
    [1e-7, 1 - 1e-7] before the logs.
    """
    c = np.asarray(cross, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if c.shape != m.shape:
        raise ValueError(f"shape mismatch: {c.shape} vs {m.shape}")
    c = np.clip(c, CLAMP_EPS, 1.0 - CLAMP_EPS)
    w = np.where(m > 0, fg_weight, 1.0)
    return float(-(w * (m * np.log(c) + (1.0 - m) * np.log(1.0 - c))).sum())


def layout_loss_grad(cross, mask, fg_weight=DEFAULT_FG_WEIGHT):
    """d(layout_loss)/dc, valid where the clamp is inactive."""
    c = np.asarray(cross, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    c = np.clip(c, CLAMP_EPS, 1.0 - CLAMP_EPS)
    w = np.where(m > 0, fg_weight, 1.0)
    return -(w * (m / c - (1.0 - m) / (1.0 - c)))


def mask_self_attention(sa, fg):
    """Zero entries whose row pixel is background and column pixel foreground.

    Everything else is copied bit-identically; applying the mask twice is a
    no-op.
    """
    f = np.asarray(fg.grid).reshape(-1).astype(bool)
    n = f.size
    if sa.scores.shape != (n, n):
        raise ValueError(f"self-attention {sa.scores.shape} vs {n} foreground pixels")
    scores = sa.scores.copy()
    scores[np.ix_(~f, f)] = 0
    return SelfAttentionMap(scores=scores, layer=sa.layer, timestep=sa.timestep)


@dataclass
class GuidanceResult:
    cross_map: np.ndarray
    sa_map: SelfAttentionMap
    loss_trace: np.ndarray
    iou: float
    fg_min_trace: np.ndarray  # per-recorded-step minimum score over mask pixels
    mask: np.ndarray


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _step_timestep(step, opt_steps):
    if opt_steps <= 0:
        return 1000
    return int(round(1000.0 * (1.0 - step / opt_steps)))


def guide_surrogate(fg_layout, cfg, seed=0):
    """Optimize a per-pixel logit field against the layout union.

    The cross map is the sigmoid of the logits; while the mapped timestep is
    inside cfg.loss_t_range, plain gradient descent on layout_loss runs with
    cfg.step_size. While inside cfg.sa_mask_t_range, self-attention masking
    is applied to the surrogate attention map. Reports the IoU between the
    Otsu-binarized final map and the layout union.
    """
    cfg.validate()
    mask = fg_layout.union().astype(np.float64)
    if mask.sum() == 0:
        raise ValueError("empty layout")
    h, w = mask.shape
    n = h * w
    rng = np.random.default_rng(seed)
    z = rng.normal(0.0, 0.1, size=(h, w))
    sa = SelfAttentionMap(
        scores=rng.uniform(0.0, 1.0, size=(n, n)).astype(np.float32),
        layer=cfg.sa_mask_layers[0] if cfg.sa_mask_layers else "decoder",
        timestep=1000,
    )
    weights = np.where(mask > 0, cfg.fg_weight, 1.0)
    fg_px = mask > 0
    fg_view = ForegroundMask(grid=mask.astype(np.uint8), threshold=0.5,
                             coverage=float(mask.mean()))

    losses = [layout_loss(_sigmoid(z), mask, cfg.fg_weight)]
    fg_min = [float(_sigmoid(z)[fg_px].min())]
    for step in range(cfg.opt_steps):
        t = _step_timestep(step, cfg.opt_steps)
        c = _sigmoid(z)
        if cfg.loss_t_range[1] <= t <= cfg.loss_t_range[0]:
            # d(loss)/dz = w * (c - m), the BCE-through-sigmoid shortcut
            z = z - cfg.step_size * weights * (c - mask)
        if cfg.sa_mask_t_range[1] <= t <= cfg.sa_mask_t_range[0]:
            sa = mask_self_attention(sa, fg_view)
            sa.timestep = t
        if not np.all(np.isfinite(z)):
            raise DivergenceError(f"non-finite logits at step {step}")
        c = _sigmoid(z)
        losses.append(layout_loss(c, mask, cfg.fg_weight))
        fg_min.append(float(c[fg_px].min()))

    final = _sigmoid(z)
    try:
        fg = otsu_mask(final)
        inter = np.logical_and(fg.grid > 0, mask > 0).sum()
        union = np.logical_or(fg.grid > 0, mask > 0).sum()
        iou = float(inter) / float(union) if union else 0.0
    except DegenerateMapError:
        iou = 0.0
    return GuidanceResult(
        cross_map=final,
        sa_map=sa,
        loss_trace=np.asarray(losses),
        iou=iou,
        fg_min_trace=np.asarray(fg_min),
        mask=mask.astype(np.uint8),
    )


@dataclass
class GuidanceArtifacts:
    fg_mask: np.ndarray
    sa_mask_layers: tuple
    sa_mask_t_range: tuple
    loss_t_range: tuple
    fg_weight: float


def export_guidance(out_dir, layout, cfg):
    """Write the foreground mask, the self-attention mask spec, and the loss
    schedule for consumption by a host generation pipeline."""
    import os

    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    fg = layout.union()
    tensor_io.write_blob(os.path.join(out_dir, "fg_mask.cgtn"), fg.astype(np.uint8))
    lines = [
        "# countlayout guidance artifacts",
        "format: countlayout-guidance/1",
        f"fg_weight: {cfg.fg_weight}",
        f"loss_t_range: {cfg.loss_t_range[0]} {cfg.loss_t_range[1]}",
        f"sa_mask_t_range: {cfg.sa_mask_t_range[0]} {cfg.sa_mask_t_range[1]}",
        "sa_mask_layers: " + ",".join(cfg.sa_mask_layers),
        "sa_mask_rule: zero entries with row in background and column in foreground",
        "tensor: fg_mask fg_mask.cgtn",
    ]
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return GuidanceArtifacts(
        fg_mask=fg,
        sa_mask_layers=tuple(cfg.sa_mask_layers),
        sa_mask_t_range=tuple(cfg.sa_mask_t_range),
        loss_t_range=tuple(cfg.loss_t_range),
        fg_weight=cfg.fg_weight,
    )
