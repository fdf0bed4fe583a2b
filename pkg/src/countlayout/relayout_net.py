"""The k -> k+1 layout network: a small U-Net over 9 input / 10 output mask
channels, its Dice + pairwise-overlap losses, and the training loop.

Losses accept numpy arrays (returning floats) or torch tensors (returning
differentiable scalars); training runs in float32, while float64 inputs are
preserved so finite-difference checks can run at full precision.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import tensor_io
from .tensor_io import read_blob, write_blob

log = logging.getLogger(__name__)

SMOOTH = 1e-6
DEFAULT_HYPER = {"lr": 8e-6, "batch": 32, "lambda": 0.25, "levels": 4, "base_width": 32}
IN_CHANNELS = 9
OUT_CHANNELS = 10


class TrainingDivergedError(RuntimeError):
    def __init__(self, step, recent_losses):
        super().__init__(
            f"non-finite loss at step {step}; recent losses: {recent_losses}"
        )
        self.step = step
        self.recent_losses = recent_losses


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, True
    arr = np.asarray(x)
    dtype = torch.float64 if arr.dtype == np.float64 else torch.float32
    return torch.as_tensor(arr.astype(np.float64 if dtype == torch.float64 else np.float32)), False


def dice_loss(pred, target):
    """Sum over channels of 1 - (2*intersection + eps) / (pred + target + eps).

    Channels empty in both pred and target contribute 0 via the smoothing
    term. Inputs are (k+1)xHxW with k+1 <= 10.
    """
    p, is_torch = _as_tensor(pred)
    t, _ = _as_tensor(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(t.shape)}")
    if p.shape[0] > OUT_CHANNELS:
        raise ValueError(f"more than {OUT_CHANNELS} channels: {p.shape[0]}")
    t = t.to(p.dtype)
    pf = p.reshape(p.shape[0], -1)
    tf = t.reshape(t.shape[0], -1)
    inter = (pf * tf).sum(dim=1)
    denom = pf.sum(dim=1) + tf.sum(dim=1)
    loss = (1.0 - (2.0 * inter + SMOOTH) / (denom + SMOOTH)).sum()
    return loss if is_torch else float(loss)


def overlap_loss(pred):
    """Sum over ordered channel pairs i != j of 2*<p_i, p_j> / (|p_i|+|p_j|).

    Penalizes mass shared between different instance channels; denominators
    carry the smoothing term so empty pairs contribute 0.
    """
    p, is_torch = _as_tensor(pred)
    c = p.shape[0]
    pf = p.reshape(c, -1)
    gram = pf @ pf.T
    sums = pf.sum(dim=1)
    denom = sums[:, None] + sums[None, :] + SMOOTH
    ratio = 2.0 * gram / denom
    off = ratio.sum() - torch.diagonal(ratio).sum()
    return off if is_torch else float(off)


def total_loss(pred, target, lam=0.25):
    """dice_loss + lam * overlap_loss (lam defaults to the 0.25 penalty)."""
    d = dice_loss(pred, target)
    o = overlap_loss(pred)
    return d + lam * o


def _batched_total_loss(pred, target, kp1, lam):
    """Mean over the batch of per-sample total loss, restricted per sample to
    its first kp1 (object) channels."""
    b, c = pred.shape[:2]
    valid = (torch.arange(c, device=pred.device)[None, :] < kp1[:, None]).to(pred.dtype)
    pf = pred.reshape(b, c, -1)
    tf = target.reshape(b, c, -1)
    inter = (pf * tf).sum(dim=2)
    denom = pf.sum(dim=2) + tf.sum(dim=2)
    dice = ((1.0 - (2.0 * inter + SMOOTH) / (denom + SMOOTH)) * valid).sum(dim=1)
    gram = pf @ pf.transpose(1, 2)
    sums = pf.sum(dim=2)
    pair_denom = sums[:, :, None] + sums[:, None, :] + SMOOTH
    ratio = 2.0 * gram / pair_denom
    pair_mask = valid[:, :, None] * valid[:, None, :]
    pair_mask = pair_mask * (1.0 - torch.eye(c, device=pred.device, dtype=pred.dtype))
    overlap = (ratio * pair_mask).sum(dim=(1, 2))
    return (dice + lam * overlap).mean()


class _DoubleConv(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.InstanceNorm2d(cout, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.InstanceNorm2d(cout, affine=True),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class LayoutUNet(nn.Module):
    """Encoder/decoder with skip concatenation.

    `levels` encoder blocks with widths base_width * 2^i, 2x2 max-pool
    between them, nearest-neighbor upsampling on the way back, 1x1 head,
    sigmoid output.
    """

    def __init__(self, levels=4, base_width=32, in_channels=IN_CHANNELS,
                 out_channels=OUT_CHANNELS):
        super().__init__()
        widths = [base_width * (2 ** i) for i in range(levels)]
        self.enc = nn.ModuleList()
        cin = in_channels
        for w in widths:
            self.enc.append(_DoubleConv(cin, w))
            cin = w
        self.pool = nn.MaxPool2d(2)
        self.dec = nn.ModuleList()
        for i in range(levels - 2, -1, -1):
            self.dec.append(_DoubleConv(widths[i + 1] + widths[i], widths[i]))
        self.head = nn.Conv2d(widths[0], out_channels, 1)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.enc):
            x = block(x)
            if i < len(self.enc) - 1:
                skips.append(x)
                x = self.pool(x)
        for block, skip in zip(self.dec, reversed(skips)):
            x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
            x = block(torch.cat([x, skip], dim=1))
        return torch.sigmoid(self.head(x))


@dataclass
class TrainConfig:
    epochs: int
    seed: int
    augment_hflip: bool = True
    augment_channel_shuffle: bool = True
    checkpoint_every: int = 0

    def validate(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class RelayoutModel:
    net: LayoutUNet
    hyper: dict
    trained_epochs: int = 0
    rng_seed: int = 0
    grid: int = tensor_io.CANONICAL_HW
    loss_history: list = field(default_factory=list)


def create_model(seed, levels=None, base_width=None, grid=tensor_io.CANONICAL_HW):
    """Fresh model with fan-in-scaled uniform init (torch default), seeded."""
    hyper = dict(DEFAULT_HYPER)
    if levels is not None:
        hyper["levels"] = levels
    if base_width is not None:
        hyper["base_width"] = base_width
    torch.manual_seed(seed)
    net = LayoutUNet(levels=hyper["levels"], base_width=hyper["base_width"])
    return RelayoutModel(net=net, hyper=hyper, rng_seed=seed, grid=grid)


def forward(model, x):
    """Run the network on a 9xHxW input; returns 10xHxW scores in (0, 1)."""
    arr = np.asarray(x, dtype=np.float32)
    expected = (IN_CHANNELS, model.grid, model.grid)
    if arr.shape != expected:
        raise ValueError(f"input shape {arr.shape} != canonical {expected}")
    model.net.eval()
    with torch.no_grad():
        out = model.net(torch.from_numpy(arr).unsqueeze(0))
    return out.squeeze(0).numpy()


def pairs_to_tensors(pairs):
    """Pack LayoutPairs into (src u8 Nx9xHxW, tgt u8 Nx10xHxW, kp1 int N).

    Target channels are aligned so channel i supervises source channel i and
    the inserted object sits on channel k.
    """
    if not pairs:
        raise ValueError("empty dataset")
    h, w = pairs[0].source.channels.shape[1:]
    n = len(pairs)
    src = np.zeros((n, IN_CHANNELS, h, w), dtype=np.uint8)
    tgt = np.zeros((n, OUT_CHANNELS, h, w), dtype=np.uint8)
    kp1 = np.zeros(n, dtype=np.int64)
    for i, pair in enumerate(pairs):
        pair.validate()
        k = pair.source.count
        if k > IN_CHANNELS:
            raise ValueError(f"pair {i}: source count {k} > {IN_CHANNELS}")
        src[i, :k] = pair.source.channels
        tgt[i, : k + 1] = pair.aligned_target_channels()
        kp1[i] = k + 1
    return src, tgt, kp1


def _augment_batch(xb, yb, kp1, rng, cfg):
    for s in range(xb.shape[0]):
        if cfg.augment_hflip and rng.random() < 0.5:
            xb[s] = xb[s, :, :, ::-1].copy()
            yb[s] = yb[s, :, :, ::-1].copy()
        if cfg.augment_channel_shuffle:
            k = int(kp1[s]) - 1
            perm = rng.permutation(k)
            if k > 1:
                xb[s, :k] = xb[s, perm]
                yb[s, :k] = yb[s, perm]


def train(model, pairs, cfg, checkpoint_dir=None):
    """Adam (betas 0.9/0.999, eps 1e-8) at lr 8e-6, batch 32.

    Horizontal flips are applied jointly to source and target; channel
    shuffle permutes the k source channels and their matched target channels
    together (the inserted channel stays at k). With augmentation disabled
    and a fixed seed the run is bit-reproducible.
    """
    cfg.validate()
    src, tgt, kp1 = pairs_to_tensors(pairs)
    n = src.shape[0]
    batch = int(model.hyper["batch"])
    lam = float(model.hyper["lambda"])

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.net.parameters(), lr=float(model.hyper["lr"]),
                           betas=(0.9, 0.999), eps=1e-8)
    model.net.train()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            xb = src[idx].astype(np.float32)
            yb = tgt[idx].astype(np.float32)
            _augment_batch(xb, yb, kp1[idx], rng, cfg)
            x = torch.from_numpy(np.ascontiguousarray(xb))
            y = torch.from_numpy(np.ascontiguousarray(yb))
            k = torch.from_numpy(kp1[idx])
            pred = model.net(x)
            loss = _batched_total_loss(pred, y, k, lam)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(step, model.loss_history[-5:])
            opt.zero_grad()
            loss.backward()
            opt.step()
            model.loss_history.append(float(loss.detach()))
            epoch_losses.append(model.loss_history[-1])
            step += 1
        model.trained_epochs += 1
        log.info("epoch %d/%d: mean loss %.5f (%d steps)",
                 epoch, cfg.epochs, float(np.mean(epoch_losses)), len(epoch_losses))
        if checkpoint_dir and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(f"{checkpoint_dir}/epoch_{epoch:03d}", model)
    model.net.eval()
    return model


def save_checkpoint(ckpt_dir, model):
    """Write named parameters as float32 blobs plus a hyperparameter manifest."""
    import os

    os.makedirs(os.path.join(ckpt_dir, "params"), exist_ok=True)
    lines = [
        "# countlayout relayout-net checkpoint",
        "format: countlayout-checkpoint/1",
        f"levels: {model.hyper['levels']}",
        f"base_width: {model.hyper['base_width']}",
        f"lr: {model.hyper['lr']}",
        f"batch: {model.hyper['batch']}",
        f"lambda: {model.hyper['lambda']}",
        f"grid: {model.grid}",
        f"trained_epochs: {model.trained_epochs}",
        f"rng_seed: {model.rng_seed}",
    ]
    for name, tensor in model.net.state_dict().items():
        fname = name.replace(".", "__") + ".cgtn"
        write_blob(os.path.join(ckpt_dir, "params", fname),
                   tensor.detach().cpu().numpy().astype(np.float32))
        lines.append(f"param: {name} params/{fname}")
    with open(os.path.join(ckpt_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(ckpt_dir):
    """Rebuild a RelayoutModel from save_checkpoint output (strict names)."""
    import os

    kv = tensor_io._parse_kv_lines(os.path.join(ckpt_dir, "manifest.txt"))
    fields = {k: v for k, v in kv if k != "param"}
    if fields.get("format") != "countlayout-checkpoint/1":
        raise tensor_io.ManifestError(f"{ckpt_dir}: not a checkpoint manifest")
    model = create_model(
        seed=int(fields["rng_seed"]),
        levels=int(fields["levels"]),
        base_width=int(fields["base_width"]),
        grid=int(fields.get("grid", tensor_io.CANONICAL_HW)),
    )
    model.hyper["lr"] = float(fields["lr"])
    model.hyper["batch"] = int(fields["batch"])
    model.hyper["lambda"] = float(fields["lambda"])
    model.trained_epochs = int(fields["trained_epochs"])
    state = {}
    for k, v in kv:
        if k != "param":
            continue
        name, rel = v.split()
        state[name] = torch.from_numpy(read_blob(os.path.join(ckpt_dir, rel)).copy())
    expected = set(model.net.state_dict())
    if set(state) != expected:
        raise tensor_io.ManifestError(
            f"{ckpt_dir}: checkpoint parameters {sorted(set(state) ^ expected)} mismatch"
        )
    model.net.load_state_dict(state)
    model.net.eval()
    return model
