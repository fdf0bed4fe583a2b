"""Binary tensor container ("CGTN" blobs) and bundle/layout manifests.

Every other module moves data through the formats defined here, so the
reader is strict: anything that does not round-trip bit-exactly is a bug.

Blob layout (little-endian throughout):

    magic   4 bytes  b"CGTN"
    version u32      1
    dtype   u8       0 = float32, 1 = uint8
    ndim    u8       1..4
    dims    ndim*u32 each >= 1
    payload row-major scalars, len == prod(dims) * itemsize

A bundle is a directory {manifest.txt, *.cgtn}; the manifest is a UTF-8
"key: value" document (see `write_bundle` for the exact keys).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"CGTN"
VERSION = 1
CANONICAL_HW = 32

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}
_CODE_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.uint8)}


class BlobFormatError(ValueError):
    """Raised when a .cgtn file violates the container format."""


class ManifestError(ValueError):
    """Raised when a manifest is missing, malformed, or inconsistent."""


def write_blob(path, tensor):
    """Serialize a float32/uint8 array to `path` in the CGTN container.

    Bool arrays are stored as uint8. Any other dtype is rejected rather
    than silently converted so round-trips stay bit-exact.
    """
    arr = np.asarray(tensor)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    if arr.dtype not in _DTYPE_CODES:
        raise BlobFormatError(f"unsupported dtype {arr.dtype}; expected float32 or uint8")
    if not 1 <= arr.ndim <= 4:
        raise BlobFormatError(f"ndim must be in [1, 4], got {arr.ndim}")
    if any(d < 1 for d in arr.shape):
        raise BlobFormatError(f"zero-length dim in shape {arr.shape}")
    if any(d > 0xFFFFFFFF for d in arr.shape):
        raise BlobFormatError(f"dim overflows 32 bits in shape {arr.shape}")
    header = MAGIC + struct.pack("<IBB", VERSION, _DTYPE_CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_blob(path):
    """Parse a CGTN blob back into a numpy array (inverse of write_blob)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 10:
        raise BlobFormatError(f"{path}: truncated header")
    if raw[:4] != MAGIC:
        raise BlobFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, dtype_code, ndim = struct.unpack("<IBB", raw[4:10])
    if version != VERSION:
        raise BlobFormatError(f"{path}: unsupported version {version}")
    if dtype_code not in _CODE_DTYPES:
        raise BlobFormatError(f"{path}: unknown dtype code {dtype_code}")
    if not 1 <= ndim <= 4:
        raise BlobFormatError(f"{path}: ndim {ndim} outside [1, 4]")
    dims_end = 10 + 4 * ndim
    if len(raw) < dims_end:
        raise BlobFormatError(f"{path}: truncated dims")
    dims = struct.unpack(f"<{ndim}I", raw[10:dims_end])
    if any(d < 1 for d in dims):
        raise BlobFormatError(f"{path}: zero-length dim in {dims}")
    dtype = _CODE_DTYPES[dtype_code]
    expected = int(np.prod(dims)) * dtype.itemsize
    payload = raw[dims_end:]
    if len(payload) != expected:
        raise BlobFormatError(
            f"{path}: payload length {len(payload)} != dims {dims} * itemsize ({expected})"
        )
    arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype)
    return arr.reshape(dims)


def resize_nearest(arr, out_hw):
    """Nearest-neighbor resize of a 2-D array (used for masks)."""
    h, w = arr.shape
    oh, ow = out_hw
    rows = np.minimum((np.arange(oh) + 0.5) * h / oh, h - 1).astype(np.int64)
    cols = np.minimum((np.arange(ow) + 0.5) * w / ow, w - 1).astype(np.int64)
    return arr[np.ix_(rows, cols)]


def resize_bilinear(arr, out_hw):
    """Bilinear resize of a 2-D float array with half-pixel centers."""
    h, w = arr.shape
    oh, ow = out_hw
    src = arr.astype(np.float64)
    ry = np.clip((np.arange(oh) + 0.5) * h / oh - 0.5, 0, h - 1)
    rx = np.clip((np.arange(ow) + 0.5) * w / ow - 0.5, 0, w - 1)
    y0 = np.floor(ry).astype(np.int64)
    x0 = np.floor(rx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ry - y0)[:, None]
    fx = (rx - x0)[None, :]
    top = src[np.ix_(y0, x0)] * (1 - fx) + src[np.ix_(y0, x1)] * fx
    bot = src[np.ix_(y1, x0)] * (1 - fx) + src[np.ix_(y1, x1)] * fx
    return (top * (1 - fy) + bot * fy).astype(arr.dtype)


@dataclass
class BundleManifest:
    prompt: str
    object_token_indices: list
    timestep: int
    layer_id: str
    resolution: tuple
    tensor_files: dict = field(default_factory=dict)

    def validate(self):
        if not 0 <= self.timestep <= 1000:
            raise ManifestError(f"timestep {self.timestep} outside [0, 1000]")
        if len(self.resolution) != 2 or any(d < 8 for d in self.resolution):
            raise ManifestError(f"resolution {self.resolution} must be (H, W) with dims >= 8")
        if not self.object_token_indices:
            raise ManifestError("object_token_indices is empty")


@dataclass
class AttentionBundle:
    """Self-attention features plus per-token cross-attention maps.

    After `read_bundle` everything lives on the canonical 32x32 grid:
    self_features is (32, 32, D) float32 and cross_maps maps each object
    token index to a (32, 32) float32 map.
    """

    prompt: str
    token_indices: list
    timestep: int
    layer_id: str
    self_features: np.ndarray
    cross_maps: dict
    source_resolution: tuple


def _parse_kv_lines(path):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if ":" not in line:
                raise ManifestError(f"{path}:{lineno}: expected 'key: value'")
            key, value = line.split(":", 1)
            pairs.append((key.strip(), value.strip()))
    return pairs


def read_manifest(path):
    """Parse a bundle manifest.txt into a validated BundleManifest."""
    kv = _parse_kv_lines(path)
    fields = {k: v for k, v in kv if k != "tensor"}
    tensors = {}
    for k, v in kv:
        if k != "tensor":
            continue
        parts = v.split()
        if len(parts) != 2:
            raise ManifestError(f"{path}: tensor line needs '<name> <relpath>', got {v!r}")
        tensors[parts[0]] = parts[1]
    missing = {"prompt", "object_token_indices", "timestep", "layer_id", "resolution"} - set(fields)
    if missing:
        raise ManifestError(f"{path}: missing keys {sorted(missing)}")
    try:
        idx = [int(t) for t in fields["object_token_indices"].split(",") if t.strip() != ""]
        timestep = int(fields["timestep"])
        res = tuple(int(t) for t in fields["resolution"].split())
    except ValueError as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    manifest = BundleManifest(
        prompt=fields["prompt"],
        object_token_indices=idx,
        timestep=timestep,
        layer_id=fields["layer_id"],
        resolution=res,
        tensor_files=tensors,
    )
    manifest.validate()
    return manifest


def read_bundle(bundle_dir):
    """Load a bundle directory and return an AttentionBundle on the 32x32 grid.

    Raises FileNotFoundError for missing blobs, ManifestError for
    manifest/shape mismatches, and BlobFormatError for corrupt blobs.
    """
    manifest = read_manifest(os.path.join(bundle_dir, "manifest.txt"))
    h, w = manifest.resolution

    def load(name):
        if name not in manifest.tensor_files:
            raise ManifestError(f"{bundle_dir}: manifest lacks tensor {name!r}")
        path = os.path.join(bundle_dir, manifest.tensor_files[name])
        if not os.path.isfile(path):
            raise FileNotFoundError(f"{bundle_dir}: referenced blob missing: {path}")
        return read_blob(path)

    feats = load("self_features")
    if feats.ndim != 3 or feats.shape[0] != h or feats.shape[1] != w:
        raise ManifestError(
            f"{bundle_dir}: self_features shape {feats.shape} != manifest resolution {h}x{w}xD"
        )
    feats = feats.astype(np.float32)
    if (h, w) != (CANONICAL_HW, CANONICAL_HW):
        out = np.empty((CANONICAL_HW, CANONICAL_HW, feats.shape[2]), dtype=np.float32)
        for d in range(feats.shape[2]):
            out[:, :, d] = resize_bilinear(feats[:, :, d], (CANONICAL_HW, CANONICAL_HW))
        feats = out

    cross = {}
    for tok in manifest.object_token_indices:
        m = load(f"cross_token_{tok}")
        if m.ndim != 2 or m.shape != (h, w):
            raise ManifestError(
                f"{bundle_dir}: cross_token_{tok} shape {m.shape} != manifest resolution {(h, w)}"
            )
        m = m.astype(np.float32)
        if (h, w) != (CANONICAL_HW, CANONICAL_HW):
            m = resize_bilinear(m, (CANONICAL_HW, CANONICAL_HW))
        cross[tok] = m

    return AttentionBundle(
        prompt=manifest.prompt,
        token_indices=list(manifest.object_token_indices),
        timestep=manifest.timestep,
        layer_id=manifest.layer_id,
        self_features=feats,
        cross_maps=cross,
        source_resolution=(h, w),
    )


def write_bundle(bundle_dir, bundle, extra_fields=None):
    """Write an AttentionBundle as {manifest.txt, *.cgtn}."""
    os.makedirs(bundle_dir, exist_ok=True)
    h, w = bundle.self_features.shape[:2]
    lines = [
        "# countlayout attention bundle",
        "format: countlayout-bundle/1",
        f"prompt: {bundle.prompt}",
        "object_token_indices: " + ",".join(str(t) for t in bundle.token_indices),
        f"timestep: {bundle.timestep}",
        f"layer_id: {bundle.layer_id}",
        f"resolution: {h} {w}",
    ]
    for key, value in (extra_fields or {}).items():
        lines.append(f"{key}: {value}")
    write_blob(os.path.join(bundle_dir, "self_features.cgtn"),
               bundle.self_features.astype(np.float32))
    lines.append("tensor: self_features self_features.cgtn")
    for tok in bundle.token_indices:
        name = f"cross_token_{tok}"
        write_blob(os.path.join(bundle_dir, f"{name}.cgtn"),
                   bundle.cross_maps[tok].astype(np.float32))
        lines.append(f"tensor: {name} {name}.cgtn")
    with open(os.path.join(bundle_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def save_layout(layout_dir, layout):
    """Serialize an InstanceLayout as {manifest.txt, channels.cgtn} (u8 KxHxW)."""
    os.makedirs(layout_dir, exist_ok=True)
    channels = np.asarray(layout.channels, dtype=np.uint8)
    write_blob(os.path.join(layout_dir, "channels.cgtn"), channels)
    lines = [
        "# countlayout instance layout",
        "format: countlayout-layout/1",
        f"count: {layout.count}",
        f"resolution: {channels.shape[1]} {channels.shape[2]}",
        "tensor: channels channels.cgtn",
    ]
    with open(os.path.join(layout_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_layout(layout_dir):
    """Load a layout directory back into an InstanceLayout (canonical grid)."""
    from .localize import InstanceLayout

    kv = dict(_parse_kv_lines(os.path.join(layout_dir, "manifest.txt")))
    if kv.get("format") != "countlayout-layout/1":
        raise ManifestError(f"{layout_dir}: not a layout manifest")
    path = os.path.join(layout_dir, "channels.cgtn")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"{layout_dir}: channels.cgtn missing")
    channels = read_blob(path)
    if channels.ndim != 3:
        raise ManifestError(f"{layout_dir}: channels blob must be KxHxW")
    if channels.shape[1:] != (CANONICAL_HW, CANONICAL_HW):
        resized = np.empty((channels.shape[0], CANONICAL_HW, CANONICAL_HW), dtype=np.uint8)
        for k in range(channels.shape[0]):
            resized[k] = resize_nearest(channels[k], (CANONICAL_HW, CANONICAL_HW))
        channels = resized
    declared = int(kv.get("count", -1))
    layout = InstanceLayout.from_channels(channels)
    if declared >= 0 and declared != layout.count:
        raise ManifestError(
            f"{layout_dir}: manifest count {declared} != nonempty channels {layout.count}"
        )
    return layout
