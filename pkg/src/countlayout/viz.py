"""PCA projection of self-attention features to an RGB image for eyeballing
instance separability.

Deliberately dependency-free: top-3 components come from power iteration
with deflation (200 iterations, tol 1e-7, seeded start vectors) so two runs
produce identical images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

POWER_ITERS = 200
POWER_TOL = 1e-7
_START_SEED = 0


@dataclass
class PcaProjection:
    components: np.ndarray          # 3xD, orthonormal rows (zero rows if degenerate)
    explained_variance: np.ndarray  # length 3, nonincreasing
    image: np.ndarray               # HxWx3 float in [0,1]
    degenerate: bool


def _power_iteration(cov, prev_components, rng):
    d = cov.shape[0]
    v = rng.standard_normal(d)
    for comp in prev_components:
        v -= (v @ comp) * comp
    norm = np.linalg.norm(v)
    if norm == 0:
        return None, 0.0
    v /= norm
    for _ in range(POWER_ITERS):
        w = cov @ v
        for comp in prev_components:  # re-orthogonalize against found components
            w -= (w @ comp) * comp
        norm = np.linalg.norm(w)
        if norm < 1e-300:
            return None, 0.0
        w /= norm
        if np.linalg.norm(w - v) < POWER_TOL:
            v = w
            break
        v = w
    return v, float(v @ cov @ v)


def pca_rgb(features):
    """Project HxWxD features onto their top-3 principal components.

    Channels are min-max scaled to [0,1] independently. If the centered
    features have rank < 3 the missing components are zero rows, the
    corresponding variances are 0, and `degenerate` is set.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 3:
        raise ValueError(f"features must be HxWxD, got shape {feats.shape}")
    h, w, d = feats.shape
    if d < 3:
        raise ValueError(f"need feature dim >= 3, got {d}")
    if h * w < 3:
        raise ValueError(f"need at least 3 pixels, got {h * w}")

    x = feats.reshape(h * w, d)
    x = x - x.mean(axis=0)
    cov = (x.T @ x) / max(h * w - 1, 1)
    total_var = float(np.trace(cov))

    rng = np.random.default_rng(_START_SEED)
    components = []
    variances = []
    degenerate = False
    for _ in range(3):
        if total_var <= 0:
            v, lam = None, 0.0
        else:
            v, lam = _power_iteration(cov, components, rng)
        if v is None or lam <= POWER_TOL * max(total_var, 1.0):
            degenerate = True
            components.append(np.zeros(d))
            variances.append(0.0)
        else:
            components.append(v)
            variances.append(lam)

    comps = np.stack(components)
    evar = np.asarray(variances)

    proj = x @ comps.T
    img = np.zeros((h * w, 3))
    for c in range(3):
        lo, hi = proj[:, c].min(), proj[:, c].max()
        if hi > lo:
            img[:, c] = (proj[:, c] - lo) / (hi - lo)
    return PcaProjection(
        components=comps,
        explained_variance=evar,
        image=img.reshape(h, w, 3),
        degenerate=degenerate,
    )


def write_ppm(path, image):
    """Write an HxWx3 float image in [0,1] as binary PPM (P6, maxval 255)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must be HxWx3, got shape {img.shape}")
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
