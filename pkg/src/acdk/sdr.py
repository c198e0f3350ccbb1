"""Pairwise spatial-distance relations between patches and their constraint loss.

A disparity map is scale-shift normalized, pooled into patches, and every
patch pair gets a combined geometric distance: the min-max-normalized planar
distance between patch grid positions (S_p) merged with the absolute
difference of pooled disparities (S_d), either in quadrature
(sqrt(S_p^2 + S_d^2), euclidean) or summed (manhattan). Relation matrices
are plain n x n float arrays (n = hp * wp), symmetric with zero diagonal.

The constraint loss is the mean squared discrepancy between the student's
combined matrix and a reference matrix, with gradients propagated through
the disparity difference, the pooling, and the normalization.
"""

from dataclasses import dataclass

import numpy as np

from .losses import LossValue, normalize, normalize_backward

__all__ = [
    "METRICS",
    "PARADIGMS",
    "SdrConfig",
    "PatchGrid",
    "patchify",
    "position_relation",
    "depth_relation",
    "spatial_distance",
    "sdr_loss",
    "sdr_row_map",
]

METRICS = ("euclidean", "manhattan")
PARADIGMS = ("kd", "consistency")


@dataclass(frozen=True)
class SdrConfig:
    """Spatial-distance constraint settings.

    metric selects both the planar distance and the combination rule;
    paradigm selects the reference matrix during training: "kd" uses the
    frozen teacher on the weak image, "consistency" the student's own
    detached weak branch. Defaults are the selected variant (kd+euclidean).
    """

    metric: str = "euclidean"
    paradigm: str = "kd"
    patch_size: int = 14

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"paradigm must be one of {PARADIGMS}")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")


class PatchGrid:
    """hp x wp pooled normalized disparities plus patch grid coordinates.

    ``source`` optionally retains the dense map behind the grid so loss
    gradients can be propagated back through pooling and normalization;
    grids built directly from values (e.g. in tests) leave it None.
    """

    __slots__ = ("values", "patch_size", "source")

    def __init__(self, values, patch_size, source=None):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("patch values must be hp x wp")
        if not np.all(np.isfinite(arr)):
            raise ValueError("patch values must be finite")
        self.values = arr
        self.patch_size = int(patch_size)
        self.source = None if source is None else np.asarray(source, np.float64)

    @property
    def hp(self):
        return self.values.shape[0]

    @property
    def wp(self):
        return self.values.shape[1]

    @property
    def n(self):
        return self.values.size

    def coords(self):
        """Integer (row, col) grid indices of each patch, row-major."""
        rr, cc = np.meshgrid(np.arange(self.hp), np.arange(self.wp), indexing="ij")
        return np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)


def patchify(d, patch_size):
    """Pool a scale-shift-normalized disparity map into patch means.

    The map must divide evenly into patch_size x patch_size cells (crop
    before calling otherwise). Constant maps are rejected by the
    normalization; a map that only becomes constant after pooling is fine.
    """
    arr = np.asarray(getattr(d, "data", d), dtype=np.float64)
    p = int(patch_size)
    if p < 1:
        raise ValueError("patch_size must be >= 1")
    h, w = arr.shape
    if h < p or w < p:
        raise ValueError("map smaller than patch_size")
    if h % p or w % p:
        raise ValueError(f"dimensions {h}x{w} not divisible by patch_size {p}")
    z, _ = normalize(arr)
    pooled = z.reshape(h // p, p, w // p, p).mean(axis=(1, 3))
    return PatchGrid(pooled, p, source=arr)


def position_relation(hp, wp, metric="euclidean"):
    """Pairwise planar distance between patch grid indices, min-max normed.

    The diagonal is 0 and the matrix maximum is exactly 1 (division by the
    largest pairwise distance).
    """
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    n = int(hp) * int(wp)
    if n < 2:
        raise ValueError("position relation needs at least 2 patches")
    rr, cc = np.meshgrid(np.arange(hp), np.arange(wp), indexing="ij")
    pts = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)
    dr = pts[:, None, 0] - pts[None, :, 0]
    dc = pts[:, None, 1] - pts[None, :, 1]
    if metric == "euclidean":
        dist = np.sqrt(dr * dr + dc * dc)
    else:
        dist = np.abs(dr) + np.abs(dc)
    return dist / dist.max()


def depth_relation(grid):
    """Absolute pairwise difference of pooled (already normalized) values."""
    g = grid.values.ravel()
    return np.abs(g[:, None] - g[None, :])


def spatial_distance(sp, sd, metric="euclidean"):
    """Combine planar and disparity relations into one distance matrix.

    euclidean: sqrt(S_p^2 + S_d^2); manhattan: S_p + S_d.
    """
    sp = np.asarray(sp, dtype=np.float64)
    sd = np.asarray(sd, dtype=np.float64)
    if sp.shape != sd.shape:
        raise ValueError(f"shape mismatch: {sp.shape} vs {sd.shape}")
    if metric == "euclidean":
        return np.sqrt(sp * sp + sd * sd)
    if metric == "manhattan":
        return sp + sd
    raise ValueError(f"metric must be one of {METRICS}")


def _combined(grid, metric):
    sp = position_relation(grid.hp, grid.wp, metric)
    sd = depth_relation(grid)
    return sp, sd, spatial_distance(sp, sd, metric)


def sdr_loss(student, reference, metric="euclidean"):
    """Mean squared gap between the two combined distance matrices.

    loss = mean over all n^2 entries of (S_D(student) - S_D(reference))^2.
    The reference carries no gradient. The gradient with respect to the
    student's patch values is returned under "strong_values"; when the
    student grid retains its dense source, the gradient propagated back
    through pooling and normalization is returned under "strong".
    """
    if student.values.shape != reference.values.shape:
        raise ValueError("grid shape mismatch")
    _, sd_s, big_s = _combined(student, metric)
    _, _, big_r = _combined(reference, metric)
    gap = big_s - big_r
    n2 = gap.size
    value = float((gap * gap).mean())

    # d(loss)/dS_d, elementwise: 2*gap/n^2 times dS_D/dS_d
    if metric == "euclidean":
        dsd = np.divide(sd_s, big_s, out=np.zeros_like(big_s), where=big_s > 0.0)
    else:
        dsd = np.ones_like(big_s)
    m = (2.0 / n2) * gap * dsd
    g = student.values.ravel()
    sign = np.sign(g[:, None] - g[None, :])
    grad_values = 2.0 * (m * sign).sum(axis=1).reshape(student.values.shape)

    grads = {"strong_values": grad_values}
    if student.source is not None:
        p = student.patch_size
        per_pixel = grad_values / (p * p)
        grad_z = np.repeat(np.repeat(per_pixel, p, axis=0), p, axis=1)
        grads["strong"] = normalize_backward(student.source, grad_z)
    return LossValue(value=value, grad=grads)


def sdr_row_map(grid, query, metric="euclidean"):
    """Distance-to-everything heat field for one query patch.

    Extracts the query patch's row of the combined matrix, reshapes it to
    hp x wp, and min-max normalizes it for export as a grayscale heatmap.
    """
    row, col = int(query[0]), int(query[1])
    if not (0 <= row < grid.hp and 0 <= col < grid.wp):
        raise ValueError(f"query ({row}, {col}) outside {grid.hp}x{grid.wp} grid")
    _, _, big = _combined(grid, metric)
    heat = big[row * grid.wp + col].reshape(grid.hp, grid.wp)
    lo, hi = heat.min(), heat.max()
    if hi == lo:
        return np.zeros_like(heat)
    return (heat - lo) / (hi - lo)
