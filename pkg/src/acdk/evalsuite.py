"""Relative-depth metrics with scale-shift alignment, plus robustness sweeps.

Predictions are relative disparities, so before AbsRel and the delta
threshold metric they are aligned to ground truth by the closed-form least
squares (s, t) minimizing sum((s*pred + t - gt)^2) over valid pixels, then
both sides are inverted to depth with a small disparity floor. Pairwise
ordinal accuracy needs no alignment: it only compares which of two points
has the larger predicted disparity.
"""

import json
from dataclasses import dataclass

import numpy as np

from .imagecore import Rng

__all__ = [
    "DISPARITY_FLOOR",
    "DELTA1_THRESHOLD",
    "AlignedPair",
    "MetricReport",
    "OrdinalPair",
    "align",
    "absrel",
    "delta1",
    "ordinal_accuracy",
    "evaluate_model",
    "robustness_sweep",
    "load_ordinal_pairs",
]

DISPARITY_FLOOR = 1e-6
DELTA1_THRESHOLD = 1.25


@dataclass
class AlignedPair:
    pred_aligned: np.ndarray  # s_fit * pred + t_fit, clamped to >= floor
    gt: np.ndarray
    valid: np.ndarray         # boolean mask of pixels entering the metrics
    s_fit: float
    t_fit: float


@dataclass
class MetricReport:
    absrel: float
    delta1: float
    n_pixels: int
    breakdown: dict  # (kind, severity) -> {"absrel": ..., "delta1": ...}


@dataclass(frozen=True)
class OrdinalPair:
    ax: int
    ay: int
    bx: int
    by: int
    closer: str  # "a" or "b"

    def __post_init__(self):
        if self.closer not in ("a", "b"):
            raise ValueError("closer must be 'a' or 'b'")
        if (self.ax, self.ay) == (self.bx, self.by):
            raise ValueError("ordinal pair must use two distinct points")


def _as2d(x):
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def align(pred, gt, valid_mask=None):
    """Closed-form least-squares scale/shift fit of pred onto gt.

    Solves min_{s,t} sum over valid pixels of (s*pred + t - gt)^2 via the
    2x2 normal equations; a constant prediction makes them singular and is
    rejected. The aligned prediction is clamped to the disparity floor.
    """
    p = _as2d(pred)
    g = _as2d(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    valid = np.ones(p.shape, dtype=bool) if valid_mask is None else \
        np.asarray(valid_mask, dtype=bool)
    pv = p[valid]
    gv = g[valid]
    if pv.size < 2:
        raise ValueError("need at least 2 valid pixels")
    n = float(pv.size)
    spp = float((pv * pv).sum())
    sp = float(pv.sum())
    det = spp * n - sp * sp
    if det <= 0.0 or not np.isfinite(det):
        raise ValueError("singular alignment: constant prediction")
    spg = float((pv * gv).sum())
    sg = float(gv.sum())
    s = (spg * n - sp * sg) / det
    t = (spp * sg - sp * spg) / det
    aligned = np.maximum(s * p + t, DISPARITY_FLOOR)
    return AlignedPair(pred_aligned=aligned, gt=g, valid=valid, s_fit=s, t_fit=t)


def absrel(pair):
    """Mean |d_pred - d_gt| / d_gt over valid pixels, in depth space."""
    d_pred = 1.0 / np.maximum(pair.pred_aligned[pair.valid], DISPARITY_FLOOR)
    d_gt = 1.0 / np.maximum(pair.gt[pair.valid], DISPARITY_FLOOR)
    return float(np.mean(np.abs(d_pred - d_gt) / d_gt))


def delta1(pair):
    """Fraction of valid pixels with max(d_pred/d_gt, d_gt/d_pred) < 1.25."""
    d_pred = 1.0 / np.maximum(pair.pred_aligned[pair.valid], DISPARITY_FLOOR)
    d_gt = 1.0 / np.maximum(pair.gt[pair.valid], DISPARITY_FLOOR)
    ratio = np.maximum(d_pred / d_gt, d_gt / d_pred)
    return float(np.mean(ratio < DELTA1_THRESHOLD))


def ordinal_accuracy(pred, pairs):
    """Fraction of point pairs whose predicted ordering matches the label.

    Higher disparity means closer; a pair is correct when the labeled-closer
    point has strictly larger predicted disparity, so ties count as wrong.
    """
    p = _as2d(pred)
    if not pairs:
        raise ValueError("no ordinal pairs given")
    h, w = p.shape
    correct = 0
    for pr in pairs:
        if not (0 <= pr.ay < h and 0 <= pr.ax < w and
                0 <= pr.by < h and 0 <= pr.bx < w):
            raise ValueError(f"pair coordinates outside {h}x{w} map: {pr}")
        da = p[pr.ay, pr.ax]
        db = p[pr.by, pr.bx]
        closer_disp, other_disp = (da, db) if pr.closer == "a" else (db, da)
        if closer_disp > other_disp:
            correct += 1
    return correct / len(pairs)


def load_ordinal_pairs(path):
    """JSON-lines {image, ax, ay, bx, by, closer} grouped by image name."""
    by_image = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            pair = OrdinalPair(ax=int(rec["ax"]), ay=int(rec["ay"]),
                               bx=int(rec["bx"]), by=int(rec["by"]),
                               closer=rec["closer"])
            by_image.setdefault(rec["image"], []).append(pair)
    return by_image


# ---------------------------------------------------------------------------
# Model-level evaluation
# ---------------------------------------------------------------------------


def evaluate_model(model, dataset, corrupt_kind=None, severity=None, seed=0):
    """Mean AbsRel and delta1 of a model over (name, image, gt) triples.

    With corrupt_kind set, each image is corrupted at the given severity
    using a child stream labeled by (kind, severity, image name) before the
    forward pass, so the evaluation is deterministic per seed.
    """
    from .corruption import apply_corruption
    from .model import forward

    root = Rng(seed)
    absrel_sum = 0.0
    delta1_sum = 0.0
    n_pixels = 0
    count = 0
    for name, img, gt in dataset:
        if gt is None:
            raise ValueError(f"{name}: no ground truth available")
        if corrupt_kind is not None:
            stream = root.fork(f"{corrupt_kind}/{severity}/{name}")
            img = apply_corruption(img, corrupt_kind, severity, stream)
        pred, _ = forward(model, img)
        pair = align(pred.data, gt.data)
        absrel_sum += absrel(pair)
        delta1_sum += delta1(pair)
        n_pixels += int(pair.valid.sum())
        count += 1
    return absrel_sum / count, delta1_sum / count, n_pixels


def robustness_sweep(ckpt_path, data_dir, kinds, severities, seed,
                     report_path=None):
    """Evaluate a checkpoint on clean data and a (kind, severity) grid.

    Rows are emitted in deterministic order: the clean row first (kind
    "clean", severity 0), then kinds x severities as given. Returns a
    MetricReport whose breakdown maps (kind, severity) to the row metrics.
    """
    from .datagen import load_dataset
    from .model import load_checkpoint

    model = load_checkpoint(ckpt_path)
    dataset = load_dataset(data_dir, with_gt=True)
    rows = []
    clean_absrel, clean_delta1, n_pixels = evaluate_model(model, dataset)
    rows.append({"kind": "clean", "severity": 0,
                 "absrel": clean_absrel, "delta1": clean_delta1})
    breakdown = {}
    for kind in kinds:
        for sev in severities:
            a, d, _ = evaluate_model(model, dataset, corrupt_kind=kind,
                                     severity=sev, seed=seed)
            rows.append({"kind": kind, "severity": int(sev),
                         "absrel": a, "delta1": d})
            breakdown[(kind, int(sev))] = {"absrel": a, "delta1": d}
    if report_path:
        with open(report_path, "w") as f:
            for row in rows:
                f.write(json.dumps(row) + "\n")
    return MetricReport(absrel=clean_absrel, delta1=clean_delta1,
                        n_pixels=n_pixels, breakdown=breakdown)
