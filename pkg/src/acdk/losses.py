"""Scale-shift-invariant disparity losses and their analytic gradients.

Every loss normalizes each map by its own shift t = mean(y) and scale
s = mean(|y - t|) before comparing, which makes the comparison invariant to
positive affine rescaling of either map. Gradients are exact, including the
chain rule through t and s; the subgradient of |x| at 0 is taken as 0.

Inputs are plain 2D arrays (or anything with a ``.data`` 2D array, such as
DisparityMap); values may be arbitrary finite floats, the non-negativity of
stored disparity maps is a container concern, not a loss-domain one.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DegenerateScaleError",
    "NormStats",
    "LossValue",
    "norm_stats",
    "normalize",
    "normalize_backward",
    "affine_invariant_loss",
    "consistency_loss",
    "kd_loss",
    "total_loss",
]


class DegenerateScaleError(ValueError):
    """Scale s = mean(|y - mean(y)|) is zero: the map is exactly constant."""


@dataclass(frozen=True)
class NormStats:
    """Shift/scale pair used to balance two disparity maps."""

    t: float
    s: float


@dataclass
class LossValue:
    """Scalar loss plus optional per-branch gradients.

    ``grad`` maps a branch name (e.g. "pred", "weak", "strong") to an array
    shaped like that branch's input.
    """

    value: float
    grad: dict = field(default_factory=dict)


def _as_array(y):
    arr = getattr(y, "data", y)
    return np.asarray(arr, dtype=np.float64)


def norm_stats(y):
    """Shift t = mean(y) and scale s = mean(|y - t|).

    Raises DegenerateScaleError for exactly-constant maps (s = 0), so a
    collapsed constant prediction surfaces immediately instead of being
    silently epsilon-guarded.
    """
    arr = _as_array(y)
    if arr.size < 1:
        raise ValueError("empty map")
    t = float(arr.mean())
    s = float(np.abs(arr - t).mean())
    if s == 0.0:
        raise DegenerateScaleError("constant map has zero scale")
    return NormStats(t=t, s=s)


def normalize(y):
    """(y - t) / s with the stats of y itself; returns (z, stats)."""
    arr = _as_array(y)
    st = norm_stats(arr)
    return (arr - st.t) / st.s, st


def normalize_backward(y, grad_z):
    """Backprop through z = (y - t(y)) / s(y) with full chain rule.

    For gz = dL/dz: dL/dy = (gz - mean(gz)) / s - ds/dy * sum(gz * z) / s
    where ds/dy_k = (sign(y_k - t) - mean(sign(y - t))) / n.
    """
    arr = _as_array(y)
    gz = np.asarray(grad_z, dtype=np.float64)
    st = norm_stats(arr)
    n = arr.size
    r = arr - st.t
    z = r / st.s
    sign_r = np.sign(r)
    ds = (sign_r - sign_r.mean()) / n
    return (gz - gz.mean()) / st.s - ds * float((gz * z).sum()) / st.s


def affine_invariant_loss(y, yhat, grad_branches=("pred",)):
    """Mean absolute difference between the two normalized maps.

    loss = mean_j | (y_j - t(y))/s(y) - (yhat_j - t(yhat))/s(yhat) |

    ``grad_branches`` selects which gradients to compute: "pred" for y and
    "target" for yhat (yhat is a constant target otherwise). Both branches
    use the full chain rule through their own t and s.
    """
    a = _as_array(y)
    b = _as_array(yhat)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    za, _ = normalize(a)
    zb, _ = normalize(b)
    diff = za - zb
    value = float(np.abs(diff).mean())
    sign = np.sign(diff) / a.size
    grads = {}
    if "pred" in grad_branches:
        grads["pred"] = normalize_backward(a, sign)
    if "target" in grad_branches:
        grads["target"] = normalize_backward(b, -sign)
    return LossValue(value=value, grad=grads)


def consistency_loss(pred_weak, pred_strong, both_branches=False):
    """Prediction-consistency penalty between the two augmentation branches.

    The weak branch serves as the pseudo-label: by default it is detached
    and only the strong branch receives gradient ("strong" key). With
    ``both_branches`` the weak branch also gets its gradient ("weak" key).
    """
    branches = ("pred", "target") if both_branches else ("pred",)
    inner = affine_invariant_loss(pred_strong, pred_weak, grad_branches=branches)
    grads = {"strong": inner.grad["pred"]}
    if both_branches:
        grads["weak"] = inner.grad["target"]
    return LossValue(value=inner.value, grad=grads)


def kd_loss(pred_student_weak, pred_teacher_weak):
    """Distillation anchor: student's weak-branch output vs the frozen
    teacher's. The teacher term never carries gradient ("weak" key only)."""
    inner = affine_invariant_loss(pred_student_weak, pred_teacher_weak,
                                  grad_branches=("pred",))
    return LossValue(value=inner.value, grad={"weak": inner.grad["pred"]})


def total_loss(lc, lkd, ls, w1, w2, w3):
    """Weighted combination w1*Lc + w2*Lkd + w3*Ls with summed gradients.

    Gradient dicts are merged per branch key, so e.g. the "strong" entry
    collects contributions from both the consistency and spatial terms.
    """
    weights = (float(w1), float(w2), float(w3))
    if any(w < 0 for w in weights):
        raise ValueError("loss weights must be non-negative")
    parts = (lc, lkd, ls)
    value = sum(w * p.value for w, p in zip(weights, parts))
    grads = {}
    for w, p in zip(weights, parts):
        if w == 0.0:
            continue
        for key, g in p.grad.items():
            if key in grads:
                grads[key] = grads[key] + w * g
            else:
                grads[key] = w * g
    return LossValue(value=float(value), grad=grads)
