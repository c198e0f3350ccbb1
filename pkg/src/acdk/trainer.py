"""Two-branch consistency training loop with a frozen-teacher anchor.

Each step builds a weakly transformed view (shared horizontal flip plus
small brightness jitter) and a perturbed strong view of every batch image,
then combines three losses: prediction consistency between the branches,
distillation of the weak branch toward the frozen teacher, and the
spatial-distance constraint on the strong branch. Gradients are averaged
over the batch and applied with decoupled-weight-decay Adam.

Because the toy network starts from random weights rather than a pretrained
backbone, ``train`` can first run a supervised pretraining stage against
ground-truth disparity (``pretrain_steps``); the teacher is cloned from the
student after that stage.
"""

import json
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .corruption import SchedulerConfig, schedule_perturb
from .imagecore import ImageBuffer, Rng
from .losses import affine_invariant_loss, consistency_loss, kd_loss, total_loss
from .model import adam_update, backward, clone_frozen, forward, init_model, \
    save_checkpoint, set_encoder_frozen, zero_grads
from .sdr import SdrConfig, patchify, sdr_loss

__all__ = [
    "TrainConfig",
    "StepReport",
    "TrainingError",
    "parse_config",
    "build_branches",
    "branch_losses",
    "train_step",
    "pretrain_step",
    "run_pretraining",
    "run_finetuning",
    "train",
    "write_reports",
]

CONSISTENCY_MODES = ("stop_grad_weak", "both_branches")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # loss weights for consistency / distillation / spatial-distance terms
    lambda1: float = 1.0 / 3.0
    lambda2: float = 1.0 / 3.0
    lambda3: float = 1.0 / 3.0
    # 1e-3 suits the randomly initialized toy net; foundation-scale
    # fine-tuning of a pretrained backbone would sit near 5e-6
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 4
    epochs: int = 1
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    sdr: SdrConfig = field(default_factory=lambda: SdrConfig(patch_size=8))
    freeze_encoder: bool = True
    seed: int = 0
    consistency_mode: str = "stop_grad_weak"
    jitter: float = 0.05         # weak-branch brightness jitter amplitude
    pretrain_steps: int = 0      # supervised warm-up before teacher cloning

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0 or self.pretrain_steps < 0:
            raise ValueError("epochs and pretrain_steps must be >= 0")
        if self.consistency_mode not in CONSISTENCY_MODES:
            raise ValueError(f"consistency_mode must be one of {CONSISTENCY_MODES}")


@dataclass
class StepReport:
    step: int
    stage: str
    lc: float
    lkd: float
    ls: float
    total: float
    applied: list
    grad_norm: float

    def to_json(self):
        return json.dumps({
            "step": self.step, "stage": self.stage, "lc": self.lc,
            "lkd": self.lkd, "ls": self.ls, "total": self.total,
            "applied": self.applied, "grad_norm": self.grad_norm,
        })


# ---------------------------------------------------------------------------
# Config files: line-oriented "key = value", '#' comments
# ---------------------------------------------------------------------------

_SCALAR_KEYS = {
    "lambda1": float, "lambda2": float, "lambda3": float,
    "lr": float, "weight_decay": float, "jitter": float,
    "batch_size": int, "epochs": int, "seed": int, "pretrain_steps": int,
    "freeze_encoder": None, "consistency_mode": str,
}
_SCHED_KEYS = {"p_blur": float, "p_weather": float, "apply_dark": None}
_SDR_KEYS = {"metric": str, "paradigm": str, "patch_size": int}


def _parse_bool(text):
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def parse_config(path):
    """Read a TrainConfig from a key = value file.

    Nested fields use dotted keys: scheduler.p_blur, scheduler.p_weather,
    scheduler.apply_dark, sdr.metric, sdr.paradigm, sdr.patch_size.
    Unknown keys are rejected.
    """
    top = {}
    sched = {}
    sdr_kw = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key.startswith("scheduler."):
                sub = key[len("scheduler."):]
                if sub not in _SCHED_KEYS:
                    raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
                conv = _SCHED_KEYS[sub]
                sched[sub] = _parse_bool(value) if conv is None else conv(value)
            elif key.startswith("sdr."):
                sub = key[len("sdr."):]
                if sub not in _SDR_KEYS:
                    raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
                sdr_kw[sub] = _SDR_KEYS[sub](value)
            elif key in _SCALAR_KEYS:
                conv = _SCALAR_KEYS[key]
                top[key] = _parse_bool(value) if conv is None else conv(value)
            else:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
    cfg = TrainConfig(**top)
    if sched:
        cfg = replace(cfg, scheduler=SchedulerConfig(**sched))
    if sdr_kw:
        base = {f.name: getattr(cfg.sdr, f.name) for f in fields(SdrConfig)}
        base.update(sdr_kw)
        cfg = replace(cfg, sdr=SdrConfig(**base))
    return cfg


# ---------------------------------------------------------------------------
# Branch construction
# ---------------------------------------------------------------------------


def build_branches(batch, cfg, rng):
    """Weak and strong views per image plus the applied-corruption log.

    The weak view is a shared-geometry regular transform (random horizontal
    flip, then brightness jitter); the strong view is the scheduled
    perturbation of the weak view, so the two differ only photometrically.
    """
    if not batch:
        raise ValueError("empty batch")
    weak, strong, logs = [], [], []
    for i, img in enumerate(batch):
        stream = rng.fork(f"aug/{i}")
        data = img.data
        if stream.uniform() < 0.5:
            data = data[:, ::-1, :]
        if cfg.jitter > 0:
            factor = stream.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter)
            data = np.clip(data * factor, 0.0, 1.0)
        w = ImageBuffer(np.ascontiguousarray(data))
        s, applied = schedule_perturb(w, cfg.scheduler, stream)
        weak.append(w)
        strong.append(s)
        logs.append([[kind, sev] for kind, sev in applied])
    return weak, strong, logs


def branch_losses(pred_weak, pred_strong, pred_teacher, cfg):
    """Per-image weighted loss with its per-branch prediction gradients.

    Returns (lc, lkd, ls, combined) LossValues; combined.grad carries
    "strong" and, when any weak-branch term is active, "weak".
    """
    lc = consistency_loss(pred_weak, pred_strong,
                          both_branches=cfg.consistency_mode == "both_branches")
    lkd = kd_loss(pred_weak, pred_teacher)
    grid_s = patchify(pred_strong, cfg.sdr.patch_size)
    ref = pred_teacher if cfg.sdr.paradigm == "kd" else pred_weak
    grid_r = patchify(ref, cfg.sdr.patch_size)
    ls = sdr_loss(grid_s, grid_r, cfg.sdr.metric)
    combined = total_loss(lc, lkd, ls, cfg.lambda1, cfg.lambda2, cfg.lambda3)
    combined.grad.pop("strong_values", None)
    return lc, lkd, ls, combined


def _grad_norm(m):
    total = 0.0
    for layer in m.layers.values():
        if layer.frozen:
            continue
        total += float((layer.gw ** 2).sum() + (layer.gb ** 2).sum())
    return math.sqrt(total)


def train_step(student, teacher, batch, cfg, rng, step=0, stage="finetune"):
    """One optimization step of the combined objective over a batch.

    Computes student predictions on both branches and the teacher's on the
    weak branch, backpropagates the batch-averaged weighted gradient, and
    applies the decoupled-weight-decay Adam update to unfrozen parameters.
    """
    weak, strong, logs = build_branches(batch, cfg, rng)
    n = len(batch)
    zero_grads(student)
    lc_sum = lkd_sum = ls_sum = tot_sum = 0.0
    for i in range(n):
        pw, cache_w = forward(student, weak[i])
        ps, cache_s = forward(student, strong[i])
        pt, _ = forward(teacher, weak[i])
        lc, lkd, ls, combined = branch_losses(pw.data, ps.data, pt.data, cfg)
        if not math.isfinite(combined.value):
            raise TrainingError(
                f"non-finite loss at step {step} (image {i}): "
                f"lc={lc.value} lkd={lkd.value} ls={ls.value}")
        g_strong = combined.grad.get("strong")
        g_weak = combined.grad.get("weak")
        if g_strong is not None and np.any(g_strong):
            backward(student, cache_s, g_strong / n)
        if g_weak is not None and np.any(g_weak):
            backward(student, cache_w, g_weak / n)
        lc_sum += lc.value
        lkd_sum += lkd.value
        ls_sum += ls.value
        tot_sum += combined.value
    norm = _grad_norm(student)
    adam_update(student, cfg.lr, cfg.weight_decay)
    return StepReport(step=step, stage=stage, lc=lc_sum / n, lkd=lkd_sum / n,
                      ls=ls_sum / n, total=tot_sum / n,
                      applied=logs, grad_norm=norm)


def pretrain_step(student, batch, cfg, rng, step=0):
    """Supervised warm-up step: affine-invariant loss against ground truth.

    ``batch`` holds (image, gt_disparity) pairs; only the weak-style
    regular transform is applied, with the same flip on image and target.
    """
    n = len(batch)
    zero_grads(student)
    loss_sum = 0.0
    for i, (img, gt) in enumerate(batch):
        stream = rng.fork(f"aug/{i}")
        data, target = img.data, gt.data
        if stream.uniform() < 0.5:
            data = data[:, ::-1, :]
            target = target[:, ::-1]
        if cfg.jitter > 0:
            factor = stream.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter)
            data = np.clip(data * factor, 0.0, 1.0)
        pred, cache = forward(student, np.ascontiguousarray(data))
        sup = affine_invariant_loss(pred.data, np.ascontiguousarray(target))
        if not math.isfinite(sup.value):
            raise TrainingError(f"non-finite supervised loss at step {step}")
        backward(student, cache, sup.grad["pred"] / n)
        loss_sum += sup.value
    norm = _grad_norm(student)
    adam_update(student, cfg.lr, cfg.weight_decay)
    return StepReport(step=step, stage="pretrain", lc=0.0, lkd=0.0, ls=0.0,
                      total=loss_sum / n, applied=[], grad_norm=norm)


# ---------------------------------------------------------------------------
# Epoch orchestration
# ---------------------------------------------------------------------------


def _shuffled_batches(n_items, batch_size, rng):
    order = np.argsort(rng.uniform(size=n_items), kind="stable")
    return [order[i:i + batch_size] for i in range(0, n_items, batch_size)]


def run_pretraining(student, dataset, steps, cfg, rng, reports=None):
    """Run supervised steps, cycling through shuffled epochs of the data."""
    pairs = [(img, gt) for _, img, gt in dataset]
    if any(gt is None for _, gt in pairs):
        raise TrainingError("pretraining requires ground-truth disparity files")
    reports = [] if reports is None else reports
    step = 0
    epoch = 0
    while step < steps:
        for idx in _shuffled_batches(len(pairs), cfg.batch_size,
                                     rng.fork(f"pre-shuffle/{epoch}")):
            if step >= steps:
                break
            batch = [pairs[j] for j in idx]
            reports.append(pretrain_step(student, batch, cfg,
                                         rng.fork(f"pre-step/{step}"), step))
            step += 1
        epoch += 1
    return reports


def run_finetuning(student, teacher, dataset, cfg, rng, reports=None,
                   max_steps=None, on_epoch_end=None):
    """Fine-tune for cfg.epochs (or max_steps) with per-epoch shuffling."""
    images = [img for _, img, _ in dataset]
    reports = [] if reports is None else reports
    step = 0
    epoch = 0
    while True:
        if max_steps is not None:
            if step >= max_steps:
                break
        elif epoch >= cfg.epochs:
            break
        for idx in _shuffled_batches(len(images), cfg.batch_size,
                                     rng.fork(f"shuffle/{epoch}")):
            if max_steps is not None and step >= max_steps:
                break
            batch = [images[j] for j in idx]
            reports.append(train_step(student, teacher, batch, cfg,
                                      rng.fork(f"step/{step}"), step))
            step += 1
        epoch += 1
        if on_epoch_end is not None:
            on_epoch_end(epoch, student)
    return reports


def train(cfg, data_dir, out_ckpt, log_path=None):
    """Full protocol: optional supervised warm-up, teacher clone, fine-tune.

    Shuffling, augmentation, and corruption all derive from cfg.seed, so a
    rerun reproduces the report stream exactly. The checkpoint is written
    after every fine-tuning epoch and at the end.
    """
    from .datagen import load_dataset

    dataset = load_dataset(data_dir, with_gt=True)
    rng = Rng(cfg.seed)
    student = init_model(cfg.seed, input_channels=3)
    reports = []
    if cfg.pretrain_steps > 0:
        run_pretraining(student, dataset, cfg.pretrain_steps, cfg, rng, reports)
    set_encoder_frozen(student, cfg.freeze_encoder)
    teacher = clone_frozen(student)
    run_finetuning(student, teacher, dataset, cfg, rng, reports,
                   on_epoch_end=lambda _e, m: save_checkpoint(m, out_ckpt))
    save_checkpoint(student, out_ckpt)
    if log_path:
        write_reports(reports, log_path)
    return reports


def write_reports(reports, path):
    with open(path, "w") as f:
        for rep in reports:
            f.write(rep.to_json() + "\n")
