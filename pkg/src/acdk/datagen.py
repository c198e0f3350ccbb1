"""Deterministic synthetic scenes with analytic ground-truth depth.

Scenes are orthographic: a far-to-near background depth ramp plus a handful
of rectangles and disks at fixed depths, nearest primitive wins per pixel.
Intensity encodes a depth cue (nearer is brighter, scaled by albedo) plus a
low-amplitude value-noise texture; ground truth is inverse depth, min-max
normalized to [0, 1].
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .imagecore import DisparityMap, ImageBuffer, Rng, load_image, load_pfm, \
    save_image, save_pfm

__all__ = [
    "Primitive",
    "Scene",
    "sample_scene",
    "rasterize",
    "render",
    "generate_dataset",
    "load_dataset",
]

BACKGROUND_DEPTH_FAR = 20.0   # meters, top row
BACKGROUND_DEPTH_NEAR = 5.0   # meters, bottom row
DEPTH_RANGE = (1.0, 20.0)
ALBEDO_RANGE = (0.2, 1.0)
TEXTURE_AMPLITUDE = 0.05
TEXTURE_CELL = 8  # value-noise lattice spacing in pixels


@dataclass(frozen=True)
class Primitive:
    kind: str          # "rectangle" or "disk"
    depth: float       # meters
    albedo: float
    row: float         # rect: top edge; disk: center row
    col: float
    size_a: float      # rect: height; disk: radius
    size_b: float      # rect: width; disk: unused


@dataclass(frozen=True)
class Scene:
    primitives: tuple
    background_albedo: float = 0.5

    def __post_init__(self):
        if len(self.primitives) < 1:
            raise ValueError("scene needs at least one primitive")
        for p in self.primitives:
            if p.depth <= 0:
                raise ValueError("primitive depths must be positive")


def sample_scene(rng, size):
    """Random scene with 2..7 primitives; sizes capped so the ramp shows."""
    n = 2 + int(rng.uniform() * 6.0)
    prims = []
    for _ in range(n):
        kind = "disk" if rng.uniform() < 0.5 else "rectangle"
        depth = rng.uniform(*DEPTH_RANGE)
        albedo = rng.uniform(*ALBEDO_RANGE)
        row = rng.uniform(0, size)
        col = rng.uniform(0, size)
        if kind == "disk":
            a = rng.uniform(size * 0.06, size * 0.25)
            b = 0.0
        else:
            a = rng.uniform(size * 0.10, size * 0.45)
            b = rng.uniform(size * 0.10, size * 0.45)
        prims.append(Primitive(kind, depth, albedo, row, col, a, b))
    return Scene(tuple(prims), background_albedo=rng.uniform(0.3, 0.8))


def rasterize(scene, size):
    """Per-pixel (depth, albedo) with nearest-primitive occlusion."""
    rows = np.arange(size, dtype=np.float64)
    ramp = BACKGROUND_DEPTH_FAR + (BACKGROUND_DEPTH_NEAR - BACKGROUND_DEPTH_FAR) * (
        rows / max(size - 1, 1))
    depth = np.tile(ramp[:, None], (1, size))
    albedo = np.full((size, size), scene.background_albedo)
    rr, cc = np.meshgrid(rows, rows, indexing="ij")
    for p in scene.primitives:
        if p.kind == "disk":
            mask = (rr - p.row) ** 2 + (cc - p.col) ** 2 <= p.size_a ** 2
        elif p.kind == "rectangle":
            mask = (rr >= p.row) & (rr < p.row + p.size_a) & \
                   (cc >= p.col) & (cc < p.col + p.size_b)
        else:
            raise ValueError(f"unknown primitive kind {p.kind!r}")
        nearer = mask & (p.depth < depth)
        depth[nearer] = p.depth
        albedo[nearer] = p.albedo
    return depth, albedo


def _value_noise(size, rng):
    # bilinearly interpolated lattice of uniform values in [-1, 1]
    cells = size // TEXTURE_CELL + 2
    lattice = rng.uniform(-1.0, 1.0, size=cells * cells).reshape(cells, cells)
    pos = np.arange(size, dtype=np.float64) / TEXTURE_CELL
    i0 = np.floor(pos).astype(np.int64)
    f = pos - i0
    i1 = i0 + 1
    top = lattice[np.ix_(i0, i0)] * (1 - f)[None, :] + lattice[np.ix_(i0, i1)] * f[None, :]
    bot = lattice[np.ix_(i1, i0)] * (1 - f)[None, :] + lattice[np.ix_(i1, i1)] * f[None, :]
    return top * (1 - f)[:, None] + bot * f[:, None]


def render(scene, size, rng):
    """Render a scene to a 3-channel image and its ground-truth disparity."""
    if size % 8:
        raise ValueError("size must be divisible by 8")
    depth, albedo = rasterize(scene, size)
    disparity = 1.0 / depth
    lo, hi = disparity.min(), disparity.max()
    if hi == lo:
        raise ValueError("degenerate scene: constant depth everywhere")
    disp_norm = (disparity - lo) / (hi - lo)
    shading = albedo * (0.5 + 0.5 * disp_norm)
    texture = TEXTURE_AMPLITUDE * _value_noise(size, rng)
    intensity = np.clip(shading + texture, 0.0, 1.0)
    img = ImageBuffer(np.repeat(intensity[:, :, None], 3, axis=2))
    return img, DisparityMap(disp_norm)


def generate_dataset(n, size, seed, out_dir):
    """Write n rendered scenes (PPM + PFM + JSON-lines manifest).

    Fully deterministic: scene i comes from the child stream (seed,
    "scene/i"), so re-running with the same arguments reproduces the corpus
    byte for byte. Returns the manifest records.
    """
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    root = Rng(seed)
    records = []
    for i in range(n):
        stream = root.fork(f"scene/{i}")
        scene = sample_scene(stream, size)
        img, gt = render(scene, size, stream)
        image_name = f"img_{i:05d}.ppm"
        gt_name = f"gt_{i:05d}.pfm"
        save_image(img, os.path.join(out_dir, image_name))
        save_pfm(gt, os.path.join(out_dir, gt_name))
        records.append({"image": image_name, "gt": gt_name, "seed": int(seed)})
    with open(os.path.join(out_dir, "manifest.jsonl"), "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    return records


def load_dataset(data_dir, with_gt=True):
    """Read a generated corpus back as (name, image, gt-or-None) triples."""
    manifest = os.path.join(data_dir, "manifest.jsonl")
    entries = []
    if os.path.exists(manifest):
        with open(manifest) as f:
            for line in f:
                line = line.strip()
                if line:
                    entries.append(json.loads(line))
    else:
        for name in sorted(os.listdir(data_dir)):
            if name.endswith((".ppm", ".pgm")):
                stem = os.path.splitext(name)[0]
                gt = stem.replace("img_", "gt_") + ".pfm"
                entries.append({"image": name,
                                "gt": gt if os.path.exists(
                                    os.path.join(data_dir, gt)) else None})
    out = []
    for rec in entries:
        img = load_image(os.path.join(data_dir, rec["image"]))
        gt = None
        if with_gt and rec.get("gt"):
            gt_path = os.path.join(data_dir, rec["gt"])
            if os.path.exists(gt_path):
                gt = load_pfm(gt_path)
        out.append((rec["image"], img, gt))
    if not out:
        raise ValueError(f"no images found in {data_dir}")
    return out
