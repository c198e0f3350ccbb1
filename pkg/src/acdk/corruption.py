"""Image perturbation synthesizer: darkness, weather, blur, and contrast.

Seven corruption kinds, each with 5 severity levels, plus a probabilistic
scheduler that applies darkness to every image and at most one blur OR one
weather/contrast perturbation on top (the categories are mutually
exclusive). Every operation consumes draws from the supplied Rng in a fixed
order, so equal (input, severity, seed) gives bitwise-equal output.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imagecore import ImageBuffer

__all__ = [
    "KINDS",
    "BLUR_KINDS",
    "WEATHER_KINDS",
    "SchedulerConfig",
    "apply_dark",
    "apply_fog",
    "apply_snow",
    "apply_motion_blur",
    "apply_zoom_blur",
    "apply_contrast",
    "apply_gaussian_noise",
    "apply_corruption",
    "schedule_perturb",
    "motion_blur_kernel",
    "plasma_field",
]

KINDS = ("dark", "fog", "snow", "motion_blur", "zoom_blur", "contrast",
         "gaussian_noise")
BLUR_KINDS = ("motion_blur", "zoom_blur")
WEATHER_KINDS = ("fog", "snow", "contrast")

# Severity calibration, level 1..5. These are this artifact's choices,
# centralized here for re-tuning; each op reads one row by severity index.
DARK_GAMMA = (1.4, 1.8, 2.2, 2.6, 3.0)
DARK_PHOTON_BUDGET = (200.0, 120.0, 80.0, 50.0, 30.0)
DARK_READ_NOISE = (0.01, 0.02, 0.03, 0.04, 0.05)
FOG_DECAY = (0.75, 0.70, 0.65, 0.60, 0.55)
FOG_STRENGTH = (0.3, 0.4, 0.5, 0.6, 0.7)
SNOW_MEAN = (0.10, 0.15, 0.20, 0.25, 0.30)
SNOW_SIGMA = 0.3
SNOW_EXPONENT = 1.5
SNOW_BLUR_RADIUS = (4, 6, 8, 10, 12)
MOTION_RADIUS = (3, 5, 7, 9, 12)
ZOOM_LAYERS = (5, 8, 11, 14, 17)
ZOOM_STEP = 0.01
CONTRAST_COEF = (0.4, 0.3, 0.2, 0.1, 0.05)
NOISE_SIGMA = (0.04, 0.06, 0.08, 0.09, 0.10)


def _severity_index(severity):
    level = int(severity)
    if level < 1 or level > 5:
        raise ValueError(f"severity must be in 1..5, got {severity}")
    return level - 1


@dataclass(frozen=True)
class SchedulerConfig:
    """Per-image perturbation probabilities.

    p_blur and p_weather split a single uniform draw, so at most one of the
    two categories fires per image; darkness is applied unconditionally when
    apply_dark is set.
    """

    p_blur: float = 0.1
    p_weather: float = 0.2
    apply_dark: bool = True

    def __post_init__(self):
        if not (0.0 <= self.p_blur <= 1.0 and 0.0 <= self.p_weather <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.p_blur + self.p_weather > 1.0:
            raise ValueError("p_blur + p_weather must not exceed 1")


def _clamp_image(data):
    return ImageBuffer(np.clip(data, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Darkness
# ---------------------------------------------------------------------------


def apply_dark(img, severity, rng):
    """Low-light simulation: gamma dimming, photon shot noise, read noise.

    The gamma curve (gamma > 1) darkens the image, a per-pixel Poisson draw
    with a severity-dependent photon budget models shot noise, and additive
    Gaussian noise models sensor read noise.
    """
    i = _severity_index(severity)
    gamma = DARK_GAMMA[i]
    budget = DARK_PHOTON_BUDGET[i]
    read_sigma = DARK_READ_NOISE[i]
    dim = img.data ** gamma
    photons = rng.poisson(dim.ravel() * budget).astype(np.float64) / budget
    noisy = photons + rng.normal(0.0, read_sigma, size=photons.size)
    return _clamp_image(noisy.reshape(img.data.shape))


# ---------------------------------------------------------------------------
# Fog
# ---------------------------------------------------------------------------


def _diamond_square(side, decay, rng):
    grid = np.zeros((side, side))
    grid[0, 0] = rng.uniform()
    grid[0, -1] = rng.uniform()
    grid[-1, 0] = rng.uniform()
    grid[-1, -1] = rng.uniform()
    amp = 1.0
    step = side - 1
    while step > 1:
        half = step // 2
        # diamond pass: square centers
        r = np.arange(0, side - 1, step)
        c = np.arange(0, side - 1, step)
        tl = grid[np.ix_(r, c)]
        tr = grid[np.ix_(r, c + step)]
        bl = grid[np.ix_(r + step, c)]
        br = grid[np.ix_(r + step, c + step)]
        noise = rng.uniform(-amp, amp, size=r.size * c.size).reshape(r.size, c.size)
        grid[np.ix_(r + half, c + half)] = (tl + tr + bl + br) / 4.0 + noise
        # square pass: edge midpoints on two interleaved lattices
        for row0, col0 in ((0, half), (half, 0)):
            rr = np.arange(row0, side, step)
            cc = np.arange(col0, side, step)
            rows, cols = np.meshgrid(rr, cc, indexing="ij")
            acc = np.zeros(rows.shape)
            cnt = np.zeros(rows.shape)
            for dr, dc in ((-half, 0), (half, 0), (0, -half), (0, half)):
                nr = rows + dr
                nc = cols + dc
                ok = (nr >= 0) & (nr < side) & (nc >= 0) & (nc < side)
                acc[ok] += grid[nr[ok], nc[ok]]
                cnt[ok] += 1.0
            noise = rng.uniform(-amp, amp, size=rows.size).reshape(rows.shape)
            grid[rows, cols] = acc / cnt + noise
        amp *= decay
        step = half
    return grid


def plasma_field(height, width, decay, rng):
    """Diamond-square plasma cloud cropped to height x width, in [0, 1].

    The generating lattice has side 2^k + 1 >= max(height, width); the crop
    is min-max normalized so the field spans exactly [0, 1].
    """
    target = max(height, width)
    k = max(1, math.ceil(math.log2(max(target - 1, 1))))
    side = 2 ** k + 1
    field = _diamond_square(side, decay, rng)[:height, :width]
    lo = field.min()
    hi = field.max()
    if hi == lo:
        return np.zeros_like(field)
    return (field - lo) / (hi - lo)


def apply_fog(img, severity, rng):
    """Blend toward white through a plasma density field.

    out = img * (1 - a*P) + a*P, so no pixel drops below img * (1 - a).
    """
    i = _severity_index(severity)
    field = plasma_field(img.height, img.width, FOG_DECAY[i], rng)
    alpha = FOG_STRENGTH[i]
    fogged = img.data * (1.0 - alpha * field[:, :, None]) + alpha * field[:, :, None]
    return _clamp_image(fogged)


# ---------------------------------------------------------------------------
# Snow
# ---------------------------------------------------------------------------


def motion_blur_kernel(angle_deg, radius, sigma):
    """Directional blur kernel: a 1D Gaussian splatted along one direction.

    Taps t in {-radius..radius} carry weight exp(-t^2 / (2 sigma^2)) and are
    placed at sub-pixel offsets (t*cos, t*sin) from the center of a
    (2r+1)^2 grid with bilinear weights; the result is normalized to sum 1.
    """
    radius = int(radius)
    if radius < 1:
        raise ValueError("radius must be >= 1")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    size = 2 * radius + 1
    kern = np.zeros((size, size))
    theta = math.radians(angle_deg)
    dx, dy = math.cos(theta), math.sin(theta)
    for t in range(-radius, radius + 1):
        w = math.exp(-(t * t) / (2.0 * sigma * sigma))
        col = radius + t * dx
        row = radius + t * dy
        r0, c0 = int(math.floor(row)), int(math.floor(col))
        fr, fc = row - r0, col - c0
        for rr, wr in ((r0, 1.0 - fr), (r0 + 1, fr)):
            for cc, wc in ((c0, 1.0 - fc), (c0 + 1, fc)):
                if wr > 0.0 and wc > 0.0 and 0 <= rr < size and 0 <= cc < size:
                    kern[rr, cc] += w * wr * wc
    return kern / kern.sum()


def _convolve_channels(data, kern):
    out = np.empty_like(data)
    for ch in range(data.shape[2]):
        out[:, :, ch] = ndimage.convolve(data[:, :, ch], kern, mode="nearest")
    return out


def apply_snow(img, severity, rng):
    """Additive snow: sparsified Gaussian field streaked by downward blur.

    The field is thresholded and raised to an exponent to isolate flakes,
    blurred along a falling direction, and composited with max(), so snow
    never darkens a pixel.
    """
    i = _severity_index(severity)
    field = rng.normal(SNOW_MEAN[i], SNOW_SIGMA, size=img.height * img.width)
    flakes = np.clip(field.reshape(img.height, img.width), 0.0, 1.0) ** SNOW_EXPONENT
    angle = rng.uniform(-135.0, -45.0)
    radius = SNOW_BLUR_RADIUS[i]
    kern = motion_blur_kernel(angle, radius, radius / 2.0)
    streaks = ndimage.convolve(flakes, kern, mode="nearest")
    return _clamp_image(np.maximum(img.data, streaks[:, :, None]))


# ---------------------------------------------------------------------------
# Blurs
# ---------------------------------------------------------------------------


def apply_motion_blur(img, severity, rng):
    """Directional blur with a random angle in [-45, 45] degrees."""
    i = _severity_index(severity)
    angle = rng.uniform(-45.0, 45.0)
    radius = MOTION_RADIUS[i]
    kern = motion_blur_kernel(angle, radius, radius / 2.0)
    return _clamp_image(_convolve_channels(img.data, kern))


def _center_zoom(data, factor):
    # inverse-map bilinear sampling about the image center; equivalent to
    # upscale-then-center-crop and exact at the center pixel
    h, w = data.shape[:2]
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    rows = cr + (np.arange(h) - cr) / factor
    cols = cc + (np.arange(w) - cc) / factor
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    top = data[r0][:, c0] * (1 - fc)[None, :, None] + data[r0][:, c1] * fc[None, :, None]
    bot = data[r1][:, c0] * (1 - fc)[None, :, None] + data[r1][:, c1] * fc[None, :, None]
    return top * (1 - fr)[:, None, None] + bot * fr[:, None, None]


def apply_zoom_blur(img, severity, rng, layers=None):
    """Average of progressively zoomed-in copies (factors 1, 1.01, ...)."""
    n = ZOOM_LAYERS[_severity_index(severity)] if layers is None else int(layers)
    acc = np.zeros_like(img.data)
    for k in range(n):
        acc += _center_zoom(img.data, 1.0 + k * ZOOM_STEP)
    return _clamp_image(acc / n)


# ---------------------------------------------------------------------------
# Contrast and sensor noise
# ---------------------------------------------------------------------------


def apply_contrast(img, severity, rng, coef=None):
    """Scale intensities about the per-channel mean by a coefficient < 1."""
    c = CONTRAST_COEF[_severity_index(severity)] if coef is None else float(coef)
    mean = img.data.mean(axis=(0, 1), keepdims=True)
    return _clamp_image(mean + c * (img.data - mean))


def apply_gaussian_noise(img, severity, rng, sigma=None):
    """Additive white Gaussian noise."""
    s = NOISE_SIGMA[_severity_index(severity)] if sigma is None else float(sigma)
    if s == 0.0:
        return img.copy()
    noise = rng.normal(0.0, s, size=img.data.size).reshape(img.data.shape)
    return _clamp_image(img.data + noise)


_APPLY = {
    "dark": apply_dark,
    "fog": apply_fog,
    "snow": apply_snow,
    "motion_blur": apply_motion_blur,
    "zoom_blur": apply_zoom_blur,
    "contrast": apply_contrast,
    "gaussian_noise": apply_gaussian_noise,
}


def apply_corruption(img, kind, severity, rng):
    """Apply one corruption by name; see KINDS for the valid tags."""
    try:
        op = _APPLY[kind]
    except KeyError:
        raise ValueError(f"unknown corruption kind {kind!r}; valid: {KINDS}") from None
    return op(img, severity, rng)


def _draw_severity(rng):
    return 1 + min(4, int(rng.uniform() * 5.0))


def schedule_perturb(img, cfg, rng):
    """Randomized perturbation pipeline for one image.

    Darkness applies whenever cfg.apply_dark. A single uniform draw then
    selects at most one extra category: u < p_blur picks one blur kind
    (motion or zoom, never both), p_blur <= u < p_blur + p_weather picks one
    of fog/snow/contrast. Severities are uniform in 1..5 per applied kind.
    Returns the perturbed image and the (kind, severity) log.
    """
    if not isinstance(cfg, SchedulerConfig):
        raise TypeError("cfg must be a SchedulerConfig")
    out = img
    applied = []
    if cfg.apply_dark:
        sev = _draw_severity(rng)
        out = apply_dark(out, sev, rng)
        applied.append(("dark", sev))
    u = rng.uniform()
    if u < cfg.p_blur:
        kind = BLUR_KINDS[min(1, int(rng.uniform() * 2.0))]
        sev = _draw_severity(rng)
        out = _APPLY[kind](out, sev, rng)
        applied.append((kind, sev))
    elif u < cfg.p_blur + cfg.p_weather:
        kind = WEATHER_KINDS[min(2, int(rng.uniform() * 3.0))]
        sev = _draw_severity(rng)
        out = _APPLY[kind](out, sev, rng)
        applied.append((kind, sev))
    if not applied:
        out = img.copy()
    return out, applied
