"""Core containers, deterministic RNG, and bit-exact image/disparity file I/O.

Supported formats are deliberately minimal: binary PGM (P5) and PPM (P6)
with 8-bit samples for images, and single-channel PFM ("Pf", little-endian,
scale -1.0) for disparity maps. All of them are header-trivial, so round
trips are byte-exact and testable without third-party decoders.
"""

import math
import os

import numpy as np
from scipy.special import gammaln

__all__ = [
    "FileFormatError",
    "ImageBuffer",
    "DisparityMap",
    "Rng",
    "load_image",
    "save_image",
    "load_pfm",
    "save_pfm",
    "worker_count",
]


class FileFormatError(ValueError):
    """Raised for malformed or unsupported image/disparity files."""


def worker_count():
    """Worker cap for data-parallel loops: ACDK_THREADS, else available cores."""
    env = os.environ.get("ACDK_THREADS")
    if env is not None:
        n = int(env)
        if n < 1:
            raise ValueError("ACDK_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


class ImageBuffer:
    """H x W x C array of intensities in [0, 1]; C is 1 (gray) or 3 (RGB).

    Producers are responsible for clamping; the constructor rejects anything
    outside [0, 1] so invariant violations surface at the producer.
    """

    __slots__ = ("height", "width", "channels", "data")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"image must be HxWx1 or HxWx3, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must have positive height and width")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image intensities must lie in [0, 1]")
        self.data = arr
        self.height, self.width, self.channels = arr.shape

    def copy(self):
        return ImageBuffer(self.data.copy())


class DisparityMap:
    """Dense H x W non-negative disparity field (inverse relative depth)."""

    __slots__ = ("height", "width", "data")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"disparity map must be HxW, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("disparity map must have positive height and width")
        if not np.all(np.isfinite(arr)):
            raise ValueError("disparity map contains non-finite values")
        if arr.min() < 0.0:
            raise ValueError("disparity values must be non-negative")
        self.data = arr
        self.height, self.width = arr.shape

    def copy(self):
        return DisparityMap(self.data.copy())


# ---------------------------------------------------------------------------
# Deterministic counter-based RNG
# ---------------------------------------------------------------------------

_U64 = np.uint64
_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)

# 1/2^53: a 53-bit integer scaled by this lands exactly on an IEEE double
_INV53 = float(np.ldexp(1.0, -53))


def _mix64(x):
    """SplitMix64 finalizer; accepts scalars or uint64 arrays."""
    with np.errstate(over="ignore"):
        z = (x + _GOLDEN) & _MASK64
        z = ((z ^ (z >> _U64(30))) * _MIX1) & _MASK64
        z = ((z ^ (z >> _U64(27))) * _MIX2) & _MASK64
        return z ^ (z >> _U64(31))


def _fnv1a64(data):
    h = _FNV_OFFSET
    with np.errstate(over="ignore"):
        for byte in data:
            h = ((h ^ _U64(byte)) * _FNV_PRIME) & _MASK64
    return h


class Rng:
    """Counter-based deterministic generator.

    The i-th raw 64-bit word is ``mix64(key + i * GOLDEN)`` where ``key`` is
    derived from the seed, so draws are pure integer arithmetic: identical
    seeds give identical streams on every platform. Child streams fork by
    label, ``key_child = mix64(key ^ fnv1a64(label))``, and are independent
    of the parent's position. Reference vectors live in the test suite.

    Single-owner: do not share one instance across parallel work; fork one
    labeled child per task instead.
    """

    __slots__ = ("key", "counter")

    def __init__(self, seed, _key=None):
        if _key is not None:
            self.key = _U64(_key)
        else:
            if not isinstance(seed, (int, np.integer)):
                raise TypeError("seed must be an integer")
            self.key = _mix64(_U64(int(seed) & 0xFFFFFFFFFFFFFFFF))
        self.counter = _U64(0)

    def fork(self, label):
        """Independent child stream keyed by (this stream, label)."""
        child_key = _mix64(self.key ^ _fnv1a64(label.encode("utf-8")))
        return Rng(0, _key=child_key)

    def raw(self, size=None):
        """Raw uniform 64-bit words (scalar int, or uint64 array)."""
        n = 1 if size is None else int(size)
        with np.errstate(over="ignore"):
            idx = self.counter + np.arange(n, dtype=np.uint64)
            out = _mix64((self.key + idx * _GOLDEN) & _MASK64)
            self.counter = (self.counter + _U64(n)) & _MASK64
        if size is None:
            return int(out[0])
        return out

    def uniform(self, lo=0.0, hi=1.0, size=None):
        """Uniform draw(s) in [lo, hi); degenerate lo == hi returns lo."""
        if lo > hi:
            raise ValueError(f"uniform requires lo <= hi, got ({lo}, {hi})")
        u = (self.raw(size) >> _U64(11)) * _INV53 if size is not None else (
            self.raw() >> 11) * _INV53
        return lo + u * (hi - lo)

    def normal(self, mu=0.0, sigma=1.0, size=None):
        """Gaussian draw(s) via Box-Muller on consecutive uniform pairs."""
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        n = 1 if size is None else int(size)
        pairs = (n + 1) // 2
        u = (self.raw(2 * pairs) >> _U64(11)) * _INV53
        u1 = u[:pairs]
        u2 = u[pairs:]
        r = np.sqrt(-2.0 * np.log1p(-u1))  # 1-u1 in (0,1], avoids log(0)
        theta = (2.0 * math.pi) * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        out = mu + sigma * z
        if size is None:
            return float(out[0])
        return out

    def poisson(self, lam, size=None):
        """Poisson draw(s); lam is a scalar or an array matching size.

        Small rates use Knuth's product-of-uniforms method; rates >= 10 use
        Hormann's PTRS transformed rejection. Both consume the stream in a
        deterministic order, so results are reproducible per seed.
        """
        scalar = size is None and np.isscalar(lam)
        lam_arr = np.atleast_1d(np.asarray(lam, dtype=np.float64))
        if size is not None:
            if lam_arr.size == 1:
                lam_arr = np.full(int(size), float(lam_arr[0]))
            elif lam_arr.size != int(size):
                raise ValueError("poisson size does not match rate array")
        if lam_arr.size and lam_arr.min() < 0:
            raise ValueError("poisson rate must be >= 0")
        out = np.zeros(lam_arr.shape, dtype=np.int64)
        small = (lam_arr > 0) & (lam_arr < 10.0)
        big = lam_arr >= 10.0
        if np.any(small):
            out[small] = self._poisson_knuth(lam_arr[small])
        if np.any(big):
            out[big] = self._poisson_ptrs(lam_arr[big])
        if scalar:
            return int(out[0])
        return out

    def _poisson_knuth(self, lam):
        # k = (number of uniform factors needed to drive the product below
        # exp(-lam)) - 1, i.e. increment while the product stays above.
        limit = np.exp(-lam)
        k = np.zeros(lam.shape, dtype=np.int64)
        p = np.ones(lam.shape)
        active = np.arange(lam.size)
        while active.size:
            u = (self.raw(active.size) >> _U64(11)) * _INV53
            p[active] *= u
            still = p[active] > limit[active]
            k[active[still]] += 1
            active = active[still]
        return k

    def _poisson_ptrs(self, lam):
        out = np.empty(lam.shape, dtype=np.int64)
        todo = np.arange(lam.size)
        loglam = np.log(lam)
        b = 0.931 + 2.53 * np.sqrt(lam)
        a = -0.059 + 0.02483 * b
        inv_alpha = 1.1239 + 1.1328 / (b - 3.4)
        v_r = 0.9277 - 3.6224 / (b - 2.0)
        while todo.size:
            m = todo.size
            u = (self.raw(m) >> _U64(11)) * _INV53 - 0.5
            v = (self.raw(m) >> _U64(11)) * _INV53
            us = 0.5 - np.abs(u)
            k = np.floor((2.0 * a[todo] / us + b[todo]) * u + lam[todo] + 0.43)
            accept = (us >= 0.07) & (v <= v_r[todo])
            reject = (k < 0) | ((us < 0.013) & (v > us))
            need_log = ~accept & ~reject
            if np.any(need_log):
                idx = todo[need_log]
                kk = k[need_log]
                with np.errstate(divide="ignore"):
                    lhs = np.log(
                        v[need_log]
                        * inv_alpha[idx]
                        / (a[idx] / us[need_log] ** 2 + b[idx])
                    )
                rhs = kk * loglam[idx] - lam[idx] - gammaln(kk + 1.0)
                accept_log = lhs <= rhs
                acc2 = np.zeros(m, dtype=bool)
                acc2[need_log] = accept_log
                accept = accept | acc2
            out[todo[accept]] = k[accept].astype(np.int64)
            todo = todo[~accept]
        return out


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------


def _read_pnm_token(stream):
    """Next whitespace-delimited header token, skipping '#' comments."""
    token = b""
    while True:
        ch = stream.read(1)
        if ch == b"":
            raise FileFormatError("malformed header: unexpected end of file")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = stream.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def load_image(path):
    """Read a binary PGM (P5) or PPM (P6) file with maxval 255.

    Intensities are mapped linearly from [0, 255] to [0, 1].
    """
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic not in (b"P5", b"P6"):
            raise FileFormatError(f"malformed header: bad magic {magic!r}")
        channels = 1 if magic == b"P5" else 3
        width = int(_read_pnm_token(f))
        height = int(_read_pnm_token(f))
        maxval = int(_read_pnm_token(f))
        if width < 1 or height < 1:
            raise FileFormatError("malformed header: non-positive dimensions")
        if maxval != 255:
            raise FileFormatError(f"unsupported maxval: {maxval} (only 255)")
        payload = f.read(height * width * channels)
    if len(payload) != height * width * channels:
        raise FileFormatError(
            f"truncated payload: expected {height * width * channels} bytes, "
            f"got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return ImageBuffer(arr.reshape(height, width, channels))


def save_image(img, path):
    """Write an ImageBuffer as binary PGM (1 channel) or PPM (3 channels).

    Quantization is round-half-up: byte = floor(v * 255 + 0.5).
    """
    if not isinstance(img, ImageBuffer):
        raise TypeError("save_image expects an ImageBuffer")
    quant = np.floor(img.data * 255.0 + 0.5)
    quant = np.clip(quant, 0, 255).astype(np.uint8)
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + f"\n{img.width} {img.height}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(quant.tobytes())


# ---------------------------------------------------------------------------
# PFM (single channel, little endian)
# ---------------------------------------------------------------------------


def load_pfm(path):
    """Read a single-channel PFM ("Pf") disparity map.

    Requires a negative scale (little-endian payload). Rows are stored
    bottom-to-top in the file and returned top-to-bottom.
    """
    with open(path, "rb") as f:
        magic = f.readline().rstrip()
        if magic != b"Pf":
            raise FileFormatError(f"malformed header: bad magic {magic!r}")
        dims = f.readline().split()
        if len(dims) != 2:
            raise FileFormatError("malformed header: bad dimension line")
        width, height = int(dims[0]), int(dims[1])
        if width < 1 or height < 1:
            raise FileFormatError("malformed header: non-positive dimensions")
        scale = float(f.readline())
        if scale >= 0:
            raise FileFormatError("unsupported scale: big-endian PFM not supported")
        payload = f.read(width * height * 4)
    if len(payload) != width * height * 4:
        raise FileFormatError(
            f"truncated payload: expected {width * height * 4} bytes, "
            f"got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(height, width)
    return DisparityMap(arr[::-1].astype(np.float64))


def save_pfm(dmap, path):
    """Write a DisparityMap as single-channel PFM, scale -1.0.

    Values are stored as little-endian float32; the round trip is bit-exact
    for float32-representable data. NaN payloads are rejected.
    """
    if not isinstance(dmap, DisparityMap):
        raise TypeError("save_pfm expects a DisparityMap")
    data = np.asarray(dmap.data, dtype=np.float64)
    if np.any(np.isnan(data)):
        raise ValueError("refusing to save NaN disparity values")
    header = f"Pf\n{dmap.width} {dmap.height}\n-1.0\n".encode("ascii")
    payload = data[::-1].astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)
