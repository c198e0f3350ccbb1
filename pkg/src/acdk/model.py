"""Small from-scratch disparity network with explicit forward/backward.

Encoder: three stride-2 3x3 conv blocks (channels 8, 16, 32, ReLU).
Decoder: three blocks of nearest-neighbor 2x upsample + 3x3 conv (channels
16, 8, 8, ReLU) with additive skip connections from the matching encoder
blocks. Head: 1x1 conv to one channel + softplus, so the output is a dense
strictly-positive disparity map with the input's spatial shape (H and W
must be divisible by 8).

Parameters are float64 in memory but always rounded to float32-representable
values (after init and after each optimizer step), so checkpoints, which
store a little-endian float32 payload, round-trip bitwise.
"""

import struct

import numpy as np
from scipy.special import expit

from .imagecore import DisparityMap, FileFormatError, Rng

__all__ = [
    "ModelState",
    "init_model",
    "forward",
    "backward",
    "zero_grads",
    "clone_frozen",
    "set_encoder_frozen",
    "adam_update",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"ACDK1"

# (name, kernel, cin, cout, stride); cin of enc1 is set by input_channels
_LAYER_SPECS = (
    ("enc1", 3, None, 8, 2),
    ("enc2", 3, 8, 16, 2),
    ("enc3", 3, 16, 32, 2),
    ("dec1", 3, 32, 16, 1),
    ("dec2", 3, 16, 8, 1),
    ("dec3", 3, 8, 8, 1),
    ("head", 1, 8, 1, 1),
)
ENCODER_BLOCKS = ("enc1", "enc2", "enc3")


def _f32_round(arr):
    return arr.astype(np.float32).astype(np.float64)


class _Layer:
    __slots__ = ("name", "w", "b", "stride", "frozen",
                 "gw", "gb", "mw", "vw", "mb", "vb")

    def __init__(self, name, w, b, stride, frozen=False):
        self.name = name
        self.w = w
        self.b = b
        self.stride = stride
        self.frozen = frozen
        self.gw = np.zeros_like(w)
        self.gb = np.zeros_like(b)
        self.mw = np.zeros_like(w)
        self.vw = np.zeros_like(w)
        self.mb = np.zeros_like(b)
        self.vb = np.zeros_like(b)


class ModelState:
    """Parameters, gradient buffers, optimizer moments, and freeze flags."""

    def __init__(self, layers, input_channels, init_seed):
        self.layers = layers  # dict name -> _Layer, insertion-ordered
        self.input_channels = input_channels
        self.init_seed = init_seed
        self.version = 0  # bumped on every parameter mutation
        self.adam_t = 0

    def layer(self, name):
        return self.layers[name]

    def param_count(self):
        return sum(l.w.size + l.b.size for l in self.layers.values())


def init_model(seed, input_channels):
    """He-uniform initialization from labeled child streams; bias zero."""
    if input_channels not in (1, 3):
        raise ValueError("input_channels must be 1 or 3")
    root = Rng(seed)
    layers = {}
    for name, k, cin, cout, stride in _LAYER_SPECS:
        cin = input_channels if cin is None else cin
        fan_in = k * k * cin
        limit = np.sqrt(6.0 / fan_in)
        draws = root.fork(f"init/{name}").uniform(-limit, limit, size=k * k * cin * cout)
        w = _f32_round(draws.reshape(k, k, cin, cout))
        b = np.zeros(cout)
        layers[name] = _Layer(name, w, b, stride)
    return ModelState(layers, input_channels, int(seed))


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


def _conv_forward(x, layer):
    k = layer.w.shape[0]
    pad = k // 2
    s = layer.stride
    h, w = x.shape[:2]
    cin = x.shape[2]
    ho = (h + 2 * pad - k) // s + 1
    wo = (w + 2 * pad - k) // s + 1
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0))) if pad else x
    cols = np.empty((ho, wo, k, k, cin))
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj, :] = xp[di:di + s * ho:s, dj:dj + s * wo:s, :]
    flat = cols.reshape(ho * wo, k * k * cin)
    y = flat @ layer.w.reshape(k * k * cin, -1) + layer.b
    return y.reshape(ho, wo, -1), (x.shape, cols)


def _conv_backward(dy, ctx, layer, want_param_grads):
    x_shape, cols = ctx
    k = layer.w.shape[0]
    pad = k // 2
    s = layer.stride
    ho, wo, cout = dy.shape
    cin = x_shape[2]
    dy_mat = dy.reshape(ho * wo, cout)
    dw = db = None
    if want_param_grads:
        dw = (cols.reshape(ho * wo, -1).T @ dy_mat).reshape(layer.w.shape)
        db = dy_mat.sum(axis=0)
    dcols = (dy_mat @ layer.w.reshape(-1, cout).T).reshape(ho, wo, k, k, cin)
    h, w = x_shape[:2]
    dxp = np.zeros((h + 2 * pad, w + 2 * pad, cin))
    for di in range(k):
        for dj in range(k):
            dxp[di:di + s * ho:s, dj:dj + s * wo:s, :] += dcols[:, :, di, dj, :]
    dx = dxp[pad:pad + h, pad:pad + w, :] if pad else dxp
    return dx, dw, db


def _upsample2(x):
    return x.repeat(2, axis=0).repeat(2, axis=1)


def _upsample2_backward(dy):
    h, w, c = dy.shape
    return dy.reshape(h // 2, 2, w // 2, 2, c).sum(axis=(1, 3))


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def forward(m, img):
    """Dense positive disparity plus the activation cache for backward."""
    x = np.asarray(getattr(img, "data", img), dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.shape[2] != m.input_channels:
        raise ValueError(
            f"expected {m.input_channels} channel(s), got {x.shape[2]}")
    h, w = x.shape[:2]
    if h % 8 or w % 8:
        raise ValueError(f"spatial dims must be divisible by 8, got {h}x{w}")

    cache = {"version": m.version}

    def conv(name, inp):
        y, ctx = _conv_forward(inp, m.layer(name))
        cache[name] = ctx
        return y

    e1_pre = conv("enc1", x)
    e1 = np.maximum(e1_pre, 0.0)
    e2_pre = conv("enc2", e1)
    e2 = np.maximum(e2_pre, 0.0)
    e3_pre = conv("enc3", e2)
    e3 = np.maximum(e3_pre, 0.0)

    d1_pre = conv("dec1", _upsample2(e3)) + e2
    d1 = np.maximum(d1_pre, 0.0)
    d2_pre = conv("dec2", _upsample2(d1)) + e1
    d2 = np.maximum(d2_pre, 0.0)
    d3_pre = conv("dec3", _upsample2(d2))
    d3 = np.maximum(d3_pre, 0.0)

    h_pre = conv("head", d3)
    out = np.logaddexp(0.0, h_pre[:, :, 0])  # softplus, strictly positive

    cache["pre"] = {"enc1": e1_pre, "enc2": e2_pre, "enc3": e3_pre,
                    "dec1": d1_pre, "dec2": d2_pre, "dec3": d3_pre,
                    "head": h_pre}
    return DisparityMap(out), cache


def backward(m, cache, grad_out):
    """Accumulate dL/dtheta into the gradient buffers of unfrozen layers.

    grad_out is dL/d(disparity), shaped H x W. The cache must come from a
    forward pass against the current parameters.
    """
    if cache.get("version") != m.version:
        raise ValueError("stale cache: parameters changed since forward")
    pre = cache["pre"]
    g = np.asarray(getattr(grad_out, "data", grad_out), dtype=np.float64)
    g = (g * expit(pre["head"][:, :, 0]))[:, :, None]  # softplus'

    def conv_back(name, dy):
        layer = m.layer(name)
        dx, dw, db = _conv_backward(dy, cache[name], layer, not layer.frozen)
        if not layer.frozen:
            layer.gw += dw
            layer.gb += db
        return dx

    g_d3 = conv_back("head", g)
    g_d3 *= pre["dec3"] > 0.0
    g_u3 = conv_back("dec3", g_d3)

    g_d2 = _upsample2_backward(g_u3)
    g_d2 *= pre["dec2"] > 0.0       # dL/d(dec2 pre-activation)
    g_e1_skip = g_d2
    g_u2 = conv_back("dec2", g_d2)

    g_d1 = _upsample2_backward(g_u2)
    g_d1 *= pre["dec1"] > 0.0
    g_e2_skip = g_d1
    g_u1 = conv_back("dec1", g_d1)

    g_e3 = _upsample2_backward(g_u1)
    g_e3 *= pre["enc3"] > 0.0
    g_e2 = conv_back("enc3", g_e3) + g_e2_skip
    g_e2 *= pre["enc2"] > 0.0
    g_e1 = conv_back("enc2", g_e2) + g_e1_skip
    g_e1 *= pre["enc1"] > 0.0
    conv_back("enc1", g_e1)


def zero_grads(m):
    for layer in m.layers.values():
        layer.gw[:] = 0.0
        layer.gb[:] = 0.0


def clone_frozen(m):
    """Deep copy with every block frozen; training never mutates it."""
    layers = {}
    for name, l in m.layers.items():
        layers[name] = _Layer(name, l.w.copy(), l.b.copy(), l.stride, frozen=True)
    clone = ModelState(layers, m.input_channels, m.init_seed)
    return clone


def set_encoder_frozen(m, frozen):
    for name in ENCODER_BLOCKS:
        m.layer(name).frozen = bool(frozen)


def adam_update(m, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
    """Adaptive-moment step with decoupled weight decay on unfrozen layers.

    Parameters are rounded back to float32-representable values afterwards
    so checkpoint payloads stay lossless.
    """
    m.adam_t += 1
    t = m.adam_t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for layer in m.layers.values():
        if layer.frozen:
            continue
        for p, g, mom, vel in ((layer.w, layer.gw, layer.mw, layer.vw),
                               (layer.b, layer.gb, layer.mb, layer.vb)):
            if weight_decay:
                p -= lr * weight_decay * p
            mom *= beta1
            mom += (1.0 - beta1) * g
            vel *= beta2
            vel += (1.0 - beta2) * g * g
            p -= lr * (mom / bc1) / (np.sqrt(vel / bc2) + eps)
            p[:] = _f32_round(p)
    m.version += 1


# ---------------------------------------------------------------------------
# Checkpoints: magic "ACDK1", shape table, little-endian float32 payload
# ---------------------------------------------------------------------------


def save_checkpoint(m, path):
    header = bytearray()
    header += CHECKPOINT_MAGIC
    header += struct.pack("<BQI", m.input_channels, m.init_seed & (2**64 - 1),
                          len(m.layers))
    payload = bytearray()
    for name, l in m.layers.items():
        nb = name.encode("ascii")
        header += struct.pack("<B", len(nb)) + nb
        header += struct.pack("<IB", l.stride, int(l.frozen))
        header += struct.pack("<4I", *l.w.shape)
        header += struct.pack("<I", l.b.size)
        payload += l.w.astype("<f4").tobytes()
        payload += l.b.astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(bytes(header))
        f.write(bytes(payload))


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise FileFormatError("truncated checkpoint")
        chunk = blob[off:off + n]
        off += n
        return chunk

    if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FileFormatError("checkpoint version mismatch: bad magic")
    input_channels, init_seed, n_layers = struct.unpack("<BQI", take(13))
    specs = []
    for _ in range(n_layers):
        (name_len,) = struct.unpack("<B", take(1))
        name = take(name_len).decode("ascii")
        stride, frozen = struct.unpack("<IB", take(5))
        w_shape = struct.unpack("<4I", take(16))
        (b_size,) = struct.unpack("<I", take(4))
        specs.append((name, stride, bool(frozen), w_shape, b_size))
    layers = {}
    for name, stride, frozen, w_shape, b_size in specs:
        w_count = int(np.prod(w_shape))
        w = np.frombuffer(take(4 * w_count), dtype="<f4").astype(np.float64)
        b = np.frombuffer(take(4 * b_size), dtype="<f4").astype(np.float64)
        layers[name] = _Layer(name, w.reshape(w_shape), b, stride, frozen)
    if off != len(blob):
        raise FileFormatError("trailing bytes after checkpoint payload")
    model = ModelState(layers, input_channels, init_seed)
    return model
