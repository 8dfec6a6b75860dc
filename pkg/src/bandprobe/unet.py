"""U-Net for binary land/water segmentation.

Four encoder blocks, a bottleneck and four decoder blocks. Each conv unit is
``conv3x3 -> ELU -> batchnorm``; encoder blocks stack two units and
max-pool, decoder blocks upsample with a 2x2 transposed convolution,
concatenate the matching encoder output and stack two units. A 1x1
projection and channel softmax produce per-pixel class probabilities.
"""

from __future__ import annotations

import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, ShapeError, Tensor

CHECKPOINT_MAGIC = b"BPCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    in_bands: int = 12
    num_classes: int = 2
    base_width: int = 16
    depth: int = 4

    def __post_init__(self):
        if self.in_bands < 1:
            raise ValueError("in_bands must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.base_width < 1:
            raise ValueError("base_width must be >= 1")
        if self.depth != 4:
            raise ValueError("depth is fixed at 4")

    @property
    def widths(self):
        """Channel width per level, encoder level 0 through the bottleneck."""
        return [self.base_width * 2**i for i in range(self.depth + 1)]

    @property
    def multiple(self):
        return 2**self.depth


def parameter_shapes(config):
    """Ordered (name, shape) of every trainable tensor. Build order is this order."""
    w = config.widths
    shapes = []

    def unit(prefix, cin, cout):
        shapes.extend([
            (f"{prefix}.conv.weight", (cout, cin, 3, 3)),
            (f"{prefix}.conv.bias", (cout,)),
            (f"{prefix}.bn.scale", (cout,)),
            (f"{prefix}.bn.shift", (cout,)),
        ])

    cin = config.in_bands
    for level in range(config.depth):
        unit(f"enc{level}.0", cin, w[level])
        unit(f"enc{level}.1", w[level], w[level])
        cin = w[level]
    unit("bottleneck.0", cin, w[-1])
    unit("bottleneck.1", w[-1], w[-1])
    for level in reversed(range(config.depth)):
        shapes.append((f"dec{level}.up.weight", (w[level + 1], w[level], 2, 2)))
        shapes.append((f"dec{level}.up.bias", (w[level],)))
        unit(f"dec{level}.0", 2 * w[level], w[level])
        unit(f"dec{level}.1", w[level], w[level])
    shapes.append(("head.weight", (config.num_classes, w[0], 1, 1)))
    shapes.append(("head.bias", (config.num_classes,)))
    return shapes


def _fan_in(name, shape):
    if ".up." in name:
        return shape[0]
    return int(np.prod(shape[1:]))


class UNetModel:
    def __init__(self, config, params, bn_states):
        self.config = config
        self.params = params
        self.bn = bn_states
        self.training = True

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def num_parameters(self):
        return sum(p.data.size for p in self.params.values())

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def reset_running_stats(self):
        for s in self.bn.values():
            s.reset()

    # -- state snapshots -----------------------------------------------

    def state_arrays(self):
        """Copies of every stored array, params then running stats, in build order."""
        out = [(n, p.data.copy()) for n, p in self.params.items()]
        for n, s in self.bn.items():
            out.append((f"{n}.running_mean", s.running_mean.copy()))
            out.append((f"{n}.running_var", s.running_var.copy()))
        return out

    def load_state_arrays(self, arrays, initialized=True):
        expected = [(n, a.shape) for n, a in self.state_arrays()]
        got = [(n, tuple(a.shape)) for n, a in arrays]
        if expected != got:
            for (en, es), (gn, gs) in zip(expected, got):
                if (en, es) != (gn, gs):
                    raise CheckpointError(f"state mismatch: expected {en}{es}, found {gn}{gs}")
            raise CheckpointError(f"state has {len(got)} arrays, model expects {len(expected)}")
        lookup = dict(arrays)
        for n, p in self.params.items():
            p.data = np.ascontiguousarray(lookup[n], dtype=p.dtype)
        for n, s in self.bn.items():
            s.running_mean = np.ascontiguousarray(lookup[f"{n}.running_mean"], dtype=s.dtype)
            s.running_var = np.ascontiguousarray(lookup[f"{n}.running_var"], dtype=s.dtype)
            s.initialized = initialized

    # -- forward -------------------------------------------------------

    def _unit(self, prefix, x):
        p = self.params
        x = T.conv2d(x, p[f"{prefix}.conv.weight"], p[f"{prefix}.conv.bias"])
        x = T.elu(x)
        return T.batchnorm2d(
            x, p[f"{prefix}.bn.scale"], p[f"{prefix}.bn.shift"], self.bn[prefix], self.training
        )

    def forward(self, image):
        x = image if isinstance(image, Tensor) else Tensor(image, dtype=self.dtype)
        if x.ndim not in (3, 4):
            raise ShapeError(f"forward: expected (C,H,W) or (N,C,H,W), got {x.shape}")
        c, h, w = x.shape[-3:]
        if c != self.config.in_bands:
            raise ShapeError(f"forward: model takes {self.config.in_bands} bands, got {c}")
        m = self.config.multiple
        if h % m or w % m:
            raise ShapeError(f"forward: H and W must be multiples of {m}, got {h}x{w}")
        skips = []
        for level in range(self.config.depth):
            x = self._unit(f"enc{level}.1", self._unit(f"enc{level}.0", x))
            skips.append(x)
            x = T.maxpool2d(x)
        x = self._unit("bottleneck.1", self._unit("bottleneck.0", x))
        p = self.params
        for level in reversed(range(self.config.depth)):
            up = T.transposed_conv2d(x, p[f"dec{level}.up.weight"], p[f"dec{level}.up.bias"])
            skip = skips[level]
            assert up.shape[-2:] == skip.shape[-2:], (level, up.shape, skip.shape)
            x = T.concat_channels(up, skip)
            x = self._unit(f"dec{level}.1", self._unit(f"dec{level}.0", x))
        logits = T.conv2d(x, p["head.weight"], p["head.bias"])
        return T.softmax_channels(logits)

    __call__ = forward


def build(config=None, seed=0, dtype=None):
    """Construct a freshly initialised model; identical seeds give identical weights."""
    config = config or UNetConfig()
    dtype = np.dtype(dtype or T.get_default_dtype()).type
    rng = np.random.default_rng(seed)
    params = {}
    bn = {}
    for name, shape in parameter_shapes(config):
        if name.endswith(".weight"):
            std = np.sqrt(2.0 / _fan_in(name, shape))
            data = rng.standard_normal(shape) * std
        elif name.endswith(".scale"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, dtype=dtype, name=name)
        if name.endswith(".bn.scale"):
            unit = name[: -len(".bn.scale")]
            bn[unit] = BatchNormState(shape[0], dtype=dtype)
    return UNetModel(config, params, bn)


def _predict_chunk(model, chunk):
    with T.no_grad():
        probs = model.forward(Tensor(chunk, dtype=model.dtype)).data
    # argmax picks the first maximum, so exact ties resolve to class 0 (land)
    return np.argmax(probs, axis=1).astype(np.uint8)


def predict_mask(model, image):
    """Per-pixel argmax class of a single (C,H,W) image or a (N,C,H,W) batch."""
    if model.training:
        raise RuntimeError("predict_mask requires the model in eval mode")
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim == 3:
        return _predict_chunk(model, arr[None])[0]
    return _predict_chunk(model, arr)


def predict_masks(model, images, batch_size=8, threads=1):
    """Predict masks for a stack of images in fixed-size chunks.

    Chunking is independent of ``threads`` so results are bitwise stable
    regardless of parallelism.
    """
    if model.training:
        raise RuntimeError("predict_masks requires the model in eval mode")
    images = np.asarray(images)
    chunks = [images[i:i + batch_size] for i in range(0, len(images), batch_size)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _predict_chunk(model, c), chunks))
    else:
        parts = [_predict_chunk(model, c) for c in chunks]
    if not parts:
        return np.zeros((0,) + images.shape[2:], dtype=np.uint8)
    return np.concatenate(parts, axis=0)


# -- checkpoint container --------------------------------------------------
#
# magic "BPCK" | u16 version | u32 in_bands, num_classes, base_width, depth |
# u32 flags (bit 0: running stats initialised) | u32 entry count |
# per entry: u16 name length, name (utf-8), u8 ndim, u32 dims... |
# payload: every entry's values as little-endian float32, in entry order.


def dumps(model):
    buf = io.BytesIO()
    cfg = model.config
    arrays = model.state_arrays()
    initialized = all(s.initialized for s in model.bn.values())
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    buf.write(struct.pack("<5I", cfg.in_bands, cfg.num_classes, cfg.base_width, cfg.depth,
                          int(initialized)))
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for _, arr in arrays:
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save(model, path):
    with open(path, "wb") as f:
        f.write(dumps(model))


def loads(blob, dtype=None):
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at offset {pos}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    (version,) = struct.unpack("<H", take(2))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    in_bands, num_classes, base_width, depth, flags = struct.unpack("<5I", take(20))
    config = UNetConfig(in_bands, num_classes, base_width, depth)
    (count,) = struct.unpack("<I", take(4))
    header = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        header.append((name, shape))
    arrays = []
    for name, shape in header:
        n = int(np.prod(shape))
        # copy: frombuffer views at odd offsets are misaligned, which changes BLAS results
        arr = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
        arrays.append((name, arr))
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after offset {pos}")
    model = build(config, seed=0, dtype=dtype)
    model.load_state_arrays(arrays, initialized=bool(flags & 1))
    return model.eval()


def load(path, dtype=None):
    with open(path, "rb") as f:
        return loads(f.read(), dtype=dtype)
