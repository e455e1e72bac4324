"""Three-layer convolutional segmenter with hand-written reverse mode.

Layout: 3x3 conv (3->F) + ReLU, 3x3 conv (F->F) + ReLU, 1x1 head (F->C).
Output channel 0 is the unknown class; the remaining channels follow
``channel_layout``. Forward and backward accept a single ``(H, W, 3)`` image
or a batch ``(N, H, W, 3)``.
"""
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, ProtocolError, ShapeError

PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "head_w", "head_b")
CKPT_MAGIC = b"SEGC"
CKPT_VERSION = 1


@dataclass
class SegModel:
    params: dict
    channel_layout: list
    step: int = 0
    schedule_hash: int = 0
    frozen: bool = field(default=False, compare=False)

    @property
    def features(self):
        return self.params["conv1_w"].shape[-1]

    @property
    def num_channels(self):
        return len(self.channel_layout)

    def copy(self):
        return SegModel({k: v.copy() for k, v in self.params.items()},
                        list(self.channel_layout), self.step, self.schedule_hash)

    def astype(self, dtype):
        m = self.copy()
        m.params = {k: v.astype(dtype) for k, v in m.params.items()}
        return m


def init_model(seed, features=16, class_ids=(), dtype=np.float32):
    """He-normal weights, zero biases; channel 0 is unknown, then ``class_ids``."""
    if features < 1:
        raise ValueError("features must be >= 1")
    rng = np.random.default_rng(seed)
    layout = [0] + [int(c) for c in class_ids]
    c = len(layout)

    def he(shape, fan_in):
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)

    params = {
        "conv1_w": he((3, 3, 3, features), 27),
        "conv1_b": np.zeros(features, dtype),
        "conv2_w": he((3, 3, features, features), 9 * features),
        "conv2_b": np.zeros(features, dtype),
        "head_w": he((features, c), features),
        "head_b": np.zeros(c, dtype),
    }
    return SegModel(params, layout)


def expand_head(model, new_class_ids, seed=0):
    """Append head channels for ``new_class_ids``; existing rows are untouched."""
    new_class_ids = [int(c) for c in new_class_ids]
    clash = set(new_class_ids) & set(model.channel_layout)
    if clash or len(set(new_class_ids)) != len(new_class_ids):
        raise ProtocolError(f"class ids {sorted(clash) or new_class_ids} already in the head")
    if not new_class_ids:
        return model.copy()
    out = model.copy()
    rng = np.random.default_rng(seed)
    dtype = out.params["head_w"].dtype
    n_new = len(new_class_ids)
    c_new = out.num_channels + n_new
    w_new = (rng.standard_normal((out.features, n_new)) * 0.01).astype(dtype)
    b_new = np.full(n_new, -np.log(c_new), dtype=dtype)
    out.params["head_w"] = np.concatenate([out.params["head_w"], w_new], axis=1)
    out.params["head_b"] = np.concatenate([out.params["head_b"], b_new])
    out.channel_layout = out.channel_layout + new_class_ids
    return out


def freeze(model):
    """Return a read-only copy suitable as a teacher."""
    out = model.copy()
    for v in out.params.values():
        v.setflags(write=False)
    out.frozen = True
    return out


def _im2col3(x):
    """(N, H, W, C) -> (N, H, W, 9*C) patches with zero 'same' padding."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, h, w, 3, 3, c), dtype=x.dtype)
    for dy in range(3):
        cols[:, :, :, dy] = sliding_window_view(xp[:, dy:dy + h], 3, axis=2).transpose(0, 1, 2, 4, 3)
    return cols.reshape(n, h, w, 9 * c)


def _conv3_transpose(dout, w):
    """Input gradient of a 'same' 3x3 convolution with weights ``w``."""
    # correlation of the upstream gradient with the spatially flipped, transposed kernel
    flipped = w[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, w.shape[2])
    return _im2col3(dout) @ flipped


def _as_batch(image):
    image = np.asarray(image)
    if image.ndim == 3:
        return image[None], True
    if image.ndim == 4:
        return image, False
    raise ShapeError(f"expected (H, W, 3) or (N, H, W, 3) input, got {image.shape}")


def forward(model, image, return_cache=False):
    """Logits of shape ``(..., H, W, C)``."""
    x, single = _as_batch(image)
    if x.shape[-1] != 3:
        raise ShapeError(f"expected 3 input channels, got {x.shape[-1]}")
    p = model.params
    x = x.astype(p["conv1_w"].dtype, copy=False)
    f = model.features
    cols1 = _im2col3(x)
    a1 = cols1 @ p["conv1_w"].reshape(-1, f) + p["conv1_b"]
    h1 = np.maximum(a1, 0)
    cols2 = _im2col3(h1)
    a2 = cols2 @ p["conv2_w"].reshape(-1, f) + p["conv2_b"]
    h2 = np.maximum(a2, 0)
    logits = h2 @ p["head_w"] + p["head_b"]
    if single:
        logits = logits[0]
    if return_cache:
        return logits, (single, cols1, a1, cols2, a2, h2)
    return logits


def backward(model, image, dlogits, cache=None):
    """Parameter gradients of ``sum(dlogits * forward(model, image))``."""
    if cache is None:
        logits, cache = forward(model, image, return_cache=True)
    single, cols1, a1, cols2, a2, h2 = cache
    dl = np.asarray(dlogits)
    if single:
        dl = dl[None]
    if dl.shape != h2.shape[:-1] + (model.num_channels,):
        raise ShapeError(f"upstream gradient shape {dl.shape} does not match logits")
    p = model.params
    dl = dl.astype(h2.dtype, copy=False)
    g = {}
    flat = lambda a: a.reshape(-1, a.shape[-1])
    g["head_w"] = flat(h2).T @ flat(dl)
    g["head_b"] = flat(dl).sum(axis=0)
    dh2 = dl @ p["head_w"].T
    da2 = dh2 * (a2 > 0)
    g["conv2_w"] = (flat(cols2).T @ flat(da2)).reshape(p["conv2_w"].shape)
    g["conv2_b"] = flat(da2).sum(axis=0)
    dh1 = _conv3_transpose(da2, p["conv2_w"])
    da1 = dh1 * (a1 > 0)
    g["conv1_w"] = (flat(cols1).T @ flat(da1)).reshape(p["conv1_w"].shape)
    g["conv1_b"] = flat(da1).sum(axis=0)
    return g


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sgd_step(model, grads, lr):
    if model.frozen:
        raise ProtocolError("cannot update a frozen model")
    for name in PARAM_NAMES:
        if grads[name].shape != model.params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {grads[name].shape}")
    for name in PARAM_NAMES:
        p = model.params[name]
        p -= (lr * grads[name]).astype(p.dtype)
    return model


def predict(model, image):
    """Argmax class ids (not channel indices) per pixel."""
    layout = np.asarray(model.channel_layout, dtype=np.uint8)
    return layout[np.argmax(forward(model, image), axis=-1)]


# --- checkpoints -----------------------------------------------------------

def checkpoint_bytes(model):
    parts = [CKPT_MAGIC, struct.pack("<IIII", CKPT_VERSION, model.step, model.features,
                                     model.num_channels)]
    parts.append(np.asarray(model.channel_layout, dtype="<u4").tobytes())
    for name in PARAM_NAMES:
        parts.append(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())
    parts.append(struct.pack("<I", model.schedule_hash))  # trailer
    return b"".join(parts)


def save_checkpoint(model, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def checkpoint_from_bytes(buf):
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r} at byte offset 0, expected {CKPT_MAGIC!r}")
    if len(buf) < 20:
        raise FormatError("truncated checkpoint header at byte offset 4")
    version, step, f, c = struct.unpack_from("<IIII", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    shapes = {"conv1_w": (3, 3, 3, f), "conv1_b": (f,), "conv2_w": (3, 3, f, f),
              "conv2_b": (f,), "head_w": (f, c), "head_b": (c,)}
    off = 20
    need = off + 4 * c + 4 + 4 * sum(int(np.prod(s)) for s in shapes.values())
    if len(buf) != need:
        raise FormatError(f"checkpoint size {len(buf)} != expected {need} bytes")
    layout = np.frombuffer(buf, "<u4", c, off).tolist()
    off += 4 * c
    params = {}
    for name in PARAM_NAMES:
        n = int(np.prod(shapes[name]))
        params[name] = np.frombuffer(buf, "<f4", n, off).reshape(shapes[name]).astype(np.float32)
        off += 4 * n
    (schedule_hash,) = struct.unpack_from("<I", buf, off)
    return SegModel(params, layout, step, schedule_hash)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
