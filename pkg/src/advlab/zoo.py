"""Desk-scale classifier families with preprocessing folded into the model.

Every :class:`Classifier` takes raw pixels in [0, 255]; the affine
preprocessing ``(x - offset) / scale`` is always its first layer, so attack
budgets are interpreted in pixel units regardless of family.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor

FAMILIES = ("mlp", "small-cnn-a", "small-cnn-b-residual", "tiny-vit")
TAGS = ("ST", "AT")

CHECKPOINT_MAGIC = b"ADVZ"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class PreprocessSpec:
    offset: float = 127.5
    scale: float = 127.5

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"preprocess scale must be positive, got {self.scale}")


def apply_preprocess(spec: PreprocessSpec, pixels) -> np.ndarray:
    """Map raw pixels to the network's internal range: ``(x - offset) / scale``."""
    x = np.asarray(pixels)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return (x - x.dtype.type(spec.offset)) / x.dtype.type(spec.scale)


@dataclass(frozen=True)
class ModelConfig:
    family: str
    input_shape: tuple[int, int, int] = (28, 28, 1)
    num_classes: int = 10
    # mlp hidden widths
    hidden: tuple[int, ...] = (64,)
    # cnn stage widths (one 2x2 pool per stage)
    channels: tuple[int, ...] = (16, 32)
    # tiny-vit
    patch: int = 4
    dim: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: int = 2

    def __post_init__(self):
        # tolerate lists coming from JSON
        for name in ("input_shape", "hidden", "channels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (H, W, C) with positive sizes, got {self.input_shape}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        h, w, _ = self.input_shape
        if self.family == "mlp" and any(v < 1 for v in self.hidden):
            raise ValueError("mlp hidden widths must be positive")
        if self.family.startswith("small-cnn"):
            if not self.channels or min(self.channels) < 1:
                raise ValueError("cnn channels must be a nonempty list of positive widths")
            k = 2 ** len(self.channels)
            if h % k or w % k:
                raise ValueError(f"input {h}x{w} not divisible by {k} for {len(self.channels)} pooling stages")
        if self.family == "tiny-vit":
            if h % self.patch or w % self.patch:
                raise ValueError(f"resolution {h}x{w} not divisible by patch size {self.patch}")
            if self.dim % self.heads:
                raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
            if self.depth < 1 or self.mlp_ratio < 1:
                raise ValueError("tiny-vit depth and mlp_ratio must be >= 1")

    @property
    def num_tokens(self) -> int:
        """Patch tokens plus the class token (tiny-vit only)."""
        h, w, _ = self.input_shape
        return (h // self.patch) * (w // self.patch) + 1

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def param_shapes(config: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Parameter names and shapes, in canonical order, as a pure function of config."""
    h, w, c = config.input_shape
    k = config.num_classes
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    fam = config.family
    if fam == "mlp":
        prev = h * w * c
        for i, width in enumerate(config.hidden):
            shapes[f"dense{i}.w"] = (prev, width)
            shapes[f"dense{i}.b"] = (width,)
            prev = width
        shapes["head.w"] = (prev, k)
        shapes["head.b"] = (k,)
    elif fam == "small-cnn-a":
        prev = c
        for i, ch in enumerate(config.channels):
            shapes[f"conv{i}.w"] = (3, 3, prev, ch)
            shapes[f"conv{i}.b"] = (ch,)
            prev = ch
        s = 2 ** len(config.channels)
        shapes["head.w"] = ((h // s) * (w // s) * prev, k)
        shapes["head.b"] = (k,)
    elif fam == "small-cnn-b-residual":
        prev = c
        for i, ch in enumerate(config.channels):
            shapes[f"stage{i}.in.w"] = (3, 3, prev, ch)
            shapes[f"stage{i}.in.b"] = (ch,)
            shapes[f"stage{i}.res1.w"] = (3, 3, ch, ch)
            shapes[f"stage{i}.res1.b"] = (ch,)
            shapes[f"stage{i}.res2.w"] = (3, 3, ch, ch)
            shapes[f"stage{i}.res2.b"] = (ch,)
            prev = ch
        shapes["head.w"] = (prev, k)
        shapes["head.b"] = (k,)
    elif fam == "tiny-vit":
        d, p = config.dim, config.patch
        hidden = d * config.mlp_ratio
        shapes["patch.w"] = (p * p * c, d)
        shapes["patch.b"] = (d,)
        shapes["cls"] = (1, 1, d)
        shapes["pos"] = (1, config.num_tokens, d)
        for i in range(config.depth):
            shapes[f"block{i}.ln1.g"] = (d,)
            shapes[f"block{i}.ln1.b"] = (d,)
            for m in ("q", "k", "v", "o"):
                shapes[f"block{i}.attn.{m}.w"] = (d, d)
                shapes[f"block{i}.attn.{m}.b"] = (d,)
            shapes[f"block{i}.ln2.g"] = (d,)
            shapes[f"block{i}.ln2.b"] = (d,)
            shapes[f"block{i}.mlp1.w"] = (d, hidden)
            shapes[f"block{i}.mlp1.b"] = (hidden,)
            shapes[f"block{i}.mlp2.w"] = (hidden, d)
            shapes[f"block{i}.mlp2.b"] = (d,)
        shapes["ln.g"] = (d,)
        shapes["ln.b"] = (d,)
        shapes["head.w"] = (d, k)
        shapes["head.b"] = (k,)
    return shapes


def first_layer_weight(config: ModelConfig) -> str:
    """Name of the weight that consumes the preprocessed input."""
    return {
        "mlp": "dense0.w" if config.hidden else "head.w",
        "small-cnn-a": "conv0.w",
        "small-cnn-b-residual": "stage0.in.w",
        "tiny-vit": "patch.w",
    }[config.family]


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return out * std


def _init_param(rng, name: str, shape, family: str) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if family == "tiny-vit":
        if name.endswith(".g"):
            return np.ones(shape)
        if leaf == "b":
            return np.zeros(shape)
        return _trunc_normal(rng, shape, 0.02)
    if leaf == "b":
        return np.zeros(shape)
    fan_in = int(np.prod(shape[:-1]))
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class Classifier:
    config: ModelConfig
    preprocess: PreprocessSpec
    params: "OrderedDict[str, np.ndarray]"
    tag: str | None = None
    name: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def astype(self, dtype) -> "Classifier":
        params = OrderedDict((k, v.astype(dtype)) for k, v in self.params.items())
        return replace(self, params=params, meta=dict(self.meta))

    def copy(self) -> "Classifier":
        return self.astype(self.dtype)

    def with_preprocess(self, preprocess: PreprocessSpec) -> "Classifier":
        return replace(self, preprocess=preprocess, params=OrderedDict((k, v.copy()) for k, v in self.params.items()))

    def forward(self, x: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
        """Logits for a batch of raw-pixel images ``x`` of shape (N, H, W, C)."""
        if params is None:
            params = {k: Tensor(v) for k, v in self.params.items()}
        if tuple(x.shape[1:]) != self.config.input_shape:
            raise ValueError(f"expected images of shape {self.config.input_shape}, got {tuple(x.shape[1:])}")
        h = gc.affine(x, self.preprocess.offset, self.preprocess.scale)
        return _FORWARD[self.config.family](self.config, h, params)

    __call__ = forward


def _mlp(cfg, h, p):
    h = gc.reshape(h, (h.shape[0], -1))
    for i in range(len(cfg.hidden)):
        h = gc.relu(gc.dense(h, p[f"dense{i}.w"], p[f"dense{i}.b"]))
    return gc.dense(h, p["head.w"], p["head.b"])


def _cnn_a(cfg, h, p):
    for i in range(len(cfg.channels)):
        h = gc.relu(gc.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"]))
        h = gc.avg_pool2d(h, 2)
    h = gc.reshape(h, (h.shape[0], -1))
    return gc.dense(h, p["head.w"], p["head.b"])


def _cnn_b(cfg, h, p):
    for i in range(len(cfg.channels)):
        h = gc.relu(gc.conv2d(h, p[f"stage{i}.in.w"], p[f"stage{i}.in.b"]))
        r = gc.relu(gc.conv2d(h, p[f"stage{i}.res1.w"], p[f"stage{i}.res1.b"]))
        r = gc.conv2d(r, p[f"stage{i}.res2.w"], p[f"stage{i}.res2.b"])
        h = gc.relu(gc.add(h, r))
        h = gc.avg_pool2d(h, 2)
    h = gc.mean(h, axis=(1, 2))
    return gc.dense(h, p["head.w"], p["head.b"])


def _patchify(h: Tensor, patch: int) -> Tensor:
    n, hh, ww, c = h.shape
    gh, gw = hh // patch, ww // patch
    h = gc.reshape(h, (n, gh, patch, gw, patch, c))
    h = gc.transpose(h, (0, 1, 3, 2, 4, 5))
    return gc.reshape(h, (n, gh * gw, patch * patch * c))


def _vit(cfg, h, p):
    n = h.shape[0]
    d, heads = cfg.dim, cfg.heads
    dh = d // heads
    tokens = gc.dense(_patchify(h, cfg.patch), p["patch.w"], p["patch.b"])
    cls = gc.broadcast_to(p["cls"], (n, 1, d))
    z = gc.add(gc.concat([cls, tokens], axis=1), p["pos"])
    t = z.shape[1]

    def split(u):
        return gc.transpose(gc.reshape(u, (n, t, heads, dh)), (0, 2, 1, 3))

    for i in range(cfg.depth):
        pre = f"block{i}"
        u = gc.layer_norm(z, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        q = split(gc.dense(u, p[f"{pre}.attn.q.w"], p[f"{pre}.attn.q.b"]))
        k = split(gc.dense(u, p[f"{pre}.attn.k.w"], p[f"{pre}.attn.k.b"]))
        v = split(gc.dense(u, p[f"{pre}.attn.v.w"], p[f"{pre}.attn.v.b"]))
        a = gc.attention(q, k, v)
        a = gc.reshape(gc.transpose(a, (0, 2, 1, 3)), (n, t, d))
        z = gc.add(z, gc.dense(a, p[f"{pre}.attn.o.w"], p[f"{pre}.attn.o.b"]))
        u = gc.layer_norm(z, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        u = gc.gelu(gc.dense(u, p[f"{pre}.mlp1.w"], p[f"{pre}.mlp1.b"]))
        z = gc.add(z, gc.dense(u, p[f"{pre}.mlp2.w"], p[f"{pre}.mlp2.b"]))
    z = gc.layer_norm(z, p["ln.g"], p["ln.b"])
    return gc.dense(gc.take(z, 0, axis=1), p["head.w"], p["head.b"])


_FORWARD = {
    "mlp": _mlp,
    "small-cnn-a": _cnn_a,
    "small-cnn-b-residual": _cnn_b,
    "tiny-vit": _vit,
}


def build_classifier(
    config: ModelConfig,
    seed: int,
    preprocess: PreprocessSpec | None = None,
    dtype=np.float32,
    name: str | None = None,
) -> Classifier:
    """Deterministically initialise a classifier for ``config``.

    Conv/dense weights use fan-in scaled uniform init; transformer weights a
    normal with std 0.02 truncated at two standard deviations. Biases start
    at zero and layer-norm gains at one.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for pname, shape in param_shapes(config).items():
        params[pname] = _init_param(rng, pname, shape, config.family).astype(dtype)
    return Classifier(config, preprocess or PreprocessSpec(), params, tag=None, name=name)


def check_pixel_range(batch) -> np.ndarray:
    x = np.asarray(batch)
    if x.size and (not np.all(np.isfinite(x)) or x.min() < 0 or x.max() > 255):
        raise ValueError("pixels must lie in [0, 255]")
    return x


def predict(model: Classifier, batch, chunk: int = 256):
    """Return ``(logits, probabilities)`` for raw-pixel images in [0, 255]."""
    x = check_pixel_range(batch).astype(model.dtype, copy=False)
    logits = np.concatenate(
        [model.forward(Tensor(x[i : i + chunk])).data for i in range(0, len(x), chunk)]
    ) if len(x) else np.zeros((0, model.config.num_classes), dtype=model.dtype)
    if not np.all(np.isfinite(logits)):
        raise gc.NonFiniteError("non-finite logits")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return logits, e / e.sum(axis=1, keepdims=True)


def predict_labels(model: Classifier, batch, chunk: int = 256) -> np.ndarray:
    logits, _ = predict(model, batch, chunk)
    return logits.argmax(axis=1)


# ---------------------------------------------------------------------------
# binary container shared by checkpoints and adversarial sets


def write_container(path, magic: bytes, header: dict, arrays: list[np.ndarray], version: int = CHECKPOINT_VERSION):
    """``magic | u32 version | u32 header_len | JSON header | float32 blobs`` (little endian)."""
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<II", version, len(head)))
        f.write(head)
        for arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_container(path, magic: bytes, version: int = CHECKPOINT_VERSION):
    """Inverse of :func:`write_container`; returns ``(header, payload_bytes)``."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise CheckpointFormatError(f"{path}: truncated header")
    if raw[:4] != magic:
        raise CheckpointFormatError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    ver, hlen = struct.unpack("<II", raw[4:12])
    if ver != version:
        raise CheckpointFormatError(f"{path}: unsupported version {ver} (expected {version})")
    if len(raw) < 12 + hlen:
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: malformed header: {e}") from None
    return header, raw[12 + hlen :]


def split_blobs(path, payload: bytes, shapes: list[tuple[int, ...]]) -> list[np.ndarray]:
    need = 4 * sum(int(np.prod(s)) for s in shapes)
    if len(payload) != need:
        kind = "truncated" if len(payload) < need else "trailing bytes in"
        raise CheckpointFormatError(f"{path}: {kind} payload ({len(payload)} bytes, expected {need})")
    out, off = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(np.frombuffer(payload, dtype="<f4", count=n, offset=off).reshape(s).astype(np.float32))
        off += 4 * n
    return out


def save_checkpoint(model: Classifier, path) -> Path:
    header = {
        "config": model.config.to_dict(),
        "preprocess": asdict(model.preprocess),
        "tag": model.tag,
        "name": model.name,
        "params": [[k, list(v.shape)] for k, v in model.params.items()],
    }
    write_container(path, CHECKPOINT_MAGIC, header, list(model.params.values()))
    return Path(path)


def load_checkpoint(path) -> Classifier:
    header, payload = read_container(path, CHECKPOINT_MAGIC)
    try:
        config = ModelConfig(**header["config"])
        preprocess = PreprocessSpec(**header["preprocess"])
        declared = [(str(k), tuple(int(d) for d in s)) for k, s in header["params"]]
        tag = header.get("tag")
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointFormatError(f"{path}: invalid header: {e}") from None
    if tag not in (None, *TAGS):
        raise CheckpointFormatError(f"{path}: unknown training tag {tag!r}")
    expected = list(param_shapes(config).items())
    if declared != expected:
        raise CheckpointFormatError(f"{path}: parameter shapes in header do not match the declared config")
    arrays = split_blobs(path, payload, [s for _, s in declared])
    params = OrderedDict((k, a) for (k, _), a in zip(declared, arrays))
    return Classifier(config, preprocess, params, tag=tag, name=header.get("name"))
