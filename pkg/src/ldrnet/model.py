"""Document localization network: depthwise-separable backbone, feature fusion, three heads.

Parameters live in a plain ``{name: float32 ndarray}`` dict inside a
:class:`Checkpoint`. :func:`apply` runs the network on engine Tensors (for
training); :func:`forward` is the inference wrapper over numpy arrays.
"""
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Tuple

import numpy as np

from .numerics import engine as E

MAGIC = b"LDRCKPT1"
FORMAT_VERSION = 1

# normalized coordinates are clamped to [LO, HI] and mapped affinely into (0, 1)
COORD_LO = -0.2
COORD_HI = 1.2
COORD_SPAN = COORD_HI - COORD_LO


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    alpha: float = 1.0
    n_points: int = 28
    n_cls: int = 2
    input_hw: int = 64
    fusion_enabled: bool = True
    stage_channels: Tuple[int, ...] = (16, 32, 64, 96, 128)
    fused_width: int = 128
    tail_channels: int = 128
    extra_blocks: Tuple[int, ...] = (0, 1, 1, 1, 1)
    pruned: bool = False

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "extra_blocks", tuple(int(c) for c in self.extra_blocks))
        self.validate()

    def validate(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.n_points < 8 or self.n_points % 4:
            raise ValueError(f"n_points must be a multiple of 4 and >= 8, got {self.n_points}")
        if self.n_cls < 2:
            raise ValueError(f"n_cls must be >= 2, got {self.n_cls}")
        if len(self.stage_channels) != 5 or len(self.extra_blocks) != 5:
            raise ValueError("exactly five backbone stages are required")
        if self.input_hw % 32 or self.input_hw < 32:
            raise ValueError(f"input_hw must be a positive multiple of 32, got {self.input_hw}")
        if self.fused_width < 1 or self.tail_channels < 1:
            raise ValueError("fused_width and tail_channels must be positive")

    @property
    def channels(self):
        return tuple(max(8, int(round(self.alpha * c))) for c in self.stage_channels)

    @property
    def n_border_values(self):
        return 2 * (self.n_points - 4)

    @property
    def head_in(self):
        return self.fused_width if self.fusion_enabled else self.tail_channels

    @property
    def head_out(self):
        if self.pruned:
            return 8 + self.n_cls
        return 8 + self.n_border_values + self.n_cls

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["stage_channels"] = tuple(d["stage_channels"])
        d["extra_blocks"] = tuple(d["extra_blocks"])
        return cls(**d)


def paper_config(**overrides):
    """alpha=0.35, N=100, 224 input as in the reference training setup."""
    base = dict(alpha=0.35, n_points=100, n_cls=2, input_hw=224, fused_width=256, tail_channels=256)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: Dict[str, np.ndarray]
    format_version: int = FORMAT_VERSION
    meta: dict = field(default_factory=dict)

    def parameter_count(self):
        return int(sum(t.size for t in self.tensors.values()))


@dataclass
class ModelOutput:
    corners: object   # [B, 8]
    borders: object   # [B, 2(N-4)]; [B, 0] for a pruned model
    logits: object    # [B, n_cls]


# ---------------------------------------------------------------- parameters

def parameter_shapes(cfg):
    """Ordered ``name -> shape`` for every tensor the architecture needs."""
    shapes = {}
    ch = cfg.channels
    cin = 3
    for s in range(5):
        c = ch[s]
        if s == 0:
            shapes["stage0.stem.w"] = (3, 3, cin, c)
        else:
            shapes[f"stage{s}.dw"] = (3, 3, cin)
            shapes[f"stage{s}.pw.w"] = (1, 1, cin, c)
        shapes[f"stage{s}.pw.b" if s else "stage0.stem.b"] = (c,)
        for e in range(cfg.extra_blocks[s]):
            shapes[f"stage{s}.extra{e}.dw"] = (3, 3, c)
            shapes[f"stage{s}.extra{e}.pw.w"] = (1, 1, c, c)
            shapes[f"stage{s}.extra{e}.pw.b"] = (c,)
        cin = c
    shapes["tail.w"] = (1, 1, cin, cfg.tail_channels)
    shapes["tail.b"] = (cfg.tail_channels,)
    if cfg.fusion_enabled:
        tap_ch = list(ch[:4]) + [cfg.tail_channels]
        for s, c in enumerate(tap_ch):
            shapes[f"fuse{s}.w"] = (1, 1, c, cfg.fused_width)
            shapes[f"fuse{s}.b"] = (cfg.fused_width,)
    shapes["head.w"] = (cfg.head_in, cfg.head_out)
    shapes["head.b"] = (cfg.head_out,)
    return shapes


def parameter_count(cfg):
    return int(sum(np.prod(s) for s in parameter_shapes(cfg).values()))


def build_model(cfg, rng_seed=0):
    """Fresh checkpoint: He-normal convolutions, fan-in projections, Xavier-uniform head, zero biases."""
    cfg.validate()
    rng = np.random.default_rng(rng_seed)
    tensors = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".b"):
            arr = np.zeros(shape)
        elif name == "head.w":
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-limit, limit, size=shape)
        elif name.endswith(".dw"):
            arr = rng.normal(0.0, np.sqrt(2.0 / 9.0), size=shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            gain = 1.0 if name.startswith("fuse") else 2.0  # fusion projections are linear
            arr = rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)
        tensors[name] = arr.astype(np.float32)
    return Checkpoint(cfg, tensors, meta={"seed": int(rng_seed)})


def check_tensors(cfg, tensors):
    for name, shape in parameter_shapes(cfg).items():
        if name not in tensors:
            raise CheckpointError(f"missing tensor {name!r}")
        if tuple(tensors[name].shape) != tuple(shape):
            raise CheckpointError(f"tensor {name!r} has shape {tensors[name].shape}, expected {shape}")


# ---------------------------------------------------------------- network

def _pw(x, params, prefix):
    return E.bias_add(E.conv2d(x, params[prefix + ".w"]), params[prefix + ".b"])


def backbone(cfg, params, x):
    """Run the five stages and the tail. Returns the five taps, shallow to deep."""
    taps = []
    for s in range(5):
        if s == 0:
            x = E.bias_add(E.conv2d(x, params["stage0.stem.w"], stride=2), params["stage0.stem.b"])
        else:
            x = E.depthwise_conv2d(x, params[f"stage{s}.dw"], stride=2)
            x = _pw(x, params, f"stage{s}.pw")
        x = E.relu6(x)
        for e in range(cfg.extra_blocks[s]):
            p = f"stage{s}.extra{e}"
            x = E.relu6(_pw(E.depthwise_conv2d(x, params[p + ".dw"]), params, p + ".pw"))
        taps.append(x)
    tail = E.relu6(_pw(x, params, "tail"))
    taps[-1] = tail
    return taps


def fuse_features(taps, params, order=None):
    """Pool every tap to the deepest tap's size, project to C_f, sum, global-average-pool."""
    deep_h, deep_w = taps[-1].shape[1:3]
    order = range(len(taps)) if order is None else order
    total = None
    for s in order:
        t = E.avg_pool_to(taps[s], deep_h, deep_w)
        t = _pw(t, params, f"fuse{s}")
        total = t if total is None else total + t
    pooled = E.global_avg_pool(total)
    return pooled.reshape(pooled.shape[0], pooled.shape[-1])


def _head(cfg, params, feat):
    w, b = params["head.w"], params["head.b"]
    nb = 0 if cfg.pruned else cfg.n_border_values
    # one dense layer, evaluated per branch so pruning leaves corner/logit arithmetic untouched
    corners = E.sigmoid(E.dense(feat, w[:, :8], b[:8]))
    if nb:
        borders = E.sigmoid(E.dense(feat, w[:, 8:8 + nb], b[8:8 + nb]))
    else:
        borders = E.Tensor(np.zeros((feat.shape[0], 0), dtype=feat.dtype))
    logits = E.dense(feat, w[:, 8 + nb:], b[8 + nb:])
    return ModelOutput(corners, borders, logits)


def apply(cfg, params, images):
    """Network on engine Tensors. ``params`` maps names to Tensors; ``images`` is [B,S,S,3] in [0,1]."""
    images = E.as_tensor(images)
    s = cfg.input_hw
    if images.ndim != 4 or images.shape[1:] != (s, s, 3):
        raise E.ShapeError(f"expected images of shape [B,{s},{s},3], got {images.shape}")
    taps = backbone(cfg, params, images)
    if cfg.fusion_enabled:
        feat = fuse_features(taps, params)
    else:
        pooled = E.global_avg_pool(taps[-1])
        feat = pooled.reshape(pooled.shape[0], pooled.shape[-1])
    return _head(cfg, params, feat)


def forward(ckpt, images):
    """Inference forward pass; returns a ModelOutput of numpy arrays."""
    images = np.asarray(images, dtype=np.float32)
    params = {k: E.Tensor(v) for k, v in ckpt.tensors.items()}
    out = apply(ckpt.config, params, E.Tensor(images))
    return ModelOutput(out.corners.data, out.borders.data, out.logits.data)


# ---------------------------------------------------------------- coordinates & inference

def encode_coords(xy):
    """Normalized image coordinates -> sigmoid-range targets."""
    return (np.clip(xy, COORD_LO, COORD_HI) - COORD_LO) / COORD_SPAN


def decode_coords(z):
    return np.asarray(z, dtype=np.float64) * COORD_SPAN + COORD_LO


def predict_quad(ckpt, image, image_w=None, image_h=None):
    """Corner quad in pixels of a ``image_w x image_h`` frame, plus the argmax class."""
    s = ckpt.config.input_hw
    image_w = s if image_w is None else image_w
    image_h = s if image_h is None else image_h
    out = forward(ckpt, np.asarray(image, dtype=np.float32)[None])
    xy = decode_coords(out.corners[0].reshape(4, 2))
    quad = xy * np.array([image_w, image_h], dtype=np.float64)
    return quad, int(np.argmax(out.logits[0]))


def prune_for_inference(ckpt):
    """Drop the border-point columns of the head; corner and logit outputs are unchanged."""
    cfg = ckpt.config
    if cfg.pruned:
        return ckpt
    nb = cfg.n_border_values
    tensors = dict(ckpt.tensors)
    keep = np.r_[0:8, 8 + nb:8 + nb + cfg.n_cls]
    tensors["head.w"] = np.ascontiguousarray(ckpt.tensors["head.w"][:, keep])
    tensors["head.b"] = np.ascontiguousarray(ckpt.tensors["head.b"][keep])
    meta = dict(ckpt.meta, pruned_from=cfg.head_out)
    return Checkpoint(replace(cfg, pruned=True), tensors, ckpt.format_version, meta)


# ---------------------------------------------------------------- checkpoint file

def checkpoint_bytes(ckpt):
    names = list(ckpt.tensors)
    directory = {}
    offset = 0
    payloads = []
    for name in names:
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        raw = arr.tobytes()
        directory[name] = {"dtype": "float32", "shape": list(arr.shape), "offset": offset, "length": len(raw)}
        payloads.append(raw)
        offset += len(raw)
    header = {
        "format_version": ckpt.format_version,
        "config": ckpt.config.to_dict(),
        "tensors": directory,
        "meta": ckpt.meta,
    }
    hbytes = json.dumps(header, sort_keys=False, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(payloads)


def save_checkpoint(ckpt, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))


def checkpoint_from_bytes(blob):
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic: not an LDR checkpoint")
    if len(blob) < 16:
        raise CheckpointError("truncated header")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    base = 16 + hlen
    tensors = {}
    for name, ent in header["tensors"].items():
        if ent["dtype"] != "float32":
            raise CheckpointError(f"unsupported dtype {ent['dtype']!r} for {name!r}")
        start, length = base + ent["offset"], ent["length"]
        if start + length > len(blob):
            raise CheckpointError(f"tensor {name!r} runs past end of file")
        arr = np.frombuffer(blob, dtype="<f4", count=length // 4, offset=start)
        tensors[name] = arr.reshape(ent["shape"]).astype(np.float32)
    cfg = ModelConfig.from_dict(header["config"])
    check_tensors(cfg, tensors)
    return Checkpoint(cfg, tensors, header["format_version"], header.get("meta", {}))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


def trainable(ckpt, dtype=np.float32):
    """Param Tensors (requiring grad) for every architecture tensor of ``ckpt``."""
    return {name: E.Tensor(ckpt.tensors[name].astype(dtype), requires_grad=True, name=name)
            for name in parameter_shapes(ckpt.config)}
