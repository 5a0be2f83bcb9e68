"""Axial-attention segmentation network and its JSON checkpoint format.

Layout (``downsample_factor = 2**s``)::

    stem     conv3x3(in -> d) relu, conv3x3(d -> d, stride=downsample) relu
    block*N  x + W(ln2(H(ln1(x))))          H/W = height/width attention
             x + conv1x1(relu(conv1x1(x)))  hidden width 2*d
    decoder  s times: upsample2x, conv3x3(d -> d), relu
    head     conv1x1(d -> 1), sigmoid

For the ``full2d`` variant the H/W pair is replaced by a single 2D attention
layer with relative positions.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import AxialAttentionLayer, Axis, Full2DAttentionLayer, _Init
from .tensor import Parameter, ShapeError, Tensor

CHECKPOINT_VERSION = 1
FFN_EXPANSION = 2


class AttentionVariant(str, enum.Enum):
    FULL2D = "full2d"
    AXIAL = "axial"
    GATED = "gated"


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    """Malformed, mismatched or unsupported checkpoint file."""


@dataclass(frozen=True)
class SegModelConfig:
    in_channels: int = 1
    d_model: int = 16
    heads: int = 2
    num_blocks: int = 2
    downsample_factor: int = 2
    attention_variant: AttentionVariant = AttentionVariant.GATED
    input_size: tuple[int, int] = (32, 32)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "attention_variant", AttentionVariant(self.attention_variant))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        self.validate()

    def validate(self) -> None:
        for name in ("in_channels", "d_model", "heads", "num_blocks", "downsample_factor"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        ds = self.downsample_factor
        if ds & (ds - 1):
            raise ConfigError(f"downsample_factor must be a power of 2, got {ds}")
        if len(self.input_size) != 2:
            raise ConfigError(f"input_size must be (H, W), got {self.input_size}")
        for extent in self.input_size:
            if extent < 1 or extent % ds:
                raise ConfigError(f"input extent {extent} is not divisible by downsample_factor={ds}")

    @property
    def feature_size(self) -> tuple[int, int]:
        return (self.input_size[0] // self.downsample_factor, self.input_size[1] // self.downsample_factor)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attention_variant"] = self.attention_variant.value
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SegModelConfig:
        return cls(**{**d, "input_size": tuple(d["input_size"])})


@dataclass(eq=False)
class _Block:
    ln1_gain: Parameter
    ln1_bias: Parameter
    attn: list  # one full2d layer, or [height, width]
    ln2_gain: Parameter | None
    ln2_bias: Parameter | None
    ff1_w: Parameter
    ff1_b: Parameter
    ff2_w: Parameter
    ff2_b: Parameter

    def __call__(self, x: Tensor) -> Tensor:
        h = T.layer_norm_channels(x, self.ln1_gain, self.ln1_bias)
        if len(self.attn) == 1:
            h = self.attn[0](h)
        else:
            h = self.attn[0](h)
            h = T.layer_norm_channels(h, self.ln2_gain, self.ln2_bias)
            h = self.attn[1](h)
        x = T.add(x, h)
        f = T.relu(T.conv2d(x, self.ff1_w, self.ff1_b))
        return T.add(x, T.conv2d(f, self.ff2_w, self.ff2_b))


@dataclass(eq=False)
class SegModel:
    config: SegModelConfig
    params: dict[str, Parameter] = field(default_factory=dict)
    blocks: list[_Block] = field(default_factory=list)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def attention_layers(self) -> list:
        return [layer for blk in self.blocks for layer in blk.attn]

    def forward(self, image) -> Tensor:
        """Map ``image[in_channels, H, W]`` to lesion probabilities ``[1, H, W]``."""
        image = T.tensor(image)
        cfg = self.config
        expected = (cfg.in_channels, *cfg.input_size)
        if tuple(image.shape) != expected:
            raise ShapeError(f"model expects input {expected}, got {tuple(image.shape)}")
        p = self.params
        x = T.relu(T.conv2d(image, p["stem.conv1.weight"], p["stem.conv1.bias"]))
        x = T.relu(T.conv2d(x, p["stem.conv2.weight"], p["stem.conv2.bias"], stride=cfg.downsample_factor))
        for blk in self.blocks:
            x = blk(x)
        for i in range(_log2(cfg.downsample_factor)):
            x = T.upsample_nearest2x(x)
            x = T.relu(T.conv2d(x, p[f"decoder.{i}.weight"], p[f"decoder.{i}.bias"]))
        return T.sigmoid(T.conv2d(x, p["head.weight"], p["head.bias"]))

    __call__ = forward

    def set_gates(self, value: float) -> None:
        for layer in self.attention_layers():
            if getattr(layer, "gates", None) is not None:
                layer.gates.set(value)


def _log2(n: int) -> int:
    return n.bit_length() - 1


def build(config: SegModelConfig) -> SegModel:
    """Construct a model with parameters drawn deterministically from ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    root = _Init(rng)
    model = SegModel(config)
    d = config.d_model
    fh, fw = config.feature_size

    def reg(*ps: Parameter) -> None:
        for p in ps:
            if p.name in model.params:
                raise ConfigError(f"duplicate parameter name {p.name}")
            model.params[p.name] = p

    def conv(init: _Init, c_out: int, c_in: int, k: int) -> tuple[Parameter, Parameter]:
        fan = c_in * k * k
        return init.fan_in("weight", (c_out, c_in, k, k), fan), init.fan_in("bias", (c_out,), fan)

    reg(*conv(root.child("stem.conv1"), d, config.in_channels, 3))
    reg(*conv(root.child("stem.conv2"), d, d, 3))

    variant = config.attention_variant
    for b in range(config.num_blocks):
        blk_init = root.child(f"blocks.{b}")
        ln1 = (blk_init.const("ln1.gain", (d,), 1.0), blk_init.const("ln1.bias", (d,), 0.0))
        reg(*ln1)
        if variant is AttentionVariant.FULL2D:
            attn = [Full2DAttentionLayer.init(d, config.heads, fh, fw, rng, prefix=f"blocks.{b}.attn.")]
            ln2 = (None, None)
            reg(*attn[0].parameters())
        else:
            gated = variant is AttentionVariant.GATED
            height = AxialAttentionLayer.init(Axis.HEIGHT, d, config.heads, fh, rng, gated=gated, prefix=f"blocks.{b}.height.")
            reg(*height.parameters())
            ln2 = (blk_init.const("ln2.gain", (d,), 1.0), blk_init.const("ln2.bias", (d,), 0.0))
            reg(*ln2)
            width = AxialAttentionLayer.init(Axis.WIDTH, d, config.heads, fw, rng, gated=gated, prefix=f"blocks.{b}.width.")
            reg(*width.parameters())
            attn = [height, width]
        ff1 = conv(blk_init.child("ff1"), FFN_EXPANSION * d, d, 1)
        ff2 = conv(blk_init.child("ff2"), d, FFN_EXPANSION * d, 1)
        reg(*ff1, *ff2)
        model.blocks.append(_Block(*ln1, attn, *ln2, *ff1, *ff2))

    for i in range(_log2(config.downsample_factor)):
        reg(*conv(root.child(f"decoder.{i}"), d, d, 3))
    reg(*conv(root.child("head"), 1, d, 1))
    return model


def parameter_count(config: SegModelConfig) -> int:
    """Closed-form parameter count of :func:`build` for ``config``."""
    d, c_in = config.d_model, config.in_channels
    fh, fw = config.feature_size
    stem = (9 * c_in * d + d) + (9 * d * d + d)
    projections = 4 * d * d
    if config.attention_variant is AttentionVariant.FULL2D:
        attention = projections + 3 * d * (2 * fh - 1) + 3 * d * (2 * fw - 1)
        norms = 2 * d
    else:
        attention = 2 * projections + 3 * d * (2 * fh - 1) + 3 * d * (2 * fw - 1)
        if config.attention_variant is AttentionVariant.GATED:
            attention += 6
        norms = 4 * d
    ffn = (d * FFN_EXPANSION * d + FFN_EXPANSION * d) + (FFN_EXPANSION * d * d + d)
    decoder = _log2(config.downsample_factor) * (9 * d * d + d)
    head = d + 1
    return stem + config.num_blocks * (attention + norms + ffn) + decoder + head


# ---------------------------------------------------------------------------
# checkpoints


def _floats(arr: np.ndarray) -> str:
    return "[" + ",".join(format(float(v), ".17g") for v in arr.reshape(-1)) + "]"


def save_checkpoint(model: SegModel, path) -> None:
    """Write ``{"version", "config", "params": [{"name", "shape", "data"}]}``."""
    parts = [
        '{"version": %d,\n "config": %s,\n "params": [' % (CHECKPOINT_VERSION, json.dumps(model.config.to_dict(), sort_keys=True))
    ]
    entries = []
    for name, p in model.params.items():
        entries.append('\n  {"name": %s, "shape": %s, "data": %s}' % (json.dumps(name), json.dumps(list(p.shape)), _floats(p.data)))
    parts.append(",".join(entries))
    parts.append("\n ]\n}\n")
    Path(path).write_text("".join(parts), encoding="ascii")


def load_checkpoint(path) -> SegModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="ascii"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint file {path}: {exc}") from None
    if not isinstance(doc, dict) or not {"version", "config", "params"} <= doc.keys():
        raise CheckpointError(f"malformed checkpoint file {path}: missing version/config/params")
    if doc["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc['version']!r} (expected {CHECKPOINT_VERSION})")
    try:
        config = SegModelConfig.from_dict(doc["config"])
    except (TypeError, ValueError, KeyError) as exc:
        raise CheckpointError(f"invalid config in checkpoint {path}: {exc}") from None
    model = build(config)
    seen = set()
    for entry in doc["params"]:
        try:
            name, shape, data = entry["name"], tuple(entry["shape"]), entry["data"]
        except (TypeError, KeyError):
            raise CheckpointError(f"malformed parameter entry in {path}") from None
        if name not in model.params:
            raise CheckpointError(f"unexpected parameter {name!r} in checkpoint")
        p = model.params[name]
        if shape != p.shape:
            raise CheckpointError(f"shape mismatch for parameter {name!r}: file has {list(shape)}, model expects {list(p.shape)}")
        arr = np.asarray(data, dtype=np.float64)
        if arr.size != math.prod(shape):
            raise CheckpointError(f"parameter {name!r} has {arr.size} values, shape {list(shape)} needs {math.prod(shape)}")
        p.data = arr.reshape(shape)
        seen.add(name)
    missing = set(model.params) - seen
    if missing:
        raise CheckpointError(f"checkpoint is missing parameters: {sorted(missing)}")
    return model
