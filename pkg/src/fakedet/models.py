"""The four face-forgery classifiers and their checkpoint container.

DFCNET: three conv/ReLU/maxpool/dropout stages, dense-256, sigmoid head.
VFDNET: patch tokens + class token + position embedding through pre-norm
attention/FFN blocks with residual additions, sigmoid head on the class
token.
ResNet: stem + residual stages (bottleneck at paper scale, basic blocks
at desk scale), global average pool, sigmoid head.
MobileNetV3: stem + inverted-residual blocks with squeeze-excitation,
pooled head, sigmoid head.

Every model maps [B, 3, H, W] images to [B, 1] fake-probabilities. Desk
scale keeps the same topology at widths that train in seconds on a CPU.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import layers as nn
from . import tensor as tt
from .layers import (AttentionParams, BatchNormParams, Conv2dParams, DenseParams,
                     DepthwiseConv2dParams, FfnParams, LayerNormParams)
from .tensor import Tensor


class CheckpointError(Exception):
    """Checkpoint file unreadable or inconsistent with its model."""


_KINDS = ("dfcnet", "vfdnet", "resnet", "mobilenetv3")
_SCALES = ("paper", "desk")


@dataclass
class ModelConfig:
    """Architecture selector plus the knobs each family exposes.

    ``widths``/``blocks`` configure the CNN families, ``patch_size``
    through ``expansion`` configure VFDNET; unused fields are ignored by
    the other kinds.
    """

    kind: str
    scale: str = "desk"
    input_size: tuple[int, int, int] = (32, 32, 3)
    widths: tuple[int, ...] = ()
    blocks: tuple[int, ...] = ()
    dropout: float = 0.25
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    expansion: int = 4

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.scale not in _SCALES:
            raise ValueError(f"unknown scale {self.scale!r}")
        self.input_size = tuple(int(v) for v in self.input_size)
        if len(self.input_size) != 3 or self.input_size[2] != 3:
            raise ValueError(f"input_size must be (H, W, 3), got {self.input_size}")
        self.widths = tuple(int(w) for w in self.widths)
        self.blocks = tuple(int(b) for b in self.blocks)
        if any(w < 1 for w in self.widths):
            raise ValueError("all widths must be >= 1")
        if self.kind == "vfdnet":
            h, w, _ = self.input_size
            if h % self.patch_size or w % self.patch_size:
                raise ValueError(
                    f"input {h}x{w} not divisible by patch size {self.patch_size}")
            if self.embed_dim % self.heads:
                raise ValueError(
                    f"embed dim {self.embed_dim} not divisible by {self.heads} heads")

    @classmethod
    def default(cls, kind: str, scale: str = "desk") -> "ModelConfig":
        if scale == "paper":
            size = (224, 224, 3)
            table = {
                "dfcnet": dict(widths=(32, 64, 128)),
                "vfdnet": dict(patch_size=16, embed_dim=256, depth=6, heads=8,
                               expansion=4),
                "resnet": dict(widths=(64, 128, 256, 512), blocks=(3, 4, 6, 3)),
                "mobilenetv3": dict(),
            }
        else:
            size = (32, 32, 3)
            table = {
                "dfcnet": dict(widths=(8, 16, 32)),
                "vfdnet": dict(patch_size=4, embed_dim=64, depth=4, heads=4,
                               expansion=4),
                "resnet": dict(widths=(16, 32, 64), blocks=(2, 2, 2)),
                "mobilenetv3": dict(),
            }
        return cls(kind=kind, scale=scale, input_size=size, **table[kind])

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        d["widths"] = list(self.widths)
        d["blocks"] = list(self.blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


# ---- grouped parameter blocks -------------------------------------------


@dataclass
class ConvBn:
    conv: Conv2dParams
    bn: BatchNormParams


@dataclass
class PatchEmbedding:
    """Patch projection plus the learned class token and position table."""

    projection: DenseParams       # P*P*3 -> C
    class_token: Tensor           # [1, C]
    position: Tensor              # [N+1, C]


@dataclass
class EncoderBlock:
    ln1: LayerNormParams
    attn: AttentionParams
    ln2: LayerNormParams
    ffn: FfnParams


@dataclass
class BottleneckBlock:
    conv1: ConvBn                 # 1x1 reduce
    conv2: ConvBn                 # 3x3, carries the stride
    conv3: ConvBn                 # 1x1 expand
    shortcut: ConvBn | None       # 1x1 projection when shape changes


@dataclass
class BasicBlock:
    conv1: ConvBn
    conv2: ConvBn
    shortcut: ConvBn | None


@dataclass
class SqueezeExcite:
    reduce: DenseParams
    expand: DenseParams


@dataclass
class InvertedResidual:
    expand: ConvBn                # 1x1, widens to the expansion channels
    depthwise_conv: DepthwiseConv2dParams
    depthwise_bn: BatchNormParams
    se: SqueezeExcite | None
    project: ConvBn               # 1x1, no activation after
    act: str
    residual: bool


# ---- model base ----------------------------------------------------------


class Model:
    """Config plus a stable named registry of parameters and buffers."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def _register(self, name: str, obj) -> None:
        if obj is None:
            return
        if isinstance(obj, Tensor):
            if name in self._params:
                raise ValueError(f"duplicate parameter name {name!r}")
            self._params[name] = obj
        elif isinstance(obj, np.ndarray):
            self._buffers[name] = obj
        elif dataclasses.is_dataclass(obj):
            for f in dataclasses.fields(obj):
                value = getattr(obj, f.name)
                if isinstance(value, (Tensor, np.ndarray)) or dataclasses.is_dataclass(value):
                    self._register(f"{name}.{f.name}", value)
        elif isinstance(obj, (list, tuple)):
            for i, value in enumerate(obj):
                self._register(f"{name}.{i}", value)
        else:
            raise TypeError(f"cannot register {type(obj).__name__} under {name!r}")

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def named_buffers(self) -> dict[str, np.ndarray]:
        return dict(self._buffers)

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def _check_input(self, x: Tensor) -> None:
        h, w, _ = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (3, h, w):
            raise ValueError(
                f"{self.config.kind} expects [B, 3, {h}, {w}], got {x.shape}")

    def forward(self, x: Tensor, training: bool = False, rng_key=None) -> Tensor:
        raise NotImplementedError


def _drop_seed(rng_key, site: int) -> list[int]:
    base = [0] if rng_key is None else [int(k) for k in rng_key]
    return base + [site]


def _conv_bn(in_ch, out_ch, k, stride, rng, padding="same") -> ConvBn:
    return ConvBn(Conv2dParams.init(in_ch, out_ch, k, stride, padding, rng=rng),
                  BatchNormParams.init(out_ch))


# ---- DFCNET --------------------------------------------------------------


class DFCNet(Model):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__(config)
        rng = np.random.default_rng(seed)
        h, w, _ = config.input_size
        widths = config.widths
        if len(widths) != 3:
            raise ValueError(f"dfcnet needs three stage widths, got {widths}")
        if h % 2 ** len(widths) or w % 2 ** len(widths):
            raise ValueError(
                f"input {h}x{w} not divisible by the 2^{len(widths)} pooling cascade")
        self.stages = []
        in_ch = 3
        for out_ch in widths:
            self.stages.append(Conv2dParams.init(in_ch, out_ch, 3, 1, "same", rng=rng))
            in_ch = out_ch
        flat = widths[-1] * (h // 8) * (w // 8)
        self.fc1 = DenseParams.init(flat, 256, rng=rng)
        self.head = DenseParams.init(256, 1, rng=rng)
        self._register("stages", self.stages)
        self._register("fc1", self.fc1)
        self._register("head", self.head)

    def forward(self, x, training=False, rng_key=None):
        self._check_input(x)
        h = x
        for i, conv in enumerate(self.stages):
            h = nn.maxpool2d(nn.relu(nn.conv2d(h, conv)), 2)
            h = nn.dropout(h, self.config.dropout, training, _drop_seed(rng_key, i))
        h = nn.relu(nn.dense(nn.flatten(h), self.fc1))
        return nn.sigmoid(nn.dense(h, self.head))


# ---- VFDNET --------------------------------------------------------------


class VFDNet(Model):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__(config)
        rng = np.random.default_rng(seed)
        h, w, _ = config.input_size
        p, c = config.patch_size, config.embed_dim
        self.n_patches = (h // p) * (w // p)
        self.patch = PatchEmbedding(
            projection=DenseParams.init(p * p * 3, c, rng=rng),
            class_token=tt.normal((1, c), std=0.02, seed=rng, requires_grad=True),
            position=tt.normal((self.n_patches + 1, c), std=0.02, seed=rng,
                               requires_grad=True),
        )
        self.encoder = [
            EncoderBlock(LayerNormParams.init(c), AttentionParams.init(c, config.heads, rng=rng),
                         LayerNormParams.init(c), FfnParams.init(c, config.expansion, rng=rng))
            for _ in range(config.depth)
        ]
        self.head = DenseParams.init(c, 1, rng=rng)
        self._register("patch", self.patch)
        self._register("encoder", self.encoder)
        self._register("head", self.head)

    def _patchify(self, x: Tensor) -> Tensor:
        b = x.shape[0]
        hgrid = x.shape[2] // self.config.patch_size
        wgrid = x.shape[3] // self.config.patch_size
        p = self.config.patch_size
        t = x.reshape(b, 3, hgrid, p, wgrid, p)
        t = t.transpose((0, 2, 4, 1, 3, 5))
        return t.reshape(b, hgrid * wgrid, 3 * p * p)

    def forward(self, x, training=False, rng_key=None):
        self._check_input(x)
        b = x.shape[0]
        c = self.config.embed_dim
        patches = self._patchify(x)
        flat = patches.reshape(b * self.n_patches, patches.shape[2])
        tokens = nn.dense(flat, self.patch.projection).reshape(b, self.n_patches, c)
        cls = tt.broadcast_to(self.patch.class_token.reshape(1, 1, c), (b, 1, c))
        h = tt.concat([cls, tokens], axis=1)
        h = h + tt.broadcast_to(self.patch.position, h.shape)
        for blk in self.encoder:
            h = h + nn.msa(nn.layer_norm(h, blk.ln1), blk.attn)
            h = h + nn.ffn(nn.layer_norm(h, blk.ln2), blk.ffn)
        return nn.sigmoid(nn.dense(h[:, 0], self.head))


# ---- ResNet --------------------------------------------------------------


class ResNet(Model):
    """Paper scale: 7x7 stem + bottleneck stages (3, 4, 6, 3), 50 weight
    layers counting the stem conv, the 48 main-path stage convs, and the
    final dense layer (projection shortcuts excluded, per the usual
    naming of the architecture). Desk scale: 3x3 stem + basic blocks.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__(config)
        rng = np.random.default_rng(seed)
        self.bottleneck = config.scale == "paper"
        widths, blocks = config.widths, config.blocks
        if len(widths) != len(blocks):
            raise ValueError(f"widths {widths} and blocks {blocks} disagree")
        expansion = 4 if self.bottleneck else 1

        if self.bottleneck:
            self.stem = _conv_bn(3, 64, 7, 2, rng)
            self.stem_pool = (3, 2)
            in_ch = 64
        else:
            self.stem = _conv_bn(3, widths[0], 3, 1, rng)
            self.stem_pool = (2, 2)
            in_ch = widths[0]

        self.stage_list = []
        conv_count = 1
        for s, (mid, n) in enumerate(zip(widths, blocks)):
            stage = []
            for b in range(n):
                stride = 2 if (b == 0 and s > 0) else 1
                out_ch = mid * expansion
                need_proj = stride != 1 or in_ch != out_ch
                shortcut = _conv_bn(in_ch, out_ch, 1, stride, rng) if need_proj else None
                if self.bottleneck:
                    block = BottleneckBlock(
                        conv1=_conv_bn(in_ch, mid, 1, 1, rng),
                        conv2=_conv_bn(mid, mid, 3, stride, rng),
                        conv3=_conv_bn(mid, out_ch, 1, 1, rng),
                        shortcut=shortcut,
                    )
                    conv_count += 3
                else:
                    block = BasicBlock(
                        conv1=_conv_bn(in_ch, mid, 3, stride, rng),
                        conv2=_conv_bn(mid, mid, 3, 1, rng),
                        shortcut=shortcut,
                    )
                    conv_count += 2
                stage.append(block)
                in_ch = out_ch
            self.stage_list.append(stage)

        self.head = DenseParams.init(in_ch, 1, rng=rng)
        self.weight_layers = conv_count + 1
        self._register("stem", self.stem)
        self._register("stages", self.stage_list)
        self._register("head", self.head)

    def _convbn(self, x, cb: ConvBn, training):
        return nn.batch_norm2d(nn.conv2d(x, cb.conv), cb.bn, training)

    def _block(self, x, blk, training):
        if self.bottleneck:
            h = nn.relu(self._convbn(x, blk.conv1, training))
            h = nn.relu(self._convbn(h, blk.conv2, training))
            h = self._convbn(h, blk.conv3, training)
        else:
            h = nn.relu(self._convbn(x, blk.conv1, training))
            h = self._convbn(h, blk.conv2, training)
        skip = x if blk.shortcut is None else self._convbn(x, blk.shortcut, training)
        return nn.relu(h + skip)

    def forward(self, x, training=False, rng_key=None):
        self._check_input(x)
        h = nn.relu(self._convbn(x, self.stem, training))
        h = nn.maxpool2d(h, *self.stem_pool)
        for stage in self.stage_list:
            for blk in stage:
                h = self._block(h, blk, training)
        return nn.sigmoid(nn.dense(nn.global_avg_pool(h), self.head))


# ---- MobileNetV3 ---------------------------------------------------------

# (kernel, expansion channels, output channels, squeeze-excite, activation, stride)
_MOBILENET_PAPER = (
    (3, 16, 16, True, "relu", 2),
    (3, 72, 24, False, "relu", 2),
    (3, 88, 24, False, "relu", 1),
    (5, 96, 40, True, "hard_swish", 2),
    (5, 240, 40, True, "hard_swish", 1),
    (5, 240, 40, True, "hard_swish", 1),
    (5, 120, 48, True, "hard_swish", 1),
    (5, 144, 48, True, "hard_swish", 1),
    (5, 288, 96, True, "hard_swish", 2),
    (5, 576, 96, True, "hard_swish", 1),
    (5, 576, 96, True, "hard_swish", 1),
)
_MOBILENET_DESK = (
    (3, 16, 8, True, "relu", 1),
    (3, 24, 12, True, "hard_swish", 2),
    (3, 36, 12, True, "hard_swish", 1),
    (3, 48, 16, True, "hard_swish", 2),
    (3, 64, 16, True, "hard_swish", 1),
)


class MobileNetV3(Model):
    """Small-variant layout at paper scale; a five-block reduced-width
    layout of the same block design at desk scale."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__(config)
        rng = np.random.default_rng(seed)
        paper = config.scale == "paper"
        rows = _MOBILENET_PAPER if paper else _MOBILENET_DESK
        stem_ch = 16 if paper else 8

        self.stem = _conv_bn(3, stem_ch, 3, 2, rng)
        self.block_list = []
        in_ch = stem_ch
        for k, exp, out_ch, se, act, stride in rows:
            block = InvertedResidual(
                expand=_conv_bn(in_ch, exp, 1, 1, rng),
                depthwise_conv=DepthwiseConv2dParams.init(exp, k, stride, "same", rng=rng),
                depthwise_bn=BatchNormParams.init(exp),
                se=SqueezeExcite(DenseParams.init(exp, max(4, exp // 4), rng=rng),
                                 DenseParams.init(max(4, exp // 4), exp, rng=rng)) if se else None,
                project=_conv_bn(exp, out_ch, 1, 1, rng),
                act=act,
                residual=stride == 1 and in_ch == out_ch,
            )
            self.block_list.append(block)
            in_ch = out_ch

        feat_ch = 576 if paper else 48
        self.features = _conv_bn(in_ch, feat_ch, 1, 1, rng)
        if paper:
            self.pre_head = DenseParams.init(feat_ch, 1024, rng=rng)
            self.head = DenseParams.init(1024, 1, rng=rng)
        else:
            self.pre_head = None
            self.head = DenseParams.init(feat_ch, 1, rng=rng)
        self._register("stem", self.stem)
        self._register("blocks", self.block_list)
        self._register("features", self.features)
        self._register("pre_head", self.pre_head)
        self._register("head", self.head)

    def _block(self, x, blk: InvertedResidual, training):
        act = nn.ACTIVATIONS[blk.act]
        h = act(nn.batch_norm2d(nn.conv2d(x, blk.expand.conv), blk.expand.bn, training))
        h = act(nn.batch_norm2d(nn.depthwise_conv2d(h, blk.depthwise_conv),
                                blk.depthwise_bn, training))
        if blk.se is not None:
            gate = nn.relu(nn.dense(nn.global_avg_pool(h), blk.se.reduce))
            gate = nn.sigmoid(nn.dense(gate, blk.se.expand))
            gate = gate.reshape(gate.shape[0], gate.shape[1], 1, 1)
            h = h * tt.broadcast_to(gate, h.shape)
        h = nn.batch_norm2d(nn.conv2d(h, blk.project.conv), blk.project.bn, training)
        if blk.residual:
            h = h + x
        return h

    def forward(self, x, training=False, rng_key=None):
        self._check_input(x)
        h = nn.hard_swish(nn.batch_norm2d(nn.conv2d(x, self.stem.conv), self.stem.bn, training))
        for blk in self.block_list:
            h = self._block(h, blk, training)
        h = nn.hard_swish(nn.batch_norm2d(nn.conv2d(h, self.features.conv),
                                          self.features.bn, training))
        h = nn.global_avg_pool(h)
        if self.pre_head is not None:
            h = nn.hard_swish(nn.dense(h, self.pre_head))
        return nn.sigmoid(nn.dense(h, self.head))


# ---- builders and module-level ops --------------------------------------


def build_dfcnet(config: ModelConfig, seed: int = 0) -> DFCNet:
    return DFCNet(config, seed)


def build_vfdnet(config: ModelConfig, seed: int = 0) -> VFDNet:
    return VFDNet(config, seed)


def build_resnet(config: ModelConfig, seed: int = 0) -> ResNet:
    return ResNet(config, seed)


def build_mobilenetv3(config: ModelConfig, seed: int = 0) -> MobileNetV3:
    return MobileNetV3(config, seed)


_BUILDERS = {
    "dfcnet": build_dfcnet,
    "vfdnet": build_vfdnet,
    "resnet": build_resnet,
    "mobilenetv3": build_mobilenetv3,
}


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    return _BUILDERS[config.kind](config, seed)


def forward(model: Model, batch: Tensor, training: bool = False, rng_key=None) -> Tensor:
    """Probability that each image is fake (label 1), shape [B, 1]."""
    return model.forward(batch, training=training, rng_key=rng_key)


def count_params(model: Model) -> int:
    return sum(t.size for t in model.named_parameters().values())


def snapshot_state(model: Model) -> dict:
    """Copies of all parameters and buffers, keyed by registry name."""
    return {
        "params": {n: t.data.copy() for n, t in model.named_parameters().items()},
        "buffers": {n: b.copy() for n, b in model.named_buffers().items()},
    }


def restore_state(model: Model, state: dict) -> None:
    params = model.named_parameters()
    for name, arr in state["params"].items():
        params[name].data = arr.copy()
    buffers = model.named_buffers()
    for name, arr in state["buffers"].items():
        buffers[name][:] = arr


# ---- checkpoint container ------------------------------------------------

_MAGIC = b"FAKEDET1"
_FORMAT = 1


def save_checkpoint(model: Model, path) -> None:
    """Self-describing binary: magic, JSON header (kind, config, record
    table), then 32-bit little-endian values in header order."""
    params = model.named_parameters()
    buffers = model.named_buffers()
    header = {
        "format": _FORMAT,
        "kind": model.config.kind,
        "config": model.config.to_dict(),
        "params": [[name, list(t.shape)] for name, t in params.items()],
        "buffers": [[name, list(b.shape)] for name, b in buffers.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for t in params.values():
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        for b in buffers.values():
            f.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_checkpoint(path, seed: int = 0) -> Model:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 12 or raw[:8] != _MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        if header["format"] != _FORMAT:
            raise CheckpointError(f"unsupported checkpoint format {header['format']}")
        config = ModelConfig.from_dict(header["config"])
        model = build_model(config, seed=seed)
    except CheckpointError:
        raise
    except Exception as e:
        raise CheckpointError(f"corrupt checkpoint header in {path}: {e}") from e

    params = model.named_parameters()
    buffers = model.named_buffers()
    offset = 12 + hlen

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 4 * n
        if end > len(raw):
            raise CheckpointError(f"truncated checkpoint {path}")
        arr = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape)
        offset = end
        return arr.astype(np.float32)

    for name, shape in header["params"]:
        if name not in params:
            raise CheckpointError(f"checkpoint parameter {name!r} missing from model")
        t = params[name]
        if tuple(shape) != t.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {shape}, model {list(t.shape)}")
        t.data = np.ascontiguousarray(take(shape))
    for name, shape in header["buffers"]:
        if name not in buffers:
            raise CheckpointError(f"checkpoint buffer {name!r} missing from model")
        buf = buffers[name]
        if tuple(shape) != buf.shape:
            raise CheckpointError(
                f"shape mismatch for buffer {name!r}: checkpoint {shape}, model {list(buf.shape)}")
        buf[:] = take(shape)
    if offset != len(raw):
        raise CheckpointError(f"trailing bytes in checkpoint {path}")
    return model
