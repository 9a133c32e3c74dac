"""Attention-gated encoder-decoder segmentation network.

Two encoder stages, a dropout-regularized bottleneck, two decoder stages
whose skip connections pass through learned attention gates, and a 1x1
sigmoid head producing a per-pixel probability map. Blocks are double
3x3 conv + ReLU without normalization layers; downsampling is 2x2
max-pool and upsampling a stride-2 2x2 transposed convolution.

Also provides analytic parameter/multiply-add accounting and the
USEGCKPT binary checkpoint format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

CKPT_MAGIC = b"USEGCKPT"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    in_channels: int = 4
    stage_channels: tuple[int, ...] = (64, 128)
    bottleneck_channels: int = 256
    attention_inter_ratio: float = 0.5
    dropout_p: float = 0.3
    out_channels: int = 1
    input_size: int = 128

    def validate(self):
        if len(self.stage_channels) != 2:
            raise ValueError(f"expected two encoder stages, got {self.stage_channels}")
        if not all(a < b for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError(f"stage_channels must be strictly increasing: {self.stage_channels}")
        if self.bottleneck_channels != 2 * self.stage_channels[-1]:
            raise ValueError(
                f"bottleneck_channels {self.bottleneck_channels} must be twice the last "
                f"stage ({self.stage_channels[-1]})"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if not 0.0 < self.attention_inter_ratio <= 1.0:
            raise ValueError(f"attention_inter_ratio must be in (0, 1], got {self.attention_inter_ratio}")
        return self

    def inter_channels(self, f: int) -> int:
        return max(1, int(f * self.attention_inter_ratio))


class ParameterSet:
    """Ordered map of layer path -> trainable Tensor."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._params[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def count(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for name, t in self._params.items():
            out.add(name, Tensor(t.data.copy(), requires_grad=True))
        return out

    def astype(self, dtype) -> "ParameterSet":
        out = ParameterSet()
        for name, t in self._params.items():
            out.add(name, Tensor(t.data.astype(dtype), requires_grad=True))
        return out


def _layer_shapes(config: ModelConfig):
    """Yield (name, shape, fan_in) for every trainable tensor, in the fixed
    construction order that defines checkpoint layout."""
    cin = config.in_channels
    s1, s2 = config.stage_channels
    bott = config.bottleneck_channels
    cout = config.out_channels

    def block(prefix, c_in, c_out):
        yield f"{prefix}.conv1.weight", (c_out, c_in, 3, 3), c_in * 9
        yield f"{prefix}.conv1.bias", (c_out,), 0
        yield f"{prefix}.conv2.weight", (c_out, c_out, 3, 3), c_out * 9
        yield f"{prefix}.conv2.bias", (c_out,), 0

    def gate(prefix, f):
        f_int = config.inter_channels(f)
        yield f"{prefix}.wx", (f_int, f, 1, 1), f
        yield f"{prefix}.wg", (f_int, f, 1, 1), f
        yield f"{prefix}.bias", (f_int,), 0
        yield f"{prefix}.psi.weight", (1, f_int, 1, 1), f_int
        yield f"{prefix}.psi.bias", (1,), 0

    yield from block("enc1", cin, s1)
    yield from block("enc2", s1, s2)
    yield from block("bottleneck", s2, bott)
    yield "up1.weight", (bott, s2, 2, 2), bott * 4
    yield "up1.bias", (s2,), 0
    yield from gate("att2", s2)
    yield from block("dec1", 2 * s2, s2)
    yield "up2.weight", (s2, s1, 2, 2), s2 * 4
    yield "up2.bias", (s1,), 0
    yield from gate("att1", s1)
    yield from block("dec2", 2 * s1, s1)
    yield "head.weight", (cout, s1, 1, 1), s1
    yield "head.bias", (cout,), 0


def init_parameters(config: ModelConfig, rng: np.random.Generator, dtype=np.float64) -> ParameterSet:
    """He-normal weights, zero biases, in a fixed order driven by ``rng``."""
    config.validate()
    params = ParameterSet()
    for name, shape, fan_in in _layer_shapes(config):
        if name.endswith("bias"):
            data = np.zeros(shape, dtype=dtype)
        else:
            std = np.sqrt(2.0 / fan_in)
            data = (rng.standard_normal(shape) * std).astype(dtype)
        params.add(name, Tensor(data, requires_grad=True))
    return params


def count_parameters(config: ModelConfig) -> int:
    """Exact trainable scalar count of the constructed network."""
    config.validate()
    total = 0
    for _, shape, _ in _layer_shapes(config):
        n = 1
        for d in shape:
            n *= d
        total += n
    return total


def count_macs(config: ModelConfig, input_size: int | None = None) -> int:
    """Analytic multiply-add count at batch 1, summed over every convolution,
    transposed convolution, and attention-gate 1x1 conv.

    Each (transposed) convolution is charged Cin * Cout * k^2 per output
    pixel; bias adds and activations are not counted.
    """
    config.validate()
    s = input_size if input_size is not None else config.input_size
    if s % 4:
        raise ValueError(f"input size must be divisible by 4, got {s}")
    cin = config.in_channels
    s1, s2 = config.stage_channels
    bott = config.bottleneck_channels

    def conv(c_in, c_out, k, hw):
        return c_in * c_out * k * k * hw * hw

    def block(c_in, c_out, hw):
        return conv(c_in, c_out, 3, hw) + conv(c_out, c_out, 3, hw)

    def gate(f, hw):
        f_int = config.inter_channels(f)
        return 2 * conv(f, f_int, 1, hw) + conv(f_int, 1, 1, hw)

    total = block(cin, s1, s)
    total += block(s1, s2, s // 2)
    total += block(s2, bott, s // 4)
    total += conv(bott, s2, 2, s // 2)  # up1, charged at output resolution
    total += gate(s2, s // 2)
    total += block(2 * s2, s2, s // 2)
    total += conv(s2, s1, 2, s)  # up2
    total += gate(s1, s)
    total += block(2 * s1, s1, s)
    total += conv(s1, config.out_channels, 1, s)
    return total


def double_conv_block(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    """Two (3x3 conv, pad 1, bias, ReLU) layers; spatial dims preserved."""
    h = T.relu(T.conv2d(x, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"], padding=1))
    return T.relu(T.conv2d(h, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"], padding=1))


def attention_gate(x: Tensor, g: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    """Gate the skip feature ``x`` with coefficients derived from itself and
    the same-resolution gating signal ``g``.

    alpha = sigmoid(psi(relu(Wx*x + Wg*g + b))), broadcast over channels;
    returns alpha (*) x.
    """
    if x.data.shape != g.data.shape:
        raise ValueError(f"attention_gate: shape mismatch {x.data.shape} vs {g.data.shape}")
    ax = T.conv2d(x, params[f"{prefix}.wx"], params[f"{prefix}.bias"])
    ag = T.conv2d(g, params[f"{prefix}.wg"])
    fused = T.relu(ax + ag)
    alpha = T.sigmoid(T.conv2d(fused, params[f"{prefix}.psi.weight"], params[f"{prefix}.psi.bias"]))
    return T.elementwise_mul(x, alpha)


def forward(
    x: Tensor,
    config: ModelConfig,
    params: ParameterSet,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Full forward pass producing an (N, 1, S, S) probability map in (0, 1)."""
    n, c, h, w = x.data.shape
    if c != config.in_channels:
        raise ValueError(f"input has {c} channels, config expects {config.in_channels}")
    if h % 4 or w % 4:
        raise ValueError(f"spatial dims must be divisible by 4, got {h}x{w}")
    if training and config.dropout_p > 0 and rng is None:
        raise ValueError("training forward with dropout needs an rng")

    e1 = double_conv_block(x, params, "enc1")
    e2 = double_conv_block(T.maxpool2d(e1), params, "enc2")
    b = double_conv_block(T.maxpool2d(e2), params, "bottleneck")
    b = T.dropout(b, config.dropout_p, training, rng)

    d1 = T.conv_transpose2d(b, params["up1.weight"], params["up1.bias"])
    gated2 = attention_gate(e2, d1, params, "att2")
    d1 = double_conv_block(T.concat_channels(gated2, d1), params, "dec1")

    d2 = T.conv_transpose2d(d1, params["up2.weight"], params["up2.bias"])
    gated1 = attention_gate(e1, d2, params, "att1")
    d2 = double_conv_block(T.concat_channels(gated1, d2), params, "dec2")

    return T.sigmoid(T.conv2d(d2, params["head.weight"], params["head.bias"]))


@dataclass
class Model:
    """Config plus parameters, the unit the trainer and CLI pass around."""

    config: ModelConfig
    params: ParameterSet

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0, dtype=np.float64) -> "Model":
        rng = np.random.default_rng(seed)
        return cls(config, init_parameters(config, rng, dtype=dtype))

    def forward(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        return forward(x, self.config, self.params, training=training, rng=rng)

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Probability maps for a (N, C, S, S) or (C, S, S) array, no graph."""
        arr = np.asarray(images)
        single = arr.ndim == 3
        if single:
            arr = arr[None]
        dtype = self.params.tensors()[0].dtype
        with T.no_grad():
            out = self.forward(Tensor(arr.astype(dtype))).data
        return out[0] if single else out


def config_from_params(params: ParameterSet) -> ModelConfig:
    """Reconstruct the architecture a checkpoint was saved with from its
    tensor shapes; raises if the shapes do not form a valid network."""
    for name in ("enc1.conv1.weight", "enc2.conv1.weight", "bottleneck.conv1.weight", "head.weight"):
        if name not in params:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
    s1, cin = params["enc1.conv1.weight"].data.shape[:2]
    s2 = params["enc2.conv1.weight"].data.shape[0]
    bott = params["bottleneck.conv1.weight"].data.shape[0]
    cout = params["head.weight"].data.shape[0]
    f_int = params["att2.wx"].data.shape[0] if "att2.wx" in params else max(1, s2 // 2)
    config = ModelConfig(
        in_channels=cin,
        stage_channels=(s1, s2),
        bottleneck_channels=bott,
        attention_inter_ratio=f_int / s2,
        out_channels=cout,
    ).validate()
    expected = {name: shape for name, shape, _ in _layer_shapes(config)}
    for name, shape in expected.items():
        if name not in params:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        if params[name].data.shape != shape:
            raise ValueError(
                f"checkpoint/config mismatch: {name} has shape {params[name].data.shape}, "
                f"expected {shape}"
            )
    extra = set(params.names()) - set(expected)
    if extra:
        raise ValueError(f"checkpoint has unexpected parameters: {sorted(extra)}")
    return config


def save_checkpoint(params: ParameterSet, path):
    """Write the USEGCKPT format: magic, u32 version, then one record per
    parameter (u16 name length, name, u8 dim count, u32 dims, f64 LE values)."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        for name, t in params.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", t.data.ndim))
            f.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path, dtype=np.float64) -> ParameterSet:
    """Read a USEGCKPT file back into a ParameterSet (file order preserved)."""
    with open(path, "rb") as f:
        blob = f.read()

    def fail(offset, why):
        raise ValueError(f"bad checkpoint {path}: {why} at offset {offset}")

    if blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        fail(0, f"magic {blob[:len(CKPT_MAGIC)]!r} != {CKPT_MAGIC!r}")
    pos = len(CKPT_MAGIC)
    if len(blob) < pos + 4:
        fail(pos, "truncated version field")
    (version,) = struct.unpack_from("<I", blob, pos)
    if version != CKPT_VERSION:
        fail(pos, f"unsupported version {version}")
    pos += 4

    params = ParameterSet()
    while pos < len(blob):
        if len(blob) < pos + 2:
            fail(pos, "truncated name length")
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        if len(blob) < pos + name_len:
            fail(pos, "truncated name")
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        if len(blob) < pos + 1:
            fail(pos, "truncated dim count")
        ndim = blob[pos]
        pos += 1
        if len(blob) < pos + 4 * ndim:
            fail(pos, "truncated dims")
        dims = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        n = 1
        for d in dims:
            n *= d
        if len(blob) < pos + 8 * n:
            fail(pos, f"declared dims {dims} exceed payload")
        data = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(dims)
        pos += 8 * n
        params.add(name, Tensor(data.astype(dtype), requires_grad=True))
    return params
