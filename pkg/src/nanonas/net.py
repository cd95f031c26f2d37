"""Declarative quantized 1-D CNN basecallers.

A network is a dense stem convolution, a stack of separable blocks and a
pointwise head to the 5 CTC classes.  Each block repeats
``grouped conv(K) -> pointwise conv -> batch norm -> QuantReLU``; a skip
connection, when present, is added before the final activation and goes
through a pointwise projection + batch norm if the channel count changes.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .ctc import NUM_CLASSES
from .quant import FLOAT, FakeQuantizer, LayerCost, QuantSpec, bops, layers_latency, model_size_bytes, quantize_dequantize
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass
class BlockConfig:
    kernel_size: int = 3
    channels_out: int = 16
    repeats: int = 1
    groups: int | None = None  # None: depthwise (groups == channels_in)
    has_skip: bool = False
    quant: QuantSpec = FLOAT
    is_identity: bool = False  # parameter-free; pads/truncates to channels_out
    stride: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["quant"] = self.quant.to_list()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BlockConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown block keys: {sorted(unknown)}")
        d = dict(d)
        if "quant" in d:
            d["quant"] = QuantSpec.parse(d["quant"])
        return cls(**d)


@dataclass
class ModelConfig:
    stem: BlockConfig = field(default_factory=lambda: BlockConfig(kernel_size=9, channels_out=16))
    blocks: list = field(default_factory=list)
    head_quant: QuantSpec = FLOAT
    input_features: int = 1
    num_classes: int = NUM_CLASSES
    chunk_len: int = 400  # reference input length for BOPs/latency accounting
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def to_dict(self) -> dict:
        return {
            "stem": self.stem.to_dict(),
            "blocks": [b.to_dict() for b in self.blocks],
            "head_quant": self.head_quant.to_list(),
            "input_features": self.input_features,
            "num_classes": self.num_classes,
            "chunk_len": self.chunk_len,
            "bn_momentum": self.bn_momentum,
            "bn_eps": self.bn_eps,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "stem" in d:
            d["stem"] = BlockConfig.from_dict(d["stem"])
        if "blocks" in d:
            d["blocks"] = [BlockConfig.from_dict(b) for b in d["blocks"]]
        if "head_quant" in d:
            d["head_quant"] = QuantSpec.parse(d["head_quant"])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))

    def validate(self) -> None:
        if self.num_classes != NUM_CLASSES:
            raise ConfigError(f"head must emit {NUM_CLASSES} classes")
        if self.input_features != 1:
            raise ConfigError("only single-feature (raw signal) input is supported")
        stem = self.stem
        if stem.is_identity or stem.kernel_size < 1 or stem.kernel_size % 2 == 0:
            raise ConfigError("stem needs an odd kernel size")
        if stem.stride < 1:
            raise ConfigError("stem stride must be >= 1")
        c_in = stem.channels_out
        for i, b in enumerate(self.blocks):
            if b.is_identity:
                if b.channels_out < 1:
                    raise ConfigError(f"block {i}: identity needs a positive width")
                c_in = b.channels_out
                continue
            if b.kernel_size < 1 or b.kernel_size % 2 == 0:
                raise ConfigError(f"block {i}: kernel size must be odd, got {b.kernel_size}")
            if b.repeats < 1 or b.channels_out < 1:
                raise ConfigError(f"block {i}: repeats and channels must be positive")
            if b.stride != 1:
                raise ConfigError(f"block {i}: only the stem may stride")
            if b.groups is not None and (c_in % b.groups or b.channels_out % b.groups):
                raise ConfigError(f"block {i}: groups {b.groups} must divide {c_in} and {b.channels_out}")
            c_in = b.channels_out

    def channels_in(self) -> list[int]:
        """Input width of every block (identity blocks included)."""
        out, c = [], self.stem.channels_out
        for b in self.blocks:
            out.append(c)
            c = b.channels_out
        return out

    @property
    def final_channels(self) -> int:
        return self.blocks[-1].channels_out if self.blocks else self.stem.channels_out


def conv_params(c_in: int, c_out: int, kernel: int, groups: int = 1, bias: bool = False) -> int:
    return c_out * (c_in // groups) * kernel + (c_out if bias else 0)


def block_params(block: BlockConfig, c_in: int) -> int:
    if block.is_identity:
        return 0
    total, c = 0, c_in
    for _ in range(block.repeats):
        g = c if block.groups is None else block.groups
        total += conv_params(c, c, block.kernel_size, g)
        total += conv_params(c, block.channels_out, 1)
        total += 2 * block.channels_out
        c = block.channels_out
    if block.has_skip and c_in != block.channels_out:
        total += conv_params(c_in, block.channels_out, 1) + 2 * block.channels_out
    return total


def config_params(cfg: ModelConfig) -> int:
    stem = cfg.stem
    total = conv_params(1, stem.channels_out, stem.kernel_size) + 2 * stem.channels_out
    for b, c_in in zip(cfg.blocks, cfg.channels_in()):
        total += block_params(b, c_in)
    total += conv_params(cfg.final_channels, cfg.num_classes, 1, bias=True)
    return total


# ---------------------------------------------------------------- layers


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv:
    def __init__(self, name, c_in, c_out, kernel, quant, rng, groups=1, stride=1, bias=False):
        self.name = name
        self.stride = stride
        self.groups = groups
        self.padding = (kernel - 1) // 2
        self.quant = quant
        fan_in = (c_in // groups) * kernel
        self.weight = Tensor(_uniform(rng, (c_out, c_in // groups, kernel), fan_in), requires_grad=True)
        self.bias = Tensor(_uniform(rng, (c_out,), fan_in), requires_grad=True) if bias else None
        self.wq = FakeQuantizer(quant.weight_bits, signed=True)

    @property
    def c_in(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def params(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        w = quantize_dequantize(self.weight, self.wq, calibrate=True)
        return T.conv1d(x, w, self.bias, self.stride, self.padding, self.groups)

    def out_len(self, length: int) -> int:
        return T.conv_out_len(length, self.kernel, self.stride, self.padding)

    def cost(self, length: int) -> LayerCost:
        nonzero = int(np.count_nonzero(self.weight.data))
        if self.bias is not None:
            nonzero += int(np.count_nonzero(self.bias.data))
        return LayerCost(
            self.name, "conv", sum(p.data.size for p in self.params()), self.quant,
            self.c_in, self.c_out, self.groups, self.kernel, self.out_len(length), nonzero,
        )


class BatchNorm:
    def __init__(self, name, channels, quant, momentum=0.1, eps=1e-5):
        self.name = name
        self.quant = quant
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)

    def params(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batch_norm1d(
            x, self.gamma, self.beta, self.running_mean, self.running_var, training, self.momentum, self.eps
        )

    def cost(self) -> LayerCost:
        nz = int(np.count_nonzero(self.gamma.data) + np.count_nonzero(self.beta.data))
        return LayerCost(self.name, "bn", 2 * self.gamma.shape[0], self.quant, nonzero=nz)


class QuantReLU:
    """ReLU clamped to the tracked range and fake-quantized (plain ReLU at 32 bits)."""

    def __init__(self, name, bits, ema_decay=0.99):
        self.name = name
        self.q = FakeQuantizer(bits, signed=False, tracker="ema", ema_decay=ema_decay)

    def __call__(self, x: Tensor, observe: bool) -> Tensor:
        if self.q.passthrough:
            return T.relu(x)
        if observe:
            self.q.observe(x.data)
        if not self.q.calibrated:
            raise ValueError(f"{self.name}: activation quantizer used before calibration")
        return quantize_dequantize(T.clamp(x, 0.0, self.q.tracked_max or 0.0), self.q)


class Unit:
    """One repeat of a block: grouped conv -> pointwise conv -> BN -> QuantReLU."""

    def __init__(self, prefix, c_in, c_out, cfg: BlockConfig, rng, momentum, eps):
        g = c_in if cfg.groups is None else cfg.groups
        self.dw = Conv(f"{prefix}.dw", c_in, c_in, cfg.kernel_size, cfg.quant, rng, groups=g)
        self.pw = Conv(f"{prefix}.pw", c_in, c_out, 1, cfg.quant, rng)
        self.bn = BatchNorm(f"{prefix}.bn", c_out, cfg.quant, momentum, eps)
        self.act = QuantReLU(f"{prefix}.act", cfg.quant.act_bits)

    def pre_activation(self, x, training):
        return self.bn(self.pw(self.dw(x)), training)


class Block:
    def __init__(self, index, cfg: BlockConfig, c_in, rng, momentum=0.1, eps=1e-5):
        self.index = index
        self.cfg = cfg
        self.c_in = c_in
        self.units: list[Unit] = []
        self.proj: tuple[Conv, BatchNorm] | None = None
        if cfg.is_identity:
            return
        c = c_in
        for r in range(cfg.repeats):
            self.units.append(Unit(f"block{index}.r{r}", c, cfg.channels_out, cfg, rng, momentum, eps))
            c = cfg.channels_out
        if cfg.has_skip and c_in != cfg.channels_out:
            conv = Conv(f"block{index}.proj", c_in, cfg.channels_out, 1, cfg.quant, rng)
            bn = BatchNorm(f"block{index}.proj_bn", cfg.channels_out, cfg.quant, momentum, eps)
            self.proj = (conv, bn)

    @property
    def has_skip(self) -> bool:
        return self.cfg.has_skip and not self.cfg.is_identity

    def forward(self, x: Tensor, training: bool, observe: bool) -> Tensor:
        if self.cfg.is_identity:
            return T.match_channels(x, self.cfg.channels_out)
        h = x
        for r, unit in enumerate(self.units):
            h = unit.pre_activation(h, training)
            if r == len(self.units) - 1 and self.has_skip:
                res = x if self.proj is None else self.proj[1](self.proj[0](x), training)
                h = T.add(h, res)
            h = unit.act(h, observe)
        return h

    def layers(self) -> Iterator:
        for u in self.units:
            yield u.dw
            yield u.pw
            yield u.bn
        if self.proj is not None:
            yield from self.proj

    def quant_acts(self) -> Iterator[QuantReLU]:
        for u in self.units:
            yield u.act


class Model:
    """Realized network built from a :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.training = True
        self.calibrating = False
        rng = np.random.default_rng(seed)
        m, eps = config.bn_momentum, config.bn_eps
        stem = config.stem
        self.stem_conv = Conv("stem.conv", 1, stem.channels_out, stem.kernel_size, stem.quant, rng, stride=stem.stride)
        self.stem_bn = BatchNorm("stem.bn", stem.channels_out, stem.quant, m, eps)
        self.stem_act = QuantReLU("stem.act", stem.quant.act_bits)
        self.blocks = [
            Block(i, b, c_in, rng, m, eps) for i, (b, c_in) in enumerate(zip(config.blocks, config.channels_in()))
        ]
        self.head = Conv("head", config.final_channels, config.num_classes, 1, config.head_quant, rng, bias=True)

    # -- modes
    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    # -- forward
    def features(self, x: Tensor, upto: int | None = None) -> Tensor:
        """Activations after the stem and the first ``upto`` blocks."""
        observe = self.training or self.calibrating
        h = self.stem_act(self.stem_bn(self.stem_conv(x), self.training), observe)
        for block in self.blocks[:upto]:
            h = block.forward(h, self.training, observe)
        return h

    def logits(self, x: Tensor) -> Tensor:
        return self.head(self.features(x))

    def forward(self, batch: Tensor) -> Tensor:
        """Frame log-posteriors ``[T, N, 5]`` for a ``[N, 1, L]`` batch."""
        if batch.ndim != 3 or batch.shape[1] != 1:
            raise ValueError(f"expected [N, 1, L] input, got {batch.shape}")
        if batch.shape[2] < self.config.stem.kernel_size:
            raise ValueError(f"input length {batch.shape[2]} shorter than stem kernel")
        return T.transpose(T.log_softmax(self.logits(batch), axis=1), (2, 0, 1))

    __call__ = forward

    def calibrate(self, batch: Tensor) -> None:
        """Run one forward that updates activation ranges without touching BN state."""
        prev = self.training, self.calibrating
        self.training, self.calibrating = False, True
        try:
            self.forward(batch)
        finally:
            self.training, self.calibrating = prev

    def output_length(self, length: int) -> int:
        return self.stem_conv.out_len(length)

    # -- introspection
    def conv_layers(self) -> list[Conv]:
        return [l for l in self.layers() if isinstance(l, Conv)]

    def layers(self) -> Iterator:
        yield self.stem_conv
        yield self.stem_bn
        for b in self.blocks:
            yield from b.layers()
        yield self.head

    def quant_acts(self) -> Iterator[QuantReLU]:
        yield self.stem_act
        for b in self.blocks:
            yield from b.quant_acts()

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for layer in self.layers():
            if isinstance(layer, Conv):
                out[f"{layer.name}.weight"] = layer.weight
                if layer.bias is not None:
                    out[f"{layer.name}.bias"] = layer.bias
            else:
                out[f"{layer.name}.gamma"] = layer.gamma
                out[f"{layer.name}.beta"] = layer.beta
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters and batch-norm buffers by name."""
        out = {k: v.data for k, v in self.named_parameters().items()}
        for layer in self.layers():
            if isinstance(layer, BatchNorm):
                out[f"{layer.name}.running_mean"] = layer.running_mean
                out[f"{layer.name}.running_var"] = layer.running_var
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        if set(own) != set(state):
            missing, extra = set(own) - set(state), set(state) - set(own)
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, tensor in self.named_parameters().items():
            arr = state[name]
            if arr.shape != tensor.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {tensor.shape}")
            tensor.data = np.array(arr, dtype=np.float32, copy=True)
        for layer in self.layers():
            if isinstance(layer, BatchNorm):
                layer.running_mean = np.array(state[f"{layer.name}.running_mean"], np.float32, copy=True)
                layer.running_var = np.array(state[f"{layer.name}.running_var"], np.float32, copy=True)

    def quant_state(self) -> dict[str, dict]:
        return {a.name: a.q.state() for a in self.quant_acts()}

    def load_quant_state(self, state: dict[str, dict]) -> None:
        acts = {a.name: a for a in self.quant_acts()}
        if set(acts) != set(state):
            raise ValueError("quantizer state does not match the model layers")
        for name, st in state.items():
            acts[name].q = FakeQuantizer.from_state(st)

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def layer_costs(self, length: int | None = None) -> list[LayerCost]:
        length = self.config.chunk_len if length is None else length
        stem_len = self.output_length(length)
        costs = []
        for layer in self.layers():
            if isinstance(layer, Conv):
                costs.append(layer.cost(length if layer is self.stem_conv else stem_len))
            else:
                costs.append(layer.cost())
        return costs

    def skip_blocks(self) -> list[int]:
        return [b.index for b in self.blocks if b.has_skip]


def build(config: ModelConfig, seed: int = 0) -> Model:
    return Model(config, seed)


def count_params(obj) -> int:
    if isinstance(obj, ModelConfig):
        return config_params(obj)
    return sum(p.data.size for p in obj.parameters())


def per_layer_report(model: Model, length: int | None = None) -> list[dict]:
    rows = []
    for cost in model.layer_costs(length):
        rows.append({
            "layer": cost.name,
            "kind": cost.kind,
            "params": cost.params,
            "weight_bits": cost.quant.weight_bits,
            "act_bits": cost.quant.act_bits,
            "bytes": cost.params * cost.quant.weight_bits / 8,
            "bops": bops(cost),
            "latency": layers_latency([cost]),
        })
    return rows


def remove_skip(model: Model, block_index: int, inplace: bool = False) -> Model:
    """Delete the residual path (and projection) of one block."""
    if not inplace:
        model = model.copy()
    if not 0 <= block_index < len(model.blocks):
        raise IndexError(f"no block {block_index}")
    block = model.blocks[block_index]
    if not block.has_skip:
        raise ValueError(f"block {block_index} has no skip connection")
    block.proj = None
    block.cfg = replace(block.cfg, has_skip=False)
    model.config.blocks[block_index] = block.cfg
    return model


def model_bytes(model: Model) -> float:
    return model_size_bytes(model)["total_bytes"]
