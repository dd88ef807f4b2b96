"""Dilated VGG16 encoder, multi-level concat, ASPP context module and decoder."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from fractions import Fraction
from math import prod

import numpy as np

from .tensor import (
    Tensor,
    bilinear_upsample_x2,
    broadcast_spatial,
    concat_channels,
    conv2d,
    global_avg_pool,
    max_pool,
    relu,
)

# conv widths of VGG16; a pool follows the layers listed in POOL_AFTER (1-based)
VGG16_PLAN = (64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512)
POOL_AFTER = (2, 4, 7, 10, 13)
POOL_STRIDES = (2, 2, 2, 1, 1)
# 1-based conv index -> block/layer name
VGG16_NAMES = (
    "conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2", "conv3_3",
    "conv4_1", "conv4_2", "conv4_3", "conv5_1", "conv5_2", "conv5_3",
)
OUTPUT_STRIDE = 8


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    channel_scale: Fraction = Fraction(1)
    input_size: tuple[int, int] = (240, 320)
    use_aspp: bool = True
    use_multilevel_concat: bool = True
    aspp_rates: tuple[int, ...] = (4, 8, 12)
    aspp_branch_channels: int = 256
    decoder_channels: tuple[int, ...] = (128, 64, 32)
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.channel_scale = Fraction(self.channel_scale).limit_denominator(1 << 16)
        self.input_size = tuple(int(v) for v in self.input_size)
        self.aspp_rates = tuple(int(r) for r in self.aspp_rates)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        self.validate()

    def validate(self) -> None:
        s = self.channel_scale
        if not (0 < s <= 1):
            raise ConfigError(f"channel_scale must lie in (0, 1], got {s}")
        rows, cols = self.input_size
        if rows <= 0 or cols <= 0 or rows % OUTPUT_STRIDE or cols % OUTPUT_STRIDE:
            raise ConfigError(
                f"input_size {rows}x{cols} must be positive and divisible by {OUTPUT_STRIDE}"
            )
        if len(self.decoder_channels) != 3:
            raise ConfigError("decoder needs exactly three upsampling blocks")
        if not self.aspp_rates:
            raise ConfigError("aspp_rates must not be empty")
        widths = set(VGG16_PLAN) | {self.aspp_branch_channels} | set(self.decoder_channels)
        widths.add(self.aspp_branch_channels * (len(self.aspp_rates) + 2))
        for w in widths:
            if (w * s).denominator != 1 or w * s < 1:
                raise ConfigError(f"channel_scale {s} does not give an integral width for {w}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    def width(self, full: int) -> int:
        return int(full * self.channel_scale)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["channel_scale"] = str(self.channel_scale)
        d["input_size"] = list(self.input_size)
        d["aspp_rates"] = list(self.aspp_rates)
        d["decoder_channels"] = list(self.decoder_channels)
        return d


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    group: str  # encoder | aspp | decoder

    @property
    def size(self) -> int:
        return prod(self.shape)


def _conv_specs(name: str, group: str, cin: int, cout: int, k: int) -> list[ParamSpec]:
    return [ParamSpec(f"{name}/weight", (cout, cin, k, k), group),
            ParamSpec(f"{name}/bias", (cout,), group)]


def encoder_tap_channels(config: ModelConfig) -> tuple[int, int, int]:
    return config.width(256), config.width(512), config.width(512)


def context_in_channels(config: ModelConfig) -> int:
    taps = encoder_tap_channels(config)
    return sum(taps) if config.use_multilevel_concat else taps[-1]


def parameter_specs(config: ModelConfig) -> list[ParamSpec]:
    """Names and shapes of every trainable tensor, in contractual order."""
    specs: list[ParamSpec] = []
    cin = 3
    for name, full in zip(VGG16_NAMES, VGG16_PLAN):
        cout = config.width(full)
        specs += _conv_specs(f"encoder/{name}", "encoder", cin, cout, 3)
        cin = cout

    cin = context_in_channels(config)
    branch = config.width(config.aspp_branch_channels)
    if config.use_aspp:
        specs += _conv_specs("aspp/branch_1x1", "aspp", cin, branch, 1)
        for rate in config.aspp_rates:
            specs += _conv_specs(f"aspp/branch_d{rate}", "aspp", cin, branch, 3)
        specs += _conv_specs("aspp/branch_pool", "aspp", cin, branch, 1)
        specs += _conv_specs("aspp/fuse", "aspp", branch * (len(config.aspp_rates) + 2), branch, 1)
    else:
        wide = branch * (len(config.aspp_rates) + 2)
        specs += _conv_specs("context/conv3x3", "aspp", cin, wide, 3)
        specs += _conv_specs("context/fuse", "aspp", wide, branch, 1)

    cin = branch
    for i, full in enumerate(config.decoder_channels, start=1):
        cout = config.width(full)
        specs += _conv_specs(f"decoder/conv{i}", "decoder", cin, cout, 3)
        cin = cout
    specs += _conv_specs("decoder/output", "decoder", cin, 1, 3)
    return specs


def count_parameters(model_or_config) -> int:
    config = model_or_config.config if isinstance(model_or_config, Model) else model_or_config
    return sum(s.size for s in parameter_specs(config))


def parameter_subtotals(config: ModelConfig) -> dict[str, int]:
    totals = {"encoder": 0, "concat": 0, "aspp": 0, "decoder": 0}
    for s in parameter_specs(config):
        totals[s.group] += s.size
    return totals


def xavier_bound(shape: tuple[int, ...]) -> float:
    cout, cin = shape[0], shape[1]
    receptive = prod(shape[2:]) if len(shape) > 2 else 1
    return float(np.sqrt(6.0 / (cin * receptive + cout * receptive)))


class Model:
    """Instantiated parameter set plus the forward wiring for one ``ModelConfig``."""

    def __init__(self, config: ModelConfig | None = None, init: bool = True):
        self.config = config or ModelConfig()
        self.specs = parameter_specs(self.config)
        dtype = np.dtype(self.config.dtype)
        self.params: dict[str, Tensor] = {
            s.name: Tensor(np.zeros(s.shape, dtype=dtype), requires_grad=True) for s in self.specs
        }
        if init:
            xavier_init(self, self.config.seed)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=self.params[k].dtype)

    def _conv(self, name: str, x: Tensor, dilation: int = 1, activate: bool = True) -> Tensor:
        y = conv2d(x, self.params[f"{name}/weight"], self.params[f"{name}/bias"], dilation=dilation)
        return relu(y) if activate else y

    # -- subgraphs ------------------------------------------------------------

    def encode(self, image: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Run the dilated VGG16 stack, returning the pool3, pool4 and pool5 outputs."""
        x = image
        taps = []
        pool_idx = 0
        for idx, name in enumerate(VGG16_NAMES, start=1):
            # every conv after the first stride-1 pool is dilated
            dilation = 2 if idx > POOL_AFTER[3] else 1
            x = self._conv(f"encoder/{name}", x, dilation=dilation)
            if idx in POOL_AFTER:
                x = max_pool(x, 2, POOL_STRIDES[pool_idx])
                pool_idx += 1
                if pool_idx >= 3:
                    taps.append(x)
        return tuple(taps)

    def multilevel_concat(self, taps: tuple[Tensor, Tensor, Tensor]) -> Tensor:
        if not self.config.use_multilevel_concat:
            return taps[-1]
        return concat_channels(list(taps))

    def context(self, x: Tensor) -> Tensor:
        if not self.config.use_aspp:
            x = self._conv("context/conv3x3", x)
            return self._conv("context/fuse", x)
        rows, cols = x.shape[2:]
        branches = [self._conv("aspp/branch_1x1", x)]
        for rate in self.config.aspp_rates:
            branches.append(self._conv(f"aspp/branch_d{rate}", x, dilation=rate))
        pooled = self._conv("aspp/branch_pool", global_avg_pool(x))
        branches.append(broadcast_spatial(pooled, rows, cols))
        return self._conv("aspp/fuse", concat_channels(branches))

    def decode(self, x: Tensor) -> Tensor:
        for i in range(1, len(self.config.decoder_channels) + 1):
            x = self._conv(f"decoder/conv{i}", bilinear_upsample_x2(x))
        return self._conv("decoder/output", x, activate=False)

    def forward(self, image) -> Tensor:
        image = image if isinstance(image, Tensor) else Tensor(image)
        if image.data.ndim == 3:
            image = Tensor(image.data[None])
        if image.data.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"forward: expected (B, 3, H, W) image, got {image.shape}")
        if tuple(image.shape[2:]) != tuple(self.config.input_size):
            raise ValueError(
                f"forward: image is {image.shape[2]}x{image.shape[3]} but model expects "
                f"{self.config.input_size[0]}x{self.config.input_size[1]}"
            )
        if image.dtype != np.dtype(self.config.dtype):
            image = Tensor(image.data.astype(self.config.dtype))
        taps = self.encode(image)
        return self.decode(self.context(self.multilevel_concat(taps)))

    __call__ = forward


def xavier_init(model: Model, seed: int, names=None) -> Model:
    """Glorot-uniform weights and zero biases, drawn in parameter order from one seeded stream."""
    rng = np.random.default_rng(seed)
    for spec in model.specs:
        if names is not None and spec.name not in names:
            continue
        p = model.params[spec.name]
        if spec.name.endswith("/bias"):
            p.data = np.zeros(spec.shape, dtype=p.dtype)
        else:
            bound = xavier_bound(spec.shape)
            p.data = rng.uniform(-bound, bound, size=spec.shape).astype(p.dtype)
    return model
