"""Analytic per-layer parameter, multiply-accumulate and FLOP accounting.

Convention: a convolution costs k*k*Cin*Cout*Hout*Wout MACs and 2 FLOPs per
MAC; bias adds, activations, pooling and resampling cost one FLOP per output
element; concatenation is free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import (
    POOL_AFTER,
    POOL_STRIDES,
    VGG16_NAMES,
    VGG16_PLAN,
    ModelConfig,
    context_in_channels,
    parameter_specs,
)


@dataclass
class LayerCost:
    name: str
    kind: str
    output_shape: tuple[int, int, int]
    params: int = 0
    macs: int = 0
    flops: int = 0


@dataclass
class FlopReport:
    input_size: tuple[int, int]
    config: dict
    layers: list[LayerCost] = field(default_factory=list)

    @property
    def total_macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def total_flops(self) -> int:
        return sum(l.flops for l in self.layers)

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.layers)

    def subtotal(self, prefix: str, attr: str = "params") -> int:
        return sum(getattr(l, attr) for l in self.layers if l.name.startswith(prefix))


def flop_report(config: ModelConfig, input_size: tuple[int, int] | None = None) -> FlopReport:
    rows, cols = input_size or config.input_size
    sizes = {s.name: s.size for s in parameter_specs(config)}
    report = FlopReport((rows, cols), config.as_dict())
    layers = report.layers

    def conv(name, cin, cout, k, h, w, relu=True):
        macs = k * k * cin * cout * h * w
        params = sizes[f"{name}/weight"] + sizes[f"{name}/bias"]
        layers.append(LayerCost(name, f"conv{k}x{k}", (cout, h, w), params, macs,
                                2 * macs + cout * h * w))
        if relu:
            layers.append(LayerCost(f"{name}/relu", "relu", (cout, h, w), flops=cout * h * w))

    h, w, c = rows, cols, 3
    pool_idx = 0
    for idx, (name, full) in enumerate(zip(VGG16_NAMES, VGG16_PLAN), start=1):
        conv(f"encoder/{name}", c, config.width(full), 3, h, w)
        c = config.width(full)
        if idx in POOL_AFTER:
            stride = POOL_STRIDES[pool_idx]
            pool_idx += 1
            h, w = -(-h // stride), -(-w // stride)
            layers.append(LayerCost(f"encoder/pool{pool_idx}", "maxpool", (c, h, w), flops=c * h * w))

    cin = context_in_channels(config)
    layers.append(LayerCost("concat", "concat", (cin, h, w)))
    branch = config.width(config.aspp_branch_channels)
    n_branches = len(config.aspp_rates) + 2
    if config.use_aspp:
        conv("aspp/branch_1x1", cin, branch, 1, h, w)
        for rate in config.aspp_rates:
            conv(f"aspp/branch_d{rate}", cin, branch, 3, h, w)
        layers.append(LayerCost("aspp/global_pool", "avgpool", (cin, 1, 1), flops=cin))
        conv("aspp/branch_pool", cin, branch, 1, 1, 1)
        layers.append(LayerCost("aspp/branch_pool/upsample", "upsample", (branch, h, w),
                                flops=branch * h * w))
        conv("aspp/fuse", branch * n_branches, branch, 1, h, w)
    else:
        conv("context/conv3x3", cin, branch * n_branches, 3, h, w)
        conv("context/fuse", branch * n_branches, branch, 1, h, w)

    c = branch
    for i, full in enumerate(config.decoder_channels, start=1):
        h, w = 2 * h, 2 * w
        layers.append(LayerCost(f"decoder/upsample{i}", "upsample", (c, h, w), flops=c * h * w))
        cout = config.width(full)
        conv(f"decoder/conv{i}", c, cout, 3, h, w)
        c = cout
    conv("decoder/output", c, 1, 3, h, w, relu=False)
    return report


def format_report(report: FlopReport) -> str:
    lines = [f"{'layer':<30} {'kind':<9} {'output':>16} {'params':>12} {'MACs':>16} {'FLOPs':>16}"]
    for l in report.layers:
        shape = "x".join(str(v) for v in l.output_shape)
        lines.append(f"{l.name:<30} {l.kind:<9} {shape:>16} {l.params:>12,} {l.macs:>16,} {l.flops:>16,}")
    lines.append("")
    for part in ("encoder", "concat", "aspp", "context", "decoder"):
        n = report.subtotal(part)
        if part in ("encoder", "decoder") or n:
            lines.append(f"params[{part}] = {n:,}")
    lines.append(f"params[total] = {report.total_params:,}")
    rows, cols = report.input_size
    lines.append(f"MACs  @ {rows}x{cols} = {report.total_macs:,} ({report.total_macs / 1e9:.2f} G)")
    lines.append(f"FLOPs @ {rows}x{cols} = {report.total_flops:,} ({report.total_flops / 1e9:.2f} G)")
    return "\n".join(lines)
