"""Channel-gated CIFAR-style residual network.

Both 3x3 convolutions of every basic block are gated. The stem, the 1x1
projection shortcuts and the classifier are never gated, so the residual
add always sees full-width tensors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractViolation
from .gating import GateModule, LayerSpec, apply_gate


@dataclass
class ModelSpec:
    num_classes: int = 4
    widths: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    in_channels: int = 3
    input_size: int = 16
    gated: bool = True
    gate_hidden: int = 16
    temperature: float = 1.0
    gate_init_on_bias: float = 2.0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths or min(self.widths) < 1:
            raise ConfigurationError("widths must be a non-empty list of positive ints")
        if self.blocks_per_stage < 1 or self.num_classes < 2:
            raise ConfigurationError("need blocks_per_stage >= 1 and num_classes >= 2")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


class GatedBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride, first_id, spec: ModelSpec):
        super().__init__()
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride
        self.ids = (first_id, first_id + 1)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch))
        self.gate1 = self.gate2 = None
        if spec.gated:
            kw = dict(hidden=spec.gate_hidden, temperature=spec.temperature,
                      init_on_bias=spec.gate_init_on_bias)
            self.gate1 = GateModule(in_ch, out_ch, layer_id=self.ids[0], **kw)
            self.gate2 = GateModule(out_ch, out_ch, layer_id=self.ids[1], **kw)

    def _gated(self, x, conv, bn, gate, layer_id, masks, decisions):
        out = bn(conv(x))
        if masks is not None:
            return apply_gate(out, masks[layer_id])
        if gate is None:
            return out
        d = gate(x)
        if decisions is not None:
            decisions.append(d)
        return apply_gate(out, d)

    def forward(self, x, masks=None, decisions=None):
        out = F.relu(self._gated(x, self.conv1, self.bn1, self.gate1, self.ids[0], masks, decisions))
        out = self._gated(out, self.conv2, self.bn2, self.gate2, self.ids[1], masks, decisions)
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class GatedResNet(nn.Module):
    """Residual classifier; ``forward`` optionally returns every GateDecision.

    ``masks`` maps layer id to a fixed 0/1 vector and replaces the gates: this
    is the masked full model the pruner must reproduce.
    """

    def __init__(self, spec: ModelSpec | None = None, **kwargs):
        super().__init__()
        self.spec = spec = spec or ModelSpec(**kwargs)
        w0 = spec.widths[0]
        self.conv1 = nn.Conv2d(spec.in_channels, w0, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(w0)
        blocks, in_ch, next_id = [], w0, 0
        for s, width in enumerate(spec.widths):
            for b in range(spec.blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(GatedBlock(in_ch, width, stride, next_id, spec))
                in_ch, next_id = width, next_id + 2
        self.blocks = nn.ModuleList(blocks)
        self.fc = nn.Linear(in_ch, spec.num_classes)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    @property
    def gated(self):
        return self.spec.gated

    def layer_specs(self):
        specs, size = [], self.spec.input_size
        for blk in self.blocks:
            out_size = (size - 1) // blk.stride + 1
            specs.append(LayerSpec(blk.ids[0], blk.in_ch, blk.out_ch, (size, size), self.gated))
            specs.append(LayerSpec(blk.ids[1], blk.out_ch, blk.out_ch, (out_size, out_size), self.gated))
            size = out_size
        return specs

    def gated_layer_ids(self):
        return [s.layer_id for s in self.layer_specs()] if self.gated else []

    def forward(self, x, masks=None, return_decisions=False):
        if x.dim() != 4 or x.shape[1] != self.spec.in_channels:
            raise ContractViolation(f"expected (B, {self.spec.in_channels}, H, W), got {tuple(x.shape)}")
        if masks is not None:
            missing = set(self.gated_layer_ids() or [i for b in self.blocks for i in b.ids]) - set(masks)
            if missing:
                raise ContractViolation(f"masks missing layers {sorted(missing)}")
        decisions = [] if return_decisions else None
        out = F.relu(self.bn1(self.conv1(x)))
        for blk in self.blocks:
            out = blk(out, masks, decisions)
        out = F.adaptive_avg_pool2d(out, 1).flatten(1)
        logits = self.fc(out)
        if return_decisions:
            return logits, decisions
        return logits

    def network_parameters(self):
        return [p for n, p in self.named_parameters() if ".gate" not in n]

    def gate_parameters(self):
        return [p for n, p in self.named_parameters() if ".gate" in n]
