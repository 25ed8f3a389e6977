"""Per-channel gate modules.

Each gated convolution owns a small gate network that looks at the same
activation the convolution consumes and emits one keep/drop bit per output
channel. Forward passes use hard bits; in training mode the bits are drawn
with the Gumbel-max trick and gradients flow through the relaxed softmax
(straight-through estimator).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractViolation

TRAIN = "train"
EVAL = "eval"
_EPS = 1e-20


@dataclass(frozen=True)
class LayerSpec:
    layer_id: int
    in_channels: int
    out_channels: int
    spatial: tuple[int, int]
    gated: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ContractViolation(f"layer {self.layer_id}: channel counts must be >= 1")


@dataclass
class GateDecision:
    """Gate output for one layer.

    ``hard`` holds exact 0/1 values, shape (batch, m). In training mode it
    carries the straight-through gradient of the relaxed sample. ``soft`` is
    the noise-free probability of the "on" class.
    """

    hard: torch.Tensor
    soft: torch.Tensor
    layer_id: int

    def validate(self):
        h = self.hard.detach()
        if not bool(((h == 0) | (h == 1)).all()):
            raise ContractViolation(f"layer {self.layer_id}: hard gate values outside {{0,1}}")
        s = self.soft.detach()
        if not bool(((s >= 0) & (s <= 1)).all()):
            raise ContractViolation(f"layer {self.layer_id}: soft gate values outside [0,1]")
        return self


def sample_gumbel(shape, generator=None, dtype=torch.float32):
    u = torch.rand(shape, generator=generator, dtype=dtype)
    return -torch.log(-torch.log(u + _EPS) + _EPS)


def relaxed_on(logits, noise, temperature):
    """On-class probability of the Gumbel-softmax relaxation."""
    return F.softmax((logits + noise) / temperature, dim=-1)[..., 1]


def decide(logits, mode, temperature=1.0, noise=None, layer_id=-1):
    """Turn per-channel 2-way logits (batch, m, 2) into a GateDecision."""
    if temperature <= 0:
        raise ConfigurationError(f"gate temperature must be positive, got {temperature}")
    soft = F.softmax(logits, dim=-1)[..., 1]
    if mode == EVAL:
        hard = (soft >= 0.5).to(logits.dtype)
    elif mode == TRAIN:
        if noise is None:
            noise = sample_gumbel(logits.shape, dtype=logits.dtype).to(logits.device)
        y = relaxed_on(logits, noise, temperature)
        bits = ((logits + noise).argmax(dim=-1) == 1).to(logits.dtype)
        # y - y.detach() is exactly zero, so the forward value stays binary
        hard = bits + (y - y.detach())
    else:
        raise ConfigurationError(f"unknown gate mode {mode!r}")
    return GateDecision(hard=hard, soft=soft, layer_id=layer_id).validate()


class GateModule(nn.Module):
    """Pool -> linear -> batchnorm -> relu -> linear head with 2 logits per channel."""

    def __init__(self, in_channels, out_channels, hidden=16, temperature=1.0,
                 init_on_bias=2.0, layer_id=-1):
        super().__init__()
        if temperature <= 0:
            raise ConfigurationError(f"gate temperature must be positive, got {temperature}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.temperature = float(temperature)
        self.layer_id = layer_id
        self.fc1 = nn.Linear(in_channels, hidden)
        self.bn = nn.BatchNorm1d(hidden)
        self.head = nn.Linear(hidden, 2 * out_channels)
        with torch.no_grad():
            # start with most channels on: the backbone is usually pretrained
            bias = self.head.bias.view(out_channels, 2)
            bias[:, 0] = 0.0
            bias[:, 1] = init_on_bias

    def logits(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ContractViolation(
                f"layer {self.layer_id}: gate expects (B, {self.in_channels}, W, H), "
                f"got {tuple(x.shape)}")
        pooled = x.mean(dim=(2, 3))
        h = F.relu(self.bn(self.fc1(pooled)))
        return self.head(h).view(x.shape[0], self.out_channels, 2)

    def forward(self, x, mode=None, noise=None):
        return gate_forward(x, self, mode=mode, noise=noise)


def gate_forward(activation, gate, mode=None, noise=None):
    if mode is None:
        mode = TRAIN if gate.training else EVAL
    return decide(gate.logits(activation), mode, gate.temperature, noise, gate.layer_id)


def apply_gate(conv_output, decision):
    """Scale each channel of ``conv_output`` by its hard gate bit."""
    hard = decision.hard if isinstance(decision, GateDecision) else decision
    if hard.shape[-1] != conv_output.shape[1]:
        raise ContractViolation(
            f"gate has {hard.shape[-1]} channels, activation has {conv_output.shape[1]}")
    if hard.dim() == 1:
        return conv_output * hard.view(1, -1, 1, 1)
    return conv_output * hard[:, :, None, None]


def straight_through_grad_check(gate, probe, temperature=None, step=1e-4, eps=1e-6, seed=0):
    """Max relative error between the straight-through gradient and central
    finite differences of the relaxed objective.

    The objective is a fixed random linear functional of the gate output, so
    the straight-through gradient and the relaxed gradient coincide exactly.
    Runs in float64 on a copy of ``gate``; Gumbel noise is frozen.
    """
    g = copy.deepcopy(gate).double().train()
    if temperature is not None:
        if temperature <= 0:
            raise ConfigurationError(f"gate temperature must be positive, got {temperature}")
        g.temperature = float(temperature)
    x = probe.detach().double()
    gen = torch.Generator().manual_seed(seed)
    noise = sample_gumbel((x.shape[0], g.out_channels, 2), generator=gen, dtype=torch.float64)
    coef = torch.randn(x.shape[0], g.out_channels, generator=gen, dtype=torch.float64)

    g.zero_grad()
    decision = gate_forward(x, g, mode=TRAIN, noise=noise)
    (coef * decision.hard).sum().backward()

    def relaxed_objective():
        with torch.no_grad():
            return float((coef * relaxed_on(g.logits(x), noise, g.temperature)).sum())

    worst = 0.0
    for p in g.parameters():
        analytic = p.grad.detach().clone().view(-1)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            up = relaxed_objective()
            flat[i] = orig - step
            down = relaxed_objective()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            err = abs(analytic[i].item() - numeric) / (abs(numeric) + eps)
            worst = max(worst, err)
    return worst
