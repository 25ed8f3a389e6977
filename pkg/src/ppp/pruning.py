"""Graph generator and network pruner.

``build_plan`` turns a prototype into alive-channel index lists; ``prune``
copies the surviving filters into a physically smaller network with no gate
modules and certifies it against the masked full model.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractViolation, FormatVersionError, PruningDefectError
from .model import GatedResNet, ModelSpec

PRUNED_FORMAT = "ppp-pruned-model"
PRUNED_VERSION = 1
CERT_PROBES = 100
CERT_TOLERANCE = 1e-5
CERT_SEED = 0


@dataclass
class PruningPlan:
    """Alive channel indices per gated layer.

    ``alive_in`` of a block's second conv is the first conv's ``alive_out``;
    ``scatter`` maps the second conv's compacted outputs back to positions in
    the full-width block output.
    """

    out_channels: dict
    alive_out: dict
    alive_in: dict
    scatter: dict
    degenerate: list = field(default_factory=list)

    def __post_init__(self):
        for k, idx in self.scatter.items():
            if len(set(idx)) != len(idx):
                raise ContractViolation(f"layer {k}: scatter map is not injective")

    @property
    def layer_ids(self):
        return sorted(self.alive_out)

    def masks(self, dtype=torch.float32):
        out = {}
        for k, m in self.out_channels.items():
            v = torch.zeros(m, dtype=dtype)
            v[self.alive_out[k]] = 1
            out[k] = v
        return out

    def to_dict(self):
        keyed = lambda d: {str(k): list(map(int, v)) for k, v in sorted(d.items())}
        return {
            "out_channels": {str(k): int(v) for k, v in sorted(self.out_channels.items())},
            "alive_out": keyed(self.alive_out),
            "alive_in": keyed(self.alive_in),
            "scatter": keyed(self.scatter),
            "degenerate": sorted(int(k) for k in self.degenerate),
        }

    @classmethod
    def from_dict(cls, d):
        ints = lambda m: {int(k): list(v) for k, v in m.items()}
        return cls(out_channels={int(k): int(v) for k, v in d["out_channels"].items()},
                   alive_out=ints(d["alive_out"]), alive_in=ints(d["alive_in"]),
                   scatter=ints(d["scatter"]), degenerate=list(d.get("degenerate", [])))


def plan_from_masks(model, hard_masks, soft_masks=None):
    """Plan from per-layer 0/1 masks; an all-zero layer keeps its highest-soft channel."""
    expected = {b.ids[0] for b in model.blocks} | {b.ids[1] for b in model.blocks}
    if set(hard_masks) != expected:
        raise ContractViolation(
            f"masks cover layers {sorted(hard_masks)}, model has {sorted(expected)}")
    out_channels, alive_out, alive_in, scatter, degenerate = {}, {}, {}, {}, []
    for blk in model.blocks:
        for lid in blk.ids:
            mask = torch.as_tensor(hard_masks[lid]).reshape(-1)
            if mask.numel() != blk.out_ch:
                raise ContractViolation(f"layer {lid}: mask has {mask.numel()} entries, conv has {blk.out_ch}")
            alive = torch.nonzero(mask > 0.5).flatten().tolist()
            if not alive:
                soft = soft_masks[lid] if soft_masks is not None else torch.zeros(blk.out_ch)
                alive = [int(torch.as_tensor(soft).argmax())]
                degenerate.append(lid)
            out_channels[lid] = blk.out_ch
            alive_out[lid] = alive
        c1, c2 = blk.ids
        alive_in[c1] = list(range(blk.in_ch))
        alive_in[c2] = list(alive_out[c1])
        scatter[c2] = list(alive_out[c2])
    return PruningPlan(out_channels, alive_out, alive_in, scatter, degenerate)


def build_plan(model, prototype):
    if not model.gated:
        raise ContractViolation("only gated models can be planned from a prototype")
    if set(prototype.hard_masks) != set(model.gated_layer_ids()):
        raise ContractViolation("prototype layers do not match the model's gated layers")
    return plan_from_masks(model, prototype.hard_masks, prototype.soft_masks)


def full_plan(model):
    return plan_from_masks(model, {lid: torch.ones(b.out_ch) for b in model.blocks for lid in b.ids})


# ---------------------------------------------------------------------------
# pruned network


class PrunedBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride, n1, scatter_idx, has_shortcut):
        super().__init__()
        self.out_ch = out_ch
        self.conv1 = nn.Conv2d(in_ch, n1, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(n1)
        self.conv2 = nn.Conv2d(n1, len(scatter_idx), 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(len(scatter_idx))
        self.register_buffer("scatter_idx", torch.tensor(scatter_idx, dtype=torch.long))
        self.shortcut = None
        if has_shortcut:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False),
                                          nn.BatchNorm2d(out_ch))

    def forward(self, x):
        branch = self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x)))))
        skip = x if self.shortcut is None else self.shortcut(x)
        full = skip.new_zeros(skip.shape)
        full[:, self.scatter_idx] = branch
        return F.relu(full + skip)


class PrunedModel(nn.Module):
    """Compacted, gate-free personal network."""

    def __init__(self, spec: ModelSpec, plan: PruningPlan, provenance=None, certificate=None):
        super().__init__()
        self.spec, self.plan = spec, plan
        self.provenance = dict(provenance or {})
        self.certificate = dict(certificate or {})
        w0 = spec.widths[0]
        self.conv1 = nn.Conv2d(spec.in_channels, w0, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(w0)
        blocks, in_ch, lid = [], w0, 0
        for s, width in enumerate(spec.widths):
            for b in range(spec.blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(PrunedBlock(in_ch, width, stride, len(plan.alive_out[lid]),
                                          plan.scatter[lid + 1], stride != 1 or in_ch != width))
                in_ch, lid = width, lid + 2
        self.blocks = nn.ModuleList(blocks)
        self.fc = nn.Linear(in_ch, spec.num_classes)
        self.eval()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        for blk in self.blocks:
            out = blk(out)
        return self.fc(F.adaptive_avg_pool2d(out, 1).flatten(1))


def _copy_bn(dst, src, idx=None):
    for name in ("weight", "bias", "running_mean", "running_var"):
        t = getattr(src, name).detach()
        getattr(dst, name).data.copy_(t if idx is None else t[idx])
    dst.num_batches_tracked.copy_(src.num_batches_tracked)


def state_digest(module):
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _check_plan(model, plan):
    for blk in model.blocks:
        c1, c2 = blk.ids
        for lid in (c1, c2):
            if lid not in plan.alive_out or plan.out_channels.get(lid) != blk.out_ch:
                raise ContractViolation(f"plan does not match model at layer {lid}")
            idx = plan.alive_out[lid]
            if not idx or min(idx) < 0 or max(idx) >= blk.out_ch or len(set(idx)) != len(idx):
                raise ContractViolation(f"plan has invalid alive indices at layer {lid}")
        if plan.alive_in[c2] != plan.alive_out[c1] or plan.scatter[c2] != plan.alive_out[c2]:
            raise ContractViolation(f"plan propagation inconsistent in block {blk.ids}")


@torch.no_grad()
def certify(model, pruned, plan, probes=CERT_PROBES, seed=CERT_SEED):
    """Max abs logit deviation between the masked full model and ``pruned``."""
    gen = torch.Generator().manual_seed(seed)
    spec = model.spec
    x = torch.randn(probes, spec.in_channels, spec.input_size, spec.input_size, generator=gen)
    was_training = model.training
    model.eval()
    try:
        ref = model(x, masks=plan.masks())
    finally:
        model.train(was_training)
    return float((pruned(x) - ref).abs().max())


@torch.no_grad()
def prune(model, plan, provenance=None, probes=CERT_PROBES, tolerance=CERT_TOLERANCE):
    """Copy the surviving filters of ``model`` into a PrunedModel and certify it."""
    _check_plan(model, plan)
    pruned = PrunedModel(model.spec, plan)
    pruned.conv1.weight.copy_(model.conv1.weight)
    _copy_bn(pruned.bn1, model.bn1)
    for src, dst in zip(model.blocks, pruned.blocks):
        a1 = torch.tensor(plan.alive_out[src.ids[0]])
        a2 = torch.tensor(plan.alive_out[src.ids[1]])
        dst.conv1.weight.copy_(src.conv1.weight[a1])
        _copy_bn(dst.bn1, src.bn1, a1)
        dst.conv2.weight.copy_(src.conv2.weight[a2][:, a1])
        _copy_bn(dst.bn2, src.bn2, a2)
        if src.shortcut is not None:
            dst.shortcut[0].weight.copy_(src.shortcut[0].weight)
            _copy_bn(dst.shortcut[1], src.shortcut[1])
    pruned.fc.weight.copy_(model.fc.weight)
    pruned.fc.bias.copy_(model.fc.bias)

    deviation = certify(model, pruned, plan, probes=probes)
    pruned.certificate = {"probe_count": probes, "probe_seed": CERT_SEED,
                          "max_abs_deviation": deviation, "tolerance": tolerance}
    pruned.provenance = {"source_digest": state_digest(model), **(provenance or {})}
    if not deviation <= tolerance:
        raise PruningDefectError(
            f"pruned model deviates from the masked full model by {deviation:.3e} > {tolerance:.0e}")
    return pruned


def save_pruned(pruned, path):
    buf = io.BytesIO()
    torch.save({
        "format": PRUNED_FORMAT,
        "version": PRUNED_VERSION,
        "spec": pruned.spec.to_dict(),
        "plan": pruned.plan.to_dict(),
        "provenance": pruned.provenance,
        "certificate": pruned.certificate,
        "state_dict": pruned.state_dict(),
    }, buf)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_pruned(path):
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != PRUNED_FORMAT:
        raise ContractViolation(f"{path}: not a pruned-model file")
    if int(blob.get("version", 0)) > PRUNED_VERSION:
        raise FormatVersionError(
            f"{path}: pruned-model version {blob['version']} is newer than supported {PRUNED_VERSION}")
    pruned = PrunedModel(ModelSpec.from_dict(blob["spec"]), PruningPlan.from_dict(blob["plan"]),
                         blob["provenance"], blob["certificate"])
    pruned.load_state_dict(blob["state_dict"])
    return pruned.eval()


# ---------------------------------------------------------------------------
# accounting


@dataclass(frozen=True)
class ConvEntry:
    name: str
    in_channels: int
    out_channels: int
    kernel: int
    alive_in: int
    alive_out: int
    out_hw: tuple

    @property
    def params(self):
        return self.out_channels * self.in_channels * self.kernel ** 2


def conv_inventory(model, plan=None, input_size=None):
    """Every convolution of ``model`` with alive channel counts under ``plan``.

    Ungated convolutions (stem, projection shortcuts) count as fully alive.
    """
    size = input_size or model.spec.input_size
    w0 = model.spec.widths[0]
    entries = [ConvEntry("conv1", model.spec.in_channels, w0, 3, model.spec.in_channels, w0, (size, size))]
    for i, blk in enumerate(model.blocks):
        out = (size - 1) // blk.stride + 1
        c1, c2 = blk.ids
        if plan is None:
            n1_in, n1, n2_in, n2 = blk.in_ch, blk.out_ch, blk.out_ch, blk.out_ch
        else:
            n1_in, n1 = len(plan.alive_in[c1]), len(plan.alive_out[c1])
            n2_in, n2 = len(plan.alive_in[c2]), len(plan.alive_out[c2])
        entries.append(ConvEntry(f"blocks.{i}.conv1", blk.in_ch, blk.out_ch, 3, n1_in, n1, (out, out)))
        entries.append(ConvEntry(f"blocks.{i}.conv2", blk.out_ch, blk.out_ch, 3, n2_in, n2, (out, out)))
        if blk.shortcut is not None:
            entries.append(ConvEntry(f"blocks.{i}.shortcut.0", blk.in_ch, blk.out_ch, 1,
                                     blk.in_ch, blk.out_ch, (out, out)))
        size = out
    return entries


def utilization_from_entries(entries, convention="propagated"):
    total = sum(e.params for e in entries)
    if convention == "propagated":
        alive = sum(e.alive_out * e.alive_in * e.kernel ** 2 for e in entries)
    elif convention == "output_only":
        alive = sum(e.alive_out * e.in_channels * e.kernel ** 2 for e in entries)
    else:
        raise ConfigurationError(f"unknown utilization convention {convention!r}")
    return alive / total


def utilization_rate(plan, model, convention="propagated"):
    """Fraction of conv weights that survive pruning.

    ``propagated`` counts a weight alive only if both its output and input
    channel are alive; ``output_only`` ignores the input side.
    """
    return utilization_from_entries(conv_inventory(model, plan), convention)


def conv_macs(entries):
    return sum(e.alive_out * e.alive_in * e.kernel ** 2 * e.out_hw[0] * e.out_hw[1] for e in entries)


def flops_estimate(plan, model, input_spatial=None):
    """Multiply-accumulate count of the conv layers under ``plan``."""
    return conv_macs(conv_inventory(model, plan, input_spatial))
