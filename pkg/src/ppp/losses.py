"""Training objectives: prototype regularizer, utilization target, and their sum."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .errors import ConfigurationError, ContractViolation


@dataclass
class LossConfig:
    alpha: float = 10.0
    beta: float = 10.0
    tau: float = 0.7
    target_rate: float = 0.6
    # None: prototypes come from the current minibatch only
    prototype_momentum: float | None = None

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("alpha and beta must be non-negative")
        if not 0.0 < self.tau < 1.0:
            raise ConfigurationError("tau must lie in (0, 1)")
        if not 0.0 < self.target_rate <= 1.0:
            raise ConfigurationError("target_rate must lie in (0, 1]")
        if self.prototype_momentum is not None and not 0.0 <= self.prototype_momentum < 1.0:
            raise ConfigurationError("prototype_momentum must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown loss keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class BatchGateRecord:
    """Gate outputs of one minibatch: ``z[layer_id]`` is (|B|, m_l)."""

    z: dict
    identities: torch.Tensor

    def __post_init__(self):
        self.identities = torch.as_tensor(self.identities).long().reshape(-1)
        if not self.z:
            raise ContractViolation("record has no gated layers")
        for k, v in self.z.items():
            if v.dim() != 2 or v.shape[0] != self.identities.numel():
                raise ContractViolation(
                    f"layer {k}: expected ({self.identities.numel()}, m), got {tuple(v.shape)}")

    @classmethod
    def from_decisions(cls, decisions, identities):
        return cls({d.layer_id: d.hard for d in decisions}, identities)

    @property
    def batch_size(self):
        return self.identities.numel()

    def counts(self):
        ids, n = torch.unique(self.identities, return_counts=True)
        return dict(zip(ids.tolist(), n.tolist()))


def identity_means(z, identities):
    """Per-identity mean rows of ``z`` (detached) and each sample's group index."""
    ids, inverse, counts = torch.unique(identities, return_inverse=True, return_counts=True)
    sums = torch.zeros(len(ids), z.shape[1], dtype=z.dtype).index_add_(0, inverse, z.detach())
    return sums / counts.unsqueeze(1).to(z.dtype), inverse, ids


class RunningPrototypes:
    """Exponential average of per-identity gate means across minibatches."""

    def __init__(self, momentum):
        self.momentum = momentum
        self.state = {}

    def update(self, record):
        out = {}
        for layer, z in record.z.items():
            means, _, ids = identity_means(z, record.identities)
            for row, p in zip(means, ids.tolist()):
                key = (layer, p)
                prev = self.state.get(key)
                cur = row if prev is None else self.momentum * prev + (1 - self.momentum) * row
                self.state[key] = cur
                out[key] = cur
        return out


def prototype_loss(record, tau, running=None):
    """Mean over layers of (1/|B|) sum_i ||z_i - S(mean z of i's identity)||^2.

    The thresholded prototype is a constant target; no gradient flows into it.
    """
    if not 0.0 < tau < 1.0:
        raise ConfigurationError("tau must lie in (0, 1)")
    means_override = running.update(record) if running is not None else None
    total = 0.0
    for layer, z in record.z.items():
        means, inverse, ids = identity_means(z, record.identities)
        if means_override is not None:
            means = torch.stack([means_override[(layer, p)] for p in ids.tolist()])
        target = (means >= tau).to(z.dtype)[inverse]
        total = total + ((z - target) ** 2).sum() / record.batch_size
    return total / len(record.z)


def target_loss(record, target_rate):
    """Squared gap between the mean channel on-rate and ``target_rate``."""
    rates = [z.abs().sum() / (record.batch_size * z.shape[1]) for z in record.z.values()]
    return (target_rate - sum(rates) / len(rates)) ** 2


def total_loss(task_loss, record, cfg, running=None):
    """Returns (total, {"task", "prototype", "target"}) with floats in the breakdown."""
    lp = prototype_loss(record, cfg.tau, running)
    lt = target_loss(record, cfg.target_rate)
    total = task_loss + cfg.alpha * lp + cfg.beta * lt
    breakdown = {"task": float(torch.as_tensor(task_loss).detach()),
                 "prototype": float(lp.detach()), "target": float(lt.detach())}
    return total, breakdown
