"""Per-identity prototypes: mean hard gate pattern and its thresholded mask."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import torch

from .errors import (ConfigurationError, ContractViolation, FormatVersionError,
                     InsufficientEnrollmentError)
from .gating import GateDecision

PROTOTYPE_FORMAT = "ppp-prototype"
PROTOTYPE_VERSION = 1


def binarize(soft_mask, tau):
    """Element-wise step function: 1 where ``soft_mask >= tau``, else 0."""
    if not 0.0 < tau < 1.0:
        raise ConfigurationError(f"threshold tau must lie in (0, 1), got {tau}")
    soft_mask = torch.as_tensor(soft_mask)
    return (soft_mask >= tau).to(soft_mask.dtype if soft_mask.is_floating_point() else torch.float64)


def _rows(d):
    h = d.hard if isinstance(d, GateDecision) else torch.as_tensor(d)
    h = h.detach()
    return h.unsqueeze(0) if h.dim() == 1 else h


def prototype_mean(decisions):
    """Mean of the hard gate vectors of one identity at one layer (float64)."""
    decisions = list(decisions)
    if not decisions:
        raise InsufficientEnrollmentError("prototype_mean needs at least one decision")
    ids = {d.layer_id for d in decisions if isinstance(d, GateDecision)}
    if len(ids) > 1:
        raise ContractViolation(f"decisions span several layers: {sorted(ids)}")
    rows = torch.cat([_rows(d).double() for d in decisions], dim=0)
    return rows.mean(dim=0)


@dataclass
class Prototype:
    identity: int
    tau: float
    soft_masks: dict
    hard_masks: dict = field(default=None)
    sample_count: int = 1

    def __post_init__(self):
        if self.sample_count < 1:
            raise InsufficientEnrollmentError("prototype needs sample_count >= 1")
        self.soft_masks = {int(k): torch.as_tensor(v, dtype=torch.float64)
                           for k, v in self.soft_masks.items()}
        expected = {k: binarize(v, self.tau) for k, v in self.soft_masks.items()}
        if self.hard_masks is None:
            self.hard_masks = expected
            return
        self.hard_masks = {int(k): torch.as_tensor(v, dtype=torch.float64)
                           for k, v in self.hard_masks.items()}
        if set(self.hard_masks) != set(self.soft_masks):
            raise ContractViolation("hard and soft masks cover different layers")
        for k, v in expected.items():
            if not torch.equal(v, self.hard_masks[k]):
                raise ContractViolation(f"layer {k}: hard mask is not S(soft mask) at tau={self.tau}")

    @property
    def layer_ids(self):
        return sorted(self.soft_masks)

    def to_dict(self):
        return {
            "format": PROTOTYPE_FORMAT,
            "version": PROTOTYPE_VERSION,
            "identity": int(self.identity),
            "tau": float(self.tau),
            "sample_count": int(self.sample_count),
            "layers": [
                {"layer_id": k,
                 "soft_mask": [float(v) for v in self.soft_masks[k].tolist()],
                 "hard_mask": [int(v) for v in self.hard_masks[k].tolist()]}
                for k in self.layer_ids
            ],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != PROTOTYPE_FORMAT:
            raise ContractViolation(f"not a prototype document: format={d.get('format')!r}")
        if int(d.get("version", 0)) > PROTOTYPE_VERSION:
            raise FormatVersionError(f"prototype version {d['version']} is newer than {PROTOTYPE_VERSION}")
        layers = d["layers"]
        return cls(identity=d["identity"], tau=d["tau"], sample_count=d["sample_count"],
                   soft_masks={e["layer_id"]: e["soft_mask"] for e in layers},
                   hard_masks={e["layer_id"]: e["hard_mask"] for e in layers})


def save_prototype(proto, path):
    with open(path, "w") as f:
        json.dump(proto.to_dict(), f, indent=1)
        f.write("\n")


def load_prototype(path):
    with open(path) as f:
        return Prototype.from_dict(json.load(f))


@torch.no_grad()
def gate_decisions(model, inputs, batch_size=256):
    """Eval-mode hard decisions of every gated layer: {layer_id: (N, m) tensor}."""
    was_training = model.training
    model.eval()
    try:
        out = {}
        for start in range(0, inputs.shape[0], batch_size):
            _, decisions = model(inputs[start:start + batch_size], return_decisions=True)
            for d in decisions:
                out.setdefault(d.layer_id, []).append(d.hard)
        return {k: torch.cat(v, dim=0) for k, v in out.items()}
    finally:
        model.train(was_training)


def enroll(model, inputs, identity, tau=0.7):
    """Build one identity's prototype from a personal batch.

    ``identity`` is either a single id or one id per input; mixed ids are
    rejected. The model is run in eval mode and left unmodified.
    """
    if inputs is None or len(inputs) == 0:
        raise InsufficientEnrollmentError("enrollment batch is empty")
    ids = torch.as_tensor(identity).reshape(-1)
    if ids.numel() > 1:
        if ids.numel() != len(inputs):
            raise ContractViolation("one identity per input expected")
        if bool((ids != ids[0]).any()):
            raise ContractViolation(f"enrollment batch mixes identities {sorted(set(ids.tolist()))}")
    if not model.gated:
        raise ContractViolation("enrollment requires a gated model")
    decisions = gate_decisions(model, inputs)
    soft = {k: prototype_mean([v]) for k, v in decisions.items()}
    return Prototype(identity=int(ids[0]), tau=tau, soft_masks=soft, sample_count=len(inputs))


def dispersion(decisions, prototype, layer_id):
    """Mean squared distance of per-sample hard gate vectors to the prototype mask."""
    if layer_id not in prototype.hard_masks:
        raise ContractViolation(f"layer {layer_id} not in prototype")
    if isinstance(decisions, torch.Tensor):
        rows = decisions.detach().double()
    else:
        rows = torch.cat([_rows(d).double() for d in decisions], dim=0)
    diff = rows - prototype.hard_masks[layer_id].unsqueeze(0)
    return float((diff ** 2).sum(dim=1).mean())
