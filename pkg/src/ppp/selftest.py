"""Quick property checks runnable without pytest (``ppp selftest``)."""

from __future__ import annotations

import torch

from .gating import GateModule, straight_through_grad_check
from .losses import BatchGateRecord, prototype_loss, target_loss
from .model import GatedResNet, ModelSpec
from .prototypes import Prototype
from .pruning import build_plan, prune, utilization_rate


def _loss_oracle(z, ids, tau, target):
    layers = list(z)
    proto = tgt = 0.0
    for l in layers:
        rows = z[l].tolist()
        B, m = len(rows), len(rows[0])
        for p in set(ids):
            mine = [r for r, q in zip(rows, ids) if q == p]
            mean = [sum(r[j] for r in mine) / len(mine) for j in range(m)]
            s = [1.0 if v >= tau else 0.0 for v in mean]
            proto += sum(sum((r[j] - s[j]) ** 2 for j in range(m)) for r in mine) / B
        tgt += sum(sum(r) for r in rows) / (B * m)
    return proto / len(layers), (target - tgt / len(layers)) ** 2


def check_losses(trials=20, seed=0):
    gen = torch.Generator().manual_seed(seed)
    for _ in range(trials):
        ids = torch.randint(0, 3, (12,), generator=gen)
        z = {l: (torch.rand(12, 5, generator=gen, dtype=torch.float64) > 0.4).double() for l in range(3)}
        rec = BatchGateRecord(z, ids)
        want_p, want_t = _loss_oracle(z, ids.tolist(), 0.7, 0.6)
        if abs(float(prototype_loss(rec, 0.7)) - want_p) > 1e-10 * max(1.0, want_p):
            return False
        if abs(float(target_loss(rec, 0.6)) - want_t) > 1e-10 * max(1.0, want_t):
            return False
    return True


def check_gradients():
    torch.manual_seed(0)
    gate = GateModule(4, 3, hidden=5)
    probe = torch.randn(6, 4, 3, 3)
    return all(straight_through_grad_check(gate, probe, temperature=t) <= 1e-3 for t in (0.1, 1.0, 5.0))


def check_pruning(trials=3, seed=0):
    torch.manual_seed(seed)
    model = GatedResNet(ModelSpec(widths=(8, 16), blocks_per_stage=1, input_size=8)).eval()
    gen = torch.Generator().manual_seed(seed)
    for _ in range(trials):
        soft = {s.layer_id: torch.rand(s.out_channels, generator=gen, dtype=torch.float64)
                for s in model.layer_specs()}
        proto = Prototype(0, 0.5, soft)
        pruned = prune(model, build_plan(model, proto))
        if pruned.certificate["max_abs_deviation"] > 1e-5:
            return False
        if any(".gate" in n for n, _ in pruned.named_parameters()):
            return False
        if not 0.0 < utilization_rate(pruned.plan, model) <= 1.0:
            return False
    return True


CHECKS = [
    ("loss oracles", check_losses),
    ("straight-through gradient", check_gradients),
    ("pruning equivalence", check_pruning),
]


def run(verbose=False):
    ok = True
    for name, fn in CHECKS:
        passed = bool(fn())
        ok &= passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'}  {name}")
    return ok
