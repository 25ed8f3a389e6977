import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from ppp.errors import ConfigurationError, ContractViolation, FormatVersionError, PruningDefectError
from ppp.model import GatedResNet, ModelSpec
from ppp.prototypes import Prototype
from ppp.pruning import (PruningPlan, build_plan, conv_inventory, flops_estimate, full_plan,
                         load_pruned, plan_from_masks, prune, save_pruned, utilization_from_entries,
                         utilization_rate)

from conftest import randomize_bn, small_spec


def random_prototype(model, gen, tau=0.7):
    soft = {s.layer_id: torch.rand(s.out_channels, generator=gen, dtype=torch.float64)
            for s in model.layer_specs()}
    return Prototype(0, tau, soft)


def masks_of(model, fill=1.0):
    return {s.layer_id: torch.full((s.out_channels,), fill) for s in model.layer_specs()}


def conv_param_count(module):
    return sum(m.weight.numel() for m in module.modules() if isinstance(m, nn.Conv2d))


def test_all_ones_plan_is_identity(small_model):
    plan = full_plan(small_model)
    for blk in small_model.blocks:
        c1, c2 = blk.ids
        assert plan.alive_out[c1] == list(range(blk.out_ch))
        assert plan.alive_in[c2] == list(range(blk.out_ch))
        assert plan.scatter[c2] == list(range(blk.out_ch))


def test_propagation_example():
    torch.manual_seed(0)
    model = GatedResNet(ModelSpec(widths=(4,), blocks_per_stage=1, input_size=6)).eval()
    plan = plan_from_masks(model, {0: torch.tensor([1.0, 0, 1, 0]), 1: torch.ones(4)})
    assert len(plan.alive_in[1]) == 2 and len(plan.alive_out[1]) == 4
    pruned = prune(model, plan)
    assert pruned.blocks[0].conv1.weight.shape[0] == 2
    assert pruned.blocks[0].conv2.weight.shape[:2] == (4, 2)


def test_alive_counts_equal_popcounts(desk_model):
    gen = torch.Generator().manual_seed(1)
    for _ in range(5):
        masks = {k: (torch.rand(v.numel(), generator=gen) < 0.6).float()
                 for k, v in masks_of(desk_model).items()}
        plan = plan_from_masks(desk_model, masks)
        for k, m in masks.items():
            pop = int(m.sum())
            assert len(plan.alive_out[k]) == max(pop, 1)
            assert (k in plan.degenerate) == (pop == 0)


def test_degenerate_layer_keeps_best_soft_channel(small_model):
    soft = {k: torch.full((v.numel(),), 0.9, dtype=torch.float64) for k, v in masks_of(small_model).items()}
    soft[1] = torch.tensor([0.1, 0.6, 0.3] + [0.0] * (soft[1].numel() - 3), dtype=torch.float64)
    plan = build_plan(small_model, Prototype(0, 0.7, soft))
    assert plan.alive_out[1] == [1]
    assert plan.degenerate == [1]
    assert prune(small_model, plan).certificate["max_abs_deviation"] <= 1e-5


def test_identity_pruning_is_exact(small_model):
    plan = full_plan(small_model)
    pruned = prune(small_model, plan)
    x = torch.randn(20, 3, 8, 8)
    with torch.no_grad():
        assert torch.equal(pruned(x), small_model(x, masks=plan.masks()))
    assert pruned.certificate["max_abs_deviation"] == 0.0
    assert conv_param_count(pruned) == conv_param_count(small_model)


def test_random_prototypes_are_equivalent(desk_model):
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(50, 3, 16, 16, generator=gen)
    for _ in range(10):
        plan = build_plan(desk_model, random_prototype(desk_model, gen, tau=0.5))
        pruned = prune(desk_model, plan)
        with torch.no_grad():
            dev = (pruned(x) - desk_model(x, masks=plan.masks())).abs().max().item()
        assert dev <= 1e-5
        assert pruned.certificate["max_abs_deviation"] <= 1e-5
        assert not any("gate" in n for n, _ in pruned.named_parameters())


def test_pruned_model_is_independent_of_source(small_model):
    plan = build_plan(small_model, random_prototype(small_model, torch.Generator().manual_seed(2), 0.5))
    pruned = prune(small_model, plan)
    x = torch.randn(5, 3, 8, 8)
    with torch.no_grad():
        before = pruned(x)
        for p in small_model.parameters():
            p.add_(1.0)
        assert torch.equal(pruned(x), before)


def test_inconsistent_plans_rejected(small_model):
    plan = full_plan(small_model)
    bad = PruningPlan.from_dict(plan.to_dict())
    bad.alive_in[1] = [0]
    with pytest.raises(ContractViolation):
        prune(small_model, bad)
    with pytest.raises(ContractViolation):
        PruningPlan({1: 4}, {1: [0, 1]}, {1: [0]}, {1: [0, 0]})
    with pytest.raises(ContractViolation):
        build_plan(small_model, Prototype(0, 0.7, {0: [1.0] * 8}))


def test_defect_is_detected(small_model, monkeypatch):
    import ppp.pruning as pruning
    real = pruning._copy_bn

    def sloppy(dst, src, idx=None):
        real(dst, src, idx)
        dst.bias.data.add_(0.1)

    monkeypatch.setattr(pruning, "_copy_bn", sloppy)
    with pytest.raises(PruningDefectError):
        prune(small_model, full_plan(small_model))


def test_pruned_round_trip(tmp_path, small_model):
    plan = build_plan(small_model, random_prototype(small_model, torch.Generator().manual_seed(3), 0.5))
    pruned = prune(small_model, plan, provenance={"identity": 2})
    path = tmp_path / "pruned.pt"
    save_pruned(pruned, path)
    loaded = load_pruned(path)
    x = torch.randn(10, 3, 8, 8)
    with torch.no_grad():
        assert torch.equal(loaded(x), pruned(x))
    assert loaded.plan.to_dict() == plan.to_dict()
    assert loaded.certificate == pruned.certificate
    assert loaded.provenance["identity"] == 2


def test_pruned_future_version_fails(tmp_path, small_model):
    path = tmp_path / "pruned.pt"
    save_pruned(prune(small_model, full_plan(small_model)), path)
    blob = torch.load(path, weights_only=True)
    blob["version"] = 2
    torch.save(blob, path)
    with pytest.raises(FormatVersionError):
        load_pruned(path)


# ---------------------------------------------------------------------------
# accounting


def chained_net():
    """One block 8 -> 8 with no stem cost worth counting against the example."""
    return GatedResNet(ModelSpec(widths=(8,), blocks_per_stage=1, in_channels=8, input_size=4))


def test_utilization_examples():
    model = chained_net()
    assert utilization_rate(full_plan(model), model) == 1.0
    plan = plan_from_masks(model, {0: torch.tensor([1.0] * 4 + [0.0] * 4), 1: torch.ones(8)})
    block = [e for e in conv_inventory(model, plan) if e.name.startswith("blocks")]
    assert utilization_from_entries(block) == 0.5
    with pytest.raises(ConfigurationError):
        utilization_rate(plan, model, "by_vibes")


def test_flops_examples():
    model = chained_net()
    conv = [e for e in conv_inventory(model, full_plan(model)) if e.name == "blocks.0.conv2"]
    from ppp.pruning import conv_macs
    assert conv_macs(conv) == 9216
    plan = plan_from_masks(model, {0: torch.ones(8), 1: torch.tensor([1.0] * 4 + [0.0] * 4)})
    conv = [e for e in conv_inventory(model, plan) if e.name == "blocks.0.conv2"]
    assert conv_macs(conv) == 4608


def test_flops_match_hook_tabulation(desk_model):
    gen = torch.Generator().manual_seed(4)
    plan = build_plan(desk_model, random_prototype(desk_model, gen, tau=0.5))
    pruned = prune(desk_model, plan)
    rows = []

    def hook(mod, inp, out):
        # MACs of a dense conv = out elements * in channels * k * k
        rows.append(out.shape[1] * out.shape[2] * out.shape[3] * mod.in_channels * mod.kernel_size[0] ** 2)

    handles = [m.register_forward_hook(hook) for m in pruned.modules() if isinstance(m, nn.Conv2d)]
    with torch.no_grad():
        pruned(torch.randn(1, 3, 16, 16))
    for h in handles:
        h.remove()
    assert flops_estimate(plan, desk_model) == sum(rows)
    # the pruned artifact's own weight count is the propagated convention
    total = conv_param_count(desk_model)
    assert utilization_rate(plan, desk_model) == pytest.approx(conv_param_count(pruned) / total, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**20))
def test_utilization_monotone(seed):
    gen = torch.Generator().manual_seed(seed)
    model = GatedResNet(small_spec())
    b = {k: (torch.rand(v.numel(), generator=gen) < 0.7).float() for k, v in masks_of(model).items()}
    a = {k: v * (torch.rand(v.numel(), generator=gen) < 0.7).float() for k, v in b.items()}
    for k in a:
        # keep both plans non-degenerate so the masks really are ordered
        a[k][0] = b[k][0] = 1.0
    pa, pb = plan_from_masks(model, a), plan_from_masks(model, b)
    for conv in ("propagated", "output_only"):
        assert utilization_rate(pa, model, conv) <= utilization_rate(pb, model, conv)
    assert utilization_rate(pa, model) <= utilization_rate(pa, model, "output_only")


def test_equivalence_under_random_batchnorm():
    torch.manual_seed(5)
    model = randomize_bn(GatedResNet(small_spec()), seed=5).eval()
    gen = torch.Generator().manual_seed(5)
    for _ in range(5):
        pruned = prune(model, build_plan(model, random_prototype(model, gen, tau=0.6)))
        assert pruned.certificate["max_abs_deviation"] <= 1e-5
