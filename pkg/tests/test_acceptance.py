"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import json
import random
import time

import pytest
import torch

from ppp.gating import GateModule, straight_through_grad_check
from ppp.harness import (REFERENCE_ROWS, EvalReport, RunConfig, evaluate, format_report,
                         load_checkpoint, model_from_checkpoint, save_checkpoint, train)
from ppp.losses import BatchGateRecord, prototype_loss, target_loss
from ppp.prototypes import Prototype, enroll, load_prototype, save_prototype
from ppp.pruning import build_plan, load_pruned, prune, save_pruned

from test_losses import oracle_prototype_loss, oracle_target_loss, random_batch, rel_close

TARGET = 0.6


def test_criterion_1_pruning_equivalence(desk, verdict):
    start = time.perf_counter()
    model, cfg = model_from_checkpoint(desk.ckpt["ppp"])
    gen = torch.Generator().manual_seed(0)
    protos = [Prototype(0, cfg.loss.tau, {s.layer_id: torch.rand(s.out_channels, generator=gen,
                                                                 dtype=torch.float64)
                                          for s in model.layer_specs()})
              for _ in range(12)]
    # two enrolled prototypes as well, so trained masks are covered
    for p in (0, 5):
        idx = desk.test_ds.indices_of(p)[:32]
        protos.append(enroll(model, desk.test_ds.x[idx], p, cfg.loss.tau))
    probes = torch.randn(100, 3, 16, 16, generator=torch.Generator().manual_seed(1))
    worst = 0.0
    for proto in protos:
        plan = build_plan(model, proto)
        pruned = prune(model, plan)
        with torch.no_grad():
            dev = (pruned(probes) - model(probes, masks=plan.masks())).abs().max().item()
        worst = max(worst, dev, pruned.certificate["max_abs_deviation"])
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and elapsed < 60
    verdict(1, "pruning equivalence", ok,
            f"{len(protos)} prototypes, max |dlogit| = {worst:.2e} (<= 1e-5), {elapsed:.1f}s (< 60s)")
    assert ok


def test_criterion_2_loss_oracles(verdict):
    start = time.perf_counter()
    rng = random.Random(2)
    trials = 200
    mismatches = 0
    for _ in range(trials):
        z, ids = random_batch(rng)
        tau, target = rng.uniform(0.05, 0.95), rng.uniform(0.05, 1.0)
        rec = BatchGateRecord(z, ids)
        mismatches += not rel_close(prototype_loss(rec, tau).item(), oracle_prototype_loss(z, ids, tau))
        mismatches += not rel_close(target_loss(rec, target).item(), oracle_target_loss(z, target))

    two = {0: torch.tensor([[1.0, 1.0], [0.0, 0.0]], dtype=torch.float64)}
    hand = [prototype_loss(BatchGateRecord(two, [0, 0]), 0.7).item()]
    shape = {0: (4, 5), 1: (4, 10)}
    ones = {k: torch.ones(s, dtype=torch.float64) for k, s in shape.items()}
    zeros = {k: torch.zeros(s, dtype=torch.float64) for k, s in shape.items()}
    sixty = {0: torch.tensor([[1.0, 1, 1, 0, 0]] * 4, dtype=torch.float64),
             1: torch.tensor([[1.0] * 6 + [0.0] * 4] * 4, dtype=torch.float64)}
    for z in (ones, zeros, sixty):
        hand.append(target_loss(BatchGateRecord(z, [0] * 4), TARGET).item())
    # 0.16 has no exact binary form: "exact" means equal to the float value of (T - r)^2
    expected = [1.0, (TARGET - 1.0) ** 2, (TARGET - 0.0) ** 2, 0.0]
    exact = hand == expected
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and exact and elapsed < 60
    verdict(2, "loss oracles", ok,
            f"{trials} random batches, {mismatches} mismatches at 1e-10 rel; "
            f"hand values {[round(v, 12) for v in hand]} reproduced exactly: {exact}; {elapsed:.1f}s")
    assert ok


def test_criterion_3_gradient_check(verdict):
    start = time.perf_counter()
    errors = {}
    torch.manual_seed(3)
    for n, m, hidden in ((4, 3, 5), (2, 6, 4)):
        gate = GateModule(n, m, hidden=hidden)
        probe = torch.randn(5, n, 3, 3)
        for t in (0.1, 1.0, 5.0):
            errors[f"n{n}m{m} T={t}"] = straight_through_grad_check(gate, probe, temperature=t)
    flat = GateModule(4, 3, hidden=5)
    with torch.no_grad():
        flat.head.weight.zero_()
        flat.head.bias.zero_()
    errors["zero head"] = straight_through_grad_check(flat, torch.randn(5, 4, 3, 3))
    worst = max(errors.values())
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-3 and elapsed < 60
    verdict(3, "straight-through gradient", ok,
            f"{len(errors)} configurations, worst rel err {worst:.2e} (<= 1e-3), {elapsed:.1f}s")
    assert ok


def test_criterion_4_utilization_targeting(desk, verdict):
    rep = desk.report("ppp", "prototype")
    cpu = desk.cpu_seconds["vanilla"] + desk.cpu_seconds["ppp"]
    ok = abs(rep.util_propagated - TARGET) <= 0.15 and cpu <= 600
    verdict(4, "utilization targeting", ok,
            f"PPP prototype-mode utilization {rep.util_propagated:.3f} (target {TARGET} +/- 0.15), "
            f"output-only {rep.util_output_only:.3f}; training {cpu:.0f}s CPU (<= 600s)")
    assert ok


def test_criterion_5_personalization_effect(desk, verdict):
    ps, pp = desk.report("ppp", "single"), desk.report("ppp", "prototype")
    ns, np_ = desk.report("noreg", "single"), desk.report("noreg", "prototype")
    ppp_ok = pp.accuracy_pct >= ps.accuracy_pct - 2.0
    noreg_ok = np_.accuracy_pct <= ns.accuracy_pct - 10.0
    verdict(5, "personalization effect", ppp_ok and noreg_ok,
            f"PPP single {ps.accuracy_pct:.1f} -> prototype {pp.accuracy_pct:.1f} (drop <= 2: {ppp_ok}); "
            f"NoReg single {ns.accuracy_pct:.1f} -> prototype {np_.accuracy_pct:.1f} (drop >= 10: {noreg_ok})")
    assert ppp_ok and noreg_ok


def test_criterion_6_dispersion(desk, verdict):
    ppp, noreg = desk.report("ppp", "single"), desk.report("noreg", "single")
    assert set(ppp.layer_dispersion) == set(noreg.layer_dispersion)
    assert [r["identity"] for r in ppp.per_identity] == [r["identity"] for r in noreg.per_identity]
    lower = sum(ppp.layer_dispersion[k] < noreg.layer_dispersion[k] for k in ppp.layer_dispersion)
    ok = ppp.mean_dispersion < noreg.mean_dispersion
    verdict(6, "dispersion diagnostic", ok,
            f"mean dispersion PPP {ppp.mean_dispersion:.4f} < NoReg {noreg.mean_dispersion:.4f}; "
            f"strictly lower on {lower}/{len(ppp.layer_dispersion)} layers")
    assert ok


def test_criterion_7_reference_rows_only(desk, verdict):
    reports = [desk.report("vanilla", "vanilla"), desk.report("ppp", "single"),
               desk.report("ppp", "prototype"), desk.report("noreg", "prototype")]
    text = format_report(reports)
    desk_part, ref_part = text.split("Reference rows")
    ref_lines = [l for l in ref_part.splitlines() if l.endswith("[reference]")]
    rows_ok = len(ref_lines) == len(REFERENCE_ROWS) and all(
        f"{acc:.1f}" in line and f"{util:.1f}" in line
        for line, (_, _, _, acc, util) in zip(ref_lines, REFERENCE_ROWS))
    labelled = "NOT reproduced" in ref_part and "[reference]" not in desk_part
    desk_rows = [l for l in desk_part.splitlines()[2:] if l.strip()]
    ok = rows_ok and labelled and len(desk_rows) == 4
    verdict(7, "explicit non-reproducibility", ok,
            f"{len(ref_lines)} full-scale rows printed as reference only, "
            f"{len(desk_rows)} desk-scale rows measured")
    assert ok


def test_criterion_8_determinism_and_persistence(desk, verdict, tmp_path):
    checks = {}
    # bitwise-identical checkpoints from repeated runs of the desk PPP config
    again = train(desk.configs["ppp"], desk.train_ds, pretrained=desk.ckpt["vanilla"])
    a, b = tmp_path / "a.pt", tmp_path / "b.pt"
    save_checkpoint(desk.ckpt["ppp"], a)
    save_checkpoint(again, b)
    checks["checkpoint bytes"] = a.read_bytes() == b.read_bytes()
    first = evaluate(desk.ckpt["ppp"], desk.test_ds, "prototype").to_json()
    second = evaluate(again, desk.test_ds, "prototype").to_json()
    checks["report bytes"] = first == second

    # round trips of every artifact format
    ck = load_checkpoint(a)
    checks["checkpoint"] = all(torch.equal(v, ck["state_dict"][k]) for k, v in desk.ckpt["ppp"]["state_dict"].items())
    cfg_path = tmp_path / "cfg.json"
    desk.configs["ppp"].save(cfg_path)
    checks["config"] = RunConfig.from_file(cfg_path) == desk.configs["ppp"]
    rep = desk.report("ppp", "prototype")
    rep_path = tmp_path / "rep.json"
    rep.save(rep_path)
    checks["report"] = EvalReport.load(rep_path) == rep
    model, cfg = model_from_checkpoint(desk.ckpt["ppp"])
    proto = enroll(model, desk.test_ds.x[desk.test_ds.indices_of(1)[:32]], 1, cfg.loss.tau)
    save_prototype(proto, tmp_path / "p.json")
    back = load_prototype(tmp_path / "p.json")
    checks["prototype"] = all(torch.equal(back.hard_masks[k], proto.hard_masks[k]) and
                              torch.allclose(back.soft_masks[k], proto.soft_masks[k], rtol=1e-12, atol=0)
                              for k in proto.layer_ids)
    pruned = prune(model, build_plan(model, proto))
    save_pruned(pruned, tmp_path / "m.pt")
    x = desk.test_ds.x[:50]
    with torch.no_grad():
        checks["pruned model"] = torch.equal(load_pruned(tmp_path / "m.pt")(x), pruned(x))
    man = tmp_path / "manifest.json"
    man.write_text(json.dumps(desk.train_ds.manifest, sort_keys=True))
    checks["manifest"] = json.loads(man.read_text())["counts"] == desk.train_ds.manifest["counts"]

    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    verdict(8, "determinism and persistence", ok,
            f"{len(checks) - len(failed)}/{len(checks)} checks hold" + (f", failed: {failed}" if failed else ""))
    assert ok
